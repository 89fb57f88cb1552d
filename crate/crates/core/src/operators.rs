//! Pointwise evaluation of `(-Delta)^s`, `G_u`, `grad^s`, `div^s`, the nonlocal
//! normal derivative, the s-mean and the Poisson kernel.
//!
//! Integrals over R^n are evaluated along rays. Three routes are used:
//!
//! * rays from `x` pairing `x + rho theta` with `x - rho theta`, so that the
//!   principal value disappears and the integrand near `rho = 0` is a pure power
//!   times a smooth function of `rho^2`;
//! * for compactly supported fields and `x` well outside the support, polar
//!   coordinates around the support, where the kernel is smooth;
//! * for fields with a singular point, a smooth cutoff around `x` separating the
//!   second difference near `x` from an integral graded toward the singularity.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache_store;
use crate::constants::FracParams;
use crate::error::{Error, Result, ResultExt};
use crate::fields::{
    squared_field, FieldFn, FieldMeta, QuantizedCache, Regularity, ScalarField, VectorField,
};
use crate::geometry::{axis, axpy, dist, dot, norm, scale, sub, Ball, Point, ORIGIN};
use crate::quadrature::{
    ray_tail, EndBehavior, Estimate, QuadratureSpec, Ray, Resolution, Scales, SphereRule,
    TailEnvelope,
};

/// A scalar operator value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorValue {
    pub value: f64,
    pub error: f64,
    /// Radius beyond which the integral was replaced by its analytic tail.
    pub truncation_radius: f64,
}

impl OperatorValue {
    pub fn estimate(&self) -> Estimate {
        Estimate::new(self.value, self.error)
    }
}

/// A vector operator value with per-component errors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VectorValue {
    pub value: Point,
    pub error: Point,
    pub truncation_radius: f64,
}

impl VectorValue {
    pub fn component(&self, i: usize) -> OperatorValue {
        OperatorValue {
            value: self.value[i],
            error: self.error[i],
            truncation_radius: self.truncation_radius,
        }
    }

    /// `|v|^2` with a first-order error bound.
    pub fn norm_squared(&self) -> Estimate {
        let value = dot(&self.value, &self.value);
        let error = (0..3)
            .map(|i| 2.0 * self.value[i].abs() * self.error[i] + self.error[i] * self.error[i])
            .sum();
        Estimate::new(value, error)
    }
}

fn scalar(v: VectorValue) -> OperatorValue {
    v.component(0)
}

fn check_inputs(fields: &[&ScalarField], params: &FracParams, spec: &QuadratureSpec) -> Result<()> {
    spec.validate()?;
    for f in fields {
        if f.dim() != params.n {
            return Err(Error::invalid(format!(
                "field `{}` lives in dimension {} but parameters have n = {}",
                f.id(),
                f.dim(),
                params.n
            )));
        }
    }
    Ok(())
}

fn neg(p: &Point) -> Point {
    scale(p, -1.0)
}

fn scale_envelope(env: &TailEnvelope, c: f64) -> TailEnvelope {
    if env.is_compact() {
        *env
    } else {
        TailEnvelope::new(env.amplitude * c.abs(), env.power, env.r0)
    }
}

/// Integrates the first `m` components of `f` along `ray`, evaluating `f` once per node.
pub(crate) fn integrate_components<F>(ray: &Ray, res: &Resolution, m: usize, mut f: F) -> Result<[f64; 4]>
where
    F: FnMut(f64) -> Result<[f64; 4]>,
{
    let mut rest: Vec<[f64; 4]> = Vec::new();
    let mut out = [0.0; 4];
    out[0] = ray.integrate(res, &mut |t| {
        let v = f(t)?;
        rest.push(v);
        Ok(v[0])
    })?;
    for (k, slot) in out.iter_mut().enumerate().take(m).skip(1) {
        let mut it = rest.iter();
        *slot = ray.integrate(res, &mut |_| Ok(it.next().expect("same nodes on replay")[k]))?;
    }
    Ok(out)
}

/// Sums `f(i)` over `0..len` in index order, evaluating in parallel.
fn ordered_sum<F>(len: usize, m: usize, f: F) -> Result<[f64; 4]>
where
    F: Fn(usize) -> Result<[f64; 4]> + Sync + Send,
{
    let parts: Vec<Result<[f64; 4]>> = if len > 1 {
        (0..len).into_par_iter().map(&f).collect()
    } else {
        (0..len).map(&f).collect()
    };
    let mut acc = [0.0; 4];
    for p in parts {
        let p = p?;
        for k in 0..m {
            acc[k] += p[k];
        }
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Symmetric ray route

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pairing {
    Laplacian,
    Energy,
    Gradient,
    Carre,
}

impl Pairing {
    fn prefactor(self, p: &FracParams) -> f64 {
        match self {
            Pairing::Gradient => 0.5 * p.mu_ns,
            _ => 0.5 * p.c_ns,
        }
    }

    /// Decay of the kernel along a ray.
    fn decay(self, s: f64) -> f64 {
        match self {
            Pairing::Gradient => 1.0 + s,
            _ => 1.0 + 2.0 * s,
        }
    }

    fn start(self, s: f64) -> Result<EndBehavior> {
        match self {
            Pairing::Gradient => EndBehavior::algebraic(-s, 2),
            _ => EndBehavior::algebraic(1.0 - 2.0 * s, 2),
        }
    }

    /// Numerator for the pair `x + rho theta`, `x - rho theta` given values at `x` (`c`),
    /// at the plus point (`p`) and at the minus point (`m`).
    fn along(self, c: &[f64; 2], p: &[f64; 2], m: &[f64; 2]) -> f64 {
        match self {
            Pairing::Laplacian => (c[0] - p[0]) + (c[0] - m[0]),
            Pairing::Energy => (c[0] - p[0]).powi(2) + (c[0] - m[0]).powi(2),
            Pairing::Gradient => p[0] - m[0],
            Pairing::Carre => (c[0] - p[0]) * (c[1] - p[1]) + (c[0] - m[0]) * (c[1] - m[1]),
        }
    }

    /// Envelopes bounding `|along(c, p, m) - along(c, 0, 0)|`.
    fn remainder(self, c: &[f64; 2], envs: &[TailEnvelope]) -> Vec<TailEnvelope> {
        match self {
            Pairing::Laplacian | Pairing::Gradient => vec![scale_envelope(&envs[0], 2.0)],
            Pairing::Energy => vec![
                scale_envelope(&envs[0], 4.0 * c[0]),
                scale_envelope(&envs[0].product(&envs[0]), 2.0),
            ],
            Pairing::Carre => vec![
                scale_envelope(&envs[1], 2.0 * c[0]),
                scale_envelope(&envs[0], 2.0 * c[1]),
                scale_envelope(&envs[0].product(&envs[1]), 2.0),
            ],
        }
    }

    fn magnitude(self, c: &[f64; 2]) -> f64 {
        match self {
            Pairing::Laplacian | Pairing::Gradient => c[0].abs(),
            Pairing::Energy => c[0] * c[0],
            Pairing::Carre => (c[0] * c[1]).abs(),
        }
    }

    fn roundoff_power(self, s: f64) -> f64 {
        match self {
            Pairing::Gradient => s,
            _ => 2.0 * s,
        }
    }
}

fn ray_route(
    kind: Pairing,
    fields: &[&ScalarField],
    x: &Point,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<VectorValue> {
    let n = params.n;
    let s = params.s;
    let pref = kind.prefactor(params);
    let q = kind.decay(s);
    let start = kind.start(s)?;
    let mut c = [0.0; 2];
    for (i, f) in fields.iter().enumerate() {
        c[i] = f.eval(x)?;
    }
    let rule = SphereRule::half(n, spec.angular_nodes)?;
    let envs: Vec<TailEnvelope> = fields.iter().map(|f| f.meta().tail).collect();
    let terms = kind.remainder(&c, &envs);
    let weight = pref.abs() * rule.total_weight();
    let tol = spec.tail_tol / (weight * terms.len() as f64).max(f64::MIN_POSITIVE);
    let offset = norm(x);
    let feature = fields.iter().map(|f| f.meta().feature).fold(f64::INFINITY, f64::min);
    let mut t = feature;
    for env in &terms {
        t = t.max(ray_tail(env, offset, q, tol, 0.0)?.0);
    }
    let mut bound = 0.0;
    for env in &terms {
        bound += ray_tail(env, offset, q, tol, t)?.1;
    }
    let lead = kind.along(&c, &[0.0; 2], &[0.0; 2]);
    // The analytic tail assumes the fields vanish at infinity; otherwise the whole
    // numerator goes into the bound.
    let decaying = envs.iter().all(|e| e.is_compact() || e.power > 0.0);
    let analytic = if decaying {
        lead * t.powf(1.0 - q) / (q - 1.0)
    } else {
        bound += lead.abs() * t.powf(1.0 - q) / (q - 1.0);
        0.0
    };
    let rays: Vec<Ray> = rule
        .dirs
        .iter()
        .map(|d| {
            let mut ray = Ray::new(0.0, t, Scales::new(feature)).start_behavior(start);
            for f in fields {
                f.meta().ray_breaks(x, d, &mut ray);
                f.meta().ray_breaks(x, &neg(d), &mut ray);
            }
            ray
        })
        .collect();
    let level = |res: &Resolution| -> Result<[f64; 4]> {
        let acc = ordered_sum(rule.len(), 3, |j| {
            let dir = &rule.dirs[j];
            let w = rule.weights[j];
            let v = rays[j].integrate(res, &mut |rho: f64| {
                let yp = axpy(x, rho, dir);
                let ym = axpy(x, -rho, dir);
                let mut pv = [0.0; 2];
                let mut mv = [0.0; 2];
                for (i, f) in fields.iter().enumerate() {
                    pv[i] = f.eval(&yp)?;
                    mv[i] = f.eval(&ym)?;
                }
                Ok(kind.along(&c, &pv, &mv) * rho.powf(-q))
            })? + analytic;
            let mut out = [0.0; 4];
            match kind {
                Pairing::Gradient => {
                    for i in 0..n {
                        out[i] = w * dir[i] * v;
                    }
                }
                _ => out[0] = w * v,
            }
            Ok(out)
        })?;
        Ok(acc.map(|a| a * pref))
    };
    let fine = level(&spec.full())?;
    let coarse = level(&spec.coarse())?;
    let k = kind.roundoff_power(s);
    let h = spec.full().cap_size(feature);
    let roundoff = 8.0 * f64::EPSILON * weight * kind.magnitude(&c) * h.powf(-k) / k;
    let mut value = ORIGIN;
    let mut error = ORIGIN;
    let components = if kind == Pairing::Gradient { n } else { 1 };
    for i in 0..components {
        value[i] = fine[i];
        error[i] = (fine[i] - coarse[i]).abs()
            + weight * bound
            + roundoff
            + 8.0 * f64::EPSILON * fine[i].abs();
    }
    Ok(VectorValue {
        value,
        error,
        truncation_radius: t,
    })
}

// ---------------------------------------------------------------------------
// Exterior route for compactly supported fields

fn joint_support(fields: &[&ScalarField]) -> Option<Ball> {
    let mut out: Option<Ball> = None;
    for f in fields {
        let b = f.meta().support?;
        out = Some(match out {
            None => b,
            Some(a) => {
                let d = dist(&a.center, &b.center);
                if d + b.radius <= a.radius {
                    a
                } else if d + a.radius <= b.radius {
                    b
                } else {
                    let radius = 0.5 * (d + a.radius + b.radius);
                    let t = if d > 0.0 { (radius - a.radius) / d } else { 0.0 };
                    Ball {
                        center: axpy(&a.center, t, &sub(&b.center, &a.center)),
                        radius,
                    }
                }
            }
        });
    }
    out
}

/// `int_B F(y) dy` in polar coordinates around the center of `ball`, `m` components.
#[allow(clippy::too_many_arguments)]
fn polar_ball<F>(
    ball: &Ball,
    n: usize,
    metas: &[&FieldMeta],
    scales: Scales,
    end: EndBehavior,
    spec: &QuadratureSpec,
    res: &Resolution,
    m: usize,
    f: F,
) -> Result<[f64; 4]>
where
    F: Fn(&Point) -> Result<[f64; 4]> + Sync + Send,
{
    let rule = SphereRule::full(n, spec.angular_nodes)?;
    ordered_sum(rule.len(), m, |j| {
        let dir = &rule.dirs[j];
        let w = rule.weights[j];
        let mut ray = Ray::new(0.0, ball.radius, scales).end_behavior(end);
        for meta in metas {
            meta.ray_breaks(&ball.center, dir, &mut ray);
        }
        let v = integrate_components(&ray, res, m, |rho| {
            let y = axpy(&ball.center, rho, dir);
            let g = f(&y)?;
            let jac = rho.powi(n as i32 - 1);
            Ok(g.map(|c| c * jac))
        })?;
        Ok(v.map(|c| c * w))
    })
}

fn exterior_route(
    kind: Pairing,
    fields: &[&ScalarField],
    x: &Point,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Option<Result<VectorValue>> {
    let ball = joint_support(fields)?;
    let gap = dist(x, &ball.center) - ball.radius;
    if gap <= 0.5 * ball.radius {
        return None;
    }
    let n = params.n;
    let s = params.s;
    let metas: Vec<&FieldMeta> = fields.iter().map(|f| f.meta()).collect();
    let feature = metas.iter().map(|m| m.feature).fold(gap, f64::min);
    let m = if kind == Pairing::Gradient { n } else { 1 };
    let integrand = |y: &Point| -> Result<[f64; 4]> {
        let r = sub(y, x);
        let d = norm(&r);
        let u = fields[0].eval(y)?;
        let mut out = [0.0; 4];
        match kind {
            Pairing::Laplacian => out[0] = -params.c_ns * u * d.powf(-(n as f64) - 2.0 * s),
            Pairing::Energy => out[0] = params.c_ns * u * u * d.powf(-(n as f64) - 2.0 * s),
            Pairing::Carre => {
                let v = fields[1].eval(y)?;
                out[0] = params.c_ns * u * v * d.powf(-(n as f64) - 2.0 * s);
            }
            Pairing::Gradient => {
                let k = params.mu_ns * u * d.powf(-(n as f64) - s - 1.0);
                for i in 0..n {
                    out[i] = k * r[i];
                }
            }
        }
        Ok(out)
    };
    let run = || -> Result<VectorValue> {
        // The center values vanish here; evaluating them checks the point.
        for f in fields {
            f.eval(x)?;
        }
        let level = |res: &Resolution| {
            polar_ball(&ball, n, &metas, Scales::new(feature), EndBehavior::Kink, spec, res, m, integrand)
        };
        let fine = level(&spec.full())?;
        let coarse = level(&spec.coarse())?;
        let mut value = ORIGIN;
        let mut error = ORIGIN;
        for i in 0..m {
            value[i] = fine[i];
            error[i] = (fine[i] - coarse[i]).abs() + 8.0 * f64::EPSILON * fine[i].abs();
        }
        Ok(VectorValue {
            value,
            error,
            truncation_radius: dist(x, &ball.center) + ball.radius,
        })
    };
    Some(run())
}

// ---------------------------------------------------------------------------
// Cutoff route for fields with a singular point

/// 0 for `t <= 0`, 1 for `t >= 1`, smooth in between.
fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / t).exp();
        let b = (-1.0 / (1.0 - t)).exp();
        a / (a + b)
    }
}

fn singular_laplacian(
    u: &ScalarField,
    x: &Point,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<VectorValue> {
    let meta = u.meta();
    let (p, expo) = match meta.singular_points.as_slice() {
        [single] => *single,
        _ => {
            return Err(Error::invalid(format!(
                "field `{}` has several singular points; only one is supported",
                u.id()
            )))
        }
    };
    let n = params.n;
    let nf = n as f64;
    let s = params.s;
    let c = params.c_ns;
    let u0 = u.eval(x)?;
    let d = dist(x, &p);
    let a = 0.25 * d;
    let b = 0.5 * d;
    // Cutoff equal to 1 on B(x, a) and 0 outside B(x, b).
    let psi = |rho: f64| 1.0 - smooth_step((rho - a) / (b - a));
    let start_near = EndBehavior::algebraic(1.0 - 2.0 * s, 2)?;
    let start_far = EndBehavior::algebraic(expo + nf - 1.0, 1)?;
    let half = SphereRule::half(n, spec.angular_nodes)?;
    let full = SphereRule::full(n, spec.angular_nodes)?;
    let area = full.total_weight();
    let feature = meta.feature.min(a);

    // Far tail of the singular-centered integral.
    let env = scale_envelope(&meta.tail, 2f64.powf(nf + 2.0 * s));
    let tol = spec.tail_tol / (c * area).max(f64::MIN_POSITIVE);
    let (t_far, bound) = ray_tail(&env, norm(&p), 1.0 + 2.0 * s, tol, 2.0 * d + b)?;

    let level = |res: &Resolution| -> Result<f64> {
        let near = ordered_sum(half.len(), 1, |j| {
            let dir = &half.dirs[j];
            let mut ray = Ray::new(0.0, b, Scales::new(feature)).start_behavior(start_near);
            ray.add_break(a, EndBehavior::Regular);
            meta.ray_breaks(x, dir, &mut ray);
            meta.ray_breaks(x, &neg(dir), &mut ray);
            let v = ray.integrate(res, &mut |rho: f64| {
                let up = u.eval(&axpy(x, rho, dir))?;
                let um = u.eval(&axpy(x, -rho, dir))?;
                Ok(psi(rho) * (2.0 * u0 - up - um) * rho.powf(-1.0 - 2.0 * s))
            })?;
            Ok([half.weights[j] * v, 0.0, 0.0, 0.0])
        })?[0]
            * 0.5
            * c;
        let shell = Ray::new(a, b, Scales::new(b - a)).integrate(res, &mut |rho: f64| {
            Ok((1.0 - psi(rho)) * rho.powf(-1.0 - 2.0 * s))
        })? + b.powf(-2.0 * s) / (2.0 * s);
        let far_center = c * u0 * area * shell;
        let far = ordered_sum(full.len(), 1, |j| {
            let dir = &full.dirs[j];
            let mut ray = Ray::new(0.0, t_far, Scales::new(feature)).start_behavior(start_far);
            for ball in [Ball { center: *x, radius: a }, Ball { center: *x, radius: b }] {
                for t in ball.ray_crossings(&p, dir) {
                    ray.add_break(t, EndBehavior::Regular);
                }
            }
            meta.ray_breaks(&p, dir, &mut ray);
            let v = ray.integrate(res, &mut |t: f64| {
                let y = axpy(&p, t, dir);
                let r = dist(&y, x);
                let cut = 1.0 - psi(r);
                if cut == 0.0 {
                    return Ok(0.0);
                }
                Ok(cut * u.eval(&y)? * r.powf(-nf - 2.0 * s) * t.powi(n as i32 - 1))
            })?;
            Ok([full.weights[j] * v, 0.0, 0.0, 0.0])
        })?[0];
        Ok(near + far_center - c * far)
    };
    let fine = level(&spec.full())?;
    let coarse = level(&spec.coarse())?;
    let error = (fine - coarse).abs() + c * area * bound + 8.0 * f64::EPSILON * (fine.abs() + c * u0.abs() * area * a.powf(-2.0 * s));
    Ok(VectorValue {
        value: [fine, 0.0, 0.0],
        error: [error, 0.0, 0.0],
        truncation_radius: t_far,
    })
}

// ---------------------------------------------------------------------------
// Public operators

fn dispatch(
    kind: Pairing,
    fields: &[&ScalarField],
    x: &Point,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<VectorValue> {
    check_inputs(fields, params, spec)?;
    if fields.iter().any(|f| !f.meta().singular_points.is_empty()) {
        if kind == Pairing::Laplacian {
            return singular_laplacian(fields[0], x, params, spec);
        }
        return Err(Error::invalid(
            "fields with singular points are only supported by the fractional Laplacian",
        ));
    }
    if let Some(v) = exterior_route(kind, fields, x, params, spec) {
        return v;
    }
    ray_route(kind, fields, x, params, spec)
}

/// `(-Delta)^s u(x)`.
pub fn frac_laplacian(
    u: &ScalarField,
    x: &Point,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<OperatorValue> {
    dispatch(Pairing::Laplacian, &[u], x, params, spec)
        .map(scalar)
        .context(|| format!("(-Delta)^s of `{}` at {:?}", u.id(), &x[..params.n]))
}

/// `G_u(x) = C_{n,s} int (u(x) - u(y))^2 / |x - y|^{n+2s} dy`.
pub fn energy_density_g(
    u: &ScalarField,
    x: &Point,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<OperatorValue> {
    dispatch(Pairing::Energy, &[u], x, params, spec)
        .map(scalar)
        .context(|| format!("G of `{}` at {:?}", u.id(), &x[..params.n]))
}

/// `C_{n,s} int (u(x) - u(y)) (v(x) - v(y)) / |x - y|^{n+2s} dy`; equals `G_u` when `v = u`.
pub fn carre_du_champ(
    u: &ScalarField,
    v: &ScalarField,
    x: &Point,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<OperatorValue> {
    dispatch(Pairing::Carre, &[u, v], x, params, spec)
        .map(scalar)
        .context(|| format!("carre du champ of `{}` and `{}` at {:?}", u.id(), v.id(), &x[..params.n]))
}

/// `grad^s u(x)`, components `mu_{n,s} int (y_i - x_i)(u(y) - u(x)) / |y - x|^{n+s+1} dy`.
pub fn frac_gradient(
    u: &ScalarField,
    x: &Point,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<VectorValue> {
    dispatch(Pairing::Gradient, &[u], x, params, spec)
        .context(|| format!("grad^s of `{}` at {:?}", u.id(), &x[..params.n]))
}

/// `div^s phi(x) = mu_{n,s} int (phi(y) - phi(x)) . (y - x) / |y - x|^{n+s+1} dy`.
pub fn frac_divergence(
    phi: &VectorField,
    x: &Point,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<OperatorValue> {
    spec.validate()?;
    let n = params.n;
    let s = params.s;
    if phi.dim() != n {
        return Err(Error::invalid("dimension mismatch between vector field and parameters"));
    }
    let meta = phi.meta();
    let pref = 0.5 * params.mu_ns;
    let rule = SphereRule::half(n, spec.angular_nodes)?;
    let weight = pref * rule.total_weight();
    let env = scale_envelope(&meta.tail, 2.0);
    let tol = spec.tail_tol / weight.max(f64::MIN_POSITIVE);
    let (t, bound) = ray_tail(&env, norm(x), 1.0 + s, tol, meta.feature)?;
    let start = EndBehavior::algebraic(-s, 2)?;
    phi.eval(x)?;
    let level = |res: &Resolution| -> Result<f64> {
        Ok(pref
            * ordered_sum(rule.len(), 1, |j| {
                let dir = &rule.dirs[j];
                let mut ray = Ray::new(0.0, t, Scales::new(meta.feature)).start_behavior(start);
                meta.ray_breaks(x, dir, &mut ray);
                meta.ray_breaks(x, &neg(dir), &mut ray);
                let v = ray.integrate(res, &mut |rho: f64| {
                    let p = phi.eval(&axpy(x, rho, dir))?;
                    let m = phi.eval(&axpy(x, -rho, dir))?;
                    Ok(dot(dir, &sub(&p, &m)) * rho.powf(-1.0 - s))
                })?;
                Ok([rule.weights[j] * v, 0.0, 0.0, 0.0])
            })?[0])
    };
    let fine = level(&spec.full())?;
    let coarse = level(&spec.coarse())?;
    Ok(OperatorValue {
        value: fine,
        error: (fine - coarse).abs() + weight * bound + 8.0 * f64::EPSILON * fine.abs(),
        truncation_radius: t,
    })
    .context(|| format!("div^s of `{}` at {:?}", meta.id, &x[..n]))
}

/// `N_s^D f(x) = C_{n,s} int_D (f(x) - f(y)) / |x - y|^{n+2s} dy` for `x` outside the closed ball `D`.
pub fn nonlocal_normal(
    f: &ScalarField,
    d: &Ball,
    x: &Point,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<OperatorValue> {
    check_inputs(&[f], params, spec)?;
    let n = params.n;
    let gap = dist(x, &d.center) - d.radius;
    if !(gap > 0.0) {
        return Err(Error::invalid(format!(
            "nonlocal normal derivative needs a point outside the closed domain, got {:?}",
            &x[..n]
        )));
    }
    let fx = f.eval(x)?;
    let expo = -(n as f64) - 2.0 * params.s;
    let scales = Scales::new(f.meta().feature.min(d.radius)).with_cap(gap);
    let level = |res: &Resolution| {
        polar_ball(d, n, &[f.meta()], scales, EndBehavior::Kink, spec, res, 1, |y| {
            Ok([params.c_ns * (fx - f.eval(y)?) * dist(x, y).powf(expo), 0.0, 0.0, 0.0])
        })
        .map(|v| v[0])
    };
    let fine = level(&spec.full())?;
    let coarse = level(&spec.coarse())?;
    Ok(OperatorValue {
        value: fine,
        error: (fine - coarse).abs() + 8.0 * f64::EPSILON * fine.abs(),
        truncation_radius: d.radius,
    })
}

/// `K^s_r(x, y)` for the ball `B(center, r)`, `x` inside and `y` outside.
pub fn poisson_kernel(x: &Point, y: &Point, ball: &Ball, params: &FracParams) -> Result<f64> {
    let r = ball.radius;
    let xr = dist(x, &ball.center);
    let yr = dist(y, &ball.center);
    if !(xr < r && yr > r) {
        return Err(Error::invalid(format!(
            "Poisson kernel needs |x - c| < r < |y - c|, got {xr} and {yr} with r = {r}"
        )));
    }
    let n = params.n as i32;
    Ok(params.a_ns * ((r * r - xr * xr) / (yr * yr - r * r)).powf(params.s) * dist(x, y).powi(-n))
}

/// `M_s(g, r)(x) = int_{|z| > r} A^s_r(z) g(x + z) dz`.
pub fn s_mean(
    g: &ScalarField,
    x: &Point,
    r: f64,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<OperatorValue> {
    check_inputs(&[g], params, spec)?;
    if !(r > 0.0) {
        return Err(Error::invalid(format!("s-mean radius must be positive, got {r}")));
    }
    let n = params.n;
    let s = params.s;
    let meta = g.meta();
    for (p, _) in &meta.singular_points {
        if dist(p, x) >= r {
            return Err(Error::SingularPoint {
                field: meta.id.clone(),
                point: *p,
            });
        }
    }
    let k0 = params.a_ns * r.powf(2.0 * s);
    let rule = SphereRule::full(n, spec.angular_nodes)?;
    let env = scale_envelope(&meta.tail, k0 * (4.0f64 / 3.0).powf(s));
    let tol = spec.tail_tol / rule.total_weight();
    let (t, bound) = ray_tail(&env, norm(x), 1.0 + 2.0 * s, tol, 2.0 * r)?;
    let start = EndBehavior::algebraic(-s, 1)?;
    let scales = Scales::new(meta.feature).with_cap(r);
    let level = |res: &Resolution| {
        ordered_sum(rule.len(), 2, |j| {
            let dir = &rule.dirs[j];
            let mut ray = Ray::new(r, t, scales).start_behavior(start);
            meta.ray_breaks(x, dir, &mut ray);
            let v = integrate_components(&ray, res, 2, |rho| {
                let e = g.eval_estimate(&axpy(x, rho, dir))?;
                let k = k0 * (rho * rho - r * r).powf(-s) / rho;
                Ok([k * e.value, k * e.error, 0.0, 0.0])
            })?;
            Ok(v.map(|c| c * rule.weights[j]))
        })
    };
    let fine = level(&spec.full())?;
    let coarse = level(&spec.coarse())?;
    Ok(OperatorValue {
        value: fine[0],
        error: (fine[0] - coarse[0]).abs() + fine[1] + rule.total_weight() * bound + 8.0 * f64::EPSILON * fine[0].abs(),
        truncation_radius: t,
    })
    .context(|| format!("s-mean of `{}` at {:?} with r = {r}", meta.id, &x[..n]))
}

// ---------------------------------------------------------------------------
// Derived fields

/// Operator outputs wrapped as fields for nested evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DerivedKind {
    /// `G_u`
    Energy,
    /// `(-Delta)^s u`
    FracLaplacian,
    /// `partial^s_i u`
    FracGradient(usize),
    /// `|grad^s u|^2`
    GradNormSquared,
}

impl DerivedKind {
    fn label(&self) -> String {
        match self {
            DerivedKind::Energy => "G".into(),
            DerivedKind::FracLaplacian => "lap_s".into(),
            DerivedKind::FracGradient(i) => format!("d{}_s", i + 1),
            DerivedKind::GradNormSquared => "grad_s_sq".into(),
        }
    }

    /// Decay exponent of the derived field given the base decay `p`.
    fn power(&self, n: f64, s: f64, p: f64) -> f64 {
        match self {
            DerivedKind::Energy => (n + 2.0 * s).min(2.0 * p + 2.0 * s),
            DerivedKind::FracLaplacian => (n + 2.0 * s).min(p + 2.0 * s),
            DerivedKind::FracGradient(_) => (n + s).min(p + s),
            DerivedKind::GradNormSquared => 2.0 * (n + s).min(p + s),
        }
    }
}

struct Derived {
    kind: DerivedKind,
    base: ScalarField,
    params: FracParams,
    spec: QuadratureSpec,
    cache: Arc<QuantizedCache>,
}

impl Derived {
    fn compute(&self, x: &Point) -> Result<Estimate> {
        let (u, p, spec) = (&self.base, &self.params, &self.spec);
        Ok(match self.kind {
            DerivedKind::Energy => energy_density_g(u, x, p, spec)?.estimate(),
            DerivedKind::FracLaplacian => frac_laplacian(u, x, p, spec)?.estimate(),
            DerivedKind::FracGradient(i) => frac_gradient(u, x, p, spec)?.component(i).estimate(),
            DerivedKind::GradNormSquared => frac_gradient(u, x, p, spec)?.norm_squared(),
        })
    }
}

impl FieldFn for Derived {
    fn eval(&self, x: &Point) -> Result<f64> {
        Ok(self.eval_estimate(x)?.value)
    }

    fn eval_estimate(&self, x: &Point) -> Result<Estimate> {
        self.cache.get_or_try_insert(x, |y| self.compute(y))
    }

    fn cache(&self) -> Option<&QuantizedCache> {
        Some(&*self.cache)
    }
}

/// Wraps an operator applied to `base` as a cached field. The tail envelope is
/// found by sampling at `|y| = 2 R0 k`, `k = 1..4`, along the axes and inflating by 2.
pub fn derived_field(
    kind: DerivedKind,
    base: &ScalarField,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<ScalarField> {
    check_inputs(&[base], params, spec)?;
    let n = params.n;
    if let DerivedKind::FracGradient(i) = kind {
        if i >= n {
            return Err(Error::invalid(format!("gradient component {i} out of range for n = {n}")));
        }
    }
    let bm = base.meta();
    if !bm.singular_points.is_empty() {
        return Err(Error::invalid(format!(
            "derived fields of singular field `{}` are not supported",
            bm.id
        )));
    }
    let base_power = if bm.tail.is_compact() { f64::INFINITY } else { bm.tail.power };
    let power = kind.power(n as f64, params.s, base_power);
    let r0 = 2.0 * bm.tail.r0.max(bm.feature);
    let core = bm.support.or(bm.core);
    let provisional = FieldMeta {
        id: format!("{}[{}]", kind.label(), bm.id),
        dim: n,
        regularity: Regularity::HolderSPlusEps,
        tail: TailEnvelope::new(0.0, power, r0),
        support: None,
        kinks: bm.kinks.clone(),
        singular_points: Vec::new(),
        feature: bm.feature,
        core,
    };
    let cache = Arc::new(QuantizedCache::new(spec.cache_quantum));
    cache_store::attach(format!("{}|n={}|s={:?}|{:?}", provisional.id, n, params.s, spec), &cache)?;
    let field = ScalarField::new(
        provisional.clone(),
        Derived {
            kind,
            base: base.clone(),
            params: params.clone(),
            spec: spec.clone(),
            cache,
        },
    );
    let mut amplitude: f64 = 0.0;
    for k in 1..=4 {
        let radius = r0 * k as f64;
        for i in 0..n {
            for sign in [1.0, -1.0] {
                let y = scale(&axis(i), sign * radius);
                let v = field.eval(&y).context(|| format!("sampling the envelope of {}", provisional.id))?;
                amplitude = amplitude.max(v.abs() * radius.powf(power));
            }
        }
    }
    let mut meta = provisional;
    meta.tail = TailEnvelope::new(2.0 * amplitude, power, r0);
    Ok(field.with_meta(meta))
}

pub fn energy_density_field(u: &ScalarField, params: &FracParams, spec: &QuadratureSpec) -> Result<ScalarField> {
    derived_field(DerivedKind::Energy, u, params, spec)
}

pub fn frac_laplacian_field(u: &ScalarField, params: &FracParams, spec: &QuadratureSpec) -> Result<ScalarField> {
    derived_field(DerivedKind::FracLaplacian, u, params, spec)
}

pub fn frac_gradient_field(
    u: &ScalarField,
    i: usize,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<ScalarField> {
    derived_field(DerivedKind::FracGradient(i), u, params, spec)
}

pub fn grad_norm_squared_field(u: &ScalarField, params: &FracParams, spec: &QuadratureSpec) -> Result<ScalarField> {
    derived_field(DerivedKind::GradNormSquared, u, params, spec)
}

// ---------------------------------------------------------------------------
// Identities

/// Two sides of an identity with their errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub lhs: Estimate,
    pub rhs: Estimate,
    pub residual: f64,
    pub combined_error: f64,
    /// `|residual| / max(|lhs|, |rhs|)`.
    pub relative: f64,
}

impl IdentityCheck {
    pub fn new(lhs: Estimate, rhs: Estimate) -> Self {
        let residual = lhs.value - rhs.value;
        let scale = lhs.value.abs().max(rhs.value.abs());
        IdentityCheck {
            lhs,
            rhs,
            residual,
            combined_error: lhs.error + rhs.error,
            relative: if scale > 0.0 { residual.abs() / scale } else { residual.abs() },
        }
    }

    pub fn within_error(&self) -> bool {
        self.residual.abs() <= self.combined_error
    }
}

fn add_estimates(a: Estimate, b: Estimate) -> Estimate {
    Estimate::new(a.value + b.value, a.error + b.error)
}

fn scale_estimate(a: Estimate, c: f64) -> Estimate {
    Estimate::new(a.value * c, a.error * c.abs())
}

/// `(-Delta)^s (u^2)(x)` against `2 u(x) (-Delta)^s u(x) - G_u(x)`.
pub fn product_rule_check(
    u: &ScalarField,
    x: &Point,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<IdentityCheck> {
    let sq = squared_field(u);
    let lhs = frac_laplacian(&sq, x, params, spec)?.estimate();
    let u0 = u.eval(x)?;
    let lap = frac_laplacian(u, x, params, spec)?.estimate();
    let g = energy_density_g(u, x, params, spec)?.estimate();
    let rhs = add_estimates(scale_estimate(lap, 2.0 * u0), scale_estimate(g, -1.0));
    Ok(IdentityCheck::new(lhs, rhs))
}

/// `(-Delta)^s (partial^s_i u)(x)` against `partial^s_i ((-Delta)^s u)(x)`.
pub fn commutation_check(
    u: &ScalarField,
    x: &Point,
    i: usize,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<IdentityCheck> {
    let di = frac_gradient_field(u, i, params, spec)?;
    let f = frac_laplacian_field(u, params, spec)?;
    commutation_check_with(&di, &f, x, i, params, spec)
}

/// As [`commutation_check`] with prebuilt derived fields, so caches are shared across points.
pub fn commutation_check_with(
    grad_component: &ScalarField,
    frac_lap: &ScalarField,
    x: &Point,
    i: usize,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<IdentityCheck> {
    let lhs = frac_laplacian(grad_component, x, params, spec)?.estimate();
    let rhs = frac_gradient(frac_lap, x, params, spec)?.component(i).estimate();
    Ok(IdentityCheck::new(lhs, rhs))
}

/// `int_B F` in polar coordinates around the center of `ball`; `F` returns a value
/// and its own error, which is integrated alongside.
pub fn integrate_over_ball<F>(
    ball: &Ball,
    n: usize,
    metas: &[&FieldMeta],
    feature: f64,
    spec: &QuadratureSpec,
    f: F,
) -> Result<Estimate>
where
    F: Fn(&Point) -> Result<Estimate> + Sync + Send,
{
    let scales = Scales::new(feature.min(ball.radius));
    let g = |y: &Point| f(y).map(|e| [e.value, e.error, 0.0, 0.0]);
    let fine = polar_ball(ball, n, metas, scales, EndBehavior::Kink, spec, &spec.full(), 2, g)?;
    let coarse = polar_ball(ball, n, metas, scales, EndBehavior::Kink, spec, &spec.coarse(), 1, g)?;
    Ok(Estimate::new(
        fine[0],
        (fine[0] - coarse[0]).abs() + fine[1] + 8.0 * f64::EPSILON * fine[0].abs(),
    ))
}

/// `int_{|y - c| > r} F` where `|F(y)|` decays like `|y|^-decay`. The integral is
/// carried to `10^3` times the largest length scale and the remainder is added from
/// the leading-order decay, with the size of that correction as its error.
pub fn integrate_outside_ball<F>(
    ball: &Ball,
    n: usize,
    metas: &[&FieldMeta],
    feature: f64,
    decay: f64,
    spec: &QuadratureSpec,
    f: F,
) -> Result<Estimate>
where
    F: Fn(&Point) -> Result<Estimate> + Sync + Send,
{
    let nf = n as f64;
    if !(decay > nf) {
        return Err(Error::NonIntegrableTail {
            power: decay,
            kernel_decay: 0.0,
            dim: n,
        });
    }
    let rule = SphereRule::full(n, spec.angular_nodes)?;
    let t = 1e3 * ball.radius.max(feature);
    let level = |res: &Resolution, m: usize| {
        ordered_sum(rule.len(), m.max(3), |j| {
            let dir = &rule.dirs[j];
            let mut ray = Ray::new(ball.radius, t, Scales::new(feature.min(ball.radius)))
                .start_behavior(EndBehavior::Kink);
            for meta in metas {
                meta.ray_breaks(&ball.center, dir, &mut ray);
            }
            let v = integrate_components(&ray, res, m, |rho| {
                let e = f(&axpy(&ball.center, rho, dir))?;
                let jac = rho.powi(n as i32 - 1);
                Ok([e.value * jac, e.error * jac, 0.0, 0.0])
            })?;
            let end = f(&axpy(&ball.center, t, dir))?.value;
            let correction = end * t.powf(nf) / (decay - nf);
            Ok([rule.weights[j] * v[0], rule.weights[j] * v[1], rule.weights[j] * correction, 0.0])
        })
    };
    let fine = level(&spec.full(), 2)?;
    let coarse = level(&spec.coarse(), 1)?;
    let value = fine[0] + fine[2];
    Ok(Estimate::new(
        value,
        (fine[0] - coarse[0]).abs() + fine[1] + fine[2].abs() * (10.0 * ball.radius.max(feature) / t).min(1.0)
            + 8.0 * f64::EPSILON * value.abs(),
    ))
}

/// `C/2 int_D (f(x) - f(y))(g(x) - g(y)) / |x - y|^{n+2s} dy`.
fn restricted_carre(
    f: &ScalarField,
    g: &ScalarField,
    d: &Ball,
    x: &Point,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<Estimate> {
    let n = params.n;
    let s = params.s;
    let f0 = f.eval(x)?;
    let g0 = g.eval(x)?;
    let rule = SphereRule::full(n, spec.angular_nodes)?;
    let inside = d.contains(x);
    let feature = f.meta().feature.min(g.meta().feature).min(d.radius);
    let start = EndBehavior::algebraic(1.0 - 2.0 * s, 1)?;
    let level = |res: &Resolution| {
        ordered_sum(rule.len(), 1, |j| {
            let dir = &rule.dirs[j];
            let Some((lo, hi)) = d.ray_chord(x, dir) else {
                return Ok([0.0; 4]);
            };
            let mut ray = if inside {
                Ray::new(0.0, hi, Scales::new(feature)).start_behavior(start)
            } else {
                Ray::new(lo, hi, Scales::new(feature).with_cap(lo.max(f64::MIN_POSITIVE)))
                    .start_behavior(EndBehavior::Kink)
            }
            .end_behavior(EndBehavior::Kink);
            f.meta().ray_breaks(x, dir, &mut ray);
            g.meta().ray_breaks(x, dir, &mut ray);
            let v = ray.integrate(res, &mut |rho: f64| {
                let y = axpy(x, rho, dir);
                Ok((f0 - f.eval(&y)?) * (g0 - g.eval(&y)?) * rho.powf(-1.0 - 2.0 * s))
            })?;
            Ok([rule.weights[j] * v, 0.0, 0.0, 0.0])
        })
        .map(|v| 0.5 * params.c_ns * v[0])
    };
    Estimate::from_levels(spec, 0.0, level)
}

fn pair_feature(f: &ScalarField, g: &ScalarField, d: &Ball) -> f64 {
    f.meta().feature.min(g.meta().feature).min(d.radius)
}

/// Divergence theorem: `int_D -(-Delta)^s f` against `int_{D^c} N_s^D f`.
pub fn divergence_check(
    f: &ScalarField,
    d: &Ball,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<IdentityCheck> {
    let n = params.n;
    let feature = f.meta().feature.min(d.radius);
    let metas = [f.meta()];
    let lhs = integrate_over_ball(d, n, &metas, feature, spec, |x| {
        Ok(scale_estimate(frac_laplacian(f, x, params, spec)?.estimate(), -1.0))
    })?;
    let decay = n as f64 + 2.0 * params.s;
    let rhs = integrate_outside_ball(d, n, &metas, feature, decay, spec, |x| {
        Ok(nonlocal_normal(f, d, x, params, spec)?.estimate())
    })?;
    Ok(IdentityCheck::new(lhs, rhs))
}

/// Green's second identity: `int_D g(-(-Delta)^s f) - f(-(-Delta)^s g)` against
/// `int_{D^c} g N f - f N g`.
pub fn green_check(
    f: &ScalarField,
    g: &ScalarField,
    d: &Ball,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<IdentityCheck> {
    let n = params.n;
    let feature = pair_feature(f, g, d);
    let metas = [f.meta(), g.meta()];
    let lhs = integrate_over_ball(d, n, &metas, feature, spec, |x| {
        let lf = frac_laplacian(f, x, params, spec)?.estimate();
        let lg = frac_laplacian(g, x, params, spec)?.estimate();
        let (fx, gx) = (f.eval(x)?, g.eval(x)?);
        Ok(add_estimates(scale_estimate(lf, -gx), scale_estimate(lg, fx)))
    })?;
    let decay = n as f64 + 2.0 * params.s;
    let rhs = integrate_outside_ball(d, n, &metas, feature, decay, spec, |x| {
        let nf = nonlocal_normal(f, d, x, params, spec)?.estimate();
        let ng = nonlocal_normal(g, d, x, params, spec)?.estimate();
        let (fx, gx) = (f.eval(x)?, g.eval(x)?);
        Ok(add_estimates(scale_estimate(nf, gx), scale_estimate(ng, -fx)))
    })?;
    Ok(IdentityCheck::new(lhs, rhs))
}

/// Integration by parts: `C/2 int_{R^2n \ (D^c)^2} (f(x)-f(y))(g(x)-g(y)) K` against
/// `int_D g (-Delta)^s f + int_{D^c} g N f`.
pub fn integration_by_parts_check(
    f: &ScalarField,
    g: &ScalarField,
    d: &Ball,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<IdentityCheck> {
    let n = params.n;
    let feature = pair_feature(f, g, d);
    let metas = [f.meta(), g.meta()];
    let decay = n as f64 + 2.0 * params.s;
    let inner = integrate_over_ball(d, n, &metas, feature, spec, |x| restricted_carre(f, g, d, x, params, spec))?;
    let outer = integrate_outside_ball(d, n, &metas, feature, decay, spec, |x| {
        restricted_carre(f, g, d, x, params, spec)
    })?;
    let lhs = add_estimates(inner, scale_estimate(outer, 2.0));
    let rhs_in = integrate_over_ball(d, n, &metas, feature, spec, |x| {
        Ok(scale_estimate(frac_laplacian(f, x, params, spec)?.estimate(), g.eval(x)?))
    })?;
    let rhs_out = integrate_outside_ball(d, n, &metas, feature, decay, spec, |x| {
        Ok(scale_estimate(nonlocal_normal(f, d, x, params, spec)?.estimate(), g.eval(x)?))
    })?;
    Ok(IdentityCheck::new(lhs, add_estimates(rhs_in, rhs_out)))
}

/// Duality of `grad^s` and `div^s`: `int f div^s phi` against `-int phi . grad^s f`
/// for compactly supported `f`.
pub fn duality_check(
    f: &ScalarField,
    phi: &VectorField,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<IdentityCheck> {
    let n = params.n;
    let support = f
        .meta()
        .support
        .ok_or_else(|| Error::invalid("duality check needs a compactly supported scalar field"))?;
    let feature = f.meta().feature.min(phi.meta().feature);
    let lhs = integrate_over_ball(&support, n, &[f.meta(), phi.meta()], feature, spec, |x| {
        let fx = f.eval(x)?;
        if fx == 0.0 {
            return Ok(Estimate::exact(0.0));
        }
        Ok(scale_estimate(frac_divergence(phi, x, params, spec)?.estimate(), fx))
    })?;
    let integrand = |x: &Point| -> Result<Estimate> {
        let p = phi.eval(x)?;
        let g = frac_gradient(f, x, params, spec)?;
        let value = -dot(&p, &g.value);
        let error = (0..n).map(|i| p[i].abs() * g.error[i]).sum::<f64>();
        Ok(Estimate::new(value, error))
    };
    let metas = [f.meta(), phi.meta()];
    let rhs = match phi.meta().support {
        Some(b) => integrate_over_ball(&b, n, &metas, feature, spec, integrand)?,
        None => {
            let big = Ball {
                center: support.center,
                radius: 2.0 * support.radius,
            };
            let inner = integrate_over_ball(&big, n, &metas, feature, spec, integrand)?;
            let decay = n as f64 + params.s + phi.meta().tail.power.min(1e3);
            let outer = integrate_outside_ball(&big, n, &metas, feature, decay, spec, integrand)?;
            add_estimates(inner, outer)
        }
    };
    Ok(IdentityCheck::new(lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::make_params;
    use crate::fields::{
        bump_centered, bump_field, constant_field, fundamental_solution_field, gaussian_centered,
        gaussian_field, poisson_harmonic_field, x_bump_field,
    };

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn constant_field_gives_zero() {
        for n in 1..=2 {
            let p = make_params(n, 0.4).unwrap();
            let spec = QuadratureSpec::for_dim(n);
            let u = constant_field(n, 3.0);
            let x = [0.3, 0.1, 0.0];
            assert!(frac_laplacian(&u, &x, &p, &spec).unwrap().value.abs() < 1e-12);
            assert!(energy_density_g(&u, &x, &p, &spec).unwrap().value.abs() < 1e-12);
            assert!(norm(&frac_gradient(&u, &x, &p, &spec).unwrap().value) < 1e-12);
        }
    }

    #[test]
    fn gaussian_laplacian_matches_fourier_oracle_1d() {
        let spec = QuadratureSpec::for_dim(1);
        for &s in &[0.2, 0.5, 0.8] {
            let p = make_params(1, s).unwrap();
            let u = gaussian_field(1, 1.0).unwrap();
            for &x0 in &[0.0, 0.7, 1.9, 4.0] {
                let x = [x0, 0.0, 0.0];
                let v = frac_laplacian(&u, &x, &p, &spec).unwrap();
                let o = u.frac_laplacian_oracle(&x, &p).unwrap().unwrap();
                assert!(rel(v.value, o) < 1e-6, "s={s} x={x0}: {} vs {o}", v.value);
                assert!(v.error < 1e-6 * o.abs().max(1e-3), "error estimate {}", v.error);
            }
        }
    }

    #[test]
    fn gaussian_laplacian_matches_fourier_oracle_2d() {
        let spec = QuadratureSpec::for_dim(2);
        let p = make_params(2, 0.5).unwrap();
        let u = gaussian_field(2, 1.0).unwrap();
        for x in [[0.0, 0.0, 0.0], [0.5, -0.8, 0.0], [2.0, 1.0, 0.0]] {
            let v = frac_laplacian(&u, &x, &p, &spec).unwrap();
            let o = u.frac_laplacian_oracle(&x, &p).unwrap().unwrap();
            assert!(rel(v.value, o) < 1e-4, "{x:?}: {} vs {o}", v.value);
        }
    }

    #[test]
    fn fundamental_solution_is_s_harmonic_away_from_pole() {
        for (n, s) in [(1, 0.25), (2, 0.25), (1, 0.7)] {
            let p = make_params(n, s).unwrap();
            let spec = QuadratureSpec::for_dim(n);
            let phi = fundamental_solution_field(&p).unwrap();
            let x = [2.0, 0.0, 0.0];
            let v = frac_laplacian(&phi, &x, &p, &spec).unwrap();
            let scale = phi.eval(&x).unwrap().abs();
            assert!(v.value.abs() < 1e-3 * scale, "n={n} s={s}: {} vs {scale}", v.value);
        }
    }

    #[test]
    fn exterior_and_ray_routes_agree() {
        let p = make_params(1, 0.6).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let u = bump_field(1, 1.0).unwrap();
        let x = [1.6, 0.0, 0.0];
        for kind in [Pairing::Laplacian, Pairing::Gradient, Pairing::Energy] {
            let ext = exterior_route(kind, &[&u], &x, &p, &spec).unwrap().unwrap();
            let ray = ray_route(kind, &[&u], &x, &p, &spec).unwrap();
            let diff = (ext.value[0] - ray.value[0]).abs();
            assert!(diff <= ext.error[0] + ray.error[0], "{kind:?}: {ext:?} vs {ray:?}");
            assert!(rel(ext.value[0], ray.value[0]) < 1e-6);
        }
    }

    #[test]
    fn product_rule_holds() {
        let p = make_params(1, 0.5).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let u = gaussian_centered(1, 0.8, [0.2, 0.0, 0.0]).unwrap();
        for &x0 in &[0.0, 0.45, -1.3] {
            let c = product_rule_check(&u, &[x0, 0.0, 0.0], &p, &spec).unwrap();
            assert!(c.within_error(), "{c:?}");
        }
    }

    #[test]
    fn gradient_matches_oracle_and_sign() {
        let p = make_params(1, 0.5).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let u = gaussian_field(1, 1.0).unwrap();
        for &x0 in &[0.3, 1.2, -2.0] {
            let x = [x0, 0.0, 0.0];
            let v = frac_gradient(&u, &x, &p, &spec).unwrap();
            let o = u.frac_gradient_oracle(&x, &p).unwrap().unwrap();
            assert!(rel(v.value[0], o[0]) < 1e-6, "{x0}: {} vs {}", v.value[0], o[0]);
        }
        let xb = x_bump_field(1, 1.0).unwrap();
        assert!(frac_gradient(&xb, &ORIGIN, &p, &spec).unwrap().value[0] > 0.0);
    }

    #[test]
    fn fractional_gradient_tends_to_gradient() {
        let spec = QuadratureSpec::for_dim(2);
        let u = gaussian_field(2, 1.0).unwrap();
        let x = [0.3, -0.2, 0.0];
        let exact = u.gradient(&x).unwrap();
        let gap = |s: f64| {
            let v = frac_gradient(&u, &x, &make_params(2, s).unwrap(), &spec).unwrap();
            (0..2).map(|i| (v.value[i] - exact[i]).abs()).fold(0.0, f64::max) / norm(&exact)
        };
        let (far, near) = (gap(0.9), gap(0.99));
        assert!(near < far && near < 0.05, "{far} {near}");
    }

    #[test]
    fn divergence_of_constant_vector_field_vanishes() {
        use crate::fields::constant_vector_field;
        for n in 1..=2 {
            let p = make_params(n, 0.6).unwrap();
            let spec = QuadratureSpec::for_dim(n);
            let phi = constant_vector_field(n, [1.0, -2.0, 0.0]);
            let v = frac_divergence(&phi, &[0.4, 0.1, 0.0], &p, &spec).unwrap();
            assert!(v.value.abs() < 1e-14, "n={n}: {v:?}");
        }
    }

    #[test]
    fn carre_du_champ_with_itself_is_energy() {
        let p = make_params(1, 0.35).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let u = bump_field(1, 1.0).unwrap();
        let x = [0.2, 0.0, 0.0];
        let a = carre_du_champ(&u, &u, &x, &p, &spec).unwrap().value;
        let b = energy_density_g(&u, &x, &p, &spec).unwrap().value;
        assert!(rel(a, b) < 1e-13);
    }

    #[test]
    fn poisson_kernel_integrates_to_one() {
        let p = make_params(1, 0.5).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let u = poisson_harmonic_field(&p, Ball::centered(1.0).unwrap(), constant_field(1, 1.0), &spec).unwrap();
        let v = u.eval(&[0.4, 0.0, 0.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-6);
        let k = poisson_kernel(&ORIGIN, &[2.0, 0.0, 0.0], &Ball::centered(1.0).unwrap(), &p).unwrap();
        let a = poisson_kernel(&ORIGIN, &[-2.0, 0.0, 0.0], &Ball::centered(1.0).unwrap(), &p).unwrap();
        assert_eq!(k, a);
        assert!(poisson_kernel(&[2.0, 0.0, 0.0], &ORIGIN, &Ball::centered(1.0).unwrap(), &p).is_err());
    }

    #[test]
    fn s_mean_of_constant_is_constant() {
        for n in 1..=2 {
            for &s in &[0.25, 0.75] {
                let p = make_params(n, s).unwrap();
                let spec = QuadratureSpec::for_dim(n);
                let one = constant_field(n, 1.0);
                for &r in &[0.5, 2.0] {
                    let m = s_mean(&one, &ORIGIN, r, &p, &spec).unwrap();
                    assert!((m.value - 1.0).abs() < 1e-6, "n={n} s={s} r={r}: {}", m.value);
                }
            }
        }
    }

    #[test]
    fn nonlocal_normal_basics() {
        let p = make_params(1, 0.5).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let d = Ball::centered(1.0).unwrap();
        let c = constant_field(1, 2.0);
        assert!(nonlocal_normal(&c, &d, &[1.5, 0.0, 0.0], &p, &spec).unwrap().value.abs() < 1e-14);
        assert!(nonlocal_normal(&c, &d, &[0.5, 0.0, 0.0], &p, &spec).is_err());
    }

    #[test]
    fn divergence_theorem_1d() {
        let p = make_params(1, 0.5).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let f = bump_centered(1, 0.7, [0.1, 0.0, 0.0]).unwrap();
        let c = divergence_check(&f, &Ball::centered(1.0).unwrap(), &p, &spec).unwrap();
        assert!(c.relative < 1e-3, "{c:?}");
    }

    #[test]
    fn s_mean_reproduces_s_harmonic_value() {
        let p = make_params(1, 0.5).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let g = gaussian_centered(1, 0.5, [2.0, 0.0, 0.0]).unwrap();
        let u = poisson_harmonic_field(&p, Ball::centered(1.0).unwrap(), g, &spec).unwrap();
        let u0 = u.eval(&ORIGIN).unwrap();
        for &r in &[0.3, 0.8] {
            let m = s_mean(&u, &ORIGIN, r, &p, &spec).unwrap();
            assert!(rel(m.value, u0) < 1e-6, "r={r}: {} vs {u0}", m.value);
        }
    }

    #[test]
    fn green_and_parts_identities_1d() {
        let p = make_params(1, 0.4).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let d = Ball::centered(1.0).unwrap();
        let f = bump_field(1, 0.8).unwrap();
        let g = gaussian_centered(1, 0.7, [0.3, 0.0, 0.0]).unwrap();
        let c = green_check(&f, &g, &d, &p, &spec).unwrap();
        assert!(c.relative < 1e-3, "{c:?}");
        let c = integration_by_parts_check(&f, &g, &d, &p, &spec).unwrap();
        assert!(c.relative < 1e-3, "{c:?}");
    }

    #[test]
    fn duality_of_gradient_and_divergence() {
        use crate::fields::radial_bump_vector_field;
        let p = make_params(1, 0.5).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let f = bump_centered(1, 0.8, [0.2, 0.0, 0.0]).unwrap();
        let phi = radial_bump_vector_field(1, 1.0).unwrap();
        let c = duality_check(&f, &phi, &p, &spec).unwrap();
        assert!(c.relative < 1e-3, "{c:?}");
    }

    #[test]
    fn derived_fields_commute() {
        let p = make_params(1, 0.5).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let u = gaussian_field(1, 1.0).unwrap();
        let c = commutation_check(&u, &[0.4, 0.0, 0.0], 0, &p, &spec).unwrap();
        assert!(c.relative < 1e-3, "{c:?}");
        let g = energy_density_field(&u, &p, &spec).unwrap();
        assert!(g.eval(&[0.1, 0.0, 0.0]).unwrap() > 0.0);
        assert!(!g.meta().tail.is_compact());
        let far = [6.0, 0.0, 0.0];
        assert!(g.eval(&far).unwrap().abs() <= g.meta().tail.bound(norm(&far)) * 1.01);
    }
}
