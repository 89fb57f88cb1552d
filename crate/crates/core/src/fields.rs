//! Test fields with decay metadata and closed-form oracles.
//!
//! A [`ScalarField`] couples an evaluator with the information the quadrature
//! engine needs: where the field is compactly supported, which spheres it is
//! not smooth across, where it is singular, and how fast it decays.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use dashmap::DashMap;
use serde::{Deserialize, Serialize};

use crate::constants::FracParams;
use crate::error::{Error, Result};
use crate::geometry::{add, axis, dist, dot, norm, scale, sub, Ball, Point, ORIGIN};
use crate::quadrature::{
    adaptive_gauss_kronrod, ray_tail, EndBehavior, Estimate, QuadratureSpec, Ray, Scales, SphereRule,
    TailEnvelope,
};

pub type Matrix = [[f64; 3]; 3];

/// Declared smoothness of a field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regularity {
    SmoothCompact,
    HolderSPlusEps,
    C2,
    C3,
    C4,
}

/// Everything the quadrature engine needs to know about a field.
#[derive(Clone, Debug, Serialize)]
pub struct FieldMeta {
    pub id: String,
    pub dim: usize,
    pub regularity: Regularity,
    pub tail: TailEnvelope,
    /// Ball outside which the field vanishes identically.
    pub support: Option<Ball>,
    /// Spheres across which the field is not smooth.
    pub kinks: Vec<Ball>,
    /// Points where the field is unbounded, with the exponent of `|y - p|`.
    pub singular_points: Vec<(Point, f64)>,
    /// Typical length over which the field varies.
    pub feature: f64,
    /// Ball holding the bulk of a non-compact field; its sphere is a panel boundary.
    pub core: Option<Ball>,
}

impl FieldMeta {
    pub fn new(id: impl Into<String>, dim: usize, regularity: Regularity, tail: TailEnvelope, feature: f64) -> Self {
        FieldMeta {
            id: id.into(),
            dim,
            regularity,
            tail,
            support: None,
            kinks: Vec::new(),
            singular_points: Vec::new(),
            feature,
            core: None,
        }
    }

    /// Breakpoints of `rho -> u(origin + rho * dir)` for `rho > 0`.
    pub fn ray_breaks(&self, origin: &Point, dir: &Point, ray: &mut Ray) {
        for k in &self.kinks {
            for t in k.ray_crossings(origin, dir) {
                ray.add_break(t, EndBehavior::Kink);
            }
        }
        if let Some(c) = &self.core {
            for t in c.ray_crossings(origin, dir) {
                ray.add_break(t, EndBehavior::Regular);
            }
        }
        for b in self.kinks.iter().chain(self.core.iter()) {
            if let Some((lo, hi)) = b.ray_chord(origin, dir) {
                ray.add_zone(lo, hi);
            }
        }
    }

    /// Largest `rho` at which the ray `origin + rho * dir` can see a nonzero value.
    pub fn ray_extent(&self, origin: &Point, dir: &Point) -> Option<f64> {
        self.support.map(|b| b.ray_chord(origin, dir).map_or(0.0, |c| c.1))
    }
}

/// Evaluator and optional closed-form oracles of a field.
pub trait FieldFn: Send + Sync {
    fn eval(&self, x: &Point) -> Result<f64>;

    fn gradient(&self, _x: &Point) -> Option<Point> {
        None
    }

    fn hessian(&self, _x: &Point) -> Option<Matrix> {
        None
    }

    /// `(-Delta)^s u(x)` from an independent closed form.
    fn frac_laplacian(&self, _x: &Point, _params: &FracParams) -> Option<Result<f64>> {
        None
    }

    /// `grad^s u(x)` from an independent closed form.
    fn frac_gradient(&self, _x: &Point, _params: &FracParams) -> Option<Result<Point>> {
        None
    }

    /// Value with the absolute error of its own numerical evaluation.
    fn eval_estimate(&self, x: &Point) -> Result<Estimate> {
        Ok(Estimate::exact(self.eval(x)?))
    }

    /// Memo cache of numerically evaluated fields.
    fn cache(&self) -> Option<&QuantizedCache> {
        None
    }
}

/// A real-valued field on R^n with metadata.
#[derive(Clone)]
pub struct ScalarField {
    meta: Arc<FieldMeta>,
    f: Arc<dyn FieldFn>,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField").field("id", &self.meta.id).finish()
    }
}

impl ScalarField {
    pub fn new(meta: FieldMeta, f: impl FieldFn + 'static) -> Self {
        ScalarField {
            meta: Arc::new(meta),
            f: Arc::new(f),
        }
    }

    pub fn meta(&self) -> &FieldMeta {
        &self.meta
    }

    pub fn id(&self) -> &str {
        &self.meta.id
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    /// The same evaluator under different metadata.
    pub fn with_meta(&self, meta: FieldMeta) -> ScalarField {
        ScalarField {
            meta: Arc::new(meta),
            f: self.f.clone(),
        }
    }

    fn check_regular(&self, x: &Point) -> Result<()> {
        for (p, _) in &self.meta.singular_points {
            if dist(x, p) == 0.0 {
                return Err(Error::SingularPoint {
                    field: self.meta.id.clone(),
                    point: *x,
                });
            }
        }
        Ok(())
    }

    /// Evaluates the field; declared singular points and non-finite values are errors.
    pub fn eval(&self, x: &Point) -> Result<f64> {
        self.check_regular(x)?;
        let v = self.f.eval(x)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                what: format!("field `{}`", self.meta.id),
                point: *x,
                value: v,
            })
        }
    }

    /// Like [`ScalarField::eval`], with the error of a numerically evaluated field.
    pub fn eval_estimate(&self, x: &Point) -> Result<Estimate> {
        self.check_regular(x)?;
        let e = self.f.eval_estimate(x)?;
        if e.value.is_finite() {
            Ok(e)
        } else {
            Err(Error::NonFinite {
                what: format!("field `{}`", self.meta.id),
                point: *x,
                value: e.value,
            })
        }
    }

    pub fn cache(&self) -> Option<&QuantizedCache> {
        self.f.cache()
    }

    pub fn gradient(&self, x: &Point) -> Option<Point> {
        self.f.gradient(x)
    }

    pub fn hessian(&self, x: &Point) -> Option<Matrix> {
        self.f.hessian(x)
    }

    pub fn frac_laplacian_oracle(&self, x: &Point, params: &FracParams) -> Option<Result<f64>> {
        self.f.frac_laplacian(x, params)
    }

    pub fn frac_gradient_oracle(&self, x: &Point, params: &FracParams) -> Option<Result<Point>> {
        self.f.frac_gradient(x, params)
    }

    /// Gradient from the oracle, or by fourth-order central differences.
    pub fn gradient_or_fd(&self, x: &Point) -> Result<Point> {
        if let Some(g) = self.gradient(x) {
            return Ok(g);
        }
        let h = 1e-3 * self.meta.feature;
        let mut g = ORIGIN;
        for (i, gi) in g.iter_mut().enumerate().take(self.dim()) {
            let e = axis(i);
            let f = |t: f64| self.eval(&crate::geometry::axpy(x, t, &e));
            *gi = (8.0 * (f(h)? - f(-h)?) - (f(2.0 * h)? - f(-2.0 * h)?)) / (12.0 * h);
        }
        Ok(g)
    }
}

// ---------------------------------------------------------------------------
// Memo cache keyed on quantized coordinates

/// Concurrent memo of a pure function of a point. Arguments are snapped to a grid
/// of spacing `quantum` before evaluation so the stored value depends only on the
/// key, never on evaluation order.
pub struct QuantizedCache {
    quantum: f64,
    map: DashMap<[i64; 3], Estimate>,
}

impl QuantizedCache {
    pub fn new(quantum: f64) -> Self {
        QuantizedCache {
            quantum,
            map: DashMap::new(),
        }
    }

    fn key(&self, x: &Point) -> Option<([i64; 3], Point)> {
        if self.quantum <= 0.0 {
            return None;
        }
        let mut k = [0i64; 3];
        let mut snapped = ORIGIN;
        for i in 0..3 {
            let q = (x[i] / self.quantum).round();
            if !(q.abs() < 4e18) {
                return None;
            }
            k[i] = q as i64;
            snapped[i] = q * self.quantum;
        }
        Some((k, snapped))
    }

    pub fn get_or_try_insert<F>(&self, x: &Point, f: F) -> Result<Estimate>
    where
        F: FnOnce(&Point) -> Result<Estimate>,
    {
        match self.key(x) {
            None => f(x),
            Some((k, snapped)) => {
                if let Some(v) = self.map.get(&k) {
                    return Ok(*v);
                }
                let v = f(&snapped)?;
                self.map.insert(k, v);
                Ok(v)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// All entries in key order.
    pub fn entries(&self) -> Vec<([i64; 3], Estimate)> {
        let mut v: Vec<_> = self.map.iter().map(|e| (*e.key(), *e.value())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// Seeds the cache, e.g. from a persisted file.
    pub fn extend(&self, entries: impl IntoIterator<Item = ([i64; 3], Estimate)>) {
        for (k, v) in entries {
            self.map.insert(k, v);
        }
    }
}

// ---------------------------------------------------------------------------
// Catalog

struct Constant(f64);

impl FieldFn for Constant {
    fn eval(&self, _x: &Point) -> Result<f64> {
        Ok(self.0)
    }
    fn gradient(&self, _x: &Point) -> Option<Point> {
        Some(ORIGIN)
    }
    fn hessian(&self, _x: &Point) -> Option<Matrix> {
        Some([[0.0; 3]; 3])
    }
    fn frac_laplacian(&self, _x: &Point, _p: &FracParams) -> Option<Result<f64>> {
        Some(Ok(0.0))
    }
    fn frac_gradient(&self, _x: &Point, _p: &FracParams) -> Option<Result<Point>> {
        Some(Ok(ORIGIN))
    }
}

/// `u = c` everywhere.
pub fn constant_field(n: usize, c: f64) -> ScalarField {
    let meta = FieldMeta::new(
        format!("const:v={c}"),
        n,
        Regularity::C4,
        TailEnvelope::new(c.abs(), 0.0, 1.0),
        1.0,
    );
    ScalarField::new(meta, Constant(c))
}

struct Gaussian {
    dim: usize,
    width: f64,
    center: Point,
}

impl Gaussian {
    fn value(&self, x: &Point) -> f64 {
        let y = sub(x, &self.center);
        (-dot(&y, &y) / (2.0 * self.width * self.width)).exp()
    }

    /// `(-Delta)^s` of `exp(-|x|^2 / (2 w^2))` at distance `r` from the center,
    /// from the radial Fourier integral.
    fn fourier_frac_laplacian(&self, r: f64, s: f64) -> Result<f64> {
        let w = self.width;
        let n = self.dim;
        let k_max = 9.5 / w;
        let angular = |kr: f64| -> f64 {
            match n {
                1 => 2.0 * kr.cos(),
                2 => 2.0 * PI * bessel_j0(kr),
                _ => 4.0 * PI * if kr.abs() < 1e-6 { 1.0 - kr * kr / 6.0 } else { kr.sin() / kr },
            }
        };
        let integrand = |k: f64| {
            k.powf(2.0 * s) * (-0.5 * w * w * k * k).exp() * k.powi(n as i32 - 1) * angular(k * r)
        };
        let (v, _) = adaptive_gauss_kronrod(integrand, 0.0, k_max, 1e-14, 1e-12)?;
        let nf = n as f64;
        Ok((2.0 * PI).powf(-nf / 2.0) * w.powi(n as i32) * v)
    }
}

/// Zeroth-order Bessel function from its integral representation on `[0, pi]`
/// (trapezoid rule, spectrally accurate for this periodic integrand).
pub fn bessel_j0(x: f64) -> f64 {
    let m = 32 + 2 * x.abs().ceil() as usize;
    let h = PI / m as f64;
    // endpoints theta = 0 and pi both contribute cos(0) / 2
    let mut sum = 1.0;
    for j in 1..m {
        sum += (x * (j as f64 * h).sin()).cos();
    }
    sum * h / PI
}

impl FieldFn for Gaussian {
    fn eval(&self, x: &Point) -> Result<f64> {
        Ok(self.value(x))
    }

    fn gradient(&self, x: &Point) -> Option<Point> {
        let y = sub(x, &self.center);
        Some(scale(&y, -self.value(x) / (self.width * self.width)))
    }

    fn hessian(&self, x: &Point) -> Option<Matrix> {
        let y = sub(x, &self.center);
        let u = self.value(x);
        let w2 = self.width * self.width;
        let mut h = [[0.0; 3]; 3];
        for i in 0..self.dim {
            for j in 0..self.dim {
                let delta = if i == j { 1.0 } else { 0.0 };
                h[i][j] = u * (y[i] * y[j] / (w2 * w2) - delta / w2);
            }
        }
        Some(h)
    }

    fn frac_laplacian(&self, x: &Point, p: &FracParams) -> Option<Result<f64>> {
        Some(self.fourier_frac_laplacian(dist(x, &self.center), p.s))
    }

    fn frac_gradient(&self, x: &Point, p: &FracParams) -> Option<Result<Point>> {
        if self.dim != 1 {
            return None;
        }
        // Symbol i xi |xi|^{s-1}: -(1/pi) int_0^inf xi^s u_hat(xi) sin(xi y) d xi.
        let w = self.width;
        let y = x[0] - self.center[0];
        let s = p.s;
        let integrand = |k: f64| k.powf(s) * (-0.5 * w * w * k * k).exp() * (k * y).sin();
        Some(
            adaptive_gauss_kronrod(integrand, 0.0, 9.5 / w, 1e-14, 1e-12)
                .map(|(v, _)| [-(w * (2.0 * PI).sqrt() / PI) * v, 0.0, 0.0]),
        )
    }
}

/// `u(x) = exp(-|x|^2 / (2 width^2))`.
pub fn gaussian_field(n: usize, width: f64) -> Result<ScalarField> {
    gaussian_centered(n, width, ORIGIN)
}

/// Gaussian centered at `center`.
pub fn gaussian_centered(n: usize, width: f64, center: Point) -> Result<ScalarField> {
    check_dim(n)?;
    if !(width > 0.0) {
        return Err(Error::invalid(format!("gaussian width must be positive, got {width}")));
    }
    // |u| <= A |y|^-4 beyond R0 = 5 w with A = R0^4 exp(-R0^2 / (2 w^2)).
    let r0 = 5.0 * width;
    let tail = TailEnvelope::new(r0.powi(4) * (-12.5f64).exp(), 4.0, r0).shifted(norm(&center));
    let mut meta = FieldMeta::new(format!("gaussian:w={width}"), n, Regularity::C4, tail, width);
    if center != ORIGIN {
        meta.id = format!("gaussian:w={width},c={}", fmt_point(&center, n));
    }
    meta.core = Some(Ball::new(center, 3.0 * width)?);
    Ok(ScalarField::new(meta, Gaussian { dim: n, width, center }))
}

struct Bump {
    radius: f64,
    center: Point,
    dim: usize,
}

impl Bump {
    /// (u, phi', phi'') as functions of q = |y|^2 / r^2, with u = exp(phi).
    fn parts(&self, x: &Point) -> Option<(Point, f64, f64, f64, f64)> {
        let y = sub(x, &self.center);
        let q = dot(&y, &y) / (self.radius * self.radius);
        if q >= 1.0 {
            return None;
        }
        let one = 1.0 - q;
        let u = (1.0 - 1.0 / one).exp();
        Some((y, q, u, -1.0 / (one * one), -2.0 / (one * one * one)))
    }
}

impl FieldFn for Bump {
    fn eval(&self, x: &Point) -> Result<f64> {
        Ok(self.parts(x).map_or(0.0, |p| p.2))
    }

    fn gradient(&self, x: &Point) -> Option<Point> {
        Some(match self.parts(x) {
            None => ORIGIN,
            Some((y, _, u, d1, _)) => scale(&y, u * d1 * 2.0 / (self.radius * self.radius)),
        })
    }

    fn hessian(&self, x: &Point) -> Option<Matrix> {
        let mut h = [[0.0; 3]; 3];
        if let Some((y, _, u, d1, d2)) = self.parts(x) {
            let r2 = self.radius * self.radius;
            for i in 0..self.dim {
                for j in 0..self.dim {
                    let qi = 2.0 * y[i] / r2;
                    let qj = 2.0 * y[j] / r2;
                    let qij = if i == j { 2.0 / r2 } else { 0.0 };
                    h[i][j] = u * ((d1 * d1 + d2) * qi * qj + d1 * qij);
                }
            }
        }
        Some(h)
    }
}

/// The smooth bump `exp(1 - 1/(1 - |x/r|^2))` inside `B_r`, zero outside.
pub fn bump_field(n: usize, support_radius: f64) -> Result<ScalarField> {
    bump_centered(n, support_radius, ORIGIN)
}

/// Bump supported in `B(center, support_radius)`.
pub fn bump_centered(n: usize, support_radius: f64, center: Point) -> Result<ScalarField> {
    check_dim(n)?;
    let ball = Ball::new(center, support_radius)?;
    let mut id = format!("bump:r={support_radius}");
    if center != ORIGIN {
        id = format!("{id},c={}", fmt_point(&center, n));
    }
    let tail = TailEnvelope::compact(support_radius + norm(&center));
    let mut meta = FieldMeta::new(id, n, Regularity::SmoothCompact, tail, 0.5 * support_radius);
    meta.support = Some(ball);
    meta.kinks = vec![ball];
    Ok(ScalarField::new(
        meta,
        Bump {
            radius: support_radius,
            center,
            dim: n,
        },
    ))
}

struct XBump(Bump);

impl FieldFn for XBump {
    fn eval(&self, x: &Point) -> Result<f64> {
        Ok((x[0] - self.0.center[0]) * self.0.eval(x)?)
    }

    fn gradient(&self, x: &Point) -> Option<Point> {
        let g = self.0.gradient(x)?;
        let y0 = x[0] - self.0.center[0];
        let mut out = scale(&g, y0);
        out[0] += self.0.eval(x).ok()?;
        Some(out)
    }

    fn hessian(&self, x: &Point) -> Option<Matrix> {
        let g = self.0.gradient(x)?;
        let h = self.0.hessian(x)?;
        let y0 = x[0] - self.0.center[0];
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = y0 * h[i][j];
            }
        }
        for k in 0..3 {
            out[0][k] += g[k];
            out[k][0] += g[k];
        }
        Some(out)
    }
}

/// `u(x) = x_1 * bump(x)`, odd in `x_1`.
pub fn x_bump_field(n: usize, support_radius: f64) -> Result<ScalarField> {
    let b = bump_field(n, support_radius)?;
    let mut meta = (*b.meta).clone();
    meta.id = format!("xbump:r={support_radius}");
    Ok(ScalarField::new(
        meta,
        XBump(Bump {
            radius: support_radius,
            center: ORIGIN,
            dim: n,
        }),
    ))
}

struct Fundamental {
    kappa: f64,
    exponent: f64,
}

impl FieldFn for Fundamental {
    fn eval(&self, x: &Point) -> Result<f64> {
        Ok(self.kappa * norm(x).powf(self.exponent))
    }
}

/// `Phi_s(x) = kappa_ns |x|^{2s - n}`, singular at the origin.
pub fn fundamental_solution_field(params: &FracParams) -> Result<ScalarField> {
    let kappa = params.kappa_ns.ok_or_else(|| {
        Error::invalid(format!(
            "fundamental solution needs 2s != n (n = {}, s = {})",
            params.n, params.s
        ))
    })?;
    let exponent = 2.0 * params.s - params.n as f64;
    let tail = TailEnvelope::new(kappa.abs(), -exponent, 1.0);
    let mut meta = FieldMeta::new("phi_s", params.n, Regularity::C4, tail, 1.0);
    meta.singular_points = vec![(ORIGIN, exponent)];
    Ok(ScalarField::new(meta, Fundamental { kappa, exponent }))
}

struct PoissonSolution {
    params: FracParams,
    ball: Ball,
    g: ScalarField,
    spec: QuadratureSpec,
    cache: QuantizedCache,
}

impl PoissonSolution {
    /// `int_{|y| > r} K(x, y) g(y) dy` by rays from the ball center.
    fn interior(&self, x: &Point) -> Result<f64> {
        let p = &self.params;
        let n = p.n;
        let s = p.s;
        let r = self.ball.radius;
        let c = self.ball.center;
        let xr = dist(x, &c);
        let gap = r - xr;
        let num = (r * r - xr * xr).powf(s);
        let rule = SphereRule::full(n, self.spec.angular_nodes)?;
        let res = self.spec.full();
        let gm = self.g.meta();
        let feature = r.min(gm.feature);
        // Bound on the kernel along a ray for rho >= 2r.
        let k0 = p.a_ns * num * 2f64.powi(n as i32) * (4.0f64 / 3.0).powf(s);
        let env = TailEnvelope::new(gm.tail.amplitude * k0, gm.tail.power, gm.tail.r0);
        let tail_tol = self.spec.tail_tol / rule.total_weight();
        let (t_tail, _) = ray_tail(&env, norm(&c), 1.0 + 2.0 * s, tail_tol, 2.0 * r)?;
        let mut total = 0.0;
        for (dir, w) in rule.dirs.iter().zip(&rule.weights) {
            let end = gm.ray_extent(&c, dir).map_or(t_tail, |e| e.max(r));
            if end <= r {
                continue;
            }
            let mut ray = Ray::new(r, end, Scales::new(feature).with_cap(gap))
                .start_behavior(EndBehavior::algebraic(-s, 1)?);
            gm.ray_breaks(&c, dir, &mut ray);
            let v = ray.integrate(&res, &mut |rho: f64| {
                let y = crate::geometry::axpy(&c, rho, dir);
                let k = p.a_ns * num * (rho * rho - r * r).powf(-s) * dist(x, &y).powi(-(n as i32));
                Ok(k * self.g.eval(&y)? * rho.powi(n as i32 - 1))
            })?;
            total += w * v;
        }
        Ok(total)
    }
}

impl FieldFn for PoissonSolution {
    fn eval(&self, x: &Point) -> Result<f64> {
        if !self.ball.contains(x) {
            return self.g.eval(x);
        }
        Ok(self.cache.get_or_try_insert(x, |y| self.interior(y).map(Estimate::exact))?.value)
    }

    fn cache(&self) -> Option<&QuantizedCache> {
        Some(&self.cache)
    }
}

/// The solution of `(-Delta)^s u = 0` in `ball` with `u = g` outside, via the Poisson kernel.
pub fn poisson_harmonic_field(
    params: &FracParams,
    ball: Ball,
    g: ScalarField,
    spec: &QuadratureSpec,
) -> Result<ScalarField> {
    if norm(&ball.center) != 0.0 {
        return Err(Error::invalid("poisson field requires a ball centered at the origin"));
    }
    if g.dim() != params.n {
        return Err(Error::invalid("dimension mismatch between data and parameters"));
    }
    let gm = g.meta();
    if !gm.tail.is_compact() && !(gm.tail.power + 2.0 * params.s > 0.0) {
        return Err(Error::invalid("exterior data lacks an integrable tail envelope"));
    }
    let mut meta = FieldMeta::new(
        format!("poisson:r={};{}", ball.radius, g.id()),
        params.n,
        Regularity::HolderSPlusEps,
        TailEnvelope {
            r0: gm.tail.r0.max(ball.radius),
            ..gm.tail
        },
        ball.radius.min(gm.feature),
    );
    meta.support = gm.support.map(|b| {
        let r = (norm(&b.center) + b.radius).max(ball.radius);
        Ball { center: ORIGIN, radius: r }
    });
    meta.kinks = gm.kinks.clone();
    meta.kinks.push(ball);
    meta.core = gm.core;
    Ok(ScalarField::new(
        meta,
        PoissonSolution {
            params: params.clone(),
            ball,
            g,
            spec: spec.clone(),
            cache: QuantizedCache::new(spec.cache_quantum),
        },
    ))
}

// ---------------------------------------------------------------------------
// Transformations

struct Scaled {
    u: ScalarField,
    lambda: f64,
    s: f64,
}

impl Scaled {
    fn inner(&self, x: &Point) -> Point {
        scale(x, self.lambda)
    }
    fn amp(&self) -> f64 {
        self.lambda.powf(-self.s)
    }
}

impl FieldFn for Scaled {
    fn eval(&self, x: &Point) -> Result<f64> {
        Ok(self.amp() * self.u.eval(&self.inner(x))?)
    }
    fn gradient(&self, x: &Point) -> Option<Point> {
        Some(scale(&self.u.gradient(&self.inner(x))?, self.amp() * self.lambda))
    }
    fn hessian(&self, x: &Point) -> Option<Matrix> {
        let mut h = self.u.hessian(&self.inner(x))?;
        let f = self.amp() * self.lambda * self.lambda;
        h.iter_mut().flatten().for_each(|v| *v *= f);
        Some(h)
    }
    fn frac_laplacian(&self, x: &Point, p: &FracParams) -> Option<Result<f64>> {
        let f = self.amp() * self.lambda.powf(2.0 * p.s);
        Some(self.u.frac_laplacian_oracle(&self.inner(x), p)?.map(|v| f * v))
    }
    fn frac_gradient(&self, x: &Point, p: &FracParams) -> Option<Result<Point>> {
        let f = self.amp() * self.lambda.powf(p.s);
        Some(self.u.frac_gradient_oracle(&self.inner(x), p)?.map(|v| scale(&v, f)))
    }
}

/// `u_lambda(x) = lambda^{-s} u(lambda x)`.
pub fn scaled_field(u: &ScalarField, lambda: f64, s: f64) -> Result<ScalarField> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("scale factor must be positive, got {lambda}")));
    }
    let m = u.meta();
    let shrink = |b: &Ball| Ball {
        center: scale(&b.center, 1.0 / lambda),
        radius: b.radius / lambda,
    };
    let tail = if m.tail.is_compact() {
        TailEnvelope::compact(m.tail.r0 / lambda)
    } else {
        TailEnvelope::new(
            m.tail.amplitude * lambda.powf(-s - m.tail.power),
            m.tail.power,
            m.tail.r0 / lambda,
        )
    };
    let meta = FieldMeta {
        id: format!("{};lambda={lambda}", m.id),
        dim: m.dim,
        regularity: m.regularity,
        tail,
        support: m.support.as_ref().map(shrink),
        kinks: m.kinks.iter().map(shrink).collect(),
        singular_points: m
            .singular_points
            .iter()
            .map(|(p, e)| (scale(p, 1.0 / lambda), *e))
            .collect(),
        feature: m.feature / lambda,
        core: m.core.as_ref().map(shrink),
    };
    Ok(ScalarField::new(
        meta,
        Scaled {
            u: u.clone(),
            lambda,
            s,
        },
    ))
}

struct Shifted {
    u: ScalarField,
    shift: Point,
}

impl FieldFn for Shifted {
    fn eval(&self, x: &Point) -> Result<f64> {
        self.u.eval(&sub(x, &self.shift))
    }
    fn gradient(&self, x: &Point) -> Option<Point> {
        self.u.gradient(&sub(x, &self.shift))
    }
    fn hessian(&self, x: &Point) -> Option<Matrix> {
        self.u.hessian(&sub(x, &self.shift))
    }
    fn frac_laplacian(&self, x: &Point, p: &FracParams) -> Option<Result<f64>> {
        self.u.frac_laplacian_oracle(&sub(x, &self.shift), p)
    }
    fn frac_gradient(&self, x: &Point, p: &FracParams) -> Option<Result<Point>> {
        self.u.frac_gradient_oracle(&sub(x, &self.shift), p)
    }
}

/// `y -> u(y - a)`.
pub fn shifted_field(u: &ScalarField, a: Point) -> ScalarField {
    let m = u.meta();
    let mv = |b: &Ball| Ball {
        center: add(&b.center, &a),
        radius: b.radius,
    };
    let meta = FieldMeta {
        id: format!("{};shift={}", m.id, fmt_point(&a, m.dim)),
        dim: m.dim,
        regularity: m.regularity,
        tail: m.tail.shifted(norm(&a)),
        support: m.support.as_ref().map(mv),
        kinks: m.kinks.iter().map(mv).collect(),
        singular_points: m.singular_points.iter().map(|(p, e)| (add(p, &a), *e)).collect(),
        feature: m.feature,
        core: m.core.as_ref().map(mv),
    };
    ScalarField::new(meta, Shifted { u: u.clone(), shift: a })
}

struct Amplified {
    u: ScalarField,
    c: f64,
}

impl FieldFn for Amplified {
    fn eval(&self, x: &Point) -> Result<f64> {
        Ok(self.c * self.u.eval(x)?)
    }
    fn gradient(&self, x: &Point) -> Option<Point> {
        Some(scale(&self.u.gradient(x)?, self.c))
    }
    fn hessian(&self, x: &Point) -> Option<Matrix> {
        let mut h = self.u.hessian(x)?;
        h.iter_mut().flatten().for_each(|v| *v *= self.c);
        Some(h)
    }
    fn frac_laplacian(&self, x: &Point, p: &FracParams) -> Option<Result<f64>> {
        Some(self.u.frac_laplacian_oracle(x, p)?.map(|v| self.c * v))
    }
    fn frac_gradient(&self, x: &Point, p: &FracParams) -> Option<Result<Point>> {
        Some(self.u.frac_gradient_oracle(x, p)?.map(|v| scale(&v, self.c)))
    }
}

/// `c * u`.
pub fn amplified_field(u: &ScalarField, c: f64) -> ScalarField {
    let m = u.meta();
    let mut meta = m.clone();
    meta.id = format!("{};amp={c}", m.id);
    meta.tail.amplitude *= c.abs();
    ScalarField::new(meta, Amplified { u: u.clone(), c })
}

struct Sum(ScalarField, ScalarField);

impl FieldFn for Sum {
    fn eval(&self, x: &Point) -> Result<f64> {
        Ok(self.0.eval(x)? + self.1.eval(x)?)
    }
    fn eval_estimate(&self, x: &Point) -> Result<Estimate> {
        let a = self.0.eval_estimate(x)?;
        let b = self.1.eval_estimate(x)?;
        Ok(Estimate::new(a.value + b.value, a.error + b.error))
    }
    fn gradient(&self, x: &Point) -> Option<Point> {
        Some(add(&self.0.gradient(x)?, &self.1.gradient(x)?))
    }
    fn hessian(&self, x: &Point) -> Option<Matrix> {
        let mut h = self.0.hessian(x)?;
        let g = self.1.hessian(x)?;
        for (row, other) in h.iter_mut().zip(g.iter()) {
            row.iter_mut().zip(other.iter()).for_each(|(a, b)| *a += b);
        }
        Some(h)
    }
    fn frac_laplacian(&self, x: &Point, p: &FracParams) -> Option<Result<f64>> {
        let a = self.0.frac_laplacian_oracle(x, p)?;
        let b = self.1.frac_laplacian_oracle(x, p)?;
        Some(a.and_then(|a| Ok(a + b?)))
    }
    fn frac_gradient(&self, x: &Point, p: &FracParams) -> Option<Result<Point>> {
        let a = self.0.frac_gradient_oracle(x, p)?;
        let b = self.1.frac_gradient_oracle(x, p)?;
        Some(a.and_then(|a| Ok(add(&a, &b?))))
    }
}

fn regularity_rank(r: Regularity) -> u8 {
    match r {
        Regularity::HolderSPlusEps => 0,
        Regularity::C2 => 1,
        Regularity::C3 => 2,
        Regularity::C4 => 3,
        Regularity::SmoothCompact => 4,
    }
}

fn enclosing(a: &Ball, b: &Ball) -> Ball {
    let d = dist(&a.center, &b.center);
    if d + b.radius <= a.radius {
        return *a;
    }
    if d + a.radius <= b.radius {
        return *b;
    }
    Ball {
        center: scale(&add(&a.center, &b.center), 0.5),
        radius: 0.5 * d + a.radius.max(b.radius),
    }
}

/// `u + v`.
pub fn sum_field(u: &ScalarField, v: &ScalarField) -> Result<ScalarField> {
    let (a, b) = (u.meta(), v.meta());
    if a.dim != b.dim {
        return Err(Error::invalid(format!(
            "cannot add fields of dimension {} and {}",
            a.dim, b.dim
        )));
    }
    let r0 = a.tail.r0.max(b.tail.r0);
    let tail = match (a.tail.is_compact(), b.tail.is_compact()) {
        (true, true) => TailEnvelope::compact(r0),
        (true, false) => TailEnvelope::new(b.tail.amplitude, b.tail.power, r0),
        (false, true) => TailEnvelope::new(a.tail.amplitude, a.tail.power, r0),
        (false, false) => {
            // Both bounds rewritten with the slower power, valid for r >= r0.
            let p = a.tail.power.min(b.tail.power);
            let lift = |t: &TailEnvelope| t.amplitude * r0.powf(p - t.power);
            TailEnvelope::new(lift(&a.tail) + lift(&b.tail), p, r0)
        }
    };
    let support = match (a.support, b.support) {
        (Some(x), Some(y)) => Some(enclosing(&x, &y)),
        _ => None,
    };
    let core = match (a.core, b.core) {
        (Some(x), Some(y)) => Some(enclosing(&x, &y)),
        (x, y) => x.or(y),
    };
    let regularity = if regularity_rank(a.regularity) <= regularity_rank(b.regularity) {
        a.regularity
    } else {
        b.regularity
    };
    let mut kinks = a.kinks.clone();
    kinks.extend(b.kinks.iter().copied());
    let mut singular_points = a.singular_points.clone();
    singular_points.extend(b.singular_points.iter().copied());
    let meta = FieldMeta {
        id: format!("{}+{}", a.id, b.id),
        dim: a.dim,
        regularity,
        tail,
        support,
        kinks,
        singular_points,
        feature: a.feature.min(b.feature),
        core,
    };
    Ok(ScalarField::new(meta, Sum(u.clone(), v.clone())))
}

struct Squared(ScalarField);

impl FieldFn for Squared {
    fn eval(&self, x: &Point) -> Result<f64> {
        let v = self.0.eval(x)?;
        Ok(v * v)
    }
    fn gradient(&self, x: &Point) -> Option<Point> {
        Some(scale(&self.0.gradient(x)?, 2.0 * self.0.eval(x).ok()?))
    }
}

/// `u^2`.
pub fn squared_field(u: &ScalarField) -> ScalarField {
    let m = u.meta();
    let mut meta = m.clone();
    meta.id = format!("{};squared", m.id);
    meta.tail = m.tail.product(&m.tail);
    meta.singular_points = m.singular_points.iter().map(|(p, e)| (*p, 2.0 * e)).collect();
    ScalarField::new(meta, Squared(u.clone()))
}

struct Difference {
    u: ScalarField,
    z: Point,
}

impl FieldFn for Difference {
    fn eval(&self, x: &Point) -> Result<f64> {
        Ok(self.u.eval(x)? - self.u.eval(&sub(x, &self.z))?)
    }
}

/// `w_z(y) = u(y) - u(y - z)`.
pub fn difference_field(u: &ScalarField, z: Point) -> ScalarField {
    let m = u.meta();
    let shifted = shifted_field(u, z);
    let sm = shifted.meta();
    let support = match (m.support, sm.support) {
        (Some(a), Some(b)) => {
            let d = dist(&a.center, &b.center);
            let center = scale(&add(&a.center, &b.center), 0.5);
            Some(Ball {
                center,
                radius: 0.5 * d + a.radius.max(b.radius),
            })
        }
        _ => None,
    };
    let tail = if m.tail.is_compact() {
        TailEnvelope::compact(sm.tail.r0.max(m.tail.r0))
    } else {
        TailEnvelope::new(
            m.tail.amplitude + sm.tail.amplitude,
            m.tail.power.min(sm.tail.power),
            m.tail.r0.max(sm.tail.r0),
        )
    };
    let mut kinks = m.kinks.clone();
    kinks.extend(sm.kinks.iter().copied());
    let mut singular_points = m.singular_points.clone();
    singular_points.extend(sm.singular_points.iter().copied());
    let meta = FieldMeta {
        id: format!("{};diff={}", m.id, fmt_point(&z, m.dim)),
        dim: m.dim,
        regularity: m.regularity,
        tail,
        support,
        kinks,
        singular_points,
        feature: m.feature,
        core: m.core,
    };
    ScalarField::new(meta, Difference { u: u.clone(), z })
}

// ---------------------------------------------------------------------------
// Vector fields

/// Evaluator of a vector field on R^n.
pub trait VectorFieldFn: Send + Sync {
    fn eval(&self, x: &Point) -> Result<Point>;
}

/// A vector-valued field with the same metadata as [`ScalarField`]; the tail
/// envelope bounds the Euclidean norm.
#[derive(Clone)]
pub struct VectorField {
    meta: Arc<FieldMeta>,
    f: Arc<dyn VectorFieldFn>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField").field("id", &self.meta.id).finish()
    }
}

impl VectorField {
    pub fn new(meta: FieldMeta, f: impl VectorFieldFn + 'static) -> Self {
        VectorField {
            meta: Arc::new(meta),
            f: Arc::new(f),
        }
    }

    pub fn meta(&self) -> &FieldMeta {
        &self.meta
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn eval(&self, x: &Point) -> Result<Point> {
        let v = self.f.eval(x)?;
        if v.iter().all(|c| c.is_finite()) {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                what: format!("vector field `{}`", self.meta.id),
                point: *x,
                value: f64::NAN,
            })
        }
    }
}

struct ConstantVector(Point);

impl VectorFieldFn for ConstantVector {
    fn eval(&self, _x: &Point) -> Result<Point> {
        Ok(self.0)
    }
}

/// `phi(x) = v`.
pub fn constant_vector_field(n: usize, v: Point) -> VectorField {
    let meta = FieldMeta::new(
        format!("constvec:{}", fmt_point(&v, n)),
        n,
        Regularity::C4,
        TailEnvelope::new(norm(&v), 0.0, 1.0),
        1.0,
    );
    VectorField::new(meta, ConstantVector(v))
}

struct RadialBumpVector(Bump);

impl VectorFieldFn for RadialBumpVector {
    fn eval(&self, x: &Point) -> Result<Point> {
        Ok(scale(x, self.0.eval(x)?))
    }
}

/// `phi(x) = x * bump(x)`.
pub fn radial_bump_vector_field(n: usize, support_radius: f64) -> Result<VectorField> {
    let b = bump_field(n, support_radius)?;
    let mut meta = (*b.meta).clone();
    meta.id = format!("xbumpvec:r={support_radius}");
    Ok(VectorField::new(
        meta,
        RadialBumpVector(Bump {
            radius: support_radius,
            center: ORIGIN,
            dim: n,
        }),
    ))
}

/// Wraps `n` scalar fields as the components of a vector field.
pub fn vector_from_components(components: Vec<ScalarField>) -> Result<VectorField> {
    let first = components
        .first()
        .ok_or_else(|| Error::invalid("vector field needs at least one component"))?;
    let mut meta = first.meta().clone();
    meta.id = format!(
        "vec[{}]",
        components.iter().map(|c| c.id().to_string()).collect::<Vec<_>>().join(",")
    );
    meta.tail.amplitude = components.iter().map(|c| c.meta().tail.amplitude).sum();
    meta.tail.power = components
        .iter()
        .map(|c| c.meta().tail.power)
        .fold(f64::INFINITY, f64::min);
    meta.tail.r0 = components.iter().map(|c| c.meta().tail.r0).fold(0.0, f64::max);
    for c in &components[1..] {
        meta.kinks.extend(c.meta().kinks.iter().copied());
        if meta.support.is_some() && c.meta().support.is_none() {
            meta.support = None;
        }
    }
    struct Components(Vec<ScalarField>);
    impl VectorFieldFn for Components {
        fn eval(&self, x: &Point) -> Result<Point> {
            let mut v = ORIGIN;
            for (i, c) in self.0.iter().enumerate() {
                v[i] = c.eval(x)?;
            }
            Ok(v)
        }
    }
    Ok(VectorField::new(meta, Components(components)))
}

// ---------------------------------------------------------------------------
// Parsing catalog ids

fn check_dim(n: usize) -> Result<()> {
    if (1..=3).contains(&n) {
        Ok(())
    } else {
        Err(Error::InvalidDimension(n))
    }
}

fn fmt_point(p: &Point, n: usize) -> String {
    p[..n].iter().map(|v| v.to_string()).collect::<Vec<_>>().join("/")
}

fn parse_point(text: &str, n: usize) -> Result<Point> {
    let mut p = ORIGIN;
    let parts: Vec<&str> = text.split('/').collect();
    if parts.len() > n {
        return Err(Error::invalid(format!("point `{text}` has more than {n} coordinates")));
    }
    for (i, part) in parts.iter().enumerate() {
        p[i] = part
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad coordinate `{part}` in `{text}`")))?;
    }
    Ok(p)
}

/// Parses a catalog id such as `gaussian:w=1`, `bump:r=1,c=0.2`, `xbump:r=1`,
/// `phi_s`, `const:v=2` or `poisson:r=1,gw=1,gc=1.5`. Every kind accepts
/// `amp=<factor>`; `c` takes `/`-separated coordinates. Terms joined by `+`
/// are summed, e.g. `bump:r=1+bump:r=0.5,amp=-0.2`.
pub fn parse_field(id: &str, params: &FracParams, spec: &QuadratureSpec) -> Result<ScalarField> {
    let mut terms = Vec::new();
    let mut start = 0;
    for (i, ch) in id.char_indices() {
        // A `+` inside a number such as `1e+3` is followed by a digit.
        let next = id[i + 1..].chars().next();
        if ch == '+' && next.is_some_and(|c| c.is_ascii_alphabetic()) {
            terms.push(&id[start..i]);
            start = i + 1;
        }
    }
    terms.push(&id[start..]);
    let mut fields = terms
        .iter()
        .map(|t| parse_term(t.trim(), params, spec));
    let first = fields.next().expect("split yields at least one term")?;
    fields.try_fold(first, |acc, f| sum_field(&acc, &f?))
}

fn parse_term(id: &str, params: &FracParams, spec: &QuadratureSpec) -> Result<ScalarField> {
    let n = params.n;
    let (kind, rest) = id.split_once(':').unwrap_or((id, ""));
    let mut keys: Vec<(String, String)> = Vec::new();
    for item in rest.split(',').filter(|t| !t.trim().is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::UnknownField(id.to_string()))?;
        keys.push((k.trim().to_string(), v.trim().to_string()));
    }
    let get = |k: &str| keys.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
    let num = |k: &str, default: f64| -> Result<f64> {
        match get(k) {
            None => Ok(default),
            Some(v) => v
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad value `{v}` for `{k}` in `{id}`"))),
        }
    };
    let center = match get("c") {
        Some(c) => parse_point(c, n)?,
        None => ORIGIN,
    };
    let allowed: &[&str] = match kind {
        "const" => &["v", "amp"],
        "gaussian" => &["w", "c", "amp"],
        "bump" | "xbump" => &["r", "c", "amp"],
        "phi_s" => &["amp"],
        "poisson" => &["r", "gw", "gc", "g", "amp"],
        _ => return Err(Error::UnknownField(id.to_string())),
    };
    if let Some((k, _)) = keys.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
        return Err(Error::invalid(format!("unknown key `{k}` in field id `{id}`")));
    }
    let field = match kind {
        "const" => constant_field(n, num("v", 1.0)?),
        "gaussian" => gaussian_centered(n, num("w", 1.0)?, center)?,
        "bump" => bump_centered(n, num("r", 1.0)?, center)?,
        "xbump" => {
            let f = x_bump_field(n, num("r", 1.0)?)?;
            if center == ORIGIN {
                f
            } else {
                shifted_field(&f, center)
            }
        }
        "phi_s" => fundamental_solution_field(params)?,
        "poisson" => {
            let r = num("r", 1.0)?;
            let g = match get("g") {
                Some("const") | Some("1") => constant_field(n, 1.0),
                Some(other) if other != "gaussian" => {
                    return Err(Error::invalid(format!("unknown exterior data `{other}` in `{id}`")))
                }
                _ => gaussian_centered(n, num("gw", 1.0)?, scale(&axis(0), num("gc", 1.5)?))?,
            };
            poisson_harmonic_field(params, Ball::centered(r)?, g, spec)?
        }
        _ => unreachable!("kind validated above"),
    };
    let amp = num("amp", 1.0)?;
    Ok(if amp == 1.0 {
        field
    } else {
        amplified_field(&field, amp)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::make_params;
    use crate::quadrature::gauss_legendre;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Kummer's function 1F1(a; b; z) by its power series.
    fn hyp1f1(a: f64, b: f64, z: f64) -> f64 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 0..500 {
            let kf = k as f64;
            term *= (a + kf) / (b + kf) * z / (kf + 1.0);
            sum += term;
            if term.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        sum
    }

    fn kummer_frac_laplacian(n: usize, s: f64, w: f64, r: f64) -> f64 {
        use crate::constants::gamma;
        let nf = n as f64;
        w.powf(-2.0 * s) * 2f64.powf(s) * gamma(nf / 2.0 + s) / gamma(nf / 2.0)
            * hyp1f1(nf / 2.0 + s, nf / 2.0, -r * r / (2.0 * w * w))
    }

    #[test]
    fn gaussian_basics() {
        let u = gaussian_field(1, 1.0).unwrap();
        assert_eq!(u.eval(&ORIGIN).unwrap(), 1.0);
        let u2 = gaussian_field(2, 1.0).unwrap();
        assert_eq!(u2.gradient(&ORIGIN).unwrap(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn bessel_j0_values() {
        // J0(1) and J0(10) reference values.
        assert!((bessel_j0(1.0) - 0.765_197_686_557_966_6).abs() < 1e-14);
        assert!((bessel_j0(10.0) + 0.245_935_764_451_348_3).abs() < 1e-14);
        assert!((bessel_j0(0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_fourier_oracle_at_origin() {
        // n = 1, s = 1/2, x = 0: (1/2 pi) int |xi| e^{-xi^2/2} sqrt(2 pi) d xi = sqrt(2/pi).
        let p = make_params(1, 0.5).unwrap();
        let u = gaussian_field(1, 1.0).unwrap();
        let v = u.frac_laplacian_oracle(&ORIGIN, &p).unwrap().unwrap();
        let direct = gauss_legendre(60).integrate(0.0, 12.0, |k| k * (-0.5 * k * k).exp())
            * (2.0 * PI).sqrt()
            / PI;
        assert!((v - direct).abs() < 1e-12, "{v} vs {direct}");
        assert!((v - (2.0 / PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_fourier_oracle_matches_kummer() {
        for n in 1..=3 {
            for &s in &[0.25, 0.5, 0.8] {
                let p = make_params(n, s).unwrap();
                for &w in &[0.7, 1.3] {
                    let u = gaussian_field(n, w).unwrap();
                    for &r in &[0.0, 0.4, 1.1, 2.0] {
                        let x = [r, 0.0, 0.0];
                        let f = u.frac_laplacian_oracle(&x, &p).unwrap().unwrap();
                        let k = kummer_frac_laplacian(n, s, w, r);
                        assert!((f - k).abs() < 1e-10 * k.abs().max(1.0), "n={n} s={s} w={w} r={r}: {f} vs {k}");
                    }
                }
            }
        }
    }

    #[test]
    fn bump_values_and_derivatives() {
        let u = bump_field(2, 1.5).unwrap();
        assert_eq!(u.eval(&ORIGIN).unwrap(), 1.0);
        assert_eq!(u.eval(&[1.5, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(u.eval(&[0.0, 2.0, 0.0]).unwrap(), 0.0);
        let x = [0.3, -0.4, 0.0];
        let g = u.gradient(&x).unwrap();
        let h = u.hessian(&x).unwrap();
        let e = 1e-5;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += e;
            xm[i] -= e;
            let fd = (u.eval(&xp).unwrap() - u.eval(&xm).unwrap()) / (2.0 * e);
            assert!((fd - g[i]).abs() < 1e-8);
            let gp = u.gradient(&xp).unwrap();
            let gm = u.gradient(&xm).unwrap();
            for j in 0..2 {
                assert!(((gp[j] - gm[j]) / (2.0 * e) - h[i][j]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn xbump_derivatives() {
        let u = x_bump_field(1, 1.0).unwrap();
        let x = [0.35, 0.0, 0.0];
        let e = 1e-5;
        let fd = (u.eval(&[x[0] + e, 0.0, 0.0]).unwrap() - u.eval(&[x[0] - e, 0.0, 0.0]).unwrap()) / (2.0 * e);
        assert!((fd - u.gradient(&x).unwrap()[0]).abs() < 1e-8);
        let fd2 = (u.gradient(&[x[0] + e, 0.0, 0.0]).unwrap()[0] - u.gradient(&[x[0] - e, 0.0, 0.0]).unwrap()[0])
            / (2.0 * e);
        assert!((fd2 - u.hessian(&x).unwrap()[0][0]).abs() < 1e-7);
    }

    #[test]
    fn bump_mass_stable() {
        let u = bump_field(1, 1.0).unwrap();
        let mass = |m: usize| {
            let rule = gauss_legendre(m);
            let mut total = 0.0;
            for k in 0..16 {
                let a = -1.0 + k as f64 / 8.0;
                total += rule.integrate(a, a + 0.125, |x| u.eval(&[x, 0.0, 0.0]).unwrap());
            }
            total
        };
        let lo = mass(20);
        let hi = mass(40);
        assert!(lo > 0.0 && (lo - hi).abs() < 1e-10, "{lo} vs {hi}");
    }

    #[test]
    fn fundamental_solution_values() {
        let p = make_params(1, 0.25).unwrap();
        let phi = fundamental_solution_field(&p).unwrap();
        assert!((phi.eval(&[1.0, 0.0, 0.0]).unwrap() - 0.398942).abs() < 1e-6);
        assert!(matches!(phi.eval(&ORIGIN), Err(Error::SingularPoint { .. })));
        let p2 = make_params(2, 0.5).unwrap();
        let phi2 = fundamental_solution_field(&p2).unwrap();
        let k = p2.kappa_ns.unwrap();
        assert!((phi2.eval(&[0.0, 2.0, 0.0]).unwrap() - 0.5 * k).abs() < 1e-15);
        assert!(fundamental_solution_field(&make_params(1, 0.5).unwrap()).is_err());
    }

    #[test]
    fn poisson_with_constant_data_is_constant() {
        let p = make_params(1, 0.5).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let u = poisson_harmonic_field(&p, Ball::centered(1.0).unwrap(), constant_field(1, 1.0), &spec).unwrap();
        for &x in &[0.0, 0.3, -0.7, 0.95] {
            let v = u.eval(&[x, 0.0, 0.0]).unwrap();
            assert!((v - 1.0).abs() < 1e-7, "x={x}: {v}");
        }
        assert_eq!(u.eval(&[2.0, 0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn tail_envelopes_hold_on_samples() {
        let p = make_params(2, 0.25).unwrap();
        let spec = QuadratureSpec::for_dim(2);
        let fields = vec![
            gaussian_field(2, 1.0).unwrap(),
            gaussian_centered(2, 0.6, [0.5, -0.2, 0.0]).unwrap(),
            bump_field(2, 1.0).unwrap(),
            fundamental_solution_field(&p).unwrap(),
            constant_field(2, -2.0),
            scaled_field(&gaussian_field(2, 1.0).unwrap(), 2.0, 0.25).unwrap(),
            shifted_field(&gaussian_field(2, 1.0).unwrap(), [1.0, 1.0, 0.0]),
        ];
        let _ = spec;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for u in &fields {
            let env = u.meta().tail;
            for _ in 0..1000 {
                let r = env.r0 * rng.gen_range(1.0..10.0);
                let t: f64 = rng.gen_range(0.0..2.0 * PI);
                let y = [r * t.cos(), r * t.sin(), 0.0];
                let v = u.eval(&y).unwrap().abs();
                if env.is_compact() {
                    assert!(v == 0.0 || r <= env.r0, "{}", u.id());
                } else {
                    assert!(v <= 1.01 * env.bound(r), "{} at r={r}: {v} > {}", u.id(), env.bound(r));
                }
            }
        }
    }

    #[test]
    fn parse_catalog_ids() {
        let p = make_params(1, 0.25).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        for id in ["gaussian:w=1", "bump:r=1", "bump:r=1.2,c=0.2", "xbump:r=1", "phi_s", "const:v=2", "gaussian:w=1,amp=-1", "poisson:r=1,gw=1,gc=1.5", "poisson:r=1,g=const"] {
            let u = parse_field(id, &p, &spec).unwrap();
            assert_eq!(u.dim(), 1, "{id}");
        }
        assert!(matches!(parse_field("nope", &p, &spec), Err(Error::UnknownField(_))));
        assert!(parse_field("gaussian:q=1", &p, &spec).is_err());
        assert!(parse_field("gaussian:w=abc", &p, &spec).is_err());
        let u = parse_field("gaussian:w=1,amp=-1", &p, &spec).unwrap();
        assert_eq!(u.eval(&ORIGIN).unwrap(), -1.0);
    }

    #[test]
    fn quantized_cache_snaps() {
        let cache = QuantizedCache::new(0.5);
        let v = cache.get_or_try_insert(&[0.7, 0.0, 0.0], |x| Ok(Estimate::exact(x[0]))).unwrap();
        assert_eq!(v.value, 0.5);
        let v2 = cache.get_or_try_insert(&[0.6, 0.0, 0.0], |_| Ok(Estimate::exact(99.0))).unwrap();
        assert_eq!(v2.value, 0.5);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn scaled_field_metadata() {
        let u = bump_field(1, 1.0).unwrap();
        let v = scaled_field(&u, 2.0, 0.5).unwrap();
        assert_eq!(v.meta().support.unwrap().radius, 0.5);
        let x = [0.2, 0.0, 0.0];
        assert!((v.eval(&x).unwrap() - 2f64.powf(-0.5) * u.eval(&[0.4, 0.0, 0.0]).unwrap()).abs() < 1e-15);
    }
}
