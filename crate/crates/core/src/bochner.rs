//! Bochner-type identities for `G_u` and `|grad^s u|^2`, their local limits as
//! `s -> 1`, and the moment integrals behind those limits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{gamma, make_params, FracParams};
use crate::error::{Error, Result};
use crate::fields::{difference_field, ScalarField};
use crate::geometry::{dot, scale, Point, ORIGIN};
use crate::operators::{
    carre_du_champ, energy_density_field, energy_density_g, frac_gradient, frac_gradient_field, frac_laplacian,
    frac_laplacian_field, grad_norm_squared_field,
};
use crate::quadrature::{ray_tail, EndBehavior, Estimate, QuadratureSpec, Ray, Resolution, Scales, SphereRule, TailEnvelope};

/// `lhs = term_cross - term_square` evaluated term by term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BochnerResidual {
    pub lhs: Estimate,
    pub term_cross: Estimate,
    pub term_square: Estimate,
    /// `lhs - (term_cross - term_square)`
    pub residual: f64,
    pub combined_error: f64,
}

impl BochnerResidual {
    fn new(lhs: Estimate, term_cross: Estimate, term_square: Estimate) -> Self {
        BochnerResidual {
            lhs,
            term_cross,
            term_square,
            residual: lhs.value - (term_cross.value - term_square.value),
            combined_error: lhs.error + term_cross.error + term_square.error,
        }
    }

    /// `max(|lhs|, |term_cross|, |term_square|)`
    pub fn scale(&self) -> f64 {
        self.lhs
            .value
            .abs()
            .max(self.term_cross.value.abs())
            .max(self.term_square.value.abs())
    }

    pub fn relative(&self) -> f64 {
        let scale = self.scale();
        if scale > 0.0 {
            self.residual.abs() / scale
        } else {
            self.residual.abs()
        }
    }

    /// The square term is an integral of squares.
    pub fn square_nonnegative(&self) -> bool {
        self.term_square.value >= -self.term_square.error
    }
}

/// Nested integrals in two or more dimensions take minutes per point; they run only
/// when the caller relaxes the target tolerance to at least this value.
pub const COST_GUARD_TOL: f64 = 1e-4;

fn cost_guard(n: usize, spec: &QuadratureSpec, what: &str) -> Result<()> {
    if n >= 2 && spec.target_rel_tol < COST_GUARD_TOL {
        return Err(Error::invalid(format!(
            "{what} in dimension {n} needs target_rel_tol >= {COST_GUARD_TOL:e} (got {:e})",
            spec.target_rel_tol
        )));
    }
    Ok(())
}

/// `C_{n,s}^2 int int (u(x) - u(x-z) - u(y) + u(y-z))^2 / (|x-y|^{n+2s} |z|^{n+2s}) dy dz`.
///
/// The inner `y` integral is `G` of `w_z = u - u(. - z)` at `x`; the outer `z`
/// integral runs along symmetric rays. For large `|z|`,
/// `G_{w_z}(x) = G_u(x) + G_u(x - z) - 2 Gamma(u, u(. - z))(x)`, so the tail is
/// `G_u(x)` times the kernel tail plus a remainder bounded through the envelope of `G_u`.
pub fn double_difference_integral(
    u: &ScalarField,
    x: &Point,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<Estimate> {
    spec.validate()?;
    let n = params.n;
    let s = params.s;
    let c = params.c_ns;
    let meta = u.meta();
    let q = 1.0 + 2.0 * s;
    let g_x = energy_density_g(u, x, params, spec)?.estimate();
    let g_field = energy_density_field(u, params, spec)?;
    let env = g_field.meta().tail;
    let rule = SphereRule::half(n, spec.angular_nodes)?;
    let weight = 0.5 * c * rule.total_weight();
    let tol = spec.tail_tol / weight.max(f64::MIN_POSITIVE);
    let offset = dot(x, x).sqrt();
    // Both remainder pieces, with the Cauchy-Schwarz bound on the cross term.
    let remainder = [
        TailEnvelope::new(2.0 * env.amplitude, env.power, env.r0),
        TailEnvelope::new(
            4.0 * (g_x.value.abs() * env.amplitude).sqrt(),
            0.5 * env.power,
            env.r0,
        ),
    ];
    let mut t = 4.0 * meta.feature;
    for e in &remainder {
        t = t.max(ray_tail(e, offset, q, tol, 0.0)?.0);
    }
    let mut bound = 0.0;
    for e in &remainder {
        bound += ray_tail(e, offset, q, tol, t)?.1;
    }
    // Each ray carries z and -z.
    let analytic = 2.0 * g_x.value * t.powf(1.0 - q) / (q - 1.0);
    let start = EndBehavior::algebraic(1.0 - 2.0 * s, 2)?;
    let level = |res: &Resolution| -> Result<[f64; 2]> {
        let parts: Vec<Result<[f64; 2]>> = (0..rule.len())
            .into_par_iter()
            .map(|j| {
                let dir = rule.dirs[j];
                let ray = Ray::new(0.0, t, Scales::new(meta.feature)).start_behavior(start);
                let mut errs = Vec::new();
                let value = ray.integrate(res, &mut |rho: f64| {
                    let mut v = 0.0;
                    let mut e = 0.0;
                    for sign in [1.0, -1.0] {
                        let w = difference_field(u, scale(&dir, sign * rho));
                        let g = energy_density_g(&w, x, params, spec)?;
                        v += g.value;
                        e += g.error;
                    }
                    let k = rho.powf(-q);
                    errs.push(k * e);
                    Ok(k * v)
                })?;
                let mut it = errs.iter();
                let error = ray.integrate(res, &mut |_| Ok(*it.next().expect("same nodes on replay")))?;
                // The half rule doubles its weights; each ray already holds z and -z.
                let w = 0.5 * rule.weights[j];
                Ok([w * (value + analytic), w * (error + 2.0 * g_x.error * t.powf(1.0 - q) / (q - 1.0))])
            })
            .collect();
        let mut acc = [0.0; 2];
        for p in parts {
            let p = p?;
            acc[0] += p[0];
            acc[1] += p[1];
        }
        Ok(acc)
    };
    let fine = level(&spec.full())?;
    let coarse = level(&spec.coarse())?;
    Ok(Estimate::new(
        c * fine[0],
        c * ((fine[0] - coarse[0]).abs() + fine[1] + 0.5 * rule.total_weight() * bound) + 8.0 * f64::EPSILON * (c * fine[0]).abs(),
    ))
}

/// `(-Delta)^s G_u(x)` against
/// `2 C int (u(x) - u(x-z)) (-Delta)^s_x (u(x) - u(x-z)) / |z|^{n+2s} dz` minus the
/// double-difference integral.
///
/// By translation invariance `(-Delta)^s_x (u(x) - u(x-z)) = f(x) - f(x-z)` with
/// `f = (-Delta)^s u`, so the cross term is `2 Gamma(u, f)(x)` with `f` a derived field.
pub fn bochner_residual_g(
    u: &ScalarField,
    x: &Point,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<BochnerResidual> {
    cost_guard(params.n, spec, "the Bochner identity for G")?;
    let g = energy_density_field(u, params, spec)?;
    let lhs = frac_laplacian(&g, x, params, spec)?.estimate();
    let f = frac_laplacian_field(u, params, spec)?;
    let cross = carre_du_champ(u, &f, x, params, spec)?;
    let term_cross = Estimate::new(2.0 * cross.value, 2.0 * cross.error);
    let term_square = double_difference_integral(u, x, params, spec)?;
    Ok(BochnerResidual::new(lhs, term_cross, term_square))
}

/// How `(-Delta)^s partial^s_i u` enters the cross term of the gradient identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossRoute {
    /// `(-Delta)^s` applied to the derived field `partial^s_i u`.
    Direct,
    /// `partial^s_i` applied to the derived field `(-Delta)^s u`.
    Commuted,
}

/// `(-Delta)^s |grad^s u|^2(x)` against
/// `2 <grad^s u, (-Delta)^s grad^s u>(x) - sum_i G_{partial^s_i u}(x)`.
pub fn bochner_residual_grad(
    u: &ScalarField,
    x: &Point,
    params: &FracParams,
    spec: &QuadratureSpec,
    route: CrossRoute,
) -> Result<BochnerResidual> {
    let n = params.n;
    if n > 2 {
        return Err(Error::invalid("the Bochner identity for grad^s is limited to n <= 2"));
    }
    cost_guard(n, spec, "the Bochner identity for grad^s")?;
    let norm_sq = grad_norm_squared_field(u, params, spec)?;
    let lhs = frac_laplacian(&norm_sq, x, params, spec)?.estimate();
    let grad = frac_gradient(u, x, params, spec)?;
    let f = match route {
        CrossRoute::Commuted => Some(frac_laplacian_field(u, params, spec)?),
        CrossRoute::Direct => None,
    };
    let commuted = match &f {
        Some(f) => Some(frac_gradient(f, x, params, spec)?),
        None => None,
    };
    let mut cross = Estimate::default();
    let mut square = Estimate::default();
    for i in 0..n {
        let di = frac_gradient_field(u, i, params, spec)?;
        let lap_di = match &commuted {
            Some(v) => v.component(i).estimate(),
            None => frac_laplacian(&di, x, params, spec)?.estimate(),
        };
        let gi = grad.component(i);
        cross.value += 2.0 * gi.value * lap_di.value;
        cross.error += 2.0 * (gi.value.abs() * lap_di.error + gi.error * lap_di.value.abs() + gi.error * lap_di.error);
        let g = energy_density_g(&di, x, params, spec)?;
        square.value += g.value;
        square.error += g.error;
    }
    Ok(BochnerResidual::new(lhs, cross, square))
}

/// A fractional quantity against its local limit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitSample {
    pub s: f64,
    pub value: Estimate,
    pub target: f64,
    /// `|value - target| / |target|`, or the absolute gap when the target is zero.
    pub relative_gap: f64,
}

impl LimitSample {
    fn new(s: f64, value: Estimate, target: f64) -> Self {
        let gap = (value.value - target).abs();
        LimitSample {
            s,
            value,
            target,
            relative_gap: if target != 0.0 { gap / target.abs() } else { gap },
        }
    }
}

/// One of the limits checked by [`local_limit_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitSequence {
    pub name: String,
    pub samples: Vec<LimitSample>,
    /// Gaps shrink along the s grid, up to the error estimates.
    pub decreasing: bool,
    /// Gap at the largest s.
    pub final_gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl LimitSequence {
    fn new(name: &str, samples: Vec<LimitSample>, tolerance: f64) -> Self {
        let decreasing = samples.windows(2).all(|w| {
            let slack = (w[0].value.error + w[1].value.error) / w[1].target.abs().max(f64::MIN_POSITIVE);
            w[1].relative_gap <= w[0].relative_gap + slack
        });
        let final_gap = samples.last().map_or(f64::NAN, |l| l.relative_gap);
        LimitSequence {
            name: name.to_string(),
            samples,
            decreasing,
            final_gap,
            tolerance,
            pass: decreasing && final_gap <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalLimitTable {
    pub point: Point,
    pub radius: f64,
    /// `Gamma(u, v)(x) / 2` against `<grad u, grad v>(x)`.
    pub inner_product: LimitSequence,
    /// `G_u(x) / 2` against `|grad u(x)|^2`.
    pub energy: LimitSequence,
    /// The double-difference integral against `4 ||D^2 u(x)||^2`.
    pub square_term: LimitSequence,
    /// `4 a_{n,s} int_{B_r} (r^2 - |y|^2)^{-s} |y|^{2s-n} g` against the sphere average of `g`.
    pub kernel_stated: LimitSequence,
    /// The same with `a_{n,s}` in place of `4 a_{n,s}`.
    pub kernel_normalized: LimitSequence,
}

/// Tolerances at the largest s.
pub const INNER_PRODUCT_TOL: f64 = 0.05;
pub const ENERGY_TOL: f64 = 0.05;
pub const SQUARE_TOL: f64 = 0.15;
pub const KERNEL_TOL: f64 = 0.05;

/// `a_{n,s} int_{B_r} (r^2 - |y|^2)^{-s} |y|^{2s-n} g(y) dy`, the interior kernel
/// without the Kelvin inversion.
pub fn interior_kernel_mean(g: &ScalarField, r: f64, params: &FracParams, spec: &QuadratureSpec) -> Result<Estimate> {
    spec.validate()?;
    if !(r > 0.0) {
        return Err(Error::invalid(format!("kernel radius must be positive, got {r}")));
    }
    let n = params.n;
    let s = params.s;
    let meta = g.meta();
    let rule = SphereRule::half(n, spec.angular_nodes)?;
    let start = EndBehavior::algebraic(2.0 * s - 1.0, 2)?;
    let end = EndBehavior::algebraic(-s, 1)?;
    let feature = (0.5 * r).min(meta.feature);
    let a = params.a_ns;
    let level = |res: &Resolution| -> Result<[f64; 2]> {
        let mut acc = [0.0; 2];
        for (dir, w) in rule.dirs.iter().zip(&rule.weights) {
            let mut ray = Ray::new(0.0, r, Scales::new(feature))
                .start_behavior(start)
                .end_behavior(end);
            meta.ray_breaks(&ORIGIN, dir, &mut ray);
            meta.ray_breaks(&ORIGIN, &scale(dir, -1.0), &mut ray);
            let mut errs = Vec::new();
            let v = ray.integrate(res, &mut |t: f64| {
                let p = g.eval_estimate(&scale(dir, t))?;
                let m = g.eval_estimate(&scale(dir, -t))?;
                let k = a * (r * r - t * t).powf(-s) * t.powf(2.0 * s - 1.0);
                errs.push(k * (p.error + m.error));
                Ok(k * (p.value + m.value))
            })?;
            let mut it = errs.iter();
            let e = ray.integrate(res, &mut |_| Ok(*it.next().expect("same nodes on replay")))?;
            // The half rule doubles its weights; each ray already holds both directions.
            acc[0] += 0.5 * w * v;
            acc[1] += 0.5 * w * e;
        }
        Ok(acc)
    };
    let fine = level(&spec.full())?;
    let coarse = level(&spec.coarse())?;
    Ok(Estimate::new(fine[0], (fine[0] - coarse[0]).abs() + fine[1]))
}

/// Average of `g` over the sphere of radius `r` about the origin.
pub fn sphere_average(g: &ScalarField, r: f64, order: usize) -> Result<f64> {
    let rule = SphereRule::full(g.dim(), order)?;
    let mut sum = 0.0;
    for (d, w) in rule.dirs.iter().zip(&rule.weights) {
        sum += w * g.eval(&scale(d, r))?;
    }
    Ok(sum / rule.total_weight())
}

/// The four `s -> 1` limits behind the local Bochner identity at `x`, over `s_grid`.
/// `v` is the second field of the inner-product limit and `g` the field of the kernel
/// limit on the sphere of radius `radius`. Needs analytic gradients and Hessians of `u`
/// and `v`.
pub fn local_limit_check(
    u: &ScalarField,
    v: &ScalarField,
    g: &ScalarField,
    x: &Point,
    radius: f64,
    s_grid: &[f64],
    spec: &QuadratureSpec,
) -> Result<LocalLimitTable> {
    let n = u.dim();
    if n != 1 {
        return Err(Error::invalid("local limit checks run in dimension 1"));
    }
    if s_grid.is_empty() || s_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("s grid must be nonempty and strictly increasing"));
    }
    let missing = |what: &str| Error::invalid(format!("local limit check needs the analytic {what}"));
    let du = u.gradient(x).ok_or_else(|| missing("gradient of u"))?;
    let dv = v.gradient(x).ok_or_else(|| missing("gradient of v"))?;
    let hess = u.hessian(x).ok_or_else(|| missing("Hessian of u"))?;
    let inner_target = dot(&du, &dv);
    let energy_target = dot(&du, &du);
    let square_target = 4.0 * hess.iter().flatten().map(|h| h * h).sum::<f64>();
    let kernel_target = sphere_average(g, radius, 64)?;
    let rows = s_grid
        .iter()
        .map(|s| -> Result<[LimitSample; 5]> {
            let p = make_params(n, *s)?;
            let half = |e: Estimate| Estimate::new(0.5 * e.value, 0.5 * e.error);
            let inner = half(carre_du_champ(u, v, x, &p, spec)?.estimate());
            let energy = half(energy_density_g(u, x, &p, spec)?.estimate());
            let square = double_difference_integral(u, x, &p, spec)?;
            let kernel = interior_kernel_mean(g, radius, &p, spec)?;
            let stated = Estimate::new(4.0 * kernel.value, 4.0 * kernel.error);
            Ok([
                LimitSample::new(*s, inner, inner_target),
                LimitSample::new(*s, energy, energy_target),
                LimitSample::new(*s, square, square_target),
                LimitSample::new(*s, stated, kernel_target),
                LimitSample::new(*s, kernel, kernel_target),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let column = |k: usize| rows.iter().map(|r| r[k]).collect::<Vec<_>>();
    Ok(LocalLimitTable {
        point: *x,
        radius,
        inner_product: LimitSequence::new("inner-product", column(0), INNER_PRODUCT_TOL),
        energy: LimitSequence::new("energy-density", column(1), ENERGY_TOL),
        square_term: LimitSequence::new("square-term", column(2), SQUARE_TOL),
        kernel_stated: LimitSequence::new("kernel-4a", column(3), KERNEL_TOL),
        kernel_normalized: LimitSequence::new("kernel-a", column(4), KERNEL_TOL),
    })
}

// ---------------------------------------------------------------------------
// Moment integrals

fn check_multi_index(n: usize, k: usize, alpha: &[usize]) -> Result<()> {
    if !(1..=3).contains(&n) {
        return Err(Error::InvalidDimension(n));
    }
    if alpha.len() != n {
        return Err(Error::invalid(format!(
            "multi-index {alpha:?} has {} entries, expected {n}",
            alpha.len()
        )));
    }
    let height: usize = alpha.iter().sum();
    if height != k {
        return Err(Error::invalid(format!("multi-index {alpha:?} has height {height}, expected {k}")));
    }
    if !(1..=3).contains(&k) {
        return Err(Error::invalid(format!("moment height {k} outside 1..=3")));
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Closed form `n omega_n / (2 binom(n, k) (k - s))` for
/// `int_{B_1} (h^alpha)^2 / |h|^{n+2s} dh` with `|alpha| = k`. The binomial is read as
/// `binom(n, min(k, n))`. Exact for `n = 1` and for `k = 1`; see [`moment_integral_exact`].
pub fn moment_integral(n: usize, k: usize, alpha: &[usize], s: f64) -> Result<f64> {
    check_multi_index(n, k, alpha)?;
    let p = make_params(n, s)?;
    Ok(p.sphere_area() / (2.0 * binomial(n, k.min(n)) * (k as f64 - s)))
}

/// `int_{B_1} (h^alpha)^2 / |h|^{n+2s} dh = 2 prod Gamma(alpha_i + 1/2) / Gamma(k + n/2) / (2k - 2s)`.
pub fn moment_integral_exact(alpha: &[usize], s: f64) -> Result<f64> {
    let n = alpha.len();
    let k: usize = alpha.iter().sum();
    check_multi_index(n, k, alpha)?;
    make_params(n, s)?;
    let angular = 2.0 * alpha.iter().map(|a| gamma(*a as f64 + 0.5)).product::<f64>() / gamma(k as f64 + n as f64 / 2.0);
    Ok(angular / (2.0 * k as f64 - 2.0 * s))
}

/// The moment integral by quadrature: a product angular rule for `theta^{2 alpha}` over
/// the sphere and a graded radial rule for `rho^{2k-1-2s}` on `(0, 1)`.
pub fn moment_integral_quadrature(alpha: &[usize], s: f64, spec: &QuadratureSpec) -> Result<Estimate> {
    let n = alpha.len();
    let k: usize = alpha.iter().sum();
    check_multi_index(n, k, alpha)?;
    make_params(n, s)?;
    let beta = 2.0 * k as f64 - 1.0 - 2.0 * s;
    let radial = Estimate::from_levels(spec, 0.0, |res| {
        Ray::new(0.0, 1.0, Scales::new(1.0))
            .start_behavior(EndBehavior::algebraic(beta, 1)?)
            .integrate(res, &mut |rho| Ok(rho.powf(beta)))
    })?;
    // The angular integrand is a polynomial of degree 2k <= 6 on the sphere.
    let monomial = |d: &Point| alpha.iter().enumerate().map(|(i, a)| d[i].powi(2 * *a as i32)).product::<f64>();
    let angular_at = |order: usize| -> Result<f64> {
        let rule = SphereRule::full(n, order)?;
        Ok(rule.dirs.iter().zip(&rule.weights).map(|(d, w)| w * monomial(d)).sum())
    };
    let angular = angular_at(16)?;
    let angular_coarse = angular_at(12)?;
    Ok(Estimate::new(
        angular * radial.value,
        (angular - angular_coarse).abs() * radial.value + angular * radial.error,
    ))
}

/// Multi-indices of height `k` in dimension `n`.
pub fn multi_indices(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, k: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() + 1 == n {
            prefix.push(k);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for a in (0..=k).rev() {
            prefix.push(a);
            rec(n, k - a, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n > 0 {
        rec(n, k, &mut Vec::new(), &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::unit_ball_volume;
    use crate::fields::{bump_field, constant_field, gaussian_centered, gaussian_field};

    #[test]
    fn moment_examples() {
        let pi = std::f64::consts::PI;
        assert!((moment_integral(2, 1, &[1, 0], 0.5).unwrap() - pi).abs() < 1e-12);
        assert!((moment_integral(2, 2, &[1, 1], 0.5).unwrap() - 2.0 * pi / 3.0).abs() < 1e-12);
        assert!((moment_integral(1, 3, &[3], 0.25).unwrap() - 4.0 / 11.0).abs() < 1e-12);
        assert!(moment_integral(2, 2, &[1, 0], 0.5).is_err());
    }

    #[test]
    fn exact_moments_match_quadrature_and_known_values() {
        let pi = std::f64::consts::PI;
        // int_{B_1} h_1^2 h_2^2 |h|^{-3} dh = pi/12 in the plane at s = 1/2.
        assert!((moment_integral_exact(&[1, 1], 0.5).unwrap() - pi / 12.0).abs() < 1e-13);
        let spec = QuadratureSpec::for_dim(3);
        for n in 1..=3 {
            for k in 1..=3 {
                for alpha in multi_indices(n, k) {
                    for s in [0.25, 0.5, 0.75] {
                        let exact = moment_integral_exact(&alpha, s).unwrap();
                        let quad = moment_integral_quadrature(&alpha, s, &spec).unwrap();
                        assert!((quad.value - exact).abs() < 1e-9 * exact, "{alpha:?} s={s}: {} vs {exact}", quad.value);
                    }
                }
            }
        }
        // First moments: omega_n / (2 (1 - s)) in every dimension.
        for n in 1..=3 {
            let mut alpha = vec![0; n];
            alpha[0] = 1;
            let direct = unit_ball_volume(n) / (2.0 - 2.0 * 0.3);
            assert!((moment_integral_exact(&alpha, 0.3).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_index_enumeration() {
        assert_eq!(multi_indices(1, 2), vec![vec![2]]);
        assert_eq!(multi_indices(2, 2).len(), 3);
        assert_eq!(multi_indices(3, 3).len(), 10);
        assert!(multi_indices(3, 2).iter().all(|a| a.iter().sum::<usize>() == 2));
    }

    #[test]
    fn constant_field_has_trivial_bochner_terms() {
        let spec = QuadratureSpec::for_dim(1);
        let p = make_params(1, 0.5).unwrap();
        let u = constant_field(1, 2.0);
        let r = bochner_residual_g(&u, &[0.2, 0.0, 0.0], &p, &spec).unwrap();
        assert_eq!(r.lhs.value, 0.0);
        assert_eq!(r.term_cross.value, 0.0);
        assert_eq!(r.term_square.value, 0.0);
        let r = bochner_residual_grad(&u, &[0.2, 0.0, 0.0], &p, &spec, CrossRoute::Direct).unwrap();
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn cost_guard_refuses_plane_at_default_tolerance() {
        let spec = QuadratureSpec::for_dim(2);
        let p = make_params(2, 0.5).unwrap();
        let u = bump_field(2, 1.0).unwrap();
        assert!(bochner_residual_g(&u, &ORIGIN, &p, &spec).is_err());
    }

    #[test]
    fn interior_kernel_has_unit_mass() {
        let spec = QuadratureSpec::for_dim(1);
        let one = constant_field(1, 1.0);
        for s in [0.25, 0.5, 0.9] {
            let p = make_params(1, s).unwrap();
            for r in [0.5, 1.0, 2.0] {
                let m = interior_kernel_mean(&one, r, &p, &spec).unwrap();
                assert!((m.value - 1.0).abs() < 1e-8, "s={s} r={r}: {m:?}");
            }
        }
        let g = gaussian_field(1, 1.0).unwrap();
        let avg = sphere_average(&g, 0.5, 8).unwrap();
        assert!((avg - (-0.125f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn g_identity_closes_on_the_bump() {
        let spec = QuadratureSpec::for_dim(1);
        let p = make_params(1, 0.5).unwrap();
        let u = bump_field(1, 1.0).unwrap();
        for x in [0.0, 0.3] {
            let r = bochner_residual_g(&u, &[x, 0.0, 0.0], &p, &spec).unwrap();
            assert!(r.residual.abs() <= r.combined_error, "x={x}: {r:?}");
            assert!(r.relative() < 1e-3, "x={x}: {r:?}");
            assert!(r.square_nonnegative() && r.term_square.value > 0.0);
        }
    }

    #[test]
    fn grad_identity_routes_agree() {
        let spec = QuadratureSpec::for_dim(1);
        let p = make_params(1, 0.5).unwrap();
        let u = gaussian_field(1, 1.0).unwrap();
        let x = [0.3, 0.0, 0.0];
        let direct = bochner_residual_grad(&u, &x, &p, &spec, CrossRoute::Direct).unwrap();
        let commuted = bochner_residual_grad(&u, &x, &p, &spec, CrossRoute::Commuted).unwrap();
        assert!(direct.relative() < 1e-6, "{direct:?}");
        assert!(commuted.relative() < 1e-6, "{commuted:?}");
        assert_eq!(direct.lhs, commuted.lhs);
        assert!((direct.term_cross.value - commuted.term_cross.value).abs() < 1e-6 * direct.scale());
    }

    #[test]
    fn local_limits_on_a_gaussian() {
        let spec = QuadratureSpec::for_dim(1);
        let u = gaussian_field(1, 1.0).unwrap();
        let v = gaussian_centered(1, 0.7, [0.2, 0.0, 0.0]).unwrap();
        let t = local_limit_check(&u, &v, &u, &[0.3, 0.0, 0.0], 0.5, &[0.9, 0.95, 0.99], &spec).unwrap();
        assert!(t.energy.pass && t.square_term.pass && t.kernel_normalized.pass, "{t:?}");
        assert!(t.inner_product.decreasing);
        // The 4 a_ns kernel converges to four times the sphere average.
        let last = t.kernel_stated.samples.last().unwrap();
        assert!((last.value.value / last.target - 4.0).abs() < 0.02, "{last:?}");
        assert!(!t.kernel_stated.pass);
    }
}
