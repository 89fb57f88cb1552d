//! The nonlocal ACF functionals
//!
//! `J(u, R) = R^{-1-s} int_0^R r^s M_s(D_u, r)(0) dr`
//!
//! with density `D_u = G_u` or `D_u = |grad^s u|^2`, the local functional, and the
//! experiments built on them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{make_params, unit_ball_volume, FracParams};
use crate::error::{Error, Result, ResultExt};
use crate::fields::{amplified_field, scaled_field, ScalarField};
use crate::geometry::{dot, norm, scale, Point, ORIGIN};
use crate::operators::{
    derived_field, energy_density_g, frac_gradient, frac_laplacian, frac_laplacian_field, s_mean,
    DerivedKind, OperatorValue,
};
use crate::quadrature::{
    adaptive_gauss_kronrod, gauss_legendre, ray_tail, EndBehavior, Estimate, QuadratureSpec, Ray,
    Resolution, Scales, SphereRule,
};

/// Gauss-Legendre nodes of the outer radial integral.
pub const OUTER_NODES: usize = 24;

/// Which squared-gradient surrogate the functional averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Density {
    /// `G_u`
    Energy,
    /// `|grad^s u|^2`
    GradNormSquared,
}

impl Density {
    fn kind(self) -> DerivedKind {
        match self {
            Density::Energy => DerivedKind::Energy,
            Density::GradNormSquared => DerivedKind::GradNormSquared,
        }
    }

    /// Factor `c` in the stated limit `J^s -> c * J_local` as `s -> 1`.
    pub fn stated_limit_factor(self, n: usize) -> f64 {
        2.0 / (n as f64 * unit_ball_volume(n))
    }

    /// Factor obtained from the pointwise limits `G_u -> 2|grad u|^2` and
    /// `grad^s u -> grad u`.
    pub fn derived_limit_factor(self, n: usize) -> f64 {
        let area = n as f64 * unit_ball_volume(n);
        match self {
            Density::Energy => 2.0 / area,
            Density::GradNormSquared => 1.0 / area,
        }
    }
}

/// Shared state for evaluating one functional of one field at many radii: the
/// density is built once and its memo cache is reused across radii and routes.
pub struct AcfContext {
    density: Density,
    field: ScalarField,
    params: FracParams,
    spec: QuadratureSpec,
}

impl AcfContext {
    pub fn new(u: &ScalarField, density: Density, params: &FracParams, spec: &QuadratureSpec) -> Result<Self> {
        let field = derived_field(density.kind(), u, params, spec)?;
        Ok(AcfContext {
            density,
            field,
            params: params.clone(),
            spec: spec.clone(),
        })
    }

    pub fn density(&self) -> Density {
        self.density
    }

    pub fn density_field(&self) -> &ScalarField {
        &self.field
    }

    pub fn params(&self) -> &FracParams {
        &self.params
    }

    /// `M_s(D_u, r)(0)` over the exterior of `B_r`.
    pub fn mean(&self, r: f64) -> Result<OperatorValue> {
        s_mean(&self.field, &ORIGIN, r, &self.params, &self.spec)
    }

    /// `M_s(D_u, r)(0)` over the interior of `B_r` after inversion in the sphere.
    pub fn kelvin_mean(&self, r: f64) -> Result<OperatorValue> {
        s_mean_kelvin(&self.field, r, &self.params, &self.spec)
    }

    /// The functional by the exterior route.
    pub fn value(&self, radius: f64) -> Result<OperatorValue> {
        self.outer(radius, |r| self.mean(r))
            .context(|| format!("functional of `{}` at R = {radius}", self.field.id()))
    }

    /// The functional by the Kelvin route.
    pub fn value_kelvin(&self, radius: f64) -> Result<OperatorValue> {
        self.outer(radius, |r| self.kelvin_mean(r))
            .context(|| format!("Kelvin functional of `{}` at R = {radius}", self.field.id()))
    }

    /// With `r = R v^{1/(1+s)}` the functional is `(1/(1+s)) int_0^1 M(r(v)) dv`.
    /// `M(r) - M(0)` grows like `r^{2s}`, i.e. `v^alpha` with `alpha = 2s/(1+s)`, and
    /// the outer error is modelled from the Gauss rule's error on `v^alpha`.
    fn outer<F>(&self, radius: f64, inner: F) -> Result<OperatorValue>
    where
        F: Fn(f64) -> Result<OperatorValue> + Sync + Send,
    {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::invalid(format!("functional radius must be positive, got {radius}")));
        }
        let s = self.params.s;
        let gl = gauss_legendre(OUTER_NODES);
        let nodes: Vec<(f64, f64)> = gl
            .nodes
            .iter()
            .zip(&gl.weights)
            .map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w))
            .collect();
        let means: Vec<Result<OperatorValue>> = nodes
            .par_iter()
            .map(|(v, _)| inner(radius * v.powf(1.0 / (1.0 + s))))
            .collect();
        let mut value = 0.0;
        let mut error = 0.0;
        let mut truncation: f64 = 0.0;
        let mut last = 0.0;
        let mut last_v = -1.0;
        for ((v, w), m) in nodes.iter().zip(means) {
            let m = m?;
            value += w * m.value;
            error += w * m.error;
            truncation = truncation.max(m.truncation_radius);
            if *v > last_v {
                last_v = *v;
                last = m.value;
            }
        }
        let center = self.field.eval_estimate(&ORIGIN)?;
        let alpha = 2.0 * s / (1.0 + s);
        let rule_error = (nodes.iter().map(|(v, w)| w * v.powf(alpha)).sum::<f64>() - 1.0 / (1.0 + alpha)).abs();
        let outer_error = 2.0 * rule_error * (last - center.value).abs();
        Ok(OperatorValue {
            value: value / (1.0 + s),
            error: (error + outer_error) / (1.0 + s) + 8.0 * f64::EPSILON * value.abs(),
            truncation_radius: truncation,
        })
    }
}

/// `M_s(g, r)(0) = a_{n,s} int_{B_r} (r^2 - |x|^2)^{-s} |x|^{2s-n} g(r^2 x / |x|^2) dx`.
pub fn s_mean_kelvin(g: &ScalarField, r: f64, params: &FracParams, spec: &QuadratureSpec) -> Result<OperatorValue> {
    spec.validate()?;
    if !(r > 0.0) {
        return Err(Error::invalid(format!("s-mean radius must be positive, got {r}")));
    }
    let n = params.n;
    let s = params.s;
    let meta = g.meta();
    if g.dim() != n {
        return Err(Error::invalid("dimension mismatch between field and parameters"));
    }
    let rule = SphereRule::full(n, spec.angular_nodes)?;
    let end = EndBehavior::algebraic(-s, 1)?;
    // Near rho = 0 the integrand samples g far away: rho^{2s-1} times the tail of g.
    let start = if meta.tail.is_compact() || meta.support.is_some() {
        EndBehavior::Regular
    } else {
        EndBehavior::algebraic(2.0 * s - 1.0 + meta.tail.power.max(0.0), 1)?
    };
    let mut extent: f64 = meta.tail.r0;
    for b in meta.kinks.iter().chain(meta.core.iter()).chain(meta.support.iter()) {
        extent = extent.max(norm(&b.center) + b.radius);
    }
    let feature = (0.5 * r).min(meta.feature);
    let cap = feature.min(r * r / extent.max(r));
    let a = params.a_ns;
    let level = |res: &Resolution| -> Result<[f64; 2]> {
        let parts: Vec<Result<[f64; 2]>> = (0..rule.len())
            .into_par_iter()
            .map(|j| {
                let dir = &rule.dirs[j];
                let mut ray = Ray::new(0.0, r, Scales::new(feature).with_cap(cap))
                    .start_behavior(start)
                    .end_behavior(end);
                for b in meta.kinks.iter() {
                    for t in b.ray_crossings(&ORIGIN, dir) {
                        if t > r {
                            ray.add_break(r * r / t, EndBehavior::Kink);
                        }
                    }
                }
                for b in meta.core.iter().chain(meta.support.iter()) {
                    for t in b.ray_crossings(&ORIGIN, dir) {
                        if t > r {
                            ray.add_break(r * r / t, EndBehavior::Regular);
                        }
                    }
                }
                let mut errs = Vec::new();
                let value = ray.integrate(res, &mut |rho: f64| {
                    let y = scale(dir, r * r / rho);
                    let e = g.eval_estimate(&y)?;
                    let k = a * (r * r - rho * rho).powf(-s) * rho.powf(2.0 * s - 1.0);
                    errs.push(k * e.error);
                    Ok(k * e.value)
                })?;
                let mut it = errs.iter();
                let error = ray.integrate(res, &mut |_| Ok(*it.next().expect("same nodes on replay")))?;
                Ok([rule.weights[j] * value, rule.weights[j] * error])
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
    Ok(OperatorValue {
        value: fine[0],
        error: (fine[0] - coarse[0]).abs() + fine[1] + 8.0 * f64::EPSILON * fine[0].abs(),
        truncation_radius: r,
    })
    .context(|| format!("Kelvin s-mean of `{}` with r = {r}", meta.id))
}

/// `J^s_ACF(u, R)` with density `G_u`, exterior route.
pub fn j_acf(u: &ScalarField, radius: f64, params: &FracParams, spec: &QuadratureSpec) -> Result<OperatorValue> {
    AcfContext::new(u, Density::Energy, params, spec)?.value(radius)
}

/// `J^s_ACF(u, R)` with density `G_u`, Kelvin route.
pub fn j_acf_kelvin(u: &ScalarField, radius: f64, params: &FracParams, spec: &QuadratureSpec) -> Result<OperatorValue> {
    AcfContext::new(u, Density::Energy, params, spec)?.value_kelvin(radius)
}

/// The functional with density `|grad^s u|^2`.
pub fn j_acf_grad(u: &ScalarField, radius: f64, params: &FracParams, spec: &QuadratureSpec) -> Result<OperatorValue> {
    AcfContext::new(u, Density::GradNormSquared, params, spec)?.value(radius)
}

/// `R^{-2} int_{B_R} |grad u|^2 |x|^{2-n} dx` in polar coordinates.
pub fn j_acf_local(u: &ScalarField, radius: f64, spec: &QuadratureSpec) -> Result<Estimate> {
    spec.validate()?;
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("radius must be positive, got {radius}")));
    }
    let n = u.dim();
    let meta = u.meta();
    let rule = SphereRule::full(n, spec.angular_nodes)?;
    let feature = meta.feature.min(radius);
    let level = |res: &Resolution| -> Result<f64> {
        let mut sum = 0.0;
        for (dir, w) in rule.dirs.iter().zip(&rule.weights) {
            let mut ray = Ray::new(0.0, radius, Scales::new(feature));
            meta.ray_breaks(&ORIGIN, dir, &mut ray);
            sum += w * ray.integrate(res, &mut |rho: f64| {
                let g = u.gradient_or_fd(&scale(dir, rho))?;
                Ok(dot(&g, &g) * rho)
            })?;
        }
        Ok(sum / (radius * radius))
    };
    Estimate::from_levels(spec, 0.0, level)
}

/// The local functional by the coarea formula,
/// `(n omega_n / R^2) int_0^R r * avg_{|y| = r} |grad u|^2 dr`, with adaptive quadrature.
pub fn j_acf_local_coarea(u: &ScalarField, radius: f64) -> Result<Estimate> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("radius must be positive, got {radius}")));
    }
    let n = u.dim();
    let tol = 1e-12;
    let mut failure: Option<Error> = None;
    let mut grad_sq = |y: Point| -> f64 {
        match u.gradient_or_fd(&y) {
            Ok(g) => dot(&g, &g),
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        }
    };
    let mut avg = |r: f64| -> f64 {
        use std::f64::consts::PI;
        match n {
            1 => 0.5 * (grad_sq([r, 0.0, 0.0]) + grad_sq([-r, 0.0, 0.0])),
            2 => {
                adaptive_gauss_kronrod(|t| grad_sq([r * t.cos(), r * t.sin(), 0.0]), 0.0, 2.0 * PI, tol, tol)
                    .map_or(f64::NAN, |v| v.0)
                    / (2.0 * PI)
            }
            _ => {
                adaptive_gauss_kronrod(
                    |phi| {
                        let (sp, cp) = phi.sin_cos();
                        let ring = adaptive_gauss_kronrod(
                            |t| grad_sq([r * sp * t.cos(), r * sp * t.sin(), r * cp]),
                            0.0,
                            2.0 * PI,
                            tol,
                            tol,
                        )
                        .map_or(f64::NAN, |v| v.0);
                        ring * sp
                    },
                    0.0,
                    PI,
                    tol,
                    tol,
                )
                .map_or(f64::NAN, |v| v.0)
                    / (4.0 * PI)
            }
        }
    };
    let (v, e) = adaptive_gauss_kronrod(|r| r * avg(r), 0.0, radius, tol, tol)?;
    if let Some(err) = failure {
        return Err(err);
    }
    let area = n as f64 * unit_ball_volume(n);
    let k = area / (radius * radius);
    Ok(Estimate::new(v * k, e * k))
}

// ---------------------------------------------------------------------------
// Experiments

/// Outcome of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Pass,
    Fail,
    HypothesisNotMet,
}

/// The sign condition a monotonicity theorem assumes near the origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    /// `(-Delta)^s G_u <= 0`
    EnergySubharmonic,
    /// `(-Delta)^s |grad^s u|^2 <= 0`
    GradSubharmonic,
    /// `<grad^s u, grad^s f> <= 0` with `f = (-Delta)^s u`
    GradientCoupling,
}

impl Condition {
    pub fn density(self) -> Density {
        match self {
            Condition::EnergySubharmonic => Density::Energy,
            Condition::GradSubharmonic | Condition::GradientCoupling => Density::GradNormSquared,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignSample {
    pub point: Point,
    pub value: f64,
    pub error: f64,
}

/// Sampled sign condition. A sample violates it when its value exceeds ten times
/// its own error estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreconditionReport {
    pub condition: Condition,
    pub radius: f64,
    pub samples: Vec<SignSample>,
    pub max_excursion: f64,
    pub tolerance: f64,
    pub satisfied: bool,
}

/// Origin plus points on each axis at `radius * k / m`, `k = 1..m`, both signs,
/// with `m` chosen so there are at least nine points.
pub fn sample_points(n: usize, radius: f64) -> Vec<Point> {
    let per_axis = 8usize.div_ceil(2 * n);
    let mut pts = vec![ORIGIN];
    for i in 0..n {
        for k in 1..=per_axis {
            let t = radius * k as f64 / per_axis as f64;
            for sign in [1.0, -1.0] {
                let mut p = ORIGIN;
                p[i] = sign * t;
                pts.push(p);
            }
        }
    }
    pts
}

fn check_sign(samples: Vec<SignSample>, condition: Condition, radius: f64) -> PreconditionReport {
    let mut max_excursion: f64 = 0.0;
    let mut tolerance: f64 = 0.0;
    let mut satisfied = true;
    for smp in &samples {
        if smp.value > max_excursion {
            max_excursion = smp.value;
            tolerance = 10.0 * smp.error;
        }
        if smp.value > 10.0 * smp.error {
            satisfied = false;
        }
    }
    PreconditionReport {
        condition,
        radius,
        samples,
        max_excursion,
        tolerance,
        satisfied,
    }
}

/// Samples the sign condition of `condition` on `points`.
pub fn precondition(
    u: &ScalarField,
    condition: Condition,
    points: &[Point],
    radius: f64,
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<PreconditionReport> {
    let n = params.n;
    let samples: Vec<Result<SignSample>> = match condition {
        Condition::EnergySubharmonic | Condition::GradSubharmonic => {
            let d = derived_field(condition.density().kind(), u, params, spec)?;
            points
                .par_iter()
                .map(|x| {
                    let v = frac_laplacian(&d, x, params, spec)?;
                    Ok(SignSample {
                        point: *x,
                        value: v.value,
                        error: v.error,
                    })
                })
                .collect()
        }
        Condition::GradientCoupling => {
            let f = frac_laplacian_field(u, params, spec)?;
            points
                .par_iter()
                .map(|x| {
                    let gu = frac_gradient(u, x, params, spec)?;
                    let gf = frac_gradient(&f, x, params, spec)?;
                    let value = dot(&gu.value, &gf.value);
                    let error = (0..n)
                        .map(|i| gu.value[i].abs() * gf.error[i] + gf.value[i].abs() * gu.error[i] + gu.error[i] * gf.error[i])
                        .sum();
                    Ok(SignSample {
                        point: *x,
                        value,
                        error,
                    })
                })
                .collect()
        }
    };
    let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(check_sign(samples, condition, radius))
}

/// A sampled curve `R -> J(R)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionalCurve {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    pub error_estimates: Vec<f64>,
    /// `max_i (J(R_i) - J(R_{i+1}))_+`
    pub monotonicity_defect: f64,
    /// Number of leading radii on which every consecutive drop is within three
    /// times the summed error estimates.
    pub monotone_prefix: usize,
    pub precondition: PreconditionReport,
    /// `D_u(0)` and whether `D_u(0) <= (1+s) J(R)` holds within errors at every radius.
    pub center_value: Estimate,
    pub center_bound_holds: bool,
    pub outcome: Outcome,
}

impl FunctionalCurve {
    fn from_values(
        radii: Vec<f64>,
        values: Vec<OperatorValue>,
        precondition: PreconditionReport,
        center_value: Estimate,
        s: f64,
    ) -> Self {
        let mut defect: f64 = 0.0;
        let mut prefix = radii.len().min(1);
        let mut ok = true;
        for (i, pair) in values.windows(2).enumerate() {
            let drop = (pair[0].value - pair[1].value).max(0.0);
            defect = defect.max(drop);
            if drop > 3.0 * (pair[0].error + pair[1].error) {
                ok = false;
            }
            if ok {
                prefix = i + 2;
            }
        }
        let center_bound_holds = values
            .iter()
            .all(|v| center_value.value <= (1.0 + s) * v.value + center_value.error + (1.0 + s) * v.error);
        let outcome = if !precondition.satisfied {
            Outcome::HypothesisNotMet
        } else if ok {
            Outcome::Pass
        } else {
            Outcome::Fail
        };
        FunctionalCurve {
            radii,
            values: values.iter().map(|v| v.value).collect(),
            error_estimates: values.iter().map(|v| v.error).collect(),
            monotonicity_defect: defect,
            monotone_prefix: prefix,
            precondition,
            center_value,
            center_bound_holds,
            outcome,
        }
    }
}

fn check_radii(radii: &[f64]) -> Result<()> {
    if radii.is_empty() {
        return Err(Error::invalid("radius grid is empty"));
    }
    if radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(Error::invalid("radii must be positive and finite"));
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("radii must be strictly increasing"));
    }
    Ok(())
}

/// Evaluates the functional on `radii` and the sign condition on a ball of
/// radius `0.1 * min(radii)` around the origin.
pub fn monotonicity_experiment(
    u: &ScalarField,
    radii: &[f64],
    params: &FracParams,
    spec: &QuadratureSpec,
    condition: Condition,
) -> Result<FunctionalCurve> {
    check_radii(radii)?;
    let ctx = AcfContext::new(u, condition.density(), params, spec)?;
    let rho = 0.1 * radii[0];
    let pre = precondition(u, condition, &sample_points(params.n, rho), rho, params, spec)?;
    let values = radii
        .par_iter()
        .map(|r| ctx.value(*r))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let center = ctx.density_field().eval_estimate(&ORIGIN)?;
    Ok(FunctionalCurve::from_values(radii.to_vec(), values, pre, center, params.s))
}

/// One row of the s-grid table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub s: f64,
    pub value: f64,
    pub error: f64,
    pub target: f64,
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityTable {
    pub density: Density,
    pub radius: f64,
    pub local_value: Estimate,
    /// `stated_factor * J_local`.
    pub target: f64,
    /// `derived_factor * J_local`, the value the pointwise limits of the density give.
    pub derived_target: f64,
    pub rows: Vec<StabilityRow>,
    /// Polynomial extrapolation in `1 - s` through the last three rows.
    pub extrapolated: f64,
    /// Distance between the two- and three-point extrapolations.
    pub extrapolation_spread: f64,
    pub relative_gap: f64,
    pub derived_relative_gap: f64,
    pub deviations_decreasing: bool,
    pub outcome: Outcome,
}

/// Neville extrapolation of `(t_i, y_i)` to `t = 0`.
pub fn extrapolate_to_zero(t: &[f64], y: &[f64]) -> f64 {
    let mut p = y.to_vec();
    let m = p.len();
    for level in 1..m {
        for i in 0..m - level {
            let j = i + level;
            p[i] = (t[j] * p[i] - t[i] * p[i + 1]) / (t[j] - t[i]);
        }
    }
    p[0]
}

/// `J^s(u, R)` along `s_grid` against the local target; passes when the deviation
/// from the target decreases along the grid and the extrapolated limit is within
/// 5% of the target.
pub fn stability_experiment(
    u: &ScalarField,
    radius: f64,
    s_grid: &[f64],
    n: usize,
    spec: &QuadratureSpec,
    density: Density,
) -> Result<StabilityTable> {
    if s_grid.len() < 3 || s_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("s grid needs at least three strictly increasing values"));
    }
    let local = j_acf_local(u, radius, spec)?;
    let target = density.stated_limit_factor(n) * local.value;
    let derived_target = density.derived_limit_factor(n) * local.value;
    let values = s_grid
        .par_iter()
        .map(|s| {
            let params = make_params(n, *s)?;
            AcfContext::new(u, density, &params, spec)?.value(radius)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<StabilityRow> = s_grid
        .iter()
        .zip(&values)
        .map(|(s, v)| StabilityRow {
            s: *s,
            value: v.value,
            error: v.error,
            target,
            deviation: (v.value - target).abs(),
        })
        .collect();
    let m = rows.len();
    let t: Vec<f64> = rows[m - 3..].iter().map(|r| 1.0 - r.s).collect();
    let y: Vec<f64> = rows[m - 3..].iter().map(|r| r.value).collect();
    let extrapolated = extrapolate_to_zero(&t, &y);
    let two = extrapolate_to_zero(&t[1..], &y[1..]);
    let gap = |x: f64, tgt: f64| if tgt != 0.0 { (x - tgt).abs() / tgt.abs() } else { x.abs() };
    let deviations_decreasing = rows
        .windows(2)
        .all(|w| w[1].deviation <= w[0].deviation + w[0].error + w[1].error);
    let relative_gap = gap(extrapolated, target);
    let outcome = if deviations_decreasing && relative_gap <= 0.05 {
        Outcome::Pass
    } else {
        Outcome::Fail
    };
    Ok(StabilityTable {
        density,
        radius,
        local_value: local,
        target,
        derived_target,
        rows,
        extrapolated,
        extrapolation_spread: (extrapolated - two).abs(),
        relative_gap,
        derived_relative_gap: gap(extrapolated, derived_target),
        deviations_decreasing,
        outcome,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub lambda: f64,
    pub original: Estimate,
    pub scaled: Estimate,
    pub relative_difference: f64,
}

/// `J(u_lambda, R / lambda)` against `J(u, R)` with `u_lambda(x) = lambda^{-s} u(lambda x)`.
pub fn scaling_experiment(
    u: &ScalarField,
    radius: f64,
    lambdas: &[f64],
    params: &FracParams,
    spec: &QuadratureSpec,
    density: Density,
) -> Result<Vec<ScalingRow>> {
    let original = AcfContext::new(u, density, params, spec)?.value(radius)?.estimate();
    lambdas
        .par_iter()
        .map(|lambda| {
            let ul = scaled_field(u, *lambda, params.s)?;
            let scaled = AcfContext::new(&ul, density, params, spec)?.value(radius / lambda)?.estimate();
            Ok(ScalingRow {
                lambda: *lambda,
                original,
                scaled,
                relative_difference: relative(scaled.value, original.value),
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

fn relative(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale > 0.0 {
        (a - b).abs() / scale
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteCheck {
    pub radius: f64,
    pub exterior: Estimate,
    pub kelvin: Estimate,
    pub relative_difference: f64,
}

/// Exterior and Kelvin routes of the functional, sharing one density cache.
pub fn route_check(ctx: &AcfContext, radius: f64) -> Result<RouteCheck> {
    let exterior = ctx.value(radius)?.estimate();
    let kelvin = ctx.value_kelvin(radius)?.estimate();
    Ok(RouteCheck {
        radius,
        exterior,
        kelvin,
        relative_difference: relative(exterior.value, kelvin.value),
    })
}

/// `int D(x) |x|^{2s-n} dx` over R^n.
pub fn weighted_density_integral(d: &ScalarField, params: &FracParams, spec: &QuadratureSpec) -> Result<Estimate> {
    let n = params.n;
    let s = params.s;
    if (2.0 * s - n as f64).abs() < 1e-12 {
        return Err(Error::invalid("the weight |x|^{2s-n} is excluded when 2s = n"));
    }
    let meta = d.meta();
    let rule = SphereRule::full(n, spec.angular_nodes)?;
    // Integrand along a ray is rho^{2s-1} D(rho theta); the tail decays like rho^{2s-1-p}.
    let tol = spec.tail_tol / rule.total_weight();
    let (t, bound) = ray_tail(&meta.tail, 0.0, 1.0 - 2.0 * s, tol, 4.0 * meta.feature)?;
    let start = EndBehavior::algebraic(2.0 * s - 1.0, 1)?;
    let level = |res: &Resolution| -> Result<[f64; 2]> {
        let parts: Vec<Result<[f64; 2]>> = (0..rule.len())
            .into_par_iter()
            .map(|j| {
                let dir = &rule.dirs[j];
                let mut ray = Ray::new(0.0, t, Scales::new(meta.feature)).start_behavior(start);
                meta.ray_breaks(&ORIGIN, dir, &mut ray);
                let mut errs = Vec::new();
                let v = ray.integrate(res, &mut |rho: f64| {
                    let e = d.eval_estimate(&scale(dir, rho))?;
                    let k = rho.powf(2.0 * s - 1.0);
                    errs.push(k * e.error);
                    Ok(k * e.value)
                })?;
                let mut it = errs.iter();
                let err = ray.integrate(res, &mut |_| Ok(*it.next().expect("same nodes on replay")))?;
                Ok([rule.weights[j] * v, rule.weights[j] * err])
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
        fine[0],
        (fine[0] - coarse[0]).abs() + fine[1] + rule.total_weight() * bound,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub radius: f64,
    pub value: Estimate,
    /// `J(u, R) R^{2s} / int D_u |x|^{2s-n}`
    pub ratio: f64,
    pub refined_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTable {
    pub density: Density,
    pub weighted_integral: Estimate,
    pub refined_weighted_integral: Estimate,
    pub rows: Vec<BoundRow>,
    pub max_ratio: f64,
    pub refined_max_ratio: f64,
    /// `|refined_max_ratio / max_ratio - 1|`
    pub relative_change: f64,
    pub outcome: Outcome,
}

/// Ratio of the functional to the weighted integral of its density, at the given
/// and at doubled resolution. Passes when the maximal ratio is finite and moves by
/// at most 10% under doubling.
pub fn acf_bound_experiment(
    u: &ScalarField,
    radii: &[f64],
    params: &FracParams,
    spec: &QuadratureSpec,
    density: Density,
) -> Result<BoundTable> {
    check_radii(radii)?;
    let two_s = 2.0 * params.s;
    let run = |spec: &QuadratureSpec| -> Result<(Estimate, Vec<OperatorValue>)> {
        let ctx = AcfContext::new(u, density, params, spec)?;
        let w = weighted_density_integral(ctx.density_field(), params, spec)?;
        let vals = radii
            .par_iter()
            .map(|r| ctx.value(*r))
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok((w, vals))
    };
    let (w, vals) = run(spec)?;
    let (wr, vals_r) = run(&spec.refined())?;
    let ratio = |v: f64, r: f64, w: f64| if w != 0.0 { v * r.powf(two_s) / w } else { 0.0 };
    let rows: Vec<BoundRow> = radii
        .iter()
        .zip(vals.iter().zip(&vals_r))
        .map(|(r, (v, vr))| BoundRow {
            radius: *r,
            value: v.estimate(),
            ratio: ratio(v.value, *r, w.value),
            refined_ratio: ratio(vr.value, *r, wr.value),
        })
        .collect();
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let refined_max_ratio = rows.iter().map(|r| r.refined_ratio).fold(0.0, f64::max);
    let relative_change = if max_ratio > 0.0 {
        (refined_max_ratio / max_ratio - 1.0).abs()
    } else {
        refined_max_ratio.abs()
    };
    let outcome = if max_ratio.is_finite() && relative_change <= 0.1 {
        Outcome::Pass
    } else {
        Outcome::Fail
    };
    Ok(BoundTable {
        density,
        weighted_integral: w,
        refined_weighted_integral: wr,
        rows,
        max_ratio,
        refined_max_ratio,
        relative_change,
        outcome,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradEstRow {
    pub radius: f64,
    /// `G_u(0) R^{2s} / (u(0)^2 + |u|_inf |f|_inf)`
    pub ratio: f64,
    pub normalized_ratio: f64,
    pub refined_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradEstReport {
    pub center_energy: Estimate,
    pub center_value: f64,
    pub u_sup: f64,
    pub f_sup: f64,
    pub bracket: f64,
    pub rows: Vec<GradEstRow>,
    /// Largest `|normalized_ratio / ratio - 1|`.
    pub normalization_residual: f64,
    /// Largest `|refined_ratio / ratio - 1|`.
    pub refinement_change: f64,
    pub precondition: PreconditionReport,
    pub outcome: Outcome,
}

/// Points of a grid with `m` points per axis on `[-r, r]^n` that lie in the closed ball of radius `r`.
pub fn ball_grid(n: usize, r: f64, m: usize) -> Vec<Point> {
    let step = |k: usize| -r + 2.0 * r * k as f64 / (m - 1) as f64;
    let mut pts = Vec::new();
    let ranges: [usize; 3] = [m, if n > 1 { m } else { 1 }, if n > 2 { m } else { 1 }];
    for i in 0..ranges[0] {
        for j in 0..ranges[1] {
            for k in 0..ranges[2] {
                let mut p = ORIGIN;
                p[0] = step(i);
                if n > 1 {
                    p[1] = step(j);
                }
                if n > 2 {
                    p[2] = step(k);
                }
                if norm(&p) <= r * (1.0 + 1e-12) {
                    pts.push(p);
                }
            }
        }
    }
    pts
}

fn sup_on(points: &[Point], f: impl Fn(&Point) -> Result<f64> + Sync + Send) -> Result<f64> {
    let vals = points.par_iter().map(f).collect::<Vec<_>>();
    let mut m: f64 = 0.0;
    for v in vals {
        m = m.max(v?.abs());
    }
    Ok(m)
}

/// Grid points per axis used for sup norms on the unit ball.
fn grid_size(n: usize) -> usize {
    match n {
        1 => 41,
        2 => 21,
        _ => 11,
    }
}

/// `G_u(0)` against `R^{-2s}(u(0)^2 + |u|_inf |f|_inf)` on `B_1`, `f = (-Delta)^s u`.
pub fn gradient_estimate_experiment(
    u: &ScalarField,
    radii: &[f64],
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<GradEstReport> {
    check_radii(radii)?;
    let n = params.n;
    let grid = ball_grid(n, 1.0, grid_size(n));
    let bracket_for = |u: &ScalarField, spec: &QuadratureSpec| -> Result<(Estimate, f64, f64, f64, f64)> {
        let g0 = energy_density_g(u, &ORIGIN, params, spec)?.estimate();
        let u0 = u.eval(&ORIGIN)?;
        let u_sup = sup_on(&grid, |x| u.eval(x))?;
        let f_sup = sup_on(&grid, |x| Ok(frac_laplacian(u, x, params, spec)?.value))?;
        Ok((g0, u0, u_sup, f_sup, u0 * u0 + u_sup * f_sup))
    };
    let ratio = |g0: f64, r: f64, bracket: f64| if bracket != 0.0 { g0 * r.powf(2.0 * params.s) / bracket } else { 0.0 };
    let (g0, u0, u_sup, f_sup, bracket) = bracket_for(u, spec)?;
    let norm_c = if u_sup + f_sup > 0.0 { 1.0 / (u_sup + f_sup) } else { 1.0 };
    let normalized = amplified_field(u, norm_c);
    let (gn, _, _, _, bn) = bracket_for(&normalized, spec)?;
    let (gr, _, _, _, br) = bracket_for(u, &spec.refined())?;
    let rows: Vec<GradEstRow> = radii
        .iter()
        .map(|r| GradEstRow {
            radius: *r,
            ratio: ratio(g0.value, *r, bracket),
            normalized_ratio: ratio(gn.value, *r, bn),
            refined_ratio: ratio(gr.value, *r, br),
        })
        .collect();
    let rel_change = |a: f64, b: f64| if a != 0.0 { (b / a - 1.0).abs() } else { b.abs() };
    let normalization_residual = rows.iter().map(|r| rel_change(r.ratio, r.normalized_ratio)).fold(0.0, f64::max);
    let refinement_change = rows.iter().map(|r| rel_change(r.ratio, r.refined_ratio)).fold(0.0, f64::max);
    let pre_points: Vec<Point> = sample_points(n, 0.9);
    let pre = precondition(u, Condition::EnergySubharmonic, &pre_points, 0.9, params, spec)?;
    let finite = rows.iter().all(|r| r.ratio.is_finite());
    let outcome = if finite && normalization_residual <= 1e-6 && refinement_change <= 0.1 {
        Outcome::Pass
    } else {
        Outcome::Fail
    };
    Ok(GradEstReport {
        center_energy: g0,
        center_value: u0,
        u_sup,
        f_sup,
        bracket,
        rows,
        normalization_residual,
        refinement_change,
        precondition: pre,
        outcome,
    })
}

/// Radii of the points sampled by [`sample_points`], for reporting.
pub fn sample_radius(points: &[Point]) -> f64 {
    points.iter().map(norm).fold(0.0, f64::max)
}

/// `M_s(g, r)(x)` on a radius grid, with a flag for monotone increase within errors.
pub fn mean_profile(
    g: &ScalarField,
    x: &Point,
    radii: &[f64],
    params: &FracParams,
    spec: &QuadratureSpec,
) -> Result<(Vec<OperatorValue>, bool)> {
    check_radii(radii)?;
    let vals = radii
        .par_iter()
        .map(|r| s_mean(g, x, *r, params, spec))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let increasing = vals.windows(2).all(|w| w[1].value >= w[0].value - (w[0].error + w[1].error));
    Ok((vals, increasing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{bump_field, constant_field, gaussian_field, x_bump_field};

    #[test]
    fn kelvin_mean_of_constant_is_exact() {
        for n in 1..=2 {
            let p = make_params(n, 0.4).unwrap();
            let spec = QuadratureSpec::for_dim(n);
            let one = constant_field(n, 1.0);
            let m = s_mean_kelvin(&one, 0.7, &p, &spec).unwrap();
            assert!((m.value - 1.0).abs() < 1e-8, "n={n}: {}", m.value);
        }
    }

    #[test]
    fn constant_field_has_zero_functionals() {
        let p = make_params(1, 0.5).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let c = constant_field(1, 2.0);
        assert_eq!(j_acf(&c, 0.5, &p, &spec).unwrap().value, 0.0);
        assert_eq!(j_acf_kelvin(&c, 0.5, &p, &spec).unwrap().value, 0.0);
        assert_eq!(j_acf_grad(&c, 0.5, &p, &spec).unwrap().value, 0.0);
        assert_eq!(j_acf_local(&c, 0.5, &spec).unwrap().value, 0.0);
    }

    #[test]
    fn routes_agree_on_bump() {
        let p = make_params(1, 0.5).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let u = bump_field(1, 1.0).unwrap();
        let ctx = AcfContext::new(&u, Density::Energy, &p, &spec).unwrap();
        let c = route_check(&ctx, 0.5).unwrap();
        assert!(c.exterior.value > 0.0);
        assert!(c.relative_difference < 1e-3, "{c:?}");
    }

    #[test]
    fn local_functional_routes_agree() {
        let spec = QuadratureSpec::for_dim(2);
        let u = gaussian_field(2, 1.0).unwrap();
        let a = j_acf_local(&u, 1.0, &spec).unwrap();
        let b = j_acf_local_coarea(&u, 1.0).unwrap();
        assert!((a.value - b.value).abs() < 1e-6 * b.value, "{a:?} {b:?}");
        let xb = x_bump_field(1, 1.0).unwrap();
        let a = j_acf_local(&xb, 0.5, &QuadratureSpec::for_dim(1)).unwrap();
        let b = j_acf_local(&xb, 0.5, &QuadratureSpec::for_dim(1).refined()).unwrap();
        assert!(a.value > 0.0 && (a.value - b.value).abs() < 1e-8 * a.value);
    }

    #[test]
    fn extrapolation_is_exact_for_quadratics() {
        let t = [0.1, 0.05, 0.01];
        let y: Vec<f64> = t.iter().map(|t| 2.0 + 3.0 * t - 5.0 * t * t).collect();
        assert!((extrapolate_to_zero(&t, &y) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sample_points_cover_at_least_nine() {
        for n in 1..=3 {
            let p = sample_points(n, 0.1);
            assert!(p.len() >= 9);
            assert!((sample_radius(&p) - 0.1).abs() < 1e-15);
        }
    }
}
