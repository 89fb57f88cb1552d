//! Dispatch of a config to the library and assembly of its report.

use std::time::Instant;

use nonlocal_acf::bochner::{
    bochner_residual_g, bochner_residual_grad, local_limit_check, moment_integral, moment_integral_exact,
    moment_integral_quadrature, multi_indices, BochnerResidual, CrossRoute, LimitSequence,
};
use nonlocal_acf::constants::{c_closed_form, defining_integral};
use nonlocal_acf::fields::constant_field;
use nonlocal_acf::functionals::{
    acf_bound_experiment, ball_grid, gradient_estimate_experiment, mean_profile, monotonicity_experiment,
    route_check, scaling_experiment, stability_experiment, AcfContext, Condition, Density, Outcome,
    PreconditionReport,
};
use nonlocal_acf::geometry::{axis, norm, scale, Point, ORIGIN};
use nonlocal_acf::operators::{
    commutation_check_with, divergence_check, frac_gradient_field, frac_laplacian, frac_laplacian_field,
    green_check, integration_by_parts_check, product_rule_check, s_mean, IdentityCheck,
};
use nonlocal_acf::{make_params, parse_field, Ball, Estimate, FracParams, QuadratureSpec, ScalarField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Claim, DensityName, ExperimentConfig};
use crate::error::{CliError, InModule, Result};
use crate::report::{Cell, Check, Quantity, Report, Table, SCHEMA_VERSION};

/// Tolerances of the acceptance criteria.
pub mod tol {
    pub const MOMENTS: f64 = 1e-6;
    pub const KERNEL_MASS: f64 = 1e-6;
    pub const C_NS: f64 = 1e-6;
    pub const ORACLE_1D: f64 = 1e-6;
    pub const ORACLE_MULTI_D: f64 = 1e-4;
    /// Interior residual of the Poisson field, relative to the sup of its exterior data.
    pub const POISSON_INTERIOR: f64 = 1e-3;
    pub const MEAN_VALUE: f64 = 1e-3;
    pub const GREEN: f64 = 1e-3;
    pub const ROUTES: f64 = 1e-3;
    pub const SCALING: f64 = 1e-3;
    pub const STABILITY: f64 = 0.05;
    pub const BOCHNER: f64 = 5e-2;
    pub const COMMUTATION: f64 = 1e-2;
    pub const BOUND_REFINEMENT: f64 = 0.1;
    pub const GRADEST_NORMALIZATION: f64 = 1e-6;
}

/// What a claim handler found, before the status is decided.
struct Findings {
    checks: Vec<Check>,
    summary: Vec<Quantity>,
    table: Table,
    notes: Vec<String>,
    hypothesis_met: bool,
}

impl Findings {
    fn new(table: Table) -> Self {
        Findings {
            checks: Vec::new(),
            summary: Vec::new(),
            table,
            notes: Vec::new(),
            hypothesis_met: true,
        }
    }
}

/// Runs one experiment, on a pool of `cfg.jobs` threads when set.
pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let start = Instant::now();
    let findings = match cfg.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::Pool(e.to_string()))?
            .install(|| dispatch(cfg))?,
        None => dispatch(cfg)?,
    };
    let status = if !findings.hypothesis_met {
        Outcome::HypothesisNotMet
    } else if findings.checks.iter().all(|c| c.passed) {
        Outcome::Pass
    } else {
        Outcome::Fail
    };
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        claim: cfg.claim,
        status,
        checks: findings.checks,
        summary: findings.summary,
        table: findings.table,
        notes: findings.notes,
        wall_time_s: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
        library_version: nonlocal_acf::VERSION.to_string(),
    })
}

fn dispatch(cfg: &ExperimentConfig) -> Result<Findings> {
    match cfg.claim {
        Claim::Constants => constants(cfg),
        Claim::Moments => moments(cfg),
        Claim::Oracles => oracles(cfg),
        Claim::MeanValue => mean_value(cfg),
        Claim::Greens => greens(cfg),
        Claim::Routes => routes(cfg),
        Claim::Scaling => scaling(cfg),
        Claim::MonotonicityG => monotonicity(cfg, Condition::EnergySubharmonic),
        Claim::MonotonicityGrad => monotonicity(cfg, Condition::GradSubharmonic),
        Claim::MonotonicityGradF => monotonicity(cfg, Condition::GradientCoupling),
        Claim::StabilityG => stability(cfg, Density::Energy),
        Claim::StabilityGrad => stability(cfg, Density::GradNormSquared),
        Claim::BochnerG => bochner_g(cfg),
        Claim::BochnerGrad => bochner_grad(cfg),
        Claim::Limits => limits(cfg),
        Claim::Bound => bound(cfg),
        Claim::GradEst => gradest(cfg),
    }
}

// ---------------------------------------------------------------------------
// helpers

fn params(n: usize, s: f64) -> Result<FracParams> {
    make_params(n, s).in_module("constants")
}

fn field(id: &str, p: &FracParams, spec: &QuadratureSpec) -> Result<ScalarField> {
    parse_field(id, p, spec).in_module("fields")
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale > 0.0 {
        (a - b).abs() / scale
    } else {
        0.0
    }
}

fn densities(cfg: &ExperimentConfig) -> Vec<Density> {
    match cfg.density {
        Some(DensityName::Energy) => vec![Density::Energy],
        Some(DensityName::Grad) => vec![Density::GradNormSquared],
        None => vec![Density::Energy, Density::GradNormSquared],
    }
}

fn density_label(d: Density) -> &'static str {
    match d {
        Density::Energy => "energy",
        Density::GradNormSquared => "grad",
    }
}

fn coords(p: &Point) -> [Cell; 3] {
    [p[0].into(), p[1].into(), p[2].into()]
}

/// Runs `f` over `items` in parallel and returns the results in input order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    items.par_iter().map(f).collect::<Vec<_>>().into_iter().collect()
}

/// `count` points drawn uniformly from the ball of radius `radius`, seeded.
pub fn random_points(n: usize, count: usize, radius: f64, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut p = ORIGIN;
        for c in p.iter_mut().take(n) {
            *c = rng.gen_range(-radius..radius);
        }
        if norm(&p) <= radius {
            out.push(p);
        }
    }
    out
}

/// `k * step` along a direction that turns by one radian per point (n >= 2).
fn spread_points(n: usize, count: usize, step: f64) -> Vec<Point> {
    (0..count)
        .map(|k| {
            let r = step * k as f64;
            let mut p = ORIGIN;
            match n {
                1 => p[0] = r,
                _ => {
                    let a = k as f64;
                    p[0] = r * a.cos();
                    p[1] = r * a.sin();
                }
            }
            p
        })
        .collect()
}

fn identity_row(table: &mut Table, kind: &str, x: &Point, c: &IdentityCheck) {
    let [x0, x1, x2] = coords(x);
    table.push(vec![
        kind.into(),
        x0,
        x1,
        x2,
        c.lhs.value.into(),
        c.lhs.error.into(),
        c.rhs.value.into(),
        c.rhs.error.into(),
        c.residual.into(),
        c.combined_error.into(),
        c.relative.into(),
    ]);
}

const IDENTITY_COLUMNS: [&str; 11] = [
    "kind", "x0", "x1", "x2", "lhs", "lhs_error", "rhs", "rhs_error", "residual", "combined_error", "relative",
];

fn precondition_summary(f: &mut Findings, pre: &PreconditionReport) {
    f.summary.push(Quantity::exact("precondition_max_excursion", pre.max_excursion));
    f.summary.push(Quantity::exact("precondition_radius", pre.radius));
}

// ---------------------------------------------------------------------------
// constants and moments

fn constants(cfg: &ExperimentConfig) -> Result<Findings> {
    let dims = cfg.dims.clone().unwrap_or_else(|| vec![cfg.n]);
    let s_grid = cfg.order_grid()?;
    let radii = cfg.radii.clone().unwrap_or_else(|| vec![1.0]);
    let mut f = Findings::new(Table::new(&[
        "n",
        "s",
        "r",
        "a_ns",
        "c_ns",
        "c_ns_closed_form",
        "c_ns_error",
        "mu_ns",
        "kappa_ns",
        "kernel_mass",
        "kernel_mass_error",
    ]));
    let mut cells = Vec::new();
    for &n in &dims {
        for &s in &s_grid {
            cells.push((n, s));
        }
    }
    let rows = par_map(&cells, |&(n, s)| {
        let p = params(n, s)?;
        let spec = cfg.spec_for(n);
        let integral = defining_integral(n, s, &spec).in_module("constants")?;
        let c = 1.0 / integral.value;
        let c_err = integral.error / (integral.value * integral.value);
        let one = constant_field(n, 1.0);
        let masses = par_map(&radii, |&r| s_mean(&one, &ORIGIN, r, &p, &spec).in_module("operators"))?;
        Ok((p, c, c_err, masses))
    })?;
    let mut worst_c: f64 = 0.0;
    let mut worst_mass: f64 = 0.0;
    for (p, c, c_err, masses) in &rows {
        let c_closed = c_closed_form(p.n, p.s);
        worst_c = worst_c.max(rel(*c, c_closed));
        for (r, m) in radii.iter().zip(masses) {
            worst_mass = worst_mass.max((m.value - 1.0).abs());
            f.table.push(vec![
                p.n.into(),
                p.s.into(),
                (*r).into(),
                p.a_ns.into(),
                (*c).into(),
                c_closed.into(),
                (*c_err).into(),
                p.mu_ns.into(),
                p.kappa_ns.map(Cell::from).unwrap_or_else(|| "".into()),
                m.value.into(),
                m.error.into(),
            ]);
        }
    }
    if let [(p, c, c_err, _)] = rows.as_slice() {
        f.summary.push(Quantity::exact("a_ns", p.a_ns));
        f.summary.push(Quantity::new("c_ns", *c, *c_err));
        f.summary.push(Quantity::exact("mu_ns", p.mu_ns));
        if let Some(k) = p.kappa_ns {
            f.summary.push(Quantity::exact("kappa_ns", k));
        }
    }
    f.summary.push(Quantity::exact("max_c_ns_relative_difference", worst_c));
    f.summary.push(Quantity::exact("max_kernel_mass_deviation", worst_mass));
    f.checks.push(Check::at_most(
        "c_ns quadrature vs closed form",
        worst_c,
        tol::C_NS,
        "largest relative difference over the grid",
    ));
    f.checks.push(Check::at_most(
        "s-mean kernel has unit mass",
        worst_mass,
        tol::KERNEL_MASS,
        "largest |int A^s_r - 1| over the grid",
    ));
    Ok(f)
}

fn moments(cfg: &ExperimentConfig) -> Result<Findings> {
    let dims = cfg.dims.clone().unwrap_or_else(|| vec![1, 2, 3]);
    let orders = cfg.orders.clone().unwrap_or_else(|| vec![1, 2, 3]);
    let s_grid = cfg.order_grid()?;
    let mut f = Findings::new(Table::new(&[
        "n",
        "k",
        "s",
        "alpha",
        "closed_form",
        "exact",
        "quadrature",
        "quadrature_error",
        "closed_form_relative_difference",
        "exact_relative_difference",
    ]));
    let mut cells = Vec::new();
    for &n in &dims {
        for &k in &orders {
            for alpha in multi_indices(n, k) {
                for &s in &s_grid {
                    cells.push((n, k, alpha.clone(), s));
                }
            }
        }
    }
    let values = par_map(&cells, |(n, k, alpha, s)| {
        let stated = moment_integral(*n, *k, alpha, *s).in_module("bochner")?;
        let exact = moment_integral_exact(alpha, *s).in_module("bochner")?;
        let quad = moment_integral_quadrature(alpha, *s, &cfg.spec_for(*n)).in_module("bochner")?;
        Ok((stated, exact, quad))
    })?;
    let mut worst_stated: f64 = 0.0;
    let mut worst_exact: f64 = 0.0;
    let mut failing = Vec::new();
    for ((n, k, alpha, s), (stated, exact, quad)) in cells.iter().zip(&values) {
        let d_stated = rel(*stated, quad.value);
        let d_exact = rel(*exact, quad.value);
        worst_stated = worst_stated.max(d_stated);
        worst_exact = worst_exact.max(d_exact);
        let label = alpha.iter().map(|a| a.to_string()).collect::<Vec<_>>().join("/");
        if d_stated > tol::MOMENTS {
            failing.push(format!("n={n} k={k} alpha={label} s={s}"));
        }
        f.table.push(vec![
            (*n).into(),
            (*k).into(),
            (*s).into(),
            label.into(),
            (*stated).into(),
            (*exact).into(),
            quad.value.into(),
            quad.error.into(),
            d_stated.into(),
            d_exact.into(),
        ]);
    }
    f.summary.push(Quantity::exact("cells", cells.len() as f64));
    f.summary.push(Quantity::exact("max_closed_form_relative_difference", worst_stated));
    f.summary.push(Quantity::exact("max_exact_relative_difference", worst_exact));
    f.checks.push(Check::at_most(
        "closed form vs quadrature",
        worst_stated,
        tol::MOMENTS,
        format!("{} of {} cells outside tolerance", failing.len(), cells.len()),
    ));
    f.checks.push(Check::at_most(
        "Gamma-function form vs quadrature",
        worst_exact,
        tol::MOMENTS,
        "2 prod Gamma(alpha_i + 1/2) / Gamma(k + n/2) / (2k - 2s)",
    ));
    if !failing.is_empty() {
        f.notes.push(format!(
            "the closed form n omega_n / (2 binom(n, k) (k - s)) disagrees with quadrature in: {}",
            failing.join("; ")
        ));
    }
    Ok(f)
}

// ---------------------------------------------------------------------------
// operators

fn oracles(cfg: &ExperimentConfig) -> Result<Findings> {
    let n = cfg.n;
    let p = params(n, cfg.order()?)?;
    let spec = cfg.spec();
    let u = field(cfg.field_id()?, &p, &spec)?;
    let points = cfg.point_list().unwrap_or_else(|| spread_points(n, 10, 0.1));
    let tolerance = if n == 1 { tol::ORACLE_1D } else { tol::ORACLE_MULTI_D };
    let mut f = Findings::new(Table::new(&IDENTITY_COLUMNS));
    let oracle_checks = par_map(&points, |x| {
        let numeric = frac_laplacian(&u, x, &p, &spec).in_module("operators")?.estimate();
        let oracle = u
            .frac_laplacian_oracle(x, &p)
            .ok_or_else(|| CliError::Invalid(format!("field `{}` has no closed-form (-Delta)^s", u.id())))?
            .in_module("fields")?;
        Ok(IdentityCheck::new(numeric, Estimate::exact(oracle)))
    })?;
    let mut worst: f64 = 0.0;
    for (x, c) in points.iter().zip(&oracle_checks) {
        worst = worst.max(c.relative);
        identity_row(&mut f.table, "oracle", x, c);
    }
    f.summary.push(Quantity::exact("max_oracle_relative_difference", worst));
    f.checks.push(Check::at_most(
        "(-Delta)^s vs closed-form oracle",
        worst,
        tolerance,
        format!("largest relative difference at {} points", points.len()),
    ));
    let count = cfg.random_points.unwrap_or(0);
    if count > 0 {
        let pts = random_points(n, count, cfg.sample_radius.unwrap_or(2.0), cfg.seed);
        let checks = par_map(&pts, |x| product_rule_check(&u, x, &p, &spec).in_module("operators"))?;
        let mut outside = 0;
        let mut worst_ratio: f64 = 0.0;
        for (x, c) in pts.iter().zip(&checks) {
            if !c.within_error() {
                outside += 1;
            }
            if c.combined_error > 0.0 {
                worst_ratio = worst_ratio.max(c.residual.abs() / c.combined_error);
            }
            identity_row(&mut f.table, "product-rule", x, c);
        }
        f.summary.push(Quantity::exact("max_product_rule_residual_over_error", worst_ratio));
        f.checks.push(Check::flag(
            "product rule within combined error",
            outside == 0,
            format!("{outside} of {count} seeded points outside their combined error"),
        ));
    }
    Ok(f)
}

fn mean_value(cfg: &ExperimentConfig) -> Result<Findings> {
    let n = cfg.n;
    let p = params(n, cfg.order()?)?;
    let spec = cfg.spec();
    let u = field(cfg.field_id()?, &p, &spec)?;
    let r = cfg.radius.unwrap_or(1.0);
    let mut f = Findings::new(Table::new(&["kind", "x0", "x1", "x2", "r", "value", "error", "reference"]));

    // Outside the ball u equals its exterior data; sample it along the first axis.
    let samples: Vec<Point> = (1..=400)
        .flat_map(|k| {
            let t = r * (1.0 + 3.0 * k as f64 / 400.0);
            [scale(&axis(0), t), scale(&axis(0), -t)]
        })
        .collect();
    let sup_g = par_map(&samples, |y| u.eval(y).in_module("fields"))?
        .into_iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    f.summary.push(Quantity::exact("sup_exterior_data", sup_g));

    let interior = cfg
        .point_list()
        .unwrap_or_else(|| [0.0, 0.3, -0.3, 0.6, -0.6].iter().map(|t| scale(&axis(0), t * r)).collect());
    let lap = par_map(&interior, |x| frac_laplacian(&u, x, &p, &spec).in_module("operators"))?;
    let mut worst: f64 = 0.0;
    for (x, v) in interior.iter().zip(&lap) {
        worst = worst.max(v.value.abs());
        let [x0, x1, x2] = coords(x);
        f.table.push(vec!["interior-residual".into(), x0, x1, x2, r.into(), v.value.into(), v.error.into(), 0.0.into()]);
    }
    f.summary.push(Quantity::exact("max_interior_residual", worst));
    f.checks.push(Check::at_most(
        "s-harmonic inside the ball",
        worst,
        tol::POISSON_INTERIOR * sup_g,
        format!("max |(-Delta)^s u| at {} interior points against 1e-3 sup|g|", interior.len()),
    ));

    let u0 = u.eval(&ORIGIN).in_module("fields")?;
    let half = 0.5 * r;
    let m = s_mean(&u, &ORIGIN, half, &p, &spec).in_module("operators")?;
    let gap = rel(m.value, u0);
    f.table.push(vec!["mean-value".into(), 0.0.into(), 0.0.into(), 0.0.into(), half.into(), m.value.into(), m.error.into(), u0.into()]);
    f.summary.push(Quantity::new("center_mean", m.value, m.error));
    f.checks.push(Check::at_most(
        "s-mean value property at the center",
        gap,
        tol::MEAN_VALUE,
        format!("relative gap between M_s(u, {half}) and u(0)"),
    ));

    if let Some(other) = &cfg.other_field {
        let g = field(other, &p, &spec)?;
        let radii = cfg.radius_grid()?;
        let r_max = radii[radii.len() - 1];
        let grid = ball_grid(n, r_max, if n == 1 { 21 } else { 9 });
        let signs = par_map(&grid, |y| frac_laplacian(&g, y, &p, &spec).in_module("operators"))?;
        let mut excursion = f64::NEG_INFINITY;
        let mut met = true;
        for (y, v) in grid.iter().zip(&signs) {
            excursion = excursion.max(v.value);
            if v.value > v.error {
                met = false;
            }
            let [x0, x1, x2] = coords(y);
            f.table.push(vec!["subharmonic-sign".into(), x0, x1, x2, r_max.into(), v.value.into(), v.error.into(), 0.0.into()]);
        }
        f.hypothesis_met = met;
        f.summary.push(Quantity::exact("max_sign_sample", excursion));
        let (vals, increasing) = mean_profile(&g, &ORIGIN, radii, &p, &spec).in_module("functionals")?;
        for (rr, v) in radii.iter().zip(&vals) {
            f.table.push(vec!["mean-profile".into(), 0.0.into(), 0.0.into(), 0.0.into(), (*rr).into(), v.value.into(), v.error.into(), g.eval(&ORIGIN).in_module("fields")?.into()]);
        }
        f.checks.push(Check::flag(
            "s-mean of a subharmonic field increases with r",
            increasing,
            format!("M_s(g, r)(0) on {} radii, field `{}`", radii.len(), g.id()),
        ));
        if !met {
            f.notes.push(format!("(-Delta)^s g <= 0 was not verified on B_{r_max} for `{}`", g.id()));
        }
    }
    Ok(f)
}

fn greens(cfg: &ExperimentConfig) -> Result<Findings> {
    let p = params(cfg.n, cfg.order()?)?;
    let spec = cfg.spec();
    let a = field(cfg.field_id()?, &p, &spec)?;
    let b = field(cfg.other_field_id()?, &p, &spec)?;
    let d = Ball::centered(cfg.radius.unwrap_or(1.0)).in_module("geometry")?;
    let mut f = Findings::new(Table::new(&[
        "identity",
        "lhs",
        "lhs_error",
        "rhs",
        "rhs_error",
        "residual",
        "combined_error",
        "relative",
    ]));
    let kinds = ["divergence", "green", "parts"];
    let results = par_map(&kinds, |k| {
        match *k {
            "divergence" => divergence_check(&a, &d, &p, &spec),
            "green" => green_check(&a, &b, &d, &p, &spec),
            _ => integration_by_parts_check(&a, &b, &d, &p, &spec),
        }
        .in_module("operators")
    })?;
    for (k, c) in kinds.iter().zip(&results) {
        f.table.push(vec![
            (*k).into(),
            c.lhs.value.into(),
            c.lhs.error.into(),
            c.rhs.value.into(),
            c.rhs.error.into(),
            c.residual.into(),
            c.combined_error.into(),
            c.relative.into(),
        ]);
        f.summary.push(Quantity::new(format!("{k}_residual"), c.residual, c.combined_error));
        f.checks.push(Check::at_most(format!("{k} identity"), c.relative, tol::GREEN, "relative residual"));
    }
    Ok(f)
}

// ---------------------------------------------------------------------------
// functionals

fn routes(cfg: &ExperimentConfig) -> Result<Findings> {
    let p = params(cfg.n, cfg.order()?)?;
    let spec = cfg.spec();
    let u = field(cfg.field_id()?, &p, &spec)?;
    let radii = cfg.radius_grid()?;
    let mut f = Findings::new(Table::new(&[
        "density",
        "radius",
        "exterior",
        "exterior_error",
        "kelvin",
        "kelvin_error",
        "relative_difference",
    ]));
    let density = match cfg.density {
        Some(DensityName::Grad) => Density::GradNormSquared,
        _ => Density::Energy,
    };
    let ctx = AcfContext::new(&u, density, &p, &spec).in_module("functionals")?;
    let rows = par_map(radii, |r| route_check(&ctx, *r).in_module("functionals"))?;
    let mut worst: f64 = 0.0;
    for c in &rows {
        worst = worst.max(c.relative_difference);
        f.table.push(vec![
            density_label(density).into(),
            c.radius.into(),
            c.exterior.value.into(),
            c.exterior.error.into(),
            c.kelvin.value.into(),
            c.kelvin.error.into(),
            c.relative_difference.into(),
        ]);
    }
    f.summary.push(Quantity::exact("max_relative_difference", worst));
    f.checks.push(Check::at_most("exterior vs Kelvin route", worst, tol::ROUTES, "largest relative difference"));
    Ok(f)
}

fn scaling(cfg: &ExperimentConfig) -> Result<Findings> {
    let p = params(cfg.n, cfg.order()?)?;
    let spec = cfg.spec();
    let u = field(cfg.field_id()?, &p, &spec)?;
    let radius = cfg.single_radius()?;
    let lambdas = cfg.lambda_grid()?;
    let mut f = Findings::new(Table::new(&[
        "density",
        "lambda",
        "original",
        "original_error",
        "scaled",
        "scaled_error",
        "relative_difference",
    ]));
    for density in densities(cfg) {
        let rows = scaling_experiment(&u, radius, lambdas, &p, &spec, density).in_module("functionals")?;
        let mut worst: f64 = 0.0;
        for r in &rows {
            worst = worst.max(r.relative_difference);
            f.table.push(vec![
                density_label(density).into(),
                r.lambda.into(),
                r.original.value.into(),
                r.original.error.into(),
                r.scaled.value.into(),
                r.scaled.error.into(),
                r.relative_difference.into(),
            ]);
        }
        let label = density_label(density);
        f.summary.push(Quantity::exact(format!("{label}_max_relative_difference"), worst));
        f.checks.push(Check::at_most(
            format!("{label} functional is scale invariant"),
            worst,
            tol::SCALING,
            "largest relative difference over lambda",
        ));
    }
    Ok(f)
}

fn monotonicity(cfg: &ExperimentConfig, condition: Condition) -> Result<Findings> {
    let p = params(cfg.n, cfg.order()?)?;
    let spec = cfg.spec();
    let u = field(cfg.field_id()?, &p, &spec)?;
    let radii = cfg.radius_grid()?;
    let curve = monotonicity_experiment(&u, radii, &p, &spec, condition).in_module("functionals")?;
    let mut f = Findings::new(Table::new(&["kind", "x0", "x1", "x2", "value", "error"]));
    for ((r, v), e) in curve.radii.iter().zip(&curve.values).zip(&curve.error_estimates) {
        f.table.push(vec!["functional".into(), (*r).into(), 0.0.into(), 0.0.into(), (*v).into(), (*e).into()]);
    }
    for smp in &curve.precondition.samples {
        let [x0, x1, x2] = coords(&smp.point);
        f.table.push(vec!["sign-sample".into(), x0, x1, x2, smp.value.into(), smp.error.into()]);
    }
    f.hypothesis_met = curve.precondition.satisfied;
    let summed_error: f64 = curve.error_estimates.iter().sum();
    f.summary.push(Quantity::new("monotonicity_defect", curve.monotonicity_defect, summed_error));
    f.summary.push(Quantity::exact("monotone_prefix", curve.monotone_prefix as f64));
    f.summary.push(Quantity::from_estimate("center_density", curve.center_value));
    precondition_summary(&mut f, &curve.precondition);
    f.checks.push(Check::flag(
        "monotone on the radius grid",
        curve.monotone_prefix == radii.len(),
        format!(
            "every drop within 3x the summed error estimates; monotone prefix {} of {}",
            curve.monotone_prefix,
            radii.len()
        ),
    ));
    if !curve.center_bound_holds {
        f.notes.push("the center bound D_u(0) <= (1 + s) J(R) failed at some radius".into());
    }
    Ok(f)
}

fn stability(cfg: &ExperimentConfig, density: Density) -> Result<Findings> {
    let spec = cfg.spec();
    let p0 = params(cfg.n, cfg.order_grid()?[0])?;
    let u = field(cfg.field_id()?, &p0, &spec)?;
    let s_grid = cfg.s_grid.as_deref().ok_or_else(|| CliError::Invalid("stability needs `s_grid`".into()))?;
    let t = stability_experiment(&u, cfg.single_radius()?, s_grid, cfg.n, &spec, density).in_module("functionals")?;
    let mut f = Findings::new(Table::new(&["s", "value", "error", "target", "deviation"]));
    for r in &t.rows {
        f.table.push(vec![r.s.into(), r.value.into(), r.error.into(), r.target.into(), r.deviation.into()]);
    }
    f.summary.push(Quantity::from_estimate("local_value", t.local_value));
    f.summary.push(Quantity::exact("target", t.target));
    f.summary.push(Quantity::exact("derived_target", t.derived_target));
    f.summary.push(Quantity::new("extrapolated", t.extrapolated, t.extrapolation_spread));
    f.summary.push(Quantity::exact("relative_gap", t.relative_gap));
    f.summary.push(Quantity::exact("derived_relative_gap", t.derived_relative_gap));
    f.checks.push(Check::flag(
        "deviation from the target decreases along s",
        t.deviations_decreasing,
        "|J^s - target| non-increasing up to error estimates",
    ));
    f.checks.push(Check::at_most(
        "extrapolated limit near the target",
        t.relative_gap,
        tol::STABILITY,
        "relative gap of the three-point extrapolation to s = 1",
    ));
    if density == Density::GradNormSquared {
        f.notes.push(format!(
            "|grad^s u|^2 tends to |grad u|^2, so the pointwise limit gives target (1/(n omega_n)) J_local = {:e}; extrapolated gap to it {:.3e}",
            t.derived_target, t.derived_relative_gap
        ));
    }
    Ok(f)
}

// ---------------------------------------------------------------------------
// Bochner identities and limits

fn default_bochner_points(n: usize) -> Vec<Point> {
    spread_points(n, 3, 0.3)
}

fn bochner_row(table: &mut Table, kind: &str, x: &Point, b: &BochnerResidual) {
    let rhs = Estimate::new(
        b.term_cross.value - b.term_square.value,
        b.term_cross.error + b.term_square.error,
    );
    let check = IdentityCheck {
        lhs: b.lhs,
        rhs,
        residual: b.residual,
        combined_error: b.combined_error,
        relative: b.relative(),
    };
    identity_row(table, kind, x, &check);
}

fn bochner_g(cfg: &ExperimentConfig) -> Result<Findings> {
    let p = params(cfg.n, cfg.order()?)?;
    let spec = cfg.spec();
    let u = field(cfg.field_id()?, &p, &spec)?;
    let points = cfg.point_list().unwrap_or_else(|| default_bochner_points(cfg.n));
    let results = par_map(&points, |x| bochner_residual_g(&u, x, &p, &spec).in_module("bochner"))?;
    let mut f = Findings::new(Table::new(&IDENTITY_COLUMNS));
    let mut worst: f64 = 0.0;
    let mut squares_ok = true;
    for (x, b) in points.iter().zip(&results) {
        worst = worst.max(b.relative());
        squares_ok &= b.square_nonnegative();
        bochner_row(&mut f.table, "bochner-G", x, b);
    }
    f.summary.push(Quantity::exact("max_relative_residual", worst));
    f.checks.push(Check::at_most("Bochner identity for G", worst, tol::BOCHNER, "largest residual relative to the largest term"));
    f.checks.push(Check::flag("square term nonnegative", squares_ok, "double-difference integral >= -error"));
    f.notes.push("assumes G_u lies in the weighted L^1 class; this follows from the derived tail envelope of G_u".into());
    Ok(f)
}

fn bochner_grad(cfg: &ExperimentConfig) -> Result<Findings> {
    let n = cfg.n;
    let p = params(n, cfg.order()?)?;
    let spec = cfg.spec();
    let u = field(cfg.field_id()?, &p, &spec)?;
    let points = cfg.point_list().unwrap_or_else(|| default_bochner_points(n));
    let results = par_map(&points, |x| bochner_residual_grad(&u, x, &p, &spec, CrossRoute::Direct).in_module("bochner"))?;
    let mut f = Findings::new(Table::new(&IDENTITY_COLUMNS));
    let mut worst: f64 = 0.0;
    let mut squares_ok = true;
    for (x, b) in points.iter().zip(&results) {
        worst = worst.max(b.relative());
        squares_ok &= b.square_nonnegative();
        bochner_row(&mut f.table, "bochner-grad", x, b);
    }
    f.summary.push(Quantity::exact("max_relative_residual", worst));
    f.checks.push(Check::at_most("Bochner identity for grad^s", worst, tol::BOCHNER, "largest residual relative to the largest term"));
    f.checks.push(Check::flag("square term nonnegative", squares_ok, "sum of G of the gradient components >= -error"));

    let count = cfg.random_points.unwrap_or(10);
    let pts = random_points(n, count, cfg.sample_radius.unwrap_or(1.0), cfg.seed);
    let lap = frac_laplacian_field(&u, &p, &spec).in_module("operators")?;
    let mut worst_comm: f64 = 0.0;
    for i in 0..n {
        let di = frac_gradient_field(&u, i, &p, &spec).in_module("operators")?;
        let checks = par_map(&pts, |x| commutation_check_with(&di, &lap, x, i, &p, &spec).in_module("operators"))?;
        for (x, c) in pts.iter().zip(&checks) {
            worst_comm = worst_comm.max(c.relative);
            identity_row(&mut f.table, &format!("commutation-{}", i + 1), x, c);
        }
    }
    f.summary.push(Quantity::exact("max_commutation_relative", worst_comm));
    f.checks.push(Check::at_most(
        "(-Delta)^s commutes with grad^s",
        worst_comm,
        tol::COMMUTATION,
        format!("largest relative residual at {count} seeded points"),
    ));
    Ok(f)
}

fn limit_rows(table: &mut Table, seq: &LimitSequence) {
    for smp in &seq.samples {
        table.push(vec![
            seq.name.as_str().into(),
            smp.s.into(),
            smp.value.value.into(),
            smp.value.error.into(),
            smp.target.into(),
            smp.relative_gap.into(),
        ]);
    }
}

fn limits(cfg: &ExperimentConfig) -> Result<Findings> {
    let spec = cfg.spec();
    let s_grid = cfg.order_grid()?;
    let p0 = params(cfg.n, s_grid[0])?;
    let u = field(cfg.field_id()?, &p0, &spec)?;
    let v = field(cfg.other_field.as_deref().unwrap_or(cfg.field_id()?), &p0, &spec)?;
    let g = field(cfg.kernel_field.as_deref().unwrap_or(cfg.field_id()?), &p0, &spec)?;
    let x = cfg.point_list().map(|p| p[0]).unwrap_or(ORIGIN);
    let radius = cfg.radius.unwrap_or(0.5);
    let t = local_limit_check(&u, &v, &g, &x, radius, &s_grid, &spec).in_module("bochner")?;
    let mut f = Findings::new(Table::new(&["quantity", "s", "value", "error", "target", "relative_gap"]));
    for seq in [&t.energy, &t.square_term, &t.kernel_stated, &t.kernel_normalized, &t.inner_product] {
        limit_rows(&mut f.table, seq);
        f.summary.push(Quantity::exact(format!("{}_final_gap", seq.name), seq.final_gap));
    }
    for seq in [&t.energy, &t.square_term, &t.kernel_stated] {
        f.checks.push(Check::flag(
            seq.name.clone(),
            seq.pass,
            format!(
                "gap at the largest s {:.3e} against {} and decreasing: {}",
                seq.final_gap, seq.tolerance, seq.decreasing
            ),
        ));
    }
    f.notes.push(format!(
        "with a_ns in place of 4 a_ns the kernel average has gap {:.3e} at the largest s",
        t.kernel_normalized.final_gap
    ));
    f.notes.push(format!(
        "inner-product limit Gamma(u, v)/2 -> <grad u, grad v> (not a pass criterion): gap {:.3e} at the largest s",
        t.inner_product.final_gap
    ));
    Ok(f)
}

// ---------------------------------------------------------------------------
// bounds

fn bound(cfg: &ExperimentConfig) -> Result<Findings> {
    let p = params(cfg.n, cfg.order()?)?;
    let spec = cfg.spec();
    let u = field(cfg.field_id()?, &p, &spec)?;
    let radii = cfg.radius_grid()?;
    let mut f = Findings::new(Table::new(&["density", "radius", "value", "error", "ratio", "refined_ratio"]));
    for density in densities(cfg) {
        let t = acf_bound_experiment(&u, radii, &p, &spec, density).in_module("functionals")?;
        let label = density_label(density);
        for r in &t.rows {
            f.table.push(vec![
                label.into(),
                r.radius.into(),
                r.value.value.into(),
                r.value.error.into(),
                r.ratio.into(),
                r.refined_ratio.into(),
            ]);
        }
        f.summary.push(Quantity::from_estimate(format!("{label}_weighted_integral"), t.weighted_integral));
        f.summary.push(Quantity::new(
            format!("{label}_max_ratio"),
            t.max_ratio,
            (t.refined_max_ratio - t.max_ratio).abs(),
        ));
        f.checks.push(Check::flag(format!("{label} ratio finite"), t.max_ratio.is_finite(), "max over the radius grid"));
        f.checks.push(Check::at_most(
            format!("{label} ratio stable under refinement"),
            t.relative_change,
            tol::BOUND_REFINEMENT,
            "relative change of the max ratio when panels and nodes are doubled",
        ));
    }
    Ok(f)
}

fn gradest(cfg: &ExperimentConfig) -> Result<Findings> {
    let p = params(cfg.n, cfg.order()?)?;
    let spec = cfg.spec();
    let u = field(cfg.field_id()?, &p, &spec)?;
    let radii = cfg.radius_grid()?;
    let r = gradient_estimate_experiment(&u, radii, &p, &spec).in_module("functionals")?;
    let mut f = Findings::new(Table::new(&["radius", "ratio", "normalized_ratio", "refined_ratio"]));
    for row in &r.rows {
        f.table.push(vec![row.radius.into(), row.ratio.into(), row.normalized_ratio.into(), row.refined_ratio.into()]);
    }
    f.summary.push(Quantity::from_estimate("center_energy", r.center_energy));
    f.summary.push(Quantity::exact("bracket", r.bracket));
    f.summary.push(Quantity::exact("u_sup", r.u_sup));
    f.summary.push(Quantity::exact("f_sup", r.f_sup));
    f.summary.push(Quantity::exact("normalization_residual", r.normalization_residual));
    f.summary.push(Quantity::exact("refinement_change", r.refinement_change));
    precondition_summary(&mut f, &r.precondition);
    let finite = r.rows.iter().all(|row| row.ratio.is_finite());
    f.checks.push(Check::flag("ratio finite", finite, "on every radius"));
    f.checks.push(Check::at_most(
        "ratio invariant under u -> c u",
        r.normalization_residual,
        tol::GRADEST_NORMALIZATION,
        "largest relative change after normalizing |u|_inf + |f|_inf to 1",
    ));
    f.checks.push(Check::at_most(
        "ratio stable under refinement",
        r.refinement_change,
        tol::BOUND_REFINEMENT,
        "largest relative change when panels and nodes are doubled",
    ));
    if !r.precondition.satisfied {
        f.notes.push(format!(
            "(-Delta)^s G_u <= 0 does not hold on the sampled ball of radius {} (max excursion {:e}); the ratio checks do not depend on it",
            r.precondition.radius, r.precondition.max_excursion
        ));
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_points_are_seeded_and_inside() {
        let a = random_points(2, 20, 1.5, 7);
        let b = random_points(2, 20, 1.5, 7);
        let c = random_points(2, 20, 1.5, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|p| norm(p) <= 1.5 && p[2] == 0.0));
    }

    #[test]
    fn constants_example() {
        let cfg = ExperimentConfig::parse("claim = \"constants\"\nn = 2\ns = 0.5\n").unwrap();
        let r = run(&cfg).unwrap();
        assert_eq!(r.status, Outcome::Pass);
        let a = r.quantity("a_ns").unwrap().value;
        assert!((a - 0.101321).abs() < 1e-6, "{a}");
    }

    #[test]
    fn constant_field_has_zero_defect() {
        let cfg = ExperimentConfig::parse(
            "claim = \"monotonicity-G\"\nfield = \"const:v=1\"\ns = 0.5\nradii = [0.25, 0.5, 1.0]\n",
        )
        .unwrap();
        let r = run(&cfg).unwrap();
        assert_eq!(r.status, Outcome::Pass);
        assert_eq!(r.quantity("monotonicity_defect").unwrap().value, 0.0);
    }

    #[test]
    fn missing_keys_and_unknown_fields_are_errors() {
        let cfg = ExperimentConfig::parse("claim = \"bound\"\ns = 0.5\n").unwrap();
        assert!(matches!(run(&cfg), Err(CliError::Invalid(_))));
        let cfg = ExperimentConfig::parse("claim = \"routes\"\nfield = \"nope\"\ns = 0.5\nradii = [1.0]\n").unwrap();
        match run(&cfg) {
            Err(CliError::Library { module, .. }) => assert_eq!(module, "fields"),
            other => panic!("expected a fields error, got {other:?}"),
        }
    }
}
