//! Singular-integral quadrature.
//!
//! One-dimensional integrals are split into pieces at declared breakpoints.
//! Pieces touching an algebraic endpoint singularity `d^beta` are covered by a
//! geometric mesh; the innermost sliver `[0, h]` is integrated analytically
//! from a short fit of `f(d) / d^beta` in powers of `d^k`. Integrals over
//! `R^n` are factored into radial rays times an angular rule.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotate, Point, Rotation};

// ---------------------------------------------------------------------------
// Gauss-Legendre rules

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = (n + 1) / 2;
        for i in 0..m {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        GaussLegendre { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integrates `f` over `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut sum = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            sum += w * f(mid + half * x);
        }
        sum * half
    }

    /// Fallible variant of [`GaussLegendre::integrate`].
    pub fn try_integrate<F>(&self, a: f64, b: f64, f: &mut F) -> Result<f64>
    where
        F: FnMut(f64) -> Result<f64>,
    {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut sum = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            sum += w * f(mid + half * x)?;
        }
        Ok(sum * half)
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, d)
}

const MAX_CACHED_RULE: usize = 256;

/// Shared Gauss-Legendre rule of order `n`.
pub fn gauss_legendre(n: usize) -> &'static GaussLegendre {
    static RULES: OnceLock<Vec<OnceLock<GaussLegendre>>> = OnceLock::new();
    let rules = RULES.get_or_init(|| (0..=MAX_CACHED_RULE).map(|_| OnceLock::new()).collect());
    assert!(
        (1..=MAX_CACHED_RULE).contains(&n),
        "Gauss-Legendre order {n} outside 1..={MAX_CACHED_RULE}"
    );
    rules[n].get_or_init(|| GaussLegendre::new(n))
}

// ---------------------------------------------------------------------------
// Specification and resolutions

/// Discretization knobs shared by every integral in the crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Geometric panels per singular endpoint.
    pub panels: usize,
    /// Ratio between consecutive graded panel lengths.
    pub grading_ratio: f64,
    /// Gauss-Legendre order per panel.
    pub nodes_per_panel: usize,
    /// n = 2: nodes on the circle; n = 3: polar Gauss order (azimuth uses twice as many).
    pub angular_nodes: usize,
    /// Absolute bound accepted for truncated tails.
    pub tail_tol: f64,
    pub target_rel_tol: f64,
    /// Grid spacing used to key memo caches of derived fields.
    pub cache_quantum: f64,
}

impl QuadratureSpec {
    pub fn for_dim(n: usize) -> Self {
        let (angular_nodes, target_rel_tol) = match n {
            1 => (2, 1e-8),
            2 => (64, 1e-6),
            _ => (16, 1e-4),
        };
        QuadratureSpec {
            panels: 12,
            grading_ratio: 0.5,
            nodes_per_panel: 8,
            angular_nodes,
            tail_tol: 1e-11,
            target_rel_tol,
            cache_quantum: 1e-9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grading_ratio > 0.0 && self.grading_ratio < 1.0) {
            return Err(Error::invalid(format!(
                "grading_ratio must lie in (0, 1), got {}",
                self.grading_ratio
            )));
        }
        if self.panels < 4 {
            return Err(Error::invalid(format!("panels must be >= 4, got {}", self.panels)));
        }
        if self.nodes_per_panel < 4 || self.nodes_per_panel > MAX_CACHED_RULE {
            return Err(Error::invalid(format!(
                "nodes_per_panel must lie in 4..={MAX_CACHED_RULE}, got {}",
                self.nodes_per_panel
            )));
        }
        if self.angular_nodes < 2 || self.angular_nodes % 2 != 0 {
            return Err(Error::invalid(format!(
                "angular_nodes must be even and >= 2, got {}",
                self.angular_nodes
            )));
        }
        if !(self.tail_tol > 0.0 && self.target_rel_tol > 0.0 && self.cache_quantum >= 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        Ok(())
    }

    /// Twice the panels and twice the nodes per panel at the same grading ratio.
    pub fn refined(&self) -> Self {
        QuadratureSpec {
            panels: self.panels * 2,
            nodes_per_panel: (self.nodes_per_panel * 2).min(MAX_CACHED_RULE),
            ..self.clone()
        }
    }

    /// Resolution used for reported values.
    pub fn full(&self) -> Resolution {
        Resolution {
            nodes: self.nodes_per_panel,
            panels: self.panels,
            ratio: self.grading_ratio,
            cap_points: 3,
        }
    }

    /// Lower resolution whose distance to [`QuadratureSpec::full`] is the error estimate.
    pub fn coarse(&self) -> Resolution {
        Resolution {
            nodes: self.nodes_per_panel - 2,
            panels: self.panels,
            ratio: self.grading_ratio,
            cap_points: 2,
        }
    }
}

/// One concrete discretization level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Resolution {
    pub nodes: usize,
    pub panels: usize,
    pub ratio: f64,
    /// Points used by the analytic end cap fit (1 to 3).
    pub cap_points: usize,
}

impl Resolution {
    fn rule(&self) -> &'static GaussLegendre {
        gauss_legendre(self.nodes)
    }

    /// Size of the analytically integrated end cap for a feature length `scale`.
    pub fn cap_size(&self, scale: f64) -> f64 {
        scale * self.ratio.powi(self.panels as i32)
    }
}

/// A value with an absolute error estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

impl Estimate {
    pub fn new(value: f64, error: f64) -> Self {
        Estimate { value, error: error.abs() }
    }

    pub fn exact(value: f64) -> Self {
        Estimate { value, error: 0.0 }
    }

    /// Runs `eval` at full and coarse resolution; the error is their distance plus `extra`.
    pub fn from_levels<F>(spec: &QuadratureSpec, extra: f64, mut eval: F) -> Result<Self>
    where
        F: FnMut(&Resolution) -> Result<f64>,
    {
        let fine = eval(&spec.full())?;
        let coarse = eval(&spec.coarse())?;
        Ok(Estimate::new(fine, (fine - coarse).abs() + extra))
    }

    pub fn rel_error(&self) -> f64 {
        if self.value == 0.0 {
            if self.error == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.error / self.value.abs()
        }
    }
}

// ---------------------------------------------------------------------------
// One-dimensional pieces

/// Behaviour of an integrand at an end of an interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EndBehavior {
    Regular,
    /// Bounded but not smooth (support edge, Holder kink): geometric refinement.
    Kink,
    /// `f(a + d) = d^beta * g(d)` with `g` smooth in `d^parity`.
    Algebraic { beta: f64, parity: u32 },
}

impl EndBehavior {
    pub fn algebraic(beta: f64, parity: u32) -> Result<Self> {
        if !(beta > -1.0) {
            return Err(Error::NonIntegrable(beta));
        }
        Ok(EndBehavior::Algebraic {
            beta,
            parity: parity.max(1),
        })
    }

    fn rank(&self) -> u8 {
        match self {
            EndBehavior::Regular => 0,
            EndBehavior::Kink => 1,
            EndBehavior::Algebraic { .. } => 2,
        }
    }

    fn is_regular(&self) -> bool {
        matches!(self, EndBehavior::Regular)
    }

    /// The stronger of two behaviours at a shared point.
    pub fn merge(self, other: EndBehavior) -> EndBehavior {
        if other.rank() > self.rank() {
            other
        } else {
            self
        }
    }
}

/// Length scales governing how an interval is paneled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scales {
    /// Panel width away from singular ends and extent of each graded zone.
    pub feature: f64,
    /// Length over which an algebraic end behaves like its leading power.
    pub cap: f64,
    /// Beyond this abscissa panels may grow geometrically.
    pub far_from: Option<f64>,
    /// Panels may grow with the distance to the nearer end of the interval.
    pub gap: bool,
}

impl Scales {
    pub fn new(feature: f64) -> Self {
        Scales {
            feature,
            cap: feature,
            far_from: None,
            gap: false,
        }
    }

    pub fn with_cap(mut self, cap: f64) -> Self {
        self.cap = cap;
        self
    }

    pub fn with_far_from(mut self, far_from: f64) -> Self {
        self.far_from = Some(far_from);
        self
    }
}

/// Integrates `f` over `[a, b]` given the behaviour at each end.
pub fn integrate_interval<F>(
    a: f64,
    b: f64,
    left: EndBehavior,
    right: EndBehavior,
    scales: &Scales,
    res: &Resolution,
    f: &mut F,
) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(b > a) {
        return Ok(0.0);
    }
    match (left.is_regular(), right.is_regular()) {
        (true, true) => smooth_panels(a, b, scales, res, f),
        (false, true) => graded(a, b, left, scales, res, f, 1.0),
        (true, false) => graded(b, a, right, scales, res, f, -1.0),
        (false, false) => {
            let mid = 0.5 * (a + b);
            Ok(graded(a, mid, left, scales, res, f, 1.0)?
                + graded(b, mid, right, scales, res, f, -1.0)?)
        }
    }
}

/// Uniform panels of width at most `feature / 2`; past `far_from` widths grow
/// with the distance travelled.
fn smooth_panels<F>(a: f64, b: f64, scales: &Scales, res: &Resolution, f: &mut F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let rule = res.rule();
    let base = 0.5 * scales.feature;
    let mut sum = 0.0;
    match scales.far_from {
        Some(anchor) => {
            let mut x = a;
            while x < b {
                let width = base.max(0.5 * (x - anchor));
                let mut next = x + width;
                // Avoid a sliver at the end.
                if next > b || b - next < 0.25 * width {
                    next = b;
                }
                sum += rule.try_integrate(x, next, f)?;
                x = next;
            }
        }
        None if scales.gap => {
            // Grow from both ends toward the middle.
            let mid = 0.5 * (a + b);
            let mut x = a;
            while x < mid {
                let width = base.max(0.5 * (x - a));
                let mut next = x + width;
                if next > mid || mid - next < 0.25 * width {
                    next = mid;
                }
                sum += rule.try_integrate(x, next, f)?;
                x = next;
            }
            let mut x = b;
            while x > mid {
                let width = base.max(0.5 * (b - x));
                let mut next = x - width;
                if next < mid || next - mid < 0.25 * width {
                    next = mid;
                }
                sum += rule.try_integrate(next, x, f)?;
                x = next;
            }
        }
        None => {
            let count = ((b - a) / base).ceil().clamp(1.0, 1e6) as usize;
            let h = (b - a) / count as f64;
            for k in 0..count {
                let lo = a + h * k as f64;
                let hi = if k + 1 == count { b } else { lo + h };
                sum += rule.try_integrate(lo, hi, f)?;
            }
        }
    }
    Ok(sum)
}

/// Geometric mesh toward the end `e`, with `o` the other end and `sign`
/// the direction from `e` into the interval.
fn graded<F>(
    e: f64,
    o: f64,
    behavior: EndBehavior,
    scales: &Scales,
    res: &Resolution,
    f: &mut F,
    sign: f64,
) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let len = (o - e).abs();
    if len == 0.0 {
        return Ok(0.0);
    }
    let zone = len.min(scales.feature);
    let mut sum = 0.0;
    if zone < len {
        let (lo, hi) = if sign > 0.0 { (e + zone, o) } else { (o, e - zone) };
        sum += smooth_panels(lo, hi, scales, res, f)?;
    }
    let rule = res.rule();
    let h_cap = res.cap_size(scales.feature.min(scales.cap)).min(zone);
    let mut d = zone;
    while d > h_cap * (1.0 + 1e-12) {
        let next = (d * res.ratio).max(h_cap);
        let (lo, hi) = if sign > 0.0 { (e + next, e + d) } else { (e - d, e - next) };
        sum += rule.try_integrate(lo, hi, f)?;
        d = next;
    }
    let cap = match behavior {
        EndBehavior::Algebraic { beta, parity } => {
            algebraic_cap(beta, parity, h_cap, res.cap_points, &mut |t| f(e + sign * t))?
        }
        _ => {
            let (lo, hi) = if sign > 0.0 { (e, e + h_cap) } else { (e - h_cap, e) };
            rule.try_integrate(lo, hi, f)?
        }
    };
    Ok(sum + cap)
}

/// `int_0^h f(d) dd` assuming `f(d) = d^beta * (c0 + c1 d^k + c2 d^{2k} + ...)`.
fn algebraic_cap<F>(beta: f64, k: u32, h: f64, points: usize, f: &mut F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(beta > -1.0) {
        return Err(Error::NonIntegrable(beta));
    }
    let m = points.clamp(1, 3);
    let k = k as f64;
    // Samples at d_j = h / 2^j in the variable tau = (d / h)^k.
    let mut tau = [0.0; 3];
    let mut g = [0.0; 3];
    for j in 0..m {
        let d = h / 2f64.powi(j as i32);
        tau[j] = 0.5f64.powf(k * j as f64);
        g[j] = f(d)? / d.powf(beta);
    }
    let coeffs = polyfit_exact(&tau[..m], &g[..m]);
    let mut sum = 0.0;
    for (i, c) in coeffs.iter().enumerate() {
        sum += c / (1.0 + beta + k * i as f64);
    }
    Ok(sum * h.powf(1.0 + beta))
}

/// Monomial coefficients of the interpolating polynomial through (x_j, y_j).
fn polyfit_exact(x: &[f64], y: &[f64]) -> Vec<f64> {
    let m = x.len();
    match m {
        1 => vec![y[0]],
        2 => {
            let c1 = (y[0] - y[1]) / (x[0] - x[1]);
            vec![y[0] - c1 * x[0], c1]
        }
        _ => {
            // Newton divided differences, then expand.
            let d01 = (y[1] - y[0]) / (x[1] - x[0]);
            let d12 = (y[2] - y[1]) / (x[2] - x[1]);
            let d012 = (d12 - d01) / (x[2] - x[0]);
            // p(t) = y0 + d01 (t - x0) + d012 (t - x0)(t - x1)
            let c2 = d012;
            let c1 = d01 - d012 * (x[0] + x[1]);
            let c0 = y[0] - d01 * x[0] + d012 * x[0] * x[1];
            vec![c0, c1, c2]
        }
    }
}

// ---------------------------------------------------------------------------
// Rays

/// A one-dimensional integration path `[start, end]` with breakpoints.
#[derive(Clone, Debug)]
pub struct Ray {
    pub start: f64,
    pub end: f64,
    pub start_behavior: EndBehavior,
    pub end_behavior: EndBehavior,
    pub breaks: Vec<(f64, EndBehavior)>,
    /// Intervals where the integrand varies on the feature scale. When any are
    /// given, panels outside them grow with the distance to the nearest zone.
    pub zones: Vec<(f64, f64)>,
    pub scales: Scales,
}

impl Ray {
    pub fn new(start: f64, end: f64, scales: Scales) -> Self {
        Ray {
            start,
            end,
            start_behavior: EndBehavior::Regular,
            end_behavior: EndBehavior::Regular,
            breaks: Vec::new(),
            zones: Vec::new(),
            scales,
        }
    }

    /// Marks `[lo, hi]` as a region of feature-scale variation.
    pub fn add_zone(&mut self, lo: f64, hi: f64) {
        let lo = lo.max(self.start);
        let hi = hi.min(self.end);
        if hi > lo {
            self.zones.push((lo, hi));
        }
    }

    pub fn start_behavior(mut self, b: EndBehavior) -> Self {
        self.start_behavior = b;
        self
    }

    pub fn end_behavior(mut self, b: EndBehavior) -> Self {
        self.end_behavior = b;
        self
    }

    pub fn add_break(&mut self, at: f64, b: EndBehavior) {
        if !at.is_finite() {
            return;
        }
        // A break landing on the end still governs the grading there.
        let tol = 1e-13 * self.scales.feature.max(self.end.abs().min(1e6));
        if (at - self.end).abs() <= tol && self.end > self.start {
            self.end_behavior = self.end_behavior.merge(b);
        } else if at > self.start && at < self.end {
            self.breaks.push((at, b));
        }
    }

    /// Integrates `f` along the ray. Panels grow geometrically after the last break
    /// unless the caller fixed `scales.far_from`.
    pub fn integrate<F>(&self, res: &Resolution, f: &mut F) -> Result<f64>
    where
        F: FnMut(f64) -> Result<f64>,
    {
        if !(self.end > self.start) {
            return Ok(0.0);
        }
        let mut pts: Vec<(f64, EndBehavior)> = Vec::with_capacity(self.breaks.len() + 2);
        pts.push((self.start, self.start_behavior));
        let mut inner = self.breaks.clone();
        for (lo, hi) in &self.zones {
            for x in [*lo, *hi] {
                if x > self.start && x < self.end {
                    inner.push((x, EndBehavior::Regular));
                }
            }
        }
        inner.sort_by(|a, b| a.0.total_cmp(&b.0));
        let merge_tol = 1e-13 * self.scales.feature.max(self.end.abs().min(1e6));
        for (x, b) in inner {
            let last = pts.last_mut().expect("nonempty");
            if (x - last.0).abs() <= merge_tol {
                last.1 = last.1.merge(b);
            } else {
                pts.push((x, b));
            }
        }
        let count = pts.len();
        let last = pts.last_mut().expect("nonempty");
        if count > 1 && (self.end - last.0).abs() <= merge_tol {
            last.0 = self.end;
            last.1 = last.1.merge(self.end_behavior);
        } else {
            pts.push((self.end, self.end_behavior));
        }
        let last_break = if pts.len() > 2 { pts[pts.len() - 2].0 } else { self.start };
        let mut sum = 0.0;
        for w in pts.windows(2) {
            let (a, lb) = w[0];
            let (b, rb) = w[1];
            let mut scales = self.scales;
            if !self.zones.is_empty() {
                let mid = 0.5 * (a + b);
                scales.gap = !self.zones.iter().any(|(lo, hi)| mid > *lo && mid < *hi);
            }
            if scales.far_from.is_none() && a >= last_break && !(scales.gap && b < self.end) {
                scales.far_from = Some(last_break);
            }
            sum += integrate_interval(a, b, lb, rb, &scales, res, f)?;
        }
        Ok(sum)
    }
}

// ---------------------------------------------------------------------------
// Angular rules

/// Directions on the unit sphere `S^{n-1}` with weights summing to its area.
#[derive(Clone, Debug)]
pub struct SphereRule {
    pub dim: usize,
    pub dirs: Vec<Point>,
    pub weights: Vec<f64>,
}

impl SphereRule {
    /// The full rule of the given order.
    pub fn full(dim: usize, order: usize) -> Result<Arc<SphereRule>> {
        cached_rule(dim, order, false)
    }

    /// One direction per antipodal pair with doubled weight; for integrands even
    /// under `theta -> -theta`.
    pub fn half(dim: usize, order: usize) -> Result<Arc<SphereRule>> {
        cached_rule(dim, order, true)
    }

    fn build(dim: usize, order: usize, half: bool) -> Result<SphereRule> {
        let mut dirs = Vec::new();
        let mut weights = Vec::new();
        match dim {
            1 => {
                dirs.push([1.0, 0.0, 0.0]);
                weights.push(1.0);
                if !half {
                    dirs.push([-1.0, 0.0, 0.0]);
                    weights.push(1.0);
                }
            }
            2 => {
                let m = order.max(2);
                let w = 2.0 * PI / m as f64;
                let count = if half { m / 2 } else { m };
                for j in 0..count {
                    let t = 2.0 * PI * (j as f64 + 0.5) / m as f64;
                    dirs.push([t.cos(), t.sin(), 0.0]);
                    weights.push(w);
                }
            }
            3 => {
                let m = order.max(2);
                let gl = gauss_legendre(m);
                let az = 2 * m;
                let waz = 2.0 * PI / az as f64;
                for (c, wc) in gl.nodes.iter().zip(&gl.weights) {
                    if half && *c < 0.0 {
                        continue;
                    }
                    let sin = (1.0 - c * c).max(0.0).sqrt();
                    for j in 0..az {
                        let phi = 2.0 * PI * (j as f64 + 0.5) / az as f64;
                        dirs.push([sin * phi.cos(), sin * phi.sin(), *c]);
                        weights.push(wc * waz);
                    }
                }
            }
            other => return Err(Error::InvalidDimension(other)),
        }
        if half {
            for w in weights.iter_mut() {
                *w *= 2.0;
            }
        }
        Ok(SphereRule { dim, dirs, weights })
    }

    /// The same rule with every direction rotated.
    pub fn rotated(&self, r: &Rotation) -> SphereRule {
        SphereRule {
            dim: self.dim,
            dirs: self.dirs.iter().map(|d| rotate(r, d)).collect(),
            weights: self.weights.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

fn cached_rule(dim: usize, order: usize, half: bool) -> Result<Arc<SphereRule>> {
    type Key = (usize, usize, bool);
    static CACHE: OnceLock<RwLock<HashMap<Key, Arc<SphereRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| RwLock::new(HashMap::new()));
    let order = if dim == 1 { 2 } else { order };
    let key = (dim, order, half);
    if let Some(rule) = cache.read().expect("rule cache poisoned").get(&key) {
        return Ok(rule.clone());
    }
    let rule = Arc::new(SphereRule::build(dim, order, half)?);
    cache
        .write()
        .expect("rule cache poisoned")
        .entry(key)
        .or_insert_with(|| rule.clone());
    Ok(rule)
}

/// Surface area of the unit sphere in R^n.
pub fn sphere_area(n: usize) -> f64 {
    match n {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => 2.0 * PI.powf(n as f64 / 2.0) / crate::constants::gamma(n as f64 / 2.0),
    }
}

// ---------------------------------------------------------------------------
// Tails

/// Decay bound `|u(y)| <= amplitude * |y|^(-power)` for `|y| >= r0`.
/// An infinite power means the field vanishes outside `B(0, r0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailEnvelope {
    pub amplitude: f64,
    pub power: f64,
    pub r0: f64,
}

impl TailEnvelope {
    pub fn compact(r0: f64) -> Self {
        TailEnvelope {
            amplitude: 0.0,
            power: f64::INFINITY,
            r0,
        }
    }

    pub fn new(amplitude: f64, power: f64, r0: f64) -> Self {
        TailEnvelope {
            amplitude,
            power,
            r0,
        }
    }

    pub fn is_compact(&self) -> bool {
        self.power.is_infinite() && self.power > 0.0
    }

    /// The envelope bound at distance `r` from the origin.
    pub fn bound(&self, r: f64) -> f64 {
        if self.is_compact() {
            if r > self.r0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.amplitude * r.powf(-self.power)
        }
    }

    /// Envelope of the product of two fields.
    pub fn product(&self, other: &TailEnvelope) -> TailEnvelope {
        if self.is_compact() || other.is_compact() {
            let r0 = match (self.is_compact(), other.is_compact()) {
                (true, true) => self.r0.min(other.r0),
                (true, false) => self.r0,
                _ => other.r0,
            };
            return TailEnvelope::compact(r0);
        }
        TailEnvelope::new(
            self.amplitude * other.amplitude,
            self.power + other.power,
            self.r0.max(other.r0),
        )
    }

    /// Envelope of `y -> u(y - shift)` given the envelope of `u`.
    pub fn shifted(&self, shift: f64) -> TailEnvelope {
        if shift == 0.0 {
            return *self;
        }
        if self.is_compact() {
            return TailEnvelope::compact(self.r0 + shift);
        }
        // |y - c| >= |y| / 2 once |y| >= 2|c|.
        let factor = if self.power >= 0.0 { 2f64.powf(self.power) } else { 1.5f64.powf(-self.power) };
        TailEnvelope::new(
            self.amplitude * factor,
            self.power,
            (self.r0 + shift).max(2.0 * shift),
        )
    }
}

/// Radius beyond which the tail of `int A |y|^-p |y|^-kernel_decay dy` over `R^n`
/// is below `tol`.
pub fn truncation_radius(
    envelope: &TailEnvelope,
    n: usize,
    kernel_decay: f64,
    tol: f64,
) -> Result<f64> {
    if envelope.is_compact() {
        return Ok(envelope.r0);
    }
    let excess = envelope.power + kernel_decay - n as f64;
    if !(excess > 0.0) {
        return Err(Error::NonIntegrableTail {
            power: envelope.power,
            kernel_decay,
            dim: n,
        });
    }
    let scale = envelope.amplitude * sphere_area(n) / excess;
    let t = (scale / tol).powf(1.0 / excess);
    Ok(t.max(envelope.r0))
}

/// The bound used by [`truncation_radius`], evaluated at `t`.
pub fn tail_bound(envelope: &TailEnvelope, n: usize, kernel_decay: f64, t: f64) -> f64 {
    if envelope.is_compact() {
        return if t >= envelope.r0 { 0.0 } else { f64::INFINITY };
    }
    let excess = envelope.power + kernel_decay - n as f64;
    envelope.amplitude * sphere_area(n) * t.powf(-excess) / excess
}

/// Truncation of a ray integral `int_T^inf |u(x + rho theta)| rho^-q d rho`
/// for `|x| <= offset`. Returns `(T, bound)` with bound the tail per unit
/// angular weight; `T` is at least `min_t`.
pub fn ray_tail(envelope: &TailEnvelope, offset: f64, q: f64, tol: f64, min_t: f64) -> Result<(f64, f64)> {
    let floor = min_t.max(2.0 * offset).max(2.0 * envelope.r0);
    if envelope.is_compact() {
        let t = (offset + envelope.r0).max(min_t);
        return Ok((t, 0.0));
    }
    let p = envelope.power;
    let excess = p + q - 1.0;
    if !(excess > 0.0) {
        return Err(Error::NonIntegrableTail {
            power: p,
            kernel_decay: q,
            dim: 1,
        });
    }
    let factor = if p >= 0.0 { 2f64.powf(p) } else { 1.5f64.powf(-p) };
    let scale = factor * envelope.amplitude / excess;
    let t = if scale > 0.0 {
        (scale / tol).powf(1.0 / excess).max(floor)
    } else {
        floor
    };
    Ok((t, scale * t.powf(-excess)))
}

// ---------------------------------------------------------------------------
// Radial integrals over balls

/// Integrand `F(rho, theta)` over a ball in R^n, behaving like
/// `|rho - singular_radius|^beta` after multiplication by `rho^(n-1)`.
pub struct RadialIntegrand<'a> {
    pub dim: usize,
    pub beta: f64,
    pub singular_radius: f64,
    /// Power of the smooth remainder's expansion at the singular radius.
    pub parity: u32,
    pub evaluator: Box<dyn Fn(f64, &Point) -> f64 + Send + Sync + 'a>,
}

impl<'a> RadialIntegrand<'a> {
    pub fn new(
        dim: usize,
        beta: f64,
        singular_radius: f64,
        evaluator: impl Fn(f64, &Point) -> f64 + Send + Sync + 'a,
    ) -> Self {
        RadialIntegrand {
            dim,
            beta,
            singular_radius,
            parity: 1,
            evaluator: Box::new(evaluator),
        }
    }

    pub fn with_parity(mut self, parity: u32) -> Self {
        self.parity = parity;
        self
    }
}

/// `int_{|y| < outer_radius} F(|y|, y/|y|) dy` with a graded mesh at the singular radius.
pub fn integrate_radial(
    integrand: &RadialIntegrand<'_>,
    spec: &QuadratureSpec,
    outer_radius: f64,
) -> Result<Estimate> {
    spec.validate()?;
    let rule = SphereRule::full(integrand.dim, spec.angular_nodes)?;
    integrate_radial_with(integrand, spec, outer_radius, &rule)
}

pub(crate) fn integrate_radial_with(
    integrand: &RadialIntegrand<'_>,
    spec: &QuadratureSpec,
    outer_radius: f64,
    rule: &SphereRule,
) -> Result<Estimate> {
    let n = integrand.dim;
    if !(1..=3).contains(&n) {
        return Err(Error::InvalidDimension(n));
    }
    let sr = integrand.singular_radius;
    if !(outer_radius > sr) || sr < 0.0 {
        return Err(Error::invalid(format!(
            "outer radius {outer_radius} must exceed singular radius {sr}"
        )));
    }
    let sing = EndBehavior::algebraic(integrand.beta, integrand.parity)?;
    let feature = if sr > 0.0 { sr.min(outer_radius - sr) } else { outer_radius };
    let mut ray = Ray::new(0.0, outer_radius, Scales::new(feature));
    if sr > 0.0 {
        ray.add_break(sr, sing);
    } else {
        ray = ray.start_behavior(sing);
    }
    Estimate::from_levels(spec, 0.0, |res| {
        let mut total = 0.0;
        for (dir, w) in rule.dirs.iter().zip(&rule.weights) {
            let mut f = |rho: f64| -> Result<f64> {
                let v = (integrand.evaluator)(rho, dir) * rho.powi(n as i32 - 1);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite {
                        what: "radial integrand".into(),
                        point: crate::geometry::scale(dir, rho),
                        value: v,
                    })
                }
            };
            total += w * ray.integrate(res, &mut f)?;
        }
        Ok(total)
    })
}

/// Result of [`self_check`].
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    /// (panels, nodes_per_panel, value) per level.
    pub levels: Vec<(usize, usize, f64)>,
    /// Differences between consecutive levels.
    pub differences: Vec<f64>,
    /// log2 of the ratio of the first two differences.
    pub observed_order: f64,
    pub monotone: bool,
    pub converged: bool,
}

/// Evaluates the integrand over `B(0, outer_radius)` at three doubling levels.
pub fn self_check(
    spec: &QuadratureSpec,
    integrand: &RadialIntegrand<'_>,
    outer_radius: f64,
) -> Result<ConvergenceReport> {
    let mut levels = Vec::new();
    let mut s = spec.clone();
    for _ in 0..3 {
        let v = integrate_radial(integrand, &s, outer_radius)?.value;
        levels.push((s.panels, s.nodes_per_panel, v));
        s = s.refined();
    }
    let differences: Vec<f64> = levels.windows(2).map(|w| (w[1].2 - w[0].2).abs()).collect();
    let floor = 1e-15 * levels[2].2.abs().max(1e-300);
    let observed_order = if differences[1] > floor {
        (differences[0] / differences[1]).log2()
    } else {
        f64::INFINITY
    };
    let monotone = differences[1] <= differences[0] || differences[1] <= floor * 10.0;
    let scale = levels[2].2.abs().max(1e-300);
    let converged = differences[1] <= spec.target_rel_tol * scale;
    Ok(ConvergenceReport {
        levels,
        differences,
        observed_order,
        monotone,
        converged,
    })
}

// ---------------------------------------------------------------------------
// Adaptive Gauss-Kronrod (used by closed-form oracles only)

const GK_XK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const GK_WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = GK_WK[7] * fc;
    let mut gauss = GK_WG[3] * fc;
    for i in 0..7 {
        let x = h * GK_XK[i];
        let s = f(c - x) + f(c + x);
        kron += GK_WK[i] * s;
        if i % 2 == 1 {
            gauss += GK_WG[i / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Globally adaptive Gauss-Kronrod 7-15 quadrature of `f` over `[a, b]`.
/// Returns `(value, error_estimate)`.
pub fn adaptive_gauss_kronrod<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<(f64, f64)> {
    let mut intervals = vec![{
        let (v, e) = gk15(&mut f, a, b);
        (a, b, v, e)
    }];
    for _ in 0..5000 {
        let total: f64 = intervals.iter().map(|iv| iv.2).sum();
        let err: f64 = intervals.iter().map(|iv| iv.3).sum();
        if !total.is_finite() {
            return Err(Error::NonFinite {
                what: "adaptive quadrature".into(),
                point: [a, b, 0.0],
                value: total,
            });
        }
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok((total, err));
        }
        let (idx, _) = intervals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("nonempty");
        let (lo, hi, _, _) = intervals.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(&mut f, lo, mid);
        let (v2, e2) = gk15(&mut f, mid, hi);
        intervals.push((lo, mid, v1, e1));
        intervals.push((mid, hi, v2, e2));
    }
    let total: f64 = intervals.iter().map(|iv| iv.2).sum();
    let err: f64 = intervals.iter().map(|iv| iv.3).sum();
    Ok((total, err))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_exact_on_polynomials() {
        for n in [4usize, 8, 13] {
            let rule = GaussLegendre::new(n);
            for deg in 0..(2 * n) {
                let got = rule.integrate(0.3, 1.7, |x| x.powi(deg as i32));
                let exact = (1.7f64.powi(deg as i32 + 1) - 0.3f64.powi(deg as i32 + 1)) / (deg as f64 + 1.0);
                assert!(
                    (got - exact).abs() <= 1e-13 * exact.abs().max(1.0),
                    "n={n} deg={deg}: {got} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn weights_sum_to_two() {
        for n in 1..40 {
            let s: f64 = gauss_legendre(n).weights.iter().sum();
            assert!((s - 2.0).abs() < 1e-13, "n={n}: {s}");
        }
    }

    #[test]
    fn algebraic_endpoint() {
        // int_0^1 x^-0.5 cos(x) dx, reference by substitution x = t^2.
        let spec = QuadratureSpec::for_dim(1);
        let exact = gauss_legendre(30).integrate(0.0, 1.0, |t| 2.0 * (t * t).cos());
        let ray = Ray::new(0.0, 1.0, Scales::new(1.0)).start_behavior(EndBehavior::algebraic(-0.5, 1).unwrap());
        let got = ray.integrate(&spec.full(), &mut |x| Ok(x.powf(-0.5) * x.cos())).unwrap();
        assert!((got - exact).abs() < 1e-12, "{got} vs {exact}");
    }

    #[test]
    fn both_ends_singular() {
        // int_0^1 x^-0.3 (1-x)^-0.6 dx = B(0.7, 0.4)
        let b = statrs::function::beta::beta(0.7, 0.4);
        let spec = QuadratureSpec::for_dim(1);
        let ray = Ray::new(0.0, 1.0, Scales::new(1.0))
            .start_behavior(EndBehavior::algebraic(-0.3, 1).unwrap())
            .end_behavior(EndBehavior::algebraic(-0.6, 1).unwrap());
        let got = ray
            .integrate(&spec.full(), &mut |x| Ok(x.powf(-0.3) * (1.0 - x).powf(-0.6)))
            .unwrap();
        assert!((got - b).abs() < 1e-10 * b, "{got} vs {b}");
    }

    #[test]
    fn kink_break() {
        // |x - 0.3|^0.5 on [0, 1]
        let exact = (0.3f64.powf(1.5) + 0.7f64.powf(1.5)) / 1.5;
        let spec = QuadratureSpec::for_dim(1);
        let mut ray = Ray::new(0.0, 1.0, Scales::new(1.0));
        ray.add_break(0.3, EndBehavior::Kink);
        let got = ray.integrate(&spec.full(), &mut |x| Ok((x - 0.3f64).abs().sqrt())).unwrap();
        assert!((got - exact).abs() < 1e-8, "{got} vs {exact}");
    }

    #[test]
    fn break_on_the_end_grades_the_end() {
        // int_0^1 sqrt(1 - x) dx with the kink reported exactly at the end.
        let spec = QuadratureSpec::for_dim(1);
        let mut ray = Ray::new(0.0, 1.0, Scales::new(1.0));
        ray.add_break(1.0, EndBehavior::algebraic(0.5, 1).unwrap());
        let got = ray.integrate(&spec.full(), &mut |x| Ok((1.0 - x).max(0.0).sqrt())).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-10, "{got}");
    }

    #[test]
    fn far_field_panels_cover_long_tails() {
        // int_1^1e6 x^-2 dx
        let spec = QuadratureSpec::for_dim(1);
        let ray = Ray::new(1.0, 1e6, Scales::new(0.5));
        let got = ray.integrate(&spec.full(), &mut |x| Ok(x.powi(-2))).unwrap();
        assert!((got - (1.0 - 1e-6)).abs() < 1e-12, "{got}");
    }

    #[test]
    fn radial_moment_example() {
        // int_{B_1} |h|^{-n-2s} h_1^2 dh, n = 2, s = 1/2 -> pi
        let spec = QuadratureSpec::for_dim(2);
        let ig = RadialIntegrand::new(2, 0.0, 0.0, |rho, th| rho.powf(-3.0) * (rho * th[0]).powi(2));
        let got = integrate_radial(&ig, &spec, 1.0).unwrap();
        assert!((got.value - PI).abs() < 1e-12, "{got:?}");
    }

    #[test]
    fn radial_power_example() {
        // int_{B_1} |h|^{2-n-2s} dh, n = 1, s = 1/4 -> 4/3
        let spec = QuadratureSpec::for_dim(1);
        let ig = RadialIntegrand::new(1, 0.5, 0.0, |rho, _| rho.powf(0.5));
        let got = integrate_radial(&ig, &spec, 1.0).unwrap();
        assert!((got.value - 4.0 / 3.0).abs() < 1e-12, "{got:?}");
    }

    #[test]
    fn rejects_non_integrable() {
        let spec = QuadratureSpec::for_dim(1);
        let ig = RadialIntegrand::new(1, -1.001, 0.0, |rho, _| rho.powf(-1.001));
        assert!(matches!(integrate_radial(&ig, &spec, 1.0), Err(Error::NonIntegrable(_))));
        assert!(matches!(self_check(&spec, &ig, 1.0), Err(Error::NonIntegrable(_))));
    }

    #[test]
    fn nan_is_reported() {
        let spec = QuadratureSpec::for_dim(1);
        let ig = RadialIntegrand::new(1, 0.0, 0.0, |_, _| f64::NAN);
        assert!(matches!(integrate_radial(&ig, &spec, 1.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn self_check_smooth() {
        let spec = QuadratureSpec::for_dim(1);
        let ig = RadialIntegrand::new(1, 0.0, 0.0, |rho, _| (rho * 3.0).cos());
        let rep = self_check(&spec, &ig, 2.0).unwrap();
        assert!(rep.converged && rep.monotone, "{rep:?}");
        let exact = 2.0 * (6.0f64).sin() / 3.0;
        assert!((rep.levels[2].2 - exact).abs() < 1e-13);
    }

    #[test]
    fn self_check_singular_against_substitution() {
        // beta = -0.5 at the origin; oracle via rho = t^(1/(1+beta)) = t^2.
        let g = |rho: f64| (1.0 + rho).recip();
        let oracle = gauss_legendre(40).integrate(0.0, 1.0, |t| 2.0 * 2.0 * g(t * t));
        let mut spec = QuadratureSpec::for_dim(1);
        spec.panels = 4;
        spec.nodes_per_panel = 4;
        let ig = RadialIntegrand::new(1, -0.5, 0.0, move |rho, _| rho.powf(-0.5) * g(rho));
        let rep = self_check(&spec, &ig, 1.0).unwrap();
        let errs: Vec<f64> = rep.levels.iter().map(|l| (l.2 - oracle).abs()).collect();
        assert!(errs[1] < errs[0] && errs[2] <= errs[1].max(1e-14), "{errs:?}");
        assert!(errs[2] < 1e-10, "{errs:?}");
    }

    #[test]
    fn truncation_radius_examples() {
        let compact = TailEnvelope::compact(1.0);
        assert_eq!(truncation_radius(&compact, 1, 2.0, 1e-8).unwrap(), 1.0);

        // Bounded field, kernel |y|^-2 in 1D: bound 2 T^-1 / 1 = 1e-8 at T = 2e8.
        let bounded = TailEnvelope::new(1.0, 0.0, 1.0);
        let t = truncation_radius(&bounded, 1, 2.0, 1e-8).unwrap();
        assert!((t - 2e8).abs() < 1e-3, "{t}");
        assert!((tail_bound(&bounded, 1, 2.0, t) - 1e-8).abs() < 1e-20);

        let gauss = TailEnvelope::new(5f64.powi(4) * (-12.5f64).exp(), 4.0, 5.0);
        let t = truncation_radius(&gauss, 1, 2.0, 1e-8).unwrap();
        assert!(t.is_finite() && t < 1e3, "{t}");

        assert!(truncation_radius(&bounded, 3, 2.0, 1e-8).is_err());
    }

    #[test]
    fn sphere_rules_integrate_moments() {
        for n in 1..=3 {
            let rule = SphereRule::full(n, 16).unwrap();
            assert!((rule.total_weight() - sphere_area(n)).abs() < 1e-12);
            let second: f64 = rule.dirs.iter().zip(&rule.weights).map(|(d, w)| w * d[0] * d[0]).sum();
            assert!((second - sphere_area(n) / n as f64).abs() < 1e-12, "n={n}: {second}");
            let half = SphereRule::half(n, 16).unwrap();
            assert!((half.total_weight() - sphere_area(n)).abs() < 1e-12);
            assert_eq!(half.len() * 2, rule.len());
        }
    }

    #[test]
    fn gauss_kronrod_oracle() {
        let (v, _) = adaptive_gauss_kronrod(|x| x.sqrt(), 0.0, 1.0, 1e-13, 1e-13).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }
}
