//! Dimensional constants of the fractional Laplacian, the Poisson kernel,
//! the fundamental solution and the Riesz fractional gradient.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::quadrature::{sphere_area, EndBehavior, Estimate, QuadratureSpec, Ray, Scales};

/// The gamma function (Lanczos approximation, reflection for `x < 1/2`).
pub fn gamma(x: f64) -> f64 {
    statrs::function::gamma::gamma(x)
}

/// Volume of the unit ball in R^n.
pub fn unit_ball_volume(n: usize) -> f64 {
    PI.powf(n as f64 / 2.0) / gamma(n as f64 / 2.0 + 1.0)
}

/// Dimension, order and every constant derived from them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FracParams {
    pub n: usize,
    pub s: f64,
    /// Normalization of (-Delta)^s.
    pub c_ns: f64,
    /// Normalization of the Poisson kernel and of the s-mean kernel.
    pub a_ns: f64,
    /// Fundamental solution constant; absent when 2s = n.
    pub kappa_ns: Option<f64>,
    /// Normalization of the fractional gradient.
    pub mu_ns: f64,
    /// Volume of the unit ball.
    pub omega_n: f64,
}

impl FracParams {
    /// Surface area of the unit sphere, `n * omega_n`.
    pub fn sphere_area(&self) -> f64 {
        sphere_area(self.n)
    }

    pub fn dim(&self) -> usize {
        self.n
    }
}

fn check(n: usize, s: f64) -> Result<()> {
    if !(1..=3).contains(&n) {
        return Err(Error::InvalidDimension(n));
    }
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidOrder(s));
    }
    Ok(())
}

/// Builds [`FracParams`]; `c_ns` comes from quadrature of its defining integral.
pub fn make_params(n: usize, s: f64) -> Result<FracParams> {
    check(n, s)?;
    let c_ns = 1.0 / defining_integral(n, s, &QuadratureSpec::for_dim(1))?.value;
    Ok(FracParams {
        n,
        s,
        c_ns,
        a_ns: a_closed_form(n, s),
        kappa_ns: kappa_closed_form(n, s),
        mu_ns: mu_closed_form(n, s),
        omega_n: unit_ball_volume(n),
    })
}

pub fn a_closed_form(n: usize, s: f64) -> f64 {
    let nf = n as f64;
    gamma(nf / 2.0) * PI.powf(-nf / 2.0 - 1.0) * (PI * s).sin()
}

pub fn kappa_closed_form(n: usize, s: f64) -> Option<f64> {
    let nf = n as f64;
    if (2.0 * s - nf).abs() < 1e-14 {
        return None;
    }
    Some(2f64.powf(-2.0 * s) * gamma(nf / 2.0 - s) / gamma(s) * PI.powf(-nf / 2.0))
}

pub fn mu_closed_form(n: usize, s: f64) -> f64 {
    let nf = n as f64;
    2f64.powf(s) * PI.powf(-nf / 2.0) * gamma((nf + s + 1.0) / 2.0) / gamma((1.0 - s) / 2.0)
}

/// Closed-form candidate `s 4^s Gamma(n/2 + s) / (pi^{n/2} Gamma(1 - s))`,
/// used only to cross-check the quadrature value.
pub fn c_closed_form(n: usize, s: f64) -> f64 {
    let nf = n as f64;
    s * 4f64.powf(s) * gamma(nf / 2.0 + s) / (PI.powf(nf / 2.0) * gamma(1.0 - s))
}

/// `int_{R^n} (1 - cos z_1) / |z|^{n+2s} dz`, the reciprocal of `c_ns`.
///
/// Integrating out the transverse coordinates first gives
/// `pi^{(n-1)/2} Gamma(1/2 + s) / Gamma(n/2 + s)` times the one-dimensional
/// integral `int_R (1 - cos t) / |t|^{1+2s} dt`, which is computed by graded
/// quadrature on `[0, 2 pi K]` plus an asymptotic series for the tail.
pub fn defining_integral(n: usize, s: f64, spec: &QuadratureSpec) -> Result<Estimate> {
    check(n, s)?;
    let nf = n as f64;
    let transverse = PI.powf((nf - 1.0) / 2.0) * gamma(0.5 + s) / gamma(nf / 2.0 + s);
    let line = line_integral(s, spec)?;
    Ok(Estimate::new(transverse * line.value, transverse * line.error))
}

fn line_integral(s: f64, spec: &QuadratureSpec) -> Result<Estimate> {
    const PERIODS: f64 = 64.0;
    let t_max = 2.0 * PI * PERIODS;
    let a = 1.0 + 2.0 * s;
    let ray = Ray::new(0.0, t_max, Scales::new(PI / 2.0).with_far_from(f64::INFINITY))
        .start_behavior(EndBehavior::algebraic(1.0 - 2.0 * s, 2)?);
    let body = Estimate::from_levels(spec, 0.0, |res| {
        ray.integrate(res, &mut |t: f64| {
            // 1 - cos t = 2 sin^2(t/2) avoids cancellation near 0.
            let h = (0.5 * t).sin();
            Ok(2.0 * h * h * t.powf(-a))
        })
    })?;
    // int_T^inf t^-a dt and int_T^inf cos(t) t^-a dt at T = 2 pi K (sin T = 0, cos T = 1).
    let power_tail = t_max.powf(1.0 - a) / (a - 1.0);
    let mut cos_tail = 0.0;
    let mut term = a * t_max.powf(-a - 1.0);
    let mut last = term.abs();
    for k in 0..8 {
        cos_tail += term;
        let b = a + 2.0 * k as f64;
        term *= -(b + 1.0) * (b + 2.0) / (t_max * t_max);
        last = term.abs();
    }
    let value = 2.0 * (body.value + power_tail - cos_tail);
    Ok(Estimate::new(value, 2.0 * (body.error + last)))
}

/// `c_ns / (1 - s)`, which tends to `4 / omega_n` as `s -> 1`.
pub fn asymptotic_c(n: usize, s: f64) -> Result<f64> {
    Ok(make_params(n, s)?.c_ns / (1.0 - s))
}

/// `2 a_ns / (1 - s)`, which tends to `4 / (n omega_n)` as `s -> 1`.
pub fn asymptotic_a(n: usize, s: f64) -> Result<f64> {
    check(n, s)?;
    Ok(2.0 * a_closed_form(n, s) / (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn gamma_accuracy() {
        // Known values: Gamma(1/2) = sqrt(pi), Gamma(5) = 24, Gamma(-1/2) = -2 sqrt(pi).
        assert!(rel(gamma(0.5), PI.sqrt()) < 1e-14);
        assert!(rel(gamma(5.0), 24.0) < 1e-14);
        assert!(rel(gamma(-0.5), -2.0 * PI.sqrt()) < 1e-14);
        assert!(rel(gamma(0.25), 3.625_609_908_221_908) < 1e-13);
        assert!(rel(gamma(1.0 / 3.0), 2.678_938_534_707_747_6) < 1e-13);
    }

    #[test]
    fn a_example() {
        let p = make_params(2, 0.5).unwrap();
        assert!(rel(p.a_ns, 1.0 / (PI * PI)) < 1e-14);
        assert!((p.a_ns - 0.101321).abs() < 1e-6);
    }

    #[test]
    fn kappa_example() {
        let p = make_params(1, 0.25).unwrap();
        let k = p.kappa_ns.unwrap();
        assert!(rel(k, (2.0 * PI).sqrt().recip()) < 1e-13);
        assert!((k - 0.398942).abs() < 1e-6);
    }

    #[test]
    fn kappa_absent_when_two_s_equals_n() {
        assert!(make_params(1, 0.5).unwrap().kappa_ns.is_none());
        assert!(make_params(2, 0.5).unwrap().kappa_ns.is_some());
    }

    #[test]
    fn c_for_n1_half() {
        // Two resolutions of the defining integral agree before the value is trusted.
        let spec = QuadratureSpec::for_dim(1);
        let lo = defining_integral(1, 0.5, &spec).unwrap().value;
        let hi = defining_integral(1, 0.5, &spec.refined()).unwrap().value;
        assert!(rel(lo, hi) < 1e-8, "{lo} vs {hi}");
        assert!(rel(1.0 / hi, 1.0 / PI) < 1e-8, "{}", 1.0 / hi);
    }

    #[test]
    fn c_stable_under_refinement_and_matches_closed_form() {
        let spec = QuadratureSpec::for_dim(1);
        for n in 1..=3 {
            for k in 1..=9 {
                let s = k as f64 / 10.0;
                let lo = defining_integral(n, s, &spec).unwrap().value;
                let hi = defining_integral(n, s, &spec.refined()).unwrap().value;
                assert!(rel(lo, hi) < 1e-8, "n={n} s={s}: {lo} vs {hi}");
                let c = 1.0 / lo;
                assert!(rel(c, c_closed_form(n, s)) < 1e-6, "n={n} s={s}");
            }
        }
    }

    #[test]
    fn c_radial_route_n3() {
        // Radial reduction in 3D: angular average of cos(rho theta_1) is sin(rho)/rho.
        let s = 0.3;
        let spec = QuadratureSpec::for_dim(1);
        let t = 2.0 * PI * 200.0;
        let ray = Ray::new(0.0, t, Scales::new(PI / 2.0).with_far_from(f64::INFINITY))
            .start_behavior(EndBehavior::algebraic(1.0 - 2.0 * s, 2).unwrap());
        let body = ray
            .integrate(&spec.full(), &mut |r: f64| {
                let sinc = if r < 1e-4 { 1.0 - r * r / 6.0 } else { r.sin() / r };
                Ok((1.0 - sinc) * r.powf(-1.0 - 2.0 * s))
            })
            .unwrap();
        // Tail: 1/rho part exactly; the sinc part decays like rho^-2-2s and is bounded.
        let tail = t.powf(-2.0 * s) / (2.0 * s);
        let integral = 4.0 * PI * (body + tail);
        let c = 1.0 / integral;
        let p = make_params(3, s).unwrap();
        assert!(rel(c, p.c_ns) < 1e-4, "{c} vs {}", p.c_ns);
    }

    #[test]
    fn asymptotic_c_limits() {
        for n in 1..=2 {
            let target = 4.0 / unit_ball_volume(n);
            let errs: Vec<f64> = [0.9, 0.95, 0.99]
                .iter()
                .map(|&s| (asymptotic_c(n, s).unwrap() - target).abs())
                .collect();
            assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
            assert!(errs[2] < 0.03 * target, "{errs:?}");
        }
        assert!(rel(asymptotic_c(1, 0.5).unwrap(), 2.0 / PI) < 1e-8);
    }

    #[test]
    fn asymptotic_a_limit() {
        // The stated ratio converges to 4 / (n omega_n), not 1 / (n omega_n).
        for n in 1..=3 {
            let area = n as f64 * unit_ball_volume(n);
            let v = asymptotic_a(n, 0.999).unwrap();
            assert!(rel(v, 4.0 / area) < 1e-3, "n={n}: {v}");
        }
        let v = asymptotic_a(2, 0.99).unwrap() / 4.0;
        assert!(rel(v, 1.0 / (2.0 * PI)) < 0.02);
    }

    #[test]
    fn closed_forms_positive_where_defined() {
        for n in 1..=3 {
            for k in 1..=9 {
                let s = k as f64 / 10.0;
                let p = make_params(n, s).unwrap();
                assert!(p.c_ns > 0.0 && p.a_ns > 0.0 && p.mu_ns > 0.0 && p.omega_n > 0.0);
                // kappa is negative when 2s > n (n = 1, s > 1/2).
                if let Some(k) = p.kappa_ns {
                    assert_eq!(k > 0.0, 2.0 * s < n as f64, "n={n} s={s}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(make_params(0, 0.5), Err(Error::InvalidDimension(0))));
        assert!(matches!(make_params(4, 0.5), Err(Error::InvalidDimension(4))));
        assert!(matches!(make_params(1, 1.0), Err(Error::InvalidOrder(_))));
        assert!(matches!(make_params(1, 0.0), Err(Error::InvalidOrder(_))));
        assert!(make_params(1, f64::NAN).is_err());
    }
}
