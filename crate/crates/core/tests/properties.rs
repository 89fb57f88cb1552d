use nonlocal_acf::fields::{
    bump_centered, constant_field, gaussian_centered, gaussian_field, scaled_field, shifted_field, x_bump_field,
};
use nonlocal_acf::geometry::{norm, scale, Point, ORIGIN};
use nonlocal_acf::operators::{energy_density_g, frac_laplacian, s_mean};
use nonlocal_acf::quadrature::{integrate_interval, EndBehavior, Scales};
use nonlocal_acf::{make_params, parse_field, QuadratureSpec, ScalarField};
use proptest::prelude::*;

fn pt(x: f64) -> Point {
    [x, 0.0, 0.0]
}

fn rel(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s > 0.0 {
        (a - b).abs() / s
    } else {
        0.0
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn laplacian_commutes_with_translation(s in 0.15f64..0.9, x in -2.0f64..2.0, c in -1.5f64..1.5) {
        let p = make_params(1, s).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let u = gaussian_field(1, 1.0).unwrap();
        let shifted = shifted_field(&u, pt(c));
        let a = frac_laplacian(&u, &pt(x), &p, &spec).unwrap();
        let b = frac_laplacian(&shifted, &pt(x + c), &p, &spec).unwrap();
        prop_assert!((a.value - b.value).abs() <= 10.0 * (a.error + b.error) + 1e-12, "{a:?} {b:?}");
    }

    #[test]
    fn laplacian_scales_with_order(s in 0.15f64..0.9, x in -1.2f64..1.2, lambda in 0.4f64..3.0) {
        // u_lambda = lambda^{-s} u(lambda .) has (-Delta)^s u_lambda(x) = lambda^s (-Delta)^s u(lambda x).
        let p = make_params(1, s).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let u = bump_centered(1, 1.0, pt(0.1)).unwrap();
        let ul = scaled_field(&u, lambda, s).unwrap();
        let lhs = frac_laplacian(&ul, &pt(x), &p, &spec).unwrap();
        let rhs = frac_laplacian(&u, &pt(lambda * x), &p, &spec).unwrap();
        let k = lambda.powf(s);
        prop_assert!(
            (lhs.value - k * rhs.value).abs() <= 10.0 * (lhs.error + k * rhs.error) + 1e-10,
            "{lhs:?} vs {k} * {rhs:?}"
        );
    }

    #[test]
    fn energy_density_is_nonnegative(s in 0.1f64..0.95, x in -2.5f64..2.5, which in 0usize..3) {
        let p = make_params(1, s).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let u = match which {
            0 => gaussian_field(1, 0.8).unwrap(),
            1 => bump_centered(1, 1.0, pt(0.3)).unwrap(),
            _ => x_bump_field(1, 1.0).unwrap(),
        };
        let g = energy_density_g(&u, &pt(x), &p, &spec).unwrap();
        prop_assert!(g.value >= -g.error, "{g:?}");
    }

    #[test]
    fn energy_density_is_quadratic(s in 0.2f64..0.9, x in -1.0f64..1.0, c in -3.0f64..3.0) {
        let p = make_params(1, s).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let id = format!("gaussian:w=1,amp={c}");
        let u = parse_field(&id, &p, &spec).unwrap();
        let base = gaussian_field(1, 1.0).unwrap();
        let a = energy_density_g(&u, &pt(x), &p, &spec).unwrap().value;
        let b = energy_density_g(&base, &pt(x), &p, &spec).unwrap().value;
        prop_assert!(rel(a, c * c * b) < 1e-12, "{a} vs {}", c * c * b);
    }

    #[test]
    fn s_mean_kernel_has_unit_mass(s in 0.1f64..0.9, r in 0.2f64..3.0, x in -1.0f64..1.0) {
        let p = make_params(1, s).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let one = constant_field(1, 1.0);
        let m = s_mean(&one, &pt(x), r, &p, &spec).unwrap();
        prop_assert!((m.value - 1.0).abs() < 1e-8, "{m:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn graded_rule_integrates_endpoint_powers(beta in -0.95f64..2.0, b in 0.1f64..5.0) {
        let spec = QuadratureSpec::for_dim(1);
        let v = integrate_interval(
            0.0,
            b,
            EndBehavior::algebraic(beta, 1).unwrap(),
            EndBehavior::Regular,
            &Scales::new(b),
            &spec.full(),
            &mut |t: f64| Ok(t.powf(beta)),
        )
        .unwrap();
        let exact = b.powf(beta + 1.0) / (beta + 1.0);
        prop_assert!(rel(v, exact) < 1e-9, "{v} vs {exact}");
    }

    #[test]
    fn declared_tail_envelopes_hold(
        which in 0usize..4,
        r in 1.0f64..60.0,
        angle in 0.0f64..std::f64::consts::TAU,
        n in 1usize..=2,
    ) {
        let p = make_params(n, 0.4).unwrap();
        let spec = QuadratureSpec::for_dim(n);
        let u: ScalarField = match which {
            0 => gaussian_centered(n, 0.7, scale(&[1.0, 0.0, 0.0], 0.4)).unwrap(),
            1 => bump_centered(n, 0.9, [0.2, 0.1, 0.0]).unwrap(),
            2 => parse_field("phi_s", &p, &spec).unwrap(),
            _ => parse_field("bump:r=1+gaussian:w=0.5,amp=-0.3", &p, &spec).unwrap(),
        };
        let tail = u.meta().tail;
        let dir = if n == 1 { [angle.cos().signum(), 0.0, 0.0] } else { [angle.cos(), angle.sin(), 0.0] };
        let y = scale(&dir, tail.r0 * r);
        let bound = tail.bound(norm(&y));
        let v = u.eval(&y).unwrap();
        prop_assert!(v.abs() <= bound * (1.0 + 1e-12) + 1e-300, "{} at {y:?}: |{v}| > {bound}", u.id());
    }

    #[test]
    fn parse_field_is_deterministic_and_origin_free(w in 0.2f64..3.0, c in -2.0f64..2.0) {
        let p = make_params(1, 0.5).unwrap();
        let spec = QuadratureSpec::for_dim(1);
        let id = format!("gaussian:w={w},c={c}");
        let u = parse_field(&id, &p, &spec).unwrap();
        let v = gaussian_centered(1, w, pt(c)).unwrap();
        prop_assert_eq!(u.eval(&ORIGIN).unwrap(), v.eval(&ORIGIN).unwrap());
        prop_assert_eq!(u.eval(&pt(c)).unwrap(), 1.0);
    }
}
