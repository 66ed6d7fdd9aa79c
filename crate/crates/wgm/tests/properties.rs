use std::f64::consts::TAU;
use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use wgm::billiards::{billiard_3d, Ray3D};
use wgm::geometry::{build_curve, triangle_profile, MeridianCurve};
use wgm::modes::{smooth_step, SGrid};
use wgm::semiclassics::ScaleParams;
use wgm::specfun::{airy, parabolic_cylinder_d};
use wgm::verify::{fit_order, OperatorId, PeriodicPentadiagonal};

fn triangle() -> Arc<MeridianCurve> {
    static C: OnceLock<Arc<MeridianCurve>> = OnceLock::new();
    C.get_or_init(|| Arc::new(build_curve(triangle_profile(0.4, TAU).unwrap(), 3.0).unwrap())).clone()
}

proptest! {
    #[test]
    fn smooth_step_is_a_monotone_partition(x in -0.5f64..1.5, dx in 0.0f64..0.5) {
        let (a, b) = (smooth_step(x), smooth_step(x + dx));
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b >= a);
        prop_assert!((smooth_step(x) + smooth_step(1.0 - x) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn interpolation_is_exact_for_quintics(c in prop::array::uniform6(-2.0f64..2.0), s in 0.5f64..2.5) {
        let g = SGrid { start: 0.0, ds: 0.05, n: 61, period: None };
        let p = |x: f64| c.iter().rev().fold(0.0, |acc, ci| acc * x + ci);
        let v: Vec<f64> = g.nodes().iter().map(|&x| p(x)).collect();
        prop_assert!((g.interpolate(&v, s) - p(s)).abs() < 1e-10);
    }

    #[test]
    fn scale_round_trip(h in 1e-3f64..0.2, n in 1u32..100_000) {
        let a = ScaleParams::from_h(h, n).unwrap();
        let b = ScaleParams::from_epsilon(a.epsilon, n).unwrap();
        prop_assert!((a.epsilon - h.powf(1.5)).abs() <= 1e-15 * a.epsilon);
        prop_assert!((b.h - h).abs() <= 1e-14 * h);
        prop_assert!((a.a_n - n as f64 * a.epsilon).abs() <= 1e-15 * a.a_n);
    }

    #[test]
    fn fit_recovers_power_laws(order in 0.5f64..4.0, c in 1e-6f64..1e3) {
        let pairs: Vec<(f64, f64)> = [0.04f64, 0.03, 0.02, 0.015].iter().map(|&h| (h, c * h.powf(order))).collect();
        let f = fit_order(OperatorId::H2d, &pairs).unwrap();
        prop_assert!((f.fitted_order - order).abs() < 1e-10);
        prop_assert!(f.r_squared > 1.0 - 1e-10);
    }

    #[test]
    fn airy_sign_and_envelope(x in -10.0f64..5.0) {
        let v = airy(x);
        prop_assert!(v.ai.is_finite() && v.ai_prime.is_finite());
        if x > 0.0 {
            prop_assert!(v.ai > 0.0 && v.ai_prime < 0.0);
        } else {
            let env = (-x).max(1e-3).powf(-0.25) / std::f64::consts::PI.sqrt();
            prop_assert!(v.ai.abs() <= env * 1.1);
        }
    }

    #[test]
    fn parabolic_recurrence(m in 1i64..10, eta in -8.0f64..8.0) {
        let d = |k| parabolic_cylinder_d(k, eta).unwrap();
        let lhs = d(m + 1);
        let rhs = eta * d(m) - m as f64 * d(m - 1);
        prop_assert!((lhs - rhs).abs() <= 1e-11 * (1.0 + lhs.abs().max(d(m).abs())));
    }

    #[test]
    fn periodic_solver_inverts(diag in prop::collection::vec(3.0f64..5.0, 16..48), sigma in -0.5f64..0.5) {
        let p = PeriodicPentadiagonal { diag, off1: -16.0 / 12.0, off2: 1.0 / 12.0 };
        let b: Vec<f64> = (0..p.n()).map(|i| (i as f64 * 0.37).cos()).collect();
        let x = p.shifted_solver(sigma).unwrap().solve(&b);
        let ax = p.apply(&x);
        for i in 0..p.n() {
            prop_assert!((ax[i] - sigma * x[i] - b[i]).abs() < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chart_projection_round_trip(r in 0.0f64..0.25, s in 0.0f64..TAU) {
        let curve = triangle();
        let p = curve.eval_chart(r, s);
        let (r2, s2) = curve.project(p.x, p.z).unwrap();
        let ds = (s2 - s).rem_euclid(TAU).min((s - s2).rem_euclid(TAU));
        prop_assert!((r2 - r).abs() < 1e-9 && ds < 1e-7, "({r2}, {s2}) vs ({r}, {s})");
    }

    #[test]
    fn billiard_conserves_speed_and_lz(
        r in 0.05f64..0.5,
        s in 0.0f64..TAU,
        theta in 0.1f64..3.0,
        phi in 0.0f64..TAU,
    ) {
        let curve = triangle();
        let c = curve.eval_chart(r, s);
        let d = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
        let ray = Ray3D { origin: [0.0, c.x, c.z], direction: d, segment_length: 0.0 };
        let run = billiard_3d(&curve, ray, 60).unwrap();
        let lz0 = ray.angular_momentum_z();
        for seg in &run.rays {
            prop_assert!((seg.speed() - 1.0).abs() <= 1e-14);
            prop_assert!((seg.angular_momentum_z() - lz0).abs() <= 1e-10);
        }
    }
}
