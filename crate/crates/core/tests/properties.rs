use std::f64::consts::PI;

use proptest::prelude::*;

use tubepinn::excitation::{PeriodicWaveform, RosenbergParams};
use tubepinn::geometry::{pchip_slopes, TubeProfile};
use tubepinn::loss::{boundary_term, coupling_term, data_term, pde_term, periodicity_term, LossWeights, TimeFields};
use tubepinn::physics::{g_at, r_at, LossConstants, PhysicalConstants, RadiationParams};
use tubepinn::resonet::{snake, snake_derivative, FieldDerivatives};

#[test]
fn snake_fixed_points() {
    assert_eq!(snake(0.0), 0.0);
    assert!((snake(PI) - PI).abs() < 1e-15);
    assert!((snake(-PI) + PI).abs() < 1e-15);
}

#[test]
fn default_excitation_keeps_seven_harmonics() {
    let params = RosenbergParams::default();
    assert_eq!(params.f0, 261.6);
    assert_eq!(params.cutoff, 2000.0);
    let w = params.waveform().unwrap();
    assert_eq!(w.harmonic_count(), Some(7));
    let again = w.bandlimit(params.cutoff).unwrap();
    assert_eq!(again.harmonic_count(), Some(7));
}

fn field(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0e3..1.0e3f64, n)
}

fn derivatives(n: usize) -> impl Strategy<Value = FieldDerivatives> {
    (field(n), field(n), field(n), field(n), field(n), field(n)).prop_map(|(p, u, dp_dx, du_dx, dp_dt, du_dt)| {
        FieldDerivatives {
            p,
            u: u.iter().map(|v| v * 1e-6).collect(),
            dp_dx,
            du_dx: du_dx.iter().map(|v| v * 1e-6).collect(),
            dp_dt,
            du_dt: du_dt.iter().map(|v| v * 1e-6).collect(),
        }
    })
}

fn weights() -> impl Strategy<Value = LossWeights> {
    prop::array::uniform9(0.0..10.0f64).prop_map(|w| LossWeights {
        e1: w[0],
        e2: w[1],
        b: w[2],
        c: w[3],
        p0_u: w[4],
        p0_p: w[5],
        p1_u: w[6],
        p1_p: w[7],
        m: w[8],
    })
}

fn time_fields(n: usize) -> impl Strategy<Value = TimeFields> {
    (field(n), field(n), field(n), field(n)).prop_map(|(p, u, dp_dt, du_dt)| TimeFields { p, u, dp_dt, du_dt })
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #[test]
    fn snake_derivative_matches_finite_difference(a in -20.0..20.0f64) {
        let h = 1e-6;
        let fd = (snake(a + h) - snake(a - h)) / (2.0 * h);
        prop_assert!((snake_derivative(a) - fd).abs() < 1e-8);
        prop_assert!((snake_derivative(a) - (1.0 + (2.0 * a).sin())).abs() < 1e-15);
    }

    #[test]
    fn snake_is_monotone_and_near_identity(a in -50.0..50.0f64, b in -50.0..50.0f64) {
        prop_assert!(snake(a) >= a && snake(a) <= a + 1.0);
        if a < b {
            prop_assert!(snake(a) <= snake(b));
        }
    }

    #[test]
    fn pchip_stays_within_neighbouring_knots(
        steps in prop::collection::vec(0.01..1.0f64, 2..8),
        ys in prop::collection::vec(0.001..0.05f64, 9),
        frac in 0.0..1.0f64,
    ) {
        let mut x = 0.0;
        let mut knots = vec![(0.0, ys[0])];
        for (k, h) in steps.iter().enumerate() {
            x += h;
            knots.push((x, ys[k + 1]));
        }
        let profile = TubeProfile::from_knots(knots.clone()).unwrap();
        let at = frac * x;
        let seg = knots.windows(2).position(|w| at <= w[1].0).unwrap();
        let (lo, hi) = (knots[seg].1.min(knots[seg + 1].1), knots[seg].1.max(knots[seg + 1].1));
        let d = profile.diameter_at(at).unwrap();
        prop_assert!(d >= lo - 1e-12 && d <= hi + 1e-12, "d {} outside [{}, {}]", d, lo, hi);
    }

    #[test]
    fn pchip_reproduces_linear_data(
        steps in prop::collection::vec(0.01..1.0f64, 2..8),
        a in 0.001..0.05f64,
        slope in -0.9..0.9f64,
        frac in 0.0..1.0f64,
    ) {
        let mut xs = vec![0.0];
        for h in &steps {
            xs.push(xs.last().unwrap() + h);
        }
        let total = *xs.last().unwrap();
        let slope = slope * a / total;
        let ys: Vec<f64> = xs.iter().map(|x| a + slope * x).collect();
        let d = pchip_slopes(&xs, &ys).unwrap();
        for s in &d {
            prop_assert!((s - slope).abs() <= 1e-9 * a / total);
        }
        let profile = TubeProfile::from_knots(xs.iter().copied().zip(ys.iter().copied()).collect()).unwrap();
        let at = frac * total;
        prop_assert!((profile.diameter_at(at).unwrap() - (a + slope * at)).abs() < 1e-12);
    }

    #[test]
    fn bandlimit_is_idempotent(
        samples in prop::collection::vec(-1.0..1.0f64, 16..200),
        cutoff in 0.0..5000.0f64,
    ) {
        let w = PeriodicWaveform::from_samples(261.6, samples).unwrap();
        let once = w.bandlimit(cutoff).unwrap();
        let twice = once.bandlimit(cutoff).unwrap();
        prop_assert!((once.mean() - w.mean()).abs() < 1e-12);
        for (a, b) in once.samples().iter().zip(twice.samples()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert_eq!(once.harmonic_count(), twice.harmonic_count());
    }

    #[test]
    fn loss_coefficients_follow_radius_laws(r in 1e-4..0.05f64, k in 0.1..10.0f64, gc in 0.0..1e-3f64, rc in 0.0..1.0f64) {
        prop_assert!(rel_close(g_at(k * r, gc).unwrap(), k * g_at(r, gc).unwrap(), 1e-13));
        prop_assert!(rel_close(r_at(k * r, rc).unwrap(), r_at(r, rc).unwrap() / (k * k * k), 1e-13));
        prop_assert!(g_at(r, gc).unwrap() >= 0.0 && r_at(r, rc).unwrap() >= 0.0);
    }

    #[test]
    fn loss_terms_are_nonnegative(
        f in derivatives(12),
        ur in field(12),
        ends in (time_fields(7), time_fields(7)),
        w in weights(),
        gc in 0.0..1e-3f64,
        rc in 0.0..1.0f64,
    ) {
        let consts = PhysicalConstants::default();
        let radius: Vec<f64> = (0..12).map(|i| 0.005 + 0.001 * i as f64).collect();
        let area: Vec<f64> = radius.iter().map(|r| PI * r * r).collect();
        let losses = LossConstants { gc, rc };
        let rad = RadiationParams::for_outlet(area[11], &consts).unwrap();
        let ur: Vec<f64> = ur.iter().map(|v| v * 1e-6).collect();
        prop_assert!(pde_term(&f, &area, &radius, &consts, losses, &w).value >= 0.0);
        prop_assert!(boundary_term(&f.u, area[0], &f.p, w.b).0 >= 0.0);
        prop_assert!(coupling_term(&f.p, &f.u, &ur, &f.du_dt, &rad, w.c).value >= 0.0);
        let (l0, l1, _) = periodicity_term(&ends.0, &ends.1, &w);
        prop_assert!(l0 >= 0.0 && l1 >= 0.0);
        prop_assert!(data_term(&f.p, &f.dp_dx, w.m).0 >= 0.0);
    }

    #[test]
    fn loss_terms_are_linear_in_their_weights(
        f in derivatives(9),
        ends in (time_fields(5), time_fields(5)),
        w in weights(),
        k in 0.0..8.0f64,
    ) {
        let consts = PhysicalConstants::default();
        let radius = vec![0.01; 9];
        let area: Vec<f64> = radius.iter().map(|r| PI * r * r).collect();
        let losses = LossConstants::REFERENCE;
        let scaled = LossWeights {
            e1: k * w.e1,
            e2: k * w.e2,
            p0_u: k * w.p0_u,
            p0_p: k * w.p0_p,
            p1_u: k * w.p1_u,
            p1_p: k * w.p1_p,
            ..w
        };
        let tol = 1e-12;
        let a = pde_term(&f, &area, &radius, &consts, losses, &w).value;
        let b = pde_term(&f, &area, &radius, &consts, losses, &scaled).value;
        prop_assert!((b - k * a).abs() <= tol * (k * a).abs().max(1e-300));

        let (p0, p1, _) = periodicity_term(&ends.0, &ends.1, &w);
        let (q0, q1, _) = periodicity_term(&ends.0, &ends.1, &scaled);
        prop_assert!((q0 - k * p0).abs() <= tol * (k * p0).abs().max(1e-300));
        prop_assert!((q1 - k * p1).abs() <= tol * (k * p1).abs().max(1e-300));

        let rad = RadiationParams::for_outlet(area[8], &consts).unwrap();
        let c1 = coupling_term(&f.p, &f.u, &f.du_dx, &f.du_dt, &rad, w.c).value;
        let c2 = coupling_term(&f.p, &f.u, &f.du_dx, &f.du_dt, &rad, k * w.c).value;
        prop_assert!((c2 - k * c1).abs() <= tol * (k * c1).abs().max(1e-300));
        let d1 = data_term(&f.p, &f.dp_dt, w.m).0;
        let d2 = data_term(&f.p, &f.dp_dt, k * w.m).0;
        prop_assert!((d2 - k * d1).abs() <= tol * (k * d1).abs().max(1e-300));
        let b1 = boundary_term(&f.u, area[0], &f.dp_dt, w.b).0;
        let b2 = boundary_term(&f.u, area[0], &f.dp_dt, k * w.b).0;
        prop_assert!((b2 - k * b1).abs() <= tol * (k * b1).abs().max(1e-300));
    }

    #[test]
    fn total_weight_increase_never_lowers_a_term(f in derivatives(6), w in weights(), extra in 0.0..5.0f64) {
        let consts = PhysicalConstants::default();
        let radius = vec![0.008; 6];
        let area: Vec<f64> = radius.iter().map(|r| PI * r * r).collect();
        let more = LossWeights { e1: w.e1 + extra, ..w };
        let a = pde_term(&f, &area, &radius, &consts, LossConstants::REFERENCE, &w).value;
        let b = pde_term(&f, &area, &radius, &consts, LossConstants::REFERENCE, &more).value;
        prop_assert!(b >= a);
    }
}
