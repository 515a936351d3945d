//! Property tests for the structural invariants: angle periodicity of the
//! perturbation, exactness of the polynomial frequency map, separatrix
//! invariants across random Morse potentials, and phase-solver contracts.

use meldrift::homoclinic::{compute_separatrix, default_t_span};
use meldrift::model::{
    FourierSeries, Mode, Monomial, PendulumSpec, PerturbationSpec, RotorSpec, SystemSpec,
};
use meldrift::repair::solve_phase;
use proptest::prelude::*;

fn mode_strategy() -> impl Strategy<Value = Mode> {
    (
        -3i64..=3,
        -3i64..=3,
        -3i64..=3,
        -2.0f64..2.0,
        0.0f64..std::f64::consts::TAU,
    )
        .prop_map(|(k, l, m, amplitude, phase)| Mode {
            k: vec![k],
            l: vec![l],
            m,
            amplitude,
            phase,
        })
}

fn single_pendulum_system(modes: Vec<Mode>) -> SystemSpec {
    SystemSpec::new(
        RotorSpec::quadratic(1),
        vec![
            PendulumSpec::new(FourierSeries::new(vec![(1, 1.0, 0.0), (0, -1.0, 0.0)]), 1.0)
                .unwrap(),
        ],
        PerturbationSpec { modes },
        0.0,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn h1_periodic_in_all_angles(
        modes in proptest::collection::vec(mode_strategy(), 1..5),
        q in -10.0f64..10.0,
        phi in -10.0f64..10.0,
        t in -10.0f64..10.0,
    ) {
        let sys = single_pendulum_system(modes);
        let tau = std::f64::consts::TAU;
        let base = sys.eval_h1(&[q], &[phi], t).unwrap();
        prop_assert!((sys.eval_h1(&[q + tau], &[phi], t).unwrap() - base).abs() < 1e-12);
        prop_assert!((sys.eval_h1(&[q], &[phi + tau], t).unwrap() - base).abs() < 1e-12);
        prop_assert!((sys.eval_h1(&[q], &[phi], t + tau).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn rotor_frequency_matches_finite_differences(
        coeffs in proptest::collection::vec((0u32..=4, 0u32..=2, -2.0f64..2.0), 1..5),
        i1 in -1.5f64..1.5,
        i2 in -1.5f64..1.5,
    ) {
        let monomials: Vec<Monomial> = coeffs
            .into_iter()
            .filter(|(p1, p2, _)| p1 + p2 <= 4)
            .map(|(p1, p2, c)| Monomial { powers: vec![p1, p2], coeff: c })
            .collect();
        prop_assume!(!monomials.is_empty());
        let rotor = RotorSpec::new(2, monomials).unwrap();
        let i = [i1, i2];
        let w = rotor.omega(&i);
        let h = 1e-6;
        for j in 0..2 {
            let mut ip = i;
            let mut im = i;
            ip[j] += h;
            im[j] -= h;
            let fd = (rotor.eval(&ip) - rotor.eval(&im)) / (2.0 * h);
            prop_assert!((w[j] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{} vs {}", w[j], fd);
        }
    }

    #[test]
    fn phase_solver_contract(
        r in -1.0f64..1.0,
        s0 in -6.0f64..6.0,
        tau in -6.0f64..6.0,
        alpha in -6.0f64..6.0,
    ) {
        let b = solve_phase(r, s0, tau, alpha);
        prop_assert!((0.0..std::f64::consts::TAU).contains(&b));
        let arg: f64 = s0 - tau + b + alpha;
        prop_assert!((arg.sin() - r).abs() < 1e-12);
        prop_assert!(arg.cos() >= -1e-12);
    }

    #[test]
    fn float_format_roundtrips(x in proptest::num::f64::NORMAL) {
        let s = meldrift::report::fmt_g17(x);
        let back: f64 = s.parse().unwrap();
        prop_assert_eq!(back, x);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Random cosine Morse potentials: the separatrix keeps the saddle
    /// energy, decays at the characteristic rate, and its tail models join
    /// the data continuously.
    #[test]
    fn separatrix_invariants_random_potentials(
        c1 in 0.9f64..2.0,
        c2 in -0.08f64..0.08,
        c3 in -0.04f64..0.04,
    ) {
        let v = FourierSeries::new(vec![
            (1, c1, 0.0),
            (2, c2, 0.0),
            (3, c3, 0.0),
            (0, -(c1 + c2 + c3), 0.0),
        ]);
        let pen = match PendulumSpec::new(v, 1.0) {
            Ok(p) => p,
            Err(_) => return Ok(()), // rejected draws (maximum not unique)
        };
        let lambda = pen.lambda();
        let orbit = compute_separatrix(&pen, default_t_span(lambda), 1e-10).unwrap();
        prop_assert!(orbit.max_energy_residual() < 1e-10);
        let t2 = orbit.t_forward();
        let slope = orbit.decay_slope(t2 / 2.0, t2);
        prop_assert!(
            (slope + lambda).abs() < 0.02 * lambda,
            "decay slope {slope} vs lambda {lambda}"
        );
        for edge in [orbit.t_forward(), -orbit.t_backward()] {
            let (ql, pl) = orbit.value(edge - 1e-9);
            let (qr, pr) = orbit.value(edge + 1e-9);
            prop_assert!((ql - qr).abs() < 1e-8 && (pl - pr).abs() < 1e-8);
        }
    }
}
