use proptest::prelude::*;
use switching_mkv::ctmc::{
    ergodic_profile, invariant_measure, sample_path, transition_matrix, tv_distance, CtmcError,
    QMatrix,
};
use switching_mkv::noise::derive_stream;

fn two_state(a: f64, b: f64) -> QMatrix {
    QMatrix::build(&[vec![0.0, a], vec![b, 0.0]]).unwrap()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn off_diagonal_and_full_forms_agree() {
    let full = QMatrix::build(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap();
    assert_eq!(full, two_state(1.0, 2.0));
    assert_eq!(full.exit_rate(1), 2.0);
}

#[test]
fn malformed_generators_are_rejected() {
    assert!(matches!(
        QMatrix::build(&[vec![-1.0, 1.0], vec![2.0, -1.0]]),
        Err(CtmcError::NonConservative { row: 1, .. })
    ));
    assert!(matches!(
        QMatrix::build(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]),
        Err(CtmcError::Reducible { .. })
    ));
    assert!(matches!(
        QMatrix::build(&[vec![0.0, 1.0], vec![1.0]]),
        Err(CtmcError::BadShape)
    ));
}

#[test]
fn two_state_semigroup_closed_form() {
    for (a, b) in [(1.0, 2.0), (0.3, 5.0), (10.0, 10.0)] {
        let q = two_state(a, b);
        let (p0, p1) = (b / (a + b), a / (a + b));
        for t in [0.0, 0.1, 1.0, 10.0] {
            let e = (-(a + b) * t).exp();
            let p = transition_matrix(&q, t).unwrap();
            assert!((p[(0, 0)] - (p0 + p1 * e)).abs() < 1e-10);
            assert!((p[(0, 1)] - p1 * (1.0 - e)).abs() < 1e-10);
            assert!((p[(1, 0)] - p0 * (1.0 - e)).abs() < 1e-10);
            assert!((p[(1, 1)] - (p1 + p0 * e)).abs() < 1e-10);
        }
        let pi = invariant_measure(&q).unwrap();
        assert!((pi.weights()[0] - p0).abs() < 1e-12);
    }
}

#[test]
fn three_state_invariant_solves_the_balance_equations() {
    let q = QMatrix::build(&[
        vec![0.0, 1.0, 0.5],
        vec![0.2, 0.0, 3.0],
        vec![4.0, 0.1, 0.0],
    ])
    .unwrap();
    let pi = invariant_measure(&q).unwrap();
    let w = pi.weights();
    for j in 0..3 {
        let r: f64 = (0..3).map(|i| w[i] * q.rate(i, j)).sum();
        assert!(r.abs() < 1e-12);
    }
    // The semigroup converges to rows equal to pi.
    let p = transition_matrix(&q, 50.0).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert!((p[(i, j)] - w[j]).abs() < 1e-10);
        }
    }
}

#[test]
fn tv_decay_matches_closed_form() {
    let (a, b) = (1.0, 2.0);
    let grid: Vec<f64> = (0..=40).map(|k| 0.25 * k as f64).collect();
    let profile = ergodic_profile(&two_state(a, b), &grid).unwrap();
    for (k, &t) in grid.iter().enumerate() {
        let e = (-(a + b) * t).exp();
        assert!((profile.tv[0][k] - 2.0 * a / (a + b) * e).abs() < 1e-8);
        assert!((profile.tv[1][k] - 2.0 * b / (a + b) * e).abs() < 1e-8);
    }
    assert!((profile.decay_rate - (a + b)).abs() < 1e-3, "{}", profile.decay_rate);
}

#[test]
fn tv_distance_is_l1() {
    assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
    assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
}

#[test]
fn single_state_chain_never_jumps() {
    let q = QMatrix::build(&[vec![0.0]]).unwrap();
    let mut s = derive_stream(1, "ctmc-test", 0);
    let path = sample_path(&q, 0, 10.0, 1.0, &mut s).unwrap();
    assert_eq!(path.jump_count(), 0);
    assert_eq!(invariant_measure(&q).unwrap().weights(), &[1.0]);
}

#[test]
fn gillespie_marginals_match_the_semigroup() {
    let q = two_state(1.0, 2.0);
    let t = 0.7;
    let reps = 20000;
    let hits: Vec<f64> = (0..reps)
        .map(|r| {
            let mut s = derive_stream(5, "ctmc-marginal", r);
            let path = sample_path(&q, 0, 1.0, 1.0, &mut s).unwrap();
            (path.state_at(t) == 0) as u8 as f64
        })
        .collect();
    let (m, se) = mean_se(&hits);
    let exact = 2.0 / 3.0 + 1.0 / 3.0 * (-3.0 * t).exp();
    assert!((m - exact).abs() < 3.0 * se, "{m} vs {exact}");
}

#[test]
fn occupation_fraction_matches_integrated_semigroup() {
    let q = two_state(1.0, 2.0);
    let horizon = 3.0;
    let fracs: Vec<f64> = (0..5000)
        .map(|r| {
            let mut s = derive_stream(6, "ctmc-occupation", r);
            let path = sample_path(&q, 1, horizon, 1.0, &mut s).unwrap();
            let occ = path.occupation(2);
            assert!((occ[0] + occ[1] - horizon).abs() < 1e-12);
            occ[1] / horizon
        })
        .collect();
    let (m, se) = mean_se(&fracs);
    // Starting in state 1: ∫_0^T P_s(1,1) ds / T.
    let exact = 1.0 / 3.0 + 2.0 / 3.0 * (1.0 - (-3.0 * horizon).exp()) / (3.0 * horizon);
    assert!((m - exact).abs() < 3.0 * se, "{m} vs {exact}");
}

#[test]
fn jump_count_rate_in_the_fast_regime() {
    // Symmetric chain at rate 1: Poisson(T / eps) jumps.
    let q = two_state(1.0, 1.0);
    let eps = 0.01;
    let counts: Vec<f64> = (0..400)
        .map(|r| {
            let mut s = derive_stream(7, "ctmc-fast", r);
            sample_path(&q, 0, 1.0, eps, &mut s).unwrap().jump_count() as f64
        })
        .collect();
    let (m, se) = mean_se(&counts);
    assert!((m - 100.0).abs() < 3.0 * se, "{m}");
}

#[test]
fn time_scale_rescales_the_same_path() {
    let q = two_state(1.0, 2.0);
    let slow = sample_path(&q, 0, 5.0, 1.0, &mut derive_stream(8, "omega0", 0)).unwrap();
    let fast = sample_path(&q, 0, 0.5, 0.1, &mut derive_stream(8, "omega0", 0)).unwrap();
    assert_eq!(slow.jump_count(), fast.jump_count());
    assert_eq!(slow.states, fast.states);
    for (a, b) in slow.jump_times.iter().zip(&fast.jump_times) {
        assert!((a * 0.1 - b).abs() < 1e-12);
    }
}

#[test]
fn paths_are_right_continuous() {
    let q = two_state(1.0, 2.0);
    let path = sample_path(&q, 0, 5.0, 1.0, &mut derive_stream(9, "omega0", 0)).unwrap();
    let tau = path.jump_times[0];
    assert_eq!(path.state_at(tau), path.states[0]);
    assert_eq!(path.state_before(tau), 0);
}

fn generator() -> impl Strategy<Value = QMatrix> {
    (2usize..5).prop_flat_map(|n| {
        prop::collection::vec(0.1f64..3.0, n * n).prop_map(move |r| {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| if i == j { 0.0 } else { r[i * n + j] }).collect())
                .collect();
            QMatrix::build(&rows).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn semigroup_property(q in generator(), s in 0.0f64..2.0, t in 0.0f64..2.0) {
        let ps = transition_matrix(&q, s).unwrap();
        let pt = transition_matrix(&q, t).unwrap();
        let pst = transition_matrix(&q, s + t).unwrap();
        let prod = &ps * &pt;
        for i in 0..q.size() {
            let row: f64 = (0..q.size()).map(|j| pst[(i, j)]).sum();
            prop_assert!((row - 1.0).abs() < 1e-10);
            for j in 0..q.size() {
                prop_assert!(pst[(i, j)] >= 0.0);
                prop_assert!((prod[(i, j)] - pst[(i, j)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn invariant_is_stationary(q in generator(), t in 0.0f64..5.0) {
        let pi = invariant_measure(&q).unwrap();
        let p = transition_matrix(&q, t).unwrap();
        for j in 0..q.size() {
            let v: f64 = (0..q.size()).map(|i| pi.weights()[i] * p[(i, j)]).sum();
            prop_assert!((v - pi.weights()[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn tv_profile_is_nonincreasing(q in generator()) {
        let grid: Vec<f64> = (0..30).map(|k| 0.2 * k as f64).collect();
        let profile = ergodic_profile(&q, &grid).unwrap();
        for row in &profile.tv {
            for w in row.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-10);
            }
        }
    }
}
