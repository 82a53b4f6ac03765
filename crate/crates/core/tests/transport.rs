use proptest::prelude::*;
use switching_mkv::measures::{
    coupling_upper_bound, optimal_matching, w1_assignment, w2_1d, w2_assignment,
    w2_squared_1d_quantile, EmpiricalMeasure, MeasureError,
};
use switching_mkv::noise::derive_stream;

fn cloud(d: usize, points: Vec<f64>) -> EmpiricalMeasure {
    EmpiricalMeasure::new(d, points).unwrap()
}

// Minimum over all n! matchings of the mean cost.
fn brute_force(a: &[f64], b: &[f64], d: usize, squared: bool) -> f64 {
    fn go(k: usize, p: &mut Vec<usize>, cost: &dyn Fn(&[usize]) -> f64, best: &mut f64) {
        if k == p.len() {
            *best = best.min(cost(p));
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            go(k + 1, p, cost, best);
            p.swap(k, i);
        }
    }
    let n = a.len() / d;
    let cost = |p: &[usize]| -> f64 {
        (0..n)
            .map(|i| {
                let sq: f64 = (0..d).map(|k| (a[i * d + k] - b[p[i] * d + k]).powi(2)).sum();
                if squared {
                    sq
                } else {
                    sq.sqrt()
                }
            })
            .sum::<f64>()
            / n as f64
    };
    let mut best = f64::INFINITY;
    go(0, &mut (0..n).collect(), &cost, &mut best);
    best
}

#[test]
fn assignment_matches_brute_force() {
    let mut s = derive_stream(1, "transport-test", 0);
    for i in 0..200 {
        let n = 1 + i % 7;
        let d = [1, 2, 3][i % 3];
        let a: Vec<f64> = (0..n * d).map(|_| 6.0 * s.uniform() - 3.0).collect();
        let b: Vec<f64> = (0..n * d).map(|_| 6.0 * s.uniform() - 3.0).collect();
        let (ma, mb) = (cloud(d, a.clone()), cloud(d, b.clone()));
        let w2 = w2_assignment(&ma, &mb).unwrap();
        let w1 = w1_assignment(&ma, &mb).unwrap();
        assert!((w2 - brute_force(&a, &b, d, true).sqrt()).abs() < 1e-10, "instance {i}");
        assert!((w1 - brute_force(&a, &b, d, false)).abs() < 1e-10, "instance {i}");
        if d == 1 {
            assert!((w2_1d(&ma, &mb).unwrap() - w2).abs() < 1e-10);
        }
    }
}

#[test]
fn matching_is_a_permutation() {
    let mut s = derive_stream(2, "transport-test", 0);
    let a = cloud(2, (0..40).map(|_| s.standard_normal()).collect());
    let b = cloud(2, (0..40).map(|_| s.standard_normal()).collect());
    let m = optimal_matching(&a, &b, true, 100).unwrap();
    let mut seen = m.row_to_col.clone();
    seen.sort();
    assert_eq!(seen, (0..20).collect::<Vec<_>>());
}

#[test]
fn size_and_dimension_mismatches() {
    let a = cloud(1, vec![0.0, 1.0]);
    let b = cloud(1, vec![0.0]);
    let c = cloud(2, vec![0.0, 1.0]);
    assert!(matches!(w2_assignment(&a, &b), Err(MeasureError::SizeMismatch { .. })));
    assert!(matches!(w2_1d(&c, &c), Err(MeasureError::DimensionMismatch { .. })));
    assert!(matches!(
        optimal_matching(&a, &a, true, 1),
        Err(MeasureError::TooLarge { .. })
    ));
}

#[test]
fn two_gaussian_clouds_differ_by_their_shift() {
    // W_2 between a cloud and its translate is exactly the shift length.
    let mut s = derive_stream(3, "transport-test", 0);
    let a = cloud(3, (0..60).map(|_| s.standard_normal()).collect());
    let b = a.translated(&[0.3, -0.4, 1.2]);
    let w = w2_assignment(&a, &b).unwrap();
    assert!((w - 1.3).abs() < 1e-12, "{w}");
}

#[test]
fn quantile_distance_handles_unequal_sizes() {
    // Duplicating every point of a cloud leaves its law unchanged.
    let a = cloud(1, vec![0.3, -1.0, 2.5, 0.0]);
    let doubled = cloud(1, [a.points(), a.points()].concat());
    assert!(w2_squared_1d_quantile(&a, &doubled).unwrap() < 1e-15);
    // Two atoms against one: mass 1/2 moves 1 each way.
    let two = cloud(1, vec![-1.0, 1.0]);
    let one = cloud(1, vec![0.0]);
    assert!((w2_squared_1d_quantile(&two, &one).unwrap() - 1.0).abs() < 1e-15);
    // Uniform on {0,1,2} against uniform on {0,3}: quantile pieces of mass
    // 1/3, 1/6, 1/6, 1/3 give 0 + 1/6 + 1/6 * 4 + 1/3 * 1.
    let x = cloud(1, vec![2.0, 0.0, 1.0]);
    let y = cloud(1, vec![3.0, 0.0]);
    let expected = 1.0 / 6.0 + 4.0 / 6.0 + 1.0 / 3.0;
    assert!((w2_squared_1d_quantile(&x, &y).unwrap() - expected).abs() < 1e-14);
}

fn clouds(d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..8).prop_flat_map(move |n| {
        let v = || prop::collection::vec(-5.0f64..5.0, n * d);
        (v(), v(), v())
    })
}

proptest! {
    #[test]
    fn w2_is_a_metric((a, b, c) in clouds(2)) {
        let (a, b, c) = (cloud(2, a), cloud(2, b), cloud(2, c));
        let ab = w2_assignment(&a, &b).unwrap();
        let ba = w2_assignment(&b, &a).unwrap();
        let bc = w2_assignment(&b, &c).unwrap();
        let ac = w2_assignment(&a, &c).unwrap();
        prop_assert!(w2_assignment(&a, &a).unwrap() < 1e-12);
        prop_assert!((ab - ba).abs() < 1e-10);
        prop_assert!(ac <= ab + bc + 1e-10);
    }

    #[test]
    fn w1_is_a_metric((a, b, c) in clouds(3)) {
        let (a, b, c) = (cloud(3, a), cloud(3, b), cloud(3, c));
        let ab = w1_assignment(&a, &b).unwrap();
        let bc = w1_assignment(&b, &c).unwrap();
        let ac = w1_assignment(&a, &c).unwrap();
        prop_assert!((ab - w1_assignment(&b, &a).unwrap()).abs() < 1e-10);
        prop_assert!(ac <= ab + bc + 1e-10);
        // W_1 <= W_2 by Jensen.
        prop_assert!(ab <= w2_assignment(&a, &b).unwrap() + 1e-10);
    }

    #[test]
    fn index_coupling_bounds_w2((a, b, _) in clouds(2)) {
        let (a, b) = (cloud(2, a), cloud(2, b));
        let w = w2_assignment(&a, &b).unwrap();
        prop_assert!(w * w <= coupling_upper_bound(&a, &b).unwrap() + 1e-10);
    }

    #[test]
    fn sorted_matches_assignment_in_one_dimension((a, b, _) in clouds(1)) {
        let (a, b) = (cloud(1, a), cloud(1, b));
        let w = w2_1d(&a, &b).unwrap();
        prop_assert!((w - w2_assignment(&a, &b).unwrap()).abs() < 1e-10);
        prop_assert!((w * w - w2_squared_1d_quantile(&a, &b).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn permuting_points_changes_nothing((a, b, _) in clouds(2), seed in 0u64..1000) {
        let n = a.len() / 2;
        let mut order: Vec<usize> = (0..n).collect();
        let mut s = derive_stream(seed, "shuffle", 0);
        for i in (1..n).rev() {
            let j = (s.uniform() * (i + 1) as f64) as usize;
            order.swap(i, j.min(i));
        }
        let (a, b) = (cloud(2, a), cloud(2, b));
        let w = w2_assignment(&a, &b).unwrap();
        prop_assert!((w - w2_assignment(&a.select(&order), &b).unwrap()).abs() < 1e-10);
    }
}
