use fast3dcache::grid::{Dims, LatentGrid, VelocityField};
use fast3dcache::ssc::{
    acceleration, cacheability_score, minmax_normalize, select_partition, stability_order, stability_scores,
    velocity_magnitude, SscError,
};
use proptest::prelude::*;

fn field(dims: Dims, data: Vec<f32>) -> VelocityField {
    VelocityField { values: LatentGrid::from_vec(dims, data).unwrap(), step_index: 0 }
}

#[test]
fn magnitude_and_acceleration_by_hand() {
    // 2 channels, 2 tokens: token 0 = (3, 4), token 1 = (0, 1)
    let dims = Dims::new(1, 2, 1, 1, 2);
    let now = field(dims, vec![3.0, 0.0, 4.0, 1.0]);
    let prev = field(dims, vec![0.0, 0.0, 0.0, 1.0]);
    assert_eq!(velocity_magnitude(&now, 0), vec![5.0, 1.0]);
    assert_eq!(acceleration(&now, &prev, 0).unwrap(), vec![5.0, 0.0]);
    let s = stability_scores(&now, &prev, 0, 0.5).unwrap();
    assert_eq!(s, vec![1.0, 0.0]);
}

#[test]
fn batch_elements_are_independent() {
    let dims = Dims::new(2, 1, 1, 1, 2);
    let v = field(dims, vec![1.0, 2.0, 7.0, -3.0]);
    assert_eq!(velocity_magnitude(&v, 1), vec![7.0, 3.0]);
}

#[test]
fn degenerate_inputs() {
    assert_eq!(minmax_normalize(&[2.0, 2.0, 2.0]).unwrap(), vec![0.0; 3]);
    assert_eq!(minmax_normalize(&[]), Err(SscError::Empty));
    assert_eq!(cacheability_score(&[1.0], &[1.0], 1.5), Err(SscError::OmegaOutOfRange(1.5)));
    assert_eq!(cacheability_score(&[1.0], &[1.0, 2.0], 0.5), Err(SscError::LengthMismatch(1, 2)));
}

#[test]
fn omega_extremes_select_one_signal() {
    let v = [0.0, 1.0, 2.0];
    let a = [2.0, 1.0, 0.0];
    assert_eq!(cacheability_score(&v, &a, 0.0).unwrap(), vec![0.0, 0.5, 1.0]);
    assert_eq!(cacheability_score(&v, &a, 1.0).unwrap(), vec![1.0, 0.5, 0.0]);
}

#[test]
fn ties_break_by_index() {
    let p = select_partition(&[0.5, 0.1, 0.5, 0.5, 0.1], 3, 0, 0);
    assert_eq!(p.cached, vec![0, 1, 4]);
    assert_eq!(p.active, vec![2, 3]);
}

#[test]
fn forced_refresh_at_limit() {
    let scores = [0.3, 0.1, 0.2];
    assert!(!select_partition(&scores, 2, 2, 3).forced_refresh);
    let p = select_partition(&scores, 2, 3, 3);
    assert!(p.forced_refresh);
    assert!(p.cached.is_empty());
    assert_eq!(p.active, vec![0, 1, 2]);
    // Disabled limit never refreshes.
    assert_eq!(select_partition(&scores, 2, 1000, 0).cached, vec![1, 2]);
    // Zero quota is not a forced refresh.
    assert!(!select_partition(&scores, 0, 10, 1).forced_refresh);
}

fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![0.0f64..1.0, Just(0.25), Just(0.5)], 1..200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn partition_is_exact(scores in scores_strategy(), q in 0usize..250) {
        let n = scores.len();
        let p = select_partition(&scores, q, 0, 0);
        prop_assert_eq!(p.cached.len(), q.min(n));
        prop_assert_eq!(p.active.len() + p.cached.len(), n);
        let mut all: Vec<usize> = p.active.iter().chain(&p.cached).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(p.active.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(p.cached.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn cached_never_score_above_active(scores in scores_strategy(), q in 0usize..200) {
        let p = select_partition(&scores, q, 0, 0);
        let max_cached = p.cached.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        let min_active = p.active.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        prop_assert!(max_cached <= min_active);
    }

    #[test]
    fn cached_sets_are_nested(scores in scores_strategy(), a in 0usize..200, b in 0usize..200) {
        let (lo, hi) = (a.min(b), a.max(b));
        let small = select_partition(&scores, lo, 0, 0).cached;
        let large = select_partition(&scores, hi, 0, 0).cached;
        prop_assert!(small.iter().all(|i| large.contains(i)));
    }

    #[test]
    fn order_invariant_under_positive_affine_maps(
        mag in prop::collection::vec(0u32..1000, 2..100),
        scale_exp in -3i32..4,
        shift in -50i32..50,
        omega in prop::sample::select(vec![0.0, 0.25, 0.5, 1.0]),
    ) {
        // Power-of-two scales and integer shifts keep the arithmetic exact.
        let scale = 2f64.powi(scale_exp);
        let v: Vec<f64> = mag.iter().map(|&x| x as f64).collect();
        let a: Vec<f64> = v.iter().rev().map(|x| (x * 7.0) % 13.0).collect();
        let v2: Vec<f64> = v.iter().map(|x| x * scale + shift as f64).collect();
        let a2: Vec<f64> = a.iter().map(|x| x * scale + shift as f64).collect();
        let s1 = cacheability_score(&v, &a, omega).unwrap();
        let s2 = cacheability_score(&v2, &a2, omega).unwrap();
        prop_assert_eq!(stability_order(&s1), stability_order(&s2));
    }

    #[test]
    fn normalized_scores_in_unit_interval(
        v in prop::collection::vec(-1e3f64..1e3, 1..100),
        omega in 0.0f64..=1.0,
    ) {
        let a: Vec<f64> = v.iter().map(|x| x.abs().sqrt()).collect();
        let s = cacheability_score(&v, &a, omega).unwrap();
        prop_assert!(s.iter().all(|x| (0.0..=1.0 + 1e-12).contains(x)));
    }

    #[test]
    fn refresh_rule(scores in scores_strategy(), q in 1usize..200, run in 0u32..10, tau in 0u32..6) {
        let p = select_partition(&scores, q, run, tau);
        let expect_refresh = tau > 0 && run >= tau;
        prop_assert_eq!(p.forced_refresh, expect_refresh);
        prop_assert_eq!(p.cached.is_empty(), expect_refresh);
    }
}
