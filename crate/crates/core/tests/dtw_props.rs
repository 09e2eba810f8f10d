use proptest::prelude::*;

use symalign::dtw::{disagreement_brackets, dtw, dtw_backward, Inclusion, WarpPath, L1};
use symalign::noteio::{PitchIndex, PitchSet};

/// Minimum over every monotone path from (0, 0) to the far corner, by plain recursion.
fn brute_force(cost: &dyn Fn(usize, usize) -> f64, i: usize, j: usize) -> f64 {
    let here = cost(i, j);
    if i == 0 && j == 0 {
        return here;
    }
    let mut best = f64::INFINITY;
    if i > 0 && j > 0 {
        best = best.min(brute_force(cost, i - 1, j - 1));
    }
    if i > 0 {
        best = best.min(brute_force(cost, i - 1, j));
    }
    if j > 0 {
        best = best.min(brute_force(cost, i, j - 1));
    }
    here + best
}

fn path_cost(path: &WarpPath, cost: impl Fn(usize, usize) -> f64) -> f64 {
    path.pairs.iter().map(|&(i, j)| cost(i, j)).sum()
}

fn pitch_set(v: &[u8]) -> PitchSet {
    v.iter().map(|&p| PitchIndex::new(p).unwrap()).collect()
}

proptest! {
    #[test]
    fn integer_l1_matches_enumeration(
        a in prop::collection::vec(0u8..6, 1..=7),
        b in prop::collection::vec(0u8..6, 1..=7),
    ) {
        let (fa, fb): (Vec<f64>, Vec<f64>) = (a.iter().map(|&x| x as f64).collect(), b.iter().map(|&x| x as f64).collect());
        let cost = |i: usize, j: usize| (fa[i] - fb[j]).abs();
        let (c, path) = dtw(&fa, &fb, &L1).unwrap();
        prop_assert_eq!(c, brute_force(&cost, fa.len() - 1, fb.len() - 1));
        prop_assert!(path.is_valid(fa.len(), fb.len()));
        prop_assert_eq!(path_cost(&path, cost), c);
    }

    #[test]
    fn inclusion_metric_matches_enumeration(
        perf in prop::collection::vec(40u8..46, 1..=8),
        sets in prop::collection::vec(prop::collection::vec(40u8..46, 1..3), 1..=8),
    ) {
        let perf: Vec<PitchIndex> = perf.iter().map(|&p| PitchIndex::new(p).unwrap()).collect();
        let sets: Vec<PitchSet> = sets.iter().map(|s| pitch_set(s)).collect();
        let cost = |i: usize, j: usize| if sets[j].contains(perf[i]) { 0.0 } else { 1.0 };
        let (c, path) = dtw(&perf, &sets, &Inclusion).unwrap();
        prop_assert_eq!(c, brute_force(&cost, perf.len() - 1, sets.len() - 1));
        prop_assert!(path.is_valid(perf.len(), sets.len()));
        prop_assert_eq!(path_cost(&path, cost), c);
    }

    #[test]
    fn forward_and_backward_paths_cost_the_same(
        a in prop::collection::vec(0u8..4, 1..=30),
        b in prop::collection::vec(0u8..4, 1..=30),
    ) {
        let eq = |x: &u8, y: &u8| if x == y { 0.0 } else { 1.0 };
        let (cf, fwd) = dtw(&a, &b, &eq).unwrap();
        let (cb, bwd) = dtw_backward(&a, &b, &eq).unwrap();
        prop_assert_eq!(cf, cb);
        prop_assert!(bwd.is_valid(a.len(), b.len()));
        prop_assert_eq!(path_cost(&bwd, |i, j| eq(&a[i], &b[j])), cb);

        let (agreed, brackets) = disagreement_brackets(&fwd, &bwd);
        prop_assert_eq!(agreed.first(), Some(&(0, 0)));
        prop_assert_eq!(agreed.last(), Some(&(a.len() - 1, b.len() - 1)));
        for br in &brackets {
            prop_assert!(agreed.contains(&br.lower) && agreed.contains(&br.upper));
            prop_assert_eq!(br.a.clone(), br.lower.0 + 1..br.upper.0);
            prop_assert_eq!(br.b.clone(), br.lower.1 + 1..br.upper.1);
            prop_assert!(!br.a.is_empty() || !br.b.is_empty());
        }
        if fwd == bwd {
            prop_assert!(brackets.is_empty());
        }
    }
}

#[test]
fn two_hundred_seeded_instances() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let a: Vec<f64> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(0.0..3.0)).collect();
        let b: Vec<f64> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(0.0..3.0)).collect();
        let cost = |i: usize, j: usize| (a[i] - b[j]).abs();
        let (c, _) = dtw(&a, &b, &L1).unwrap();
        assert!((c - brute_force(&cost, a.len() - 1, b.len() - 1)).abs() < 1e-9);
    }
}
