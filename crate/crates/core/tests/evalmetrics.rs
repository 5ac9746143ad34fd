use bimatch_core::evalmetrics::{evaluate, DEFAULT_KS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Position of each gallery item in the ranked list, counted directly:
/// items scoring higher, or equal with a lower index, come first.
fn positions(row: &[f64]) -> Vec<usize> {
    (0..row.len())
        .map(|j| {
            (0..row.len())
                .filter(|&k| row[k] > row[j] || (row[k] == row[j] && k < j))
                .count()
        })
        .collect()
}

/// Returns (R@1, R@5, R@10, mAP).
fn oracle(sim: &[Vec<f64>], q_ids: &[usize], g_ids: &[usize]) -> (f64, f64, f64, f64) {
    let mut hits = [0.0; 3];
    let mut ap_total = 0.0;
    for (row, &q) in sim.iter().zip(q_ids) {
        let pos = positions(row);
        let relevant: Vec<usize> = (0..g_ids.len()).filter(|&j| g_ids[j] == q).map(|j| pos[j]).collect();
        let best = *relevant.iter().min().unwrap();
        for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
            if best < k {
                *h += 1.0;
            }
        }
        let ap: f64 = relevant
            .iter()
            .map(|&r| relevant.iter().filter(|&&o| o <= r).count() as f64 / (r + 1) as f64)
            .sum::<f64>()
            / relevant.len() as f64;
        ap_total += ap;
    }
    let q = sim.len() as f64;
    (hits[0] / q, hits[1] / q, hits[2] / q, ap_total / q)
}

fn random_case(rng: &mut ChaCha8Rng, q: usize, g: usize) -> (Vec<Vec<f64>>, Vec<usize>, Vec<usize>) {
    let identities = rng.random_range(2..=6);
    let mut gallery: Vec<usize> = (0..g).map(|_| rng.random_range(0..identities)).collect();
    // every identity appears in the gallery at least once
    for (i, slot) in gallery.iter_mut().take(identities).enumerate() {
        *slot = i;
    }
    let queries = (0..q).map(|_| rng.random_range(0..identities)).collect();
    // coarse scores make ties frequent
    let coarse = rng.random_bool(0.5);
    let sim = (0..q)
        .map(|_| {
            (0..g)
                .map(|_| {
                    let s: f64 = rng.random_range(-1.0..1.0);
                    if coarse { (s * 4.0).round() / 4.0 } else { s }
                })
                .collect()
        })
        .collect();
    (sim, queries, gallery)
}

#[test]
fn agrees_with_brute_force_on_50_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (sim, q, g) = random_case(&mut rng, 8, 20);
        let r = evaluate(&sim, &q, &g, &DEFAULT_KS).unwrap();
        let (r1, r5, r10, map) = oracle(&sim, &q, &g);
        assert!((r.rank(1) - r1).abs() <= 1e-12);
        assert!((r.rank(5) - r5).abs() <= 1e-12);
        assert!((r.rank(10) - r10).abs() <= 1e-12);
        assert!((r.mean_ap - map).abs() <= 1e-12, "{} vs {map}", r.mean_ap);
        assert!(r.rank(1) <= r.rank(5) && r.rank(5) <= r.rank(10));
    }
}

#[test]
fn single_relevant_item_ap_is_reciprocal_rank() {
    let sim = vec![vec![0.9, 0.8, 0.7, 0.1]];
    let r = evaluate(&sim, &[4], &[1, 2, 4, 3], &DEFAULT_KS).unwrap();
    assert!((r.mean_ap - 1.0 / 3.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn rank_at_k_is_monotone(seed in any::<u64>(), q in 1usize..10, g in 6usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sim, qi, gi) = random_case(&mut rng, q, g);
        let r = evaluate(&sim, &qi, &gi, &DEFAULT_KS).unwrap();
        prop_assert!(r.rank(1) <= r.rank(5) && r.rank(5) <= r.rank(10));
        prop_assert!(r.mean_ap > 0.0 && r.mean_ap <= 1.0);
    }

    /// Positive affine maps of a query's scores preserve its ranking.
    #[test]
    fn invariant_to_positive_affine_scores(seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sim, qi, gi) = random_case(&mut rng, 5, 12);
        let sim: Vec<Vec<f64>> = sim.iter().map(|r| r.iter().map(|s| (s * 8.0).round()).collect()).collect();
        let moved: Vec<Vec<f64>> = sim.iter().map(|r| r.iter().map(|s| a * s + b).collect()).collect();
        let (x, y) = (evaluate(&sim, &qi, &gi, &DEFAULT_KS).unwrap(), evaluate(&moved, &qi, &gi, &DEFAULT_KS).unwrap());
        prop_assert_eq!(x.rank_at, y.rank_at);
        prop_assert!((x.mean_ap - y.mean_ap).abs() < 1e-12);
    }

    /// With distinct scores, reordering the gallery changes nothing.
    #[test]
    fn invariant_to_gallery_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut sim, qi, gi) = random_case(&mut rng, 6, 15);
        for row in &mut sim {
            for (j, s) in row.iter_mut().enumerate() {
                *s = rng.random_range(0.0..1.0) + j as f64 * 1e-9;
            }
        }
        let perm: Vec<usize> = (0..gi.len()).rev().collect();
        let sim2: Vec<Vec<f64>> = sim.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let gi2: Vec<usize> = perm.iter().map(|&j| gi[j]).collect();
        let (x, y) = (evaluate(&sim, &qi, &gi, &DEFAULT_KS).unwrap(), evaluate(&sim2, &qi, &gi2, &DEFAULT_KS).unwrap());
        prop_assert_eq!(x.rank_at, y.rank_at);
        prop_assert!((x.mean_ap - y.mean_ap).abs() < 1e-12);
    }
}
