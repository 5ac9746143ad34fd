use bimatch_core::patchlabel::label_patches;
use bimatch_core::synthdata::ParseMap;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sorts the pixels of each block and takes the longest run; the first
/// longest run in ascending order is the smallest id among the modes.
fn oracle(map: &ParseMap, p: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for br in 0..map.height / p {
        for bc in 0..map.width / p {
            let mut px: Vec<u8> = (0..p)
                .flat_map(|y| (0..p).map(move |x| (y, x)))
                .map(|(y, x)| map.get(br * p + y, bc * p + x))
                .collect();
            px.sort_unstable();
            let (mut best, mut best_len) = (px[0], 0);
            let mut i = 0;
            while i < px.len() {
                let j = px[i..].iter().take_while(|&&v| v == px[i]).count();
                if j > best_len {
                    best = px[i];
                    best_len = j;
                }
                i += j;
            }
            out.push(best);
        }
    }
    out
}

fn random_map(rng: &mut ChaCha8Rng) -> (ParseMap, usize, usize) {
    let p = rng.random_range(1..=4);
    let (rows, cols) = (rng.random_range(1..=6), rng.random_range(1..=6));
    let classes = rng.random_range(1..=8usize);
    // few distinct labels per map keeps ties common
    let used = rng.random_range(1..=classes.min(3));
    let palette: Vec<u8> = (0..used).map(|_| rng.random_range(0..classes) as u8).collect();
    let labels = (0..rows * p * cols * p)
        .map(|_| palette[rng.random_range(0..used)])
        .collect();
    (ParseMap::new(rows * p, cols * p, labels).unwrap(), p, classes)
}

#[test]
fn agrees_with_histogram_oracle_on_1000_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ties = 0;
    for _ in 0..1000 {
        let (map, p, classes) = random_map(&mut rng);
        let grid = label_patches(&map, p, classes).unwrap();
        assert_eq!(grid.labels, oracle(&map, p));
        assert_eq!((grid.rows, grid.cols), (map.height / p, map.width / p));
        if p == 2 {
            ties += 1;
        }
    }
    assert!(ties > 100, "tie-prone 2x2 patches were exercised {ties} times");
}

#[test]
fn two_two_tie_takes_smaller_id() {
    let map = ParseMap::new(2, 2, vec![5, 3, 3, 5]).unwrap();
    assert_eq!(label_patches(&map, 2, 8).unwrap().labels, vec![3]);
}

fn map_strategy() -> impl Strategy<Value = (ParseMap, usize)> {
    (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(p, r, c)| {
        proptest::collection::vec(0u8..6, r * p * c * p)
            .prop_map(move |labels| (ParseMap::new(r * p, c * p, labels).unwrap(), p))
    })
}

proptest! {
    /// Shuffling pixels inside each block leaves every label unchanged.
    #[test]
    fn invariant_to_pixel_order_within_blocks((map, p) in map_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = map.clone();
        for br in 0..map.height / p {
            for bc in 0..map.width / p {
                let cells: Vec<(usize, usize)> = (0..p)
                    .flat_map(|y| (0..p).map(move |x| (br * p + y, bc * p + x)))
                    .collect();
                let mut vals: Vec<u8> = cells.iter().map(|&(y, x)| map.get(y, x)).collect();
                for i in (1..vals.len()).rev() {
                    vals.swap(i, rng.random_range(0..=i));
                }
                for (&(y, x), v) in cells.iter().zip(vals) {
                    shuffled.labels[y * map.width + x] = v;
                }
            }
        }
        prop_assert_eq!(label_patches(&map, p, 6).unwrap(), label_patches(&shuffled, p, 6).unwrap());
    }

    /// Moving whole blocks moves their labels the same way.
    #[test]
    fn block_permutation_permutes_labels((map, p) in map_strategy()) {
        let (rows, cols) = (map.height / p, map.width / p);
        // reverse the block order in raster sequence
        let mut moved = map.clone();
        for b in 0..rows * cols {
            let to = rows * cols - 1 - b;
            for y in 0..p {
                for x in 0..p {
                    let (sy, sx) = ((b / cols) * p + y, (b % cols) * p + x);
                    let (dy, dx) = ((to / cols) * p + y, (to % cols) * p + x);
                    moved.labels[dy * map.width + dx] = map.get(sy, sx);
                }
            }
        }
        let a = label_patches(&map, p, 6).unwrap().labels;
        let mut b = label_patches(&moved, p, 6).unwrap().labels;
        b.reverse();
        prop_assert_eq!(a, b);
    }

    /// An order-preserving relabelling of classes commutes with labelling.
    #[test]
    fn monotone_relabel_commutes((map, p) in map_strategy(), shift in 0u8..10) {
        let f = |v: u8| 2 * v + shift;
        let relabelled = ParseMap::new(map.height, map.width, map.labels.iter().map(|&v| f(v)).collect()).unwrap();
        let a: Vec<u8> = label_patches(&map, p, 6).unwrap().labels.into_iter().map(f).collect();
        prop_assert_eq!(a, label_patches(&relabelled, p, 30).unwrap().labels);
    }

    /// The chosen label occurs at least as often as any other in its block.
    #[test]
    fn label_is_a_mode((map, p) in map_strategy()) {
        let grid = label_patches(&map, p, 6).unwrap();
        for br in 0..grid.rows {
            for bc in 0..grid.cols {
                let mut counts = [0usize; 6];
                for y in 0..p {
                    for x in 0..p {
                        counts[map.get(br * p + y, bc * p + x) as usize] += 1;
                    }
                }
                let chosen = grid.get(br, bc) as usize;
                prop_assert_eq!(counts[chosen], *counts.iter().max().unwrap());
            }
        }
    }
}
