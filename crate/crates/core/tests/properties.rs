#![allow(clippy::unnecessary_cast)]
use llsa::oracle::mask_transpose;
use llsa::pyramid::build_pyramid;
use llsa::reorder::{apply_permutation, build_reorder, Direction};
use llsa::tensorio::{gen_random, Distribution};
use llsa::{hierarchical_topk, transpose_indices, FeatureMatrix, LevelIndices, LlsaConfig, Real};
use proptest::prelude::*;

/// A valid Top-K table: `rows` rows of `k` distinct sorted key blocks.
fn table() -> impl Strategy<Value = (LevelIndices, usize)> {
    (1usize..=64, 1usize..=64).prop_flat_map(|(rows, n_key_blocks)| {
        (1..=n_key_blocks.min(8)).prop_flat_map(move |k| {
            proptest::collection::vec(
                proptest::sample::subsequence((0..n_key_blocks as u32).collect::<Vec<_>>(), k),
                rows,
            )
            .prop_map(move |picked| {
                let flat = picked.into_iter().flatten().collect();
                (LevelIndices::new(0, k, flat, n_key_blocks).unwrap(), n_key_blocks)
            })
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transpose_round_trips_pairs((idx, n_key_blocks) in table()) {
        let t = transpose_indices(&idx, n_key_blocks).unwrap();
        prop_assert_eq!(&t, &mask_transpose(&idx, n_key_blocks).unwrap());
        prop_assert_eq!(t.offsets()[n_key_blocks], idx.rows() * idx.k());
        let mut forward: Vec<(u32, u32)> = (0..idx.rows())
            .flat_map(|q| idx.row(q).iter().map(move |&kb| (q as u32, kb)))
            .collect();
        let mut back = t.pairs();
        forward.sort_unstable();
        back.sort_unstable();
        prop_assert_eq!(forward, back);
        for kb in 0..n_key_blocks {
            prop_assert!(t.segment(kb).windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn selection_ignores_positive_rescaling(seed in any::<u64>(), factor in 0.01f64..100.0) {
        let cfg = LlsaConfig::new(256, 4, 4, 2, 2).validate().unwrap();
        let q = gen_random(256, 4, seed, Distribution::StdNormal);
        let k = gen_random(256, 4, seed ^ 1, Distribution::StdNormal);
        let select = |q: &FeatureMatrix, k: &FeatureMatrix| {
            let pq = build_pyramid(q, 4, 2).unwrap();
            let pk = build_pyramid(k, 4, 2).unwrap();
            hierarchical_topk(&pq, &pk, &cfg).unwrap().per_level
        };
        let f = factor as Real;
        prop_assert_eq!(select(&q, &k), select(&q.scaled(f), &k.scaled(f)));
    }

    #[test]
    fn selection_is_nested(seed in any::<u64>()) {
        let cfg = LlsaConfig::new(512, 3, 2, 3, 4).validate().unwrap();
        let q = gen_random(512, 3, seed, Distribution::StdNormal);
        let k = gen_random(512, 3, seed ^ 7, Distribution::StdNormal);
        let sel = hierarchical_topk(&build_pyramid(&q, 2, 4).unwrap(), &build_pyramid(&k, 2, 4).unwrap(), &cfg).unwrap();
        for l in 1..4 {
            let (child, parent) = (&sel.per_level[l - 1], &sel.per_level[l]);
            for row in 0..child.rows() {
                for &c in child.row(row) {
                    prop_assert!(parent.row(row / 2).contains(&(c / 2)));
                }
            }
        }
    }

    #[test]
    fn reorder_is_a_bijection(exp_h in 1u32..=3, exp_w in 1u32..=3, b in prop::sample::select(vec![4usize, 9, 16])) {
        let s = (b as f64).sqrt() as usize;
        let (h, w) = (s.pow(exp_h), s.pow(exp_w));
        let p = build_reorder(h, w, b).unwrap();
        let mut seen = vec![false; h * w];
        for &r in p.forward() {
            prop_assert!(!seen[r as usize]);
            seen[r as usize] = true;
        }
        let x = gen_random(h * w, 2, 0, Distribution::Uniform01);
        let there = apply_permutation(&x, &p, Direction::Forward).unwrap();
        prop_assert_eq!(apply_permutation(&there, &p, Direction::Inverse).unwrap(), x);
    }
}

#[test]
fn pooling_a_reordered_image_equals_reordering_a_pooled_image() {
    for (side, b) in [(4usize, 4usize), (16, 4), (16, 16), (64, 16), (27, 9)] {
        let s = (b as f64).sqrt() as usize;
        let fine = build_reorder(side, side, b).unwrap();
        let coarse = build_reorder(side / s, side / s, b).unwrap();
        let image = gen_random(side * side, 3, side as u64, Distribution::StdNormal);
        let pooled_seq = build_pyramid(&apply_permutation(&image, &fine, Direction::Forward).unwrap(), b, 1).unwrap();
        let spatial = FeatureMatrix::from_fn(side * side / b, 3, |t, c| {
            let (r, col) = (t / (side / s) * s, t % (side / s) * s);
            let mut sum = 0.0;
            for dr in 0..s {
                for dc in 0..s {
                    sum += image.get((r + dr) * side + col + dc, c);
                }
            }
            sum / b as Real
        });
        let expected = apply_permutation(&spatial, &coarse, Direction::Forward).unwrap();
        let diff = pooled_seq.level(1).max_abs_diff(&expected);
        let tol = if llsa::DOUBLE_PRECISION { 1e-12 } else { 1e-5 };
        assert!(diff <= tol, "side {side}, B {b}: {diff:e}");
    }
}
