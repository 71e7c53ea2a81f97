use bst_core::attention::*;
use bst_core::context::{collect_sh, Lift};
use bst_core::params::ParamStore;
use bst_core::{BstError, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(d: usize, h: usize, w: usize, seed: u64) -> (AttentionBlockConfig, ParamStore) {
    let cfg = AttentionBlockConfig::new(d, h, w).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_self_attention(&mut store, "a", &cfg, &mut rng);
    init_cross_attention(&mut store, "c", &cfg, &mut rng);
    let rel = Tensor::from_fn(vec![cfg.rel_buckets, h], |_| rng.random_range(-1.0..1.0));
    store.insert("a.rel", rel);
    (cfg, store)
}

fn blocks(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn self_attention_masks_future_and_first_predecessor() {
    let (cfg, store) = setup(8, 2, 4, 0);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let a = tape.constant(blocks([2, 3, 4, 8], 1));
    let att = self_attention_block(&tape, &p, "a", &cfg, a, None, true).unwrap();
    let wts = tape.value(att.weights);
    assert_eq!(wts.shape(), [2, 3, 2, 4, 8]);
    for b in 0..2 {
        for n in 0..3 {
            for h in 0..2 {
                for i in 0..4 {
                    let row: Vec<f64> = (0..8).map(|j| wts.get(&[b, n, h, i, j])).collect();
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    for (j, &x) in row.iter().enumerate() {
                        let visible = if j < 4 { n > 0 } else { j - 4 <= i };
                        assert_eq!(x > 0.0, visible, "block {n} row {i} key {j}");
                    }
                }
            }
        }
    }
}

#[test]
fn single_token_blocks_attend_to_themselves() {
    let (cfg, store) = setup(4, 1, 1, 2);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let a = tape.constant(blocks([1, 3, 1, 4], 3));
    let att = self_attention_block(&tape, &p, "a", &cfg, a, None, true).unwrap();
    let wts = tape.value(att.weights);
    assert_eq!(wts.get(&[0, 0, 0, 0, 1]), 1.0);
    assert!((wts.get(&[0, 1, 0, 0, 0]) + wts.get(&[0, 1, 0, 0, 1]) - 1.0).abs() < 1e-12);
}

#[test]
fn masked_cross_attention_sees_only_aligned_prefix() {
    let (cfg, store) = setup(8, 2, 4, 4);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let a = tape.constant(blocks([1, 2, 4, 8], 5));
    let y = tape.constant(Tensor::from_fn(vec![1, 8, 8], |i| (i as f64 * 0.37).sin()));
    let ctx = collect_sh(&tape, y, 4, 2, Lift::Replicate).unwrap();
    let att = cross_attend_context(&tape, &p, "c", &cfg, a, &ctx, true).unwrap();
    let wts = tape.value(att.weights);
    for n in 0..2 {
        for h in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(wts.get(&[0, n, h, i, j]) > 0.0, j <= i);
                }
            }
        }
    }
    assert!(matches!(cross_attend_context(&tape, &p, "c", &cfg, a, &ctx, false), Err(BstError::Contract(_))));
}

#[test]
fn relative_buckets_are_exact_then_logarithmic_then_saturated() {
    for d in 0..16 {
        assert_eq!(relative_bucket(d, 32, 128), d);
    }
    let mut last = 0;
    for d in 0..400 {
        let b = relative_bucket(d, 32, 128);
        assert!(b >= last && b < 32);
        last = b;
    }
    assert_eq!(relative_bucket(128, 32, 128), 31);
    assert_eq!(relative_bucket(10_000, 32, 128), 31);
    assert!(relative_bucket(64, 32, 128) < 31);
}

proptest! {
    #[test]
    fn relative_bias_depends_only_on_distance(q in 1usize..12, extra in 0usize..12, seed: u64) {
        let k = q + extra;
        let offset = k - q;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table: Tensor = Tensor::from_fn(vec![8, 2], |_| rng.random_range(-1.0..1.0));
        let tape = Tape::new();
        let b = tape.value(relative_position_bias(&tape, tape.constant(table.clone()), q, k, offset, 20).unwrap());
        for h in 0..2 {
            for i in 0..q {
                for j in 0..=(i + offset) {
                    let dist = i + offset - j;
                    prop_assert_eq!(b.get(&[h, i, j]), table.get(&[relative_bucket(dist, 8, 20), h]));
                    if i + 1 < q && j + 1 < k {
                        prop_assert_eq!(b.get(&[h, i, j]), b.get(&[h, i + 1, j + 1]));
                    }
                }
            }
        }
    }
}

#[test]
fn config_rejects_indivisible_width() {
    assert!(matches!(AttentionBlockConfig::new(10, 3, 4), Err(BstError::Config(_))));
    assert!(matches!(AttentionBlockConfig::new(8, 2, 0), Err(BstError::Config(_))));
}
