use bst_core::context::Variant;
use bst_core::model::*;
use bst_core::params::ParamStore;
use bst_core::ssm::KernelFamily;
use bst_core::tensor::FdSettings;
use bst_core::{BstError, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(variant: Variant, family: KernelFamily, seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        bst_layers: [1].into_iter().collect(),
        variant,
        kernel_family: family,
        window: 8,
        mf_states: 4,
        state_size: 4,
        heads: 4,
        d_model: 32,
        vocab_size: 16,
        seed,
        ..ModelConfig::default()
    }
}

fn tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Non-trivial values for parameters that start at zero or one.
fn perturb(params: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (name, t) in params.iter_mut() {
        if name.ends_with(".rel") || name.contains(".ctx.") || name.ends_with(".wg") || name.ends_with(".bg") {
            for x in t.data_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
        }
    }
}

#[test]
fn logits_shape_and_loss_limits() {
    let m = Model::<f64>::init(small(Variant::SingleHead, KernelFamily::Structured, 1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let toks = tokens(&mut rng, 64, 16);
    let y = m.logits(&toks, 2, BlockExec::Parallel).unwrap();
    assert_eq!(y.shape(), [2, 32, 16]);

    let tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(vec![4, 16]));
    let l = lm_loss(&tape, z, &[Some(1), Some(2), Some(3), Some(4)]).unwrap();
    assert!((tape.value(l).item() - 16f64.ln()).abs() < 1e-14);
    let sharp = tape.constant(Tensor::from_index_fn(vec![2, 16], |i| if i[1] == i[0] { 100.0 } else { 0.0 }));
    let l = lm_loss(&tape, sharp, &[Some(0), Some(1)]).unwrap();
    assert!(tape.value(l).item() < 1e-40);
    assert!(matches!(lm_loss(&tape, z, &[Some(1)]), Err(BstError::Dimension(_))));
}

#[test]
fn out_of_vocabulary_and_bad_lengths_are_rejected() {
    let m = Model::<f64>::init(small(Variant::SingleHead, KernelFamily::Structured, 1)).unwrap();
    let mut toks = vec![0; 32];
    toks[3] = 16;
    assert!(matches!(m.logits(&toks, 1, BlockExec::Parallel), Err(BstError::Input(_))));
    assert!(matches!(m.logits(&[0; 30], 1, BlockExec::Parallel), Err(BstError::Config(_))));
    let mut cfg = small(Variant::SingleHead, KernelFamily::Structured, 1);
    cfg.bst_layers.insert(3);
    assert!(matches!(Model::<f64>::init(cfg), Err(BstError::Config(_))));
}

#[test]
fn parallel_blocks_match_sequential_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for variant in Variant::ALL {
        for family in [KernelFamily::Structured, KernelFamily::Unstructured] {
            let mut m = Model::<f64>::init(small(variant, family, 3)).unwrap();
            perturb(&mut m.params, &mut rng);
            let toks = tokens(&mut rng, 64, 16);
            let a = m.logits(&toks, 2, BlockExec::Parallel).unwrap();
            let b = m.logits(&toks, 2, BlockExec::Sequential).unwrap();
            assert!(max_diff(&a, &b) <= 1e-12, "{variant} {family:?}: {}", max_diff(&a, &b));
            for g in [1, 3] {
                let c = m.logits(&toks, 2, BlockExec::Grouped(g)).unwrap();
                assert!(max_diff(&a, &c) <= 1e-12, "{variant} {family:?} groups of {g}: {}", max_diff(&a, &c));
            }
        }
    }
}

#[test]
fn logits_are_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for variant in Variant::ALL {
        let mut m = Model::<f64>::init(small(variant, KernelFamily::Structured, 5)).unwrap();
        perturb(&mut m.params, &mut rng);
        for _ in 0..4 {
            let toks = tokens(&mut rng, 32, 16);
            let p = rng.random_range(0..32);
            let mut alt = toks.clone();
            alt[p] = (alt[p] + 1 + rng.random_range(0..15)) % 16;
            let a = m.logits(&toks, 1, BlockExec::Parallel).unwrap();
            let b = m.logits(&alt, 1, BlockExec::Parallel).unwrap();
            let cut = p * 16;
            let before = a.data()[..cut].iter().zip(&b.data()[..cut]).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(before <= 1e-12, "{variant} position {p}: {before}");
            assert_ne!(&a.data()[cut..cut + 16], &b.data()[cut..cut + 16]);
        }
    }
}

#[test]
fn slide_equals_block_state_with_cross_path_projected_out() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = small(Variant::SingleHead, KernelFamily::Structured, 7);
    let mut bst = Model::<f64>::init(cfg.clone()).unwrap();
    perturb(&mut bst.params, &mut rng);
    let slide_cfg = ModelConfig { baseline: Some(BaselineKind::Slide), ..cfg };
    let mut slide = Model::<f64>::init(slide_cfg).unwrap();
    for (name, t) in slide.params.iter_mut() {
        let src = bst.params.get(name).unwrap();
        if name == "layer1.blk.proj" {
            let n = t.numel();
            t.data_mut().copy_from_slice(&src.data()[..n]);
        } else {
            *t = src.clone();
        }
    }
    let proj = bst.params.get_mut("layer1.blk.proj").unwrap();
    let half = proj.numel() / 2;
    proj.data_mut()[half..].iter_mut().for_each(|x| *x = 0.0);
    let toks = tokens(&mut rng, 32, 16);
    let a = bst.logits(&toks, 1, BlockExec::Parallel).unwrap();
    let b = slide.logits(&toks, 1, BlockExec::Parallel).unwrap();
    assert!(max_diff(&a, &b) <= 1e-12);
}

#[test]
fn pass_through_gate_reduces_recurrent_baseline_to_slide() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = ModelConfig { baseline: Some(BaselineKind::BrectLike), ..small(Variant::SingleHead, KernelFamily::Structured, 9) };
    let rec = Model::<f64>::init(cfg.clone()).unwrap();
    let mut slide = Model::<f64>::init(ModelConfig { baseline: Some(BaselineKind::Slide), ..cfg }).unwrap();
    for (name, t) in slide.params.iter_mut() {
        let src = rec.params.get(name).unwrap();
        let n = t.numel();
        t.data_mut().copy_from_slice(&src.data()[..n]);
    }
    let toks = tokens(&mut rng, 32, 16);
    let a = rec.logits(&toks, 1, BlockExec::Parallel).unwrap();
    let b = slide.logits(&toks, 1, BlockExec::Parallel).unwrap();
    assert!(max_diff(&a, &b) <= 1e-12);
}

#[test]
fn recurrent_state_carries_block_zero_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = ModelConfig {
        baseline: Some(BaselineKind::BrectLike),
        num_layers: 1,
        prev_block_cache: false,
        ..small(Variant::SingleHead, KernelFamily::Structured, 11)
    };
    let mut m = Model::<f64>::init(cfg).unwrap();
    perturb(&mut m.params, &mut rng);
    let toks = tokens(&mut rng, 32, 16);
    let mut alt = toks.clone();
    alt[0] = (alt[0] + 1) % 16;
    let a = m.logits(&toks, 1, BlockExec::Parallel).unwrap();
    let b = m.logits(&alt, 1, BlockExec::Parallel).unwrap();
    for blk in 1..4 {
        let r = blk * 8 * 16..(blk + 1) * 8 * 16;
        assert_ne!(&a.data()[r.clone()], &b.data()[r]);
    }
}

#[test]
fn slide_layer_sees_only_previous_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = ModelConfig { baseline: Some(BaselineKind::Slide), num_layers: 1, ..small(Variant::SingleHead, KernelFamily::Structured, 13) };
    let mut m = Model::<f64>::init(cfg).unwrap();
    perturb(&mut m.params, &mut rng);
    let toks = tokens(&mut rng, 32, 16);
    let mut alt = toks.clone();
    alt[3] = (alt[3] + 1) % 16;
    let a = m.logits(&toks, 1, BlockExec::Parallel).unwrap();
    let b = m.logits(&alt, 1, BlockExec::Parallel).unwrap();
    assert_ne!(&a.data()[8 * 16..16 * 16], &b.data()[8 * 16..16 * 16]);
    assert_eq!(&a.data()[16 * 16..], &b.data()[16 * 16..]);
}

#[test]
fn checkpoint_roundtrip() {
    let m = Model::<f64>::init(small(Variant::MultiFilter, KernelFamily::Unstructured, 14)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &m.params).unwrap();
    let back: ParamStore = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.len(), m.params.len());
    for (name, t) in m.params.iter() {
        let b = back.get(name).unwrap();
        assert_eq!(b.shape(), t.shape());
        assert!(b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(manifest.lines().any(|l| l.starts_with("embed\t16,32\t")));
}

#[test]
fn single_head_model_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut m = Model::<f64>::init(small(Variant::SingleHead, KernelFamily::Structured, 16)).unwrap();
    perturb(&mut m.params, &mut rng);
    let toks = tokens(&mut rng, 32, 16);
    let targets: Vec<Option<usize>> = toks[1..].iter().map(|&t| Some(t)).chain([None]).collect();
    let report = model_gradcheck(&m, &toks, &targets, 1, &FdSettings::default()).unwrap();
    assert!(report.passed(1e-4), "{report:#?}");
}
