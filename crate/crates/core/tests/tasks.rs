use bst_core::model::{BlockExec, Model, ModelConfig};
use bst_core::optim::{Adam, AdamConfig};
use bst_core::params::ParamStore;
use bst_core::tasks::*;
use bst_core::train::{evaluate, target_accuracy, train, TrainConfig};
use bst_core::{BstError, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn assoc(len: usize, gap: usize, items: usize) -> TaskSpec {
    TaskSpec { kind: TaskKind::AssocRecall, len, vocab: 10, gap, max_gap: None, items, seed: 3 }
}

#[test]
fn copy_targets_follow_the_delimiter() {
    let spec = TaskSpec { kind: TaskKind::Copy, len: 20, vocab: 8, gap: 10, max_gap: None, items: 3, seed: 0 };
    let s = gen_copy(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let pattern = s.tokens[..3].to_vec();
    assert_eq!(s.tokens[13], MARKER);
    assert_eq!(&s.tokens[14..17], &pattern[..]);
    let scored: Vec<(usize, usize)> = s.targets.iter().enumerate().filter_map(|(i, t)| t.map(|t| (i, t))).collect();
    assert_eq!(scored, vec![(14, pattern[0]), (15, pattern[1]), (16, pattern[2])]);
    assert!(s.tokens[3..13].iter().all(|&t| t == FILLER));
    let short = TaskSpec { len: 16, ..spec };
    assert!(matches!(gen_copy(&short, &mut ChaCha8Rng::seed_from_u64(1)), Err(BstError::Config(_))));
}

#[test]
fn assoc_recall_layout() {
    let spec = TaskSpec { max_gap: Some(40), ..assoc(64, 33, 2) };
    let (keys, values) = assoc_alphabets(10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let s = gen_assoc_recall(&spec, &mut rng).unwrap();
        assert_eq!(s.targets.iter().filter(|t| t.is_some()).count(), 1);
        assert_eq!(s.targets[63], Some(s.tokens[63]));
        assert_eq!(s.tokens[61], MARKER);
        let query = s.tokens[62];
        let pair_pos: Vec<usize> = (0..61).filter(|&i| keys.contains(&s.tokens[i])).collect();
        assert_eq!(pair_pos.len(), 2);
        let hit = pair_pos.iter().find(|&&i| s.tokens[i] == query).unwrap();
        assert_eq!(s.tokens[hit + 1], s.tokens[63]);
        assert!(values.contains(&s.tokens[63]));
        let last_value = pair_pos[1] + 1;
        assert!((33..=40).contains(&(63 - last_value)));
    }
}

#[test]
fn assoc_recall_adjacent_single_pair() {
    let s = gen_assoc_recall(&assoc(5, 0, 1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(s.tokens[2], MARKER);
    assert_eq!(s.tokens[0], s.tokens[3]);
    assert_eq!(s.tokens[1], s.tokens[4]);
}

#[test]
fn assoc_recall_rejects_infeasible_specs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(gen_assoc_recall(&TaskSpec { vocab: 9, ..assoc(64, 8, 2) }, &mut rng), Err(BstError::Config(_))));
    assert!(matches!(gen_assoc_recall(&assoc(64, 8, 5), &mut rng), Err(BstError::Config(_))));
    assert!(matches!(gen_assoc_recall(&assoc(40, 38, 2), &mut rng), Err(BstError::Config(_))));
    assert_eq!(assoc_chance(10).unwrap(), 0.25);
}

#[test]
fn every_symbol_appears() {
    let spec = TaskSpec { vocab: 18, items: 4, max_gap: Some(40), ..assoc(64, 33, 4) };
    let mut seen = vec![0usize; 18];
    for s in generate(&spec, 10_000).unwrap() {
        s.tokens.iter().for_each(|&t| seen[t] += 1);
    }
    assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
    let copy = TaskSpec { kind: TaskKind::Copy, len: 32, vocab: 12, gap: 10, max_gap: None, items: 4, seed: 5 };
    let mut seen = vec![0usize; 12];
    for s in generate(&copy, 10_000).unwrap() {
        s.tokens.iter().for_each(|&t| seen[t] += 1);
    }
    assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
}

#[test]
fn generation_is_seeded() {
    let spec = assoc(64, 33, 2);
    assert_eq!(generate(&spec, 20).unwrap(), generate(&spec, 20).unwrap());
    assert_ne!(generate(&spec, 20).unwrap(), generate(&TaskSpec { seed: 4, ..spec }, 20).unwrap());
}

#[test]
fn text_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.txt");
    std::fs::write(&path, "AB").unwrap();
    assert_eq!(read_bytes(&path).unwrap(), vec![65, 66]);
    std::fs::write(&path, "abcdefghij").unwrap();
    let chunks = ingest_text(&path, 3, 7).unwrap();
    assert_eq!(chunks.len(), 3);
    assert_eq!(chunks, ingest_text(&path, 3, 7).unwrap());
    let mut firsts: Vec<usize> = chunks.iter().map(|c| c.tokens[0]).collect();
    firsts.sort();
    assert_eq!(firsts, vec![97, 100, 103]);
    assert_eq!(chunks[0].targets[0], None);
    assert_eq!(chunks[0].targets[1], Some(chunks[0].tokens[1]));
    assert!(matches!(ingest_text(&dir.path().join("missing"), 3, 0), Err(BstError::Io(_))));
}

#[test]
fn token_csv_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let samples = generate(&assoc(16, 4, 2), 5).unwrap();
    write_token_csv(&path, &samples).unwrap();
    assert_eq!(read_token_csv(&path).unwrap(), samples);
    std::fs::write(&path, "sample,position,token,target\n0,1,3,\n").unwrap();
    assert!(matches!(read_token_csv(&path), Err(BstError::Input(_))));
}

#[test]
fn shifted_targets_align_with_next_token_logits() {
    let b = Batch::from_samples(&[
        Sample { tokens: vec![5, 6, 7], targets: vec![None, None, Some(7)] },
        Sample { tokens: vec![1, 2, 3], targets: vec![None, Some(2), None] },
    ]);
    assert_eq!(b.shifted_targets(), vec![None, Some(7), None, Some(2), None, None]);
}

#[test]
fn warmup_then_cosine_rate() {
    let c = AdamConfig { lr: 1.0, warmup_steps: 4, total_steps: 14, min_lr_ratio: 0.0, ..AdamConfig::default() };
    assert_eq!(c.rate(0), 0.25);
    assert_eq!(c.rate(3), 1.0);
    assert!((c.rate(9) - 0.5).abs() < 1e-12);
    assert!(c.rate(14).abs() < 1e-12);
    assert!(c.rate(100).abs() < 1e-12);
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut params: ParamStore = ParamStore::new();
    params.insert("x", Tensor::from_f64(vec![2], &[3.0, -2.0]).unwrap());
    let cfg = AdamConfig { lr: 0.1, warmup_steps: 0, clip_norm: 0.0, ..AdamConfig::default() };
    let mut opt = Adam::new(cfg).unwrap();
    for _ in 0..500 {
        let tape = Tape::new();
        let p = params.bind(&tape);
        let x = p.var("x").unwrap();
        let loss = tape.sum_all(tape.mul(x, x).unwrap());
        opt.step(&mut params, tape.backward(loss).unwrap()).unwrap();
    }
    assert!(params.get("x").unwrap().max_abs() < 1e-2);
}

#[test]
fn first_adam_step_moves_each_coordinate_by_the_rate() {
    let mut params: ParamStore = ParamStore::new();
    params.insert("x", Tensor::from_f64(vec![2], &[1.0, 1.0]).unwrap());
    let tape = Tape::new();
    let p = params.bind(&tape);
    let x = p.var("x").unwrap();
    let loss = tape.sum_all(tape.mul(x, tape.constant(Tensor::from_f64(vec![2], &[3.0, -0.01]).unwrap())).unwrap());
    let mut opt = Adam::new(AdamConfig { lr: 0.1, warmup_steps: 0, clip_norm: 0.0, eps: 1e-12, ..AdamConfig::default() }).unwrap();
    opt.step(&mut params, tape.backward(loss).unwrap()).unwrap();
    let x = params.get("x").unwrap().data().to_vec();
    assert!((x[0] - 0.9).abs() < 1e-9 && (x[1] - 1.1).abs() < 1e-9, "{x:?}");
}

#[test]
fn accuracy_counts_only_scored_rows() {
    let logits: Tensor = Tensor::from_f64(vec![3, 2], &[0.0, 1.0, 2.0, 1.0, 5.0, 0.0]).unwrap();
    assert_eq!(target_accuracy(&logits, &[Some(1), None, Some(1)]), (1, 2));
}

#[test]
fn untrained_model_is_near_chance_and_training_reduces_loss() {
    let cfg = ModelConfig {
        num_layers: 1,
        bst_layers: [1].into_iter().collect(),
        window: 4,
        heads: 2,
        d_model: 16,
        state_size: 4,
        vocab_size: 10,
        seed: 1,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::init(cfg).unwrap();
    let spec = assoc(16, 0, 1);
    let test = generate(&TaskSpec { seed: 77, ..spec.clone() }, 400).unwrap();
    let before = evaluate(&model, &test, 50).unwrap();
    assert!(before.accuracy < 0.3, "{before:?}");
    assert!((before.loss - 10f64.ln()).abs() < 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tc = TrainConfig { steps: 60, batch: 8, adam: AdamConfig { lr: 3e-3, warmup_steps: 10, ..AdamConfig::default() } };
    let log = train(
        &mut model,
        &tc,
        |_| Ok(Batch::from_samples(&(0..8).map(|_| gen_assoc_recall(&spec, &mut rng)).collect::<Result<Vec<_>, _>>()?)),
        |_| {},
    )
    .unwrap();
    let head: f64 = log[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    let tail: f64 = log[50..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
    let logits = model.logits(&test[0].tokens, 1, BlockExec::Parallel).unwrap();
    assert!(logits.is_finite());
}

proptest! {
    #[test]
    fn generators_respect_the_gap(len in 40usize..200, gap in 0usize..30, seed: u64) {
        let spec = TaskSpec { seed, ..assoc(len, gap, 3) };
        let s = gen_assoc_recall(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (keys, _) = assoc_alphabets(10).unwrap();
        let last_key = (0..len - 3).filter(|&i| keys.contains(&s.tokens[i])).max().unwrap();
        prop_assert!(len - 1 - (last_key + 1) >= gap);
        prop_assert_eq!(s.tokens.len(), len);
    }
}

#[test]
fn min_len_is_the_shortest_generable_length() {
    for kind in [TaskKind::Copy, TaskKind::AssocRecall] {
        for (gap, items) in [(0, 1), (5, 2), (33, 2), (10, 4)] {
            let spec = TaskSpec { kind, len: 0, vocab: 12, gap, max_gap: None, items, seed: 1 };
            let n = spec.min_len();
            assert!(generate(&TaskSpec { len: n, ..spec.clone() }, 4).is_ok(), "{kind} gap {gap} items {items}");
            assert!(generate(&TaskSpec { len: n - 1, ..spec.clone() }, 4).is_err(), "{kind} gap {gap} items {items}");
        }
    }
}
