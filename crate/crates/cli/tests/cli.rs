use std::path::Path;
use std::process::Command;

use bst_cli::bench::{n_log_n, n_squared, read_bench, run_bench, scaling_fit, write_bench, BENCH_FILE};
use bst_cli::commands::{run_gradcheck, run_kernel, run_train, GRADCHECK_FILE, KERNEL_FILE};
use bst_cli::{BenchKind, BenchSettings, RunConfig};
use bst_core::context::Variant;

const TINY: &str = "\
num_layers = 2
bst_layers = 1,2
d_model = 16
heads = 2
window = 4
state_size = 4
mf_states = 4
seq_len = 16
gap = 5
max_gap = 10
total_steps = 20
warmup_steps = 2
batch_size = 4
eval_samples = 16
eval_batch = 8
log_every = 5
";

fn tiny() -> RunConfig {
    RunConfig::parse(TINY).unwrap()
}

#[test]
fn rendered_config_parses_back_identically() {
    let mut cfg = tiny();
    cfg.set("variant", "mf").unwrap();
    cfg.set("bench_kinds", "bst_mh,ssm_sublayer_sh,brect_like").unwrap();
    cfg.set("max_gap", "none").unwrap();
    let again = RunConfig::parse(&cfg.render()).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(RunConfig::parse(&RunConfig::default().render()).unwrap(), RunConfig::default());
}

#[test]
fn config_errors_name_the_line() {
    let e = RunConfig::parse("window = 4\nbogus = 1\n").unwrap_err().to_string();
    assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
    assert!(RunConfig::parse("window = 4\nwindow = 8\n").is_err());
    assert!(RunConfig::parse("heads 4\n").is_err());
    assert!(RunConfig::parse("fd_eps = 1e-2\n").is_err());
    assert!(RunConfig::parse("bench_reps = 3\n").is_err());
    assert!("bst_xx".parse::<BenchKind>().is_err());
    assert_eq!("ssm_sublayer_mf".parse::<BenchKind>().unwrap(), BenchKind::Ssm(Variant::MultiFilter));
}

#[test]
fn gradcheck_passes_and_self_test_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    let cases = run_gradcheck(&cfg, dir.path(), |_| {}).unwrap();
    assert_eq!(cases.len(), 6);
    assert!(cases.iter().all(|c| c.passed), "{:?}", cases.iter().map(|c| c.report.max_rel_err).collect::<Vec<_>>());
    let rows = std::fs::read_to_string(dir.path().join(GRADCHECK_FILE)).unwrap();
    assert!(rows.lines().count() > 6);

    cfg.fd_self_test = true;
    let broken = run_gradcheck(&cfg, dir.path(), |_| {}).unwrap();
    assert!(broken.iter().all(|c| !c.passed));
    assert!(broken.iter().all(|c| c.report.groups.iter().any(|g| g.max_rel_err > cfg.fd_tol)));
}

#[test]
fn kernel_dump_covers_every_tap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    run_kernel(&cfg, dir.path()).unwrap();
    let mut r = csv::Reader::from_path(dir.path().join(KERNEL_FILE)).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), cfg.task.len * cfg.model.d_model);
    assert!(rows.iter().all(|r| r[3].parse::<f64>().unwrap().is_finite()));
}

#[test]
fn training_lowers_the_loss_and_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.set("total_steps", "60").unwrap();
    let out = run_train(&cfg, dir.path(), |_| {}).unwrap();
    let mean = |rs: &[bst_core::train::StepRecord]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64;
    let (first, last) = (mean(&out.log[..5]), mean(&out.log[out.log.len() - 5..]));
    assert!(last < first, "{first} -> {last}");
    cfg.checkpoint = Some(dir.path().join("checkpoint"));
    run_kernel(&cfg, &dir.path().join("k")).unwrap();
}

#[test]
fn small_bench_writes_every_kind_and_length() {
    let dir = tempfile::tempdir().unwrap();
    let b = BenchSettings {
        lengths: vec![16, 32],
        window: 8,
        width: 16,
        heads: 2,
        state_size: 4,
        mf_states: 4,
        ..BenchSettings::default()
    };
    let report = run_bench::<f64>(&b, 0, |_| {}).unwrap();
    assert_eq!(report.records.len(), b.kinds.len() * b.lengths.len());
    assert!(report.records.iter().all(|r| r.p10_ms <= r.median_ms && r.median_ms <= r.p90_ms));
    write_bench(dir.path(), &report).unwrap();
    let back = read_bench(&dir.path().join(BENCH_FILE)).unwrap();
    assert_eq!(back.len(), report.records.len());
    for (a, b) in back.iter().zip(&report.records) {
        assert_eq!((&a.layer_kind, &a.variant, a.len, a.reps), (&b.layer_kind, &b.variant, b.len, b.reps));
        assert!((a.median_ms - b.median_ms).abs() < 1e-4);
    }
}

#[test]
fn scaling_fit_prefers_the_generating_law() {
    let lin: Vec<(usize, f64)> = [256, 512, 1024, 2048].iter().map(|&l| (l, 3.0 * n_log_n(l as f64))).collect();
    assert!(scaling_fit(&lin, n_log_n) < 1e-12);
    assert!(scaling_fit(&lin, n_squared) > 0.5);
    let noisy: Vec<(usize, f64)> = lin.iter().zip([1.1, 0.9, 1.1, 0.9]).map(|(&(l, t), f)| (l, t * f)).collect();
    let (a, b) = (1.1f64.ln(), 0.9f64.ln());
    let want = ((a * a + b * b) / 2.0 - ((a + b) / 2.0).powi(2)).sqrt();
    assert!((scaling_fit(&noisy, n_log_n) - want).abs() < 1e-12);
    let quad: Vec<(usize, f64)> = [256, 512, 1024, 2048].iter().map(|&l| (l, n_squared(l as f64))).collect();
    assert!(scaling_fit(&quad, n_squared) < scaling_fit(&quad, n_log_n));
}

fn run_bst(dir: &Path, cmd: &str) {
    let status = Command::new(env!("CARGO_BIN_EXE_bst"))
        .args([cmd, "--config", dir.join("cfg.txt").to_str().unwrap(), "--seed", "3", "--out"])
        .arg(dir.join(cmd))
        .env("BST_DETERMINISTIC", "1")
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn binary_train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.txt"), TINY).unwrap();
    run_bst(dir.path(), "train");
    let a = std::fs::read(dir.path().join("train/metrics.csv")).unwrap();
    run_bst(dir.path(), "train");
    assert_eq!(std::fs::read(dir.path().join("train/metrics.csv")).unwrap(), a);
}

#[test]
fn f32_is_rejected_outside_bench() {
    let status = Command::new(env!("CARGO_BIN_EXE_bst")).args(["train", "--precision", "f32"]).status().unwrap();
    assert!(!status.success());
}
