//! Training, gradient checking, length generalisation and kernel dumps.

use std::fs;
use std::path::Path;

use bst_core::context::Variant;
use bst_core::model::{load_checkpoint, model_gradcheck, save_checkpoint, Model, ModelConfig};
use bst_core::ssm::KernelFamily;
use bst_core::tasks::{gen_assoc_recall, gen_copy, generate, ingest_text, Batch, Sample, TaskKind, TaskSpec};
use bst_core::tensor::{Fault, FdReport};
use bst_core::train::{evaluate, train, EvalResult, StepRecord};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const LENGEN_FILE: &str = "lengen.csv";
pub const KERNEL_FILE: &str = "kernel.csv";

/// Creates `out` and records the resolved configuration in it.
pub fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.render())?;
    Ok(())
}

/// Training and held-out data for the configured task. Training batches
/// are drawn from a stream seeded by `seed + 1`; evaluation samples use
/// `seed + 2`.
pub struct DataSource {
    spec: TaskSpec,
    rng: ChaCha8Rng,
    text: Option<Vec<Sample>>,
}

impl DataSource {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let spec = TaskSpec { vocab: cfg.model.vocab_size, ..cfg.task.clone() };
        let text = match spec.kind {
            TaskKind::Text => {
                let path = cfg.text_path.as_ref().ok_or_else(|| CliError::config("task = text needs text_path"))?;
                let chunks = ingest_text(path, spec.len, spec.seed)?;
                if chunks.is_empty() {
                    return Err(CliError::config(format!("{} is shorter than one sequence", path.display())));
                }
                Some(chunks)
            }
            _ => None,
        };
        Ok(Self { rng: ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1)), spec, text })
    }

    pub fn batch(&mut self, rows: usize) -> bst_core::Result<Batch> {
        let samples = (0..rows)
            .map(|_| match (&self.text, self.spec.kind) {
                (Some(chunks), _) => Ok(chunks.choose(&mut self.rng).expect("non-empty").clone()),
                (None, TaskKind::Copy) => gen_copy(&self.spec, &mut self.rng),
                (None, _) => gen_assoc_recall(&self.spec, &mut self.rng),
            })
            .collect::<bst_core::Result<Vec<_>>>()?;
        Ok(Batch::from_samples(&samples))
    }

    /// Held-out samples at sequence length `len`.
    pub fn eval_set(&self, len: usize, n: usize) -> Result<Vec<Sample>> {
        match &self.text {
            Some(chunks) => Ok(chunks.iter().take(n).cloned().collect()),
            None => Ok(generate(&TaskSpec { len, seed: self.spec.seed.wrapping_add(2), ..self.spec.clone() }, n)?),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f64>,
    pub log: Vec<StepRecord>,
    pub eval: EvalResult,
}

/// Trains `model_cfg` on the configured task and evaluates on held-out
/// samples at the training length.
pub fn train_model(cfg: &RunConfig, model_cfg: ModelConfig, mut progress: impl FnMut(&str)) -> Result<TrainOutcome> {
    let mut model = Model::<f64>::init(model_cfg)?;
    let mut data = DataSource::new(cfg)?;
    let every = cfg.log_every.max(1);
    let mut window = Vec::new();
    let log = train(&mut model, &cfg.train, |_| data.batch(cfg.train.batch), |r| {
        window.push((r.loss, r.accuracy));
        if (r.step + 1) % every == 0 {
            let n = window.len() as f64;
            let (l, a) = window.drain(..).fold((0.0, 0.0), |(l, a), (x, y)| (l + x, a + y));
            progress(&format!("step {} loss {:.4} acc {:.3}", r.step + 1, l / n, a / n));
        }
    })?;
    let eval = evaluate(&model, &data.eval_set(cfg.task.len, cfg.eval_samples)?, cfg.eval_batch)?;
    Ok(TrainOutcome { model, log, eval })
}

pub fn write_metrics(path: &Path, log: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "accuracy", "grad_norm", "lr"])?;
    for r in log {
        w.write_record([r.step.to_string(), r.loss.to_string(), r.accuracy.to_string(), r.grad_norm.to_string(), r.lr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `train`: metrics, held-out evaluation and a checkpoint under `out`.
pub fn run_train(cfg: &RunConfig, out: &Path, progress: impl FnMut(&str)) -> Result<TrainOutcome> {
    prepare_out(cfg, out)?;
    let outcome = train_model(cfg, cfg.model.clone(), progress)?;
    write_metrics(&out.join(METRICS_FILE), &outcome.log)?;
    let mut w = csv::Writer::from_path(out.join(EVAL_FILE))?;
    w.write_record(["label", "L", "loss", "accuracy", "scored"])?;
    let e = outcome.eval;
    w.write_record([cfg.model.label(), cfg.task.len.to_string(), e.loss.to_string(), e.accuracy.to_string(), e.scored.to_string()])?;
    w.flush()?;
    save_checkpoint(&out.join(CHECKPOINT_DIR), &outcome.model.params)?;
    Ok(outcome)
}

#[derive(Clone, Debug)]
pub struct GradcheckCase {
    pub variant: Variant,
    pub family: KernelFamily,
    pub report: FdReport,
    pub passed: bool,
}

/// Finite-difference check of every variant × kernel family on the
/// configured (small) model. With `fd_self_test` the analytic pass uses a
/// corrupted backward rule and every case is expected to fail.
pub fn run_gradcheck(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(&str)) -> Result<Vec<GradcheckCase>> {
    prepare_out(cfg, out)?;
    let mut settings = cfg.fd.clone();
    settings.fault = cfg.fd_self_test.then_some(Fault::MatmulRhsGrad);
    let len = cfg.task.len;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed);
    let vocab = cfg.model.vocab_size;
    let tokens: Vec<usize> = (0..len).map(|_| rand::Rng::random_range(&mut rng, 0..vocab)).collect();
    let targets: Vec<Option<usize>> = tokens[1..].iter().map(|&t| Some(t)).chain([None]).collect();
    let mut cases = Vec::new();
    for variant in Variant::ALL {
        for family in [KernelFamily::Structured, KernelFamily::Unstructured] {
            let mcfg = ModelConfig { variant, kernel_family: family, baseline: None, ..cfg.model.clone() };
            let mut model = Model::<f64>::init(mcfg)?;
            perturb_zero_init(&mut model, cfg.model.seed);
            let report = model_gradcheck(&model, &tokens, &targets, 1, &settings)?;
            let passed = report.passed(cfg.fd_tol);
            progress(&format!(
                "{variant}:{} max rel err {:.3e} in {} -> {}",
                family.name(),
                report.max_rel_err,
                report.worst_group,
                if passed { "pass" } else { "FAIL" }
            ));
            cases.push(GradcheckCase { variant, family, report, passed });
        }
    }
    let mut w = csv::Writer::from_path(out.join(GRADCHECK_FILE))?;
    w.write_record(["variant", "family", "group", "coords", "max_rel_err", "worst_index", "analytic", "numeric", "passed"])?;
    for c in &cases {
        for g in &c.report.groups {
            w.write_record([
                c.variant.to_string(),
                c.family.name().to_string(),
                g.name.clone(),
                g.coords_checked.to_string(),
                format!("{:e}", g.max_rel_err),
                g.worst_index.to_string(),
                format!("{:e}", g.worst_analytic),
                format!("{:e}", g.worst_numeric),
                (g.max_rel_err <= cfg.fd_tol).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(cases)
}

/// Moves parameters that start at exactly zero or one (relative-position
/// bias, context ids, lifts, gates) off their initial values so that the
/// check exercises every path.
pub fn perturb_zero_init(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".rel") || name.contains(".ctx.") || name.ends_with(".wg") || name.ends_with(".bg") {
            for x in t.data_mut() {
                *x += rand::Rng::random_range(&mut rng, -0.5..0.5);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengenRow {
    pub eval_len: usize,
    pub variant: Variant,
    pub family: KernelFamily,
    pub loss: f64,
    pub accuracy: f64,
}

/// Trains one model per kernel family at the configured length, then
/// evaluates each at ½, 1, 2 and 4 times that length, skipping lengths the
/// task does not fit in. Structured kernels
/// are regenerated at the evaluation length; unstructured filters are
/// resampled over it.
pub fn run_lengen(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(&str)) -> Result<Vec<LengenRow>> {
    prepare_out(cfg, out)?;
    if cfg.task.kind != TaskKind::AssocRecall {
        return Err(CliError::config("lengen runs on task = assoc_recall"));
    }
    let train_len = cfg.task.len;
    let mut rows = Vec::new();
    for &family in &cfg.lengen_families {
        let mcfg = ModelConfig { kernel_family: family, ..cfg.model.clone() };
        let label = mcfg.label();
        let outcome = train_model(cfg, mcfg, |m| progress(&format!("{label}: {m}")))?;
        let dir = out.join(format!("{CHECKPOINT_DIR}_{}", family.name()));
        save_checkpoint(&dir, &outcome.model.params)?;
        write_metrics(&out.join(format!("metrics_{}.csv", family.name())), &outcome.log)?;
        let data = DataSource::new(cfg)?;
        for eval_len in [train_len / 2, train_len, 2 * train_len, 4 * train_len] {
            if eval_len < cfg.task.min_len() || eval_len % cfg.model.window != 0 {
                progress(&format!("{label} L={eval_len}: skipped, the task needs L >= {}", cfg.task.min_len()));
                continue;
            }
            let e = evaluate(&outcome.model, &data.eval_set(eval_len, cfg.eval_samples)?, cfg.eval_batch)?;
            progress(&format!("{label} L={eval_len}: loss {:.4} acc {:.3}", e.loss, e.accuracy));
            rows.push(LengenRow { eval_len, variant: cfg.model.variant, family, loss: e.loss, accuracy: e.accuracy });
        }
    }
    let mut w = csv::Writer::from_path(out.join(LENGEN_FILE))?;
    w.write_record(["eval_len", "variant", "family", "loss", "accuracy"])?;
    for r in &rows {
        w.write_record([r.eval_len.to_string(), r.variant.to_string(), r.family.name().to_string(), r.loss.to_string(), r.accuracy.to_string()])?;
    }
    w.flush()?;
    Ok(rows)
}

/// Writes the kernels of one block-state layer at `seq_len` as
/// `t,channel,dim,value` rows, from `checkpoint` when set.
pub fn run_kernel(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    let mut model = Model::<f64>::init(cfg.model.clone())?;
    if let Some(dir) = &cfg.checkpoint {
        model.params = load_checkpoint(dir)?;
    }
    let layer = match cfg.kernel_layer {
        Some(l) => l,
        None => *cfg.model.bst_layers.iter().next().ok_or_else(|| CliError::config("the model has no block-state layer"))?,
    };
    let bank = model.kernel_source(layer)?.materialize(cfg.task.len)?;
    let mut w = csv::Writer::from_path(out.join(KERNEL_FILE))?;
    w.write_record(["t", "channel", "dim", "value"])?;
    let k = &bank.kernels;
    let (len, ch, dims) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    for t in 0..len {
        for c in 0..ch {
            for d in 0..dims {
                w.write_record([t.to_string(), c.to_string(), d.to_string(), k.data()[(t * ch + c) * dims + d].to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Evaluation at the training length, for reporting.
pub fn describe(e: &EvalResult) -> String {
    format!("loss {:.4} accuracy {:.4} over {} targets", e.loss, e.accuracy, e.scored)
}
