//! Training and evaluation loops for the language-model head.

use crate::error::{BstError, Result};
use crate::model::{lm_loss, BlockExec, Model};
use crate::optim::{Adam, AdamConfig};
use crate::real::Real;
use crate::tasks::{Batch, Sample};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 1000, batch: 16, adam: AdamConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub scored: usize,
}

/// Fraction of rows with a target whose argmax logit matches it.
/// `logits` is (…, vocab); `targets` has one entry per row.
pub fn target_accuracy<T: Real>(logits: &Tensor<T>, targets: &[Option<usize>]) -> (usize, usize) {
    let vocab = *logits.shape().last().unwrap_or(&1);
    let mut hits = 0;
    let mut scored = 0;
    for (row, t) in logits.data().chunks(vocab).zip(targets) {
        let Some(t) = *t else { continue };
        scored += 1;
        let best = row.iter().enumerate().fold(0, |b, (j, &x)| if x > row[b] { j } else { b });
        hits += usize::from(best == t);
    }
    (hits, scored)
}

/// One optimiser step on `batch`.
pub fn train_step<T: Real>(model: &mut Model<T>, opt: &mut Adam<T>, batch: &Batch) -> Result<StepRecord> {
    let step = opt.steps_taken();
    let targets = batch.shifted_targets();
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let logits = model.forward(&tape, &p, &batch.tokens, batch.rows, BlockExec::Parallel)?;
    let loss = lm_loss(&tape, logits, &targets)?;
    let loss_value = tape.value(loss).item().to_f64();
    if !loss_value.is_finite() {
        return Err(BstError::Divergence(format!("loss is {loss_value} at step {step}")));
    }
    let (hits, scored) = target_accuracy(&tape.value(logits), &targets);
    let grads = tape.backward(loss)?;
    let lr = opt.cfg.rate(step);
    let grad_norm = opt.step(&mut model.params, grads)?;
    model.project_constraints();
    Ok(StepRecord { step, loss: loss_value, accuracy: hits as f64 / scored.max(1) as f64, grad_norm, lr })
}

/// Trains for `cfg.steps` steps, drawing each batch from `next_batch`.
pub fn train<T: Real>(
    model: &mut Model<T>,
    cfg: &TrainConfig,
    mut next_batch: impl FnMut(usize) -> Result<Batch>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    let mut opt = Adam::new(cfg.adam.clone())?;
    let mut log = Vec::with_capacity(cfg.steps);
    for s in 0..cfg.steps {
        let rec = train_step(model, &mut opt, &next_batch(s)?)?;
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

/// Mean loss and target accuracy over `samples`, `batch` rows at a time.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[Sample], batch: usize) -> Result<EvalResult> {
    let mut loss = 0.0;
    let mut hits = 0;
    let mut scored = 0;
    for chunk in samples.chunks(batch.max(1)) {
        let b = Batch::from_samples(chunk);
        let targets = b.shifted_targets();
        let tape = Tape::inference();
        let p = model.params.bind(&tape);
        let logits = model.forward(&tape, &p, &b.tokens, b.rows, BlockExec::Parallel)?;
        let l = lm_loss(&tape, logits, &targets)?;
        let (h, n) = target_accuracy(&tape.value(logits), &targets);
        loss += tape.value(l).item().to_f64() * n as f64;
        hits += h;
        scored += n;
    }
    let n = scored.max(1) as f64;
    Ok(EvalResult { loss: loss / n, accuracy: hits as f64 / n, scored })
}
