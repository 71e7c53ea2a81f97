//! Forward-pass timing of single layers over a sweep of sequence lengths.

use std::path::Path;
use std::time::Instant;

use bst_core::context::Variant;
use bst_core::model::{
    bst_layer_forward, brect_like_layer_forward, layer_prefix, slide_like_layer_forward, ssm_sublayer, BaselineKind, BlockExec,
    Model, ModelConfig,
};
use bst_core::{Real, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{BenchKind, BenchSettings};
use crate::error::Result;

pub const BENCH_FILE: &str = "bench.csv";
pub const SKIPPED_FILE: &str = "bench_skipped.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub layer_kind: String,
    pub variant: String,
    pub len: usize,
    pub window: usize,
    pub state_size: usize,
    pub heads: usize,
    pub reps: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

pub const BENCH_HEADER: [&str; 10] = ["layer_kind", "variant", "L", "W", "N", "H", "reps", "median_ms", "p10_ms", "p90_ms"];

#[derive(Clone, Debug, PartialEq)]
pub struct Skipped {
    pub kind: String,
    pub len: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    pub skipped: Vec<Skipped>,
}

impl BenchReport {
    pub fn median(&self, layer_kind: &str, variant: &str, len: usize) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.layer_kind == layer_kind && r.variant == variant && r.len == len)
            .map(|r| r.median_ms)
    }
}

/// Linear-interpolated quantile of sorted `xs`.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let pos = q * (xs.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    xs[lo] + (xs[hi] - xs[lo]) * (pos - lo as f64)
}

/// Single-layer model for `kind` at the benchmark geometry.
pub fn bench_model_config(kind: BenchKind, b: &BenchSettings) -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        bst_layers: [1].into_iter().collect(),
        variant: kind.variant().unwrap_or(Variant::SingleHead),
        baseline: match kind {
            BenchKind::Slide => Some(BaselineKind::Slide),
            BenchKind::BrectLike => Some(BaselineKind::BrectLike),
            _ => None,
        },
        window: b.window,
        mf_states: b.mf_states,
        state_size: b.state_size,
        heads: b.heads,
        d_model: b.width,
        vocab_size: 2,
        ssm_downsample: false,
        ..ModelConfig::default()
    }
}

/// Peak bytes of one inference pass, which keeps every intermediate:
/// per-kind multiples of the (L, D) activation, calibrated from measured
/// peak RSS with some headroom, plus a fixed allowance.
pub fn estimated_bytes(kind: BenchKind, cfg: &ModelConfig, len: usize, elem: usize) -> usize {
    let ch = cfg.ssm_channels();
    let factor = match kind {
        BenchKind::Slide => 100,
        BenchKind::BrectLike => 200,
        BenchKind::Ssm(_) => 10 + 12 * ch,
        BenchKind::Bst(Variant::MultiFilter) | BenchKind::BstSequential(Variant::MultiFilter) => 150 + 4 * ch,
        BenchKind::Bst(_) | BenchKind::BstSequential(_) => 150 + 12 * ch,
    };
    len * cfg.d_model * elem * factor + (64 << 20)
}

fn time_one<T: Real>(kind: BenchKind, model: &Model<T>, x: &Tensor<T>) -> Result<f64> {
    let tape = Tape::inference();
    let p = model.params.bind(&tape);
    let xv = tape.constant(x.clone());
    let cfg = &model.cfg;
    let start = Instant::now();
    let y = match kind {
        BenchKind::Bst(_) => bst_layer_forward(&tape, &p, cfg, 1, xv, BlockExec::Parallel)?,
        BenchKind::BstSequential(_) => bst_layer_forward(&tape, &p, cfg, 1, xv, BlockExec::Sequential)?,
        BenchKind::Ssm(_) => ssm_sublayer(&tape, &p, cfg, &layer_prefix(1), xv)?,
        BenchKind::Slide => slide_like_layer_forward(&tape, &p, cfg, 1, xv, BlockExec::Parallel)?,
        BenchKind::BrectLike => brect_like_layer_forward(&tape, &p, cfg, 1, xv)?,
    };
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(tape.value(y));
    Ok(elapsed)
}

/// Times every kind at every length. At each length every kind gets
/// `warmup` discarded passes, then the `reps` timed passes are taken round
/// robin across kinds so that slow drift affects all kinds alike.
pub fn run_bench<T: Real>(b: &BenchSettings, seed: u64, mut progress: impl FnMut(&str)) -> Result<BenchReport> {
    let mut models = Vec::with_capacity(b.kinds.len());
    for &kind in &b.kinds {
        let mut cfg = bench_model_config(kind, b);
        cfg.seed = seed;
        let model = Model::<f64>::init(cfg.clone())?;
        models.push(Model { cfg, params: model.params.cast::<T>() });
    }
    let mut report = BenchReport::default();
    let mut records = vec![Vec::new(); b.kinds.len()];
    for &len in &b.lengths {
        let mut active = Vec::new();
        for (i, (&kind, model)) in b.kinds.iter().zip(&models).enumerate() {
            let need = estimated_bytes(kind, &model.cfg, len, std::mem::size_of::<T>());
            if need > b.mem_limit_mb << 20 {
                let reason = format!("estimated {} MB exceeds limit of {} MB", need >> 20, b.mem_limit_mb);
                progress(&format!("skip {} L={len}: {reason}", kind.key()));
                report.skipped.push(Skipped { kind: kind.key(), len, reason });
            } else {
                active.push(i);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ len as u64);
        let x = Tensor::<T>::from_fn(vec![1, len, b.width], |_| T::from_f64(rng.random_range(-1.0..1.0)));
        for &i in &active {
            for _ in 0..b.warmup {
                time_one(b.kinds[i], &models[i], &x)?;
            }
        }
        let mut times = vec![Vec::with_capacity(b.reps); b.kinds.len()];
        for _ in 0..b.reps {
            for &i in &active {
                times[i].push(time_one(b.kinds[i], &models[i], &x)?);
            }
        }
        for &i in &active {
            let kind = b.kinds[i];
            let t = &mut times[i];
            t.sort_by(f64::total_cmp);
            let rec = BenchRecord {
                layer_kind: kind.layer_kind().to_string(),
                variant: kind.variant().map_or("-", Variant::name).to_string(),
                len,
                window: b.window,
                state_size: b.state_size,
                heads: b.heads,
                reps: b.reps,
                median_ms: quantile(t, 0.5),
                p10_ms: quantile(t, 0.1),
                p90_ms: quantile(t, 0.9),
            };
            progress(&format!("{} L={len}: median {:.2} ms", kind.key(), rec.median_ms));
            records[i].push(rec);
        }
    }
    report.records = records.into_iter().flatten().collect();
    Ok(report)
}

pub fn write_bench(dir: &Path, report: &BenchReport) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(BENCH_FILE))?;
    w.write_record(BENCH_HEADER)?;
    for r in &report.records {
        w.write_record([
            r.layer_kind.clone(),
            r.variant.clone(),
            r.len.to_string(),
            r.window.to_string(),
            r.state_size.to_string(),
            r.heads.to_string(),
            r.reps.to_string(),
            format!("{:.4}", r.median_ms),
            format!("{:.4}", r.p10_ms),
            format!("{:.4}", r.p90_ms),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join(SKIPPED_FILE))?;
    w.write_record(["layer_kind", "L", "reason"])?;
    for s in &report.skipped {
        w.write_record([s.kind.clone(), s.len.to_string(), s.reason.clone()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bench(path: &Path) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let f = |i: usize| row.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            f(i).parse().map_err(|_| crate::error::CliError::config(format!("{}: bad number `{}`", path.display(), f(i))))
        };
        out.push(BenchRecord {
            layer_kind: f(0).to_string(),
            variant: f(1).to_string(),
            len: num(2)? as usize,
            window: num(3)? as usize,
            state_size: num(4)? as usize,
            heads: num(5)? as usize,
            reps: num(6)? as usize,
            median_ms: num(7)?,
            p10_ms: num(8)?,
            p90_ms: num(9)?,
        });
    }
    Ok(out)
}

/// Least-squares fit of `ln t ≈ ln c + ln g(L)` over the scale `c`;
/// returns the root-mean-square log residual.
pub fn scaling_fit(points: &[(usize, f64)], g: impl Fn(f64) -> f64) -> f64 {
    let r: Vec<f64> = points.iter().map(|&(l, t)| t.ln() - g(l as f64).ln()).collect();
    let n = r.len() as f64;
    let log_c = r.iter().sum::<f64>() / n;
    (r.iter().map(|x| (x - log_c).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn n_log_n(l: f64) -> f64 {
    l * l.log2()
}

pub fn n_squared(l: f64) -> f64 {
    l * l
}
