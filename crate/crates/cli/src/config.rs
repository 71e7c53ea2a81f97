//! `key = value` run configuration shared by every subcommand.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bst_core::context::Variant;
use bst_core::model::{BaselineKind, ModelConfig};
use bst_core::optim::AdamConfig;
use bst_core::ssm::KernelFamily;
use bst_core::tasks::{TaskKind, TaskSpec};
use bst_core::tensor::FdSettings;
use bst_core::train::TrainConfig;

use crate::error::{CliError, Result};

/// Layer timed by the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKind {
    /// Block-state layer with parallel block execution.
    Bst(Variant),
    /// Block-state layer evaluated one block at a time.
    BstSequential(Variant),
    /// SSM path only: kernel generation plus convolution.
    Ssm(Variant),
    Slide,
    BrectLike,
}

impl BenchKind {
    pub fn layer_kind(self) -> &'static str {
        match self {
            Self::Bst(_) => "bst",
            Self::BstSequential(_) => "bst_sequential",
            Self::Ssm(_) => "ssm_sublayer",
            Self::Slide => "slide",
            Self::BrectLike => "brect_like",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Self::Bst(v) | Self::BstSequential(v) | Self::Ssm(v) => Some(v),
            Self::Slide | Self::BrectLike => None,
        }
    }

    pub fn key(self) -> String {
        match self.variant() {
            Some(v) => format!("{}_{}", self.layer_kind(), v.name().to_lowercase()),
            None => self.layer_kind().to_string(),
        }
    }
}

impl FromStr for BenchKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "slide" {
            return Ok(Self::Slide);
        }
        if s == "brect_like" {
            return Ok(Self::BrectLike);
        }
        let (kind, variant) = s.rsplit_once('_').ok_or_else(|| CliError::config(format!("unknown bench kind `{s}`")))?;
        let variant: Variant = variant.to_uppercase().parse()?;
        match kind {
            "bst" => Ok(Self::Bst(variant)),
            "bst_sequential" => Ok(Self::BstSequential(variant)),
            "ssm_sublayer" => Ok(Self::Ssm(variant)),
            _ => Err(CliError::config(format!("unknown bench kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSettings {
    pub lengths: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub window: usize,
    pub state_size: usize,
    pub heads: usize,
    /// Model and SSM width (the SSM runs without down-sampling).
    pub width: usize,
    pub mf_states: usize,
    pub kinds: Vec<BenchKind>,
    /// Sweep points whose estimated footprint exceeds this are skipped.
    pub mem_limit_mb: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            lengths: vec![1024, 2048, 4096, 8192],
            reps: 5,
            warmup: 2,
            window: 128,
            state_size: 16,
            heads: 16,
            width: 512,
            mf_states: 16,
            kinds: vec![
                BenchKind::Bst(Variant::SingleHead),
                BenchKind::Bst(Variant::MultiHead),
                BenchKind::Bst(Variant::MultiFilter),
                BenchKind::Slide,
                BenchKind::BrectLike,
                BenchKind::Ssm(Variant::SingleHead),
            ],
            mem_limit_mb: 4500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub text_path: Option<PathBuf>,
    pub train: TrainConfig,
    pub eval_samples: usize,
    pub eval_batch: usize,
    pub log_every: usize,
    pub bench: BenchSettings,
    pub fd: FdSettings,
    pub fd_tol: f64,
    /// Runs the gradient check against a deliberately broken backward rule.
    pub fd_self_test: bool,
    pub lengen_families: Vec<KernelFamily>,
    pub checkpoint: Option<PathBuf>,
    pub kernel_layer: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig {
            num_layers: 2,
            bst_layers: [2].into_iter().collect(),
            window: 8,
            state_size: 16,
            heads: 4,
            d_model: 64,
            vocab_size: 10,
            mf_states: 8,
            ssm_downsample: false,
            ..ModelConfig::default()
        };
        Self {
            task: TaskSpec { kind: TaskKind::AssocRecall, len: 64, vocab: 10, gap: 33, max_gap: Some(48), items: 2, seed: 0 },
            model,
            text_path: None,
            train: TrainConfig {
                steps: 6000,
                batch: 16,
                adam: AdamConfig { lr: 2e-3, warmup_steps: 50, total_steps: 6000, ..AdamConfig::default() },
            },
            eval_samples: 512,
            eval_batch: 32,
            log_every: 100,
            bench: BenchSettings::default(),
            fd: FdSettings::default(),
            fd_tol: 1e-4,
            fd_self_test: false,
            lengen_families: vec![KernelFamily::Structured, KernelFamily::Unstructured],
            checkpoint: None,
            kernel_layer: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| CliError::config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}: expected `key = value`", ln + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::config(format!("line {}: `{key}` given twice", ln + 1)));
            }
            cfg.set(key, value).map_err(|e| CliError::config(format!("line {}: {e}", ln + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "num_layers" => m.num_layers = parse(key, v)?,
            "bst_layers" => m.bst_layers = parse_list(key, v)?.into_iter().collect(),
            "variant" => m.variant = parse(key, v)?,
            "kernel_family" => m.kernel_family = parse(key, v)?,
            "baseline" => m.baseline = if v == "none" { None } else { Some(parse::<BaselineKind>(key, v)?) },
            "window" => m.window = parse(key, v)?,
            "mf_states" => m.mf_states = parse(key, v)?,
            "state_size" => m.state_size = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "d_model" => m.d_model = parse(key, v)?,
            "vocab_size" => {
                m.vocab_size = parse(key, v)?;
                self.task.vocab = m.vocab_size;
            }
            "seed" => self.set_seed(parse(key, v)?),
            "ssm_downsample" => m.ssm_downsample = parse_bool(key, v)?,
            "ssm_skip" => m.ssm_skip = parse_bool(key, v)?,
            "prev_block_cache" => m.prev_block_cache = parse_bool(key, v)?,
            "context_ids" => m.context_ids = parse_bool(key, v)?,
            "task" => self.task.kind = parse(key, v)?,
            "seq_len" => self.task.len = parse(key, v)?,
            "gap" => self.task.gap = parse(key, v)?,
            "max_gap" => self.task.max_gap = parse_opt(key, v)?,
            "items" => self.task.items = parse(key, v)?,
            "text_path" => self.text_path = parse_opt(key, v)?,
            "eval_samples" => self.eval_samples = parse(key, v)?,
            "eval_batch" => self.eval_batch = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "lr" => self.train.adam.lr = parse(key, v)?,
            "warmup_steps" => self.train.adam.warmup_steps = parse(key, v)?,
            "total_steps" => {
                self.train.steps = parse(key, v)?;
                self.train.adam.total_steps = self.train.steps;
            }
            "batch_size" => self.train.batch = parse(key, v)?,
            "clip_norm" => self.train.adam.clip_norm = parse(key, v)?,
            "weight_decay" => self.train.adam.weight_decay = parse(key, v)?,
            "min_lr_ratio" => self.train.adam.min_lr_ratio = parse(key, v)?,
            "bench_lengths" => self.bench.lengths = parse_list(key, v)?,
            "bench_reps" => self.bench.reps = parse(key, v)?,
            "bench_warmup" => self.bench.warmup = parse(key, v)?,
            "bench_window" => self.bench.window = parse(key, v)?,
            "bench_state_size" => self.bench.state_size = parse(key, v)?,
            "bench_heads" => self.bench.heads = parse(key, v)?,
            "bench_width" => self.bench.width = parse(key, v)?,
            "bench_mf_states" => self.bench.mf_states = parse(key, v)?,
            "bench_kinds" => self.bench.kinds = parse_list(key, v)?,
            "bench_mem_limit_mb" => self.bench.mem_limit_mb = parse(key, v)?,
            "fd_eps" => self.fd.eps = parse(key, v)?,
            "fd_coords" => self.fd.coords = parse(key, v)?,
            "fd_floor" => self.fd.floor = parse(key, v)?,
            "fd_tol" => self.fd_tol = parse(key, v)?,
            "fd_self_test" => self.fd_self_test = parse_bool(key, v)?,
            "lengen_families" => self.lengen_families = parse_list(key, v)?,
            "checkpoint" => self.checkpoint = parse_opt(key, v)?,
            "kernel_layer" => self.kernel_layer = parse_opt(key, v)?,
            _ => return Err(CliError::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Model initialisation, data streams and finite-difference sampling all
    /// derive from this one seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.task.seed = seed;
        self.fd.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.adam.validate()?;
        if self.train.batch == 0 || self.eval_batch == 0 || self.bench.reps < 5 {
            return Err(CliError::config("batch sizes must be positive and bench_reps at least 5"));
        }
        if !(1e-7..=1e-4).contains(&self.fd.eps) {
            return Err(CliError::config(format!("fd_eps {} outside [1e-7, 1e-4]", self.fd.eps)));
        }
        if self.bench.lengths.iter().any(|&l| l == 0 || l % self.bench.window != 0) {
            return Err(CliError::config("bench_lengths must be positive multiples of bench_window"));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a form [`RunConfig::parse`]
    /// reads back.
    pub fn render(&self) -> String {
        let m = &self.model;
        let a = &self.train.adam;
        let b = &self.bench;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("num_layers", m.num_layers.to_string());
        kv("bst_layers", join(&m.bst_layers));
        kv("variant", m.variant.to_string());
        kv("kernel_family", m.kernel_family.name().to_string());
        kv("baseline", m.baseline.map_or("none", BaselineKind::name).to_string());
        kv("window", m.window.to_string());
        kv("mf_states", m.mf_states.to_string());
        kv("state_size", m.state_size.to_string());
        kv("heads", m.heads.to_string());
        kv("d_model", m.d_model.to_string());
        kv("vocab_size", m.vocab_size.to_string());
        kv("seed", m.seed.to_string());
        kv("ssm_downsample", m.ssm_downsample.to_string());
        kv("ssm_skip", m.ssm_skip.to_string());
        kv("prev_block_cache", m.prev_block_cache.to_string());
        kv("context_ids", m.context_ids.to_string());
        kv("task", self.task.kind.to_string());
        kv("seq_len", self.task.len.to_string());
        kv("gap", self.task.gap.to_string());
        kv("max_gap", opt(&self.task.max_gap));
        kv("items", self.task.items.to_string());
        kv("text_path", opt(&self.text_path.as_ref().map(|p| p.display().to_string())));
        kv("eval_samples", self.eval_samples.to_string());
        kv("eval_batch", self.eval_batch.to_string());
        kv("log_every", self.log_every.to_string());
        kv("lr", a.lr.to_string());
        kv("warmup_steps", a.warmup_steps.to_string());
        kv("total_steps", self.train.steps.to_string());
        kv("batch_size", self.train.batch.to_string());
        kv("clip_norm", a.clip_norm.to_string());
        kv("weight_decay", a.weight_decay.to_string());
        kv("min_lr_ratio", a.min_lr_ratio.to_string());
        kv("bench_lengths", join(&b.lengths));
        kv("bench_reps", b.reps.to_string());
        kv("bench_warmup", b.warmup.to_string());
        kv("bench_window", b.window.to_string());
        kv("bench_state_size", b.state_size.to_string());
        kv("bench_heads", b.heads.to_string());
        kv("bench_width", b.width.to_string());
        kv("bench_mf_states", b.mf_states.to_string());
        kv("bench_kinds", join(b.kinds.iter().map(|k| k.key())));
        kv("bench_mem_limit_mb", b.mem_limit_mb.to_string());
        kv("fd_eps", self.fd.eps.to_string());
        kv("fd_coords", self.fd.coords.to_string());
        kv("fd_floor", self.fd.floor.to_string());
        kv("fd_tol", self.fd_tol.to_string());
        kv("fd_self_test", self.fd_self_test.to_string());
        kv("lengen_families", join(self.lengen_families.iter().map(|f| f.name())));
        kv("checkpoint", opt(&self.checkpoint.as_ref().map(|p| p.display().to_string())));
        kv("kernel_layer", opt(&self.kernel_layer));
        s
    }
}
