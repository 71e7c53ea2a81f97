//! Synthetic long-range tasks and byte-level text ingestion.
//!
//! Every sequence comes with a target vector aligned to the tokens:
//! `targets[i] = Some(tokens[i])` marks a scored token, which the model must
//! predict from positions `< i`. Use [`shift_targets`] to align them with
//! next-token logits.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, BstError, Result};

/// Filler token shared by the synthetic tasks.
pub const FILLER: usize = 0;
/// Copy delimiter and associative-recall query marker.
pub const MARKER: usize = 1;
const RESERVED: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    AssocRecall,
    Text,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Copy => "copy",
            Self::AssocRecall => "assoc_recall",
            Self::Text => "text",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = BstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "assoc_recall" => Ok(Self::AssocRecall),
            "text" => Ok(Self::Text),
            _ => Err(config_err(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub len: usize,
    pub vocab: usize,
    /// Minimum distance in tokens between the information and the scored
    /// position that needs it.
    pub gap: usize,
    /// Largest cue-to-answer distance for assoc_recall; `None` lets the pairs
    /// sit anywhere before the query.
    pub max_gap: Option<usize>,
    /// Pattern length (copy) or number of key-value pairs (assoc_recall).
    pub items: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// Shortest sequence a synthetic sample fits in.
    pub fn min_len(&self) -> usize {
        match self.kind {
            TaskKind::Copy => 2 * self.items + self.gap + 1,
            TaskKind::AssocRecall => 2 * self.items + self.gap.max(3),
            TaskKind::Text => 1,
        }
    }
}

/// One sequence and its aligned targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

/// `batch` samples laid out row after row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub rows: usize,
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Self {
        Self {
            tokens: samples.iter().flat_map(|s| s.tokens.iter().copied()).collect(),
            targets: samples.iter().flat_map(|s| s.targets.iter().copied()).collect(),
            rows: samples.len(),
        }
    }

    /// Targets aligned with next-token logits.
    pub fn shifted_targets(&self) -> Vec<Option<usize>> {
        let len = self.tokens.len() / self.rows.max(1);
        self.targets.chunks(len.max(1)).flat_map(shift_targets).collect()
    }
}

/// `out[i] = targets[i + 1]`, with `None` at the last position.
pub fn shift_targets(targets: &[Option<usize>]) -> Vec<Option<usize>> {
    targets.iter().skip(1).copied().chain(std::iter::once(None)).collect()
}

/// Key and value alphabets of the associative-recall task.
pub fn assoc_alphabets(vocab: usize) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    if vocab < RESERVED + 2 || !(vocab - RESERVED).is_multiple_of(2) {
        return Err(config_err(format!(
            "assoc_recall needs an even number of key/value symbols; vocab {vocab} leaves {}",
            vocab.saturating_sub(RESERVED)
        )));
    }
    let half = (vocab - RESERVED) / 2;
    Ok((RESERVED..RESERVED + half, RESERVED + half..vocab))
}

/// Accuracy of the best guess that ignores the pairs.
pub fn assoc_chance(vocab: usize) -> Result<f64> {
    Ok(1.0 / assoc_alphabets(vocab)?.1.len() as f64)
}

/// Layout: `pattern, filler × gap, MARKER, pattern, filler…`; the copied
/// pattern is scored.
pub fn gen_copy<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Result<Sample> {
    let p = spec.items;
    if p == 0 || spec.vocab <= RESERVED {
        return Err(config_err("copy needs a non-empty pattern and at least one symbol"));
    }
    let need = 2 * p + spec.gap + 1;
    if spec.len < need {
        return Err(config_err(format!("copy of {p} symbols across gap {} needs L ≥ {need}, got {}", spec.gap, spec.len)));
    }
    let pattern: Vec<usize> = (0..p).map(|_| rng.random_range(RESERVED..spec.vocab)).collect();
    let mut tokens = vec![FILLER; spec.len];
    let mut targets = vec![None; spec.len];
    tokens[..p].copy_from_slice(&pattern);
    let delim = p + spec.gap;
    tokens[delim] = MARKER;
    for (j, &s) in pattern.iter().enumerate() {
        tokens[delim + 1 + j] = s;
        targets[delim + 1 + j] = Some(s);
    }
    Ok(Sample { tokens, targets })
}

/// Layout: `filler…, k1 v1 … kP vP, filler…, MARKER, k, v`; only the final
/// `v` is scored. Its distance `d` from the last pair's value is uniform
/// over `gap ..= max_gap` (capped by the length), so every pair is at least
/// `gap` tokens back.
pub fn gen_assoc_recall<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Result<Sample> {
    let (keys, values) = assoc_alphabets(spec.vocab)?;
    let p = spec.items;
    if p == 0 || p > keys.len() {
        return Err(config_err(format!("assoc_recall needs 1..={} pairs, got {p}", keys.len())));
    }
    let len = spec.len;
    let lo = spec.gap.max(3);
    let hi = spec.max_gap.unwrap_or(usize::MAX).min(len.saturating_sub(2 * p));
    if lo > hi {
        return Err(config_err(format!(
            "assoc_recall with {p} pairs and gap {}..={:?} does not fit in L = {len}",
            spec.gap, spec.max_gap
        )));
    }
    let start = len - 2 * p - rng.random_range(lo..=hi);
    let chosen = index::sample(rng, keys.len(), p);
    let mut tokens = vec![FILLER; len];
    let mut pairs = Vec::with_capacity(p);
    for (j, k) in chosen.into_iter().enumerate() {
        let key = keys.start + k;
        let value = rng.random_range(values.clone());
        tokens[start + 2 * j] = key;
        tokens[start + 2 * j + 1] = value;
        pairs.push((key, value));
    }
    let (key, value) = pairs[rng.random_range(0..p)];
    tokens[len - 3] = MARKER;
    tokens[len - 2] = key;
    tokens[len - 1] = value;
    let mut targets = vec![None; len];
    targets[len - 1] = Some(value);
    Ok(Sample { tokens, targets })
}

/// Generates `n` samples from a stream seeded by `spec.seed`.
pub fn generate(spec: &TaskSpec, n: usize) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..n)
        .map(|_| match spec.kind {
            TaskKind::Copy => gen_copy(spec, &mut rng),
            TaskKind::AssocRecall => gen_assoc_recall(spec, &mut rng),
            TaskKind::Text => Err(config_err("text samples come from ingest_text")),
        })
        .collect()
}

/// Bytes of `path` as tokens (vocabulary 256).
pub fn read_bytes(path: &Path) -> Result<Vec<usize>> {
    Ok(std::fs::read(path)?.into_iter().map(usize::from).collect())
}

/// `⌊bytes / len⌋` training sequences in a seeded order. Every position
/// after the first is scored.
pub fn ingest_text(path: &Path, len: usize, seed: u64) -> Result<Vec<Sample>> {
    if len == 0 {
        return Err(config_err("sequence length must be positive"));
    }
    let bytes = read_bytes(path)?;
    let mut chunks: Vec<Sample> = bytes
        .chunks_exact(len)
        .map(|c| Sample {
            tokens: c.to_vec(),
            targets: c.iter().enumerate().map(|(i, &t)| (i > 0).then_some(t)).collect(),
        })
        .collect();
    chunks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(chunks)
}

/// Token CSV: header `sample,position,token,target`, target empty when
/// unscored.
pub fn write_token_csv(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = String::from("sample,position,token,target\n");
    for (s, sample) in samples.iter().enumerate() {
        for (i, (&t, target)) in sample.tokens.iter().zip(&sample.targets).enumerate() {
            let target = target.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!("{s},{i},{t},{target}\n"));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_token_csv(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "sample,position,token,target")) => {}
        _ => return Err(BstError::Input(format!("{}: missing token CSV header", path.display()))),
    }
    let bad = |ln: usize| BstError::Input(format!("{} line {}: malformed row", path.display(), ln + 1));
    let mut samples: Vec<Sample> = Vec::new();
    for (ln, line) in lines.filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(ln));
        }
        let s: usize = f[0].parse().map_err(|_| bad(ln))?;
        let i: usize = f[1].parse().map_err(|_| bad(ln))?;
        let token: usize = f[2].parse().map_err(|_| bad(ln))?;
        let target = if f[3].is_empty() { None } else { Some(f[3].parse().map_err(|_| bad(ln))?) };
        if s == samples.len() {
            samples.push(Sample { tokens: Vec::new(), targets: Vec::new() });
        }
        let sample = samples.get_mut(s).filter(|x| x.tokens.len() == i).ok_or_else(|| bad(ln))?;
        sample.tokens.push(token);
        sample.targets.push(target);
    }
    Ok(samples)
}
