//! Block-local attention: causal self-attention with an optional one-block
//! key/value cache and T5-style relative bias, cross-attention to context
//! states, and the full block sublayer.
//!
//! Token tensors are laid out as (batch, blocks, W, D). Every op is row- or
//! block-local, so evaluating all blocks at once gives the same numbers as a
//! loop over single blocks.

use rand::Rng;

use crate::context::ContextTensor;
use crate::error::{config_err, dim_err, BstError, Result};
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionBlockConfig {
    pub window: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    pub use_prev_block_cache: bool,
    pub rel_buckets: usize,
    pub rel_max_distance: usize,
}

impl AttentionBlockConfig {
    pub fn new(d_model: usize, heads: usize, window: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(config_err(format!("model width {d_model} is not divisible by {heads} heads")));
        }
        if window == 0 {
            return Err(config_err("window length must be positive"));
        }
        Ok(Self {
            window,
            heads,
            head_dim: d_model / heads,
            d_model,
            use_prev_block_cache: true,
            rel_buckets: 32,
            rel_max_distance: 128,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads * self.head_dim != self.d_model {
            return Err(config_err(format!(
                "{} heads of width {} do not make model width {}",
                self.heads, self.head_dim, self.d_model
            )));
        }
        Ok(())
    }
}

/// T5 bucket of a causal distance `i − j ≥ 0`: exact below half the
/// buckets, log-spaced up to `max_distance`, saturating after.
pub fn relative_bucket(distance: usize, num_buckets: usize, max_distance: usize) -> usize {
    let exact = (num_buckets / 2).max(1);
    if distance < exact {
        return distance;
    }
    let span = (max_distance as f64 / exact as f64).ln();
    let v = exact + ((distance as f64 / exact as f64).ln() / span * (num_buckets - exact) as f64) as usize;
    v.min(num_buckets - 1)
}

/// Bias table lookup, (H, q_len, k_len). Key `j` sits `offset` positions
/// before query row 0, so the distance is `i + offset − j`; acausal pairs
/// read bucket 0 and are expected to be masked.
pub fn relative_position_bias<T: Real>(
    tape: &Tape<T>,
    table: Var,
    q_len: usize,
    k_len: usize,
    offset: usize,
    max_distance: usize,
) -> Result<Var> {
    let s = tape.shape(table);
    if s.len() != 2 {
        return Err(dim_err(format!("relative bias table must be (buckets, heads), got {s:?}")));
    }
    let (nb, h) = (s[0], s[1]);
    let mut idx = Vec::with_capacity(h * q_len * k_len);
    for hh in 0..h {
        for i in 0..q_len {
            for j in 0..k_len {
                let b = (i + offset).checked_sub(j).map_or(0, |d| relative_bucket(d, nb, max_distance));
                idx.push(b * h + hh);
            }
        }
    }
    tape.gather(table, std::rc::Rc::new(idx), &[h, q_len, k_len])
}

pub fn init_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) {
    store.init_const(format!("{prefix}.g"), &[d], 1.0);
    store.init_const(format!("{prefix}.b"), &[d], 0.0);
}

pub fn init_self_attention<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &AttentionBlockConfig,
    rng: &mut R,
) {
    let d = cfg.d_model;
    for w in ["wq", "wk", "wv"] {
        store.init_dense(format!("{prefix}.{w}"), &[d, d], d, rng);
    }
    store.init_const(format!("{prefix}.rel"), &[cfg.rel_buckets, cfg.heads], 0.0);
}

pub fn init_cross_attention<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &AttentionBlockConfig,
    rng: &mut R,
) {
    let d = cfg.d_model;
    store.init_dense(format!("{prefix}.wq"), &[d, d], d, rng);
    store.init_dense(format!("{prefix}.wk"), &[cfg.heads, d, cfg.head_dim], d, rng);
    store.init_dense(format!("{prefix}.wv"), &[cfg.heads, d, cfg.head_dim], d, rng);
}

pub fn init_mlp<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut R) {
    store.init_dense(format!("{prefix}.w1"), &[d, 4 * d], d, rng);
    store.init_const(format!("{prefix}.b1"), &[4 * d], 0.0);
    store.init_dense(format!("{prefix}.w2"), &[4 * d, d], 4 * d, rng);
    store.init_const(format!("{prefix}.b2"), &[d], 0.0);
}

pub fn norm<T: Real>(tape: &Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    tape.layer_norm(x, p.var(&format!("{prefix}.g"))?, p.var(&format!("{prefix}.b"))?, LN_EPS)
}

pub fn mlp<T: Real>(tape: &Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.add(tape.matmul(x, p.var(&format!("{prefix}.w1"))?)?, p.var(&format!("{prefix}.b1"))?)?;
    let h = tape.relu(h);
    tape.add(tape.matmul(h, p.var(&format!("{prefix}.w2"))?)?, p.var(&format!("{prefix}.b2"))?)
}

/// (batch, n, W, D) → (batch, n, H, W, E)
fn split_heads<T: Real>(tape: &Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x);
    let y = tape.reshape(x, &[s[0], s[1], s[2], heads, s[3] / heads])?;
    tape.permute(y, &[0, 1, 3, 2, 4])
}

/// (batch, n, H, W, E) → (batch, n, W, D)
fn merge_heads<T: Real>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let y = tape.permute(x, &[0, 1, 3, 2, 4])?;
    tape.reshape(y, &[s[0], s[1], s[3], s[2] * s[4]])
}

fn check_blocks<T: Real>(tape: &Tape<T>, x: Var, cfg: &AttentionBlockConfig) -> Result<[usize; 4]> {
    let s = tape.shape(x);
    if s.len() != 4 || s[2] != cfg.window || s[3] != cfg.d_model {
        return Err(dim_err(format!(
            "block input must be (batch, blocks, {}, {}), got {s:?}",
            cfg.window, cfg.d_model
        )));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Output and attention weights of one attention call.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub out: Var,
    /// (batch, n, H, W, keys)
    pub weights: Var,
}

fn attend<T: Real>(tape: &Tape<T>, q: Var, k: Var, v: Var, bias: Option<Var>, mask: Option<Tensor<T>>) -> Result<Attended> {
    let e = *tape.shape(q).last().unwrap();
    let logits = tape.scale(tape.bmm(q, k, true)?, T::one() / T::c(e as f64).sqrt());
    let logits = match bias {
        Some(b) => tape.add(logits, b)?,
        None => logits,
    };
    let logits = match mask {
        Some(m) => tape.add(logits, tape.constant(m))?,
        None => logits,
    };
    let weights = tape.softmax_lastdim(logits)?;
    Ok(Attended { out: merge_heads(tape, tape.bmm(weights, v, false)?)?, weights })
}

/// Where the one-block key/value cache comes from.
#[derive(Clone, Copy, Debug)]
pub enum PrevBlock {
    /// Consecutive blocks; block i reads block i−1. Block 0 reads the given
    /// raw (pre-norm) predecessor (batch, 1, W, D), or nothing.
    Shifted(Option<Var>),
    /// A single block evaluated on its own, with the raw (pre-norm) tokens of
    /// its predecessor if it has one.
    Explicit(Option<Var>),
}

/// Causal self-attention over blocks `a` (already normalised), shape
/// (batch, n, W, D). Returns the merged head outputs (batch, n, W, D).
pub fn self_attention_block<T: Real>(
    tape: &Tape<T>,
    p: &Bound,
    prefix: &str,
    cfg: &AttentionBlockConfig,
    a: Var,
    prev: Option<(Var, bool)>,
    shifted: bool,
) -> Result<Attended> {
    let [batch, n, w, _] = check_blocks(tape, a, cfg)?;
    let h = cfg.heads;
    let proj = |x: Var, name: &str| -> Result<Var> { split_heads(tape, tape.matmul(x, p.var(&format!("{prefix}.{name}"))?)?, h) };
    let (q, k, v) = (proj(a, "wq")?, proj(a, "wk")?, proj(a, "wv")?);
    let neg = T::neg_infinity();
    let (k, v, keys, valid): (Var, Var, usize, Vec<bool>) = if !cfg.use_prev_block_cache {
        (k, v, w, vec![false; n])
    } else if shifted {
        let first = match prev {
            Some((xp, _)) => {
                let sp = check_blocks(tape, xp, cfg)?;
                if sp != [batch, 1, w, cfg.d_model] {
                    return Err(dim_err(format!("leading cached block {sp:?} does not match {:?}", [batch, 1, w])));
                }
                Some((proj(xp, "wk")?, proj(xp, "wv")?))
            }
            None => None,
        };
        let shift = |x: Var, head: Option<Var>| -> Result<Var> {
            let head = head.unwrap_or_else(|| tape.constant(Tensor::zeros(vec![batch, 1, h, w, cfg.head_dim])));
            let rolled = if n > 1 { tape.concat(&[head, tape.narrow(x, 1, 0, n - 1)?], 1)? } else { head };
            tape.concat(&[rolled, x], 3)
        };
        let valid = (0..n).map(|i| i > 0 || first.is_some()).collect();
        (shift(k, first.map(|f| f.0))?, shift(v, first.map(|f| f.1))?, 2 * w, valid)
    } else {
        let (kp, vp, ok) = match prev {
            Some((xp, ok)) => {
                let sp = check_blocks(tape, xp, cfg)?;
                if sp != [batch, n, w, cfg.d_model] {
                    return Err(dim_err(format!("cached block {sp:?} does not match current block {:?}", [batch, n, w])));
                }
                (proj(xp, "wk")?, proj(xp, "wv")?, ok)
            }
            None => {
                let z = tape.constant(Tensor::zeros(vec![batch, n, h, w, cfg.head_dim]));
                (z, z, false)
            }
        };
        (tape.concat(&[kp, k], 3)?, tape.concat(&[vp, v], 3)?, 2 * w, vec![ok; n])
    };
    let offset = keys - w;
    let mask = Tensor::from_index_fn(vec![1, n, 1, w, keys], |i| {
        let (blk, qi, kj) = (i[1], i[3], i[4]);
        let visible = if kj < offset { valid[blk] } else { kj - offset <= qi };
        if visible {
            T::zero()
        } else {
            neg
        }
    });
    let bias = match p.get(&format!("{prefix}.rel")) {
        Some(table) => {
            let b = relative_position_bias(tape, table, w, keys, offset, cfg.rel_max_distance)?;
            Some(tape.reshape(b, &[1, 1, h, w, keys])?)
        }
        None => None,
    };
    attend(tape, q, k, v, bias, Some(mask))
}

/// Cross-attention from normalised tokens `a` (batch, n, W, D) to the
/// matching context blocks.
pub fn cross_attend_context<T: Real>(
    tape: &Tape<T>,
    p: &Bound,
    prefix: &str,
    cfg: &AttentionBlockConfig,
    a: Var,
    ctx: &ContextTensor,
    masking_required: bool,
) -> Result<Attended> {
    let [batch, n, w, _] = check_blocks(tape, a, cfg)?;
    if masking_required != ctx.masking_required {
        return Err(BstError::Contract(format!(
            "cross-attention mask flag {masking_required} does not match the context ({})",
            ctx.masking_required
        )));
    }
    if ctx.heads != cfg.heads || ctx.blocks != n || tape.shape(ctx.base)[0] != batch * n {
        return Err(dim_err(format!(
            "context with {} blocks and {} heads does not match {n} token blocks and {} heads",
            ctx.blocks, ctx.heads, cfg.heads
        )));
    }
    let states = ctx.states_per_block(tape);
    if masking_required && states != w {
        return Err(BstError::Contract(format!("masked context needs {w} states per block, got {states}")));
    }
    let h = cfg.heads;
    let q = split_heads(tape, tape.matmul(a, p.var(&format!("{prefix}.wq"))?)?, h)?;
    let kv = |name: &str| -> Result<Var> {
        let y = ctx.project_heads(tape, p.var(&format!("{prefix}.{name}"))?)?;
        tape.reshape(y, &[batch, n, h, states, cfg.head_dim])
    };
    let (k, v) = (kv("wk")?, kv("wv")?);
    let mask = masking_required.then(|| {
        Tensor::from_index_fn(vec![1, 1, 1, w, states], |i| if i[4] <= i[3] { T::zero() } else { T::neg_infinity() })
    });
    attend(tape, q, k, v, None, mask)
}

/// Pre-norm block sublayer on `x` (batch, n, W, D):
/// `h = x + [self ‖ cross]·P`, `out = h + MLP(norm(h))`. Without a context
/// the cross half is dropped and `P` is (D × D).
pub fn bst_sublayer<T: Real>(
    tape: &Tape<T>,
    p: &Bound,
    prefix: &str,
    cfg: &AttentionBlockConfig,
    x: Var,
    prev: PrevBlock,
    ctx: Option<&ContextTensor>,
) -> Result<Var> {
    let a = norm(tape, p, &format!("{prefix}.ln1"), x)?;
    let attn = format!("{prefix}.attn");
    let prev_kind = prev;
    let sa = match prev {
        PrevBlock::Shifted(xp) | PrevBlock::Explicit(xp) => {
            let prev = match xp {
                Some(xp) => Some((norm(tape, p, &format!("{prefix}.ln1"), xp)?, true)),
                None => None,
            };
            self_attention_block(tape, p, &attn, cfg, a, prev, matches!(prev_kind, PrevBlock::Shifted(_)))?
        }
    };
    let mixed = match ctx {
        Some(ctx) => {
            let ca = cross_attend_context(tape, p, &format!("{prefix}.cross"), cfg, a, ctx, ctx.masking_required)?;
            tape.concat(&[sa.out, ca.out], 3)?
        }
        None => sa.out,
    };
    let h = tape.add(x, tape.matmul(mixed, p.var(&format!("{prefix}.proj"))?)?)?;
    let m = mlp(tape, p, &format!("{prefix}.mlp"), norm(tape, p, &format!("{prefix}.ln2"), h)?)?;
    tape.add(h, m)
}

/// Parameters of [`bst_sublayer`]; `cross` selects the concatenated
/// projection and cross-attention weights.
pub fn init_sublayer<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &AttentionBlockConfig,
    cross: bool,
    rng: &mut R,
) {
    let d = cfg.d_model;
    init_norm(store, &format!("{prefix}.ln1"), d);
    init_norm(store, &format!("{prefix}.ln2"), d);
    init_self_attention(store, &format!("{prefix}.attn"), cfg, rng);
    if cross {
        init_cross_attention(store, &format!("{prefix}.cross"), cfg, rng);
        store.init_dense(format!("{prefix}.proj"), &[2 * d, d], 2 * d, rng);
    } else {
        store.init_dense(format!("{prefix}.proj"), &[d, d], d, rng);
    }
    init_mlp(store, &format!("{prefix}.mlp"), d, rng);
}
