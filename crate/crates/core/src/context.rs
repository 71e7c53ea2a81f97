//! Turning SSM outputs into per-block context states for cross-attention.
//!
//! A [`ContextTensor`] is kept factored: a base tensor
//! (blocks·batch, S, D, C) and a [`Lift`] that maps its C channels onto the
//! H attention heads. The lifted view (…, S, D, H) is only formed on demand;
//! attention fuses the lift into its per-head key/value projections.

use std::rc::Rc;

use crate::error::{config_err, dim_err, BstError, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

/// How context states are gathered from the SSM path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// One SSM channel, windows lifted to every head.
    SingleHead,
    /// One SSM channel per head.
    MultiHead,
    /// S filters, one summary state per filter from the previous window.
    MultiFilter,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::SingleHead => "SH",
            Self::MultiHead => "MH",
            Self::MultiFilter => "MF",
        }
    }

    pub fn masking_required(self) -> bool {
        self != Self::MultiFilter
    }

    pub const ALL: [Variant; 3] = [Self::SingleHead, Self::MultiHead, Self::MultiFilter];
}

impl std::str::FromStr for Variant {
    type Err = BstError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SH" => Ok(Self::SingleHead),
            "MH" => Ok(Self::MultiHead),
            "MF" => Ok(Self::MultiFilter),
            _ => Err(config_err(format!("unknown variant `{s}` (expected SH, MH or MF)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Map from base channels to heads.
#[derive(Clone, Copy, Debug)]
pub enum Lift {
    /// Base already has one channel per head.
    PerHead,
    /// Single channel copied to every head.
    Replicate,
    /// Single channel, head h sees `scale[h] · x + shift[h]`.
    Affine { scale: Var, shift: Var },
}

#[derive(Clone, Copy, Debug)]
pub struct ContextTensor {
    /// (batch·blocks, S, D, C), row `b·blocks + i` is block i of sequence b.
    pub base: Var,
    pub lift: Lift,
    pub heads: usize,
    pub blocks: usize,
    pub masking_required: bool,
}

impl ContextTensor {
    pub fn states_per_block<T: Real>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.base)[1]
    }

    pub fn width<T: Real>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.base)[2]
    }

    /// Lifted states, shape (batch·blocks, S, D, H).
    pub fn materialize<T: Real>(&self, tape: &Tape<T>) -> Result<Var> {
        let s = tape.shape(self.base);
        let h = self.heads;
        match self.lift {
            Lift::PerHead => Ok(self.base),
            Lift::Replicate => {
                let zeros = tape.constant(Tensor::zeros(vec![1, 1, 1, h]));
                tape.add(self.base, zeros)
            }
            Lift::Affine { scale, shift } => {
                let a = tape.reshape(scale, &[1, 1, 1, h])?;
                let b = tape.reshape(shift, &[1, 1, 1, h])?;
                let y = tape.mul(self.base, a)?;
                let y = tape.add(y, b)?;
                debug_assert_eq!(tape.shape(y), [s[0], s[1], s[2], h]);
                Ok(y)
            }
        }
    }

    /// The context of block `i` of every sequence, as a one-block tensor.
    pub fn select_block<T: Real>(&self, tape: &Tape<T>, i: usize) -> Result<ContextTensor> {
        self.select_blocks(tape, i, 1)
    }

    /// Blocks `start..start + n` of every sequence.
    pub fn select_blocks<T: Real>(&self, tape: &Tape<T>, start: usize, n: usize) -> Result<ContextTensor> {
        if n == 0 || start + n > self.blocks {
            return Err(dim_err(format!("blocks {start}..{} outside {} context blocks", start + n, self.blocks)));
        }
        if n == self.blocks {
            return Ok(*self);
        }
        let s = tape.shape(self.base);
        let batch = s[0] / self.blocks;
        let b = tape.reshape(self.base, &[batch, self.blocks, s[1], s[2], s[3]])?;
        let b = tape.narrow(b, 1, start, n)?;
        let base = tape.reshape(b, &[batch * n, s[1], s[2], s[3]])?;
        Ok(ContextTensor { base, blocks: n, ..*self })
    }

    /// Per-head projection of the lifted states with `w` (H, D, E), giving
    /// (batch·blocks, H, S, E). Equivalent to `head_project` on
    /// [`ContextTensor::materialize`] without forming the lifted tensor.
    pub fn project_heads<T: Real>(&self, tape: &Tape<T>, w: Var) -> Result<Var> {
        let s = tape.shape(self.base);
        let sw = tape.shape(w);
        let h = self.heads;
        if sw.len() != 3 || sw[0] != h || sw[1] != s[2] {
            return Err(dim_err(format!("head weights {sw:?} do not match context {s:?} with {h} heads")));
        }
        let (rows, states, d, e) = (s[0], s[1], s[2], sw[2]);
        if let Lift::PerHead = self.lift {
            return tape.head_project(self.base, w);
        }
        let x = tape.reshape(self.base, &[rows * states, d])?;
        let wf = tape.reshape(tape.permute(w, &[1, 0, 2])?, &[d, h * e])?;
        let y = tape.reshape(tape.matmul(x, wf)?, &[rows, states, h, e])?;
        let y = match self.lift {
            Lift::Affine { scale, shift } => {
                let ones = tape.constant(Tensor::ones(vec![1, d]));
                let colsum = tape.reshape(tape.matmul(ones, wf)?, &[1, 1, h, e])?;
                let a = tape.reshape(scale, &[1, 1, h, 1])?;
                let b = tape.reshape(shift, &[1, 1, h, 1])?;
                tape.add(tape.mul(y, a)?, tape.mul(colsum, b)?)?
            }
            _ => y,
        };
        tape.permute(y, &[0, 2, 1, 3])
    }
}

fn blocks_of(len: usize, window: usize) -> Result<usize> {
    if window == 0 || !len.is_multiple_of(window) || len == 0 {
        return Err(config_err(format!("sequence length {len} is not a positive multiple of window {window}")));
    }
    Ok(len / window)
}

/// Single-channel SSM output `y` (batch, L, D) split into windows and lifted
/// by a learned per-head affine map. States align with token positions.
pub fn collect_sh<T: Real>(tape: &Tape<T>, y: Var, window: usize, heads: usize, lift: Lift) -> Result<ContextTensor> {
    let s = tape.shape(y);
    if s.len() != 3 {
        return Err(dim_err(format!("single-head context expects (batch, len, dims), got {s:?}")));
    }
    if matches!(lift, Lift::PerHead) {
        return Err(BstError::Contract("single-head context needs a lift to heads".into()));
    }
    let blocks = blocks_of(s[1], window)?;
    let base = tape.reshape(y, &[s[0] * blocks, window, s[2], 1])?;
    Ok(ContextTensor { base, lift, heads, blocks, masking_required: true })
}

/// Per-head SSM output (batch, L, D, H) split into windows.
pub fn collect_mh<T: Real>(tape: &Tape<T>, y: Var, window: usize) -> Result<ContextTensor> {
    let s = tape.shape(y);
    if s.len() != 4 {
        return Err(dim_err(format!("multi-head context expects (batch, len, dims, heads), got {s:?}")));
    }
    let blocks = blocks_of(s[1], window)?;
    let base = tape.reshape(y, &[s[0] * blocks, window, s[2], s[3]])?;
    Ok(ContextTensor { base, lift: Lift::PerHead, heads: s[3], blocks, masking_required: true })
}

/// Last position of every window for each filter: (batch, L, D, S) gives
/// (batch, blocks, S, D).
pub fn window_last_states<T: Real>(tape: &Tape<T>, y: Var, window: usize) -> Result<Var> {
    let s = tape.shape(y);
    if s.len() != 4 {
        return Err(dim_err(format!("multi-filter context expects (batch, len, dims, filters), got {s:?}")));
    }
    let (batch, len, d, f) = (s[0], s[1], s[2], s[3]);
    let blocks = blocks_of(len, window)?;
    let mut idx = Vec::with_capacity(batch * blocks * f * d);
    for b in 0..batch {
        for k in 0..blocks {
            let t = k * window + window - 1;
            for c in 0..f {
                for j in 0..d {
                    idx.push(((b * len + t) * d + j) * f + c);
                }
            }
        }
    }
    tape.gather(y, Rc::new(idx), &[batch, blocks, f, d])
}

/// Rolls per-window summaries forward by one window so block i only sees
/// windows before it; block 0 receives `init` (S, D).
pub fn shift_with_init<T: Real>(tape: &Tape<T>, last: Var, init: Var, heads: usize) -> Result<ContextTensor> {
    let s = tape.shape(last);
    let si = tape.shape(init);
    if s.len() != 4 || si != [s[2], s[3]] {
        return Err(dim_err(format!("initial context {si:?} does not match window states {s:?}")));
    }
    let (batch, blocks, f, d) = (s[0], s[1], s[2], s[3]);
    let first = tape.add(tape.constant(Tensor::zeros(vec![batch, 1, f, d])), tape.reshape(init, &[1, 1, f, d])?)?;
    let rolled = if blocks > 1 {
        let prev = tape.narrow(last, 1, 0, blocks - 1)?;
        tape.concat(&[first, prev], 1)?
    } else {
        first
    };
    let base = tape.reshape(rolled, &[batch * blocks, f, d, 1])?;
    Ok(ContextTensor { base, lift: Lift::Replicate, heads, blocks, masking_required: false })
}

/// Multi-filter collection from a full-width output (batch, L, D, S).
pub fn collect_mf<T: Real>(tape: &Tape<T>, y: Var, window: usize, heads: usize, init: Var) -> Result<ContextTensor> {
    let last = window_last_states(tape, y, window)?;
    shift_with_init(tape, last, init, heads)
}

/// Adds one learned vector per state slot, ids (S, D), to every block. Only
/// valid for multi-filter contexts; the ids are added to the base, so every
/// head sees the same ids.
pub fn add_context_ids<T: Real>(tape: &Tape<T>, ctx: &ContextTensor, ids: Var) -> Result<ContextTensor> {
    if ctx.masking_required {
        return Err(BstError::Contract("context ids apply only to multi-filter contexts".into()));
    }
    let s = tape.shape(ctx.base);
    let si = tape.shape(ids);
    if si != [s[1], s[2]] {
        return Err(dim_err(format!("context ids {si:?} do not match states {:?}", &s[1..3])));
    }
    let ids = tape.reshape(ids, &[1, s[1], s[2], 1])?;
    Ok(ContextTensor { base: tape.add(ctx.base, ids)?, ..*ctx })
}
