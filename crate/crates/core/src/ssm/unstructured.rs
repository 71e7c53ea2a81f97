//! Explicitly parameterised long filters: a small feed-forward net over a
//! sinusoidal encoding of position, shaped by a per-channel exponential
//! decay window. Positions are normalised to `[0, 1]`, so the same filter
//! can be evaluated at any length.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

/// Number of sinusoid frequencies; the encoding has twice as many features.
pub const POS_FREQS: usize = 8;
pub const POS_FEATURES: usize = 2 * POS_FREQS;

#[derive(Clone, Debug)]
pub struct UnstructuredFilter<T: Real = f64> {
    /// `ln α` per channel; the window is `exp(−α t)`.
    pub log_alpha: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    /// Per (channel, dim) skip weight applied alongside the convolution.
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct UnstructuredVars {
    pub log_alpha: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub bias: Var,
}

/// Positions `t_i = i / (len − 1)` (0 for a single step).
pub fn filter_positions(len: usize) -> Vec<f64> {
    let denom = len.saturating_sub(1).max(1) as f64;
    (0..len).map(|i| i as f64 / denom).collect()
}

/// Sinusoidal features `[sin(π 2^k t), cos(π 2^k t)]`, shape (len, 16).
pub fn positional_encoding<T: Real>(len: usize) -> Tensor<T> {
    let pos = filter_positions(len);
    Tensor::from_index_fn(vec![len, POS_FEATURES], |i| {
        let f = std::f64::consts::PI * (1u64 << (i[1] / 2)) as f64;
        let a = f * pos[i[0]];
        T::c(if i[1] % 2 == 0 { a.sin() } else { a.cos() })
    })
}

pub fn init_unstructured<T: Real, R: Rng + ?Sized>(
    channels: usize,
    dims: usize,
    rng: &mut R,
) -> Result<UnstructuredFilter<T>> {
    if channels == 0 || dims == 0 {
        return Err(dim_err(format!("empty filter bank: {channels} channels, {dims} dims")));
    }
    let hidden = 2 * dims;
    let mut gauss = |fan_in: usize| {
        let sd = (1.0 / fan_in as f64).sqrt();
        let z: f64 = StandardNormal.sample(rng);
        T::c(z * sd)
    };
    let w1 = Tensor::from_fn(vec![POS_FEATURES, hidden], |_| gauss(POS_FEATURES));
    let w2 = Tensor::from_fn(vec![hidden, dims], |_| gauss(hidden));
    let (lo, hi) = (2f64.ln().ln(), (8.0 * 2f64.ln()).ln());
    let log_alpha = Tensor::from_fn(vec![channels], |i| {
        let f = if channels == 1 { 0.0 } else { i as f64 / (channels - 1) as f64 };
        T::c(lo + f * (hi - lo))
    });
    Ok(UnstructuredFilter {
        log_alpha,
        w1,
        b1: Tensor::zeros(vec![hidden]),
        w2,
        b2: Tensor::zeros(vec![dims]),
        bias: Tensor::zeros(vec![channels, dims]),
    })
}

impl<T: Real> UnstructuredFilter<T> {
    pub fn channels(&self) -> usize {
        self.log_alpha.numel()
    }

    pub fn dims(&self) -> usize {
        self.b2.numel()
    }

    pub fn vars(&self, tape: &Tape<T>, prefix: &str) -> UnstructuredVars {
        UnstructuredVars {
            log_alpha: tape.param(&format!("{prefix}.log_alpha"), &self.log_alpha),
            w1: tape.param(&format!("{prefix}.w1"), &self.w1),
            b1: tape.param(&format!("{prefix}.b1"), &self.b1),
            w2: tape.param(&format!("{prefix}.w2"), &self.w2),
            b2: tape.param(&format!("{prefix}.b2"), &self.b2),
            bias: tape.param(&format!("{prefix}.bias"), &self.bias),
        }
    }

    /// Kernel bank (len, channels, dims) without recording gradients.
    pub fn build(&self, len: usize) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let v = self.vars(&tape, "f");
        let k = build_unstructured(&tape, &v, len)?;
        Ok((*tape.value(k)).clone())
    }
}

/// `K[t, c, d] = exp(−α_c t) · FFN(enc(t))[d]`, shape (len, channels, dims).
pub fn build_unstructured<T: Real>(tape: &Tape<T>, v: &UnstructuredVars, len: usize) -> Result<Var> {
    let channels = tape.shape(v.log_alpha)[0];
    let dims = tape.shape(v.b2)[0];
    let pe = tape.constant(positional_encoding(len));
    let h = tape.matmul(pe, v.w1)?;
    let h = tape.silu(tape.add(h, v.b1)?);
    let f = tape.matmul(h, v.w2)?;
    let f = tape.add(f, v.b2)?;
    let f = tape.reshape(f, &[len, 1, dims])?;
    let alpha = tape.exp(v.log_alpha);
    let alpha = tape.reshape(alpha, &[1, channels])?;
    let pos = filter_positions(len);
    let t = tape.constant(Tensor::from_fn(vec![len, 1], |i| T::c(-pos[i])));
    let env = tape.exp(tape.mul(t, alpha)?);
    let env = tape.reshape(env, &[len, channels, 1])?;
    tape.mul(env, f)
}
