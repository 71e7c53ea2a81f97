//! Diagonal complex state space layer with zero-order-hold discretisation.
//!
//! The continuous eigenvalues are shared across heads and dims and kept in the
//! open left half plane via `Re λ = −exp(p)`. Each (head, dim) pair owns its
//! own readout `C` and each dim owns its step size `Δ`.

use std::rc::Rc;

use num_complex::Complex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, BstError, Result};
use crate::real::Real;
use crate::tensor::{transpose, Tape, Tensor, Var};

type C64<T> = Complex<T>;

/// Discretised single-channel system: `x_k = λ̄ x_{k−1} + B̄ u_k`,
/// `y_k = s · Re(Σ_n C_n x_{k,n}) + D u_k` with `s = 2` when the conjugate
/// half of the spectrum is implied and `s = 1` otherwise.
#[derive(Clone, Debug)]
pub struct DiscreteSsm<T: Real> {
    pub lambda_bar: Vec<C64<T>>,
    pub b_bar: Vec<C64<T>>,
    pub c: Vec<C64<T>>,
    pub d_skip: T,
    pub conjugate_pairs: bool,
}

impl<T: Real> DiscreteSsm<T> {
    fn check(&self) -> Result<()> {
        let n = self.lambda_bar.len();
        if self.b_bar.len() != n || self.c.len() != n {
            return Err(dim_err(format!(
                "state sizes disagree: λ̄ {n}, B̄ {}, C {}",
                self.b_bar.len(),
                self.c.len()
            )));
        }
        if let Some(l) = self.lambda_bar.iter().find(|l| l.norm() > T::one() || l.norm().is_nan()) {
            return Err(BstError::Stability(format!("|λ̄| = {} exceeds 1", l.norm())));
        }
        Ok(())
    }

    fn out_scale(&self) -> T {
        if self.conjugate_pairs {
            T::c(2.0)
        } else {
            T::one()
        }
    }

    /// `K_t = s · Re(Σ_n C_n B̄_n λ̄_n^t)` for `t < len`. The skip term is not
    /// part of the kernel.
    pub fn kernel(&self, len: usize) -> Result<Vec<T>> {
        self.check()?;
        let mut k = vec![T::zero(); len];
        for n in 0..self.lambda_bar.len() {
            let w = self.c[n] * self.b_bar[n];
            let mut p = C64::new(T::one(), T::zero());
            for kt in k.iter_mut() {
                *kt += (w * p).re;
                p *= self.lambda_bar[n];
            }
        }
        let s = self.out_scale();
        k.iter_mut().for_each(|x| *x *= s);
        Ok(k)
    }

    /// Step-by-step evaluation of the recurrence from a zero state.
    pub fn scan(&self, u: &[T]) -> Result<Vec<T>> {
        self.check()?;
        let s = self.out_scale();
        let mut x = vec![C64::new(T::zero(), T::zero()); self.lambda_bar.len()];
        Ok(u
            .iter()
            .map(|&uk| {
                let mut y = T::zero();
                for ((xn, &l), (&b, &c)) in x.iter_mut().zip(&self.lambda_bar).zip(self.b_bar.iter().zip(&self.c)) {
                    *xn = l * *xn + b * uk;
                    y += (c * *xn).re;
                }
                s * y + self.d_skip * uk
            })
            .collect())
    }
}

/// Trainable parameters of a diagonal SSM bank with `heads` output channels
/// over `dims` independent input dims and `state` modes.
#[derive(Clone, Debug)]
pub struct DiagonalSsm<T: Real = f64> {
    /// `p` in `Re λ = −exp(p)`, shape (state).
    pub log_neg_re: Tensor<T>,
    /// `Im λ`, shape (state).
    pub lambda_im: Tensor<T>,
    /// Fixed input map, one entry per mode.
    pub b: Vec<C64<T>>,
    /// Readout, shape (heads, dims, state).
    pub c_re: Tensor<T>,
    pub c_im: Tensor<T>,
    /// `ln Δ`, shape (dims).
    pub log_delta: Tensor<T>,
    /// Optional per-dim skip weight.
    pub d_skip: Option<Tensor<T>>,
}

/// Tape handles for the trainable pieces of a [`DiagonalSsm`].
#[derive(Clone, Copy, Debug)]
pub struct DiagonalVars {
    pub log_neg_re: Var,
    pub lambda_im: Var,
    pub c_re: Var,
    pub c_im: Var,
    pub log_delta: Var,
}

pub const DELTA_MIN: f64 = 1e-3;
pub const DELTA_MAX: f64 = 1e-1;

/// S4D-Lin initialisation: `λ_n = −½ + iπn`, `B = 1`, `C` complex normal
/// with variance `1/N`, `Δ` log-uniform in `[1e-3, 1e-1]`.
pub fn init_s4d<T: Real, R: Rng + ?Sized>(
    state: usize,
    heads: usize,
    dims: usize,
    rng: &mut R,
) -> Result<DiagonalSsm<T>> {
    if state == 0 || heads == 0 || dims == 0 {
        return Err(dim_err(format!("empty SSM: state {state}, heads {heads}, dims {dims}")));
    }
    let log_neg_re = Tensor::full(vec![state], T::c(0.5f64.ln()));
    let lambda_im = Tensor::from_fn(vec![state], |i| T::c(std::f64::consts::PI * i as f64));
    let b = vec![C64::new(T::one(), T::zero()); state];
    let sd = (0.5 / state as f64).sqrt();
    let mut normal = |_: usize| {
        let z: f64 = StandardNormal.sample(rng);
        T::c(z * sd)
    };
    let c_re = Tensor::from_fn(vec![heads, dims, state], &mut normal);
    let c_im = Tensor::from_fn(vec![heads, dims, state], &mut normal);
    let (lo, hi) = (DELTA_MIN.ln(), DELTA_MAX.ln());
    let log_delta = Tensor::from_fn(vec![dims], |_| T::c(rng.random_range(lo..hi)));
    Ok(DiagonalSsm { log_neg_re, lambda_im, b, c_re, c_im, log_delta, d_skip: None })
}

impl<T: Real> DiagonalSsm<T> {
    pub fn state(&self) -> usize {
        self.b.len()
    }

    pub fn heads(&self) -> usize {
        self.c_re.shape()[0]
    }

    pub fn dims(&self) -> usize {
        self.c_re.shape()[1]
    }

    pub fn lambda(&self) -> Vec<C64<T>> {
        self.log_neg_re
            .data()
            .iter()
            .zip(self.lambda_im.data())
            .map(|(&p, &im)| C64::new(-p.exp(), im))
            .collect()
    }

    pub fn delta(&self) -> Vec<T> {
        self.log_delta.data().iter().map(|x| x.exp()).collect()
    }

    /// Zero-order-hold system for one (head, dim) channel.
    pub fn discretize(&self, head: usize, dim: usize) -> Result<DiscreteSsm<T>> {
        let (h, d, n) = (self.heads(), self.dims(), self.state());
        if head >= h || dim >= d {
            return Err(dim_err(format!("channel ({head}, {dim}) outside ({h}, {d})")));
        }
        let delta = self.log_delta.data()[dim].exp();
        let lam = self.lambda();
        let mut lambda_bar = Vec::with_capacity(n);
        let mut b_bar = Vec::with_capacity(n);
        for (l, b) in lam.iter().zip(&self.b) {
            let lb = (*l * delta).exp();
            lambda_bar.push(lb);
            b_bar.push((lb - T::one()) / l * b);
        }
        let off = (head * d + dim) * n;
        let c = (0..n).map(|i| C64::new(self.c_re.data()[off + i], self.c_im.data()[off + i])).collect();
        let d_skip = self.d_skip.as_ref().map_or(T::zero(), |s| s.data()[dim]);
        Ok(DiscreteSsm { lambda_bar, b_bar, c, d_skip, conjugate_pairs: true })
    }

    /// Convolution kernels for every (head, dim), shape (len, heads, dims).
    pub fn materialize_kernel(&self, len: usize) -> Result<Tensor<T>> {
        self.validate()?;
        let out = kernel_values(
            self.log_neg_re.data(),
            self.lambda_im.data(),
            &self.b,
            self.c_re.data(),
            self.c_im.data(),
            self.log_delta.data(),
            self.heads(),
            len,
        );
        Tensor::new(vec![len, self.heads(), self.dims()], out)
    }

    /// Recurrent evaluation of one channel; `u` is a single input sequence.
    pub fn scan_recurrent(&self, u: &[T], head: usize, dim: usize) -> Result<Vec<T>> {
        self.discretize(head, dim)?.scan(u)
    }

    /// Shape and stability checks.
    pub fn validate(&self) -> Result<()> {
        let n = self.state();
        let (h, d) = (self.c_re.shape()[0], self.c_re.shape()[1]);
        let expect = [h, d, n];
        if self.log_neg_re.shape() != [n]
            || self.lambda_im.shape() != [n]
            || self.c_re.shape() != expect
            || self.c_im.shape() != expect
            || self.log_delta.shape() != [d]
            || self.d_skip.as_ref().is_some_and(|s| s.shape() != [d])
        {
            return Err(dim_err(format!(
                "inconsistent SSM shapes: λ {:?}/{:?}, C {:?}/{:?}, Δ {:?}, B {n}",
                self.log_neg_re.shape(),
                self.lambda_im.shape(),
                self.c_re.shape(),
                self.c_im.shape(),
                self.log_delta.shape()
            )));
        }
        if !self.log_neg_re.is_finite() || !self.log_delta.is_finite() {
            return Err(BstError::Stability("non-finite eigenvalue or step size".into()));
        }
        Ok(())
    }

    /// Registers the trainable tensors on `tape` under `prefix`.
    pub fn vars(&self, tape: &Tape<T>, prefix: &str) -> DiagonalVars {
        DiagonalVars {
            log_neg_re: tape.param(&format!("{prefix}.log_neg_re"), &self.log_neg_re),
            lambda_im: tape.param(&format!("{prefix}.lambda_im"), &self.lambda_im),
            c_re: tape.param(&format!("{prefix}.c_re"), &self.c_re),
            c_im: tape.param(&format!("{prefix}.c_im"), &self.c_im),
            log_delta: tape.param(&format!("{prefix}.log_delta"), &self.log_delta),
        }
    }
}

/// Powers `z^t` for `t < len`, as `exp(64k·log z) · z^j` with `t = 64k + j`,
/// so every entry is one exact exponential times a short product. `|z| < 1`;
/// once a block anchor falls below `sqrt(min_positive)` the remainder is zero
/// rather than a run of subnormals.
fn powers<T: Real>(log_z: C64<T>, len: usize) -> Vec<C64<T>> {
    const BLOCK: usize = 64;
    let zero = C64::new(T::zero(), T::zero());
    let z = log_z.exp();
    let mut base = [zero; BLOCK];
    let mut p = C64::new(T::one(), T::zero());
    for slot in base.iter_mut().take(len) {
        *slot = p;
        p *= z;
    }
    let floor = T::min_positive_value().sqrt();
    let mut out = vec![zero; len];
    for (k, chunk) in out.chunks_mut(BLOCK).enumerate() {
        let anchor = (log_z * T::c((k * BLOCK) as f64)).exp();
        if anchor.norm() < floor {
            break;
        }
        for (o, b) in chunk.iter_mut().zip(&base) {
            *o = anchor * b;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn kernel_values<T: Real>(
    log_neg_re: &[T],
    lambda_im: &[T],
    b: &[C64<T>],
    c_re: &[T],
    c_im: &[T],
    log_delta: &[T],
    heads: usize,
    len: usize,
) -> Vec<T> {
    let (n, d) = (b.len(), log_delta.len());
    let mut rows = vec![T::zero(); heads * d * len];
    let two = T::c(2.0);
    for dim in 0..d {
        let delta = log_delta[dim].exp();
        let modes: Vec<(Vec<C64<T>>, C64<T>)> = (0..n)
            .map(|m| {
                let lam = C64::new(-log_neg_re[m].exp(), lambda_im[m]);
                let z = lam * delta;
                (powers(z, len), (z.exp() - T::one()) / lam * b[m])
            })
            .collect();
        for h in 0..heads {
            let col = &mut rows[(h * d + dim) * len..(h * d + dim + 1) * len];
            for (m, (pw, b_bar)) in modes.iter().enumerate() {
                let i = (h * d + dim) * n + m;
                let w = C64::new(c_re[i], c_im[i]) * b_bar * two;
                for (x, p) in col.iter_mut().zip(pw) {
                    *x += w.re * p.re - w.im * p.im;
                }
            }
        }
    }
    transpose(&rows, heads * d, len)
}

/// Differentiable kernel bank (len, heads, dims) from the SSM parameters.
///
/// The backward pass accumulates `Σ_t g_t λ̄^t` and `Σ_t g_t t λ̄^t` per mode
/// and applies the closed-form derivatives of the discretisation.
pub fn structured_kernel<T: Real>(tape: &Tape<T>, v: &DiagonalVars, b: Rc<Vec<C64<T>>>, len: usize) -> Result<Var> {
    let (p, im, cr, ci, ld) =
        (tape.value(v.log_neg_re), tape.value(v.lambda_im), tape.value(v.c_re), tape.value(v.c_im), tape.value(v.log_delta));
    let n = b.len();
    let cs = cr.shape().to_vec();
    if p.shape() != [n] || im.shape() != [n] || cs.len() != 3 || cs[2] != n || ci.shape() != cs || ld.shape() != [cs[1]] {
        return Err(dim_err(format!(
            "structured kernel shapes: p {:?}, im {:?}, C {:?}/{:?}, Δ {:?}, B {n}",
            p.shape(),
            im.shape(),
            cs,
            ci.shape(),
            ld.shape()
        )));
    }
    let (heads, dims) = (cs[0], cs[1]);
    let out = kernel_values(p.data(), im.data(), &b, cr.data(), ci.data(), ld.data(), heads, len);
    let out = Tensor::new(vec![len, heads, dims], out)?;
    let parents = [v.log_neg_re, v.lambda_im, v.c_re, v.c_im, v.log_delta];
    Ok(tape.push(out, &parents, move |c| {
        let (p, im, cr, ci, ld) = (c.inputs[0].data(), c.inputs[1].data(), c.inputs[2].data(), c.inputs[3].data(), c.inputs[4].data());
        let g = c.grad.data();
        let two = T::c(2.0);
        let mut gp = vec![T::zero(); n];
        let mut gim = vec![T::zero(); n];
        let mut gcr = vec![T::zero(); heads * dims * n];
        let mut gci = vec![T::zero(); heads * dims * n];
        let mut gld = vec![T::zero(); dims];
        let zero = C64::new(T::zero(), T::zero());
        let gt = transpose(g, len, heads * dims);
        for dim in 0..dims {
            let delta = ld[dim].exp();
            for m in 0..n {
                let lam = C64::new(-p[m].exp(), im[m]);
                let z = lam * delta;
                let lb = z.exp();
                let pw = powers(z, len);
                let b_bar = (lb - T::one()) / lam * b[m];
                // d B̄ / dθ = B·(λ̄·dz·λ − (λ̄−1)·dλ) / λ²
                let dbar = |dl: C64<T>, dz: C64<T>| (lb * dz * lam - (lb - T::one()) * dl) / (lam * lam) * b[m];
                let (dl_p, dz_p) = (C64::new(lam.re, T::zero()), C64::new(lam.re * delta, T::zero()));
                let (dl_i, dz_i) = (C64::new(T::zero(), T::one()), C64::new(T::zero(), delta));
                let (dl_d, dz_d) = (zero, z);
                let (db_p, db_i, db_d) = (dbar(dl_p, dz_p), dbar(dl_i, dz_i), dbar(dl_d, dz_d));
                for h in 0..heads {
                    let mut s0 = zero;
                    let mut s1 = zero;
                    for (t, (pt, &gt)) in pw.iter().zip(&gt[(h * dims + dim) * len..(h * dims + dim + 1) * len]).enumerate() {
                        s0 += pt * gt;
                        s1 += pt * (gt * T::c(t as f64));
                    }
                    let i = (h * dims + dim) * n + m;
                    let cm = C64::new(cr[i], ci[i]);
                    let w = cm * b_bar;
                    let bs = b_bar * s0;
                    gcr[i] = two * bs.re;
                    gci[i] = -two * bs.im;
                    let ws1 = w * s1;
                    let cs0 = cm * s0;
                    gp[m] += two * (cs0 * db_p + ws1 * dz_p).re;
                    gim[m] += two * (cs0 * db_i + ws1 * dz_i).re;
                    gld[dim] += two * (cs0 * db_d + ws1 * dz_d).re;
                }
            }
        }
        let t = |shape: Vec<usize>, d: Vec<T>| Some(Tensor::new(shape, d).unwrap());
        vec![
            t(vec![n], gp),
            t(vec![n], gim),
            t(cs.clone(), gcr),
            t(cs.clone(), gci),
            t(vec![dims], gld),
        ]
    }))
}
