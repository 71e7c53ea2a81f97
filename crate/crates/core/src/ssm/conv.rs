//! Batched multi-channel causal convolution of a (batch, len, dims) input
//! with a (len, channels, dims) kernel bank, producing
//! (batch, len, dims, channels).

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{dim_err, Result};
use crate::fft::{plan, real_pair_inverse, real_pair_spectra};
use crate::real::Real;
use crate::tensor::{transpose, Tape, Tensor, Var};

type Spec<T> = Vec<Complex<T>>;

/// Spectra of many real signals, two per complex transform.
fn spectra<T: Real>(n: usize, signals: &[&[T]]) -> Vec<Spec<T>> {
    let p = plan::<T>(n);
    let mut out = Vec::with_capacity(signals.len());
    for pair in signals.chunks(2) {
        let (a, b) = real_pair_spectra(&p, pair[0], pair.get(1).copied().unwrap_or(&[]));
        out.push(a);
        if pair.len() == 2 {
            out.push(b);
        }
    }
    out
}

/// First `len` samples of the inverse of each Hermitian spectrum.
fn inverses<T: Real>(n: usize, len: usize, specs: &[Spec<T>]) -> Vec<Vec<T>> {
    let p = plan::<T>(n);
    let zero = vec![Complex::new(T::zero(), T::zero()); n];
    let mut out = Vec::with_capacity(specs.len());
    for pair in specs.chunks(2) {
        let (mut a, mut b) = real_pair_inverse(&p, &pair[0], pair.get(1).unwrap_or(&zero));
        a.truncate(len);
        b.truncate(len);
        out.push(a);
        if pair.len() == 2 {
            out.push(b);
        }
    }
    out
}

fn row<T>(data: &[T], len: usize, i: usize) -> &[T] {
    &data[i * len..(i + 1) * len]
}

/// Transposes each of `blocks` consecutive (rows × cols) matrices.
fn transpose_blocks<T: Real>(data: &[T], blocks: usize, rows: usize, cols: usize) -> Vec<T> {
    let size = rows * cols;
    let mut out = Vec::with_capacity(blocks * size);
    for b in 0..blocks {
        out.extend(transpose(&data[b * size..(b + 1) * size], rows, cols));
    }
    out
}

/// Runs `f` for each dim, in parallel when more than one worker is
/// available. Results come back in dim order.
fn per_dim<R: Send>(dims: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    if rayon::current_num_threads() > 1 {
        (0..dims).into_par_iter().map(f).collect()
    } else {
        (0..dims).map(f).collect()
    }
}

struct ConvShape {
    batch: usize,
    len: usize,
    dims: usize,
    channels: usize,
}

fn check_shapes(u: &[usize], k: &[usize], bias: Option<&[usize]>) -> Result<ConvShape> {
    if u.len() != 3 || k.len() != 3 || u[1] != k[0] || u[2] != k[2] {
        return Err(dim_err(format!(
            "convolution expects input (batch, len, dims) and kernels (len, channels, dims); got {u:?} and {k:?}"
        )));
    }
    if let Some(b) = bias {
        if b != [k[1], k[2]] {
            return Err(dim_err(format!("convolution bias must be {:?}, got {b:?}", [k[1], k[2]])));
        }
    }
    Ok(ConvShape { batch: u[0], len: u[1], dims: u[2], channels: k[1] })
}

fn forward<T: Real>(s: &ConvShape, u: &[T], k: &[T], bias: Option<&[T]>) -> Vec<T> {
    let ConvShape { batch, len, dims, channels } = *s;
    if len == 0 {
        return Vec::new();
    }
    let n = (2 * len).next_power_of_two();
    // Column-major copies: ut[(b, d)] and kt[(c, d)] are contiguous rows of length `len`.
    let ut = transpose_blocks(u, batch, len, dims);
    let kt = transpose(k, len, channels * dims);
    let cols = per_dim(dims, |d| {
        let us: Vec<&[T]> = (0..batch).map(|b| row(&ut, len, b * dims + d)).collect();
        let ks: Vec<&[T]> = (0..channels).map(|c| row(&kt, len, c * dims + d)).collect();
        let uf = spectra(n, &us);
        let kf = spectra(n, &ks);
        let mut prods = Vec::with_capacity(batch * channels);
        for ub in &uf {
            for kc in &kf {
                prods.push(ub.iter().zip(kc).map(|(a, b)| a * b).collect::<Vec<_>>());
            }
        }
        let mut ys = inverses(n, len, &prods);
        if let Some(bias) = bias {
            for b in 0..batch {
                for c in 0..channels {
                    let w = bias[c * dims + d];
                    for (y, &x) in ys[b * channels + c].iter_mut().zip(us[b]) {
                        *y += w * x;
                    }
                }
            }
        }
        ys
    });
    // Gather into (batch, dims, channels, len), then transpose each batch.
    let mut rows = vec![T::zero(); batch * dims * channels * len];
    for (d, ys) in cols.into_iter().enumerate() {
        for b in 0..batch {
            for c in 0..channels {
                let i = (b * dims + d) * channels + c;
                rows[i * len..(i + 1) * len].copy_from_slice(&ys[b * channels + c]);
            }
        }
    }
    transpose_blocks(&rows, batch, dims * channels, len)
}

/// Plain evaluation for a single sequence: `u` (len, dims), kernels
/// (len, channels, dims), optional skip weights (channels, dims); returns
/// (len, dims, channels).
pub fn multichannel_convolution<T: Real>(u: &Tensor<T>, kernels: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if u.rank() != 2 {
        return Err(dim_err(format!("convolution input must be (len, dims), got {:?}", u.shape())));
    }
    let us = [1, u.shape()[0], u.shape()[1]];
    let s = check_shapes(&us, kernels.shape(), bias.map(|b| b.shape()))?;
    let out = forward(&s, u.data(), kernels.data(), bias.map(|b| b.data()));
    Tensor::new(vec![s.len, s.dims, s.channels], out)
}

/// Differentiable batched convolution. Gradients with respect to the input
/// and the kernels are spectral cross-correlations with the output
/// gradient.
pub fn conv_op<T: Real>(tape: &Tape<T>, u: Var, kernels: Var, bias: Option<Var>) -> Result<Var> {
    let (uv, kv) = (tape.value(u), tape.value(kernels));
    let bv = bias.map(|b| tape.value(b));
    let s = check_shapes(uv.shape(), kv.shape(), bv.as_ref().map(|b| b.shape()))?;
    let out = forward(&s, uv.data(), kv.data(), bv.as_ref().map(|b| b.data()));
    let out = Tensor::new(vec![s.batch, s.len, s.dims, s.channels], out)?;
    let mut parents = vec![u, kernels];
    parents.extend(bias);
    let has_bias = bias.is_some();
    Ok(tape.push(out, &parents, move |c| {
        let ConvShape { batch, len, dims, channels } = s;
        let (u, k, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
        let bias = has_bias.then(|| c.inputs[2].data());
        let mut gu = vec![T::zero(); batch * len * dims];
        let mut gk = vec![T::zero(); len * channels * dims];
        let mut gb = vec![T::zero(); channels * dims];
        if len > 0 {
            let n = (2 * len).next_power_of_two();
            let (need_u, need_k) = (c.needs[0], c.needs[1]);
            let ut = transpose_blocks(u, batch, len, dims);
            let kt = transpose(k, len, channels * dims);
            let gt = transpose_blocks(g, batch, len, dims * channels);
            let cols = per_dim(dims, |d| {
                let us: Vec<&[T]> = (0..batch).map(|b| row(&ut, len, b * dims + d)).collect();
                let ks: Vec<&[T]> = (0..channels).map(|c| row(&kt, len, c * dims + d)).collect();
                let gs: Vec<&[T]> = (0..batch * channels)
                    .map(|i| row(&gt, len, ((i / channels) * dims + d) * channels + i % channels))
                    .collect();
                let gf = spectra(n, &gs);
                let zero = Complex::new(T::zero(), T::zero());
                let du = if need_u {
                    let kf = spectra(n, &ks);
                    let acc: Vec<Spec<T>> = (0..batch)
                        .map(|b| {
                            let mut a = vec![zero; n];
                            for (c, kc) in kf.iter().enumerate() {
                                for ((x, gq), kq) in a.iter_mut().zip(&gf[b * channels + c]).zip(kc) {
                                    *x += gq * kq.conj();
                                }
                            }
                            a
                        })
                        .collect();
                    let mut du = inverses(n, len, &acc);
                    if let Some(bias) = bias {
                        for b in 0..batch {
                            for c in 0..channels {
                                let w = bias[c * dims + d];
                                for (x, &gq) in du[b].iter_mut().zip(gs[b * channels + c]) {
                                    *x += w * gq;
                                }
                            }
                        }
                    }
                    du
                } else {
                    Vec::new()
                };
                let dk = if need_k {
                    let uf = spectra(n, &us);
                    let acc: Vec<Spec<T>> = (0..channels)
                        .map(|c| {
                            let mut a = vec![zero; n];
                            for (b, ub) in uf.iter().enumerate() {
                                for ((x, gq), uq) in a.iter_mut().zip(&gf[b * channels + c]).zip(ub) {
                                    *x += gq * uq.conj();
                                }
                            }
                            a
                        })
                        .collect();
                    inverses(n, len, &acc)
                } else {
                    Vec::new()
                };
                let db: Vec<T> = (0..channels)
                    .map(|c| {
                        (0..batch)
                            .map(|b| gs[b * channels + c].iter().zip(us[b]).map(|(&x, &y)| x * y).sum::<T>())
                            .sum()
                    })
                    .collect();
                (du, dk, db)
            });
            let mut gut = vec![T::zero(); batch * dims * len];
            let mut gkt = vec![T::zero(); channels * dims * len];
            for (d, (du, dk, db)) in cols.into_iter().enumerate() {
                for (b, col) in du.iter().enumerate() {
                    let i = b * dims + d;
                    gut[i * len..(i + 1) * len].copy_from_slice(col);
                }
                for (c, col) in dk.iter().enumerate() {
                    let i = c * dims + d;
                    gkt[i * len..(i + 1) * len].copy_from_slice(col);
                }
                for (c, &x) in db.iter().enumerate() {
                    gb[c * dims + d] = x;
                }
            }
            if need_u {
                gu = transpose_blocks(&gut, batch, dims, len);
            }
            if need_k {
                gk = transpose(&gkt, channels * dims, len);
            }
        }
        let mut grads = vec![
            Some(Tensor::new(vec![batch, len, dims], gu).unwrap()),
            Some(Tensor::new(vec![len, channels, dims], gk).unwrap()),
        ];
        if has_bias {
            grads.push(Some(Tensor::new(vec![channels, dims], gb).unwrap()));
        }
        grads
    }))
}
