//! Differentiable primitives. Every op computes its value eagerly and, when
//! an operand participates in differentiation, records a backward rule.

use std::rc::Rc;

use rayon::prelude::*;

use super::linalg::{gemm, Transpose};
use super::tape::{Fault, Tape, Var};
use super::{numel, strides, Tensor};
use crate::error::{dim_err, BstError, Result};
use crate::real::Real;

/// Row count above which matmul forward work is split across workers.
const PAR_ROWS: usize = 128;

/// Same-rank broadcasting plan: each output element maps to one element of
/// each operand (zero stride along broadcast axes).
struct Bcast {
    out: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl Bcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let r = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; r - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let (x, y) = (pa[i], pb[i]);
            if x != y && x != 1 && y != 1 {
                return Err(dim_err(format!("cannot broadcast {a:?} with {b:?}")));
            }
            out.push(x.max(y));
        }
        let masked = |p: &[usize]| {
            let st = strides(p);
            p.iter().zip(st).map(|(&n, s)| if n == 1 { 0 } else { s }).collect::<Vec<_>>()
        };
        Ok(Self { sa: masked(&pa), sb: masked(&pb), out })
    }

    fn walk(&self, mut f: impl FnMut(usize, usize, usize)) {
        let r = self.out.len();
        if r == 0 {
            f(0, 0, 0);
            return;
        }
        let inner = self.out[r - 1];
        let total = numel(&self.out);
        if total == 0 {
            return;
        }
        let (ia, ib) = (self.sa[r - 1], self.sb[r - 1]);
        let mut idx = vec![0usize; r - 1];
        let (mut base_a, mut base_b) = (0usize, 0usize);
        let mut o = 0;
        while o < total {
            for j in 0..inner {
                f(o + j, base_a + j * ia, base_b + j * ib);
            }
            o += inner;
            for d in (0..r - 1).rev() {
                idx[d] += 1;
                base_a += self.sa[d];
                base_b += self.sb[d];
                if idx[d] < self.out[d] {
                    break;
                }
                base_a -= self.sa[d] * idx[d];
                base_b -= self.sb[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

fn reduce_to<T: Real>(g: &Tensor<T>, plan: &Bcast, shape: &[usize], side_a: bool) -> Tensor<T> {
    let mut out = Tensor::zeros(shape.to_vec());
    let gd = g.data();
    let od = out.data_mut();
    plan.walk(|o, ia, ib| od[if side_a { ia } else { ib }] += gd[o]);
    out
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<T: Real> Tape<T> {
    fn binary(&self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            let out = Tensor::new(va.shape().to_vec(), data)?;
            return Ok(self.push(out, &[a, b], move |c| {
                let g = c.grad;
                let ga = c.needs[0].then(|| match op {
                    Binary::Mul => zip(g, &c.inputs[1], |g, y| g * y),
                    _ => g.clone(),
                });
                let gb = c.needs[1].then(|| match op {
                    Binary::Add => g.clone(),
                    Binary::Sub => g.map(|x| -x),
                    Binary::Mul => zip(g, &c.inputs[0], |g, x| g * x),
                });
                vec![ga, gb]
            }));
        }
        let plan = Bcast::new(va.shape(), vb.shape())?;
        let mut data = vec![T::zero(); numel(&plan.out)];
        let (da, db) = (va.data(), vb.data());
        plan.walk(|o, ia, ib| data[o] = f(da[ia], db[ib]));
        let out = Tensor::new(plan.out.clone(), data)?;
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        Ok(self.push(out, &[a, b], move |c| {
            let g = c.grad;
            let ga = c.needs[0].then(|| match op {
                Binary::Mul => {
                    let y = c.inputs[1].data();
                    let mut t = Tensor::zeros(sa.clone());
                    let (td, gd) = (t.data_mut(), g.data());
                    plan.walk(|o, ia, ib| td[ia] += gd[o] * y[ib]);
                    t
                }
                _ => reduce_to(g, &plan, &sa, true),
            });
            let gb = c.needs[1].then(|| match op {
                Binary::Mul => {
                    let x = c.inputs[0].data();
                    let mut t = Tensor::zeros(sb.clone());
                    let (td, gd) = (t.data_mut(), g.data());
                    plan.walk(|o, ia, ib| td[ib] += gd[o] * x[ia]);
                    t
                }
                Binary::Add => reduce_to(g, &plan, &sb, false),
                Binary::Sub => reduce_to(g, &plan, &sb, false).map(|x| -x),
            });
            vec![ga, gb]
        }))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, &[a], move |c| vec![Some(c.grad.map(|g| g * s))])
    }

    pub fn add_scalar(&self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, &[a], |c| vec![Some(c.grad.clone())])
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, &[a], |c| vec![Some(zip(c.grad, c.output, |g, y| g * y))])
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, &[a], |c| {
            vec![Some(zip(c.grad, &c.inputs[0], |g, x| if x > T::zero() { g } else { T::zero() }))]
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, &[a], |c| vec![Some(zip(c.grad, c.output, |g, y| g * y * (T::one() - y)))])
    }

    /// x · σ(x)
    pub fn silu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, &[a], |c| {
            vec![Some(zip(c.grad, &c.inputs[0], |g, x| {
                let s = sigmoid(x);
                g * (s + x * s * (T::one() - s))
            }))]
        })
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>();
        let shape = v.shape().to_vec();
        self.push(Tensor::scalar(s), &[a], move |c| {
            vec![Some(Tensor::full(shape.clone(), c.grad.item()))]
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).numel().max(1) as f64);
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// Matrix product of `a` (…, k) with `b` (k × n); leading axes of `a`
    /// are treated as rows.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(dim_err(format!("matmul shape mismatch: {sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = va.numel() / k.max(1);
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut data = vec![T::zero(); m * n];
        par_gemm_rows(m, k, n, va.data(), vb.data(), Transpose::No, &mut data);
        let out = Tensor::new(out_shape, data)?;
        let fault = self.fault() == Some(Fault::MatmulRhsGrad);
        Ok(self.push(out, &[a, b], move |c| {
            let (x, w, g) = (&c.inputs[0], &c.inputs[1], c.grad);
            let ga = c.needs[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                par_gemm_rows(m, n, k, g.data(), w.data(), Transpose::Yes, &mut d);
                Tensor::new(x.shape().to_vec(), d).unwrap()
            });
            let gb = c.needs[1].then(|| {
                let mut d = vec![T::zero(); k * n];
                gemm(k, m, n, x.data(), Transpose::Yes, g.data(), Transpose::No, T::zero(), &mut d);
                if fault {
                    d.iter_mut().for_each(|v| *v *= T::from_f64(1.1));
                }
                Tensor::new(vec![k, n], d).unwrap()
            });
            vec![ga, gb]
        }))
    }

    /// Batched product over matching leading axes: `a` (…, m, k) times
    /// `b` (…, k, n), or `b` (…, n, k) when `trans_b`.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(dim_err(format!("bmm shape mismatch: {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if kb != k {
            return Err(dim_err(format!("bmm inner mismatch: {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let batch = numel(&sa[..r - 2]);
        let tb = if trans_b { Transpose::Yes } else { Transpose::No };
        let mut data = vec![T::zero(); batch * m * n];
        let (ad, bd) = (va.data(), vb.data());
        batched(batch, &mut data, m * n, |i, c| {
            gemm(m, k, n, &ad[i * m * k..], Transpose::No, &bd[i * k * n..], tb, T::zero(), c)
        });
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend([m, n]);
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, &[a, b], move |c| {
            let (x, y, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
            let ga = c.needs[0].then(|| {
                let mut d = vec![T::zero(); batch * m * k];
                // dA = G · op(B)ᵀ
                let t = if trans_b { Transpose::No } else { Transpose::Yes };
                batched(batch, &mut d, m * k, |i, dst| {
                    gemm(m, n, k, &g[i * m * n..], Transpose::No, &y[i * k * n..], t, T::zero(), dst)
                });
                Tensor::new(sa.clone(), d).unwrap()
            });
            let gb = c.needs[1].then(|| {
                let mut d = vec![T::zero(); batch * k * n];
                batched(batch, &mut d, k * n, |i, dst| {
                    if trans_b {
                        // dB (n × k) = Gᵀ · A
                        gemm(n, m, k, &g[i * m * n..], Transpose::Yes, &x[i * m * k..], Transpose::No, T::zero(), dst)
                    } else {
                        // dB (k × n) = Aᵀ · G
                        gemm(k, m, n, &x[i * m * k..], Transpose::Yes, &g[i * m * n..], Transpose::No, T::zero(), dst)
                    }
                });
                Tensor::new(sb.clone(), d).unwrap()
            });
            vec![ga, gb]
        }))
    }

    /// Per-head projection of lifted context states: `ctx` (B, S, D, H) with
    /// `w` (H, D, E) gives (B, H, S, E), head h using only `ctx[.., h]`.
    pub fn head_project(&self, ctx: Var, w: Var) -> Result<Var> {
        let (vc, vw) = (self.value(ctx), self.value(w));
        let (sc, sw) = (vc.shape().to_vec(), vw.shape().to_vec());
        if sc.len() != 4 || sw.len() != 3 || sc[3] != sw[0] || sc[2] != sw[1] {
            return Err(dim_err(format!("head_project shape mismatch: {sc:?} with {sw:?}")));
        }
        let (b, s, d, h) = (sc[0], sc[1], sc[2], sc[3]);
        let e = sw[2];
        let rows = b * s;
        let gather_head = move |src: &[T], hh: usize| -> Vec<T> {
            let mut x = vec![T::zero(); rows * d];
            for r in 0..rows {
                for j in 0..d {
                    x[r * d + j] = src[(r * d + j) * h + hh];
                }
            }
            x
        };
        let mut data = vec![T::zero(); b * h * s * e];
        for hh in 0..h {
            let x = gather_head(vc.data(), hh);
            let mut y = vec![T::zero(); rows * e];
            gemm(rows, d, e, &x, Transpose::No, &vw.data()[hh * d * e..], Transpose::No, T::zero(), &mut y);
            for bi in 0..b {
                let dst = ((bi * h + hh) * s) * e;
                data[dst..dst + s * e].copy_from_slice(&y[bi * s * e..(bi + 1) * s * e]);
            }
        }
        let out = Tensor::new(vec![b, h, s, e], data)?;
        Ok(self.push(out, &[ctx, w], move |c| {
            let (xc, xw, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
            let mut gc = c.needs[0].then(|| vec![T::zero(); b * s * d * h]);
            let mut gw = c.needs[1].then(|| vec![T::zero(); h * d * e]);
            for hh in 0..h {
                let mut gh = vec![T::zero(); rows * e];
                for bi in 0..b {
                    let src = ((bi * h + hh) * s) * e;
                    gh[bi * s * e..(bi + 1) * s * e].copy_from_slice(&g[src..src + s * e]);
                }
                if let Some(gw) = gw.as_mut() {
                    let x = gather_head(xc, hh);
                    gemm(d, rows, e, &x, Transpose::Yes, &gh, Transpose::No, T::zero(), &mut gw[hh * d * e..(hh + 1) * d * e]);
                }
                if let Some(gc) = gc.as_mut() {
                    let mut gx = vec![T::zero(); rows * d];
                    gemm(rows, e, d, &gh, Transpose::No, &xw[hh * d * e..], Transpose::Yes, T::zero(), &mut gx);
                    for r in 0..rows {
                        for j in 0..d {
                            gc[(r * d + j) * h + hh] = gx[r * d + j];
                        }
                    }
                }
            }
            vec![
                gc.map(|v| Tensor::new(sc.clone(), v).unwrap()),
                gw.map(|v| Tensor::new(sw.clone(), v).unwrap()),
            ]
        }))
    }

    /// Softmax over the last axis with max subtraction. Entries equal to
    /// −∞ receive exactly zero weight.
    pub fn softmax_lastdim(&self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = *v.shape().last().ok_or_else(|| dim_err("softmax of a scalar"))?;
        if n == 0 {
            return Err(dim_err("softmax over an empty axis"));
        }
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_row(row);
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, &[a], move |c| {
            let (y, g) = (c.output.data(), c.grad.data());
            let mut d = vec![T::zero(); y.len()];
            for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for ((o, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = y * (g - dot);
                }
            }
            vec![Some(Tensor::new(c.output.shape().to_vec(), d).unwrap())]
        }))
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let n = *vx.shape().last().ok_or_else(|| dim_err("layer_norm of a scalar"))?;
        if vg.shape() != [n] || vb.shape() != [n] {
            return Err(dim_err(format!(
                "layer_norm: input {:?}, gain {:?}, bias {:?}",
                vx.shape(),
                vg.shape(),
                vb.shape()
            )));
        }
        let eps = T::from_f64(eps);
        let nf = T::from_f64(n as f64);
        let rows = vx.numel() / n;
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut data = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let xs = &vx.data()[r * n..(r + 1) * n];
            let mean = xs.iter().copied().sum::<T>() / nf;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (xs[j] - mean) * rs;
                xhat[r * n + j] = h;
                data[r * n + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let xhat = Rc::new(xhat);
        Ok(self.push(out, &[x, gain, bias], move |c| {
            let (g, gamma) = (c.grad.data(), c.inputs[1].data());
            let mut gx = vec![T::zero(); g.len()];
            let mut gg = vec![T::zero(); n];
            let mut gbias = vec![T::zero(); n];
            for r in 0..rows {
                let gr = &g[r * n..(r + 1) * n];
                let hr = &xhat[r * n..(r + 1) * n];
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for j in 0..n {
                    let gh = gr[j] * gamma[j];
                    m1 += gh;
                    m2 += gh * hr[j];
                    gg[j] += gr[j] * hr[j];
                    gbias[j] += gr[j];
                }
                m1 /= nf;
                m2 /= nf;
                for j in 0..n {
                    gx[r * n + j] = rstd[r] * (gr[j] * gamma[j] - m1 - hr[j] * m2);
                }
            }
            vec![
                Some(Tensor::new(c.inputs[0].shape().to_vec(), gx).unwrap()),
                Some(Tensor::new(vec![n], gg).unwrap()),
                Some(Tensor::new(vec![n], gbias).unwrap()),
            ]
        }))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let out = v.reshape(shape.to_vec())?;
        let orig = v.shape().to_vec();
        Ok(self.push(out, &[a], move |c| vec![Some(c.grad.reshape(orig.clone()).unwrap())]))
    }

    /// Axis permutation: output axis i is input axis `axes[i]`.
    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let r = v.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&x| x >= r || std::mem::replace(&mut seen[x], true)) {
            return Err(dim_err(format!("invalid permutation {axes:?} for shape {:?}", v.shape())));
        }
        let out = permute_tensor(&v, axes);
        let mut inv = vec![0; r];
        for (i, &x) in axes.iter().enumerate() {
            inv[x] = i;
        }
        Ok(self.push(out, &[a], move |c| vec![Some(permute_tensor(c.grad, &inv))]))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = vals.first().ok_or_else(|| dim_err("concat of nothing"))?.shape().to_vec();
        if axis >= first.len() {
            return Err(dim_err(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for v in &vals {
            let s = v.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(dim_err(format!("concat shape mismatch: {first:?} vs {s:?} on axis {axis}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer = numel(&first[..axis]);
        let rest = numel(&first[axis + 1..]);
        let out_inner = out_shape[axis] * rest;
        let mut data = vec![T::zero(); numel(&out_shape)];
        let mut offset = 0;
        let mut extents = Vec::with_capacity(vals.len());
        for v in &vals {
            let inner = v.shape()[axis] * rest;
            for o in 0..outer {
                data[o * out_inner + offset..o * out_inner + offset + inner]
                    .copy_from_slice(&v.data()[o * inner..(o + 1) * inner]);
            }
            extents.push((offset / rest.max(1), v.shape()[axis]));
            offset += inner;
        }
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, parts, move |c| {
            extents
                .iter()
                .zip(c.needs)
                .map(|(&(start, len), &need)| need.then(|| narrow_tensor(c.grad, axis, start, len)))
                .collect()
        }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() || start + len > v.shape()[axis] {
            return Err(dim_err(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                v.shape()
            )));
        }
        let out = narrow_tensor(&v, axis, start, len);
        let shape = v.shape().to_vec();
        Ok(self.push(out, &[a], move |c| {
            let mut g = Tensor::zeros(shape.clone());
            let outer = numel(&shape[..axis]);
            let rest = numel(&shape[axis + 1..]);
            let inner = shape[axis] * rest;
            let gd = c.grad.data();
            for o in 0..outer {
                g.data_mut()[o * inner + start * rest..o * inner + (start + len) * rest]
                    .copy_from_slice(&gd[o * len * rest..(o + 1) * len * rest]);
            }
            vec![Some(g)]
        }))
    }

    /// `out[i] = src[indices[i]]` over flat storage, reshaped to `shape`.
    pub fn gather(&self, src: Var, indices: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let v = self.value(src);
        if numel(shape) != indices.len() {
            return Err(dim_err(format!("gather: {} indices for shape {shape:?}", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.numel()) {
            return Err(dim_err(format!("gather index {bad} out of range for {:?}", v.shape())));
        }
        let data = indices.iter().map(|&i| v.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let src_shape = v.shape().to_vec();
        Ok(self.push(out, &[src], move |c| {
            let mut g = Tensor::zeros(src_shape.clone());
            let gd = g.data_mut();
            for (&i, &x) in indices.iter().zip(c.grad.data()) {
                gd[i] += x;
            }
            vec![Some(g)]
        }))
    }

    /// Row lookup into an embedding table (V × D).
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(dim_err(format!("embedding table must be 2-D, got {shape:?}")));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(BstError::Input(format!("token id {bad} outside vocabulary of {v}")));
        }
        let idx: Vec<usize> = ids.iter().flat_map(|&i| (i * d)..(i + 1) * d).collect();
        self.gather(table, Rc::new(idx), &[ids.len(), d])
    }

    /// Mean cross-entropy over rows with a target; rows with `None` are
    /// ignored. Returns 0 when no row has a target.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let v = self.value(logits);
        let vocab = *v.shape().last().ok_or_else(|| dim_err("cross_entropy of a scalar"))?;
        let rows = v.numel() / vocab.max(1);
        if rows != targets.len() {
            return Err(dim_err(format!(
                "cross_entropy: {} logit rows ({:?}) but {} targets",
                rows,
                v.shape(),
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(BstError::Input(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        let mut probs = vec![T::zero(); v.numel()];
        let mut loss = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &v.data()[r * vocab..(r + 1) * vocab];
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            p.copy_from_slice(row);
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            loss += lse - row[t];
            softmax_row(p);
        }
        let denom = T::from_f64(count.max(1) as f64);
        let out = Tensor::scalar(loss / denom);
        let targets = targets.to_vec();
        let shape = v.shape().to_vec();
        Ok(self.push(out, &[logits], move |c| {
            let s = c.grad.item() / denom;
            let mut g = vec![T::zero(); probs.len()];
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                for j in 0..vocab {
                    g[r * vocab + j] = probs[r * vocab + j] * s;
                }
                g[r * vocab + t] -= s;
            }
            vec![Some(Tensor::new(shape.clone(), g).unwrap())]
        }))
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// Row-blocked gemm, `c (m × n) = a (m × k) · op(b)`. Each block computes
/// complete rows, so results do not depend on the worker count.
fn par_gemm_rows<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], tb: Transpose, c: &mut [T]) {
    if m <= PAR_ROWS || rayon::current_num_threads() == 1 {
        gemm(m, k, n, a, Transpose::No, b, tb, T::zero(), c);
        return;
    }
    c.par_chunks_mut(PAR_ROWS * n)
        .zip(a.par_chunks(PAR_ROWS * k))
        .for_each(|(cc, aa)| {
            let rows = cc.len() / n.max(1);
            gemm(rows, k, n, aa, Transpose::No, b, tb, T::zero(), cc);
        });
}

/// Runs `f(i, chunk_i)` for each of `batch` equal chunks of `out`.
pub(crate) fn batched<T: Real>(batch: usize, out: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    if chunk == 0 {
        return;
    }
    if batch > 1 && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

pub(crate) fn permute_tensor<T: Real>(v: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let r = v.rank();
    let in_st = strides(v.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| v.shape()[a]).collect();
    let st: Vec<usize> = axes.iter().map(|&a| in_st[a]).collect();
    let total = v.numel();
    let mut data = Vec::with_capacity(total);
    if r == 0 || total == 0 {
        return Tensor::new(out_shape, v.data().to_vec()).unwrap();
    }
    let src = v.data();
    let inner = out_shape[r - 1];
    let is = st[r - 1];
    let mut idx = vec![0usize; r - 1];
    let mut base = 0usize;
    while data.len() < total {
        data.extend((0..inner).map(|j| src[base + j * is]));
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            base += st[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= st[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data).unwrap()
}

pub(crate) fn narrow_tensor<T: Real>(v: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let shape = v.shape();
    let outer = numel(&shape[..axis]);
    let rest = numel(&shape[axis + 1..]);
    let inner = shape[axis] * rest;
    let mut data = Vec::with_capacity(outer * len * rest);
    for o in 0..outer {
        data.extend_from_slice(&v.data()[o * inner + start * rest..o * inner + (start + len) * rest]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::new(out_shape, data).unwrap()
}
