//! Radix-2 iterative FFT with bit-reversal permutation, plus causal
//! convolution by zero padding to twice the sequence length.
//!
//! Forward transforms are unnormalised; inverse transforms scale by 1/n.

use std::any::{Any, TypeId};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use num_complex::Complex;

use crate::error::{dim_err, Result};
use crate::real::Real;

/// Frequency-domain coefficients of a zero-padded signal. The length is
/// always a power of two.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T> {
    coeffs: Vec<Complex<T>>,
}

impl<T: Real> Spectrum<T> {
    pub fn from_coeffs(coeffs: Vec<Complex<T>>) -> Result<Self> {
        if !coeffs.len().is_power_of_two() {
            return Err(dim_err(format!("spectrum length {} is not a power of two", coeffs.len())));
        }
        Ok(Self { coeffs })
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeffs(&self) -> &[Complex<T>] {
        &self.coeffs
    }

    /// `a·self + other`, for linearity checks.
    pub fn axpy(&self, a: T, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(dim_err(format!("spectrum lengths {} and {}", self.len(), other.len())));
        }
        let coeffs = self.coeffs.iter().zip(&other.coeffs).map(|(x, y)| x * a + y).collect();
        Ok(Self { coeffs })
    }
}

/// Precomputed twiddles and bit-reversal table for one transform size.
pub struct FftPlan<T> {
    n: usize,
    /// Twiddles of the stage with half-width `h` occupy `[h - 1, 2h - 1)`.
    twiddles: Vec<Complex<T>>,
    rev: Vec<u32>,
}

impl<T: Real> FftPlan<T> {
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "FFT size {n} is not a power of two");
        let bits = n.trailing_zeros();
        let rev = (0..n as u32)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (32 - bits) })
            .collect();
        let mut twiddles = Vec::with_capacity(n.saturating_sub(1));
        let mut half = 1;
        while half < n {
            twiddles.extend((0..half).map(|k| {
                let ang = -std::f64::consts::PI * k as f64 / half as f64;
                Complex::new(T::from_f64(ang.cos()), T::from_f64(ang.sin()))
            }));
            half *= 2;
        }
        Self { n, twiddles, rev }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place unnormalised forward transform.
    pub fn forward(&self, buf: &mut [Complex<T>]) {
        assert_eq!(buf.len(), self.n);
        for i in 0..self.n {
            let j = self.rev[i] as usize;
            if i < j {
                buf.swap(i, j);
            }
        }
        if self.n >= 2 {
            for pair in buf.chunks_exact_mut(2) {
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a + b;
                pair[1] = a - b;
            }
        }
        if self.n >= 4 {
            for q in buf.chunks_exact_mut(4) {
                let (a, b, c, d) = (q[0], q[1], q[2], q[3]);
                let d = Complex::new(d.im, -d.re);
                q[0] = a + c;
                q[2] = a - c;
                q[1] = b + d;
                q[3] = b - d;
            }
        }
        let mut half = 4;
        while half < self.n {
            let tw = &self.twiddles[half - 1..2 * half - 1];
            for block in buf.chunks_exact_mut(2 * half) {
                let (lo, hi) = block.split_at_mut(half);
                for ((a, b), &w) in lo.iter_mut().zip(hi.iter_mut()).zip(tw) {
                    let t = *b * w;
                    *b = *a - t;
                    *a += t;
                }
            }
            half *= 2;
        }
    }

    /// In-place inverse transform including the 1/n scale.
    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        for x in buf.iter_mut() {
            *x = x.conj();
        }
        self.forward(buf);
        let s = T::one() / T::from_f64(self.n as f64);
        for x in buf.iter_mut() {
            *x = x.conj() * s;
        }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<(TypeId, usize), Rc<dyn Any>>> = RefCell::new(HashMap::new());
}

/// Cached plan for size `n` on the current thread.
pub fn plan<T: Real>(n: usize) -> Rc<FftPlan<T>> {
    PLANS.with(|cache| {
        let mut cache = cache.borrow_mut();
        let entry = cache
            .entry((TypeId::of::<T>(), n))
            .or_insert_with(|| Rc::new(FftPlan::<T>::new(n)) as Rc<dyn Any>)
            .clone();
        entry.downcast::<FftPlan<T>>().expect("plan cache type")
    })
}

pub fn fft_complex<T: Real>(x: &[Complex<T>]) -> Spectrum<T> {
    let n = x.len().max(1).next_power_of_two();
    let mut buf = x.to_vec();
    buf.resize(n, Complex::new(T::zero(), T::zero()));
    plan::<T>(n).forward(&mut buf);
    Spectrum { coeffs: buf }
}

/// Transform of a real sequence, zero padded to the next power of two.
pub fn fft<T: Real>(x: &[T]) -> Spectrum<T> {
    let c: Vec<_> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft_complex(&c)
}

pub fn ifft<T: Real>(s: &Spectrum<T>) -> Vec<Complex<T>> {
    let mut buf = s.coeffs.clone();
    plan::<T>(buf.len()).inverse(&mut buf);
    buf
}

/// Spectra of two real signals from one complex transform.
///
/// Both inputs are zero padded to `plan.len()`.
pub fn real_pair_spectra<T: Real>(plan: &FftPlan<T>, a: &[T], b: &[T]) -> (Vec<Complex<T>>, Vec<Complex<T>>) {
    let n = plan.len();
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    for (i, &x) in a.iter().enumerate() {
        buf[i].re = x;
    }
    for (i, &x) in b.iter().enumerate() {
        buf[i].im = x;
    }
    plan.forward(&mut buf);
    let half = T::from_f64(0.5);
    let mut sa = Vec::with_capacity(n);
    let mut sb = Vec::with_capacity(n);
    for k in 0..n {
        let z = buf[k];
        let zc = buf[(n - k) % n].conj();
        sa.push((z + zc) * half);
        // (z − zc) / 2i
        let d = (z - zc) * half;
        sb.push(Complex::new(d.im, -d.re));
    }
    (sa, sb)
}

/// Inverse transforms of two Hermitian spectra (real signals) in one pass.
pub fn real_pair_inverse<T: Real>(plan: &FftPlan<T>, a: &[Complex<T>], b: &[Complex<T>]) -> (Vec<T>, Vec<T>) {
    let mut buf: Vec<Complex<T>> = a
        .iter()
        .zip(b)
        .map(|(x, y)| Complex::new(x.re - y.im, x.im + y.re))
        .collect();
    plan.inverse(&mut buf);
    buf.into_iter().map(|z| (z.re, z.im)).unzip()
}

/// `y_t = Σ_{j ≤ t} k_j u_{t−j}` via spectral products on a 2L grid.
pub fn causal_conv_fft<T: Real>(u: &[T], k: &[T]) -> Result<Vec<T>> {
    if u.len() != k.len() {
        return Err(dim_err(format!("causal conv length mismatch: u has {}, k has {}", u.len(), k.len())));
    }
    let l = u.len();
    if l == 0 {
        return Ok(Vec::new());
    }
    let p = plan::<T>((2 * l).next_power_of_two());
    let (su, sk) = real_pair_spectra(&p, u, k);
    let prod: Vec<_> = su.iter().zip(&sk).map(|(a, b)| a * b).collect();
    let mut buf = prod;
    p.inverse(&mut buf);
    Ok(buf[..l].iter().map(|z| z.re).collect())
}

/// Direct O(L²) evaluation of the same sum; the oracle for the FFT path.
pub fn naive_causal_conv<T: Real>(u: &[T], k: &[T]) -> Result<Vec<T>> {
    if u.len() != k.len() {
        return Err(dim_err(format!("causal conv length mismatch: u has {}, k has {}", u.len(), k.len())));
    }
    Ok((0..u.len())
        .map(|t| (0..=t).map(|j| k[j] * u[t - j]).sum())
        .collect())
}
