use std::collections::BTreeMap;
use std::rc::Rc;

use bst_core::context::Variant;
use bst_core::fft::naive_causal_conv;
use bst_core::ssm::*;
use bst_core::tensor::{finite_diff_check, FdSettings};
use bst_core::{BstError, Tape, Tensor};
use num_complex::Complex;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn c(re: f64) -> Complex<f64> {
    Complex::new(re, 0.0)
}

fn scalar_system(lb: f64) -> DiscreteSsm<f64> {
    DiscreteSsm { lambda_bar: vec![c(lb)], b_bar: vec![c(1.0)], c: vec![c(1.0)], d_skip: 0.0, conjugate_pairs: false }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn random_ssm(rng: &mut ChaCha8Rng, n: usize, heads: usize, dims: usize) -> DiagonalSsm<f64> {
    let mut m = init_s4d(n, heads, dims, rng).unwrap();
    for x in m.log_neg_re.data_mut() {
        *x = rng.random_range(-3.0..1.0);
    }
    for x in m.lambda_im.data_mut() {
        *x = rng.random_range(-10.0..10.0);
    }
    m
}

#[test]
fn geometric_kernel_from_scalar_system() {
    let k = scalar_system(0.5).kernel(4).unwrap();
    assert_eq!(k, vec![1.0, 0.5, 0.25, 0.125]);
}

#[test]
fn scalar_recurrence_on_ones() {
    let y = scalar_system(0.5).scan(&[1.0; 4]).unwrap();
    assert_eq!(y, vec![1.0, 1.5, 1.75, 1.875]);
}

#[test]
fn unstable_system_is_rejected() {
    assert!(matches!(scalar_system(1.01).kernel(4), Err(BstError::Stability(_))));
}

#[test]
fn s4d_init_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m: DiagonalSsm = init_s4d(2, 1, 3, &mut rng).unwrap();
    let l = m.lambda();
    assert!((l[0] - Complex::new(-0.5, 0.0)).norm() < 1e-15);
    assert!((l[1] - Complex::new(-0.5, std::f64::consts::PI)).norm() < 1e-15);
    let m: DiagonalSsm = init_s4d(16, 4, 256, &mut rng).unwrap();
    assert!(m.delta().iter().all(|&d| (DELTA_MIN..=DELTA_MAX).contains(&d)));
    assert_eq!(m.state(), 16);
    let var = m.c_re.data().iter().chain(m.c_im.data()).map(|x| x * x).sum::<f64>() / m.c_re.numel() as f64;
    assert!((var - 1.0 / 16.0).abs() < 0.01, "E|C|² = {var}");
}

#[test]
fn impulse_response_equals_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = random_ssm(&mut rng, 8, 2, 3);
    let bank = m.materialize_kernel(64).unwrap();
    let mut u = vec![0.0; 64];
    u[0] = 1.0;
    for h in 0..2 {
        for d in 0..3 {
            let y = m.scan_recurrent(&u, h, d).unwrap();
            let k: Vec<f64> = (0..64).map(|t| bank.data()[(t * 2 + h) * 3 + d]).collect();
            assert!(rel(&y, &k) < 1e-12);
        }
    }
    assert!(m.scan_recurrent(&[0.0; 10], 0, 0).unwrap().iter().all(|&y| y == 0.0));
}

#[test]
fn materialisation_is_prefix_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = random_ssm(&mut rng, 16, 2, 4);
    let short = m.materialize_kernel(8).unwrap();
    let long = m.materialize_kernel(16).unwrap();
    assert_eq!(short.data(), &long.data()[..short.numel()]);
    let longer = m.materialize_kernel(300).unwrap();
    assert_eq!(long.data(), &longer.data()[..long.numel()]);
}

#[test]
fn recurrence_matches_convolution_at_extended_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = random_ssm(&mut rng, 4, 1, 1);
    let u: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ut = Tensor::new(vec![200, 1], u.clone()).unwrap();
    let bank = m.materialize_kernel(200).unwrap();
    let y = multichannel_convolution(&ut, &bank, None).unwrap();
    let r = m.scan_recurrent(&u, 0, 0).unwrap();
    assert!(rel(y.data(), &r) < 1e-10);
}

#[test]
fn skip_term_enters_recurrence() {
    let mut s = scalar_system(0.5);
    s.d_skip = 2.0;
    assert_eq!(s.scan(&[1.0, 0.0]).unwrap(), vec![3.0, 0.5]);
}

#[test]
fn unstructured_filter_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut f: UnstructuredFilter = init_unstructured(2, 3, &mut rng).unwrap();
    f.w2 = Tensor::zeros(f.w2.shape().to_vec());
    f.b2 = Tensor::ones(vec![3]);
    f.log_alpha = Tensor::new(vec![2], vec![f64::NEG_INFINITY, 2f64.ln().ln()]).unwrap();
    let k = f.build(11).unwrap();
    assert_eq!(k.shape(), [11, 2, 3]);
    for t in 0..11 {
        for d in 0..3 {
            assert_eq!(k.get(&[t, 0, d]), 1.0);
        }
    }
    assert!((k.get(&[10, 1, 0]) - 0.5).abs() < 1e-15);
    assert_eq!(k.get(&[0, 1, 0]), 1.0);
}

#[test]
fn unstructured_envelope_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f: UnstructuredFilter = init_unstructured(4, 8, &mut rng).unwrap();
    let len = 50;
    let k = f.build(len).unwrap();
    let mut flat = f.clone();
    flat.log_alpha = Tensor::full(vec![4], f64::NEG_INFINITY);
    let raw = flat.build(len).unwrap();
    let max_ffn = raw.max_abs();
    let pos = filter_positions(len);
    for (t, &tp) in pos.iter().enumerate() {
        for c in 0..4 {
            let env = (-f.log_alpha.data()[c].exp() * tp).exp();
            for d in 0..8 {
                assert!(k.get(&[t, c, d]).abs() <= env * max_ffn * (1.0 + 1e-12));
            }
        }
    }
}

#[test]
fn convolution_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (len, ch, d) = (20, 3, 4);
    let u: Tensor = Tensor::from_fn(vec![len, d], |_| rng.random_range(-1.0..1.0));
    let imp = Tensor::from_index_fn(vec![len, ch, d], |i| if i[0] == 0 { 1.0 } else { 0.0 });
    let y = multichannel_convolution(&u, &imp, None).unwrap();
    assert_eq!(y.shape(), [len, d, ch]);
    for t in 0..len {
        for j in 0..d {
            for c in 0..ch {
                assert!((y.get(&[t, j, c]) - u.get(&[t, j])).abs() < 1e-14);
            }
        }
    }
    let b: Tensor = Tensor::from_fn(vec![ch, d], |_| rng.random_range(-1.0..1.0));
    let y = multichannel_convolution(&u, &Tensor::zeros(vec![len, ch, d]), Some(&b)).unwrap();
    for t in 0..len {
        for j in 0..d {
            for c in 0..ch {
                assert!((y.get(&[t, j, c]) - u.get(&[t, j]) * b.get(&[c, j])).abs() < 1e-15);
            }
        }
    }
    let k = Tensor::from_fn(vec![len, ch, d], |_| rng.random_range(-1.0..1.0));
    let y = multichannel_convolution(&u, &k, Some(&b)).unwrap();
    for j in 0..d {
        let uj: Vec<f64> = (0..len).map(|t| u.get(&[t, j])).collect();
        for c in 0..ch {
            let kc: Vec<f64> = (0..len).map(|t| k.get(&[t, c, j])).collect();
            let want: Vec<f64> = naive_causal_conv(&uj, &kc).unwrap().iter().zip(&uj).map(|(y, x)| y + x * b.get(&[c, j])).collect();
            let got: Vec<f64> = (0..len).map(|t| y.get(&[t, j, c])).collect();
            assert!(rel(&got, &want) <= 1e-10);
        }
    }
    let short = Tensor::zeros(vec![len - 1, ch, d]);
    assert!(matches!(multichannel_convolution(&u, &short, None), Err(BstError::Dimension(_))));
}

#[test]
fn projection_widths() {
    assert_eq!(ssm_width(512, Variant::SingleHead, true).unwrap(), 128);
    assert_eq!(ssm_width(512, Variant::MultiFilter, true).unwrap(), 64);
    assert_eq!(ssm_width(512, Variant::MultiHead, false).unwrap(), 512);
    assert!(matches!(ssm_width(36, Variant::MultiFilter, true), Err(BstError::Config(_))));
    assert!(matches!(ssm_width(30, Variant::SingleHead, true), Err(BstError::Config(_))));

    let tape = Tape::<f64>::inference();
    let x = tape.constant(Tensor::ones(vec![10, 512]));
    let down = tape.constant(Tensor::zeros(vec![512, 128]));
    let up = tape.constant(Tensor::zeros(vec![128, 512]));
    let y = tape.matmul(tape.matmul(x, down).unwrap(), up).unwrap();
    assert_eq!(tape.shape(y), [10, 512]);
}

#[test]
fn structured_kernel_op_matches_plain_materialisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = random_ssm(&mut rng, 5, 3, 2);
    let tape = Tape::new();
    let v = m.vars(&tape, "s");
    let k = structured_kernel(&tape, &v, Rc::new(m.b.clone()), 40).unwrap();
    assert_eq!(tape.value(k).data(), m.materialize_kernel(40).unwrap().data());
}

#[test]
fn structured_kernel_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = random_ssm(&mut rng, 4, 2, 3);
    let len = 37;
    let weights = Tensor::from_fn(vec![len, 2, 3], |_| rng.random_range(-1.0..1.0));
    let mut params = BTreeMap::new();
    params.insert("p".to_string(), m.log_neg_re.clone());
    params.insert("im".to_string(), m.lambda_im.clone());
    params.insert("cr".to_string(), m.c_re.clone());
    params.insert("ci".to_string(), m.c_im.clone());
    params.insert("ld".to_string(), m.log_delta.clone());
    let b = Rc::new(m.b.clone());
    let report = finite_diff_check(
        |tape, p| {
            let v = DiagonalVars { log_neg_re: p["p"], lambda_im: p["im"], c_re: p["cr"], c_im: p["ci"], log_delta: p["ld"] };
            let k = structured_kernel(tape, &v, b.clone(), len)?;
            let w = tape.constant(weights.clone());
            Ok(tape.sum_all(tape.mul(k, w)?))
        },
        &params,
        &FdSettings { coords: 200, eps: 1e-4, ..FdSettings::default() },
    )
    .unwrap();
    assert!(report.passed(1e-6), "{report:?}");
}

#[test]
fn convolution_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (batch, len, d, ch) = (2, 13, 3, 2);
    let mut params = BTreeMap::new();
    params.insert("u".to_string(), Tensor::from_fn(vec![batch, len, d], |_| rng.random_range(-1.0..1.0)));
    params.insert("k".to_string(), Tensor::from_fn(vec![len, ch, d], |_| rng.random_range(-1.0..1.0)));
    params.insert("b".to_string(), Tensor::from_fn(vec![ch, d], |_| rng.random_range(-1.0..1.0)));
    let weights = Tensor::from_fn(vec![batch, len, d, ch], |_| rng.random_range(-1.0..1.0));
    let report = finite_diff_check(
        |tape, p| {
            let y = conv_op(tape, p["u"], p["k"], Some(p["b"]))?;
            Ok(tape.sum_all(tape.mul(y, tape.constant(weights.clone()))?))
        },
        &params,
        &FdSettings { coords: 300, eps: 1e-6, ..FdSettings::default() },
    )
    .unwrap();
    assert!(report.passed(1e-6), "{report:?}");
}

#[test]
fn unstructured_filter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f: UnstructuredFilter = init_unstructured(3, 4, &mut rng).unwrap();
    let len = 17;
    let mut params = BTreeMap::new();
    for (n, t) in [("a", &f.log_alpha), ("w1", &f.w1), ("b1", &f.b1), ("w2", &f.w2), ("b2", &f.b2), ("bias", &f.bias)] {
        params.insert(n.to_string(), t.clone());
    }
    let weights = Tensor::from_fn(vec![len, 3, 4], |_| rng.random_range(-1.0..1.0));
    let report = finite_diff_check(
        |tape, p| {
            let v = UnstructuredVars { log_alpha: p["a"], w1: p["w1"], b1: p["b1"], w2: p["w2"], b2: p["b2"], bias: p["bias"] };
            let k = build_unstructured(tape, &v, len)?;
            let k = tape.add(k, v.bias)?;
            Ok(tape.sum_all(tape.mul(k, tape.constant(weights.clone()))?))
        },
        &params,
        &FdSettings { coords: 200, eps: 1e-6, ..FdSettings::default() },
    )
    .unwrap();
    assert!(report.passed(1e-6), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssm_output_is_causal(seed in 0u64..1000, len in 2usize..120, pos in 0usize..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_ssm(&mut rng, 4, 1, 1);
        let pos = pos % len;
        let u: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut v = u.clone();
        v[pos] += 1.0;
        let (a, b) = (m.scan_recurrent(&u, 0, 0).unwrap(), m.scan_recurrent(&v, 0, 0).unwrap());
        prop_assert_eq!(&a[..pos], &b[..pos]);
    }

    #[test]
    fn unstructured_envelope_is_non_increasing(la in -3.0f64..3.0, len in 2usize..200) {
        let pos = filter_positions(len);
        let env: Vec<f64> = pos.iter().map(|t| (-la.exp() * t).exp()).collect();
        prop_assert!(env.windows(2).all(|w| w[1] <= w[0]));
    }
}
