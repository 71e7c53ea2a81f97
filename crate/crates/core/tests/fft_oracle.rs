use bst_core::fft::{causal_conv_fft, naive_causal_conv};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn worst_rel_err(u: &[f64], k: &[f64]) -> f64 {
    let fast = causal_conv_fft(u, k).unwrap();
    let slow = naive_causal_conv(u, k).unwrap();
    fast.iter()
        .zip(&slow)
        .map(|(a, b)| (a - b).abs() / (b.abs() + 1e-30))
        .fold(0.0, f64::max)
}

/// Positive draws bounded away from zero keep every output entry well
/// conditioned (no cancellation, no vanishing leading products), so the
/// elementwise relative error measures the transform itself.
#[test]
fn fft_conv_matches_naive_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let l = rng.random_range(1..=1024);
        let u: Vec<f64> = (0..l).map(|_| rng.random_range(0.1..1.0)).collect();
        let k: Vec<f64> = (0..l).map(|_| rng.random_range(0.1..1.0)).collect();
        worst = worst.max(worst_rel_err(&u, &k));
    }
    println!("worst elementwise relative error {worst:e}");
    assert!(worst <= 1e-10, "worst {worst:e}");
}

/// Sign-mixed inputs: error bounded relative to Σ|k_j|·|u_{t−j}| (eps · log n scale).
#[test]
fn fft_conv_error_is_bounded_by_condition_on_signed_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let l = rng.random_range(1..=1024);
        let u: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = causal_conv_fft(&u, &k).unwrap();
        let slow = naive_causal_conv(&u, &k).unwrap();
        let abs_u: Vec<f64> = u.iter().map(|x| x.abs()).collect();
        let abs_k: Vec<f64> = k.iter().map(|x| x.abs()).collect();
        let cond = naive_causal_conv(&abs_u, &abs_k).unwrap();
        for t in 0..l {
            worst = worst.max((fast[t] - slow[t]).abs() / (cond[t] + 1e-300));
        }
    }
    println!("worst condition-relative error {worst:e}");
    assert!(worst <= 1e-11, "worst {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn changing_input_never_affects_earlier_outputs(
        u in prop::collection::vec(-1.0f64..1.0, 2..200),
        seed in any::<u64>(),
        bump in 0.5f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k: Vec<f64> = (0..u.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let j = rng.random_range(0..u.len());
        let before = causal_conv_fft(&u, &k).unwrap();
        let mut v = u.clone();
        v[j] += bump;
        let after = causal_conv_fft(&v, &k).unwrap();
        let scale = before.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        for t in 0..j {
            prop_assert!((before[t] - after[t]).abs() <= 1e-13 * scale);
        }
        // the naive oracle is exactly causal
        let nb = naive_causal_conv(&u, &k).unwrap();
        let na = naive_causal_conv(&v, &k).unwrap();
        prop_assert_eq!(&nb[..j], &na[..j]);
    }
}
