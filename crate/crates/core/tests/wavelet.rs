use trendlab::exec::Execution;
use trendlab::wavelet::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn db4_bank_invariants() {
    let bank = WaveletFilterBank::db4();
    bank.validate().unwrap();
    let lo = &bank.reconstruction_lowpass;
    let hi = &bank.reconstruction_highpass;
    for k in 0..FILTER_LEN {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        assert!((hi[k] - sign * lo[FILTER_LEN - 1 - k]).abs() < 1e-10);
    }
    // Four vanishing moments of the wavelet filter.
    for p in 0..4 {
        let moment: f64 = bank
            .decomposition_highpass
            .iter()
            .enumerate()
            .map(|(k, g)| (k as f64).powi(p) * g)
            .sum();
        assert!(moment.abs() < 1e-9, "moment {p} = {moment}");
    }
}

#[test]
fn corrupted_bank_rejected() {
    let mut lo = WaveletFilterBank::db4().decomposition_lowpass;
    lo[3] += 1e-6;
    assert!(matches!(
        WaveletFilterBank::from_lowpass(lo),
        Err(WaveletError::InvalidFilter(_))
    ));
}

#[test]
fn constant_signal_has_no_detail() {
    let bank = WaveletFilterBank::db4();
    let c = 3.5;
    for padding in [Padding::Symmetric, Padding::Periodic] {
        let d = dwt(&vec![c; 64], 3, &bank, padding).unwrap();
        for band in &d.details {
            assert!(band.iter().all(|v| v.abs() < 1e-10));
        }
        let expected = c * std::f64::consts::SQRT_2.powi(3);
        assert!(d.approximation.iter().all(|a| (a - expected).abs() < 1e-10));
    }
}

#[test]
fn lengths_and_errors() {
    let bank = WaveletFilterBank::db4();
    let d = dwt(&[1.0; 101], 2, &bank, Padding::Symmetric).unwrap();
    assert_eq!(d.level_lengths, vec![101, 54]);
    assert_eq!(d.detail(1).len(), 54);
    assert_eq!(d.detail(2).len(), 30);
    assert_eq!(d.approximation.len(), 30);
    assert_eq!(dwt(&[1.0; 7], 1, &bank, Padding::Symmetric).unwrap_err(), WaveletError::TooShort { len: 7 });
    assert!(matches!(
        dwt(&[1.0; 8], 2, &bank, Padding::Symmetric),
        Err(WaveletError::InfeasibleLevels { level: 2, .. })
    ));
    assert_eq!(max_levels(8), 1);
    assert_eq!(max_levels(6000), 13);
    let mut broken = d.clone();
    broken.details[0].pop();
    assert!(matches!(idwt(&broken, &bank), Err(WaveletError::Inconsistent(_))));
}

#[test]
fn zero_coefficients_give_zero_signal() {
    let bank = WaveletFilterBank::db4();
    let mut d = dwt(&[1.0; 40], 2, &bank, Padding::Symmetric).unwrap();
    d.approximation.iter_mut().for_each(|v| *v = 0.0);
    d.details.iter_mut().flatten().for_each(|v| *v = 0.0);
    assert!(idwt(&d, &bank).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn round_trip_all_paddings() {
    let bank = WaveletFilterBank::db4();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for padding in [Padding::Symmetric, Padding::Periodic, Padding::Zero] {
        for len in [8, 9, 64, 101, 257] {
            let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for levels in 1..=max_levels(len).min(4) {
                let d = dwt(&x, levels, &bank, padding).unwrap();
                let y = idwt(&d, &bank).unwrap();
                assert_eq!(y.len(), len);
                assert!(max_abs_diff(&x, &y) < 1e-10, "{padding:?} len {len} levels {levels}");
            }
        }
    }
}

#[test]
fn low_frequency_sine_stays_out_of_level_one() {
    let bank = WaveletFilterBank::db4();
    let x: Vec<f64> = (0..512)
        .map(|i| (2.0 * std::f64::consts::PI * i as f64 / 32.0).sin())
        .collect();
    let d = dwt(&x, 3, &bank, Padding::Periodic).unwrap();
    let energy = |v: &[f64]| v.iter().map(|c| c * c).sum::<f64>();
    let total = energy(&d.approximation) + d.details.iter().map(|b| energy(b)).sum::<f64>();
    assert!(energy(d.detail(1)) < 0.01 * total);
}

#[test]
fn sigma_estimates() {
    assert!((estimate_sigma(&[0.6745; 5]).unwrap() - 1.0).abs() < 1e-12);
    assert!((estimate_sigma(&[-1.0, 0.0, 1.0]).unwrap() - 1.482_579_688_658_265).abs() < 1e-9);
    assert_eq!(estimate_sigma(&[]), Err(WaveletError::EmptyCoefficients));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 2.0).unwrap();
    let x: Vec<f64> = (0..4096).map(|_| noise.sample(&mut rng)).collect();
    let d = dwt(&x, 1, &WaveletFilterBank::db4(), Padding::Symmetric).unwrap();
    let sigma = estimate_sigma(d.detail(1)).unwrap();
    assert!((sigma - 2.0).abs() < 0.2, "sigma {sigma}");
}

#[test]
fn soft_threshold_definition() {
    assert_eq!(soft_threshold(&[3.0], 1.0).unwrap(), vec![2.0]);
    assert_eq!(soft_threshold(&[-0.5], 1.0).unwrap(), vec![0.0]);
    assert_eq!(soft_threshold(&[-3.0, 0.25], 1.0).unwrap(), vec![-2.0, 0.0]);
    let x = [1.5, -2.0, 0.0, 7.25];
    assert_eq!(soft_threshold(&x, 0.0).unwrap(), x.to_vec());
    assert_eq!(soft_threshold(&x, -1.0), Err(WaveletError::NegativeThreshold(-1.0)));
}

#[test]
fn smooth_signal_preserved() {
    // Smoothstep has zero slope at both ends, so the mirror extension is C¹.
    let n = 512;
    let x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            3.0 * t * t - 2.0 * t * t * t
        })
        .collect();
    let out = denoise(&x, &DenoiseConfig::default()).unwrap();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max_abs_diff(&x, &out.denoised) / peak < 1e-3);
}

#[test]
fn noise_is_exact_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..300).map(|_| rng.gen_range(0.0..10.0)).collect();
    let out = denoise(&x, &DenoiseConfig::default()).unwrap();
    for i in 0..x.len() {
        assert!((out.denoised[i] + out.noise[i] - x[i]).abs() < 1e-10);
    }
    assert_eq!(out.plan.zeroed_levels, vec![1]);
    assert_eq!(out.plan.thresholded_levels, vec![2, 3, 4]);
}

#[test]
fn out_of_range_levels_rejected() {
    let cfg = DenoiseConfig {
        zeroed_levels: vec![5],
        ..DenoiseConfig::default()
    };
    assert_eq!(
        denoise(&[0.0; 600], &cfg).unwrap_err(),
        WaveletError::LevelOutOfRange { level: 5, levels: 4 }
    );
}

#[test]
fn shrinkage_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let cfg = DenoiseConfig::default();
    for _ in 0..20 {
        let x: Vec<f64> = (0..400)
            .map(|i| (i as f64 / 25.0).sin() + rng.gen_range(-0.3..0.3))
            .collect();
        let first = denoise(&x, &cfg).unwrap();
        let second = denoise_with_plan(&first.denoised, &cfg, &first.plan).unwrap();
        let norm = |v: &[f64]| v.iter().map(|c| c * c).sum::<f64>().sqrt();
        let delta: Vec<f64> = second.denoised.iter().zip(&first.denoised).map(|(a, b)| a - b).collect();
        assert!(norm(&delta) < norm(&first.noise));
    }
}

#[test]
fn batch_matches_single() {
    let signals: Vec<Vec<f64>> = (0..6).map(|k| (0..128).map(|i| ((i * (k + 1)) as f64).sin()).collect()).collect();
    let cfg = DenoiseConfig::default();
    let seq = denoise_batch(&signals, &cfg, Execution::Sequential);
    let par = denoise_batch(&signals, &cfg, Execution::Parallel);
    assert_eq!(seq, par);
}
