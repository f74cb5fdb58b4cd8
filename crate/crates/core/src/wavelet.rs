//! Daubechies-4 discrete wavelet transform and wavelet-shrinkage denoising.
//!
//! Analysis at each level extends the signal past both ends (see
//! [`Padding`]), convolves with the decomposition filters and keeps every
//! second sample, giving `⌊(n + 7) / 2⌋` coefficients per band. Synthesis
//! is the adjoint of the analysis operator restricted to the original
//! support, which reconstructs exactly for any padding mode because every
//! coefficient that touches `[0, n)` is retained.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};

pub const FILTER_LEN: usize = 8;

/// db4 scaling (decomposition lowpass) filter.
const DB4_DEC_LO: [f64; FILTER_LEN] = [
    -0.010597401784997278,
    0.032883011666982945,
    0.030841381835986965,
    -0.18703481171888114,
    -0.02798376941698385,
    0.6308807679295904,
    0.7148465705525415,
    0.23037781330885523,
];

/// MAD-to-σ conversion for Gaussian noise.
pub const MAD_SCALE: f64 = 0.6745;

#[derive(Debug, Error, PartialEq)]
pub enum WaveletError {
    #[error("signal of length {len} is too short (need at least {FILTER_LEN})")]
    TooShort { len: usize },
    #[error("{levels} levels infeasible for length {len}: level {level} input has {at} samples")]
    InfeasibleLevels {
        levels: usize,
        len: usize,
        level: usize,
        at: usize,
    },
    #[error("at least one decomposition level is required")]
    ZeroLevels,
    #[error("inconsistent decomposition: {0}")]
    Inconsistent(String),
    #[error("filter bank invariant violated: {0}")]
    InvalidFilter(String),
    #[error("cannot estimate noise from an empty coefficient array")]
    EmptyCoefficients,
    #[error("threshold must be non-negative, got {0}")]
    NegativeThreshold(f64),
    #[error("level {level} outside 1..={levels}")]
    LevelOutOfRange { level: usize, levels: usize },
}

/// Boundary extension used before each analysis step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Half-sample mirror: `… x1 x0 | x0 x1 … x(n-1) | x(n-1) x(n-2) …`
    #[default]
    Symmetric,
    Periodic,
    Zero,
}

impl std::str::FromStr for Padding {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "symmetric" => Ok(Padding::Symmetric),
            "periodic" => Ok(Padding::Periodic),
            "zero" => Ok(Padding::Zero),
            other => Err(format!("unknown padding mode {other:?}")),
        }
    }
}

impl Padding {
    fn sample(self, x: &[f64], i: isize) -> f64 {
        let n = x.len() as isize;
        match self {
            Padding::Zero => {
                if (0..n).contains(&i) {
                    x[i as usize]
                } else {
                    0.0
                }
            }
            Padding::Periodic => x[i.rem_euclid(n) as usize],
            Padding::Symmetric => {
                let mut i = i;
                while !(0..n).contains(&i) {
                    i = if i < 0 { -i - 1 } else { 2 * n - 1 - i };
                }
                x[i as usize]
            }
        }
    }
}

/// Two-channel orthogonal filter bank.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletFilterBank {
    pub decomposition_lowpass: [f64; FILTER_LEN],
    pub decomposition_highpass: [f64; FILTER_LEN],
    pub reconstruction_lowpass: [f64; FILTER_LEN],
    pub reconstruction_highpass: [f64; FILTER_LEN],
}

impl WaveletFilterBank {
    /// Builds the bank from a decomposition lowpass filter and checks the
    /// orthonormality invariants.
    pub fn from_lowpass(dec_lo: [f64; FILTER_LEN]) -> Result<Self, WaveletError> {
        let mut dec_hi = [0.0; FILTER_LEN];
        let mut rec_lo = [0.0; FILTER_LEN];
        let mut rec_hi = [0.0; FILTER_LEN];
        for k in 0..FILTER_LEN {
            let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
            dec_hi[k] = sign * dec_lo[FILTER_LEN - 1 - k];
            rec_lo[k] = dec_lo[FILTER_LEN - 1 - k];
        }
        for k in 0..FILTER_LEN {
            rec_hi[k] = dec_hi[FILTER_LEN - 1 - k];
        }
        let bank = Self {
            decomposition_lowpass: dec_lo,
            decomposition_highpass: dec_hi,
            reconstruction_lowpass: rec_lo,
            reconstruction_highpass: rec_hi,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn db4() -> Self {
        Self::from_lowpass(DB4_DEC_LO).expect("db4 constants satisfy the filter-bank invariants")
    }

    pub fn validate(&self) -> Result<(), WaveletError> {
        const TOL: f64 = 1e-10;
        let sum = |f: &[f64]| f.iter().sum::<f64>();
        let norm = |f: &[f64]| f.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (name, lo) in [
            ("decomposition lowpass", &self.decomposition_lowpass),
            ("reconstruction lowpass", &self.reconstruction_lowpass),
        ] {
            if (sum(lo) - std::f64::consts::SQRT_2).abs() > TOL {
                return Err(WaveletError::InvalidFilter(format!("{name} sums to {}", sum(lo))));
            }
        }
        for (name, hi) in [
            ("decomposition highpass", &self.decomposition_highpass),
            ("reconstruction highpass", &self.reconstruction_highpass),
        ] {
            if sum(hi).abs() > TOL {
                return Err(WaveletError::InvalidFilter(format!("{name} sums to {}", sum(hi))));
            }
        }
        for f in [
            &self.decomposition_lowpass,
            &self.decomposition_highpass,
            &self.reconstruction_lowpass,
            &self.reconstruction_highpass,
        ] {
            if (norm(f) - 1.0).abs() > TOL {
                return Err(WaveletError::InvalidFilter(format!("filter norm {}", norm(f))));
            }
        }
        // Orthogonality to even shifts of itself.
        let lo = &self.decomposition_lowpass;
        for shift in (2..FILTER_LEN).step_by(2) {
            let dot: f64 = (0..FILTER_LEN - shift).map(|k| lo[k] * lo[k + shift]).sum();
            if dot.abs() > TOL {
                return Err(WaveletError::InvalidFilter(format!(
                    "lowpass not orthogonal to its shift by {shift}: {dot}"
                )));
            }
        }
        Ok(())
    }
}

fn band_len(n: usize) -> usize {
    (n + FILTER_LEN - 1) / 2
}

/// Multi-level coefficients. `details[0]` is the coarsest level and the
/// last entry is level 1 (finest).
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletDecomposition {
    pub approximation: Vec<f64>,
    pub details: Vec<Vec<f64>>,
    pub levels: usize,
    pub original_length: usize,
    pub padding: Padding,
    /// Input length at each analysis step, finest level first.
    pub level_lengths: Vec<usize>,
}

impl WaveletDecomposition {
    /// Detail coefficients of `level` (1 = finest).
    pub fn detail(&self, level: usize) -> &[f64] {
        &self.details[self.levels - level]
    }

    pub fn detail_mut(&mut self, level: usize) -> &mut Vec<f64> {
        let idx = self.levels - level;
        &mut self.details[idx]
    }

    fn check(&self) -> Result<(), WaveletError> {
        let bad = |m: String| Err(WaveletError::Inconsistent(m));
        if self.levels == 0 || self.details.len() != self.levels || self.level_lengths.len() != self.levels {
            return bad(format!(
                "{} levels but {} detail bands and {} recorded lengths",
                self.levels,
                self.details.len(),
                self.level_lengths.len()
            ));
        }
        if self.level_lengths[0] != self.original_length {
            return bad("first level length differs from the original length".into());
        }
        for level in 1..=self.levels {
            let n_in = self.level_lengths[level - 1];
            let expected = band_len(n_in);
            if self.detail(level).len() != expected {
                return bad(format!(
                    "level {level} detail has {} coefficients, expected {expected}",
                    self.detail(level).len()
                ));
            }
            let next = if level < self.levels {
                self.level_lengths[level]
            } else {
                self.approximation.len()
            };
            if next != expected {
                return bad(format!("level {level} approximation length {next}, expected {expected}"));
            }
        }
        Ok(())
    }
}

fn analyse(x: &[f64], bank: &WaveletFilterBank, padding: Padding) -> (Vec<f64>, Vec<f64>) {
    let out = band_len(x.len());
    let mut approx = Vec::with_capacity(out);
    let mut detail = Vec::with_capacity(out);
    for o in 0..out {
        let centre = 2 * o as isize + 1;
        let (mut a, mut d) = (0.0, 0.0);
        for j in 0..FILTER_LEN {
            let v = padding.sample(x, centre - j as isize);
            a += bank.decomposition_lowpass[j] * v;
            d += bank.decomposition_highpass[j] * v;
        }
        approx.push(a);
        detail.push(d);
    }
    (approx, detail)
}

fn synthesise(approx: &[f64], detail: &[f64], n: usize, bank: &WaveletFilterBank) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for (i, xi) in x.iter_mut().enumerate() {
        // Coefficients o with 0 <= 2o + 1 - i < FILTER_LEN.
        let lo = i.saturating_sub(1).div_ceil(2);
        let hi = (i + FILTER_LEN - 2) / 2;
        let mut acc = 0.0;
        for o in lo..=hi.min(approx.len() - 1) {
            let k = i + FILTER_LEN - 2 - 2 * o;
            acc += bank.reconstruction_lowpass[k] * approx[o] + bank.reconstruction_highpass[k] * detail[o];
        }
        *xi = acc;
    }
    x
}

pub fn dwt(
    signal: &[f64],
    levels: usize,
    bank: &WaveletFilterBank,
    padding: Padding,
) -> Result<WaveletDecomposition, WaveletError> {
    if signal.len() < FILTER_LEN {
        return Err(WaveletError::TooShort { len: signal.len() });
    }
    if levels == 0 {
        return Err(WaveletError::ZeroLevels);
    }
    let mut current = signal.to_vec();
    let mut details = Vec::with_capacity(levels);
    let mut level_lengths = Vec::with_capacity(levels);
    for level in 1..=levels {
        if current.len() < FILTER_LEN {
            return Err(WaveletError::InfeasibleLevels {
                levels,
                len: signal.len(),
                level,
                at: current.len(),
            });
        }
        level_lengths.push(current.len());
        let (a, d) = analyse(&current, bank, padding);
        details.push(d);
        current = a;
    }
    details.reverse();
    Ok(WaveletDecomposition {
        approximation: current,
        details,
        levels,
        original_length: signal.len(),
        padding,
        level_lengths,
    })
}

pub fn idwt(decomp: &WaveletDecomposition, bank: &WaveletFilterBank) -> Result<Vec<f64>, WaveletError> {
    decomp.check()?;
    let mut current = decomp.approximation.clone();
    for level in (1..=decomp.levels).rev() {
        current = synthesise(
            &current,
            decomp.detail(level),
            decomp.level_lengths[level - 1],
            bank,
        );
    }
    Ok(current)
}

/// Deepest level count for which every analysis input keeps at least
/// `FILTER_LEN` samples.
pub fn max_levels(len: usize) -> usize {
    let mut n = len;
    let mut levels = 0;
    while n >= FILTER_LEN {
        levels += 1;
        n = band_len(n);
    }
    levels
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Robust noise scale: `median(|d|) / 0.6745`.
pub fn estimate_sigma(finest_details: &[f64]) -> Result<f64, WaveletError> {
    if finest_details.is_empty() {
        return Err(WaveletError::EmptyCoefficients);
    }
    let mut abs: Vec<f64> = finest_details.iter().map(|c| c.abs()).collect();
    Ok(median(&mut abs) / MAD_SCALE)
}

/// `sign(c)·max(|c| − t, 0)`.
pub fn soft_threshold(coefficients: &[f64], threshold: f64) -> Result<Vec<f64>, WaveletError> {
    if !(threshold >= 0.0) {
        return Err(WaveletError::NegativeThreshold(threshold));
    }
    Ok(coefficients
        .iter()
        .map(|&c| c.signum() * (c.abs() - threshold).max(0.0))
        .collect())
}

/// `σ·√(2 ln n)`.
pub fn universal_threshold(sigma: f64, n: usize) -> f64 {
    sigma * (2.0 * (n as f64).ln()).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseConfig {
    pub levels: usize,
    pub padding: Padding,
    /// Detail levels set entirely to zero (1 = finest).
    pub zeroed_levels: Vec<usize>,
    /// Detail levels soft-thresholded; `None` means every level not zeroed.
    pub thresholded_levels: Option<Vec<usize>>,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            padding: Padding::Symmetric,
            zeroed_levels: vec![1],
            thresholded_levels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdPlan {
    pub sigma: f64,
    pub threshold: f64,
    pub zeroed_levels: Vec<usize>,
    pub thresholded_levels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoised {
    pub denoised: Vec<f64>,
    /// `signal − denoised`.
    pub noise: Vec<f64>,
    pub plan: ThresholdPlan,
}

impl DenoiseConfig {
    /// Estimates σ from the finest details of `signal` and fixes the
    /// universal threshold.
    pub fn plan(&self, signal: &[f64]) -> Result<ThresholdPlan, WaveletError> {
        let bank = WaveletFilterBank::db4();
        let decomp = dwt(signal, self.levels, &bank, self.padding)?;
        self.plan_for(&decomp)
    }

    fn plan_for(&self, decomp: &WaveletDecomposition) -> Result<ThresholdPlan, WaveletError> {
        let levels = decomp.levels;
        for &level in self.zeroed_levels.iter().chain(self.thresholded_levels.iter().flatten()) {
            if level == 0 || level > levels {
                return Err(WaveletError::LevelOutOfRange { level, levels });
            }
        }
        let sigma = estimate_sigma(decomp.detail(1))?;
        let mut zeroed = self.zeroed_levels.clone();
        zeroed.sort_unstable();
        zeroed.dedup();
        let mut thresholded = match &self.thresholded_levels {
            Some(levels) => levels.clone(),
            None => (1..=levels).filter(|l| !zeroed.contains(l)).collect(),
        };
        thresholded.sort_unstable();
        thresholded.dedup();
        Ok(ThresholdPlan {
            sigma,
            threshold: universal_threshold(sigma, decomp.original_length),
            zeroed_levels: zeroed,
            thresholded_levels: thresholded,
        })
    }
}

/// Pad, decompose, estimate noise, shrink detail bands, reconstruct.
pub fn denoise(signal: &[f64], config: &DenoiseConfig) -> Result<Denoised, WaveletError> {
    let bank = WaveletFilterBank::db4();
    let decomp = dwt(signal, config.levels, &bank, config.padding)?;
    let plan = config.plan_for(&decomp)?;
    apply_plan(signal, decomp, plan, &bank)
}

/// Denoises with a fixed plan instead of re-estimating σ from `signal`.
pub fn denoise_with_plan(
    signal: &[f64],
    config: &DenoiseConfig,
    plan: &ThresholdPlan,
) -> Result<Denoised, WaveletError> {
    let bank = WaveletFilterBank::db4();
    let decomp = dwt(signal, config.levels, &bank, config.padding)?;
    for &level in plan.zeroed_levels.iter().chain(&plan.thresholded_levels) {
        if level == 0 || level > decomp.levels {
            return Err(WaveletError::LevelOutOfRange {
                level,
                levels: decomp.levels,
            });
        }
    }
    apply_plan(signal, decomp, plan.clone(), &bank)
}

fn apply_plan(
    signal: &[f64],
    mut decomp: WaveletDecomposition,
    plan: ThresholdPlan,
    bank: &WaveletFilterBank,
) -> Result<Denoised, WaveletError> {
    for &level in &plan.thresholded_levels {
        let shrunk = soft_threshold(decomp.detail(level), plan.threshold)?;
        *decomp.detail_mut(level) = shrunk;
    }
    for &level in &plan.zeroed_levels {
        decomp.detail_mut(level).iter_mut().for_each(|c| *c = 0.0);
    }
    let denoised = idwt(&decomp, bank)?;
    let noise = signal.iter().zip(&denoised).map(|(s, d)| s - d).collect();
    Ok(Denoised {
        denoised,
        noise,
        plan,
    })
}

/// Denoises independent signals, optionally on the thread pool.
pub fn denoise_batch(
    signals: &[Vec<f64>],
    config: &DenoiseConfig,
    execution: Execution,
) -> Vec<Result<Denoised, WaveletError>> {
    exec::map(execution, signals, |s| denoise(s, config))
}
