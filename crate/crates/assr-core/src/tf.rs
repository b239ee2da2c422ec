//! The 14 temporal-frequency features computed per 6 s sub-epoch: five
//! relative band powers, amplitude-histogram entropy, three harmonic
//! parameters of the power spectrum, the three Hjorth parameters, and
//! skewness/kurtosis.
//!
//! Degenerate inputs (flat or all-zero signals) never abort: the affected
//! features fall back to fixed values and the result carries warning flags.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::SubEpoch;

/// Number of features in a [`TfFeatureVector`].
pub const TF_FEATURE_COUNT: usize = 14;

/// Column names in the fixed feature order.
pub const TF_FEATURE_NAMES: [&str; TF_FEATURE_COUNT] = [
    "rel_delta",
    "rel_theta",
    "rel_alpha",
    "rel_beta",
    "rel_gamma",
    "entropy",
    "f_c",
    "f_delta",
    "s_fc",
    "activity",
    "mobility",
    "complexity",
    "skew",
    "kurt",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Band {
    pub name: String,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl Band {
    fn new(name: &str, low_hz: f64, high_hz: f64) -> Band {
        Band {
            name: name.to_string(),
            low_hz,
            high_hz,
        }
    }

    /// Band membership is half-open, `low ≤ f < high`, so adjacent bands
    /// never double-count a bin.
    fn contains(&self, f: f64) -> bool {
        self.low_hz <= f && f < self.high_hz
    }
}

/// The five classical EEG bands; γ is capped at the 64 Hz-rate Nyquist.
pub fn default_bands() -> Vec<Band> {
    vec![
        Band::new("delta", 0.5, 4.0),
        Band::new("theta", 4.0, 8.0),
        Band::new("alpha", 8.0, 13.0),
        Band::new("beta", 13.0, 20.0),
        Band::new("gamma", 20.0, 32.0),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub bands: Vec<Band>,
    pub entropy_bins: usize,
    pub harmonic_low_hz: f64,
    pub harmonic_high_hz: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            bands: default_bands(),
            entropy_bins: 32,
            harmonic_low_hz: 0.5,
            harmonic_high_hz: 32.0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self, nyquist_hz: f64) -> Result<()> {
        if self.bands.len() != 5 {
            return Err(Error::InvalidConfig(format!(
                "expected 5 bands, got {}",
                self.bands.len()
            )));
        }
        for pair in self.bands.windows(2) {
            if pair[0].high_hz > pair[1].low_hz {
                return Err(Error::InvalidConfig(format!(
                    "bands {} and {} overlap or are out of order",
                    pair[0].name, pair[1].name
                )));
            }
        }
        for b in &self.bands {
            if !(b.low_hz < b.high_hz) {
                return Err(Error::InvalidConfig(format!("band {} is empty", b.name)));
            }
        }
        if self.entropy_bins < 2 {
            return Err(Error::InvalidConfig("entropy needs at least 2 bins".into()));
        }
        if !(self.harmonic_low_hz < self.harmonic_high_hz && self.harmonic_high_hz <= nyquist_hz) {
            return Err(Error::InvalidConfig(format!(
                "harmonic band [{}, {}] not within (0, {nyquist_hz}]",
                self.harmonic_low_hz, self.harmonic_high_hz
            )));
        }
        Ok(())
    }
}

/// One-sided power spectral density estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdEstimate {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
}

impl PsdEstimate {
    /// Frequency resolution (bin spacing).
    pub fn df(&self) -> f64 {
        if self.freqs.len() > 1 {
            self.freqs[1] - self.freqs[0]
        } else {
            0.0
        }
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

const WELCH_SEGMENT: usize = 128;

/// Welch PSD: 128-sample Hann segments, 50% overlap, averaged one-sided
/// density periodograms. On a 384-sample sub-epoch at 64 Hz this yields five
/// segments and 0.5 Hz resolution.
pub fn compute_psd(x: &[f64], fs: f64) -> PsdEstimate {
    let nper = WELCH_SEGMENT.min(x.len().max(1));
    let step = (nper / 2).max(1);
    let window: Vec<f64> = (0..nper)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / nper as f64).cos()))
        .collect();
    let win_energy: f64 = window.iter().map(|w| w * w).sum();
    let n_bins = nper / 2 + 1;
    let mut power = vec![0.0; n_bins];
    let mut n_segments = 0usize;

    let mut start = 0;
    let mut buf = vec![Complex64::new(0.0, 0.0); nper];
    while start + nper <= x.len() {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(x[start + i] * window[i], 0.0);
        }
        PLANNER.with(|p| {
            let fft = p.borrow_mut().plan_fft_forward(nper);
            fft.process(&mut buf);
        });
        for (k, p) in power.iter_mut().enumerate() {
            let one_sided = if k == 0 || k == nper - k { 1.0 } else { 2.0 };
            *p += one_sided * buf[k].norm_sqr() / (fs * win_energy);
        }
        n_segments += 1;
        start += step;
    }
    if n_segments > 0 {
        for p in &mut power {
            *p /= n_segments as f64;
        }
    }
    PsdEstimate {
        freqs: (0..n_bins).map(|k| k as f64 * fs / nper as f64).collect(),
        power,
    }
}

/// Per-band power divided by the power over the union of all five bands.
/// An all-zero PSD yields the uniform vector and raises the flag.
pub fn relative_band_powers(psd: &PsdEstimate, bands: &[Band]) -> ([f64; 5], bool) {
    let mut sums = [0.0; 5];
    for (f, p) in psd.freqs.iter().zip(&psd.power) {
        for (s, band) in sums.iter_mut().zip(bands) {
            if band.contains(*f) {
                *s += p;
            }
        }
    }
    let total: f64 = sums.iter().sum();
    if total <= 0.0 {
        return ([1.0 / 5.0; 5], true);
    }
    for s in &mut sums {
        *s /= total;
    }
    (sums, false)
}

/// Shannon entropy of the amplitude histogram over `n_bins` equal bins
/// spanning [min, max]. A flat signal occupies one bin and scores 0.
pub fn histogram_entropy(x: &[f64], n_bins: usize) -> f64 {
    if x.is_empty() || n_bins == 0 {
        return 0.0;
    }
    let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range <= 0.0 {
        return 0.0;
    }
    let mut counts = vec![0usize; n_bins];
    for &v in x {
        let idx = (((v - min) / range) * n_bins as f64) as usize;
        counts[idx.min(n_bins - 1)] += 1;
    }
    let n = x.len() as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Central frequency, bandwidth, and the spectral value at the central
/// frequency, over the PSD bins with `f_1 ≤ f ≤ f_h`. Zero band power yields
/// flagged zeros.
pub fn harmonic_parameters(psd: &PsdEstimate, f_1: f64, f_h: f64) -> (f64, f64, f64, bool) {
    let in_band: Vec<usize> = (0..psd.freqs.len())
        .filter(|&k| f_1 <= psd.freqs[k] && psd.freqs[k] <= f_h)
        .collect();
    let total: f64 = in_band.iter().map(|&k| psd.power[k]).sum();
    if total <= 0.0 || in_band.is_empty() {
        return (0.0, 0.0, 0.0, true);
    }
    let f_c = in_band
        .iter()
        .map(|&k| psd.freqs[k] * psd.power[k])
        .sum::<f64>()
        / total;
    let f_delta = (in_band
        .iter()
        .map(|&k| (psd.freqs[k] - f_c).powi(2) * psd.power[k])
        .sum::<f64>()
        / total)
        .sqrt();
    let nearest = in_band
        .iter()
        .copied()
        .min_by(|&a, &b| {
            (psd.freqs[a] - f_c)
                .abs()
                .total_cmp(&(psd.freqs[b] - f_c).abs())
        })
        .unwrap();
    (f_c, f_delta, psd.power[nearest], false)
}

fn population_var(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64
}

fn first_difference(x: &[f64]) -> Vec<f64> {
    x.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Hjorth activity, mobility, and complexity (population variances, plain
/// first differences). Ratios with a zero-variance denominator are 0.
pub fn hjorth_parameters(x: &[f64]) -> (f64, f64, f64) {
    let activity = population_var(x);
    if activity == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let dx = first_difference(x);
    let var_dx = population_var(&dx);
    let mobility = (var_dx / activity).sqrt();
    if var_dx == 0.0 {
        return (activity, mobility, 0.0);
    }
    let var_ddx = population_var(&first_difference(&dx));
    let complexity = (var_ddx * activity).sqrt() / var_dx;
    (activity, mobility, complexity)
}

/// Skewness m₃/m₂^{3/2} and kurtosis m₄/m₂² from central moments with the
/// sample mean. A flat signal yields flagged zeros.
pub fn skewness_kurtosis(x: &[f64]) -> (f64, f64, bool) {
    if x.is_empty() {
        return (0.0, 0.0, true);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if m2 == 0.0 {
        return (0.0, 0.0, true);
    }
    (m3 / m2.powf(1.5), m4 / (m2 * m2), false)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFlags {
    pub zero_total_power: bool,
    pub zero_band_power: bool,
    pub constant_signal: bool,
}

impl FeatureFlags {
    pub fn any(&self) -> bool {
        self.zero_total_power || self.zero_band_power || self.constant_signal
    }
}

/// The 14 features in fixed order (see [`TF_FEATURE_NAMES`]).
#[derive(Debug, Clone, PartialEq)]
pub struct TfFeatureVector {
    pub rel_power: [f64; 5],
    pub entropy: f64,
    pub f_c: f64,
    pub f_delta: f64,
    pub s_fc: f64,
    pub activity: f64,
    pub mobility: f64,
    pub complexity: f64,
    pub skew: f64,
    pub kurt: f64,
    pub flags: FeatureFlags,
}

impl TfFeatureVector {
    pub fn to_array(&self) -> [f64; TF_FEATURE_COUNT] {
        [
            self.rel_power[0],
            self.rel_power[1],
            self.rel_power[2],
            self.rel_power[3],
            self.rel_power[4],
            self.entropy,
            self.f_c,
            self.f_delta,
            self.s_fc,
            self.activity,
            self.mobility,
            self.complexity,
            self.skew,
            self.kurt,
        ]
    }
}

/// Computes all 14 features for one sub-epoch sampled at `fs`.
pub fn extract_tf(sub: &SubEpoch, cfg: &FeatureConfig, fs: f64) -> TfFeatureVector {
    let psd = compute_psd(&sub.samples, fs);
    let (rel_power, zero_total_power) = relative_band_powers(&psd, &cfg.bands);
    let entropy = histogram_entropy(&sub.samples, cfg.entropy_bins);
    let (f_c, f_delta, s_fc, zero_band_power) =
        harmonic_parameters(&psd, cfg.harmonic_low_hz, cfg.harmonic_high_hz);
    let (activity, mobility, complexity) = hjorth_parameters(&sub.samples);
    let (skew, kurt, constant_signal) = skewness_kurtosis(&sub.samples);
    TfFeatureVector {
        rel_power,
        entropy,
        f_c,
        f_delta,
        s_fc,
        activity,
        mobility,
        complexity,
        skew,
        kurt,
        flags: FeatureFlags {
            zero_total_power,
            zero_band_power,
            constant_signal,
        },
    }
}
