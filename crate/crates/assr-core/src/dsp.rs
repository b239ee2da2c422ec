//! Signal conditioning: zero-phase IIR filtering (notch, Butterworth
//! band-pass) and rational-ratio resampling with a Kaiser-windowed sinc
//! kernel.
//!
//! Both filters run forward-backward over an odd-extension padded signal with
//! steady-state initial conditions, so they are zero-phase and essentially
//! transient-free away from the very ends.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

/// Quality factor of the mains notch.
pub const NOTCH_Q: f64 = 30.0;

/// One second-order section, coefficients normalized so a0 = 1.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// DC gain, used for steady-state filter initialization.
    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// Runs the section in place (direct form II transposed), starting from
    /// the steady state a constant input equal to the first sample would
    /// produce.
    fn run(&self, x: &mut [f64]) {
        if x.is_empty() {
            return;
        }
        let x0 = x[0];
        let y0 = self.dc_gain() * x0;
        let mut z1 = (self.b1 + self.b2) * x0 - (self.a1 + self.a2) * y0;
        let mut z2 = self.b2 * x0 - self.a2 * y0;
        for v in x.iter_mut() {
            let xn = *v;
            let y = self.b0 * xn + z1;
            z1 = self.b1 * xn - self.a1 * y + z2;
            z2 = self.b2 * xn - self.a2 * y;
            *v = y;
        }
    }
}

/// Forward-backward filtering through a cascade of sections, with odd
/// reflection padding at both ends. Zero-phase; the magnitude response is the
/// squared cascade response.
pub fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let padlen = (12 * sections.len().max(1)).min(x.len() - 1);
    let mut ext = Vec::with_capacity(x.len() + 2 * padlen);
    let first = x[0];
    for i in (1..=padlen).rev() {
        ext.push(2.0 * first - x[i]);
    }
    ext.extend_from_slice(x);
    let last = x[x.len() - 1];
    for i in 1..=padlen {
        ext.push(2.0 * last - x[x.len() - 1 - i]);
    }
    for s in sections {
        s.run(&mut ext);
    }
    ext.reverse();
    for s in sections {
        s.run(&mut ext);
    }
    ext.reverse();
    ext[padlen..padlen + x.len()].to_vec()
}

/// Second-order IIR notch at `f0` (RBJ cookbook design).
pub fn notch_sections(fs: f64, f0: f64, q: f64) -> Result<Vec<Biquad>> {
    if !(fs > 0.0 && f0 > 0.0 && f0 < fs / 2.0) {
        return Err(Error::InvalidFrequency(format!(
            "notch at {f0} Hz is not below Nyquist for fs {fs} Hz"
        )));
    }
    let w0 = 2.0 * PI * f0 / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    Ok(vec![Biquad {
        b0: 1.0 / a0,
        b1: -2.0 * w0.cos() / a0,
        b2: 1.0 / a0,
        a1: -2.0 * w0.cos() / a0,
        a2: (1.0 - alpha) / a0,
    }])
}

/// Zero-phase mains notch (Q = 30).
pub fn notch_filter(x: &[f64], fs: f64, f0: f64) -> Result<Vec<f64>> {
    Ok(filtfilt(&notch_sections(fs, f0, NOTCH_Q)?, x))
}

/// Fourth-order Butterworth band-pass as two biquad sections.
///
/// Designed from an order-2 analog prototype through the lowpass→bandpass
/// transform and the bilinear transform with frequency prewarping; gain is
/// normalized to 1 at the geometric center of the band.
pub fn bandpass_sections(fs: f64, low: f64, high: f64) -> Result<Vec<Biquad>> {
    if !(fs > 0.0 && low > 0.0 && low < high && high < fs / 2.0) {
        return Err(Error::InvalidBand { low, high, fs });
    }
    let fs2 = 2.0 * fs;
    let w1 = fs2 * (PI * low / fs).tan();
    let w2 = fs2 * (PI * high / fs).tan();
    let bw = w2 - w1;
    let w0sq = w1 * w2;

    // Order-2 Butterworth prototype has a single conjugate pole pair; taking
    // the upper-half-plane pole and pairing every image with its conjugate
    // yields real biquads. (The pairing below assumes no real prototype
    // poles, which holds for even orders.)
    let proto = Complex64::from_polar(1.0, 3.0 * PI / 4.0);
    let pb = proto * (bw / 2.0);
    let disc = (pb * pb - Complex64::new(w0sq, 0.0)).sqrt();
    let analog = [pb + disc, pb - disc];
    let digital: Vec<Complex64> = analog
        .iter()
        .map(|p| (Complex64::new(fs2, 0.0) + p) / (Complex64::new(fs2, 0.0) - p))
        .collect();

    // Each section gets a (z-1)(z+1) numerator; normalize |H| = 1 at the
    // (warped) center frequency.
    let wc = 2.0 * (w0sq.sqrt() / fs2).atan();
    let z = Complex64::from_polar(1.0, wc);
    let mut h = Complex64::new(1.0, 0.0);
    for p in &digital {
        h *= (z * z - 1.0) / ((z - p) * (z - p.conj()));
    }
    let k = 1.0 / h.norm();

    let mut sections = Vec::with_capacity(2);
    for (i, p) in digital.iter().enumerate() {
        let g = if i == 0 { k } else { 1.0 };
        sections.push(Biquad {
            b0: g,
            b1: 0.0,
            b2: -g,
            a1: -2.0 * p.re,
            a2: p.norm_sqr(),
        });
    }
    Ok(sections)
}

/// Zero-phase Butterworth band-pass.
pub fn bandpass_filter(x: &[f64], fs: f64, low: f64, high: f64) -> Result<Vec<f64>> {
    Ok(filtfilt(&bandpass_sections(fs, low, high)?, x))
}

fn bessel_i0(x: f64) -> f64 {
    let y = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= y / ((k * k) as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-12 {
        1.0
    } else {
        (PI * u).sin() / (PI * u)
    }
}

/// Kaiser window shape parameter for the resampling kernel.
const KAISER_BETA: f64 = 8.0;
/// Kernel half-width in samples of the band-limiting (lower) rate, i.e. 64
/// taps per polyphase branch at that rate.
const KERNEL_HALF_TAPS: f64 = 32.0;

/// Windowed-sinc kernel value at offset `u` input samples from the output
/// instant; `c` is the anti-alias cutoff as a fraction of the input Nyquist
/// and `half` the kernel half-width in input samples.
fn kernel(c: f64, half: f64, u: f64) -> f64 {
    let r = u / half;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    c * sinc(c * u) * bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / bessel_i0(KAISER_BETA)
}

/// Best rational approximation l/m to `r` with denominator ≤ 4096 (continued
/// fractions), or None if `r` is not essentially rational at that size.
fn rational_ratio(r: f64) -> Option<(u64, u64)> {
    let (mut h0, mut k0, mut h1, mut k1) = (0u64, 1u64, 1u64, 0u64);
    let mut x = r;
    for _ in 0..64 {
        let a = x.floor();
        if a < 0.0 || a > 1e15 {
            break;
        }
        let h2 = (a as u64).checked_mul(h1).and_then(|v| v.checked_add(h0))?;
        let k2 = (a as u64).checked_mul(k1).and_then(|v| v.checked_add(k0))?;
        if k2 > 4096 || h2 > 4096 * 4096 {
            break;
        }
        h0 = h1;
        k0 = k1;
        h1 = h2;
        k1 = k2;
        let frac = x - a;
        if frac.abs() < 1e-12 {
            break;
        }
        x = 1.0 / frac;
    }
    if k1 > 0 && (h1 as f64 / k1 as f64 - r).abs() <= r.abs() * 1e-9 {
        Some((h1, k1))
    } else {
        None
    }
}

/// Resamples `x` from `fs_in` to `fs_out`. Output length is
/// `round(len · fs_out / fs_in)`; equal rates return the signal unchanged.
///
/// Rational rate ratios (every EDF sampling rate in practice) go through a
/// precomputed polyphase weight table; anything else falls back to direct
/// kernel evaluation at the same accuracy.
pub fn resample(x: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>> {
    if !(fs_in > 0.0 && fs_out > 0.0) {
        return Err(Error::InvalidFrequency(format!(
            "resample rates must be positive, got {fs_in} -> {fs_out}"
        )));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    if fs_in == fs_out {
        return Ok(x.to_vec());
    }
    let n_out = (x.len() as f64 * fs_out / fs_in).round() as usize;
    let mut y = Vec::with_capacity(n_out);
    let c = (fs_out / fs_in).min(1.0);
    let half = (KERNEL_HALF_TAPS / c).ceil();

    if let Some((l, m)) = rational_ratio(fs_out / fs_in) {
        // Output instant t_mo = mo·M/L input samples; the fractional part
        // cycles through L phases, so weights are precomputed per phase.
        struct Phase {
            j_min: i64,
            weights: Vec<f64>,
        }
        let phases: Vec<Phase> = (0..l)
            .map(|r| {
                let frac = r as f64 / l as f64;
                let j_min = (frac - half).ceil() as i64;
                let j_max = (frac + half).floor() as i64;
                let weights = (j_min..=j_max)
                    .map(|j| kernel(c, half, frac - j as f64))
                    .collect();
                Phase { j_min, weights }
            })
            .collect();
        for mo in 0..n_out as u64 {
            let num = mo * m;
            let base = (num / l) as i64;
            let phase = &phases[(num % l) as usize];
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (idx, &w) in phase.weights.iter().enumerate() {
                let k = base + phase.j_min + idx as i64;
                if k >= 0 && (k as usize) < x.len() {
                    acc += w * x[k as usize];
                    wsum += w;
                }
            }
            y.push(if wsum != 0.0 { acc / wsum } else { 0.0 });
        }
    } else {
        for mo in 0..n_out {
            let t = mo as f64 * fs_in / fs_out;
            let j_min = ((t - half).ceil() as i64).max(0);
            let j_max = ((t + half).floor() as i64).min(x.len() as i64 - 1);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for k in j_min..=j_max {
                let w = kernel(c, half, t - k as f64);
                acc += w * x[k as usize];
                wsum += w;
            }
            y.push(if wsum != 0.0 { acc / wsum } else { 0.0 });
        }
    }
    Ok(y)
}
