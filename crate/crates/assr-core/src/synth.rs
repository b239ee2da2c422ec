//! Synthetic EEG dataset generator: Markov stage sequences rendered as
//! band-limited oscillations with mains hum and occasional artifact bursts,
//! written out as EDF/hypnogram pairs plus a manifest.

use std::f64::consts::TAU;
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::edf::{write_edf, EdfHeader, SignalSpec};
use crate::error::{Error, Result};
use crate::manifest::{relativize, DatasetManifest, ManifestEntry};
use crate::stage::N_CLASSES;
use crate::util::derive_seed;

/// Oscillation amplitudes (µV) for one stage plus its white-noise floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageMix {
    pub delta: f64,
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub noise: f64,
}

impl StageMix {
    const fn new(delta: f64, theta: f64, alpha: f64, beta: f64, noise: f64) -> StageMix {
        StageMix {
            delta,
            theta,
            alpha,
            beta,
            noise,
        }
    }
}

/// Frequency window each component is drawn from, per epoch (Hz). The beta
/// window sits in the sleep-spindle range.
const BAND_RANGES: [(f64, f64); 4] = [(0.8, 3.5), (4.5, 7.5), (8.5, 12.5), (13.2, 15.5)];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub patients: usize,
    pub epochs_per_patient: usize,
    /// Recording rate (Hz); deliberately differs from the pipeline's 64 Hz
    /// target so the resampler is exercised.
    pub fs: f64,
    /// Per-class mixes in stage order (Awake, NREM1, NREM2, SWS, REM).
    pub mixes: [StageMix; N_CLASSES],
    /// Row-stochastic stage transition matrix in the same order; sequences
    /// start in Awake.
    pub transition: [[f64; N_CLASSES]; N_CLASSES],
    /// Probability that an epoch is replaced by a movement artifact and
    /// marked excluded in the hypnogram.
    pub artifact_rate: f64,
    /// 50 Hz interference amplitude (µV).
    pub mains_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            patients: 13,
            epochs_per_patient: 120,
            fs: 128.0,
            mixes: [
                // Awake: alpha-dominant, some fast activity.
                StageMix::new(8.0, 6.0, 35.0, 10.0, 6.0),
                // NREM1: theta takes over, alpha fades.
                StageMix::new(14.0, 24.0, 8.0, 4.0, 7.0),
                // NREM2: slowing plus spindle-band power.
                StageMix::new(30.0, 18.0, 5.0, 12.0, 7.0),
                // SWS: high-amplitude delta.
                StageMix::new(70.0, 10.0, 3.0, 2.0, 6.0),
                // REM: low-voltage mixed frequency, more beta than NREM1.
                StageMix::new(10.0, 16.0, 6.0, 14.0, 9.0),
            ],
            // Compressed sleep cycles (dwell ≈ 6 epochs per stage) so even
            // short nights visit every stage.
            transition: [
                [0.84, 0.12, 0.02, 0.00, 0.02],
                [0.03, 0.80, 0.14, 0.00, 0.03],
                [0.01, 0.03, 0.82, 0.10, 0.04],
                [0.00, 0.01, 0.12, 0.85, 0.02],
                [0.05, 0.06, 0.04, 0.00, 0.85],
            ],
            artifact_rate: 0.02,
            mains_amplitude: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patients == 0 || self.epochs_per_patient == 0 {
            return Err(Error::InvalidConfig(
                "need at least one patient and one epoch".into(),
            ));
        }
        if !(self.fs > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sample rate must be positive, got {}",
                self.fs
            )));
        }
        if !(0.0..=1.0).contains(&self.artifact_rate) {
            return Err(Error::InvalidConfig(format!(
                "artifact rate must be in [0, 1], got {}",
                self.artifact_rate
            )));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidConfig(format!(
                    "transition row {i} has probabilities outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "transition row {i} sums to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }
}

fn sample_next(row: &[f64; N_CLASSES], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    N_CLASSES - 1
}

/// One patient's generated night.
struct PatientData {
    /// EEG channel, physical µV.
    eeg: Vec<f64>,
    /// A low-amplitude dummy channel so channel selection is meaningful.
    emg: Vec<f64>,
    /// Conventional hypnogram codes (0/1/2/3/4/5 + 6/7/8 for artifacts).
    codes: Vec<u8>,
}

fn generate_patient(cfg: &SynthConfig, index: usize) -> PatientData {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("patient-{index}")));
    let epoch_len = (30.0 * cfg.fs).round() as usize;
    let n = cfg.epochs_per_patient;

    // Stage path and artifact marks first, then the waveform, so the label
    // sequence is independent of how many random draws rendering consumes.
    let mut stages = Vec::with_capacity(n);
    let mut state = 0; // start Awake
    for _ in 0..n {
        stages.push(state);
        state = sample_next(&cfg.transition[state], &mut rng);
    }
    let artifacts: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < cfg.artifact_rate).collect();

    // Alternate the two conventional deep-sleep codes between successive
    // deep-sleep runs (a single run keeps one code, as a human scorer would)
    // so downstream merging is exercised; cycle the three excluded codes.
    let mut sws_toggle = false;
    let mut prev_stage = usize::MAX;
    let mut artifact_cycle = 0u8;
    let mut codes = Vec::with_capacity(n);
    for (i, &stage) in stages.iter().enumerate() {
        let code = if artifacts[i] {
            artifact_cycle = (artifact_cycle + 1) % 3;
            6 + artifact_cycle
        } else {
            match stage {
                0 => 0, // Awake
                1 => 2, // NREM1
                2 => 3, // NREM2
                3 => {
                    if prev_stage != 3 {
                        sws_toggle = !sws_toggle;
                    }
                    if sws_toggle {
                        4
                    } else {
                        5
                    }
                }
                _ => 1, // REM
            }
        };
        prev_stage = stage;
        codes.push(code);
    }

    let mains_phase: f64 = rng.gen::<f64>() * TAU;
    let unit_noise = Normal::new(0.0, 1.0).expect("valid sigma");
    let mut eeg = Vec::with_capacity(n * epoch_len);
    let mut emg = Vec::with_capacity(n * epoch_len);
    for (i, &stage) in stages.iter().enumerate() {
        let mix = cfg.mixes[stage];
        let amps = [mix.delta, mix.theta, mix.alpha, mix.beta];
        let components: Vec<(f64, f64, f64)> = BAND_RANGES
            .iter()
            .zip(amps)
            .map(|(&(lo, hi), amp)| {
                let f = rng.gen_range(lo..hi);
                let phase = rng.gen::<f64>() * TAU;
                let jitter = rng.gen_range(0.85..1.15);
                (amp * jitter, f, phase)
            })
            .collect();
        // Artifact epochs get a large low-frequency lurch and a noisier
        // floor; they are excluded from scoring either way.
        let (artifact_amp, artifact_f, artifact_phase) = if artifacts[i] {
            (150.0, rng.gen_range(0.2..0.6), rng.gen::<f64>() * TAU)
        } else {
            (0.0, 1.0, 0.0)
        };
        let noise_sigma = mix.noise * if artifacts[i] { 8.0 } else { 1.0 };
        let start = i * epoch_len;
        for k in 0..epoch_len {
            let t = (start + k) as f64 / cfg.fs;
            let mut v = 0.0;
            for &(amp, f, phase) in &components {
                v += amp * (TAU * f * t + phase).sin();
            }
            v += artifact_amp * (TAU * artifact_f * t + artifact_phase).sin();
            v += noise_sigma * unit_noise.sample(&mut rng);
            v += cfg.mains_amplitude * (TAU * 50.0 * t + mains_phase).sin();
            eeg.push(v);
            let muscle = 5.0 * unit_noise.sample(&mut rng)
                + 0.5 * cfg.mains_amplitude * (TAU * 50.0 * t).sin();
            emg.push(muscle);
        }
    }
    PatientData { eeg, emg, codes }
}

fn signal_spec(label: &str, samples_per_record: usize) -> SignalSpec {
    SignalSpec {
        label: label.to_string(),
        transducer: "synthetic".to_string(),
        physical_unit: "uV".to_string(),
        physical_min: -250.0,
        physical_max: 250.0,
        digital_min: -2048,
        digital_max: 2047,
        prefiltering: "none".to_string(),
        samples_per_record,
    }
}

/// Generates the whole dataset under `out`: one EDF + hypnogram pair per
/// patient and a `manifest.json` with dataset-relative paths. Returns the
/// manifest with absolute paths, ready for use without reloading. Identical
/// configs produce byte-identical files.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let samples_per_record = cfg.fs.round() as usize;
    let mut entries = Vec::with_capacity(cfg.patients);
    for index in 0..cfg.patients {
        let patient_id = format!("p{:02}", index + 1);
        let data = generate_patient(cfg, index);
        let specs = [
            signal_spec("C3A2", samples_per_record),
            signal_spec("EMG", samples_per_record),
        ];
        let digital: Vec<Vec<i16>> = [&data.eeg, &data.emg]
            .iter()
            .zip(&specs)
            .map(|(channel, spec)| channel.iter().map(|&v| spec.to_digital(v)).collect())
            .collect();
        let start = NaiveDate::from_ymd_opt(2001, 6, 1)
            .unwrap()
            .checked_add_days(chrono::Days::new(index as u64))
            .unwrap()
            .and_hms_opt(22, 30, 0)
            .unwrap();
        let header = EdfHeader {
            version: "0".to_string(),
            patient_id: patient_id.clone(),
            recording_id: "synthetic sleep study".to_string(),
            start,
            num_records: cfg.epochs_per_patient * 30,
            record_duration_s: 1.0,
            signals: specs.to_vec(),
        };
        let bytes = write_edf(&header, &digital)?;
        let signal_path = out.join(format!("{patient_id}.edf"));
        std::fs::write(&signal_path, &bytes)
            .map_err(|e| Error::io(signal_path.display().to_string(), e))?;
        let hyp_path = out.join(format!("{patient_id}_stage.txt"));
        let mut text = String::with_capacity(data.codes.len() * 2);
        for code in &data.codes {
            text.push_str(&format!("{code}\n"));
        }
        std::fs::write(&hyp_path, &text)
            .map_err(|e| Error::io(hyp_path.display().to_string(), e))?;
        entries.push(ManifestEntry {
            patient_id,
            signal: signal_path,
            hypnogram: hyp_path,
        });
    }
    let manifest = DatasetManifest::new(entries)?;
    let mut relative = manifest.clone();
    relativize(&mut relative, out);
    relative.save(&out.join("manifest.json"))?;
    Ok(manifest)
}
