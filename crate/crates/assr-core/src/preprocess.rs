//! Turns a calibrated recording into labeled 30 s epochs and 6 s sub-epochs:
//! notch → band-pass → resample to the target rate, segmentation against the
//! hypnogram, transition-epoch removal, deep-sleep merging, and seeded class
//! balancing for training data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::edf::Recording;
use crate::error::{Error, Result};
use crate::stage::{
    Hypnogram, StageLabel, CLASSES, EPOCH_SECONDS, N_CLASSES, SUB_EPOCHS_PER_EPOCH,
    SUB_EPOCH_SECONDS,
};

/// Samples per 30 s epoch at the 64 Hz target rate.
pub const EPOCH_SAMPLES: usize = 1920;
/// Samples per 6 s sub-epoch at the 64 Hz target rate.
pub const SUB_EPOCH_SAMPLES: usize = 384;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Mains frequency to notch out (skipped when it exceeds the input
    /// Nyquist, where it cannot be represented anyway).
    pub notch_hz: f64,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub target_fs: f64,
    pub balance_seed: u64,
    /// Transition/artifact epochs are dropped from test recordings too by
    /// default; disable to score full sequences.
    pub remove_transitions_on_test: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            notch_hz: 50.0,
            band_low_hz: 0.3,
            band_high_hz: 32.0,
            target_fs: 64.0,
            balance_seed: 0,
            remove_transitions_on_test: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_fs > 0.0
            && self.band_low_hz > 0.0
            && self.band_low_hz < self.band_high_hz
            && self.band_high_hz <= self.target_fs / 2.0)
        {
            return Err(Error::InvalidBand {
                low: self.band_low_hz,
                high: self.band_high_hz,
                fs: self.target_fs,
            });
        }
        Ok(())
    }
}

/// One 30 s scoring window.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub patient_id: String,
    pub epoch_index: usize,
    pub samples: Vec<f64>,
    pub label: StageLabel,
}

/// One of the five 6 s slices of an epoch; inherits its parent's label.
#[derive(Debug, Clone, PartialEq)]
pub struct SubEpoch {
    pub epoch_index: usize,
    pub slot: usize,
    pub samples: Vec<f64>,
    pub label: StageLabel,
}

/// Notch, band-pass, and resample a raw signal to the target rate.
///
/// Filtering runs at the input rate, so the band's upper edge is clamped just
/// below the input Nyquist when the recording is slower than twice the band.
pub fn clean_signal(x: &[f64], fs: f64, cfg: &PreprocessConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !(fs > 0.0) {
        return Err(Error::InvalidFrequency(format!(
            "input rate must be positive, got {fs}"
        )));
    }
    let mut y = if cfg.notch_hz < fs / 2.0 {
        dsp::notch_filter(x, fs, cfg.notch_hz)?
    } else {
        x.to_vec()
    };
    let high = cfg.band_high_hz.min(0.99 * fs / 2.0);
    y = dsp::bandpass_filter(&y, fs, cfg.band_low_hz, high)?;
    dsp::resample(&y, fs, cfg.target_fs)
}

/// Splits a cleaned signal into labeled epochs and sub-epochs. The trailing
/// partial epoch is dropped, as are epochs past the end of the hypnogram
/// (and labels past the end of the signal).
pub fn segment(
    x: &[f64],
    fs: f64,
    hyp: &Hypnogram,
    patient_id: &str,
) -> (Vec<Epoch>, Vec<SubEpoch>) {
    let epoch_len = (EPOCH_SECONDS * fs).round() as usize;
    let sub_len = (SUB_EPOCH_SECONDS * fs).round() as usize;
    let n = (x.len() / epoch_len).min(hyp.labels.len());
    let mut epochs = Vec::with_capacity(n);
    let mut subs = Vec::with_capacity(n * SUB_EPOCHS_PER_EPOCH);
    for i in 0..n {
        let start = i * epoch_len;
        let label = hyp.labels[i];
        epochs.push(Epoch {
            patient_id: patient_id.to_string(),
            epoch_index: i,
            samples: x[start..start + epoch_len].to_vec(),
            label,
        });
        for slot in 0..SUB_EPOCHS_PER_EPOCH {
            let s = start + slot * sub_len;
            subs.push(SubEpoch {
                epoch_index: i,
                slot,
                samples: x[s..s + sub_len].to_vec(),
                label,
            });
        }
    }
    (epochs, subs)
}

/// Re-derives the sub-epochs of an epoch list (e.g. after filtering it).
pub fn sub_epochs_of(epochs: &[Epoch]) -> Vec<SubEpoch> {
    let mut subs = Vec::with_capacity(epochs.len() * SUB_EPOCHS_PER_EPOCH);
    for ep in epochs {
        let sub_len = ep.samples.len() / SUB_EPOCHS_PER_EPOCH;
        for slot in 0..SUB_EPOCHS_PER_EPOCH {
            subs.push(SubEpoch {
                epoch_index: ep.epoch_index,
                slot,
                samples: ep.samples[slot * sub_len..(slot + 1) * sub_len].to_vec(),
                label: ep.label,
            });
        }
    }
    subs
}

/// Keep mask for transition removal: an epoch survives iff it is not
/// Excluded and both neighbors (where present) carry the same label.
pub fn transition_kept_mask(labels: &[StageLabel]) -> Vec<bool> {
    let n = labels.len();
    (0..n)
        .map(|i| {
            labels[i] != StageLabel::Excluded
                && (i == 0 || labels[i - 1] == labels[i])
                && (i + 1 == n || labels[i + 1] == labels[i])
        })
        .collect()
}

/// Drops epochs whose neighborhood contains a stage change, plus all
/// Excluded epochs (which also disqualify their neighbors). Order is
/// preserved.
pub fn remove_transition_epochs(epochs: &[Epoch]) -> Vec<Epoch> {
    let labels: Vec<StageLabel> = epochs.iter().map(|e| e.label).collect();
    let mask = transition_kept_mask(&labels);
    epochs
        .iter()
        .zip(mask)
        .filter(|(_, keep)| *keep)
        .map(|(e, _)| e.clone())
        .collect()
}

/// NREM3/NREM4 → SWS; other scorable stages unchanged.
pub fn merge_stages(label: StageLabel) -> Result<StageLabel> {
    label.merge()
}

/// Applies [`merge_stages`] to every epoch label.
pub fn merge_epochs(mut epochs: Vec<Epoch>) -> Result<Vec<Epoch>> {
    for ep in &mut epochs {
        ep.label = ep.label.merge()?;
    }
    Ok(epochs)
}

/// Downsamples every present class to the size of the smallest one, choosing
/// uniformly at random (seeded) without replacement. Temporal order of the
/// survivors is preserved. Labels must already be merged.
pub fn balance_classes(epochs: &[Epoch], seed: u64) -> Result<Vec<Epoch>> {
    if epochs.is_empty() {
        return Err(Error::EmptyInput("balance_classes"));
    }
    let mut by_class: [Vec<usize>; N_CLASSES] = Default::default();
    for (i, ep) in epochs.iter().enumerate() {
        by_class[ep.label.class_index_checked()?].push(i);
    }
    let min_count = by_class
        .iter()
        .filter(|v| !v.is_empty())
        .map(Vec::len)
        .min()
        .unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::with_capacity(min_count * N_CLASSES);
    for class in CLASSES {
        let mut idx = by_class[class.class_index().unwrap()].clone();
        idx.shuffle(&mut rng);
        idx.truncate(min_count);
        kept.extend(idx);
    }
    kept.sort_unstable();
    Ok(kept.into_iter().map(|i| epochs[i].clone()).collect())
}

/// A cleaned, segmented recording with its original label sequence intact
/// (Excluded and pre-merge labels included) so downstream consumers can both
/// filter for classification and read unbroken stage runs.
#[derive(Debug, Clone)]
pub struct PreparedRecording {
    pub patient_id: String,
    pub epochs: Vec<Epoch>,
}

/// Cleans and segments one recording against its hypnogram.
pub fn prepare_recording(
    rec: &Recording,
    hyp: &Hypnogram,
    cfg: &PreprocessConfig,
) -> Result<PreparedRecording> {
    let cleaned = clean_signal(&rec.samples, rec.fs, cfg)?;
    let (epochs, _) = segment(&cleaned, cfg.target_fs, hyp, &rec.patient_id);
    if epochs.is_empty() {
        return Err(Error::NoEpochs("segmentation"));
    }
    Ok(PreparedRecording {
        patient_id: rec.patient_id.clone(),
        epochs,
    })
}

/// Transition removal, merging, and (for training) balancing, in that order.
pub fn select_scorable_epochs(
    prepared: &PreparedRecording,
    cfg: &PreprocessConfig,
    training: bool,
) -> Result<Vec<Epoch>> {
    let picked = if training || cfg.remove_transitions_on_test {
        remove_transition_epochs(&prepared.epochs)
    } else {
        prepared
            .epochs
            .iter()
            .filter(|e| e.label != StageLabel::Excluded)
            .cloned()
            .collect()
    };
    merge_epochs(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use StageLabel::*;

    fn hyp(labels: &[StageLabel]) -> Hypnogram {
        Hypnogram {
            labels: labels.to_vec(),
        }
    }

    fn labeled_epochs(labels: &[StageLabel]) -> Vec<Epoch> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| Epoch {
                patient_id: "p".into(),
                epoch_index: i,
                samples: vec![0.0; EPOCH_SAMPLES],
                label,
            })
            .collect()
    }

    #[test]
    fn segment_counts_and_truncation() {
        let x = vec![0.0; 3840];
        let (eps, subs) = segment(&x, 64.0, &hyp(&[Awake, Nrem1]), "p");
        assert_eq!(eps.len(), 2);
        assert_eq!(subs.len(), 10);
        assert_eq!(eps[0].samples.len(), EPOCH_SAMPLES);
        assert_eq!(subs[0].samples.len(), SUB_EPOCH_SAMPLES);

        let x = vec![0.0; 4000];
        let (eps, subs) = segment(&x, 64.0, &hyp(&[Awake, Nrem1, Nrem2]), "p");
        assert_eq!(eps.len(), 2, "trailing 160 samples dropped");
        assert_eq!(subs.len(), 10);

        let x = vec![0.0; 8 * EPOCH_SAMPLES];
        let (eps, _) = segment(&x, 64.0, &hyp(&[Awake; 3]), "p");
        assert_eq!(eps.len(), 3, "epochs beyond hypnogram dropped");
    }

    #[test]
    fn segment_index_arithmetic() {
        let x: Vec<f64> = (0..8 * EPOCH_SAMPLES).map(|i| i as f64).collect();
        let (_, subs) = segment(&x, 64.0, &hyp(&[Nrem2; 8]), "p");
        let sub = subs
            .iter()
            .find(|s| s.epoch_index == 7 && s.slot == 3)
            .unwrap();
        let start = 7 * EPOCH_SAMPLES + 3 * SUB_EPOCH_SAMPLES;
        assert_eq!(sub.samples[0], start as f64);
        assert_eq!(sub.samples[383], (start + 383) as f64);
        assert_eq!(sub.label, Nrem2);
    }

    #[test]
    fn sub_epochs_inherit_parent_labels() {
        let eps = labeled_epochs(&[Awake, Rem, Nrem2]);
        let subs = sub_epochs_of(&eps);
        assert_eq!(subs.len(), 15);
        for s in &subs {
            assert_eq!(s.label, eps[s.epoch_index].label);
        }
    }

    #[test]
    fn transition_mask_examples() {
        let mask = transition_kept_mask(&[Awake, Awake, Nrem1, Nrem1]);
        assert_eq!(mask, vec![true, false, false, true]);
        assert!(transition_kept_mask(&[Rem; 6]).iter().all(|&k| k));
        let alternating = [Awake, Nrem1, Awake, Nrem1, Awake];
        assert!(transition_kept_mask(&alternating).iter().all(|&k| !k));
    }

    #[test]
    fn excluded_disqualifies_neighbors() {
        let mask = transition_kept_mask(&[Awake, Awake, Excluded, Awake, Awake]);
        assert_eq!(mask, vec![true, false, false, false, true]);
    }

    #[test]
    fn removal_preserves_order() {
        let eps = labeled_epochs(&[Awake, Awake, Awake, Nrem1, Nrem1, Nrem1]);
        let kept = remove_transition_epochs(&eps);
        let idx: Vec<usize> = kept.iter().map(|e| e.epoch_index).collect();
        assert_eq!(idx, vec![0, 1, 4, 5]);
    }

    #[test]
    fn merge_maps_deep_sleep_only() {
        assert_eq!(merge_stages(Nrem3).unwrap(), Sws);
        assert_eq!(merge_stages(Nrem4).unwrap(), Sws);
        assert_eq!(merge_stages(Rem).unwrap(), Rem);
        assert!(matches!(
            merge_stages(Excluded),
            Err(Error::ExcludedLabel(_))
        ));
    }

    #[test]
    fn balance_downsamples_to_min_class() {
        let mut labels = vec![Awake; 10];
        labels.extend(vec![Nrem1; 4]);
        labels.extend(vec![Nrem2; 8]);
        let balanced = balance_classes(&labeled_epochs(&labels), 3).unwrap();
        let mut counts: BTreeMap<StageLabel, usize> = BTreeMap::new();
        for e in &balanced {
            *counts.entry(e.label).or_default() += 1;
        }
        assert_eq!(counts[&Awake], 4);
        assert_eq!(counts[&Nrem1], 4);
        assert_eq!(counts[&Nrem2], 4);
        let idx: Vec<usize> = balanced.iter().map(|e| e.epoch_index).collect();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(idx, sorted, "temporal order preserved");
    }

    #[test]
    fn balance_is_seed_deterministic() {
        let mut labels = vec![Awake; 20];
        labels.extend(vec![Rem; 7]);
        let eps = labeled_epochs(&labels);
        let a = balance_classes(&eps, 42).unwrap();
        let b = balance_classes(&eps, 42).unwrap();
        assert_eq!(a, b);
        let c = balance_classes(&eps, 43).unwrap();
        assert_ne!(
            a.iter().map(|e| e.epoch_index).collect::<Vec<_>>(),
            c.iter().map(|e| e.epoch_index).collect::<Vec<_>>()
        );
    }

    #[test]
    fn balance_keeps_already_balanced_input() {
        let eps = labeled_epochs(&[Awake, Rem, Awake, Rem]);
        let balanced = balance_classes(&eps, 9).unwrap();
        assert_eq!(balanced, eps);
        assert!(matches!(balance_classes(&[], 0), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn clean_signal_preserves_band_and_halves_length() {
        let fs = 128.0;
        let n = (fs * 60.0) as usize;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                let alpha = (2.0 * std::f64::consts::PI * 10.0 * t).sin();
                let mains = 0.5 * (2.0 * std::f64::consts::PI * 50.0 * t).sin();
                2.0 + alpha + mains
            })
            .collect();
        let cfg = PreprocessConfig::default();
        let y = clean_signal(&x, fs, &cfg).unwrap();
        assert_eq!(y.len(), n / 2);
        let mid = &y[64 * 5..y.len() - 64 * 5];
        let mean = mid.iter().sum::<f64>() / mid.len() as f64;
        assert!(mean.abs() < 0.05, "DC removed, mean {mean}");
        let m = mid.len() as f64;
        let (mut s, mut c) = (0.0, 0.0);
        for (i, v) in mid.iter().enumerate() {
            let ph = 2.0 * std::f64::consts::PI * 10.0 * i as f64 / 64.0;
            s += v * ph.sin();
            c += v * ph.cos();
        }
        let amp = 2.0 * (s * s + c * c).sqrt() / m;
        assert!((amp - 1.0).abs() < 0.05, "alpha amplitude {amp}");
    }

    #[test]
    fn select_scorable_respects_test_flag() {
        let prepared = PreparedRecording {
            patient_id: "p".into(),
            epochs: labeled_epochs(&[Awake, Awake, Nrem3, Nrem3, Nrem3, Excluded, Rem]),
        };
        let cfg = PreprocessConfig::default();
        let train = select_scorable_epochs(&prepared, &cfg, true).unwrap();
        assert_eq!(
            train.iter().map(|e| e.epoch_index).collect::<Vec<_>>(),
            vec![0, 3]
        );
        assert_eq!(train[1].label, Sws, "labels merged");

        let keep = PreprocessConfig {
            remove_transitions_on_test: false,
            ..cfg
        };
        let test = select_scorable_epochs(&prepared, &keep, false).unwrap();
        assert_eq!(
            test.iter().map(|e| e.epoch_index).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4, 6],
            "only Excluded dropped when transitions kept"
        );
    }
}
