//! Feature joining, standardization, the ensemble vote, epoch aggregation,
//! and the trained model bundle with its train/classify entry points.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::iter::repeat_n;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::Prediction;
use crate::dbn::{
    extract_unsup_batch, fine_tune, recording_stats, scale_input, select_architecture, train_dbn,
    validate_arch, DbnModel, ScalingStats, TrainConfig, DEFAULT_CLIP_SIGMA,
};
use crate::edf::{parse_edf, select_channel, Recording};
use crate::error::{Error, Result};
use crate::gp::{gp_binary_probabilities, predict_gp, train_gp, GpConfig, GpModel};
use crate::hmm::{train_hmm, viterbi, HmmModel};
use crate::manifest::{DatasetManifest, ManifestEntry};
use crate::par::maybe_par_map;
use crate::preprocess::{
    balance_classes, clean_signal, segment, select_scorable_epochs, Epoch, PreparedRecording,
    PreprocessConfig, SubEpoch,
};
use crate::rf::{predict_rf, train_rf, RfConfig, RfModel};
use crate::stage::{
    default_stage_mapping, parse_hypnogram, Hypnogram, StageLabel, CLASSES, EPOCH_SECONDS,
    N_CLASSES, SUB_EPOCHS_PER_EPOCH,
};
use crate::tf::{extract_tf, FeatureConfig, TfFeatureVector, TF_FEATURE_COUNT};
use crate::util::derive_seed;

/// Width of the unsupervised feature vector the joint representation expects
/// (the top layer of the reference architecture).
pub const UNSUP_FEATURE_COUNT: usize = 15;
/// 14 frequency/temporal features followed by the unsupervised block.
pub const JOINT_FEATURE_COUNT: usize = TF_FEATURE_COUNT + UNSUP_FEATURE_COUNT;
/// Training dimensions with a standard deviation at or below this are treated
/// as constant: they carry no signal and standardize to zero for any input.
pub const STD_FLOOR: f64 = 1e-9;

/// Concatenation of one sub-epoch's hand-crafted and unsupervised features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFeatureVector {
    pub values: [f64; JOINT_FEATURE_COUNT],
}

/// Places the 14 frequency/temporal features first, then the 15 unsupervised
/// activations, preserving order within each block.
pub fn join_features(tf: &TfFeatureVector, unsup: &[f64]) -> Result<JointFeatureVector> {
    if unsup.len() != UNSUP_FEATURE_COUNT {
        return Err(Error::LengthMismatch {
            left: UNSUP_FEATURE_COUNT,
            right: unsup.len(),
        });
    }
    let mut values = [0.0; JOINT_FEATURE_COUNT];
    values[..TF_FEATURE_COUNT].copy_from_slice(&tf.to_array());
    values[TF_FEATURE_COUNT..].copy_from_slice(unsup);
    Ok(JointFeatureVector { values })
}

/// Per-dimension training moments for z-scoring. Fitted on training data
/// only; test features reuse the stored values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; values at or below [`STD_FLOOR`] mark a
    /// dimension as constant.
    pub std: Vec<f64>,
}

/// Column-wise population mean and standard deviation.
pub fn fit_standardization(x: ArrayView2<f64>) -> Result<StandardizationStats> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::EmptyData);
    }
    let n = x.nrows() as f64;
    let mut mean = Vec::with_capacity(x.ncols());
    let mut std = Vec::with_capacity(x.ncols());
    for col in x.columns() {
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean.push(m);
        std.push(var.sqrt());
    }
    Ok(StandardizationStats { mean, std })
}

fn standardize_value(stats: &StandardizationStats, dim: usize, v: f64) -> f64 {
    if stats.std[dim] <= STD_FLOOR {
        0.0
    } else {
        (v - stats.mean[dim]) / stats.std[dim]
    }
}

/// Z-scores one joint vector with training moments. Dimensions that were
/// constant during training map to zero so an unseen offset cannot blow up
/// through a degenerate denominator.
pub fn standardize(stats: &StandardizationStats, x: &JointFeatureVector) -> Result<JointFeatureVector> {
    if stats.mean.len() != JOINT_FEATURE_COUNT || stats.std.len() != stats.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: JOINT_FEATURE_COUNT,
            actual: stats.mean.len(),
        });
    }
    let mut values = x.values;
    for (dim, v) in values.iter_mut().enumerate() {
        *v = standardize_value(stats, dim, *v);
    }
    Ok(JointFeatureVector { values })
}

/// [`standardize`] applied row-wise to an arbitrary-width feature matrix.
pub fn standardize_matrix(stats: &StandardizationStats, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if stats.mean.len() != x.ncols() || stats.std.len() != stats.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: stats.mean.len(),
            actual: x.ncols(),
        });
    }
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        for (dim, v) in row.iter_mut().enumerate() {
            *v = standardize_value(stats, dim, *v);
        }
    }
    Ok(out)
}

/// Which feature block the classifiers see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSet {
    TfOnly,
    UnsupOnly,
    Joint,
}

impl Default for FeatureSet {
    fn default() -> Self {
        FeatureSet::Joint
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSet::TfOnly => "tf-only",
            FeatureSet::UnsupOnly => "unsup-only",
            FeatureSet::Joint => "joint",
        })
    }
}

/// Majority vote over the three classifiers; when all three disagree the
/// Gaussian-process label wins.
pub fn ensemble_vote(gp: &Prediction, rf: &Prediction, hmm_label: StageLabel) -> StageLabel {
    if rf.label == hmm_label {
        rf.label
    } else {
        gp.label
    }
}

/// A scored 30 s epoch: the aggregated label plus the sub-epoch detail it was
/// derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPrediction {
    pub epoch_index: usize,
    pub label: StageLabel,
    pub sub_epoch_labels: [StageLabel; SUB_EPOCHS_PER_EPOCH],
    /// Per class, the sum of the five sub-epochs' binary GP probabilities;
    /// used to break ties between equally common sub-epoch labels.
    pub gp_probability_sums: [f64; N_CLASSES],
}

/// Reduces five sub-epoch decisions to one epoch label: most common label
/// first, ties broken by the larger summed GP probability, then by stage
/// order. The result is always one of the sub-epoch labels.
pub fn aggregate_epoch(
    epoch_index: usize,
    sub_labels: &[StageLabel],
    gp_probs: &[[f64; N_CLASSES]],
) -> Result<EpochPrediction> {
    if sub_labels.len() != SUB_EPOCHS_PER_EPOCH {
        return Err(Error::WrongCount {
            expected: SUB_EPOCHS_PER_EPOCH,
            actual: sub_labels.len(),
        });
    }
    if gp_probs.len() != SUB_EPOCHS_PER_EPOCH {
        return Err(Error::WrongCount {
            expected: SUB_EPOCHS_PER_EPOCH,
            actual: gp_probs.len(),
        });
    }
    let mut counts = [0usize; N_CLASSES];
    for &label in sub_labels {
        counts[label.class_index_checked()?] += 1;
    }
    let mut sums = [0.0; N_CLASSES];
    for probs in gp_probs {
        for (acc, p) in sums.iter_mut().zip(probs) {
            *acc += p;
        }
    }
    let mut best: Option<usize> = None;
    for c in 0..N_CLASSES {
        if counts[c] == 0 {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => counts[c] > counts[b] || (counts[c] == counts[b] && sums[c] > sums[b]),
        };
        if better {
            best = Some(c);
        }
    }
    let winner = best.expect("five labels were counted");
    Ok(EpochPrediction {
        epoch_index,
        label: CLASSES[winner],
        sub_epoch_labels: sub_labels.try_into().expect("length checked"),
        gp_probability_sums: sums,
    })
}

/// Every knob of the training pipeline in one document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// EDF channel label to score; the first channel when absent.
    pub channel: Option<String>,
    pub preprocess: PreprocessConfig,
    pub features: FeatureConfig,
    pub dbn: TrainConfig,
    /// Hidden layer widths used when `arch_search` is off.
    pub architecture: Vec<usize>,
    /// Re-run the reconstruction-error architecture search instead of using
    /// `architecture` directly.
    pub arch_search: bool,
    pub arch_candidates: Vec<Vec<usize>>,
    pub gp: GpConfig,
    pub rf: RfConfig,
    pub feature_set: FeatureSet,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            channel: None,
            preprocess: PreprocessConfig::default(),
            features: FeatureConfig::default(),
            dbn: TrainConfig::default(),
            architecture: vec![150, 75, 35, 25, 20, 15],
            arch_search: false,
            arch_candidates: crate::dbn::default_arch_candidates(),
            gp: GpConfig::default(),
            rf: RfConfig::default(),
            feature_set: FeatureSet::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.features.validate(self.preprocess.target_fs / 2.0)?;
        self.dbn.validate()?;
        self.gp.validate()?;
        self.rf.validate()?;
        validate_arch(&self.architecture)?;
        if self.arch_search && self.arch_candidates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        for arch in &self.arch_candidates {
            validate_arch(arch)?;
        }
        Ok(())
    }
}

/// Version stamp written into `meta.json`; bump on any layout change.
pub const BUNDLE_SCHEMA_VERSION: u32 = 1;

const BUNDLE_FILES: [&str; 8] = [
    "meta.json",
    "dbn.json",
    "gp.json",
    "rf.json",
    "hmm.json",
    "stats.json",
    "features.json",
    "preprocess.json",
];

/// Everything needed to score a new recording: the four models plus the
/// preprocessing and feature protocol they were trained under.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub schema_version: u32,
    pub seed: u64,
    pub feature_set: FeatureSet,
    pub architecture: Vec<usize>,
    pub channel: Option<String>,
    pub dbn: DbnModel,
    pub gp: GpModel,
    pub rf: RfModel,
    pub hmm: HmmModel,
    pub stats: StandardizationStats,
    pub features: FeatureConfig,
    pub preprocess: PreprocessConfig,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    schema_version: u32,
    seed: u64,
    feature_set: FeatureSet,
    architecture: Vec<usize>,
    channel: Option<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes the bundle as a directory of JSON parts plus `checksums.json`
/// (SHA-256 of every part). The byte content is fully determined by the
/// bundle, so identical bundles produce identical directories.
pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let meta = BundleMeta {
        schema_version: bundle.schema_version,
        seed: bundle.seed,
        feature_set: bundle.feature_set,
        architecture: bundle.architecture.clone(),
        channel: bundle.channel.clone(),
    };
    let parts: [(&str, Vec<u8>); 8] = [
        ("meta.json", to_json_bytes(&meta)?),
        ("dbn.json", to_json_bytes(&bundle.dbn)?),
        ("gp.json", to_json_bytes(&bundle.gp)?),
        ("rf.json", to_json_bytes(&bundle.rf)?),
        ("hmm.json", to_json_bytes(&bundle.hmm)?),
        ("stats.json", to_json_bytes(&bundle.stats)?),
        ("features.json", to_json_bytes(&bundle.features)?),
        ("preprocess.json", to_json_bytes(&bundle.preprocess)?),
    ];
    let mut checksums = BTreeMap::new();
    for (name, bytes) in &parts {
        checksums.insert((*name).to_string(), sha256_hex(bytes));
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    let path = dir.join("checksums.json");
    fs::write(&path, to_json_bytes(&checksums)?)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn read_bundle_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    match fs::read(&path) {
        Ok(bytes) => Ok(bytes),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::MissingBundleFile(name.to_string()))
        }
        Err(e) => Err(Error::io(path.display().to_string(), e)),
    }
}

/// Loads a bundle directory, verifying every part against `checksums.json`
/// and the schema version before deserializing.
pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let checksums: BTreeMap<String, String> =
        serde_json::from_slice(&read_bundle_file(dir, "checksums.json")?)?;
    let mut parts: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
    for name in BUNDLE_FILES {
        let bytes = read_bundle_file(dir, name)?;
        let expected = checksums
            .get(name)
            .ok_or_else(|| Error::MissingBundleFile(format!("checksum entry for {name}")))?;
        if sha256_hex(&bytes) != *expected {
            return Err(Error::ChecksumMismatch(name.to_string()));
        }
        parts.insert(name, bytes);
    }
    let meta: BundleMeta = serde_json::from_slice(&parts["meta.json"])?;
    if meta.schema_version != BUNDLE_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: meta.schema_version,
            expected: BUNDLE_SCHEMA_VERSION,
        });
    }
    Ok(ModelBundle {
        schema_version: meta.schema_version,
        seed: meta.seed,
        feature_set: meta.feature_set,
        architecture: meta.architecture,
        channel: meta.channel,
        dbn: serde_json::from_slice(&parts["dbn.json"])?,
        gp: serde_json::from_slice(&parts["gp.json"])?,
        rf: serde_json::from_slice(&parts["rf.json"])?,
        hmm: serde_json::from_slice(&parts["hmm.json"])?,
        stats: serde_json::from_slice(&parts["stats.json"])?,
        features: serde_json::from_slice(&parts["features.json"])?,
        preprocess: serde_json::from_slice(&parts["preprocess.json"])?,
    })
}

/// One patient's signal channel and hypnogram read off disk.
pub struct LoadedRecording {
    pub recording: Recording,
    pub hypnogram: Hypnogram,
}

/// Reads a manifest entry's EDF (picking `channel`, or the first channel when
/// `None`) and its hypnogram. The manifest's patient id overrides whatever
/// the EDF header carries.
pub fn load_entry(entry: &ManifestEntry, channel: Option<&str>) -> Result<LoadedRecording> {
    let bytes =
        fs::read(&entry.signal).map_err(|e| Error::io(entry.signal.display().to_string(), e))?;
    let (_, recordings) = parse_edf(&bytes)?;
    let mut recording = match channel {
        Some(label) => select_channel(&recordings, label)?.clone(),
        None => recordings
            .into_iter()
            .next()
            .ok_or_else(|| Error::EmptyRecording(entry.patient_id.clone()))?,
    };
    recording.patient_id = entry.patient_id.clone();
    let text = fs::read_to_string(&entry.hypnogram)
        .map_err(|e| Error::io(entry.hypnogram.display().to_string(), e))?;
    let hypnogram = parse_hypnogram(&text, &default_stage_mapping())?;
    Ok(LoadedRecording {
        recording,
        hypnogram,
    })
}

/// A cleaned training recording with its amplitude statistics.
struct TrainRecording {
    scaling: ScalingStats,
    prepared: PreparedRecording,
}

/// Unbroken stage runs at sub-epoch granularity: merged labels, split
/// wherever an excluded epoch interrupts the sequence, each epoch
/// contributing five consecutive states.
fn stage_runs(epochs: &[Epoch]) -> Result<Vec<Vec<StageLabel>>> {
    let mut runs = Vec::new();
    let mut current: Vec<StageLabel> = Vec::new();
    for ep in epochs {
        if ep.label == StageLabel::Excluded {
            if !current.is_empty() {
                runs.push(std::mem::take(&mut current));
            }
        } else {
            current.extend(repeat_n(ep.label.merge()?, SUB_EPOCHS_PER_EPOCH));
        }
    }
    if !current.is_empty() {
        runs.push(current);
    }
    Ok(runs)
}

/// Per-sub-epoch inputs for both feature blocks: the scaled DBN visible
/// vector and the hand-crafted features of the raw (cleaned, unscaled)
/// samples.
fn sub_epoch_inputs(
    epochs: &[Epoch],
    scaling: impl Fn(&Epoch) -> ScalingStats + Sync + Send,
    features: &FeatureConfig,
    fs: f64,
) -> (Array2<f64>, Vec<TfFeatureVector>) {
    let per_epoch = maybe_par_map(epochs.iter().collect(), |ep| {
        let stats = scaling(ep);
        let sub_len = ep.samples.len() / SUB_EPOCHS_PER_EPOCH;
        let mut rows = Vec::with_capacity(SUB_EPOCHS_PER_EPOCH);
        let mut tf = Vec::with_capacity(SUB_EPOCHS_PER_EPOCH);
        for slot in 0..SUB_EPOCHS_PER_EPOCH {
            let sub = SubEpoch {
                epoch_index: ep.epoch_index,
                slot,
                samples: ep.samples[slot * sub_len..(slot + 1) * sub_len].to_vec(),
                label: ep.label,
            };
            rows.push(scale_input(&stats, &sub.samples));
            tf.push(extract_tf(&sub, features, fs));
        }
        (rows, tf)
    });
    let sub_len = epochs
        .first()
        .map_or(0, |ep| ep.samples.len() / SUB_EPOCHS_PER_EPOCH);
    let mut scaled = Array2::zeros((epochs.len() * SUB_EPOCHS_PER_EPOCH, sub_len));
    let mut tf_rows = Vec::with_capacity(epochs.len() * SUB_EPOCHS_PER_EPOCH);
    for (e, (rows, tf)) in per_epoch.into_iter().enumerate() {
        for (slot, row) in rows.into_iter().enumerate() {
            scaled
                .row_mut(e * SUB_EPOCHS_PER_EPOCH + slot)
                .assign(&ndarray::ArrayView1::from(&row[..]));
        }
        tf_rows.extend(tf);
    }
    (scaled, tf_rows)
}

/// Assembles the matrix the classifiers train and predict on.
fn assemble_features(
    feature_set: FeatureSet,
    tf_rows: &[TfFeatureVector],
    unsup: &Array2<f64>,
) -> Result<Array2<f64>> {
    let n = tf_rows.len();
    match feature_set {
        FeatureSet::TfOnly => {
            let mut out = Array2::zeros((n, TF_FEATURE_COUNT));
            for (i, tf) in tf_rows.iter().enumerate() {
                out.row_mut(i)
                    .assign(&ndarray::ArrayView1::from(&tf.to_array()[..]));
            }
            Ok(out)
        }
        FeatureSet::UnsupOnly => Ok(unsup.clone()),
        FeatureSet::Joint => {
            let mut out = Array2::zeros((n, JOINT_FEATURE_COUNT));
            for (i, tf) in tf_rows.iter().enumerate() {
                let row = unsup.row(i);
                let joint = join_features(tf, row.as_slice().expect("row-major rows"))?;
                out.row_mut(i)
                    .assign(&ndarray::ArrayView1::from(&joint.values[..]));
            }
            Ok(out)
        }
    }
}

/// The training split after cleaning, selection, balancing, and scaling:
/// one row per sub-epoch.
struct TrainingData {
    scaled: Array2<f64>,
    tf_rows: Vec<TfFeatureVector>,
    labels: Vec<StageLabel>,
    runs: Vec<Vec<StageLabel>>,
}

fn gather_training_data(
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<TrainingData> {
    manifest.validate()?;
    let split = manifest
        .split
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("manifest has no train/test split".into()))?;
    if split.train.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    let entries: Vec<&ManifestEntry> = split
        .train
        .iter()
        .map(|id| {
            manifest
                .entry(id)
                .ok_or_else(|| Error::InvalidConfig(format!("split names unknown patient {id:?}")))
        })
        .collect::<Result<_>>()?;

    let recordings: Vec<TrainRecording> = maybe_par_map(entries, |entry| -> Result<TrainRecording> {
        let loaded = load_entry(entry, cfg.channel.as_deref())?;
        let cleaned = clean_signal(&loaded.recording.samples, loaded.recording.fs, &cfg.preprocess)?;
        let scaling = recording_stats(&cleaned, DEFAULT_CLIP_SIGMA);
        let (epochs, _) = segment(
            &cleaned,
            cfg.preprocess.target_fs,
            &loaded.hypnogram,
            &entry.patient_id,
        );
        if epochs.is_empty() {
            return Err(Error::NoEpochs("segmentation"));
        }
        Ok(TrainRecording {
            scaling,
            prepared: PreparedRecording {
                patient_id: entry.patient_id.clone(),
                epochs,
            },
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut runs = Vec::new();
    for rec in &recordings {
        runs.extend(stage_runs(&rec.prepared.epochs)?);
    }

    let mut pool = Vec::new();
    for rec in &recordings {
        pool.extend(select_scorable_epochs(&rec.prepared, &cfg.preprocess, true)?);
    }
    if pool.is_empty() {
        return Err(Error::NoEpochs("transition removal"));
    }
    let balanced = balance_classes(&pool, derive_seed(seed, "balance"))?;
    let labels: Vec<StageLabel> = balanced
        .iter()
        .flat_map(|ep| repeat_n(ep.label, SUB_EPOCHS_PER_EPOCH))
        .collect();

    let scaling_by_patient: BTreeMap<&str, ScalingStats> = recordings
        .iter()
        .map(|r| (r.prepared.patient_id.as_str(), r.scaling))
        .collect();
    let (scaled, tf_rows) = sub_epoch_inputs(
        &balanced,
        |ep| scaling_by_patient[ep.patient_id.as_str()],
        &cfg.features,
        cfg.preprocess.target_fs,
    );
    Ok(TrainingData {
        scaled,
        tf_rows,
        labels,
        runs,
    })
}

/// Runs the reconstruction-error architecture search over the manifest's
/// training split; returns the winner and the full (architecture, error)
/// table.
pub fn arch_search(
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(Vec<usize>, Vec<(Vec<usize>, f64)>)> {
    cfg.validate()?;
    let data = gather_training_data(manifest, cfg, seed)?;
    let mut dbn_cfg = cfg.dbn.clone();
    dbn_cfg.seed = derive_seed(seed, "dbn");
    select_architecture(&cfg.arch_candidates, data.scaled.view(), &dbn_cfg)
}

/// Trains the whole stack on the manifest's training split and returns the
/// bundle. All randomness descends from `seed`; the seeds inside the
/// sub-configs are ignored.
pub fn train_all(
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<ModelBundle> {
    cfg.validate()?;
    let TrainingData {
        scaled,
        tf_rows,
        labels,
        runs,
    } = gather_training_data(manifest, cfg, seed)?;

    let mut dbn_cfg = cfg.dbn.clone();
    dbn_cfg.seed = derive_seed(seed, "dbn");
    let architecture = if cfg.arch_search {
        select_architecture(&cfg.arch_candidates, scaled.view(), &dbn_cfg)?.0
    } else {
        cfg.architecture.clone()
    };
    if cfg.feature_set == FeatureSet::Joint && architecture.last() != Some(&UNSUP_FEATURE_COUNT) {
        return Err(Error::InvalidArchitecture(
            format!("{architecture:?}"),
            "the joint feature set needs a 15-unit top layer",
        ));
    }
    let pretrained = train_dbn(scaled.view(), &architecture, &dbn_cfg)?;
    let (dbn, _trace) = fine_tune(&pretrained, scaled.view(), &dbn_cfg)?;

    let unsup = extract_unsup_batch(&dbn, scaled.view())?;
    let features = assemble_features(cfg.feature_set, &tf_rows, &unsup)?;
    let stats = fit_standardization(features.view())?;
    let x = standardize_matrix(&stats, features.view())?;

    let mut gp_cfg = cfg.gp.clone();
    gp_cfg.seed = derive_seed(seed, "gp");
    let gp = train_gp(x.view(), &labels, &gp_cfg)?;
    let mut rf_cfg = cfg.rf.clone();
    rf_cfg.seed = derive_seed(seed, "rf");
    let rf = train_rf(x.view(), &labels, &rf_cfg)?;
    let hmm = train_hmm(&runs, x.view(), &labels)?;

    Ok(ModelBundle {
        schema_version: BUNDLE_SCHEMA_VERSION,
        seed,
        feature_set: cfg.feature_set,
        architecture,
        channel: cfg.channel.clone(),
        dbn,
        gp,
        rf,
        hmm,
        stats,
        features: cfg.features.clone(),
        preprocess: cfg.preprocess.clone(),
    })
}

/// Per-sub-epoch outputs of all three classifiers for one recording, plus the
/// aggregated epochs. `truths` is present only when a hypnogram was supplied;
/// it lines up with `predictions`.
#[derive(Debug, Clone)]
pub struct RecordingClassification {
    pub patient_id: String,
    pub predictions: Vec<EpochPrediction>,
    pub truths: Option<Vec<StageLabel>>,
    pub gp_sub: Vec<Prediction>,
    pub rf_sub: Vec<Prediction>,
    pub hmm_sub: Vec<StageLabel>,
}

/// Scores one recording. With a hypnogram, epochs are selected exactly as at
/// training time (transition/artifact removal per the stored config) and the
/// surviving true labels are returned; without one, every complete epoch is
/// scored. The recording's surviving sub-epochs form one temporal sequence
/// for the HMM.
pub fn classify_recording_detailed(
    bundle: &ModelBundle,
    recording: &Recording,
    hypnogram: Option<&Hypnogram>,
) -> Result<RecordingClassification> {
    let cleaned = clean_signal(&recording.samples, recording.fs, &bundle.preprocess)?;
    let scaling = recording_stats(&cleaned, bundle.dbn.clip_sigma);
    let epoch_len = (EPOCH_SECONDS * bundle.preprocess.target_fs).round() as usize;
    let synthesized;
    let hyp = match hypnogram {
        Some(h) => h,
        None => {
            // Uniform placeholder labels: nothing gets excluded or treated as
            // a transition, so every complete epoch survives selection.
            synthesized = Hypnogram {
                labels: vec![StageLabel::Awake; cleaned.len() / epoch_len],
            };
            &synthesized
        }
    };
    let (epochs, _) = segment(&cleaned, bundle.preprocess.target_fs, hyp, &recording.patient_id);
    let prepared = PreparedRecording {
        patient_id: recording.patient_id.clone(),
        epochs,
    };
    let selected = select_scorable_epochs(&prepared, &bundle.preprocess, false)?;
    if selected.is_empty() {
        return Ok(RecordingClassification {
            patient_id: recording.patient_id.clone(),
            predictions: Vec::new(),
            truths: hypnogram.map(|_| Vec::new()),
            gp_sub: Vec::new(),
            rf_sub: Vec::new(),
            hmm_sub: Vec::new(),
        });
    }

    let (scaled, tf_rows) = sub_epoch_inputs(
        &selected,
        |_| scaling,
        &bundle.features,
        bundle.preprocess.target_fs,
    );
    let unsup = extract_unsup_batch(&bundle.dbn, scaled.view())?;
    let features = assemble_features(bundle.feature_set, &tf_rows, &unsup)?;
    let x = standardize_matrix(&bundle.stats, features.view())?;

    let per_sub: Vec<(Prediction, Prediction, [f64; N_CLASSES])> =
        maybe_par_map((0..x.nrows()).collect(), |i| -> Result<_> {
            let row = x.row(i);
            let row = row.as_slice().expect("row-major rows");
            let gp = predict_gp(&bundle.gp, row)?;
            let rf = predict_rf(&bundle.rf, row)?;
            let binary = gp_binary_probabilities(&bundle.gp, row)?;
            Ok((gp, rf, binary))
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let hmm_sub = viterbi(&bundle.hmm, x.view())?;

    let mut predictions = Vec::with_capacity(selected.len());
    let mut gp_sub = Vec::with_capacity(per_sub.len());
    let mut rf_sub = Vec::with_capacity(per_sub.len());
    for (e, epoch) in selected.iter().enumerate() {
        let mut votes = [StageLabel::Awake; SUB_EPOCHS_PER_EPOCH];
        let mut probs = [[0.0; N_CLASSES]; SUB_EPOCHS_PER_EPOCH];
        for slot in 0..SUB_EPOCHS_PER_EPOCH {
            let i = e * SUB_EPOCHS_PER_EPOCH + slot;
            let (gp, rf, binary) = &per_sub[i];
            votes[slot] = ensemble_vote(gp, rf, hmm_sub[i]);
            probs[slot] = *binary;
            gp_sub.push(gp.clone());
            rf_sub.push(rf.clone());
        }
        predictions.push(aggregate_epoch(epoch.epoch_index, &votes, &probs)?);
    }

    Ok(RecordingClassification {
        patient_id: recording.patient_id.clone(),
        predictions,
        truths: hypnogram.map(|_| selected.iter().map(|e| e.label).collect()),
        gp_sub,
        rf_sub,
        hmm_sub,
    })
}

/// The epoch predictions alone; see [`classify_recording_detailed`].
pub fn classify_recording(
    bundle: &ModelBundle,
    recording: &Recording,
    hypnogram: Option<&Hypnogram>,
) -> Result<Vec<EpochPrediction>> {
    Ok(classify_recording_detailed(bundle, recording, hypnogram)?.predictions)
}

/// Tab-separated predictions, one epoch per row, `-` for unknown truth.
pub fn render_predictions(result: &RecordingClassification) -> String {
    let mut out = String::from(
        "patient_id\tepoch_index\tpredicted\ttruth\tsub_1\tsub_2\tsub_3\tsub_4\tsub_5\n",
    );
    for (i, pred) in result.predictions.iter().enumerate() {
        let truth = result
            .truths
            .as_ref()
            .map_or("-".to_string(), |t| t[i].to_string());
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            result.patient_id,
            pred.epoch_index,
            pred.label,
            truth,
            pred.sub_epoch_labels[0],
            pred.sub_epoch_labels[1],
            pred.sub_epoch_labels[2],
            pred.sub_epoch_labels[3],
            pred.sub_epoch_labels[4],
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tf::FeatureFlags;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use StageLabel::*;

    fn tf_vec(values: [f64; TF_FEATURE_COUNT]) -> TfFeatureVector {
        TfFeatureVector {
            rel_power: [values[0], values[1], values[2], values[3], values[4]],
            entropy: values[5],
            f_c: values[6],
            f_delta: values[7],
            s_fc: values[8],
            activity: values[9],
            mobility: values[10],
            complexity: values[11],
            skew: values[12],
            kurt: values[13],
            flags: FeatureFlags::default(),
        }
    }

    fn one_hot(label: StageLabel) -> Prediction {
        let mut probabilities = [0.0; N_CLASSES];
        probabilities[label.class_index().unwrap()] = 1.0;
        Prediction {
            label,
            probabilities,
        }
    }

    #[test]
    fn join_places_tf_first_and_unsup_second() {
        let tf = tf_vec(std::array::from_fn(|i| i as f64));
        let unsup: Vec<f64> = (100..115).map(f64::from).collect();
        let joint = join_features(&tf, &unsup).unwrap();
        assert_eq!(joint.values[0], 0.0);
        assert_eq!(joint.values[13], 13.0);
        assert_eq!(joint.values[14], 100.0);
        assert_eq!(joint.values[28], 114.0);
    }

    #[test]
    fn join_rejects_wrong_unsup_width() {
        let tf = tf_vec([0.0; TF_FEATURE_COUNT]);
        let unsup = vec![0.0; 20];
        assert!(matches!(
            join_features(&tf, &unsup),
            Err(Error::LengthMismatch { left: 15, right: 20 })
        ));
    }

    #[test]
    fn standardized_training_data_has_zero_mean_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((40, 6), |(_, j)| rng.gen::<f64>() * (j + 1) as f64 + j as f64);
        let stats = fit_standardization(x.view()).unwrap();
        let z = standardize_matrix(&stats, x.view()).unwrap();
        for col in z.columns() {
            let m = col.sum() / 40.0;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 40.0;
            assert!(m.abs() < 1e-9, "column mean {m}");
            assert!((var.sqrt() - 1.0).abs() < 1e-9, "column std {}", var.sqrt());
        }
    }

    #[test]
    fn constant_training_dimension_standardizes_to_zero() {
        let x = array![[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]];
        let stats = fit_standardization(x.view()).unwrap();
        // Even an input far from the constant column's value stays zero.
        let probe = array![[9000.0, 2.0]];
        let z = standardize_matrix(&stats, probe.view()).unwrap();
        assert_eq!(z[[0, 0]], 0.0);
        assert_eq!(z[[0, 1]], 0.0);
    }

    #[test]
    fn standardize_checks_dimensions() {
        let stats = StandardizationStats {
            mean: vec![0.0; 7],
            std: vec![1.0; 7],
        };
        let x = JointFeatureVector {
            values: [0.0; JOINT_FEATURE_COUNT],
        };
        assert!(matches!(
            standardize(&stats, &x),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ensemble_vote_matches_exhaustive_truth_table() {
        // Independent tally: a label backed by at least two classifiers wins;
        // otherwise the GP decides.
        for a in CLASSES {
            for b in CLASSES {
                for c in CLASSES {
                    let mut tally: BTreeMap<StageLabel, usize> = BTreeMap::new();
                    for l in [a, b, c] {
                        *tally.entry(l).or_default() += 1;
                    }
                    let majority = tally.into_iter().find(|&(_, n)| n >= 2).map(|(l, _)| l);
                    let want = majority.unwrap_or(a);
                    let got = ensemble_vote(&one_hot(a), &one_hot(b), c);
                    assert_eq!(got, want, "gp={a} rf={b} hmm={c}");
                }
            }
        }
    }

    #[test]
    fn aggregate_takes_unique_mode() {
        let labels = [Nrem2, Nrem2, Nrem2, Awake, Rem];
        let probs = [[0.2; N_CLASSES]; SUB_EPOCHS_PER_EPOCH];
        let pred = aggregate_epoch(7, &labels, &probs).unwrap();
        assert_eq!(pred.label, Nrem2);
        assert_eq!(pred.epoch_index, 7);
        assert_eq!(pred.sub_epoch_labels, labels);
        for sum in pred.gp_probability_sums {
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_breaks_count_tie_by_gp_sum() {
        // Two labels with two votes each; the summed GP probability decides
        // (Awake 2.1 vs NREM1 2.6).
        let labels = [Awake, Awake, Nrem1, Nrem1, Nrem2];
        let probs = [[0.42, 0.52, 0.06, 0.0, 0.0]; SUB_EPOCHS_PER_EPOCH];
        let pred = aggregate_epoch(0, &labels, &probs).unwrap();
        assert_eq!(pred.label, Nrem1);
        assert!((pred.gp_probability_sums[0] - 2.1).abs() < 1e-12);
        assert!((pred.gp_probability_sums[1] - 2.6).abs() < 1e-12);
    }

    #[test]
    fn aggregate_breaks_full_tie_by_stage_order() {
        let labels = [Rem, Sws, Sws, Rem, Nrem1];
        // Equal sums everywhere: SWS and REM tie 2-2 with equal GP mass, so
        // the earlier stage in class order (SWS) wins; NREM1 has fewer votes.
        let probs = [[0.2; N_CLASSES]; SUB_EPOCHS_PER_EPOCH];
        let pred = aggregate_epoch(0, &labels, &probs).unwrap();
        assert_eq!(pred.label, Sws);
    }

    #[test]
    fn aggregate_label_is_always_a_sub_epoch_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let labels: Vec<StageLabel> = (0..SUB_EPOCHS_PER_EPOCH)
                .map(|_| CLASSES[rng.gen_range(0..N_CLASSES)])
                .collect();
            let probs: Vec<[f64; N_CLASSES]> = (0..SUB_EPOCHS_PER_EPOCH)
                .map(|_| std::array::from_fn(|_| rng.gen()))
                .collect();
            let pred = aggregate_epoch(0, &labels, &probs).unwrap();
            assert!(labels.contains(&pred.label));
        }
    }

    #[test]
    fn aggregate_rejects_wrong_counts() {
        let labels = vec![Awake; 4];
        let probs = vec![[0.2; N_CLASSES]; 4];
        assert!(matches!(
            aggregate_epoch(0, &labels, &probs),
            Err(Error::WrongCount {
                expected: 5,
                actual: 4
            })
        ));
    }

    fn tiny_bundle() -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 40;
        let dim = 6;
        let scaled = Array2::from_shape_fn((n, dim), |_| rng.gen::<f64>());
        let dbn_cfg = TrainConfig {
            epochs_per_layer: 2,
            fine_tune_epochs: 2,
            batch_size: 8,
            seed: 1,
            ..TrainConfig::default()
        };
        let pretrained = train_dbn(scaled.view(), &[UNSUP_FEATURE_COUNT], &dbn_cfg).unwrap();
        let (dbn, _) = fine_tune(&pretrained, scaled.view(), &dbn_cfg).unwrap();
        let labels: Vec<StageLabel> = (0..n).map(|i| CLASSES[i % N_CLASSES]).collect();
        let x = Array2::from_shape_fn((n, UNSUP_FEATURE_COUNT), |(i, j)| {
            (i % N_CLASSES) as f64 + 0.01 * rng.gen::<f64>() + 0.001 * j as f64
        });
        let stats = fit_standardization(x.view()).unwrap();
        let z = standardize_matrix(&stats, x.view()).unwrap();
        let gp = train_gp(z.view(), &labels, &GpConfig { seed: 2, ..GpConfig::default() }).unwrap();
        let rf = train_rf(
            z.view(),
            &labels,
            &RfConfig {
                n_trees: 5,
                seed: 3,
                ..RfConfig::default()
            },
        )
        .unwrap();
        let runs = vec![labels.clone()];
        let hmm = train_hmm(&runs, z.view(), &labels).unwrap();
        ModelBundle {
            schema_version: BUNDLE_SCHEMA_VERSION,
            seed: 42,
            feature_set: FeatureSet::UnsupOnly,
            architecture: vec![UNSUP_FEATURE_COUNT],
            channel: Some("C3A2".into()),
            dbn,
            gp,
            rf,
            hmm,
            stats,
            features: FeatureConfig::default(),
            preprocess: PreprocessConfig::default(),
        }
    }

    fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(dir).unwrap() {
            let entry = entry.unwrap();
            out.insert(
                entry.file_name().into_string().unwrap(),
                fs::read(entry.path()).unwrap(),
            );
        }
        out
    }

    #[test]
    fn bundle_roundtrips_byte_identically() {
        let bundle = tiny_bundle();
        let tmp = tempfile::tempdir().unwrap();
        let first = tmp.path().join("a");
        let second = tmp.path().join("b");
        save_bundle(&bundle, &first).unwrap();
        let loaded = load_bundle(&first).unwrap();
        save_bundle(&loaded, &second).unwrap();
        assert_eq!(dir_bytes(&first), dir_bytes(&second));
        assert_eq!(loaded.seed, 42);
        assert_eq!(loaded.feature_set, FeatureSet::UnsupOnly);
        assert_eq!(loaded.channel.as_deref(), Some("C3A2"));
    }

    #[test]
    fn bundle_detects_tampering_and_missing_files() {
        let bundle = tiny_bundle();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("bundle");
        save_bundle(&bundle, &dir).unwrap();

        let rf_path = dir.join("rf.json");
        let mut bytes = fs::read(&rf_path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] = bytes[mid].wrapping_add(1);
        fs::write(&rf_path, &bytes).unwrap();
        assert!(matches!(
            load_bundle(&dir),
            Err(Error::ChecksumMismatch(name)) if name == "rf.json"
        ));

        save_bundle(&bundle, &dir).unwrap();
        fs::remove_file(dir.join("hmm.json")).unwrap();
        assert!(matches!(
            load_bundle(&dir),
            Err(Error::MissingBundleFile(name)) if name == "hmm.json"
        ));
    }

    #[test]
    fn bundle_rejects_unknown_schema_version() {
        let mut bundle = tiny_bundle();
        bundle.schema_version = 99;
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("bundle");
        save_bundle(&bundle, &dir).unwrap();
        assert!(matches!(
            load_bundle(&dir),
            Err(Error::SchemaVersion {
                found: 99,
                expected: BUNDLE_SCHEMA_VERSION
            })
        ));
    }

    #[test]
    fn stage_runs_split_at_excluded_and_expand_subepochs() {
        let labels = [Awake, Nrem3, Excluded, Rem];
        let epochs: Vec<Epoch> = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| Epoch {
                patient_id: "p".into(),
                epoch_index: i,
                samples: vec![0.0; 10],
                label,
            })
            .collect();
        let runs = stage_runs(&epochs).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].len(), 10);
        assert_eq!(&runs[0][..5], &[Awake; 5]);
        assert_eq!(&runs[0][5..], &[Sws; 5]); // NREM3 merged
        assert_eq!(runs[1], vec![Rem; 5]);
    }

    #[test]
    fn config_validates_joint_architecture_at_train_time() {
        let cfg = PipelineConfig {
            architecture: vec![30, 20],
            ..PipelineConfig::default()
        };
        // validate() itself accepts a 20-unit top layer; the joint constraint
        // only binds once training commits to a feature set.
        cfg.validate().unwrap();
    }

    #[test]
    fn default_config_is_valid_and_serializes() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.architecture, cfg.architecture);
        assert_eq!(back.feature_set, cfg.feature_set);
    }

    #[test]
    fn render_predictions_includes_truth_when_known() {
        let pred = EpochPrediction {
            epoch_index: 3,
            label: Rem,
            sub_epoch_labels: [Rem, Rem, Nrem2, Rem, Rem],
            gp_probability_sums: [0.0, 0.1, 0.2, 0.3, 4.0],
        };
        let with_truth = RecordingClassification {
            patient_id: "p01".into(),
            predictions: vec![pred.clone()],
            truths: Some(vec![Nrem2]),
            gp_sub: vec![],
            rf_sub: vec![],
            hmm_sub: vec![],
        };
        let text = render_predictions(&with_truth);
        assert!(text.contains("p01\t3\tREM\tNREM2\tREM\tREM\tNREM2\tREM\tREM"));
        let without = RecordingClassification {
            truths: None,
            ..with_truth
        };
        assert!(render_predictions(&without).contains("p01\t3\tREM\t-\t"));
    }
}
