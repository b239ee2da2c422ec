//! Confusion matrices, report rendering, and the experiment protocol
//! (train/test split, pooled scoring, feature-set ablation).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classify::Prediction;
use crate::error::{Error, Result};
use crate::manifest::{split_patients, DatasetManifest, SplitSpec};
use crate::pipeline::{
    aggregate_epoch, classify_recording_detailed, load_entry, train_all, EpochPrediction,
    FeatureSet, ModelBundle, PipelineConfig, RecordingClassification,
};
use crate::stage::{StageLabel, CLASSES, N_CLASSES, SUB_EPOCHS_PER_EPOCH};
use crate::util::derive_seed;

/// Epoch-level confusion counts; rows are the true stage, columns the
/// predicted one, both in stage order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Each row as percentages of that row's total; an unseen stage yields an
    /// all-zero row.
    pub fn row_percent(&self) -> [[f64; N_CLASSES]; N_CLASSES] {
        let mut out = [[0.0; N_CLASSES]; N_CLASSES];
        for (r, row) in self.counts.iter().enumerate() {
            let total: u64 = row.iter().sum();
            if total == 0 {
                continue;
            }
            for (c, &n) in row.iter().enumerate() {
                out[r][c] = 100.0 * n as f64 / total as f64;
            }
        }
        out
    }

    /// Diagonal of [`ConfusionMatrix::row_percent`]: per-stage recall.
    pub fn per_class_accuracy(&self) -> [f64; N_CLASSES] {
        let percent = self.row_percent();
        std::array::from_fn(|c| percent[c][c])
    }

    /// Percentage of all epochs on the diagonal.
    pub fn total_accuracy(&self) -> f64 {
        let trace: u64 = (0..N_CLASSES).map(|i| self.counts[i][i]).sum();
        100.0 * trace as f64 / self.total() as f64
    }
}

/// Tallies predicted against true labels (both already merged).
pub fn confusion_matrix(pred: &[StageLabel], truth: &[StageLabel]) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("confusion_matrix"));
    }
    let mut counts = [[0u64; N_CLASSES]; N_CLASSES];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[t.class_index_checked()?][p.class_index_checked()?] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Renders the row-percent table: stages down the side (true) and across the
/// top (predicted), two decimals everywhere.
pub fn render_confusion(cm: &ConfusionMatrix) -> String {
    let percent = cm.row_percent();
    let mut out = String::from("        ");
    for class in CLASSES {
        let _ = write!(out, "{:>8}", class.to_string());
    }
    out.push('\n');
    for (r, class) in CLASSES.iter().enumerate() {
        let _ = write!(out, "{:<8}", class.to_string());
        for c in 0..N_CLASSES {
            let _ = write!(out, "{:>8.2}", percent[r][c]);
        }
        out.push('\n');
    }
    let _ = write!(out, "Total accuracy: {:.2}\n", cm.total_accuracy());
    out
}

/// One test patient's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientResult {
    pub patient_id: String,
    pub epochs: usize,
    pub accuracy: f64,
}

/// Everything `run_experiment` measures, pooled over the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub feature_set: FeatureSet,
    pub split: SplitSpec,
    pub per_patient: Vec<PatientResult>,
    pub confusion: ConfusionMatrix,
    pub per_class_accuracy: [f64; N_CLASSES],
    pub total_accuracy: f64,
}

/// Scores every test patient with an already-trained bundle and pools the
/// epoch-level confusion.
fn score_split(
    manifest: &DatasetManifest,
    bundle: &ModelBundle,
    test: &[String],
) -> Result<(Vec<RecordingClassification>, Vec<PatientResult>, ConfusionMatrix)> {
    let mut results = Vec::with_capacity(test.len());
    let mut per_patient = Vec::with_capacity(test.len());
    let mut pred_pool = Vec::new();
    let mut truth_pool = Vec::new();
    for id in test {
        let entry = manifest
            .entry(id)
            .ok_or_else(|| Error::InvalidConfig(format!("split names unknown patient {id:?}")))?;
        let loaded = load_entry(entry, bundle.channel.as_deref())?;
        let result =
            classify_recording_detailed(bundle, &loaded.recording, Some(&loaded.hypnogram))?;
        let truths = result.truths.as_ref().expect("hypnogram was supplied");
        let hits = result
            .predictions
            .iter()
            .zip(truths)
            .filter(|(p, &t)| p.label == t)
            .count();
        per_patient.push(PatientResult {
            patient_id: id.clone(),
            epochs: result.predictions.len(),
            accuracy: if result.predictions.is_empty() {
                0.0
            } else {
                100.0 * hits as f64 / result.predictions.len() as f64
            },
        });
        pred_pool.extend(result.predictions.iter().map(|p| p.label));
        truth_pool.extend(truths.iter().copied());
        results.push(result);
    }
    let confusion = confusion_matrix(&pred_pool, &truth_pool)?;
    Ok((results, per_patient, confusion))
}

/// The manifest's own split, or — the reference protocol — a seeded split of
/// 10 training and 3 test patients. Returns a manifest carrying the split.
pub fn ensure_split(
    manifest: &DatasetManifest,
    seed: u64,
) -> Result<(DatasetManifest, SplitSpec)> {
    let split = match &manifest.split {
        Some(s) => s.clone(),
        None => split_patients(manifest, 10, 3, derive_seed(seed, "split"))?,
    };
    let mut with_split = manifest.clone();
    with_split.split = Some(split.clone());
    Ok((with_split, split))
}

/// A finished experiment: the report plus the artifacts it was computed from.
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub bundle: ModelBundle,
    pub results: Vec<RecordingClassification>,
}

/// Trains on the manifest's split (or a seeded 10/3 one) and reports pooled
/// test accuracy. Fully determined by (manifest, cfg, seed).
pub fn run_experiment(
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<ExperimentRun> {
    let (with_split, split) = ensure_split(manifest, seed)?;
    let bundle = train_all(&with_split, cfg, seed)?;
    let (results, per_patient, confusion) = score_split(&with_split, &bundle, &split.test)?;
    let report = ExperimentReport {
        seed,
        feature_set: cfg.feature_set,
        split,
        per_patient,
        per_class_accuracy: confusion.per_class_accuracy(),
        total_accuracy: confusion.total_accuracy(),
        confusion,
    };
    Ok(ExperimentRun {
        report,
        bundle,
        results,
    })
}

/// Text form of the report; stable for a given report, no timestamps.
pub fn render_report(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Sleep staging evaluation");
    let _ = writeln!(out, "seed:         {}", report.seed);
    let _ = writeln!(out, "features:     {}", report.feature_set);
    let _ = writeln!(out, "train split:  {}", report.split.train.join(" "));
    let _ = writeln!(out, "test split:   {}", report.split.test.join(" "));
    let _ = writeln!(out);
    let _ = writeln!(out, "per-patient accuracy (scored epochs)");
    for p in &report.per_patient {
        let _ = writeln!(
            out,
            "  {:<12} {:>6.2}  ({} epochs)",
            p.patient_id, p.accuracy, p.epochs
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "confusion (row %, true stage by predicted stage)");
    out.push_str(&render_confusion(&report.confusion));
    out
}

/// The classifiers an ablation scores separately.
pub const ABLATION_METHODS: [&str; 4] = ["gp", "rf", "hmm", "ensemble"];

/// Epoch accuracy for one (feature set, method) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub feature_set: FeatureSet,
    pub method: String,
    pub total_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub split: SplitSpec,
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn accuracy(&self, feature_set: FeatureSet, method: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.feature_set == feature_set && c.method == method)
            .map(|c| c.total_accuracy)
    }
}

/// Re-aggregates one recording's epochs from a single classifier's sub-epoch
/// labels, using that classifier's own probabilities (zeros for the HMM, so
/// its ties fall through to stage order).
fn single_method_labels(
    result: &RecordingClassification,
    method: &str,
) -> Result<Vec<StageLabel>> {
    let n_epochs = result.predictions.len();
    let mut labels = Vec::with_capacity(n_epochs);
    for e in 0..n_epochs {
        let range = e * SUB_EPOCHS_PER_EPOCH..(e + 1) * SUB_EPOCHS_PER_EPOCH;
        let (sub_labels, probs): (Vec<StageLabel>, Vec<[f64; N_CLASSES]>) = match method {
            "gp" => pick(&result.gp_sub[range.clone()]),
            "rf" => pick(&result.rf_sub[range.clone()]),
            "hmm" => (
                result.hmm_sub[range.clone()].to_vec(),
                vec![[0.0; N_CLASSES]; SUB_EPOCHS_PER_EPOCH],
            ),
            "ensemble" => {
                labels.push(result.predictions[e].label);
                continue;
            }
            other => {
                return Err(Error::InvalidConfig(format!("unknown method {other:?}")));
            }
        };
        labels.push(aggregate_epoch(e, &sub_labels, &probs)?.label);
    }
    Ok(labels)
}

fn pick(preds: &[Prediction]) -> (Vec<StageLabel>, Vec<[f64; N_CLASSES]>) {
    (
        preds.iter().map(|p| p.label).collect(),
        preds.iter().map(|p| p.probabilities).collect(),
    )
}

/// Trains once per feature set and scores each classifier (and the ensemble)
/// on the test split, so the joint representation can be compared against
/// its two halves.
pub fn run_ablation(
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<AblationReport> {
    let (with_split, split) = ensure_split(manifest, seed)?;
    let mut cells = Vec::new();
    for feature_set in [FeatureSet::TfOnly, FeatureSet::UnsupOnly, FeatureSet::Joint] {
        let mut set_cfg = cfg.clone();
        set_cfg.feature_set = feature_set;
        let bundle = train_all(&with_split, &set_cfg, seed)?;
        let (results, _, _) = score_split(&with_split, &bundle, &split.test)?;
        for method in ABLATION_METHODS {
            let mut pred_pool = Vec::new();
            let mut truth_pool = Vec::new();
            for result in &results {
                pred_pool.extend(single_method_labels(result, method)?);
                truth_pool.extend(result.truths.as_ref().expect("labeled").iter().copied());
            }
            let cm = confusion_matrix(&pred_pool, &truth_pool)?;
            cells.push(AblationCell {
                feature_set,
                method: method.to_string(),
                total_accuracy: cm.total_accuracy(),
            });
        }
    }
    Ok(AblationReport { seed, split, cells })
}

/// Methods down the side, feature sets across the top.
pub fn render_ablation(report: &AblationReport) -> String {
    let sets = [FeatureSet::TfOnly, FeatureSet::UnsupOnly, FeatureSet::Joint];
    let mut out = String::from("Feature-set ablation (total accuracy, %)\n");
    let _ = write!(out, "{:<10}", "method");
    for set in sets {
        let _ = write!(out, "{:>12}", set.to_string());
    }
    out.push('\n');
    for method in ABLATION_METHODS {
        let _ = write!(out, "{method:<10}");
        for set in sets {
            match report.accuracy(set, method) {
                Some(acc) => {
                    let _ = write!(out, "{acc:>12.2}");
                }
                None => {
                    let _ = write!(out, "{:>12}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// A minimal step-plot of predicted (and, when known, true) stages over the
/// night. Stages run top (Awake) to bottom (REM) as in a conventional
/// hypnogram.
pub fn render_hypnogram_svg(
    predictions: &[EpochPrediction],
    truths: Option<&[StageLabel]>,
) -> String {
    const STEP: f64 = 4.0;
    const ROW: f64 = 28.0;
    const TOP: f64 = 20.0;
    const LEFT: f64 = 70.0;
    let width = LEFT + 20.0 + predictions.len() as f64 * STEP;
    let height = TOP + ROW * (N_CLASSES as f64 + 1.0);
    let mut out = String::new();
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\">\n"
    );
    for (i, class) in CLASSES.iter().enumerate() {
        let y = TOP + i as f64 * ROW;
        let _ = write!(
            out,
            "  <text x=\"4\" y=\"{:.0}\" font-family=\"monospace\" font-size=\"12\">{class}</text>\n",
            y + 4.0
        );
        let _ = write!(
            out,
            "  <line x1=\"{LEFT:.0}\" y1=\"{y:.0}\" x2=\"{:.0}\" y2=\"{y:.0}\" stroke=\"#ddd\"/>\n",
            width - 10.0
        );
    }
    let polyline = |labels: &mut dyn Iterator<Item = StageLabel>, color: &str, out: &mut String| {
        let mut points = String::new();
        for (i, label) in labels.enumerate() {
            let y = TOP + label.class_index().unwrap_or(0) as f64 * ROW;
            let x0 = LEFT + i as f64 * STEP;
            let _ = write!(points, "{x0:.1},{y:.1} {:.1},{y:.1} ", x0 + STEP);
        }
        let _ = write!(
            out,
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.trim_end()
        );
    };
    if let Some(truths) = truths {
        polyline(&mut truths.iter().copied(), "#bbbbbb", &mut out);
    }
    polyline(
        &mut predictions.iter().map(|p| p.label),
        "#1f77b4",
        &mut out,
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use StageLabel::*;

    #[test]
    fn confusion_matches_hand_count() {
        let truth = [Awake, Awake, Nrem1, Nrem1];
        let pred = [Awake, Nrem1, Nrem1, Nrem1];
        let cm = confusion_matrix(&pred, &truth).unwrap();
        assert_eq!(cm.counts[0][0], 1);
        assert_eq!(cm.counts[0][1], 1);
        assert_eq!(cm.counts[1][1], 2);
        assert_eq!(cm.total(), 4);
        assert!((cm.total_accuracy() - 75.0).abs() < 1e-12);
        let percent = cm.row_percent();
        assert!((percent[0][0] - 50.0).abs() < 1e-12);
        assert!((percent[1][1] - 100.0).abs() < 1e-12);
        assert_eq!(percent[4], [0.0; N_CLASSES]);
    }

    #[test]
    fn confusion_agrees_with_independent_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred: Vec<StageLabel> = (0..1000).map(|_| CLASSES[rng.gen_range(0..5)]).collect();
        let truth: Vec<StageLabel> = (0..1000).map(|_| CLASSES[rng.gen_range(0..5)]).collect();
        let cm = confusion_matrix(&pred, &truth).unwrap();
        // Recount cell-by-cell straight from the label pairs.
        for (t, t_class) in CLASSES.iter().enumerate() {
            for (p, p_class) in CLASSES.iter().enumerate() {
                let direct = pred
                    .iter()
                    .zip(&truth)
                    .filter(|&(pl, tl)| pl == p_class && tl == t_class)
                    .count() as u64;
                assert_eq!(cm.counts[t][p], direct);
            }
        }
        let direct_acc = 100.0
            * pred.iter().zip(&truth).filter(|&(p, t)| p == t).count() as f64
            / 1000.0;
        assert!((cm.total_accuracy() - direct_acc).abs() < 1e-12);
        for row in cm.row_percent() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 100.0).abs() < 1e-9 || sum == 0.0);
        }
    }

    #[test]
    fn confusion_rejects_degenerate_inputs() {
        assert!(matches!(
            confusion_matrix(&[Awake], &[]),
            Err(Error::LengthMismatch { left: 1, right: 0 })
        ));
        assert!(matches!(
            confusion_matrix(&[], &[]),
            Err(Error::EmptyInput(_))
        ));
        assert!(confusion_matrix(&[Nrem3], &[Awake]).is_err());
    }

    #[test]
    fn render_confusion_layout_is_stable() {
        let mut counts = [[0u64; N_CLASSES]; N_CLASSES];
        counts[0][0] = 17;
        counts[0][1] = 1;
        counts[0][4] = 1;
        for c in 1..N_CLASSES {
            counts[c][c] = 10;
        }
        let cm = ConfusionMatrix { counts };
        let text = render_confusion(&cm);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "           Awake   NREM1   NREM2     SWS     REM"
        );
        assert_eq!(lines[1], "Awake      89.47    5.26    0.00    0.00    5.26");
        assert_eq!(lines[2], "NREM1       0.00  100.00    0.00    0.00    0.00");
        assert!(lines[6].starts_with("Total accuracy: "));
        // Rendering is pure formatting: repeated calls are identical.
        assert_eq!(text, render_confusion(&cm));
    }

    #[test]
    fn single_method_aggregation_uses_own_probabilities() {
        fn pred(label: StageLabel, p: f64) -> Prediction {
            let mut probabilities = [(1.0 - p) / 4.0; N_CLASSES];
            probabilities[label.class_index().unwrap()] = p;
            Prediction {
                label,
                probabilities,
            }
        }
        // GP sub-labels tie 2-2 between Awake and NREM1 with NREM1 carrying
        // more GP mass; the RF stream is unanimous for NREM2.
        let result = RecordingClassification {
            patient_id: "p".into(),
            predictions: vec![EpochPrediction {
                epoch_index: 0,
                label: Sws,
                sub_epoch_labels: [Sws; SUB_EPOCHS_PER_EPOCH],
                gp_probability_sums: [0.0; N_CLASSES],
            }],
            truths: Some(vec![Sws]),
            gp_sub: vec![
                pred(Awake, 0.5),
                pred(Awake, 0.5),
                pred(Nrem1, 0.9),
                pred(Nrem1, 0.9),
                pred(Rem, 0.6),
            ],
            rf_sub: vec![pred(Nrem2, 0.8); SUB_EPOCHS_PER_EPOCH],
            hmm_sub: vec![Rem, Rem, Awake, Awake, Awake],
        };
        let gp = single_method_labels(&result, "gp").unwrap();
        assert_eq!(gp, vec![Nrem1]);
        let rf = single_method_labels(&result, "rf").unwrap();
        assert_eq!(rf, vec![Nrem2]);
        // The HMM has no probabilities; its 2-3 split resolves by count and
        // its ties (none here) by stage order.
        let hmm = single_method_labels(&result, "hmm").unwrap();
        assert_eq!(hmm, vec![Awake]);
        let ens = single_method_labels(&result, "ensemble").unwrap();
        assert_eq!(ens, vec![Sws]);
        assert!(single_method_labels(&result, "svm").is_err());
    }

    #[test]
    fn ablation_report_lookup_and_rendering() {
        let report = AblationReport {
            seed: 1,
            split: SplitSpec {
                train: vec!["a".into()],
                test: vec!["b".into()],
                seed: 0,
            },
            cells: vec![
                AblationCell {
                    feature_set: FeatureSet::Joint,
                    method: "ensemble".into(),
                    total_accuracy: 91.25,
                },
                AblationCell {
                    feature_set: FeatureSet::TfOnly,
                    method: "ensemble".into(),
                    total_accuracy: 88.5,
                },
            ],
        };
        assert_eq!(report.accuracy(FeatureSet::Joint, "ensemble"), Some(91.25));
        assert_eq!(report.accuracy(FeatureSet::UnsupOnly, "gp"), None);
        let text = render_ablation(&report);
        assert!(text.contains("tf-only"));
        assert!(text.contains("91.25"));
        assert!(text.contains("           -")); // missing cells render as '-'
    }

    #[test]
    fn hypnogram_svg_has_one_segment_pair_per_epoch() {
        let predictions: Vec<EpochPrediction> = [Awake, Nrem1, Nrem2, Sws, Rem, Sws]
            .iter()
            .enumerate()
            .map(|(i, &label)| EpochPrediction {
                epoch_index: i,
                label,
                sub_epoch_labels: [label; SUB_EPOCHS_PER_EPOCH],
                gp_probability_sums: [0.0; N_CLASSES],
            })
            .collect();
        let truths = vec![Awake; 6];
        let svg = render_hypnogram_svg(&predictions, Some(&truths));
        assert!(svg.starts_with("<svg "));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        // 2 points per epoch per polyline.
        let first_points = svg
            .split("points=\"")
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap();
        assert_eq!(first_points.split_whitespace().count(), 12);
        assert_eq!(svg, render_hypnogram_svg(&predictions, Some(&truths)));
    }
}
