//! `assr` — train and run the sleep staging pipeline from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use assr_core::edf::{parse_edf, select_channel, Recording};
use assr_core::eval::{
    ensure_split, render_ablation, render_hypnogram_svg, render_report, run_ablation,
    run_experiment,
};
use assr_core::manifest::{relativize, scan_data_dir, DatasetManifest};
use assr_core::pipeline::{
    arch_search, classify_recording_detailed, load_bundle, render_predictions, save_bundle,
    train_all, PipelineConfig,
};
use assr_core::stage::{default_stage_mapping, parse_hypnogram, Hypnogram};
use assr_core::synth::{synth_generate, SynthConfig};

#[derive(Parser)]
#[command(name = "assr", version, about = "Automatic sleep stage recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a directory of EDF + hypnogram pairs into a dataset manifest.
    Ingest {
        /// Directory holding `<id>.edf`/`<id>.rec` with `<id>_stage.txt`.
        #[arg(long)]
        data_dir: PathBuf,
        /// Where to write the manifest JSON.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Generate a synthetic labeled dataset.
    Synth {
        /// Output directory for the EDFs, hypnograms, and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Number of patients (overrides the config).
        #[arg(long)]
        patients: Option<usize>,
        /// Epochs per patient (overrides the config).
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML config; its `[synth]` section seeds the generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pick a network architecture by held-out reconstruction error.
    ArchSearch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the full pipeline and write a model bundle directory.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bundle directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one recording with a trained bundle.
    Classify {
        /// Bundle directory written by `train`.
        #[arg(long)]
        bundle: PathBuf,
        /// EDF file to score.
        #[arg(long)]
        record: PathBuf,
        /// Optional true stages; enables transition/artifact removal and the
        /// truth column in the output.
        #[arg(long)]
        hypnogram: Option<PathBuf>,
        /// Where to write the per-epoch predictions (TSV).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the manifest's split and report pooled test accuracy.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the text report.
        #[arg(long)]
        report: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json_report: Option<PathBuf>,
        /// Compare tf-only / unsup-only / joint features across classifiers
        /// instead of the single-run report.
        #[arg(long)]
        ablation: bool,
        /// Score full test sequences (keep transition epochs).
        #[arg(long)]
        keep_transition_epochs: bool,
        /// Write one hypnogram plot per test recording into this directory.
        #[arg(long)]
        svg_dir: Option<PathBuf>,
    },
}

/// The whole configuration file: pipeline settings at the top level plus a
/// `[synth]` section for the generator. Every field has a default, so an
/// empty (or absent) file is valid.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    #[serde(flatten)]
    pipeline: PipelineConfig,
    synth: SynthConfig,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let cfg: FileConfig = toml::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            Ok(cfg)
        }
    }
}

// Core errors already carry the offending path, so no extra context here.
fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    Ok(DatasetManifest::load(path)?)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_recording(path: &Path, channel: Option<&str>) -> Result<Recording> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (_, recordings) = parse_edf(&bytes)?;
    let recording = match channel {
        Some(label) => select_channel(&recordings, label)?.clone(),
        None => recordings
            .into_iter()
            .next()
            .context("EDF contains no signals")?,
    };
    Ok(recording)
}

fn read_hypnogram(path: &Path) -> Result<Hypnogram> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_hypnogram(&text, &default_stage_mapping())?)
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest { data_dir, manifest } => {
            let mut scanned = scan_data_dir(&data_dir)?;
            let base = manifest.parent().filter(|p| !p.as_os_str().is_empty());
            if let Some(base) = base {
                fs::create_dir_all(base).with_context(|| format!("creating {}", base.display()))?;
                relativize(&mut scanned, base);
            }
            scanned.save(&manifest)?;
            println!(
                "ingested {} patients -> {}",
                scanned.entries.len(),
                manifest.display()
            );
        }
        Command::Synth {
            out,
            patients,
            epochs,
            seed,
            config,
        } => {
            let mut cfg = load_config(config.as_deref())?.synth;
            if let Some(patients) = patients {
                cfg.patients = patients;
            }
            if let Some(epochs) = epochs {
                cfg.epochs_per_patient = epochs;
            }
            cfg.seed = seed;
            let manifest = synth_generate(&cfg, &out)?;
            println!(
                "generated {} patients x {} epochs -> {}",
                manifest.entries.len(),
                cfg.epochs_per_patient,
                out.display()
            );
        }
        Command::ArchSearch {
            manifest,
            config,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?.pipeline;
            let loaded = load_manifest(&manifest)?;
            let (with_split, _) = ensure_split(&loaded, seed)?;
            let (winner, table) = arch_search(&with_split, &cfg, seed)?;
            println!("{:<28} {}", "architecture", "held-out error");
            for (arch, err) in &table {
                println!("{:<28} {err:.6}", format!("{arch:?}"));
            }
            println!("selected: {winner:?}");
        }
        Command::Train {
            manifest,
            config,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?.pipeline;
            let loaded = load_manifest(&manifest)?;
            let (with_split, split) = ensure_split(&loaded, seed)?;
            let bundle = train_all(&with_split, &cfg, seed)?;
            save_bundle(&bundle, &out)?;
            println!(
                "trained on {} patients (arch {:?}, features {}) -> {}",
                split.train.len(),
                bundle.architecture,
                bundle.feature_set,
                out.display()
            );
        }
        Command::Classify {
            bundle,
            record,
            hypnogram,
            out,
        } => {
            let bundle = load_bundle(&bundle)?;
            let recording = read_recording(&record, bundle.channel.as_deref())?;
            let hyp = hypnogram.as_deref().map(read_hypnogram).transpose()?;
            let result = classify_recording_detailed(&bundle, &recording, hyp.as_ref())?;
            write_file(&out, &render_predictions(&result))?;
            match &result.truths {
                Some(truths) => {
                    let hits = result
                        .predictions
                        .iter()
                        .zip(truths)
                        .filter(|(p, &t)| p.label == t)
                        .count();
                    println!(
                        "scored {} epochs, accuracy {:.2} -> {}",
                        truths.len(),
                        100.0 * hits as f64 / truths.len().max(1) as f64,
                        out.display()
                    );
                }
                None => println!(
                    "scored {} epochs -> {}",
                    result.predictions.len(),
                    out.display()
                ),
            }
        }
        Command::Evaluate {
            manifest,
            config,
            seed,
            report,
            json_report,
            ablation,
            keep_transition_epochs,
            svg_dir,
        } => {
            let mut cfg = load_config(config.as_deref())?.pipeline;
            if keep_transition_epochs {
                cfg.preprocess.remove_transitions_on_test = false;
            }
            let loaded = load_manifest(&manifest)?;
            if ablation {
                let ablation_report = run_ablation(&loaded, &cfg, seed)?;
                write_file(&report, &render_ablation(&ablation_report))?;
                if let Some(json_path) = &json_report {
                    let json = serde_json::to_string_pretty(&ablation_report)?;
                    write_file(json_path, &(json + "\n"))?;
                }
                print!("{}", render_ablation(&ablation_report));
            } else {
                let run = run_experiment(&loaded, &cfg, seed)?;
                write_file(&report, &render_report(&run.report))?;
                if let Some(json_path) = &json_report {
                    let json = serde_json::to_string_pretty(&run.report)?;
                    write_file(json_path, &(json + "\n"))?;
                }
                if let Some(svg_dir) = &svg_dir {
                    fs::create_dir_all(svg_dir)
                        .with_context(|| format!("creating {}", svg_dir.display()))?;
                    for result in &run.results {
                        let svg = render_hypnogram_svg(
                            &result.predictions,
                            result.truths.as_deref(),
                        );
                        write_file(&svg_dir.join(format!("{}.svg", result.patient_id)), &svg)?;
                    }
                }
                println!(
                    "total accuracy {:.2} over {} test epochs -> {}",
                    run.report.total_accuracy,
                    run.report.confusion.total(),
                    report.display()
                );
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use assr_core::pipeline::FeatureSet;

    #[test]
    fn empty_config_gives_defaults() {
        let cfg: FileConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.pipeline.architecture, vec![150, 75, 35, 25, 20, 15]);
        assert_eq!(cfg.pipeline.feature_set, FeatureSet::Joint);
        assert_eq!(cfg.synth.patients, 13);
        cfg.pipeline.validate().unwrap();
        cfg.synth.validate().unwrap();
    }

    #[test]
    fn partial_config_overrides_only_named_fields() {
        let text = r#"
            channel = "C3A2"
            feature_set = "tf-only"
            architecture = [40, 20]

            [dbn]
            epochs_per_layer = 4

            [gp]
            max_points = 150

            [synth]
            patients = 5
            epochs_per_patient = 80
        "#;
        let cfg: FileConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.pipeline.channel.as_deref(), Some("C3A2"));
        assert_eq!(cfg.pipeline.feature_set, FeatureSet::TfOnly);
        assert_eq!(cfg.pipeline.architecture, vec![40, 20]);
        assert_eq!(cfg.pipeline.dbn.epochs_per_layer, 4);
        // Untouched siblings keep their defaults.
        assert_eq!(cfg.pipeline.dbn.fine_tune_epochs, 30);
        assert_eq!(cfg.pipeline.gp.max_points, 150);
        assert_eq!(cfg.pipeline.rf.n_trees, 100);
        assert_eq!(cfg.synth.patients, 5);
        assert_eq!(cfg.synth.epochs_per_patient, 80);
        assert_eq!(cfg.synth.fs, 128.0);
    }

    #[test]
    fn cli_parses_the_documented_subcommands() {
        Cli::try_parse_from([
            "assr", "synth", "--out", "d", "--patients", "13", "--seed", "7",
        ])
        .unwrap();
        Cli::try_parse_from([
            "assr",
            "evaluate",
            "--manifest",
            "m.json",
            "--seed",
            "1",
            "--report",
            "r.txt",
            "--ablation",
            "--keep-transition-epochs",
        ])
        .unwrap();
        Cli::try_parse_from([
            "assr",
            "classify",
            "--bundle",
            "b",
            "--record",
            "r.edf",
            "--out",
            "p.tsv",
        ])
        .unwrap();
        assert!(Cli::try_parse_from(["assr", "frobnicate"]).is_err());
    }
}
