//! Automatic sleep stage recognition from single-channel EEG.
//!
//! The crate covers the whole scoring pipeline: EDF ingestion and hypnogram
//! parsing, signal conditioning (notch, band-pass, resampling), segmentation
//! into 30 s epochs and 6 s sub-epochs, frequency/temporal feature extraction,
//! unsupervised feature learning with a stack of RBMs fine-tuned as an
//! autoencoder, three classifiers (Gaussian process, random forest, HMM) fused
//! by majority vote, and evaluation utilities producing confusion-matrix
//! reports.
//!
//! Everything downstream of a seed is deterministic: the same dataset, config
//! and seed produce byte-identical model bundles and reports. The `parallel`
//! feature (on by default) runs the data-parallel inner loops on rayon; the
//! sequential fallback produces bit-identical output.

pub mod classify;
pub mod dbn;
pub mod dsp;
pub mod edf;
pub mod error;
pub mod eval;
pub mod gp;
pub mod hmm;
pub mod linalg;
pub mod manifest;
pub mod par;
pub mod pipeline;
pub mod preprocess;
pub mod rf;
pub mod stage;
pub mod synth;
pub mod tf;
pub mod util;

pub use error::{Error, Result};
