//! The common prediction type shared by the three classifiers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stage::{StageLabel, CLASSES, N_CLASSES};

/// A classified sub-epoch: a label plus the full posterior over the five
/// stages. The label is always the argmax of the probabilities, with ties
/// resolved by the fixed stage order Awake < NREM1 < NREM2 < SWS < REM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: StageLabel,
    pub probabilities: [f64; N_CLASSES],
}

/// Index of the largest score, first-wins on exact ties so the fixed stage
/// order decides.
pub fn argmax_class(scores: &[f64; N_CLASSES]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

impl Prediction {
    /// Normalizes nonnegative class scores into a prediction.
    pub fn from_scores(scores: [f64; N_CLASSES]) -> Result<Prediction> {
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "class scores must be finite and nonnegative, got {scores:?}"
            )));
        }
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidConfig(
                "class scores sum to zero".to_string(),
            ));
        }
        let mut probabilities = scores;
        for p in &mut probabilities {
            *p /= total;
        }
        Ok(Prediction {
            label: CLASSES[argmax_class(&probabilities)],
            probabilities,
        })
    }
}
