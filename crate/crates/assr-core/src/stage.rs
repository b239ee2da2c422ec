//! Sleep stage labels and hypnogram parsing.
//!
//! Hypnograms arrive as plain text with one decimal stage code per line and
//! one line per 30 s epoch. Codes map onto R&K-style labels which are later
//! merged into the five-class space used throughout the pipeline
//! (NREM3 and NREM4 collapse into SWS, Excluded epochs are dropped).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds of signal covered by one hypnogram line.
pub const EPOCH_SECONDS: f64 = 30.0;
/// Seconds of signal covered by one classification sub-epoch.
pub const SUB_EPOCH_SECONDS: f64 = 6.0;
/// Sub-epochs per epoch.
pub const SUB_EPOCHS_PER_EPOCH: usize = 5;
/// Number of classes after merging.
pub const N_CLASSES: usize = 5;

/// A sleep stage. `Nrem3`/`Nrem4`/`Excluded` only occur before merging;
/// everything downstream of [`StageLabel::merge`] uses the five-class space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageLabel {
    Awake,
    Nrem1,
    Nrem2,
    Nrem3,
    Nrem4,
    Sws,
    Rem,
    Excluded,
}

/// The merged classes in their fixed order. This order defines class indices
/// in confusion matrices and probability vectors, and breaks every tie in the
/// pipeline (votes, argmaxes, Viterbi).
pub const CLASSES: [StageLabel; N_CLASSES] = [
    StageLabel::Awake,
    StageLabel::Nrem1,
    StageLabel::Nrem2,
    StageLabel::Sws,
    StageLabel::Rem,
];

impl StageLabel {
    /// Collapses NREM3/NREM4 into SWS. Excluded epochs cannot be merged; they
    /// must be removed before this point.
    pub fn merge(self) -> Result<StageLabel> {
        match self {
            StageLabel::Nrem3 | StageLabel::Nrem4 => Ok(StageLabel::Sws),
            StageLabel::Excluded => Err(Error::ExcludedLabel(self)),
            other => Ok(other),
        }
    }

    /// Index into the fixed five-class order, `None` for pre-merge labels.
    pub fn class_index(self) -> Option<usize> {
        CLASSES.iter().position(|&c| c == self)
    }

    /// Class index, erroring on labels outside the merged space.
    pub fn class_index_checked(self) -> Result<usize> {
        self.class_index().ok_or(Error::UnmergedLabel(self))
    }
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            StageLabel::Awake => "Awake",
            StageLabel::Nrem1 => "NREM1",
            StageLabel::Nrem2 => "NREM2",
            StageLabel::Nrem3 => "NREM3",
            StageLabel::Nrem4 => "NREM4",
            StageLabel::Sws => "SWS",
            StageLabel::Rem => "REM",
            StageLabel::Excluded => "Excluded",
        };
        f.write_str(name)
    }
}

/// Mapping from hypnogram codes to labels.
pub type StageMapping = BTreeMap<i64, StageLabel>;

/// The conventional encoding: 0 Awake, 1 REM, 2–5 NREM1–4, 6/7/8 excluded
/// (artifact, indeterminate, movement).
pub fn default_stage_mapping() -> StageMapping {
    let mut m = BTreeMap::new();
    m.insert(0, StageLabel::Awake);
    m.insert(1, StageLabel::Rem);
    m.insert(2, StageLabel::Nrem1);
    m.insert(3, StageLabel::Nrem2);
    m.insert(4, StageLabel::Nrem3);
    m.insert(5, StageLabel::Nrem4);
    m.insert(6, StageLabel::Excluded);
    m.insert(7, StageLabel::Excluded);
    m.insert(8, StageLabel::Excluded);
    m
}

/// Per-epoch stage labels for one recording, in temporal order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hypnogram {
    pub labels: Vec<StageLabel>,
}

impl Hypnogram {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Parses hypnogram text: one code per non-empty line, leading/trailing
/// whitespace (including CR from CRLF files) ignored.
pub fn parse_hypnogram(text: &str, mapping: &StageMapping) -> Result<Hypnogram> {
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let token = raw.trim();
        if token.is_empty() {
            continue;
        }
        let code: i64 = token.parse().map_err(|_| Error::UnknownCode {
            code: token.to_string(),
            line: idx + 1,
        })?;
        let label = mapping.get(&code).copied().ok_or(Error::UnknownCode {
            code: token.to_string(),
            line: idx + 1,
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyHypnogram);
    }
    Ok(Hypnogram { labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_collapses_deep_sleep() {
        assert_eq!(StageLabel::Nrem3.merge().unwrap(), StageLabel::Sws);
        assert_eq!(StageLabel::Nrem4.merge().unwrap(), StageLabel::Sws);
        assert_eq!(StageLabel::Rem.merge().unwrap(), StageLabel::Rem);
        assert_eq!(StageLabel::Awake.merge().unwrap(), StageLabel::Awake);
        assert!(StageLabel::Excluded.merge().is_err());
    }

    #[test]
    fn class_order_is_fixed() {
        assert_eq!(StageLabel::Awake.class_index(), Some(0));
        assert_eq!(StageLabel::Nrem1.class_index(), Some(1));
        assert_eq!(StageLabel::Nrem2.class_index(), Some(2));
        assert_eq!(StageLabel::Sws.class_index(), Some(3));
        assert_eq!(StageLabel::Rem.class_index(), Some(4));
        assert_eq!(StageLabel::Nrem3.class_index(), None);
        assert_eq!(StageLabel::Excluded.class_index(), None);
    }

    #[test]
    fn parses_conventional_codes() {
        let hyp = parse_hypnogram("0\n1\n2\n3\n4\n5\n6\n7\n8\n", &default_stage_mapping()).unwrap();
        assert_eq!(
            hyp.labels,
            vec![
                StageLabel::Awake,
                StageLabel::Rem,
                StageLabel::Nrem1,
                StageLabel::Nrem2,
                StageLabel::Nrem3,
                StageLabel::Nrem4,
                StageLabel::Excluded,
                StageLabel::Excluded,
                StageLabel::Excluded,
            ]
        );
    }

    #[test]
    fn skips_blank_lines_and_crlf() {
        let hyp = parse_hypnogram("0\r\n\r\n 1 \n\n", &default_stage_mapping()).unwrap();
        assert_eq!(hyp.labels, vec![StageLabel::Awake, StageLabel::Rem]);
        assert_eq!(hyp.len(), 2);
    }

    #[test]
    fn unknown_code_reports_line() {
        let err = parse_hypnogram("0\n9\n", &default_stage_mapping()).unwrap_err();
        match err {
            Error::UnknownCode { code, line } => {
                assert_eq!(code, "9");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(matches!(
            parse_hypnogram("x\n", &default_stage_mapping()).unwrap_err(),
            Error::UnknownCode { .. }
        ));
        assert!(matches!(
            parse_hypnogram("\n \n", &default_stage_mapping()).unwrap_err(),
            Error::EmptyHypnogram
        ));
    }
}
