//! Supervised Gaussian-emission HMM over sub-epoch sequences.
//!
//! States are the five sleep stages, so no latent estimation is needed: the
//! initial distribution and transition matrix are counted from contiguous
//! label runs (with add-one smoothing on the bigrams), and each state's
//! diagonal-Gaussian emission is fitted on the labelled feature rows.
//! Decoding is exact max-a-posteriori Viterbi in log space.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stage::{StageLabel, CLASSES, N_CLASSES};

pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub initial: [f64; N_CLASSES],
    pub transition: [[f64; N_CLASSES]; N_CLASSES],
    /// Per-state emission means, one row per stage in class order.
    pub means: Array2<f64>,
    /// Per-state emission variances, floored at [`VAR_FLOOR`].
    pub variances: Array2<f64>,
}

/// Stage frequencies over all run labels.
pub fn initial_from_runs(runs: &[Vec<StageLabel>]) -> Result<[f64; N_CLASSES]> {
    let mut counts = [0u64; N_CLASSES];
    for run in runs {
        for label in run {
            counts[label.class_index_checked()?] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyInput("initial_from_runs"));
    }
    for (c, count) in counts.iter().enumerate() {
        if *count == 0 {
            return Err(Error::MissingState(CLASSES[c]));
        }
    }
    Ok(counts.map(|c| c as f64 / total as f64))
}

/// Bigram counts within each run, add-one smoothed per row.
pub fn transition_from_runs(runs: &[Vec<StageLabel>]) -> Result<[[f64; N_CLASSES]; N_CLASSES]> {
    let mut counts = [[0u64; N_CLASSES]; N_CLASSES];
    for run in runs {
        for pair in run.windows(2) {
            counts[pair[0].class_index_checked()?][pair[1].class_index_checked()?] += 1;
        }
    }
    let mut a = [[0.0; N_CLASSES]; N_CLASSES];
    for (row, row_counts) in a.iter_mut().zip(&counts) {
        let row_total: u64 = row_counts.iter().sum();
        let denom = row_total as f64 + N_CLASSES as f64;
        for (cell, count) in row.iter_mut().zip(row_counts) {
            *cell = (*count as f64 + 1.0) / denom;
        }
    }
    Ok(a)
}

/// The temporal statistics come from the contiguous `runs` (label sequences
/// unbroken by artifacts); the emissions are fitted on the `(x, y)` feature
/// rows, which may be a differently filtered set such as the balanced one.
pub fn train_hmm(
    runs: &[Vec<StageLabel>],
    x: ArrayView2<f64>,
    y: &[StageLabel],
) -> Result<HmmModel> {
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.nrows(),
            right: y.len(),
        });
    }
    if x.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    let initial = initial_from_runs(runs)?;
    let transition = transition_from_runs(runs)?;

    let d = x.ncols();
    let mut counts = [0u64; N_CLASSES];
    let mut means = Array2::<f64>::zeros((N_CLASSES, d));
    for (row, label) in x.rows().into_iter().zip(y) {
        let c = label.class_index_checked()?;
        counts[c] += 1;
        for (m, v) in means.row_mut(c).iter_mut().zip(row) {
            *m += v;
        }
    }
    for (c, count) in counts.iter().enumerate() {
        if *count == 0 {
            return Err(Error::MissingState(CLASSES[c]));
        }
        means.row_mut(c).mapv_inplace(|m| m / *count as f64);
    }
    let mut variances = Array2::<f64>::zeros((N_CLASSES, d));
    for (row, label) in x.rows().into_iter().zip(y) {
        let c = label.class_index().unwrap();
        for ((var, m), v) in variances.row_mut(c).iter_mut().zip(means.row(c)).zip(row) {
            *var += (v - m) * (v - m);
        }
    }
    for (c, count) in counts.iter().enumerate() {
        variances
            .row_mut(c)
            .mapv_inplace(|s| (s / *count as f64).max(VAR_FLOOR));
    }
    Ok(HmmModel {
        initial,
        transition,
        means,
        variances,
    })
}

/// Diagonal-Gaussian log density of one observation under one state.
pub fn log_emission(model: &HmmModel, state: usize, obs: ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for ((x, m), v) in obs
        .iter()
        .zip(model.means.row(state))
        .zip(model.variances.row(state))
    {
        acc += (2.0 * std::f64::consts::PI * v).ln() + (x - m) * (x - m) / v;
    }
    -0.5 * acc
}

/// Maximum a posteriori state path in log space. Among exactly tied optimal
/// paths the lexicographically smallest in the fixed stage order is returned,
/// via suffix-first dynamic programming that prefers the lowest state index.
pub fn viterbi(model: &HmmModel, seq: ArrayView2<f64>) -> Result<Vec<StageLabel>> {
    let t_len = seq.nrows();
    if t_len == 0 {
        return Err(Error::EmptySequence);
    }
    if seq.ncols() != model.means.ncols() {
        return Err(Error::DimensionMismatch {
            expected: model.means.ncols(),
            actual: seq.ncols(),
        });
    }
    let log_e: Vec<[f64; N_CLASSES]> = seq
        .rows()
        .into_iter()
        .map(|row| std::array::from_fn(|s| log_emission(model, s, row)))
        .collect();

    // suffix[s] = best log-probability of completing the path from state s at
    // the current step; choice[t][s] = the next state that attains it.
    let mut suffix = [0.0f64; N_CLASSES];
    let mut choice = vec![[0usize; N_CLASSES]; t_len.saturating_sub(1)];
    for t in (0..t_len - 1).rev() {
        let mut next_suffix = [f64::NEG_INFINITY; N_CLASSES];
        for s in 0..N_CLASSES {
            for n in 0..N_CLASSES {
                let cand = model.transition[s][n].ln() + log_e[t + 1][n] + suffix[n];
                if cand > next_suffix[s] {
                    next_suffix[s] = cand;
                    choice[t][s] = n;
                }
            }
        }
        suffix = next_suffix;
    }

    let mut best_start = 0;
    let mut best_score = f64::NEG_INFINITY;
    for s in 0..N_CLASSES {
        let cand = model.initial[s].ln() + log_e[0][s] + suffix[s];
        if cand > best_score {
            best_score = cand;
            best_start = s;
        }
    }
    let mut path = Vec::with_capacity(t_len);
    let mut state = best_start;
    path.push(CLASSES[state]);
    for step in &choice {
        state = step[state];
        path.push(CLASSES[state]);
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use StageLabel::*;

    fn labelled_blobs(per_class: usize, seed: u64) -> (Array2<f64>, Vec<StageLabel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (c, class) in CLASSES.iter().enumerate() {
            for _ in 0..per_class {
                xs.push(4.0 * c as f64 + rng.gen_range(-0.5..0.5));
                xs.push(-3.0 * c as f64 + rng.gen_range(-0.5..0.5));
                ys.push(*class);
            }
        }
        (
            Array2::from_shape_vec((ys.len(), 2), xs).unwrap(),
            ys,
        )
    }

    fn full_runs() -> Vec<Vec<StageLabel>> {
        vec![vec![Awake, Nrem1, Nrem2, Sws, Nrem2, Rem, Awake, Rem, Sws, Nrem1]]
    }

    #[test]
    fn bigram_smoothing_counts_by_hand() {
        let a = transition_from_runs(&[vec![Awake, Awake, Awake, Nrem1]]).unwrap();
        // Three raw transitions from Awake plus five smoothing pseudo-counts.
        let expected = [3.0 / 8.0, 2.0 / 8.0, 1.0 / 8.0, 1.0 / 8.0, 1.0 / 8.0];
        for (got, want) in a[0].iter().zip(expected) {
            assert!((got - want).abs() <= 1e-15, "{got} vs {want}");
        }
        // Rows with no observed bigrams fall back to uniform.
        for row in &a[1..] {
            for cell in row {
                assert!((cell - 0.2).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn distributions_normalize() {
        let (x, y) = labelled_blobs(4, 1);
        let model = train_hmm(&full_runs(), x.view(), &y).unwrap();
        let pi_sum: f64 = model.initial.iter().sum();
        assert!((pi_sum - 1.0).abs() <= 1e-12);
        for row in &model.transition {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn emission_moments_match_direct_averaging() {
        let (x, y) = labelled_blobs(7, 2);
        let model = train_hmm(&full_runs(), x.view(), &y).unwrap();
        for (c, class) in CLASSES.iter().enumerate() {
            let rows: Vec<_> = x
                .rows()
                .into_iter()
                .zip(&y)
                .filter(|(_, l)| *l == class)
                .map(|(r, _)| r)
                .collect();
            for d in 0..x.ncols() {
                let mean = rows.iter().map(|r| r[d]).sum::<f64>() / rows.len() as f64;
                let var = rows.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>()
                    / rows.len() as f64;
                assert!((model.means[[c, d]] - mean).abs() <= 1e-12);
                assert!((model.variances[[c, d]] - var.max(VAR_FLOOR)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn constant_dimension_hits_variance_floor() {
        let mut x = labelled_blobs(3, 3).0;
        let y = labelled_blobs(3, 3).1;
        x.column_mut(1).fill(2.5);
        let model = train_hmm(&full_runs(), x.view(), &y).unwrap();
        for c in 0..N_CLASSES {
            assert_eq!(model.variances[[c, 1]], VAR_FLOOR);
        }
    }

    #[test]
    fn missing_state_is_reported() {
        let (x, y) = labelled_blobs(3, 4);
        let no_rem_runs = vec![vec![Awake, Nrem1, Nrem2, Sws, Awake]];
        assert!(matches!(
            train_hmm(&no_rem_runs, x.view(), &y),
            Err(Error::MissingState(Rem))
        ));
        let y_no_sws: Vec<StageLabel> =
            y.iter().map(|l| if *l == Sws { Nrem2 } else { *l }).collect();
        assert!(matches!(
            train_hmm(&full_runs(), x.view(), &y_no_sws),
            Err(Error::MissingState(Sws))
        ));
    }

    fn uniform_model(means: Array2<f64>) -> HmmModel {
        let variances = Array2::from_elem(means.dim(), 1.0);
        HmmModel {
            initial: [0.2; N_CLASSES],
            transition: [[0.2; N_CLASSES]; N_CLASSES],
            means,
            variances,
        }
    }

    #[test]
    fn uniform_chain_reduces_to_per_step_emission_argmax() {
        let means = array![[0.0], [1.0], [2.0], [3.0], [4.0]];
        let model = uniform_model(means);
        let obs = array![[3.9], [0.2], [2.2], [1.4]];
        let path = viterbi(&model, obs.view()).unwrap();
        assert_eq!(path, vec![Rem, Awake, Nrem2, Nrem1]);
    }

    #[test]
    fn single_observation_uses_initial_times_emission() {
        let means = array![[0.0], [1.0], [2.0], [3.0], [4.0]];
        let mut model = uniform_model(means);
        // The prior is strong enough to beat NREM2's better emission fit.
        model.initial = [0.05, 0.05, 0.05, 0.8, 0.05];
        let path = viterbi(&model, array![[2.2]].view()).unwrap();
        let by_hand = (0..N_CLASSES)
            .map(|s| model.initial[s].ln() + log_emission(&model, s, array![2.2].view()))
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert_eq!(path, vec![CLASSES[by_hand]]);
        assert_eq!(path, vec![Sws]);
    }

    /// Enumerates all 5^T paths in lexicographic order, scoring with the same
    /// suffix-first association as the decoder so exact ties agree too.
    fn brute_force(model: &HmmModel, seq: ArrayView2<f64>) -> (Vec<usize>, f64) {
        let t_len = seq.nrows();
        let log_e: Vec<Vec<f64>> = seq
            .rows()
            .into_iter()
            .map(|row| (0..N_CLASSES).map(|s| log_emission(model, s, row)).collect())
            .collect();
        let mut best: Option<(f64, Vec<usize>)> = None;
        let n_paths = N_CLASSES.pow(t_len as u32);
        for code in 0..n_paths {
            let mut path = vec![0usize; t_len];
            let mut c = code;
            for t in (0..t_len).rev() {
                path[t] = c % N_CLASSES;
                c /= N_CLASSES;
            }
            let mut score = 0.0;
            for t in (1..t_len).rev() {
                score = model.transition[path[t - 1]][path[t]].ln() + log_e[t][path[t]] + score;
            }
            score = model.initial[path[0]].ln() + log_e[0][path[0]] + score;
            if best.as_ref().map_or(true, |(b, _)| score > *b) {
                best = Some((score, path));
            }
        }
        let (score, path) = best.unwrap();
        (path, score)
    }

    #[test]
    fn viterbi_matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..200 {
            let d = 3;
            let mut initial = [0.0; N_CLASSES];
            for p in &mut initial {
                *p = rng.gen_range(0.05..1.0);
            }
            let total: f64 = initial.iter().sum();
            for p in &mut initial {
                *p /= total;
            }
            let mut transition = [[0.0; N_CLASSES]; N_CLASSES];
            for row in &mut transition {
                for p in row.iter_mut() {
                    *p = rng.gen_range(0.05..1.0);
                }
                let s: f64 = row.iter().sum();
                for p in row.iter_mut() {
                    *p /= s;
                }
            }
            let means = Array2::from_shape_fn((N_CLASSES, d), |_| rng.gen_range(-2.0..2.0));
            let variances =
                Array2::from_shape_fn((N_CLASSES, d), |_| rng.gen_range(0.2..2.0));
            let model = HmmModel {
                initial,
                transition,
                means,
                variances,
            };
            let t_len = 1 + case % 6;
            let seq = Array2::from_shape_fn((t_len, d), |_| rng.gen_range(-3.0..3.0));
            let decoded = viterbi(&model, seq.view()).unwrap();
            let (oracle_path, oracle_score) = brute_force(&model, seq.view());
            let oracle: Vec<StageLabel> = oracle_path.iter().map(|&s| CLASSES[s]).collect();
            assert_eq!(decoded, oracle, "case {case}");

            // The decoded path's own score equals the enumerated maximum.
            let idx: Vec<usize> = decoded.iter().map(|l| l.class_index().unwrap()).collect();
            let mut score = 0.0;
            for t in (1..t_len).rev() {
                let row = seq.row(t);
                score = model.transition[idx[t - 1]][idx[t]].ln()
                    + log_emission(&model, idx[t], row)
                    + score;
            }
            score = model.initial[idx[0]].ln() + log_emission(&model, idx[0], seq.row(0)) + score;
            assert_eq!(score, oracle_score, "case {case}");
        }
    }

    #[test]
    fn degenerate_sequences_are_rejected() {
        let (x, y) = labelled_blobs(3, 5);
        let model = train_hmm(&full_runs(), x.view(), &y).unwrap();
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            viterbi(&model, empty.view()),
            Err(Error::EmptySequence)
        ));
        let wrong = Array2::<f64>::zeros((3, 4));
        assert!(matches!(
            viterbi(&model, wrong.view()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn model_serialization_roundtrips() {
        let (x, y) = labelled_blobs(4, 6);
        let model = train_hmm(&full_runs(), x.view(), &y).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: HmmModel = serde_json::from_str(&json).unwrap();
        assert_eq!(model, back);
        let seq = Array2::from_shape_fn((6, 2), |(i, j)| (i * 2 + j) as f64 * 0.7);
        assert_eq!(
            viterbi(&model, seq.view()).unwrap(),
            viterbi(&back, seq.view()).unwrap()
        );
    }

    #[test]
    fn decoder_separates_well_spaced_blobs() {
        let (x, y) = labelled_blobs(10, 7);
        let model = train_hmm(&full_runs(), x.view(), &y).unwrap();
        let seq = x.view();
        let path = viterbi(&model, seq).unwrap();
        let hits = path.iter().zip(&y).filter(|(a, b)| a == b).count();
        assert!(hits as f64 / y.len() as f64 >= 0.95);
    }
}
