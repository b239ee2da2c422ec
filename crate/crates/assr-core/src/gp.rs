//! One-vs-rest Gaussian process classification with an RBF kernel and a
//! Laplace-approximated logistic posterior.
//!
//! Each stage gets a binary classifier sharing one stratified-subsampled
//! training set and one kernel matrix. The posterior mode is found by damped
//! Newton iterations on the penalized log-likelihood; prediction uses the
//! standard probit-style approximation of the logistic predictive integral,
//! and the five binary probabilities are normalized into a stage posterior.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::Prediction;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, solve_lower, solve_lower_transposed};
use crate::par::maybe_par_map;
use crate::stage::{StageLabel, CLASSES, N_CLASSES};
use crate::util::{derive_seed, sigmoid, softplus};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    /// Kernel signal variance σ_f².
    pub signal_variance: f64,
    /// Kernel length scale ℓ; `None` uses √d for d input dimensions.
    pub length_scale: Option<f64>,
    /// Each binary classifier trains on at most this many points, drawn by
    /// seeded stratified subsampling. Keeps the cubic factorization cost
    /// bounded.
    pub max_points: usize,
    pub max_newton_iter: usize,
    /// Newton stops when ‖Δf‖∞ falls below this.
    pub tolerance: f64,
    /// When set, a 3×3 grid around (σ_f², ℓ) is scored on a held-out fifth
    /// of the training points and the best cell is refit on everything.
    pub grid_search: bool,
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            signal_variance: 1.0,
            length_scale: None,
            max_points: 500,
            max_newton_iter: 50,
            tolerance: 1e-6,
            grid_search: false,
            seed: 0,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gp signal_variance must be positive, got {}",
                self.signal_variance
            )));
        }
        if let Some(ls) = self.length_scale {
            if !(ls > 0.0 && ls.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "gp length_scale must be positive, got {ls}"
                )));
            }
        }
        if self.max_points < N_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "gp max_points must be at least {N_CLASSES}, got {}",
                self.max_points
            )));
        }
        if self.max_newton_iter == 0 {
            return Err(Error::InvalidConfig(
                "gp max_newton_iter must be at least 1".to_string(),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gp tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// One stage's binary classifier: its 0/1 targets against the shared inputs
/// and the latent posterior mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGp {
    pub target: StageLabel,
    pub targets: Vec<f64>,
    pub f_mode: Array1<f64>,
}

/// Solve factors rebuilt deterministically from the serialized fields.
#[derive(Debug, Clone)]
struct ClassCache {
    w_sqrt: Array1<f64>,
    l: Array2<f64>,
    /// t − σ(f̂), the weights of the predictive mean.
    grad: Array1<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GpModelDoc", into = "GpModelDoc")]
pub struct GpModel {
    pub x: Array2<f64>,
    pub signal_variance: f64,
    pub length_scale: f64,
    /// One entry per stage, in the fixed class order.
    pub classes: Vec<ClassGp>,
    caches: Vec<ClassCache>,
}

impl PartialEq for GpModel {
    fn eq(&self, other: &Self) -> bool {
        self.x == other.x
            && self.signal_variance == other.signal_variance
            && self.length_scale == other.length_scale
            && self.classes == other.classes
    }
}

#[derive(Serialize, Deserialize)]
struct GpModelDoc {
    x: Array2<f64>,
    signal_variance: f64,
    length_scale: f64,
    classes: Vec<ClassGp>,
}

impl From<GpModel> for GpModelDoc {
    fn from(m: GpModel) -> Self {
        GpModelDoc {
            x: m.x,
            signal_variance: m.signal_variance,
            length_scale: m.length_scale,
            classes: m.classes,
        }
    }
}

impl TryFrom<GpModelDoc> for GpModel {
    type Error = Error;

    fn try_from(doc: GpModelDoc) -> Result<GpModel> {
        let k = kernel_matrix(doc.x.view(), doc.signal_variance, doc.length_scale);
        let caches = doc
            .classes
            .iter()
            .map(|c| build_cache(&k, &c.targets, c.f_mode.view()))
            .collect::<Result<Vec<_>>>()?;
        Ok(GpModel {
            x: doc.x,
            signal_variance: doc.signal_variance,
            length_scale: doc.length_scale,
            classes: doc.classes,
            caches,
        })
    }
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn kernel_matrix(x: ArrayView2<f64>, sv: f64, ls: f64) -> Array2<f64> {
    let n = x.nrows();
    let denom = 2.0 * ls * ls;
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        k[[i, i]] = sv;
        for j in (i + 1)..n {
            let v = sv * (-squared_distance(x.row(i), x.row(j)) / denom).exp();
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

fn kernel_to_query(x: ArrayView2<f64>, q: ArrayView1<f64>, sv: f64, ls: f64) -> Array1<f64> {
    let denom = 2.0 * ls * ls;
    Array1::from_iter(
        x.rows()
            .into_iter()
            .map(|r| sv * (-squared_distance(r, q) / denom).exp()),
    )
}

/// Penalized Laplace objective −½·αᵀf + Σᵢ log p(tᵢ|fᵢ), where f = K·α.
fn laplace_objective(alpha: &Array1<f64>, f: &Array1<f64>, t: &[f64]) -> f64 {
    let fit: f64 = t
        .iter()
        .zip(f.iter())
        .map(|(ti, fi)| ti * fi - softplus(*fi))
        .sum();
    fit - 0.5 * alpha.dot(f)
}

/// Newton iterations for the logistic posterior mode, damped so the Laplace
/// objective never decreases. Returns the mode and the per-iteration
/// objective trace (the first entry is the f = 0 starting value).
fn fit_binary(
    k: &Array2<f64>,
    t: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<(Array1<f64>, Vec<f64>)> {
    let n = t.len();
    let mut f = Array1::<f64>::zeros(n);
    let mut alpha = Array1::<f64>::zeros(n);
    let mut obj = laplace_objective(&alpha, &f, t);
    let mut trace = vec![obj];
    for _ in 0..max_iter {
        let pi = f.mapv(sigmoid);
        let w = &pi * &(1.0 - &pi);
        let w_sqrt = w.mapv(f64::sqrt);
        let mut b_mat = Array2::<f64>::eye(n);
        for i in 0..n {
            for j in 0..n {
                b_mat[[i, j]] += w_sqrt[i] * k[[i, j]] * w_sqrt[j];
            }
        }
        let l = cholesky(b_mat.view())?;
        let grad = Array1::from_iter(t.iter().zip(pi.iter()).map(|(ti, pi)| ti - pi));
        let b_vec = &w * &f + &grad;
        let kb = k.dot(&b_vec);
        let u = solve_lower_transposed(&l, solve_lower(&l, (&w_sqrt * &kb).view()).view());
        let alpha_new = &b_vec - &(&w_sqrt * &u);
        let f_new = k.dot(&alpha_new);

        // Damped step: f and α move along the same segment, so f = K·α is
        // preserved and the objective stays cheap to evaluate.
        let mut step = 1.0;
        let (accepted_f, accepted_alpha, accepted_obj) = loop {
            let f_try = &f + &((&f_new - &f) * step);
            let alpha_try = &alpha + &((&alpha_new - &alpha) * step);
            let obj_try = laplace_objective(&alpha_try, &f_try, t);
            if obj_try >= obj || step < 1e-8 {
                break (f_try, alpha_try, obj_try.max(obj));
            }
            step *= 0.5;
        };
        let delta = (&accepted_f - &f)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        f = accepted_f;
        alpha = accepted_alpha;
        obj = accepted_obj;
        trace.push(obj);
        if delta < tol {
            break;
        }
    }
    Ok((f, trace))
}

fn build_cache(k: &Array2<f64>, t: &[f64], f_mode: ArrayView1<f64>) -> Result<ClassCache> {
    let n = t.len();
    let pi = f_mode.mapv(sigmoid);
    let w_sqrt = (&pi * &(1.0 - &pi)).mapv(f64::sqrt);
    let mut b_mat = Array2::<f64>::eye(n);
    for i in 0..n {
        for j in 0..n {
            b_mat[[i, j]] += w_sqrt[i] * k[[i, j]] * w_sqrt[j];
        }
    }
    let l = cholesky(b_mat.view())?;
    let grad = Array1::from_iter(t.iter().zip(pi.iter()).map(|(ti, pi)| ti - pi));
    Ok(ClassCache { w_sqrt, l, grad })
}

/// Stratified subsample of at most `cap` indices, preserving class
/// proportions by largest-remainder apportionment. Returned sorted.
fn stratified_cap(y: &[StageLabel], cap: usize, seed: u64) -> Result<Vec<usize>> {
    if y.len() <= cap {
        return Ok((0..y.len()).collect());
    }
    let mut by_class: [Vec<usize>; N_CLASSES] = Default::default();
    for (i, label) in y.iter().enumerate() {
        by_class[label.class_index_checked()?].push(i);
    }
    let n = y.len() as f64;
    let quota: Vec<f64> = by_class
        .iter()
        .map(|v| cap as f64 * v.len() as f64 / n)
        .collect();
    let mut alloc: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    let mut left = cap - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..N_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let fa = quota[a] - quota[a].floor();
        let fb = quota[b] - quota[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in &order {
        if left == 0 {
            break;
        }
        if alloc[c] < by_class[c].len() {
            alloc[c] += 1;
            left -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(cap);
    for (c, idx) in by_class.iter().enumerate() {
        let mut pool = idx.clone();
        pool.shuffle(&mut rng);
        pool.truncate(alloc[c].min(pool.len()));
        picked.extend(pool);
    }
    picked.sort_unstable();
    Ok(picked)
}

fn binary_targets(y: &[StageLabel], class: StageLabel) -> Vec<f64> {
    y.iter().map(|l| f64::from(*l == class)).collect()
}

fn fit_all_classes(
    x: ArrayView2<f64>,
    y: &[StageLabel],
    sv: f64,
    ls: f64,
    cfg: &GpConfig,
) -> Result<GpModel> {
    let k = kernel_matrix(x, sv, ls);
    let fits = maybe_par_map(CLASSES.to_vec(), |class| -> Result<(ClassGp, ClassCache)> {
        let t = binary_targets(y, class);
        let (f_mode, _trace) = fit_binary(&k, &t, cfg.max_newton_iter, cfg.tolerance)?;
        let cache = build_cache(&k, &t, f_mode.view())?;
        Ok((
            ClassGp {
                target: class,
                targets: t,
                f_mode,
            },
            cache,
        ))
    });
    let mut classes = Vec::with_capacity(N_CLASSES);
    let mut caches = Vec::with_capacity(N_CLASSES);
    for fit in fits {
        let (class, cache) = fit?;
        classes.push(class);
        caches.push(cache);
    }
    Ok(GpModel {
        x: x.to_owned(),
        signal_variance: sv,
        length_scale: ls,
        classes,
        caches,
    })
}

pub fn train_gp(x: ArrayView2<f64>, y: &[StageLabel], cfg: &GpConfig) -> Result<GpModel> {
    cfg.validate()?;
    if x.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.nrows(),
            right: y.len(),
        });
    }
    let mut present = [false; N_CLASSES];
    for label in y {
        present[label.class_index_checked()?] = true;
    }
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::SingleClass);
    }

    let picked = stratified_cap(y, cfg.max_points, derive_seed(cfg.seed, "gp-subsample"))?;
    let x_sub = x.select(Axis(0), &picked);
    let y_sub: Vec<StageLabel> = picked.iter().map(|&i| y[i]).collect();
    let ls0 = cfg
        .length_scale
        .unwrap_or_else(|| (x.ncols() as f64).sqrt());
    let (sv, ls) = if cfg.grid_search {
        grid_search(x_sub.view(), &y_sub, cfg.signal_variance, ls0, cfg)?
    } else {
        (cfg.signal_variance, ls0)
    };
    fit_all_classes(x_sub.view(), &y_sub, sv, ls, cfg)
}

/// Scores a 3×3 (σ_f², ℓ) grid by multiclass accuracy on a held-out fifth.
/// Ties keep the earliest grid cell, scanning variance-major.
fn grid_search(
    x: ArrayView2<f64>,
    y: &[StageLabel],
    sv0: f64,
    ls0: f64,
    cfg: &GpConfig,
) -> Result<(f64, f64)> {
    let n = x.nrows();
    let n_held = (n / 5).max(1);
    if n - n_held < 2 {
        return Ok((sv0, ls0));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gp-grid-split"));
    order.shuffle(&mut rng);
    let (held_idx, train_idx) = order.split_at(n_held);
    let x_train = x.select(Axis(0), train_idx);
    let y_train: Vec<StageLabel> = train_idx.iter().map(|&i| y[i]).collect();
    let x_held = x.select(Axis(0), held_idx);
    let y_held: Vec<StageLabel> = held_idx.iter().map(|&i| y[i]).collect();

    let mut best: Option<(f64, f64, f64)> = None;
    for sv_scale in [0.25, 1.0, 4.0] {
        for ls_scale in [0.5, 1.0, 2.0] {
            let (sv, ls) = (sv0 * sv_scale, ls0 * ls_scale);
            let model = fit_all_classes(x_train.view(), &y_train, sv, ls, cfg)?;
            let mut hits = 0usize;
            for (row, truth) in x_held.rows().into_iter().zip(&y_held) {
                if predict_gp(&model, row.as_slice().unwrap())?.label == *truth {
                    hits += 1;
                }
            }
            let acc = hits as f64 / y_held.len() as f64;
            if best.map_or(true, |(b, _, _)| acc > b) {
                best = Some((acc, sv, ls));
            }
        }
    }
    let (_, sv, ls) = best.expect("grid is non-empty");
    Ok((sv, ls))
}

/// The five per-class binary probabilities, before normalization.
pub fn gp_binary_probabilities(model: &GpModel, query: &[f64]) -> Result<[f64; N_CLASSES]> {
    if query.len() != model.x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: model.x.ncols(),
            actual: query.len(),
        });
    }
    let q = ArrayView1::from(query);
    let k_star = kernel_to_query(model.x.view(), q, model.signal_variance, model.length_scale);
    let mut probs = [0.0; N_CLASSES];
    for (c, cache) in model.caches.iter().enumerate() {
        let mean = k_star.dot(&cache.grad);
        let v = solve_lower(&cache.l, (&cache.w_sqrt * &k_star).view());
        let var = (model.signal_variance - v.dot(&v)).max(0.0);
        // MacKay's probit-style approximation of ∫σ(f)·N(f; mean, var) df.
        probs[c] = sigmoid(mean / (1.0 + std::f64::consts::PI * var / 8.0).sqrt());
    }
    Ok(probs)
}

pub fn predict_gp(model: &GpModel, query: &[f64]) -> Result<Prediction> {
    Prediction::from_scores(gp_binary_probabilities(model, query)?)
}
