//! Random forest over the joint feature vectors: bootstrapped trees, Gini
//! splits on random feature subsets, leaf class histograms averaged into a
//! posterior.
//!
//! Training rows are first sorted into a canonical order (lexicographic by
//! feature values, then label), so the forest depends only on the data as a
//! multiset, the config, and the seed — never on input row order. Each tree
//! draws its bootstrap sample and feature subsets from its own derived seed,
//! which keeps tree growing embarrassingly parallel and scheduling-free.

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::Prediction;
use crate::error::{Error, Result};
use crate::par::maybe_par_map;
use crate::stage::{StageLabel, N_CLASSES};
use crate::util::derive_seed;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RfConfig {
    pub n_trees: usize,
    /// Candidate features per split; `None` uses ⌈√d⌉.
    pub features_per_split: Option<usize>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for RfConfig {
    fn default() -> Self {
        RfConfig {
            n_trees: 100,
            features_per_split: None,
            min_leaf: 1,
            max_depth: None,
            seed: 0,
        }
    }
}

impl RfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidConfig(
                "rf n_trees must be at least 1".to_string(),
            ));
        }
        if self.features_per_split == Some(0) {
            return Err(Error::InvalidConfig(
                "rf features_per_split must be at least 1".to_string(),
            ));
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidConfig(
                "rf min_leaf must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        /// Index of the ≤-threshold child in the tree's node arena.
        left: u32,
        right: u32,
    },
    Leaf {
        counts: [u64; N_CLASSES],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Node arena; the root is node 0.
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfModel {
    pub trees: Vec<Tree>,
    pub n_trees: usize,
    pub features_per_split: usize,
    pub seed: u64,
}

/// `n` draws with replacement; the only consumer of the tree RNG before
/// growing starts, so out-of-bag sets can be replayed from the same seed.
pub fn bootstrap_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

fn gini(counts: &[u64; N_CLASSES], total: f64) -> f64 {
    let mut sum_sq = 0.0;
    for c in counts {
        let p = *c as f64 / total;
        sum_sq += p * p;
    }
    1.0 - sum_sq
}

fn class_counts(y: &[usize], idx: &[usize]) -> [u64; N_CLASSES] {
    let mut counts = [0u64; N_CLASSES];
    for &i in idx {
        counts[y[i]] += 1;
    }
    counts
}

/// Distinct features drawn by partial Fisher-Yates, then sorted so the split
/// scan order is independent of the draw order.
fn feature_subset(rng: &mut ChaCha8Rng, d: usize, m: usize) -> Vec<usize> {
    let m = m.min(d);
    let mut pool: Vec<usize> = (0..d).collect();
    for i in 0..m {
        let j = rng.gen_range(i..d);
        pool.swap(i, j);
    }
    let mut subset = pool[..m].to_vec();
    subset.sort_unstable();
    subset
}

struct TreeBuilder<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [usize],
    features_per_split: usize,
    min_leaf: usize,
    max_depth: Option<usize>,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    /// Best (feature, threshold) over the subset by Gini impurity decrease;
    /// ties keep the lowest feature, then the lowest threshold.
    fn best_split(&self, idx: &[usize], subset: &[usize]) -> Option<(usize, f64)> {
        let total = idx.len() as f64;
        let parent = gini(&class_counts(self.y, idx), total);
        let mut best: Option<(f64, usize, f64)> = None;
        for &feature in subset {
            let mut vals: Vec<(f64, usize)> = idx
                .iter()
                .map(|&i| (self.x[[i, feature]], self.y[i]))
                .collect();
            vals.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = [0u64; N_CLASSES];
            let mut right = class_counts(self.y, idx);
            for split_at in 1..vals.len() {
                let (prev_v, prev_y) = vals[split_at - 1];
                left[prev_y] += 1;
                right[prev_y] -= 1;
                let v = vals[split_at].0;
                if v == prev_v {
                    continue;
                }
                let n_left = split_at;
                let n_right = vals.len() - split_at;
                if n_left < self.min_leaf || n_right < self.min_leaf {
                    continue;
                }
                let decrease = parent
                    - (n_left as f64 / total) * gini(&left, n_left as f64)
                    - (n_right as f64 / total) * gini(&right, n_right as f64);
                if decrease > 1e-12 && best.map_or(true, |(b, _, _)| decrease > b) {
                    best = Some((decrease, feature, 0.5 * (prev_v + v)));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> u32 {
        let counts = class_counts(self.y, &idx);
        let is_pure = counts.iter().filter(|c| **c > 0).count() <= 1;
        let depth_capped = self.max_depth.is_some_and(|m| depth >= m);
        let split = if is_pure || depth_capped || idx.len() < 2 * self.min_leaf {
            None
        } else {
            let subset = feature_subset(rng, self.x.ncols(), self.features_per_split);
            self.best_split(&idx, &subset)
        };
        let Some((feature, threshold)) = split else {
            self.nodes.push(Node::Leaf { counts });
            return (self.nodes.len() - 1) as u32;
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
            .into_iter()
            .partition(|&i| self.x[[i, feature]] <= threshold);
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { counts: [0; N_CLASSES] }); // placeholder
        let left = self.grow(left_idx, depth + 1, rng);
        let right = self.grow(right_idx, depth + 1, rng);
        self.nodes[slot] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        slot as u32
    }
}

fn grow_tree<'a>(
    x: ArrayView2<'a, f64>,
    y: &'a [usize],
    cfg: &RfConfig,
    features_per_split: usize,
    tree_seed: u64,
) -> Tree {
    let mut rng = ChaCha8Rng::seed_from_u64(tree_seed);
    let sample = bootstrap_indices(&mut rng, y.len());
    let mut builder = TreeBuilder {
        x,
        y,
        features_per_split,
        min_leaf: cfg.min_leaf,
        max_depth: cfg.max_depth,
        nodes: Vec::new(),
    };
    let root = builder.grow(sample, 0, &mut rng);
    debug_assert_eq!(root, 0);
    Tree {
        nodes: builder.nodes,
    }
}

/// Indices that order the rows canonically: lexicographic by feature values,
/// then by label.
fn canonical_order(x: ArrayView2<f64>, y: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| {
        for c in 0..x.ncols() {
            let cmp = x[[a, c]].total_cmp(&x[[b, c]]);
            if cmp != std::cmp::Ordering::Equal {
                return cmp;
            }
        }
        y[a].cmp(&y[b])
    });
    order
}

pub fn train_rf(x: ArrayView2<f64>, y: &[StageLabel], cfg: &RfConfig) -> Result<RfModel> {
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
    let y_idx: Vec<usize> = y
        .iter()
        .map(|l| l.class_index_checked())
        .collect::<Result<_>>()?;
    let order = canonical_order(x, &y_idx);
    let x_canon = x.select(ndarray::Axis(0), &order);
    let y_canon: Vec<usize> = order.iter().map(|&i| y_idx[i]).collect();

    let features_per_split = cfg
        .features_per_split
        .unwrap_or_else(|| (x.ncols() as f64).sqrt().ceil() as usize)
        .min(x.ncols())
        .max(1);
    let trees = maybe_par_map((0..cfg.n_trees).collect::<Vec<_>>(), |i| {
        grow_tree(
            x_canon.view(),
            &y_canon,
            cfg,
            features_per_split,
            derive_seed(cfg.seed, &format!("tree-{i}")),
        )
    });
    Ok(RfModel {
        trees,
        n_trees: cfg.n_trees,
        features_per_split,
        seed: cfg.seed,
    })
}

fn leaf_counts<'a>(tree: &'a Tree, query: &[f64]) -> &'a [u64; N_CLASSES] {
    let mut at = 0u32;
    loop {
        match &tree.nodes[at as usize] {
            Node::Leaf { counts } => return counts,
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                at = if query[*feature] <= *threshold {
                    *left
                } else {
                    *right
                };
            }
        }
    }
}

/// Expected query dimension, read off the split nodes (0 for stump forests).
fn max_feature(model: &RfModel) -> usize {
    model
        .trees
        .iter()
        .flat_map(|t| &t.nodes)
        .filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature + 1),
            Node::Leaf { .. } => None,
        })
        .max()
        .unwrap_or(0)
}

pub fn predict_rf(model: &RfModel, query: &[f64]) -> Result<Prediction> {
    if query.len() < max_feature(model) {
        return Err(Error::DimensionMismatch {
            expected: max_feature(model),
            actual: query.len(),
        });
    }
    let mut scores = [0.0f64; N_CLASSES];
    for tree in &model.trees {
        let counts = leaf_counts(tree, query);
        let total: u64 = counts.iter().sum();
        for (s, c) in scores.iter_mut().zip(counts) {
            *s += *c as f64 / total as f64;
        }
    }
    for s in &mut scores {
        *s /= model.trees.len() as f64;
    }
    Prediction::from_scores(scores)
}
