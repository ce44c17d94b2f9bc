//! Gradient-boosted regression trees with exact greedy split search.
//!
//! Squared-error boosting: each round fits a depth-limited tree to the
//! current residuals. Splits maximize variance reduction over every
//! (feature, threshold) pair, with thresholds at midpoints between
//! consecutive distinct feature values. Ties break on the lowest feature
//! index, then the lowest threshold, so fits are fully deterministic.
//!
//! Rows carry weights; a duplicated row and a weight-2 row produce the same
//! model. Feature importance is split gain summed per feature, normalized to
//! one.

use serde::Serialize;

use crate::config::GbdtConfig;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeNode {
    /// Split feature; unused on leaves.
    pub feature: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    /// Prediction when this node is a leaf.
    pub value: f64,
    /// Variance reduction achieved by the split.
    pub gain: f64,
    pub is_leaf: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            let node = &self.nodes[at];
            if node.is_leaf {
                return node.value;
            }
            at = if x[node.feature] <= node.threshold {
                node.left
            } else {
                node.right
            };
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], at: usize) -> usize {
            let n = &nodes[at];
            if n.is_leaf {
                0
            } else {
                1 + walk(nodes, n.left).max(walk(nodes, n.right))
            }
        }
        if self.nodes.is_empty() {
            0
        } else {
            walk(&self.nodes, 0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GbdtModel {
    pub trees: Vec<RegressionTree>,
    pub learning_rate: f64,
    /// Mean of the training targets.
    pub base_score: f64,
    pub n_features: usize,
}

impl GbdtModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(CoreError::Shape(format!(
                "predict expects {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        let mut out = self.base_score;
        for tree in &self.trees {
            out += self.learning_rate * tree.predict(x);
        }
        Ok(out)
    }

    /// Per-feature split gains, normalized to sum to one.
    pub fn gain_importance(&self) -> Result<Vec<f64>> {
        let mut gains = vec![0.0; self.n_features];
        for tree in &self.trees {
            for node in &tree.nodes {
                if !node.is_leaf {
                    gains[node.feature] += node.gain;
                }
            }
        }
        let total: f64 = gains.iter().sum();
        if total <= 0.0 {
            return Err(CoreError::Numeric(
                "no split gain accumulated; importance undefined".into(),
            ));
        }
        for g in &mut gains {
            *g /= total;
        }
        Ok(gains)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: GbdtModel,
    /// Training MSE after each boosting round.
    pub mse_history: Vec<f64>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Exact greedy search over all features and midpoint thresholds for the row
/// set `rows`. Returns `None` when no split satisfies the leaf-weight floor
/// or improves on the parent.
fn find_best_split(
    data: &[Vec<f64>],
    residuals: &[f64],
    weights: &[f64],
    rows: &[usize],
    min_leaf_weight: f64,
) -> Option<BestSplit> {
    let n_features = data[0].len();
    let total_w: f64 = rows.iter().map(|&r| weights[r]).sum();
    let total_s: f64 = rows.iter().map(|&r| weights[r] * residuals[r]).sum();
    let parent_score = total_s * total_s / total_w;

    let mut best: Option<BestSplit> = None;
    let mut order: Vec<usize> = rows.to_vec();
    for feature in 0..n_features {
        order.sort_by(|&a, &b| {
            data[a][feature]
                .partial_cmp(&data[b][feature])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut left_w = 0.0;
        let mut left_s = 0.0;
        for i in 0..order.len() - 1 {
            let r = order[i];
            left_w += weights[r];
            left_s += weights[r] * residuals[r];
            let v_here = data[r][feature];
            let v_next = data[order[i + 1]][feature];
            if v_here == v_next {
                continue;
            }
            let right_w = total_w - left_w;
            let right_s = total_s - left_s;
            if left_w < min_leaf_weight || right_w < min_leaf_weight {
                continue;
            }
            let gain = left_s * left_s / left_w + right_s * right_s / right_w - parent_score;
            let threshold = 0.5 * (v_here + v_next);
            let better = match &best {
                None => gain > 1e-12,
                Some(b) => {
                    gain > b.gain + 1e-12
                        || ((gain - b.gain).abs() <= 1e-12
                            && (feature < b.feature
                                || (feature == b.feature && threshold < b.threshold)))
                }
            };
            if better && gain > 1e-12 {
                best = Some(BestSplit {
                    feature,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

fn grow_tree(
    data: &[Vec<f64>],
    residuals: &[f64],
    weights: &[f64],
    rows: Vec<usize>,
    depth_left: usize,
    min_leaf_weight: f64,
    nodes: &mut Vec<TreeNode>,
) -> usize {
    let w: f64 = rows.iter().map(|&r| weights[r]).sum();
    let s: f64 = rows.iter().map(|&r| weights[r] * residuals[r]).sum();
    let leaf_value = s / w;
    let at = nodes.len();
    nodes.push(TreeNode {
        feature: 0,
        threshold: 0.0,
        left: 0,
        right: 0,
        value: leaf_value,
        gain: 0.0,
        is_leaf: true,
    });
    if depth_left == 0 {
        return at;
    }
    let Some(split) = find_best_split(data, residuals, weights, &rows, min_leaf_weight) else {
        return at;
    };
    let (mut left_rows, mut right_rows) = (Vec::new(), Vec::new());
    for &r in &rows {
        if data[r][split.feature] <= split.threshold {
            left_rows.push(r);
        } else {
            right_rows.push(r);
        }
    }
    let left = grow_tree(
        data, residuals, weights, left_rows, depth_left - 1, min_leaf_weight, nodes,
    );
    let right = grow_tree(
        data, residuals, weights, right_rows, depth_left - 1, min_leaf_weight, nodes,
    );
    nodes[at] = TreeNode {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
        value: leaf_value,
        gain: split.gain,
        is_leaf: false,
    };
    at
}

pub fn fit(data: &[Vec<f64>], targets: &[f64], cfg: &GbdtConfig) -> Result<FitOutcome> {
    let weights = vec![1.0; targets.len()];
    fit_weighted(data, targets, &weights, cfg)
}

pub fn fit_weighted(
    data: &[Vec<f64>],
    targets: &[f64],
    weights: &[f64],
    cfg: &GbdtConfig,
) -> Result<FitOutcome> {
    if data.len() != targets.len() || data.len() != weights.len() {
        return Err(CoreError::Shape("rows, targets, weights must align".into()));
    }
    let total_w: f64 = weights.iter().sum();
    if data.is_empty() || total_w < 2.0 * cfg.min_samples_leaf {
        return Err(CoreError::Validation(format!(
            "need total weight >= {}, got {total_w}",
            2.0 * cfg.min_samples_leaf
        )));
    }
    let n_features = data[0].len();
    if n_features == 0 {
        return Err(CoreError::Validation("no features".into()));
    }
    let any_varying = (0..n_features).any(|f| data.iter().any(|row| row[f] != data[0][f]));
    if !any_varying {
        return Err(CoreError::Numeric(
            "all features constant; no split possible".into(),
        ));
    }

    let base_score = targets
        .iter()
        .zip(weights)
        .map(|(t, w)| t * w)
        .sum::<f64>()
        / total_w;
    let mut pred: Vec<f64> = vec![base_score; targets.len()];
    let mut residuals: Vec<f64> = targets.iter().zip(&pred).map(|(t, p)| t - p).collect();
    let all_rows: Vec<usize> = (0..targets.len()).collect();

    let mut trees = Vec::with_capacity(cfg.rounds);
    let mut mse_history = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let mut nodes = Vec::new();
        grow_tree(
            data,
            &residuals,
            weights,
            all_rows.clone(),
            cfg.max_depth,
            cfg.min_samples_leaf,
            &mut nodes,
        );
        let tree = RegressionTree { nodes };
        for (i, row) in data.iter().enumerate() {
            pred[i] += cfg.learning_rate * tree.predict(row);
            residuals[i] = targets[i] - pred[i];
        }
        let mse = residuals
            .iter()
            .zip(weights)
            .map(|(r, w)| w * r * r)
            .sum::<f64>()
            / total_w;
        mse_history.push(mse);
        trees.push(tree);
    }

    Ok(FitOutcome {
        model: GbdtModel {
            trees,
            learning_rate: cfg.learning_rate,
            base_score,
            n_features,
        },
        mse_history,
    })
}
