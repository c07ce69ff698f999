use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub min_leaf: usize,
    /// Train each tree on a bootstrap resample; otherwise on the full set.
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            min_leaf: 2,
            bootstrap: true,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.min_leaf == 0 {
            return Err(Error::Config("forest needs at least one tree and min_leaf >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf { mean: f64, count: usize },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

fn sse(sum: f64, sum_sq: f64, n: usize) -> f64 {
    (sum_sq - sum * sum / n as f64).max(0.0)
}

impl RegressionTree {
    /// Grows an unpruned tree with axis-aligned splits that minimise the
    /// summed squared error of the two children.
    pub fn fit(x: &[Vec<f64>], y: &[f64], rows: Vec<usize>, min_leaf: usize) -> Self {
        let mut tree = RegressionTree { nodes: Vec::new() };
        tree.grow(x, y, rows, min_leaf);
        tree
    }

    fn grow(&mut self, x: &[Vec<f64>], y: &[f64], rows: Vec<usize>, min_leaf: usize) -> usize {
        let n = rows.len();
        let sum: f64 = rows.iter().map(|&r| y[r]).sum();
        let sum_sq: f64 = rows.iter().map(|&r| y[r] * y[r]).sum();
        let here = self.nodes.len();
        self.nodes.push(Node::Leaf {
            mean: sum / n as f64,
            count: n,
        });
        let parent_sse = sse(sum, sum_sq, n);
        if n < 2 * min_leaf || parent_sse <= 1e-12 * (1.0 + sum_sq) {
            return here;
        }
        let n_features = x[rows[0]].len();
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = rows.clone();
        for f in 0..n_features {
            order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            let (mut ls, mut lq) = (0.0, 0.0);
            for k in 0..n - 1 {
                let yk = y[order[k]];
                ls += yk;
                lq += yk * yk;
                let nl = k + 1;
                let (a, b) = (x[order[k]][f], x[order[k + 1]][f]);
                if nl < min_leaf || n - nl < min_leaf || a == b {
                    continue;
                }
                let score = sse(ls, lq, nl) + sse(sum - ls, sum_sq - lq, n - nl);
                if best.is_none_or(|(s, _, _)| score < s) {
                    best = Some((score, f, 0.5 * (a + b)));
                }
            }
        }
        let Some((score, feature, threshold)) = best else {
            return here;
        };
        if score >= parent_sse {
            return here;
        }
        let (l, r): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| x[i][feature] <= threshold);
        let left = self.grow(x, y, l, min_leaf);
        let right = self.grow(x, y, r, min_leaf);
        self.nodes[here] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        here
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { mean, .. } => return *mean,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn leaf_counts(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { count, .. } => Some(*count),
            _ => None,
        })
    }
}

/// Bagged regression trees predicting fitness from encoded points.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    trees: Vec<RegressionTree>,
}

impl Forest {
    pub fn fit(x: &[Vec<f64>], y: &[f64], config: &ForestConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if x.len() != y.len() {
            return Err(Error::Shape(format!("{} inputs for {} targets", x.len(), y.len())));
        }
        if y.len() < 2 {
            return Err(Error::InsufficientHistory {
                needed: 2,
                have: y.len(),
            });
        }
        let mut rng = Rng::new(seed);
        let n = y.len();
        let trees = (0..config.n_trees)
            .map(|_| {
                let rows = if config.bootstrap {
                    (0..n).map(|_| rng.below(n)).collect()
                } else {
                    (0..n).collect()
                };
                RegressionTree::fit(x, y, rows, config.min_leaf)
            })
            .collect();
        Ok(Forest { trees })
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    /// Mean and (population) standard deviation of the per-tree predictions.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let preds: Vec<f64> = self.trees.iter().map(|t| t.predict(x)).collect();
        let m = preds.iter().sum::<f64>() / preds.len() as f64;
        let var = preds.iter().map(|p| (p - m).powi(2)).sum::<f64>() / preds.len() as f64;
        (m, var.sqrt())
    }
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Expected improvement below `best` of a normal with the given mean and
/// standard deviation (fitness is minimised).
pub fn expected_improvement(mean: f64, std: f64, best: f64) -> f64 {
    let gap = best - mean;
    if std <= 0.0 {
        return gap.max(0.0);
    }
    let z = gap / std;
    (gap * std_normal_cdf(z) + std * std_normal_pdf(z)).max(0.0)
}
