//! Greedy CART regression trees (squared-error splits, mean leaves).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        value: f64,
        count: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    /// Arena of nodes; index 0 is the root.
    pub nodes: Vec<TreeNode>,
    pub max_depth: usize,
    pub min_leaf: usize,
}

struct Best {
    feature: usize,
    threshold: f64,
    sse: f64,
}

pub fn fit_tree(x: &Tensor, t: &[f64], max_depth: usize, min_leaf: usize) -> Result<RegressionTree> {
    let n = x.rows();
    if t.len() != n {
        return Err(Error::Dimension(format!("{n} rows but {} targets", t.len())));
    }
    if min_leaf == 0 || n < 2 * min_leaf {
        return Err(Error::Domain(format!(
            "tree needs at least 2*min_leaf rows (n={n}, min_leaf={min_leaf})"
        )));
    }
    let mut tree = RegressionTree {
        nodes: Vec::new(),
        max_depth,
        min_leaf,
    };
    let idx: Vec<usize> = (0..n).collect();
    tree.grow(x, t, idx, 0);
    Ok(tree)
}

fn sse_of(t: &[f64], idx: &[usize]) -> (f64, f64) {
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| t[i]).sum::<f64>() / n;
    let sse = idx.iter().map(|&i| (t[i] - mean).powi(2)).sum();
    (mean, sse)
}

impl RegressionTree {
    fn grow(&mut self, x: &Tensor, t: &[f64], idx: Vec<usize>, depth: usize) -> usize {
        let (mean, sse) = sse_of(t, &idx);
        let me = self.nodes.len();
        self.nodes.push(TreeNode::Leaf {
            value: mean,
            count: idx.len(),
        });
        if depth >= self.max_depth || idx.len() < 2 * self.min_leaf || sse <= 0.0 {
            return me;
        }
        let Some(best) = self.best_split(x, t, &idx) else {
            return me;
        };
        if sse - best.sse <= 1e-12 * sse.max(1.0) {
            return me;
        }
        let (li, ri): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| x.get(i, best.feature) <= best.threshold);
        let left = self.grow(x, t, li, depth + 1);
        let right = self.grow(x, t, ri, depth + 1);
        self.nodes[me] = TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        me
    }

    fn best_split(&self, x: &Tensor, t: &[f64], idx: &[usize]) -> Option<Best> {
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| t[i]).sum();
        let total_sq: f64 = idx.iter().map(|&i| t[i] * t[i]).sum();
        let mut best: Option<Best> = None;
        let mut order = idx.to_vec();
        for f in 0..x.cols() {
            order.sort_by(|&a, &b| x.get(a, f).total_cmp(&x.get(b, f)).then(a.cmp(&b)));
            let (mut s, mut sq) = (0.0, 0.0);
            for pos in 0..n - 1 {
                let i = order[pos];
                s += t[i];
                sq += t[i] * t[i];
                let nl = pos + 1;
                let nr = n - nl;
                if nl < self.min_leaf || nr < self.min_leaf {
                    continue;
                }
                let (xa, xb) = (x.get(i, f), x.get(order[pos + 1], f));
                if xa == xb {
                    continue;
                }
                let sse_l = sq - s * s / nl as f64;
                let sr = total - s;
                let sse_r = (total_sq - sq) - sr * sr / nr as f64;
                let sse = sse_l.max(0.0) + sse_r.max(0.0);
                if best.as_ref().map_or(true, |b| sse < b.sse) {
                    let mut threshold = 0.5 * (xa + xb);
                    if threshold >= xb {
                        threshold = xa;
                    }
                    best = Some(Best {
                        feature: f,
                        threshold,
                        sse,
                    });
                }
            }
        }
        best
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut node = 0;
        loop {
            match &self.nodes[node] {
                TreeNode::Leaf { value, .. } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn predict(&self, x: &Tensor) -> Vec<f64> {
        (0..x.rows()).map(|i| self.predict_row(x.row(i))).collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }

    pub fn leaves(&self) -> impl Iterator<Item = (f64, usize)> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Leaf { value, count } => Some((*value, *count)),
            TreeNode::Split { .. } => None,
        })
    }
}
