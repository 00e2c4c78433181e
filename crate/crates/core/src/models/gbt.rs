//! Second-order gradient-boosted trees with logistic loss and exact greedy
//! splits.

use super::{sigmoid, ModelError};
use crate::domain::Outcome;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbtSpec {
    pub max_depth: usize,
    pub learning_rate: f64,
    pub n_estimators: usize,
    pub train_fraction: f64,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    /// Minimum hessian mass in each child of a split.
    pub min_child_weight: f64,
    /// Minimum loss reduction required to split.
    pub min_split_gain: f64,
}

impl Default for GbtSpec {
    fn default() -> Self {
        Self {
            max_depth: 13,
            learning_rate: 0.1,
            n_estimators: 100,
            train_fraction: 0.85,
            lambda: 1.0,
            min_child_weight: 1.0,
            min_split_gain: 0.0,
        }
    }
}

impl GbtSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.to_string()));
        if self.max_depth == 0 || self.n_estimators == 0 {
            return bad("max_depth and n_estimators must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning rate must be in (0, 1]");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train fraction must be in (0, 1)");
        }
        if !(self.lambda >= 0.0) || !(self.min_child_weight >= 0.0) || !(self.min_split_gain >= 0.0) {
            return bad("lambda, min_child_weight and min_split_gain must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[feature] < threshold { left } else { right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gbt {
    spec: GbtSpec,
    base_margin: f64,
    trees: Vec<Tree>,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    g: &'a [f64],
    h: &'a [f64],
    spec: &'a GbtSpec,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        -g / (h + self.spec.lambda) * self.spec.learning_rate
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.spec.lambda)
    }

    /// Best split of `idx` as `(gain, feature, threshold)`.
    fn best_split(&self, idx: &[usize]) -> Option<(f64, usize, f64)> {
        let g_total: f64 = idx.iter().map(|&i| self.g[i]).sum();
        let h_total: f64 = idx.iter().map(|&i| self.h[i]).sum();
        let parent = self.score(g_total, h_total);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted = idx.to_vec();
        for f in 0..self.x[0].len() {
            sorted.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let (mut gl, mut hl) = (0.0, 0.0);
            for w in 0..sorted.len() - 1 {
                let i = sorted[w];
                gl += self.g[i];
                hl += self.h[i];
                let (lo, hi) = (self.x[i][f], self.x[sorted[w + 1]][f]);
                if lo == hi {
                    continue;
                }
                let (gr, hr) = (g_total - gl, h_total - hl);
                if hl < self.spec.min_child_weight || hr < self.spec.min_child_weight {
                    continue;
                }
                let gain = 0.5 * (self.score(gl, hl) + self.score(gr, hr) - parent);
                if gain > self.spec.min_split_gain && best.is_none_or(|b| gain > b.0) {
                    best = Some((gain, f, 0.5 * (lo + hi)));
                }
            }
        }
        best
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let at = self.nodes.len();
        let g: f64 = idx.iter().map(|&i| self.g[i]).sum();
        let h: f64 = idx.iter().map(|&i| self.h[i]).sum();
        self.nodes.push(Node::Leaf { value: self.leaf_value(g, h) });
        if depth >= self.spec.max_depth || idx.len() < 2 {
            return at;
        }
        let Some((_, feature, threshold)) = self.best_split(&idx) else {
            return at;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| self.x[i][feature] < threshold);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[at] = Node::Split { feature, threshold, left, right };
        at
    }
}

fn log_loss(margins: &[f64], y: &[f64]) -> f64 {
    margins
        .iter()
        .zip(y)
        .map(|(&m, &t)| {
            // −[t·ln σ(m) + (1−t)·ln(1−σ(m))] = softplus(m) − t·m
            let softplus = if m > 0.0 { m + (-m).exp().ln_1p() } else { m.exp().ln_1p() };
            softplus - t * m
        })
        .sum::<f64>()
        / margins.len() as f64
}

impl Gbt {
    pub fn spec(&self) -> &GbtSpec {
        &self.spec
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Fits `spec.n_estimators` rounds; returns the model and training
    /// log-loss after each round.
    pub(super) fn fit(x: &[Vec<f64>], y: &[Outcome], spec: &GbtSpec) -> Result<(Gbt, Vec<f64>), ModelError> {
        if x.is_empty() {
            return Err(ModelError::EmptyTrainingSet);
        }
        let target: Vec<f64> = y.iter().map(|o| o.class_index() as f64).collect();
        let base_margin = 0.0;
        let mut margins = vec![base_margin; x.len()];
        let mut trees = Vec::with_capacity(spec.n_estimators);
        let mut history = Vec::with_capacity(spec.n_estimators);
        let mut g = vec![0.0; x.len()];
        let mut h = vec![0.0; x.len()];
        for _ in 0..spec.n_estimators {
            for i in 0..x.len() {
                let p = sigmoid(margins[i]);
                g[i] = p - target[i];
                h[i] = p * (1.0 - p);
            }
            let mut b = Builder { x, g: &g, h: &h, spec, nodes: Vec::new() };
            b.build((0..x.len()).collect(), 0);
            let tree = Tree { nodes: b.nodes };
            for (m, xi) in margins.iter_mut().zip(x) {
                *m += tree.predict(xi);
            }
            trees.push(tree);
            history.push(log_loss(&margins, &target));
        }
        Ok((Gbt { spec: spec.clone(), base_margin, trees }, history))
    }

    pub fn margin(&self, x: &[f64]) -> f64 {
        self.base_margin + self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict_encoded(&self, x: &[f64]) -> [f64; 2] {
        let p = sigmoid(self.margin(x));
        [1.0 - p, p]
    }
}
