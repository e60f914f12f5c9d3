//! Squared-error gradient boosting over shallow regression trees.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtConfig {
    pub num_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig { num_rounds: 100, max_depth: 3, learning_rate: 0.1, min_samples_leaf: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { value: f64 },
    /// Rows with `x[feature] <= threshold` go left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// Nodes in preorder; index 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn is_stump_leaf(&self) -> bool {
        self.nodes.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
}

impl Ensemble {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().fold(self.base_score, |acc, t| acc + self.learning_rate * t.predict(x))
    }

    /// Prediction after the first `rounds` trees.
    pub fn predict_staged(&self, x: &[f64], rounds: usize) -> f64 {
        self.trees[..rounds.min(self.trees.len())]
            .iter()
            .fold(self.base_score, |acc, t| acc + self.learning_rate * t.predict(x))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 { 0.0 } else { s / n as f64 }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    residual: &'a [f64],
    config: &'a GbdtConfig,
    /// Candidate thresholds per feature: midpoints between distinct values.
    thresholds: Vec<Vec<f64>>,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: mean(rows.iter().map(|&i| self.residual[i])) });
        if depth >= self.config.max_depth || rows.len() < 2 * self.config.min_samples_leaf.max(1) {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(rows) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(&l, depth + 1);
        let right = self.grow(&r, depth + 1);
        self.nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }

    /// Largest reduction in squared error; first candidate wins ties.
    fn best_split(&self, rows: &[usize]) -> Option<(usize, f64)> {
        let n = rows.len() as f64;
        let total: f64 = rows.iter().map(|&i| self.residual[i]).sum();
        let parent = total * total / n;
        let mut best: Option<(usize, f64, f64)> = None;
        for (f, cands) in self.thresholds.iter().enumerate() {
            for &t in cands {
                let (mut sl, mut nl) = (0.0, 0usize);
                for &i in rows {
                    if self.x[i][f] <= t {
                        sl += self.residual[i];
                        nl += 1;
                    }
                }
                let nr = rows.len() - nl;
                if nl < self.config.min_samples_leaf.max(1) || nr < self.config.min_samples_leaf.max(1) {
                    continue;
                }
                let sr = total - sl;
                let gain = sl * sl / nl as f64 + sr * sr / nr as f64 - parent;
                if gain > 1e-12 * parent.abs().max(1e-300) && best.is_none_or(|b| gain > b.2) {
                    best = Some((f, t, gain));
                }
            }
        }
        best.map(|(f, t, _)| (f, t))
    }
}

fn candidate_thresholds(x: &[Vec<f64>], feature: usize) -> Vec<f64> {
    let mut vals: Vec<f64> = x.iter().map(|r| r[feature]).collect();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    vals.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Fits an ensemble on dense rows. `x` must be non-empty and rectangular.
pub fn fit(x: &[Vec<f64>], y: &[f64], config: &GbdtConfig) -> Ensemble {
    let base_score = mean(y.iter().copied());
    let mut ensemble = Ensemble { base_score, learning_rate: config.learning_rate, trees: Vec::new() };
    if y.iter().all(|&v| v == y[0]) {
        return ensemble;
    }
    let width = x.first().map_or(0, Vec::len);
    let thresholds: Vec<Vec<f64>> = (0..width).map(|f| candidate_thresholds(x, f)).collect();
    let mut pred = vec![base_score; y.len()];
    let all: Vec<usize> = (0..y.len()).collect();
    for _ in 0..config.num_rounds {
        let residual: Vec<f64> = y.iter().zip(&pred).map(|(t, p)| t - p).collect();
        let mut b = Builder { x, residual: &residual, config, thresholds: thresholds.clone(), nodes: Vec::new() };
        b.grow(&all, 0);
        let tree = Tree { nodes: b.nodes };
        if tree.is_stump_leaf() {
            // No split improves the fit; further rounds would repeat this.
            break;
        }
        for (p, row) in pred.iter_mut().zip(x) {
            *p += config.learning_rate * tree.predict(row);
        }
        ensemble.trees.push(tree);
    }
    ensemble
}
