//! K-means over pose embeddings: k-means++ seeding followed by Lloyd
//! iterations, plus nearest-centroid assignment for inference.
//!
//! The assignment step runs in parallel over rows; centroid sums are always
//! accumulated in row order so results do not depend on the thread count.
//! Row order does affect seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{squared_distance, Matrix};

pub const DEFAULT_K: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("need at least k = {k} rows, got {n}")]
    TooFewRows { n: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("dimension mismatch: model has {expected} columns, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("{assignments} assignments for {rows} rows")]
    Misaligned { rows: usize, assignments: usize },
    #[error("centroid index {index} out of range for k = {k}")]
    IndexOutOfRange { index: usize, k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the relative objective improvement drops below this.
    pub tol: f64,
    /// Independent k-means++ initializations; the lowest objective wins.
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { seed: 0, max_iter: 300, tol: 1e-6, restarts: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidModel {
    pub k: usize,
    pub dimension: usize,
    /// `k x dimension`.
    pub centroids: Matrix,
    pub feature_config_fingerprint: String,
    pub objective: f64,
    pub iterations_run: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub centroid_index: usize,
    /// Squared Euclidean distance to the centroid.
    pub distance: f64,
}

/// Output of [`kmeans_fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub model: CentroidModel,
    /// Nearest-centroid assignment of every training row under the final model.
    pub assignments: Vec<Assignment>,
    /// Objective after each assignment step of the winning restart.
    pub history: Vec<f64>,
}

/// Argmin over rows of `centroids`, lowest index on exact ties.
fn nearest(centroids: &Matrix, v: &[f64]) -> Assignment {
    let mut best = Assignment { centroid_index: 0, distance: f64::INFINITY };
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = squared_distance(v, c);
        if d < best.distance {
            best = Assignment { centroid_index: j, distance: d };
        }
    }
    best
}

fn assign_rows(centroids: &Matrix, data: &Matrix) -> Vec<Assignment> {
    (0..data.rows()).into_par_iter().map(|i| nearest(centroids, data.row(i))).collect()
}

fn total(assignments: &[Assignment]) -> f64 {
    assignments.iter().map(|a| a.distance).sum()
}

/// Objective with assignments held fixed.
fn objective_for(centroids: &Matrix, data: &Matrix, labels: &[Assignment]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, a)| squared_distance(data.row(i), centroids.row(a.centroid_index)))
        .sum()
}

fn kmeans_plus_plus(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = data.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = data.iter_rows().map(|r| squared_distance(r, data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let sum: f64 = d2.iter().sum();
        let next = if sum > 0.0 {
            let target = rng.random::<f64>() * sum;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` past the last partial sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("positive mass"))
        } else {
            // Fewer distinct points than k; duplicates are merged after fitting.
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, r) in data.iter_rows().enumerate() {
            d2[i] = d2[i].min(squared_distance(r, data.row(next)));
        }
    }
    data.select_rows(&chosen)
}

struct Run {
    centroids: Matrix,
    history: Vec<f64>,
}

fn lloyd(data: &Matrix, k: usize, config: &KMeansConfig, rng: &mut ChaCha8Rng) -> Run {
    let d = data.cols();
    let mut centroids = kmeans_plus_plus(data, k, rng);
    let mut labels = assign_rows(&centroids, data);
    let mut history = vec![total(&labels)];

    for _ in 0..config.max_iter {
        let current = *history.last().expect("non-empty history");
        if current == 0.0 {
            break;
        }

        // Update step: per-cluster means accumulated in row order.
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, a) in labels.iter().enumerate() {
            counts[a.centroid_index] += 1;
            for (s, v) in sums.row_mut(a.centroid_index).iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        for (j, &n) in counts.iter().enumerate() {
            if n > 0 {
                let c = n as f64;
                for (t, s) in next.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *t = s / c;
                }
            }
        }

        // Empty clusters take the point farthest from its (updated) centroid.
        let mut moved = labels.clone();
        let mut taken = vec![false; data.rows()];
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let far = (0..data.rows())
                .filter(|&i| !taken[i])
                .map(|i| (i, squared_distance(data.row(i), next.row(moved[i].centroid_index))))
                .filter(|&(_, dist)| dist > 0.0)
                .fold(None, |best: Option<(usize, f64)>, cand| match best {
                    Some(b) if b.1 >= cand.1 => Some(b),
                    _ => Some(cand),
                });
            if let Some((i, _)) = far {
                next.row_mut(j).copy_from_slice(data.row(i));
                moved[i] = Assignment { centroid_index: j, distance: 0.0 };
                taken[i] = true;
            }
        }

        // Guard against rounding making the update step worse.
        if objective_for(&next, data, &moved) > current {
            break;
        }
        let new_labels = assign_rows(&next, data);
        let obj = total(&new_labels);
        centroids = next;
        let unchanged = new_labels.iter().zip(&labels).all(|(a, b)| a.centroid_index == b.centroid_index);
        labels = new_labels;
        history.push(obj);
        if unchanged || (current - obj) <= config.tol * current {
            break;
        }
    }

    // Single-point transfers can escape partitions that Lloyd cannot improve.
    for _ in 0..config.max_iter {
        let current = *history.last().expect("non-empty history");
        let Some(moved) = hartigan_pass(data, k, &labels) else { break };
        let means = cluster_means(data, k, &moved, &centroids);
        if objective_for(&means, data, &moved) > current {
            break;
        }
        let new_labels = assign_rows(&means, data);
        let obj = total(&new_labels);
        if obj > current {
            break;
        }
        centroids = means;
        labels = new_labels;
        history.push(obj);
    }
    Run { centroids, history }
}

/// Means of each cluster in row order; empty clusters keep `fallback`.
fn cluster_means(data: &Matrix, k: usize, labels: &[Assignment], fallback: &Matrix) -> Matrix {
    let mut sums = Matrix::zeros(k, data.cols());
    let mut counts = vec![0usize; k];
    for (i, a) in labels.iter().enumerate() {
        counts[a.centroid_index] += 1;
        for (s, v) in sums.row_mut(a.centroid_index).iter_mut().zip(data.row(i)) {
            *s += v;
        }
    }
    let mut out = fallback.clone();
    for j in (0..k).filter(|&j| counts[j] > 0) {
        let c = counts[j] as f64;
        for (t, s) in out.row_mut(j).iter_mut().zip(sums.row(j)) {
            *t = s / c;
        }
    }
    out
}

/// One sweep of Hartigan transfers: row `i` moves from cluster `a` to `b`
/// when `n_b/(n_b+1) |x-m_b|^2 < n_a/(n_a-1) |x-m_a|^2`. Returns `None` if
/// nothing moved.
fn hartigan_pass(data: &Matrix, k: usize, labels: &[Assignment]) -> Option<Vec<Assignment>> {
    let d = data.cols();
    let mut labels = labels.to_vec();
    let mut counts = vec![0usize; k];
    let mut means = Matrix::zeros(k, d);
    for a in &labels {
        counts[a.centroid_index] += 1;
    }
    for (i, a) in labels.iter().enumerate() {
        let c = counts[a.centroid_index] as f64;
        for (m, v) in means.row_mut(a.centroid_index).iter_mut().zip(data.row(i)) {
            *m += v / c;
        }
    }
    let mut any = false;
    for (i, x) in data.iter_rows().enumerate() {
        let from = labels[i].centroid_index;
        let na = counts[from] as f64;
        if counts[from] < 2 {
            continue;
        }
        let remove = na / (na - 1.0) * squared_distance(x, means.row(from));
        let mut best: Option<(usize, f64)> = None;
        for j in (0..k).filter(|&j| j != from) {
            let nb = counts[j] as f64;
            let add = nb / (nb + 1.0) * squared_distance(x, means.row(j));
            if best.is_none_or(|b| add < b.1) {
                best = Some((j, add));
            }
        }
        let Some((to, add)) = best else { continue };
        if add < remove * (1.0 - 1e-12) {
            let nb = counts[to] as f64;
            for (m, v) in means.row_mut(from).iter_mut().zip(x) {
                *m = (*m * na - v) / (na - 1.0);
            }
            for (m, v) in means.row_mut(to).iter_mut().zip(x) {
                *m = (*m * nb + v) / (nb + 1.0);
            }
            counts[from] -= 1;
            counts[to] += 1;
            labels[i].centroid_index = to;
            any = true;
        }
    }
    any.then_some(labels)
}

/// Fits `k` centroids to the rows of `data`.
pub fn kmeans_fit(data: &Matrix, k: usize, config: &KMeansConfig) -> Result<KMeansFit, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    let n = data.rows();
    if n < k {
        return Err(ClusterError::TooFewRows { n, k });
    }
    if let Some(row) = (0..n).find(|&i| data.row(i).iter().any(|v| !v.is_finite())) {
        return Err(ClusterError::NonFinite { row });
    }

    let mut best: Option<Run> = None;
    for restart in 0..config.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(restart as u64);
        let run = lloyd(data, k, config, &mut rng);
        let better = best.as_ref().is_none_or(|b| {
            run.history.last().expect("history") < b.history.last().expect("history")
        });
        if better {
            best = Some(run);
        }
    }
    let run = best.expect("at least one restart");

    // Drop bit-identical duplicate centroids, keeping the first occurrence.
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..k {
        if !kept.iter().any(|&i| run.centroids.row(i) == run.centroids.row(j)) {
            kept.push(j);
        }
    }
    let centroids = run.centroids.select_rows(&kept);
    let assignments = assign_rows(&centroids, data);
    let objective = total(&assignments);
    let model = CentroidModel {
        k: kept.len(),
        dimension: data.cols(),
        centroids,
        feature_config_fingerprint: String::new(),
        objective,
        iterations_run: run.history.len() - 1,
    };
    Ok(KMeansFit { model, assignments, history: run.history })
}

impl CentroidModel {
    /// Nearest centroid by squared Euclidean distance, lowest index on ties.
    pub fn nearest_centroid(&self, vector: &[f64]) -> Result<Assignment, ClusterError> {
        if vector.len() != self.dimension {
            return Err(ClusterError::DimMismatch { expected: self.dimension, found: vector.len() });
        }
        Ok(nearest(&self.centroids, vector))
    }

    pub fn assign_all(&self, data: &Matrix) -> Result<Vec<Assignment>, ClusterError> {
        if data.rows() > 0 && data.cols() != self.dimension {
            return Err(ClusterError::DimMismatch { expected: self.dimension, found: data.cols() });
        }
        Ok(assign_rows(&self.centroids, data))
    }

    /// Sum over rows of the squared distance to the assigned centroid.
    pub fn kmeans_objective(&self, data: &Matrix, assignments: &[Assignment]) -> Result<f64, ClusterError> {
        if data.rows() != assignments.len() {
            return Err(ClusterError::Misaligned { rows: data.rows(), assignments: assignments.len() });
        }
        if data.rows() > 0 && data.cols() != self.dimension {
            return Err(ClusterError::DimMismatch { expected: self.dimension, found: data.cols() });
        }
        if let Some(a) = assignments.iter().find(|a| a.centroid_index >= self.k) {
            return Err(ClusterError::IndexOutOfRange { index: a.centroid_index, k: self.k });
        }
        Ok(objective_for(&self.centroids, data, assignments))
    }

    pub fn is_finite(&self) -> bool {
        self.centroids.as_slice().iter().all(|v| v.is_finite())
    }
}
