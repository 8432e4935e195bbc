//! Neighbor-aware uncertainty: prediction smoothing over nearest neighbors
//! and distance-weighted label support.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ProbabilityVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    Cosine,
}

/// Exact (brute-force) k-nearest-neighbor index over reference vectors.
pub struct NeighborIndex {
    vectors: Vec<Vec<f64>>,
    metric: Metric,
    k: usize,
}

impl NeighborIndex {
    pub fn new(vectors: Vec<Vec<f64>>, metric: Metric, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("k must be >= 1".to_string()));
        }
        if k > vectors.len() {
            return Err(Error::Config(format!(
                "k {} exceeds reference count {}",
                k,
                vectors.len()
            )));
        }
        if let Some(first) = vectors.first() {
            if vectors.iter().any(|v| v.len() != first.len()) {
                return Err(Error::Data("reference vectors disagree on dim".to_string()));
            }
        }
        Ok(NeighborIndex { vectors, metric, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// The k nearest reference vectors to `query` as (index, distance),
    /// distance ascending with ties broken by index. `exclude` skips one
    /// reference position (the query itself when it lives in the index).
    pub fn nearest(&self, query: &[f64], exclude: Option<usize>) -> Vec<(usize, f64)> {
        let mut dists: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(i, v)| (i, self.distance(query, v)))
            .collect();
        dists.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        dists.truncate(self.k);
        dists
    }

    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.metric {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

/// Smoothed prediction distribution: `alpha * p + (1 - alpha) * mean of the
/// neighbors' distributions`.
pub fn nns_smooth(
    p_model: &ProbabilityVector,
    neighbors: &[ProbabilityVector],
    alpha: f64,
) -> Result<ProbabilityVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0,1]")));
    }
    if neighbors.is_empty() {
        return Err(Error::Data("no neighbor distributions".to_string()));
    }
    let c = p_model.len();
    if let Some(n) = neighbors.iter().find(|n| n.len() != c) {
        return Err(Error::Data(format!(
            "neighbor has {} classes, expected {c}",
            n.len()
        )));
    }
    let mut avg = vec![0.0; c];
    for n in neighbors {
        for (a, v) in avg.iter_mut().zip(n.probs()) {
            *a += v;
        }
    }
    let k = neighbors.len() as f64;
    let smoothed: Vec<f64> = p_model
        .probs()
        .iter()
        .zip(&avg)
        .map(|(p, a)| alpha * p + (1.0 - alpha) * a / k)
        .collect();
    ProbabilityVector::new(smoothed)
}

/// Distance-weighted training support for the model's prediction.
///
/// Each neighbor votes for its label with weight `exp(-||z(x)-z(t)||^2 / tau)`;
/// the score is the normalized support of the strongest non-predicted class
/// over the support of the predicted class. Zero support for the prediction
/// yields the infinity sentinel (maximal suspiciousness).
pub fn datis(
    z_x: &[f64],
    predicted: usize,
    neighbor_latents: &[&[f64]],
    neighbor_labels: &[usize],
    num_classes: usize,
    tau: f64,
) -> Result<f64> {
    if neighbor_latents.is_empty() {
        return Err(Error::Data("DATIS needs at least one neighbor".to_string()));
    }
    if neighbor_latents.len() != neighbor_labels.len() {
        return Err(Error::Data(format!(
            "{} latents vs {} labels",
            neighbor_latents.len(),
            neighbor_labels.len()
        )));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("tau {tau} must be > 0")));
    }
    if num_classes < 2 {
        return Err(Error::Config("DATIS needs at least 2 classes".to_string()));
    }
    if predicted >= num_classes {
        return Err(Error::Index(format!(
            "predicted class {predicted} out of range"
        )));
    }
    if let Some(l) = neighbor_labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Data(format!("neighbor label {l} out of range")));
    }

    // Shift exponents by the minimum squared distance; the common factor
    // cancels in the normalized support.
    let sq_dists: Vec<f64> = neighbor_latents
        .iter()
        .map(|z| z_x.iter().zip(*z).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let min_sq = sq_dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut support = vec![0.0; num_classes];
    let mut total = 0.0;
    for (sq, &label) in sq_dists.iter().zip(neighbor_labels) {
        let w = (-(sq - min_sq) / tau).exp();
        support[label] += w;
        total += w;
    }
    for s in support.iter_mut() {
        *s /= total;
    }

    let p_m = support[predicted];
    let p_n = support
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != predicted)
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    if p_m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(p_n / p_m)
}
