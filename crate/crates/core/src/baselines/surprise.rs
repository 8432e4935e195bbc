//! Surprise adequacy: how unusual a test input's activation trace is
//! relative to the traces the model produced on its training data.
//!
//! The reference holds per-class traces of correctly classified training
//! inputs. Three scores are derived from it: distance ratio (DSA), negative
//! log Gaussian-KDE likelihood (LSA), and Mahalanobis distance to the class
//! centroid (MDSA).

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::models::Classifier;

/// Per-class activation traces with the derived statistics each score needs.
pub struct SAReference {
    class_traces: Vec<Vec<Vec<f64>>>,
    dim: usize,
    /// Per-class mean, present when the class has at least one trace.
    class_means: Vec<Option<Vec<f64>>>,
    /// Inverse of the regularized covariance (row-major dim x dim).
    class_cov_inv: Vec<Option<Vec<f64>>>,
    lsa_bandwidth: Option<f64>,
}

/// Covariance ridge keeping every class matrix invertible.
const COV_RIDGE: f64 = 1e-6;

impl SAReference {
    /// Collect traces of correctly classified training inputs, grouped by
    /// class, and precompute MDSA statistics.
    pub fn build(
        model: &Classifier,
        train: &Dataset,
        lsa_bandwidth: Option<f64>,
    ) -> Result<SAReference> {
        let mut class_traces = vec![Vec::new(); train.num_classes()];
        for i in 0..train.len() {
            let out = model.forward_full(train.input(i))?;
            if out.predicted == train.label(i) {
                class_traces[out.predicted].push(out.trace.data().to_vec());
            }
        }
        SAReference::from_traces(class_traces, lsa_bandwidth)
    }

    /// Build directly from per-class traces.
    pub fn from_traces(
        class_traces: Vec<Vec<Vec<f64>>>,
        lsa_bandwidth: Option<f64>,
    ) -> Result<SAReference> {
        if let Some(h) = lsa_bandwidth {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::Numeric(format!("LSA bandwidth {h} must be > 0")));
            }
        }
        let dim = class_traces
            .iter()
            .flat_map(|c| c.first())
            .map(|t| t.len())
            .next()
            .ok_or_else(|| Error::Data("reference has no traces at all".to_string()))?;
        for (c, traces) in class_traces.iter().enumerate() {
            if let Some(t) = traces.iter().find(|t| t.len() != dim) {
                return Err(Error::Data(format!(
                    "class {c} trace has dim {}, expected {dim}",
                    t.len()
                )));
            }
        }

        let mut class_means = Vec::with_capacity(class_traces.len());
        let mut class_cov_inv = Vec::with_capacity(class_traces.len());
        for traces in &class_traces {
            if traces.is_empty() {
                class_means.push(None);
                class_cov_inv.push(None);
                continue;
            }
            let n = traces.len();
            let mut mean = vec![0.0; dim];
            for t in traces {
                for (m, v) in mean.iter_mut().zip(t) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= n as f64;
            }
            // Sample covariance (zero for singletons) plus a ridge.
            let mut cov = vec![0.0; dim * dim];
            if n > 1 {
                for t in traces {
                    for i in 0..dim {
                        let di = t[i] - mean[i];
                        for j in 0..dim {
                            cov[i * dim + j] += di * (t[j] - mean[j]);
                        }
                    }
                }
                for v in cov.iter_mut() {
                    *v /= (n - 1) as f64;
                }
            }
            for i in 0..dim {
                cov[i * dim + i] += COV_RIDGE;
            }
            let inv = invert_matrix(&cov, dim)?;
            class_means.push(Some(mean));
            class_cov_inv.push(Some(inv));
        }
        Ok(SAReference {
            class_traces,
            dim,
            class_means,
            class_cov_inv,
            lsa_bandwidth,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_traces.len()
    }

    pub fn traces_of(&self, class: usize) -> &[Vec<f64>] {
        &self.class_traces[class]
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.class_traces.len() {
            return Err(Error::Index(format!(
                "class {class} out of range for {} classes",
                self.class_traces.len()
            )));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distance-based surprise: distance to the nearest same-class training
/// trace over the distance from that trace to the nearest trace of any
/// other class. Zero when the trace coincides with a training trace;
/// infinite when the denominator degenerates to zero.
pub fn dsa(trace: &[f64], predicted_class: usize, reference: &SAReference) -> Result<f64> {
    reference.check_class(predicted_class)?;
    if trace.len() != reference.dim {
        return Err(Error::Dimension(format!(
            "trace dim {} vs reference dim {}",
            trace.len(),
            reference.dim
        )));
    }
    let same = reference.traces_of(predicted_class);
    if same.is_empty() {
        return Err(Error::Data(format!(
            "no reference traces for class {predicted_class}"
        )));
    }
    let nearest_same = same
        .iter()
        .min_by(|a, b| {
            sq_dist(trace, a)
                .partial_cmp(&sq_dist(trace, b))
                .unwrap()
        })
        .expect("nonempty");
    let dist_a = sq_dist(trace, nearest_same).sqrt();

    let mut dist_b_sq = f64::INFINITY;
    for (c, traces) in reference.class_traces.iter().enumerate() {
        if c == predicted_class {
            continue;
        }
        for t in traces {
            dist_b_sq = dist_b_sq.min(sq_dist(nearest_same, t));
        }
    }
    if dist_b_sq.is_infinite() {
        return Err(Error::Data(
            "no reference traces for any other class".to_string(),
        ));
    }
    if dist_a == 0.0 {
        return Ok(0.0);
    }
    let dist_b = dist_b_sq.sqrt();
    if dist_b == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(dist_a / dist_b)
}

/// Scott's rule bandwidth: mean per-dimension deviation scaled by
/// `n^(-1/(d+4))`.
fn scott_bandwidth(traces: &[Vec<f64>], dim: usize) -> f64 {
    let n = traces.len();
    let mut mean = vec![0.0; dim];
    for t in traces {
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var_sum = 0.0;
    for t in traces {
        for (m, v) in mean.iter().zip(t) {
            var_sum += (v - m) * (v - m);
        }
    }
    let sigma = (var_sum / ((n - 1) as f64 * dim as f64)).sqrt();
    sigma * (n as f64).powf(-1.0 / (dim as f64 + 4.0))
}

/// Likelihood-based surprise: negative log density of the trace under a
/// Gaussian KDE over the predicted class's training traces.
pub fn lsa(trace: &[f64], predicted_class: usize, reference: &SAReference) -> Result<f64> {
    reference.check_class(predicted_class)?;
    let traces = reference.traces_of(predicted_class);
    if traces.len() < 2 {
        return Err(Error::Data(format!(
            "LSA needs at least 2 traces for class {predicted_class}, found {}",
            traces.len()
        )));
    }
    let dim = reference.dim;
    if trace.len() != dim {
        return Err(Error::Dimension(format!(
            "trace dim {} vs reference dim {dim}",
            trace.len()
        )));
    }
    let h = match reference.lsa_bandwidth {
        Some(h) => h,
        None => scott_bandwidth(traces, dim),
    };
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Numeric(format!(
            "singular LSA bandwidth {h} for class {predicted_class} \
             ({} traces, all identical?)",
            traces.len()
        )));
    }
    // -log density via log-sum-exp over the kernel exponents.
    let exponents: Vec<f64> = traces
        .iter()
        .map(|t| -sq_dist(trace, t) / (2.0 * h * h))
        .collect();
    let max = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + exponents.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
    let log_norm = (traces.len() as f64).ln()
        + dim as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln()
        + dim as f64 * h.ln();
    Ok(log_norm - lse)
}

/// Mahalanobis distance `sqrt((x - mu)^T S^-1 (x - mu))` against a given
/// inverse covariance.
pub fn mahalanobis(x: &[f64], mean: &[f64], cov_inv: &[f64]) -> f64 {
    let d = mean.len();
    let mut quad = 0.0;
    for i in 0..d {
        let di = x[i] - mean[i];
        for j in 0..d {
            quad += di * cov_inv[i * d + j] * (x[j] - mean[j]);
        }
    }
    quad.max(0.0).sqrt()
}

/// Mahalanobis-distance surprise against the predicted class's trace
/// distribution (covariance regularized with a small ridge).
pub fn mdsa(trace: &[f64], predicted_class: usize, reference: &SAReference) -> Result<f64> {
    reference.check_class(predicted_class)?;
    if trace.len() != reference.dim {
        return Err(Error::Dimension(format!(
            "trace dim {} vs reference dim {}",
            trace.len(),
            reference.dim
        )));
    }
    let mean = reference.class_means[predicted_class]
        .as_ref()
        .ok_or_else(|| {
            Error::Data(format!("no covariance for class {predicted_class}"))
        })?;
    let cov_inv = reference.class_cov_inv[predicted_class]
        .as_ref()
        .expect("mean and covariance are stored together");
    Ok(mahalanobis(trace, mean, cov_inv))
}

/// Gauss-Jordan inverse with partial pivoting.
pub(crate) fn invert_matrix(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if m[row * n + col].abs() > m[pivot * n + col].abs() {
                pivot = row;
            }
        }
        let p = m[pivot * n + col];
        if p.abs() < 1e-300 {
            return Err(Error::Numeric(format!(
                "covariance not invertible after regularization (pivot {col})"
            )));
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
                inv.swap(col * n + j, pivot * n + j);
            }
        }
        let inv_p = 1.0 / m[col * n + col];
        for j in 0..n {
            m[col * n + j] *= inv_p;
            inv[col * n + j] *= inv_p;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = m[row * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m[row * n + j] -= f * m[col * n + j];
                inv[row * n + j] -= f * inv[col * n + j];
            }
        }
    }
    Ok(inv)
}
