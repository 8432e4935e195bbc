//! ODIN out-of-distribution scores and threshold calibration.
//!
//! An input's score is the maximum temperature-scaled softmax probability
//! after a small gradient-sign perturbation of the input that pushes that
//! probability up. In-distribution inputs score higher. The threshold
//! separating ID from OOD is calibrated so that 95% of a held-out ID set
//! stays above it, which minimizes the false-positive rate at that fixed
//! true-positive rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::tensor::{backward, softmax_slice, GradTape, Tensor};

/// Temperature and perturbation magnitude.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OdinConfig {
    pub temperature: f64,
    pub epsilon: f64,
}

impl Default for OdinConfig {
    /// The method's canonical settings.
    fn default() -> Self {
        OdinConfig {
            temperature: 1000.0,
            epsilon: 0.0014,
        }
    }
}

impl OdinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "epsilon {} must be >= 0",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Calibrated ID/OOD decision threshold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OdinCalibration {
    pub threshold: f64,
    pub achieved_tpr: f64,
    pub achieved_fpr: f64,
}

/// The ODIN score of `x` under `m`: max softmax of `logits/T` at the
/// perturbed input. Deterministic and side-effect free; higher means more
/// in-distribution.
pub fn odin_score(m: &Classifier, x: &Tensor, cfg: &OdinConfig) -> Result<f64> {
    cfg.validate()?;
    let perturbed = if cfg.epsilon == 0.0 {
        x.clone()
    } else {
        let grad = input_gradient(m, x, cfg)?;
        let data: Vec<f64> = x
            .data()
            .iter()
            .zip(&grad)
            .map(|(&p, &g)| (p - cfg.epsilon * sign(g)).clamp(0.0, 1.0))
            .collect();
        Tensor::new(data, x.shape())?
    };
    let out = m.forward_full(&perturbed)?;
    let scaled: Vec<f64> = out
        .logits
        .data()
        .iter()
        .map(|&v| v / cfg.temperature)
        .collect();
    let probs = softmax_slice(&scaled);
    Ok(probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Gradient w.r.t. the input pixels of the temperature-scaled cross-entropy
/// at the predicted class — the quantity whose sign drives the perturbation.
pub fn input_gradient(m: &Classifier, x: &Tensor, cfg: &OdinConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if x.shape() != m.input_shape() {
        return Err(Error::Dimension(format!(
            "input shape {:?} does not match model input {:?}",
            x.shape(),
            m.input_shape()
        )));
    }
    let predicted = m.forward_full(x)?.predicted;

    let xg = x.with_grad();
    let tape = GradTape::new();
    let xt = tape.watch(&xg)?;
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(x.shape());
    let x1 = xt.reshape(&batch_shape)?;
    let (logits, _) = m.forward_batch_inner(&x1, m.params())?;
    let loss = logits
        .scale(1.0 / cfg.temperature)?
        .reshape(&[m.num_classes()])?
        .softmax_cross_entropy(predicted)?;
    backward(&loss)?;
    xg.grad()
        .ok_or_else(|| Error::State("input gradient missing after backward".to_string()))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Pick the largest threshold that keeps at least 95% of the ID scores, and
/// report the achieved rates. With ID fixed, this minimizes the FPR.
pub fn calibrate_threshold(id_scores: &[f64], ood_scores: &[f64]) -> Result<OdinCalibration> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::Data(
            "calibration needs nonempty ID and OOD score sets".to_string(),
        ));
    }
    let n = id_scores.len();
    let k = (0.95 * n as f64).ceil() as usize;
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let threshold = sorted[k - 1];
    let achieved_tpr = id_scores.iter().filter(|&&s| s >= threshold).count() as f64 / n as f64;
    let achieved_fpr =
        ood_scores.iter().filter(|&&s| s >= threshold).count() as f64 / ood_scores.len() as f64;
    Ok(OdinCalibration {
        threshold,
        achieved_tpr,
        achieved_fpr,
    })
}

/// Scores at or above the threshold count as in-distribution.
pub fn is_in_distribution(score: f64, cal: &OdinCalibration) -> bool {
    score >= cal.threshold
}

/// Label-free OOD proxy for calibration: a copy of the input with its
/// pixels shuffled, destroying all structure while keeping the intensity
/// histogram.
pub fn shuffled_pixel_proxy(x: &Tensor, seed: u64) -> Result<Tensor> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut data = x.data().to_vec();
    for i in (1..data.len()).rev() {
        let j = rng.gen_range(0..=i);
        data.swap(i, j);
    }
    Tensor::new(data, x.shape())
}
