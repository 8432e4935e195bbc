//! Learned baseline built from deep-ensemble disagreement.
//!
//! Trains a handful of same-architecture models with distinct seeds, counts
//! how many of them disagree with the model under test per input, and fits a
//! two-feature logistic regression (model uncertainty, disagreement count)
//! on the labeled target training set to predict misclassification.

use crate::datagen::Dataset;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::eval::Ranking;
use crate::models::{train, Classifier, TrainConfig};

use super::{gini, ProbabilityVector};

/// How many ensemble members predict a different class than the model under
/// test did.
pub fn variation_score(mut_prediction: usize, ensemble_predictions: &[usize]) -> usize {
    ensemble_predictions
        .iter()
        .filter(|&&p| p != mut_prediction)
        .count()
}

/// Two-feature logistic regression with internal standardization.
#[derive(Debug, Clone)]
pub struct Logistic2 {
    w: [f64; 2],
    b: f64,
    mean: [f64; 2],
    std: [f64; 2],
}

impl Logistic2 {
    pub fn predict_proba(&self, x: [f64; 2]) -> f64 {
        let z0 = (x[0] - self.mean[0]) / self.std[0];
        let z1 = (x[1] - self.mean[1]) / self.std[1];
        let z = self.w[0] * z0 + self.w[1] * z1 + self.b;
        1.0 / (1.0 + (-z).exp())
    }
}

/// Fit by full-batch gradient descent on the log-loss; deterministic.
/// Requires both labels present.
pub fn fit_logistic2(features: &[[f64; 2]], labels: &[u8]) -> Result<Logistic2> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Data(format!(
            "{} feature rows vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Data(
            "logistic training data has a single class".to_string(),
        ));
    }

    let n = features.len() as f64;
    let mut mean = [0.0; 2];
    for f in features {
        mean[0] += f[0];
        mean[1] += f[1];
    }
    mean[0] /= n;
    mean[1] /= n;
    let mut var = [0.0; 2];
    for f in features {
        var[0] += (f[0] - mean[0]).powi(2);
        var[1] += (f[1] - mean[1]).powi(2);
    }
    let std = [
        (var[0] / n).sqrt().max(1e-9),
        (var[1] / n).sqrt().max(1e-9),
    ];

    let standardized: Vec<[f64; 2]> = features
        .iter()
        .map(|f| [(f[0] - mean[0]) / std[0], (f[1] - mean[1]) / std[1]])
        .collect();

    let mut w = [0.0f64; 2];
    let mut b = 0.0f64;
    let lr = 0.5;
    for _ in 0..2000 {
        let mut gw = [0.0f64; 2];
        let mut gb = 0.0f64;
        for (x, &y) in standardized.iter().zip(labels) {
            let z = w[0] * x[0] + w[1] * x[1] + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - y as f64;
            gw[0] += err * x[0];
            gw[1] += err * x[1];
            gb += err;
        }
        w[0] -= lr * gw[0] / n;
        w[1] -= lr * gw[1] / n;
        b -= lr * gb / n;
    }
    Ok(Logistic2 { w, b, mean, std })
}

/// The deep-ensemble learned baseline, end to end.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_metamodel_baseline(
    mut_model: &Classifier,
    target_train: &Dataset,
    target_test: &Dataset,
    n_ensembles: usize,
    train_cfg: &TrainConfig,
    seed: u64,
    subject: &str,
) -> Result<Ranking> {
    if n_ensembles == 0 {
        return Err(Error::Config("need at least one ensemble model".to_string()));
    }
    if target_train.is_empty() {
        return Err(Error::Data("empty target training set".to_string()));
    }

    let mut members = Vec::with_capacity(n_ensembles);
    for i in 0..n_ensembles {
        let mut cfg = train_cfg.clone();
        cfg.seed = derive_seed(seed, "ensemble-member", i as u64);
        members.push(train(mut_model.arch(), target_train, &cfg)?);
    }

    // (gini, variation count) per input of both sets.
    let featurize = |d: &Dataset| -> Result<(Vec<[f64; 2]>, Vec<usize>)> {
        let mut_preds = mut_model.predict_dataset(d)?;
        let member_preds: Vec<Vec<usize>> = members
            .iter()
            .map(|m| m.predict_dataset(d))
            .collect::<Result<_>>()?;
        let mut feats = Vec::with_capacity(d.len());
        for i in 0..d.len() {
            let probs = mut_model.forward_full(d.input(i))?.probs;
            let g = gini(&ProbabilityVector::new(probs.data().to_vec())?);
            let member_votes: Vec<usize> = member_preds.iter().map(|p| p[i]).collect();
            let v = variation_score(mut_preds[i], &member_votes) as f64;
            feats.push([g, v]);
        }
        Ok((feats, mut_preds))
    };

    let (train_feats, train_preds) = featurize(target_train)?;
    let labels: Vec<u8> = train_preds
        .iter()
        .zip(target_train.labels())
        .map(|(p, l)| u8::from(p != l))
        .collect();
    let logistic = fit_logistic2(&train_feats, &labels)?;

    let (test_feats, _) = featurize(target_test)?;
    let scores: Vec<(usize, f64)> = test_feats
        .iter()
        .enumerate()
        .map(|(i, &f)| (i, logistic.predict_proba(f)))
        .collect();
    Ranking::from_scores("ensemble", subject, scores)
}
