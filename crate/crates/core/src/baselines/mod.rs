//! Baseline test prioritizers.
//!
//! Every baseline scores target test inputs so that higher means more likely
//! misclassified, and [`rank_with`] adapts any of them to a [`Ranking`]
//! (descending score, ties by ascending input id).
//!
//! The probability-based scores live here; surprise adequacy, neighbor-aware
//! scores and the deep-ensemble learned baseline live in the submodules.

mod ensemble;
mod neighbors;
mod surprise;

pub use ensemble::{ensemble_metamodel_baseline, fit_logistic2, variation_score, Logistic2};
pub use neighbors::{datis, nns_smooth, Metric, NeighborIndex};
pub use surprise::{dsa, lsa, mahalanobis, mdsa, SAReference};

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::eval::Ranking;
use crate::models::{Classifier, TrainConfig};

/// A validated softmax output: nonnegative entries summing to one.
#[derive(Debug, Clone)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Data("empty probability vector".to_string()));
        }
        if let Some(p) = probs.iter().find(|&&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
            return Err(Error::Data(format!("probability {p} outside [0,1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(ProbabilityVector(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Gini impurity of the prediction: `1 - sum(p_i^2)`, in `[0, 1 - 1/C]`.
pub fn gini(p: &ProbabilityVector) -> f64 {
    1.0 - p.probs().iter().map(|v| v * v).sum::<f64>()
}

/// Vanilla softmax uncertainty: `1 - max(p_i)`, in `[0, 1 - 1/C]`.
pub fn vanilla(p: &ProbabilityVector) -> f64 {
    1.0 - p.probs().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// One minus the margin between the two most probable classes, so that
/// higher means more suspicious. Needs at least two classes.
pub fn margin_suspiciousness(p: &ProbabilityVector) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::Config(
            "margin needs at least two classes".to_string(),
        ));
    }
    let mut top = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in p.probs() {
        if v > top {
            second = top;
            top = v;
        } else if v > second {
            second = v;
        }
    }
    Ok(1.0 - (top - second))
}

/// The baseline prioritizers this module can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Gini,
    Vanilla,
    Margin,
    Dsa,
    Lsa,
    Mdsa,
    Nns,
    Datis,
    Ensemble,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 9] = [
        BaselineMethod::Gini,
        BaselineMethod::Vanilla,
        BaselineMethod::Margin,
        BaselineMethod::Dsa,
        BaselineMethod::Lsa,
        BaselineMethod::Mdsa,
        BaselineMethod::Nns,
        BaselineMethod::Datis,
        BaselineMethod::Ensemble,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::Gini => "gini",
            BaselineMethod::Vanilla => "vanilla",
            BaselineMethod::Margin => "margin",
            BaselineMethod::Dsa => "dsa",
            BaselineMethod::Lsa => "lsa",
            BaselineMethod::Mdsa => "mdsa",
            BaselineMethod::Nns => "nns",
            BaselineMethod::Datis => "datis",
            BaselineMethod::Ensemble => "ensemble",
        }
    }
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline '{s}'")))
    }
}

/// Neighbor-smoothing parameters (defaults: k=10, alpha=0.5, euclidean).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NnsConfig {
    pub k: usize,
    pub alpha: f64,
    pub metric: Metric,
}

impl Default for NnsConfig {
    fn default() -> Self {
        NnsConfig {
            k: 10,
            alpha: 0.5,
            metric: Metric::Euclidean,
        }
    }
}

/// Distance-aware support parameters (defaults: k=10, tau=1).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DatisConfig {
    pub k: usize,
    pub tau: f64,
}

impl Default for DatisConfig {
    fn default() -> Self {
        DatisConfig { k: 10, tau: 1.0 }
    }
}

/// Surprise-adequacy parameters. `lsa_bandwidth = None` selects Scott's rule
/// per class.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SaConfig {
    pub lsa_bandwidth: Option<f64>,
}

/// Deep-ensemble baseline parameters (the paper's setting trains five).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_ensembles: usize,
    pub train: TrainConfig,
}

/// Everything a baseline may need. The model under test is the fine-tuned
/// model; the labeled target training set serves as the reference set for
/// surprise adequacy, neighbor labels, and the ensemble's logistic layer.
pub struct BaselineContext<'a> {
    pub subject: &'a str,
    pub m_t: &'a Classifier,
    pub target_train: &'a Dataset,
    pub target_test: &'a Dataset,
    pub nns: NnsConfig,
    pub datis: DatisConfig,
    pub sa: SaConfig,
    pub ensemble: EnsembleConfig,
    pub seed: u64,
}

/// Run one baseline end to end and produce its ranking of the target test
/// set. Scores are descending; ties break by ascending input id.
pub fn rank_with(method: BaselineMethod, ctx: &BaselineContext) -> Result<Ranking> {
    let scores = match method {
        BaselineMethod::Gini => probability_scores(ctx, |p| Ok(gini(p)))?,
        BaselineMethod::Vanilla => probability_scores(ctx, |p| Ok(vanilla(p)))?,
        BaselineMethod::Margin => probability_scores(ctx, margin_suspiciousness)?,
        BaselineMethod::Dsa | BaselineMethod::Lsa | BaselineMethod::Mdsa => {
            let reference = SAReference::build(ctx.m_t, ctx.target_train, ctx.sa.lsa_bandwidth)?;
            let mut scores = Vec::with_capacity(ctx.target_test.len());
            for i in 0..ctx.target_test.len() {
                let out = ctx.m_t.forward_full(ctx.target_test.input(i))?;
                let trace = out.trace.data();
                let s = match method {
                    BaselineMethod::Dsa => dsa(trace, out.predicted, &reference)?,
                    BaselineMethod::Lsa => lsa(trace, out.predicted, &reference)?,
                    _ => mdsa(trace, out.predicted, &reference)?,
                };
                scores.push((i, s));
            }
            scores
        }
        BaselineMethod::Nns => {
            // Smooth each test prediction with its neighbors in the test set
            // (latent representations), then score the smoothed distribution.
            let n = ctx.target_test.len();
            let mut probs = Vec::with_capacity(n);
            let mut latents = Vec::with_capacity(n);
            for i in 0..n {
                let out = ctx.m_t.forward_full(ctx.target_test.input(i))?;
                probs.push(ProbabilityVector::new(out.probs.data().to_vec())?);
                latents.push(out.trace.data().to_vec());
            }
            let k = ctx.nns.k.min(n.saturating_sub(1)).max(1);
            let index = NeighborIndex::new(latents.clone(), ctx.nns.metric, k)?;
            let mut scores = Vec::with_capacity(n);
            for i in 0..n {
                let neighbors: Vec<ProbabilityVector> = index
                    .nearest(&latents[i], Some(i))
                    .into_iter()
                    .map(|(j, _)| probs[j].clone())
                    .collect();
                let smoothed = nns_smooth(&probs[i], &neighbors, ctx.nns.alpha)?;
                scores.push((i, gini(&smoothed)));
            }
            scores
        }
        BaselineMethod::Datis => {
            let train_n = ctx.target_train.len();
            let mut train_latents = Vec::with_capacity(train_n);
            for i in 0..train_n {
                let out = ctx.m_t.forward_full(ctx.target_train.input(i))?;
                train_latents.push(out.trace.data().to_vec());
            }
            let k = ctx.datis.k.min(train_n).max(1);
            let index = NeighborIndex::new(train_latents.clone(), Metric::Euclidean, k)?;
            let mut scores = Vec::with_capacity(ctx.target_test.len());
            for i in 0..ctx.target_test.len() {
                let out = ctx.m_t.forward_full(ctx.target_test.input(i))?;
                let z = out.trace.data();
                let picked = index.nearest(z, None);
                let latents: Vec<&[f64]> = picked
                    .iter()
                    .map(|(j, _)| train_latents[*j].as_slice())
                    .collect();
                let labels: Vec<usize> = picked
                    .iter()
                    .map(|(j, _)| ctx.target_train.label(*j))
                    .collect();
                let s = datis(
                    z,
                    out.predicted,
                    &latents,
                    &labels,
                    ctx.m_t.num_classes(),
                    ctx.datis.tau,
                )?;
                scores.push((i, s));
            }
            scores
        }
        BaselineMethod::Ensemble => {
            return ensemble_metamodel_baseline(
                ctx.m_t,
                ctx.target_train,
                ctx.target_test,
                ctx.ensemble.n_ensembles,
                &ctx.ensemble.train,
                ctx.seed,
                ctx.subject,
            )
        }
    };
    Ranking::from_scores(method.name(), ctx.subject, scores)
}

fn probability_scores(
    ctx: &BaselineContext,
    score: impl Fn(&ProbabilityVector) -> Result<f64>,
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(ctx.target_test.len());
    for i in 0..ctx.target_test.len() {
        let probs = ctx.m_t.forward_full(ctx.target_test.input(i))?.probs;
        let p = ProbabilityVector::new(probs.data().to_vec())?;
        out.push((i, score(&p)?));
    }
    Ok(out)
}
