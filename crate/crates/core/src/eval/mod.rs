//! Evaluation harness: rankings, coverage metrics, significance testing.
//!
//! A prioritizer produces a [`Ranking`]; the harness compares its budget
//! prefixes against a [`MisclassificationOracle`] with TRC (detected
//! misclassifications over the best achievable within the budget) and APFD
//! (position-weighted detection quality), turns TRC gaps into normalized
//! improvement percentages, and tests paired TRC series with the Wilcoxon
//! signed-rank test (exact by sign enumeration up to n = 20, normal
//! approximation with continuity correction above).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered (input id, suspiciousness score) list, highest score first.
/// Ties are broken by ascending id so rankings are total and reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ranking {
    pub method: String,
    pub subject: String,
    entries: Vec<(usize, f64)>,
}

impl Ranking {
    /// Order scores descending (ties by ascending id). NaN scores are
    /// rejected; infinities are allowed ("maximally suspicious" sentinels).
    pub fn from_scores(
        method: impl Into<String>,
        subject: impl Into<String>,
        scores: Vec<(usize, f64)>,
    ) -> Result<Ranking> {
        if let Some((id, s)) = scores.iter().find(|(_, s)| s.is_nan()) {
            return Err(Error::Data(format!("NaN score for input {id}: {s}")));
        }
        let mut seen = std::collections::HashSet::new();
        for (id, _) in &scores {
            if !seen.insert(*id) {
                return Err(Error::Data(format!("duplicate input id {id}")));
            }
        }
        let mut entries = scores;
        entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        Ok(Ranking {
            method: method.into(),
            subject: subject.into(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    /// Ids of the first `b` entries.
    pub fn prefix_ids(&self, b: usize) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().take(b).map(|(id, _)| *id)
    }
}

/// Ground truth for the ranking's id space: which inputs the model under
/// test misclassifies.
#[derive(Debug, Clone)]
pub struct MisclassificationOracle {
    misclassified: Vec<bool>,
    total: usize,
}

impl MisclassificationOracle {
    /// `bits[i]` says whether input id `i` is misclassified.
    pub fn new(bits: Vec<bool>) -> MisclassificationOracle {
        let total = bits.iter().filter(|&&b| b).count();
        MisclassificationOracle {
            misclassified: bits,
            total,
        }
    }

    /// Build from predictions and ground-truth labels.
    pub fn from_predictions(predicted: &[usize], labels: &[usize]) -> Result<Self> {
        if predicted.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} predictions vs {} labels",
                predicted.len(),
                labels.len()
            )));
        }
        Ok(Self::new(
            predicted.iter().zip(labels).map(|(p, l)| p != l).collect(),
        ))
    }

    pub fn is_misclassified(&self, id: usize) -> bool {
        self.misclassified.get(id).copied().unwrap_or(false)
    }

    pub fn total_misclassified(&self) -> usize {
        self.total
    }

    pub fn len(&self) -> usize {
        self.misclassified.len()
    }

    pub fn is_empty(&self) -> bool {
        self.misclassified.is_empty()
    }
}

/// Test relative coverage of the first `b` entries:
/// detected misclassifications over `min(b, total misclassifications)`.
pub fn trc(r: &Ranking, oracle: &MisclassificationOracle, b: usize) -> Result<f64> {
    if b < 1 || b > r.len() {
        return Err(Error::Config(format!(
            "budget {b} outside 1..={}",
            r.len()
        )));
    }
    if oracle.total_misclassified() == 0 {
        return Err(Error::UndefinedMetric(
            "subject has no misclassifications; TRC is undefined".to_string(),
        ));
    }
    let detected = r.prefix_ids(b).filter(|&id| oracle.is_misclassified(id)).count();
    Ok(detected as f64 / b.min(oracle.total_misclassified()) as f64)
}

/// Average percentage of fault detection over the first `b` entries:
/// `1 - sum(o_i) / (b * mis) + 1 / (2b)` with `o_i` the 1-based positions of
/// the detected misclassifications.
pub fn apfd(r: &Ranking, oracle: &MisclassificationOracle, b: usize) -> Result<f64> {
    if b < 1 || b > r.len() {
        return Err(Error::Config(format!(
            "budget {b} outside 1..={}",
            r.len()
        )));
    }
    let mut position_sum = 0usize;
    let mut mis = 0usize;
    for (pos, id) in r.prefix_ids(b).enumerate() {
        if oracle.is_misclassified(id) {
            position_sum += pos + 1;
            mis += 1;
        }
    }
    if mis == 0 {
        return Err(Error::UndefinedMetric(
            "no misclassification in the selected prefix; APFD is undefined".to_string(),
        ));
    }
    Ok(1.0 - position_sum as f64 / (b * mis) as f64 + 1.0 / (2.0 * b as f64))
}

/// Normalized TRC improvement percentage of a candidate over a reference:
/// `(candidate - reference) / (1 - reference) * 100`, and zero by definition
/// when the reference already achieves 1.
pub fn improvement(trc_candidate: f64, trc_reference: f64) -> f64 {
    if trc_reference >= 1.0 {
        return 0.0;
    }
    (trc_candidate - trc_reference) / (1.0 - trc_reference) * 100.0
}

/// Budget fractions used throughout the experiments.
pub const DEFAULT_BUDGETS: [f64; 14] = [
    0.01, 0.03, 0.05, 0.10, 0.15, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90, 1.00,
];

/// Convert a fraction to a budget count: round half up, floor at one.
pub fn budget_count(fraction: f64, test_size: usize) -> usize {
    ((fraction * test_size as f64 + 0.5).floor() as usize).max(1)
}

/// One (fraction, count, trc, apfd) point per requested budget fraction.
/// APFD is `None` when the prefix holds no misclassification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrcCurve {
    pub points: Vec<TrcPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrcPoint {
    pub budget_fraction: f64,
    pub budget_count: usize,
    pub trc: f64,
    pub apfd: Option<f64>,
}

/// TRC (and APFD) at every fraction of the ranking's length.
pub fn trc_curve(
    r: &Ranking,
    oracle: &MisclassificationOracle,
    fractions: &[f64],
) -> Result<TrcCurve> {
    let mut points = Vec::with_capacity(fractions.len());
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("budget fraction {f} outside (0,1]")));
        }
        let b = budget_count(f, r.len());
        let t = trc(r, oracle, b)?;
        let a = match apfd(r, oracle, b) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        points.push(TrcPoint {
            budget_fraction: f,
            budget_count: b,
            trc: t,
            apfd: a,
        });
    }
    Ok(TrcCurve { points })
}

/// Which tail the Wilcoxon test examines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    TwoSided,
    /// First elements tend to be greater than the second.
    Greater,
    /// First elements tend to be smaller.
    Less,
}

/// Result of the signed-rank test.
#[derive(Debug, Clone, Copy)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences.
    pub statistic: f64,
    pub p_value: f64,
    /// Nonzero differences used by the test.
    pub n_used: usize,
    pub exact: bool,
}

/// Wilcoxon signed-rank test on paired samples, two-sided.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    let r = wilcoxon_signed_rank_with(pairs, Alternative::TwoSided)?;
    Ok((r.statistic, r.p_value))
}

/// Wilcoxon signed-rank test with an explicit alternative.
///
/// Zero differences are dropped; tied absolute differences share averaged
/// ranks. Exact p-values come from full sign enumeration for n <= 20,
/// otherwise the normal approximation with tie correction and continuity
/// correction is used.
pub fn wilcoxon_signed_rank_with(
    pairs: &[(f64, f64)],
    alternative: Alternative,
) -> Result<WilcoxonResult> {
    let diffs: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::Degenerate(
            "all differences are zero; the signed-rank test is undefined".to_string(),
        ));
    }
    let n = diffs.len();
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();

    if n <= 20 {
        let p = exact_p(&ranks, w_plus, alternative);
        Ok(WilcoxonResult {
            statistic: w_plus,
            p_value: p,
            n_used: n,
            exact: true,
        })
    } else {
        let mean = n as f64 * (n as f64 + 1.0) / 4.0;
        // Variance with tie correction: group the tied rank blocks.
        let mut tie_term = 0.0;
        let mut sorted_abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
        sorted_abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut i = 0;
        while i < sorted_abs.len() {
            let mut j = i + 1;
            while j < sorted_abs.len() && sorted_abs[j] == sorted_abs[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            tie_term += t * t * t - t;
            i = j;
        }
        let var = n as f64 * (n as f64 + 1.0) * (2.0 * n as f64 + 1.0) / 24.0 - tie_term / 48.0;
        if var <= 0.0 {
            return Err(Error::Degenerate(
                "zero variance in the signed-rank statistic".to_string(),
            ));
        }
        let sd = var.sqrt();
        // Continuity-corrected z for each tail.
        let p_greater = normal_sf((w_plus - 0.5 - mean) / sd);
        let p_less = normal_cdf((w_plus + 0.5 - mean) / sd);
        let p = match alternative {
            Alternative::Greater => p_greater,
            Alternative::Less => p_less,
            Alternative::TwoSided => (2.0 * p_greater.min(p_less)).min(1.0),
        };
        Ok(WilcoxonResult {
            statistic: w_plus,
            p_value: p,
            n_used: n,
            exact: false,
        })
    }
}

/// Exact tail probabilities by enumerating all 2^n sign assignments of the
/// rank vector.
fn exact_p(ranks: &[f64], w_plus: f64, alternative: Alternative) -> f64 {
    let n = ranks.len();
    let total = 1u64 << n;
    let mut count_ge = 0u64;
    let mut count_le = 0u64;
    let eps = 1e-9;
    for mask in 0..total {
        let mut w = 0.0;
        for (i, r) in ranks.iter().enumerate() {
            if mask & (1 << i) != 0 {
                w += r;
            }
        }
        if w >= w_plus - eps {
            count_ge += 1;
        }
        if w <= w_plus + eps {
            count_le += 1;
        }
    }
    let p_greater = count_ge as f64 / total as f64;
    let p_less = count_le as f64 / total as f64;
    match alternative {
        Alternative::Greater => p_greater,
        Alternative::Less => p_less,
        Alternative::TwoSided => (2.0 * p_greater.min(p_less)).min(1.0),
    }
}

/// Ranks with ties replaced by their average rank (1-based).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Standard normal CDF via erf.
fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn normal_sf(z: f64) -> f64 {
    1.0 - normal_cdf(z)
}

/// Abramowitz-Stegun 7.1.26 approximation, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

/// Per-(subject, budget) comparison row across methods.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub subject: String,
    pub corruption: String,
    pub budget_fraction: f64,
    pub budget_count: usize,
    /// TRC per method, keyed by method name.
    pub trc_by_method: BTreeMap<String, f64>,
    /// Best method among the baselines (everything except `focus`).
    pub second_best_method: String,
    pub second_best_trc: f64,
    pub focus_trc: f64,
    pub improvement_pct: f64,
}

/// Distribution summary of one method's TRC values over many cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrcDistribution {
    pub method: String,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Summary of an experiment: per-cell rows pitting `focus_method` against
/// the best baseline, plus per-method TRC distributions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub focus_method: String,
    pub rows: Vec<SummaryRow>,
    pub distributions: Vec<TrcDistribution>,
}

/// Inputs to [`summarize`]: one TRC curve per (subject, corruption, method).
#[derive(Debug, Clone)]
pub struct MethodCurve {
    pub subject: String,
    pub corruption: String,
    pub method: String,
    pub curve: TrcCurve,
}

/// Build comparison rows (focus method vs the best remaining baseline per
/// cell) and per-method distribution summaries. Needs at least two methods.
pub fn summarize(curves: &[MethodCurve], focus_method: &str) -> Result<Summary> {
    let mut methods: Vec<String> = curves.iter().map(|c| c.method.clone()).collect();
    methods.sort();
    methods.dedup();
    if methods.len() < 2 {
        return Err(Error::Data(format!(
            "summarize needs at least two methods, got {methods:?}"
        )));
    }
    if !methods.iter().any(|m| m == focus_method) {
        return Err(Error::Data(format!(
            "focus method '{focus_method}' not among {methods:?}"
        )));
    }

    // (subject, corruption) -> method -> curve
    let mut by_subject: BTreeMap<(String, String), BTreeMap<String, &TrcCurve>> = BTreeMap::new();
    for c in curves {
        by_subject
            .entry((c.subject.clone(), c.corruption.clone()))
            .or_default()
            .insert(c.method.clone(), &c.curve);
    }

    let mut rows = Vec::new();
    let mut per_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((subject, corruption), by_method) in &by_subject {
        let focus = by_method.get(focus_method).ok_or_else(|| {
            Error::Data(format!("subject {subject} lacks focus method {focus_method}"))
        })?;
        for (pi, fp) in focus.points.iter().enumerate() {
            let mut second_best: Option<(&str, f64)> = None;
            for (m, curve) in by_method {
                let point = curve.points.get(pi).ok_or_else(|| {
                    Error::Data(format!("method {m} misses budget index {pi}"))
                })?;
                per_method.entry(m.clone()).or_default().push(point.trc);
                if m != focus_method {
                    let better = match second_best {
                        None => true,
                        Some((_, t)) => point.trc > t,
                    };
                    if better {
                        second_best = Some((m, point.trc));
                    }
                }
            }
            let (sb_name, sb_trc) =
                second_best.expect("at least one non-focus method exists");
            rows.push(SummaryRow {
                subject: subject.clone(),
                corruption: corruption.clone(),
                budget_fraction: fp.budget_fraction,
                budget_count: fp.budget_count,
                trc_by_method: by_method
                    .iter()
                    .map(|(m, c)| (m.clone(), c.points[pi].trc))
                    .collect(),
                second_best_method: sb_name.to_string(),
                second_best_trc: sb_trc,
                focus_trc: fp.trc,
                improvement_pct: improvement(fp.trc, sb_trc),
            });
        }
    }

    let distributions = per_method
        .into_iter()
        .map(|(method, mut values)| {
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            TrcDistribution {
                method,
                n: values.len(),
                min: values[0],
                q1: quantile(&values, 0.25),
                median: quantile(&values, 0.5),
                q3: quantile(&values, 0.75),
                max: values[values.len() - 1],
            }
        })
        .collect();

    Ok(Summary {
        focus_method: focus_method.to_string(),
        rows,
        distributions,
    })
}

/// Linear-interpolation quantile of a sorted slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    }
}

#[cfg(test)]
mod tests;
