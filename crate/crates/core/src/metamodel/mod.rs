//! The learned misclassification-probability estimator.
//!
//! Feature records from the paired models are mapped to a probability that
//! the fine-tuned model misclassifies the input. The estimator is a small
//! network: a 1-D convolution over the (up to three) logit channels, whose
//! flattened output joins the scalar features in two fully connected layers
//! ending in a single sigmoid output.
//!
//! Its training set is the full target training set plus those source test
//! inputs whose target-model ODIN score clears the calibrated ID threshold.
//! Ablation variants drop feature groups; every variant trains and scores
//! through the same code path with a feature mask.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::eval::Ranking;
use crate::features::{extract_batch, FeatureRecord};
use crate::models::Classifier;
use crate::odin::{OdinCalibration, OdinConfig};
use crate::tensor::{backward, GradTape, Sgd, Tensor};

pub use crate::models::TrainConfig;

/// The six feature groups a record carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    LogitsSource,
    LogitsTarget,
    LogitAbsDiff,
    DiffTest,
    OdinSource,
    OdinTarget,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 6] = [
        FeatureGroup::LogitsSource,
        FeatureGroup::LogitsTarget,
        FeatureGroup::LogitAbsDiff,
        FeatureGroup::DiffTest,
        FeatureGroup::OdinSource,
        FeatureGroup::OdinTarget,
    ];

    /// Width of the group in the flat feature vector.
    pub fn width(&self, num_classes: usize) -> usize {
        match self {
            FeatureGroup::LogitsSource
            | FeatureGroup::LogitsTarget
            | FeatureGroup::LogitAbsDiff => num_classes,
            _ => 1,
        }
    }

    fn is_channel(&self) -> bool {
        matches!(
            self,
            FeatureGroup::LogitsSource | FeatureGroup::LogitsTarget | FeatureGroup::LogitAbsDiff
        )
    }
}

/// Which feature groups are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMask {
    active: [bool; 6],
}

impl FeatureMask {
    pub fn full() -> Self {
        FeatureMask { active: [true; 6] }
    }

    pub fn without(groups: &[FeatureGroup]) -> Self {
        let mut mask = FeatureMask::full();
        for g in groups {
            mask.active[*g as usize] = false;
        }
        mask
    }

    pub fn is_active(&self, g: FeatureGroup) -> bool {
        self.active[g as usize]
    }

    pub fn active_groups(&self) -> Vec<FeatureGroup> {
        FeatureGroup::ALL
            .into_iter()
            .filter(|g| self.is_active(*g))
            .collect()
    }

    /// Active logit channels, in canonical order.
    pub fn channels(&self) -> Vec<FeatureGroup> {
        self.active_groups()
            .into_iter()
            .filter(|g| g.is_channel())
            .collect()
    }

    /// Active scalar features, in canonical order.
    pub fn scalars(&self) -> Vec<FeatureGroup> {
        self.active_groups()
            .into_iter()
            .filter(|g| !g.is_channel())
            .collect()
    }

    /// Flat input width under this mask.
    pub fn input_width(&self, num_classes: usize) -> usize {
        self.active_groups()
            .iter()
            .map(|g| g.width(num_classes))
            .sum()
    }
}

/// The estimator and its seven ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
    V7,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 8] = [
        AblationVariant::Full,
        AblationVariant::V1,
        AblationVariant::V2,
        AblationVariant::V3,
        AblationVariant::V4,
        AblationVariant::V5,
        AblationVariant::V6,
        AblationVariant::V7,
    ];

    /// Feature groups the variant drops.
    pub fn excluded_groups(&self) -> &'static [FeatureGroup] {
        use FeatureGroup::*;
        match self {
            AblationVariant::Full => &[],
            AblationVariant::V1 => &[LogitAbsDiff],
            AblationVariant::V2 => &[DiffTest],
            AblationVariant::V3 => &[OdinSource],
            AblationVariant::V4 => &[OdinSource, OdinTarget],
            AblationVariant::V5 => &[LogitsSource, LogitAbsDiff],
            AblationVariant::V6 => &[LogitsSource, LogitsTarget, LogitAbsDiff],
            // Only target-model information: keeps L_T and ODIN_T.
            AblationVariant::V7 => &[LogitsSource, LogitAbsDiff, DiffTest, OdinSource],
        }
    }

    pub fn mask(&self) -> FeatureMask {
        FeatureMask::without(self.excluded_groups())
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::V1 => "v1",
            AblationVariant::V2 => "v2",
            AblationVariant::V3 => "v3",
            AblationVariant::V4 => "v4",
            AblationVariant::V5 => "v5",
            AblationVariant::V6 => "v6",
            AblationVariant::V7 => "v7",
        }
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant '{s}'")))
    }
}

/// Network shape; the defaults are the smallest faithful instantiation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetaNetShape {
    pub conv_filters: usize,
    pub kernel_width: usize,
    pub hidden: usize,
}

impl Default for MetaNetShape {
    fn default() -> Self {
        MetaNetShape {
            conv_filters: 8,
            kernel_width: 3,
            hidden: 32,
        }
    }
}

/// Per-channel standardization statistics (mean 0, std 1 over the training
/// records).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Trained estimator: masked feature normalization plus network weights.
pub struct MetaModel {
    variant: AblationVariant,
    mask: FeatureMask,
    num_classes: usize,
    shape: MetaNetShape,
    /// Effective convolution width (shape.kernel_width capped at C).
    kernel_width: usize,
    /// Stats per active channel, in canonical group order.
    norm: Vec<ChannelStats>,
    params: Vec<Tensor>,
    /// Best early-stopping validation loss seen while training.
    val_loss: Option<f64>,
    /// Misclassification precision in the top decile of the internal
    /// validation split, under the best parameters.
    val_top_precision: Option<f64>,
    /// Provenance stored in the sidecar.
    odin_cfg: OdinConfig,
    odin_threshold: Option<f64>,
}

const PATIENCE: usize = 10;

impl MetaModel {
    pub fn variant(&self) -> AblationVariant {
        self.variant
    }

    pub fn mask(&self) -> &FeatureMask {
        &self.mask
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Flat input width consumed by the network.
    pub fn input_width(&self) -> usize {
        self.mask.input_width(self.num_classes)
    }

    /// Best early-stopping validation loss observed during training.
    pub fn validation_loss(&self) -> Option<f64> {
        self.val_loss
    }

    /// Fraction of true misclassifications in the top decile of the
    /// internal validation ranking.
    pub fn validation_top_precision(&self) -> Option<f64> {
        self.val_top_precision
    }

    /// Parameter layout for the current mask:
    /// `[conv_w, conv_b, w_chan]?, [w_scal]?, b1, w2, b2`.
    fn param_layout(
        mask: &FeatureMask,
        num_classes: usize,
        shape: &MetaNetShape,
        kernel_width: usize,
    ) -> Vec<Vec<usize>> {
        let n_ch = mask.channels().len();
        let n_sc = mask.scalars().len();
        let mut layout = Vec::new();
        if n_ch > 0 {
            let conv_out = shape.conv_filters * (num_classes - kernel_width + 1);
            layout.push(vec![shape.conv_filters, n_ch, kernel_width]);
            layout.push(vec![shape.conv_filters]);
            layout.push(vec![conv_out, shape.hidden]);
        }
        if n_sc > 0 {
            layout.push(vec![n_sc, shape.hidden]);
        }
        layout.push(vec![shape.hidden]);
        layout.push(vec![shape.hidden, 1]);
        layout.push(vec![1]);
        layout
    }

    /// Forward `[b]` logits for preprocessed feature matrices.
    fn forward(
        &self,
        params: &[Tensor],
        channels: Option<&Tensor>,
        scalars: Option<&Tensor>,
        batch: usize,
    ) -> Result<Tensor> {
        let mut p = 0;
        let mut hidden_pre: Option<Tensor> = None;
        if let Some(ch) = channels {
            let conv = ch.conv1d(&params[p])?;
            let conv = conv.add_channel_bias(&params[p + 1], true)?;
            let act = conv.relu()?;
            let flat: usize = act.shape()[1..].iter().product();
            let flat_t = act.reshape(&[batch, flat])?;
            hidden_pre = Some(flat_t.matmul(&params[p + 2])?);
            p += 3;
        }
        if let Some(sc) = scalars {
            let part = sc.matmul(&params[p])?;
            p += 1;
            hidden_pre = Some(match hidden_pre {
                Some(h) => h.add(&part)?,
                None => part,
            });
        }
        let pre = hidden_pre.ok_or_else(|| {
            Error::Config("feature mask leaves the network without inputs".to_string())
        })?;
        let h = pre.add_row_bias(&params[p])?.relu()?;
        let logit = h.matmul(&params[p + 1])?.add_row_bias(&params[p + 2])?;
        logit.reshape(&[batch])
    }

    /// Misclassification probability for one record.
    pub fn score(&self, record: &FeatureRecord) -> Result<f64> {
        Ok(self.score_batch(std::slice::from_ref(record))?[0])
    }

    /// Misclassification probabilities for many records; order preserved and
    /// independent of batch composition.
    pub fn score_batch(&self, records: &[FeatureRecord]) -> Result<Vec<f64>> {
        if records.is_empty() {
            return Ok(Vec::new());
        }
        let (channels, scalars) = self.featurize(records)?;
        let logits = self.forward(
            &self.params,
            channels.as_ref(),
            scalars.as_ref(),
            records.len(),
        )?;
        Ok(logits.sigmoid()?.data().to_vec())
    }

    /// Normalized channel tensor `[b, n_ch, c]` and scalar matrix `[b, s]`.
    fn featurize(&self, records: &[FeatureRecord]) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let c = self.num_classes;
        for r in records {
            if r.num_classes() != c {
                return Err(Error::Config(format!(
                    "record {} carries {} classes, model expects {c}",
                    r.input_id,
                    r.num_classes()
                )));
            }
        }
        let chans = self.mask.channels();
        let scals = self.mask.scalars();
        let b = records.len();

        let channels = if chans.is_empty() {
            None
        } else {
            let mut data = Vec::with_capacity(b * chans.len() * c);
            for r in records {
                for (gi, g) in chans.iter().enumerate() {
                    let stats = &self.norm[gi];
                    for v in group_channel(r, *g) {
                        data.push((v - stats.mean) / stats.std);
                    }
                }
            }
            Some(Tensor::new(data, &[b, chans.len(), c])?)
        };
        let scalars = if scals.is_empty() {
            None
        } else {
            let mut data = Vec::with_capacity(b * scals.len());
            for r in records {
                for g in &scals {
                    data.push(group_scalar(r, *g));
                }
            }
            Some(Tensor::new(data, &[b, scals.len()])?)
        };
        Ok((channels, scalars))
    }

    /// Persist the weights (binary) and a JSON sidecar at `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(META_MAGIC);
        buf.extend_from_slice(&META_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
            for &d in p.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;

        let sidecar = MetaSidecar {
            variant: self.variant,
            active_groups: self.mask.active_groups(),
            num_classes: self.num_classes,
            shape: self.shape,
            kernel_width: self.kernel_width,
            normalization: self.norm.clone(),
            validation_loss: self.val_loss,
            validation_top_precision: self.val_top_precision,
            odin: self.odin_cfg,
            odin_threshold: self.odin_threshold,
        };
        fs::write(
            sidecar_path(path),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    /// Load a model saved by [`MetaModel::save`].
    pub fn load(path: &Path) -> Result<MetaModel> {
        let sidecar: MetaSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        let bytes = fs::read(path)?;
        if bytes.len() < 12 {
            return Err(Error::format(bytes.len() as u64, "weights file truncated"));
        }
        if &bytes[0..4] != META_MAGIC {
            return Err(Error::format(0, "bad magic, expected MSEL"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != META_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported weights version {version}"),
            ));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut pos = 12;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            if pos + 4 > bytes.len() {
                return Err(Error::format(pos as u64, "weights file truncated"));
            }
            let rank = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                if pos + 4 > bytes.len() {
                    return Err(Error::format(pos as u64, "weights file truncated"));
                }
                shape.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize);
                pos += 4;
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                if pos + 8 > bytes.len() {
                    return Err(Error::format(pos as u64, "weights file truncated"));
                }
                data.push(f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()));
                pos += 8;
            }
            params.push(Tensor::param(data, &shape));
        }
        if pos != bytes.len() {
            return Err(Error::format(
                pos as u64,
                format!("{} trailing bytes", bytes.len() - pos),
            ));
        }

        let mask = FeatureMask::without(
            &FeatureGroup::ALL
                .into_iter()
                .filter(|g| !sidecar.active_groups.contains(g))
                .collect::<Vec<_>>(),
        );
        let expected =
            MetaModel::param_layout(&mask, sidecar.num_classes, &sidecar.shape, sidecar.kernel_width);
        if expected.len() != params.len()
            || expected
                .iter()
                .zip(&params)
                .any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::format(
                12,
                "weights do not match the sidecar's architecture".to_string(),
            ));
        }
        Ok(MetaModel {
            variant: sidecar.variant,
            mask,
            num_classes: sidecar.num_classes,
            shape: sidecar.shape,
            kernel_width: sidecar.kernel_width,
            norm: sidecar.normalization,
            params,
            val_loss: sidecar.validation_loss,
            val_top_precision: sidecar.validation_top_precision,
            odin_cfg: sidecar.odin,
            odin_threshold: sidecar.odin_threshold,
        })
    }
}

const META_MAGIC: &[u8; 4] = b"MSEL";
const META_VERSION: u32 = 1;

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct MetaSidecar {
    variant: AblationVariant,
    active_groups: Vec<FeatureGroup>,
    num_classes: usize,
    shape: MetaNetShape,
    kernel_width: usize,
    normalization: Vec<ChannelStats>,
    #[serde(default)]
    validation_loss: Option<f64>,
    #[serde(default)]
    validation_top_precision: Option<f64>,
    odin: OdinConfig,
    odin_threshold: Option<f64>,
}

fn group_channel(r: &FeatureRecord, g: FeatureGroup) -> &[f64] {
    match g {
        FeatureGroup::LogitsSource => &r.logits_source,
        FeatureGroup::LogitsTarget => &r.logits_target,
        FeatureGroup::LogitAbsDiff => &r.logit_abs_diff,
        _ => unreachable!("scalar group"),
    }
}

fn group_scalar(r: &FeatureRecord, g: FeatureGroup) -> f64 {
    match g {
        FeatureGroup::DiffTest => r.diff_test as f64,
        FeatureGroup::OdinSource => r.odin_source,
        FeatureGroup::OdinTarget => r.odin_target,
        _ => unreachable!("channel group"),
    }
}

/// Records for the whole target training set plus the source test inputs
/// whose target-model ODIN score is at or above the calibrated threshold
/// (strictly lower scores are out-of-distribution and dropped).
pub fn build_training_set(
    train_t: &Dataset,
    test_s: &Dataset,
    m_s: &Classifier,
    m_t: &Classifier,
    odin_cfg: &OdinConfig,
    cal: &OdinCalibration,
) -> Result<Vec<FeatureRecord>> {
    let mut records = extract_batch(m_s, m_t, train_t, odin_cfg)?;
    let source_records = extract_batch(m_s, m_t, test_s, odin_cfg)?;
    records.extend(
        source_records
            .into_iter()
            .filter(|r| r.odin_target >= cal.threshold),
    );
    if records.is_empty() {
        return Err(Error::Data(
            "training-set construction produced no records".to_string(),
        ));
    }
    Ok(records)
}

/// Train the estimator on labeled records.
///
/// Minimizes class-weighted binary cross-entropy with minibatch SGD; an
/// internal seeded 80/20 split drives early stopping on validation loss
/// (patience 10, `cfg.epochs` as the cap). Deterministic per seed.
pub fn train_metamodel(
    records: &[FeatureRecord],
    variant: AblationVariant,
    cfg: &TrainConfig,
) -> Result<MetaModel> {
    train_metamodel_shaped(records, variant, cfg, MetaNetShape::default(), None, None)
}

/// [`train_metamodel`] with an explicit network shape and ODIN provenance
/// for the sidecar.
pub fn train_metamodel_shaped(
    records: &[FeatureRecord],
    variant: AblationVariant,
    cfg: &TrainConfig,
    shape: MetaNetShape,
    odin_cfg: Option<OdinConfig>,
    odin_threshold: Option<f64>,
) -> Result<MetaModel> {
    cfg.validate()?;
    if shape.conv_filters == 0 || shape.kernel_width == 0 || shape.hidden == 0 {
        return Err(Error::Config("network shape fields must be >= 1".to_string()));
    }
    if records.is_empty() {
        return Err(Error::Data("no training records".to_string()));
    }
    let c = records[0].num_classes();
    let labels: Vec<f64> = records
        .iter()
        .map(|r| {
            r.label
                .map(|l| l as f64)
                .ok_or_else(|| Error::Data(format!("record {} is unlabeled", r.input_id)))
        })
        .collect::<Result<_>>()?;
    let positives = labels.iter().filter(|&&l| l == 1.0).count();
    if positives == 0 || positives == records.len() {
        return Err(Error::Data(format!(
            "training records hold a single class ({positives} of {} positive)",
            records.len()
        )));
    }

    let mask = variant.mask();
    let kernel_width = shape.kernel_width.min(c);

    // Standardization statistics per active channel over all records.
    let norm: Vec<ChannelStats> = mask
        .channels()
        .iter()
        .map(|g| {
            let mut values = Vec::with_capacity(records.len() * c);
            for r in records {
                values.extend_from_slice(group_channel(r, *g));
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            ChannelStats {
                mean,
                std: var.sqrt().max(1e-8),
            }
        })
        .collect();

    let mut model = MetaModel {
        variant,
        mask,
        num_classes: c,
        shape,
        kernel_width,
        norm,
        params: init_params(&mask, c, &shape, kernel_width, cfg.seed),
        val_loss: None,
        val_top_precision: None,
        odin_cfg: odin_cfg.unwrap_or_default(),
        odin_threshold,
    };

    // Inverse-frequency class weights.
    let n = records.len() as f64;
    let w_pos = n / (2.0 * positives as f64);
    let w_neg = n / (2.0 * (records.len() - positives) as f64);
    let weight_of = |l: f64| if l == 1.0 { w_pos } else { w_neg };

    // Seeded, label-stratified 80/20 split for early stopping: both classes
    // appear in the validation part whenever possible, which keeps the
    // early-stopping loss from being a pure base-rate read.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "meta-val", 0));
    let mut pos_idx: Vec<usize> = (0..records.len()).filter(|&i| labels[i] == 1.0).collect();
    let mut neg_idx: Vec<usize> = (0..records.len()).filter(|&i| labels[i] == 0.0).collect();
    shuffle(&mut pos_idx, &mut rng);
    shuffle(&mut neg_idx, &mut rng);
    let mut val_idx: Vec<usize> = Vec::new();
    let mut train_idx: Vec<usize> = Vec::new();
    for class_idx in [pos_idx, neg_idx] {
        let take = (class_idx.len() / 5).max(1).min(class_idx.len() - 1).max(
            usize::from(class_idx.len() > 1),
        );
        val_idx.extend_from_slice(&class_idx[..take]);
        train_idx.extend_from_slice(&class_idx[take..]);
    }
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let (val_idx, train_idx) = (val_idx.as_slice(), train_idx.as_slice());

    let gather = |idx: &[usize]| -> (Vec<FeatureRecord>, Vec<f64>, Vec<f64>) {
        let recs: Vec<FeatureRecord> = idx.iter().map(|&i| records[i].clone()).collect();
        let ls: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
        let ws: Vec<f64> = ls.iter().map(|&l| weight_of(l)).collect();
        (recs, ls, ws)
    };
    let (val_recs, val_labels, val_weights) = gather(val_idx);
    let (train_recs, train_labels, train_weights) = gather(train_idx);

    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum)?;
    let mut best_loss = f64::INFINITY;
    let mut best_params: Option<Vec<Tensor>> = None;
    let mut patience = PATIENCE;
    let mut batch_order: Vec<usize> = (0..train_recs.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "meta-epoch", epoch as u64));
        shuffle(&mut batch_order, &mut rng);
        for chunk in batch_order.chunks(cfg.batch_size) {
            let recs: Vec<FeatureRecord> =
                chunk.iter().map(|&i| train_recs[i].clone()).collect();
            let ls: Vec<f64> = chunk.iter().map(|&i| train_labels[i]).collect();
            let ws: Vec<f64> = chunk.iter().map(|&i| train_weights[i]).collect();
            let (channels, scalars) = model.featurize(&recs)?;

            let tape = GradTape::new();
            let taped: Vec<Tensor> = model
                .params
                .iter()
                .map(|p| tape.watch(p))
                .collect::<Result<_>>()?;
            let logits = model.forward(&taped, channels.as_ref(), scalars.as_ref(), recs.len())?;
            let loss = logits.sigmoid_bce_with_logits(&ls, &ws)?;
            backward(&loss)?;
            opt.step(&mut model.params)?;
        }

        let val_loss = weighted_bce(&model, &val_recs, &val_labels, &val_weights)?;
        if val_loss < best_loss - 1e-12 {
            best_loss = val_loss;
            best_params = Some(model.params.clone());
            patience = PATIENCE;
        } else {
            patience -= 1;
            if patience == 0 {
                break;
            }
        }
    }
    if let Some(best) = best_params {
        model.params = best;
    }
    model.val_loss = Some(best_loss);

    // Top-decile precision of the final model on the validation part.
    let val_scores = model.score_batch(&val_recs)?;
    let mut order: Vec<usize> = (0..val_scores.len()).collect();
    order.sort_by(|&a, &b| {
        val_scores[b]
            .partial_cmp(&val_scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let k = (val_scores.len() / 10).max(1);
    let hits = order
        .iter()
        .take(k)
        .filter(|&&i| val_labels[i] == 1.0)
        .count();
    model.val_top_precision = Some(hits as f64 / k as f64);
    Ok(model)
}

/// Deterministic multi-start: train `starts` estimators from derived seeds
/// and keep the one with the lowest early-stopping validation loss (ties go
/// to the earliest start).
pub fn train_metamodel_multistart(
    records: &[FeatureRecord],
    variant: AblationVariant,
    cfg: &TrainConfig,
    shape: MetaNetShape,
    odin_cfg: Option<OdinConfig>,
    odin_threshold: Option<f64>,
    starts: usize,
) -> Result<MetaModel> {
    if starts == 0 {
        return Err(Error::Config("multi-start needs starts >= 1".to_string()));
    }
    let mut best: Option<MetaModel> = None;
    for i in 0..starts {
        let sub = TrainConfig {
            seed: derive_seed(cfg.seed, "meta-start", i as u64),
            ..cfg.clone()
        };
        let candidate =
            train_metamodel_shaped(records, variant, &sub, shape, odin_cfg, odin_threshold)?;
        let better = match &best {
            None => true,
            Some(current) => {
                // Primary: top-decile precision on the validation split
                // (what tight selection budgets reward); secondary: loss.
                let cp = current.val_top_precision.unwrap_or(0.0);
                let np = candidate.val_top_precision.unwrap_or(0.0);
                if np != cp {
                    np > cp
                } else {
                    candidate.val_loss.unwrap_or(f64::INFINITY)
                        < current.val_loss.unwrap_or(f64::INFINITY)
                }
            }
        };
        if better {
            best = Some(candidate);
        }
    }
    Ok(best.expect("at least one start"))
}

fn weighted_bce(
    model: &MetaModel,
    recs: &[FeatureRecord],
    labels: &[f64],
    weights: &[f64],
) -> Result<f64> {
    let (channels, scalars) = model.featurize(recs)?;
    let logits = model.forward(&model.params, channels.as_ref(), scalars.as_ref(), recs.len())?;
    logits.sigmoid_bce_with_logits(labels, weights)?.item()
}

fn init_params(
    mask: &FeatureMask,
    num_classes: usize,
    shape: &MetaNetShape,
    kernel_width: usize,
    seed: u64,
) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "meta-init", 0));
    MetaModel::param_layout(mask, num_classes, shape, kernel_width)
        .into_iter()
        .map(|s| {
            if s.len() == 1 {
                Tensor::param(vec![0.0; s[0]], &s)
            } else {
                let fan_in: usize = match s.len() {
                    2 => s[0],
                    _ => s[1..].iter().product(),
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let n: usize = s.iter().product();
                let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::param(data, &s)
            }
        })
        .collect()
}

fn shuffle(xs: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

/// Rank the target test set by estimated misclassification probability,
/// descending, ties by ascending input id.
pub fn rank_targets(
    mm: &MetaModel,
    target_test: &Dataset,
    m_s: &Classifier,
    m_t: &Classifier,
    odin_cfg: &OdinConfig,
    subject: &str,
) -> Result<Ranking> {
    let records = extract_batch(m_s, m_t, target_test, odin_cfg)?;
    let scores = mm.score_batch(&records)?;
    Ranking::from_scores(
        "metasel",
        subject,
        scores.into_iter().enumerate().collect(),
    )
}

#[cfg(test)]
mod tests;
