//! Per-subject experiment pipeline.
//!
//! A subject is one (corruption, severity) shift of the source data. The
//! pipeline fine-tunes the source model on the shifted training set, gates
//! on the admissibility conditions, calibrates the ODIN threshold on the
//! held-out validation split, and hands evaluated subjects to the rankers.

use serde::{Deserialize, Serialize};

use metasel::baselines::{
    rank_with, BaselineContext, BaselineMethod, EnsembleConfig,
};
use metasel::datagen::{corrupt, gen_source, ingest_idx, Dataset, DatasetRole, ShiftSpec};
use metasel::derive_seed;
use metasel::eval::{trc_curve, MisclassificationOracle, Ranking, TrcCurve};
use metasel::features::{extract_batch, FeatureRecord};
use metasel::metamodel::{
    build_training_set, train_metamodel_multistart, AblationVariant, MetaModel,
};
use metasel::models::{
    finetune, finetune_validation_split, train, Arch, Classifier, FinetuneReport,
};
use metasel::datagen::Corruption;
use metasel::odin::{calibrate_threshold, odin_score, shuffled_pixel_proxy, OdinCalibration};

use crate::config::{subject_name, DatasetSource, ExperimentConfig, MethodSpec};
use crate::error::{CliError, CliResult};

/// Source train/test sets per the config.
pub fn load_source(cfg: &ExperimentConfig) -> CliResult<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSource::Synthetic {
            num_classes,
            per_class_train,
            per_class_test,
        } => {
            let train_seed = derive_seed(cfg.seed, "source-train", 0);
            let test_seed = derive_seed(cfg.seed, "source-test", 0);
            let train = gen_source(*num_classes, *per_class_train, train_seed)?;
            let test = gen_source(*num_classes, *per_class_test, test_seed)?
                .with_role(DatasetRole::SourceTest);
            Ok((train, test))
        }
        DatasetSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = ingest_idx(train_images, train_labels)?;
            let test =
                ingest_idx(test_images, test_labels)?.with_role(DatasetRole::SourceTest);
            if train.num_classes() != test.num_classes() {
                return Err(CliError::Validation(format!(
                    "IDX train/test disagree on classes: {} vs {}",
                    train.num_classes(),
                    test.num_classes()
                )));
            }
            Ok((train, test))
        }
    }
}

/// Train the source model once per source set.
pub fn train_source_model(cfg: &ExperimentConfig, source_train: &Dataset) -> CliResult<Classifier> {
    let arch = Arch::by_id(cfg.arch, source_train.input_shape(), source_train.num_classes())?;
    let train_cfg = cfg
        .train_source
        .with_seed(derive_seed(cfg.seed, "source-model", 0));
    Ok(train(&arch, source_train, &train_cfg)?)
}

/// What happened to a subject, evaluated or not.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectOutcome {
    pub name: String,
    pub corruption: Corruption,
    pub severity: u8,
    pub report: FinetuneReport,
    pub calibration: Option<OdinCalibration>,
    pub mis_total: Option<usize>,
    /// Estimator training-set size, how many came from the filtered source
    /// test set, and how many carry a positive (misclassified) label.
    pub meta_records: Option<usize>,
    pub meta_augmented: Option<usize>,
    pub meta_positives: Option<usize>,
    pub evaluated: bool,
    pub reject_reason: Option<String>,
}

/// Everything the rankers need for one evaluated subject.
pub struct SubjectArtifacts {
    pub name: String,
    pub corruption: Corruption,
    pub severity: u8,
    pub m_t: Classifier,
    pub target_train: Dataset,
    pub target_test: Dataset,
    pub calibration: OdinCalibration,
    /// Labeled records for estimator training (target train + filtered
    /// source test).
    pub training_records: Vec<FeatureRecord>,
    /// Records of the target test set, for scoring and the feature dump.
    pub test_records: Vec<FeatureRecord>,
    pub oracle: MisclassificationOracle,
    /// Trained estimator, present when the method list needs one.
    pub metamodel: Option<MetaModel>,
}

/// Run one subject up to (not including) ranking. Returns the outcome and,
/// when the subject passes both gates (admissibility, nonzero
/// misclassifications), the artifacts for ranking.
pub fn prepare_subject(
    cfg: &ExperimentConfig,
    m_s: &Classifier,
    source_train: &Dataset,
    source_test: &Dataset,
    corruption: Corruption,
    severity: u8,
    subject_idx: u64,
    need_metamodel: bool,
) -> CliResult<(SubjectOutcome, Option<SubjectArtifacts>)> {
    let name = subject_name(&cfg.source_name(), corruption, severity);

    let train_spec = ShiftSpec {
        corruption,
        severity,
        seed: derive_seed(cfg.seed, "shift-train", subject_idx),
    };
    let test_spec = ShiftSpec {
        corruption,
        severity,
        seed: derive_seed(cfg.seed, "shift-test", subject_idx),
    };
    let target_train = corrupt(source_train, &train_spec)?.with_role(DatasetRole::TargetTrain);
    let target_test = corrupt(source_test, &test_spec)?.with_role(DatasetRole::TargetTest);

    let ft_cfg = cfg
        .train_finetune
        .with_seed(derive_seed(cfg.seed, "finetune", subject_idx));
    let (m_t, report) = finetune(m_s, &target_train, cfg.n_s, &ft_cfg)?;

    if !report.admissible {
        let reason = format!(
            "inadmissible fine-tune: finetuned {:.4} vs scratch {:.4}, pretrained {:.4}",
            report.acc_finetuned_on_target,
            report.acc_scratch_on_target,
            report.acc_pretrained_on_target
        );
        return Ok((
            SubjectOutcome {
                name,
                corruption,
                severity,
                report,
                calibration: None,
                mis_total: None,
                meta_records: None,
                meta_augmented: None,
                meta_positives: None,
                evaluated: false,
                reject_reason: Some(reason),
            },
            None,
        ));
    }

    // ODIN threshold on the same held-out validation split the
    // admissibility check used; the OOD proxy is pixel-shuffled copies of
    // the validation images.
    let (_, val) = finetune_validation_split(&target_train, &ft_cfg)?;
    let mut id_scores = Vec::with_capacity(val.len());
    for i in 0..val.len() {
        id_scores.push(odin_score(&m_t, val.input(i), &cfg.odin)?);
    }
    let mut ood_scores = Vec::with_capacity(val.len());
    for i in 0..val.len() {
        let shuffled = shuffled_pixel_proxy(
            val.input(i),
            derive_seed(cfg.seed, "ood-proxy", subject_idx * 1_000_003 + i as u64),
        )?;
        ood_scores.push(odin_score(&m_t, &shuffled, &cfg.odin)?);
    }
    let calibration = calibrate_threshold(&id_scores, &ood_scores)?;

    // Misclassification oracle for the target test set.
    let predictions = m_t.predict_dataset(&target_test)?;
    let oracle = MisclassificationOracle::from_predictions(&predictions, target_test.labels())?;
    if oracle.total_misclassified() == 0 {
        let reason = "no misclassifications on the target test set; TRC undefined".to_string();
        return Ok((
            SubjectOutcome {
                name,
                corruption,
                severity,
                report,
                calibration: Some(calibration),
                mis_total: Some(0),
                meta_records: None,
                meta_augmented: None,
                meta_positives: None,
                evaluated: false,
                reject_reason: Some(reason),
            },
            None,
        ));
    }

    let training_records = build_training_set(
        &target_train,
        source_test,
        m_s,
        &m_t,
        &cfg.odin,
        &calibration,
    )?;
    let test_records = extract_batch(m_s, &m_t, &target_test, &cfg.odin)?;

    let metamodel = if need_metamodel {
        Some(train_estimator(
            cfg,
            &training_records,
            AblationVariant::Full,
            calibration.threshold,
            subject_idx,
        )?)
    } else {
        None
    };

    let outcome = SubjectOutcome {
        name: name.clone(),
        corruption,
        severity,
        report,
        calibration: Some(calibration),
        mis_total: Some(oracle.total_misclassified()),
        meta_records: Some(training_records.len()),
        meta_augmented: Some(training_records.len() - target_train.len()),
        meta_positives: Some(
            training_records
                .iter()
                .filter(|r| r.label == Some(1))
                .count(),
        ),
        evaluated: true,
        reject_reason: None,
    };
    Ok((
        outcome,
        Some(SubjectArtifacts {
            name,
            corruption,
            severity,
            m_t,
            target_train,
            target_test,
            calibration,
            training_records,
            test_records,
            oracle,
            metamodel,
        }),
    ))
}

/// Train one estimator variant for a subject.
pub fn train_estimator(
    cfg: &ExperimentConfig,
    records: &[FeatureRecord],
    variant: AblationVariant,
    threshold: f64,
    subject_idx: u64,
) -> CliResult<MetaModel> {
    let label = format!("meta-{}", variant.name());
    let meta_cfg = cfg
        .train_meta
        .with_seed(derive_seed(cfg.seed, &label, subject_idx));
    Ok(train_metamodel_multistart(
        records,
        variant,
        &meta_cfg,
        cfg.meta_shape.unwrap_or_default(),
        Some(cfg.odin),
        Some(threshold),
        cfg.meta_starts,
    )?)
}

/// Rank the subject's test set with one method and evaluate its TRC curve.
pub fn run_method(
    cfg: &ExperimentConfig,
    subject: &SubjectArtifacts,
    method: MethodSpec,
) -> CliResult<(Ranking, TrcCurve)> {
    let ranking = match method {
        MethodSpec::MetaSel => {
            let mm = subject.metamodel.as_ref().ok_or_else(|| {
                CliError::Runtime(format!(
                    "subject {} has no trained estimator",
                    subject.name
                ))
            })?;
            let scores = mm.score_batch(&subject.test_records)?;
            Ranking::from_scores(
                "metasel",
                &subject.name,
                scores.into_iter().enumerate().collect(),
            )?
        }
        MethodSpec::Baseline(b) => {
            let ctx = BaselineContext {
                subject: &subject.name,
                m_t: &subject.m_t,
                target_train: &subject.target_train,
                target_test: &subject.target_test,
                nns: cfg.nns,
                datis: cfg.datis,
                sa: cfg.sa,
                ensemble: EnsembleConfig {
                    n_ensembles: cfg.ensemble.n_ensembles,
                    train: cfg
                        .train_finetune
                        .with_seed(derive_seed(cfg.seed, "ensemble", 0)),
                },
                seed: derive_seed(cfg.seed, "ensemble-baseline", 0),
            };
            rank_with(b, &ctx)?
        }
    };
    let curve = trc_curve(&ranking, &subject.oracle, &cfg.budgets)?;
    Ok((ranking, curve))
}

/// Rank with a specific estimator (used by the ablation study).
pub fn rank_with_estimator(
    mm: &MetaModel,
    subject: &SubjectArtifacts,
    method_name: &str,
) -> CliResult<Ranking> {
    let scores = mm.score_batch(&subject.test_records)?;
    Ok(Ranking::from_scores(
        method_name,
        &subject.name,
        scores.into_iter().enumerate().collect(),
    )?)
}

/// Which baselines are in the method list.
pub fn baseline_methods(methods: &[MethodSpec]) -> Vec<BaselineMethod> {
    methods
        .iter()
        .filter_map(|m| match m {
            MethodSpec::Baseline(b) => Some(*b),
            MethodSpec::MetaSel => None,
        })
        .collect()
}
