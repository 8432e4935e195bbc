use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use super::*;
use crate::datagen::{corrupt, gen_source, Corruption, DatasetRole, ShiftSpec};
use crate::models::{train, Arch};
use crate::odin::calibrate_threshold;

fn meta_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 60,
        learning_rate: 0.05,
        momentum: 0.9,
        batch_size: 32,
        seed,
    }
}

/// Synthetic records where the label is linearly recoverable: positives get
/// large logit differences and low target ODIN scores.
fn separable_records(n: usize, c: usize, seed: u64) -> Vec<FeatureRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let bias = if label == 1 { 2.0 } else { 0.0 };
            let logits_source: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let logits_target: Vec<f64> = logits_source
                .iter()
                .map(|v| v + bias * rng.gen_range(0.5..1.0))
                .collect();
            let logit_abs_diff: Vec<f64> = logits_source
                .iter()
                .zip(&logits_target)
                .map(|(a, b)| (a - b).abs())
                .collect();
            FeatureRecord {
                input_id: i,
                diff_test: 1 - label,
                odin_source: rng.gen_range(0.5..1.0),
                odin_target: if label == 1 {
                    rng.gen_range(0.1..0.4)
                } else {
                    rng.gen_range(0.6..0.9)
                },
                label: Some(label),
                logits_source,
                logits_target,
                logit_abs_diff,
            }
        })
        .collect()
}

fn auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
        for (&sj, &lj) in scores.iter().zip(labels).skip(i + 1) {
            if li == lj {
                continue;
            }
            den += 1.0;
            let (pos, neg) = if li == 1 { (si, sj) } else { (sj, si) };
            if pos > neg {
                num += 1.0;
            } else if pos == neg {
                num += 0.5;
            }
        }
    }
    num / den
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&x, &y| v[x].partial_cmp(&v[y]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let ra = rank(a);
    let rb = rank(b);
    let n = a.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        cov += (ra[i] - mean) * (rb[i] - mean);
        va += (ra[i] - mean).powi(2);
        vb += (rb[i] - mean).powi(2);
    }
    cov / (va.sqrt() * vb.sqrt())
}

#[test]
fn variant_masks_match_definitions() {
    use FeatureGroup::*;
    let c = 4;
    let full_width = 3 * c + 3;
    assert_eq!(AblationVariant::Full.mask().input_width(c), full_width);
    let cases = [
        (AblationVariant::V1, vec![LogitAbsDiff]),
        (AblationVariant::V2, vec![DiffTest]),
        (AblationVariant::V3, vec![OdinSource]),
        (AblationVariant::V4, vec![OdinSource, OdinTarget]),
        (AblationVariant::V5, vec![LogitsSource, LogitAbsDiff]),
        (
            AblationVariant::V6,
            vec![LogitsSource, LogitsTarget, LogitAbsDiff],
        ),
        (
            AblationVariant::V7,
            vec![LogitsSource, LogitAbsDiff, DiffTest, OdinSource],
        ),
    ];
    for (variant, excluded) in cases {
        let mask = variant.mask();
        for g in FeatureGroup::ALL {
            assert_eq!(
                mask.is_active(g),
                !excluded.contains(&g),
                "{:?} / {g:?}",
                variant
            );
        }
        let removed: usize = excluded.iter().map(|g| g.width(c)).sum();
        assert_eq!(mask.input_width(c), full_width - removed, "{variant:?}");
    }
    // V6 keeps exactly the three scalars; V7 keeps only target information.
    assert_eq!(AblationVariant::V6.mask().input_width(c), 3);
    assert_eq!(
        AblationVariant::V7.mask().active_groups(),
        vec![LogitsTarget, OdinTarget]
    );
}

#[test]
fn separable_records_reach_high_auroc() {
    let records = separable_records(400, 4, 3);
    let mm = train_metamodel(&records, AblationVariant::Full, &meta_cfg(1)).unwrap();
    let scores = mm.score_batch(&records).unwrap();
    let labels: Vec<u8> = records.iter().map(|r| r.label.unwrap()).collect();
    let roc = auroc(&scores, &labels);
    assert!(roc >= 0.95, "training AUROC {roc}");
}

#[test]
fn v6_trains_on_scalars_only() {
    let records = separable_records(200, 4, 5);
    let mm = train_metamodel(&records, AblationVariant::V6, &meta_cfg(1)).unwrap();
    assert_eq!(mm.input_width(), 3);
    // Still learnable: odin_target alone separates the classes.
    let scores = mm.score_batch(&records).unwrap();
    let labels: Vec<u8> = records.iter().map(|r| r.label.unwrap()).collect();
    assert!(auroc(&scores, &labels) >= 0.9);
}

#[test]
fn same_seed_identical_scores() {
    let records = separable_records(120, 4, 7);
    let probe = separable_records(30, 4, 8);
    let a = train_metamodel(&records, AblationVariant::Full, &meta_cfg(5)).unwrap();
    let b = train_metamodel(&records, AblationVariant::Full, &meta_cfg(5)).unwrap();
    let sa = a.score_batch(&probe).unwrap();
    let sb = b.score_batch(&probe).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
    assert_eq!(bits(&sa), bits(&sb));
}

#[test]
fn scores_bounded_in_unit_interval() {
    let records = separable_records(100, 4, 9);
    let mm = train_metamodel(&records, AblationVariant::Full, &meta_cfg(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut wild = Vec::with_capacity(10_000);
    for i in 0..10_000 {
        let c = 4;
        let logits_source: Vec<f64> = (0..c).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let logits_target: Vec<f64> = (0..c).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let logit_abs_diff = logits_source
            .iter()
            .zip(&logits_target)
            .map(|(a, b)| (a - b).abs())
            .collect();
        wild.push(FeatureRecord {
            input_id: i,
            diff_test: rng.gen_range(0..=1),
            odin_source: rng.gen_range(0.0..1.0),
            odin_target: rng.gen_range(0.0..1.0),
            label: None,
            logits_source,
            logits_target,
            logit_abs_diff,
        });
    }
    for s in mm.score_batch(&wild).unwrap() {
        assert!((0.0..=1.0).contains(&s));
    }
}

#[test]
fn scoring_is_batch_composition_independent() {
    let records = separable_records(64, 4, 11);
    let mm = train_metamodel(&records, AblationVariant::Full, &meta_cfg(3)).unwrap();
    let probe = separable_records(16, 4, 12);
    let whole = mm.score_batch(&probe).unwrap();
    for (i, r) in probe.iter().enumerate() {
        let single = mm.score(r).unwrap();
        assert_eq!(single.to_bits(), whole[i].to_bits());
    }
    // Reversed batch gives the same per-record scores.
    let reversed: Vec<FeatureRecord> = probe.iter().rev().cloned().collect();
    let back = mm.score_batch(&reversed).unwrap();
    for (i, s) in back.iter().rev().enumerate() {
        assert_eq!(s.to_bits(), whole[i].to_bits());
    }
}

#[test]
fn label_flip_reverses_ordering() {
    let records = separable_records(300, 4, 13);
    let flipped: Vec<FeatureRecord> = records
        .iter()
        .map(|r| FeatureRecord {
            label: r.label.map(|l| 1 - l),
            ..r.clone()
        })
        .collect();
    let probe = separable_records(60, 4, 14);
    let a = train_metamodel(&records, AblationVariant::Full, &meta_cfg(4)).unwrap();
    let b = train_metamodel(&flipped, AblationVariant::Full, &meta_cfg(4)).unwrap();
    let sa = a.score_batch(&probe).unwrap();
    let sb = b.score_batch(&probe).unwrap();
    let rho = spearman(&sa, &sb);
    assert!(rho < 0.0, "spearman {rho}");
}

#[test]
fn single_class_records_rejected() {
    let mut records = separable_records(50, 4, 15);
    for r in records.iter_mut() {
        r.label = Some(0);
    }
    assert!(matches!(
        train_metamodel(&records, AblationVariant::Full, &meta_cfg(0)),
        Err(Error::Data(_))
    ));
}

#[test]
fn unlabeled_records_rejected() {
    let mut records = separable_records(50, 4, 16);
    records[3].label = None;
    assert!(matches!(
        train_metamodel(&records, AblationVariant::Full, &meta_cfg(0)),
        Err(Error::Data(_))
    ));
}

#[test]
fn class_count_mismatch_is_config_error() {
    let records = separable_records(60, 4, 17);
    let mm = train_metamodel(&records, AblationVariant::Full, &meta_cfg(1)).unwrap();
    let other = separable_records(1, 6, 18);
    assert!(matches!(mm.score(&other[0]), Err(Error::Config(_))));
}

#[test]
fn persistence_roundtrip_bitwise_scores() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("meta.msel");
    let records = separable_records(150, 4, 19);
    let mm = train_metamodel(&records, AblationVariant::V4, &meta_cfg(6)).unwrap();
    mm.save(&path).unwrap();
    assert!(path.with_extension("msel.json").exists() || sidecar_exists(&path));

    let back = MetaModel::load(&path).unwrap();
    assert_eq!(back.variant(), AblationVariant::V4);
    assert_eq!(back.input_width(), mm.input_width());
    let probe = separable_records(40, 4, 20);
    let a = mm.score_batch(&probe).unwrap();
    let b = back.score_batch(&probe).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
    assert_eq!(bits(&a), bits(&b));
}

fn sidecar_exists(path: &std::path::Path) -> bool {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s).exists()
}

// Training-set construction against real models.

struct Pipeline {
    m_s: crate::models::Classifier,
    m_t: crate::models::Classifier,
    train_t: crate::datagen::Dataset,
    test_s: crate::datagen::Dataset,
    odin_cfg: OdinConfig,
}

fn pipeline() -> Pipeline {
    let source = gen_source(4, 30, 3).unwrap();
    let test_s = gen_source(4, 10, 21)
        .unwrap()
        .with_role(DatasetRole::SourceTest);
    let arch = Arch::conv_small(&[1, 16, 16], 4).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        learning_rate: 0.05,
        momentum: 0.9,
        batch_size: 16,
        seed: 11,
    };
    let m_s = train(&arch, &source, &cfg).unwrap();
    let spec = ShiftSpec {
        corruption: Corruption::GaussianNoise,
        severity: 3,
        seed: 4,
    };
    let train_t = corrupt(&source, &spec)
        .unwrap()
        .with_role(DatasetRole::TargetTrain);
    let m_t = train(&arch, &train_t, &TrainConfig { seed: 12, ..cfg }).unwrap();
    Pipeline {
        m_s,
        m_t,
        train_t,
        test_s,
        odin_cfg: OdinConfig {
            temperature: 1000.0,
            epsilon: 0.0,
        },
    }
}

#[test]
fn threshold_above_all_scores_keeps_only_target_records() {
    let p = pipeline();
    let cal = OdinCalibration {
        threshold: 2.0,
        achieved_tpr: 0.95,
        achieved_fpr: 0.0,
    };
    let records =
        build_training_set(&p.train_t, &p.test_s, &p.m_s, &p.m_t, &p.odin_cfg, &cal).unwrap();
    assert_eq!(records.len(), p.train_t.len());
}

#[test]
fn threshold_below_all_scores_keeps_everything() {
    let p = pipeline();
    let cal = OdinCalibration {
        threshold: -1.0,
        achieved_tpr: 1.0,
        achieved_fpr: 1.0,
    };
    let records =
        build_training_set(&p.train_t, &p.test_s, &p.m_s, &p.m_t, &p.odin_cfg, &cal).unwrap();
    assert_eq!(records.len(), p.train_t.len() + p.test_s.len());
}

#[test]
fn boundary_score_is_included_and_filter_is_monotone() {
    let p = pipeline();
    let source_records =
        extract_batch(&p.m_s, &p.m_t, &p.test_s, &p.odin_cfg).unwrap();
    let boundary = source_records[5].odin_target;

    let with = |threshold: f64| {
        build_training_set(
            &p.train_t,
            &p.test_s,
            &p.m_s,
            &p.m_t,
            &p.odin_cfg,
            &OdinCalibration {
                threshold,
                achieved_tpr: 0.95,
                achieved_fpr: 0.0,
            },
        )
        .unwrap()
        .len()
    };

    let at = with(boundary);
    let above = with(boundary + 1e-12);
    // The record scoring exactly the threshold is included.
    assert!(at > above, "boundary inclusion: {at} vs {above}");

    // Raising the threshold never adds source records.
    let mut prev = usize::MAX;
    for t in [-1.0, 0.2, 0.25, 0.3, 0.5, 2.0] {
        let n = with(t);
        assert!(n <= prev);
        prev = n;
    }
}

#[test]
fn calibrated_real_scores_filter_something() {
    let p = pipeline();
    let id_scores: Vec<f64> = (0..p.train_t.len())
        .map(|i| crate::odin::odin_score(&p.m_t, p.train_t.input(i), &p.odin_cfg).unwrap())
        .collect();
    let shuffled: Vec<f64> = id_scores.iter().rev().map(|s| s * 0.5).collect();
    let cal = calibrate_threshold(&id_scores, &shuffled).unwrap();
    let records =
        build_training_set(&p.train_t, &p.test_s, &p.m_s, &p.m_t, &p.odin_cfg, &cal).unwrap();
    assert!(records.len() >= p.train_t.len());
    assert!(records.len() <= p.train_t.len() + p.test_s.len());
    for r in &records {
        assert!(r.label.is_some());
    }
}

#[test]
fn rank_targets_is_stable_under_dataset_permutation() {
    let p = pipeline();
    let records = build_training_set(
        &p.train_t,
        &p.test_s,
        &p.m_s,
        &p.m_t,
        &p.odin_cfg,
        &OdinCalibration {
            threshold: 2.0,
            achieved_tpr: 0.95,
            achieved_fpr: 0.0,
        },
    )
    .unwrap();
    let mm = train_metamodel(&records, AblationVariant::Full, &meta_cfg(7)).unwrap();

    let test = p.test_s.with_role(DatasetRole::TargetTest);
    let r1 = rank_targets(&mm, &test, &p.m_s, &p.m_t, &p.odin_cfg, "s").unwrap();
    assert_eq!(r1.len(), test.len());
    let top = r1.entries()[0];
    assert!(r1.entries().iter().all(|(_, s)| *s <= top.1));

    // Permute the dataset; each item must land at the same rank position.
    let n = test.len();
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    let permuted = test.select(&perm, DatasetRole::TargetTest).unwrap();
    let r2 = rank_targets(&mm, &permuted, &p.m_s, &p.m_t, &p.odin_cfg, "s").unwrap();

    // Map positions: item at permuted index j is original item perm[j].
    let pos_of = |r: &Ranking, id: usize| {
        r.entries().iter().position(|(i, _)| *i == id).unwrap()
    };
    for (j, &orig) in perm.iter().enumerate() {
        assert_eq!(
            pos_of(&r2, j),
            pos_of(&r1, orig),
            "item {orig} moved rank after permutation"
        );
    }
}
