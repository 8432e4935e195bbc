//! Per-input feature records from a source/target model pair.
//!
//! A record carries both models' logits, their element-wise absolute
//! difference, the differential-testing bit (1 when both models predict the
//! same class), and both ODIN scores; when the ground truth is known it also
//! carries the misclassification label of the target model.

use std::fs;
use std::path::Path;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::odin::{odin_score, OdinConfig};
use crate::tensor::Tensor;

/// The feature vector for one input: `3C + 3` numeric features plus the
/// optional misclassification label.
#[derive(Debug, Clone)]
pub struct FeatureRecord {
    pub input_id: usize,
    pub logits_source: Vec<f64>,
    pub logits_target: Vec<f64>,
    pub logit_abs_diff: Vec<f64>,
    /// 1 when both models predict the same class.
    pub diff_test: u8,
    pub odin_source: f64,
    pub odin_target: f64,
    /// 1 = misclassified by the target model; present iff ground truth known.
    pub label: Option<u8>,
}

impl FeatureRecord {
    pub fn num_classes(&self) -> usize {
        self.logits_target.len()
    }

    /// Total numeric feature width: three logit channels plus three scalars.
    pub fn width(&self) -> usize {
        3 * self.num_classes() + 3
    }
}

/// 1 iff both models put their argmax on the same class.
pub fn differential_test(m_s: &Classifier, m_t: &Classifier, x: &Tensor) -> Result<u8> {
    if m_s.num_classes() != m_t.num_classes() {
        return Err(Error::Config(format!(
            "models disagree on class count: {} vs {}",
            m_s.num_classes(),
            m_t.num_classes()
        )));
    }
    let a = m_s.forward_full(x)?.predicted;
    let b = m_t.forward_full(x)?.predicted;
    Ok(u8::from(a == b))
}

/// Assemble the feature record for one input. Pure function of the models,
/// input and configuration.
pub fn extract(
    m_s: &Classifier,
    m_t: &Classifier,
    x: &Tensor,
    odin_cfg: &OdinConfig,
    ground_truth: Option<usize>,
    input_id: usize,
) -> Result<FeatureRecord> {
    if m_s.num_classes() != m_t.num_classes() {
        return Err(Error::Config(format!(
            "models disagree on class count: {} vs {}",
            m_s.num_classes(),
            m_t.num_classes()
        )));
    }
    let out_s = m_s.forward_full(x)?;
    let out_t = m_t.forward_full(x)?;
    let logits_source = out_s.logits.data().to_vec();
    let logits_target = out_t.logits.data().to_vec();
    let logit_abs_diff: Vec<f64> = logits_source
        .iter()
        .zip(&logits_target)
        .map(|(a, b)| (a - b).abs())
        .collect();
    Ok(FeatureRecord {
        input_id,
        diff_test: u8::from(out_s.predicted == out_t.predicted),
        odin_source: odin_score(m_s, x, odin_cfg)?,
        odin_target: odin_score(m_t, x, odin_cfg)?,
        label: ground_truth.map(|truth| u8::from(out_t.predicted != truth)),
        logits_source,
        logits_target,
        logit_abs_diff,
    })
}

/// One record per dataset input, in order, with `input_id` equal to the
/// input's index in the dataset. Labels come from the dataset's ground truth.
pub fn extract_batch(
    m_s: &Classifier,
    m_t: &Classifier,
    d: &Dataset,
    odin_cfg: &OdinConfig,
) -> Result<Vec<FeatureRecord>> {
    let mut out = Vec::with_capacity(d.len());
    for i in 0..d.len() {
        out.push(extract(m_s, m_t, d.input(i), odin_cfg, Some(d.label(i)), i)?);
    }
    Ok(out)
}

/// Write records as CSV: `id, ls_0.., lt_0.., d_0.., diff_test, odin_s,
/// odin_t, label` (label empty when unknown).
pub fn write_csv(records: &[FeatureRecord], path: &Path) -> Result<()> {
    let c = records
        .first()
        .map(|r| r.num_classes())
        .ok_or_else(|| Error::Data("no records to write".to_string()))?;
    let mut out = String::new();
    out.push_str("id");
    for prefix in ["ls", "lt", "d"] {
        for i in 0..c {
            out.push_str(&format!(",{prefix}_{i}"));
        }
    }
    out.push_str(",diff_test,odin_s,odin_t,label\n");
    for r in records {
        if r.num_classes() != c {
            return Err(Error::Data(format!(
                "record {} has {} classes, expected {c}",
                r.input_id,
                r.num_classes()
            )));
        }
        out.push_str(&r.input_id.to_string());
        for group in [&r.logits_source, &r.logits_target, &r.logit_abs_diff] {
            for v in group {
                out.push_str(&format!(",{v}"));
            }
        }
        out.push_str(&format!(",{},{},{},", r.diff_test, r.odin_source, r.odin_target));
        if let Some(l) = r.label {
            out.push_str(&l.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use tempfile::tempdir;

    use super::*;
    use crate::datagen::{corrupt, gen_source, Corruption, DatasetRole, ShiftSpec};
    use crate::models::{train, Arch, Classifier, LayerSpec, TrainConfig};

    fn pair() -> (Classifier, Classifier, crate::datagen::Dataset) {
        let source = gen_source(4, 25, 3).unwrap();
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
            corruption: Corruption::Brightness,
            severity: 3,
            seed: 4,
        };
        let target = corrupt(&source, &spec)
            .unwrap()
            .with_role(DatasetRole::TargetTrain);
        let cfg2 = TrainConfig { seed: 12, ..cfg };
        let m_t = train(&arch, &target, &cfg2).unwrap();
        (m_s, m_t, target)
    }

    #[test]
    fn identical_models_agree_everywhere() {
        let (m_s, _, d) = pair();
        let cfg = OdinConfig {
            temperature: 1000.0,
            epsilon: 0.0,
        };
        let r = extract(&m_s, &m_s, d.input(0), &cfg, Some(d.label(0)), 0).unwrap();
        assert_eq!(r.diff_test, 1);
        assert!(r.logit_abs_diff.iter().all(|&v| v == 0.0));
        assert_eq!(r.odin_source, r.odin_target);
    }

    #[test]
    fn record_width_is_3c_plus_3() {
        let (m_s, m_t, d) = pair();
        let cfg = OdinConfig::default();
        let r = extract(&m_s, &m_t, d.input(1), &cfg, None, 1).unwrap();
        assert_eq!(r.width(), 3 * 4 + 3);
        assert!(r.label.is_none());
    }

    #[test]
    fn label_encodes_misclassification() {
        let (m_s, m_t, d) = pair();
        let cfg = OdinConfig {
            temperature: 1000.0,
            epsilon: 0.0,
        };
        for i in 0..10 {
            let r = extract(&m_s, &m_t, d.input(i), &cfg, Some(d.label(i)), i).unwrap();
            let predicted = m_t.forward_full(d.input(i)).unwrap().predicted;
            assert_eq!(r.label.unwrap(), u8::from(predicted != d.label(i)));
        }
    }

    #[test]
    fn hand_built_disagreeing_pair() {
        // Two linear models whose argmax differs on (1, 0).
        let arch = Arch::new(&[2], vec![LayerSpec::Dense { out: 2 }], 2).unwrap();
        let a = Classifier::with_params(
            arch.clone(),
            vec![
                Tensor::param(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]),
                Tensor::param(vec![0.0, 0.0], &[2]),
            ],
        )
        .unwrap();
        let b = Classifier::with_params(
            arch,
            vec![
                Tensor::param(vec![-1.0, 0.0, 0.0, -1.0], &[2, 2]),
                Tensor::param(vec![0.0, 0.0], &[2]),
            ],
        )
        .unwrap();
        let x = Tensor::new(vec![1.0, 0.0], &[2]).unwrap();
        assert_eq!(differential_test(&a, &b, &x).unwrap(), 0);
        assert_eq!(differential_test(&a, &a, &x).unwrap(), 1);
    }

    #[test]
    fn class_count_mismatch_is_config_error() {
        let arch2 = Arch::mlp_small(&[2], 2).unwrap();
        let arch3 = Arch::mlp_small(&[2], 3).unwrap();
        let a = Classifier::init(arch2, 0).unwrap();
        let b = Classifier::init(arch3, 0).unwrap();
        let x = Tensor::new(vec![0.0, 0.0], &[2]).unwrap();
        assert!(matches!(
            differential_test(&a, &b, &x),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            extract(&a, &b, &x, &OdinConfig::default(), None, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_equals_mapped_singles() {
        let (m_s, m_t, d) = pair();
        let cfg = OdinConfig::default();
        let probe = d.select(&[0, 3, 7, 11], DatasetRole::TargetTest).unwrap();
        let batch = extract_batch(&m_s, &m_t, &probe, &cfg).unwrap();
        assert_eq!(batch.len(), probe.len());
        for (i, r) in batch.iter().enumerate() {
            let single =
                extract(&m_s, &m_t, probe.input(i), &cfg, Some(probe.label(i)), i).unwrap();
            assert_eq!(r.input_id, i);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
            assert_eq!(bits(&r.logits_source), bits(&single.logits_source));
            assert_eq!(bits(&r.logits_target), bits(&single.logits_target));
            assert_eq!(bits(&r.logit_abs_diff), bits(&single.logit_abs_diff));
            assert_eq!(r.diff_test, single.diff_test);
            assert_eq!(r.odin_source.to_bits(), single.odin_source.to_bits());
            assert_eq!(r.odin_target.to_bits(), single.odin_target.to_bits());
            assert_eq!(r.label, single.label);

            // Logits must be exactly what forward_full reports.
            let fwd = m_t.forward_full(probe.input(i)).unwrap();
            assert_eq!(bits(&r.logits_target), bits(fwd.logits.data()));
        }
    }

    #[test]
    fn batch_records_do_not_leak_across_inputs() {
        let (m_s, m_t, d) = pair();
        let cfg = OdinConfig {
            temperature: 1000.0,
            epsilon: 0.0,
        };
        let all = extract_batch(&m_s, &m_t, &d, &cfg).unwrap();
        let subset = d.select(&[2, 5], DatasetRole::TargetTest).unwrap();
        let sub = extract_batch(&m_s, &m_t, &subset, &cfg).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
        assert_eq!(bits(&sub[0].logits_target), bits(&all[2].logits_target));
        assert_eq!(bits(&sub[1].logits_target), bits(&all[5].logits_target));
    }

    #[test]
    fn csv_dump_shape() {
        let (m_s, m_t, d) = pair();
        let cfg = OdinConfig {
            temperature: 1000.0,
            epsilon: 0.0,
        };
        let probe = d.select(&[0, 1, 2], DatasetRole::TargetTest).unwrap();
        let records = extract_batch(&m_s, &m_t, &probe, &cfg).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("features.csv");
        write_csv(&records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[0],
            "id,ls_0,ls_1,ls_2,ls_3,lt_0,lt_1,lt_2,lt_3,d_0,d_1,d_2,d_3,diff_test,odin_s,odin_t,label"
        );
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 17);
        }
    }
}
