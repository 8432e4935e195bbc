use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use super::*;
use crate::datagen::{gen_source, Dataset, DatasetRole};
use crate::tensor::Tensor;

/// Two Gaussian blobs at (-1,-1) and (1,1), std 0.3: linearly separable.
fn blobs(n_per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n_per_class * 2 {
        let class = i % 2;
        let center = if class == 0 { -1.0 } else { 1.0 };
        let x = center + 0.3 * gauss(&mut rng);
        let y = center + 0.3 * gauss(&mut rng);
        inputs.push(Tensor::new(vec![x, y], &[2]).unwrap());
        labels.push(class);
    }
    Dataset::new(inputs, labels, DatasetRole::SourceTrain, 2).unwrap()
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Independent logistic-regression oracle: plain gradient descent on the
/// log-loss. Used to certify that the blob data really is separable enough
/// for the >= 0.95 accuracy requirement to be a property of the data.
fn logistic_regression_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let mut w = [0.0f64; 2];
    let mut b = 0.0f64;
    let lr = 0.5;
    for _ in 0..300 {
        let mut gw = [0.0f64; 2];
        let mut gb = 0.0f64;
        for i in 0..train.len() {
            let x = train.input(i).data();
            let y = train.label(i) as f64;
            let z = w[0] * x[0] + w[1] * x[1] + b;
            let p = 1.0 / (1.0 + (-z).exp());
            gw[0] += (p - y) * x[0];
            gw[1] += (p - y) * x[1];
            gb += p - y;
        }
        let n = train.len() as f64;
        w[0] -= lr * gw[0] / n;
        w[1] -= lr * gw[1] / n;
        b -= lr * gb / n;
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = test.input(i).data();
            let z = w[0] * x[0] + w[1] * x[1] + b;
            (z > 0.0) as usize == test.label(i)
        })
        .count();
    correct as f64 / test.len() as f64
}

fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 0.05,
        momentum: 0.9,
        batch_size: 16,
        seed,
    }
}

#[test]
fn train_separable_blobs() {
    let train_set = blobs(50, 1);
    let val_set = blobs(25, 2);
    // The oracle certifies that the data itself is separable.
    assert!(logistic_regression_accuracy(&train_set, &val_set) >= 0.95);

    let arch = Arch::mlp_small(&[2], 2).unwrap();
    let model = train(&arch, &train_set, &quick_cfg(30, 0)).unwrap();
    assert!(model.accuracy(&val_set).unwrap() >= 0.95);
}

#[test]
fn zero_epochs_is_config_error() {
    let arch = Arch::mlp_small(&[2], 2).unwrap();
    let data = blobs(4, 0);
    assert!(matches!(
        train(&arch, &data, &quick_cfg(0, 0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn training_is_deterministic() {
    let data = blobs(20, 3);
    let arch = Arch::mlp_small(&[2], 2).unwrap();
    let a = train(&arch, &data, &quick_cfg(5, 7)).unwrap();
    let b = train(&arch, &data, &quick_cfg(5, 7)).unwrap();
    for (pa, pb) in a.params().iter().zip(b.params()) {
        let bits_a: Vec<u64> = pa.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = pb.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}

#[test]
fn class_count_mismatch_is_data_error() {
    let arch = Arch::mlp_small(&[2], 3).unwrap();
    let data = blobs(4, 0); // 2 classes
    assert!(matches!(
        train(&arch, &data, &quick_cfg(1, 0)),
        Err(Error::Data(_))
    ));
}

#[test]
fn forward_full_hand_linear_model() {
    // Identity weights, zero bias: logits echo the input.
    let arch = Arch::new(&[2], vec![LayerSpec::Dense { out: 2 }], 2).unwrap();
    let params = vec![
        Tensor::param(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]),
        Tensor::param(vec![0.0, 0.0], &[2]),
    ];
    let model = Classifier::with_params(arch, params).unwrap();
    let out = model
        .forward_full(&Tensor::new(vec![2.0, 1.0], &[2]).unwrap())
        .unwrap();
    assert_eq!(out.logits.data(), &[2.0, 1.0]);
    assert_eq!(out.predicted, 0);
    assert!((out.probs.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    // Softmax is monotone, so predicted must be the logit argmax too.
    assert_eq!(out.predicted, out.logits.argmax().unwrap());
}

#[test]
fn forward_full_rejects_wrong_shape() {
    let arch = Arch::mlp_small(&[2], 2).unwrap();
    let model = Classifier::init(arch, 0).unwrap();
    let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    assert!(matches!(model.forward_full(&x), Err(Error::Dimension(_))));
}

#[test]
fn probs_sum_to_one_on_trained_model() {
    let data = blobs(20, 4);
    let arch = Arch::mlp_small(&[2], 2).unwrap();
    let model = train(&arch, &data, &quick_cfg(3, 1)).unwrap();
    for i in 0..data.len() {
        let out = model.forward_full(data.input(i)).unwrap();
        assert!((out.probs.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_eq!(out.predicted, out.logits.argmax().unwrap());
    }
}

#[test]
fn finetune_does_not_mutate_pretrained() {
    let data = blobs(30, 5);
    let arch = Arch::mlp_small(&[2], 2).unwrap();
    let m = train(&arch, &data, &quick_cfg(5, 2)).unwrap();
    let probe = Tensor::new(vec![0.3, -0.8], &[2]).unwrap();
    let before: Vec<u64> = m
        .forward_full(&probe)
        .unwrap()
        .logits
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect();

    let target = blobs(40, 6);
    let (_tuned, report) = finetune(&m, &target, 20, &quick_cfg(3, 3)).unwrap();
    assert_eq!(report.n_s, 20);

    let after: Vec<u64> = m
        .forward_full(&probe)
        .unwrap()
        .logits
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn finetune_admissibility_definition() {
    let data = blobs(30, 5);
    let arch = Arch::mlp_small(&[2], 2).unwrap();
    let m = train(&arch, &data, &quick_cfg(5, 2)).unwrap();
    let target = blobs(40, 8);
    let (_, report) = finetune(&m, &target, 24, &quick_cfg(3, 3)).unwrap();
    assert_eq!(
        report.admissible,
        report.acc_finetuned_on_target > report.acc_scratch_on_target
            && report.acc_finetuned_on_target > report.acc_pretrained_on_target
    );
}

#[test]
fn finetune_rejects_bad_sample_sizes() {
    let data = blobs(10, 5);
    let arch = Arch::mlp_small(&[2], 2).unwrap();
    let m = train(&arch, &data, &quick_cfg(2, 2)).unwrap();
    let target = blobs(10, 6);
    assert!(matches!(
        finetune(&m, &target, 0, &quick_cfg(1, 0)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        finetune(&m, &target, 1000, &quick_cfg(1, 0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn one_epoch_finetune_on_same_distribution_stays_close() {
    let data = blobs(60, 5);
    let arch = Arch::mlp_small(&[2], 2).unwrap();
    let m = train(&arch, &data, &quick_cfg(20, 2)).unwrap();
    // Target drawn from the same distribution: accuracy should not move
    // beyond noise after a single epoch on a small sample.
    let target = blobs(60, 9);
    let probe = blobs(50, 10);
    let acc_before = m.accuracy(&probe).unwrap();
    let (tuned, _) = finetune(&m, &target, 40, &quick_cfg(1, 3)).unwrap();
    let acc_after = tuned.accuracy(&probe).unwrap();
    assert!(
        (acc_before - acc_after).abs() <= 0.05,
        "accuracy moved from {acc_before} to {acc_after}"
    );
}

#[test]
fn save_load_roundtrip_bitwise() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("model.msel");
    let data = gen_source(4, 10, 3).unwrap();
    let arch = Arch::conv_small(&[1, 16, 16], 4).unwrap();
    let model = train(
        &arch,
        &data,
        &TrainConfig {
            epochs: 2,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 16,
            seed: 5,
        },
    )
    .unwrap();
    model.save(&path).unwrap();
    let back = load(&path).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let px: Vec<f64> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = Tensor::new(px, &[1, 16, 16]).unwrap();
        let a = model.forward_full(&x).unwrap();
        let b = back.forward_full(&x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
        assert_eq!(bits(&a.logits), bits(&b.logits));
    }
}

#[test]
fn load_rejects_bad_magic_and_version() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("model.msel");
    let arch = Arch::mlp_small(&[2], 2).unwrap();
    let model = Classifier::init(arch, 0).unwrap();
    model.save(&path).unwrap();

    let mut bytes = std::fs::read(&path).unwrap();
    let good = bytes.clone();

    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    match load(&path) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("expected format error, got {other:?}"),
    }

    bytes = good.clone();
    bytes[4] = 2; // version bump
    std::fs::write(&path, &bytes).unwrap();
    match load(&path) {
        Err(Error::Format { offset, msg }) => {
            assert_eq!(offset, 4);
            assert!(msg.contains("version"));
        }
        other => panic!("expected version error, got {other:?}"),
    }

    // Truncation.
    std::fs::write(&path, &good[..good.len() - 3]).unwrap();
    assert!(matches!(load(&path), Err(Error::Format { .. })));
}
