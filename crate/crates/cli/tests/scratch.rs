// Temporary diagnostic; run with:
//   cargo test -p metasel-cli --test scratch --release -- --ignored --nocapture

use metasel::datagen::Corruption;
use metasel::metamodel::{
    train_metamodel_multistart, AblationVariant, MetaNetShape, TrainConfig,
};
use metasel_cli::config::ExperimentConfig;
use metasel_cli::pipeline::{load_source, prepare_subject, train_source_model};

fn auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
        for (&sj, &lj) in scores.iter().zip(labels).skip(i + 1) {
            if li == lj {
                continue;
            }
            den += 1.0;
            let (p, n) = if li == 1 { (si, sj) } else { (sj, si) };
            num += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

#[test]
#[ignore]
fn shape_sweep() {
    let text = std::fs::read_to_string("/tmp/msel-test/full12.json").unwrap();
    let cfg: ExperimentConfig = serde_json::from_str(&text).unwrap();
    let (source_train, source_test) = load_source(&cfg).unwrap();
    let m_s = train_source_model(&cfg, &source_train).unwrap();

    let shapes = [
        ("8/3/32", MetaNetShape { conv_filters: 8, kernel_width: 3, hidden: 32 }),
        ("4/3/16", MetaNetShape { conv_filters: 4, kernel_width: 3, hidden: 16 }),
        ("2/2/8", MetaNetShape { conv_filters: 2, kernel_width: 2, hidden: 8 }),
    ];

    for (corruption, severity, idx) in [
        (Corruption::Brightness, 3, 7u64),
        (Corruption::Contrast, 2, 3),
        (Corruption::GaussianNoise, 4, 2),
        (Corruption::Spatter, 3, 10),
    ] {
        let (_, art) = prepare_subject(
            &cfg,
            &m_s,
            &source_train,
            &source_test,
            corruption,
            severity,
            idx,
            false,
        )
        .unwrap();
        let art = match art {
            Some(a) => a,
            None => {
                println!("{corruption:?}_{severity}: inadmissible");
                continue;
            }
        };
        let test_labels: Vec<u8> = art
            .test_records
            .iter()
            .map(|r| r.label.unwrap())
            .collect();
        let gini_scores: Vec<f64> = art
            .test_records
            .iter()
            .map(|r| {
                let p = metasel::tensor::Tensor::new(r.logits_target.clone(), &[4])
                    .unwrap()
                    .softmax()
                    .unwrap();
                1.0 - p.data().iter().map(|v| v * v).sum::<f64>()
            })
            .collect();
        print!(
            "{corruption:?}_{severity}: gini={:.3}",
            auroc(&gini_scores, &test_labels)
        );
        for (name, shape) in shapes {
            let mut aurocs = Vec::new();
            for seed in [5u64, 17, 42] {
                let tc = TrainConfig {
                    epochs: 200,
                    learning_rate: 0.05,
                    momentum: 0.9,
                    batch_size: 32,
                    seed,
                };
                let mm = train_metamodel_multistart(
                    &art.training_records,
                    AblationVariant::Full,
                    &tc,
                    shape,
                    None,
                    None,
                    3,
                )
                .unwrap();
                let scores = mm.score_batch(&art.test_records).unwrap();
                aurocs.push(auroc(&scores, &test_labels));
            }
            print!(
                "  {name}=[{:.3},{:.3},{:.3}]",
                aurocs[0], aurocs[1], aurocs[2]
            );
        }
        println!();
    }
}
