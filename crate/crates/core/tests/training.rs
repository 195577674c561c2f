use std::path::Path;

use jacprop::train::{load_dataset, train_on, DataSource, SynthKind, TrainConfig};
use jacprop::HeadKind;

fn config(text: &str) -> TrainConfig {
    TrainConfig::from_toml(text, Path::new("cfg.toml")).unwrap()
}

const LINEAR: &str = r#"
seed = 21
learning_rate = 0.05
epochs = 10
batch_size = 1
holdout_fraction = 0.25
[model]
layers = [3, 1]
head = "identity_se"
[data]
source = "synth"
kind = "linear"
n = 40
dims = 3
[output]
wall_time = false
"#;

#[test]
fn linear_model_loss_strictly_decreases() {
    let cfg = config(LINEAR);
    let out = train_on(&cfg, &load_dataset(&cfg).unwrap(), |_| Ok(())).unwrap();
    let losses: Vec<f64> = out.records.iter().map(|r| r.train_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(out.records.iter().all(|r| r.holdout_accuracy.is_none()));
}

#[test]
fn noiseless_linear_data_is_fit_exactly() {
    let mut cfg = config(LINEAR);
    cfg.epochs = 400;
    cfg.learning_rate = 0.1;
    let out = train_on(&cfg, &load_dataset(&cfg).unwrap(), |_| Ok(())).unwrap();
    let last = out.records.last().unwrap();
    assert!(last.train_loss < 1e-10, "{}", last.train_loss);
    assert!(last.holdout_loss.unwrap() < 1e-10);
}

#[test]
fn separated_blobs_reach_full_holdout_accuracy() {
    let mut cfg = config(LINEAR);
    cfg.model.layers = vec![5, 4];
    cfg.model.head = HeadKind::SoftmaxCe;
    cfg.epochs = 30;
    cfg.data = DataSource::Synth {
        kind: SynthKind::Blobs,
        n: 200,
        dims: 5,
        seed: None,
        classes: Some(4),
        outputs: None,
        noise: Some(0.05),
    };
    let out = train_on(&cfg, &load_dataset(&cfg).unwrap(), |_| Ok(())).unwrap();
    assert_eq!(out.records.last().unwrap().holdout_accuracy, Some(1.0));
}

#[test]
fn logistic_data_trains_a_binary_classifier() {
    let mut cfg = config(LINEAR);
    cfg.model.head = HeadKind::SigmoidBce;
    cfg.epochs = 40;
    cfg.learning_rate = 0.5;
    cfg.data = DataSource::Synth {
        kind: SynthKind::Logistic,
        n: 400,
        dims: 3,
        seed: None,
        classes: None,
        outputs: None,
        noise: None,
    };
    let out = train_on(&cfg, &load_dataset(&cfg).unwrap(), |_| Ok(())).unwrap();
    assert!(out.records.last().unwrap().holdout_accuracy.unwrap() > 0.95);
}

#[test]
fn seed_changes_the_run() {
    let a = config(LINEAR);
    let b = TrainConfig { seed: 22, ..a.clone() };
    let ra = train_on(&a, &load_dataset(&a).unwrap(), |_| Ok(())).unwrap();
    let rb = train_on(&b, &load_dataset(&b).unwrap(), |_| Ok(())).unwrap();
    assert_ne!(ra.records, rb.records);
}
