//! Smoke tests of the optimisation loop on tiny synthetic data.

use evinig::predictor::ModelParams;
use evinig::synth::{self, SynthConfig};
use evinig::trainer::{self, Adam, TrainConfig};

fn tiny() -> Vec<synth::SubjectSequence> {
    let cfg = SynthConfig {
        subjects: 4,
        height: 16,
        width: 16,
        ..SynthConfig::default()
    };
    synth::synth_dataset(&cfg).unwrap()
}

#[test]
fn loss_drops_over_twenty_epochs() {
    let ds = tiny();
    let cfg = TrainConfig {
        epochs: 20,
        folds: 2,
        max_triples_per_epoch: Some(32),
        max_val_triples: Some(16),
        ..TrainConfig::default()
    };
    let (_, history) = trainer::train(&ds, &cfg).unwrap();
    assert_eq!(history.epochs.len(), 20);
    let first = history.epochs[0].train_total;
    let last = history.epochs[19].train_total;
    assert!(last < first, "epoch 1 {first}, epoch 20 {last}");
}

#[test]
fn fixed_batch_loss_is_non_increasing() {
    let ds = tiny();
    let triples = trainer::make_training_triples(&ds[0]).unwrap();
    let batch: Vec<_> = triples.iter().step_by(triples.len() / 4).take(4).copied().collect();
    let cfg = TrainConfig::default();
    let mut monotone = 0;
    for seed in 0..10 {
        let mut model = ModelParams::init(cfg.model, seed).unwrap();
        let mut adam = Adam::from_config(model.num_parameters(), &cfg);
        let mut prev = f64::INFINITY;
        let mut ok = true;
        for _ in 0..50 {
            let mut loss = 0.0;
            let mut grad = vec![0.0; model.num_parameters()];
            for tr in &batch {
                let (l, g) = trainer::triple_gradient(&model, tr, &cfg.loss).unwrap();
                loss += l.total / batch.len() as f64;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b / batch.len() as f64;
                }
            }
            ok &= loss <= prev;
            prev = loss;
            let mut flat = model.flatten();
            adam.step(&mut flat, &grad);
            model.assign_flat(&flat).unwrap();
        }
        monotone += ok as usize;
    }
    assert!(monotone >= 9, "{monotone}/10 seeds were monotone");
}

#[test]
fn repeated_training_is_identical() {
    let ds = tiny();
    let cfg = TrainConfig {
        epochs: 3,
        folds: 2,
        max_triples_per_epoch: Some(16),
        max_val_triples: Some(8),
        ..TrainConfig::default()
    };
    let (m1, h1) = trainer::train(&ds, &cfg).unwrap();
    let (m2, h2) = trainer::train(&ds, &cfg).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(h1.to_jsonl(), h2.to_jsonl());
    assert_eq!(m1, m2);
}
