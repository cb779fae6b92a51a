//! End-to-end training behaviour on the synthetic grid.

use tea_moelora::backbone::{freeze_check, AdaptedModel};
use tea_moelora::config::{OptimizerKind, RunConfig};
use tea_moelora::router::RoutingMode;
use tea_moelora::synthdata;
use tea_moelora::training;
use tea_moelora::Error;

fn conflict_free() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.conflict = 0.0;
    cfg
}

#[test]
fn conflict_free_data_is_learned_on_every_cell() {
    let cfg = conflict_free();
    let data = synthdata::generate(&cfg.synth_spec()).unwrap();
    let run = training::train(&cfg, &data).unwrap().result;
    let weak: Vec<_> = run
        .dev
        .iter()
        .filter(|c| c.accuracy <= 0.9)
        .map(|c| (c.task, c.era, c.accuracy))
        .collect();
    assert!(
        weak.is_empty(),
        "cells at or below 90% dev accuracy: {weak:?}"
    );
}

#[test]
fn training_loss_mostly_decreases_on_conflict_free_data() {
    let cfg = conflict_free();
    let data = synthdata::generate(&cfg.synth_spec()).unwrap();
    let losses = training::train(&cfg, &data)
        .unwrap()
        .result
        .epoch_train_loss;
    let pairs = losses.len() - 1;
    let down = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(
        down as f64 >= 0.9 * pairs as f64,
        "{down}/{pairs} non-increasing epoch pairs: {losses:?}"
    );
}

#[test]
fn backbone_survives_a_hundred_steps() {
    let mut cfg = RunConfig::default();
    cfg.data.train_per_cell = 400;
    cfg.train.epochs = 1;
    cfg.train.batch_size = 32;
    let data = synthdata::generate(&cfg.synth_spec()).unwrap();
    let init = AdaptedModel::new(cfg.model_config().unwrap(), cfg.seed).unwrap();
    let snapshot = init.frozen_snapshot();
    let mut steps = 0;
    let run = training::train_with_hook(&cfg, &data, |_, _| steps += 1).unwrap();
    assert!(steps >= 100, "{steps}");
    assert!(freeze_check(&run.model, &snapshot));

    let mut corrupted = run.model.clone();
    corrupted.layers[1].base.weight.data_mut()[0] += 1e-12;
    assert!(!freeze_check(&corrupted, &snapshot));
}

#[test]
fn every_mode_is_deterministic_per_seed() {
    let mut cfg = RunConfig::default();
    cfg.data.train_per_cell = 40;
    cfg.data.dev_per_cell = 10;
    cfg.data.test_per_cell = 10;
    cfg.train.epochs = 3;
    let data = synthdata::generate(&cfg.synth_spec()).unwrap();
    for v in training::ablation_grid() {
        let c = v.apply(&cfg);
        let a = training::train(&c, &data).unwrap();
        let b = training::train(&c, &data).unwrap();
        assert_eq!(a.result.epoch_train_loss, b.result.epoch_train_loss);
        for ((n, x), (_, y)) in a
            .model
            .named_tensors()
            .into_iter()
            .zip(b.model.named_tensors())
        {
            assert!(x.bit_eq(y), "{n}");
        }
    }
}

#[test]
fn run_result_has_one_entry_per_cell() {
    let mut cfg = RunConfig::default();
    cfg.data.train_per_cell = 20;
    cfg.train.epochs = 2;
    let data = synthdata::generate(&cfg.synth_spec()).unwrap();
    let r = training::train(&cfg, &data).unwrap().result;
    assert_eq!(r.test.len(), 8);
    assert_eq!(r.dev.len(), 8);
    assert_eq!(r.epoch_train_loss.len(), 2);
    assert_eq!(r.dev_history.len(), 2);
    let per_cell = training::train_per_cell(&cfg, &data).unwrap();
    assert_eq!(per_cell.test.len(), 8);
    assert!(per_cell.freeze_ok);
}

#[test]
fn divergence_names_the_step() {
    let mut cfg = RunConfig::default();
    cfg.data.train_per_cell = 20;
    cfg.train.optimizer = OptimizerKind::Sgd;
    cfg.train.learning_rate = 1e200;
    let data = synthdata::generate(&cfg.synth_spec()).unwrap();
    match training::train(&cfg, &data) {
        Err(Error::Divergence { epoch, step, loss }) => {
            assert!(!loss.is_finite());
            assert!(step >= 1, "epoch {epoch} step {step}");
            let msg = Error::Divergence { epoch, step, loss }.to_string();
            assert!(msg.contains(&format!("step {step}")));
        }
        other => panic!("expected divergence, got {:?}", other.map(|r| r.result)),
    }
}

#[test]
fn separate_gates_beat_joint_single_lora_under_conflict() {
    let cfg = RunConfig::default();
    let data = synthdata::generate(&cfg.synth_spec()).unwrap();
    let mut single = cfg.clone();
    single.train.mode = RoutingMode::NoMoe;
    single.train.n_experts = 1;
    let joint = training::train(&single, &data).unwrap().result;
    let tea = training::train(&cfg, &data).unwrap().result;
    assert!(tea.mean_test_accuracy() > joint.mean_test_accuracy());
}
