//! Joint multi-task, multi-era optimization and the ablation harness.

use std::collections::HashMap;
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::backbone::{freeze_check, AdaptedModel};
use crate::config::{OptimizerKind, RunConfig};
use crate::error::{Error, Result};
use crate::router::{Granularity, RoutingMode};
use crate::seed;
use crate::synthdata::{self, Batch, Sample, Splits};
use crate::tape::{Tape, Var};
use crate::tensor;

/// Records `mean CE(head logits, labels)` for one homogeneous batch.
pub fn joint_loss(
    model: &AdaptedModel,
    tape: &mut Tape,
    samples: &[Sample],
    batch: &Batch,
    dropout: Option<&mut seed::Rng>,
) -> Result<Var> {
    let width = model.heads[batch.task_id].weight.rows();
    let labels = batch.labels(samples);
    if let Some(&bad) = labels.iter().find(|&&y| y >= width) {
        return Err(Error::Data(format!(
            "label {bad} outside head width {width} of task {}",
            batch.task_id
        )));
    }
    let x = tape.constant(batch.features(samples));
    let logits = model.record_forward(tape, x, batch.task_id, batch.era_id, dropout)?;
    tape.cross_entropy(logits, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub task: usize,
    pub era: usize,
    pub n: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Eval-mode loss and accuracy per `(task, era)` cell, in sorted cell order.
pub fn evaluate(model: &AdaptedModel, samples: &[Sample]) -> Result<Vec<CellMetrics>> {
    let mut out = Vec::new();
    for batch in synthdata::cell_batches(samples, usize::MAX)? {
        let x = batch.features(samples);
        let labels = batch.labels(samples);
        let logits = model.predict(&x, batch.task_id, batch.era_id)?;
        let loss = tensor::cross_entropy(&logits, &labels)?;
        let correct = (0..labels.len())
            .filter(|&r| synthdata::argmax(logits.row(r)) == labels[r])
            .count();
        out.push(CellMetrics {
            task: batch.task_id,
            era: batch.era_id,
            n: labels.len(),
            loss,
            accuracy: correct as f64 / labels.len() as f64,
        });
    }
    Ok(out)
}

/// Equal-weight mean accuracy over cells.
pub fn mean_accuracy(cells: &[CellMetrics]) -> f64 {
    cells.iter().map(|c| c.accuracy).sum::<f64>() / cells.len() as f64
}

#[derive(Debug, Clone, Default)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Updates only tensors that require grad and received one this step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    slots: HashMap<String, AdamSlot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            slots: HashMap::new(),
        }
    }

    /// Applies one update and clears gradients. Returns the names of the
    /// tensors it touched, sorted.
    pub fn step(&mut self, model: &mut AdaptedModel) -> Vec<String> {
        let mut touched = Vec::new();
        for (name, t) in model.named_tensors_mut() {
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, gi) in t.data_mut().iter_mut().zip(&g) {
                        *p -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                        t: 0,
                    });
                    slot.t += 1;
                    let c1 = 1.0 - beta1.powi(slot.t);
                    let c2 = 1.0 - beta2.powi(slot.t);
                    for (i, p) in t.data_mut().iter_mut().enumerate() {
                        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g[i];
                        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = slot.m[i] / c1;
                        let v_hat = slot.v[i] / c2;
                        *p -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            t.zero_grad();
            touched.push(name);
        }
        touched.sort();
        touched
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub granularity: String,
    pub seed: u64,
    /// Sample-weighted mean training loss per epoch.
    pub epoch_train_loss: Vec<f64>,
    pub dev_history: Vec<Vec<CellMetrics>>,
    pub dev: Vec<CellMetrics>,
    pub test: Vec<CellMetrics>,
    pub freeze_ok: bool,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<String>,
}

impl RunResult {
    pub fn mean_test_accuracy(&self) -> f64 {
        mean_accuracy(&self.test)
    }

    pub fn mean_dev_accuracy(&self) -> f64 {
        mean_accuracy(&self.dev)
    }
}

pub struct TrainedRun {
    pub model: AdaptedModel,
    pub result: RunResult,
}

fn variant_label(cfg: &RunConfig) -> (String, String) {
    let g = if cfg.train.mode.uses_task() {
        cfg.train.granularity.to_string()
    } else {
        "n/a".to_string()
    };
    (cfg.train.mode.to_string(), g)
}

/// Trains adapters, router and heads on the train split.
pub fn train(cfg: &RunConfig, data: &Splits) -> Result<TrainedRun> {
    train_with_hook(cfg, data, |_, _| {})
}

/// Like [`train`], calling `hook(step, touched)` after every optimizer step.
pub fn train_with_hook<F>(cfg: &RunConfig, data: &Splits, hook: F) -> Result<TrainedRun>
where
    F: FnMut(usize, &[String]),
{
    cfg.validate()?;
    check_coverage(cfg, data)?;
    let run = fit(cfg, data, hook)?;
    info!(
        "{} ({}) seed {}: test accuracy {:.4}",
        run.result.variant,
        run.result.granularity,
        cfg.seed,
        run.result.mean_test_accuracy()
    );
    Ok(run)
}

fn fit<F>(cfg: &RunConfig, data: &Splits, mut hook: F) -> Result<TrainedRun>
where
    F: FnMut(usize, &[String]),
{
    let started = Instant::now();
    let mut model = AdaptedModel::new(cfg.model_config()?, cfg.seed)?;
    let snapshot = model.frozen_snapshot();
    let mut opt = Optimizer::new(cfg.train.optimizer, cfg.train.learning_rate);
    let mut shuffle_rng = seed::rng_for(cfg.seed, "shuffle");
    let mut dropout_rng = seed::rng_for(cfg.seed, "dropout");
    let use_dropout = cfg.train.dropout_rate > 0.0;

    let mut epoch_train_loss = Vec::with_capacity(cfg.train.epochs);
    let mut dev_history = Vec::with_capacity(cfg.train.epochs);
    let mut step = 0;
    for epoch in 0..cfg.train.epochs {
        let batches = synthdata::batch_iter(&data.train, cfg.train.batch_size, &mut shuffle_rng)?;
        let (mut total, mut count) = (0.0, 0usize);
        for batch in &batches {
            let mut tape = Tape::new();
            let drop = if use_dropout {
                Some(&mut dropout_rng)
            } else {
                None
            };
            let loss = match joint_loss(&model, &mut tape, &data.train, batch, drop) {
                Ok(l) => l,
                // Non-finite parameters surface first as a softmax failure.
                Err(Error::Numeric { .. }) => {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: value,
                });
            }
            tape.backward(loss)?;
            model.accumulate_grads(&tape)?;
            let touched = opt.step(&mut model);
            hook(step, &touched);
            total += value * batch.len() as f64;
            count += batch.len();
            step += 1;
        }
        let mean = total / count as f64;
        epoch_train_loss.push(mean);
        let dev = evaluate(&model, &data.dev)?;
        debug!(
            "epoch {epoch}: train loss {mean:.5}, dev accuracy {:.4}",
            mean_accuracy(&dev)
        );
        dev_history.push(dev);
    }

    let dev = evaluate(&model, &data.dev)?;
    let test = evaluate(&model, &data.test)?;
    let (variant, granularity) = variant_label(cfg);
    let result = RunResult {
        variant,
        granularity,
        seed: cfg.seed,
        epoch_train_loss,
        dev_history,
        dev,
        test,
        freeze_ok: freeze_check(&model, &snapshot),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoint: None,
    };
    Ok(TrainedRun { model, result })
}

fn check_coverage(cfg: &RunConfig, data: &Splits) -> Result<()> {
    for t in 0..cfg.data.n_tasks {
        for e in 0..cfg.data.n_eras {
            if !data.train.iter().any(|s| s.task_id == t && s.era_id == e) {
                return Err(Error::Data(format!(
                    "training data has no samples for task {t}, era {e}"
                )));
            }
        }
    }
    Ok(())
}

/// Baseline: an independent single-expert LoRA trained per `(task, era)`
/// cell. Cell metrics are collected from each cell's own model.
pub fn train_per_cell(cfg: &RunConfig, data: &Splits) -> Result<RunResult> {
    let started = Instant::now();
    let mut cell_cfg = cfg.clone();
    cell_cfg.train.mode = RoutingMode::NoMoe;
    cell_cfg.train.n_experts = 1;
    let mut result = RunResult {
        variant: "per-cell".into(),
        granularity: "n/a".into(),
        seed: cfg.seed,
        epoch_train_loss: vec![0.0; cfg.train.epochs],
        dev_history: vec![Vec::new(); cfg.train.epochs],
        dev: Vec::new(),
        test: Vec::new(),
        freeze_ok: true,
        wall_clock_secs: 0.0,
        checkpoint: None,
    };
    let n_cells = (cfg.data.n_tasks * cfg.data.n_eras) as f64;
    for t in 0..cfg.data.n_tasks {
        for e in 0..cfg.data.n_eras {
            let cell = data.cell(t, e);
            // Each cell model keeps every head but only sees one cell.
            let run = fit(&cell_cfg, &cell, |_, _| {})?.result;
            for (acc, v) in result
                .epoch_train_loss
                .iter_mut()
                .zip(&run.epoch_train_loss)
            {
                *acc += v / n_cells;
            }
            for (acc, v) in result.dev_history.iter_mut().zip(&run.dev_history) {
                acc.extend(v.iter().copied());
            }
            result.dev.extend(run.dev);
            result.test.extend(run.test);
            result.freeze_ok &= run.freeze_ok;
        }
    }
    result.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(result)
}

/// One row of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub mode: RoutingMode,
    /// `None` for modes that never read the task id.
    pub granularity: Option<Granularity>,
}

impl Variant {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.train.mode = self.mode;
        if self.mode == RoutingMode::NoMoe {
            cfg.train.n_experts = 1;
        }
        if let Some(g) = self.granularity {
            cfg.train.granularity = g;
        }
        cfg
    }
}

/// NoMoE, EraOnly, then TaskOnly / SeparateGates / ConcatSingleGate at
/// both task granularities.
pub fn ablation_grid() -> Vec<Variant> {
    let mut out = Vec::new();
    for mode in RoutingMode::ALL {
        if mode.uses_task() {
            for g in [Granularity::Coarse, Granularity::Fine] {
                out.push(Variant {
                    mode,
                    granularity: Some(g),
                });
            }
        } else {
            out.push(Variant {
                mode,
                granularity: None,
            });
        }
    }
    out
}

/// Runs every variant on the same data and seed. Independent runs execute
/// on separate threads when `parallel` is set; results keep grid order.
pub fn run_ablation_suite(
    base: &RunConfig,
    data: &Splits,
    variants: &[Variant],
    parallel: bool,
) -> Result<Vec<RunResult>> {
    let configs: Vec<RunConfig> = variants.iter().map(|v| v.apply(base)).collect();
    if !parallel {
        return configs
            .iter()
            .map(|c| train(c, data).map(|r| r.result))
            .collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| s.spawn(move || train(c, data).map(|r| r.result)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}
