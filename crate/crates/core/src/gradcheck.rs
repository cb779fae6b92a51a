//! Central-difference gradient oracle, and a whole-model check built on it.

use crate::backbone::AdaptedModel;
use crate::config::RunConfig;
use crate::error::Result;
use crate::router::RoutingMode;
use crate::seed;
use crate::synthdata::{self, Sample};
use crate::tape::{OpKind, Tape};
use crate::tensor::Tensor;

/// Finite-difference step used by the model check.
pub const STEP: f64 = 1e-5;
/// Largest accepted per-tensor relative error.
pub const TOLERANCE: f64 = 1e-5;

/// Denominator floor for [`relative_error`], so an all-zero gradient
/// compared against round-off noise does not divide by zero.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Central-difference estimate `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, step: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as x")
}

/// Max-norm relative error between two gradient buffers:
/// `max|a−n| / max(max|a|, max|n|, SCALE_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(SCALE_FLOOR)
}

/// Settings for [`model_gradcheck`].
#[derive(Debug, Clone)]
pub struct GradcheckSettings {
    pub seeds: Vec<u64>,
    pub modes: Vec<RoutingMode>,
    pub samples_per_cell: usize,
    /// Corrupts one backward rule; used to show the check can fail.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            modes: RoutingMode::ALL.to_vec(),
            samples_per_cell: 3,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub seed: u64,
    pub mode: RoutingMode,
    pub name: String,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }

    pub fn max_relative_error(&self) -> f64 {
        self.worst().map_or(0.0, |c| c.relative_error)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.relative_error <= TOLERANCE)
    }
}

/// The small model the check runs on: `d_model = 8`, `N = 2`, `r = 4`,
/// with data shape and routing mode taken from `base`.
pub fn tiny_config(base: &RunConfig, mode: RoutingMode) -> RunConfig {
    let mut cfg = base.clone();
    cfg.backbone.d_model = 8;
    cfg.train.rank = 4;
    cfg.train.mode = mode;
    cfg.train.n_experts = if mode == RoutingMode::NoMoe { 1 } else { 2 };
    cfg.router.d_task = 4;
    cfg.router.d_era = 4;
    cfg.router.d_hidden = 6;
    cfg
}

/// Sum over every `(task, era)` cell of the mean cross-entropy of a small
/// batch, with dropout masks replayed from a fixed seed so the loss is a
/// deterministic function of the parameters.
fn total_loss(
    model: &AdaptedModel,
    tape: &mut Tape,
    samples: &[Sample],
    dropout_seed: u64,
) -> Result<crate::tape::Var> {
    let mut rng = seed::rng_for(dropout_seed, "gradcheck.dropout");
    let batches = synthdata::cell_batches(samples, usize::MAX)?;
    let mut total = None;
    for b in &batches {
        let loss = crate::training::joint_loss(model, tape, samples, b, Some(&mut rng))?;
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    Ok(total.expect("at least one cell"))
}

/// Compares backward-pass gradients of every trainable tensor against
/// central differences. Adapter up-projections are randomized first so that
/// every gradient path is live.
pub fn model_gradcheck(base: &RunConfig, settings: &GradcheckSettings) -> Result<GradcheckReport> {
    let mut checks = Vec::new();
    for &seed_value in &settings.seeds {
        let mut data_cfg = base.clone();
        data_cfg.seed = seed_value;
        data_cfg.data.train_per_cell = settings.samples_per_cell;
        data_cfg.data.dev_per_cell = 1;
        data_cfg.data.test_per_cell = 1;
        let samples = synthdata::generate(&data_cfg.synth_spec())?.train;
        for &mode in &settings.modes {
            let mut cfg = tiny_config(&data_cfg, mode);
            if cfg.train.dropout_rate == 0.0 {
                cfg.train.dropout_rate = 0.1;
            }
            cfg.validate()?;
            let mut model = AdaptedModel::new(cfg.model_config()?, seed_value)?;
            let mut rng = seed::rng_for(seed_value, "gradcheck.B");
            for layer in &mut model.layers {
                for e in &mut layer.experts {
                    let shape = e.b.shape().to_vec();
                    let fresh = Tensor::randn(&shape, 0.25, &mut rng);
                    e.b.data_mut().copy_from_slice(fresh.data());
                }
            }

            let mut tape = Tape::new();
            if let Some(kind) = settings.fault {
                tape.inject_backward_fault(kind);
            }
            let loss = total_loss(&model, &mut tape, &samples, seed_value)?;
            tape.backward(loss)?;

            for name in model.trainable_names() {
                let x = model.tensor(&name).expect("listed tensor").clone();
                let analytic = match tape.param_grad(&name) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; x.len()],
                };
                let mut probe = model.clone();
                let mut failure = None;
                let numeric = finite_diff_grad(
                    |t| {
                        probe
                            .tensor_mut(&name)
                            .expect("listed tensor")
                            .data_mut()
                            .copy_from_slice(t.data());
                        let mut tp = Tape::new();
                        match total_loss(&probe, &mut tp, &samples, seed_value) {
                            Ok(v) => tp.value(v).data()[0],
                            Err(e) => {
                                failure.get_or_insert(e);
                                f64::NAN
                            }
                        }
                    },
                    &x,
                    STEP,
                );
                if let Some(e) = failure {
                    return Err(e);
                }
                checks.push(TensorCheck {
                    seed: seed_value,
                    mode,
                    name,
                    relative_error: relative_error(&analytic, numeric.data()),
                });
            }
        }
    }
    Ok(GradcheckReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_derivative() {
        let g = finite_diff_grad(|t| t.sum(), &Tensor::vector(vec![5.0]), 1e-5);
        assert!((g.data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn square_derivative() {
        let g = finite_diff_grad(|t| t.data()[0].powi(2), &Tensor::vector(vec![3.0]), 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_scale() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[2.0, 1.0], &[2.0, 1.1]) - 0.05).abs() < 1e-12);
    }
}
