//! Run configuration: one TOML document covering data, backbone, router
//! and training settings. Every field has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterShape;
use crate::backbone::{BackboneConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::router::{Granularity, RoutingMode, TaskGranularity};
use crate::synthdata::SynthSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Total adapter rank, split evenly across experts.
    pub rank: usize,
    pub n_experts: usize,
    /// λ = alpha / rank; defaults to `rank` (λ = 1).
    pub alpha: Option<f64>,
    pub dropout_rate: f64,
    pub mode: RoutingMode,
    pub granularity: Granularity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::default(),
            rank: 16,
            n_experts: 8,
            alpha: None,
            dropout_rate: 0.05,
            mode: RoutingMode::SeparateGates,
            granularity: Granularity::Fine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub d_task: usize,
    pub d_era: usize,
    pub d_hidden: usize,
    pub per_layer: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            d_task: 16,
            d_era: 16,
            d_hidden: 32,
            per_layer: false,
        }
    }
}

/// Dataset id → coarse task id, used when `train.granularity = "coarse"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GranularityTable {
    pub coarse: Vec<usize>,
}

impl Default for GranularityTable {
    fn default() -> Self {
        Self {
            coarse: vec![0, 0, 1, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: SynthSpec,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub router: RouterConfig,
    pub granularity_table: GranularityTable,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: SynthSpec::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            router: RouterConfig::default(),
            granularity_table: GranularityTable::default(),
        }
    }
}

/// Command-line overrides; set fields win over file values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub n_experts: Option<usize>,
    pub rank: Option<usize>,
    pub mode: Option<RoutingMode>,
    pub granularity: Option<Granularity>,
    pub conflict: Option<f64>,
    pub epochs: Option<usize>,
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.n_experts {
            self.train.n_experts = v;
        }
        if let Some(v) = o.rank {
            self.train.rank = v;
        }
        if let Some(v) = o.mode {
            self.train.mode = v;
        }
        if let Some(v) = o.granularity {
            self.train.granularity = v;
        }
        if let Some(v) = o.conflict {
            self.data.conflict = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        self.validate()
    }

    /// Field-level validation of the whole document.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.n_experts == 0 {
            return Err(field_err("train.n_experts", "must be at least 1"));
        }
        if t.rank == 0 {
            return Err(field_err("train.rank", "must be at least 1"));
        }
        if !t.rank.is_multiple_of(t.n_experts) {
            return Err(field_err(
                "train.rank",
                format!(
                    "{} is not divisible by train.n_experts = {}",
                    t.rank, t.n_experts
                ),
            ));
        }
        if !(t.learning_rate.is_finite() && t.learning_rate >= 0.0) {
            return Err(field_err(
                "train.learning_rate",
                "must be finite and non-negative",
            ));
        }
        if t.batch_size == 0 {
            return Err(field_err("train.batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&t.dropout_rate) {
            return Err(field_err("train.dropout_rate", "must lie in [0, 1)"));
        }
        if let Some(a) = t.alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(field_err("train.alpha", "must be positive"));
            }
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = t.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(field_err(
                    "train.optimizer",
                    "adam needs beta1, beta2 in [0, 1) and eps > 0",
                ));
            }
        }
        if t.mode == RoutingMode::NoMoe && t.n_experts != 1 {
            return Err(field_err(
                "train.mode",
                format!("no-moe needs train.n_experts = 1, got {}", t.n_experts),
            ));
        }
        self.data.validate().map_err(|e| {
            field_err(
                "data",
                e.to_string().trim_start_matches("configuration error: "),
            )
        })?;
        if self.backbone.d_model == 0 || self.backbone.depth == 0 {
            return Err(field_err("backbone", "d_model and depth must be positive"));
        }
        let r = &self.router;
        if r.d_task == 0 || r.d_era == 0 || r.d_hidden == 0 {
            return Err(field_err(
                "router",
                "d_task, d_era and d_hidden must be positive",
            ));
        }
        if t.granularity == Granularity::Coarse {
            if self.granularity_table.coarse.len() != self.data.n_tasks {
                return Err(field_err(
                    "granularity_table.coarse",
                    format!(
                        "has {} entries but data.n_tasks = {}",
                        self.granularity_table.coarse.len(),
                        self.data.n_tasks
                    ),
                ));
            }
            TaskGranularity::coarse(self.granularity_table.coarse.clone())
                .map_err(|e| field_err("granularity_table.coarse", e))?;
        }
        Ok(())
    }

    /// Data spec with the master seed applied.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn task_granularity(&self) -> Result<TaskGranularity> {
        match self.train.granularity {
            Granularity::Fine => Ok(TaskGranularity::fine(self.data.n_tasks)),
            Granularity::Coarse => TaskGranularity::coarse(self.granularity_table.coarse.clone()),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let t = &self.train;
        Ok(ModelConfig {
            d_in: self.data.d_in,
            backbone: self.backbone.clone(),
            head_widths: self.data.head_widths(),
            n_eras: self.data.n_eras,
            adapter: AdapterShape {
                rank: t.rank,
                n_experts: t.n_experts,
                alpha: t.alpha.unwrap_or(t.rank as f64),
                dropout_rate: t.dropout_rate,
            },
            d_task: self.router.d_task,
            d_era: self.router.d_era,
            d_hidden: self.router.d_hidden,
            mode: t.mode,
            granularity: self.task_granularity()?,
            per_layer_router: self.router.per_layer,
        })
    }
}
