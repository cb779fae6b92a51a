//! Frozen MLP backbone with Tea adapters at every linear layer and one
//! trainable classification head per task.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterShape, FrozenLinear, TeaAdapterLayer};
use crate::error::{Error, Result};
use crate::router::{RouterDims, RouterParams, RoutingMode, TaskGranularity};
use crate::seed::{self, Rng};
use crate::synthdata::Sample;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            depth: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub backbone: BackboneConfig,
    /// Output width per dataset/task head.
    pub head_widths: Vec<usize>,
    pub n_eras: usize,
    pub adapter: AdapterShape,
    pub d_task: usize,
    pub d_era: usize,
    pub d_hidden: usize,
    pub mode: RoutingMode,
    pub granularity: TaskGranularity,
    pub per_layer_router: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.adapter.validate()?;
        if self.d_in == 0 || self.backbone.d_model == 0 || self.backbone.depth == 0 {
            return Err(Error::Config(
                "d_in, d_model and depth must be positive".into(),
            ));
        }
        if self.head_widths.is_empty() || self.head_widths.contains(&0) {
            return Err(Error::Config(
                "every task needs a head of positive width".into(),
            ));
        }
        if self.granularity.n_datasets() != self.head_widths.len() {
            return Err(Error::Config(format!(
                "granularity table covers {} datasets but {} heads are configured",
                self.granularity.n_datasets(),
                self.head_widths.len()
            )));
        }
        if self.mode == RoutingMode::NoMoe && self.adapter.n_experts != 1 {
            return Err(Error::Config(format!(
                "no-moe mode needs n_experts = 1, got {}",
                self.adapter.n_experts
            )));
        }
        Ok(())
    }

    fn router_dims(&self) -> RouterDims {
        RouterDims {
            n_tasks: self.granularity.n_router_tasks(),
            n_eras: self.n_eras,
            n_experts: self.adapter.n_experts,
            d_task: self.d_task,
            d_era: self.d_era,
            d_hidden: self.d_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `classes × d_model`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    config: ModelConfig,
    pub layers: Vec<TeaAdapterLayer>,
    /// One shared router, or one per layer.
    pub routers: Vec<RouterParams>,
    pub heads: Vec<Head>,
}

/// Copies of every frozen tensor, for [`freeze_check`].
#[derive(Debug, Clone)]
pub struct FrozenSnapshot(Vec<(String, Tensor)>);

impl AdaptedModel {
    /// Each component draws from its own stream derived from `seed`, so
    /// models differing only in routing mode share backbone, adapter and
    /// head initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d_model = config.backbone.d_model;
        let mut backbone_rng = seed::rng_for(seed, "init.backbone");
        let mut adapter_rng = seed::rng_for(seed, "init.adapters");
        let mut router_rng = seed::rng_for(seed, "init.router");
        let mut head_rng = seed::rng_for(seed, "init.heads");

        let mut layers = Vec::with_capacity(config.backbone.depth);
        for l in 0..config.backbone.depth {
            let d_in = if l == 0 { config.d_in } else { d_model };
            let base = FrozenLinear::random(d_in, d_model, &mut backbone_rng);
            layers.push(TeaAdapterLayer::new(
                l,
                base,
                config.adapter,
                &mut adapter_rng,
            )?);
        }

        let dims = config.router_dims();
        let routers = if config.per_layer_router {
            (0..config.backbone.depth)
                .map(|l| RouterParams::new(format!("router{l}"), dims, &mut router_rng))
                .collect::<Result<_>>()?
        } else {
            vec![RouterParams::new("router", dims, &mut router_rng)?]
        };

        let heads = config
            .head_widths
            .iter()
            .map(|&c| Head {
                weight: Tensor::randn(&[c, d_model], 1.0 / d_model as f64, &mut head_rng)
                    .with_requires_grad(true),
                bias: Tensor::zeros(&[c]).with_requires_grad(true),
            })
            .collect();

        Ok(Self {
            config,
            layers,
            routers,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> RoutingMode {
        self.config.mode
    }

    pub fn set_mode(&mut self, mode: RoutingMode) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.mode = mode;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn n_experts(&self) -> usize {
        self.config.adapter.n_experts
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.named_tensors());
        }
        for r in &self.routers {
            out.extend(r.named_tensors());
        }
        for (t, h) in self.heads.iter().enumerate() {
            out.push((format!("head{t}.W"), &h.weight));
            out.push((format!("head{t}.b"), &h.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.named_tensors_mut());
        }
        for r in &mut self.routers {
            out.extend(r.named_tensors_mut());
        }
        for (t, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("head{t}.W"), &mut h.weight));
            out.push((format!("head{t}.b"), &mut h.bias));
        }
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.named_tensors()
            .into_iter()
            .find_map(|(n, t)| (n == name).then_some(t))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_tensors_mut()
            .into_iter()
            .find_map(|(n, t)| (n == name).then_some(t))
    }

    /// Names of every tensor with `requires_grad`.
    pub fn trainable_names(&self) -> Vec<String> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n)
            .collect()
    }

    pub fn frozen_snapshot(&self) -> FrozenSnapshot {
        FrozenSnapshot(
            self.named_tensors()
                .into_iter()
                .filter(|(_, t)| !t.requires_grad())
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        )
    }

    /// Overwrites tensor payloads by name. Every model tensor must be
    /// present with a matching shape.
    pub fn load_tensors<'a, I>(&mut self, entries: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a Tensor)>,
    {
        let map: std::collections::HashMap<&str, &Tensor> = entries.into_iter().collect();
        for (name, t) in self.named_tensors_mut() {
            let src = map
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            if src.shape() != t.shape() {
                return Err(Error::shape("load_tensors", t.shape(), src.shape()));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    fn router_for_layer(&self, l: usize) -> &RouterParams {
        if self.routers.len() == 1 {
            &self.routers[0]
        } else {
            &self.routers[l]
        }
    }

    fn check_ids(&self, task: usize, era: usize) -> Result<usize> {
        if task >= self.heads.len() {
            return Err(Error::Lookup {
                kind: "task",
                id: task,
                len: self.heads.len(),
            });
        }
        if era >= self.config.n_eras {
            return Err(Error::Lookup {
                kind: "era",
                id: era,
                len: self.config.n_eras,
            });
        }
        self.config.granularity.map(task)
    }

    /// Routing weights `(w_t, w_e)` used at layer `l` for a sample of
    /// dataset `task` in era `era`.
    pub fn route(&self, l: usize, task: usize, era: usize) -> Result<(Tensor, Tensor)> {
        let router_task = self.check_ids(task, era)?;
        self.router_for_layer(l)
            .route(self.config.mode, router_task, era)
    }

    /// Records the full forward pass for a batch sharing `(task, era)`.
    /// `dropout = None` is eval mode.
    pub fn record_forward(
        &self,
        tape: &mut Tape,
        x: Var,
        task: usize,
        era: usize,
        mut dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let router_task = self.check_ids(task, era)?;
        let mode = self.config.mode;
        let mut shared = None;
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let (wt, we) = match (self.routers.len(), shared) {
                (1, Some(w)) => w,
                _ => {
                    let w = self
                        .router_for_layer(l)
                        .record_route(tape, mode, router_task, era)?;
                    shared = Some(w);
                    w
                }
            };
            h = layer.record_tea(tape, h, wt, we, dropout.as_deref_mut())?;
            h = tape.relu(h);
        }
        let head = &self.heads[task];
        let w = tape.param(&format!("head{task}.W"), &head.weight);
        let b = tape.param(&format!("head{task}.b"), &head.bias);
        let wt = tape.transpose(w)?;
        let logits = tape.matmul(h, wt)?;
        tape.add_row(logits, b)
    }

    /// Forward over samples referenced by index; rejects batches that mix
    /// metadata.
    pub fn record_forward_samples(
        &self,
        tape: &mut Tape,
        samples: &[&Sample],
        dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (task, era) = (first.task_id, first.era_id);
        if let Some(bad) = samples
            .iter()
            .find(|s| s.task_id != task || s.era_id != era)
        {
            return Err(Error::Contract(format!(
                "batch mixes (task {task}, era {era}) with (task {}, era {}); regroup batches by metadata",
                bad.task_id, bad.era_id
            )));
        }
        let d = first.x.len();
        let data = samples.iter().flat_map(|s| s.x.iter().copied()).collect();
        let x = tape.constant(Tensor::matrix(samples.len(), d, data)?);
        self.record_forward(tape, x, task, era, dropout)
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Tensor, task: usize, era: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.record_forward(&mut tape, xv, task, era, None)?;
        Ok(tape.value(out).clone())
    }

    /// Frozen backbone followed by the task head, ignoring adapters.
    pub fn predict_backbone_only(&self, x: &Tensor, task: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut h = tape.constant(x.clone());
        for layer in &self.layers {
            h = layer.record_base(&mut tape, h)?;
            h = tape.relu(h);
        }
        let head = &self.heads[task];
        let w = tape.constant(head.weight.clone());
        let b = tape.constant(head.bias.clone());
        let wt = tape.transpose(w)?;
        let logits = tape.matmul(h, wt)?;
        let out = tape.add_row(logits, b)?;
        Ok(tape.value(out).clone())
    }

    /// Accumulates tape gradients into the owning tensors.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        for (name, t) in self.named_tensors_mut() {
            if let Some(g) = tape.param_grad(&name) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }
}

/// True iff every frozen tensor is bit-identical to the snapshot.
pub fn freeze_check(model: &AdaptedModel, snapshot: &FrozenSnapshot) -> bool {
    snapshot
        .0
        .iter()
        .all(|(name, t)| model.tensor(name).is_some_and(|cur| cur.bit_eq(t)))
}
