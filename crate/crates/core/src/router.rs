//! Metadata-driven expert routing.
//!
//! A sample's task id and era id each select a row of a learnable
//! embedding table; a linear projection and a softmax turn the row into a
//! weight vector over the `N` experts. Routing depends only on metadata,
//! never on the input features, so every sample of a `(task, era)` cell
//! receives the same weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    /// Independent task and era gates (the full model).
    #[serde(rename = "separate")]
    SeparateGates,
    /// One MLP gate over the concatenated task and era embeddings.
    #[serde(rename = "concat")]
    ConcatSingleGate,
    TaskOnly,
    EraOnly,
    /// Single expert, no routing.
    NoMoe,
}

impl RoutingMode {
    pub const ALL: [RoutingMode; 5] = [
        RoutingMode::NoMoe,
        RoutingMode::EraOnly,
        RoutingMode::TaskOnly,
        RoutingMode::SeparateGates,
        RoutingMode::ConcatSingleGate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::SeparateGates => "separate",
            RoutingMode::ConcatSingleGate => "concat",
            RoutingMode::TaskOnly => "task-only",
            RoutingMode::EraOnly => "era-only",
            RoutingMode::NoMoe => "no-moe",
        }
    }

    /// Whether the mode reads the task id at all.
    pub fn uses_task(self) -> bool {
        matches!(
            self,
            RoutingMode::SeparateGates | RoutingMode::ConcatSingleGate | RoutingMode::TaskOnly
        )
    }
}

impl std::fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RoutingMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown routing mode '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One id per task family.
    Coarse,
    /// One id per dataset.
    Fine,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Coarse => "coarse",
            Granularity::Fine => "fine",
        }
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Granularity::Coarse),
            "fine" => Ok(Granularity::Fine),
            other => Err(Error::Config(format!("unknown granularity '{other}'"))),
        }
    }
}

/// Dataset id → router task id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskGranularity {
    pub kind: Granularity,
    table: Vec<usize>,
}

impl TaskGranularity {
    pub fn fine(n_datasets: usize) -> Self {
        Self {
            kind: Granularity::Fine,
            table: (0..n_datasets).collect(),
        }
    }

    /// Coarse mapping from an explicit table. Router ids must be dense:
    /// every id below the maximum is used by some dataset.
    pub fn coarse(table: Vec<usize>) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::Config("granularity table is empty".into()));
        }
        let n = table.iter().max().unwrap() + 1;
        if let Some(missing) = (0..n).find(|id| !table.contains(id)) {
            return Err(Error::Config(format!(
                "granularity table skips router task id {missing}"
            )));
        }
        Ok(Self {
            kind: Granularity::Coarse,
            table,
        })
    }

    pub fn n_datasets(&self) -> usize {
        self.table.len()
    }

    pub fn n_router_tasks(&self) -> usize {
        self.table.iter().max().map_or(0, |m| m + 1)
    }

    pub fn table(&self) -> &[usize] {
        &self.table
    }

    pub fn map(&self, dataset: usize) -> Result<usize> {
        self.table.get(dataset).copied().ok_or(Error::Lookup {
            kind: "dataset",
            id: dataset,
            len: self.table.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterDims {
    pub n_tasks: usize,
    pub n_eras: usize,
    pub n_experts: usize,
    pub d_task: usize,
    pub d_era: usize,
    pub d_hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    prefix: String,
    /// `n_tasks × d_task`
    pub task_embed: Tensor,
    /// `n_eras × d_era`
    pub era_embed: Tensor,
    /// `d_task × N`
    pub task_proj: Tensor,
    /// `d_era × N`
    pub era_proj: Tensor,
    /// `(d_task + d_era) × d_hidden`, concat gate only
    pub concat_hidden: Tensor,
    /// `d_hidden × N`, concat gate only
    pub concat_out: Tensor,
}

impl RouterParams {
    /// Embeddings `~ N(0, 1)`, projections `~ N(0, 1/fan_in)`.
    pub fn new(prefix: impl Into<String>, dims: RouterDims, rng: &mut Rng) -> Result<Self> {
        let RouterDims {
            n_tasks,
            n_eras,
            n_experts,
            d_task,
            d_era,
            d_hidden,
        } = dims;
        if n_tasks == 0 || n_eras == 0 {
            return Err(Error::Config(
                "router needs at least one task and one era".into(),
            ));
        }
        if n_experts == 0 || d_task == 0 || d_era == 0 || d_hidden == 0 {
            return Err(Error::Config("router dimensions must be positive".into()));
        }
        let p = |t: Tensor| t.with_requires_grad(true);
        Ok(Self {
            prefix: prefix.into(),
            task_embed: p(Tensor::randn(&[n_tasks, d_task], 1.0, rng)),
            era_embed: p(Tensor::randn(&[n_eras, d_era], 1.0, rng)),
            task_proj: p(Tensor::randn(
                &[d_task, n_experts],
                1.0 / d_task as f64,
                rng,
            )),
            era_proj: p(Tensor::randn(&[d_era, n_experts], 1.0 / d_era as f64, rng)),
            concat_hidden: p(Tensor::randn(
                &[d_task + d_era, d_hidden],
                1.0 / (d_task + d_era) as f64,
                rng,
            )),
            concat_out: p(Tensor::randn(
                &[d_hidden, n_experts],
                1.0 / d_hidden as f64,
                rng,
            )),
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.task_embed.rows()
    }

    pub fn n_eras(&self) -> usize {
        self.era_embed.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.task_proj.cols()
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let p = &self.prefix;
        vec![
            (format!("{p}.V_t"), &self.task_embed),
            (format!("{p}.V_e"), &self.era_embed),
            (format!("{p}.W_T"), &self.task_proj),
            (format!("{p}.W_E"), &self.era_proj),
            (format!("{p}.M1"), &self.concat_hidden),
            (format!("{p}.M2"), &self.concat_out),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let p = &self.prefix;
        vec![
            (format!("{p}.V_t"), &mut self.task_embed),
            (format!("{p}.V_e"), &mut self.era_embed),
            (format!("{p}.W_T"), &mut self.task_proj),
            (format!("{p}.W_E"), &mut self.era_proj),
            (format!("{p}.M1"), &mut self.concat_hidden),
            (format!("{p}.M2"), &mut self.concat_out),
        ]
    }

    fn param(&self, tape: &mut Tape, name: &str, t: &Tensor) -> Var {
        tape.param(&format!("{}.{name}", self.prefix), t)
    }

    fn check_id(id: usize, len: usize, kind: &'static str) -> Result<()> {
        if id >= len {
            return Err(Error::Lookup { kind, id, len });
        }
        Ok(())
    }

    fn record_gate(
        &self,
        tape: &mut Tape,
        (table_name, table): (&str, &Tensor),
        (proj_name, proj): (&str, &Tensor),
        id: usize,
    ) -> Result<Var> {
        let table = self.param(tape, table_name, table);
        let proj = self.param(tape, proj_name, proj);
        let v = tape.row(table, id)?;
        let logits = tape.matmul(v, proj)?;
        tape.softmax(logits)
    }

    /// `softmax(W_Tᵀ V_t[task])` as a `1 × N` row.
    pub fn record_task_weights(&self, tape: &mut Tape, task: usize) -> Result<Var> {
        Self::check_id(task, self.n_tasks(), "task")?;
        self.record_gate(
            tape,
            ("V_t", &self.task_embed),
            ("W_T", &self.task_proj),
            task,
        )
    }

    pub fn record_era_weights(&self, tape: &mut Tape, era: usize) -> Result<Var> {
        Self::check_id(era, self.n_eras(), "era")?;
        self.record_gate(tape, ("V_e", &self.era_embed), ("W_E", &self.era_proj), era)
    }

    /// `softmax(M2ᵀ relu(M1ᵀ [V_t[task]; V_e[era]]))`.
    pub fn record_concat_weights(&self, tape: &mut Tape, task: usize, era: usize) -> Result<Var> {
        Self::check_id(task, self.n_tasks(), "task")?;
        Self::check_id(era, self.n_eras(), "era")?;
        let vt = self.param(tape, "V_t", &self.task_embed);
        let ve = self.param(tape, "V_e", &self.era_embed);
        let m1 = self.param(tape, "M1", &self.concat_hidden);
        let m2 = self.param(tape, "M2", &self.concat_out);
        let t = tape.row(vt, task)?;
        let e = tape.row(ve, era)?;
        let z = tape.concat_cols(t, e)?;
        let h = tape.matmul(z, m1)?;
        let h = tape.relu(h);
        let logits = tape.matmul(h, m2)?;
        tape.softmax(logits)
    }

    fn uniform(&self, tape: &mut Tape) -> Var {
        let n = self.n_experts();
        tape.constant(Tensor::filled(&[1, n], 1.0 / n as f64))
    }

    /// Dispatches on the routing mode and returns `(w_t, w_e)`.
    pub fn record_route(
        &self,
        tape: &mut Tape,
        mode: RoutingMode,
        task: usize,
        era: usize,
    ) -> Result<(Var, Var)> {
        match mode {
            RoutingMode::SeparateGates => {
                let wt = self.record_task_weights(tape, task)?;
                let we = self.record_era_weights(tape, era)?;
                Ok((wt, we))
            }
            RoutingMode::ConcatSingleGate => {
                let z = self.record_concat_weights(tape, task, era)?;
                let u = self.uniform(tape);
                Ok((z, u))
            }
            RoutingMode::TaskOnly => {
                let wt = self.record_task_weights(tape, task)?;
                let u = self.uniform(tape);
                Ok((wt, u))
            }
            RoutingMode::EraOnly => {
                let u = self.uniform(tape);
                let we = self.record_era_weights(tape, era)?;
                Ok((u, we))
            }
            RoutingMode::NoMoe => {
                if self.n_experts() != 1 {
                    return Err(Error::Config(format!(
                        "no-moe routing needs exactly one expert, got {}",
                        self.n_experts()
                    )));
                }
                Self::check_id(task, self.n_tasks(), "task")?;
                Self::check_id(era, self.n_eras(), "era")?;
                let one = tape.constant(Tensor::filled(&[1, 1], 1.0));
                Ok((one, one))
            }
        }
    }

    fn eval<F>(&self, f: F) -> Result<Tensor>
    where
        F: FnOnce(&mut Tape) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let v = f(&mut tape)?;
        let t = tape.value(v);
        Tensor::new(vec![t.len()], t.data().to_vec())
    }

    pub fn task_weights(&self, task: usize) -> Result<Tensor> {
        self.eval(|tape| self.record_task_weights(tape, task))
    }

    pub fn era_weights(&self, era: usize) -> Result<Tensor> {
        self.eval(|tape| self.record_era_weights(tape, era))
    }

    /// The single concatenated gate, paired with uniform era weights.
    pub fn concat_gate_weights(&self, task: usize, era: usize) -> Result<(Tensor, Tensor)> {
        let z = self.eval(|tape| self.record_concat_weights(tape, task, era))?;
        let n = self.n_experts();
        Ok((z, Tensor::filled(&[n], 1.0 / n as f64)))
    }

    pub fn route(&self, mode: RoutingMode, task: usize, era: usize) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let (wt, we) = self.record_route(&mut tape, mode, task, era)?;
        let flat = |v: Var| {
            let t = tape.value(v);
            Tensor::new(vec![t.len()], t.data().to_vec())
        };
        Ok((flat(wt)?, flat(we)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    fn dims(n_tasks: usize, n_eras: usize, n: usize) -> RouterDims {
        RouterDims {
            n_tasks,
            n_eras,
            n_experts: n,
            d_task: 4,
            d_era: 3,
            d_hidden: 5,
        }
    }

    fn router(seed: u64, n: usize) -> RouterParams {
        RouterParams::new("router", dims(4, 2, n), &mut rng_for(seed, "router")).unwrap()
    }

    fn assert_uniform(w: &Tensor) {
        let n = w.len() as f64;
        assert!(w.data().iter().all(|&v| v == 1.0 / n), "{w:?}");
    }

    #[test]
    fn zero_projection_gives_uniform() {
        let mut r = router(1, 4);
        r.task_proj = Tensor::zeros(r.task_proj.shape());
        r.era_proj = Tensor::zeros(r.era_proj.shape());
        r.concat_out = Tensor::zeros(r.concat_out.shape());
        for t in 0..4 {
            assert_uniform(&r.task_weights(t).unwrap());
        }
        assert_uniform(&r.era_weights(1).unwrap());
        assert_uniform(&r.concat_gate_weights(2, 1).unwrap().0);
        let (wt, we) = r.route(RoutingMode::SeparateGates, 3, 0).unwrap();
        assert_uniform(&wt);
        assert_uniform(&we);
    }

    #[test]
    fn identical_rows_give_identical_weights() {
        let mut r = router(2, 4);
        let row: Vec<f64> = r.task_embed.row(0).to_vec();
        r.task_embed.data_mut()[4..8].copy_from_slice(&row);
        assert_eq!(r.task_weights(0).unwrap(), r.task_weights(1).unwrap());
        let row: Vec<f64> = r.era_embed.row(0).to_vec();
        r.era_embed.data_mut()[3..6].copy_from_slice(&row);
        assert_eq!(r.era_weights(0).unwrap(), r.era_weights(1).unwrap());
    }

    #[test]
    fn hand_computed_task_gate() {
        let mut r = RouterParams::new(
            "router",
            RouterDims {
                n_tasks: 1,
                n_eras: 1,
                n_experts: 2,
                d_task: 2,
                d_era: 2,
                d_hidden: 2,
            },
            &mut rng_for(0, "r"),
        )
        .unwrap();
        r.task_embed = Tensor::from_rows(&[&[1.0, 0.0]]);
        r.task_proj = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 0.0]]);
        let w = r.task_weights(0).unwrap();
        // e² / (e² + 1) and 1 / (e² + 1)
        let e2 = 2f64.exp();
        assert!((w.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((w.data()[0] - 0.8808).abs() < 1e-4);
        assert!((w.data()[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn weights_normalize_across_seeds() {
        for seed in 0..100 {
            let r = router(seed, 8);
            for e in 0..2 {
                let w = r.era_weights(e).unwrap();
                assert!((w.sum() - 1.0).abs() <= 1e-12);
                assert!(w.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            let (z, _) = r.concat_gate_weights(seed as usize % 4, 1).unwrap();
            assert!((z.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn concat_gate_is_deterministic() {
        let r = router(7, 4);
        let a = r.concat_gate_weights(1, 1).unwrap();
        let b = r.concat_gate_weights(1, 1).unwrap();
        assert!(a.0.bit_eq(&b.0));
        assert_uniform(&a.1);
    }

    #[test]
    fn mode_contracts() {
        let r = router(3, 4);
        let (wt, we) = r.route(RoutingMode::TaskOnly, 2, 1).unwrap();
        assert_uniform(&we);
        assert_eq!(wt, r.task_weights(2).unwrap());
        let (wt, we) = r.route(RoutingMode::EraOnly, 2, 1).unwrap();
        assert_uniform(&wt);
        assert_eq!(we, r.era_weights(1).unwrap());
        assert!(matches!(
            r.route(RoutingMode::NoMoe, 0, 0),
            Err(Error::Config(_))
        ));
        let single = router(3, 1);
        let (wt, we) = single.route(RoutingMode::NoMoe, 0, 0).unwrap();
        assert_eq!(wt.data(), &[1.0]);
        assert_eq!(we.data(), &[1.0]);
    }

    #[test]
    fn out_of_range_ids() {
        let r = router(0, 2);
        assert!(matches!(
            r.task_weights(4),
            Err(Error::Lookup { kind: "task", .. })
        ));
        assert!(matches!(
            r.era_weights(2),
            Err(Error::Lookup { kind: "era", .. })
        ));
    }

    #[test]
    fn coarse_mapping_shares_task_weights() {
        let g = TaskGranularity::coarse(vec![0, 0, 1, 1]).unwrap();
        assert_eq!(g.n_router_tasks(), 2);
        let r = RouterParams::new("router", dims(2, 2, 4), &mut rng_for(5, "r")).unwrap();
        let w0 = r
            .route(RoutingMode::SeparateGates, g.map(0).unwrap(), 0)
            .unwrap();
        let w1 = r
            .route(RoutingMode::SeparateGates, g.map(1).unwrap(), 0)
            .unwrap();
        let w2 = r
            .route(RoutingMode::SeparateGates, g.map(2).unwrap(), 0)
            .unwrap();
        assert!(w0.0.bit_eq(&w1.0));
        assert_ne!(w0.0, w2.0);
        assert!(g.map(4).is_err());
        assert!(TaskGranularity::coarse(vec![0, 2]).is_err());
        assert_eq!(TaskGranularity::fine(3).table(), &[0, 1, 2]);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in RoutingMode::ALL {
            assert_eq!(m.as_str().parse::<RoutingMode>().unwrap(), m);
        }
        assert!("bogus".parse::<RoutingMode>().is_err());
    }
}
