//! Low-rank adapter layers over a frozen linear map.
//!
//! Three forward passes share one parameter layout:
//!
//! * plain LoRA: `h = x W0ᵀ + λ (x Aᵀ) Bᵀ` (single expert),
//! * MoELoRA:    `h = x W0ᵀ + λ Σᵢ ωᵢ (x Aᵢᵀ) Bᵢᵀ`,
//! * Tea:        `h = x W0ᵀ + Σᵢ w_tⁱ λ ((drop(x) Aᵢᵀ) w_eⁱ) Bᵢᵀ`.
//!
//! `Aᵢ` is `r_e × d_in` (down-projection) and `Bᵢ` is `d_out × r_e`
//! (up-projection) with `r_e = r / N`, so the expert set always holds
//! `r (d_in + d_out)` trainable values regardless of `N`.

use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLinear {
    /// `d_out × d_in`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl FrozenLinear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "frozen weight must be a matrix, got {:?}",
                weight.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.rows()] {
                return Err(Error::shape("frozen bias", weight.shape(), b.shape()));
            }
        }
        Ok(Self {
            weight: weight.with_requires_grad(false),
            bias: bias.map(|b| b.with_requires_grad(false)),
        })
    }

    /// He-style Gaussian weight and a small Gaussian bias.
    pub fn random(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let weight = Tensor::randn(&[d_out, d_in], 2.0 / d_in as f64, rng);
        let bias = Tensor::randn(&[d_out], 0.01, rng);
        Self::new(weight, Some(bias)).expect("consistent shapes")
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    /// `r_e × d_in`
    pub a: Tensor,
    /// `d_out × r_e`
    pub b: Tensor,
}

impl ExpertParams {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterShape {
    pub rank: usize,
    pub n_experts: usize,
    /// λ = alpha / rank.
    pub alpha: f64,
    pub dropout_rate: f64,
}

impl AdapterShape {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.rank == 0 {
            return Err(Error::Config("rank and n_experts must be positive".into()));
        }
        if !self.rank.is_multiple_of(self.n_experts) {
            return Err(Error::Config(format!(
                "rank {} is not divisible by n_experts {}",
                self.rank, self.n_experts
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        tensor::check_dropout_rate(self.dropout_rate)
    }

    pub fn expert_rank(&self) -> usize {
        self.rank / self.n_experts
    }

    pub fn lambda(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeaAdapterLayer {
    index: usize,
    pub base: FrozenLinear,
    pub experts: Vec<ExpertParams>,
    pub lambda: f64,
    pub dropout_rate: f64,
}

impl TeaAdapterLayer {
    /// Builds a layer with `A ~ N(0, 1/d_in)` and `B = 0`.
    pub fn new(
        index: usize,
        base: FrozenLinear,
        shape: AdapterShape,
        rng: &mut Rng,
    ) -> Result<Self> {
        shape.validate()?;
        let (d_in, d_out, r_e) = (base.d_in(), base.d_out(), shape.expert_rank());
        let experts = (0..shape.n_experts)
            .map(|_| ExpertParams {
                a: Tensor::randn(&[r_e, d_in], 1.0 / d_in as f64, rng).with_requires_grad(true),
                b: Tensor::zeros(&[d_out, r_e]).with_requires_grad(true),
            })
            .collect();
        Ok(Self {
            index,
            base,
            experts,
            lambda: shape.lambda(),
            dropout_rate: shape.dropout_rate,
        })
    }

    /// Builds a layer from explicit expert matrices.
    pub fn from_parts(
        index: usize,
        base: FrozenLinear,
        experts: Vec<ExpertParams>,
        lambda: f64,
        dropout_rate: f64,
    ) -> Result<Self> {
        tensor::check_dropout_rate(dropout_rate)?;
        let first = experts
            .first()
            .ok_or_else(|| Error::Config("a layer needs at least one expert".into()))?;
        let r_e = first.rank();
        for e in &experts {
            if e.a.shape() != [r_e, base.d_in()] {
                return Err(Error::shape("expert A", e.a.shape(), &[r_e, base.d_in()]));
            }
            if e.b.shape() != [base.d_out(), r_e] {
                return Err(Error::shape("expert B", e.b.shape(), &[base.d_out(), r_e]));
            }
        }
        let experts = experts
            .into_iter()
            .map(|e| ExpertParams {
                a: e.a.with_requires_grad(true),
                b: e.b.with_requires_grad(true),
            })
            .collect();
        Ok(Self {
            index,
            base,
            experts,
            lambda,
            dropout_rate,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_in(&self) -> usize {
        self.base.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.base.d_out()
    }

    /// All tensors of the layer in a fixed order, frozen ones included.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let l = self.index;
        let mut out = vec![(format!("layer{l}.W0"), &self.base.weight)];
        if let Some(b) = &self.base.bias {
            out.push((format!("layer{l}.bias"), b));
        }
        for (i, e) in self.experts.iter().enumerate() {
            out.push((format!("layer{l}.expert{i}.A"), &e.a));
            out.push((format!("layer{l}.expert{i}.B"), &e.b));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let l = self.index;
        let mut out = vec![(format!("layer{l}.W0"), &mut self.base.weight)];
        if let Some(b) = &mut self.base.bias {
            out.push((format!("layer{l}.bias"), b));
        }
        for (i, e) in self.experts.iter_mut().enumerate() {
            out.push((format!("layer{l}.expert{i}.A"), &mut e.a));
            out.push((format!("layer{l}.expert{i}.B"), &mut e.b));
        }
        out
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.d_in() {
            return Err(Error::shape("adapter input", s, &[0, self.d_in()]));
        }
        Ok(())
    }

    fn check_weights(&self, tape: &Tape, w: Var, what: &str) -> Result<()> {
        let t = tape.value(w);
        if t.len() != self.n_experts() {
            return Err(Error::Contract(format!(
                "{what} has {} entries, layer has {} experts",
                t.len(),
                self.n_experts()
            )));
        }
        if !t.is_finite() {
            return Err(Error::Contract(format!(
                "{what} contains non-finite entries"
            )));
        }
        Ok(())
    }

    /// `x W0ᵀ (+ bias)`; frozen leaves never receive gradient.
    pub fn record_base(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let l = self.index;
        let w = tape.param(&format!("layer{l}.W0"), &self.base.weight);
        let wt = tape.transpose(w)?;
        let h = tape.matmul(x, wt)?;
        match &self.base.bias {
            Some(b) => {
                let bv = tape.param(&format!("layer{l}.bias"), b);
                tape.add_row(h, bv)
            }
            None => Ok(h),
        }
    }

    /// `(x Aᵢᵀ)` for expert `i`, shape `batch × r_e`.
    fn record_down(&self, tape: &mut Tape, x: Var, i: usize) -> Result<Var> {
        let a = tape.param(
            &format!("layer{}.expert{i}.A", self.index),
            &self.experts[i].a,
        );
        let at = tape.transpose(a)?;
        tape.matmul(x, at)
    }

    fn record_up(&self, tape: &mut Tape, z: Var, i: usize) -> Result<Var> {
        let b = tape.param(
            &format!("layer{}.expert{i}.B", self.index),
            &self.experts[i].b,
        );
        let bt = tape.transpose(b)?;
        tape.matmul(z, bt)
    }

    pub fn record_lora(&self, tape: &mut Tape, x: Var, dropout: Option<&mut Rng>) -> Result<Var> {
        if self.n_experts() != 1 {
            return Err(Error::Contract(format!(
                "plain LoRA needs exactly one expert, layer has {}",
                self.n_experts()
            )));
        }
        let h0 = self.record_base(tape, x)?;
        let xd = tape.dropout(x, self.dropout_rate, dropout)?;
        let down = self.record_down(tape, xd, 0)?;
        let up = self.record_up(tape, down, 0)?;
        let delta = tape.scale(up, self.lambda);
        tape.add(h0, delta)
    }

    pub fn record_moelora(
        &self,
        tape: &mut Tape,
        x: Var,
        omega: Var,
        dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        self.check_weights(tape, omega, "omega")?;
        let mut h = self.record_base(tape, x)?;
        let xd = tape.dropout(x, self.dropout_rate, dropout)?;
        for i in 0..self.n_experts() {
            let down = self.record_down(tape, xd, i)?;
            let up = self.record_up(tape, down, i)?;
            let wi = tape.element(omega, i)?;
            let scaled = tape.scale_by(up, wi)?;
            let scaled = tape.scale(scaled, self.lambda);
            h = tape.add(h, scaled)?;
        }
        Ok(h)
    }

    /// Tea forward: the era weight scales each expert's down-projected
    /// activation, the task weight scales its up-projected output. One
    /// dropout mask on `x` is shared by all experts.
    pub fn record_tea(
        &self,
        tape: &mut Tape,
        x: Var,
        w_t: Var,
        w_e: Var,
        dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        self.check_weights(tape, w_t, "task weights")?;
        self.check_weights(tape, w_e, "era weights")?;
        let mut h = self.record_base(tape, x)?;
        let xd = tape.dropout(x, self.dropout_rate, dropout)?;
        for i in 0..self.n_experts() {
            let a_i = self.record_down(tape, xd, i)?;
            let we_i = tape.element(w_e, i)?;
            let a_tilde = tape.scale_by(a_i, we_i)?;
            let b_i = self.record_up(tape, a_tilde, i)?;
            let wt_i = tape.element(w_t, i)?;
            let b_hat = tape.scale_by(b_i, wt_i)?;
            let b_hat = tape.scale(b_hat, self.lambda);
            h = tape.add(h, b_hat)?;
        }
        Ok(h)
    }
}

pub fn trainable_param_count(layer: &TeaAdapterLayer) -> usize {
    layer.experts.iter().map(|e| e.a.len() + e.b.len()).sum()
}

fn eval_with<F>(x: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv)?;
    Ok(tape.value(out).clone().with_requires_grad(false))
}

/// Plain LoRA forward with dropout off.
pub fn lora_forward(layer: &TeaAdapterLayer, x: &Tensor) -> Result<Tensor> {
    eval_with(x, |tape, xv| layer.record_lora(tape, xv, None))
}

pub fn moelora_forward(layer: &TeaAdapterLayer, x: &Tensor, omega: &Tensor) -> Result<Tensor> {
    eval_with(x, |tape, xv| {
        let o = tape.constant(omega.clone());
        layer.record_moelora(tape, xv, o, None)
    })
}

pub fn tea_forward(
    layer: &TeaAdapterLayer,
    x: &Tensor,
    w_t: &Tensor,
    w_e: &Tensor,
    training: bool,
    rng: &mut Rng,
) -> Result<Tensor> {
    eval_with(x, |tape, xv| {
        let wt = tape.constant(w_t.clone());
        let we = tape.constant(w_e.clone());
        layer.record_tea(tape, xv, wt, we, training.then_some(rng))
    })
}
