//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! saved state to run its backward rule. [`Tape::backward`] seeds the
//! scalar loss with 1.0 and replays the nodes in reverse recording order.
//!
//! Model parameters enter the tape through [`Tape::param`], which memoizes
//! by name: a parameter used by several layers is one leaf, so its
//! gradient arrives already summed. After backward, gradients are read
//! back by name and accumulated into the owning [`Tensor`]s.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddRow,
    Mul,
    Scale,
    ScaleBy,
    Relu,
    Sum,
    Mean,
    Softmax,
    Transpose,
    Row,
    Element,
    ConcatCols,
    Dropout,
    CrossEntropy,
    Reshape,
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "matmul" => OpKind::MatMul,
            "add" => OpKind::Add,
            "add-row" => OpKind::AddRow,
            "mul" => OpKind::Mul,
            "scale" => OpKind::Scale,
            "scale-by" => OpKind::ScaleBy,
            "relu" => OpKind::Relu,
            "sum" => OpKind::Sum,
            "mean" => OpKind::Mean,
            "softmax" => OpKind::Softmax,
            "transpose" => OpKind::Transpose,
            "row" => OpKind::Row,
            "element" => OpKind::Element,
            "concat" => OpKind::ConcatCols,
            "dropout" => OpKind::Dropout,
            "cross-entropy" => OpKind::CrossEntropy,
            "reshape" => OpKind::Reshape,
            other => return Err(Error::Config(format!("unknown op kind '{other}'"))),
        };
        Ok(kind)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Transpose(Var),
    Row(Var, usize),
    Element(Var, usize),
    ConcatCols(Var, Var),
    Dropout(Var, Vec<f64>),
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
    Reshape(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::ScaleBy(..) => OpKind::ScaleBy,
            Op::Relu(..) => OpKind::Relu,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Row(..) => OpKind::Row,
            Op::Element(..) => OpKind::Element,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::Dropout(..) => OpKind::Dropout,
            Op::CrossEntropy(..) => OpKind::CrossEntropy,
            Op::Reshape(..) => OpKind::Reshape,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<String, Var>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts the backward rule of one op kind. Test fixture for
    /// negative controls of the gradient checker; never set in training.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Records a leaf carrying the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Registers a named parameter once; later calls return the same leaf.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(t.clone());
        self.params.insert(name.to_owned(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn param_grad(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|&v| self.grad(v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    /// `a[m×n] + bias[n]`, broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = tensor::add_row(self.value(a), self.value(bias))?;
        Ok(self.push_op(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = tensor::scale(self.value(a), s);
        self.push_op(out, Op::Scale(a, s), &[a])
    }

    /// Multiplies every entry of `a` by the single entry of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s).data()[0];
        let out = tensor::scale(self.value(a), sv);
        Ok(self.push_op(out, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = tensor::relu(self.value(a));
        self.push_op(out, Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push_op(out, Op::Mean(a), &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax(self.value(a))?;
        Ok(self.push_op(out, Op::Softmax(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.push_op(out, Op::Transpose(a), &[a]))
    }

    /// Selects row `i` of a matrix as a `1 × n` matrix.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "row expects a matrix, got {:?}",
                t.shape()
            )));
        }
        if i >= t.rows() {
            return Err(Error::Lookup {
                kind: "row",
                id: i,
                len: t.rows(),
            });
        }
        let out = Tensor::new(vec![1, t.cols()], t.row(i).to_vec())?;
        Ok(self.push_op(out, Op::Row(a, i), &[a]))
    }

    /// Selects flat element `i` as a one-element tensor.
    pub fn element(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.len() {
            return Err(Error::Lookup {
                kind: "element",
                id: i,
                len: t.len(),
            });
        }
        let out = Tensor::scalar(t.data()[i]);
        Ok(self.push_op(out, Op::Element(a, i), &[a]))
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.rows() != tb.rows() {
            return Err(Error::shape("concat_cols", ta.shape(), tb.shape()));
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor::new(vec![ta.rows(), ca + cb], data)?;
        Ok(self.push_op(out, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape(a), &[a]))
    }

    /// Inverted dropout. Identity (no node recorded) when `rng` is `None`
    /// or the rate is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: Option<&mut Rng>) -> Result<Var> {
        tensor::check_dropout_rate(rate)?;
        let Some(rng) = rng else { return Ok(a) };
        if rate == 0.0 {
            return Ok(a);
        }
        let mask = tensor::dropout_mask(self.value(a).len(), rate, rng)?;
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Dropout(a, mask), &[a]))
    }

    /// Mean cross-entropy of `logits[b×C]` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let loss = tensor::cross_entropy(t, labels)?;
        let probs = tensor::softmax(t)?.into_data();
        let out = Tensor::scalar(loss);
        Ok(self.push_op(
            out,
            Op::CrossEntropy(logits, labels.to_vec(), probs),
            &[logits],
        ))
    }

    /// Runs reverse accumulation from a scalar loss.
    ///
    /// Gradients from repeated calls add up until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut pass: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pass[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                let mut contribs = self.node_backward(node, &g)?;
                if self.fault == Some(node.op.kind()) {
                    for (_, c) in contribs.iter_mut() {
                        c.iter_mut().for_each(|v| *v *= 1.1);
                    }
                }
                for (v, c) in contribs {
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    match &mut pass[v.0] {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(c),
                    }
                }
            }
            pass[i] = Some(g);
        }

        for (i, g) in pass.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn grad_tensor(shape: &[usize], g: &[f64]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), g.to_vec())
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let gt = Self::grad_tensor(node.value.shape(), g)?;
                let ga = tensor::matmul(&gt, &tensor::transpose(val(*b))?)?;
                let gb = tensor::matmul(&tensor::transpose(val(*a))?, &gt)?;
                vec![(*a, ga.into_data()), (*b, gb.into_data())]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddRow(a, bias) => {
                let n = node.value.cols();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                }
                vec![(*a, g.to_vec()), (*bias, gb)]
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|x| x * s).collect())],
            Op::ScaleBy(a, s) => {
                let sv = val(*s).data()[0];
                let ga = g.iter().map(|x| x * sv).collect();
                let gs = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                vec![(*a, ga), (*s, vec![gs])]
            }
            Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (s, gr) in node.value.data().chunks(n).zip(g.chunks(n)) {
                    let dot: f64 = s.iter().zip(gr).map(|(p, q)| p * q).sum();
                    ga.extend(s.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                vec![(*a, ga)]
            }
            Op::Transpose(a) => {
                let gt = Self::grad_tensor(node.value.shape(), g)?;
                vec![(*a, tensor::transpose(&gt)?.into_data())]
            }
            Op::Row(a, i) => {
                let t = val(*a);
                let c = t.cols();
                let mut ga = vec![0.0; t.len()];
                ga[i * c..(i + 1) * c].copy_from_slice(g);
                vec![(*a, ga)]
            }
            Op::Element(a, i) => {
                let mut ga = vec![0.0; val(*a).len()];
                ga[*i] = g[0];
                vec![(*a, ga)]
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (val(*a).cols(), val(*b).cols());
                let mut ga = Vec::with_capacity(val(*a).len());
                let mut gb = Vec::with_capacity(val(*b).len());
                for row in g.chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Dropout(a, mask) => {
                vec![(*a, g.iter().zip(mask).map(|(x, m)| x * m).collect())]
            }
            Op::CrossEntropy(a, labels, probs) => {
                let c = val(*a).cols();
                let scale = g[0] / labels.len() as f64;
                let mut ga: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    ga[r * c + y] -= scale;
                }
                vec![(*a, ga)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
        };
        Ok(out)
    }
}
