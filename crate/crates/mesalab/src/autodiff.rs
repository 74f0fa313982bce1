//! Reverse-mode differentiation over a fixed vocabulary of matrix ops.
//!
//! Values are computed eagerly as nodes are recorded. Every op goes through
//! [`eval_op`], which is also what [`Tape::replay`] uses, so a replay from
//! the leaves reproduces the recorded values bit for bit.

use std::collections::BTreeMap;

use crate::attention::{self, MesaGrads};
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};

pub const LAYERNORM_EPS: f64 = 1e-6;
const L2_EPS: f64 = 1e-12;

/// Handle to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub usize);

/// Parameter name → gradient.
pub type GradMap = BTreeMap<String, Matrix>;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Input or parameter; named leaves show up in the [`GradMap`].
    Leaf(Option<String>),
    Identity,
    MatMul,
    /// `a · bᵀ`
    MatMulNt,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    Scale(f64),
    Transpose,
    /// Row softmax; with `causal` the strictly-upper logits are masked.
    SoftmaxRows { causal: bool },
    Gelu,
    /// Per-row standardization without affine terms.
    LayerNormRows,
    /// `x (T×d) ⊙ g (1×d)` broadcast over rows.
    RowMul,
    /// `x (T×d) + b (1×d)` broadcast over rows.
    RowAdd,
    Sum,
    Mean,
    SliceCols { start: usize, len: usize },
    SliceRows { start: usize, len: usize },
    ConcatCols,
    ConcatRows,
    /// `½ ||a − b||²`
    SquaredError,
    Clamp(f64),
    Softplus,
    RowL2Normalize,
    /// Mesa head readout: inputs K, Q, V, λ (1×1) and optionally γ (T×1).
    Mesa,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Identity => "identity",
            Op::MatMul => "matmul",
            Op::MatMulNt => "matmul_nt",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Transpose => "transpose",
            Op::SoftmaxRows { .. } => "softmax",
            Op::Gelu => "gelu",
            Op::LayerNormRows => "layernorm",
            Op::RowMul => "row_mul",
            Op::RowAdd => "row_add",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols => "concat_cols",
            Op::ConcatRows => "concat_rows",
            Op::SquaredError => "squared_error",
            Op::Clamp(_) => "clamp",
            Op::Softplus => "softplus",
            Op::RowL2Normalize => "l2_normalize",
            Op::Mesa => "mesa",
        }
    }

    /// Attribute-free primitives by registered name.
    pub fn from_name(name: &str) -> Result<Op> {
        Ok(match name {
            "identity" => Op::Identity,
            "matmul" => Op::MatMul,
            "matmul_nt" => Op::MatMulNt,
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "transpose" => Op::Transpose,
            "softmax" => Op::SoftmaxRows { causal: false },
            "causal_softmax" => Op::SoftmaxRows { causal: true },
            "gelu" => Op::Gelu,
            "layernorm" => Op::LayerNormRows,
            "row_mul" => Op::RowMul,
            "row_add" => Op::RowAdd,
            "sum" => Op::Sum,
            "mean" => Op::Mean,
            "concat_cols" => Op::ConcatCols,
            "concat_rows" => Op::ConcatRows,
            "squared_error" => Op::SquaredError,
            "softplus" => Op::Softplus,
            "l2_normalize" => Op::RowL2Normalize,
            "mesa" => Op::Mesa,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }
}

/// Forward residue some adjoints need beyond input and output values.
#[derive(Clone, Debug)]
pub enum Aux {
    None,
    /// Per-row inverse standard deviation.
    InvStd(Vec<f64>),
    /// Per-row input norms.
    Norms(Vec<f64>),
    /// Final mesa state `R_T`.
    MesaState(Matrix),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Matrix,
    aux: Aux,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    outputs: Vec<usize>,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn shape_err(op: &Op, msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(format!("{}: {}", op.name(), msg.into()))
}

fn arity(op: &Op, ins: &[&Matrix], n: std::ops::RangeInclusive<usize>) -> Result<()> {
    if n.contains(&ins.len()) {
        Ok(())
    } else {
        Err(shape_err(op, format!("takes {:?} inputs, got {}", n, ins.len())))
    }
}

fn same_shape(op: &Op, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// Evaluates one primitive. Shared by recording and replay.
pub fn eval_op(op: &Op, ins: &[&Matrix]) -> Result<(Matrix, Aux)> {
    let none = |m: Matrix| Ok((m, Aux::None));
    match op {
        Op::Leaf(_) => Err(shape_err(op, "leaves are not evaluated")),
        Op::Identity => {
            arity(op, ins, 1..=1)?;
            none(ins[0].clone())
        }
        Op::MatMul => {
            arity(op, ins, 2..=2)?;
            if ins[0].cols() != ins[1].rows() {
                return Err(shape_err(op, format!("{:?} · {:?}", ins[0].shape(), ins[1].shape())));
            }
            none(ins[0].matmul(ins[1]))
        }
        Op::MatMulNt => {
            arity(op, ins, 2..=2)?;
            if ins[0].cols() != ins[1].cols() {
                return Err(shape_err(op, format!("{:?} · {:?}ᵀ", ins[0].shape(), ins[1].shape())));
            }
            none(ins[0].matmul_t(ins[1]))
        }
        Op::Add | Op::Sub | Op::Mul => {
            arity(op, ins, 2..=2)?;
            same_shape(op, ins[0], ins[1])?;
            none(match op {
                Op::Add => ins[0].add(ins[1]),
                Op::Sub => ins[0].sub(ins[1]),
                _ => ins[0].hadamard(ins[1]),
            })
        }
        Op::Scale(s) => {
            arity(op, ins, 1..=1)?;
            none(ins[0].scale(*s))
        }
        Op::Transpose => {
            arity(op, ins, 1..=1)?;
            none(ins[0].transpose())
        }
        Op::SoftmaxRows { causal } => {
            arity(op, ins, 1..=1)?;
            none(attention::softmax_rows_masked(ins[0], *causal))
        }
        Op::Gelu => {
            arity(op, ins, 1..=1)?;
            none(ins[0].map(gelu))
        }
        Op::LayerNormRows => {
            arity(op, ins, 1..=1)?;
            let x = ins[0];
            let d = x.cols() as f64;
            let mut out = Matrix::zeros(x.rows(), x.cols());
            let mut inv = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let row = x.row(r);
                let mu = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
                let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
                for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                    *o = (v - mu) * is;
                }
                inv.push(is);
            }
            Ok((out, Aux::InvStd(inv)))
        }
        Op::RowMul | Op::RowAdd => {
            arity(op, ins, 2..=2)?;
            let (x, g) = (ins[0], ins[1]);
            if g.rows() != 1 || g.cols() != x.cols() {
                return Err(shape_err(op, format!("{:?} with {:?}", x.shape(), g.shape())));
            }
            let mut out = x.clone();
            for r in 0..x.rows() {
                for (o, b) in out.row_mut(r).iter_mut().zip(g.row(0)) {
                    if matches!(op, Op::RowMul) {
                        *o *= b;
                    } else {
                        *o += b;
                    }
                }
            }
            none(out)
        }
        Op::Sum => {
            arity(op, ins, 1..=1)?;
            none(Matrix::scalar(ins[0].sum()))
        }
        Op::Mean => {
            arity(op, ins, 1..=1)?;
            none(Matrix::scalar(ins[0].sum() / ins[0].len().max(1) as f64))
        }
        Op::SliceCols { start, len } => {
            arity(op, ins, 1..=1)?;
            if start + len > ins[0].cols() {
                return Err(shape_err(op, "out of range"));
            }
            none(ins[0].slice_cols(*start, *len))
        }
        Op::SliceRows { start, len } => {
            arity(op, ins, 1..=1)?;
            if start + len > ins[0].rows() {
                return Err(shape_err(op, "out of range"));
            }
            none(ins[0].slice_rows(*start, *len))
        }
        Op::ConcatCols => {
            if ins.is_empty() || ins.iter().any(|m| m.rows() != ins[0].rows()) {
                return Err(shape_err(op, "row counts differ"));
            }
            none(Matrix::hcat(ins))
        }
        Op::ConcatRows => {
            if ins.is_empty() || ins.iter().any(|m| m.cols() != ins[0].cols()) {
                return Err(shape_err(op, "column counts differ"));
            }
            none(Matrix::vcat(ins))
        }
        Op::SquaredError => {
            arity(op, ins, 2..=2)?;
            same_shape(op, ins[0], ins[1])?;
            let s: f64 = ins[0].data().iter().zip(ins[1].data()).map(|(a, b)| (a - b) * (a - b)).sum();
            none(Matrix::scalar(0.5 * s))
        }
        Op::Clamp(c) => {
            arity(op, ins, 1..=1)?;
            let c = *c;
            none(ins[0].map(|x| x.clamp(-c, c)))
        }
        Op::Softplus => {
            arity(op, ins, 1..=1)?;
            none(ins[0].map(softplus))
        }
        Op::RowL2Normalize => {
            arity(op, ins, 1..=1)?;
            let x = ins[0];
            let mut out = x.clone();
            let mut norms = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let n = dot(x.row(r), x.row(r)).sqrt().max(L2_EPS);
                out.row_mut(r).iter_mut().for_each(|v| *v /= n);
                norms.push(n);
            }
            Ok((out, Aux::Norms(norms)))
        }
        Op::Mesa => {
            arity(op, ins, 4..=5)?;
            let (k, q, v, lam) = (ins[0], ins[1], ins[2], ins[3]);
            if lam.shape() != (1, 1) {
                return Err(shape_err(op, "lambda must be 1x1"));
            }
            let gam = ins.get(4).map(|g| g.data());
            let f = attention::mesa_forward(k, q, v, lam.item(), gam, false)?;
            Ok((f.y, Aux::MesaState(f.r_final)))
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn inputs(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].inputs
    }

    pub fn outputs(&self) -> Vec<Var> {
        self.outputs.iter().map(|&i| Var(i)).collect()
    }

    pub fn mark_output(&mut self, v: Var) {
        self.outputs.push(v.0);
    }

    /// Unnamed leaf (data, masks, constants).
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Leaf(None), vec![], m, Aux::None)
    }

    /// Named leaf whose gradient is reported in the [`GradMap`].
    pub fn param(&mut self, name: &str, m: Matrix) -> Var {
        self.push(Op::Leaf(Some(name.to_string())), vec![], m, Aux::None)
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Matrix, aux: Aux) -> Var {
        self.nodes.push(Node { op, inputs, value, aux });
        Var(self.nodes.len() - 1)
    }

    /// Records `op` applied to `inputs`.
    pub fn record_op(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if matches!(op, Op::Leaf(_)) {
            return Err(shape_err(&op, "use constant/param for leaves"));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::ShapeMismatch(format!("unknown node {}", bad.0)));
        }
        let vals: Vec<&Matrix> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, aux) = eval_op(&op, &vals)?;
        Ok(self.push(op, inputs.iter().map(|v| v.0).collect(), value, aux))
    }

    /// Records a primitive by registered name.
    pub fn apply(&mut self, name: &str, inputs: &[Var]) -> Result<Var> {
        let op = Op::from_name(name)?;
        self.record_op(op, inputs)
    }

    pub fn identity(&mut self, a: Var) -> Var {
        self.must(Op::Identity, &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.must(Op::MatMul, &[a, b])
    }
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.must(Op::MatMulNt, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.must(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.must(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.must(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.must(Op::Scale(s), &[a])
    }
    pub fn transpose(&mut self, a: Var) -> Var {
        self.must(Op::Transpose, &[a])
    }
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        self.must(Op::SoftmaxRows { causal }, &[a])
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.must(Op::Gelu, &[a])
    }
    pub fn layernorm(&mut self, a: Var) -> Var {
        self.must(Op::LayerNormRows, &[a])
    }
    pub fn row_mul(&mut self, a: Var, g: Var) -> Var {
        self.must(Op::RowMul, &[a, g])
    }
    pub fn row_add(&mut self, a: Var, b: Var) -> Var {
        self.must(Op::RowAdd, &[a, b])
    }
    pub fn sum(&mut self, a: Var) -> Var {
        self.must(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Var {
        self.must(Op::Mean, &[a])
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.must(Op::SliceCols { start, len }, &[a])
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.must(Op::SliceRows { start, len }, &[a])
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        self.must(Op::ConcatCols, parts)
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        self.must(Op::ConcatRows, parts)
    }
    pub fn squared_error(&mut self, a: Var, b: Var) -> Var {
        self.must(Op::SquaredError, &[a, b])
    }
    pub fn clamp(&mut self, a: Var, c: f64) -> Var {
        self.must(Op::Clamp(c), &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.must(Op::Softplus, &[a])
    }
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        self.must(Op::RowL2Normalize, &[a])
    }

    /// Mesa head readout; fails on λ ≤ 0 or bad shapes.
    pub fn mesa(&mut self, k: Var, q: Var, v: Var, lambda: Var, gammas: Option<Var>) -> Result<Var> {
        let mut ins = vec![k, q, v, lambda];
        ins.extend(gammas);
        self.record_op(Op::Mesa, &ins)
    }

    /// Shape errors in the typed helpers are programming errors.
    fn must(&mut self, op: Op, inputs: &[Var]) -> Var {
        match self.record_op(op, inputs) {
            Ok(v) => v,
            Err(e) => panic!("{e}"),
        }
    }

    /// Recomputes every non-leaf node from the stored leaves.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let mut vals: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            if matches!(n.op, Op::Leaf(_)) {
                vals.push(n.value.clone());
            } else {
                let ins: Vec<&Matrix> = n.inputs.iter().map(|&i| &vals[i]).collect();
                vals.push(eval_op(&n.op, &ins)?.0);
            }
        }
        Ok(vals)
    }

    /// True when a replay matches every recorded value bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let vals = self.replay()?;
        Ok(vals.iter().zip(&self.nodes).all(|(v, n)| {
            v.shape() == n.value.shape() && v.data().iter().zip(n.value.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        }))
    }

    /// Reverse sweep from `output` seeded with `cotangent`.
    pub fn backward(&self, output: Var, cotangent: &Matrix) -> Result<Grads> {
        let out_val = &self.nodes[output.0].value;
        if out_val.shape() != cotangent.shape() {
            return Err(Error::ShapeMismatch(format!(
                "cotangent {:?} for output {:?}",
                cotangent.shape(),
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(cotangent.clone());
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf(_)) {
                grads[idx] = Some(g);
                continue;
            }
            let contribs = self.adjoint(node, &g)?;
            for (inp, c) in node.inputs.iter().zip(contribs) {
                if let Some(c) = c {
                    match &mut grads[*inp] {
                        Some(acc) => acc.add_assign(&c),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn adjoint(&self, node: &Node, g: &Matrix) -> Result<Vec<Option<Matrix>>> {
        let val = |i: usize| &self.nodes[node.inputs[i]].value;
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf(_) => vec![],
            Op::Identity => vec![Some(g.clone())],
            Op::MatMul => vec![Some(g.matmul_t(val(1))), Some(val(0).t_matmul(g))],
            Op::MatMulNt => vec![Some(g.matmul(val(1))), Some(g.t_matmul(val(0)))],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
            Op::Mul => vec![Some(g.hadamard(val(1))), Some(g.hadamard(val(0)))],
            Op::Scale(s) => vec![Some(g.scale(*s))],
            Op::Transpose => vec![Some(g.transpose())],
            Op::SoftmaxRows { .. } => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s = dot(y.row(r), g.row(r));
                    for ((d, yy), gg) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *d = yy * (gg - s);
                    }
                }
                vec![Some(dx)]
            }
            Op::Gelu => vec![Some(g.zip_map(val(0), |gg, x| gg * gelu_grad(x)))],
            Op::LayerNormRows => {
                let Aux::InvStd(inv) = &node.aux else { unreachable!("layernorm aux") };
                let d = y.cols() as f64;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gy = g.row(r);
                    let yr = y.row(r);
                    let mg = gy.iter().sum::<f64>() / d;
                    let mgy = dot(gy, yr) / d;
                    for ((o, gg), yy) in dx.row_mut(r).iter_mut().zip(gy).zip(yr) {
                        *o = inv[r] * (gg - mg - yy * mgy);
                    }
                }
                vec![Some(dx)]
            }
            Op::RowMul => {
                let (x, s) = (val(0), val(1));
                let mut dx = g.clone();
                let mut ds = Matrix::zeros(1, s.cols());
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        dx.set(r, c, g.get(r, c) * s.get(0, c));
                        let old = ds.get(0, c);
                        ds.set(0, c, old + g.get(r, c) * x.get(r, c));
                    }
                }
                vec![Some(dx), Some(ds)]
            }
            Op::RowAdd => {
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, gg) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                        *d += gg;
                    }
                }
                vec![Some(g.clone()), Some(db)]
            }
            Op::Sum => {
                let x = val(0);
                vec![Some(Matrix::filled(x.rows(), x.cols(), g.item()))]
            }
            Op::Mean => {
                let x = val(0);
                vec![Some(Matrix::filled(x.rows(), x.cols(), g.item() / x.len().max(1) as f64))]
            }
            Op::SliceCols { start, .. } => {
                let x = val(0);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                dx.set_block(0, *start, g);
                vec![Some(dx)]
            }
            Op::SliceRows { start, .. } => {
                let x = val(0);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                dx.set_block(*start, 0, g);
                vec![Some(dx)]
            }
            Op::ConcatCols => {
                let mut c0 = 0;
                node.inputs
                    .iter()
                    .map(|&i| {
                        let w = self.nodes[i].value.cols();
                        let part = g.slice_cols(c0, w);
                        c0 += w;
                        Some(part)
                    })
                    .collect()
            }
            Op::ConcatRows => {
                let mut r0 = 0;
                node.inputs
                    .iter()
                    .map(|&i| {
                        let h = self.nodes[i].value.rows();
                        let part = g.slice_rows(r0, h);
                        r0 += h;
                        Some(part)
                    })
                    .collect()
            }
            Op::SquaredError => {
                let d = val(0).sub(val(1)).scale(g.item());
                vec![Some(d.clone()), Some(d.scale(-1.0))]
            }
            Op::Clamp(c) => {
                let c = *c;
                vec![Some(g.zip_map(val(0), |gg, x| if x.abs() <= c { gg } else { 0.0 }))]
            }
            Op::Softplus => vec![Some(g.zip_map(val(0), |gg, x| gg * sigmoid(x)))],
            Op::RowL2Normalize => {
                let Aux::Norms(norms) = &node.aux else { unreachable!("l2 aux") };
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yg = dot(y.row(r), g.row(r));
                    for ((o, gg), yy) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = (gg - yy * yg) / norms[r];
                    }
                }
                vec![Some(dx)]
            }
            Op::Mesa => {
                let Aux::MesaState(r_final) = &node.aux else { unreachable!("mesa aux") };
                let (k, q, v, lam) = (val(0), val(1), val(2), val(3).item());
                let gam = (node.inputs.len() == 5).then(|| val(4).data());
                let grads = mesa_grads_with_fallback(k, q, v, lam, gam, r_final, g)?;
                let mut out = vec![
                    Some(grads.dk),
                    Some(grads.dq),
                    Some(grads.dv),
                    Some(Matrix::scalar(grads.dlambda)),
                ];
                if gam.is_some() {
                    out.push(Some(Matrix::column(&grads.dgamma)));
                }
                out
            }
        })
    }
}

/// Memory-lean mesa backward, falling back to the stored-state route when
/// the reverse downdate is numerically singular or drifts.
pub fn mesa_grads_with_fallback(
    k: &Matrix,
    q: &Matrix,
    v: &Matrix,
    lambda: f64,
    gammas: Option<&[f64]>,
    r_final: &Matrix,
    dy: &Matrix,
) -> Result<MesaGrads> {
    match attention::mesa_backward(k, q, v, lambda, gammas, r_final, dy) {
        Ok(g) => Ok(g),
        Err(Error::DegenerateReverse { .. }) => attention::mesa_backward_stored(k, q, v, lambda, gammas, dy),
        Err(e) => Err(e),
    }
}

/// Per-node gradients from one reverse sweep.
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    /// Gradient of a node; zeros of the right shape if unreachable.
    pub fn of(&self, tape: &Tape, v: Var) -> Matrix {
        self.grads[v.0].clone().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Matrix::zeros(r, c)
        })
    }

    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every named leaf, summed if a name repeats.
    pub fn to_map(&self, tape: &Tape) -> GradMap {
        let mut map = GradMap::new();
        for (i, n) in tape.nodes.iter().enumerate() {
            if let Op::Leaf(Some(name)) = &n.op {
                let g = self.of(tape, Var(i));
                match map.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        map.insert(name.clone(), g);
                    }
                }
            }
        }
        map
    }
}

/// Runs `builder` on fresh leaves holding `inputs` and returns its outputs.
pub fn record<F>(builder: F, inputs: &[Matrix]) -> Result<(Vec<Var>, Tape)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, m)| tape.param(&format!("x{i}"), m.clone()))
        .collect();
    let outs = builder(&mut tape, &leaves)?;
    for &o in &outs {
        tape.mark_output(o);
    }
    Ok((outs, tape))
}

/// Max over coordinates of `|analytic − central difference| / (|cd| + 1e-8)`
/// for a scalar graph.
pub fn finite_diff_check<F>(f: F, point: &[Matrix], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |pt: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = pt.iter().map(|m| tape.constant(m.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let leaves: Vec<Var> = point.iter().map(|m| tape.constant(m.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    if tape.value(out).shape() != (1, 1) {
        return Err(Error::ShapeMismatch("finite_diff_check needs a scalar output".into()));
    }
    let grads = tape.backward(out, &Matrix::scalar(1.0))?;
    let mut worst = 0.0f64;
    let mut pt: Vec<Matrix> = point.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let an = grads.of(&tape, *leaf);
        for idx in 0..pt[li].len() {
            let orig = pt[li].data()[idx];
            pt[li].data_mut()[idx] = orig + h;
            let fp = eval(&pt)?;
            pt[li].data_mut()[idx] = orig - h;
            let fm = eval(&pt)?;
            pt[li].data_mut()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max((an.data()[idx] - fd).abs() / (fd.abs() + 1e-8));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn identity_graph() {
        let x = Matrix::column(&[1.0, 2.0]);
        let (outs, tape) = record(|t, v| Ok(vec![t.identity(v[0])]), &[x.clone()]).unwrap();
        assert_eq!(tape.len(), 2);
        assert_eq!(tape.value(outs[0]), &x);
    }

    #[test]
    fn identity_matmul() {
        let v = Matrix::column(&[3.0, -1.0]);
        let (outs, tape) = record(|t, x| Ok(vec![t.matmul(x[0], x[1])]), &[Matrix::identity(2), v.clone()]).unwrap();
        assert_eq!(tape.value(outs[0]), &v);
    }

    #[test]
    fn unknown_primitive() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::scalar(1.0));
        assert_eq!(t.apply("conv2d", &[a]).unwrap_err(), Error::UnknownPrimitive("conv2d".into()));
        assert!(t.apply("sum", &[a]).is_ok());
    }

    #[test]
    fn sum_and_quadratic_gradients() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let mut t = Tape::new();
        let xv = t.param("x", x.clone());
        let s = t.sum(xv);
        let g = t.backward(s, &Matrix::scalar(1.0)).unwrap();
        assert_eq!(g.of(&t, xv), Matrix::filled(2, 2, 1.0));

        let c = Matrix::from_rows(&[vec![0.5, 0.5], vec![-1.0, 2.0]]).unwrap();
        let cv = t.constant(c.clone());
        let l = t.squared_error(xv, cv);
        let g = t.backward(l, &Matrix::scalar(1.0)).unwrap();
        assert_eq!(g.of(&t, xv), x.sub(&c));
    }

    #[test]
    fn cotangent_shape_checked() {
        let mut t = Tape::new();
        let x = t.param("x", Matrix::zeros(2, 2));
        assert!(matches!(t.backward(x, &Matrix::zeros(1, 2)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn unreachable_param_has_zero_gradient() {
        let mut t = Tape::new();
        let a = t.param("a", Matrix::filled(2, 2, 1.0));
        let b = t.param("b", Matrix::filled(3, 1, 2.0));
        let s = t.sum(a);
        let map = t.backward(s, &Matrix::scalar(1.0)).unwrap().to_map(&t);
        assert_eq!(map["b"], Matrix::zeros(3, 1));
        let _ = b;
    }

    #[test]
    fn quadratic_fd() {
        let x = Matrix::column(&[0.3, -1.2, 2.0]);
        let err = finite_diff_check(
            |t, v| {
                let xt = t.transpose(v[0]);
                Ok(t.matmul(xt, v[0]))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    fn unary_cases() -> Vec<(&'static str, Box<dyn Fn(&mut Tape, Var) -> Var>)> {
        vec![
            ("identity", Box::new(|t: &mut Tape, x| t.identity(x))),
            ("scale", Box::new(|t: &mut Tape, x| t.scale(x, -1.7))),
            ("transpose", Box::new(|t: &mut Tape, x| t.transpose(x))),
            ("softmax", Box::new(|t: &mut Tape, x| t.softmax_rows(x, false))),
            ("causal_softmax", Box::new(|t: &mut Tape, x| t.softmax_rows(x, true))),
            ("gelu", Box::new(|t: &mut Tape, x| t.gelu(x))),
            ("layernorm", Box::new(|t: &mut Tape, x| t.layernorm(x))),
            ("sum", Box::new(|t: &mut Tape, x| t.sum(x))),
            ("mean", Box::new(|t: &mut Tape, x| t.mean(x))),
            ("slice_cols", Box::new(|t: &mut Tape, x| t.slice_cols(x, 1, 2))),
            ("slice_rows", Box::new(|t: &mut Tape, x| t.slice_rows(x, 1, 2))),
            ("clamp", Box::new(|t: &mut Tape, x| t.clamp(x, 0.8))),
            ("softplus", Box::new(|t: &mut Tape, x| t.softplus(x))),
            ("l2_normalize", Box::new(|t: &mut Tape, x| t.l2_normalize_rows(x))),
        ]
    }

    /// Scalarizes an output with a fixed random weighting.
    fn weigh(t: &mut Tape, y: Var, seed: u64) -> Var {
        let (r, c) = t.value(y).shape();
        let w = t.constant(Rng::new(seed, 99).normal_matrix(r, c, 1.0));
        let p = t.mul(y, w);
        t.sum(p)
    }

    #[test]
    fn every_primitive_passes_finite_differences() {
        for point in 0..10u64 {
            let mut rng = Rng::new(point, 1);
            let x = rng.normal_matrix(3, 4, 1.0);
            for (name, f) in unary_cases() {
                // Keep clamp away from its kinks.
                let x = if name == "clamp" { x.map(|v| if (v.abs() - 0.8).abs() < 1e-3 { v + 0.01 } else { v }) } else { x.clone() };
                let err = finite_diff_check(|t, v| { let y = f(t, v[0]); Ok(weigh(t, y, point)) }, &[x], 1e-5).unwrap();
                assert!(err <= 1e-4, "{name} at point {point}: {err}");
            }
            let a = rng.normal_matrix(3, 4, 1.0);
            let b = rng.normal_matrix(3, 4, 1.0);
            let bt = rng.normal_matrix(4, 2, 1.0);
            let row = rng.normal_matrix(1, 4, 1.0);
            let binary: Vec<(&str, Vec<Matrix>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>)> = vec![
                ("matmul", vec![a.clone(), bt.clone()], Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]))),
                ("matmul_nt", vec![a.clone(), b.clone()], Box::new(|t: &mut Tape, v: &[Var]| t.matmul_nt(v[0], v[1]))),
                ("add", vec![a.clone(), b.clone()], Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1]))),
                ("sub", vec![a.clone(), b.clone()], Box::new(|t: &mut Tape, v: &[Var]| t.sub(v[0], v[1]))),
                ("mul", vec![a.clone(), b.clone()], Box::new(|t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]))),
                ("row_mul", vec![a.clone(), row.clone()], Box::new(|t: &mut Tape, v: &[Var]| t.row_mul(v[0], v[1]))),
                ("row_add", vec![a.clone(), row.clone()], Box::new(|t: &mut Tape, v: &[Var]| t.row_add(v[0], v[1]))),
                ("concat_cols", vec![a.clone(), bt.transpose().slice_cols(0, 3).transpose()], Box::new(|t: &mut Tape, v: &[Var]| t.concat_cols(&[v[0], v[1]]))),
                ("concat_rows", vec![a.clone(), b.clone()], Box::new(|t: &mut Tape, v: &[Var]| t.concat_rows(&[v[0], v[1]]))),
                ("squared_error", vec![a.clone(), b.clone()], Box::new(|t: &mut Tape, v: &[Var]| t.squared_error(v[0], v[1]))),
            ];
            for (name, pt, f) in binary {
                let err = finite_diff_check(|t, v| { let y = f(t, v); Ok(weigh(t, y, point)) }, &pt, 1e-5).unwrap();
                assert!(err <= 1e-4, "{name} at point {point}: {err}");
            }
            // Mesa primitive with forget factors.
            let k = rng.normal_matrix(5, 3, 0.6);
            let q = rng.normal_matrix(5, 3, 1.0);
            let v = rng.normal_matrix(5, 2, 1.0);
            let lam = Matrix::scalar(0.8 + 0.4 * rng.uniform());
            let gam = Matrix::column(&(0..5).map(|_| 0.75 + 0.2 * rng.uniform()).collect::<Vec<_>>());
            let err = finite_diff_check(
                |t, x| {
                    let y = t.mesa(x[0], x[1], x[2], x[3], Some(x[4]))?;
                    Ok(weigh(t, y, point))
                },
                &[k, q, v, lam, gam],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "mesa at point {point}: {err}");
        }
    }

    #[test]
    fn three_layer_composite() {
        let mut rng = Rng::new(42, 0);
        let x = rng.normal_matrix(5, 4, 1.0);
        let w1 = rng.normal_matrix(4, 6, 0.5);
        let w2 = rng.normal_matrix(6, 6, 0.5);
        let w3 = rng.normal_matrix(6, 2, 0.5);
        let err = finite_diff_check(
            |t, v| {
                let h = t.matmul(v[0], v[1]);
                let h = t.layernorm(h);
                let h = t.matmul(h, v[2]);
                let h = t.gelu(h);
                let h = t.matmul(h, v[3]);
                let s = t.softmax_rows(h, false);
                Ok(weigh(t, s, 7))
            },
            &[x, w1, w2, w3],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn masked_logits_have_zero_weight() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::filled(3, 3, 2.0));
        let s = t.softmax_rows(x, true);
        assert_eq!(t.value(s).get(0, 1), 0.0);
        assert!(crate::attention::MASKED_LOGIT < -1e29);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-7);
        assert!(gelu(-10.0).abs() < 1e-7);
        assert!((softplus(softplus_inverse(1.0)) - 1.0).abs() < 1e-15);
    }

    fn composite(t: &mut Tape, v: &[Var]) -> Var {
        let h = t.matmul(v[0], v[1]);
        let h = t.gelu(h);
        let n = t.layernorm(h);
        t.softmax_rows(n, true)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn replay_is_bit_exact(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed, 2);
            let x = rng.normal_matrix(4, 4, 1.0);
            let w = rng.normal_matrix(4, 4, 1.0);
            let (_, tape) = record(|t, v| Ok(vec![composite(t, v)]), &[x, w]).unwrap();
            prop_assert!(tape.replay_matches().unwrap());
        }

        #[test]
        fn backward_is_linear_in_cotangent(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = Rng::new(seed, 3);
            let x = rng.normal_matrix(4, 4, 1.0);
            let w = rng.normal_matrix(4, 4, 1.0);
            let (outs, tape) = record(|t, v| Ok(vec![composite(t, v)]), &[x, w]).unwrap();
            let u = rng.normal_matrix(4, 4, 1.0);
            let v = rng.normal_matrix(4, 4, 1.0);
            let mut uv = u.scale(a);
            uv.axpy(b, &v);
            let gu = tape.backward(outs[0], &u).unwrap().to_map(&tape);
            let gv = tape.backward(outs[0], &v).unwrap().to_map(&tape);
            let guv = tape.backward(outs[0], &uv).unwrap().to_map(&tape);
            for name in ["x0", "x1"] {
                let mut lin = gu[name].scale(a);
                lin.axpy(b, &gv[name]);
                prop_assert!(guv[name].max_abs_diff(&lin) <= 1e-10 * (1.0 + lin.max_abs()));
            }
        }
    }
}
