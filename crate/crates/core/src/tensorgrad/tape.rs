use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{domain_err, shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A pure function replayed during the backward pass instead of storing its
/// internal activations.
pub type Recipe = Rc<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Operation kinds accepted by [`Tape::record`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Sigmoid,
    Softplus,
    Softmax,
    Cumsum,
    Concat,
    Slice { start: usize, end: usize },
    Sum,
    Mean,
    Square,
    Sqrt,
    Silu,
    Sin,
    Cos,
    Exp,
    Ln,
    Recip,
    Transpose,
    SumRows,
    SumCols,
}

/// Byte accounting for activations held by a tape and its rematerialized
/// children.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemoryStats {
    pub live_bytes: usize,
    pub peak_bytes: usize,
    /// Bytes recorded inside score-network calls (checkpoint recipes).
    pub live_interior_bytes: usize,
    pub peak_interior_bytes: usize,
    pub recomputations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Same,
    RhsScalar,
    LhsScalar,
    /// rhs is a row vector of the given width broadcast over lhs rows
    RhsRow(usize),
    LhsRow(usize),
}

impl Bcast {
    fn resolve(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Self, Vec<usize>)> {
        let na: usize = a.iter().product();
        let nb: usize = b.iter().product();
        if a == b {
            return Ok((Bcast::Same, a.to_vec()));
        }
        if nb == 1 {
            return Ok((Bcast::RhsScalar, a.to_vec()));
        }
        if na == 1 {
            return Ok((Bcast::LhsScalar, b.to_vec()));
        }
        let is_row = |full: &[usize], row: &[usize]| {
            full.len() == 2
                && ((row.len() == 1 && row[0] == full[1])
                    || (row.len() == 2 && row[0] == 1 && row[1] == full[1]))
        };
        if is_row(a, b) {
            return Ok((Bcast::RhsRow(a[1]), a.to_vec()));
        }
        if is_row(b, a) {
            return Ok((Bcast::LhsRow(b[1]), b.to_vec()));
        }
        Err(shape_err(op, format!("{:?} vs {:?}", a, b)))
    }

    #[inline]
    fn lhs(self, i: usize) -> usize {
        match self {
            Bcast::Same | Bcast::RhsScalar | Bcast::RhsRow(_) => i,
            Bcast::LhsScalar => 0,
            Bcast::LhsRow(m) => i % m,
        }
    }

    #[inline]
    fn rhs(self, i: usize) -> usize {
        match self {
            Bcast::Same | Bcast::LhsScalar | Bcast::LhsRow(_) => i,
            Bcast::RhsScalar => 0,
            Bcast::RhsRow(m) => i % m,
        }
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul,
    Add(Bcast),
    Sub(Bcast),
    Mul(Bcast),
    Div(Bcast),
    Scale(f64),
    AddScalar,
    Sigmoid,
    Softplus,
    Softmax,
    Cumsum { clamp_last: bool },
    Concat { widths: Vec<usize> },
    Slice { start: usize },
    Sum,
    Mean,
    SumRows,
    SumCols,
    Square,
    Sqrt,
    Silu,
    Sin,
    Cos,
    Exp,
    Ln,
    Recip,
    Reshape,
    Transpose,
    /// Elementwise map with its derivative evaluated at forward time.
    Map { derivative: Tensor },
    Reparam { noise: Tensor, bcast: Bcast },
    Checkpoint { recipe: Recipe, output_hash: u64 },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Add(_) => "add",
            Op::Sub(_) => "sub",
            Op::Mul(_) => "mul",
            Op::Div(_) => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Softmax => "softmax",
            Op::Cumsum { .. } => "cumsum",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumRows => "sum_rows",
            Op::SumCols => "sum_cols",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Silu => "silu",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Recip => "recip",
            Op::Reshape => "reshape",
            Op::Transpose => "transpose",
            Op::Map { .. } => "map",
            Op::Reparam { .. } => "gaussian_reparam",
            Op::Checkpoint { .. } => "checkpoint",
        };
        f.write_str(name)
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every leaf of a tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.entries
            .binary_search_by_key(&var, |(v, _)| *v)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.entries.iter().map(|(v, t)| (*v, t))
    }
}

/// Append-only record of tensor operations supporting reverse-mode
/// differentiation and rematerialized subgraphs.
pub struct Tape {
    nodes: Vec<Node>,
    rematerialize: bool,
    interior: bool,
    inline_interior_depth: usize,
    stats: Rc<RefCell<MemoryStats>>,
    counted_bytes: usize,
    counted_interior_bytes: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        let mut s = self.stats.borrow_mut();
        s.live_bytes -= self.counted_bytes;
        s.live_interior_bytes -= self.counted_interior_bytes;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            rematerialize: true,
            interior: false,
            inline_interior_depth: 0,
            stats: Rc::new(RefCell::new(MemoryStats::default())),
            counted_bytes: 0,
            counted_interior_bytes: 0,
        }
    }

    fn child(&self) -> Self {
        Self {
            nodes: Vec::new(),
            rematerialize: self.rematerialize,
            interior: true,
            inline_interior_depth: 0,
            stats: self.stats.clone(),
            counted_bytes: 0,
            counted_interior_bytes: 0,
        }
    }

    /// When disabled, [`Tape::checkpoint`] records its recipe inline and
    /// keeps every interior activation until the tape is dropped.
    pub fn set_rematerialize(&mut self, on: bool) {
        self.rematerialize = on;
    }

    pub fn rematerialize(&self) -> bool {
        self.rematerialize
    }

    pub fn memory(&self) -> MemoryStats {
        self.stats.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        if !matches!(op, Op::Leaf | Op::Constant) {
            let bytes = value.size_bytes();
            let interior = self.interior || self.inline_interior_depth > 0;
            let mut s = self.stats.borrow_mut();
            s.live_bytes += bytes;
            s.peak_bytes = s.peak_bytes.max(s.live_bytes);
            self.counted_bytes += bytes;
            if interior {
                s.live_interior_bytes += bytes;
                s.peak_interior_bytes = s.peak_interior_bytes.max(s.live_interior_bytes);
                self.counted_interior_bytes += bytes;
            }
        }
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input; gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value)
    }

    /// A fixed input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, vec![], value)
    }

    /// Generic entry point dispatching on [`OpKind`].
    pub fn record(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => 2,
            OpKind::Concat => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Usage(format!(
                "{:?} expects {} inputs, got {}",
                kind,
                arity,
                inputs.len()
            )));
        }
        let a = inputs[0];
        Ok(match kind {
            OpKind::MatMul => self.matmul(a, inputs[1])?,
            OpKind::Add => self.add(a, inputs[1])?,
            OpKind::Sub => self.sub(a, inputs[1])?,
            OpKind::Mul => self.mul(a, inputs[1])?,
            OpKind::Div => self.div(a, inputs[1])?,
            OpKind::Scale(c) => self.scale(a, c),
            OpKind::AddScalar(c) => self.add_scalar(a, c),
            OpKind::Sigmoid => self.sigmoid(a),
            OpKind::Softplus => self.softplus(a),
            OpKind::Softmax => self.softmax(a),
            OpKind::Cumsum => self.cumsum(a),
            OpKind::Concat => self.concat(inputs)?,
            OpKind::Slice { start, end } => self.slice(a, start, end)?,
            OpKind::Sum => self.sum(a),
            OpKind::Mean => self.mean(a),
            OpKind::Square => self.square(a),
            OpKind::Sqrt => self.sqrt(a)?,
            OpKind::Silu => self.silu(a),
            OpKind::Sin => self.sin(a),
            OpKind::Cos => self.cos(a),
            OpKind::Exp => self.exp(a),
            OpKind::Ln => self.ln(a)?,
            OpKind::Recip => self.recip(a)?,
            OpKind::Transpose => self.transpose(a)?,
            OpKind::SumRows => self.sum_rows(a)?,
            OpKind::SumCols => self.sum_cols(a)?,
        })
    }

    // ----- binary ops -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul, vec![a.0, b.0], out))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        make: fn(Bcast) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (bc, shape) = Bcast::resolve(name, ta.shape(), tb.shape())?;
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|i| f(da[bc.lhs(i)], db[bc.rhs(i)])).collect();
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(make(bc), vec![a.0, b.0], out))
    }

    /// Elementwise sum; supports scalar and row broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(domain_err("div", "division by zero"));
        }
        self.binary("div", a, b, Op::Div, |x, y| x / y)
    }

    // ----- unary ops -----

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        self.push(op, vec![a.0], out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Scale(c), a, |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::AddScalar, a, |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid, a, sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Op::Softplus, a, softplus)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(Op::Silu, a, |x| x * sigmoid(x))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Op::Sin, a, f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(Op::Cos, a, f64::cos)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Op::Square, a, |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.value(a).data().iter().find(|&&v| v < 0.0) {
            return Err(domain_err("sqrt", format!("negative entry {v}")));
        }
        Ok(self.unary(Op::Sqrt, a, f64::sqrt))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(domain_err("ln", format!("non-positive entry {v}")));
        }
        Ok(self.unary(Op::Ln, a, f64::ln))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v == 0.0) {
            return Err(domain_err("recip", "zero entry"));
        }
        Ok(self.unary(Op::Recip, a, |x| 1.0 / x))
    }

    /// Elementwise map given a closure returning `(f(x), f'(x))`.
    pub fn map(&mut self, a: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        let x = self.value(a);
        let (vals, ders): (Vec<f64>, Vec<f64>) = x.data().iter().map(|&v| f(v)).unzip();
        let shape = x.shape().to_vec();
        let derivative = Tensor::from_parts(shape.clone(), ders);
        self.push(
            Op::Map { derivative },
            vec![a.0],
            Tensor::from_parts(shape, vals),
        )
    }

    // ----- structural ops (last axis) -----

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let w = x.cols();
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(w.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / z));
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(Op::Softmax, vec![a.0], out)
    }

    pub fn cumsum(&mut self, a: Var) -> Var {
        self.cumsum_impl(a, false)
    }

    /// Cumulative sum of a simplex with the last entry pinned to exactly 1.
    pub fn simplex_cumsum(&mut self, a: Var) -> Var {
        self.cumsum_impl(a, true)
    }

    fn cumsum_impl(&mut self, a: Var, clamp_last: bool) -> Var {
        let x = self.value(a);
        let w = x.cols();
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(w.max(1)) {
            let mut acc = 0.0;
            for &v in row {
                acc += v;
                out.push(acc);
            }
            if clamp_last {
                *out.last_mut().expect("non-empty row") = 1.0;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(Op::Cumsum { clamp_last }, vec![a.0], out)
    }

    /// Concatenates along the last axis; 2-D inputs must share a row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let first = self.value(parts[0]);
        let ndim = first.ndim().max(1);
        let rows = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.ndim().max(1) != ndim || t.rows() != rows || t.ndim() > 2 {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?}", first.shape(), t.shape()),
                ));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let shape = if ndim == 2 { vec![rows, total] } else { vec![total] };
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(
            Op::Concat { widths },
            parts.iter().map(|p| p.0).collect(),
            out,
        ))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let w = x.cols();
        if start >= end || end > w || x.ndim() > 2 {
            return Err(shape_err(
                "slice",
                format!("{start}..{end} of {:?}", x.shape()),
            ));
        }
        let rows = x.rows();
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&x.data()[r * w + start..r * w + end]);
        }
        let shape = if x.ndim() == 2 {
            vec![rows, end - start]
        } else {
            vec![end - start]
        };
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(Op::Slice { start }, vec![a.0], out))
    }

    /// Entry `i` of a vector as a scalar.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        let s = self.slice(a, i, i + 1)?;
        self.reshape(s, &[])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum, vec![a.0], out)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / x.numel() as f64);
        self.push(Op::Mean, vec![a.0], out)
    }

    /// Sum over rows of a 2-D tensor: `[n, m] -> [m]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 2 {
            return Err(shape_err("sum_rows", format!("{:?}", x.shape())));
        }
        let m = x.cols();
        let mut out = vec![0.0; m];
        for row in x.data().chunks(m) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let out = Tensor::vector(out);
        Ok(self.push(Op::SumRows, vec![a.0], out))
    }

    /// Sum over columns of a 2-D tensor: `[n, m] -> [n]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 2 {
            return Err(shape_err("sum_cols", format!("{:?}", x.shape())));
        }
        let out = Tensor::vector(x.data().chunks(x.cols()).map(|r| r.iter().sum()).collect());
        Ok(self.push(Op::SumCols, vec![a.0], out))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![a.0], out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose, vec![a.0], out))
    }

    /// `mean + std ⊙ noise`; `noise` is data, never differentiated.
    pub fn gaussian_reparam(&mut self, mean: Var, std: Var, noise: &Tensor) -> Result<Var> {
        let m = self.value(mean);
        if m.shape() != noise.shape() {
            return Err(shape_err(
                "gaussian_reparam",
                format!("mean {:?} vs noise {:?}", m.shape(), noise.shape()),
            ));
        }
        let s = self.value(std);
        let (bcast, _) = Bcast::resolve("gaussian_reparam", m.shape(), s.shape())?;
        if matches!(bcast, Bcast::LhsScalar | Bcast::LhsRow(_)) {
            return Err(shape_err(
                "gaussian_reparam",
                format!("std {:?} larger than mean {:?}", s.shape(), m.shape()),
            ));
        }
        if let Some(v) = s.data().iter().find(|&&v| v < 0.0) {
            return Err(domain_err("gaussian_reparam", format!("negative std {v}")));
        }
        let (md, sd, nd) = (m.data(), s.data(), noise.data());
        let data = (0..md.len())
            .map(|i| md[i] + sd[bcast.rhs(i)] * nd[i])
            .collect();
        let out = Tensor::from_parts(m.shape().to_vec(), data);
        Ok(self.push(
            Op::Reparam {
                noise: noise.clone(),
                bcast,
            },
            vec![mean.0, std.0],
            out,
        ))
    }

    /// Runs `recipe` on `inputs`. With rematerialization enabled the recipe's
    /// internal activations are discarded and regenerated during backward.
    pub fn checkpoint(&mut self, recipe: Recipe, inputs: &[Var]) -> Result<Var> {
        if !self.rematerialize {
            self.inline_interior_depth += 1;
            let out = recipe(self, inputs);
            self.inline_interior_depth -= 1;
            return out;
        }
        let mut sub = self.child();
        let sub_inputs: Vec<Var> = inputs
            .iter()
            .map(|&v| sub.constant(self.value(v).clone()))
            .collect();
        let out_var = recipe(&mut sub, &sub_inputs)?;
        let out = sub.value(out_var).clone();
        drop(sub);
        let output_hash = out.bit_hash();
        Ok(self.push(
            Op::Checkpoint {
                recipe,
                output_hash,
            },
            inputs.iter().map(|v| v.0).collect(),
            out,
        ))
    }

    // ----- backward -----

    /// Reverse sweep from a scalar loss. Returns a gradient for every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::full(self.shape(loss), 1.0);
        self.backward_seeded(loss, &seed)
    }

    /// Reverse sweep from `out` seeded with an upstream gradient of the same
    /// shape (a vector-Jacobian product).
    pub fn backward_seeded(&self, out: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return Err(shape_err(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.shape(out)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.to_vec());
        let mut leaves = Vec::new();
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if let Op::Leaf = node.op {
                let g = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                leaves.push((
                    Var(idx),
                    Tensor::from_parts(node.value.shape().to_vec(), g),
                ));
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
        }
        // Leaves before `out` that were never reached still get a zero entry.
        leaves.reverse();
        Ok(Gradients { entries: leaves })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let inp = &node.inputs;
        let y = node.value.data();
        let val = |k: usize| self.nodes[inp[k]].value.data();
        let needs = |k: usize| self.nodes[inp[k]].requires_grad;
        let send = |k: usize, gk: Vec<f64>, grads: &mut [Option<Vec<f64>>]| {
            accumulate(&mut grads[inp[k]], gk);
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul => {
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let a = &self.nodes[inp[0]].value;
                let b = &self.nodes[inp[1]].value;
                if needs(0) {
                    send(0, gt.matmul_nt(b)?.to_vec(), grads);
                }
                if needs(1) {
                    send(1, a.matmul_tn(&gt)?.to_vec(), grads);
                }
            }
            Op::Add(bc) | Op::Sub(bc) | Op::Mul(bc) | Op::Div(bc) => {
                let (a, b) = (val(0), val(1));
                let bc = *bc;
                if needs(0) {
                    let mut ga = vec![0.0; a.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (bc.lhs(i), bc.rhs(i));
                        ga[ia] += match node.op {
                            Op::Add(_) | Op::Sub(_) => gi,
                            Op::Mul(_) => gi * b[ib],
                            _ => gi / b[ib],
                        };
                    }
                    send(0, ga, grads);
                }
                if needs(1) {
                    let mut gb = vec![0.0; b.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (bc.lhs(i), bc.rhs(i));
                        gb[ib] += match node.op {
                            Op::Add(_) => gi,
                            Op::Sub(_) => -gi,
                            Op::Mul(_) => gi * a[ia],
                            _ => -gi * a[ia] / (b[ib] * b[ib]),
                        };
                    }
                    send(1, gb, grads);
                }
            }
            Op::Scale(c) => send(0, g.iter().map(|v| v * c).collect(), grads),
            Op::AddScalar | Op::Reshape => send(0, g.to_vec(), grads),
            Op::Sigmoid => send(0, zip(g, y, |gi, yi| gi * yi * (1.0 - yi)), grads),
            Op::Softplus => send(0, zip(g, val(0), |gi, xi| gi * sigmoid(xi)), grads),
            Op::Silu => send(
                0,
                zip(g, val(0), |gi, xi| {
                    let s = sigmoid(xi);
                    gi * (s + xi * s * (1.0 - s))
                }),
                grads,
            ),
            Op::Sin => send(0, zip(g, val(0), |gi, xi| gi * xi.cos()), grads),
            Op::Cos => send(0, zip(g, val(0), |gi, xi| -gi * xi.sin()), grads),
            Op::Exp => send(0, zip(g, y, |gi, yi| gi * yi), grads),
            Op::Ln => send(0, zip(g, val(0), |gi, xi| gi / xi), grads),
            Op::Square => send(0, zip(g, val(0), |gi, xi| 2.0 * gi * xi), grads),
            Op::Sqrt => send(0, zip(g, y, |gi, yi| gi * 0.5 / yi), grads),
            Op::Recip => send(0, zip(g, y, |gi, yi| -gi * yi * yi), grads),
            Op::Map { derivative } => {
                send(0, zip(g, derivative.data(), |gi, di| gi * di), grads)
            }
            Op::Softmax => {
                let w = node.value.cols().max(1);
                let mut out = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(w).zip(y.chunks(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    out.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
                }
                send(0, out, grads);
            }
            Op::Cumsum { clamp_last } => {
                let w = node.value.cols().max(1);
                let mut out = Vec::with_capacity(g.len());
                for gr in g.chunks(w) {
                    let mut row = vec![0.0; w];
                    let mut acc = 0.0;
                    for j in (0..w).rev() {
                        if !(*clamp_last && j == w - 1) {
                            acc += gr[j];
                        }
                        row[j] = acc;
                    }
                    out.extend(row);
                }
                send(0, out, grads);
            }
            Op::Concat { widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for (k, &w) in widths.iter().enumerate() {
                    if needs(k) {
                        let mut gk = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gk.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        send(k, gk, grads);
                    }
                    offset += w;
                }
            }
            Op::Slice { start } => {
                let x = &self.nodes[inp[0]].value;
                let w = x.cols();
                let sw = node.value.cols();
                let mut gx = vec![0.0; x.numel()];
                for r in 0..x.rows() {
                    gx[r * w + start..r * w + start + sw]
                        .copy_from_slice(&g[r * sw..(r + 1) * sw]);
                }
                send(0, gx, grads);
            }
            Op::Sum => send(0, vec![g[0]; val(0).len()], grads),
            Op::Mean => {
                let n = val(0).len();
                send(0, vec![g[0] / n as f64; n], grads)
            }
            Op::SumRows => {
                let n = val(0).len() / g.len();
                send(0, g.repeat(n), grads)
            }
            Op::SumCols => {
                let m = self.nodes[inp[0]].value.cols();
                send(0, g.iter().flat_map(|&gi| std::iter::repeat(gi).take(m)).collect(), grads)
            }
            Op::Transpose => {
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                send(0, gt.transpose()?.to_vec(), grads)
            }
            Op::Reparam { noise, bcast } => {
                if needs(0) {
                    send(0, g.to_vec(), grads);
                }
                if needs(1) {
                    let mut gs = vec![0.0; val(1).len()];
                    for (i, (&gi, &ni)) in g.iter().zip(noise.data()).enumerate() {
                        gs[bcast.rhs(i)] += gi * ni;
                    }
                    send(1, gs, grads);
                }
            }
            Op::Checkpoint {
                recipe,
                output_hash,
            } => {
                let mut sub = self.child();
                let sub_inputs: Vec<Var> = inp
                    .iter()
                    .map(|&i| {
                        let v = self.nodes[i].value.clone();
                        if self.nodes[i].requires_grad {
                            sub.leaf(v)
                        } else {
                            sub.constant(v)
                        }
                    })
                    .collect();
                self.stats.borrow_mut().recomputations += 1;
                let out = recipe(&mut sub, &sub_inputs)?;
                if sub.value(out).bit_hash() != *output_hash {
                    return Err(Error::Integrity(
                        "checkpoint replay produced a different output than the recorded forward pass"
                            .into(),
                    ));
                }
                let seed = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let sub_grads = sub.backward_seeded(out, &seed)?;
                for (k, sv) in sub_inputs.iter().enumerate() {
                    if let Some(gk) = sub_grads.get(*sv) {
                        send(k, gk.to_vec(), grads);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn zip(g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(x).map(|(&a, &b)| f(a, b)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`sigmoid`] on (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Inverse of [`softplus`] on (0, ∞).
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}
