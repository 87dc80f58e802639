use std::sync::atomic::{AtomicUsize, Ordering};

use super::tensor::Tensor;
use crate::error::{GrocoError, Result};

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(0);

/// Kind of a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Arctan,
    Log,
    Exp,
    Sum,
    Dot,
    L2Norm,
    Clamp,
    Scale,
    Concat,
    IndexSelect,
    StopGrad,
}

impl std::str::FromStr for OpKind {
    type Err = GrocoError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "div" => OpKind::Div,
            "matmul" => OpKind::MatMul,
            "arctan" => OpKind::Arctan,
            "log" => OpKind::Log,
            "exp" => OpKind::Exp,
            "sum" => OpKind::Sum,
            "dot" => OpKind::Dot,
            "l2norm" => OpKind::L2Norm,
            "clamp" => OpKind::Clamp,
            "scale" => OpKind::Scale,
            "concat" => OpKind::Concat,
            "index_select" => OpKind::IndexSelect,
            "stop_grad" => OpKind::StopGrad,
            _ => return Err(GrocoError::invalid(format!("unknown op kind '{s}'"))),
        })
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Arctan(usize),
    Log(usize),
    Exp(usize),
    Sum(usize),
    Dot(usize, usize),
    L2Norm(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Scale { x: usize, c: f64 },
    Concat(Vec<usize>),
    IndexSelect { x: usize, indices: Vec<usize> },
    StopGrad,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Arctan(_) => OpKind::Arctan,
            Op::Log(_) => OpKind::Log,
            Op::Exp(_) => OpKind::Exp,
            Op::Sum(_) => OpKind::Sum,
            Op::Dot(..) => OpKind::Dot,
            Op::L2Norm(_) => OpKind::L2Norm,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Scale { .. } => OpKind::Scale,
            Op::Concat(_) => OpKind::Concat,
            Op::IndexSelect { .. } => OpKind::IndexSelect,
            Op::StopGrad => OpKind::StopGrad,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Gradient can reach a leaf through this node.
    tracked: bool,
}

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Append-only record of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
    fault: Option<(OpKind, f64)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b || nb == 1 && na >= 1 || a.ends_with(b) {
        Some(a.to_vec())
    } else if na == 1 || b.ends_with(a) {
        Some(b.to_vec())
    } else {
        None
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Test hook: multiply every vector-Jacobian product of `kind` by
    /// `factor` during backward. Used as a negative control for gradient
    /// checking.
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.index].op.kind()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(GrocoError::invalid(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(())
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { op, value, tracked });
        Var {
            tape: self.id,
            index,
        }
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.index].tracked
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn binary(&mut self, a: Var, b: Var, kind: OpKind, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            GrocoError::invalid(format!(
                "{kind:?}: incompatible shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            ))
        })?;
        let numel: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        if kind == OpKind::Div {
            if let Some(i) = (0..numel).find(|&i| db[i % db.len()] == 0.0) {
                return Err(GrocoError::numeric(
                    Some(self.nodes.len()),
                    format!("division by zero at element {i}"),
                ));
            }
        }
        let data = (0..numel)
            .map(|i| f(da[i % da.len()], db[i % db.len()]))
            .collect();
        let op = match kind {
            OpKind::Add => Op::Add(a.index, b.index),
            OpKind::Sub => Op::Sub(a.index, b.index),
            OpKind::Mul => Op::Mul(a.index, b.index),
            OpKind::Div => Op::Div(a.index, b.index),
            _ => unreachable!(),
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(op, Tensor::new(shape, data)?, tracked))
    }

    /// Elementwise `a + b`; a single-element or trailing-shape operand broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Div, |x, y| x / y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.index].value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let tracked = self.tracked(x);
        Ok(self.push(op, value, tracked))
    }

    pub fn arctan(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Arctan(x.index), f64::atan)
    }

    /// Natural log; non-positive input is a numeric error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        if let Some(v) = self.nodes[x.index].value.data().iter().find(|&&v| v <= 0.0) {
            return Err(GrocoError::numeric(
                Some(self.nodes.len()),
                format!("log of non-positive value {v}"),
            ));
        }
        self.unary(x, Op::Log(x.index), f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x.index), f64::exp)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale { x: x.index, c }, |v| c * v)
    }

    /// Clip into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(GrocoError::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(x, Op::Clamp { x: x.index, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.clamp(x, 0.0, f64::INFINITY)
    }

    /// Forward identity whose backward contribution to `x` is zero.
    pub fn stop_grad(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes[x.index].value.clone();
        Ok(self.push(Op::StopGrad, value, false))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.nodes[x.index].value.data().iter().sum();
        let tracked = self.tracked(x);
        Ok(self.push(Op::Sum(x.index), Tensor::scalar(s), tracked))
    }

    /// Inner product of two equally sized tensors (flattened).
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        if ta.numel() != tb.numel() {
            return Err(GrocoError::invalid(format!(
                "dot: sizes {} and {} differ",
                ta.numel(),
                tb.numel()
            )));
        }
        let s = dot_slices(ta.data(), tb.data());
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Dot(a.index, b.index), Tensor::scalar(s), tracked))
    }

    /// Euclidean norm of all elements.
    pub fn l2norm(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let d = self.nodes[x.index].value.data();
        let s = dot_slices(d, d).sqrt();
        let tracked = self.tracked(x);
        Ok(self.push(Op::L2Norm(x.index), Tensor::scalar(s), tracked))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GrocoError::invalid(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Op::MatMul(a.index, b.index),
            Tensor::matrix(m, n, out)?,
            tracked,
        ))
    }

    /// Concatenate along the leading axis; scalars count as length-1 vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(GrocoError::invalid("concat of zero tensors"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let tail = |t: &Tensor| -> Vec<usize> { t.shape().iter().skip(1).copied().collect() };
        let first_tail = tail(&self.nodes[parts[0].index].value);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.index].value;
            if tail(t) != first_tail {
                return Err(GrocoError::invalid(format!(
                    "concat: trailing shape {:?} differs from {:?}",
                    tail(t),
                    first_tail
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(first_tail);
        let tracked = parts.iter().any(|&p| self.tracked(p));
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            Op::Concat(parts.iter().map(|p| p.index).collect()),
            value,
            tracked,
        ))
    }

    /// Gather entries along the leading axis.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.index].value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(GrocoError::invalid(format!(
                "index {bad} out of range for leading dimension {}",
                t.rows()
            )));
        }
        let value = t.select_rows(indices);
        let tracked = self.tracked(x);
        Ok(self.push(
            Op::IndexSelect {
                x: x.index,
                indices: indices.to_vec(),
            },
            value,
            tracked,
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        self.check(loss)?;
        let t = &self.nodes[loss.index].value;
        if t.numel() != 1 {
            return Err(GrocoError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_from(loss, &Tensor::filled(t.shape(), 1.0))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `output`.
    pub fn backward_from(&self, output: Var, seed: &Tensor) -> Result<GradientMap> {
        self.check(output)?;
        let out_shape = self.nodes[output.index].value.shape();
        if seed.shape() != out_shape {
            return Err(GrocoError::invalid(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                out_shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.index + 1];
        grads[output.index] = Some(seed.data().to_vec());

        for idx in (0..=output.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.tracked {
                let factor = match self.fault {
                    Some((kind, f)) if kind == node.op.kind() => f,
                    _ => 1.0,
                };
                self.propagate(node, &g, factor, &mut grads)?;
            }
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d)))
            .map(|g| g.transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(GradientMap {
            tape: self.id,
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: usize,
        contrib: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[target].tracked {
            return;
        }
        let slot = grads[target].get_or_insert_with(|| vec![0.0; self.nodes[target].value.numel()]);
        contrib(slot);
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        factor: f64,
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let val = |i: usize| self.nodes[i].value.data();
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGrad => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                self.accumulate(grads, *a, |ga| {
                    let n = ga.len();
                    for (i, gi) in g.iter().enumerate() {
                        ga[i % n] += factor * gi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    let n = gb.len();
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % n] += factor * sign * gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                self.accumulate(grads, *a, |ga| {
                    let n = ga.len();
                    for (i, gi) in g.iter().enumerate() {
                        ga[i % n] += factor * gi * db[i % db.len()];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    let n = gb.len();
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % n] += factor * gi * da[i % da.len()];
                    }
                });
            }
            Op::Div(a, b) => {
                let (da, db) = (val(*a), val(*b));
                self.accumulate(grads, *a, |ga| {
                    let n = ga.len();
                    for (i, gi) in g.iter().enumerate() {
                        ga[i % n] += factor * gi / db[i % db.len()];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    let n = gb.len();
                    for (i, gi) in g.iter().enumerate() {
                        let y = db[i % db.len()];
                        gb[i % n] -= factor * gi * da[i % da.len()] / (y * y);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (val(*a), val(*b));
                // dA = G B^T, dB = A^T G
                self.accumulate(grads, *a, |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            let gv = factor * g[r * n + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for j in 0..k {
                                ga[r * k + j] += gv * db[j * n + c];
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for r in 0..m {
                        for j in 0..k {
                            let av = factor * da[r * k + j];
                            if av == 0.0 {
                                continue;
                            }
                            let grow = &g[r * n..(r + 1) * n];
                            let brow = &mut gb[j * n..(j + 1) * n];
                            for (bv, gv) in brow.iter_mut().zip(grow) {
                                *bv += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Arctan(x) => {
                let dx = val(*x);
                self.accumulate(grads, *x, |gx| {
                    for (i, gi) in g.iter().enumerate() {
                        gx[i] += factor * gi / (1.0 + dx[i] * dx[i]);
                    }
                });
            }
            Op::Log(x) => {
                let dx = val(*x);
                self.accumulate(grads, *x, |gx| {
                    for (i, gi) in g.iter().enumerate() {
                        gx[i] += factor * gi / dx[i];
                    }
                });
            }
            Op::Exp(x) => {
                let out = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for (i, gi) in g.iter().enumerate() {
                        gx[i] += factor * gi * out[i];
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| {
                    for v in gx.iter_mut() {
                        *v += factor * g[0];
                    }
                });
            }
            Op::Dot(a, b) => {
                let (da, db) = (val(*a), val(*b));
                self.accumulate(grads, *a, |ga| {
                    for (v, y) in ga.iter_mut().zip(db) {
                        *v += factor * g[0] * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (v, y) in gb.iter_mut().zip(da) {
                        *v += factor * g[0] * y;
                    }
                });
            }
            Op::L2Norm(x) => {
                let norm = node.value.item();
                let dx = val(*x);
                if norm > 0.0 {
                    self.accumulate(grads, *x, |gx| {
                        for (v, y) in gx.iter_mut().zip(dx) {
                            *v += factor * g[0] * y / norm;
                        }
                    });
                }
            }
            Op::Clamp { x, lo, hi } => {
                let dx = val(*x);
                self.accumulate(grads, *x, |gx| {
                    for (i, gi) in g.iter().enumerate() {
                        if dx[i] > *lo && dx[i] < *hi {
                            gx[i] += factor * gi;
                        }
                    }
                });
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, |gx| {
                    for (v, gi) in gx.iter_mut().zip(g) {
                        *v += factor * c * gi;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.numel();
                    self.accumulate(grads, p, |gp| {
                        for (v, gi) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *v += factor * gi;
                        }
                    });
                    offset += len;
                }
            }
            Op::IndexSelect { x, indices } => {
                let w = self.nodes[*x].value.row_len();
                self.accumulate(grads, *x, |gx| {
                    for (r, &src) in indices.iter().enumerate() {
                        for c in 0..w {
                            gx[src * w + c] += factor * g[r * w + c];
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for j in 0..k {
            let av = a[r * k + j];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[j * n..(j + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Accumulated gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct GradientMap {
    tape: usize,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl GradientMap {
    /// Gradient for `v`; zeros if nothing reached it.
    pub fn get(&self, v: Var) -> Tensor {
        if v.tape != self.tape {
            panic!("variable from a different tape");
        }
        match self.grads.get(v.index) {
            Some(Some(t)) => t.clone(),
            Some(None) => Tensor::zeros(&self.shapes[v.index]),
            None => Tensor::zeros(&self.shapes[v.index]),
        }
    }

    /// Gradient for `v` if any contribution reached it.
    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }
}
