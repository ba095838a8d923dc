use std::cell::RefCell;
use std::rc::Rc;

use super::{
    gelu_grad_scalar, gelu_scalar, matmul_nt_into, matmul_tn_into, sigmoid_scalar, Result, Tensor,
    TensorError, MASK_PENALTY,
};

pub type NodeId = usize;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Rc<Tensor>),
    Sum(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxMasked(NodeId),
    MseSum(NodeId, NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    GatherRows {
        src: NodeId,
        index: Vec<usize>,
    },
    SliceCols {
        src: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SelectRows {
        keep: Vec<bool>,
        on: NodeId,
        off: NodeId,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
///
/// A tape is meant to live for a single training step on one thread; build a
/// fresh one for each step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

/// Gradients of a scalar root with respect to the trainable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when unreachable from the root.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn requires_grad(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, parents: &[NodeId]) -> Var<'_> {
        let rg = self.requires_grad(parents);
        self.push(value, op, rg)
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.requires_grad => {
                    Some(Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Adds into the gradient buffer of `id`, allocating zeros on first touch.
fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut [f64]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if let Some(da) = acc(nodes, grads, *a) {
                matmul_nt_into(g, bv.data(), da, m, n, k);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                matmul_tn_into(av.data(), g, db, m, k, n);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            if let Some(da) = acc(nodes, grads, *a) {
                for i in 0..m {
                    for j in 0..n {
                        da[j * m + i] += g[i * n + j];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for (p, sign) in [(*a, 1.0), (*b, 1.0)] {
                if let Some(d) = acc(nodes, grads, p) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = acc(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = acc(nodes, grads, *b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            let av = Rc::clone(&nodes[*a].value);
            let bv = Rc::clone(&nodes[*b].value);
            if let Some(d) = acc(nodes, grads, *a) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(bv.data()) {
                    *d += g * y;
                }
            }
            if let Some(d) = acc(nodes, grads, *b) {
                for ((d, g), x) in d.iter_mut().zip(g).zip(av.data()) {
                    *d += g * x;
                }
            }
        }
        Op::AddRow(a, b) => {
            if let Some(d) = acc(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            let n = out.last_dim();
            if let Some(d) = acc(nodes, grads, *b) {
                for row in g.chunks(n) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(d) = acc(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
            }
        }
        Op::MulConst(a, c) => {
            if let Some(d) = acc(nodes, grads, *a) {
                for ((d, g), c) in d.iter_mut().zip(g).zip(c.data()) {
                    *d += g * c;
                }
            }
        }
        Op::Sum(a) => {
            if let Some(d) = acc(nodes, grads, *a) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Sigmoid(a) => {
            if let Some(d) = acc(nodes, grads, *a) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += g * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(d) = acc(nodes, grads, *a) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += g * (1.0 - y * y);
                }
            }
        }
        Op::Gelu(a) => {
            let xv = Rc::clone(&nodes[*a].value);
            if let Some(d) = acc(nodes, grads, *a) {
                for ((d, g), &x) in d.iter_mut().zip(g).zip(xv.data()) {
                    *d += g * gelu_grad_scalar(x);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let dim = out.last_dim();
            let gain_v = Rc::clone(&nodes[*gain].value);
            if let Some(d) = acc(nodes, grads, *gain) {
                for (grow, hrow) in g.chunks(dim).zip(xhat.chunks(dim)) {
                    for ((d, g), h) in d.iter_mut().zip(grow).zip(hrow) {
                        *d += g * h;
                    }
                }
            }
            if let Some(d) = acc(nodes, grads, *bias) {
                for grow in g.chunks(dim) {
                    d.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                }
            }
            if let Some(dx) = acc(nodes, grads, *x) {
                let n = dim as f64;
                let mut dxhat = vec![0.0; dim];
                for (r, ((dxrow, grow), hrow)) in dx
                    .chunks_mut(dim)
                    .zip(g.chunks(dim))
                    .zip(xhat.chunks(dim))
                    .enumerate()
                {
                    for ((dh, g), w) in dxhat.iter_mut().zip(grow).zip(gain_v.data()) {
                        *dh = g * w;
                    }
                    let sum_dh: f64 = dxhat.iter().sum();
                    let sum_dh_h: f64 = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum();
                    let s = inv_std[r] / n;
                    for ((d, dh), h) in dxrow.iter_mut().zip(&dxhat).zip(hrow) {
                        *d += s * (n * dh - sum_dh - h * sum_dh_h);
                    }
                }
            }
        }
        Op::SoftmaxMasked(a) => {
            let dim = out.last_dim();
            if let Some(d) = acc(nodes, grads, *a) {
                for ((drow, grow), yrow) in d
                    .chunks_mut(dim)
                    .zip(g.chunks(dim))
                    .zip(out.data().chunks(dim))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (g - dot);
                    }
                }
            }
        }
        Op::MseSum(a, b) => {
            let av = Rc::clone(&nodes[*a].value);
            let bv = Rc::clone(&nodes[*b].value);
            let batch = av.shape().first().copied().unwrap_or(1) as f64;
            let scale = 2.0 * g[0] / batch;
            if let Some(d) = acc(nodes, grads, *a) {
                for ((d, x), y) in d.iter_mut().zip(av.data()).zip(bv.data()) {
                    *d += scale * (x - y);
                }
            }
            if let Some(d) = acc(nodes, grads, *b) {
                for ((d, x), y) in d.iter_mut().zip(av.data()).zip(bv.data()) {
                    *d -= scale * (x - y);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            let classes = nodes[*logits].value.last_dim();
            let scale = g[0] / *count as f64;
            if let Some(d) = acc(nodes, grads, *logits) {
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    let drow = &mut d[r * classes..(r + 1) * classes];
                    let prow = &probs[r * classes..(r + 1) * classes];
                    for (c, (d, p)) in drow.iter_mut().zip(prow).enumerate() {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        *d += scale * (p - onehot);
                    }
                }
            }
        }
        Op::GatherRows { src, index } => {
            let dim = out.last_dim();
            if let Some(d) = acc(nodes, grads, *src) {
                for (r, &i) in index.iter().enumerate() {
                    let grow = &g[r * dim..(r + 1) * dim];
                    d[i * dim..(i + 1) * dim]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::SliceCols { src, start } => {
            let width = out.last_dim();
            let src_cols = nodes[*src].value.last_dim();
            if let Some(d) = acc(nodes, grads, *src) {
                for (drow, grow) in d.chunks_mut(src_cols).zip(g.chunks(width)) {
                    drow[*start..*start + width]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.last_dim();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.last_dim();
                if let Some(d) = acc(nodes, grads, p) {
                    for (drow, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                        drow.iter_mut()
                            .zip(&grow[offset..offset + w])
                            .for_each(|(d, g)| *d += g);
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(d) = acc(nodes, grads, p) {
                    d.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(d, g)| *d += g);
                }
                offset += len;
            }
        }
        Op::SelectRows { keep, on, off } => {
            let dim = out.last_dim();
            for (target, want) in [(*on, true), (*off, false)] {
                if let Some(d) = acc(nodes, grads, target) {
                    for (r, &k) in keep.iter().enumerate() {
                        if k == want {
                            d[r * dim..(r + 1) * dim]
                                .iter_mut()
                                .zip(&g[r * dim..(r + 1) * dim])
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Convenience for `tape.backward(self)`.
    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(*self)
    }

    fn unary(&self, op: Op, value: Tensor) -> Var<'t> {
        self.tape.record(value, op, &[self.id])
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(mismatch(op, &a, &b));
        }
        Ok((a, b))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().matmul(&other.value())?;
        Ok(self
            .tape
            .record(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = self.value().transpose()?;
        Ok(self.unary(Op::Transpose(self.id), value))
    }

    fn zip_with(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, name)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.record(value, op, &[self.id, other.id]))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    /// Adds a `[n]` vector to every row of a `[.., n]` tensor.
    pub fn add_row(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = bias.value();
        let n = a.last_dim();
        if b.shape() != [n] {
            return Err(mismatch("add_row", &a, &b));
        }
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self
            .tape
            .record(value, Op::AddRow(self.id, bias.id), &[self.id, bias.id]))
    }

    /// `self · w + b` for a `[n×k]` input, `[k×m]` weight and `[m]` bias.
    pub fn affine(&self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.matmul(weight)?.add_row(bias)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let value = self.value().map(|x| c * x);
        self.unary(Op::Scale(self.id, c), value)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, c: Rc<Tensor>) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape() != c.shape() {
            return Err(mismatch("mul_const", &a, &c));
        }
        let data = a.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(Op::MulConst(self.id, c), value))
    }

    pub fn sum(&self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.unary(Op::Sum(self.id), value)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let value = self.value().map(sigmoid_scalar);
        self.unary(Op::Sigmoid(self.id), value)
    }

    pub fn tanh(&self) -> Var<'t> {
        let value = self.value().map(f64::tanh);
        self.unary(Op::Tanh(self.id), value)
    }

    pub fn gelu(&self) -> Var<'t> {
        let value = self.value().map(gelu_scalar);
        self.unary(Op::Gelu(self.id), value)
    }

    /// Normalizes each row over the last dimension with biased variance.
    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let d = x.last_dim();
        if x.shape().is_empty() || d == 0 {
            return Err(TensorError::EmptyDimension { op: "layer_norm" });
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let gv = gain.value();
        let bv = bias.value();
        if gv.shape() != [d] {
            return Err(mismatch("layer_norm", &x, &gv));
        }
        if bv.shape() != [d] {
            return Err(mismatch("layer_norm", &x, &bv));
        }
        let rows = x.outer_len();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; x.len()];
        let n = d as f64;
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// Softmax over the last dimension restricted to positions where `mask`
    /// is nonzero. Masked positions come out as exactly zero.
    pub fn softmax_masked(&self, mask: &Tensor) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape() != mask.shape() {
            return Err(mismatch("softmax_masked", &x, mask));
        }
        let d = x.last_dim();
        if d == 0 {
            return Err(TensorError::EmptyDimension {
                op: "softmax_masked",
            });
        }
        let mut out = vec![0.0; x.len()];
        for r in 0..x.outer_len() {
            let row = x.row(r);
            let mrow = mask.row(r);
            if mrow.iter().all(|&m| m == 0.0) {
                return Err(TensorError::DegenerateMask {
                    op: "softmax_masked",
                    row: r,
                });
            }
            let shifted: Vec<f64> = row
                .iter()
                .zip(mrow)
                .map(|(&v, &m)| if m != 0.0 { v } else { v + MASK_PENALTY })
                .collect();
            let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[r * d..(r + 1) * d];
            let mut total = 0.0;
            for ((o, &s), &m) in orow.iter_mut().zip(&shifted).zip(mrow) {
                if m != 0.0 {
                    *o = (s - max).exp();
                    total += *o;
                }
            }
            orow.iter_mut().for_each(|o| *o /= total);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.unary(Op::SoftmaxMasked(self.id), value))
    }

    /// `(1/d_b) Σ_i Σ_j (a_ij − b_ij)²` with `d_b` the leading dimension.
    pub fn mse_sum(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "mse_sum")?;
        if a.shape().is_empty() || a.shape()[0] == 0 {
            return Err(TensorError::EmptyDimension { op: "mse_sum" });
        }
        let batch = a.shape()[0] as f64;
        let total: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(total / batch);
        Ok(self
            .tape
            .record(value, Op::MseSum(self.id, other.id), &[self.id, other.id]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of a
    /// `[n×C]` logit matrix. Rows whose target equals `ignore_index` are skipped.
    pub fn cross_entropy(&self, targets: &[i64], ignore_index: Option<i64>) -> Result<Var<'t>> {
        let logits = self.value();
        let (n, classes) = logits.dims2("cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: logits.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut resolved = Vec::with_capacity(n);
        for &t in targets {
            if Some(t) == ignore_index {
                resolved.push(None);
            } else if t < 0 || t as usize >= classes {
                return Err(TensorError::TargetOutOfRange { target: t, classes });
            } else {
                resolved.push(Some(t as usize));
            }
        }
        let count = resolved.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::EmptyReduction {
                op: "cross_entropy",
            });
        }
        let mut probs = vec![0.0; logits.len()];
        let mut total = 0.0;
        for (r, target) in resolved.iter().enumerate() {
            let Some(t) = *target else { continue };
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            for (p, v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
            total += log_z - row[t];
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.unary(
            Op::CrossEntropy {
                logits: self.id,
                targets: resolved,
                probs,
                count,
            },
            value,
        ))
    }

    /// Rows `index[r]` of a `[n×d]` tensor, in order; repeats allowed.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let src = self.value();
        let (n, d) = src.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= n {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {i} out of range for {n} rows"),
                });
            }
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(vec![index.len(), d], data)?;
        Ok(self.unary(
            Op::GatherRows {
                src: self.id,
                index: index.to_vec(),
            },
            value,
        ))
    }

    /// Columns `start..start + width` of a `[n×d]` tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t>> {
        let src = self.value();
        let (n, d) = src.dims2("slice_cols")?;
        if start + width > d {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for {d}", start + width),
            });
        }
        let mut data = Vec::with_capacity(n * width);
        for r in 0..n {
            data.extend_from_slice(&src.row(r)[start..start + width]);
        }
        let value = Tensor::new(vec![n, width], data)?;
        Ok(self.unary(
            Op::SliceCols {
                src: self.id,
                start,
            },
            value,
        ))
    }

    /// Concatenates `[n×d_k]` matrices along columns.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or(TensorError::EmptyDimension { op: "concat_cols" })?
            .tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let (n, _) = values[0].dims2("concat_cols")?;
        let mut total = 0;
        for v in &values {
            let (m, d) = v.dims2("concat_cols")?;
            if m != n {
                return Err(mismatch("concat_cols", &values[0], v));
            }
            total += d;
        }
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let value = Tensor::new(vec![n, total], data)?;
        Ok(tape.record(value, Op::ConcatCols(ids.clone()), &ids))
    }

    /// Stacks `[n_k×d]` matrices along rows.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or(TensorError::EmptyDimension { op: "concat_rows" })?
            .tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let (_, d) = values[0].dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for v in &values {
            let (m, dv) = v.dims2("concat_rows")?;
            if dv != d {
                return Err(mismatch("concat_rows", &values[0], v));
            }
            rows += m;
            data.extend_from_slice(v.data());
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let value = Tensor::new(vec![rows, d], data)?;
        Ok(tape.record(value, Op::ConcatRows(ids.clone()), &ids))
    }

    /// Row-wise select: row `r` comes from `self` where `keep[r]`, else from `other`.
    pub fn select_rows(&self, keep: &[bool], other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "select_rows")?;
        let (n, d) = a.dims2("select_rows")?;
        if keep.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "select_rows",
                left: a.shape().to_vec(),
                right: vec![keep.len()],
            });
        }
        let mut data = Vec::with_capacity(n * d);
        for (r, &k) in keep.iter().enumerate() {
            data.extend_from_slice(if k { a.row(r) } else { b.row(r) });
        }
        let value = Tensor::new(vec![n, d], data)?;
        Ok(self.tape.record(
            value,
            Op::SelectRows {
                keep: keep.to_vec(),
                on: self.id,
                off: other.id,
            },
            &[self.id, other.id],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let i = tape.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(m(&[&[3.0, 4.0], &[5.0, 6.0]]));
        assert_eq!(i.matmul(b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = tape.constant(m(&[&[1.0, 2.0]]));
        let c = tape.constant(m(&[&[3.0], &[4.0]]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn gelu_symmetry() {
        let tape = Tape::new();
        for x in [-3.0, -0.7, 0.0, 0.3, 1.0, 2.5] {
            let p = tape.constant(Tensor::scalar(x)).gelu().value().item();
            let n = tape.constant(Tensor::scalar(-x)).gelu().value().item();
            assert!((p - n - x).abs() < 1e-14 * x.abs().max(1.0), "x={x}");
        }
    }

    #[test]
    fn layer_norm_fixed_points() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let out = tape
            .constant(m(&[&[5.0, 5.0, 5.0]]))
            .layer_norm(g, b, 1e-5)
            .unwrap();
        assert_eq!(out.value().data(), &[0.0, 0.0, 0.0]);

        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let out = tape
            .constant(m(&[&[1.0, -1.0]]))
            .layer_norm(g, b, 1e-300)
            .unwrap();
        assert_eq!(out.value().data(), &[1.0, -1.0]);
    }

    #[test]
    fn layer_norm_rejects_empty_dim() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::zeros(&[0]));
        let b = tape.constant(Tensor::zeros(&[0]));
        let x = tape.constant(Tensor::zeros(&[2, 0]));
        assert_eq!(
            x.layer_norm(g, b, 1e-5).unwrap_err(),
            TensorError::EmptyDimension { op: "layer_norm" }
        );
    }

    #[test]
    fn softmax_masked_cases() {
        let tape = Tape::new();
        let out = tape
            .constant(m(&[&[0.0, 0.0, 0.0]]))
            .softmax_masked(&m(&[&[1.0, 1.0, 0.0]]))
            .unwrap();
        assert_eq!(out.value().data(), &[0.5, 0.5, 0.0]);

        let out = tape
            .constant(m(&[&[2f64.ln(), 0.0]]))
            .softmax_masked(&m(&[&[1.0, 1.0]]))
            .unwrap();
        let v = out.value();
        assert!((v.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v.data()[1] - 1.0 / 3.0).abs() < 1e-15);

        let mask = m(&[&[1.0, 0.0, 1.0]]);
        let base = tape
            .constant(m(&[&[0.3, -1.0, 2.0]]))
            .softmax_masked(&mask)
            .unwrap();
        let bumped = tape
            .constant(m(&[&[0.3, 9.0, 2.0]]))
            .softmax_masked(&mask)
            .unwrap();
        assert_eq!(base.value().data(), bumped.value().data());

        let err = tape
            .constant(m(&[&[1.0, 2.0]]))
            .softmax_masked(&m(&[&[0.0, 0.0]]))
            .unwrap_err();
        assert!(matches!(err, TensorError::DegenerateMask { row: 0, .. }));
    }

    #[test]
    fn mse_sum_normalizes_by_batch_only() {
        let tape = Tape::new();
        let a = tape.constant(m(&[&[1.0, 2.0]]));
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        assert_eq!(a.mse_sum(z).unwrap().value().item(), 5.0);
        assert_eq!(a.mse_sum(a).unwrap().value().item(), 0.0);
        let a = tape.constant(m(&[&[1.0], &[3.0]]));
        let z = tape.constant(Tensor::zeros(&[2, 1]));
        assert_eq!(a.mse_sum(z).unwrap().value().item(), 5.0);
        let bad = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            a.mse_sum(bad),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn cross_entropy_cases() {
        let tape = Tape::new();
        let l = tape.constant(m(&[&[0.0, 0.0]]));
        let ce = l.cross_entropy(&[0], None).unwrap().value().item();
        assert!((ce - 2f64.ln()).abs() < 1e-15);

        let l = tape.constant(m(&[&[20.0, 0.0]]));
        assert!(l.cross_entropy(&[0], None).unwrap().value().item() < 1e-8);

        let l = tape.constant(m(&[&[0.0, 0.0], &[1.0, 2.0]]));
        assert_eq!(
            l.cross_entropy(&[-100, -100], Some(-100)).unwrap_err(),
            TensorError::EmptyReduction {
                op: "cross_entropy"
            }
        );
        let only_first = l.cross_entropy(&[1, -100], Some(-100)).unwrap();
        assert!((only_first.value().item() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            l.cross_entropy(&[2, 0], None),
            Err(TensorError::TargetOutOfRange { target: 2, .. })
        ));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(x.tanh()),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn backward_accumulates_over_shared_uses() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]));
        let y = x.mul(x).unwrap().add(x).unwrap().sum();
        let grads = y.backward().unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![4.0, 5.0]));
        let grads = x.mul(c).unwrap().sum().backward().unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 5.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn structural_ops_route_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let cat = Var::concat_cols(&[a, b]).unwrap();
        assert_eq!(cat.value().shape(), &[2, 4]);
        let picked = cat.slice_cols(1, 2).unwrap();
        assert_eq!(picked.value().data(), &[2.0, 5.0, 4.0, 7.0]);
        let rows = picked.gather_rows(&[1, 1, 0]).unwrap();
        let sel = a.select_rows(&[false, true], b).unwrap();
        assert_eq!(sel.value().data(), &[5.0, 6.0, 3.0, 4.0]);
        let stacked = Var::concat_rows(&[rows, sel]).unwrap();
        let grads = stacked.sum().backward().unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 1.0, 1.0, 3.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 1.0, 2.0, 0.0]);
    }

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, crate::rng::Stream::Init);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_sum_gradient_matches_finite_differences() {
        let a = rand_tensor(1, &[3, 4]);
        let b = rand_tensor(2, &[4, 2]);
        let errs = super::super::finite_diff_check_many(
            |_, v| Ok(v[0].matmul(v[1])?.sum()),
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(errs[0] <= 1e-6, "{errs:?}");
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x = rand_tensor(3, &[4, 8]);
        let w = rand_tensor(4, &[4, 8]);
        let err = super::super::finite_diff_check(
            |v| {
                let t = v.tape();
                let g = t.constant(Tensor::full(&[8], 1.0));
                let b = t.constant(Tensor::zeros(&[8]));
                Ok(v.layer_norm(g, b, super::super::LAYER_NORM_EPS)?
                    .mul(t.constant(w.clone()))?
                    .sum())
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = rand_tensor(5, &[5, 4]);
        let err = super::super::finite_diff_check(
            |v| v.cross_entropy(&[0, 3, 1, 2, 2], None),
            &logits,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }
}
