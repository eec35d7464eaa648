//! The recording tape: forward operations and reverse-mode backward.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{strides_of, NodeId, Result, Tensor, TensorError};

static TAPE_GEN: AtomicU64 = AtomicU64::new(1);

/// Input of a recorded operation: either an earlier node or an inline
/// constant whose value backward may need.
enum Src {
    Node(NodeId),
    Const { shape: Vec<usize>, data: Vec<f64> },
}

enum ReduceKind {
    Sum,
    Mean,
    Var,
}

enum Op {
    Leaf,
    Add { a: Src, b: Src },
    Sub { a: Src, b: Src },
    Mul { a: Src, b: Src },
    Div { a: Src, b: Src },
    Relu { x: Src },
    Sigmoid { x: Src },
    Tanh { x: Src },
    Exp { x: Src },
    Log { x: Src },
    Sqrt { x: Src },
    ClampMin { x: Src, min: f64 },
    Scale { x: Src, k: f64 },
    AddScalar { x: Src },
    Matmul { a: Src, b: Src },
    Transpose { x: Src },
    Reshape { x: Src },
    Conv1d { x: Src, w: Src, b: Src, dilation: usize },
    Reduce { kind: ReduceKind, x: Src, axis: usize },
    SumAll { x: Src },
    Softmax { x: Src, axis: usize },
    Concat { parts: Vec<Src>, axis: usize },
    Split { x: Src, axis: usize, offset: usize },
    CrossEntropy { logits: Src, labels: Vec<usize> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
}

/// Append-only record of forward operations for one backward pass.
///
/// A tape created with [`Tape::new`] records every operation that involves a
/// gradient-tracked tensor; [`Tape::no_grad`] runs the same operations
/// without recording (evaluation mode). Node inputs always reference earlier
/// nodes, so the node list is already topologically ordered.
pub struct Tape {
    gen: u64,
    enabled: bool,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by node id.
pub struct Gradients {
    gen: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t`, if `t` was on the tape and reached.
    pub fn wrt(&self, t: &Tensor) -> Option<&Tensor> {
        let id = t.node_on(self.gen)?;
        self.grads.get(id)?.as_ref()
    }

    /// Remove and return the gradient for `t`.
    pub fn take_wrt(&mut self, t: &Tensor) -> Option<Tensor> {
        let id = t.node_on(self.gen)?;
        self.grads.get_mut(id)?.take()
    }
}

impl Tape {
    /// A recording tape with a fresh generation id.
    pub fn new() -> Tape {
        Tape {
            gen: TAPE_GEN.fetch_add(1, Ordering::Relaxed),
            enabled: true,
            nodes: Vec::new(),
        }
    }

    /// A non-recording tape: operations validate and compute values but the
    /// node list stays empty. Use for evaluation.
    pub fn no_grad() -> Tape {
        Tape {
            gen: TAPE_GEN.fetch_add(1, Ordering::Relaxed),
            enabled: false,
            nodes: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn record_needed(&self, inputs: &[&Tensor]) -> bool {
        self.enabled
            && inputs
                .iter()
                .any(|t| t.requires_grad_flag() || t.node_on(self.gen).is_some())
    }

    fn src_of(&mut self, t: &Tensor) -> Src {
        if let Some(id) = t.node_on(self.gen) {
            return Src::Node(id);
        }
        if self.enabled && t.requires_grad_flag() {
            let id = self.nodes.len();
            self.nodes.push(Node {
                op: Op::Leaf,
                shape: t.shape().to_vec(),
                value: t.data().to_vec(),
            });
            t.set_node(self.gen, id);
            return Src::Node(id);
        }
        Src::Const {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, record: bool) -> Tensor {
        let t = Tensor::from_raw(shape, data);
        if record {
            let id = self.nodes.len();
            self.nodes.push(Node {
                op,
                shape: t.shape().to_vec(),
                value: t.data().to_vec(),
            });
            t.set_node(self.gen, id);
        }
        t
    }

    fn src_shape<'a>(&'a self, s: &'a Src) -> &'a [usize] {
        match s {
            Src::Node(id) => &self.nodes[*id].shape,
            Src::Const { shape, .. } => shape,
        }
    }

    fn src_data<'a>(&'a self, s: &'a Src) -> &'a [f64] {
        match s {
            Src::Node(id) => &self.nodes[*id].value,
            Src::Const { data, .. } => data,
        }
    }

    // ── binary elementwise with one-sided broadcast (b stretches to a) ──

    fn binary(
        &mut self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Src, Src) -> Op,
    ) -> Result<Tensor> {
        let bpad = pad_broadcast(name, a.shape(), b.shape())?;
        let data = broadcast_map(a.shape(), a.data(), &bpad, b.data(), f);
        let record = self.record_needed(&[a, b]);
        let (sa, sb) = (self.src_of(a), self.src_of(b));
        Ok(self.push(make(sa, sb), a.shape().to_vec(), data, record))
    }

    /// Elementwise `a + b`; trailing size-1 axes of `b` broadcast.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// Elementwise `a - b`.
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Elementwise `a * b`.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// Elementwise `a / b`; rejects zero entries in `b`.
    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if b.data().iter().any(|&v| v == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                reason: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, |a, b| Op::Div { a, b })
    }

    // ── unary elementwise ──

    fn unary(
        &mut self,
        x: &Tensor,
        f: impl Fn(f64) -> f64,
        make: impl FnOnce(Src) -> Op,
    ) -> Tensor {
        let data = x.data().iter().map(|&v| f(v)).collect();
        let record = self.record_needed(&[x]);
        let sx = self.src_of(x);
        self.push(make(sx), x.shape().to_vec(), data, record)
    }

    /// `max(x, 0)`; the gradient at exactly 0 is defined as 0.
    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, |v| v.max(0.0), |x| Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), |x| Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, f64::tanh, |x| Op::Tanh { x })
    }

    pub fn exp(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, f64::exp, |x| Op::Exp { x })
    }

    /// Natural log; rejects non-positive entries.
    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                reason: "log of non-positive value".into(),
            });
        }
        Ok(self.unary(x, f64::ln, |x| Op::Log { x }))
    }

    /// Square root; rejects negative entries.
    pub fn sqrt(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                reason: "sqrt of negative value".into(),
            });
        }
        Ok(self.unary(x, f64::sqrt, |x| Op::Sqrt { x }))
    }

    /// `max(x, min)` with gradient 0 wherever `x <= min`.
    pub fn clamp_min(&mut self, x: &Tensor, min: f64) -> Tensor {
        self.unary(x, |v| v.max(min), |x| Op::ClampMin { x, min })
    }

    /// Scalar multiple `k * x`.
    pub fn scale(&mut self, x: &Tensor, k: f64) -> Tensor {
        self.unary(x, |v| k * v, |x| Op::Scale { x, k })
    }

    /// `x + k` elementwise.
    pub fn add_scalar(&mut self, x: &Tensor, k: f64) -> Tensor {
        self.unary(x, |v| v + k, |x| Op::AddScalar { x })
    }

    // ── shape ops ──

    /// 2-D matrix product `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        let record = self.record_needed(&[a, b]);
        let (sa, sb) = (self.src_of(a), self.src_of(b));
        Ok(self.push(Op::Matmul { a: sa, b: sb }, vec![m, n], data, record))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let data = transpose_raw(x.data(), m, n);
        let record = self.record_needed(&[x]);
        let sx = self.src_of(x);
        Ok(self.push(Op::Transpose { x: sx }, vec![n, m], data, record))
    }

    /// Same buffer, new shape (products must agree).
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != x.numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("cannot reshape {:?} ({} elements)", x.shape(), x.numel()),
            });
        }
        let data = x.data().to_vec();
        let record = self.record_needed(&[x]);
        let sx = self.src_of(x);
        Ok(self.push(Op::Reshape { x: sx }, shape.to_vec(), data, record))
    }

    // ── convolution ──

    /// 1-D convolution with stride 1 and symmetric same-padding.
    ///
    /// `x` is `[C,T]` or `[B,C,T]`, `w` is `[C_out, C_in, K]` with odd K,
    /// `bias` is `[C_out]`, and the zero pad is `dilation*(K-1)/2` per side so
    /// the output keeps the input's time length.
    pub fn conv1d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: &Tensor,
        dilation: usize,
    ) -> Result<Tensor> {
        let (batch, c_in, t_len, batched) = match x.shape() {
            [c, t] => (1usize, *c, *t, false),
            [b, c, t] => (*b, *c, *t, true),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                })
            }
        };
        let &[c_out, wc, k] = w.shape() else {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        };
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel { k });
        }
        if wc != c_in || bias.shape() != [c_out] || dilation == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let data = conv1d_raw(
            x.data(),
            w.data(),
            bias.data(),
            batch,
            c_in,
            t_len,
            c_out,
            k,
            dilation,
        );
        let out_shape = if batched {
            vec![batch, c_out, t_len]
        } else {
            vec![c_out, t_len]
        };
        let record = self.record_needed(&[x, w, bias]);
        let (sx, sw, sb) = (self.src_of(x), self.src_of(w), self.src_of(bias));
        Ok(self.push(
            Op::Conv1d {
                x: sx,
                w: sw,
                b: sb,
                dilation,
            },
            out_shape,
            data,
            record,
        ))
    }

    // ── reductions ──

    fn reduce(&mut self, kind: ReduceKind, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                shape: x.shape().to_vec(),
            });
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let lane = |j: usize| x.data()[(o * n + j) * inner + i];
                let sum: f64 = (0..n).map(lane).sum();
                out[o * inner + i] = match kind {
                    ReduceKind::Sum => sum,
                    ReduceKind::Mean => sum / n as f64,
                    ReduceKind::Var => {
                        let mu = sum / n as f64;
                        (0..n).map(|j| (lane(j) - mu).powi(2)).sum::<f64>() / n as f64
                    }
                };
            }
        }
        let mut shape: Vec<usize> = x.shape().to_vec();
        shape.remove(axis);
        let record = self.record_needed(&[x]);
        let sx = self.src_of(x);
        Ok(self.push(Op::Reduce { kind, x: sx, axis }, shape, out, record))
    }

    /// Sum along `axis` (the axis is removed from the shape).
    pub fn sum(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Sum, x, axis)
    }

    /// Mean along `axis`.
    pub fn mean(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Mean, x, axis)
    }

    /// Population variance (divide by N) along `axis`.
    pub fn var(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Var, x, axis)
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(&mut self, x: &Tensor) -> Tensor {
        let total: f64 = x.data().iter().sum();
        let record = self.record_needed(&[x]);
        let sx = self.src_of(x);
        self.push(Op::SumAll { x: sx }, vec![], vec![total], record)
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                shape: x.shape().to_vec(),
            });
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| x.data()[idx(j)]).fold(f64::MIN, f64::max);
                let mut denom = 0.0;
                for j in 0..n {
                    let e = (x.data()[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    denom += e;
                }
                for j in 0..n {
                    out[idx(j)] /= denom;
                }
            }
        }
        let record = self.record_needed(&[x]);
        let sx = self.src_of(x);
        Ok(self.push(Op::Softmax { x: sx, axis }, x.shape().to_vec(), out, record))
    }

    // ── concat / split ──

    /// Concatenate along `axis`; all other dimensions must match.
    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                shape: first.to_vec(),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != first.len()
                || p.shape()
                    .iter()
                    .zip(first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            axis_total += p.shape()[axis];
        }
        let mut shape = first.to_vec();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; shape.iter().product()];
        for o in 0..outer {
            let mut off = 0;
            for p in parts {
                let pn = p.shape()[axis];
                let src = &p.data()[o * pn * inner..(o + 1) * pn * inner];
                let dst_start = (o * axis_total + off) * inner;
                out[dst_start..dst_start + pn * inner].copy_from_slice(src);
                off += pn;
            }
        }
        let record = self.record_needed(parts);
        let srcs = parts.iter().map(|p| self.src_of(p)).collect();
        Ok(self.push(Op::Concat { parts: srcs, axis }, shape, out, record))
    }

    /// Split along `axis` into parts of the given sizes (must sum to the
    /// axis length). Inverse of [`Tape::concat`].
    pub fn split(&mut self, x: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if axis >= x.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                shape: x.shape().to_vec(),
            });
        }
        let n = x.shape()[axis];
        if sizes.iter().sum::<usize>() != n || sizes.iter().any(|&s| s == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "split",
                lhs: x.shape().to_vec(),
                rhs: sizes.to_vec(),
            });
        }
        let (outer, _, inner) = axis_split(x.shape(), axis);
        let record = self.record_needed(&[x]);
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &sz in sizes {
            let mut shape = x.shape().to_vec();
            shape[axis] = sz;
            let mut data = vec![0.0; shape.iter().product()];
            for o in 0..outer {
                let src_start = (o * n + offset) * inner;
                data[o * sz * inner..(o + 1) * sz * inner]
                    .copy_from_slice(&x.data()[src_start..src_start + sz * inner]);
            }
            let sx = self.src_of(x);
            out.push(self.push(Op::Split { x: sx, axis, offset }, shape, data, record));
            offset += sz;
        }
        Ok(out)
    }

    // ── loss ──

    /// Mean categorical cross-entropy of `logits` `[B, N]` against integer
    /// labels, computed via log-sum-exp. Returns a rank-0 scalar.
    pub fn cross_entropy(&mut self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let &[b, n] = logits.shape() else {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        };
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(TensorError::Domain {
                op: "cross_entropy",
                reason: format!("label {bad} out of range for {n} classes"),
            });
        }
        let mut total = 0.0;
        for (bi, &label) in labels.iter().enumerate() {
            let row = &logits.data()[bi * n..(bi + 1) * n];
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let loss = total / b as f64;
        let record = self.record_needed(&[logits]);
        let sl = self.src_of(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits: sl,
                labels: labels.to_vec(),
            },
            vec![],
            vec![loss],
            record,
        ))
    }

    // ── backward ──

    /// Reverse-accumulate gradients of a scalar loss over the whole tape.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, shape is {:?}",
                loss.shape()
            )));
        }
        let Some(root) = loss.node_on(self.gen) else {
            return Err(TensorError::Contract(
                "loss is not recorded on this tape".into(),
            ));
        };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0; 1]);

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.step_backward(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| g.map(|g| Tensor::from_raw(self.nodes[id].shape.clone(), g)))
            .collect();
        Ok(Gradients {
            gen: self.gen,
            grads: out,
        })
    }

    fn step_backward(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let acc = |grads: &mut [Option<Vec<f64>>], src: &Src, delta: Vec<f64>| {
            if let Src::Node(i) = src {
                match &mut grads[*i] {
                    Some(existing) => {
                        for (e, d) in existing.iter_mut().zip(&delta) {
                            *e += d;
                        }
                    }
                    slot => *slot = Some(delta),
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let bpad = padded_shape(&node.shape, self.src_shape(b));
                acc(grads, a, g.to_vec());
                acc(grads, b, reduce_to_broadcast(g, &node.shape, &bpad));
            }
            Op::Sub { a, b } => {
                let bpad = padded_shape(&node.shape, self.src_shape(b));
                acc(grads, a, g.to_vec());
                let mut db = reduce_to_broadcast(g, &node.shape, &bpad);
                db.iter_mut().for_each(|v| *v = -*v);
                acc(grads, b, db);
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.src_data(a), self.src_data(b));
                let bpad = padded_shape(&node.shape, self.src_shape(b));
                let da = broadcast_map(&node.shape, g, &bpad, bd, |gv, bv| gv * bv);
                acc(grads, a, da);
                let prod: Vec<f64> = g.iter().zip(ad).map(|(gv, av)| gv * av).collect();
                acc(grads, b, reduce_to_broadcast(&prod, &node.shape, &bpad));
            }
            Op::Div { a, b } => {
                let (ad, bd) = (self.src_data(a), self.src_data(b));
                let bpad = padded_shape(&node.shape, self.src_shape(b));
                let da = broadcast_map(&node.shape, g, &bpad, bd, |gv, bv| gv / bv);
                acc(grads, a, da);
                let num: Vec<f64> = g.iter().zip(ad).map(|(gv, av)| gv * av).collect();
                let scaled = broadcast_map(&node.shape, &num, &bpad, bd, |nv, bv| -nv / (bv * bv));
                acc(grads, b, reduce_to_broadcast(&scaled, &node.shape, &bpad));
            }
            Op::Relu { x } => {
                let xd = self.src_data(x);
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(grads, x, dx);
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                let dx = g.iter().zip(y).map(|(gv, &yv)| gv * yv * (1.0 - yv)).collect();
                acc(grads, x, dx);
            }
            Op::Tanh { x } => {
                let y = &node.value;
                let dx = g.iter().zip(y).map(|(gv, &yv)| gv * (1.0 - yv * yv)).collect();
                acc(grads, x, dx);
            }
            Op::Exp { x } => {
                let y = &node.value;
                let dx = g.iter().zip(y).map(|(gv, &yv)| gv * yv).collect();
                acc(grads, x, dx);
            }
            Op::Log { x } => {
                let xd = self.src_data(x);
                let dx = g.iter().zip(xd).map(|(gv, &xv)| gv / xv).collect();
                acc(grads, x, dx);
            }
            Op::Sqrt { x } => {
                let y = &node.value;
                let dx = g.iter().zip(y).map(|(gv, &yv)| gv * 0.5 / yv).collect();
                acc(grads, x, dx);
            }
            Op::ClampMin { x, min } => {
                let xd = self.src_data(x);
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(gv, &xv)| if xv > *min { *gv } else { 0.0 })
                    .collect();
                acc(grads, x, dx);
            }
            Op::Scale { x, k } => {
                acc(grads, x, g.iter().map(|gv| gv * k).collect());
            }
            Op::AddScalar { x } => {
                acc(grads, x, g.to_vec());
            }
            Op::Matmul { a, b } => {
                let (ad, bd) = (self.src_data(a), self.src_data(b));
                let (m, k) = (self.src_shape(a)[0], self.src_shape(a)[1]);
                let n = self.src_shape(b)[1];
                // dA = G * B^T, dB = A^T * G
                let bt = transpose_raw(bd, k, n);
                acc(grads, a, matmul_raw(g, &bt, m, n, k));
                let at = transpose_raw(ad, m, k);
                acc(grads, b, matmul_raw(&at, g, k, m, n));
            }
            Op::Transpose { x } => {
                let (n, m) = (node.shape[0], node.shape[1]);
                acc(grads, x, transpose_raw(g, n, m));
            }
            Op::Reshape { x } => {
                acc(grads, x, g.to_vec());
            }
            Op::Conv1d { x, w, b, dilation } => {
                let (xs, ws) = (self.src_shape(x), self.src_shape(w));
                let (batch, c_in, t_len) = match xs {
                    [c, t] => (1usize, *c, *t),
                    [bb, c, t] => (*bb, *c, *t),
                    _ => unreachable!("validated in forward"),
                };
                let (c_out, k) = (ws[0], ws[2]);
                let (dx, dw, db) = conv1d_backward_raw(
                    g,
                    self.src_data(x),
                    self.src_data(w),
                    batch,
                    c_in,
                    t_len,
                    c_out,
                    k,
                    *dilation,
                );
                acc(grads, x, dx);
                acc(grads, w, dw);
                acc(grads, b, db);
            }
            Op::Reduce { kind, x, axis } => {
                let xs = self.src_shape(x);
                let xd = self.src_data(x);
                let (outer, n, inner) = axis_split(xs, *axis);
                let mut dx = vec![0.0; xd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = g[o * inner + i];
                        match kind {
                            ReduceKind::Sum => {
                                for j in 0..n {
                                    dx[(o * n + j) * inner + i] = gv;
                                }
                            }
                            ReduceKind::Mean => {
                                for j in 0..n {
                                    dx[(o * n + j) * inner + i] = gv / n as f64;
                                }
                            }
                            ReduceKind::Var => {
                                let mu = (0..n)
                                    .map(|j| xd[(o * n + j) * inner + i])
                                    .sum::<f64>()
                                    / n as f64;
                                for j in 0..n {
                                    let xv = xd[(o * n + j) * inner + i];
                                    dx[(o * n + j) * inner + i] =
                                        gv * 2.0 * (xv - mu) / n as f64;
                                }
                            }
                        }
                    }
                }
                acc(grads, x, dx);
            }
            Op::SumAll { x } => {
                let n = self.src_data(x).len();
                acc(grads, x, vec![g[0]; n]);
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                acc(grads, x, dx);
            }
            Op::Concat { parts, axis } => {
                let total = node.shape[*axis];
                let (outer, _, inner) = axis_split(&node.shape, *axis);
                let mut off = 0;
                for p in parts {
                    let pn = self.src_shape(p)[*axis];
                    let mut dp = vec![0.0; self.src_data(p).len()];
                    for o in 0..outer {
                        let src_start = (o * total + off) * inner;
                        dp[o * pn * inner..(o + 1) * pn * inner]
                            .copy_from_slice(&g[src_start..src_start + pn * inner]);
                    }
                    acc(grads, p, dp);
                    off += pn;
                }
            }
            Op::Split { x, axis, offset } => {
                let xs = self.src_shape(x);
                let n = xs[*axis];
                let sz = node.shape[*axis];
                let (outer, _, inner) = axis_split(xs, *axis);
                let mut dx = vec![0.0; self.src_data(x).len()];
                for o in 0..outer {
                    let dst_start = (o * n + offset) * inner;
                    dx[dst_start..dst_start + sz * inner]
                        .copy_from_slice(&g[o * sz * inner..(o + 1) * sz * inner]);
                }
                acc(grads, x, dx);
            }
            Op::CrossEntropy { logits, labels } => {
                let zd = self.src_data(logits);
                let n = self.src_shape(logits)[1];
                let b = labels.len();
                let mut dz = vec![0.0; zd.len()];
                for (bi, &label) in labels.iter().enumerate() {
                    let row = &zd[bi * n..(bi + 1) * n];
                    let max = row.iter().cloned().fold(f64::MIN, f64::max);
                    let denom: f64 = row.iter().map(|&z| (z - max).exp()).sum();
                    for j in 0..n {
                        let p = (row[j] - max).exp() / denom;
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        dz[bi * n + j] = g[0] * (p - onehot) / b as f64;
                    }
                }
                acc(grads, logits, dz);
            }
        }
    }
}

// ── raw kernels ──────────────────────────────────────────────────────

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            y[j * m + i] = x[i * n + j];
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv1d_raw(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    batch: usize,
    c_in: usize,
    t_len: usize,
    c_out: usize,
    k: usize,
    dilation: usize,
) -> Vec<f64> {
    let pad = (dilation * (k - 1) / 2) as isize;
    let mut y = vec![0.0; batch * c_out * t_len];
    for bi in 0..batch {
        for oi in 0..c_out {
            let yrow = &mut y[(bi * c_out + oi) * t_len..(bi * c_out + oi + 1) * t_len];
            yrow.fill(bias[oi]);
            for ci in 0..c_in {
                let xrow = &x[(bi * c_in + ci) * t_len..(bi * c_in + ci + 1) * t_len];
                for ki in 0..k {
                    let wv = w[(oi * c_in + ci) * k + ki];
                    let shift = (ki * dilation) as isize - pad;
                    let t0 = (-shift).max(0) as usize;
                    let t1 = ((t_len as isize - shift).min(t_len as isize)).max(0) as usize;
                    for ti in t0..t1 {
                        yrow[ti] += wv * xrow[(ti as isize + shift) as usize];
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward_raw(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    batch: usize,
    c_in: usize,
    t_len: usize,
    c_out: usize,
    k: usize,
    dilation: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let pad = (dilation * (k - 1) / 2) as isize;
    let mut dx = vec![0.0; batch * c_in * t_len];
    let mut dw = vec![0.0; c_out * c_in * k];
    let mut db = vec![0.0; c_out];
    for bi in 0..batch {
        for oi in 0..c_out {
            let grow = &g[(bi * c_out + oi) * t_len..(bi * c_out + oi + 1) * t_len];
            db[oi] += grow.iter().sum::<f64>();
            for ci in 0..c_in {
                let xrow = &x[(bi * c_in + ci) * t_len..(bi * c_in + ci + 1) * t_len];
                let dxrow_start = (bi * c_in + ci) * t_len;
                for ki in 0..k {
                    let shift = (ki * dilation) as isize - pad;
                    let t0 = (-shift).max(0) as usize;
                    let t1 = ((t_len as isize - shift).min(t_len as isize)).max(0) as usize;
                    let wv = w[(oi * c_in + ci) * k + ki];
                    let mut wg = 0.0;
                    for ti in t0..t1 {
                        let xi = (ti as isize + shift) as usize;
                        wg += grow[ti] * xrow[xi];
                        dx[dxrow_start + xi] += wv * grow[ti];
                    }
                    dw[(oi * c_in + ci) * k + ki] += wg;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Split a shape at `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Validate that `b_shape` broadcasts to `a_shape` (after left-padding with
/// 1s) and return the padded shape.
fn pad_broadcast(
    op: &'static str,
    a_shape: &[usize],
    b_shape: &[usize],
) -> Result<Vec<usize>> {
    if b_shape.len() > a_shape.len() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        });
    }
    let padded = padded_shape(a_shape, b_shape);
    for (&ad, &bd) in a_shape.iter().zip(&padded) {
        if bd != ad && bd != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a_shape.to_vec(),
                rhs: b_shape.to_vec(),
            });
        }
    }
    Ok(padded)
}

fn padded_shape(a_shape: &[usize], b_shape: &[usize]) -> Vec<usize> {
    let mut padded = vec![1usize; a_shape.len()];
    padded[a_shape.len() - b_shape.len()..].copy_from_slice(b_shape);
    padded
}

/// Apply `f` over `a` and broadcast `b` (padded shape, stretched where 1).
fn broadcast_map(
    a_shape: &[usize],
    a: &[f64],
    b_padded: &[usize],
    b: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_padded {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let b_strides = broadcast_strides(a_shape, b_padded);
    let rank = a_shape.len();
    let mut coords = vec![0usize; rank];
    let mut b_idx = 0usize;
    let mut out = Vec::with_capacity(a.len());
    for &av in a {
        out.push(f(av, b[b_idx]));
        // odometer increment
        for d in (0..rank).rev() {
            coords[d] += 1;
            b_idx += b_strides[d];
            if coords[d] < a_shape[d] {
                break;
            }
            b_idx -= coords[d] * b_strides[d];
            coords[d] = 0;
        }
    }
    out
}

/// Sum `grad` (shaped like `a_shape`) down to the padded broadcast shape.
fn reduce_to_broadcast(grad: &[f64], a_shape: &[usize], b_padded: &[usize]) -> Vec<f64> {
    if a_shape == b_padded {
        return grad.to_vec();
    }
    let b_strides = broadcast_strides(a_shape, b_padded);
    let rank = a_shape.len();
    let mut out = vec![0.0; b_padded.iter().product()];
    let mut coords = vec![0usize; rank];
    let mut b_idx = 0usize;
    for &gv in grad {
        out[b_idx] += gv;
        for d in (0..rank).rev() {
            coords[d] += 1;
            b_idx += b_strides[d];
            if coords[d] < a_shape[d] {
                break;
            }
            b_idx -= coords[d] * b_strides[d];
            coords[d] = 0;
        }
    }
    out
}

/// Strides into the padded-b buffer per a-axis; stretched axes get stride 0.
fn broadcast_strides(a_shape: &[usize], b_padded: &[usize]) -> Vec<usize> {
    let real = strides_of(b_padded);
    a_shape
        .iter()
        .zip(b_padded)
        .zip(real)
        .map(|((&ad, &bd), s)| if bd == 1 && ad != 1 { 0 } else { s })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::from_vec(&[data.len()], data.to_vec()).unwrap()
    }

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= tol, "{got:?} !~ {want:?}");
        }
    }

    #[test]
    fn relu_sigmoid_definitions() {
        let mut tape = Tape::no_grad();
        let r = tape.relu(&t1(&[-1.0, 0.0, 2.0]));
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let s = tape.sigmoid(&t1(&[0.0]));
        assert_eq!(s.data(), &[0.5]);
    }

    #[test]
    fn add_broadcasts_trailing_axis() {
        let mut tape = Tape::no_grad();
        let y = tape.add(&t1(&[1.0, 2.0, 3.0]), &t1(&[10.0])).unwrap();
        assert_eq!(y.data(), &[11.0, 12.0, 13.0]);

        // [2,2] + [2] broadcasts per row; [2,2] + [3] does not fit.
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.add(&a, &t1(&[10.0, 20.0])).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
        assert!(tape.add(&a, &t1(&[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::no_grad();
        assert!(matches!(
            tape.log(&t1(&[1.0, 0.0])),
            Err(TensorError::Domain { .. })
        ));
        assert!(tape.log(&t1(&[1.0, 2.0])).is_ok());
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::no_grad();
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(tape.matmul(&eye, &m).unwrap().bitwise_eq(&m));

        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(tape.matmul(&a, &b).unwrap().data(), &[11.0]);

        let z = Tensor::zeros(&[2, 3]).unwrap();
        let any = Tensor::uniform_seeded(&[3, 4], 3, -1.0, 1.0).unwrap();
        let y = tape.matmul(&z, &any).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));

        assert!(tape.matmul(&a, &any).is_err());
    }

    #[test]
    fn conv1d_examples() {
        let mut tape = Tape::no_grad();
        let zero_bias = Tensor::zeros(&[1]).unwrap();

        // K=1 identity kernel.
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let y = tape.conv1d(&x, &w, &zero_bias, 1).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);

        // Centered delta, K=3.
        let x = Tensor::from_vec(&[1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let y = tape.conv1d(&x, &w, &zero_bias, 1).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);

        // Dilation 2 box kernel, hand-convolved with zero pad 2.
        let w = Tensor::from_vec(&[1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let y = tape.conv1d(&x, &w, &zero_bias, 2).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 9.0, 6.0, 8.0]);

        // Even kernels are unsupported.
        let w = Tensor::from_vec(&[1, 1, 2], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            tape.conv1d(&x, &w, &zero_bias, 1),
            Err(TensorError::EvenKernel { k: 2 })
        ));
    }

    #[test]
    fn conv1d_batched_matches_per_item() {
        let mut tape = Tape::no_grad();
        let mut rng = super::super::rng_from_seed(11);
        let x0 = Tensor::uniform(&[2, 7], &mut rng, -1.0, 1.0).unwrap();
        let x1 = Tensor::uniform(&[2, 7], &mut rng, -1.0, 1.0).unwrap();
        let w = Tensor::uniform(&[3, 2, 3], &mut rng, -1.0, 1.0).unwrap();
        let b = Tensor::uniform(&[3], &mut rng, -1.0, 1.0).unwrap();

        let mut stacked = x0.data().to_vec();
        stacked.extend_from_slice(x1.data());
        let xb = Tensor::from_vec(&[2, 2, 7], stacked).unwrap();

        let yb = tape.conv1d(&xb, &w, &b, 2).unwrap();
        let y0 = tape.conv1d(&x0, &w, &b, 2).unwrap();
        let y1 = tape.conv1d(&x1, &w, &b, 2).unwrap();
        assert_eq!(&yb.data()[..21], y0.data());
        assert_eq!(&yb.data()[21..], y1.data());
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::no_grad();
        let m = tape.mean(&t1(&[1.0, 2.0, 3.0]), 0).unwrap();
        assert_eq!(m.shape(), &[] as &[usize]);
        assert_eq!(m.item().unwrap(), 2.0);

        let v = tape.var(&t1(&[2.0, 2.0, 2.0]), 0).unwrap();
        assert_eq!(v.item().unwrap(), 0.0);

        let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = tape.sum(&x, 1).unwrap();
        assert_eq!(s.data(), &[3.0, 7.0]);

        assert!(matches!(
            tape.sum(&x, 2),
            Err(TensorError::AxisOutOfRange { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::no_grad();
        let u = tape.softmax(&t1(&[0.0, 0.0, 0.0, 0.0]), 0).unwrap();
        assert_close(u.data(), &[0.25; 4], 1e-15);

        // Stability under huge logits.
        let big = tape.softmax(&t1(&[1000.0, 1000.0]), 0).unwrap();
        assert_close(big.data(), &[0.5, 0.5], 1e-15);

        let y = tape.softmax(&t1(&[0.0, 3.0f64.ln()]), 0).unwrap();
        assert_close(y.data(), &[0.25, 0.75], 1e-12);

        // Sums to one, invariant to a constant shift of all logits.
        let x = t1(&[0.3, -1.7, 2.2, 0.0, 5.5]);
        let s = tape.softmax(&x, 0).unwrap();
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted = tape.add_scalar(&x, 123.456);
        let s2 = tape.softmax(&shifted, 0).unwrap();
        assert_close(s.data(), s2.data(), 1e-12);
    }

    #[test]
    fn concat_split_examples() {
        let mut tape = Tape::no_grad();
        let a = Tensor::uniform_seeded(&[2, 3], 1, -1.0, 1.0).unwrap();
        let b = Tensor::uniform_seeded(&[2, 5], 2, -1.0, 1.0).unwrap();
        let cat = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(cat.shape(), &[2, 8]);

        let parts = tape.split(&cat, 1, &[3, 5]).unwrap();
        assert!(parts[0].bitwise_eq(&a));
        assert!(parts[1].bitwise_eq(&b));

        assert!(tape.split(&cat, 1, &[4, 5]).is_err());
        let c = Tensor::zeros(&[3, 3]).unwrap();
        assert!(tape.concat(&[&a, &c], 1).is_err());
    }

    #[test]
    fn split_row_ranges_along_channels() {
        // 6 rows split as [2, 4]: rows 0..2 and 2..6.
        let mut tape = Tape::no_grad();
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let x = Tensor::from_vec(&[6, 2], data).unwrap();
        let parts = tape.split(&x, 0, &[2, 4]).unwrap();
        assert_eq!(parts[0].data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(parts[1].data()[0], 4.0);
        assert_eq!(parts[1].shape(), &[4, 2]);
    }

    #[test]
    fn backward_sum_and_square() {
        // loss = sum(x) -> grad of ones.
        let mut tape = Tape::new();
        let x = t1(&[5.0, -2.0, 0.5]).requires_grad(true);
        let loss = tape.sum_all(&x);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[1.0, 1.0, 1.0]);

        // loss = sum(x*x) -> 2x.
        let mut tape = Tape::new();
        let x = t1(&[1.0, 2.0]).requires_grad(true);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_relu_subgradient() {
        let mut tape = Tape::new();
        let x = t1(&[-1.0, 1.0]).requires_grad(true);
        let r = tape.relu(&x);
        let loss = tape.sum_all(&r);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_on_tape() {
        let mut tape = Tape::new();
        let x = t1(&[1.0, 2.0]).requires_grad(true);
        let y = tape.relu(&x);
        assert!(matches!(
            tape.backward(&y),
            Err(TensorError::Contract(_))
        ));
        // A scalar that never touched the tape is rejected too.
        assert!(tape.backward(&Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn gradients_match_node_shapes() {
        let mut tape = Tape::new();
        let x = Tensor::uniform_seeded(&[3, 4], 5, -1.0, 1.0)
            .unwrap()
            .requires_grad(true);
        let w = Tensor::uniform_seeded(&[4, 2], 6, -1.0, 1.0)
            .unwrap()
            .requires_grad(true);
        let y = tape.matmul(&x, &w).unwrap();
        let loss = tape.sum_all(&y);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().shape(), x.shape());
        assert_eq!(grads.wrt(&w).unwrap().shape(), w.shape());
    }

    #[test]
    fn no_grad_tape_stays_empty() {
        let mut tape = Tape::no_grad();
        let x = t1(&[1.0, 2.0]).requires_grad(true);
        let y = tape.relu(&x);
        let _ = tape.mul(&y, &y).unwrap();
        assert!(tape.is_empty());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = Tensor::uniform_seeded(&[4, 6], 42, -1.0, 1.0)
                .unwrap()
                .requires_grad(true);
            let w = Tensor::uniform_seeded(&[3, 4, 3], 43, -0.5, 0.5).unwrap();
            let b = Tensor::zeros(&[3]).unwrap();
            let y = tape.conv1d(&x, &w, &b, 2).unwrap();
            let s = tape.softmax(&y, 0).unwrap();
            let loss = tape.sum_all(&s);
            let grads = tape.backward(&loss).unwrap();
            (y, grads.wrt(&x).unwrap().clone())
        };
        let (y1, g1) = run();
        let (y2, g2) = run();
        assert!(y1.bitwise_eq(&y2));
        assert!(g1.bitwise_eq(&g2));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut tape = Tape::no_grad();
        // Uniform logits over 10 classes -> ln 10.
        let z = Tensor::zeros(&[1, 10]).unwrap();
        let loss = tape.cross_entropy(&z, &[3]).unwrap();
        assert!((loss.item().unwrap() - 10.0f64.ln()).abs() < 1e-12);

        // Label out of range.
        assert!(tape.cross_entropy(&z, &[10]).is_err());
    }
}
