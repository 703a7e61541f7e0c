//! Minimal reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Tape`] records primitive operations in topological order; [`Tape::backward`]
//! walks the record once in reverse with a fixed accumulation order, so
//! gradients are bit-reproducible. The op vocabulary is exactly what the
//! encoder networks and the energy heads need, nothing more.

mod kernels;
mod tensor;

pub use kernels::ConvDims;
pub use tensor::TensorValue;

use crate::error::{Error, Result};
use crate::expfam::{sigmoid, softplus};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AddMode {
    Same,
    /// a viewed as [lead, ch, inner], b is [ch].
    Bias { lead: usize, ch: usize, inner: usize },
    /// b is a single element added everywhere.
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { diff: bool },
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Conv2d { x: NodeId, w: NodeId, dims: ConvDims },
    Add { a: NodeId, b: NodeId, mode: AddMode },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Negate { a: NodeId },
    Swish { a: NodeId },
    Relu { a: NodeId },
    LeakyRelu { a: NodeId, alpha: f64 },
    Softplus { a: NodeId },
    Reshape { a: NodeId },
    Sum { a: NodeId },
    /// Reduce the last axis; `groups` leading positions of `width` entries.
    Logsumexp { a: NodeId, groups: usize, width: usize },
    /// Gaussian log normalizer summed over the last axis of a (λ₁, λ₂) pair.
    GaussLogZ { lam1: NodeId, lam2: NodeId, groups: usize, width: usize },
    /// Stack same-shape inputs along a new trailing axis.
    StackLast { parts: Vec<NodeId> },
}

struct Node {
    op: Op,
    value: TensorValue,
    needs_grad: bool,
}

/// Gradient table produced by [`Tape::backward`]. Differentiable leaves that
/// did not influence the output hold zero tensors of their shape.
pub struct Gradients {
    slots: Vec<Option<TensorValue>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&TensorValue> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<TensorValue> {
        self.slots.get_mut(id.0).and_then(|s| s.take())
    }
}

/// Recorded computation. One backward pass per tape; reset to reuse storage.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clear all recorded nodes and re-arm backward.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, id: NodeId) -> &TensorValue {
        &self.nodes[id.0].value
    }

    /// Register an input tensor. Finiteness is enforced here, the graph
    /// boundary.
    pub fn leaf(&mut self, value: TensorValue, diff: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::non_finite("leaf input"));
        }
        Ok(self.push(Op::Leaf { diff }, value, diff))
    }

    pub fn constant(&mut self, value: TensorValue) -> Result<NodeId> {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, value: TensorValue, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// a (m×k) · b (k×n) -> (m×n). Rank-2 operands only.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                "(m,k) by (k,n)".to_string(),
                format!("{sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::Matmul { a, b, m, k, n },
            TensorValue::new(vec![m, n], out)?,
            needs,
        ))
    }

    /// Direct correlation of x [N,C,H,W] with w [OC,C,KH,KW].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(
                "conv2d",
                "[N,C,H,W] with [OC,C,KH,KW]".to_string(),
                format!("{sx:?} with {sw:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("stride", "must be at least 1"));
        }
        let oh = ConvDims::output_extent(sx[2], sw[2], stride, pad);
        let ow = ConvDims::output_extent(sx[3], sw[3], stride, pad);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    "kernel no larger than padded input".to_string(),
                    format!("input {sx:?}, kernel {sw:?}, stride {stride}, pad {pad}"),
                ))
            }
        };
        let dims = ConvDims {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            oc: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            oh,
            ow,
        };
        let mut out = vec![0.0; dims.n * dims.oc * oh * ow];
        kernels::conv2d(self.value(x).data(), self.value(w).data(), dims, &mut out);
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(
            Op::Conv2d { x, w, dims },
            TensorValue::new(vec![dims.n, dims.oc, oh, ow], out)?,
            needs,
        ))
    }

    /// Elementwise add; also accepts a rank-1 bias against [N,F] rows or
    /// [N,C,H,W] channels, or a single-element addend.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (
            self.value(a).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let mode = if sa == sb {
            AddMode::Same
        } else if self.value(b).numel() == 1 {
            AddMode::Scalar
        } else if sb.len() == 1 && sa.len() == 2 && sa[1] == sb[0] {
            AddMode::Bias {
                lead: sa[0],
                ch: sa[1],
                inner: 1,
            }
        } else if sb.len() == 1 && sa.len() == 4 && sa[1] == sb[0] {
            AddMode::Bias {
                lead: sa[0],
                ch: sa[1],
                inner: sa[2] * sa[3],
            }
        } else {
            return Err(Error::shape(
                "add",
                "matching shapes, a bias vector, or a scalar".to_string(),
                format!("{sa:?} + {sb:?}"),
            ));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<f64> = match mode {
            AddMode::Same => av.iter().zip(bv).map(|(&x, &y)| x + y).collect(),
            AddMode::Scalar => {
                let c = bv[0];
                av.iter().map(|&x| x + c).collect()
            }
            AddMode::Bias { lead, ch, inner } => {
                let mut out = Vec::with_capacity(av.len());
                for l in 0..lead {
                    for c in 0..ch {
                        let base = (l * ch + c) * inner;
                        let bc = bv[c];
                        for i in 0..inner {
                            out.push(av[base + i] + bc);
                        }
                    }
                }
                out
            }
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b, mode }, TensorValue::new(sa, data)?, needs))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(
                "mul",
                format!("{sa:?}"),
                format!("{sb:?}"),
            ));
        }
        let shape = sa.to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, TensorValue::new(shape, data)?, needs))
    }

    /// Multiply by a fixed scalar constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::non_finite("scale constant"));
        }
        let shape = self.value(a).shape().to_vec();
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| c * x).collect();
        let needs = self.needs(a);
        Ok(self.push(Op::Scale { a, c }, TensorValue::new(shape, data)?, needs))
    }

    pub fn negate(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| -x).collect();
        let needs = self.needs(a);
        Ok(self.push(Op::Negate { a }, TensorValue::new(shape, data)?, needs))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let needs = self.needs(a);
        Ok(self.push(op, TensorValue::new(shape, data)?, needs))
    }

    /// x · σ(x), the β = 1 case.
    pub fn swish(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Swish { a }, |x| x * sigmoid(x))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu { a }, |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        self.unary(a, Op::LeakyRelu { a, alpha }, move |x| {
            if x > 0.0 {
                x
            } else {
                alpha * x
            }
        })
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Softplus { a }, softplus)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape { a }, value, needs))
    }

    /// Sum over all axes, yielding a rank-0 scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        Ok(self.push(Op::Sum { a }, TensorValue::scalar(total), needs))
    }

    /// Overflow-safe logsumexp over the last axis; [.., L] -> [..].
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if shape.is_empty() {
            return Err(Error::shape(
                "logsumexp",
                "rank >= 1".to_string(),
                "rank 0".to_string(),
            ));
        }
        let width = *shape.last().unwrap();
        let groups = self.value(a).numel() / width;
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(groups);
        for g in 0..groups {
            let row = &data[g * width..(g + 1) * width];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            out.push(m + s.ln());
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::Logsumexp { a, groups, width },
            TensorValue::new(shape[..shape.len() - 1].to_vec(), out)?,
            needs,
        ))
    }

    /// Σ_k B((λ₁, λ₂)_k) over the last axis of a same-shape pair; the
    /// backward map is the mean parameterization (∇B = μ).
    pub fn gauss_log_normalizer(&mut self, lam1: NodeId, lam2: NodeId) -> Result<NodeId> {
        let (s1, s2) = (self.value(lam1).shape(), self.value(lam2).shape());
        if s1 != s2 || s1.is_empty() {
            return Err(Error::shape(
                "gauss_log_normalizer",
                "matching shapes of rank >= 1".to_string(),
                format!("{s1:?} with {s2:?}"),
            ));
        }
        let shape = s1.to_vec();
        let width = *shape.last().unwrap();
        let groups = self.value(lam1).numel() / width;
        let d1 = self.value(lam1).data();
        let d2 = self.value(lam2).data();
        let mut out = Vec::with_capacity(groups);
        for g in 0..groups {
            let mut acc = 0.0;
            for k in 0..width {
                let l1 = d1[g * width + k];
                let l2 = d2[g * width + k];
                if l2 >= 0.0 {
                    return Err(Error::invalid(
                        "lam2",
                        format!("entry ({g},{k}) is {l2}; must be negative"),
                    ));
                }
                acc += -l1 * l1 / (4.0 * l2) - 0.5 * (-2.0 * l2).ln();
            }
            out.push(acc);
        }
        let needs = self.needs(lam1) || self.needs(lam2);
        Ok(self.push(
            Op::GaussLogZ {
                lam1,
                lam2,
                groups,
                width,
            },
            TensorValue::new(shape[..shape.len() - 1].to_vec(), out)?,
            needs,
        ))
    }

    /// Stack same-shape tensors along a new trailing axis.
    pub fn stack_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("parts", "need at least one tensor"));
        }
        let shape = self.value(parts[0]).shape().to_vec();
        for &p in parts {
            if self.value(p).shape() != shape.as_slice() {
                return Err(Error::shape(
                    "stack_last",
                    format!("{shape:?}"),
                    format!("{:?}", self.value(p).shape()),
                ));
            }
        }
        let lead: usize = shape.iter().product();
        let l = parts.len();
        let mut out = vec![0.0; lead * l];
        for (j, &p) in parts.iter().enumerate() {
            let d = self.value(p).data();
            for i in 0..lead {
                out[i * l + j] = d[i];
            }
        }
        let mut oshape = shape;
        oshape.push(l);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::StackLast {
                parts: parts.to_vec(),
            },
            TensorValue::new(oshape, out)?,
            needs,
        ))
    }

    /// Reverse sweep from a single-element output. Gradients accumulate in
    /// node order, so results are deterministic. Consumes the tape's one
    /// backward pass; `reset` re-arms it.
    pub fn backward(&mut self, out: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::invalid("tape", "backward already ran; reset first"));
        }
        if self.value(out).numel() != 1 {
            return Err(Error::shape(
                "backward",
                "single-element output".to_string(),
                format!("{:?}", self.value(out).shape()),
            ));
        }
        if !self.value(out).all_finite() {
            return Err(Error::non_finite("backward output"));
        }
        self.consumed = true;

        let mut slots: Vec<Option<TensorValue>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[out.0] = Some(TensorValue::full(self.value(out).shape().to_vec(), 1.0));

        for id in (0..=out.0).rev() {
            if !self.nodes[id].needs_grad {
                slots[id] = None;
                continue;
            }
            let g = match slots[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut slots)?;
            if matches!(self.nodes[id].op, Op::Leaf { diff: true }) {
                slots[id] = Some(g);
            }
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf { diff: true }) && slots[id].is_none() {
                slots[id] = Some(TensorValue::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { slots })
    }

    fn acc_into(
        &self,
        slots: &mut [Option<TensorValue>],
        id: NodeId,
        write: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut slots[id.0];
        if slot.is_none() {
            *slot = Some(TensorValue::zeros(self.nodes[id.0].value.shape().to_vec()));
        }
        write(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(
        &self,
        id: usize,
        g: &TensorValue,
        slots: &mut [Option<TensorValue>],
    ) -> Result<()> {
        let gd = g.data();
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.needs(a) {
                    let bv = self.value(b).data();
                    self.acc_into(slots, a, |ga| {
                        kernels::matmul_nt_acc(gd, bv, m, n, k, ga);
                    });
                }
                if self.needs(b) {
                    let av = self.value(a).data();
                    self.acc_into(slots, b, |gb| {
                        kernels::matmul_tn_acc(av, gd, m, k, n, gb);
                    });
                }
            }
            Op::Conv2d { x, w, dims } => {
                let (x, w, dims) = (*x, *w, *dims);
                if self.needs(x) {
                    let wv = self.value(w).data();
                    self.acc_into(slots, x, |gx| {
                        kernels::conv2d_input_grad(wv, gd, dims, gx);
                    });
                }
                if self.needs(w) {
                    let xv = self.value(x).data();
                    self.acc_into(slots, w, |gw| {
                        kernels::conv2d_weight_grad(xv, gd, dims, gw);
                    });
                }
            }
            Op::Add { a, b, mode } => {
                let (a, b, mode) = (*a, *b, *mode);
                if self.needs(a) {
                    self.acc_into(slots, a, |ga| {
                        for (o, &v) in ga.iter_mut().zip(gd) {
                            *o += v;
                        }
                    });
                }
                if self.needs(b) {
                    self.acc_into(slots, b, |gb| match mode {
                        AddMode::Same => {
                            for (o, &v) in gb.iter_mut().zip(gd) {
                                *o += v;
                            }
                        }
                        AddMode::Scalar => {
                            gb[0] += gd.iter().sum::<f64>();
                        }
                        AddMode::Bias { lead, ch, inner } => {
                            for l in 0..lead {
                                for c in 0..ch {
                                    let base = (l * ch + c) * inner;
                                    let mut acc = 0.0;
                                    for i in 0..inner {
                                        acc += gd[base + i];
                                    }
                                    gb[c] += acc;
                                }
                            }
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let bv = self.value(b).data();
                    self.acc_into(slots, a, |ga| {
                        for i in 0..ga.len() {
                            ga[i] += gd[i] * bv[i];
                        }
                    });
                }
                if self.needs(b) {
                    let av = self.value(a).data();
                    self.acc_into(slots, b, |gb| {
                        for i in 0..gb.len() {
                            gb[i] += gd[i] * av[i];
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                self.acc_into(slots, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += c * gd[i];
                    }
                });
            }
            Op::Negate { a } => {
                let a = *a;
                self.acc_into(slots, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] -= gd[i];
                    }
                });
            }
            Op::Swish { a } => {
                let a = *a;
                let xv = self.value(a).data();
                self.acc_into(slots, a, |ga| {
                    for i in 0..ga.len() {
                        let s = sigmoid(xv[i]);
                        ga[i] += gd[i] * (s + xv[i] * s * (1.0 - s));
                    }
                });
            }
            Op::Relu { a } => {
                let a = *a;
                let xv = self.value(a).data();
                self.acc_into(slots, a, |ga| {
                    for i in 0..ga.len() {
                        if xv[i] > 0.0 {
                            ga[i] += gd[i];
                        }
                    }
                });
            }
            Op::LeakyRelu { a, alpha } => {
                let (a, alpha) = (*a, *alpha);
                let xv = self.value(a).data();
                self.acc_into(slots, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += gd[i] * if xv[i] > 0.0 { 1.0 } else { alpha };
                    }
                });
            }
            Op::Softplus { a } => {
                let a = *a;
                let xv = self.value(a).data();
                self.acc_into(slots, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += gd[i] * sigmoid(xv[i]);
                    }
                });
            }
            Op::Reshape { a } => {
                let a = *a;
                self.acc_into(slots, a, |ga| {
                    for (o, &v) in ga.iter_mut().zip(gd) {
                        *o += v;
                    }
                });
            }
            Op::Sum { a } => {
                let a = *a;
                let s = gd[0];
                self.acc_into(slots, a, |ga| {
                    for o in ga.iter_mut() {
                        *o += s;
                    }
                });
            }
            Op::Logsumexp { a, groups, width } => {
                let (a, groups, width) = (*a, *groups, *width);
                let xv = self.value(a).data();
                let yv = self.nodes[id].value.data();
                self.acc_into(slots, a, |ga| {
                    for gidx in 0..groups {
                        let up = gd[gidx];
                        let y = yv[gidx];
                        for k in 0..width {
                            let i = gidx * width + k;
                            ga[i] += up * (xv[i] - y).exp();
                        }
                    }
                });
            }
            Op::GaussLogZ {
                lam1,
                lam2,
                groups,
                width,
            } => {
                let (lam1, lam2, groups, width) = (*lam1, *lam2, *groups, *width);
                let d1 = self.value(lam1).data();
                let d2 = self.value(lam2).data();
                if self.needs(lam1) {
                    self.acc_into(slots, lam1, |ga| {
                        for g in 0..groups {
                            let up = gd[g];
                            for k in 0..width {
                                let i = g * width + k;
                                ga[i] += up * (-d1[i] / (2.0 * d2[i]));
                            }
                        }
                    });
                }
                if self.needs(lam2) {
                    self.acc_into(slots, lam2, |ga| {
                        for g in 0..groups {
                            let up = gd[g];
                            for k in 0..width {
                                let i = g * width + k;
                                let m1 = -d1[i] / (2.0 * d2[i]);
                                ga[i] += up * (m1 * m1 - 1.0 / (2.0 * d2[i]));
                            }
                        }
                    });
                }
            }
            Op::StackLast { parts } => {
                let parts = parts.clone();
                let l = parts.len();
                for (j, &p) in parts.iter().enumerate() {
                    if !self.needs(p) {
                        continue;
                    }
                    self.acc_into(slots, p, |gp| {
                        for i in 0..gp.len() {
                            gp[i] += gd[i * l + j];
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

/// Compare the tape gradient of a scalar-valued builder against central
/// finite differences at step `h`. Returns the max over coordinates of
/// |analytic − numeric| / (|analytic| + 1e−8).
pub fn finite_diff_check<F>(f: F, at: &TensorValue, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("h", "step must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(at.clone(), true)?;
    let out = f(&mut tape, x)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::shape(
            "finite_diff_check",
            "scalar output".to_string(),
            format!("{:?}", tape.value(out).shape()),
        ));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get(x).expect("leaf gradient present").data().to_vec();

    let eval = |probe: &TensorValue| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(probe.clone(), false)?;
        let out = f(&mut t, x)?;
        t.value(out).as_scalar()
    };

    let mut worst = 0.0_f64;
    for i in 0..at.numel() {
        let mut plus = at.clone();
        plus.data_mut()[i] += h;
        let mut minus = at.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
