//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value and the recipe
//! needed to push gradients back to its inputs. Nodes are created in
//! topological order, so `backward` is a single reverse sweep. Leaves are
//! either trainable (`param`) or constants; gradient work is skipped for any
//! node that does not depend on a trainable leaf.

mod kernels;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{exact_sum, gemm, Tensor};

pub use kernels::{BCE_PROB_FLOOR, IGNORE_LABEL};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Upsample(Var),
    SoftmaxChannels(Var),
    SoftmaxLast(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Reshape(Var),
    ScaleBy {
        x: Var,
        s: Var,
    },
    Scale(Var, f64),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    L2Normalize {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Arc<[u8]>,
    },
    Bce {
        logits: Var,
        target: bool,
    },
    WeightedSum(Vec<(Var, f64)>),
    Mean(Var),
    SegmentSum {
        x: Var,
        segments: Arc<[usize]>,
        weights: Arc<[f64]>,
    },
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// 2-D convolution of an `[n, ci, h, w]` input with `[co, ci, k, k]`
    /// weights, zero padding, optional `[co]` bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (co, wci, k, k2) = self.value(w).dims4()?;
        if wci != ci || k != k2 || stride == 0 {
            return Err(Error::invalid(format!(
                "conv2d: input {:?} incompatible with weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::invalid("conv2d: kernel larger than padded input"));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::invalid("conv2d: bias must have shape [co]"));
            }
        }
        let geom = kernels::ConvGeom::new(ci, h, wd, k, stride, pad);
        let mut out = Tensor::zeros(&[n, co, geom.ho, geom.wo]);
        kernels::conv2d_forward(
            &geom,
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "add: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    /// Bilinear resize of an NCHW tensor (half-pixel centers, edge clamped).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize: empty output size"));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        kernels::resize_forward(self.value(x), &mut out);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample(x), rg))
    }

    /// Softmax across axis 1 of an NCHW tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims4()?;
        let out = kernels::softmax_channels(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxChannels(x), rg))
    }

    /// Softmax across the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let out = kernels::softmax_last(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxLast(x), rg)
    }

    /// Batched product of `[b, m, k]` by `[b, k, n]`; `ta` / `tb` transpose
    /// the trailing two axes of the respective operand first.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.matmul_impl(a, b, ta, tb, false)
    }

    /// [`Tape::matmul`] with every inner product correctly rounded, so the
    /// result does not depend on the order of the summed axis. Slower;
    /// gradients are the ordinary ones.
    pub fn matmul_exact(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.matmul_impl(a, b, ta, tb, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool, exact: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[ba, a0, a1], &[bb, b0, b1]) = (sa, sb) else {
            return Err(Error::invalid("matmul: operands must be rank 3"));
        };
        let (m, ka) = if ta { (a1, a0) } else { (a0, a1) };
        let (kb, n) = if tb { (b1, b0) } else { (b0, b1) };
        if ba != bb || ka != kb {
            return Err(Error::invalid(format!(
                "matmul: {sa:?}{} x {sb:?}{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = Tensor::zeros(&[ba, m, n]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            if exact {
                let mut partials = Vec::new();
                for i in 0..ba {
                    let (ai, bi) = (&av[i * m * ka..], &bv[i * ka * n..]);
                    for r in 0..m {
                        for c in 0..n {
                            let terms = (0..ka).map(|k| {
                                let x = if ta { ai[k * m + r] } else { ai[r * ka + k] };
                                let y = if tb { bi[c * ka + k] } else { bi[k * n + c] };
                                x * y
                            });
                            od[i * m * n + r * n + c] = exact_sum(terms, &mut partials);
                        }
                    }
                }
            }
            for i in (0..ba).filter(|_| !exact) {
                gemm(
                    m,
                    ka,
                    n,
                    1.0,
                    &av[i * m * ka..(i + 1) * m * ka],
                    ta,
                    &bv[i * ka * n..(i + 1) * ka * n],
                    tb,
                    0.0,
                    &mut od[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `s * x` for a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::invalid("scale_by: scale must have one element"));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| sv * v);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy { x, s }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| factor * v);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat: axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::invalid(format!(
                    "concat: {s:?} incompatible with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow: [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Narrow { x, axis, start }, rg))
    }

    /// Divides each fibre along `axis` by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        if axis >= self.shape(x).len() {
            return Err(Error::invalid("l2_normalize: axis out of range"));
        }
        let out = kernels::l2_normalize(self.value(x), axis);
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2Normalize { x, axis }, rg))
    }

    /// Mean per-pixel cross-entropy of `[n, classes, h, w]` logits against
    /// `n*h*w` labels; pixels labelled [`IGNORE_LABEL`] are excluded and an
    /// all-ignored batch yields zero.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<[u8]>) -> Result<Var> {
        let (n, c, h, w) = self.value(logits).dims4()?;
        if labels.len() != n * h * w {
            return Err(Error::invalid(format!(
                "cross_entropy: {} labels for logits {:?}",
                labels.len(),
                self.shape(logits)
            )));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && usize::from(l) >= c)
        {
            return Err(Error::invalid(format!(
                "cross_entropy: label {bad} outside 0..{c}"
            )));
        }
        let loss = kernels::cross_entropy(self.value(logits), &labels);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels }, rg))
    }

    /// Mean binary cross-entropy of logits against a constant domain label,
    /// with probabilities clamped to `[BCE_PROB_FLOOR, 1 - BCE_PROB_FLOOR]`.
    pub fn bce_with_logits(&mut self, logits: Var, target: bool) -> Var {
        let loss = kernels::bce_mean(self.value(logits), target);
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss), Op::Bce { logits, target }, rg)
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::invalid("weighted_sum: no terms"))?;
        let mut out = Tensor::zeros(self.shape(first));
        for &(v, wt) in terms {
            if self.shape(v) != out.shape() {
                return Err(Error::invalid("weighted_sum: shape mismatch"));
            }
            for (o, x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += wt * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Weighted segment reduction along the last axis:
    /// `out[.., s] = Σ_{j : segments[j] = s} weights[j] · x[.., j]`.
    pub fn segment_sum(
        &mut self,
        x: Var,
        segments: Arc<[usize]>,
        weights: Arc<[f64]>,
        num_segments: usize,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().ok_or_else(|| Error::invalid("segment_sum: scalar input"))?;
        if segments.len() != last || weights.len() != last {
            return Err(Error::invalid("segment_sum: segment map length mismatch"));
        }
        if segments.iter().any(|&s| s >= num_segments) {
            return Err(Error::invalid("segment_sum: segment id out of range"));
        }
        let outer = self.value(x).numel() / last.max(1);
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = num_segments;
        let mut out = Tensor::zeros(&out_shape);
        {
            let src = self.value(x).data();
            let od = out.data_mut();
            for o in 0..outer {
                let row = &src[o * last..(o + 1) * last];
                let dst = &mut od[o * num_segments..(o + 1) * num_segments];
                for ((&s, &wt), &v) in segments.iter().zip(weights.iter()).zip(row) {
                    dst[s] += wt * v;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::SegmentSum {
                x,
                segments,
                weights,
            },
            rg,
        ))
    }

    /// Gathers along the last axis: `out[.., j] = x[.., index[j]]`.
    pub fn gather_last(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().ok_or_else(|| Error::invalid("gather: scalar input"))?;
        if index.iter().any(|&i| i >= last) {
            return Err(Error::invalid("gather: index out of range"));
        }
        let outer = self.value(x).numel() / last.max(1);
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = index.len();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * index.len());
        for o in 0..outer {
            let row = &src[o * last..(o + 1) * last];
            data.extend(index.iter().map(|&i| row[i]));
        }
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gather { x, index }, rg))
    }

    /// Gradients of the one-element node `loss` with respect to every
    /// node on the tape that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward: loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = val(x);
                let (_, ci, h, wd) = xv.dims4().expect("conv input is rank 4");
                let k = val(w).shape()[2];
                let geom = kernels::ConvGeom::new(ci, h, wd, k, stride, pad);
                let out = kernels::conv2d_backward(
                    &geom,
                    xv,
                    val(w),
                    g,
                    self.rg(x),
                    self.rg(w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = out.dx {
                    accumulate(grads, x, dx);
                }
                if let Some(dw) = out.dw {
                    accumulate(grads, w, dw);
                }
                if let (Some(b), Some(db)) = (b, out.db) {
                    accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.rg(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(val(x).data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::LeakyRelu(x, slope) => {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(val(x).data()) {
                    if v <= 0.0 {
                        *d *= slope;
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::Upsample(x) => {
                let mut dx = Tensor::zeros(val(x).shape());
                kernels::resize_backward(g, &mut dx);
                accumulate(grads, x, dx);
            }
            &Op::SoftmaxChannels(x) => {
                let dx = kernels::softmax_channels_backward(&node.value, g);
                accumulate(grads, x, dx);
            }
            &Op::SoftmaxLast(x) => {
                let dx = kernels::softmax_last_backward(&node.value, g);
                accumulate(grads, x, dx);
            }
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(a), val(b));
                let batch = av.shape()[0];
                let (m, k) = if ta {
                    (av.shape()[2], av.shape()[1])
                } else {
                    (av.shape()[1], av.shape()[2])
                };
                let n = g.shape()[2];
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                if self.rg(a) {
                    let mut da = Tensor::zeros(av.shape());
                    let dd = da.data_mut();
                    for i in 0..batch {
                        let ai = i * m * k..(i + 1) * m * k;
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        if ta {
                            gemm(k, n, m, 1.0, bi, tb, gi, true, 0.0, &mut dd[ai]);
                        } else {
                            gemm(m, n, k, 1.0, gi, false, bi, !tb, 0.0, &mut dd[ai]);
                        }
                    }
                    accumulate(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = Tensor::zeros(bv.shape());
                    let dd = db.data_mut();
                    for i in 0..batch {
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let bi = i * k * n..(i + 1) * k * n;
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        if tb {
                            gemm(n, m, k, 1.0, gi, true, ai, ta, 0.0, &mut dd[bi]);
                        } else {
                            gemm(k, m, n, 1.0, ai, !ta, gi, false, 0.0, &mut dd[bi]);
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Reshape(x) => {
                let dx = g
                    .clone()
                    .reshape(val(x).shape())
                    .expect("reshape preserves numel");
                accumulate(grads, x, dx);
            }
            &Op::ScaleBy { x, s } => {
                let sv = val(s).item();
                if self.rg(x) {
                    accumulate(grads, x, g.map(|d| sv * d));
                }
                if self.rg(s) {
                    let ds: f64 = g.data().iter().zip(val(x).data()).map(|(d, v)| d * v).sum();
                    accumulate(grads, s, Tensor::new(val(s).shape(), vec![ds]).unwrap());
                }
            }
            &Op::Scale(x, factor) => {
                accumulate(grads, x, g.map(|d| factor * d));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = val(p).shape()[*axis];
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + ext * inner]);
                        }
                        accumulate(grads, p, Tensor::new(val(p).shape(), data).unwrap());
                    }
                    offset += ext;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let shape = val(x).shape();
                let (outer, extent, inner) = split_axis(shape, axis);
                let len = g.shape()[axis];
                let mut dx = Tensor::zeros(shape);
                let dd = dx.data_mut();
                for o in 0..outer {
                    let dst = o * extent * inner + start * inner;
                    let src = o * len * inner;
                    dd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                accumulate(grads, x, dx);
            }
            &Op::L2Normalize { x, axis } => {
                let dx = kernels::l2_normalize_backward(val(x), &node.value, g, axis);
                accumulate(grads, x, dx);
            }
            Op::CrossEntropy { logits, labels } => {
                let dx = kernels::cross_entropy_backward(val(*logits), labels, g.item());
                accumulate(grads, *logits, dx);
            }
            &Op::Bce { logits, target } => {
                let dx = kernels::bce_backward(val(logits), target, g.item());
                accumulate(grads, logits, dx);
            }
            Op::WeightedSum(terms) => {
                for &(v, wt) in terms {
                    if self.rg(v) {
                        accumulate(grads, v, g.map(|d| wt * d));
                    }
                }
            }
            &Op::Mean(x) => {
                let n = val(x).numel() as f64;
                accumulate(grads, x, Tensor::full(val(x).shape(), g.item() / n));
            }
            Op::SegmentSum {
                x,
                segments,
                weights,
            } => {
                let shape = val(*x).shape();
                let last = *shape.last().unwrap();
                let nseg = *g.shape().last().unwrap();
                let outer = val(*x).numel() / last.max(1);
                let mut dx = Tensor::zeros(shape);
                let dd = dx.data_mut();
                for o in 0..outer {
                    let grow = &g.data()[o * nseg..(o + 1) * nseg];
                    for (j, (&s, &wt)) in segments.iter().zip(weights.iter()).enumerate() {
                        dd[o * last + j] = wt * grow[s];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Gather { x, index } => {
                let shape = val(*x).shape();
                let last = *shape.last().unwrap();
                let outer = val(*x).numel() / last.max(1);
                let mut dx = Tensor::zeros(shape);
                let dd = dx.data_mut();
                for o in 0..outer {
                    let grow = &g.data()[o * index.len()..(o + 1) * index.len()];
                    for (&i, &d) in index.iter().zip(grow) {
                        dd[o * last + i] += d;
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests;
