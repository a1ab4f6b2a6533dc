//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only arena of eagerly evaluated nodes. Ops cover
//! exactly what the detector needs: temporal convolution shared across
//! spatial positions, ReLU, max pooling (temporal, spatial, and region),
//! fully connected layers, index gathering, and the loss primitives.
//! [`Graph::backward`] walks the arena in reverse creation order, which is a
//! valid topological order because inputs always precede their consumers.
//!
//! Tensors follow a `[channels, time, spatial...]` layout: axis 0 is the
//! channel axis, axis 1 is time, and any remaining axes are flattened into a
//! single spatial extent by the temporal ops.

use crate::error::{Error, Result};
use crate::roipool::{self, PoolGrid};

/// Scalar element type for tensors. Training runs in `f32`; gradient
/// verification runs the same code in `f64`.
pub trait Real:
    num_traits::Float + num_traits::ToPrimitive + std::iter::Sum + std::fmt::Debug + 'static
{
    fn from_f64(x: f64) -> Self {
        num_traits::NumCast::from(x).expect("f64 value not representable")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("value not representable as f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                expected: dims.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same tensor in another element type.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    /// Splits dims into (channels, time, flattened spatial extent).
    fn axes(&self) -> Result<(usize, usize, usize)> {
        if self.dims.len() < 2 {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 0],
                got: self.dims.clone(),
            });
        }
        let s = self.dims[2..].iter().product::<usize>().max(1);
        Ok((self.dims[0], self.dims[1], s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    /// Inputs `[x, w, b]`. Odd kernel, zero padded to keep the time extent.
    TemporalConv { dilation: usize },
    Relu,
    /// Non-overlapping windows along the time axis; stores argmaxes.
    TemporalMaxPool,
    /// Collapses every axis after time down to one value per `(c, t)`.
    SpatialMaxPool,
    /// Inputs `[x, w, b]`; flattens `x`.
    Linear,
    /// Max pooling of time spans of a `[C, L, H, W]` volume to fixed grids.
    RoiPool,
    Gather { indices: Vec<usize> },
    /// Fixed linear functional; reduces any tensor to a scalar.
    DotConst { weights: Vec<T> },
    /// Rows of `num_classes` logits against integer targets, summed.
    SoftmaxCrossEntropy {
        num_classes: usize,
        targets: Vec<usize>,
    },
    /// Elementwise Huber-style loss against fixed targets, summed.
    SmoothL1 { targets: Vec<T> },
    /// Scalar inputs combined with fixed weights.
    WeightedSum { weights: Vec<T> },
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    /// Flat input indices chosen by pooling ops.
    argmax: Vec<usize>,
    /// Softmax probabilities saved for the cross entropy backward pass.
    saved: Vec<T>,
}

/// Append-only computation graph with eager forward evaluation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to `id`, if the
    /// node participates in differentiation.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, vec![], value, requires_grad, vec![], vec![])
    }

    fn push(
        &mut self,
        op: Op<T>,
        inputs: Vec<NodeId>,
        value: Tensor<T>,
        needs_grad: bool,
        argmax: Vec<usize>,
        saved: Vec<T>,
    ) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
            needs_grad,
            argmax,
            saved,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Temporal convolution: `x` is `[C_in, L, ...]`, `w` is
    /// `[C_out, C_in, k]` with odd `k`, `b` is `[C_out]`. The kernel slides
    /// along time only and is shared across the trailing spatial axes; the
    /// input is zero padded so the output keeps length `L`.
    pub fn temporal_conv(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.temporal_conv_dilated(x, w, b, 1)
    }

    /// Temporal convolution with spacing `dilation` between taps; the output
    /// keeps the input length (zero padding at the edges).
    pub fn temporal_conv_dilated(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dilation: usize,
    ) -> Result<NodeId> {
        if dilation == 0 {
            return Err(Error::InvalidConfig("dilation must be positive".into()));
        }
        let (ci, l, s) = self.value(x).axes()?;
        let wdims = self.value(w).dims();
        if wdims.len() != 3 || wdims[1] != ci || wdims[2] % 2 == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![0, ci, 1],
                got: wdims.to_vec(),
            });
        }
        let (co, k) = (wdims[0], wdims[2]);
        if self.value(b).dims() != [co] {
            return Err(Error::ShapeMismatch {
                expected: vec![co],
                got: self.value(b).dims().to_vec(),
            });
        }

        let mut out_dims = self.value(x).dims().to_vec();
        out_dims[0] = co;
        let mut y = Tensor::zeros(&out_dims);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let pad = (k - 1) / 2;
            let yd = y.data_mut();
            for c_out in 0..co {
                let bias = bv[c_out];
                for v in &mut yd[c_out * l * s..(c_out + 1) * l * s] {
                    *v = bias;
                }
                for c_in in 0..ci {
                    for dk in 0..k {
                        let wval = wv[(c_out * ci + c_in) * k + dk];
                        if wval == T::zero() {
                            continue;
                        }
                        let shift = (dk as isize - pad as isize) * dilation as isize;
                        let t0 = (-shift).max(0) as usize;
                        let t1 = (l as isize).min(l as isize - shift).max(0) as usize;
                        for t in t0..t1 {
                            let tx = (t as isize + shift) as usize;
                            let xrow = &xv[(c_in * l + tx) * s..(c_in * l + tx + 1) * s];
                            let yrow = &mut yd[(c_out * l + t) * s..(c_out * l + t + 1) * s];
                            for (yo, xo) in yrow.iter_mut().zip(xrow) {
                                *yo = *yo + wval * *xo;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.any_needs_grad(&[x, w, b]);
        Ok(self.push(Op::TemporalConv { dilation }, vec![x, w, b], y, ng, vec![], vec![]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).clone();
        for v in y.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        let ng = self.any_needs_grad(&[x]);
        self.push(Op::Relu, vec![x], y, ng, vec![], vec![])
    }

    /// Max pooling over non-overlapping windows of `factor` steps along the
    /// time axis. The time extent must divide evenly. Ties keep the earliest
    /// time step.
    pub fn temporal_max_pool(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let (c, l, s) = self.value(x).axes()?;
        if factor == 0 || l % factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "pool factor {factor} must divide time extent {l}"
            )));
        }
        let lo = l / factor;
        let mut out_dims = self.value(x).dims().to_vec();
        out_dims[1] = lo;
        let mut y = Tensor::zeros(&out_dims);
        let mut argmax = vec![0usize; y.len()];
        {
            let xv = self.value(x).data();
            let yd = y.data_mut();
            for cc in 0..c {
                for t in 0..lo {
                    for ss in 0..s {
                        let mut best = (cc * l + t * factor) * s + ss;
                        let mut best_v = xv[best];
                        for dt in 1..factor {
                            let idx = (cc * l + t * factor + dt) * s + ss;
                            if xv[idx] > best_v {
                                best_v = xv[idx];
                                best = idx;
                            }
                        }
                        let oi = (cc * lo + t) * s + ss;
                        yd[oi] = best_v;
                        argmax[oi] = best;
                    }
                }
            }
        }
        let ng = self.any_needs_grad(&[x]);
        Ok(self.push(Op::TemporalMaxPool, vec![x], y, ng, argmax, vec![]))
    }

    /// Collapses all axes after time by taking the maximum, producing a
    /// `[C, L]` tensor. Ties keep the lowest flat index.
    pub fn spatial_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).dims().len() < 3 {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 0, 0],
                got: self.value(x).dims().to_vec(),
            });
        }
        let (c, l, s) = self.value(x).axes()?;
        let mut y = Tensor::zeros(&[c, l]);
        let mut argmax = vec![0usize; c * l];
        {
            let xv = self.value(x).data();
            let yd = y.data_mut();
            for cc in 0..c {
                for t in 0..l {
                    let base = (cc * l + t) * s;
                    let mut best = base;
                    let mut best_v = xv[base];
                    for ss in 1..s {
                        if xv[base + ss] > best_v {
                            best_v = xv[base + ss];
                            best = base + ss;
                        }
                    }
                    yd[cc * l + t] = best_v;
                    argmax[cc * l + t] = best;
                }
            }
        }
        let ng = self.any_needs_grad(&[x]);
        Ok(self.push(Op::SpatialMaxPool, vec![x], y, ng, argmax, vec![]))
    }

    /// Fully connected layer: flattens `x` to a vector of length `n`,
    /// multiplies by `w` of shape `[m, n]`, adds `b` of shape `[m]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        let wdims = self.value(w).dims();
        if wdims.len() != 2 || wdims[1] != n {
            return Err(Error::ShapeMismatch {
                expected: vec![0, n],
                got: wdims.to_vec(),
            });
        }
        let m = wdims[0];
        if self.value(b).dims() != [m] {
            return Err(Error::ShapeMismatch {
                expected: vec![m],
                got: self.value(b).dims().to_vec(),
            });
        }
        let mut y = Tensor::zeros(&[m]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let yd = y.data_mut();
            for i in 0..m {
                let row = &wv[i * n..(i + 1) * n];
                let mut acc = bv[i];
                for (wj, xj) in row.iter().zip(xv) {
                    acc = acc + *wj * *xj;
                }
                yd[i] = acc;
            }
        }
        let ng = self.any_needs_grad(&[x, w, b]);
        Ok(self.push(Op::Linear, vec![x, w, b], y, ng, vec![], vec![]))
    }

    /// Pools each `(lo, hi)` time span of a `[C, L, H, W]` volume to a fixed
    /// `[C, grid.l, grid.h, grid.w]` block by taking bin maxima. The output
    /// stacks the regions: `[R, C, grid.l, grid.h, grid.w]`.
    pub fn roi_pool(
        &mut self,
        x: NodeId,
        regions: &[(usize, usize)],
        grid: PoolGrid,
    ) -> Result<NodeId> {
        let (y, argmax) = roipool::pool_forward(self.value(x), regions, grid)?;
        let ng = self.any_needs_grad(&[x]);
        Ok(self.push(Op::RoiPool, vec![x], y, ng, argmax, vec![]))
    }

    /// Picks flat indices out of `x` into a vector. Indices may repeat.
    pub fn gather(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let n = self.value(x).len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidConfig(format!(
                "gather index {bad} out of range for {n} elements"
            )));
        }
        let xv = self.value(x).data();
        let data: Vec<T> = indices.iter().map(|&i| xv[i]).collect();
        let y = Tensor::from_vec(&[indices.len()], data)?;
        let ng = self.any_needs_grad(&[x]);
        Ok(self.push(Op::Gather { indices }, vec![x], y, ng, vec![], vec![]))
    }

    /// Scalar-valued fixed linear functional of `x`.
    pub fn dot_const(&mut self, x: NodeId, weights: Vec<T>) -> Result<NodeId> {
        if weights.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.value(x).len()],
                got: vec![weights.len()],
            });
        }
        let acc = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| *a * *b)
            .sum();
        let ng = self.any_needs_grad(&[x]);
        Ok(self.push(Op::DotConst { weights }, vec![x], Tensor::scalar(acc), ng, vec![], vec![]))
    }

    /// Softmax cross entropy summed over rows. `x` holds `targets.len()`
    /// rows of `num_classes` logits each; the result is a scalar. The
    /// log-sum-exp is stabilized by subtracting the row maximum.
    pub fn softmax_cross_entropy(
        &mut self,
        x: NodeId,
        num_classes: usize,
        targets: Vec<usize>,
    ) -> Result<NodeId> {
        if num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be positive".into()));
        }
        let n = targets.len();
        if self.value(x).len() != n * num_classes {
            return Err(Error::ShapeMismatch {
                expected: vec![n, num_classes],
                got: self.value(x).dims().to_vec(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        let xv = self.value(x).data();
        let mut probs = vec![T::zero(); n * num_classes];
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &xv[i * num_classes..(i + 1) * num_classes];
            let m = row.iter().fold(row[0], |a, &b| if b > a { b } else { a });
            let sum_exp: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + sum_exp.ln();
            total = total + lse - row[t];
            for (c, &v) in row.iter().enumerate() {
                probs[i * num_classes + c] = (v - lse).exp();
            }
        }
        let ng = self.any_needs_grad(&[x]);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                num_classes,
                targets,
            },
            vec![x],
            Tensor::scalar(total),
            ng,
            vec![],
            probs,
        ))
    }

    /// Smooth L1 loss against fixed targets, summed over elements:
    /// `0.5 r^2` for `|r| < 1`, `|r| - 0.5` otherwise.
    pub fn smooth_l1(&mut self, x: NodeId, targets: Vec<T>) -> Result<NodeId> {
        if targets.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.value(x).len()],
                got: vec![targets.len()],
            });
        }
        let one = T::one();
        let half = T::from_f64(0.5);
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(&targets)
            .map(|(&v, &t)| {
                let r = (v - t).abs();
                if r < one {
                    half * r * r
                } else {
                    r - half
                }
            })
            .sum();
        let ng = self.any_needs_grad(&[x]);
        Ok(self.push(Op::SmoothL1 { targets }, vec![x], Tensor::scalar(total), ng, vec![], vec![]))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        let mut acc = T::zero();
        for &(id, w) in terms {
            if self.value(id).len() != 1 {
                return Err(Error::ShapeMismatch {
                    expected: vec![1],
                    got: self.value(id).dims().to_vec(),
                });
            }
            acc = acc + w * self.value(id).item();
        }
        let (inputs, weights): (Vec<_>, Vec<_>) = terms.iter().copied().unzip();
        let ng = self.any_needs_grad(&inputs);
        Ok(self.push(Op::WeightedSum { weights }, inputs, Tensor::scalar(acc), ng, vec![], vec![]))
    }

    /// Accumulates gradients of the scalar node `target` into every node
    /// that participates in differentiation. Previous gradients are cleared.
    pub fn backward(&mut self, target: NodeId) -> Result<()> {
        if self.value(target).len() != 1 {
            return Err(Error::ShapeMismatch {
                expected: vec![1],
                got: self.value(target).dims().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[target.0].grad = Some(vec![T::one()]);

        for i in (0..=target.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let contributions = self.input_grads(i);
            for (input, contrib) in contributions {
                let slot = &mut self.nodes[input.0];
                match &mut slot.grad {
                    Some(g) => {
                        for (a, b) in g.iter_mut().zip(&contrib) {
                            *a = *a + *b;
                        }
                    }
                    None => slot.grad = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each differentiable input.
    fn input_grads(&self, i: usize) -> Vec<(NodeId, Vec<T>)> {
        let node = &self.nodes[i];
        let gout = node.grad.as_ref().expect("caller checked grad");
        let mut out: Vec<(NodeId, Vec<T>)> = Vec::new();
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;

        match &node.op {
            Op::Leaf => {}
            Op::TemporalConv { dilation } => {
                let dilation = *dilation;
                let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let (ci, l, s) = self.value(x).axes().expect("validated");
                let wdims = self.value(w).dims();
                let (co, k) = (wdims[0], wdims[2]);
                let pad = (k - 1) / 2;
                let xv = self.value(x).data();
                let wv = self.value(w).data();

                if wants(x) {
                    let mut gx = vec![T::zero(); xv.len()];
                    for c_out in 0..co {
                        for c_in in 0..ci {
                            for dk in 0..k {
                                let wval = wv[(c_out * ci + c_in) * k + dk];
                                if wval == T::zero() {
                                    continue;
                                }
                                let shift = (dk as isize - pad as isize) * dilation as isize;
                                let t0 = (-shift).max(0) as usize;
                                let t1 = (l as isize).min(l as isize - shift).max(0) as usize;
                                for t in t0..t1 {
                                    let tx = (t as isize + shift) as usize;
                                    let grow = &gout[(c_out * l + t) * s..(c_out * l + t + 1) * s];
                                    let xrow =
                                        &mut gx[(c_in * l + tx) * s..(c_in * l + tx + 1) * s];
                                    for (xo, go) in xrow.iter_mut().zip(grow) {
                                        *xo = *xo + wval * *go;
                                    }
                                }
                            }
                        }
                    }
                    out.push((x, gx));
                }
                if wants(w) {
                    let mut gw = vec![T::zero(); wv.len()];
                    for c_out in 0..co {
                        for c_in in 0..ci {
                            for dk in 0..k {
                                let shift = (dk as isize - pad as isize) * dilation as isize;
                                let t0 = (-shift).max(0) as usize;
                                let t1 = (l as isize).min(l as isize - shift).max(0) as usize;
                                let mut acc = T::zero();
                                for t in t0..t1 {
                                    let tx = (t as isize + shift) as usize;
                                    let grow = &gout[(c_out * l + t) * s..(c_out * l + t + 1) * s];
                                    let xrow = &xv[(c_in * l + tx) * s..(c_in * l + tx + 1) * s];
                                    for (go, xo) in grow.iter().zip(xrow) {
                                        acc = acc + *go * *xo;
                                    }
                                }
                                gw[(c_out * ci + c_in) * k + dk] = acc;
                            }
                        }
                    }
                    out.push((w, gw));
                }
                if wants(b) {
                    let mut gb = vec![T::zero(); co];
                    for (c_out, gbv) in gb.iter_mut().enumerate() {
                        *gbv = gout[c_out * l * s..(c_out + 1) * l * s]
                            .iter()
                            .copied()
                            .sum();
                    }
                    out.push((b, gb));
                }
            }
            Op::Relu => {
                let x = node.inputs[0];
                if wants(x) {
                    let xv = self.value(x).data();
                    let gx = xv
                        .iter()
                        .zip(gout)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    out.push((x, gx));
                }
            }
            Op::TemporalMaxPool | Op::SpatialMaxPool | Op::RoiPool => {
                let x = node.inputs[0];
                if wants(x) {
                    let mut gx = vec![T::zero(); self.value(x).len()];
                    for (oi, &src) in node.argmax.iter().enumerate() {
                        gx[src] = gx[src] + gout[oi];
                    }
                    out.push((x, gx));
                }
            }
            Op::Linear => {
                let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let n = xv.len();
                let m = gout.len();
                if wants(x) {
                    let mut gx = vec![T::zero(); n];
                    for i in 0..m {
                        let g = gout[i];
                        if g == T::zero() {
                            continue;
                        }
                        let row = &wv[i * n..(i + 1) * n];
                        for (xo, wj) in gx.iter_mut().zip(row) {
                            *xo = *xo + g * *wj;
                        }
                    }
                    out.push((x, gx));
                }
                if wants(w) {
                    let mut gw = vec![T::zero(); m * n];
                    for i in 0..m {
                        let g = gout[i];
                        if g == T::zero() {
                            continue;
                        }
                        let row = &mut gw[i * n..(i + 1) * n];
                        for (wo, xj) in row.iter_mut().zip(xv) {
                            *wo = g * *xj;
                        }
                    }
                    out.push((w, gw));
                }
                if wants(b) {
                    out.push((b, gout.clone()));
                }
            }
            Op::Gather { indices } => {
                let x = node.inputs[0];
                if wants(x) {
                    let mut gx = vec![T::zero(); self.value(x).len()];
                    for (oi, &src) in indices.iter().enumerate() {
                        gx[src] = gx[src] + gout[oi];
                    }
                    out.push((x, gx));
                }
            }
            Op::DotConst { weights } => {
                let x = node.inputs[0];
                if wants(x) {
                    let g = gout[0];
                    out.push((x, weights.iter().map(|&w| w * g).collect()));
                }
            }
            Op::SoftmaxCrossEntropy {
                num_classes,
                targets,
            } => {
                let x = node.inputs[0];
                if wants(x) {
                    let g = gout[0];
                    let mut gx = node.saved.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let ti = i * num_classes + t;
                        gx[ti] = gx[ti] - T::one();
                    }
                    for v in &mut gx {
                        *v = *v * g;
                    }
                    out.push((x, gx));
                }
            }
            Op::SmoothL1 { targets } => {
                let x = node.inputs[0];
                if wants(x) {
                    let g = gout[0];
                    let one = T::one();
                    let gx = self
                        .value(x)
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&v, &t)| {
                            let r = v - t;
                            let d = if r > one {
                                one
                            } else if r < -one {
                                -one
                            } else {
                                r
                            };
                            d * g
                        })
                        .collect();
                    out.push((x, gx));
                }
            }
            Op::WeightedSum { weights } => {
                let g = gout[0];
                for (&input, &w) in node.inputs.iter().zip(weights) {
                    if wants(input) {
                        out.push((input, vec![w * g]));
                    }
                }
            }
        }
        out
    }
}
