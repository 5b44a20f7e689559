//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is acyclic by
//! construction and walking it backwards is a reverse topological order.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Conv2d { input: NodeId, kernels: NodeId, bias: NodeId, relu: bool },
    MaxPool2 { input: NodeId, argmax: Vec<u32> },
    UpConv2 { input: NodeId, kernels: NodeId, bias: NodeId },
    Relu { input: NodeId },
    Softmax { input: NodeId },
    CenterCrop { input: NodeId, top: usize, left: usize },
    Concat { a: NodeId, b: NodeId },
    StackRows { inputs: Vec<NodeId> },
    Sum { input: NodeId },
    Mul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: T },
    WeightedCe { probs: NodeId, target: Vec<T>, weight: T, eps: T },
    SoftFbeta { probs: NodeId, target: Vec<T>, beta: T, eps: T },
}

/// One recorded operation with its cached forward output.
#[derive(Debug)]
pub struct GradNode<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
}

impl<T: Real> GradNode<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn kind(&self) -> &'static str {
        match self.op {
            Op::Leaf => "leaf",
            Op::Conv2d { relu: false, .. } => "conv2d",
            Op::Conv2d { relu: true, .. } => "conv2d_relu",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::UpConv2 { .. } => "upconv2",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax_channels",
            Op::CenterCrop { .. } => "center_crop",
            Op::Concat { .. } => "concat_channels",
            Op::StackRows { .. } => "stack_rows",
            Op::Sum { .. } => "sum",
            Op::Mul { .. } => "mul",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::WeightedCe { .. } => "weighted_cross_entropy",
            Op::SoftFbeta { .. } => "soft_fbeta_loss",
        }
    }
}

/// Computation graph for one forward pass.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<GradNode<T>>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every leaf reachable from it.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<T: Real> Graph<T> {
    /// Graph that caches what the backward pass needs.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), record: true }
    }

    /// Forward-only graph: skips backward caches.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), record: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &GradNode<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn into_value(mut self, id: NodeId) -> Tensor<T> {
        self.nodes.swap_remove(id.0).value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(GradNode { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Valid 3×3 (or any k×k) convolution: `(Cin,H,W) * (Cout,Cin,k,k) + (Cout)`.
    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        self.conv(input, kernels, bias, false)
    }

    /// [`Graph::conv2d`] followed by a rectifier, as one node.
    pub fn conv2d_relu(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        self.conv(input, kernels, bias, true)
    }

    fn conv(&mut self, input: NodeId, kernels: NodeId, bias: NodeId, relu: bool) -> Result<NodeId> {
        let (cin, h, w) = self.value(input).chw()?;
        let ks = self.value(kernels).shape().to_vec();
        let [cout, kc, k, k2] = ks[..] else {
            return shape_err(format!("conv2d kernels must be rank 4, got {ks:?}"));
        };
        if kc != cin || k != k2 {
            return shape_err(format!("conv2d kernels {ks:?} incompatible with input channels {cin}"));
        }
        if self.value(bias).shape() != [cout] {
            return shape_err(format!(
                "conv2d bias {:?} does not match {cout} output channels",
                self.value(bias).shape()
            ));
        }
        if k > h || k > w {
            return shape_err(format!("conv2d kernel {k} larger than input {h}x{w}"));
        }
        let mut out = ops::conv2d_forward(
            self.value(input).data(),
            cin,
            h,
            w,
            self.value(kernels).data(),
            self.value(bias).data(),
            cout,
            k,
        );
        if relu {
            for v in &mut out {
                *v = v.max(T::zero());
            }
        }
        let value = Tensor::new(&[cout, h - k + 1, w - k + 1], out)?;
        Ok(self.push(Op::Conv2d { input, kernels, bias, relu }, value))
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(input).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("maxpool2 needs even extents, got {h}x{w}"));
        }
        let (out, argmax) = ops::maxpool2_forward(self.value(input).data(), c, h, w);
        let value = Tensor::new(&[c, h / 2, w / 2], out)?;
        let argmax = if self.record { argmax } else { Vec::new() };
        Ok(self.push(Op::MaxPool2 { input, argmax }, value))
    }

    /// Stride-2 transposed convolution, kernels `(Cin,Cout,2,2)`.
    pub fn upconv2(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        let (cin, h, w) = self.value(input).chw()?;
        let ks = self.value(kernels).shape().to_vec();
        let [kc, cout, 2, 2] = ks[..] else {
            return shape_err(format!("upconv2 kernels must be (Cin,Cout,2,2), got {ks:?}"));
        };
        if kc != cin {
            return shape_err(format!("upconv2 kernels {ks:?} incompatible with input channels {cin}"));
        }
        if self.value(bias).shape() != [cout] {
            return shape_err(format!(
                "upconv2 bias {:?} does not match {cout} output channels",
                self.value(bias).shape()
            ));
        }
        let out = ops::upconv2_forward(
            self.value(input).data(),
            cin,
            h,
            w,
            self.value(kernels).data(),
            self.value(bias).data(),
            cout,
        );
        let value = Tensor::new(&[cout, 2 * h, 2 * w], out)?;
        Ok(self.push(Op::UpConv2 { input, kernels, bias }, value))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(src.shape(), data).expect("same shape");
        self.push(Op::Relu { input }, value)
    }

    /// Per-pixel two-class softmax over the channel axis.
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(input).chw()?;
        if c != 2 {
            return shape_err(format!("softmax_channels expects 2 channels, got {c}"));
        }
        let out = ops::softmax_channels(self.value(input).data(), c, h * w);
        let value = Tensor::new(&[c, h, w], out)?;
        Ok(self.push(Op::Softmax { input }, value))
    }

    /// Spatially centered crop. An odd surplus drops the extra row/column at
    /// the bottom/right.
    pub fn center_crop(&mut self, input: NodeId, target_h: usize, target_w: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(input).chw()?;
        if target_h > h || target_w > w || target_h == 0 || target_w == 0 {
            return shape_err(format!("cannot crop {h}x{w} to {target_h}x{target_w}"));
        }
        let (top, left) = ((h - target_h) / 2, (w - target_w) / 2);
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(c * target_h * target_w);
        for ch in 0..c {
            for y in 0..target_h {
                let row = (ch * h + top + y) * w + left;
                out.extend_from_slice(&src[row..row + target_w]);
            }
        }
        let value = Tensor::new(&[c, target_h, target_w], out)?;
        Ok(self.push(Op::CenterCrop { input, top, left }, value))
    }

    /// Stack `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, ha, wa) = self.value(a).chw()?;
        let (cb, hb, wb) = self.value(b).chw()?;
        if (ha, wa) != (hb, wb) {
            return shape_err(format!("concat spatial mismatch {ha}x{wa} vs {hb}x{wb}"));
        }
        let mut out = Vec::with_capacity((ca + cb) * ha * wa);
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let value = Tensor::new(&[ca + cb, ha, wa], out)?;
        Ok(self.push(Op::Concat { a, b }, value))
    }

    /// Stack equally shaped `(C, H, W)` tensors along the row axis into
    /// `(C, n·H, W)`, input `i` occupying rows `i·H..(i+1)·H` of each channel.
    pub fn stack_rows(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = inputs.first() else {
            return shape_err("stack_rows needs at least one input".into());
        };
        let shape = self.value(first).shape().to_vec();
        let (c, h, w) = self.value(first).chw()?;
        if let Some(bad) = inputs.iter().find(|&&i| self.value(i).shape() != shape.as_slice()) {
            return shape_err(format!("stack_rows shape {:?} vs {shape:?}", self.value(*bad).shape()));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(c * plane * inputs.len());
        for ch in 0..c {
            for &i in inputs {
                out.extend_from_slice(&self.value(i).data()[ch * plane..(ch + 1) * plane]);
            }
        }
        let value = Tensor::new(&[c, h * inputs.len(), w], out)?;
        Ok(self.push(Op::StackRows { inputs: inputs.to_vec() }, value))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = T::from_f64(self.value(input).sum_f64());
        self.push(Op::Sum { input }, Tensor::scalar(s))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(format!("mul shape mismatch {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(Op::Mul { a, b }, value))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(format!("add shape mismatch {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> NodeId {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(src.shape(), data).expect("same shape");
        self.push(Op::Scale { input, factor }, value)
    }

    fn check_target(&self, probs: NodeId, target: &[T], what: &str) -> Result<(usize, usize)> {
        let (c, h, w) = self.value(probs).chw()?;
        if c != 2 {
            return shape_err(format!("{what} expects 2-channel probabilities, got {c}"));
        }
        if target.len() != h * w {
            return shape_err(format!("{what}: target has {} pixels, probabilities {h}x{w}", target.len()));
        }
        Ok((h, w))
    }

    /// Mean over pixels of `-[w·t·ln(q1+ε) + (1-t)·ln(q0+ε)]`.
    pub fn weighted_cross_entropy(&mut self, probs: NodeId, target: Vec<T>, weight: T, eps: T) -> Result<NodeId> {
        let (h, w) = self.check_target(probs, &target, "weighted_cross_entropy")?;
        let n = h * w;
        let q = self.value(probs).data();
        let (wt, e) = (weight.as_f64(), eps.as_f64());
        let mut acc = 0.0f64;
        for (p, &t) in target.iter().enumerate() {
            let t = t.as_f64();
            let q0 = q[p].as_f64();
            let q1 = q[n + p].as_f64();
            acc -= wt * t * (q1 + e).ln() + (1.0 - t) * (q0 + e).ln();
        }
        let value = Tensor::scalar(T::from_f64(acc / n as f64));
        Ok(self.push(Op::WeightedCe { probs, target, weight, eps }, value))
    }

    /// `1 - F_β` from soft precision and recall of the disc channel.
    pub fn soft_fbeta_loss(&mut self, probs: NodeId, target: Vec<T>, beta: T, eps: T) -> Result<NodeId> {
        let (h, w) = self.check_target(probs, &target, "soft_fbeta_loss")?;
        let q1 = &self.value(probs).data()[h * w..];
        let sums = FbetaSums::new(q1, &target);
        let f = sums.fbeta(beta.as_f64(), eps.as_f64());
        let value = Tensor::scalar(T::from_f64(1.0 - f));
        Ok(self.push(Op::SoftFbeta { probs, target, beta, eps }, value))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return shape_err(format!("backward root must be scalar, got shape {:?}", root_value.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (target, contrib) in self.local_grads(node, g)? {
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &GradNode<T>, g: Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, kernels, bias, relu } => {
                let mut g = g;
                if *relu {
                    for (gv, &v) in g.data_mut().iter_mut().zip(node.value.data()) {
                        if v <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                }
                let x = self.value(*input);
                let kt = self.value(*kernels);
                let (cin, h, w) = x.chw()?;
                let (cout, k) = (kt.shape()[0], kt.shape()[2]);
                let (gi, gk, gb) =
                    ops::conv2d_backward(g.data(), x.data(), cin, h, w, kt.data(), cout, k);
                vec![
                    (*input, Tensor::new(x.shape(), gi)?),
                    (*kernels, Tensor::new(kt.shape(), gk)?),
                    (*bias, Tensor::new(&[cout], gb)?),
                ]
            }
            Op::MaxPool2 { input, argmax } => {
                let x = self.value(*input);
                if argmax.is_empty() {
                    return shape_err("backward through an inference-mode graph".into());
                }
                let mut gi = vec![T::zero(); x.len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gi[src as usize] = gi[src as usize] + gv;
                }
                vec![(*input, Tensor::new(x.shape(), gi)?)]
            }
            Op::UpConv2 { input, kernels, bias } => {
                let x = self.value(*input);
                let kt = self.value(*kernels);
                let (cin, h, w) = x.chw()?;
                let cout = kt.shape()[1];
                let (gi, gk, gb) = ops::upconv2_backward(g.data(), x.data(), cin, h, w, kt.data(), cout);
                vec![
                    (*input, Tensor::new(x.shape(), gi)?),
                    (*kernels, Tensor::new(kt.shape(), gk)?),
                    (*bias, Tensor::new(&[cout], gb)?),
                ]
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let gi = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*input, Tensor::new(x.shape(), gi)?)]
            }
            Op::Softmax { input } => {
                let q = &node.value;
                let (c, h, w) = q.chw()?;
                let hw = h * w;
                let (qd, gd) = (q.data(), g.data());
                let mut gi = vec![T::zero(); c * hw];
                for p in 0..hw {
                    let mut dot = T::zero();
                    for ch in 0..c {
                        dot = dot + qd[ch * hw + p] * gd[ch * hw + p];
                    }
                    for ch in 0..c {
                        gi[ch * hw + p] = qd[ch * hw + p] * (gd[ch * hw + p] - dot);
                    }
                }
                vec![(*input, Tensor::new(&[c, h, w], gi)?)]
            }
            Op::CenterCrop { input, top, left } => {
                let x = self.value(*input);
                let (c, h, w) = x.chw()?;
                let (_, th, tw) = g.chw()?;
                let mut gi = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..th {
                        let dst = (ch * h + top + y) * w + left;
                        gi[dst..dst + tw].copy_from_slice(&g.data()[(ch * th + y) * tw..(ch * th + y + 1) * tw]);
                    }
                }
                vec![(*input, Tensor::new(x.shape(), gi)?)]
            }
            Op::Concat { a, b } => {
                let va = self.value(*a);
                let split = va.len();
                let (ga, gb) = g.data().split_at(split);
                vec![
                    (*a, Tensor::new(va.shape(), ga.to_vec())?),
                    (*b, Tensor::new(self.value(*b).shape(), gb.to_vec())?),
                ]
            }
            Op::StackRows { inputs } => {
                let shape = self.value(inputs[0]).shape();
                let (c, plane) = (shape[0], shape[1] * shape[2]);
                let n = inputs.len();
                let mut parts: Vec<Vec<T>> = (0..n).map(|_| Vec::with_capacity(c * plane)).collect();
                for ch in 0..c {
                    for (k, part) in parts.iter_mut().enumerate() {
                        let at = (ch * n + k) * plane;
                        part.extend_from_slice(&g.data()[at..at + plane]);
                    }
                }
                inputs
                    .iter()
                    .zip(parts)
                    .map(|(&i, d)| Ok((i, Tensor::new(shape, d)?)))
                    .collect::<Result<Vec<_>>>()?
            }
            Op::Sum { input } => {
                let x = self.value(*input);
                vec![(*input, Tensor::full(x.shape(), g.data()[0]))]
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = vb.data().iter().zip(g.data()).map(|(&y, &gv)| y * gv).collect();
                let gb = va.data().iter().zip(g.data()).map(|(&x, &gv)| x * gv).collect();
                vec![(*a, Tensor::new(va.shape(), ga)?), (*b, Tensor::new(vb.shape(), gb)?)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g)],
            Op::Scale { input, factor } => {
                let mut gi = g;
                gi.scale(*factor);
                vec![(*input, gi)]
            }
            Op::WeightedCe { probs, target, weight, eps } => {
                let q = self.value(*probs);
                let n = target.len();
                let scale = g.data()[0].as_f64() / n as f64;
                let (wt, e) = (weight.as_f64(), eps.as_f64());
                let mut gi = vec![T::zero(); 2 * n];
                for (p, &t) in target.iter().enumerate() {
                    let t = t.as_f64();
                    gi[p] = T::from_f64(-scale * (1.0 - t) / (q.data()[p].as_f64() + e));
                    gi[n + p] = T::from_f64(-scale * wt * t / (q.data()[n + p].as_f64() + e));
                }
                vec![(*probs, Tensor::new(q.shape(), gi)?)]
            }
            Op::SoftFbeta { probs, target, beta, eps } => {
                let q = self.value(*probs);
                let n = target.len();
                let q1 = &q.data()[n..];
                let sums = FbetaSums::new(q1, target);
                let (d_tp, d_sq) = sums.fbeta_partials(beta.as_f64(), eps.as_f64());
                let upstream = -g.data()[0].as_f64();
                let mut gi = vec![T::zero(); 2 * n];
                for (p, &t) in target.iter().enumerate() {
                    gi[n + p] = T::from_f64(upstream * (d_tp * t.as_f64() + d_sq));
                }
                vec![(*probs, Tensor::new(q.shape(), gi)?)]
            }
        };
        Ok(out)
    }
}

/// Soft confusion sums for the disc channel: `tp = Σ q·t`, `Σ q`, `Σ t`.
struct FbetaSums {
    tp: f64,
    sum_q: f64,
    sum_t: f64,
}

impl FbetaSums {
    fn new<T: Real>(q1: &[T], target: &[T]) -> Self {
        let (mut tp, mut sum_q, mut sum_t) = (0.0, 0.0, 0.0);
        for (&q, &t) in q1.iter().zip(target) {
            let (q, t) = (q.as_f64(), t.as_f64());
            tp += q * t;
            sum_q += q;
            sum_t += t;
        }
        Self { tp, sum_q, sum_t }
    }

    // With P = tp/(Σq+ε) and R = tp/(Σt+ε), (1+β²)PR/(β²P+R) reduces to
    // (1+β²)·tp / (β²(Σt+ε) + Σq + ε), which stays finite when tp = 0.
    fn denom(&self, b2: f64, eps: f64) -> f64 {
        b2 * (self.sum_t + eps) + self.sum_q + eps
    }

    fn fbeta(&self, beta: f64, eps: f64) -> f64 {
        let b2 = beta * beta;
        (1.0 + b2) * self.tp / self.denom(b2, eps)
    }

    /// `(∂F/∂tp, ∂F/∂Σq)`; per pixel `∂F/∂q_i = ∂F/∂tp·t_i + ∂F/∂Σq`.
    fn fbeta_partials(&self, beta: f64, eps: f64) -> (f64, f64) {
        let b2 = beta * beta;
        let d = self.denom(b2, eps);
        ((1.0 + b2) / d, -(1.0 + b2) * self.tp / (d * d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn all_ones_convolution() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 3, 3], 1.0));
        let k = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_crops_interior() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let x = g.leaf(t(&[1, 5, 5], &data));
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = g.leaf(t(&[1, 1, 3, 3], &kd));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(y).data(), &[6.0, 7.0, 8.0, 11.0, 12.0, 13.0, 16.0, 17.0, 18.0]);
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[2, 4, 4]));
        let k = g.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.leaf(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, k, b), Err(Error::Shape(_))));
        let small = g.leaf(Tensor::zeros(&[3, 2, 2]));
        assert!(g.conv2d(small, k, b).is_err());
        let ok_k = g.leaf(Tensor::zeros(&[1, 2, 3, 3]));
        let bad_b = g.leaf(Tensor::zeros(&[2]));
        assert!(g.conv2d(x, ok_k, bad_b).is_err());
    }

    #[test]
    fn maxpool_window_and_tie_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 4, 4], 2.5));
        let y = g.maxpool2(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 2.5));
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let gx = grads.get(x).unwrap().data();
        let expected: Vec<f64> = (0..16)
            .map(|i| {
                let (r, c) = (i / 4, i % 4);
                if r % 2 == 0 && c % 2 == 0 { 1.0 } else { 0.0 }
            })
            .collect();
        assert_eq!(gx, &expected[..]);
    }

    #[test]
    fn maxpool_rejects_odd() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 4]));
        assert!(g.maxpool2(x).is_err());
    }

    #[test]
    fn upconv_single_cell_scatter() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 1, 1], &[3.0]));
        let k = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.upconv2(x, k, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2]);
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 9.0, 12.0]);
    }

    #[test]
    fn upconv_zero_input_is_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 3, 3]));
        let k = g.leaf(Tensor::full(&[2, 3, 2, 2], 0.7));
        let b = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let y = g.upconv2(x, k, b).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[3, 6, 6]);
        for (i, &val) in v.data().iter().enumerate() {
            assert_eq!(val, [1.0, -2.0, 0.5][i / 36]);
        }
    }

    #[test]
    fn softmax_and_relu_examples() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[2, 1, 2], vec![0.0, 1000.0, 0.0, 1000.0]).unwrap());
        let q = g.softmax_channels(x).unwrap();
        assert_eq!(g.value(q).data(), &[0.5, 0.5, 0.5, 0.5]);

        let bad = g.leaf(Tensor::zeros(&[3, 1, 1]));
        assert!(g.softmax_channels(bad).is_err());

        let r = g.leaf(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
        let y = g.relu(r);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn crop_centered_and_adjoint() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = g.leaf(t(&[1, 4, 4], &data));
        let c = g.center_crop(x, 2, 2).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 6.0, 9.0, 10.0]);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        let expected = [0., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0.];
        assert_eq!(grads.get(x).unwrap().data(), &expected);
        assert!(g.center_crop(x, 5, 2).is_err());
    }

    #[test]
    fn odd_crop_drops_bottom_right() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let x = g.leaf(t(&[1, 5, 5], &data));
        let c = g.center_crop(x, 2, 2).unwrap();
        // surplus 3: one row/column above-left, two below-right
        assert_eq!(g.value(c).data(), &[6.0, 7.0, 11.0, 12.0]);
    }

    #[test]
    fn concat_stacks_channels() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros(&[3, 4, 5]));
        let b = g.leaf(Tensor::full(&[5, 4, 5], 1.0));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[8, 4, 5]);
        let d = g.leaf(Tensor::zeros(&[1, 3, 5]));
        assert!(g.concat_channels(a, d).is_err());
    }

    #[test]
    fn linear_and_quadratic_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        let y = g.leaf(Tensor::zeros(&[2]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn stack_rows_layout_and_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t(&[2, 1, 2], &[5.0, 6.0, 7.0, 8.0]));
        let s = g.stack_rows(&[a, b]).unwrap();
        assert_eq!(g.value(s).shape(), &[2, 2, 2]);
        assert_eq!(g.value(s).data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        let w = g.leaf(t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let m = g.mul(s, w).unwrap();
        let total = g.sum(m);
        let grads = g.backward(total).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 4.0, 7.0, 8.0]);
        let c = g.leaf(t(&[1, 1, 2], &[0.0, 0.0]));
        assert!(g.stack_rows(&[a, c]).is_err());
    }

    #[test]
    fn fused_conv_relu_matches_separate_ops() {
        let data: Vec<f64> = (0..2 * 5 * 5).map(|v| ((v * 37) % 11) as f64 / 5.0 - 1.0).collect();
        let kd: Vec<f64> = (0..3 * 2 * 9).map(|v| ((v * 13) % 7) as f64 / 3.5 - 1.0).collect();
        let run = |fused: bool| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(t(&[2, 5, 5], &data));
            let k = g.leaf(t(&[3, 2, 3, 3], &kd));
            let b = g.leaf(t(&[3], &[0.1, -0.2, 0.3]));
            let y = if fused {
                g.conv2d_relu(x, k, b).unwrap()
            } else {
                let c = g.conv2d(x, k, b).unwrap();
                g.relu(c)
            };
            let w = g.leaf(Tensor::from_fn(&[3, 3, 3], |i| i as f64 - 13.0));
            let m = g.mul(y, w).unwrap();
            let s = g.sum(m);
            let grads = g.backward(s).unwrap();
            (g.value(y).clone(), [x, k, b].map(|id| grads.get(id).unwrap().clone()))
        };
        assert_eq!(run(true), run(false));
    }
}
