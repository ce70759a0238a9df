//! Reverse-mode compute graph.
//!
//! Values are recorded on a tape in topological order; `backward` seeds a
//! scalar loss and walks the tape in reverse, resetting then accumulating
//! gradients. Repeated `backward` calls therefore reproduce the same
//! gradients instead of compounding them.

use crate::error::{Error, Result};

use super::kernels;
use super::Tensor;

/// Probabilities are floored at this value before `ln` inside the
/// weighted cross-entropy, keeping the loss finite for confident misses.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, stride: usize, padding: usize },
    TransposedConv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    Relu { input: Var },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    ChannelConcat { a: Var, b: Var },
    Add { a: Var, b: Var },
    SoftmaxChannels { input: Var },
    Scale { input: Var, factor: f64 },
    SumAll { input: Var },
    SumSquares { input: Var },
    WeightedCrossEntropy { probs: Var, labels: Var, weights: Var, weight_sum: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, grad: None, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a value that does not participate in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Insert a leaf whose gradient will be populated by `backward`.
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of `v`, present once `backward` has run over a
    /// loss that `v` participates in.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ── Forward ops ─────────────────────────────────────────────────

    /// Cross-correlation with bias; `bias` must have shape [1, co, 1, 1].
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Var {
        let x = self.value(input);
        let k = self.value(kernel);
        let bt = self.value(bias);
        let [kco, _, _, _] = k.shape();
        assert_eq!(
            bt.shape(),
            [1, kco, 1, 1],
            "conv bias shape {:?} must be [1, {}, 1, 1]",
            bt.shape(),
            kco
        );
        let out = kernels::conv_forward(x, k, bt.data(), stride, padding);
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        self.push(Op::Conv2d { input, kernel, bias, stride, padding }, out, needs)
    }

    /// Adjoint of [`Graph::conv2d`] for the same kernel: spatial extents
    /// are multiplied by `stride`. The kernel keeps conv layout
    /// [co, ci, k, k]; the input must have `co` channels and the output
    /// gets `ci`. Padding is derived as (k - stride)/2, which requires
    /// k >= stride with k - stride even.
    pub fn transposed_conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Var {
        let x = self.value(input);
        let k = self.value(kernel);
        let [b, c, ih, iw] = x.shape();
        let [kco, kci, kh, kw] = k.shape();
        assert!(stride >= 1, "transposed conv stride must be >= 1");
        assert_eq!(c, kco, "transposed conv input has {} channels, kernel expects {}", c, kco);
        assert!(
            kh == kw && kh >= stride && (kh - stride).is_multiple_of(2),
            "incompatible transposed conv configuration: kernel {}x{} with stride {}",
            kh,
            kw,
            stride
        );
        let padding = (kh - stride) / 2;
        let (oh, ow) = (ih * stride, iw * stride);
        let mut out = Tensor::zeros([b, kci, oh, ow]);
        kernels::conv_input_grad_acc(
            x.data(),
            (b, kco, ih, iw),
            k.data(),
            (kci, kh, kw),
            stride,
            padding,
            out.data_mut(),
            (oh, ow),
        );
        let needs = self.needs(input) || self.needs(kernel);
        self.push(Op::TransposedConv2d { input, kernel, stride, padding }, out, needs)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        // 0.5*(v + |v|) equals max(v, 0) exactly for finite v but lets a
        // NaN propagate instead of being silently flushed to zero.
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| 0.5 * (v + v.abs())).collect());
        let needs = self.needs(input);
        self.push(Op::Relu { input }, out, needs)
    }

    /// 2x2 max pooling, stride 2. Gradient routes to the argmax, first
    /// index in row-major order on ties.
    pub fn max_pool2(&mut self, input: Var) -> Var {
        let (out, argmax) = kernels::max_pool2_forward(self.value(input));
        let needs = self.needs(input);
        self.push(Op::MaxPool2 { input, argmax }, out, needs)
    }

    /// Concatenate along the channel axis; other extents must match.
    pub fn channel_concat(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        let [ba, ca, ha, wa] = ta.shape();
        let [bb, cb, hb, wb] = tb.shape();
        assert!(
            ba == bb && ha == hb && wa == wb,
            "channel_concat non-channel extents differ: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let mut out = Tensor::zeros([ba, ca + cb, ha, wa]);
        let plane = ha * wa;
        {
            let od = out.data_mut();
            for n in 0..ba {
                let dst = &mut od[n * (ca + cb) * plane..][..(ca + cb) * plane];
                dst[..ca * plane].copy_from_slice(&ta.data()[n * ca * plane..][..ca * plane]);
                dst[ca * plane..].copy_from_slice(&tb.data()[n * cb * plane..][..cb * plane]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::ChannelConcat { a, b }, out, needs)
    }

    pub fn elementwise_add(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        assert_eq!(ta.shape(), tb.shape(), "elementwise_add requires equal shapes");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add { a, b }, out, needs)
    }

    /// Softmax over the channel axis, independently per (batch, y, x).
    pub fn softmax_channels(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let [b, c, h, w] = x.shape();
        assert!(c >= 1);
        let plane = h * w;
        let mut out = Tensor::zeros([b, c, h, w]);
        {
            let xd = x.data();
            let od = out.data_mut();
            for n in 0..b {
                let base = n * c * plane;
                for p in 0..plane {
                    let mut m = f64::NEG_INFINITY;
                    for ch in 0..c {
                        m = m.max(xd[base + ch * plane + p]);
                    }
                    let mut denom = 0.0;
                    for ch in 0..c {
                        let e = (xd[base + ch * plane + p] - m).exp();
                        od[base + ch * plane + p] = e;
                        denom += e;
                    }
                    for ch in 0..c {
                        od[base + ch * plane + p] /= denom;
                    }
                }
            }
        }
        let needs = self.needs(input);
        self.push(Op::SoftmaxChannels { input }, out, needs)
    }

    /// Multiply by a compile-time constant factor.
    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| v * factor).collect());
        let needs = self.needs(input);
        self.push(Op::Scale { input, factor }, out, needs)
    }

    /// Sum of every element, as a scalar node.
    pub fn sum_all(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let mut acc = 0.0;
        for v in x.data() {
            acc += *v;
        }
        let needs = self.needs(input);
        self.push(Op::SumAll { input }, Tensor::scalar(acc), needs)
    }

    /// Sum of squared elements, as a scalar node.
    pub fn sum_squares(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let mut acc = 0.0;
        for v in x.data() {
            acc += *v * *v;
        }
        let needs = self.needs(input);
        self.push(Op::SumSquares { input }, Tensor::scalar(acc), needs)
    }

    /// Sampled cross-entropy: sum over pixels of (-sum_c L*ln(max(Y,1e-12))) * W,
    /// normalized by sum(W). `probs` and `labels` are `[b,c,h,w]`, `weights`
    /// is `[b,1,h,w]`. Fails with [`Error::DegenerateBatch`] when the weights
    /// sum to zero.
    pub fn weighted_cross_entropy(&mut self, probs: Var, labels: Var, weights: Var) -> Result<Var> {
        let y = self.value(probs);
        let l = self.value(labels);
        let w = self.value(weights);
        let [b, c, h, w_ext] = y.shape();
        assert_eq!(l.shape(), y.shape(), "labels shape {:?} != probs shape {:?}", l.shape(), y.shape());
        assert_eq!(
            w.shape(),
            [b, 1, h, w_ext],
            "weights shape {:?} must be [{}, 1, {}, {}]",
            w.shape(),
            b,
            h,
            w_ext
        );
        let plane = h * w_ext;
        let mut weight_sum = 0.0;
        for v in w.data() {
            weight_sum += *v;
        }
        if weight_sum <= 0.0 {
            return Err(Error::DegenerateBatch);
        }
        let mut num = 0.0;
        for n in 0..b {
            let ybase = n * c * plane;
            for p in 0..plane {
                let wv = w.data()[n * plane + p];
                if wv == 0.0 {
                    continue;
                }
                let mut pixel = 0.0;
                for ch in 0..c {
                    let lv = l.data()[ybase + ch * plane + p];
                    if lv != 0.0 {
                        pixel -= lv * y.data()[ybase + ch * plane + p].max(PROB_FLOOR).ln();
                    }
                }
                num += pixel * wv;
            }
        }
        let needs = self.needs(probs);
        Ok(self.push(
            Op::WeightedCrossEntropy { probs, labels, weights, weight_sum },
            Tensor::scalar(num / weight_sum),
            needs,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populate gradients of everything `loss` depends on.
    ///
    /// Gradients are reset to zero first, so calling `backward` twice
    /// yields the same result as calling it once.
    pub fn backward(&mut self, loss: Var) {
        assert!(
            self.nodes[loss.0].value.is_scalar(),
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        for node in &mut self.nodes {
            if node.needs_grad {
                match &mut node.grad {
                    Some(g) => g.fill(0.0),
                    None => node.grad = Some(vec![0.0; node.value.numel()]),
                }
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return;
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            // Inputs of node i always sit strictly before it on the tape.
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = node.grad.as_ref().expect("grad allocated for needs_grad node");
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { input, kernel, bias, stride, padding } => {
                    let [b, co, oh, ow] = node.value.shape();
                    let x_shape = before[input.0].value.shape();
                    let k_shape = before[kernel.0].value.shape();
                    let (ci, kh, kw) = (k_shape[1], k_shape[2], k_shape[3]);
                    if before[input.0].needs_grad {
                        let mut din = before[input.0].grad.take().unwrap();
                        kernels::conv_input_grad_acc(
                            g,
                            (b, co, oh, ow),
                            before[kernel.0].value.data(),
                            (ci, kh, kw),
                            *stride,
                            *padding,
                            &mut din,
                            (x_shape[2], x_shape[3]),
                        );
                        before[input.0].grad = Some(din);
                    }
                    if before[kernel.0].needs_grad {
                        let mut dk = before[kernel.0].grad.take().unwrap();
                        kernels::conv_kernel_grad_acc(
                            g,
                            (b, co, oh, ow),
                            before[input.0].value.data(),
                            (ci, x_shape[2], x_shape[3]),
                            *stride,
                            *padding,
                            &mut dk,
                            (kh, kw),
                        );
                        before[kernel.0].grad = Some(dk);
                    }
                    if before[bias.0].needs_grad {
                        let mut db = before[bias.0].grad.take().unwrap();
                        kernels::conv_bias_grad_acc(g, (b, co, oh, ow), &mut db);
                        before[bias.0].grad = Some(db);
                    }
                }
                Op::TransposedConv2d { input, kernel, stride, padding } => {
                    // Forward is the conv adjoint, so the input gradient is a
                    // plain conv of the output gradient with the same kernel.
                    let [b, ci, oh, ow] = node.value.shape();
                    let x_shape = before[input.0].value.shape();
                    let k_shape = before[kernel.0].value.shape();
                    let (co, kh, kw) = (k_shape[0], k_shape[2], k_shape[3]);
                    if before[input.0].needs_grad {
                        let mut din = before[input.0].grad.take().unwrap();
                        kernels::conv_acc(
                            g,
                            (b, ci, oh, ow),
                            before[kernel.0].value.data(),
                            (co, kh, kw),
                            *stride,
                            *padding,
                            &mut din,
                            (x_shape[2], x_shape[3]),
                        );
                        before[input.0].grad = Some(din);
                    }
                    if before[kernel.0].needs_grad {
                        // Same bilinear form as conv, with the roles of the
                        // activation pair swapped.
                        let mut dk = before[kernel.0].grad.take().unwrap();
                        kernels::conv_kernel_grad_acc(
                            before[input.0].value.data(),
                            (b, co, x_shape[2], x_shape[3]),
                            g,
                            (ci, oh, ow),
                            *stride,
                            *padding,
                            &mut dk,
                            (kh, kw),
                        );
                        before[kernel.0].grad = Some(dk);
                    }
                }
                Op::Relu { input } => {
                    if before[input.0].needs_grad {
                        // out > 0 exactly where the pre-activation was > 0.
                        let din = before[input.0].grad.as_mut().unwrap();
                        for ((d, y), gv) in din.iter_mut().zip(node.value.data()).zip(g) {
                            if *y > 0.0 {
                                *d += *gv;
                            }
                        }
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    if before[input.0].needs_grad {
                        let din = before[input.0].grad.as_mut().unwrap();
                        for (out_idx, &src) in argmax.iter().enumerate() {
                            din[src] += g[out_idx];
                        }
                    }
                }
                Op::ChannelConcat { a, b } => {
                    let [bn, _, h, w] = node.value.shape();
                    let ca = before[a.0].value.shape()[1];
                    let cb = before[b.0].value.shape()[1];
                    let plane = h * w;
                    if before[a.0].needs_grad {
                        let da = before[a.0].grad.as_mut().unwrap();
                        for n in 0..bn {
                            let src = &g[n * (ca + cb) * plane..][..ca * plane];
                            let dst = &mut da[n * ca * plane..][..ca * plane];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                    }
                    if before[b.0].needs_grad {
                        let db = before[b.0].grad.as_mut().unwrap();
                        for n in 0..bn {
                            let src = &g[n * (ca + cb) * plane + ca * plane..][..cb * plane];
                            let dst = &mut db[n * cb * plane..][..cb * plane];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for v in [*a, *b] {
                        if before[v.0].needs_grad {
                            let dv = before[v.0].grad.as_mut().unwrap();
                            for (d, s) in dv.iter_mut().zip(g) {
                                *d += *s;
                            }
                        }
                    }
                }
                Op::SoftmaxChannels { input } => {
                    if before[input.0].needs_grad {
                        let [b, c, h, w] = node.value.shape();
                        let plane = h * w;
                        let y = node.value.data();
                        let din = before[input.0].grad.as_mut().unwrap();
                        for n in 0..b {
                            let base = n * c * plane;
                            for p in 0..plane {
                                let mut dot = 0.0;
                                for ch in 0..c {
                                    let idx = base + ch * plane + p;
                                    dot += g[idx] * y[idx];
                                }
                                for ch in 0..c {
                                    let idx = base + ch * plane + p;
                                    din[idx] += y[idx] * (g[idx] - dot);
                                }
                            }
                        }
                    }
                }
                Op::Scale { input, factor } => {
                    if before[input.0].needs_grad {
                        let din = before[input.0].grad.as_mut().unwrap();
                        for (d, s) in din.iter_mut().zip(g) {
                            *d += *factor * *s;
                        }
                    }
                }
                Op::SumAll { input } => {
                    if before[input.0].needs_grad {
                        let din = before[input.0].grad.as_mut().unwrap();
                        for d in din.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::SumSquares { input } => {
                    if before[input.0].needs_grad {
                        let mut din = before[input.0].grad.take().unwrap();
                        for (d, x) in din.iter_mut().zip(before[input.0].value.data()) {
                            *d += 2.0 * *x * g[0];
                        }
                        before[input.0].grad = Some(din);
                    }
                }
                Op::WeightedCrossEntropy { probs, labels, weights, weight_sum } => {
                    if before[probs.0].needs_grad {
                        let [b, c, h, w_ext] = before[probs.0].value.shape();
                        let plane = h * w_ext;
                        let scale = g[0] / *weight_sum;
                        let mut dy = before[probs.0].grad.take().unwrap();
                        {
                            let yv = before[probs.0].value.data();
                            let lv = before[labels.0].value.data();
                            let wv = before[weights.0].value.data();
                            for n in 0..b {
                                let ybase = n * c * plane;
                                for p in 0..plane {
                                    let weight = wv[n * plane + p];
                                    if weight == 0.0 {
                                        continue;
                                    }
                                    for ch in 0..c {
                                        let idx = ybase + ch * plane + p;
                                        let l = lv[idx];
                                        if l != 0.0 && yv[idx] >= PROB_FLOOR {
                                            dy[idx] -= scale * weight * l / yv[idx];
                                        }
                                    }
                                }
                            }
                        }
                        before[probs.0].grad = Some(dy);
                    }
                }
            }
        }
    }
}
