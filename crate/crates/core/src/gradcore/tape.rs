//! Reverse-mode differentiation over a fixed op set.
//!
//! A [`Tape`] is an append-only list of nodes; appending an op computes its
//! value eagerly, so node order is already topological and the backward pass
//! is one reverse sweep. The op set is exactly what the training objective
//! needs: conv, ReLU, sigmoid, elementwise arithmetic, box mean-pooling,
//! linear, softmax, log, cosine similarity, and the fused losses.
//!
//! Shape agreement between op inputs is an internal invariant and panics on
//! violation; user-facing validation (boxes, batches, loss finiteness)
//! happens in the model and objective layers.

use crate::prototypes::KL_FLOOR;
use crate::raster::BoxRect;

use super::GradError;

/// Dense value buffer with explicit dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Tensor { dims: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { dims: vec![data.len()], data }
    }

    pub fn chw(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "chw data length");
        Tensor { dims: vec![c, h, w], data }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Tensor { dims, data: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.dims.is_empty() && self.data.len() == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Ln(NodeId),
    Pick { input: NodeId, index: usize },
    MeanPoolBox { input: NodeId, rect: BoxRect },
    Linear { input: NodeId, weight: NodeId, bias: NodeId },
    Softmax(NodeId),
    MeanOf(Vec<NodeId>),
    SumOf(Vec<NodeId>),
    CosineSim(NodeId, NodeId),
    LogSumExp(Vec<NodeId>),
    SoftDice(NodeId, NodeId),
    MseLoss(NodeId, NodeId),
    KlPair { p: NodeId, q: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Vec<f64>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    j as usize
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let t = self.value(id);
        debug_assert!(t.is_scalar(), "expected scalar node");
        t.data[0]
    }

    /// Gradient buffer of a node; valid after [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: Vec::new(),
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Value that no gradient flows into.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = Tensor {
            dims: v.dims.clone(),
            data: v.data.iter().map(|&a| a.max(0.0)).collect(),
        };
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::Relu(x), out, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = Tensor {
            dims: v.dims.clone(),
            data: v.data.iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect(),
        };
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::Sigmoid(x), out, ng)
    }

    fn binary_elementwise(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dims, vb.dims, "elementwise operands must share dims");
        let out = Tensor {
            dims: va.dims.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        let ng = self.any_needs_grad(&[a, b]);
        self.push(op, out, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x);
        let out = Tensor {
            dims: v.dims.clone(),
            data: v.data.iter().map(|&a| a * c).collect(),
        };
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::Scale(x, c), out, ng)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = Tensor {
            dims: v.dims.clone(),
            data: v.data.iter().map(|&a| a.ln()).collect(),
        };
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::Ln(x), out, ng)
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> NodeId {
        let v = self.value(x);
        assert!(index < v.len(), "pick index {index} out of {}", v.len());
        let out = Tensor::scalar(v.data[index]);
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::Pick { input: x, index }, out, ng)
    }

    /// Same-shape 3x3-style convolution with reflect padding.
    /// `input` is `[ic, h, w]`, `weight` is `[oc, ic, k, k]` with odd `k`,
    /// `bias` is `[oc]`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let (vi, vw, vb) = (self.value(input), self.value(weight), self.value(bias));
        assert_eq!(vi.dims.len(), 3, "conv input must be chw");
        assert_eq!(vw.dims.len(), 4, "conv weight must be [oc, ic, k, k]");
        let (ic, h, w) = (vi.dims[0], vi.dims[1], vi.dims[2]);
        let (oc, wic, kh, kw) = (vw.dims[0], vw.dims[1], vw.dims[2], vw.dims[3]);
        assert_eq!(ic, wic, "conv channel mismatch");
        assert_eq!(kh, kw, "conv kernel must be square");
        assert_eq!(kh % 2, 1, "conv kernel must be odd");
        assert_eq!(vb.dims, vec![oc], "conv bias dims");
        assert!(h >= 2 && w >= 2, "reflect padding needs h, w >= 2");

        let half = (kh - 1) / 2;
        let ry: Vec<usize> = (0..h + kh - 1).map(|j| reflect(j as isize - half as isize, h)).collect();
        let rx: Vec<usize> = (0..w + kw - 1).map(|j| reflect(j as isize - half as isize, w)).collect();

        let mut out = vec![0.0f64; oc * h * w];
        for o in 0..oc {
            let b = vb.data[o];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = b;
                    for i in 0..ic {
                        let plane = &vi.data[i * h * w..(i + 1) * h * w];
                        let wbase = ((o * ic + i) * kh) * kw;
                        for dy in 0..kh {
                            let srow = ry[y + dy] * w;
                            let wrow = wbase + dy * kw;
                            for dx in 0..kw {
                                acc += vw.data[wrow + dx] * plane[srow + rx[x + dx]];
                            }
                        }
                    }
                    out[(o * h + y) * w + x] = acc;
                }
            }
        }
        let ng = self.any_needs_grad(&[input, weight, bias]);
        self.push(Op::Conv2d { input, weight, bias }, Tensor::chw(oc, h, w, out), ng)
    }

    /// Mean over the half-open box of a `[c, h, w]` tensor, one value per
    /// channel.
    pub fn mean_pool_box(&mut self, input: NodeId, rect: BoxRect) -> NodeId {
        let v = self.value(input);
        assert_eq!(v.dims.len(), 3, "pool input must be chw");
        let (c, h, w) = (v.dims[0], v.dims[1], v.dims[2]);
        assert!(rect.fits_in(w, h) && rect.area() > 0, "pool box invalid");
        let inv = 1.0 / rect.area() as f64;
        let mut out = vec![0.0f64; c];
        for (ch, slot) in out.iter_mut().enumerate() {
            let plane = &v.data[ch * h * w..(ch + 1) * h * w];
            let mut acc = 0.0;
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    acc += plane[y * w + x];
                }
            }
            *slot = acc * inv;
        }
        let ng = self.nodes[input.0].needs_grad;
        self.push(Op::MeanPoolBox { input, rect }, Tensor::vector(out), ng)
    }

    /// `weight [out, in] * input [in] + bias [out]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let (vi, vw, vb) = (self.value(input), self.value(weight), self.value(bias));
        assert_eq!(vw.dims.len(), 2, "linear weight must be 2-d");
        let (n_out, n_in) = (vw.dims[0], vw.dims[1]);
        assert_eq!(vi.len(), n_in, "linear input dim");
        assert_eq!(vb.len(), n_out, "linear bias dim");
        let mut out = vb.data.clone();
        for (i, slot) in out.iter_mut().enumerate() {
            let row = &vw.data[i * n_in..(i + 1) * n_in];
            *slot += row.iter().zip(&vi.data).map(|(&a, &b)| a * b).sum::<f64>();
        }
        let ng = self.any_needs_grad(&[input, weight, bias]);
        self.push(Op::Linear { input, weight, bias }, Tensor::vector(out), ng)
    }

    /// Numerically stable softmax over a vector.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let max = v.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.data.iter().map(|&a| (a - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let out = Tensor::vector(exps.into_iter().map(|e| e / sum).collect());
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::Softmax(x), out, ng)
    }

    /// Elementwise mean of same-shaped tensors.
    pub fn mean_of(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "mean_of needs inputs");
        let dims = self.value(xs[0]).dims.clone();
        let mut data = vec![0.0f64; self.value(xs[0]).len()];
        for &id in xs {
            let v = self.value(id);
            assert_eq!(v.dims, dims, "mean_of operands must share dims");
            for (a, &b) in data.iter_mut().zip(&v.data) {
                *a += b;
            }
        }
        let inv = 1.0 / xs.len() as f64;
        for a in &mut data {
            *a *= inv;
        }
        let ng = self.any_needs_grad(xs);
        self.push(Op::MeanOf(xs.to_vec()), Tensor { dims, data }, ng)
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn sum_of(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "sum_of needs inputs");
        let dims = self.value(xs[0]).dims.clone();
        let mut data = vec![0.0f64; self.value(xs[0]).len()];
        for &id in xs {
            let v = self.value(id);
            assert_eq!(v.dims, dims, "sum_of operands must share dims");
            for (a, &b) in data.iter_mut().zip(&v.data) {
                *a += b;
            }
        }
        let ng = self.any_needs_grad(xs);
        self.push(Op::SumOf(xs.to_vec()), Tensor { dims, data }, ng)
    }

    /// Cosine similarity of two vectors.
    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "cosine operands must share length");
        let dot: f64 = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).sum();
        let na: f64 = va.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = vb.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na * nb;
        let cos = if denom > 0.0 { dot / denom } else { 0.0 };
        let ng = self.any_needs_grad(&[a, b]);
        self.push(Op::CosineSim(a, b), Tensor::scalar(cos), ng)
    }

    /// Log-sum-exp over scalar nodes, max-subtracted.
    pub fn log_sum_exp(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "log_sum_exp needs inputs");
        let vals: Vec<f64> = xs.iter().map(|&id| self.scalar_value(id)).collect();
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = vals.iter().map(|&v| (v - max).exp()).sum();
        let out = max + sum.ln();
        let ng = self.any_needs_grad(xs);
        self.push(Op::LogSumExp(xs.to_vec()), Tensor::scalar(out), ng)
    }

    /// Soft Dice loss `1 - (2 sum(ab) + 1) / (sum(a) + sum(b) + 1)` over
    /// same-shaped tensors.
    pub fn soft_dice(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dims, vb.dims, "soft_dice operands must share dims");
        let inter: f64 = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).sum();
        let sa: f64 = va.data.iter().sum();
        let sb: f64 = vb.data.iter().sum();
        let loss = 1.0 - (2.0 * inter + 1.0) / (sa + sb + 1.0);
        let ng = self.any_needs_grad(&[a, b]);
        self.push(Op::SoftDice(a, b), Tensor::scalar(loss), ng)
    }

    /// Mean squared difference over same-shaped tensors.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dims, vb.dims, "mse operands must share dims");
        let n = va.len() as f64;
        let loss = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let ng = self.any_needs_grad(&[a, b]);
        self.push(Op::MseLoss(a, b), Tensor::scalar(loss), ng)
    }

    /// `KL(p || q)` over probability vectors; `q` is floored at `1e-12`
    /// before the log and zero `p` entries contribute zero.
    pub fn kl_pair(&mut self, p: NodeId, q: NodeId) -> NodeId {
        let (vp, vq) = (self.value(p), self.value(q));
        assert_eq!(vp.len(), vq.len(), "kl operands must share length");
        let mut acc = 0.0;
        for (&pc, &qc) in vp.data.iter().zip(&vq.data) {
            if pc > 0.0 {
                acc += pc * (pc / qc.max(KL_FLOOR)).ln();
            }
        }
        let ng = self.any_needs_grad(&[p, q]);
        self.push(Op::KlPair { p, q }, Tensor::scalar(acc), ng)
    }

    /// Reverse sweep from a finite scalar loss. Gradients accumulate into
    /// every node that leads to a trainable leaf; read them with
    /// [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<(), GradError> {
        let lv = self.value(loss);
        assert!(lv.is_scalar(), "backward needs a scalar loss");
        let loss_value = lv.data[0];
        if !loss_value.is_finite() {
            return Err(GradError::NonFiniteLoss(loss_value));
        }
        for node in &mut self.nodes {
            node.grad = vec![0.0; node.value.len()];
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Relu(x) => {
                    let g: Vec<f64> = self.nodes[id].grad.clone();
                    let active: Vec<bool> = self.nodes[x.0].value.data.iter().map(|&v| v > 0.0).collect();
                    let gx = &mut self.nodes[x.0].grad;
                    for i in 0..g.len() {
                        if active[i] {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let g = self.nodes[id].grad.clone();
                    let y = self.nodes[id].value.data.clone();
                    let gx = &mut self.nodes[x.0].grad;
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Add(a, b) => {
                    let g = self.nodes[id].grad.clone();
                    if self.nodes[a.0].needs_grad {
                        for (ga, &gi) in self.nodes[a.0].grad.iter_mut().zip(&g) {
                            *ga += gi;
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        for (gb, &gi) in self.nodes[b.0].grad.iter_mut().zip(&g) {
                            *gb += gi;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    let g = self.nodes[id].grad.clone();
                    if self.nodes[a.0].needs_grad {
                        for (ga, &gi) in self.nodes[a.0].grad.iter_mut().zip(&g) {
                            *ga += gi;
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        for (gb, &gi) in self.nodes[b.0].grad.iter_mut().zip(&g) {
                            *gb -= gi;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let g = self.nodes[id].grad.clone();
                    let va = self.nodes[a.0].value.data.clone();
                    let vb = self.nodes[b.0].value.data.clone();
                    if self.nodes[a.0].needs_grad {
                        for i in 0..g.len() {
                            self.nodes[a.0].grad[i] += g[i] * vb[i];
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        for i in 0..g.len() {
                            self.nodes[b.0].grad[i] += g[i] * va[i];
                        }
                    }
                }
                Op::Scale(x, c) => {
                    let g = self.nodes[id].grad.clone();
                    let gx = &mut self.nodes[x.0].grad;
                    for i in 0..g.len() {
                        gx[i] += g[i] * c;
                    }
                }
                Op::Ln(x) => {
                    let g = self.nodes[id].grad.clone();
                    let vx = self.nodes[x.0].value.data.clone();
                    let gx = &mut self.nodes[x.0].grad;
                    for i in 0..g.len() {
                        gx[i] += g[i] / vx[i];
                    }
                }
                Op::Pick { input, index } => {
                    let g = self.nodes[id].grad[0];
                    self.nodes[input.0].grad[index] += g;
                }
                Op::Conv2d { input, weight, bias } => {
                    self.backward_conv(id, input, weight, bias);
                }
                Op::MeanPoolBox { input, rect } => {
                    let g = self.nodes[id].grad.clone();
                    let dims = self.nodes[input.0].value.dims.clone();
                    let (h, w) = (dims[1], dims[2]);
                    let inv = 1.0 / rect.area() as f64;
                    let gx = &mut self.nodes[input.0].grad;
                    for (c, &gc) in g.iter().enumerate() {
                        let base = c * h * w;
                        for y in rect.y0..rect.y1 {
                            for x in rect.x0..rect.x1 {
                                gx[base + y * w + x] += gc * inv;
                            }
                        }
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let g = self.nodes[id].grad.clone();
                    let vi = self.nodes[input.0].value.data.clone();
                    let vw = self.nodes[weight.0].value.data.clone();
                    let n_in = vi.len();
                    if self.nodes[weight.0].needs_grad {
                        let gw = &mut self.nodes[weight.0].grad;
                        for (i, &gi) in g.iter().enumerate() {
                            for (j, &xj) in vi.iter().enumerate() {
                                gw[i * n_in + j] += gi * xj;
                            }
                        }
                    }
                    if self.nodes[bias.0].needs_grad {
                        let gb = &mut self.nodes[bias.0].grad;
                        for (i, &gi) in g.iter().enumerate() {
                            gb[i] += gi;
                        }
                    }
                    if self.nodes[input.0].needs_grad {
                        let gx = &mut self.nodes[input.0].grad;
                        for (i, &gi) in g.iter().enumerate() {
                            for j in 0..n_in {
                                gx[j] += gi * vw[i * n_in + j];
                            }
                        }
                    }
                }
                Op::Softmax(x) => {
                    let g = self.nodes[id].grad.clone();
                    let y = self.nodes[id].value.data.clone();
                    let dot: f64 = g.iter().zip(&y).map(|(&a, &b)| a * b).sum();
                    let gx = &mut self.nodes[x.0].grad;
                    for i in 0..g.len() {
                        gx[i] += y[i] * (g[i] - dot);
                    }
                }
                Op::MeanOf(xs) => {
                    let g = self.nodes[id].grad.clone();
                    let inv = 1.0 / xs.len() as f64;
                    for xid in xs {
                        if !self.nodes[xid.0].needs_grad {
                            continue;
                        }
                        for (gx, &gi) in self.nodes[xid.0].grad.iter_mut().zip(&g) {
                            *gx += gi * inv;
                        }
                    }
                }
                Op::SumOf(xs) => {
                    let g = self.nodes[id].grad.clone();
                    for xid in xs {
                        if !self.nodes[xid.0].needs_grad {
                            continue;
                        }
                        for (gx, &gi) in self.nodes[xid.0].grad.iter_mut().zip(&g) {
                            *gx += gi;
                        }
                    }
                }
                Op::CosineSim(a, b) => {
                    let g = self.nodes[id].grad[0];
                    let cos = self.nodes[id].value.data[0];
                    let va = self.nodes[a.0].value.data.clone();
                    let vb = self.nodes[b.0].value.data.clone();
                    let na2: f64 = va.iter().map(|x| x * x).sum();
                    let nb2: f64 = vb.iter().map(|x| x * x).sum();
                    let (na, nb) = (na2.sqrt(), nb2.sqrt());
                    if na > 0.0 && nb > 0.0 {
                        if self.nodes[a.0].needs_grad {
                            let ga = &mut self.nodes[a.0].grad;
                            for i in 0..va.len() {
                                ga[i] += g * (vb[i] / (na * nb) - cos * va[i] / na2);
                            }
                        }
                        if self.nodes[b.0].needs_grad {
                            let gb = &mut self.nodes[b.0].grad;
                            for i in 0..vb.len() {
                                gb[i] += g * (va[i] / (na * nb) - cos * vb[i] / nb2);
                            }
                        }
                    }
                }
                Op::LogSumExp(xs) => {
                    let g = self.nodes[id].grad[0];
                    let out = self.nodes[id].value.data[0];
                    for xid in xs {
                        if !self.nodes[xid.0].needs_grad {
                            continue;
                        }
                        let v = self.nodes[xid.0].value.data[0];
                        self.nodes[xid.0].grad[0] += g * (v - out).exp();
                    }
                }
                Op::SoftDice(a, b) => {
                    let g = self.nodes[id].grad[0];
                    let va = self.nodes[a.0].value.data.clone();
                    let vb = self.nodes[b.0].value.data.clone();
                    let inter: f64 = va.iter().zip(&vb).map(|(&x, &y)| x * y).sum();
                    let sa: f64 = va.iter().sum();
                    let sb: f64 = vb.iter().sum();
                    let n = 2.0 * inter + 1.0;
                    let d = sa + sb + 1.0;
                    let d2 = d * d;
                    if self.nodes[a.0].needs_grad {
                        let ga = &mut self.nodes[a.0].grad;
                        for i in 0..va.len() {
                            ga[i] += g * (n - 2.0 * vb[i] * d) / d2;
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = &mut self.nodes[b.0].grad;
                        for i in 0..vb.len() {
                            gb[i] += g * (n - 2.0 * va[i] * d) / d2;
                        }
                    }
                }
                Op::MseLoss(a, b) => {
                    let g = self.nodes[id].grad[0];
                    let va = self.nodes[a.0].value.data.clone();
                    let vb = self.nodes[b.0].value.data.clone();
                    let inv = 2.0 / va.len() as f64;
                    if self.nodes[a.0].needs_grad {
                        let ga = &mut self.nodes[a.0].grad;
                        for i in 0..va.len() {
                            ga[i] += g * inv * (va[i] - vb[i]);
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = &mut self.nodes[b.0].grad;
                        for i in 0..vb.len() {
                            gb[i] -= g * inv * (va[i] - vb[i]);
                        }
                    }
                }
                Op::KlPair { p, q } => {
                    let g = self.nodes[id].grad[0];
                    let vp = self.nodes[p.0].value.data.clone();
                    let vq = self.nodes[q.0].value.data.clone();
                    if self.nodes[p.0].needs_grad {
                        let gp = &mut self.nodes[p.0].grad;
                        for i in 0..vp.len() {
                            if vp[i] > 0.0 {
                                gp[i] += g * ((vp[i] / vq[i].max(KL_FLOOR)).ln() + 1.0);
                            }
                        }
                    }
                    if self.nodes[q.0].needs_grad {
                        let gq = &mut self.nodes[q.0].grad;
                        for i in 0..vq.len() {
                            if vp[i] > 0.0 && vq[i] >= KL_FLOOR {
                                gq[i] -= g * vp[i] / vq[i];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_conv(&mut self, id: usize, input: NodeId, weight: NodeId, bias: NodeId) {
        let g = self.nodes[id].grad.clone();
        let vi = self.nodes[input.0].value.clone();
        let vw = self.nodes[weight.0].value.clone();
        let (ic, h, w) = (vi.dims[0], vi.dims[1], vi.dims[2]);
        let (oc, kh, kw) = (vw.dims[0], vw.dims[2], vw.dims[3]);
        let half = (kh - 1) / 2;
        let ry: Vec<usize> = (0..h + kh - 1).map(|j| reflect(j as isize - half as isize, h)).collect();
        let rx: Vec<usize> = (0..w + kw - 1).map(|j| reflect(j as isize - half as isize, w)).collect();

        if self.nodes[bias.0].needs_grad {
            let gb = &mut self.nodes[bias.0].grad;
            for o in 0..oc {
                gb[o] += g[o * h * w..(o + 1) * h * w].iter().sum::<f64>();
            }
        }
        if self.nodes[weight.0].needs_grad {
            let gw = &mut self.nodes[weight.0].grad;
            for o in 0..oc {
                let gplane = &g[o * h * w..(o + 1) * h * w];
                for i in 0..ic {
                    let iplane = &vi.data[i * h * w..(i + 1) * h * w];
                    let wbase = ((o * ic + i) * kh) * kw;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let mut acc = 0.0;
                            for y in 0..h {
                                let srow = ry[y + dy] * w;
                                let grow = y * w;
                                for x in 0..w {
                                    acc += gplane[grow + x] * iplane[srow + rx[x + dx]];
                                }
                            }
                            gw[wbase + dy * kw + dx] += acc;
                        }
                    }
                }
            }
        }
        if self.nodes[input.0].needs_grad {
            let gx = &mut self.nodes[input.0].grad;
            for o in 0..oc {
                let gplane = &g[o * h * w..(o + 1) * h * w];
                for i in 0..ic {
                    let wbase = ((o * ic + i) * kh) * kw;
                    for y in 0..h {
                        for x in 0..w {
                            let gv = gplane[y * w + x];
                            if gv == 0.0 {
                                continue;
                            }
                            for dy in 0..kh {
                                let srow = ry[y + dy] * w;
                                for dx in 0..kw {
                                    gx[i * h * w + srow + rx[x + dx]] += gv * vw.data[wbase + dy * kw + dx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
