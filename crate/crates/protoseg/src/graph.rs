//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a single-step tape: leaves go in as trainable variables or
//! constants, ops build on top of them, and [`Graph::backward`] walks the
//! tape once to produce gradients for every trainable leaf. Constants (and
//! everything computed purely from constants — e.g. the momentum-encoder
//! branch) carry no gradient and cost nothing at backward time.
//!
//! Feature maps are laid out [C, H, W]; vectors are [C]; scalars are [1].

use std::cell::{Ref, RefCell};

use crate::tensor::{mm_nn, mm_nt, mm_tn, Mask, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    /// 3x3 convolution, stride 1, zero padding 1 ("same").
    Conv3x3 { x: Var, w: Var, b: Var },
    AvgPool2(Var),
    BilinearResize { x: Var },
    /// 1x1 convolution / per-pixel linear map.
    Conv1x1 { x: Var, w: Var, b: Var },
    ConcatChannels(Vec<Var>),
    /// Mean of feature vectors over the set pixels of a binary mask.
    MaskedMean { x: Var, mask: Mask, count: usize },
    /// Per-pixel cosine similarity between a feature map and a vector.
    CosineMap { x: Var, p: Var },
    /// Cosine similarity between one vector and each row of a fixed bank.
    CosineBank { anchor: Var, bank: Tensor },
    /// Stack H×W maps into [N, H, W].
    StackMaps(Vec<Var>),
    SoftmaxChannels(Var),
    /// Mean per-pixel cross-entropy of channel logits against label indices.
    SoftmaxCeMap { logits: Var, target: Vec<u16> },
    /// Cross-entropy of a logit vector against one target index.
    CeLogits { logits: Var, target: usize },
    /// Scalar dot product with fixed weights (test scalarization helper).
    WeightedSum { x: Var, weights: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    grad_needed: bool,
}

/// Gradients for the trainable leaves of a graph, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or a zero tensor of `shape` if no path reached it.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => {
                assert_eq!(g.shape(), shape);
                g
            }
            None => Tensor::zeros(shape),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

const COSINE_EPS: f64 = 1e-12;

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()) }
    }

    fn push(&self, value: Tensor, op: Op, grad_needed: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, grad_needed });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].grad_needed
    }

    fn val(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    /// Clone out the current value of `v`.
    pub fn value(&self, v: Var) -> Tensor {
        self.val(v).clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.val(v))
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.val(v).shape().to_vec()
    }

    /// Trainable leaf: gradients are produced for it.
    pub fn var(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf: no gradient flows into or through it alone.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let va = self.val(a);
            let vb = self.val(b);
            assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
            let mut out = va.clone();
            out.add_scaled(&vb, 1.0);
            out
        };
        let needed = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needed)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let mut value = self.value(a);
        value.scale_in_place(c);
        let needed = self.needs(a);
        self.push(value, Op::Scale(a, c), needed)
    }

    /// Mean of several same-shaped vars.
    pub fn mean_of(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        self.scale(acc, 1.0 / vars.len() as f64)
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = {
            let va = self.val(a);
            let mut out = va.clone();
            out.data_mut().iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v = 0.0;
                }
            });
            out
        };
        let needed = self.needs(a);
        self.push(value, Op::Relu(a), needed)
    }

    pub fn conv3x3(&self, x: Var, w: Var, b: Var) -> Var {
        let value = {
            let vx = self.val(x);
            let vw = self.val(w);
            let vb = self.val(b);
            conv3x3_forward(&vx, &vw, &vb)
        };
        let needed = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Conv3x3 { x, w, b }, needed)
    }

    pub fn avg_pool2(&self, x: Var) -> Var {
        let value = {
            let vx = self.val(x);
            let (c, h, w) = chw(&vx);
            assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even extent, got {h}x{w}");
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Tensor::zeros(&[c, oh, ow]);
            let xd = vx.data();
            let od = out.data_mut();
            for ci in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let base = ci * h * w + 2 * i * w + 2 * j;
                        od[ci * oh * ow + i * ow + j] =
                            0.25 * (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]);
                    }
                }
            }
            out
        };
        let needed = self.needs(x);
        self.push(value, Op::AvgPool2(x), needed)
    }

    pub fn bilinear_resize(&self, x: Var, oh: usize, ow: usize) -> Var {
        let value = {
            let vx = self.val(x);
            let (c, h, w) = chw(&vx);
            let mut out = Tensor::zeros(&[c, oh, ow]);
            let xd = vx.data();
            let od = out.data_mut();
            for i in 0..oh {
                let (y0, y1, wy) = lerp_coords(i, h, oh);
                for j in 0..ow {
                    let (x0, x1, wx) = lerp_coords(j, w, ow);
                    for ci in 0..c {
                        let p = ci * h * w;
                        od[ci * oh * ow + i * ow + j] = (1.0 - wy) * (1.0 - wx) * xd[p + y0 * w + x0]
                            + (1.0 - wy) * wx * xd[p + y0 * w + x1]
                            + wy * (1.0 - wx) * xd[p + y1 * w + x0]
                            + wy * wx * xd[p + y1 * w + x1];
                    }
                }
            }
            out
        };
        let needed = self.needs(x);
        self.push(value, Op::BilinearResize { x }, needed)
    }

    pub fn conv1x1(&self, x: Var, w: Var, b: Var) -> Var {
        let value = {
            let vx = self.val(x);
            let vw = self.val(w);
            let vb = self.val(b);
            let (cin, h, wd) = chw(&vx);
            let cout = vw.shape()[0];
            assert_eq!(vw.shape(), &[cout, cin]);
            assert_eq!(vb.shape(), &[cout]);
            let hw = h * wd;
            let mut out = Tensor::zeros(&[cout, h, wd]);
            mm_nn(out.data_mut(), vw.data(), vx.data(), cout, cin, hw, 0.0);
            let od = out.data_mut();
            for co in 0..cout {
                let bias = vb.data()[co];
                od[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bias);
            }
            out
        };
        let needed = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Conv1x1 { x, w, b }, needed)
    }

    pub fn concat_channels(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = xs.iter().map(|&v| self.val(v)).collect();
            let (_, h, w) = chw(&vals[0]);
            let total: usize = vals.iter().map(|v| v.shape()[0]).sum();
            let mut out = Tensor::zeros(&[total, h, w]);
            let od = out.data_mut();
            let mut off = 0;
            for v in &vals {
                let (c, vh, vw) = chw(v);
                assert_eq!((vh, vw), (h, w), "concat spatial mismatch");
                od[off..off + c * h * w].copy_from_slice(v.data());
                off += c * h * w;
            }
            out
        };
        let needed = xs.iter().any(|&v| self.needs(v));
        self.push(value, Op::ConcatChannels(xs.to_vec()), needed)
    }

    /// Mean feature vector over the pixels where `mask` is nonzero.
    /// The mask must match the map spatially and select at least one pixel.
    pub fn masked_mean(&self, x: Var, mask: &Mask) -> Var {
        let count = mask.data().iter().filter(|&&v| v != 0).count();
        assert!(count > 0, "masked_mean over empty mask");
        let value = {
            let vx = self.val(x);
            let (c, h, w) = chw(&vx);
            assert_eq!((mask.height(), mask.width()), (h, w), "mask/feature shape mismatch");
            let mut out = Tensor::zeros(&[c]);
            let xd = vx.data();
            let od = out.data_mut();
            for (p, &m) in mask.data().iter().enumerate() {
                if m != 0 {
                    for ci in 0..c {
                        od[ci] += xd[ci * h * w + p];
                    }
                }
            }
            od.iter_mut().for_each(|v| *v /= count as f64);
            out
        };
        let needed = self.needs(x);
        self.push(value, Op::MaskedMean { x, mask: mask.clone(), count }, needed)
    }

    /// Per-pixel cosine similarity between feature map `x` and vector `p`.
    /// Zero-norm vectors on either side yield similarity 0.
    pub fn cosine_map(&self, x: Var, p: Var) -> Var {
        let value = {
            let vx = self.val(x);
            let vp = self.val(p);
            let (c, h, w) = chw(&vx);
            assert_eq!(vp.shape(), &[c]);
            let mut out = Tensor::zeros(&[h, w]);
            let xd = vx.data();
            let pd = vp.data();
            let pn = norm(pd);
            let od = out.data_mut();
            for pix in 0..h * w {
                let mut dot = 0.0;
                let mut un = 0.0;
                for ci in 0..c {
                    let v = xd[ci * h * w + pix];
                    dot += v * pd[ci];
                    un += v * v;
                }
                let un = un.sqrt();
                od[pix] = if un < COSINE_EPS || pn < COSINE_EPS { 0.0 } else { dot / (un * pn) };
            }
            out
        };
        let needed = self.needs(x) || self.needs(p);
        self.push(value, Op::CosineMap { x, p }, needed)
    }

    /// Cosine similarity of `anchor` against each row of `bank` [n, C].
    /// The bank is data, not a graph node; gradients flow to the anchor only.
    pub fn cosine_bank(&self, anchor: Var, bank: Tensor) -> Var {
        assert_eq!(bank.shape().len(), 2);
        let value = {
            let va = self.val(anchor);
            let c = va.shape()[0];
            assert_eq!(bank.shape()[1], c, "bank row dim mismatch");
            let n = bank.shape()[0];
            let an = norm(va.data());
            let mut out = Tensor::zeros(&[n]);
            let od = out.data_mut();
            for (i, row) in bank.data().chunks_exact(c).enumerate() {
                let rn = norm(row);
                od[i] = if an < COSINE_EPS || rn < COSINE_EPS {
                    0.0
                } else {
                    dot(va.data(), row) / (an * rn)
                };
            }
            out
        };
        let needed = self.needs(anchor);
        self.push(value, Op::CosineBank { anchor, bank }, needed)
    }

    /// Stack [H, W] maps into [N, H, W] in argument order.
    pub fn stack_maps(&self, maps: &[Var]) -> Var {
        assert!(!maps.is_empty());
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = maps.iter().map(|&v| self.val(v)).collect();
            let hs = vals[0].shape().to_vec();
            assert_eq!(hs.len(), 2);
            let (h, w) = (hs[0], hs[1]);
            let mut out = Tensor::zeros(&[maps.len(), h, w]);
            let od = out.data_mut();
            for (i, v) in vals.iter().enumerate() {
                assert_eq!(v.shape(), &[h, w]);
                od[i * h * w..(i + 1) * h * w].copy_from_slice(v.data());
            }
            out
        };
        let needed = maps.iter().any(|&v| self.needs(v));
        self.push(value, Op::StackMaps(maps.to_vec()), needed)
    }

    /// Channelwise softmax of [N, H, W] logits at every pixel.
    pub fn softmax_channels(&self, logits: Var) -> Var {
        let value = {
            let vl = self.val(logits);
            let (n, h, w) = chw(&vl);
            let mut out = vl.clone();
            let od = out.data_mut();
            for pix in 0..h * w {
                softmax_strided(od, pix, n, h * w);
            }
            out
        };
        let needed = self.needs(logits);
        self.push(value, Op::SoftmaxChannels(logits), needed)
    }

    /// Mean per-pixel cross-entropy between channel logits [N, H, W] and a
    /// map of target channel indices.
    pub fn softmax_ce_map(&self, logits: Var, target: &Mask) -> Var {
        let value = {
            let vl = self.val(logits);
            let (n, h, w) = chw(&vl);
            assert_eq!((target.height(), target.width()), (h, w));
            let ld = vl.data();
            let hw = h * w;
            let mut total = 0.0;
            for pix in 0..hw {
                let t = target.data()[pix] as usize;
                assert!(t < n, "target channel {t} out of range {n}");
                total += logsumexp_strided(ld, pix, n, hw) - ld[t * hw + pix];
            }
            Tensor::scalar(total / hw as f64)
        };
        let needed = self.needs(logits);
        self.push(
            value,
            Op::SoftmaxCeMap { logits, target: target.data().to_vec() },
            needed,
        )
    }

    /// Cross-entropy of a 1-D logit vector against `target` index.
    pub fn cross_entropy_logits(&self, logits: Var, target: usize) -> Var {
        let value = {
            let vl = self.val(logits);
            assert_eq!(vl.shape().len(), 1);
            let n = vl.shape()[0];
            assert!(target < n);
            let ld = vl.data();
            Tensor::scalar(logsumexp_strided(ld, 0, n, 1) - ld[target])
        };
        let needed = self.needs(logits);
        self.push(value, Op::CeLogits { logits, target }, needed)
    }

    /// Scalar sum of `x` weighted elementwise by a fixed tensor.
    pub fn weighted_sum(&self, x: Var, weights: Tensor) -> Var {
        let value = {
            let vx = self.val(x);
            assert_eq!(vx.shape(), weights.shape());
            Tensor::scalar(dot(vx.data(), weights.data()))
        };
        let needed = self.needs(x);
        self.push(value, Op::WeightedSum { x, weights }, needed)
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for trainable
    /// leaves; vars that no gradient reached yield zeros on extraction.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].grad_needed {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.grad_needed {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g); // keep: this is an output of backward
                }
                Op::Add(a, b) => {
                    for &src in &[*a, *b] {
                        if nodes[src.0].grad_needed {
                            accumulate(&mut grads, src, &g, 1.0);
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if nodes[a.0].grad_needed {
                        accumulate(&mut grads, *a, &g, *c);
                    }
                }
                Op::Relu(a) => {
                    if nodes[a.0].grad_needed {
                        let mut gx = g.clone();
                        for (gv, xv) in gx.data_mut().iter_mut().zip(nodes[a.0].value.data()) {
                            if *xv <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                        add_grad(&mut grads, *a, gx);
                    }
                }
                Op::Conv3x3 { x, w, b } => {
                    conv3x3_backward(&nodes, &mut grads, *x, *w, *b, &g);
                }
                Op::AvgPool2(x) => {
                    if nodes[x.0].grad_needed {
                        let (c, oh, ow) = chw(&node.value);
                        let (h, w) = (oh * 2, ow * 2);
                        let mut gx = Tensor::zeros(&[c, h, w]);
                        let gd = g.data();
                        let gxd = gx.data_mut();
                        for ci in 0..c {
                            for i in 0..oh {
                                for j in 0..ow {
                                    let gv = 0.25 * gd[ci * oh * ow + i * ow + j];
                                    let base = ci * h * w + 2 * i * w + 2 * j;
                                    gxd[base] += gv;
                                    gxd[base + 1] += gv;
                                    gxd[base + w] += gv;
                                    gxd[base + w + 1] += gv;
                                }
                            }
                        }
                        add_grad(&mut grads, *x, gx);
                    }
                }
                Op::BilinearResize { x } => {
                    if nodes[x.0].grad_needed {
                        let (c, oh, ow) = chw(&node.value);
                        let (_, h, w) = chw(&nodes[x.0].value);
                        let mut gx = Tensor::zeros(&[c, h, w]);
                        let gd = g.data();
                        let gxd = gx.data_mut();
                        for i in 0..oh {
                            let (y0, y1, wy) = lerp_coords(i, h, oh);
                            for j in 0..ow {
                                let (x0, x1, wx) = lerp_coords(j, w, ow);
                                for ci in 0..c {
                                    let gv = gd[ci * oh * ow + i * ow + j];
                                    let p = ci * h * w;
                                    gxd[p + y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * gv;
                                    gxd[p + y0 * w + x1] += (1.0 - wy) * wx * gv;
                                    gxd[p + y1 * w + x0] += wy * (1.0 - wx) * gv;
                                    gxd[p + y1 * w + x1] += wy * wx * gv;
                                }
                            }
                        }
                        add_grad(&mut grads, *x, gx);
                    }
                }
                Op::Conv1x1 { x, w, b } => {
                    let (cin, h, wd) = chw(&nodes[x.0].value);
                    let cout = nodes[w.0].value.shape()[0];
                    let hw = h * wd;
                    if nodes[b.0].grad_needed {
                        let mut gb = Tensor::zeros(&[cout]);
                        for co in 0..cout {
                            gb.data_mut()[co] = g.data()[co * hw..(co + 1) * hw].iter().sum();
                        }
                        add_grad(&mut grads, *b, gb);
                    }
                    if nodes[w.0].grad_needed {
                        let mut gw = Tensor::zeros(&[cout, cin]);
                        mm_nt(gw.data_mut(), g.data(), nodes[x.0].value.data(), cout, hw, cin, 0.0);
                        add_grad(&mut grads, *w, gw);
                    }
                    if nodes[x.0].grad_needed {
                        let mut gx = Tensor::zeros(&[cin, h, wd]);
                        mm_tn(gx.data_mut(), nodes[w.0].value.data(), g.data(), cin, cout, hw, 0.0);
                        add_grad(&mut grads, *x, gx);
                    }
                }
                Op::ConcatChannels(xs) => {
                    let (_, h, w) = chw(&node.value);
                    let mut off = 0;
                    for &src in xs {
                        let c = nodes[src.0].value.shape()[0];
                        let span = c * h * w;
                        if nodes[src.0].grad_needed {
                            let gx = Tensor::from_vec(
                                &[c, h, w],
                                g.data()[off..off + span].to_vec(),
                            );
                            add_grad(&mut grads, src, gx);
                        }
                        off += span;
                    }
                }
                Op::MaskedMean { x, mask, count } => {
                    if nodes[x.0].grad_needed {
                        let (c, h, w) = chw(&nodes[x.0].value);
                        let mut gx = Tensor::zeros(&[c, h, w]);
                        let inv = 1.0 / *count as f64;
                        let gd = g.data();
                        let gxd = gx.data_mut();
                        for (p, &m) in mask.data().iter().enumerate() {
                            if m != 0 {
                                for ci in 0..c {
                                    gxd[ci * h * w + p] += gd[ci] * inv;
                                }
                            }
                        }
                        add_grad(&mut grads, *x, gx);
                    }
                }
                Op::CosineMap { x, p } => {
                    cosine_map_backward(&nodes, &mut grads, *x, *p, &node.value, &g);
                }
                Op::CosineBank { anchor, bank } => {
                    if nodes[anchor.0].grad_needed {
                        let a = nodes[anchor.0].value.data();
                        let c = a.len();
                        let an = norm(a);
                        let mut ga = Tensor::zeros(&[c]);
                        if an >= COSINE_EPS {
                            let gad = ga.data_mut();
                            for (i, row) in bank.data().chunks_exact(c).enumerate() {
                                let rn = norm(row);
                                if rn < COSINE_EPS {
                                    continue;
                                }
                                let cos = node.value.data()[i];
                                let gv = g.data()[i];
                                for ci in 0..c {
                                    gad[ci] +=
                                        gv * (row[ci] / (an * rn) - cos * a[ci] / (an * an));
                                }
                            }
                        }
                        add_grad(&mut grads, *anchor, ga);
                    }
                }
                Op::StackMaps(maps) => {
                    let (_, h, w) = chw(&node.value);
                    for (i, &src) in maps.iter().enumerate() {
                        if nodes[src.0].grad_needed {
                            let gx = Tensor::from_vec(
                                &[h, w],
                                g.data()[i * h * w..(i + 1) * h * w].to_vec(),
                            );
                            add_grad(&mut grads, src, gx);
                        }
                    }
                }
                Op::SoftmaxChannels(x) => {
                    if nodes[x.0].grad_needed {
                        let (n, h, w) = chw(&node.value);
                        let hw = h * w;
                        let y = node.value.data();
                        let gd = g.data();
                        let mut gx = Tensor::zeros(&[n, h, w]);
                        let gxd = gx.data_mut();
                        for pix in 0..hw {
                            let mut dot_gy = 0.0;
                            for ci in 0..n {
                                dot_gy += gd[ci * hw + pix] * y[ci * hw + pix];
                            }
                            for ci in 0..n {
                                gxd[ci * hw + pix] =
                                    y[ci * hw + pix] * (gd[ci * hw + pix] - dot_gy);
                            }
                        }
                        add_grad(&mut grads, *x, gx);
                    }
                }
                Op::SoftmaxCeMap { logits, target } => {
                    if nodes[logits.0].grad_needed {
                        let (n, h, w) = chw(&nodes[logits.0].value);
                        let hw = h * w;
                        let ld = nodes[logits.0].value.data();
                        let scale = g.item() / hw as f64;
                        let mut gx = Tensor::zeros(&[n, h, w]);
                        let gxd = gx.data_mut();
                        for pix in 0..hw {
                            let lse = logsumexp_strided(ld, pix, n, hw);
                            let t = target[pix] as usize;
                            for ci in 0..n {
                                let sm = (ld[ci * hw + pix] - lse).exp();
                                let onehot = if ci == t { 1.0 } else { 0.0 };
                                gxd[ci * hw + pix] = scale * (sm - onehot);
                            }
                        }
                        add_grad(&mut grads, *logits, gx);
                    }
                }
                Op::CeLogits { logits, target } => {
                    if nodes[logits.0].grad_needed {
                        let ld = nodes[logits.0].value.data();
                        let n = ld.len();
                        let lse = logsumexp_strided(ld, 0, n, 1);
                        let scale = g.item();
                        let mut gx = Tensor::zeros(&[n]);
                        for ci in 0..n {
                            let sm = (ld[ci] - lse).exp();
                            let onehot = if ci == *target { 1.0 } else { 0.0 };
                            gx.data_mut()[ci] = scale * (sm - onehot);
                        }
                        add_grad(&mut grads, *logits, gx);
                    }
                }
                Op::WeightedSum { x, weights } => {
                    if nodes[x.0].grad_needed {
                        let mut gx = weights.clone();
                        gx.scale_in_place(g.item());
                        add_grad(&mut grads, *x, gx);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn chw(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected [C,H,W] tensor, got {:?}", s);
    (s[0], s[1], s[2])
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Source interpolation coordinates for output index `o` when resizing a
/// length-`inn` axis to length `out` (half-pixel-center convention).
fn lerp_coords(o: usize, inn: usize, out: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) * inn as f64 / out as f64 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(inn - 1);
    let i1 = (i0 + 1).min(inn - 1);
    (i0, i1, s - i0 as f64)
}

fn softmax_strided(data: &mut [f64], offset: usize, n: usize, stride: usize) {
    let mut max = f64::NEG_INFINITY;
    for i in 0..n {
        max = max.max(data[i * stride + offset]);
    }
    let mut sum = 0.0;
    for i in 0..n {
        let e = (data[i * stride + offset] - max).exp();
        data[i * stride + offset] = e;
        sum += e;
    }
    for i in 0..n {
        data[i * stride + offset] /= sum;
    }
}

fn logsumexp_strided(data: &[f64], offset: usize, n: usize, stride: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for i in 0..n {
        max = max.max(data[i * stride + offset]);
    }
    let mut sum = 0.0;
    for i in 0..n {
        sum += (data[i * stride + offset] - max).exp();
    }
    max + sum.ln()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &Tensor, c: f64) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_scaled(g, c),
        slot => {
            let mut t = g.clone();
            if c != 1.0 {
                t.scale_in_place(c);
            }
            *slot = Some(t);
        }
    }
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_scaled(&g, 1.0),
        slot => *slot = Some(g),
    }
}

/// Zero-padded patch matrix for 3x3 convolution: [Cin*9, H*W].
fn im2col(x: &Tensor) -> Vec<f64> {
    let (c, h, w) = chw(x);
    let hw = h * w;
    let xd = x.data();
    let mut cols = vec![0.0; c * 9 * hw];
    for ci in 0..c {
        for (k, (dy, dx)) in (0..9).map(|k| (k / 3, k % 3)).enumerate() {
            let row = &mut cols[(ci * 9 + k) * hw..(ci * 9 + k + 1) * hw];
            for y in 0..h {
                let sy = y as isize + dy as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let sy = sy as usize;
                for x_ in 0..w {
                    let sx = x_ as isize + dx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    row[y * w + x_] = xd[ci * hw + sy * w + sx as usize];
                }
            }
        }
    }
    cols
}

fn conv3x3_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (cin, h, wd) = chw(x);
    let ws = w.shape();
    assert_eq!(ws.len(), 4);
    assert_eq!(&ws[1..], &[cin, 3, 3], "kernel shape {:?} vs input {cin} channels", ws);
    let cout = ws[0];
    assert_eq!(b.shape(), &[cout]);
    let hw = h * wd;
    let cols = im2col(x);
    let mut out = Tensor::zeros(&[cout, h, wd]);
    mm_nn(out.data_mut(), w.data(), &cols, cout, cin * 9, hw, 0.0);
    let od = out.data_mut();
    for co in 0..cout {
        let bias = b.data()[co];
        od[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bias);
    }
    out
}

fn conv3x3_backward(nodes: &[Node], grads: &mut [Option<Tensor>], x: Var, w: Var, b: Var, g: &Tensor) {
    let xv = &nodes[x.0].value;
    let wv = &nodes[w.0].value;
    let (cin, h, wd) = chw(xv);
    let cout = wv.shape()[0];
    let hw = h * wd;
    let k = cin * 9;

    if nodes[b.0].grad_needed {
        let mut gb = Tensor::zeros(&[cout]);
        for co in 0..cout {
            gb.data_mut()[co] = g.data()[co * hw..(co + 1) * hw].iter().sum();
        }
        add_grad(grads, b, gb);
    }
    if nodes[w.0].grad_needed {
        let cols = im2col(xv);
        let mut gw = Tensor::zeros(&[cout, cin, 3, 3]);
        mm_nt(gw.data_mut(), g.data(), &cols, cout, hw, k, 0.0);
        add_grad(grads, w, gw);
    }
    if nodes[x.0].grad_needed {
        let mut gcols = vec![0.0; k * hw];
        mm_tn(&mut gcols, wv.data(), g.data(), k, cout, hw, 0.0);
        // col2im: scatter-add patches back to input positions
        let mut gx = Tensor::zeros(&[cin, h, wd]);
        let gxd = gx.data_mut();
        for ci in 0..cin {
            for kk in 0..9 {
                let (dy, dx) = (kk / 3, kk % 3);
                let row = &gcols[(ci * 9 + kk) * hw..(ci * 9 + kk + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for x_ in 0..wd {
                        let sx = x_ as isize + dx as isize - 1;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        gxd[ci * hw + sy * wd + sx as usize] += row[y * wd + x_];
                    }
                }
            }
        }
        add_grad(grads, x, gx);
    }
}

fn cosine_map_backward(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    x: Var,
    p: Var,
    cos_out: &Tensor,
    g: &Tensor,
) {
    let xv = &nodes[x.0].value;
    let pv = &nodes[p.0].value;
    let (c, h, w) = chw(xv);
    let hw = h * w;
    let xd = xv.data();
    let pd = pv.data();
    let pn = norm(pd);
    let need_x = nodes[x.0].grad_needed;
    let need_p = nodes[p.0].grad_needed;
    let mut gx = if need_x { Some(Tensor::zeros(&[c, h, w])) } else { None };
    let mut gp = if need_p { Some(Tensor::zeros(&[c])) } else { None };

    if pn >= COSINE_EPS {
        for pix in 0..hw {
            let mut un2 = 0.0;
            for ci in 0..c {
                let v = xd[ci * hw + pix];
                un2 += v * v;
            }
            let un = un2.sqrt();
            if un < COSINE_EPS {
                continue;
            }
            let cos = cos_out.data()[pix];
            let gv = g.data()[pix];
            if gv == 0.0 {
                continue;
            }
            if let Some(gx) = gx.as_mut() {
                let gxd = gx.data_mut();
                for ci in 0..c {
                    let u = xd[ci * hw + pix];
                    gxd[ci * hw + pix] += gv * (pd[ci] / (un * pn) - cos * u / un2);
                }
            }
            if let Some(gp) = gp.as_mut() {
                let gpd = gp.data_mut();
                for ci in 0..c {
                    let u = xd[ci * hw + pix];
                    gpd[ci] += gv * (u / (un * pn) - cos * pd[ci] / (pn * pn));
                }
            }
        }
    }
    if let Some(gx) = gx {
        add_grad(grads, x, gx);
    }
    if let Some(gp) = gp {
        add_grad(grads, p, gp);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(scalar)/d(inputs[i]) against backward.
    fn fd_check(build: impl Fn(&Graph, &[Var]) -> Var, inputs: &[Tensor], tol: f64) {
        let eval = |tensors: &[Tensor]| -> f64 {
            let g = Graph::new();
            let vars: Vec<Var> = tensors.iter().map(|t| g.var(t.clone())).collect();
            let out = build(&g, &vars);
            g.value(out).item()
        };

        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.var(t.clone())).collect();
        let out = build(&g, &vars);
        let mut grads = g.backward(out);

        let step = 1e-5;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.take_or_zeros(vars[i], t.shape());
            for e in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[e] += step;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[e] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let a = analytic.data()[e];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "input {i} entry {e}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn fd_add_scale_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_tensor(&mut rng, &[2, 3, 3]);
        let b = random_tensor(&mut rng, &[2, 3, 3]);
        let w = random_tensor(&mut rng, &[2, 3, 3]);
        fd_check(
            |g, vars| {
                let s = g.add(vars[0], g.scale(vars[1], 0.7));
                let r = g.relu(s);
                g.weighted_sum(r, g.value(vars[2]))
            },
            &[a, b, w],
            1e-4,
        );
    }

    #[test]
    fn fd_conv3x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, &[2, 4, 4]);
        let w = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = random_tensor(&mut rng, &[3]);
        let wts = random_tensor(&mut rng, &[3, 4, 4]);
        fd_check(
            |g, vars| {
                let y = g.conv3x3(vars[0], vars[1], vars[2]);
                g.weighted_sum(y, wts.clone())
            },
            &[x, w, b],
            1e-4,
        );
    }

    #[test]
    fn conv3x3_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_tensor(&mut rng, &[3, 5, 6]);
        let w = random_tensor(&mut rng, &[4, 3, 3, 3]);
        let b = random_tensor(&mut rng, &[4]);
        let got = conv3x3_forward(&x, &w, &b);
        // oracle: direct quadruple loop with zero padding
        for co in 0..4 {
            for y in 0..5usize {
                for xq in 0..6usize {
                    let mut acc = b.data()[co];
                    for ci in 0..3 {
                        for dy in 0..3usize {
                            for dx in 0..3usize {
                                let sy = y as isize + dy as isize - 1;
                                let sx = xq as isize + dx as isize - 1;
                                if sy < 0 || sy >= 5 || sx < 0 || sx >= 6 {
                                    continue;
                                }
                                acc += x.data()[ci * 30 + sy as usize * 6 + sx as usize]
                                    * w.data()[co * 27 + ci * 9 + dy * 3 + dx];
                            }
                        }
                    }
                    let gv = got.data()[co * 30 + y * 6 + xq];
                    assert!((gv - acc).abs() < 1e-12, "({co},{y},{xq}): {gv} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn fd_pool_resize_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random_tensor(&mut rng, &[2, 4, 4]);
        let y = random_tensor(&mut rng, &[1, 2, 2]);
        let wts = random_tensor(&mut rng, &[3, 4, 4]);
        fd_check(
            |g, vars| {
                let pooled = g.avg_pool2(vars[0]); // [2,2,2]
                let up = g.bilinear_resize(pooled, 4, 4);
                let up2 = g.bilinear_resize(vars[1], 4, 4);
                let cat = g.concat_channels(&[up, up2]);
                g.weighted_sum(cat, wts.clone())
            },
            &[x, y],
            1e-4,
        );
    }

    #[test]
    fn fd_conv1x1_masked_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = random_tensor(&mut rng, &[3, 4, 4]);
        let w = random_tensor(&mut rng, &[2, 3]);
        let b = random_tensor(&mut rng, &[2]);
        let mask = Mask::from_vec(4, 4, (0..16).map(|i| u16::from(i % 3 == 0)).collect());
        let wts = random_tensor(&mut rng, &[2]);
        fd_check(
            |g, vars| {
                let y = g.conv1x1(vars[0], vars[1], vars[2]);
                let m = g.masked_mean(y, &mask);
                g.weighted_sum(m, wts.clone())
            },
            &[x, w, b],
            1e-4,
        );
    }

    #[test]
    fn fd_cosine_map_and_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random_tensor(&mut rng, &[3, 3, 3]);
        let p1 = random_tensor(&mut rng, &[3]);
        let p2 = random_tensor(&mut rng, &[3]);
        let target = Mask::from_vec(3, 3, vec![0, 1, 0, 1, 0, 1, 0, 0, 1]);
        fd_check(
            |g, vars| {
                let m1 = g.cosine_map(vars[0], vars[1]);
                let m2 = g.cosine_map(vars[0], vars[2]);
                let logits = g.scale(g.stack_maps(&[m1, m2]), 20.0);
                g.softmax_ce_map(logits, &target)
            },
            &[x, p1, p2],
            1e-3,
        );
    }

    #[test]
    fn fd_cosine_bank_info_nce_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let anchor = random_tensor(&mut rng, &[4]);
        let bank = random_tensor(&mut rng, &[5, 4]);
        fd_check(
            |g, vars| {
                let cs = g.cosine_bank(vars[0], bank.clone());
                let logits = g.scale(cs, 1.0 / 0.05);
                g.cross_entropy_logits(logits, 0)
            },
            &[anchor],
            1e-3,
        );
    }

    #[test]
    fn fd_softmax_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = random_tensor(&mut rng, &[3, 2, 2]);
        let wts = random_tensor(&mut rng, &[3, 2, 2]);
        fd_check(
            |g, vars| {
                let y = g.softmax_channels(vars[0]);
                g.weighted_sum(y, wts.clone())
            },
            &[x],
            1e-4,
        );
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let g = Graph::new();
        let x = g.var(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
        let c = g.constant(Tensor::scalar(5.0));
        let mut grads = g.backward(c);
        let gx = grads.take_or_zeros(x, &[3]);
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_loss_has_unit_gradients() {
        let g = Graph::new();
        let x = g.var(Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5]));
        let loss = g.weighted_sum(x, Tensor::full(&[4], 1.0));
        let mut grads = g.backward(loss);
        let gx = grads.take_or_zeros(x, &[4]);
        assert!(gx.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn constants_block_gradient_flow() {
        let g = Graph::new();
        let x = g.var(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let frozen = g.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let sum = g.add(x, frozen);
        let loss = g.weighted_sum(sum, Tensor::full(&[2], 1.0));
        let grads = g.backward(loss);
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn softmax_channels_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let g = Graph::new();
        let x = g.constant(random_tensor(&mut rng, &[5, 4, 4]));
        let y = g.value(g.softmax_channels(x));
        for pix in 0..16 {
            let s: f64 = (0..5).map(|c| y.data()[c * 16 + pix]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_zero_norm_is_neutral() {
        let g = Graph::new();
        let x = g.var(Tensor::zeros(&[3, 2, 2]));
        let p = g.var(Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]));
        let m = g.cosine_map(x, p);
        assert!(g.value(m).data().iter().all(|&v| v == 0.0));
        let loss = g.weighted_sum(m, Tensor::full(&[2, 2], 1.0));
        let mut grads = g.backward(loss);
        let gx = grads.take_or_zeros(x, &[3, 2, 2]);
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }
}
