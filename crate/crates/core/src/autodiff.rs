//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Each training step builds a fresh [`Tape`]; operations append nodes and
//! return [`Var`] handles. `backward` walks the tape in reverse, accumulating
//! gradients only along paths that reach a gradient-requiring leaf, so frozen
//! networks (a frozen detector under DTM training, a distillation teacher)
//! cost nothing extra and provably receive no gradient.
//!
//! The op set is deliberately small and fused where detection losses need it;
//! every backward formula is validated against central finite differences in
//! the test suites.

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Binary domain-classification loss flavour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DomainLossKind {
    CrossEntropy,
    /// Focal modulation `(1 - p_t)^gamma` on top of cross-entropy.
    Focal { gamma: f64 },
}

impl DomainLossKind {
    fn gamma(self) -> f64 {
        match self {
            DomainLossKind::CrossEntropy => 0.0,
            DomainLossKind::Focal { gamma } => gamma,
        }
    }
}

enum Op {
    Leaf,
    Relu {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Grl {
        x: Var,
        lambda: f64,
    },
    GlobalAvgPool {
        x: Var,
    },
    /// Bilinear crop-resize of a CHW map over a fixed box; taps are shared
    /// across channels. Output is the flattened (C, s, s) crop.
    RoiBilinear {
        z: Var,
        taps: Vec<[(usize, usize, f64); 4]>,
        channels: usize,
    },
    GatherFlat {
        x: Var,
        idxs: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        terms: Vec<(f64, Var)>,
    },
    BceWithLogitsMean {
        x: Var,
        targets: Vec<f64>,
    },
    SmoothL1Sum {
        x: Var,
        target: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        x: Var,
        target: usize,
    },
    DomainLoss {
        x: Var,
        d: u8,
        gamma: f64,
    },
    MeanSq {
        x: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

/// Probabilities inside domain losses are clamped to this range before `ln`.
pub const DOMAIN_PROB_CLAMP: f64 = 1e-7;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any was
    /// accumulated. Leaves created with `requires_grad = false` always
    /// report `None`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(value, needs, Op::Relu { x })
    }

    /// 2-D convolution over a CHW input with an OIHW weight tensor.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        assert_eq!(xs.len(), 3, "conv2d input must be CHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be OIHW, got {ws:?}");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch: {xs:?} vs {ws:?}");
        let (h, wd) = (xs[1], xs[2]);
        let (kh, kw) = (ws[2], ws[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[ws[0], oh, ow]);
        conv2d_forward(
            out.data_mut(),
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b).data().to_vec()).as_deref(),
            stride,
            pad,
            oh,
            ow,
        );
        let needs =
            self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            out,
            needs,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Fully-connected layer: `y = W x (+ b)` with `W` of shape (out, in).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        assert_eq!(xs.len(), 1, "linear input must be a vector");
        assert_eq!(ws.len(), 2, "linear weight must be (out, in)");
        assert_eq!(ws[1], xs[0], "linear dims: {ws:?} vs {xs:?}");
        let (m, n) = (ws[0], ws[1]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; m];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wv[i * n..(i + 1) * n];
            *o = row.iter().zip(xv).map(|(a, b)| a * b).sum();
        }
        if let Some(b) = b {
            for (o, bv) in out.iter_mut().zip(self.value(b).data()) {
                *o += bv;
            }
        }
        let needs =
            self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        self.push(Tensor::from_vec(&[m], out), needs, Op::Linear { x, w, b })
    }

    /// Gradient reversal: identity forward, gradient scaled by `-lambda`
    /// backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        let needs = self.needs(x);
        self.push(value, needs, Op::Grl { x, lambda })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape();
        assert_eq!(xs.len(), 3, "global_avg_pool input must be CHW");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let area = (h * w) as f64;
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..c)
            .map(|ci| xv[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / area)
            .collect();
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[c], out), needs, Op::GlobalAvgPool { x })
    }

    /// Bilinear crop-resize of the CHW map `z` over `(x, y, w, h)` given in
    /// input-image pixels, to an `out_size` x `out_size` grid, flattened
    /// as (C, out, out). `stride` is the feature-map stride in pixels.
    pub fn roi_bilinear(
        &mut self,
        z: Var,
        bx: [f64; 4],
        out_size: usize,
        stride: f64,
    ) -> Var {
        let zs = self.value(z).shape();
        assert_eq!(zs.len(), 3);
        let (c, fh, fw) = (zs[0], zs[1], zs[2]);
        let [x0, y0, bw, bh] = bx;
        let mut taps = Vec::with_capacity(out_size * out_size);
        for u in 0..out_size {
            for v in 0..out_size {
                let sx = (x0 + (v as f64 + 0.5) * bw / out_size as f64) / stride - 0.5;
                let sy = (y0 + (u as f64 + 0.5) * bh / out_size as f64) / stride - 0.5;
                taps.push(bilinear_taps(sy, sx, fh, fw));
            }
        }
        let zv = self.value(z);
        let mut out = vec![0.0; c * out_size * out_size];
        for ci in 0..c {
            for (cell, tap) in taps.iter().enumerate() {
                let mut acc = 0.0;
                for &(iy, ix, wgt) in tap {
                    acc += wgt * zv.at3(ci, iy, ix);
                }
                out[ci * out_size * out_size + cell] = acc;
            }
        }
        let needs = self.needs(z);
        self.push(
            Tensor::from_vec(&[c * out_size * out_size], out),
            needs,
            Op::RoiBilinear { z, taps, channels: c },
        )
    }

    /// Gather flat indices of `x` into a vector. Indices may repeat.
    pub fn gather_flat(&mut self, x: Var, idxs: Vec<usize>) -> Var {
        let xv = self.value(x).data();
        let out: Vec<f64> = idxs.iter().map(|&i| xv[i]).collect();
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(&[idxs.len()], out),
            needs,
            Op::GatherFlat { x, idxs },
        )
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), needs, Op::Sum { x })
    }

    /// Weighted sum of scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc = 0.0;
        for &(w, v) in terms {
            acc += w * self.scalar_value(v);
        }
        let needs = terms.iter().any(|&(_, v)| self.needs(v));
        self.push(
            Tensor::scalar(acc),
            needs,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        )
    }

    /// Mean binary cross-entropy with logits (numerically stable log-sum-exp
    /// form). `targets` are in [0, 1].
    pub fn bce_with_logits_mean(&mut self, x: Var, targets: Vec<f64>) -> Var {
        let xv = self.value(x).data();
        assert_eq!(xv.len(), targets.len());
        assert!(!targets.is_empty(), "bce over empty set");
        let loss = xv
            .iter()
            .zip(&targets)
            .map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
            .sum::<f64>()
            / targets.len() as f64;
        let needs = self.needs(x);
        self.push(
            Tensor::scalar(loss),
            needs,
            Op::BceWithLogitsMean { x, targets },
        )
    }

    /// Smooth-L1 (Huber, transition point 1.0) summed over elements.
    pub fn smooth_l1_sum(&mut self, x: Var, target: Vec<f64>) -> Var {
        let xv = self.value(x).data();
        assert_eq!(xv.len(), target.len());
        let loss = xv
            .iter()
            .zip(&target)
            .map(|(&p, &t)| {
                let d = (p - t).abs();
                if d < 1.0 {
                    0.5 * d * d
                } else {
                    d - 0.5
                }
            })
            .sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(loss), needs, Op::SmoothL1Sum { x, target })
    }

    /// Softmax cross-entropy of a logit vector against one target index.
    pub fn softmax_cross_entropy(&mut self, x: Var, target: usize) -> Var {
        let xv = self.value(x).data();
        assert!(target < xv.len());
        let m = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + xv.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - xv[target];
        let needs = self.needs(x);
        self.push(
            Tensor::scalar(loss),
            needs,
            Op::SoftmaxCrossEntropy { x, target },
        )
    }

    /// Binary domain loss on a single logit (length-1 tensor): cross-entropy
    /// with the sigmoid probability clamped to `[1e-7, 1 - 1e-7]`, optionally
    /// focal-modulated by `(1 - p_t)^gamma`.
    pub fn domain_loss(&mut self, x: Var, d: u8, kind: DomainLossKind) -> Var {
        assert_eq!(self.value(x).len(), 1, "domain loss expects one logit");
        let logit = self.value(x).data()[0];
        let loss = domain_loss_value(logit, d, kind.gamma());
        let needs = self.needs(x);
        self.push(
            Tensor::scalar(loss),
            needs,
            Op::DomainLoss {
                x,
                d,
                gamma: kind.gamma(),
            },
        )
    }

    /// Mean squared difference against a constant target.
    pub fn mean_sq(&mut self, x: Var, target: Vec<f64>) -> Var {
        let xv = self.value(x).data();
        assert_eq!(xv.len(), target.len());
        assert!(!target.is_empty());
        let loss = xv
            .iter()
            .zip(&target)
            .map(|(&a, &t)| (a - t) * (a - t))
            .sum::<f64>()
            / target.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(loss), needs, Op::MeanSq { x, target })
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward target must be scalar");
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].needs_grad {
            return;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            // Take the node's grad to satisfy the borrow checker; ops never
            // feed gradient back into their own output.
            let g = self.nodes[i].grad.take().unwrap();
            self.step_backward(i, &g);
            self.nodes[i].grad = Some(g);
        }
    }

    fn accumulate(&mut self, v: Var, update: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        if self.nodes[v.0].grad.is_none() {
            let shape = self.nodes[v.0].value.shape().to_vec();
            self.nodes[v.0].grad = Some(Tensor::zeros(&shape));
        }
        update(self.nodes[v.0].grad.as_mut().unwrap());
    }

    fn step_backward(&mut self, i: usize, g: &Tensor) {
        // Move the op out so `accumulate` can borrow `self` mutably; no op
        // lists its own output among its inputs.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Relu { x } => {
                let x = *x;
                let xv: Vec<f64> = self.nodes[x.0].value.data().to_vec();
                self.accumulate(x, |gx| {
                    for ((gx, &xv), &gv) in gx.data_mut().iter_mut().zip(&xv).zip(g.data()) {
                        if xv > 0.0 {
                            *gx += gv;
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let (oh, ow) = {
                    let os = self.nodes[i].value.shape();
                    (os[1], os[2])
                };
                if self.needs(x) {
                    let mut gx = Tensor::zeros(self.nodes[x.0].value.shape());
                    conv2d_backward_input(
                        gx.data_mut(),
                        self.nodes[x.0].value.shape(),
                        &self.nodes[w.0].value,
                        g,
                        stride,
                        pad,
                        oh,
                        ow,
                    );
                    self.accumulate(x, |acc| add_assign(acc, &gx));
                }
                if self.needs(w) {
                    let mut gw = Tensor::zeros(self.nodes[w.0].value.shape());
                    conv2d_backward_weight(
                        gw.data_mut(),
                        &self.nodes[x.0].value,
                        self.nodes[w.0].value.shape(),
                        g,
                        stride,
                        pad,
                        oh,
                        ow,
                    );
                    self.accumulate(w, |acc| add_assign(acc, &gw));
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let co = g.shape()[0];
                        let plane = oh * ow;
                        let mut gb = vec![0.0; co];
                        for (c, gb) in gb.iter_mut().enumerate() {
                            *gb = g.data()[c * plane..(c + 1) * plane].iter().sum();
                        }
                        self.accumulate(b, |acc| {
                            for (a, v) in acc.data_mut().iter_mut().zip(&gb) {
                                *a += v;
                            }
                        });
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (m, n) = {
                    let ws = self.nodes[w.0].value.shape();
                    (ws[0], ws[1])
                };
                if self.needs(x) {
                    let wv = self.nodes[w.0].value.data().to_vec();
                    let gv = g.data().to_vec();
                    self.accumulate(x, |gx| {
                        let gxd = gx.data_mut();
                        for i in 0..m {
                            let gi = gv[i];
                            if gi == 0.0 {
                                continue;
                            }
                            let row = &wv[i * n..(i + 1) * n];
                            for (gx, &wv) in gxd.iter_mut().zip(row) {
                                *gx += gi * wv;
                            }
                        }
                    });
                }
                if self.needs(w) {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let gv = g.data().to_vec();
                    self.accumulate(w, |gw| {
                        let gwd = gw.data_mut();
                        for i in 0..m {
                            let gi = gv[i];
                            if gi == 0.0 {
                                continue;
                            }
                            for (j, &xv) in xv.iter().enumerate() {
                                gwd[i * n + j] += gi * xv;
                            }
                        }
                    });
                }
                if let Some(b) = b {
                    self.accumulate(b, |gb| add_assign(gb, g));
                }
            }
            Op::Grl { x, lambda } => {
                let (x, lambda) = (*x, *lambda);
                self.accumulate(x, |gx| {
                    for (a, &gv) in gx.data_mut().iter_mut().zip(g.data()) {
                        *a -= lambda * gv;
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let x = *x;
                let xs = self.nodes[x.0].value.shape().to_vec();
                let area = (xs[1] * xs[2]) as f64;
                let gv = g.data().to_vec();
                self.accumulate(x, |gx| {
                    let plane = xs[1] * xs[2];
                    for (c, &gc) in gv.iter().enumerate() {
                        for v in &mut gx.data_mut()[c * plane..(c + 1) * plane] {
                            *v += gc / area;
                        }
                    }
                });
            }
            Op::RoiBilinear { z, taps, channels } => {
                let z = *z;
                let c = *channels;
                let taps = taps.clone();
                let gv = g.data().to_vec();
                let (fh, fw) = {
                    let zs = self.nodes[z.0].value.shape();
                    (zs[1], zs[2])
                };
                self.accumulate(z, |gz| {
                    let cells = taps.len();
                    let gzd = gz.data_mut();
                    for ci in 0..c {
                        for (cell, tap) in taps.iter().enumerate() {
                            let go = gv[ci * cells + cell];
                            if go == 0.0 {
                                continue;
                            }
                            for &(iy, ix, wgt) in tap {
                                gzd[(ci * fh + iy) * fw + ix] += wgt * go;
                            }
                        }
                    }
                });
            }
            Op::GatherFlat { x, idxs } => {
                let x = *x;
                let idxs = idxs.clone();
                let gv = g.data().to_vec();
                self.accumulate(x, |gx| {
                    for (&idx, &gv) in idxs.iter().zip(&gv) {
                        gx.data_mut()[idx] += gv;
                    }
                });
            }
            Op::Sum { x } => {
                let x = *x;
                let gs = g.item();
                self.accumulate(x, |gx| {
                    for v in gx.data_mut() {
                        *v += gs;
                    }
                });
            }
            Op::WeightedSum { terms } => {
                let terms = terms.clone();
                let gs = g.item();
                for (w, v) in terms {
                    self.accumulate(v, |gv| {
                        gv.data_mut()[0] += w * gs;
                    });
                }
            }
            Op::BceWithLogitsMean { x, targets } => {
                let x = *x;
                let targets = targets.clone();
                let n = targets.len() as f64;
                let xv = self.nodes[x.0].value.data().to_vec();
                let gs = g.item();
                self.accumulate(x, |gx| {
                    for ((a, &l), &t) in gx.data_mut().iter_mut().zip(&xv).zip(&targets) {
                        let p = sigmoid(l);
                        *a += gs * (p - t) / n;
                    }
                });
            }
            Op::SmoothL1Sum { x, target } => {
                let x = *x;
                let target = target.clone();
                let xv = self.nodes[x.0].value.data().to_vec();
                let gs = g.item();
                self.accumulate(x, |gx| {
                    for ((a, &p), &t) in gx.data_mut().iter_mut().zip(&xv).zip(&target) {
                        *a += gs * (p - t).clamp(-1.0, 1.0);
                    }
                });
            }
            Op::SoftmaxCrossEntropy { x, target } => {
                let x = *x;
                let target = *target;
                let xv = self.nodes[x.0].value.data().to_vec();
                let m = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = xv.iter().map(|&v| (v - m).exp()).sum();
                let gs = g.item();
                self.accumulate(x, |gx| {
                    for (j, (a, &v)) in gx.data_mut().iter_mut().zip(&xv).enumerate() {
                        let p = (v - m).exp() / denom;
                        let onehot = if j == target { 1.0 } else { 0.0 };
                        *a += gs * (p - onehot);
                    }
                });
            }
            Op::DomainLoss { x, d, gamma } => {
                let (x, d, gamma) = (*x, *d, *gamma);
                let logit = self.nodes[x.0].value.data()[0];
                let dl = domain_loss_dlogit(logit, d, gamma);
                let gs = g.item();
                self.accumulate(x, |gx| {
                    gx.data_mut()[0] += gs * dl;
                });
            }
            Op::MeanSq { x, target } => {
                let x = *x;
                let target = target.clone();
                let n = target.len() as f64;
                let xv = self.nodes[x.0].value.data().to_vec();
                let gs = g.item();
                self.accumulate(x, |gx| {
                    for ((a, &p), &t) in gx.data_mut().iter_mut().zip(&xv).zip(&target) {
                        *a += gs * 2.0 * (p - t) / n;
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_assign(acc: &mut Tensor, delta: &Tensor) {
    for (a, &d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(DOMAIN_PROB_CLAMP, 1.0 - DOMAIN_PROB_CLAMP)
}

/// Value of the (optionally focal) binary domain loss for a raw logit.
pub fn domain_loss_value(logit: f64, d: u8, gamma: f64) -> f64 {
    let p_t = clamp_prob(if d == 1 {
        sigmoid(logit)
    } else {
        sigmoid(-logit)
    });
    let ce = -p_t.ln();
    if gamma == 0.0 {
        ce
    } else {
        (1.0 - p_t).powf(gamma) * ce
    }
}

fn domain_loss_dlogit(logit: f64, d: u8, gamma: f64) -> f64 {
    // By symmetry the d = 0 case is the d = 1 case at -logit, negated.
    if d == 0 {
        return -domain_loss_dlogit(-logit, 1, gamma);
    }
    let p_raw = sigmoid(logit);
    let p = clamp_prob(p_raw);
    if p != p_raw {
        return 0.0; // clamped region: flat
    }
    if gamma == 0.0 {
        return p - 1.0;
    }
    // L = (1-p)^g * (-ln p); dL/dp = g (1-p)^(g-1) ln p - (1-p)^g / p
    let dl_dp = gamma * (1.0 - p).powf(gamma - 1.0) * p.ln() - (1.0 - p).powf(gamma) / p;
    dl_dp * p * (1.0 - p)
}

fn bilinear_taps(sy: f64, sx: f64, fh: usize, fw: usize) -> [(usize, usize, f64); 4] {
    let cy = sy.clamp(0.0, (fh - 1) as f64);
    let cx = sx.clamp(0.0, (fw - 1) as f64);
    let y0 = cy.floor() as usize;
    let x0 = cx.floor() as usize;
    let y1 = (y0 + 1).min(fh - 1);
    let x1 = (x0 + 1).min(fw - 1);
    let fy = cy - y0 as f64;
    let fx = cx - x0 as f64;
    [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ]
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    out: &mut [f64],
    x: &Tensor,
    w: &Tensor,
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (ci_n, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co_n, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let xd = x.data();
    let wv = w.data();
    if let Some(b) = b {
        for co in 0..co_n {
            out[co * oh * ow..(co + 1) * oh * ow].fill(b[co]);
        }
    }
    for co in 0..co_n {
        for ci in 0..ci_n {
            let wbase = ((co * ci_n) + ci) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = wv[wbase + ky * kw + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    // Valid output ranges so that iy, ix stay in bounds.
                    let (oy_lo, oy_hi) = valid_range(oh, h, stride, pad, ky);
                    let (ox_lo, ox_hi) = valid_range(ow, wd, stride, pad, kx);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let xrow = &xd[(ci * h + iy) * wd..(ci * h + iy + 1) * wd];
                        let orow = &mut out[(co * oh + oy) * ow..(co * oh + oy + 1) * ow];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - pad;
                            orow[ox] += wgt * xrow[ix];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    gx: &mut [f64],
    xs: &[usize],
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (ci_n, h, wd) = (xs[0], xs[1], xs[2]);
    let (co_n, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let wv = w.data();
    let gd = g.data();
    for co in 0..co_n {
        for ci in 0..ci_n {
            let wbase = ((co * ci_n) + ci) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = wv[wbase + ky * kw + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (oy_lo, oy_hi) = valid_range(oh, h, stride, pad, ky);
                    let (ox_lo, ox_hi) = valid_range(ow, wd, stride, pad, kx);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let grow = &gd[(co * oh + oy) * ow..(co * oh + oy + 1) * ow];
                        let xrow = &mut gx[(ci * h + iy) * wd..(ci * h + iy + 1) * wd];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - pad;
                            xrow[ix] += wgt * grow[ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight(
    gw: &mut [f64],
    x: &Tensor,
    ws: &[usize],
    g: &Tensor,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (ci_n, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co_n, kh, kw) = (ws[0], ws[2], ws[3]);
    let xd = x.data();
    let gd = g.data();
    for co in 0..co_n {
        for ci in 0..ci_n {
            let wbase = ((co * ci_n) + ci) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let (oy_lo, oy_hi) = valid_range(oh, h, stride, pad, ky);
                    let (ox_lo, ox_hi) = valid_range(ow, wd, stride, pad, kx);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let grow = &gd[(co * oh + oy) * ow..(co * oh + oy + 1) * ow];
                        let xrow = &xd[(ci * h + iy) * wd..(ci * h + iy + 1) * wd];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - pad;
                            acc += grow[ox] * xrow[ix];
                        }
                    }
                    gw[wbase + ky * kw + kx] += acc;
                }
            }
        }
    }
}

/// Output index range `[lo, hi)` for which `o*stride + k - pad` lands inside
/// `[0, extent)`.
fn valid_range(o_extent: usize, extent: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // o*stride + k - pad <= extent - 1  =>  o <= (extent - 1 + pad - k) / stride
    let hi = if extent + pad > k {
        (((extent + pad - k - 1) / stride) + 1).min(o_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of a scalar-valued rebuildable graph with
    /// respect to one coordinate of one input tensor.
    fn central_diff(f: impl Fn(&[Tensor]) -> f64, inputs: &[Tensor], t: usize, i: usize) -> f64 {
        let eps = 1e-5;
        let mut plus = inputs.to_vec();
        plus[t].data_mut()[i] += eps;
        let mut minus = inputs.to_vec();
        minus[t].data_mut()[i] -= eps;
        (f(&plus) - f(&minus)) / (2.0 * eps)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Check every coordinate of every input against finite differences.
    fn check_grads(build: impl Fn(&mut Tape, &[Var]) -> Var, inputs: Vec<Tensor>) {
        let f = |ts: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let loss = build(&mut tape, &vars);
            tape.scalar_value(loss)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss);
        for (t, var) in vars.iter().enumerate() {
            let grad = tape.grad(*var).expect("missing grad").clone();
            for i in 0..inputs[t].len() {
                let fd = central_diff(f, &inputs, t, i);
                let an = grad.data()[i];
                assert!(
                    rel_err(an, fd) < 1e-4 || (an.abs() < 1e-10 && fd.abs() < 1e-7),
                    "input {t} coord {i}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 6, 6], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let b = Tensor::randn(&[3], 0.5, &mut r);
        for stride in [1, 2] {
            check_grads(
                move |tape, vs| {
                    let y = tape.conv2d(vs[0], vs[1], Some(vs[2]), stride, 1);
                    let y = tape.relu(y);
                    tape.sum(y)
                },
                vec![x.clone(), w.clone(), b.clone()],
            );
        }
    }

    #[test]
    fn conv2d_matches_hand_computation() {
        // 1x2x2 input, 1x1x2x2 kernel, no pad: plain dot product.
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let wv = tape.leaf(w, false);
        let y = tape.conv2d(xv, wv, None, 1, 0);
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert!((tape.value(y).data()[0] - (0.5 - 2.0 + 6.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn linear_and_pool_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
        let cw = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let lw = Tensor::randn(&[2, 3], 0.7, &mut r);
        let lb = Tensor::randn(&[2], 0.3, &mut r);
        check_grads(
            |tape, vs| {
                let y = tape.conv2d(vs[0], vs[1], None, 2, 1);
                let y = tape.relu(y);
                let p = tape.global_avg_pool(y);
                let o = tape.linear(p, vs[2], Some(vs[3]));
                let sl = tape.smooth_l1_sum(o, vec![0.3, -1.2]);
                tape.weighted_sum(&[(0.5, sl)])
            },
            vec![x, cw, lw, lb],
        );
    }

    #[test]
    fn roi_bilinear_gradients() {
        let mut r = rng();
        let z = Tensor::randn(&[3, 6, 6], 1.0, &mut r);
        check_grads(
            |tape, vs| {
                let p = tape.roi_bilinear(vs[0], [4.0, 6.0, 20.0, 14.0], 4, 8.0);
                let s = tape.sum(p);
                tape.weighted_sum(&[(1.0, s)])
            },
            vec![z],
        );
    }

    #[test]
    fn fused_loss_gradients() {
        let mut r = rng();
        let logits = Tensor::randn(&[5], 1.5, &mut r);
        check_grads(
            |tape, vs| tape.bce_with_logits_mean(vs[0], vec![1.0, 0.0, 1.0, 0.0, 1.0]),
            vec![logits.clone()],
        );
        check_grads(
            |tape, vs| tape.softmax_cross_entropy(vs[0], 2),
            vec![logits.clone()],
        );
        check_grads(
            |tape, vs| {
                let g = tape.gather_flat(vs[0], vec![0, 2, 2, 4]);
                tape.mean_sq(g, vec![0.1, 0.2, 0.3, 0.4])
            },
            vec![logits],
        );
    }

    #[test]
    fn domain_loss_gradients_both_labels_and_kinds() {
        for d in [0u8, 1u8] {
            for kind in [
                DomainLossKind::CrossEntropy,
                DomainLossKind::Focal { gamma: 2.0 },
            ] {
                for logit in [-1.3, -0.2, 0.0, 0.7, 2.1] {
                    check_grads(
                        move |tape, vs| tape.domain_loss(vs[0], d, kind),
                        vec![Tensor::from_vec(&[1], vec![logit])],
                    );
                }
            }
        }
    }

    #[test]
    fn grl_forward_is_identity_and_backward_negates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]), true);
        let y = tape.grl(x, 1.7);
        assert_eq!(tape.value(y), tape.value(x));
        let s = tape.sum(y);
        tape.backward(s);
        let g = tape.grad(x).unwrap();
        for &v in g.data() {
            assert!((v + 1.7).abs() < 1e-15);
        }
    }

    #[test]
    fn no_grad_paths_receive_none() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]), false);
        let w = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]), true);
        let y = tape.linear(x, w, None);
        let s = tape.sum(y);
        tape.backward(s);
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(w).is_some());
    }

    #[test]
    fn focal_gamma_zero_equals_cross_entropy() {
        for logit in [-2.0, -0.3, 0.0, 1.1, 3.0] {
            for d in [0u8, 1u8] {
                let ce = domain_loss_value(logit, d, 0.0);
                let f0 = {
                    let mut tape = Tape::new();
                    let x = tape.leaf(Tensor::from_vec(&[1], vec![logit]), false);
                    let l = tape.domain_loss(x, d, DomainLossKind::Focal { gamma: 0.0 });
                    tape.scalar_value(l)
                };
                assert!((ce - f0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn domain_loss_worked_values() {
        // logit 0, d = 1, cross-entropy: ln 2.
        let ce = domain_loss_value(0.0, 1, 0.0);
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
        // focal gamma 2 at the same point: (1 - 0.5)^2 * ln 2.
        let f = domain_loss_value(0.0, 1, 2.0);
        assert!((f - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }
}
