//! Domain Transfer Module: a tiny stack of bias-free 1x1 convolutions (ReLU
//! between) that maps source images into pseudo-target samples. It is trained
//! cooperatively against a frozen detector and frozen domain discriminators
//! to be classified as "target", and is frozen itself when replayed during
//! later incremental adaptations.
//!
//! Outputs are deliberately not clamped to [0, 1]: pseudo-samples carry no
//! realism constraint and the backbone accepts unbounded input.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{DomainLossKind, Tape, Var};
use crate::da::{bind_discriminators, d_img_logit, d_inst_logit, DiscVars, DiscriminatorSet};
use crate::detector::{
    bind_detector, roi_extract, rpn_heads, rpn_propose, DetectorParams, DetectorVars, RpnMode,
};
use crate::error::{Error, Result};
use crate::eval::{LayerDesc, ModelDesc};
use crate::optim::MomentumSgd;
use crate::synth::DomainDataset;
use crate::tensor::Tensor;
use crate::trainer::AccessLog;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DtmVariant {
    Original,
    Wider,
    FourLayer,
    SixLayer,
}

impl DtmVariant {
    pub fn channels(&self) -> Vec<usize> {
        match self {
            DtmVariant::Original => vec![3, 256, 3],
            DtmVariant::Wider => vec![3, 512, 3],
            DtmVariant::FourLayer => vec![3, 256, 512, 256, 3],
            DtmVariant::SixLayer => vec![3, 64, 128, 256, 128, 64, 3],
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DtmVariant::Original => "original",
            DtmVariant::Wider => "wider",
            DtmVariant::FourLayer => "four_layer",
            DtmVariant::SixLayer => "six_layer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(DtmVariant::Original),
            "wider" => Ok(DtmVariant::Wider),
            "four_layer" => Ok(DtmVariant::FourLayer),
            "six_layer" => Ok(DtmVariant::SixLayer),
            other => Err(Error::InvalidArgument(format!(
                "unknown DTM variant {other:?}"
            ))),
        }
    }

    pub fn all() -> [DtmVariant; 4] {
        [
            DtmVariant::Original,
            DtmVariant::Wider,
            DtmVariant::FourLayer,
            DtmVariant::SixLayer,
        ]
    }
}

/// Transfer-module weights: 1x1 convolutions, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct DTMParams {
    pub variant: DtmVariant,
    /// One (cout, cin, 1, 1) tensor per layer.
    pub layers: Vec<Tensor>,
}

impl DTMParams {
    /// Fresh module initialized so the whole composition is the identity map:
    /// the first conv lifts through mirrored random directions (scaled 0.1),
    /// interior layers embed the identity, and the last conv inverts the
    /// lift. An untrained DTM therefore passes images through unchanged,
    /// which is what makes the trained-vs-untrained ablation meaningful.
    pub fn new(variant: DtmVariant, seed: u64) -> Self {
        let chans = variant.channels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = chans[1];
        let pairs = hidden / 2;
        let scale = 0.1;

        // random unit directions in RGB space
        let mut dirs: Vec<[f64; 3]> = Vec::with_capacity(pairs);
        while dirs.len() < pairs {
            let v = [
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-3 {
                dirs.push([v[0] / n, v[1] / n, v[2] / n]);
            }
        }
        // frame matrix M = sum q q^T and its inverse for exact reconstruction
        let mut m = [[0.0f64; 3]; 3];
        for q in &dirs {
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += q[i] * q[j];
                }
            }
        }
        let minv = invert3(&m);

        let mut layers = Vec::with_capacity(chans.len() - 1);
        // first layer: mirrored lift, rows (2k, 2k+1) = (+s q_k, -s q_k)
        let mut first = Tensor::zeros(&[hidden, 3, 1, 1]);
        for (k, q) in dirs.iter().enumerate() {
            for c in 0..3 {
                first.data_mut()[(2 * k) * 3 + c] = scale * q[c];
                first.data_mut()[(2 * k + 1) * 3 + c] = -scale * q[c];
            }
        }
        layers.push(first);
        // interior layers: identity embedding (activations stay nonnegative,
        // so interposed ReLUs are transparent)
        for li in 1..chans.len() - 2 {
            let (cin, cout) = (chans[li], chans[li + 1]);
            let mut w = Tensor::zeros(&[cout, cin, 1, 1]);
            for i in 0..cin.min(cout) {
                w.data_mut()[i * cin + i] = 1.0;
            }
            layers.push(w);
        }
        // last layer: reconstruct through the inverse frame
        let cin = chans[chans.len() - 2];
        let mut last = Tensor::zeros(&[3, cin, 1, 1]);
        for (k, q) in dirs.iter().enumerate() {
            let r = [
                minv[0][0] * q[0] + minv[0][1] * q[1] + minv[0][2] * q[2],
                minv[1][0] * q[0] + minv[1][1] * q[1] + minv[1][2] * q[2],
                minv[2][0] * q[0] + minv[2][1] * q[1] + minv[2][2] * q[2],
            ];
            for c in 0..3 {
                last.data_mut()[c * cin + 2 * k] = r[c] / scale;
                last.data_mut()[c * cin + 2 * k + 1] = -r[c] / scale;
            }
        }
        layers.push(last);
        DTMParams { variant, layers }
    }

    pub fn param_count(&self) -> u64 {
        self.layers.iter().map(|t| t.len() as u64).sum()
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("layer{i}/w"), t))
            .collect()
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .map(|(i, t)| (format!("layer{i}/w"), t))
            .collect()
    }

    pub fn load_named(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, tensor) in self.named_mut() {
            let src = map.get(&name).ok_or_else(|| Error::Archive {
                path: name.clone(),
                msg: "missing checkpoint entry".into(),
            })?;
            if src.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{:?} for {name}", tensor.shape()),
                    got: format!("{:?}", src.shape()),
                });
            }
            *tensor = src.clone();
        }
        Ok(())
    }

    pub fn description(&self) -> ModelDesc {
        ModelDesc {
            name: format!("dtm/{}", self.variant.as_str()),
            layers: self
                .layers
                .iter()
                .map(|t| LayerDesc::Conv {
                    cin: t.shape()[1],
                    cout: t.shape()[0],
                    k: 1,
                    bias: false,
                    out_div: 1,
                    count: 1,
                })
                .collect(),
        }
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    assert!(det.abs() > 1e-9, "degenerate direction frame");
    let inv_det = 1.0 / det;
    let mut out = [[0.0f64; 3]; 3];
    out[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    out[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    out[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    out[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    out[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    out[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    out[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    out[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    out[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    out
}

pub struct DtmVars {
    pub layers: Vec<Var>,
    pub trainable: bool,
}

pub fn bind_dtm(
    tape: &mut Tape,
    g: &DTMParams,
    trainable: bool,
    reg: &mut Vec<(String, Var)>,
) -> DtmVars {
    let layers = g
        .layers
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let v = tape.leaf(t.clone(), trainable);
            reg.push((format!("layer{i}/w"), v));
            v
        })
        .collect();
    DtmVars { layers, trainable }
}

/// Transfer forward: 1x1 convs with ReLU between (none after the last), so
/// output spatial shape always equals input shape. Not clamped.
pub fn dtm_forward(tape: &mut Tape, g: &DtmVars, input: Var) -> Var {
    let n = g.layers.len();
    let mut x = input;
    for (i, &w) in g.layers.iter().enumerate() {
        x = tape.conv2d(x, w, None, 1, 0);
        if i + 1 < n {
            x = tape.relu(x);
        }
    }
    x
}

/// No-grad convenience: transfer a pixel tensor.
pub fn dtm_apply(g: &DTMParams, pixels: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let mut reg = Vec::new();
    let vars = bind_dtm(&mut tape, g, false, &mut reg);
    let input = tape.leaf(pixels.clone(), false);
    let out = dtm_forward(&mut tape, &vars, input);
    tape.value(out).clone()
}

fn dtm_loss_impl(
    tape: &mut Tape,
    det: &DetectorVars,
    disc: &DiscVars,
    g: &DtmVars,
    batch: &[&Tensor],
    plans: Option<&[Vec<crate::eval::BBox>]>,
    kind: DomainLossKind,
) -> Result<Var> {
    if det.trainable || disc.trainable {
        return Err(Error::FrozenViolation(
            "dtm_loss requires the detector and discriminators to be bound frozen".into(),
        ));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut terms: Vec<(f64, Var)> = Vec::new();
    for (i, pixels) in batch.iter().enumerate() {
        let input = tape.leaf((*pixels).clone(), false);
        let transferred = dtm_forward(tape, g, input);
        let z = crate::detector::backbone_forward_var(tape, det, transferred);
        let logit = d_img_logit(tape, disc, z);
        let img_term = tape.domain_loss(logit, 1, kind);
        terms.push((1.0, img_term));

        // instance boxes: from the provided plan, or the eval-mode proposals
        // of this forward (treated as constants either way)
        let boxes: Vec<crate::eval::BBox> = match plans {
            Some(plans) => plans[i].clone(),
            None => {
                let (obj, delta) = rpn_heads(tape, det, z);
                rpn_propose(tape.value(obj), tape.value(delta), RpnMode::Eval)
                    .iter()
                    .map(|p| p.bbox)
                    .collect()
            }
        };
        if !boxes.is_empty() {
            let w = 1.0 / boxes.len() as f64;
            for bx in &boxes {
                let p = roi_extract(tape, z, bx)?;
                let logit = d_inst_logit(tape, disc, p);
                let t = tape.domain_loss(logit, 1, kind);
                terms.push((w, t));
            }
        }
    }
    Ok(tape.weighted_sum(&terms))
}

/// Transfer-module loss (cooperative, no gradient reversal): every
/// discriminator should classify the transferred source image as target
/// (d = 1). The detector and discriminators must be bound frozen; gradients
/// reach only the module.
pub fn dtm_loss(
    tape: &mut Tape,
    det: &DetectorVars,
    disc: &DiscVars,
    g: &DtmVars,
    batch: &[&Tensor],
    kind: DomainLossKind,
) -> Result<Var> {
    dtm_loss_impl(tape, det, disc, g, batch, None, kind)
}

/// [`dtm_loss`] with frozen per-image instance boxes (used by the gradient
/// checks, which differentiate the detached-proposal semantics).
pub fn dtm_loss_planned(
    tape: &mut Tape,
    det: &DetectorVars,
    disc: &DiscVars,
    g: &DtmVars,
    batch: &[&Tensor],
    plans: &[Vec<crate::eval::BBox>],
    kind: DomainLossKind,
) -> Result<Var> {
    assert_eq!(batch.len(), plans.len());
    dtm_loss_impl(tape, det, disc, g, batch, Some(plans), kind)
}

/// Train a fresh DTM against a frozen, already-adapted detector and its
/// discriminators, by momentum SGD on source images. The borrow contract
/// keeps the frozen networks untouched by construction.
#[allow(clippy::too_many_arguments)]
pub fn train_dtm(
    phi: &DetectorParams,
    disc: &DiscriminatorSet,
    source: &DomainDataset,
    variant: DtmVariant,
    iters: usize,
    lr: f64,
    kind: DomainLossKind,
    seed: u64,
    log: &mut AccessLog,
    step: usize,
) -> Result<DTMParams> {
    let mut g = DTMParams::new(variant, crate::seeds::derive(seed, "dtm-init"));
    let mut opt = MomentumSgd::new(0.9);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(seed, "dtm-sample"));
    for it in 0..iters {
        let idx = rng.gen_range(0..source.train_len());
        log.record(step, &source.spec.name, "train", idx);
        let (img, _) = source.train_item(idx);
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut tape, phi, false, &mut reg);
        let dv = bind_discriminators(&mut tape, disc, false, &mut reg);
        let mut greg = Vec::new();
        let gv = bind_dtm(&mut tape, &g, true, &mut greg);
        let loss = dtm_loss(&mut tape, &det, &dv, &gv, &[&img.pixels], kind)?;
        let v = tape.scalar_value(loss);
        if !v.is_finite() {
            return Err(Error::Divergence {
                phase: format!("dtm step {step}"),
                iter: it,
            });
        }
        tape.backward(loss);
        let grads = crate::detector::collect_grads(&tape, &greg);
        opt.step(lr, &mut g.named_mut(), &grads);
    }
    Ok(g)
}
