//! Adversarial domain adaptation: gradient-reversal coupling, image- and
//! instance-level domain discriminators, and the composed single-target
//! adaptation loss (supervised source loss plus weighted domain-confusion
//! terms).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use crate::autodiff::DomainLossKind;
use crate::autodiff::{domain_loss_value, Tape, Var};
use crate::detector::{
    bind_detector, forward_image, roi_extract, rpn_propose, DetectorParams, DetectorVars, RpnMode,
};
use crate::error::{Error, Result};
use crate::eval::{LayerDesc, ModelDesc};
use crate::synth::{BoxAnnotation, DomainDataset, Image};
use crate::tensor::Tensor;
use crate::trainer::{AccessLog, Schedule};

/// Domain label: 0 = source, 1 = target.
pub type DomainLabel = u8;

/// Image-level and instance-level domain discriminators plus the gradient
/// reversal strength used when coupling them to the detector.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorSet {
    pub img_conv1: crate::detector::ConvLayer,
    pub img_conv2: crate::detector::ConvLayer,
    pub img_fc: crate::detector::LinearLayer,
    pub inst_fc1: crate::detector::LinearLayer,
    pub inst_fc2: crate::detector::LinearLayer,
    pub grl_lambda: f64,
}

impl DiscriminatorSet {
    pub fn new(seed: u64, grl_lambda: f64) -> Self {
        use crate::detector::{ConvLayer, LinearLayer};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DiscriminatorSet {
            img_conv1: ConvLayer::new(32, crate::detector::FEAT_CHANNELS, 3, 2, 1, None, &mut rng),
            img_conv2: ConvLayer::new(16, 32, 3, 2, 1, None, &mut rng),
            img_fc: LinearLayer::new(1, 16, Some(0.01), &mut rng),
            inst_fc1: LinearLayer::new(64, crate::detector::INSTANCE_DIM, None, &mut rng),
            inst_fc2: LinearLayer::new(1, 64, Some(0.01), &mut rng),
            grl_lambda,
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (name, w, b) in [
            ("img/conv1", &self.img_conv1.w, &self.img_conv1.b),
            ("img/conv2", &self.img_conv2.w, &self.img_conv2.b),
        ] {
            out.push((format!("{name}/w"), w));
            if let Some(b) = b {
                out.push((format!("{name}/b"), b));
            }
        }
        for (name, l) in [
            ("img/fc", &self.img_fc),
            ("inst/fc1", &self.inst_fc1),
            ("inst/fc2", &self.inst_fc2),
        ] {
            out.push((format!("{name}/w"), &l.w));
            if let Some(b) = &l.b {
                out.push((format!("{name}/b"), b));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("img/conv1/w".into(), &mut self.img_conv1.w));
        if let Some(b) = &mut self.img_conv1.b {
            out.push(("img/conv1/b".into(), b));
        }
        out.push(("img/conv2/w".into(), &mut self.img_conv2.w));
        if let Some(b) = &mut self.img_conv2.b {
            out.push(("img/conv2/b".into(), b));
        }
        out.push(("img/fc/w".into(), &mut self.img_fc.w));
        if let Some(b) = &mut self.img_fc.b {
            out.push(("img/fc/b".into(), b));
        }
        out.push(("inst/fc1/w".into(), &mut self.inst_fc1.w));
        if let Some(b) = &mut self.inst_fc1.b {
            out.push(("inst/fc1/b".into(), b));
        }
        out.push(("inst/fc2/w".into(), &mut self.inst_fc2.w));
        if let Some(b) = &mut self.inst_fc2.b {
            out.push(("inst/fc2/b".into(), b));
        }
        out
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

    pub fn param_count(&self) -> u64 {
        self.named().iter().map(|(_, t)| t.len() as u64).sum()
    }

    pub fn description(&self) -> ModelDesc {
        ModelDesc {
            name: "discriminators".into(),
            layers: vec![
                LayerDesc::Conv {
                    cin: crate::detector::FEAT_CHANNELS,
                    cout: 32,
                    k: 3,
                    bias: true,
                    out_div: crate::detector::STRIDE * 2,
                    count: 1,
                },
                LayerDesc::Conv {
                    cin: 32,
                    cout: 16,
                    k: 3,
                    bias: true,
                    out_div: crate::detector::STRIDE * 4,
                    count: 1,
                },
                LayerDesc::Linear {
                    cin: 16,
                    cout: 1,
                    bias: true,
                    count: 1,
                },
                LayerDesc::Linear {
                    cin: crate::detector::INSTANCE_DIM,
                    cout: 64,
                    bias: true,
                    count: 32,
                },
                LayerDesc::Linear {
                    cin: 64,
                    cout: 1,
                    bias: true,
                    count: 32,
                },
            ],
        }
    }
}

pub struct DiscVars {
    pub img_conv1: crate::detector::ConvVars,
    pub img_conv2: crate::detector::ConvVars,
    pub img_fc: crate::detector::LinearVars,
    pub inst_fc1: crate::detector::LinearVars,
    pub inst_fc2: crate::detector::LinearVars,
    pub trainable: bool,
}

pub fn bind_discriminators(
    tape: &mut Tape,
    disc: &DiscriminatorSet,
    trainable: bool,
    reg: &mut Vec<(String, Var)>,
) -> DiscVars {
    let mut local = Vec::new();
    let img_conv1 = bind_conv_named(tape, &disc.img_conv1, trainable, "img/conv1", &mut local);
    let img_conv2 = bind_conv_named(tape, &disc.img_conv2, trainable, "img/conv2", &mut local);
    let img_fc = bind_linear_named(tape, &disc.img_fc, trainable, "img/fc", &mut local);
    let inst_fc1 = bind_linear_named(tape, &disc.inst_fc1, trainable, "inst/fc1", &mut local);
    let inst_fc2 = bind_linear_named(tape, &disc.inst_fc2, trainable, "inst/fc2", &mut local);
    reg.extend(local);
    DiscVars {
        img_conv1,
        img_conv2,
        img_fc,
        inst_fc1,
        inst_fc2,
        trainable,
    }
}

fn bind_conv_named(
    tape: &mut Tape,
    layer: &crate::detector::ConvLayer,
    trainable: bool,
    name: &str,
    reg: &mut Vec<(String, Var)>,
) -> crate::detector::ConvVars {
    let w = tape.leaf(layer.w.clone(), trainable);
    reg.push((format!("{name}/w"), w));
    let b = layer.b.as_ref().map(|b| {
        let v = tape.leaf(b.clone(), trainable);
        reg.push((format!("{name}/b"), v));
        v
    });
    crate::detector::ConvVars {
        w,
        b,
        stride: layer.stride,
        pad: layer.pad,
    }
}

fn bind_linear_named(
    tape: &mut Tape,
    layer: &crate::detector::LinearLayer,
    trainable: bool,
    name: &str,
    reg: &mut Vec<(String, Var)>,
) -> crate::detector::LinearVars {
    let w = tape.leaf(layer.w.clone(), trainable);
    reg.push((format!("{name}/w"), w));
    let b = layer.b.as_ref().map(|b| {
        let v = tape.leaf(b.clone(), trainable);
        reg.push((format!("{name}/b"), v));
        v
    });
    crate::detector::LinearVars { w, b }
}

/// Image-level discriminator logit for a feature map (already GRL'd or not,
/// the caller decides).
pub fn d_img_logit(tape: &mut Tape, disc: &DiscVars, z: Var) -> Var {
    let h = tape.conv2d(z, disc.img_conv1.w, disc.img_conv1.b, 2, 1);
    let h = tape.relu(h);
    let h = tape.conv2d(h, disc.img_conv2.w, disc.img_conv2.b, 2, 1);
    let h = tape.relu(h);
    let pooled = tape.global_avg_pool(h);
    tape.linear(pooled, disc.img_fc.w, disc.img_fc.b)
}

/// Instance-level discriminator logit for one instance feature vector.
pub fn d_inst_logit(tape: &mut Tape, disc: &DiscVars, p: Var) -> Var {
    let h = tape.linear(p, disc.inst_fc1.w, disc.inst_fc1.b);
    let h = tape.relu(h);
    tape.linear(h, disc.inst_fc2.w, disc.inst_fc2.b)
}

/// Spec-level scalar loss on one logit (exposed for tests and diagnostics).
pub fn binary_domain_loss(logit: f64, d: DomainLabel, kind: DomainLossKind) -> f64 {
    let gamma = match kind {
        DomainLossKind::CrossEntropy => 0.0,
        DomainLossKind::Focal { gamma } => gamma,
    };
    domain_loss_value(logit, d, gamma)
}

/// Per-image adversarial terms built on a shared forward pass. With
/// `reverse = true` the features pass through the GRL before the
/// discriminators (the adaptation objective); with `reverse = false` the
/// graph is cooperative (used when training the transfer module).
pub struct DaTerms {
    pub image: Var,
    pub instances: Vec<Var>,
}

/// Instance boxes used by the adversarial losses: the eval-mode proposal
/// set of the image. Treated as constants by the losses.
pub fn instance_boxes(tape: &Tape, fwd: &crate::detector::ImageForward) -> Vec<crate::eval::BBox> {
    rpn_propose(tape.value(fwd.obj), tape.value(fwd.delta), RpnMode::Eval)
        .iter()
        .map(|p| p.bbox)
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn da_terms_planned(
    tape: &mut Tape,
    disc: &DiscVars,
    fwd: &crate::detector::ImageForward,
    boxes: &[crate::eval::BBox],
    d: DomainLabel,
    reverse: bool,
    grl_lambda: f64,
    kind: DomainLossKind,
) -> Result<DaTerms> {
    let z_in = if reverse {
        tape.grl(fwd.z, grl_lambda)
    } else {
        fwd.z
    };
    let img_logit = d_img_logit(tape, disc, z_in);
    let image = tape.domain_loss(img_logit, d, kind);

    let mut instances = Vec::with_capacity(boxes.len());
    for bx in boxes {
        let p = roi_extract(tape, fwd.z, bx)?;
        let p_in = if reverse {
            tape.grl(p, grl_lambda)
        } else {
            p
        };
        let logit = d_inst_logit(tape, disc, p_in);
        instances.push(tape.domain_loss(logit, d, kind));
    }
    Ok(DaTerms { image, instances })
}

#[allow(clippy::too_many_arguments)]
pub fn da_terms_for_image(
    tape: &mut Tape,
    disc: &DiscVars,
    fwd: &crate::detector::ImageForward,
    d: DomainLabel,
    reverse: bool,
    grl_lambda: f64,
    kind: DomainLossKind,
) -> Result<DaTerms> {
    let boxes = instance_boxes(tape, fwd);
    da_terms_planned(tape, disc, fwd, &boxes, d, reverse, grl_lambda, kind)
}

/// Mean image-level domain-confusion loss over a labeled batch (Eq.-1-style).
pub fn image_da_loss(
    tape: &mut Tape,
    det: &DetectorVars,
    disc: &DiscVars,
    batch: &[(&Image, DomainLabel)],
    grl_lambda: f64,
    kind: DomainLossKind,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut terms = Vec::with_capacity(batch.len());
    let inv = 1.0 / batch.len() as f64;
    for (img, d) in batch {
        let z = crate::detector::backbone_forward(tape, det, img)?;
        let z_in = tape.grl(z, grl_lambda);
        let logit = d_img_logit(tape, disc, z_in);
        let l = tape.domain_loss(logit, *d, kind);
        terms.push((inv, l));
    }
    Ok(tape.weighted_sum(&terms))
}

/// Mean instance-level domain-confusion loss over all proposals of a batch
/// (Eq.-2-style). Returns the loss and a flag set when the batch produced no
/// proposals at all (loss is 0 in that case).
pub fn instance_da_loss(
    tape: &mut Tape,
    det: &DetectorVars,
    disc: &DiscVars,
    batch: &[(&Image, DomainLabel)],
    grl_lambda: f64,
    kind: DomainLossKind,
) -> Result<(Var, bool)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut all = Vec::new();
    for (img, d) in batch {
        let fwd = forward_image(tape, det, img)?;
        let terms = da_terms_for_image(tape, disc, &fwd, *d, true, grl_lambda, kind)?;
        all.extend(terms.instances);
    }
    if all.is_empty() {
        let zero = tape.weighted_sum(&[]);
        return Ok((zero, true));
    }
    let inv = 1.0 / all.len() as f64;
    let weighted: Vec<(f64, Var)> = all.into_iter().map(|v| (inv, v)).collect();
    Ok((tape.weighted_sum(&weighted), false))
}

/// Composite adaptation loss (Eq.-3/4-style): `lambda * (image + instance
/// confusion over the mixed batch) + supervised loss on the labeled source`.
#[allow(clippy::too_many_arguments)]
pub fn total_da_loss(
    tape: &mut Tape,
    det: &DetectorVars,
    disc: &DiscVars,
    source: (&Image, &[BoxAnnotation]),
    target: &Image,
    lambda: f64,
    kind: DomainLossKind,
    grl_lambda: f64,
    sample_seed: u64,
) -> Result<Var> {
    let src_fwd = forward_image(tape, det, source.0)?;
    let tgt_fwd = forward_image(tape, det, target)?;
    let src_terms = da_terms_for_image(tape, disc, &src_fwd, 0, true, grl_lambda, kind)?;
    let tgt_terms = da_terms_for_image(tape, disc, &tgt_fwd, 1, true, grl_lambda, kind)?;
    let sup = crate::detector::supervised_loss_on(tape, det, &src_fwd, source.1, sample_seed)?;

    let mut terms: Vec<(f64, Var)> = vec![
        (lambda * 0.5, src_terms.image),
        (lambda * 0.5, tgt_terms.image),
        (1.0, sup),
    ];
    let n_inst = src_terms.instances.len() + tgt_terms.instances.len();
    if n_inst > 0 {
        let w = lambda / n_inst as f64;
        for v in src_terms.instances.into_iter().chain(tgt_terms.instances) {
            terms.push((w, v));
        }
    }
    Ok(tape.weighted_sum(&terms))
}

/// Single-target adaptation (Algorithm-1 step 1): plain unsupervised DA
/// phase, no replay and no distillation. Thin wrapper over the trainer's
/// shared phase loop.
#[allow(clippy::too_many_arguments)]
pub fn stda_adapt(
    phi: &mut DetectorParams,
    disc: &mut DiscriminatorSet,
    source: &DomainDataset,
    target: &DomainDataset,
    schedule: &Schedule,
    kind: DomainLossKind,
    lambda: f64,
    phase_seed: u64,
    log: &mut AccessLog,
    step: usize,
) -> Result<()> {
    crate::trainer::da_phase(
        phi,
        disc,
        source,
        &[target],
        schedule,
        &crate::trainer::PhaseExtras {
            lambda,
            kind,
            pseudo: None,
            kd: None,
        },
        phase_seed,
        log,
        step,
    )
}

/// Mean probability the image discriminator assigns to "target" over a set
/// of images (optionally pre-transformed pixels). Diagnostic used by the DTM
/// fooling tests and reports.
pub fn mean_target_probability(
    phi: &DetectorParams,
    disc: &DiscriminatorSet,
    images: &[Tensor],
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty image set".into()));
    }
    let mut acc = 0.0;
    for pixels in images {
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut tape, phi, false, &mut reg);
        let dvars = bind_discriminators(&mut tape, disc, false, &mut reg);
        let input = tape.leaf(pixels.clone(), false);
        let z = crate::detector::backbone_forward_var(&mut tape, &det, input);
        let logit = d_img_logit(&mut tape, &dvars, z);
        acc += crate::autodiff::sigmoid(tape.scalar_value(logit));
    }
    Ok(acc / images.len() as f64)
}

/// Binary accuracy of the image discriminator on a source-vs-target split
/// (0.5 = fully confused).
pub fn discriminator_accuracy(
    phi: &DetectorParams,
    disc: &DiscriminatorSet,
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut run = |ds: &DomainDataset, d: DomainLabel| -> Result<()> {
        for i in 0..ds.eval_len() {
            let img = ds.eval_item(i).0;
            let p = mean_target_probability(phi, disc, std::slice::from_ref(&img.pixels))?;
            let pred = if p >= 0.5 { 1 } else { 0 };
            if pred == d {
                correct += 1;
            }
            total += 1;
        }
        Ok(())
    };
    run(source, 0)?;
    run(target, 1)?;
    Ok(correct as f64 / total as f64)
}

/// Deterministic sample of `n` eval images from a dataset (held-out probes).
pub fn sample_eval_pixels(ds: &DomainDataset, n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n.min(ds.eval_len()))
        .map(|_| {
            let i = rng.gen_range(0..ds.eval_len());
            ds.eval_item(i).0.pixels.clone()
        })
        .collect()
}
