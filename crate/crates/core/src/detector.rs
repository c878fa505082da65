//! Miniature two-stage detector: stride-8 conv backbone, an RPN over three
//! square anchors per cell, and ROI heads on bilinearly cropped instance
//! features. Exposes the feature map `z` and instance features `p` that the
//! adversarial losses consume, the supervised detection loss, and the
//! inference path.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{iou, BBox, LayerDesc, ModelDesc};
use crate::synth::{BoxAnnotation, Image, IMG_SIZE};
use crate::tensor::Tensor;

pub const STRIDE: usize = 8;
pub const FEAT_SIZE: usize = IMG_SIZE / STRIDE;
pub const FEAT_CHANNELS: usize = 64;
pub const ANCHOR_SIDES: [f64; 3] = [16.0, 32.0, 48.0];
pub const ROI_SIZE: usize = 4;
/// Instance-feature length: a 4x4 crop of the 64-channel map, flattened.
pub const INSTANCE_DIM: usize = ROI_SIZE * ROI_SIZE * FEAT_CHANNELS;
pub const DEFAULT_SCORE_THRESH: f64 = 0.05;

const RPN_NMS_IOU: f64 = 0.7;
const RPN_TOPK_TRAIN: usize = 64;
const RPN_TOPK_EVAL: usize = 32;
const ANCHOR_POS_IOU: f64 = 0.5;
const ANCHOR_NEG_IOU: f64 = 0.3;
const ROI_POS_IOU: f64 = 0.5;
const ROI_BATCH: usize = 16;
const ROI_MAX_POS: usize = ROI_BATCH / 2;
const PREDICT_NMS_IOU: f64 = 0.5;
const DELTA_CLAMP: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl ConvLayer {
    /// He-normal init for hidden layers; `head_std` overrides for small
    /// prediction heads.
    pub fn new(
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std_override: Option<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = std_override.unwrap_or((2.0 / (cin * k * k) as f64).sqrt());
        ConvLayer {
            w: Tensor::randn(&[cout, cin, k, k], std, rng),
            b: Some(Tensor::zeros(&[cout])),
            stride,
            pad,
        }
    }
}

impl LinearLayer {
    pub fn new(cout: usize, cin: usize, std_override: Option<f64>, rng: &mut ChaCha8Rng) -> Self {
        let std = std_override.unwrap_or((2.0 / cin as f64).sqrt());
        LinearLayer {
            w: Tensor::randn(&[cout, cin], std, rng),
            b: Some(Tensor::zeros(&[cout])),
        }
    }
}

#[derive(Clone, Copy)]
pub struct ConvVars {
    pub w: Var,
    pub b: Option<Var>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Option<Var>,
}

fn bind_conv(
    tape: &mut Tape,
    layer: &ConvLayer,
    trainable: bool,
    name: &str,
    reg: &mut Vec<(String, Var)>,
) -> ConvVars {
    let w = tape.leaf(layer.w.clone(), trainable);
    reg.push((format!("{name}/w"), w));
    let b = layer.b.as_ref().map(|b| {
        let v = tape.leaf(b.clone(), trainable);
        reg.push((format!("{name}/b"), v));
        v
    });
    ConvVars {
        w,
        b,
        stride: layer.stride,
        pad: layer.pad,
    }
}

fn bind_linear(
    tape: &mut Tape,
    layer: &LinearLayer,
    trainable: bool,
    name: &str,
    reg: &mut Vec<(String, Var)>,
) -> LinearVars {
    let w = tape.leaf(layer.w.clone(), trainable);
    reg.push((format!("{name}/w"), w));
    let b = layer.b.as_ref().map(|b| {
        let v = tape.leaf(b.clone(), trainable);
        reg.push((format!("{name}/b"), v));
        v
    });
    LinearVars { w, b }
}

/// All detector weights. The architecture is fixed after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    pub backbone: Vec<ConvLayer>,
    pub rpn_shared: ConvLayer,
    pub rpn_obj: ConvLayer,
    pub rpn_delta: ConvLayer,
    pub roi_fc: LinearLayer,
    pub roi_cls: LinearLayer,
    pub roi_delta: LinearLayer,
    pub num_classes: usize,
}

impl DetectorParams {
    /// Fresh seeded detector. Backbone channels are (16, 32, 64, 64) with
    /// strides (2, 2, 2, 1); heads use small-std init.
    pub fn new(seed: u64, num_classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chans = [3usize, 16, 32, 64, FEAT_CHANNELS];
        let strides = [2usize, 2, 2, 1];
        let backbone = (0..4)
            .map(|i| ConvLayer::new(chans[i + 1], chans[i], 3, strides[i], 1, None, &mut rng))
            .collect();
        let n_anchors = ANCHOR_SIDES.len();
        DetectorParams {
            backbone,
            rpn_shared: ConvLayer::new(FEAT_CHANNELS, FEAT_CHANNELS, 3, 1, 1, None, &mut rng),
            rpn_obj: ConvLayer::new(n_anchors, FEAT_CHANNELS, 1, 1, 0, Some(0.01), &mut rng),
            rpn_delta: ConvLayer::new(4 * n_anchors, FEAT_CHANNELS, 1, 1, 0, Some(0.01), &mut rng),
            roi_fc: LinearLayer::new(256, INSTANCE_DIM, None, &mut rng),
            roi_cls: LinearLayer::new(num_classes + 1, 256, Some(0.01), &mut rng),
            roi_delta: LinearLayer::new(4 * num_classes, 256, Some(0.01), &mut rng),
            num_classes,
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        fn push_conv<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, l: &'a ConvLayer) {
            out.push((format!("{name}/w"), &l.w));
            if let Some(b) = &l.b {
                out.push((format!("{name}/b"), b));
            }
        }
        fn push_lin<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, l: &'a LinearLayer) {
            out.push((format!("{name}/w"), &l.w));
            if let Some(b) = &l.b {
                out.push((format!("{name}/b"), b));
            }
        }
        for (i, l) in self.backbone.iter().enumerate() {
            push_conv(&mut out, &format!("backbone/{i}"), l);
        }
        push_conv(&mut out, "rpn/shared", &self.rpn_shared);
        push_conv(&mut out, "rpn/obj", &self.rpn_obj);
        push_conv(&mut out, "rpn/delta", &self.rpn_delta);
        push_lin(&mut out, "roi/fc", &self.roi_fc);
        push_lin(&mut out, "roi/cls", &self.roi_cls);
        push_lin(&mut out, "roi/delta", &self.roi_delta);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        macro_rules! conv {
            ($name:expr, $l:expr) => {
                out.push((format!("{}/w", $name), &mut $l.w));
                if let Some(b) = &mut $l.b {
                    out.push((format!("{}/b", $name), b));
                }
            };
        }
        for (i, l) in self.backbone.iter_mut().enumerate() {
            let name = format!("backbone/{i}");
            out.push((format!("{name}/w"), &mut l.w));
            if let Some(b) = &mut l.b {
                out.push((format!("{name}/b"), b));
            }
        }
        conv!("rpn/shared", self.rpn_shared);
        conv!("rpn/obj", self.rpn_obj);
        conv!("rpn/delta", self.rpn_delta);
        out.push(("roi/fc/w".into(), &mut self.roi_fc.w));
        if let Some(b) = &mut self.roi_fc.b {
            out.push(("roi/fc/b".into(), b));
        }
        out.push(("roi/cls/w".into(), &mut self.roi_cls.w));
        if let Some(b) = &mut self.roi_cls.b {
            out.push(("roi/cls/b".into(), b));
        }
        out.push(("roi/delta/w".into(), &mut self.roi_delta.w));
        if let Some(b) = &mut self.roi_delta.b {
            out.push(("roi/delta/b".into(), b));
        }
        out
    }

    /// Load values from a named-tensor map (checkpoint restore). Shapes must
    /// match the constructed architecture.
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

    /// Layer description for complexity accounting. ROI heads are counted
    /// once per eval-mode proposal.
    pub fn description(&self) -> ModelDesc {
        let mut layers = Vec::new();
        let mut div = 1usize;
        for l in &self.backbone {
            div *= l.stride;
            layers.push(LayerDesc::Conv {
                cin: l.w.shape()[1],
                cout: l.w.shape()[0],
                k: l.w.shape()[2],
                bias: l.b.is_some(),
                out_div: div,
                count: 1,
            });
        }
        for l in [&self.rpn_shared, &self.rpn_obj, &self.rpn_delta] {
            layers.push(LayerDesc::Conv {
                cin: l.w.shape()[1],
                cout: l.w.shape()[0],
                k: l.w.shape()[2],
                bias: l.b.is_some(),
                out_div: div,
                count: 1,
            });
        }
        for l in [&self.roi_fc, &self.roi_cls, &self.roi_delta] {
            layers.push(LayerDesc::Linear {
                cin: l.w.shape()[1],
                cout: l.w.shape()[0],
                bias: l.b.is_some(),
                count: RPN_TOPK_EVAL,
            });
        }
        ModelDesc {
            name: "detector".into(),
            layers,
        }
    }
}

/// Tape bindings for the detector parameters of one graph.
pub struct DetectorVars {
    pub backbone: Vec<ConvVars>,
    pub rpn_shared: ConvVars,
    pub rpn_obj: ConvVars,
    pub rpn_delta: ConvVars,
    pub roi_fc: LinearVars,
    pub roi_cls: LinearVars,
    pub roi_delta: LinearVars,
    pub num_classes: usize,
    pub trainable: bool,
}

/// Bind all detector parameters as tape leaves, registering names so the
/// optimizer can read gradients back.
pub fn bind_detector(
    tape: &mut Tape,
    params: &DetectorParams,
    trainable: bool,
    reg: &mut Vec<(String, Var)>,
) -> DetectorVars {
    DetectorVars {
        backbone: params
            .backbone
            .iter()
            .enumerate()
            .map(|(i, l)| bind_conv(tape, l, trainable, &format!("backbone/{i}"), reg))
            .collect(),
        rpn_shared: bind_conv(tape, &params.rpn_shared, trainable, "rpn/shared", reg),
        rpn_obj: bind_conv(tape, &params.rpn_obj, trainable, "rpn/obj", reg),
        rpn_delta: bind_conv(tape, &params.rpn_delta, trainable, "rpn/delta", reg),
        roi_fc: bind_linear(tape, &params.roi_fc, trainable, "roi/fc", reg),
        roi_cls: bind_linear(tape, &params.roi_cls, trainable, "roi/cls", reg),
        roi_delta: bind_linear(tape, &params.roi_delta, trainable, "roi/delta", reg),
        num_classes: params.num_classes,
        trainable,
    }
}

/// Collect gradients for registered parameter leaves after `backward`.
pub fn collect_grads(tape: &Tape, reg: &[(String, Var)]) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (name, var) in reg {
        if let Some(g) = tape.grad(*var) {
            out.insert(name.clone(), g.clone());
        }
    }
    out
}

fn check_img(img: &Image) -> Result<()> {
    if img.pixels.shape() != [3, IMG_SIZE, IMG_SIZE] {
        return Err(Error::ShapeMismatch {
            expected: format!("[3, {IMG_SIZE}, {IMG_SIZE}]"),
            got: format!("{:?}", img.pixels.shape()),
        });
    }
    Ok(())
}

/// Backbone forward on an already-placed input var (image pixels or a DTM
/// output); returns the (64, 12, 12) feature map `z`.
pub fn backbone_forward_var(tape: &mut Tape, vars: &DetectorVars, input: Var) -> Var {
    let mut x = input;
    for conv in &vars.backbone {
        x = tape.conv2d(x, conv.w, conv.b, conv.stride, conv.pad);
        x = tape.relu(x);
    }
    x
}

/// Convenience: bind an image leaf and run the backbone.
pub fn backbone_forward(tape: &mut Tape, vars: &DetectorVars, img: &Image) -> Result<Var> {
    check_img(img)?;
    let input = tape.leaf(img.pixels.clone(), false);
    Ok(backbone_forward_var(tape, vars, input))
}

/// RPN heads on `z`: shared 3x3 conv + ReLU, then 1x1 objectness and box
/// delta maps.
pub fn rpn_heads(tape: &mut Tape, vars: &DetectorVars, z: Var) -> (Var, Var) {
    let s = tape.conv2d(z, vars.rpn_shared.w, vars.rpn_shared.b, 1, 1);
    let s = tape.relu(s);
    let obj = tape.conv2d(s, vars.rpn_obj.w, vars.rpn_obj.b, 1, 0);
    let delta = tape.conv2d(s, vars.rpn_delta.w, vars.rpn_delta.b, 1, 0);
    (obj, delta)
}

/// The three square anchors per feature cell, in image pixels. Index layout
/// is `(side, row, col)` row-major, matching the objectness map.
pub fn anchors() -> Vec<BBox> {
    let mut out = Vec::with_capacity(ANCHOR_SIDES.len() * FEAT_SIZE * FEAT_SIZE);
    for &side in &ANCHOR_SIDES {
        for i in 0..FEAT_SIZE {
            for j in 0..FEAT_SIZE {
                let cx = (j * STRIDE) as f64 + STRIDE as f64 / 2.0;
                let cy = (i * STRIDE) as f64 + STRIDE as f64 / 2.0;
                out.push(BBox {
                    x: cx - side / 2.0,
                    y: cy - side / 2.0,
                    w: side,
                    h: side,
                });
            }
        }
    }
    out
}

/// (dx/wa, dy/ha, ln(w/wa), ln(h/ha)) against an anchor or proposal.
pub fn encode_delta(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (acx, acy) = (anchor.x + anchor.w / 2.0, anchor.y + anchor.h / 2.0);
    let (gcx, gcy) = (gt.x + gt.w / 2.0, gt.y + gt.h / 2.0);
    [
        (gcx - acx) / anchor.w,
        (gcy - acy) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

/// Decode, clip to the image, and enforce a 1 px minimum so downstream
/// gradients stay defined.
pub fn decode_delta(anchor: &BBox, d: &[f64; 4]) -> BBox {
    let (acx, acy) = (anchor.x + anchor.w / 2.0, anchor.y + anchor.h / 2.0);
    let cx = acx + d[0].clamp(-DELTA_CLAMP, DELTA_CLAMP) * anchor.w;
    let cy = acy + d[1].clamp(-DELTA_CLAMP, DELTA_CLAMP) * anchor.h;
    let w = anchor.w * d[2].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let h = anchor.h * d[3].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let img = IMG_SIZE as f64;
    let mut x0 = (cx - w / 2.0).clamp(0.0, img);
    let mut y0 = (cy - h / 2.0).clamp(0.0, img);
    let x1 = (cx + w / 2.0).clamp(0.0, img);
    let y1 = (cy + h / 2.0).clamp(0.0, img);
    let mut w = x1 - x0;
    let mut h = y1 - y0;
    if w < 1.0 {
        w = 1.0;
        x0 = x0.min(img - 1.0);
    }
    if h < 1.0 {
        h = 1.0;
        y0 = y0.min(img - 1.0);
    }
    BBox { x: x0, y: y0, w, h }
}

/// Greedy NMS by descending score, ties broken by lower index; boxes with
/// IoU >= `iou_thresh` against a kept box are suppressed.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order {
            if j != i && !suppressed[j] && iou(&boxes[i], &boxes[j]) >= iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RpnMode {
    Train,
    Eval,
}

/// A decoded, clipped RPN proposal.
#[derive(Clone, Copy, Debug)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    /// Flat anchor index this proposal was decoded from.
    pub anchor: usize,
}

/// Score all anchors, decode deltas, clip, NMS at IoU 0.7 and keep the
/// top-64 (train) / top-32 (eval) by score.
pub fn rpn_propose(obj: &Tensor, delta: &Tensor, mode: RpnMode) -> Vec<Proposal> {
    let anchors = anchors();
    let n = anchors.len();
    let plane = FEAT_SIZE * FEAT_SIZE;
    let mut boxes = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for (a, anchor) in anchors.iter().enumerate() {
        let k = a / plane;
        let cell = a % plane;
        let d = [
            delta.data()[(4 * k) * plane + cell],
            delta.data()[(4 * k + 1) * plane + cell],
            delta.data()[(4 * k + 2) * plane + cell],
            delta.data()[(4 * k + 3) * plane + cell],
        ];
        boxes.push(decode_delta(anchor, &d));
        scores.push(sigmoid(obj.data()[a]));
    }
    let kept = nms(&boxes, &scores, RPN_NMS_IOU);
    let topk = match mode {
        RpnMode::Train => RPN_TOPK_TRAIN,
        RpnMode::Eval => RPN_TOPK_EVAL,
    };
    kept.into_iter()
        .take(topk)
        .map(|i| Proposal {
            bbox: boxes[i],
            score: scores[i],
            anchor: i,
        })
        .collect()
}

/// Bilinear crop-resize of `z` over `bx` (image pixels) to a flattened
/// length-1024 instance feature. Degenerate boxes are rejected.
pub fn roi_extract(tape: &mut Tape, z: Var, bx: &BBox) -> Result<Var> {
    if bx.w < 1.0 || bx.h < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate roi box {bx:?}"
        )));
    }
    Ok(tape.roi_bilinear(z, [bx.x, bx.y, bx.w, bx.h], ROI_SIZE, STRIDE as f64))
}

/// ROI head: shared perceptron to 256, then class logits over C+1 and
/// per-class box deltas. Index C is background.
pub fn roi_head(tape: &mut Tape, vars: &DetectorVars, p: Var) -> (Var, Var) {
    let h = tape.linear(p, vars.roi_fc.w, vars.roi_fc.b);
    let h = tape.relu(h);
    let cls = tape.linear(h, vars.roi_cls.w, vars.roi_cls.b);
    let delta = tape.linear(h, vars.roi_delta.w, vars.roi_delta.b);
    (cls, delta)
}

/// One shared forward pass per image: `z` plus the RPN head maps.
pub struct ImageForward {
    pub z: Var,
    pub obj: Var,
    pub delta: Var,
}

pub fn forward_image(tape: &mut Tape, vars: &DetectorVars, img: &Image) -> Result<ImageForward> {
    let z = backbone_forward(tape, vars, img)?;
    let (obj, delta) = rpn_heads(tape, vars, z);
    Ok(ImageForward { z, obj, delta })
}

/// Anchor labels for one image: positives (with matched ground truth),
/// negatives, rest ignored.
struct AnchorAssignment {
    positive: Vec<(usize, usize)>, // (anchor index, gt index)
    negative: Vec<usize>,
}

fn assign_anchors(gts: &[BoxAnnotation]) -> AnchorAssignment {
    let anchors = anchors();
    if gts.is_empty() {
        return AnchorAssignment {
            positive: vec![],
            negative: (0..anchors.len()).collect(),
        };
    }
    let mut max_iou = vec![0.0f64; anchors.len()];
    let mut argmax_gt = vec![0usize; anchors.len()];
    let mut gt_best: Vec<(f64, usize)> = vec![(-1.0, 0); gts.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(anchor, &gt.bbox());
            if v > max_iou[ai] {
                max_iou[ai] = v;
                argmax_gt[ai] = gi;
            }
            if v > gt_best[gi].0 {
                gt_best[gi] = (v, ai);
            }
        }
    }
    let mut is_pos = vec![false; anchors.len()];
    for (ai, &m) in max_iou.iter().enumerate() {
        if m >= ANCHOR_POS_IOU {
            is_pos[ai] = true;
        }
    }
    // the best anchor for each ground truth is positive regardless of IoU
    for (gi, &(_, ai)) in gt_best.iter().enumerate() {
        is_pos[ai] = true;
        argmax_gt[ai] = gi;
    }
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for ai in 0..anchors.len() {
        if is_pos[ai] {
            positive.push((ai, argmax_gt[ai]));
        } else if max_iou[ai] < ANCHOR_NEG_IOU {
            negative.push(ai);
        }
    }
    AnchorAssignment { positive, negative }
}

/// Sampled ROI batch for the head losses: positive boxes with their class
/// and delta targets, plus background boxes. Proposal boxes are treated as
/// constants by the loss (the standard detached-proposal semantics), so the
/// plan can also be frozen by gradient checks.
pub struct RoiPlan {
    pub positives: Vec<(BBox, usize, [f64; 4])>,
    pub backgrounds: Vec<BBox>,
}

/// Assign and subsample the ROI batch from train-mode proposals plus the
/// ground-truth boxes.
pub fn plan_rois(
    obj: &Tensor,
    delta: &Tensor,
    gts: &[BoxAnnotation],
    sample_seed: u64,
) -> RoiPlan {
    let proposals = rpn_propose(obj, delta, RpnMode::Train);
    let mut candidates: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    candidates.extend(gts.iter().map(|g| g.bbox()));

    let mut positives: Vec<(BBox, usize, [f64; 4])> = Vec::new();
    let mut backgrounds: Vec<BBox> = Vec::new();
    for c in &candidates {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(c, &gt.bbox());
            if best.map(|(_, bv)| v > bv).unwrap_or(true) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, v)) if v >= ROI_POS_IOU => {
                positives.push((*c, gts[gi].class, encode_delta(c, &gts[gi].bbox())));
            }
            _ => backgrounds.push(*c),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    positives.shuffle(&mut rng);
    backgrounds.shuffle(&mut rng);
    positives.truncate(ROI_MAX_POS);
    backgrounds.truncate(ROI_BATCH - positives.len().min(ROI_BATCH));
    RoiPlan {
        positives,
        backgrounds,
    }
}

/// Supervised detection loss on a shared forward pass with a precomputed
/// ROI plan: balanced RPN objectness cross-entropy, smooth-L1 on positive
/// anchor deltas, ROI-head softmax cross-entropy over C+1 and smooth-L1 on
/// matched-class deltas.
pub fn supervised_loss_planned(
    tape: &mut Tape,
    vars: &DetectorVars,
    fwd: &ImageForward,
    gts: &[BoxAnnotation],
    plan: &RoiPlan,
) -> Result<Var> {
    let assignment = assign_anchors(gts);
    let anchors = anchors();
    let plane = FEAT_SIZE * FEAT_SIZE;
    let mut terms: Vec<(f64, Var)> = Vec::new();

    // RPN objectness: positives and negatives weighted equally so a handful
    // of positives is not drowned by ~400 negatives.
    if !assignment.positive.is_empty() {
        let idxs: Vec<usize> = assignment.positive.iter().map(|&(a, _)| a).collect();
        let pos_logits = tape.gather_flat(fwd.obj, idxs);
        let n = assignment.positive.len();
        let pos_loss = tape.bce_with_logits_mean(pos_logits, vec![1.0; n]);
        terms.push((0.5, pos_loss));
    }
    if !assignment.negative.is_empty() {
        let neg_logits = tape.gather_flat(fwd.obj, assignment.negative.clone());
        let n = assignment.negative.len();
        let neg_loss = tape.bce_with_logits_mean(neg_logits, vec![0.0; n]);
        let w = if assignment.positive.is_empty() {
            1.0
        } else {
            0.5
        };
        terms.push((w, neg_loss));
    }

    // RPN box regression on positive anchors.
    if !assignment.positive.is_empty() {
        let mut idxs = Vec::new();
        let mut targets = Vec::new();
        for &(ai, gi) in &assignment.positive {
            let k = ai / plane;
            let cell = ai % plane;
            for c in 0..4 {
                idxs.push((4 * k + c) * plane + cell);
            }
            targets.extend(encode_delta(&anchors[ai], &gts[gi].bbox()));
        }
        let pred = tape.gather_flat(fwd.delta, idxs);
        let l1 = tape.smooth_l1_sum(pred, targets);
        terms.push((1.0 / assignment.positive.len() as f64, l1));
    }

    let n_samples = plan.positives.len() + plan.backgrounds.len();
    if n_samples > 0 {
        let inv = 1.0 / n_samples as f64;
        for (bx, class, delta_target) in &plan.positives {
            let p = roi_extract(tape, fwd.z, bx)?;
            let (cls, delta) = roi_head(tape, vars, p);
            let ce = tape.softmax_cross_entropy(cls, *class);
            terms.push((inv, ce));
            let idxs: Vec<usize> = (4 * class..4 * class + 4).collect();
            let pred = tape.gather_flat(delta, idxs);
            let l1 = tape.smooth_l1_sum(pred, delta_target.to_vec());
            terms.push((inv, l1));
        }
        let background_class = vars.num_classes;
        for bx in &plan.backgrounds {
            let p = roi_extract(tape, fwd.z, bx)?;
            let (cls, _) = roi_head(tape, vars, p);
            let ce = tape.softmax_cross_entropy(cls, background_class);
            terms.push((inv, ce));
        }
    }

    Ok(tape.weighted_sum(&terms))
}

/// Supervised loss with the ROI plan sampled from the current forward.
/// `sample_seed` drives the deterministic ROI subsampling.
pub fn supervised_loss_on(
    tape: &mut Tape,
    vars: &DetectorVars,
    fwd: &ImageForward,
    gts: &[BoxAnnotation],
    sample_seed: u64,
) -> Result<Var> {
    let plan = plan_rois(tape.value(fwd.obj), tape.value(fwd.delta), gts, sample_seed);
    supervised_loss_planned(tape, vars, fwd, gts, &plan)
}

/// Standalone supervised loss: forward plus [`supervised_loss_on`].
pub fn supervised_loss(
    tape: &mut Tape,
    vars: &DetectorVars,
    img: &Image,
    gts: &[BoxAnnotation],
    sample_seed: u64,
) -> Result<Var> {
    let fwd = forward_image(tape, vars, img)?;
    supervised_loss_on(tape, vars, &fwd, gts, sample_seed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// Inference: backbone, eval-mode RPN, ROI heads, per-class NMS at IoU 0.5
/// and a score threshold.
pub fn predict(phi: &DetectorParams, img: &Image, score_thresh: f64) -> Result<Vec<Detection>> {
    let mut tape = Tape::new();
    let mut reg = Vec::new();
    let vars = bind_detector(&mut tape, phi, false, &mut reg);
    let fwd = forward_image(&mut tape, &vars, img)?;
    let proposals = rpn_propose(tape.value(fwd.obj), tape.value(fwd.delta), RpnMode::Eval);

    let mut by_class: Vec<Vec<(BBox, f64)>> = vec![Vec::new(); phi.num_classes];
    for prop in &proposals {
        let p = roi_extract(&mut tape, fwd.z, &prop.bbox)?;
        let (cls, delta) = roi_head(&mut tape, &vars, p);
        let logits = tape.value(cls).data().to_vec();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let deltas = tape.value(delta).data().to_vec();
        for c in 0..phi.num_classes {
            let score = exps[c] / denom;
            if score < score_thresh {
                continue;
            }
            let d = [
                deltas[4 * c],
                deltas[4 * c + 1],
                deltas[4 * c + 2],
                deltas[4 * c + 3],
            ];
            by_class[c].push((decode_delta(&prop.bbox, &d), score));
        }
    }
    let mut out = Vec::new();
    for (c, dets) in by_class.into_iter().enumerate() {
        if dets.is_empty() {
            continue;
        }
        let boxes: Vec<BBox> = dets.iter().map(|d| d.0).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
        for i in nms(&boxes, &scores, PREDICT_NMS_IOU) {
            out.push(Detection {
                bbox: boxes[i],
                class: c,
                score: scores[i],
            });
        }
    }
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    Ok(out)
}

/// Globally average-pooled backbone feature (used for domain-shift
/// diagnostics and feature plots).
pub fn pooled_backbone_feature(phi: &DetectorParams, img: &Image) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut reg = Vec::new();
    let vars = bind_detector(&mut tape, phi, false, &mut reg);
    let z = backbone_forward(&mut tape, &vars, img)?;
    let p = tape.global_avg_pool(z);
    Ok(tape.value(p).data().to_vec())
}

/// Objectness scores of the eval-mode proposals for one image.
pub fn rpn_objectness_scores(phi: &DetectorParams, img: &Image) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut reg = Vec::new();
    let vars = bind_detector(&mut tape, phi, false, &mut reg);
    let fwd = forward_image(&mut tape, &vars, img)?;
    let proposals = rpn_propose(tape.value(fwd.obj), tape.value(fwd.delta), RpnMode::Eval);
    Ok(proposals.iter().map(|p| p.score).collect())
}
