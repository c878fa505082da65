//! Detection metrics and diagnostics: IoU, all-points average precision and
//! mAP@0.5, cosine domain-shift distance, confidence histograms, complexity
//! accounting (params / FLOPs) and a deterministic 2-D PCA projection for
//! feature-overlap plots.

use std::collections::BTreeMap;

use crate::detector::{self, Detection, DetectorParams};
use crate::error::{Error, Result};
use crate::synth::{BoxAnnotation, DomainDataset};

/// Axis-aligned box, corner + size, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

/// Intersection over union. Zero for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per-dataset evaluation summary (Eq.-9-style mAP over the classes that
/// actually appear in the ground truth).
#[derive(Clone, Debug)]
pub struct EvalReport {
    /// Dataset this report was computed on.
    pub target: String,
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map: f64,
    pub detections: usize,
    pub ground_truths: usize,
}

/// One scored detection tagged with the image it came from, for pooled
/// dataset-level AP computation.
#[derive(Clone, Copy, Debug)]
pub struct TaggedDetection {
    pub image: usize,
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// All-points interpolated AP for one class over pooled detections.
/// Detections are greedily matched in descending-score order, each ground
/// truth at most once. Returns `None` when the class has no ground truths
/// (excluded from mAP rather than scored zero).
pub fn average_precision_pooled(
    dets: &[TaggedDetection],
    gts: &[(usize, BBox, usize)],
    class: usize,
    iou_thresh: f64,
) -> Option<f64> {
    let class_gts: Vec<(usize, BBox)> = gts
        .iter()
        .filter(|(_, _, c)| *c == class)
        .map(|&(img, b, _)| (img, b))
        .collect();
    if class_gts.is_empty() {
        return None;
    }
    let mut class_dets: Vec<&TaggedDetection> =
        dets.iter().filter(|d| d.class == class).collect();
    class_dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.image.cmp(&b.image))
    });

    let mut matched = vec![false; class_gts.len()];
    let mut tps = Vec::with_capacity(class_dets.len());
    for det in &class_dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, (img, gbox)) in class_gts.iter().enumerate() {
            if matched[gi] || *img != det.image {
                continue;
            }
            let v = iou(&det.bbox, gbox);
            if v >= iou_thresh && best.map(|(_, bv)| v > bv).unwrap_or(true) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            tps.push(true);
        } else {
            tps.push(false);
        }
    }

    let n_gt = class_gts.len() as f64;
    let mut precisions = Vec::with_capacity(tps.len());
    let mut recalls = Vec::with_capacity(tps.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in &tps {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt);
    }
    // precision envelope, integrated over recall (VOC-2010 / all-points)
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recalls.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// Single-group AP (the spec-level operation): all detections and ground
/// truths belong to one image.
pub fn average_precision(
    dets: &[Detection],
    gts: &[BoxAnnotation],
    class: usize,
    iou_thresh: f64,
) -> Option<f64> {
    let tagged: Vec<TaggedDetection> = dets
        .iter()
        .map(|d| TaggedDetection {
            image: 0,
            bbox: d.bbox,
            class: d.class,
            score: d.score,
        })
        .collect();
    let gts: Vec<(usize, BBox, usize)> = gts.iter().map(|g| (0, g.bbox(), g.class)).collect();
    average_precision_pooled(&tagged, &gts, class, iou_thresh)
}

/// mAP@0.5 over a dataset's eval split using the standard inference path.
pub fn map_over_dataset(phi: &DetectorParams, dataset: &DomainDataset) -> Result<EvalReport> {
    if dataset.eval_len() == 0 {
        return Err(Error::InvalidArgument("empty eval set".into()));
    }
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for i in 0..dataset.eval_len() {
        let (img, anns) = dataset.eval_item(i);
        for d in detector::predict(phi, img, detector::DEFAULT_SCORE_THRESH)? {
            dets.push(TaggedDetection {
                image: i,
                bbox: d.bbox,
                class: d.class,
                score: d.score,
            });
        }
        for a in anns {
            gts.push((i, a.bbox(), a.class));
        }
    }
    Ok(report_from_pool(&dataset.spec.name, &dets, &gts))
}

/// Build an [`EvalReport`] from pooled detections/ground truths.
pub fn report_from_pool(
    target: &str,
    dets: &[TaggedDetection],
    gts: &[(usize, BBox, usize)],
) -> EvalReport {
    let mut classes: Vec<usize> = gts.iter().map(|&(_, _, c)| c).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class_ap = BTreeMap::new();
    for &c in &classes {
        if let Some(ap) = average_precision_pooled(dets, gts, c, 0.5) {
            per_class_ap.insert(c, ap);
        }
    }
    let map = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    EvalReport {
        target: target.to_string(),
        per_class_ap,
        map,
        detections: dets.len(),
        ground_truths: gts.len(),
    }
}

/// `1 - cos(mu_A, mu_B)` between mean pooled backbone features of two
/// datasets' eval images, computed with a source-only detector.
pub fn cosine_domain_shift(
    phi: &DetectorParams,
    a: &DomainDataset,
    b: &DomainDataset,
) -> Result<f64> {
    let mean_feature = |ds: &DomainDataset| -> Result<Vec<f64>> {
        if ds.eval_len() == 0 {
            return Err(Error::InvalidArgument("empty eval set".into()));
        }
        let mut acc: Option<Vec<f64>> = None;
        for i in 0..ds.eval_len() {
            let f = detector::pooled_backbone_feature(phi, ds.eval_item(i).0)?;
            match &mut acc {
                None => acc = Some(f),
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&f) {
                        *a += v;
                    }
                }
            }
        }
        let mut acc = acc.unwrap();
        for v in &mut acc {
            *v /= ds.eval_len() as f64;
        }
        Ok(acc)
    };
    let (ma, mb) = (mean_feature(a)?, mean_feature(b)?);
    let dot: f64 = ma.iter().zip(&mb).map(|(x, y)| x * y).sum();
    let na: f64 = ma.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = mb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - dot / (na * nb))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HistogramStage {
    /// Objectness scores of all eval-mode proposals.
    Rpn,
    /// Softmax scores of detections predicted as the given class.
    Classifier,
}

/// Score histogram with uniform bin edges on [0, 1].
pub fn confidence_histogram(
    phi: &DetectorParams,
    dataset: &DomainDataset,
    stage: HistogramStage,
    class: usize,
    bins: usize,
) -> Result<Vec<u64>> {
    assert!(bins > 0);
    let mut hist = vec![0u64; bins];
    let mut add = |score: f64| {
        let b = ((score * bins as f64) as usize).min(bins - 1);
        hist[b] += 1;
    };
    for i in 0..dataset.eval_len() {
        let img = dataset.eval_item(i).0;
        match stage {
            HistogramStage::Rpn => {
                for s in detector::rpn_objectness_scores(phi, img)? {
                    add(s);
                }
            }
            HistogramStage::Classifier => {
                for d in detector::predict(phi, img, detector::DEFAULT_SCORE_THRESH)? {
                    if d.class == class {
                        add(d.score);
                    }
                }
            }
        }
    }
    Ok(hist)
}

/// L1 distance between two histograms after normalizing each to unit mass.
pub fn histogram_l1(a: &[u64], b: &[u64]) -> f64 {
    let (sa, sb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    if sa == 0.0 || sb == 0.0 {
        return if sa == sb { 0.0 } else { 2.0 };
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / sa - y as f64 / sb).abs())
        .sum()
}

/// One layer of a model description, enough to count parameters and MACs.
/// `out_div` is the output's downsampling factor relative to the model input;
/// `count` is a multiplicity (e.g. a per-proposal head applied 32 times).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerDesc {
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        out_div: usize,
        count: usize,
    },
    Linear {
        cin: usize,
        cout: usize,
        bias: bool,
        count: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelDesc {
    pub name: String,
    pub layers: Vec<LayerDesc>,
}

/// Exact parameter and floating-point-operation counts. The paper-facing
/// FLOPs number is convention-dependent, so both 1xMAC and 2xMAC totals are
/// reported.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub flops_1mac: u64,
    pub flops_2mac: u64,
}

pub fn complexity_report(desc: &ModelDesc, input_hw: (usize, usize)) -> ComplexityReport {
    let (h, w) = input_hw;
    let mut params = 0u64;
    let mut macs = 0u64;
    for layer in &desc.layers {
        match *layer {
            LayerDesc::Conv {
                cin,
                cout,
                k,
                bias,
                out_div,
                count,
            } => {
                let p = (cout * cin * k * k + if bias { cout } else { 0 }) as u64;
                let oh = h.div_ceil(out_div) as u64;
                let ow = w.div_ceil(out_div) as u64;
                params += p;
                macs += (cout * cin * k * k) as u64 * oh * ow * count as u64;
            }
            LayerDesc::Linear {
                cin,
                cout,
                bias,
                count,
            } => {
                params += (cout * cin + if bias { cout } else { 0 }) as u64;
                macs += (cout * cin * count) as u64;
            }
        }
    }
    ComplexityReport {
        name: desc.name.clone(),
        params,
        macs,
        flops_1mac: macs,
        flops_2mac: macs * 2,
    }
}

/// Deterministic PCA projection to two components over pooled labeled
/// vector collections. The sign of each component is fixed so its
/// largest-magnitude loading is positive; rank-deficient inputs pad with a
/// zero component.
pub fn feature_projection_2d(
    sets: &[(String, Vec<Vec<f64>>)],
) -> Result<Vec<(String, Vec<[f64; 2]>)>> {
    let total: usize = sets.iter().map(|(_, v)| v.len()).sum();
    if total < 3 {
        return Err(Error::InvalidArgument(
            "feature projection needs at least 3 vectors".into(),
        ));
    }
    let dim = sets
        .iter()
        .flat_map(|(_, v)| v.iter())
        .map(|v| v.len())
        .next()
        .unwrap_or(0);
    if dim == 0
        || sets
            .iter()
            .flat_map(|(_, v)| v.iter())
            .any(|v| v.len() != dim)
    {
        return Err(Error::InvalidArgument(
            "feature vectors must share a nonzero dimension".into(),
        ));
    }

    let mut mean = vec![0.0; dim];
    for v in sets.iter().flat_map(|(_, v)| v.iter()) {
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= total as f64;
    }

    // covariance (biased), dim x dim
    let mut cov = vec![0.0; dim * dim];
    for v in sets.iter().flat_map(|(_, v)| v.iter()) {
        let centered: Vec<f64> = v.iter().zip(&mean).map(|(&x, &m)| x - m).collect();
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in 0..dim {
                cov[i * dim + j] += ci * centered[j];
            }
        }
    }
    for c in &mut cov {
        *c /= total as f64;
    }

    let (v1, l1) = top_eigenvector(&cov, dim, 1);
    // deflate and take the second component
    let mut cov2 = cov.clone();
    for i in 0..dim {
        for j in 0..dim {
            cov2[i * dim + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (v2, l2) = top_eigenvector(&cov2, dim, 2);
    let v2 = if l2 > 1e-12 { v2 } else { vec![0.0; dim] };

    let fix_sign = |mut v: Vec<f64>| -> Vec<f64> {
        if let Some((_, &val)) = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        {
            if val < 0.0 {
                for x in &mut v {
                    *x = -*x;
                }
            }
        }
        v
    };
    let v1 = fix_sign(v1);
    let v2 = fix_sign(v2);

    let project = |v: &[f64]| -> [f64; 2] {
        let c: Vec<f64> = v.iter().zip(&mean).map(|(&x, &m)| x - m).collect();
        [
            c.iter().zip(&v1).map(|(a, b)| a * b).sum(),
            c.iter().zip(&v2).map(|(a, b)| a * b).sum(),
        ]
    };
    Ok(sets
        .iter()
        .map(|(label, vs)| (label.clone(), vs.iter().map(|v| project(v)).collect()))
        .collect())
}

/// Dominant eigenvector of a symmetric matrix by power iteration with a
/// deterministic pseudo-random start.
fn top_eigenvector(m: &[f64], dim: usize, salt: u64) -> (Vec<f64>, f64) {
    let mut v: Vec<f64> = (0..dim)
        .map(|i| {
            let h = crate::seeds::derive_idx(0xA11CE, "pca", salt * 10_007 + i as u64);
            (h % 10_000) as f64 / 10_000.0 - 0.5
        })
        .collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..20_000 {
        let mut next = vec![0.0; dim];
        for i in 0..dim {
            let row = &m[i * dim..(i + 1) * dim];
            next[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let new_lambda: f64 = next.iter().zip(&v).map(|(a, b)| a * b).sum();
        let norm = normalize(&mut next);
        if norm < 1e-300 {
            return (vec![0.0; dim], 0.0);
        }
        // convergence on the vector itself (the eigenvalue settles earlier)
        let sign = if new_lambda < 0.0 { -1.0 } else { 1.0 };
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - sign * b).abs())
            .fold(0.0, f64::max);
        lambda = new_lambda;
        v = next;
        if delta <= 1e-14 {
            break;
        }
    }
    (v, lambda)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}
