//! Shared test support: independent oracles (brute-force PR integration,
//! greedy matching) and a central-finite-difference harness for whole-loss
//! gradient checks.
//!
//! Everything here is deliberately written from the metric definitions, not
//! by calling the library's own evaluation path.

use mtda_core::autodiff::{Tape, Var};
use mtda_core::eval::BBox;
use mtda_core::tensor::Tensor;

/// Independent IoU (corner arithmetic written out).
pub fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let ax1 = a.x + a.w;
    let ay1 = a.y + a.h;
    let bx1 = b.x + b.w;
    let by1 = b.y + b.h;
    let iw = ax1.min(bx1) - a.x.max(b.x);
    let ih = ay1.min(by1) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let ua = a.w * a.h + b.w * b.h - inter;
    if ua <= 0.0 {
        0.0
    } else {
        inter / ua
    }
}

/// Brute-force all-points AP for one class within pooled (image, box, score)
/// detections: greedy matching re-derived from the definition, then
/// exhaustive integration of the precision envelope over achieved recall
/// levels: AP = sum_k (1/n_gt) * max{precision at recall >= k/n_gt}.
pub fn ap_oracle(
    dets: &[(usize, BBox, f64)], // (image, box, score), one class
    gts: &[(usize, BBox)],
    iou_thresh: f64,
) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j].2
            .partial_cmp(&dets[i].2)
            .unwrap()
            .then(dets[i].0.cmp(&dets[j].0))
    });
    let mut taken = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(dets.len());
    for &i in &order {
        let (img, dbox, _) = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gimg, gbox)) in gts.iter().enumerate() {
            if taken[gi] || gimg != img {
                continue;
            }
            let v = iou_oracle(dbox, gbox);
            if v >= iou_thresh && best.map(|(_, b)| v > b).unwrap_or(true) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            tp_flags.push(true);
        } else {
            tp_flags.push(false);
        }
    }
    let n_gt = gts.len();
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in &tp_flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    let mut ap = 0.0;
    for k in 1..=n_gt {
        let r = k as f64 / n_gt as f64;
        let best_prec = precisions
            .iter()
            .zip(&recalls)
            .filter(|(_, &rec)| rec + 1e-12 >= r)
            .map(|(&p, _)| p)
            .fold(0.0f64, f64::max);
        ap += best_prec / n_gt as f64;
    }
    Some(ap)
}

/// Mean over classes present in the ground truth of the brute-force AP.
pub fn map_oracle(
    dets: &[(usize, BBox, usize, f64)], // (image, box, class, score)
    gts: &[(usize, BBox, usize)],
    iou_thresh: f64,
) -> f64 {
    let mut classes: Vec<usize> = gts.iter().map(|&(_, _, c)| c).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in classes {
        let class_dets: Vec<(usize, BBox, f64)> = dets
            .iter()
            .filter(|&&(_, _, dc, _)| dc == c)
            .map(|&(i, b, _, s)| (i, b, s))
            .collect();
        let class_gts: Vec<(usize, BBox)> = gts
            .iter()
            .filter(|&&(_, _, gc)| gc == c)
            .map(|&(i, b, _)| (i, b))
            .collect();
        if let Some(ap) = ap_oracle(&class_dets, &class_gts, iou_thresh) {
            sum += ap;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Relative error with an absolute floor.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-finite-difference check of one scalar loss against the analytic
/// gradient; returns the number of coordinates checked.
///
/// `build` must reconstruct the full graph from a parameter override map and
/// return (tape, loss var, parameter registry). `n_coords` coordinates are
/// drawn (seeded by `salt`) from the parameters that actually received a
/// gradient. Detection losses are piecewise smooth (proposal selection is
/// discrete), so a failed check is retried with smaller steps; a genuine
/// gradient bug stays wrong as the step shrinks, while a piece boundary
/// inside the step window vanishes.
#[allow(clippy::type_complexity)]
pub fn fd_check_loss(
    loss_name: &'static str,
    build: &dyn Fn(&std::collections::BTreeMap<String, Tensor>) -> (Tape, Var, Vec<(String, Var)>),
    n_coords: usize,
    salt: u64,
) -> usize {
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;
    let (mut tape, loss, reg) = build(&BTreeMap::new());
    tape.backward(loss);
    let grads: BTreeMap<String, Tensor> = reg
        .iter()
        .filter_map(|(n, v)| tape.grad(*v).map(|g| (n.clone(), g.clone())))
        .collect();
    assert!(!grads.is_empty(), "{loss_name}: no gradients at all");
    let values: BTreeMap<String, Tensor> = reg
        .iter()
        .map(|(n, v)| (n.clone(), tape.value(*v).clone()))
        .collect();

    let eval_at = |name: &str, idx: usize, delta: f64| -> f64 {
        let mut overrides = BTreeMap::new();
        let mut t = values[name].clone();
        t.data_mut()[idx] += delta;
        overrides.insert(name.to_string(), t);
        let (tape, loss, _) = build(&overrides);
        tape.scalar_value(loss)
    };

    let names: Vec<&String> = grads.keys().collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(salt);
    let mut passed = 0usize;
    let mut attempts = 0usize;
    while passed < n_coords {
        attempts += 1;
        assert!(
            attempts <= 4 * n_coords,
            "{loss_name}: too many coordinates sat on selection boundaries"
        );
        let name = names[rng.gen_range(0..names.len())].clone();
        let idx = rng.gen_range(0..grads[&name].len());
        let analytic = grads[&name].data()[idx];
        let fd_at = |step: f64| -> f64 {
            let plus = eval_at(&name, idx, step);
            let minus = eval_at(&name, idx, -step);
            (plus - minus) / (2.0 * step)
        };
        let fd5 = fd_at(1e-5);
        if rel_err(analytic, fd5) < 1e-4 || (analytic.abs() < 1e-10 && fd5.abs() < 1e-7) {
            passed += 1;
            continue;
        }
        // The losses are piecewise smooth in the parameters (proposal
        // selection and matching are discrete). A coordinate within the
        // probe window of a piece boundary shows a finite-difference value
        // that scales like 1/step; a genuine gradient is step-invariant.
        let fd6 = fd_at(1e-6);
        if rel_err(analytic, fd6) < 1e-4 {
            passed += 1; // boundary was inside the 1e-5 window only
            continue;
        }
        let step_consistent = rel_err(fd5, fd6) < 0.5;
        assert!(
            !step_consistent,
            "{loss_name}: finite-difference mismatch at {name}[{idx}]: analytic {analytic}, fd(1e-5) {fd5}, fd(1e-6) {fd6}"
        );
        // boundary within both windows: measurement invalid, resample
    }
    passed
}
