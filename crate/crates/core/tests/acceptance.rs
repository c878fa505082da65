//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers. The training-dependent criteria share lazily built
//! fixtures (pretrained detector, first-target adaptation, transfer module,
//! second-step arms) across three seeds.

mod common;

use std::collections::BTreeMap;

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtda_core::autodiff::{DomainLossKind, Tape, Var};
use mtda_core::da::{
    bind_discriminators, da_terms_for_image, da_terms_planned, image_da_loss, instance_da_loss,
    mean_target_probability, sample_eval_pixels, total_da_loss, DiscriminatorSet,
};
use mtda_core::detector::{bind_detector, forward_image, DetectorParams};
use mtda_core::dtm::{bind_dtm, dtm_apply, dtm_loss, train_dtm, DTMParams, DtmVariant};
use mtda_core::eval::{
    average_precision, complexity_report, map_over_dataset, BBox, TaggedDetection,
};
use mtda_core::seeds;
use mtda_core::synth::{build_domain_dataset, render_scene, DomainDataset, DomainKind, DomainSpec};
use mtda_core::tensor::Tensor;
use mtda_core::trainer::{
    da_phase, ida_step, make_schedule, run_strategy, supervised_phase, AccessLog, HyperParams,
    PhaseExtras, Strategy, StrategyId,
};

// ---------------------------------------------------------------------------
// Desk-scale experiment calibration shared by criteria 5-9 and 11. The
// schedule structure (10x decay at 5/7 of a phase, tenth-rate later phases)
// is the configured default; iteration counts and rates here are the
// acceptance-suite operating point.
const N_TRAIN: usize = 120;
const N_EVAL: usize = 48;
const PRETRAIN_ITERS: usize = 1500;
const PHASE_ITERS: usize = 800;
const DTM_ITERS: usize = 500;
const SWEEP_PHASE_ITERS: usize = 400;
const LR_INITIAL: f64 = 3e-3;
const LR_DECAYED: f64 = 3e-4;
const LAMBDA: f64 = 1.0;
const GRL_LAMBDA: f64 = 1.0;
const DTM_LR: f64 = 0.03;
const LOSS_KIND: DomainLossKind = DomainLossKind::CrossEntropy;
const FOG_RANGE: (f64, f64) = (0.5, 0.8);
const NOISE_SIGMA: (f64, f64) = (0.12, 0.22);
const NOISE_STREAKS: (f64, f64) = (15.0, 30.0);
const SEEDS: [u64; 3] = [1, 2, 3];
// ---------------------------------------------------------------------------

fn hyper(seed: u64) -> HyperParams {
    HyperParams {
        lambda: LAMBDA,
        alpha: 1.0,
        lr_initial: LR_INITIAL,
        lr_decayed: LR_DECAYED,
        iters_per_phase: PHASE_ITERS,
        decay_point: 5.0 / 7.0,
        seed,
        l_c_kind: LOSS_KIND,
        kd_weight: 1.0,
        grl_lambda: GRL_LAMBDA,
        dtm_variant: DtmVariant::Original,
        dtm_lr: DTM_LR,
        dtm_iters: DTM_ITERS,
    }
}

fn datasets(data_seed: u64) -> (DomainDataset, DomainDataset, DomainDataset) {
    let source = DomainSpec::new("source", DomainKind::Source, seeds::derive(data_seed, "source"));
    let mut fog = DomainSpec::new("fog", DomainKind::Fog, seeds::derive(data_seed, "fog"));
    fog.params.insert("a".into(), FOG_RANGE);
    let mut noise = DomainSpec::new("noise", DomainKind::Noise, seeds::derive(data_seed, "noise"));
    noise.params.insert("sigma".into(), NOISE_SIGMA);
    noise.params.insert("streaks".into(), NOISE_STREAKS);
    (
        build_domain_dataset(&source, N_TRAIN, N_EVAL).unwrap(),
        build_domain_dataset(&fog, N_TRAIN, N_EVAL).unwrap(),
        build_domain_dataset(&noise, N_TRAIN, N_EVAL).unwrap(),
    )
}

/// Per-seed state after source pretraining, first-target adaptation and the
/// first transfer-module training.
struct SeedBase {
    seed: u64,
    source: DomainDataset,
    fog: DomainDataset,
    noise: DomainDataset,
    phi0: DetectorParams,
    phi1: DetectorParams,
    disc1: DiscriminatorSet,
    g1: DTMParams,
    log1: AccessLog,
    fog_map0: f64,
    fog_map1: f64,
}

static BASE: Lazy<Vec<SeedBase>> = Lazy::new(|| {
    SEEDS
        .iter()
        .map(|&seed| {
            let (source, fog, noise) = datasets(seed);
            let h = hyper(seed);
            let mut log = AccessLog::new();
            let mut phi =
                DetectorParams::new(seeds::derive(h.seed, "init-det"), 3);
            let pre = HyperParams {
                iters_per_phase: PRETRAIN_ITERS,
                ..h.clone()
            };
            supervised_phase(
                &mut phi,
                &[&source],
                &make_schedule(&pre, 1),
                seeds::derive_idx(h.seed, "phase", 0),
                &mut log,
                0,
            )
            .unwrap();
            let phi0 = phi.clone();
            let fog_map0 = map_over_dataset(&phi0, &fog).unwrap().map;

            let mut disc =
                DiscriminatorSet::new(seeds::derive(h.seed, "init-disc"), h.grl_lambda);
            da_phase(
                &mut phi,
                &mut disc,
                &source,
                &[&fog],
                &make_schedule(&h, 1),
                &PhaseExtras {
                    lambda: h.lambda,
                    kind: h.l_c_kind,
                    pseudo: None,
                    kd: None,
                },
                seeds::derive_idx(h.seed, "phase", 1),
                &mut log,
                1,
            )
            .unwrap();
            let fog_map1 = map_over_dataset(&phi, &fog).unwrap().map;
            let g1 = train_dtm(
                &phi,
                &disc,
                &source,
                h.dtm_variant,
                h.dtm_iters,
                h.dtm_lr,
                h.l_c_kind,
                seeds::derive_idx(h.seed, "dtm", 1),
                &mut log,
                1,
            )
            .unwrap();
            SeedBase {
                seed,
                source,
                fog,
                noise,
                phi0,
                phi1: phi,
                disc1: disc,
                g1,
                log1: log,
                fog_map0,
                fog_map1,
            }
        })
        .collect()
});

/// Second-step arms per seed: sequential fine-tuning, transfer-module
/// replay (trained and untrained), and the distillation baseline.
struct SeedArms {
    uft_fog2: f64,
    uft_noise2: f64,
    mtda_fog2: f64,
    mtda_noise2: f64,
    unt_fog2: f64,
    unt_noise2: f64,
    kd_fog2: f64,
    kd_noise2: f64,
    kd_log: AccessLog,
    uft_log: AccessLog,
    mtda_log: AccessLog,
}

static ARMS: Lazy<Vec<SeedArms>> = Lazy::new(|| {
    BASE.iter()
        .map(|base| {
            let h = hyper(base.seed);
            // uft: continue adaptation on noise without replay
            let mut uft_log = base.log1.clone();
            let mut phi_uft = base.phi1.clone();
            let mut disc_uft = base.disc1.clone();
            da_phase(
                &mut phi_uft,
                &mut disc_uft,
                &base.source,
                &[&base.noise],
                &make_schedule(&h, 2),
                &PhaseExtras {
                    lambda: h.lambda,
                    kind: h.l_c_kind,
                    pseudo: None,
                    kd: None,
                },
                seeds::derive_idx(h.seed, "phase", 2),
                &mut uft_log,
                2,
            )
            .unwrap();

            // mtda_dtm: replay through the frozen step-1 module
            let mut mtda_log = base.log1.clone();
            let mut phi_mtda = base.phi1.clone();
            let mut disc_mtda = base.disc1.clone();
            ida_step(
                &mut phi_mtda,
                &mut disc_mtda,
                &base.g1,
                &base.source,
                &base.noise,
                &h,
                2,
                &mut mtda_log,
            )
            .unwrap();

            // ablation: identical step but with a freshly initialized
            // (identity) transfer module
            let untrained = DTMParams::new(
                h.dtm_variant,
                seeds::derive(seeds::derive_idx(h.seed, "dtm", 1), "dtm-init"),
            );
            let mut unt_log = base.log1.clone();
            let mut phi_unt = base.phi1.clone();
            let mut disc_unt = base.disc1.clone();
            ida_step(
                &mut phi_unt,
                &mut disc_unt,
                &untrained,
                &base.source,
                &base.noise,
                &h,
                2,
                &mut unt_log,
            )
            .unwrap();

            // distillation baseline: its own two phases with a frozen
            // pre-step teacher each time
            let mut kd_log = AccessLog::new();
            let mut phi_kd = base.phi0.clone();
            let mut disc_kd =
                DiscriminatorSet::new(seeds::derive(h.seed, "init-disc"), h.grl_lambda);
            for (step, target) in [(1usize, &base.fog), (2usize, &base.noise)] {
                let teacher = phi_kd.clone();
                da_phase(
                    &mut phi_kd,
                    &mut disc_kd,
                    &base.source,
                    &[target],
                    &make_schedule(&h, step),
                    &PhaseExtras {
                        lambda: h.lambda,
                        kind: h.l_c_kind,
                        pseudo: None,
                        kd: Some((&teacher, h.kd_weight)),
                    },
                    seeds::derive_idx(h.seed, "phase", step as u64),
                    &mut kd_log,
                    step,
                )
                .unwrap();
            }

            let m = |phi: &DetectorParams, ds: &DomainDataset| {
                map_over_dataset(phi, ds).unwrap().map
            };
            SeedArms {
                uft_fog2: m(&phi_uft, &base.fog),
                uft_noise2: m(&phi_uft, &base.noise),
                mtda_fog2: m(&phi_mtda, &base.fog),
                mtda_noise2: m(&phi_mtda, &base.noise),
                unt_fog2: m(&phi_unt, &base.fog),
                unt_noise2: m(&phi_unt, &base.noise),
                kd_fog2: m(&phi_kd, &base.fog),
                kd_noise2: m(&phi_kd, &base.noise),
                kd_log,
                uft_log,
                mtda_log,
            }
        })
        .collect()
});

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v.iter().copied());
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Criterion 1: finite-difference gradient correctness for every loss.
// ---------------------------------------------------------------------------
#[test]
fn criterion_01_gradient_correctness() {
    let start = std::time::Instant::now();
    let phi = DetectorParams::new(101, 3);
    let disc = DiscriminatorSet::new(102, 1.0);
    let g = DTMParams::new(DtmVariant::Original, 103);
    let (src_img, src_anns) = render_scene(7, 2);
    let (tgt_img, _) = render_scene(8, 1);
    let kind = DomainLossKind::Focal { gamma: 2.0 };

    let with_overrides = |phi: &DetectorParams,
                          disc: &DiscriminatorSet,
                          g: &DTMParams,
                          ov: &BTreeMap<String, Tensor>|
     -> (DetectorParams, DiscriminatorSet, DTMParams) {
        let mut phi = phi.clone();
        let mut disc = disc.clone();
        let mut g = g.clone();
        for (name, t) in phi.named_mut() {
            if let Some(v) = ov.get(&name) {
                *t = v.clone();
            }
        }
        for (name, t) in disc.named_mut() {
            if let Some(v) = ov.get(&name) {
                *t = v.clone();
            }
        }
        for (name, t) in g.named_mut() {
            if let Some(v) = ov.get(&name) {
                *t = v.clone();
            }
        }
        (phi, disc, g)
    };

    let mut total = 0usize;

    // Two conventions make these checks exact:
    // - proposal boxes and ROI samples are constants of the losses (the
    //   detached-proposal semantics of two-stage detectors), so finite
    //   differences are taken with the plans frozen at the base point, where
    //   the planned losses equal the production losses exactly;
    // - the gradient reversal layer deliberately reports -lambda times the
    //   true derivative for upstream weights, so the adversarial losses are
    //   differenced in their non-reversed form here; criterion 2 separately
    //   pins the reversal relation to 1e-10.
    let (sup_plan, src_boxes, tgt_boxes) = {
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut tape, &phi, false, &mut reg);
        let src_fwd = forward_image(&mut tape, &det, &src_img).unwrap();
        let tgt_fwd = forward_image(&mut tape, &det, &tgt_img).unwrap();
        (
            mtda_core::detector::plan_rois(
                tape.value(src_fwd.obj),
                tape.value(src_fwd.delta),
                &src_anns,
                5,
            ),
            mtda_core::da::instance_boxes(&tape, &src_fwd),
            mtda_core::da::instance_boxes(&tape, &tgt_fwd),
        )
    };

    // supervised detection loss
    let build = |ov: &BTreeMap<String, Tensor>| -> (Tape, Var, Vec<(String, Var)>) {
        let (phi, _, _) = with_overrides(&phi, &disc, &g, ov);
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut tape, &phi, true, &mut reg);
        let fwd = forward_image(&mut tape, &det, &src_img).unwrap();
        let loss = mtda_core::detector::supervised_loss_planned(
            &mut tape, &det, &fwd, &src_anns, &sup_plan,
        )
        .unwrap();
        (tape, loss, reg)
    };
    {
        // planned == production at the base point
        let (tape, loss, _) = build(&BTreeMap::new());
        let mut t2 = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut t2, &phi, true, &mut reg);
        let prod =
            mtda_core::detector::supervised_loss(&mut t2, &det, &src_img, &src_anns, 5).unwrap();
        assert_eq!(tape.scalar_value(loss), t2.scalar_value(prod));
    }
    total += common::fd_check_loss("supervised", &build, 8, 11);

    // image-level confusion loss (Eq.-1 form), non-reversed
    let build = |ov: &BTreeMap<String, Tensor>| -> (Tape, Var, Vec<(String, Var)>) {
        let (phi, disc_p, _) = with_overrides(&phi, &disc, &g, ov);
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut tape, &phi, true, &mut reg);
        let dv = bind_discriminators(&mut tape, &disc_p, true, &mut reg);
        let mut terms = Vec::new();
        for (img, d) in [(&src_img, 0u8), (&tgt_img, 1u8)] {
            let z = mtda_core::detector::backbone_forward(&mut tape, &det, img).unwrap();
            let logit = mtda_core::da::d_img_logit(&mut tape, &dv, z);
            let l = tape.domain_loss(logit, d, kind);
            terms.push((0.5, l));
        }
        let loss = tape.weighted_sum(&terms);
        (tape, loss, reg)
    };
    {
        // same value as the production (reversed) loss: GRL is identity forward
        let (tape, loss, _) = build(&BTreeMap::new());
        let mut t2 = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut t2, &phi, true, &mut reg);
        let dv = bind_discriminators(&mut t2, &disc, true, &mut reg);
        let batch = [(&src_img, 0u8), (&tgt_img, 1u8)];
        let prod = image_da_loss(&mut t2, &det, &dv, &batch, 1.0, kind).unwrap();
        assert_eq!(tape.scalar_value(loss), t2.scalar_value(prod));
    }
    total += common::fd_check_loss("image_da", &build, 8, 12);

    // instance-level confusion loss (Eq.-2 form)
    let build = |ov: &BTreeMap<String, Tensor>| -> (Tape, Var, Vec<(String, Var)>) {
        let (phi, disc_p, _) = with_overrides(&phi, &disc, &g, ov);
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut tape, &phi, true, &mut reg);
        let dv = bind_discriminators(&mut tape, &disc_p, true, &mut reg);
        let mut all = Vec::new();
        for (img, boxes, d) in [(&src_img, &src_boxes, 0u8), (&tgt_img, &tgt_boxes, 1u8)] {
            let fwd = forward_image(&mut tape, &det, img).unwrap();
            let terms =
                da_terms_planned(&mut tape, &dv, &fwd, boxes, d, false, 1.0, kind).unwrap();
            all.extend(terms.instances);
        }
        let inv = 1.0 / all.len() as f64;
        let weighted: Vec<(f64, Var)> = all.into_iter().map(|v| (inv, v)).collect();
        let loss = tape.weighted_sum(&weighted);
        (tape, loss, reg)
    };
    {
        let (tape, loss, _) = build(&BTreeMap::new());
        let mut t2 = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut t2, &phi, true, &mut reg);
        let dv = bind_discriminators(&mut t2, &disc, true, &mut reg);
        let batch = [(&src_img, 0u8), (&tgt_img, 1u8)];
        let (prod, _) = instance_da_loss(&mut t2, &det, &dv, &batch, 1.0, kind).unwrap();
        assert_eq!(tape.scalar_value(loss), t2.scalar_value(prod));
    }
    total += common::fd_check_loss("instance_da", &build, 8, 13);

    // composite adaptation loss (Eq.-4 form)
    let compose_total = |tape: &mut Tape,
                         det: &mtda_core::detector::DetectorVars,
                         dv: &mtda_core::da::DiscVars|
     -> Var {
        let lambda = 0.8;
        let src_fwd = forward_image(tape, det, &src_img).unwrap();
        let tgt_fwd = forward_image(tape, det, &tgt_img).unwrap();
        let sup = mtda_core::detector::supervised_loss_planned(
            tape, det, &src_fwd, &src_anns, &sup_plan,
        )
        .unwrap();
        let s_terms =
            da_terms_planned(tape, dv, &src_fwd, &src_boxes, 0, false, 1.0, kind).unwrap();
        let t_terms =
            da_terms_planned(tape, dv, &tgt_fwd, &tgt_boxes, 1, false, 1.0, kind).unwrap();
        let mut terms = vec![
            (1.0, sup),
            (lambda * 0.5, s_terms.image),
            (lambda * 0.5, t_terms.image),
        ];
        let n = s_terms.instances.len() + t_terms.instances.len();
        if n > 0 {
            let w = lambda / n as f64;
            for v in s_terms.instances.into_iter().chain(t_terms.instances) {
                terms.push((w, v));
            }
        }
        tape.weighted_sum(&terms)
    };
    let build = |ov: &BTreeMap<String, Tensor>| -> (Tape, Var, Vec<(String, Var)>) {
        let (phi, disc_p, _) = with_overrides(&phi, &disc, &g, ov);
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut tape, &phi, true, &mut reg);
        let dv = bind_discriminators(&mut tape, &disc_p, true, &mut reg);
        let loss = compose_total(&mut tape, &det, &dv);
        (tape, loss, reg)
    };
    {
        let (tape, loss, _) = build(&BTreeMap::new());
        let mut t2 = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut t2, &phi, true, &mut reg);
        let dv = bind_discriminators(&mut t2, &disc, true, &mut reg);
        let prod = total_da_loss(
            &mut t2,
            &det,
            &dv,
            (&src_img, &src_anns),
            &tgt_img,
            0.8,
            kind,
            1.0,
            5,
        )
        .unwrap();
        assert_eq!(tape.scalar_value(loss), t2.scalar_value(prod));
    }
    total += common::fd_check_loss("total_da", &build, 8, 14);

    // transfer-module loss (Eq.-7 form), gradients w.r.t. the module only
    let dtm_plan = {
        let mut tape = Tape::new();
        let mut frozen = Vec::new();
        let det = bind_detector(&mut tape, &phi, false, &mut frozen);
        let dv = bind_discriminators(&mut tape, &disc, false, &mut frozen);
        let mut reg = Vec::new();
        let gv = bind_dtm(&mut tape, &g, true, &mut reg);
        // reproduce the production instance boxes by valuing the loss once
        let _ = dtm_loss(&mut tape, &det, &dv, &gv, &[&src_img.pixels], kind).unwrap();
        // plan = eval-mode proposals of the transferred image
        let input = tape.leaf(src_img.pixels.clone(), false);
        let transferred = mtda_core::dtm::dtm_forward(&mut tape, &gv, input);
        let z = mtda_core::detector::backbone_forward_var(&mut tape, &det, transferred);
        let (obj, delta) = mtda_core::detector::rpn_heads(&mut tape, &det, z);
        mtda_core::detector::rpn_propose(
            tape.value(obj),
            tape.value(delta),
            mtda_core::detector::RpnMode::Eval,
        )
        .iter()
        .map(|p| p.bbox)
        .collect::<Vec<_>>()
    };
    let build = |ov: &BTreeMap<String, Tensor>| -> (Tape, Var, Vec<(String, Var)>) {
        let (phi, disc_p, g_p) = with_overrides(&phi, &disc, &g, ov);
        let mut tape = Tape::new();
        let mut frozen = Vec::new();
        let det = bind_detector(&mut tape, &phi, false, &mut frozen);
        let dv = bind_discriminators(&mut tape, &disc_p, false, &mut frozen);
        let mut reg = Vec::new();
        let gv = bind_dtm(&mut tape, &g_p, true, &mut reg);
        let loss = mtda_core::dtm::dtm_loss_planned(
            &mut tape,
            &det,
            &dv,
            &gv,
            &[&src_img.pixels],
            std::slice::from_ref(&dtm_plan),
            kind,
        )
        .unwrap();
        (tape, loss, reg)
    };
    total += common::fd_check_loss("dtm", &build, 8, 15);

    // incremental composite (Eq.-8 form): confusion + replay + supervision
    let pseudo_pixels = dtm_apply(&g, &src_img.pixels);
    let pseudo_boxes = {
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut tape, &phi, false, &mut reg);
        let input = tape.leaf(pseudo_pixels.clone(), false);
        let z = mtda_core::detector::backbone_forward_var(&mut tape, &det, input);
        let (obj, delta) = mtda_core::detector::rpn_heads(&mut tape, &det, z);
        let fwd = mtda_core::detector::ImageForward { z, obj, delta };
        mtda_core::da::instance_boxes(&tape, &fwd)
    };
    let build = |ov: &BTreeMap<String, Tensor>| -> (Tape, Var, Vec<(String, Var)>) {
        let (phi, disc_p, _) = with_overrides(&phi, &disc, &g, ov);
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut tape, &phi, true, &mut reg);
        let dv = bind_discriminators(&mut tape, &disc_p, true, &mut reg);
        let src_fwd = forward_image(&mut tape, &det, &src_img).unwrap();
        let tgt_fwd = forward_image(&mut tape, &det, &tgt_img).unwrap();
        let sup = mtda_core::detector::supervised_loss_planned(
            &mut tape, &det, &src_fwd, &src_anns, &sup_plan,
        )
        .unwrap();
        let s_terms =
            da_terms_planned(&mut tape, &dv, &src_fwd, &src_boxes, 0, false, 1.0, kind).unwrap();
        let t_terms =
            da_terms_planned(&mut tape, &dv, &tgt_fwd, &tgt_boxes, 1, false, 1.0, kind).unwrap();
        let input = tape.leaf(pseudo_pixels.clone(), false);
        let z = mtda_core::detector::backbone_forward_var(&mut tape, &det, input);
        let (obj, delta) = mtda_core::detector::rpn_heads(&mut tape, &det, z);
        let p_fwd = mtda_core::detector::ImageForward { z, obj, delta };
        let p_terms =
            da_terms_planned(&mut tape, &dv, &p_fwd, &pseudo_boxes, 1, false, 1.0, kind).unwrap();
        let lambda = 0.8;
        let alpha = 0.6;
        let mut terms = vec![
            (1.0, sup),
            (lambda * 0.5, s_terms.image),
            (lambda * 0.5, t_terms.image),
            (alpha, p_terms.image),
        ];
        let n = s_terms.instances.len() + t_terms.instances.len();
        if n > 0 {
            let w = lambda / n as f64;
            for v in s_terms.instances.into_iter().chain(t_terms.instances) {
                terms.push((w, v));
            }
        }
        if !p_terms.instances.is_empty() {
            let w = alpha / p_terms.instances.len() as f64;
            for v in p_terms.instances {
                terms.push((w, v));
            }
        }
        let loss = tape.weighted_sum(&terms);
        (tape, loss, reg)
    };
    total += common::fd_check_loss("incremental", &build, 8, 16);

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "gradient checks took {secs:.1}s (budget 120s)");
    println!(
        "PASS criterion 1: gradient correctness — {total} coordinates across 6 losses, rel err < 1e-4, {secs:.1}s"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: GRL sign invariant, exact to 1e-10.
// ---------------------------------------------------------------------------
#[test]
fn criterion_02_grl_sign_invariant() {
    let phi = DetectorParams::new(21, 3);
    let disc = DiscriminatorSet::new(22, 1.0);
    let (img, _) = render_scene(23, 2);
    let mut worst: f64 = 0.0;
    for grl_lambda in [0.5, 1.0, 2.0] {
        let grads = |reverse: bool| -> BTreeMap<String, Tensor> {
            let mut tape = Tape::new();
            let mut reg = Vec::new();
            let det = bind_detector(&mut tape, &phi, true, &mut reg);
            let dv = bind_discriminators(&mut tape, &disc, false, &mut reg);
            let fwd = forward_image(&mut tape, &det, &img).unwrap();
            let terms = da_terms_for_image(
                &mut tape,
                &dv,
                &fwd,
                1,
                reverse,
                grl_lambda,
                DomainLossKind::Focal { gamma: 2.0 },
            )
            .unwrap();
            let mut weighted = vec![(0.5, terms.image)];
            let n = terms.instances.len().max(1);
            for v in terms.instances {
                weighted.push((0.5 / n as f64, v));
            }
            let loss = tape.weighted_sum(&weighted);
            tape.backward(loss);
            mtda_core::detector::collect_grads(&tape, &reg)
        };
        let with_grl = grads(true);
        let without = grads(false);
        for name in ["backbone/0/w", "backbone/1/w", "backbone/3/w"] {
            let a = &with_grl[name];
            let b = &without[name];
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x + grl_lambda * y).abs());
            }
        }
    }
    assert!(worst < 1e-10, "max |g_rev + lambda*g| = {worst:e}");
    println!("PASS criterion 2: GRL sign invariant — max residual {worst:.2e} < 1e-10");
}

// ---------------------------------------------------------------------------
// Criterion 3: mAP oracle equivalence on randomized instances plus the
// worked AP example.
// ---------------------------------------------------------------------------
#[test]
fn criterion_03_map_oracle_equivalence() {
    // worked example: scores .9 TP, .8 FP, .7 TP over 2 ground truths
    let gts = [
        mtda_core::synth::BoxAnnotation {
            x: 0.0,
            y: 0.0,
            w: 10.0,
            h: 10.0,
            class: 0,
        },
        mtda_core::synth::BoxAnnotation {
            x: 50.0,
            y: 50.0,
            w: 10.0,
            h: 10.0,
            class: 0,
        },
    ];
    let dets = [
        mtda_core::detector::Detection {
            bbox: BBox {
                x: 0.0,
                y: 0.0,
                w: 10.0,
                h: 10.0,
            },
            class: 0,
            score: 0.9,
        },
        mtda_core::detector::Detection {
            bbox: BBox {
                x: 25.0,
                y: 25.0,
                w: 10.0,
                h: 10.0,
            },
            class: 0,
            score: 0.8,
        },
        mtda_core::detector::Detection {
            bbox: BBox {
                x: 50.0,
                y: 50.0,
                w: 10.0,
                h: 10.0,
            },
            class: 0,
            score: 0.7,
        },
    ];
    let ap = average_precision(&dets, &gts, 0, 0.5).unwrap();
    assert!((ap - 0.8333333333).abs() < 1e-6, "worked AP = {ap}");

    // randomized instances: implementation vs brute-force oracle, exactly
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut max_diff: f64 = 0.0;
    for case in 0..100 {
        let n_img = rng.gen_range(1..=3usize);
        let n_det = rng.gen_range(0..=10usize);
        let n_gt = rng.gen_range(1..=5usize);
        let rand_box = |rng: &mut ChaCha8Rng| BBox {
            x: rng.gen_range(0.0..60.0),
            y: rng.gen_range(0.0..60.0),
            w: rng.gen_range(4.0..30.0),
            h: rng.gen_range(4.0..30.0),
        };
        let gts: Vec<(usize, BBox, usize)> = (0..n_gt)
            .map(|_| {
                (
                    rng.gen_range(0..n_img),
                    rand_box(&mut rng),
                    rng.gen_range(0..3usize),
                )
            })
            .collect();
        let dets: Vec<(usize, BBox, usize, f64)> = (0..n_det)
            .map(|_| {
                // half the detections perturb a random ground truth so true
                // positives actually occur
                if rng.gen_bool(0.5) && !gts.is_empty() {
                    let (img, gbox, class) = gts[rng.gen_range(0..gts.len())];
                    let jitter = rng.gen_range(-3.0..3.0);
                    (
                        img,
                        BBox {
                            x: gbox.x + jitter,
                            y: gbox.y - jitter,
                            w: gbox.w,
                            h: gbox.h,
                        },
                        class,
                        rng.gen_range(0.05..1.0),
                    )
                } else {
                    (
                        rng.gen_range(0..n_img),
                        rand_box(&mut rng),
                        rng.gen_range(0..3usize),
                        rng.gen_range(0.05..1.0),
                    )
                }
            })
            .collect();

        let tagged: Vec<TaggedDetection> = dets
            .iter()
            .map(|&(image, bbox, class, score)| TaggedDetection {
                image,
                bbox,
                class,
                score,
            })
            .collect();
        let report = mtda_core::eval::report_from_pool("t", &tagged, &gts);
        let oracle = common::map_oracle(&dets, &gts, 0.5);
        let diff = (report.map - oracle).abs();
        max_diff = max_diff.max(diff);
        assert!(
            diff < 1e-12,
            "case {case}: map {} vs oracle {oracle}",
            report.map
        );
    }
    println!(
        "PASS criterion 3: mAP oracle equivalence — 100 randomized instances exact (max diff {max_diff:.1e}), worked AP 0.833333 reproduced"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: transfer-module sizing against the reported figures.
// ---------------------------------------------------------------------------
#[test]
fn criterion_04_dtm_sizing() {
    let g = DTMParams::new(DtmVariant::Original, 1);
    assert_eq!(g.param_count(), 1536);
    let report = complexity_report(&g.description(), (1200, 600));
    assert_eq!(report.params, 1536);
    assert_eq!(report.macs, 1_105_920_000);
    assert_eq!(report.flops_1mac, 1_105_920_000);
    assert_eq!(report.flops_2mac, 2_211_840_000);
    println!(
        "PASS criterion 4: DTM sizing — 1536 parameters; 1,105,920,000 MACs at 3x1200x600 (2,211,840,000 FLOPs at 2xMAC)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: transfer-module fooling property over 3 seeds.
// ---------------------------------------------------------------------------
#[test]
fn criterion_05_dtm_fooling() {
    let mut gaps = Vec::new();
    for base in BASE.iter() {
        let probes = sample_eval_pixels(&base.source, 16, seeds::derive(base.seed, "probe"));
        let p_raw = mean_target_probability(&base.phi1, &base.disc1, &probes).unwrap();
        let transferred: Vec<Tensor> = probes.iter().map(|p| dtm_apply(&base.g1, p)).collect();
        let p_dtm = mean_target_probability(&base.phi1, &base.disc1, &transferred).unwrap();
        gaps.push(p_dtm - p_raw);

        // a freshly initialized module is the identity, so its pseudo-samples
        // score exactly like raw source images
        let h = hyper(base.seed);
        let fresh = DTMParams::new(h.dtm_variant, seeds::derive(base.seed, "fresh"));
        let untouched: Vec<Tensor> = probes.iter().map(|p| dtm_apply(&fresh, p)).collect();
        let p_fresh = mean_target_probability(&base.phi1, &base.disc1, &untouched).unwrap();
        assert!(
            (p_fresh - p_raw).abs() < 0.1,
            "untrained module moved probability by {}",
            p_fresh - p_raw
        );

        // monotone training: the transfer loss on a fixed probe batch is
        // lower for the trained module than at initialization
        let probe_loss = |g: &DTMParams| -> f64 {
            let mut tape = Tape::new();
            let mut frozen = Vec::new();
            let det = bind_detector(&mut tape, &base.phi1, false, &mut frozen);
            let dv = bind_discriminators(&mut tape, &base.disc1, false, &mut frozen);
            let mut reg = Vec::new();
            let gv = bind_dtm(&mut tape, g, true, &mut reg);
            let batch: Vec<&Tensor> = probes.iter().collect();
            let loss = dtm_loss(&mut tape, &det, &dv, &gv, &batch, h.l_c_kind).unwrap();
            tape.scalar_value(loss)
        };
        assert!(
            probe_loss(&base.g1) < probe_loss(&fresh),
            "transfer loss did not decrease during training"
        );
    }
    let m = mean(gaps.iter().copied());
    assert!(
        m >= 0.2,
        "mean fooling gap {m:.3} < 0.2 (per-seed {gaps:?})"
    );
    println!(
        "PASS criterion 5: DTM fooling — mean target-probability gap {m:.3} >= 0.2 (per-seed {:?}); untrained module neutral; probe loss decreased",
        gaps.iter().map(|g| (g * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: single-target adaptation gain over source-only.
// ---------------------------------------------------------------------------
#[test]
fn criterion_06_stda_gain() {
    let gains: Vec<f64> = BASE.iter().map(|b| b.fog_map1 - b.fog_map0).collect();
    let m = mean(gains.iter().copied());
    assert!(
        m >= 0.05,
        "mean adaptation gain {m:.3} < 0.05 (per-seed {gains:?})"
    );
    // adaptation must not collapse source accuracy
    let mut accs = Vec::new();
    for base in BASE.iter() {
        let pre = map_over_dataset(&base.phi0, &base.source).unwrap().map;
        let post = map_over_dataset(&base.phi1, &base.source).unwrap().map;
        assert!(
            post >= 0.8 * pre,
            "source mAP collapsed: {post:.3} < 0.8 * {pre:.3}"
        );
        accs.push(
            mtda_core::da::discriminator_accuracy(&base.phi1, &base.disc1, &base.source, &base.fog)
                .unwrap(),
        );
    }
    // domain confusion: discriminator accuracy settles near chance
    let acc = mean(accs.iter().copied());
    assert!(
        (0.35..=0.65).contains(&acc),
        "mean discriminator accuracy {acc:.3} outside 0.5 +/- 0.15 (per-seed {accs:?})"
    );
    println!(
        "PASS criterion 6: STDA gain — mean fog mAP gain {m:.3} >= 0.05 (per-seed {:?}); source retained; discriminator accuracy {acc:.3} in 0.5 +/- 0.15",
        gains.iter().map(|g| (g * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: forgetting mitigation on source -> fog -> noise.
// ---------------------------------------------------------------------------
#[test]
fn criterion_07_forgetting_mitigation() {
    let mtda_fog = mean(ARMS.iter().map(|a| a.mtda_fog2));
    let uft_fog = mean(ARMS.iter().map(|a| a.uft_fog2));
    let mtda_f: Vec<f64> = BASE
        .iter()
        .zip(ARMS.iter())
        .map(|(b, a)| b.fog_map1 - a.mtda_fog2)
        .collect();
    let uft_f: Vec<f64> = BASE
        .iter()
        .zip(ARMS.iter())
        .map(|(b, a)| b.fog_map1 - a.uft_fog2)
        .collect();
    let mtda_all = mean(ARMS.iter().map(|a| (a.mtda_fog2 + a.mtda_noise2) / 2.0));
    let kd_all = mean(ARMS.iter().map(|a| (a.kd_fog2 + a.kd_noise2) / 2.0));
    let uft_all = mean(ARMS.iter().map(|a| (a.uft_fog2 + a.uft_noise2) / 2.0));

    assert!(
        mtda_fog >= uft_fog,
        "T1 retention: mtda_dtm {mtda_fog:.3} < uft {uft_fog:.3}"
    );
    let mf = mean(mtda_f.iter().copied());
    let uf = mean(uft_f.iter().copied());
    assert!(mf <= uf, "forgetting: mtda_dtm {mf:.3} > uft {uf:.3}");
    assert!(
        mtda_all >= kd_all - 0.01,
        "all-target: mtda_dtm {mtda_all:.3} < kd {kd_all:.3} - 0.01"
    );
    println!(
        "PASS criterion 7: forgetting mitigation — T1 mAP after step 2: mtda_dtm {mtda_fog:.3} >= uft {uft_fog:.3}; F(T1): {mf:+.3} <= {uf:+.3}; all-target: mtda_dtm {mtda_all:.3} >= incr_mtda_kd {kd_all:.3} - 0.01 (uft {uft_all:.3})"
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: no-retention audit of the incremental strategies.
// ---------------------------------------------------------------------------
#[test]
fn criterion_08_no_retention_audit() {
    let names = ["fog".to_string(), "noise".to_string()];
    let mut audited = 0usize;
    for arms in ARMS.iter() {
        for (log, label) in [
            (&arms.uft_log, "uft"),
            (&arms.mtda_log, "mtda_dtm"),
            (&arms.kd_log, "incr_mtda_kd"),
        ] {
            let violations = log.no_retention_violations("source", &names);
            assert!(violations.is_empty(), "{label}: {violations:?}");
            audited += 1;
        }
    }
    println!(
        "PASS criterion 8: no-retention audit — {audited} strategy logs contain zero previous-target reads"
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: trained vs untrained transfer module.
// ---------------------------------------------------------------------------
#[test]
fn criterion_09_trained_vs_untrained_dtm() {
    let trained = mean(ARMS.iter().map(|a| (a.mtda_fog2 + a.mtda_noise2) / 2.0));
    let untrained = mean(ARMS.iter().map(|a| (a.unt_fog2 + a.unt_noise2) / 2.0));
    assert!(
        trained >= untrained,
        "trained {trained:.3} < untrained {untrained:.3}"
    );
    println!(
        "PASS criterion 9: trained vs untrained DTM — all-target mAP {trained:.3} >= {untrained:.3}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: determinism of full runs.
// ---------------------------------------------------------------------------
#[test]
fn criterion_10_determinism() {
    let (source, fog, noise) = {
        let source = DomainSpec::new("source", DomainKind::Source, 41);
        let fog = DomainSpec::new("fog", DomainKind::Fog, 42);
        let noise = DomainSpec::new("noise", DomainKind::Noise, 43);
        (
            build_domain_dataset(&source, 6, 3).unwrap(),
            build_domain_dataset(&fog, 6, 3).unwrap(),
            build_domain_dataset(&noise, 6, 3).unwrap(),
        )
    };
    let strategy = Strategy {
        id: StrategyId::MtdaDtm,
        hyper: HyperParams {
            iters_per_phase: 4,
            dtm_iters: 4,
            seed: 9,
            ..HyperParams::default()
        },
    };
    let targets = vec![fog, noise];
    let a = run_strategy(&strategy, &source, &targets).unwrap();
    let b = run_strategy(&strategy, &source, &targets).unwrap();
    let csv_a = a.state.map_csv();
    let csv_b = b.state.map_csv();
    assert_eq!(csv_a, csv_b, "mAP CSVs differ between identical runs");
    // numeric tolerance check on the parsed values as well
    for (la, lb) in csv_a.lines().zip(csv_b.lines()).skip(1) {
        let va: f64 = la.rsplit(',').next().unwrap().parse().unwrap_or(0.0);
        let vb: f64 = lb.rsplit(',').next().unwrap().parse().unwrap_or(0.0);
        assert!((va - vb).abs() < 1e-6);
    }
    println!("PASS criterion 10: determinism — identical config and seed give identical mAP CSVs");
}

// ---------------------------------------------------------------------------
// Criterion 11: alpha-sweep harness and stability claim.
// ---------------------------------------------------------------------------
#[test]
fn criterion_11_alpha_sweep_stability() {
    // one short incremental step from a seed's base state at a given alpha
    let short_step = |base: &SeedBase, alpha: f64| -> f64 {
        let h = HyperParams {
            alpha,
            iters_per_phase: SWEEP_PHASE_ITERS,
            ..hyper(base.seed)
        };
        let mut phi = base.phi1.clone();
        let mut disc = base.disc1.clone();
        let mut log = base.log1.clone();
        ida_step(
            &mut phi,
            &mut disc,
            &base.g1,
            &base.source,
            &base.noise,
            &h,
            2,
            &mut log,
        )
        .unwrap();
        let fog2 = map_over_dataset(&phi, &base.fog).unwrap().map;
        let noise2 = map_over_dataset(&phi, &base.noise).unwrap().map;
        (fog2 + noise2) / 2.0
    };

    // seed-to-seed spread at the default alpha, same protocol as the sweep
    let per_seed: Vec<f64> = BASE.iter().map(|b| short_step(b, 1.0)).collect();
    let seed_std = std_dev(&per_seed);

    // 10-point alpha grid on seed 1 (the 1.0 cell is the seed-1 std run)
    let base = &BASE[0];
    let mut rows: Vec<(f64, f64)> = (1..10)
        .map(|i| {
            let alpha = i as f64 / 10.0;
            (alpha, short_step(base, alpha))
        })
        .collect();
    rows.push((1.0, per_seed[0]));
    assert_eq!(rows.len(), 10);
    let table: String = rows
        .iter()
        .map(|(a, m)| format!("alpha {a:.1}: {m:.3}"))
        .collect::<Vec<_>>()
        .join("; ");
    println!("alpha sweep table — {table}");
    let min = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let max = rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    assert!(
        range <= 3.0 * seed_std,
        "alpha-range {range:.3} exceeds 3x seed std {:.3}",
        seed_std
    );
    println!(
        "PASS criterion 11: alpha sweep — 10 rows emitted; mAP range {range:.3} <= 3x seed std {:.3}",
        3.0 * seed_std
    );
}
