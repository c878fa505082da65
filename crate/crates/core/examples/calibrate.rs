//! Scratch calibration harness: timings and directional checks at small
//! scale. Not part of the test suite.
//!
//! Usage: calibrate key=value ...
//! keys: pre, phase, dtm, seed, grl, lambda, dtm_lr, fog_lo, fog_hi,
//!       sigma_lo, sigma_hi, streaks_hi, t2 (1 = colorshift, 2 = noise)

use std::collections::HashMap;
use std::time::Instant;

use mtda_core::config::ExperimentConfig;
use mtda_core::da::{discriminator_accuracy, mean_target_probability, sample_eval_pixels};
use mtda_core::dtm::{dtm_apply, DTMParams};
use mtda_core::eval::map_over_dataset;
use mtda_core::synth::build_domain_dataset;
use mtda_core::trainer::*;

fn main() {
    let kv: HashMap<String, f64> = std::env::args()
        .skip(1)
        .filter_map(|a| {
            let (k, v) = a.split_once('=')?;
            Some((k.to_string(), v.parse().ok()?))
        })
        .collect();
    let get = |k: &str, d: f64| kv.get(k).copied().unwrap_or(d);
    let pre_iters = get("pre", 1500.0) as usize;
    let use_ce = get("ce", 0.0) > 0.5;
    let phase_iters = get("phase", 1000.0) as usize;
    let dtm_iters = get("dtm", 600.0) as usize;
    let seed = get("seed", 1.0) as u64;
    let t1_idx = get("t1", 0.0) as usize;
    let t2_idx = get("t2", 2.0) as usize;

    let mut cfg = ExperimentConfig::default_config();
    cfg.data.targets[0]
        .params
        .insert("a".into(), (get("fog_lo", 0.4), get("fog_hi", 0.7)));
    cfg.data.targets[2]
        .params
        .insert("sigma".into(), (get("sigma_lo", 0.05), get("sigma_hi", 0.12)));
    cfg.data.targets[2]
        .params
        .insert("streaks".into(), (get("streaks_lo", 5.0), get("streaks_hi", 15.0)));
    let (n_train, n_eval) = (120usize, 48usize);

    let t0 = Instant::now();
    let source = build_domain_dataset(&cfg.data.source, n_train, n_eval).unwrap();
    let fog = build_domain_dataset(&cfg.data.targets[t1_idx], n_train, n_eval).unwrap();
    let t2 = build_domain_dataset(&cfg.data.targets[t2_idx], n_train, n_eval).unwrap();
    println!(
        "T1 = {}  T2 = {}",
        cfg.data.targets[t1_idx].name,
        cfg.data.targets[t2_idx].name
    );

    let hyper = HyperParams {
        iters_per_phase: phase_iters,
        dtm_iters,
        dtm_lr: get("dtm_lr", 0.03),
        lr_initial: 3e-3,
        lr_decayed: 3e-4,
        lambda: get("lambda", 1.0),
        grl_lambda: get("grl", 1.0),
        l_c_kind: if use_ce {
            mtda_core::autodiff::DomainLossKind::CrossEntropy
        } else {
            mtda_core::autodiff::DomainLossKind::Focal { gamma: 2.0 }
        },
        seed,
        ..HyperParams::default()
    };
    let pre_hyper = HyperParams {
        iters_per_phase: pre_iters,
        ..hyper.clone()
    };

    let mut log = AccessLog::new();
    let mut phi = mtda_core::detector::DetectorParams::new(
        mtda_core::seeds::derive(hyper.seed, "init-det"),
        3,
    );
    let cache = std::path::PathBuf::from(format!(
        "/tmp/mtda_phi0_{}_{}_{}.bin",
        pre_iters, seed, n_train
    ));
    if cache.exists() {
        let map = mtda_core::archive::read_archive(&cache).unwrap();
        phi.load_named(&map).unwrap();
        println!("pretrain: loaded cache {}", cache.display());
    } else {
        let t = Instant::now();
        supervised_phase(
            &mut phi,
            &[&source],
            &make_schedule(&pre_hyper, 1),
            mtda_core::seeds::derive_idx(hyper.seed, "phase", 0),
            &mut log,
            0,
        )
        .unwrap();
        println!("pretrain {} iters: {:.0}s", pre_iters, t.elapsed().as_secs_f64());
        mtda_core::archive::write_archive(&cache, &phi.named()).unwrap();
    }
    let src_map0 = map_over_dataset(&phi, &source).unwrap().map;
    let fog_map0 = map_over_dataset(&phi, &fog).unwrap().map;
    let t2_map0 = map_over_dataset(&phi, &t2).unwrap().map;
    println!(
        "source_only: source {:.3}  fog {:.3}  t2 {:.3}",
        src_map0, fog_map0, t2_map0
    );

    let mut disc = mtda_core::da::DiscriminatorSet::new(
        mtda_core::seeds::derive(hyper.seed, "init-disc"),
        hyper.grl_lambda,
    );
    let stda_cache = std::path::PathBuf::from(format!(
        "/tmp/mtda_stda_{}_{}_{}_{}_{}_{}_{:.2}_{:.2}.bin",
        t1_idx, pre_iters, phase_iters, seed, use_ce, hyper.lambda, get("fog_lo", 0.4), get("fog_hi", 0.7)
    ));
    if stda_cache.exists() {
        let map = mtda_core::archive::read_archive(&stda_cache).unwrap();
        let det_map: std::collections::BTreeMap<String, mtda_core::Tensor> = map
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("det/").map(|k| (k.to_string(), v.clone())))
            .collect();
        let disc_map: std::collections::BTreeMap<String, mtda_core::Tensor> = map
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("disc/").map(|k| (k.to_string(), v.clone())))
            .collect();
        phi.load_named(&det_map).unwrap();
        disc.load_named(&disc_map).unwrap();
        println!("stda: loaded cache");
    } else {
    let t = Instant::now();
    da_phase(
        &mut phi,
        &mut disc,
        &source,
        &[&fog],
        &make_schedule(&hyper, 1),
        &PhaseExtras {
            lambda: hyper.lambda,
            kind: hyper.l_c_kind,
            pseudo: None,
            kd: None,
        },
        mtda_core::seeds::derive_idx(hyper.seed, "phase", 1),
        &mut log,
        1,
    )
    .unwrap();
    println!(
        "stda {} iters: {:.0}s ({:.0} ms/it)",
        phase_iters,
        t.elapsed().as_secs_f64(),
        t.elapsed().as_secs_f64() / phase_iters as f64 * 1e3
    );
    let mut entries: Vec<(String, mtda_core::Tensor)> = Vec::new();
    for (k, v) in phi.named() { entries.push((format!("det/{k}"), v.clone())); }
    for (k, v) in disc.named() { entries.push((format!("disc/{k}"), v.clone())); }
    let refs: Vec<(String, &mtda_core::Tensor)> = entries.iter().map(|(k, v)| (k.clone(), v)).collect();
    mtda_core::archive::write_archive(&stda_cache, &refs).unwrap();
    }
    let src_map1 = map_over_dataset(&phi, &source).unwrap().map;
    let fog_map1 = map_over_dataset(&phi, &fog).unwrap().map;
    let dacc = discriminator_accuracy(&phi, &disc, &source, &fog).unwrap();
    println!(
        "after stda: source {:.3}  fog {:.3} (gain {:+.3})  disc acc {:.3}",
        src_map1,
        fog_map1,
        fog_map1 - fog_map0,
        dacc
    );

    // chunked DTM training with probability probes along the way
    let probes = sample_eval_pixels(&source, 16, 999);
    let p_raw = mean_target_probability(&phi, &disc, &probes).unwrap();
    let t = Instant::now();
    let mut g = mtda_core::dtm::DTMParams::new(
        hyper.dtm_variant,
        mtda_core::seeds::derive(mtda_core::seeds::derive_idx(hyper.seed, "dtm", 1), "dtm-init"),
    );
    {
        use rand::{Rng, SeedableRng};
        let mut opt = mtda_core::optim::MomentumSgd::new(0.9);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mtda_core::seeds::derive(
            mtda_core::seeds::derive_idx(hyper.seed, "dtm", 1),
            "dtm-sample",
        ));
        let chunk = 200usize;
        let mut done = 0usize;
        while done < dtm_iters {
            for _ in 0..chunk.min(dtm_iters - done) {
                let idx = rng.gen_range(0..source.train_len());
                let (img, _) = source.train_item(idx);
                let mut tape = mtda_core::autodiff::Tape::new();
                let mut reg = Vec::new();
                let det = mtda_core::detector::bind_detector(&mut tape, &phi, false, &mut reg);
                let dv = mtda_core::da::bind_discriminators(&mut tape, &disc, false, &mut reg);
                let mut greg = Vec::new();
                let gv = mtda_core::dtm::bind_dtm(&mut tape, &g, true, &mut greg);
                let loss = mtda_core::dtm::dtm_loss(
                    &mut tape, &det, &dv, &gv, &[&img.pixels], hyper.l_c_kind,
                )
                .unwrap();
                tape.backward(loss);
                let grads = mtda_core::detector::collect_grads(&tape, &greg);
                opt.step(hyper.dtm_lr, &mut g.named_mut(), &grads);
            }
            done += chunk.min(dtm_iters - done);
            let transferred: Vec<_> = probes.iter().map(|p| dtm_apply(&g, p)).collect();
            let p_now = mean_target_probability(&phi, &disc, &transferred).unwrap();
            println!("  dtm iter {done}: P(g(X)) = {p_now:.3}");
        }
    }
    println!(
        "dtm {} iters: {:.0}s ({:.0} ms/it)",
        dtm_iters,
        t.elapsed().as_secs_f64(),
        t.elapsed().as_secs_f64() / dtm_iters as f64 * 1e3
    );
    let transferred: Vec<_> = probes.iter().map(|p| dtm_apply(&g, p)).collect();
    let p_dtm = mean_target_probability(&phi, &disc, &transferred).unwrap();
    println!(
        "fooling: P(X) {:.3}  P(g(X)) {:.3} (gap {:+.3})",
        p_raw,
        p_dtm,
        p_dtm - p_raw
    );

    let phi_s = phi.clone();
    let disc_s = disc.clone();
    let run2 = |pseudo: Option<(&DTMParams, f64)>, label: &str| {
        let mut phi2 = phi_s.clone();
        let mut disc2 = disc_s.clone();
        let mut log2 = AccessLog::new();
        let t = Instant::now();
        da_phase(
            &mut phi2,
            &mut disc2,
            &source,
            &[&t2],
            &make_schedule(&hyper, 2),
            &PhaseExtras {
                lambda: hyper.lambda,
                kind: hyper.l_c_kind,
                pseudo,
                kd: None,
            },
            mtda_core::seeds::derive_idx(hyper.seed, "phase", 2),
            &mut log2,
            2,
        )
        .unwrap();
        println!(
            "{label} phase2: {:.0}s ({:.0} ms/it)",
            t.elapsed().as_secs_f64(),
            t.elapsed().as_secs_f64() / phase_iters as f64 * 1e3
        );
        phi2
    };
    let phi_uft = run2(None, "uft");
    let phi_dtm = run2(Some((&g, hyper.alpha)), "ida");

    let report = |name: &str, p: &mtda_core::detector::DetectorParams| {
        let f = map_over_dataset(p, &fog).unwrap().map;
        let n = map_over_dataset(p, &t2).unwrap().map;
        let s = map_over_dataset(p, &source).unwrap().map;
        println!(
            "{name}: source {:.3}  fog {:.3}  t2 {:.3}  all-target {:.3}  F(fog) {:+.3}",
            s,
            f,
            n,
            (f + n) / 2.0,
            fog_map1 - f
        );
    };
    report("uft     ", &phi_uft);
    report("mtda_dtm", &phi_dtm);
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
