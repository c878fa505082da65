//! Scratch: supervised learning-curve probe.

use mtda_core::config::ExperimentConfig;
use mtda_core::eval::map_over_dataset;
use mtda_core::synth::build_domain_dataset;
use mtda_core::trainer::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let chunks: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let chunk_iters: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let cfg = ExperimentConfig::default_config();
    let source = build_domain_dataset(&cfg.data.source, 120, 40).unwrap();
    let fog = build_domain_dataset(&cfg.data.targets[0], 120, 40).unwrap();

    let hyper = HyperParams {
        iters_per_phase: chunk_iters,
        lr_initial: lr,
        lr_decayed: lr,
        seed: 1,
        ..HyperParams::default()
    };
    let mut log = AccessLog::new();
    let mut phi = mtda_core::detector::DetectorParams::new(
        mtda_core::seeds::derive(hyper.seed, "init-det"),
        3,
    );
    for c in 0..chunks {
        supervised_phase(
            &mut phi,
            &[&source],
            &make_schedule(&hyper, 1),
            mtda_core::seeds::derive_idx(hyper.seed, "phase", 100 + c as u64),
            &mut log,
            0,
        )
        .unwrap();
        let s = map_over_dataset(&phi, &source).unwrap().map;
        let f = map_over_dataset(&phi, &fog).unwrap().map;
        println!(
            "iters {:5}  source mAP {:.3}  fog mAP {:.3}",
            (c + 1) * chunk_iters,
            s,
            f
        );
    }
}
