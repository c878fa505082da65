//! Run-directory orchestration: dataset generation with checksums, strategy
//! execution with per-step checkpoints and kill-safe resume, and checkpoint
//! loading for re-evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mtda_core::archive;
use mtda_core::config::ExperimentConfig;
use mtda_core::da::DiscriminatorSet;
use mtda_core::detector::DetectorParams;
use mtda_core::dtm::{DTMParams, DtmVariant};
use mtda_core::error::{Error, Result};
use mtda_core::synth::{build_domain_dataset, load_dataset, write_dataset, DomainDataset, NUM_CLASSES};
use mtda_core::trainer::{
    AccessLog, ResumeState, RunOutcome, StepRecord, Strategy, StepSnapshot, run_strategy_with,
};

pub const ARCH_ID: &str = "toy-frcnn-s8-c3";

/// Generate (or verify) every dataset of the config under `<out>/data`.
/// Returns the list of (name, action) pairs for reporting.
pub fn generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(String, &'static str)>> {
    let data_dir = out.join("data");
    std::fs::create_dir_all(&data_dir).map_err(|e| Error::io(data_dir.display().to_string(), e))?;
    let mut actions = Vec::new();
    let mut all = vec![cfg.data.source.clone()];
    all.extend(cfg.data.targets.iter().cloned());
    for spec in &all {
        let dir = data_dir.join(&spec.name);
        if dir.join("manifest.txt").exists() && dir.join("checksums.txt").exists() {
            let manifest = archive::read_manifest(&dir.join("manifest.txt"))?;
            let matches = manifest.get("kind").map(String::as_str) == Some(spec.kind.as_str())
                && manifest.get("seed").map(String::as_str) == Some(spec.seed.to_string().as_str())
                && manifest.get("n_train").map(String::as_str)
                    == Some(cfg.data.n_train.to_string().as_str())
                && manifest.get("n_eval").map(String::as_str)
                    == Some(cfg.data.n_eval.to_string().as_str());
            if matches {
                archive::verify_checksums(&dir)?;
                actions.push((spec.name.clone(), "up to date"));
                continue;
            }
        }
        let ds = build_domain_dataset(spec, cfg.data.n_train, cfg.data.n_eval)?;
        write_dataset(&dir, &ds)?;
        actions.push((spec.name.clone(), "generated"));
    }
    Ok(actions)
}

pub fn load_domain(out: &Path, name: &str) -> Result<DomainDataset> {
    load_dataset(&out.join("data").join(name))
}

fn step_dir(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join("steps").join(format!("step_{step:02}"))
}

fn write_checkpoint(
    dir: &Path,
    snapshot: &StepSnapshot,
    strategy: &Strategy,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    archive::write_manifest(
        &dir.join("manifest.txt"),
        &[
            ("arch", ARCH_ID.to_string()),
            ("seed", strategy.hyper.seed.to_string()),
            ("step", snapshot.step.to_string()),
            ("label", snapshot.label.clone()),
            ("strategy", strategy.id.to_string()),
            ("grl_lambda", strategy.hyper.grl_lambda.to_string()),
            (
                "dtm_variant",
                strategy.hyper.dtm_variant.as_str().to_string(),
            ),
        ],
    )?;
    let named = snapshot.phi.named();
    archive::write_archive(&dir.join("det.bin"), &named)?;
    if let Some(disc) = snapshot.disc {
        archive::write_archive(&dir.join("disc.bin"), &disc.named())?;
    }
    if let Some(dtm) = snapshot.dtm {
        archive::write_archive(&dir.join("dtm.bin"), &dtm.named())?;
    }
    std::fs::write(dir.join("record.txt"), snapshot.record.to_text())
        .map_err(|e| Error::io(dir.display().to_string(), e))?;
    // marker written last: a step directory without it is incomplete
    std::fs::write(dir.join("COMPLETE"), "")
        .map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok(())
}

fn load_archive_into<F>(path: &Path, mut loader: F) -> Result<()>
where
    F: FnMut(&BTreeMap<String, mtda_core::Tensor>) -> Result<()>,
{
    let map = archive::read_archive(path)?;
    loader(&map)
}

pub fn load_step_detector(run_dir: &Path, step: usize) -> Result<DetectorParams> {
    let dir = step_dir(run_dir, step);
    let mut phi = DetectorParams::new(0, NUM_CLASSES);
    load_archive_into(&dir.join("det.bin"), |m| phi.load_named(m))?;
    Ok(phi)
}

pub fn load_step_dtm(run_dir: &Path, step: usize) -> Result<Option<DTMParams>> {
    let dir = step_dir(run_dir, step);
    let path = dir.join("dtm.bin");
    if !path.exists() {
        return Ok(None);
    }
    let manifest = archive::read_manifest(&dir.join("manifest.txt"))?;
    let variant = DtmVariant::parse(
        manifest
            .get("dtm_variant")
            .map(String::as_str)
            .unwrap_or("original"),
    )?;
    let mut g = DTMParams::new(variant, 0);
    load_archive_into(&path, |m| g.load_named(m))?;
    Ok(Some(g))
}

pub fn load_step_discriminators(run_dir: &Path, step: usize) -> Result<Option<DiscriminatorSet>> {
    let dir = step_dir(run_dir, step);
    let path = dir.join("disc.bin");
    if !path.exists() {
        return Ok(None);
    }
    let manifest = archive::read_manifest(&dir.join("manifest.txt"))?;
    let grl: f64 = manifest
        .get("grl_lambda")
        .and_then(|s| s.parse().ok())
        .unwrap_or(1.0);
    let mut disc = DiscriminatorSet::new(0, grl);
    load_archive_into(&path, |m| disc.load_named(m))?;
    Ok(Some(disc))
}

/// Completed steps (ascending) in a run directory.
pub fn completed_steps(run_dir: &Path) -> Vec<usize> {
    let mut steps = Vec::new();
    let Ok(entries) = std::fs::read_dir(run_dir.join("steps")) else {
        return steps;
    };
    for e in entries.flatten() {
        let name = e.file_name().to_string_lossy().to_string();
        if let Some(num) = name.strip_prefix("step_") {
            if let Ok(n) = num.parse::<usize>() {
                if e.path().join("COMPLETE").exists() {
                    steps.push(n);
                }
            }
        }
    }
    steps.sort_unstable();
    steps
}

pub fn load_step_record(run_dir: &Path, step: usize) -> Result<StepRecord> {
    let text = std::fs::read_to_string(step_dir(run_dir, step).join("record.txt"))
        .map_err(|e| Error::io(run_dir.display().to_string(), e))?;
    StepRecord::from_text(&text)
}

fn build_resume(run_dir: &Path) -> Result<Option<ResumeState>> {
    let steps = completed_steps(run_dir);
    let Some(&last) = steps.last() else {
        return Ok(None);
    };
    // contiguity check: resume only from an unbroken prefix
    for (want, &got) in steps.iter().enumerate() {
        if want != got {
            return Ok(None);
        }
    }
    let mut records = Vec::new();
    for &s in &steps {
        records.push(load_step_record(run_dir, s)?);
    }
    let phi0 = load_step_detector(run_dir, 0)?;
    let phi = load_step_detector(run_dir, last)?;
    let disc = load_step_discriminators(run_dir, last)?;
    let dtm = load_step_dtm(run_dir, last)?;
    let log_path = run_dir.join("access_log.csv");
    let access_log = if log_path.exists() {
        AccessLog::from_csv(
            &std::fs::read_to_string(&log_path)
                .map_err(|e| Error::io(log_path.display().to_string(), e))?,
        )?
    } else {
        AccessLog::new()
    };
    Ok(Some(ResumeState {
        next_step: last + 1,
        phi0,
        phi,
        disc,
        dtm,
        records,
        access_log,
    }))
}

/// Execute (or resume) a strategy run inside `run_dir`, writing per-step
/// checkpoints, the mAP CSV, the forgetting CSV and the access log.
pub fn run_to_dir(
    cfg: &ExperimentConfig,
    strategy: &Strategy,
    source: &DomainDataset,
    targets: &[&DomainDataset],
    run_dir: &Path,
) -> Result<RunOutcome> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir.display().to_string(), e))?;
    std::fs::write(run_dir.join("config.ini"), cfg.serialize())
        .map_err(|e| Error::io(run_dir.display().to_string(), e))?;
    archive::write_manifest(
        &run_dir.join("manifest.txt"),
        &[
            ("tool", format!("mtda {}", env!("CARGO_PKG_VERSION"))),
            ("arch", ARCH_ID.to_string()),
            ("strategy", strategy.id.to_string()),
            ("seed", strategy.hyper.seed.to_string()),
            ("config_sha256", archive::sha256_hex(cfg.serialize().as_bytes())),
        ],
    )?;

    let resume = build_resume(run_dir)?;
    let outcome = run_strategy_with(strategy, source, targets, resume, &mut |snap| {
        write_checkpoint(&step_dir(run_dir, snap.step), snap, strategy)?;
        std::fs::write(run_dir.join("access_log.csv"), snap.access_log.to_csv())
            .map_err(|e| Error::io(run_dir.display().to_string(), e))
    })?;

    std::fs::write(run_dir.join("map.csv"), outcome.state.map_csv())
        .map_err(|e| Error::io(run_dir.display().to_string(), e))?;
    std::fs::write(run_dir.join("forgetting.csv"), outcome.state.forgetting_csv())
        .map_err(|e| Error::io(run_dir.display().to_string(), e))?;
    std::fs::write(run_dir.join("access_log.csv"), outcome.state.access_log.to_csv())
        .map_err(|e| Error::io(run_dir.display().to_string(), e))?;
    Ok(outcome)
}
