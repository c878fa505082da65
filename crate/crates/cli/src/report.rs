//! Report emission: markdown summary tables, forgetting curves, feature
//! projections, confidence histograms and the complexity comparison.

use std::path::{Path, PathBuf};

use mtda_core::config::ExperimentConfig;
use mtda_core::da::DiscriminatorSet;
use mtda_core::detector::{pooled_backbone_feature, DetectorParams};
use mtda_core::dtm::{dtm_apply, DTMParams, DtmVariant};
use mtda_core::error::{Error, Result};
use mtda_core::eval::{
    complexity_report, confidence_histogram, feature_projection_2d, HistogramStage, ModelDesc,
};
use mtda_core::synth::{build_domain_dataset, DomainDataset, Image};
use mtda_core::trainer::StepRecord;

use crate::runs;
use crate::svg;

const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

struct LoadedRun {
    dir: PathBuf,
    strategy: String,
    config: ExperimentConfig,
    records: Vec<StepRecord>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let cfg_text = std::fs::read_to_string(dir.join("config.ini"))
        .map_err(|e| Error::io(dir.display().to_string(), e))?;
    let config = ExperimentConfig::parse(&cfg_text)?;
    let manifest = mtda_core::archive::read_manifest(&dir.join("manifest.txt"))?;
    let strategy = manifest
        .get("strategy")
        .cloned()
        .unwrap_or_else(|| config.run.strategy.to_string());
    let steps = runs::completed_steps(dir);
    if steps.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no completed steps",
            dir.display()
        )));
    }
    let records = steps
        .iter()
        .map(|&s| runs::load_step_record(dir, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        strategy,
        config,
        records,
    })
}

fn class_name(c: usize) -> String {
    CLASS_NAMES
        .get(c)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{c}"))
}

fn md_map_tables(loaded: &[LoadedRun]) -> String {
    let mut md = String::new();
    // union of target names across runs, in first-run order
    let mut target_names: Vec<String> = Vec::new();
    for run in loaded {
        for rec in &run.records {
            for r in &rec.target_reports {
                if !target_names.contains(&r.target) {
                    target_names.push(r.target.clone());
                }
            }
        }
    }
    for tname in &target_names {
        md.push_str(&format!("### Test: {tname}\n\n"));
        md.push_str("| model |");
        for c in 0..CLASS_NAMES.len() {
            md.push_str(&format!(" {} |", class_name(c)));
        }
        md.push_str(" mAP |\n|---|");
        md.push_str(&"---|".repeat(CLASS_NAMES.len() + 1));
        md.push('\n');
        for run in loaded {
            let Some(last) = run.records.last() else {
                continue;
            };
            let Some(report) = last.target_reports.iter().find(|r| &r.target == tname) else {
                continue;
            };
            md.push_str(&format!("| {} |", run.strategy));
            for c in 0..CLASS_NAMES.len() {
                match report.per_class_ap.get(&c) {
                    Some(ap) => md.push_str(&format!(" {:.3} |", ap)),
                    None => md.push_str(" - |"),
                }
            }
            md.push_str(&format!(" {:.3} |\n", report.map));
        }
        md.push('\n');
    }
    // all-target averages
    md.push_str("### Test: all targets (final step)\n\n| model | all-target mAP |\n|---|---|\n");
    for run in loaded {
        if let Some(last) = run.records.last() {
            md.push_str(&format!("| {} | {:.3} |\n", run.strategy, last.all_target_map()));
        }
    }
    md.push('\n');
    md
}

fn forgetting_curves(loaded: &[LoadedRun]) -> (String, String) {
    let mut series = Vec::new();
    for run in loaded {
        let first_target = run.config.run.order.first().cloned();
        let Some(first_target) = first_target else {
            continue;
        };
        let pts: Vec<(f64, f64)> = run
            .records
            .iter()
            .filter_map(|rec| {
                rec.target_reports
                    .iter()
                    .find(|r| r.target == first_target)
                    .map(|r| (rec.step as f64, r.map))
            })
            .collect();
        if pts.len() > 1 {
            series.push((run.strategy.clone(), pts));
        }
    }
    let title = "first-target mAP per incremental step";
    (
        svg::line_chart(title, "step", "mAP", &series),
        format!("{} series", series.len()),
    )
}

fn build_eval_subset(ds: &DomainDataset, cap: usize) -> Vec<Image> {
    (0..ds.eval_len().min(cap))
        .map(|i| ds.eval_item(i).0.clone())
        .collect()
}

/// Feature-overlap scatter: pooled backbone features of source,
/// DTM-transferred source, and each target, projected by PCA.
fn feature_scatter(
    phi: &DetectorParams,
    dtm: Option<&DTMParams>,
    source: &DomainDataset,
    targets: &[DomainDataset],
) -> Result<String> {
    let cap = 48;
    let mut sets: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    let src_imgs = build_eval_subset(source, cap);
    let mut feats = Vec::new();
    for img in &src_imgs {
        feats.push(pooled_backbone_feature(phi, img)?);
    }
    sets.push(("source".into(), feats));
    if let Some(g) = dtm {
        let mut feats = Vec::new();
        for img in &src_imgs {
            let transferred = Image {
                pixels: dtm_apply(g, &img.pixels),
                domain_id: 1,
            };
            feats.push(pooled_backbone_feature(phi, &transferred)?);
        }
        sets.push(("dtm(source)".into(), feats));
    }
    for t in targets {
        let mut feats = Vec::new();
        for img in build_eval_subset(t, cap) {
            feats.push(pooled_backbone_feature(phi, &img)?);
        }
        sets.push((t.spec.name.clone(), feats));
    }
    let projected = feature_projection_2d(&sets)?;
    Ok(svg::scatter_chart(
        "backbone feature projection (PCA)",
        &projected,
    ))
}

fn complexity_md(variant: DtmVariant) -> String {
    let det = DetectorParams::new(0, 3);
    let disc = DiscriminatorSet::new(0, 1.0);
    let dtm = DTMParams::new(variant, 0);
    let at96 = |d: &ModelDesc| complexity_report(d, (96, 96));
    let det_c = at96(&det.description());
    let disc_c = at96(&disc.description());
    let dtm_c = at96(&dtm.description());
    let dtm_paper = complexity_report(&dtm.description(), (1200, 600));

    let mut md = String::from("### Complexity\n\n");
    md.push_str("Per-model cost at 96x96 input (MACs = multiply-accumulates; FLOPs reported under both the 1xMAC and 2xMAC conventions):\n\n");
    md.push_str("| model | params | MACs | FLOPs (1xMAC) | FLOPs (2xMAC) |\n|---|---|---|---|---|\n");
    for c in [&det_c, &disc_c, &dtm_c] {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            c.name, c.params, c.macs, c.flops_1mac, c.flops_2mac
        ));
    }
    md.push_str(&format!(
        "\nTransfer module at 3x1200x600 input: {} MACs ({} FLOPs at 2xMAC).\n\n",
        dtm_paper.macs, dtm_paper.flops_2mac
    ));

    // per-strategy adaptation complexity: one forward through each live model
    let rows = [
        ("uft", det_c.params + disc_c.params, det_c.macs + disc_c.macs),
        (
            "incr_mtda_kd",
            2 * det_c.params + disc_c.params,
            2 * det_c.macs + disc_c.macs,
        ),
        (
            "mtda_dtm",
            det_c.params + disc_c.params + dtm_c.params,
            det_c.macs + disc_c.macs + dtm_c.macs,
        ),
    ];
    md.push_str("Adaptation-time complexity (live models, one forward each):\n\n");
    md.push_str("| strategy | params | MACs per forward |\n|---|---|---|\n");
    for (name, p, m) in rows {
        md.push_str(&format!("| {name} | {p} | {m} |\n"));
    }
    let overhead = dtm_c.params as f64 / det_c.params as f64 * 100.0;
    md.push_str(&format!(
        "\nTransfer-module overhead: {} parameters = {:.2}% of the detector.\n\n",
        dtm_c.params, overhead
    ));
    md
}

/// Emit `report.md` and SVG plots for a set of run directories.
pub fn emit_report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<String>> {
    let mut missing = Vec::new();
    let mut loaded = Vec::new();
    for dir in run_dirs {
        match load_run(dir) {
            Ok(run) => loaded.push(run),
            Err(e) => missing.push(format!("{}: {e}", dir.display())),
        }
    }
    if loaded.is_empty() {
        return Err(Error::InvalidArgument(
            "no readable runs; nothing to report".into(),
        ));
    }
    std::fs::create_dir_all(out.join("plots"))
        .map_err(|e| Error::io(out.display().to_string(), e))?;

    let mut md = String::from("# Experiment report\n\n");
    if !missing.is_empty() {
        md.push_str("Missing or unreadable runs:\n\n");
        for m in &missing {
            md.push_str(&format!("- {m}\n"));
        }
        md.push('\n');
    }
    md.push_str("## Detection accuracy\n\n");
    md.push_str(&md_map_tables(&loaded));

    // forgetting curves (only meaningful with >= 2 recorded steps)
    let (curve_svg, _) = forgetting_curves(&loaded);
    let has_curve = loaded.iter().any(|r| r.records.len() > 1);
    if has_curve {
        std::fs::write(out.join("plots/forgetting.svg"), curve_svg)
            .map_err(|e| Error::io(out.display().to_string(), e))?;
        md.push_str("## Forgetting\n\n![forgetting curves](plots/forgetting.svg)\n\n");
        md.push_str("Forgetting per run (first-target mAP drop from its own step to the final step):\n\n");
        md.push_str("| run | target | forgetting |\n|---|---|---|\n");
        for run in &loaded {
            let fc = run.dir.join("forgetting.csv");
            if let Ok(text) = std::fs::read_to_string(&fc) {
                for line in text.lines().skip(1) {
                    let cols: Vec<&str> = line.split(',').collect();
                    if cols.len() == 3 {
                        md.push_str(&format!("| {} | {} | {} |\n", cols[0], cols[1], cols[2]));
                    }
                }
            }
        }
        md.push('\n');
    }

    // feature projection + histograms from the first run that offers a
    // checkpoint (preferring one with a transfer module)
    let feature_run = loaded
        .iter()
        .find(|r| {
            runs::completed_steps(&r.dir)
                .iter()
                .any(|&s| runs::load_step_dtm(&r.dir, s).ok().flatten().is_some())
        })
        .or(loaded.first());
    if let Some(run) = feature_run {
        let steps = runs::completed_steps(&run.dir);
        if let Some(&last) = steps.last() {
            let phi = runs::load_step_detector(&run.dir, last)?;
            let dtm = steps
                .iter()
                .rev()
                .find_map(|&s| runs::load_step_dtm(&run.dir, s).ok().flatten());
            let cfg = &run.config;
            let source = build_domain_dataset(&cfg.data.source, 1, cfg.data.n_eval.min(64))?;
            let mut targets = Vec::new();
            for spec in cfg.ordered_targets()? {
                targets.push(build_domain_dataset(spec, 1, cfg.data.n_eval.min(64))?);
            }
            let scatter = feature_scatter(&phi, dtm.as_ref(), &source, &targets)?;
            std::fs::write(out.join("plots/features.svg"), scatter)
                .map_err(|e| Error::io(out.display().to_string(), e))?;
            md.push_str("## Feature overlap\n\n![feature projection](plots/features.svg)\n\n");

            // confidence histograms against the source-only detector
            let phi0 = runs::load_step_detector(&run.dir, 0)?;
            for (stage, bins, tag) in [
                (HistogramStage::Rpn, 100usize, "rpn"),
                (HistogramStage::Classifier, 10usize, "classifier"),
            ] {
                let mut series = vec![(
                    "source".to_string(),
                    confidence_histogram(&phi0, &source, stage, 0, bins)?,
                )];
                for t in &targets {
                    series.push((
                        t.spec.name.clone(),
                        confidence_histogram(&phi0, t, stage, 0, bins)?,
                    ));
                }
                let chart = svg::histogram_chart(
                    &format!("{tag} confidence scores (source-only detector)"),
                    &series,
                );
                let file = format!("plots/hist_{tag}.svg");
                std::fs::write(out.join(&file), chart)
                    .map_err(|e| Error::io(out.display().to_string(), e))?;
                md.push_str(&format!("![{tag} histogram]({file})\n\n"));
            }
        }
    }

    md.push_str(&complexity_md(
        loaded
            .first()
            .map(|r| r.config.model.dtm_variant)
            .unwrap_or(DtmVariant::Original),
    ));

    std::fs::write(out.join("report.md"), md)
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    Ok(missing)
}
