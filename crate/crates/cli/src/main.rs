//! `mtda`: experiment orchestration for the incremental multi-target domain
//! adaptation toolkit. Verbs: generate-data, run, sweep, report, eval.
//!
//! Exit codes: 0 success, 1 configuration/usage error, 2 runtime divergence,
//! 3 a sweep finished with some failed cells.

mod report;
mod runs;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mtda_core::config::ExperimentConfig;
use mtda_core::dtm::DtmVariant;
use mtda_core::error::Error;
use mtda_core::eval::map_over_dataset;
use mtda_core::synth::{build_domain_dataset, DomainDataset};
use mtda_core::trainer::{Strategy, StrategyId};

#[derive(Parser)]
#[command(name = "mtda", version, about = "Incremental multi-target domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build (or verify) all datasets declared in the configuration.
    GenerateData {
        /// Configuration file; the built-in default is used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (defaults to the config's run.out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute one strategy run (resumes after an interruption).
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the strategy id.
        #[arg(long)]
        strategy: Option<String>,
        /// Override the target order as comma-separated indices into the
        /// config's target list, e.g. `--order 0,2,1`.
        #[arg(long)]
        order: Option<String>,
    },
    /// Run a one-axis sweep; each cell is an independent run directory.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base seed for the seed axis.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Emit a markdown report with plots for one or more run directories.
    Report {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate a run checkpoint on any declared domain (open-domain
    /// protocol).
    Eval {
        /// Run directory holding the checkpoints.
        #[arg(long)]
        run: PathBuf,
        /// Domain name declared in the configuration.
        #[arg(long)]
        domain: String,
        /// Step index (defaults to the last completed step).
        #[arg(long)]
        step: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SweepAxis {
    Alpha,
    Order,
    Seed,
    DtmVariant,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            ExperimentConfig::parse(&text)
        }
        None => Ok(ExperimentConfig::default_config()),
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, Error> {
    match cli.cmd {
        Cmd::GenerateData { config, out } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.run.out));
            for (name, action) in runs::generate_data(&cfg, &out)? {
                println!("{name}: {action}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run {
            config,
            out,
            seed,
            strategy,
            order,
        } => {
            let mut cfg = load_config(&config)?;
            apply_overrides(&mut cfg, seed, strategy, order)?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.run.out));
            cfg.run.out = out.display().to_string();
            run_one(&cfg, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep {
            config,
            axis,
            out,
            seed,
        } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.run.out));
            sweep(&cfg, axis, &out, seed)
        }
        Cmd::Report { runs, out } => {
            let out = out.unwrap_or_else(|| runs[0].join("report"));
            let missing = report::emit_report(&runs, &out)?;
            println!("report written to {}", out.join("report.md").display());
            for m in missing {
                eprintln!("skipped: {m}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval {
            run,
            domain,
            step,
            config,
        } => {
            let cfg = match &config {
                Some(_) => load_config(&config)?,
                None => {
                    let text = std::fs::read_to_string(run.join("config.ini"))
                        .map_err(|e| Error::io(run.display().to_string(), e))?;
                    ExperimentConfig::parse(&text)?
                }
            };
            eval_checkpoint(&cfg, &run, &domain, step)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn apply_overrides(
    cfg: &mut ExperimentConfig,
    seed: Option<u64>,
    strategy: Option<String>,
    order: Option<String>,
) -> Result<(), Error> {
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(s) = strategy {
        cfg.run.strategy = StrategyId::parse(&s)?;
    }
    if let Some(o) = order {
        let idxs: Result<Vec<usize>, _> = o.split(',').map(|t| t.trim().parse::<usize>()).collect();
        let idxs = idxs.map_err(|_| {
            Error::InvalidArgument(format!("--order expects comma-separated indices, got {o:?}"))
        })?;
        let mut names = Vec::new();
        for i in idxs {
            let t = cfg.data.targets.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("--order index {i} out of range"))
            })?;
            names.push(t.name.clone());
        }
        cfg.run.order = names;
    }
    cfg.validate()
}

fn load_run_data(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<(DomainDataset, Vec<DomainDataset>), Error> {
    runs::generate_data(cfg, out)?;
    let source = runs::load_domain(out, &cfg.data.source.name)?;
    let mut targets = Vec::new();
    for spec in cfg.ordered_targets()? {
        targets.push(runs::load_domain(out, &spec.name)?);
    }
    Ok((source, targets))
}

fn run_one(cfg: &ExperimentConfig, out: &Path) -> Result<(), Error> {
    let (source, targets) = load_run_data(cfg, out)?;
    let strategy = Strategy {
        id: cfg.run.strategy,
        hyper: cfg.hyper(),
    };
    let refs: Vec<&DomainDataset> = targets.iter().collect();
    let outcome = runs::run_to_dir(cfg, &strategy, &source, &refs, out)?;
    println!(
        "run complete: strategy={} steps={}",
        strategy.id,
        outcome.state.records.len()
    );
    if let Some(last) = outcome.state.records.last() {
        print!("final: source {:.3}", last.source_report.map);
        for r in &last.target_reports {
            print!("  {} {:.3}", r.target, r.map);
        }
        println!("  | all-target {:.3}", last.all_target_map());
    }
    Ok(())
}

fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    out: &Path,
    base_seed: Option<u64>,
) -> Result<ExitCode, Error> {
    // shared datasets for every cell
    runs::generate_data(cfg, out)?;

    struct Cell {
        name: String,
        cfg: ExperimentConfig,
    }
    let mut cells: Vec<Cell> = Vec::new();
    match axis {
        SweepAxis::Alpha => {
            for i in 1..=10 {
                let alpha = i as f64 / 10.0;
                let mut c = cfg.clone();
                c.train.alpha = alpha;
                c.run.strategy = StrategyId::MtdaDtm;
                cells.push(Cell {
                    name: format!("alpha_{alpha:.1}"),
                    cfg: c,
                });
            }
        }
        SweepAxis::Order => {
            let order = cfg.run.order.clone();
            if order.len() > 4 {
                return Err(Error::InvalidArgument(format!(
                    "order sweep over {} targets would need {} runs; cap is 4 targets",
                    order.len(),
                    (1..=order.len()).product::<usize>()
                )));
            }
            for perm in permutations(&order) {
                let mut c = cfg.clone();
                c.run.order = perm.clone();
                cells.push(Cell {
                    name: format!("order_{}", perm.join("-")),
                    cfg: c,
                });
            }
        }
        SweepAxis::Seed => {
            let base = base_seed.unwrap_or(cfg.train.seed);
            for i in 0..3 {
                let mut c = cfg.clone();
                c.train.seed = base + i;
                cells.push(Cell {
                    name: format!("seed_{}", base + i),
                    cfg: c,
                });
            }
        }
        SweepAxis::DtmVariant => {
            for v in DtmVariant::all() {
                let mut c = cfg.clone();
                c.model.dtm_variant = v;
                c.run.strategy = StrategyId::MtdaDtm;
                cells.push(Cell {
                    name: format!("dtm_{}", v.as_str()),
                    cfg: c,
                });
            }
        }
    }

    let axis_name = match axis {
        SweepAxis::Alpha => "alpha",
        SweepAxis::Order => "order",
        SweepAxis::Seed => "seed",
        SweepAxis::DtmVariant => "dtm_variant",
    };
    let sweep_dir = out.join(format!("sweep_{axis_name}"));
    std::fs::create_dir_all(&sweep_dir)
        .map_err(|e| Error::io(sweep_dir.display().to_string(), e))?;

    let mut csv = String::from("axis,cell,status,all_target_map");
    for name in &cfg.run.order {
        csv.push_str(&format!(",map_{name}"));
    }
    csv.push('\n');
    let mut failures = 0usize;
    for cell in &cells {
        let cell_dir = sweep_dir.join(&cell.name);
        println!("sweep cell {} ...", cell.name);
        let result = (|| -> Result<(f64, Vec<(String, f64)>), Error> {
            let source = runs::load_domain(out, &cell.cfg.data.source.name)?;
            let mut targets = Vec::new();
            for spec in cell.cfg.ordered_targets()? {
                targets.push(runs::load_domain(out, &spec.name)?);
            }
            let strategy = Strategy {
                id: cell.cfg.run.strategy,
                hyper: cell.cfg.hyper(),
            };
            let refs: Vec<&DomainDataset> = targets.iter().collect();
            let outcome = runs::run_to_dir(&cell.cfg, &strategy, &source, &refs, &cell_dir)?;
            let last = outcome
                .state
                .records
                .last()
                .ok_or_else(|| Error::Strategy("empty run".into()))?;
            let per_target = last
                .target_reports
                .iter()
                .map(|r| (r.target.clone(), r.map))
                .collect();
            Ok((last.all_target_map(), per_target))
        })();
        match result {
            Ok((all, per_target)) => {
                csv.push_str(&format!("{axis_name},{},ok,{all}", cell.name));
                for name in &cfg.run.order {
                    let v = per_target
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, v)| v.to_string())
                        .unwrap_or_else(|| "-".into());
                    csv.push_str(&format!(",{v}"));
                }
                csv.push('\n');
            }
            Err(e) => {
                eprintln!("cell {} failed: {e}", cell.name);
                failures += 1;
                csv.push_str(&format!("{axis_name},{},failed,-", cell.name));
                for _ in &cfg.run.order {
                    csv.push_str(",-");
                }
                csv.push('\n');
            }
        }
    }
    std::fs::write(sweep_dir.join("sweep.csv"), &csv)
        .map_err(|e| Error::io(sweep_dir.display().to_string(), e))?;
    println!(
        "sweep complete: {} cells, {} failed -> {}",
        cells.len(),
        failures,
        sweep_dir.join("sweep.csv").display()
    );
    Ok(if failures > 0 {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    })
}

fn permutations(items: &[String]) -> Vec<Vec<String>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for (i, head) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head.clone());
            out.push(tail);
        }
    }
    out
}

fn eval_checkpoint(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    domain: &str,
    step: Option<usize>,
) -> Result<(), Error> {
    let steps = runs::completed_steps(run_dir);
    let step = match step {
        Some(s) if steps.contains(&s) => s,
        Some(s) => {
            return Err(Error::InvalidArgument(format!(
                "step {s} not completed in {}",
                run_dir.display()
            )))
        }
        None => *steps.last().ok_or_else(|| {
            Error::InvalidArgument(format!("{} has no completed steps", run_dir.display()))
        })?,
    };
    let spec = if cfg.data.source.name == domain {
        cfg.data.source.clone()
    } else {
        cfg.data
            .targets
            .iter()
            .find(|t| t.name == domain)
            .cloned()
            .ok_or_else(|| {
                Error::InvalidArgument(format!("domain {domain:?} not declared in the config"))
            })?
    };
    // prefer generated data on disk; otherwise build the eval split fresh
    let out_dir = PathBuf::from(&cfg.run.out);
    let ds = runs::load_domain(&out_dir, domain)
        .or_else(|_| build_domain_dataset(&spec, 1, cfg.data.n_eval))?;
    let phi = runs::load_step_detector(run_dir, step)?;
    let report = map_over_dataset(&phi, &ds)?;
    println!("step {step} on {domain}: mAP {:.4}", report.map);
    for (c, ap) in &report.per_class_ap {
        println!("  class {c}: AP {ap:.4}");
    }
    let mut csv = String::from("step,target,class,ap,map\n");
    for (c, ap) in &report.per_class_ap {
        csv.push_str(&format!("{step},{domain},{c},{ap},{}\n", report.map));
    }
    let file = run_dir.join(format!("eval_{domain}_step{step}.csv"));
    std::fs::write(&file, csv).map_err(|e| Error::io(file.display().to_string(), e))?;
    println!("written {}", file.display());
    Ok(())
}
