//! Experiment configuration: a diff-friendly sectioned key=value format.
//!
//! Grammar (documented in the README):
//!
//! ```text
//! # comment
//! [section]            sections: data, model, train, run
//! key = value          values: integer, float, bool, word, name list
//! name.param = lo..hi  per-domain parameter range override
//! ```
//!
//! Unknown sections or keys are rejected with a line diagnostic, and
//! parse -> serialize -> parse is the identity on the parsed configuration
//! (the serializer writes every resolved field).

use std::collections::BTreeSet;

use crate::autodiff::DomainLossKind;
use crate::dtm::DtmVariant;
use crate::error::{Error, Result};
use crate::seeds;
use crate::synth::{DomainKind, DomainSpec};
use crate::trainer::{HyperParams, StrategyId};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub run: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub source: DomainSpec,
    pub targets: Vec<DomainSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dtm_variant: DtmVariant,
    pub loss_kind: DomainLossKind,
    pub grl_lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub lr_initial: f64,
    pub lr_decayed: f64,
    pub iters_per_phase: usize,
    pub decay_point: f64,
    pub dtm_lr: f64,
    pub dtm_iters: usize,
    pub kd_weight: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub strategy: StrategyId,
    /// Target names in adaptation order (subset or permutation of
    /// `data.targets`).
    pub order: Vec<String>,
    pub out: String,
}

impl ExperimentConfig {
    /// Built-in default: one source plus fog / colorshift / noise targets,
    /// adaptation order fog -> noise (colorshift held out for open-domain
    /// evaluation).
    pub fn default_config() -> Self {
        let data_seed = 7u64;
        let mk = |name: &str, kind: DomainKind| DomainSpec {
            name: name.into(),
            kind,
            seed: seeds::derive(data_seed, name),
            params: kind.default_params(),
        };
        ExperimentConfig {
            data: DataConfig {
                n_train: 400,
                n_eval: 200,
                seed: data_seed,
                source: mk("source", DomainKind::Source),
                targets: vec![
                    mk("fog", DomainKind::Fog),
                    mk("colorshift", DomainKind::Colorshift),
                    mk("noise", DomainKind::Noise),
                ],
            },
            model: ModelConfig {
                dtm_variant: DtmVariant::Original,
                loss_kind: DomainLossKind::Focal { gamma: 2.0 },
                grl_lambda: 1.0,
            },
            train: TrainConfig {
                lambda: 1.0,
                alpha: 1.0,
                lr_initial: 1e-3,
                lr_decayed: 1e-4,
                iters_per_phase: 1500,
                decay_point: 5.0 / 7.0,
                dtm_lr: 0.01,
                dtm_iters: 1500,
                kd_weight: 1.0,
                seed: 1,
            },
            run: RunConfig {
                strategy: StrategyId::MtdaDtm,
                order: vec!["fog".into(), "noise".into()],
                out: "runs/default".into(),
            },
        }
    }

    /// Hyper-parameters for the trainer, merging train and model sections.
    pub fn hyper(&self) -> HyperParams {
        HyperParams {
            lambda: self.train.lambda,
            alpha: self.train.alpha,
            lr_initial: self.train.lr_initial,
            lr_decayed: self.train.lr_decayed,
            iters_per_phase: self.train.iters_per_phase,
            decay_point: self.train.decay_point,
            seed: self.train.seed,
            l_c_kind: self.model.loss_kind,
            kd_weight: self.train.kd_weight,
            grl_lambda: self.model.grl_lambda,
            dtm_variant: self.model.dtm_variant,
            dtm_lr: self.train.dtm_lr,
            dtm_iters: self.train.dtm_iters,
        }
    }

    /// Target specs in the run order.
    pub fn ordered_targets(&self) -> Result<Vec<&DomainSpec>> {
        self.run
            .order
            .iter()
            .map(|name| {
                self.data
                    .targets
                    .iter()
                    .find(|t| &t.name == name)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "run order references unknown target {name:?}"
                        ))
                    })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.source.validate()?;
        if self.data.source.kind != DomainKind::Source {
            return Err(Error::InvalidArgument(
                "the source entry must have kind source".into(),
            ));
        }
        let mut names = BTreeSet::new();
        for t in &self.data.targets {
            t.validate()?;
            if t.kind == DomainKind::Source {
                return Err(Error::InvalidArgument(format!(
                    "target {} cannot have kind source",
                    t.name
                )));
            }
            if !names.insert(&t.name) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate target name {}",
                    t.name
                )));
            }
        }
        if self.run.order.is_empty() {
            return Err(Error::InvalidArgument("run order is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for name in &self.run.order {
            if !seen.insert(name) {
                return Err(Error::InvalidArgument(format!(
                    "target {name} repeated in run order"
                )));
            }
        }
        self.ordered_targets()?;
        if !(self.train.decay_point > 0.0 && self.train.decay_point <= 1.0) {
            return Err(Error::InvalidArgument(
                "decay_point must be in (0, 1]".into(),
            ));
        }
        if self.train.lambda < 0.0 || self.train.alpha < 0.0 {
            return Err(Error::InvalidArgument(
                "lambda and alpha must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Canonical text form; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        s.push_str("[data]\n");
        s.push_str(&format!("n_train = {}\n", self.data.n_train));
        s.push_str(&format!("n_eval = {}\n", self.data.n_eval));
        s.push_str(&format!("seed = {}\n", self.data.seed));
        s.push_str(&format!("source.seed = {}\n", self.data.source.seed));
        let names: Vec<&str> = self.data.targets.iter().map(|t| t.name.as_str()).collect();
        s.push_str(&format!("targets = {}\n", names.join(", ")));
        for t in &self.data.targets {
            s.push_str(&format!("{}.kind = {}\n", t.name, t.kind));
            s.push_str(&format!("{}.seed = {}\n", t.name, t.seed));
            for (k, (lo, hi)) in &t.params {
                s.push_str(&format!("{}.{} = {}..{}\n", t.name, k, lo, hi));
            }
        }
        s.push_str("\n[model]\n");
        s.push_str(&format!("dtm_variant = {}\n", self.model.dtm_variant.as_str()));
        let kind = match self.model.loss_kind {
            DomainLossKind::CrossEntropy => "cross_entropy".to_string(),
            DomainLossKind::Focal { gamma } => {
                if gamma == 2.0 {
                    "focal".to_string()
                } else {
                    format!("focal:{gamma}")
                }
            }
        };
        s.push_str(&format!("loss_kind = {kind}\n"));
        s.push_str(&format!("grl_lambda = {}\n", self.model.grl_lambda));
        s.push_str("\n[train]\n");
        s.push_str(&format!("lambda = {}\n", self.train.lambda));
        s.push_str(&format!("alpha = {}\n", self.train.alpha));
        s.push_str(&format!("lr_initial = {}\n", self.train.lr_initial));
        s.push_str(&format!("lr_decayed = {}\n", self.train.lr_decayed));
        s.push_str(&format!("iters_per_phase = {}\n", self.train.iters_per_phase));
        s.push_str(&format!("decay_point = {}\n", self.train.decay_point));
        s.push_str(&format!("dtm_lr = {}\n", self.train.dtm_lr));
        s.push_str(&format!("dtm_iters = {}\n", self.train.dtm_iters));
        s.push_str(&format!("kd_weight = {}\n", self.train.kd_weight));
        s.push_str(&format!("seed = {}\n", self.train.seed));
        s.push_str("\n[run]\n");
        s.push_str(&format!("strategy = {}\n", self.run.strategy));
        s.push_str(&format!("order = {}\n", self.run.order.join(", ")));
        s.push_str(&format!("out = {}\n", self.run.out));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default_config();
        // targets are rebuilt from the file rather than inherited
        cfg.data.targets.clear();
        cfg.run.order.clear();

        let mut section = String::new();
        let mut pending: Vec<(usize, String, String)> = Vec::new(); // domain-scoped keys
        let mut declared: Vec<String> = Vec::new();
        let mut source_seed: Option<u64> = None;
        let mut saw_source_seed_line = false;

        let err = |line: usize, msg: String| Error::Config { line, msg };

        for (ln, raw) in text.lines().enumerate() {
            let line_no = ln + 1;
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                section = name.trim().to_string();
                if !["data", "model", "train", "run"].contains(&section.as_str()) {
                    return Err(err(line_no, format!("unknown section [{section}]")));
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(line_no, format!("expected key = value, got {line:?}")));
            };
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                return Err(err(line_no, "key before any [section]".into()));
            }
            let parse_u64 = |v: &str, line: usize| -> Result<u64> {
                v.parse()
                    .map_err(|_| err(line, format!("expected integer, got {v:?}")))
            };
            let parse_usize = |v: &str, line: usize| -> Result<usize> {
                v.parse()
                    .map_err(|_| err(line, format!("expected integer, got {v:?}")))
            };
            let parse_f64 = |v: &str, line: usize| -> Result<f64> {
                v.parse()
                    .map_err(|_| err(line, format!("expected number, got {v:?}")))
            };
            match section.as_str() {
                "data" => match key {
                    "n_train" => cfg.data.n_train = parse_usize(value, line_no)?,
                    "n_eval" => cfg.data.n_eval = parse_usize(value, line_no)?,
                    "seed" => cfg.data.seed = parse_u64(value, line_no)?,
                    "source.seed" => {
                        source_seed = Some(parse_u64(value, line_no)?);
                        saw_source_seed_line = true;
                    }
                    "targets" => {
                        declared = value
                            .split(',')
                            .map(|s| s.trim().to_string())
                            .filter(|s| !s.is_empty())
                            .collect();
                    }
                    _ => {
                        if let Some((name, param)) = key.split_once('.') {
                            pending.push((line_no, format!("{name}.{param}"), value.to_string()));
                        } else {
                            return Err(err(line_no, format!("unknown key {key:?} in [data]")));
                        }
                    }
                },
                "model" => match key {
                    "dtm_variant" => {
                        cfg.model.dtm_variant = DtmVariant::parse(value)
                            .map_err(|e| err(line_no, e.to_string()))?
                    }
                    "loss_kind" => {
                        cfg.model.loss_kind = parse_loss_kind(value)
                            .ok_or_else(|| err(line_no, format!("bad loss kind {value:?}")))?
                    }
                    "grl_lambda" => cfg.model.grl_lambda = parse_f64(value, line_no)?,
                    _ => return Err(err(line_no, format!("unknown key {key:?} in [model]"))),
                },
                "train" => match key {
                    "lambda" => cfg.train.lambda = parse_f64(value, line_no)?,
                    "alpha" => cfg.train.alpha = parse_f64(value, line_no)?,
                    "lr_initial" => cfg.train.lr_initial = parse_f64(value, line_no)?,
                    "lr_decayed" => cfg.train.lr_decayed = parse_f64(value, line_no)?,
                    "iters_per_phase" => cfg.train.iters_per_phase = parse_usize(value, line_no)?,
                    "decay_point" => cfg.train.decay_point = parse_f64(value, line_no)?,
                    "dtm_lr" => cfg.train.dtm_lr = parse_f64(value, line_no)?,
                    "dtm_iters" => cfg.train.dtm_iters = parse_usize(value, line_no)?,
                    "kd_weight" => cfg.train.kd_weight = parse_f64(value, line_no)?,
                    "seed" => cfg.train.seed = parse_u64(value, line_no)?,
                    _ => return Err(err(line_no, format!("unknown key {key:?} in [train]"))),
                },
                "run" => match key {
                    "strategy" => {
                        cfg.run.strategy = StrategyId::parse(value)
                            .map_err(|e| err(line_no, e.to_string()))?
                    }
                    "order" => {
                        cfg.run.order = value
                            .split(',')
                            .map(|s| s.trim().to_string())
                            .filter(|s| !s.is_empty())
                            .collect();
                    }
                    "out" => cfg.run.out = value.to_string(),
                    _ => return Err(err(line_no, format!("unknown key {key:?} in [run]"))),
                },
                _ => unreachable!(),
            }
        }

        // resolve source seed (explicit or derived from the data seed)
        cfg.data.source.seed = source_seed.unwrap_or_else(|| seeds::derive(cfg.data.seed, "source"));
        let _ = saw_source_seed_line;

        // build target specs: declared names, defaults, then scoped overrides
        for name in &declared {
            let kind = DomainKind::parse(name).unwrap_or(DomainKind::Fog);
            let spec = DomainSpec {
                name: name.clone(),
                kind,
                seed: seeds::derive(cfg.data.seed, name),
                params: kind.default_params(),
            };
            cfg.data.targets.push(spec);
        }
        for (line_no, key, value) in pending {
            let (name, param) = key.split_once('.').unwrap();
            let Some(spec) = cfg.data.targets.iter_mut().find(|t| t.name == name) else {
                return Err(Error::Config {
                    line: line_no,
                    msg: format!("unknown key {key:?} in [data] (no declared target {name:?})"),
                });
            };
            match param {
                "kind" => {
                    let kind = DomainKind::parse(&value)
                        .map_err(|e| Error::Config {
                            line: line_no,
                            msg: e.to_string(),
                        })?;
                    spec.kind = kind;
                    spec.params = kind.default_params();
                }
                "seed" => {
                    spec.seed = value.parse().map_err(|_| Error::Config {
                        line: line_no,
                        msg: format!("expected integer, got {value:?}"),
                    })?;
                }
                _ => {
                    let Some((lo, hi)) = value.split_once("..") else {
                        return Err(Error::Config {
                            line: line_no,
                            msg: format!("expected range lo..hi for {key}, got {value:?}"),
                        });
                    };
                    let lo: f64 = lo.trim().parse().map_err(|_| Error::Config {
                        line: line_no,
                        msg: format!("bad number {lo:?}"),
                    })?;
                    let hi: f64 = hi.trim().parse().map_err(|_| Error::Config {
                        line: line_no,
                        msg: format!("bad number {hi:?}"),
                    })?;
                    if !spec.kind.default_params().contains_key(param) {
                        return Err(Error::Config {
                            line: line_no,
                            msg: format!(
                                "parameter {param:?} not valid for domain kind {}",
                                spec.kind
                            ),
                        });
                    }
                    spec.params.insert(param.to_string(), (lo, hi));
                }
            }
        }

        if cfg.run.order.is_empty() {
            cfg.run.order = declared.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_loss_kind(s: &str) -> Option<DomainLossKind> {
    match s {
        "cross_entropy" => Some(DomainLossKind::CrossEntropy),
        "focal" => Some(DomainLossKind::Focal { gamma: 2.0 }),
        _ => {
            let gamma = s.strip_prefix("focal:")?.parse().ok()?;
            Some(DomainLossKind::Focal { gamma })
        }
    }
}
