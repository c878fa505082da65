//! Incremental multi-target adaptation strategies: the full MTDA-DTM
//! training loop plus every baseline (sequential unsupervised fine-tuning,
//! retention baselines, per-target detectors, distillation, supervised upper
//! bounds), the learning-rate schedule, dataset access logging for the
//! no-retention audit, and the per-step evaluation table.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{DomainLossKind, Tape, Var};
use crate::da::{bind_discriminators, da_terms_for_image, DiscriminatorSet};
use crate::detector::{
    bind_detector, collect_grads, forward_image, roi_extract, roi_head, rpn_propose,
    supervised_loss_on, DetectorParams, RpnMode,
};
use crate::dtm::{dtm_apply, train_dtm, DTMParams, DtmVariant};
use crate::error::{Error, Result};
use crate::eval::{map_over_dataset, EvalReport};
use crate::optim::MomentumSgd;
use crate::seeds;
use crate::synth::{DomainDataset, NUM_CLASSES};

/// Strategy roster. The unsupervised incremental strategies (`Uft`,
/// `IncrMtdaKd`, `MtdaDtm`) must never read previous targets' train images;
/// `UftPrev` and `Mixed` are the retention baselines that do.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyId {
    SourceOnly,
    Uft,
    UftPrev,
    Mixed,
    OnlyDa,
    IncrMtdaKd,
    MtdaDtm,
    SupOnly,
    SupFt,
    SupMixed,
}

impl StrategyId {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyId::SourceOnly => "source_only",
            StrategyId::Uft => "uft",
            StrategyId::UftPrev => "uft_prev",
            StrategyId::Mixed => "mixed",
            StrategyId::OnlyDa => "only_da",
            StrategyId::IncrMtdaKd => "incr_mtda_kd",
            StrategyId::MtdaDtm => "mtda_dtm",
            StrategyId::SupOnly => "sup_only",
            StrategyId::SupFt => "sup_ft",
            StrategyId::SupMixed => "sup_mixed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "source_only" => StrategyId::SourceOnly,
            "uft" => StrategyId::Uft,
            "uft_prev" => StrategyId::UftPrev,
            "mixed" => StrategyId::Mixed,
            "only_da" => StrategyId::OnlyDa,
            "incr_mtda_kd" => StrategyId::IncrMtdaKd,
            "mtda_dtm" => StrategyId::MtdaDtm,
            "sup_only" => StrategyId::SupOnly,
            "sup_ft" => StrategyId::SupFt,
            "sup_mixed" => StrategyId::SupMixed,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown strategy {other:?}"
                )))
            }
        })
    }

    pub fn all() -> [StrategyId; 10] {
        [
            StrategyId::SourceOnly,
            StrategyId::Uft,
            StrategyId::UftPrev,
            StrategyId::Mixed,
            StrategyId::OnlyDa,
            StrategyId::IncrMtdaKd,
            StrategyId::MtdaDtm,
            StrategyId::SupOnly,
            StrategyId::SupFt,
            StrategyId::SupMixed,
        ]
    }

    pub fn is_supervised(&self) -> bool {
        matches!(
            self,
            StrategyId::SupOnly | StrategyId::SupFt | StrategyId::SupMixed
        )
    }

    /// Strategies that by definition keep access to earlier targets' data.
    pub fn retains_previous_targets(&self) -> bool {
        matches!(
            self,
            StrategyId::UftPrev | StrategyId::Mixed | StrategyId::SupMixed
        )
    }

    /// Strategies covered by the no-retention audit.
    pub fn declares_no_retention(&self) -> bool {
        matches!(
            self,
            StrategyId::Uft | StrategyId::IncrMtdaKd | StrategyId::MtdaDtm
        )
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    /// Weight of the domain-confusion losses.
    pub lambda: f64,
    /// Weight of the pseudo-sample (transfer-module replay) loss.
    pub alpha: f64,
    pub lr_initial: f64,
    pub lr_decayed: f64,
    pub iters_per_phase: usize,
    /// Fraction of a phase after which the rate drops to `lr_decayed`.
    pub decay_point: f64,
    pub seed: u64,
    pub l_c_kind: DomainLossKind,
    pub kd_weight: f64,
    pub grl_lambda: f64,
    pub dtm_variant: DtmVariant,
    pub dtm_lr: f64,
    pub dtm_iters: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda: 1.0,
            alpha: 1.0,
            lr_initial: 1e-3,
            lr_decayed: 1e-4,
            iters_per_phase: 1500,
            decay_point: 5.0 / 7.0,
            seed: 1,
            l_c_kind: DomainLossKind::Focal { gamma: 2.0 },
            kd_weight: 1.0,
            grl_lambda: 1.0,
            dtm_variant: DtmVariant::Original,
            dtm_lr: 0.01,
            dtm_iters: 1500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Strategy {
    pub id: StrategyId,
    pub hyper: HyperParams,
}

/// Per-phase iteration plan: the first adaptation runs at `lr_initial`,
/// later phases at a tenth of it, and within a phase the rate drops by 10x
/// at the decay point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub iters: usize,
    pub lr_hi: f64,
    pub lr_lo: f64,
    pub decay_at: usize,
}

impl Schedule {
    pub fn lr_at(&self, it: usize) -> f64 {
        if it < self.decay_at {
            self.lr_hi
        } else {
            self.lr_lo
        }
    }
}

pub fn make_schedule(hyper: &HyperParams, phase_index: usize) -> Schedule {
    let scale = if phase_index >= 2 { 0.1 } else { 1.0 };
    let decay_at = ((hyper.decay_point * hyper.iters_per_phase as f64) as usize)
        .min(hyper.iters_per_phase);
    Schedule {
        iters: hyper.iters_per_phase,
        lr_hi: hyper.lr_initial * scale,
        lr_lo: hyper.lr_decayed * scale,
        decay_at,
    }
}

/// Reorder a target list; the permutation must mention every index exactly
/// once.
pub fn permute_targets<T: Clone>(targets: &[T], order: &[usize]) -> Result<Vec<T>> {
    if order.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "permutation has {} entries for {} targets",
            order.len(),
            targets.len()
        )));
    }
    let mut seen = vec![false; targets.len()];
    for &i in order {
        if i >= targets.len() || seen[i] {
            return Err(Error::InvalidArgument(format!("invalid permutation {order:?}")));
        }
        seen[i] = true;
    }
    Ok(order.iter().map(|&i| targets[i].clone()).collect())
}

/// Train-split read log: every image fetched by a training loop is recorded
/// as (step, domain, split, index). The no-retention audit checks that the
/// incremental strategies read only the source and the current target.
#[derive(Clone, Debug, Default)]
pub struct AccessLog {
    pub entries: Vec<AccessEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccessEntry {
    pub step: usize,
    pub domain: String,
    pub split: String,
    pub index: usize,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, step: usize, domain: &str, split: &str, index: usize) {
        self.entries.push(AccessEntry {
            step,
            domain: domain.to_string(),
            split: split.to_string(),
            index,
        });
    }

    pub fn domains_at_step(&self, step: usize) -> BTreeSet<String> {
        self.entries
            .iter()
            .filter(|e| e.step == step)
            .map(|e| e.domain.clone())
            .collect()
    }

    /// Violations of the no-retention invariant: for every adaptation step i
    /// (1-based), train reads must stay within the source and target i.
    pub fn no_retention_violations(&self, source: &str, ordered_targets: &[String]) -> Vec<String> {
        let mut out = Vec::new();
        for (i, _) in ordered_targets.iter().enumerate() {
            let step = i + 1;
            let allowed: BTreeSet<&str> =
                [source, ordered_targets[i].as_str()].into_iter().collect();
            for d in self.domains_at_step(step) {
                if !allowed.contains(d.as_str()) {
                    out.push(format!("step {step} read {d}"));
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,domain,split,index\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{},{}\n", e.step, e.domain, e.split, e.index));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<AccessLog> {
        let mut log = AccessLog::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(Error::InvalidArgument(format!(
                    "malformed access log line {line:?}"
                )));
            }
            log.record(
                cols[0]
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad step in {line:?}")))?,
                cols[1],
                cols[2],
                cols[3]
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad index in {line:?}")))?,
            );
        }
        Ok(log)
    }
}

/// Evaluation snapshot after one completed step (step 0 = source
/// pretraining).
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub label: String,
    pub source_report: EvalReport,
    pub target_reports: Vec<EvalReport>,
}

impl StepRecord {
    pub fn target_map(&self, idx: usize) -> f64 {
        self.target_reports[idx].map
    }

    pub fn all_target_map(&self) -> f64 {
        if self.target_reports.is_empty() {
            return 0.0;
        }
        self.target_reports.iter().map(|r| r.map).sum::<f64>() / self.target_reports.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("step={}\nlabel={}\n", self.step, self.label);
        let write_report = |r: &EvalReport, s: &mut String| {
            s.push_str(&format!(
                "report target={} map={} dets={} gts={}",
                r.target, r.map, r.detections, r.ground_truths
            ));
            for (c, ap) in &r.per_class_ap {
                s.push_str(&format!(" ap{c}={ap}"));
            }
            s.push('\n');
        };
        write_report(&self.source_report, &mut s);
        for r in &self.target_reports {
            write_report(r, &mut s);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<StepRecord> {
        let mut step = None;
        let mut label = None;
        let mut reports: Vec<EvalReport> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if let Some(v) = line.strip_prefix("step=") {
                step = Some(v.parse().map_err(|_| bad_record(line))?);
            } else if let Some(v) = line.strip_prefix("label=") {
                label = Some(v.to_string());
            } else if let Some(rest) = line.strip_prefix("report ") {
                let mut target = String::new();
                let mut map = 0.0;
                let mut dets = 0;
                let mut gts = 0;
                let mut per_class_ap = std::collections::BTreeMap::new();
                for tok in rest.split_whitespace() {
                    let (k, v) = tok.split_once('=').ok_or_else(|| bad_record(line))?;
                    match k {
                        "target" => target = v.to_string(),
                        "map" => map = v.parse().map_err(|_| bad_record(line))?,
                        "dets" => dets = v.parse().map_err(|_| bad_record(line))?,
                        "gts" => gts = v.parse().map_err(|_| bad_record(line))?,
                        _ => {
                            if let Some(c) = k.strip_prefix("ap") {
                                per_class_ap.insert(
                                    c.parse().map_err(|_| bad_record(line))?,
                                    v.parse().map_err(|_| bad_record(line))?,
                                );
                            }
                        }
                    }
                }
                reports.push(EvalReport {
                    target,
                    per_class_ap,
                    map,
                    detections: dets,
                    ground_truths: gts,
                });
            }
        }
        let (step, label) = (
            step.ok_or_else(|| bad_record("missing step"))?,
            label.ok_or_else(|| bad_record("missing label"))?,
        );
        if reports.is_empty() {
            return Err(bad_record("missing reports"));
        }
        let source_report = reports.remove(0);
        Ok(StepRecord {
            step,
            label,
            source_report,
            target_reports: reports,
        })
    }
}

fn bad_record(line: &str) -> Error {
    Error::InvalidArgument(format!("malformed step record: {line}"))
}

/// Full run state: one record per completed step, plus the access log.
#[derive(Clone, Debug)]
pub struct ExperimentState {
    pub strategy: StrategyId,
    pub target_names: Vec<String>,
    pub records: Vec<StepRecord>,
    pub access_log: AccessLog,
}

impl ExperimentState {
    /// Forgetting per non-final target: mAP right after its own step minus
    /// mAP at the final step. `None` when the strategy has no per-target
    /// step (e.g. mixed).
    pub fn forgetting(&self) -> Vec<Option<f64>> {
        let n = self.target_names.len();
        let last = match self.records.last() {
            Some(r) => r,
            None => return vec![None; n.saturating_sub(1)],
        };
        (0..n.saturating_sub(1))
            .map(|j| {
                self.records
                    .iter()
                    .find(|r| r.step == j + 1)
                    .filter(|_| last.step > j)
                    .map(|r| r.target_map(j) - last.target_map(j))
            })
            .collect()
    }

    /// Long-format CSV: step, strategy, target, class, AP, mAP.
    pub fn map_csv(&self) -> String {
        let mut s = String::from("step,strategy,target,class,ap,map\n");
        for rec in &self.records {
            let mut one = |r: &EvalReport| {
                if r.per_class_ap.is_empty() {
                    s.push_str(&format!(
                        "{},{},{},-,0,{}\n",
                        rec.step, self.strategy, r.target, r.map
                    ));
                }
                for (c, ap) in &r.per_class_ap {
                    s.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        rec.step, self.strategy, r.target, c, ap, r.map
                    ));
                }
            };
            one(&rec.source_report);
            for r in &rec.target_reports {
                one(r);
            }
        }
        s
    }

    pub fn forgetting_csv(&self) -> String {
        let mut s = String::from("strategy,target,forgetting\n");
        for (j, f) in self.forgetting().iter().enumerate() {
            let v = f.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
            s.push_str(&format!("{},{},{}\n", self.strategy, self.target_names[j], v));
        }
        s
    }
}

/// Extra loss terms layered on the base adaptation phase.
pub struct PhaseExtras<'a> {
    pub lambda: f64,
    pub kind: DomainLossKind,
    /// Frozen transfer module and its replay weight (incremental steps).
    pub pseudo: Option<(&'a DTMParams, f64)>,
    /// Frozen teacher and distillation weight (the KD baseline).
    pub kd: Option<(&'a DetectorParams, f64)>,
}

/// One unsupervised adaptation phase over (source, targets): per iteration a
/// source image and one target image are drawn, and a single joint SGD step
/// minimizes `lambda * (image + instance confusion) + alpha * replay +
/// kd_weight * distillation + supervised(source)`.
#[allow(clippy::too_many_arguments)]
pub fn da_phase(
    phi: &mut DetectorParams,
    disc: &mut DiscriminatorSet,
    source: &DomainDataset,
    targets: &[&DomainDataset],
    schedule: &Schedule,
    extras: &PhaseExtras,
    phase_seed: u64,
    log: &mut AccessLog,
    step: usize,
) -> Result<()> {
    if !source.labeled {
        return Err(Error::Strategy("source dataset must be labeled".into()));
    }
    if targets.is_empty() {
        return Err(Error::Strategy("adaptation needs at least one target".into()));
    }
    let grl_lambda = disc.grl_lambda;
    let mut opt = MomentumSgd::new(0.9);
    let mut src_rng = ChaCha8Rng::seed_from_u64(seeds::derive(phase_seed, "src"));
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(seeds::derive(phase_seed, "tgt"));

    for it in 0..schedule.iters {
        let lr = schedule.lr_at(it);
        let src_idx = src_rng.gen_range(0..source.train_len());
        log.record(step, &source.spec.name, "train", src_idx);
        let (src_img, src_anns) = source.train_item(src_idx);
        let src_anns = src_anns.expect("labeled source");

        let t_ds = if targets.len() == 1 {
            targets[0]
        } else {
            targets[tgt_rng.gen_range(0..targets.len())]
        };
        let tgt_idx = tgt_rng.gen_range(0..t_ds.train_len());
        log.record(step, &t_ds.spec.name, "train", tgt_idx);
        let (tgt_img, _) = t_ds.train_item(tgt_idx);

        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut tape, phi, true, &mut reg);
        let dv = bind_discriminators(&mut tape, disc, true, &mut reg);

        let src_fwd = forward_image(&mut tape, &det, src_img)?;
        let tgt_fwd = forward_image(&mut tape, &det, tgt_img)?;
        let roi_seed = seeds::derive_idx(phase_seed, "roi", it as u64);
        let sup = supervised_loss_on(&mut tape, &det, &src_fwd, src_anns, roi_seed)?;
        let src_terms =
            da_terms_for_image(&mut tape, &dv, &src_fwd, 0, true, grl_lambda, extras.kind)?;
        let tgt_terms =
            da_terms_for_image(&mut tape, &dv, &tgt_fwd, 1, true, grl_lambda, extras.kind)?;

        let mut terms: Vec<(f64, Var)> = vec![
            (1.0, sup),
            (extras.lambda * 0.5, src_terms.image),
            (extras.lambda * 0.5, tgt_terms.image),
        ];
        let n_inst = src_terms.instances.len() + tgt_terms.instances.len();
        if n_inst > 0 {
            let w = extras.lambda / n_inst as f64;
            for v in src_terms
                .instances
                .into_iter()
                .chain(tgt_terms.instances)
            {
                terms.push((w, v));
            }
        }

        // replay: pseudo-target sample from the frozen transfer module,
        // treated exactly like target data (label 1, gradient reversal)
        if let Some((g, alpha)) = extras.pseudo {
            let pseudo_pixels = dtm_apply(g, &src_img.pixels);
            let input = tape.leaf(pseudo_pixels, false);
            let z = crate::detector::backbone_forward_var(&mut tape, &det, input);
            let (obj, delta) = crate::detector::rpn_heads(&mut tape, &det, z);
            let pseudo_fwd = crate::detector::ImageForward { z, obj, delta };
            let p_terms =
                da_terms_for_image(&mut tape, &dv, &pseudo_fwd, 1, true, grl_lambda, extras.kind)?;
            terms.push((alpha, p_terms.image));
            if !p_terms.instances.is_empty() {
                let w = alpha / p_terms.instances.len() as f64;
                for v in p_terms.instances {
                    terms.push((w, v));
                }
            }
        }

        // knowledge distillation against the frozen pre-step teacher
        if let Some((teacher, weight)) = extras.kd {
            if let Some(kd) = kd_term(&mut tape, &det, &src_fwd, teacher, src_img)? {
                terms.push((weight, kd));
            }
        }

        let loss = tape.weighted_sum(&terms);
        let v = tape.scalar_value(loss);
        if !v.is_finite() {
            return Err(Error::Divergence {
                phase: format!("step {step}"),
                iter: it,
            });
        }
        tape.backward(loss);
        let grads = collect_grads(&tape, &reg);
        let mut params: Vec<(String, &mut crate::tensor::Tensor)> = phi.named_mut();
        params.extend(disc.named_mut());
        opt.step(lr, &mut params, &grads);
    }
    Ok(())
}

/// L2 distillation of the teacher's class logits and box deltas on its own
/// top eval-mode proposals, computed on the student's features.
fn kd_term(
    tape: &mut Tape,
    det: &crate::detector::DetectorVars,
    src_fwd: &crate::detector::ImageForward,
    teacher: &DetectorParams,
    img: &crate::synth::Image,
) -> Result<Option<Var>> {
    let mut treg = Vec::new();
    let tdet = bind_detector(tape, teacher, false, &mut treg);
    let tfwd = forward_image(tape, &tdet, img)?;
    let proposals = rpn_propose(tape.value(tfwd.obj), tape.value(tfwd.delta), RpnMode::Eval);
    if proposals.is_empty() {
        return Ok(None);
    }
    let mut terms = Vec::with_capacity(proposals.len() * 2);
    let w = 1.0 / proposals.len() as f64;
    for prop in &proposals {
        let tp = roi_extract(tape, tfwd.z, &prop.bbox)?;
        let (tcls, tdelta) = roi_head(tape, &tdet, tp);
        let target_cls = tape.value(tcls).data().to_vec();
        let target_delta = tape.value(tdelta).data().to_vec();

        let sp = roi_extract(tape, src_fwd.z, &prop.bbox)?;
        let (scls, sdelta) = roi_head(tape, det, sp);
        let l_cls = tape.mean_sq(scls, target_cls);
        let l_delta = tape.mean_sq(sdelta, target_delta);
        terms.push((w * 0.5, l_cls));
        terms.push((w * 0.5, l_delta));
    }
    Ok(Some(tape.weighted_sum(&terms)))
}

/// One supervised training phase over labeled datasets (pretraining and the
/// supervised baselines).
pub fn supervised_phase(
    phi: &mut DetectorParams,
    datasets: &[&DomainDataset],
    schedule: &Schedule,
    phase_seed: u64,
    log: &mut AccessLog,
    step: usize,
) -> Result<()> {
    for ds in datasets {
        if !ds.labeled {
            return Err(Error::Strategy(format!(
                "supervised phase on unlabeled dataset {}",
                ds.spec.name
            )));
        }
    }
    let mut opt = MomentumSgd::new(0.9);
    let mut src_rng = ChaCha8Rng::seed_from_u64(seeds::derive(phase_seed, "src"));
    for it in 0..schedule.iters {
        let lr = schedule.lr_at(it);
        let ds = if datasets.len() == 1 {
            datasets[0]
        } else {
            datasets[src_rng.gen_range(0..datasets.len())]
        };
        let idx = src_rng.gen_range(0..ds.train_len());
        log.record(step, &ds.spec.name, "train", idx);
        let (img, anns) = ds.train_item(idx);
        let anns = anns.expect("labeled dataset");

        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut tape, phi, true, &mut reg);
        let roi_seed = seeds::derive_idx(phase_seed, "roi", it as u64);
        let loss = crate::detector::supervised_loss(&mut tape, &det, img, anns, roi_seed)?;
        let v = tape.scalar_value(loss);
        if !v.is_finite() {
            return Err(Error::Divergence {
                phase: format!("step {step}"),
                iter: it,
            });
        }
        tape.backward(loss);
        let grads = collect_grads(&tape, &reg);
        opt.step(lr, &mut phi.named_mut(), &grads);
    }
    Ok(())
}

/// Incremental adaptation step with transfer-module replay (the MTDA-DTM
/// step for targets after the first): standard adaptation to the new target
/// plus replayed pseudo-samples from the frozen previous-step module.
#[allow(clippy::too_many_arguments)]
pub fn ida_step(
    phi: &mut DetectorParams,
    disc: &mut DiscriminatorSet,
    g_prev: &DTMParams,
    source: &DomainDataset,
    target: &DomainDataset,
    hyper: &HyperParams,
    phase_index: usize,
    log: &mut AccessLog,
) -> Result<()> {
    let schedule = make_schedule(hyper, phase_index);
    da_phase(
        phi,
        disc,
        source,
        &[target],
        &schedule,
        &PhaseExtras {
            lambda: hyper.lambda,
            kind: hyper.l_c_kind,
            pseudo: Some((g_prev, hyper.alpha)),
            kd: None,
        },
        seeds::derive_idx(hyper.seed, "phase", phase_index as u64),
        log,
        phase_index,
    )
}

/// Snapshot of a freshly completed step for persistence.
pub struct StepSnapshot<'a> {
    pub step: usize,
    pub label: String,
    pub phi: &'a DetectorParams,
    pub disc: Option<&'a DiscriminatorSet>,
    pub dtm: Option<&'a DTMParams>,
    pub record: &'a StepRecord,
    /// Cumulative train-read log up to and including this step.
    pub access_log: &'a AccessLog,
}

/// State needed to resume a run after the given number of completed steps.
pub struct ResumeState {
    pub next_step: usize,
    pub phi0: DetectorParams,
    pub phi: DetectorParams,
    pub disc: Option<DiscriminatorSet>,
    pub dtm: Option<DTMParams>,
    pub records: Vec<StepRecord>,
    pub access_log: AccessLog,
}

pub struct RunOutcome {
    pub state: ExperimentState,
    pub phi: DetectorParams,
    pub phi0: DetectorParams,
    pub disc: Option<DiscriminatorSet>,
    pub dtms: Vec<DTMParams>,
}

/// Execute a strategy over the target sequence. `on_step` fires after every
/// completed step (checkpointing hook); `resume` continues a partial run.
pub fn run_strategy_with(
    strategy: &Strategy,
    source: &DomainDataset,
    targets: &[&DomainDataset],
    resume: Option<ResumeState>,
    on_step: &mut dyn FnMut(&StepSnapshot) -> Result<()>,
) -> Result<RunOutcome> {
    let hyper = &strategy.hyper;
    let id = strategy.id;
    if !source.labeled {
        return Err(Error::Strategy("source dataset must be labeled".into()));
    }
    if !id.is_supervised() {
        if let Some(t) = targets.iter().find(|t| t.labeled) {
            return Err(Error::Strategy(format!(
                "strategy {id} expects unlabeled targets but {} is labeled",
                t.spec.name
            )));
        }
    }
    // supervised baselines read their targets' train labels
    let relabeled: Vec<DomainDataset>;
    let targets: Vec<&DomainDataset> = if id.is_supervised() {
        relabeled = targets.iter().map(|t| t.relabeled(true)).collect();
        relabeled.iter().collect()
    } else {
        targets.to_vec()
    };
    let n = targets.len();

    let mut log;
    let mut records: Vec<StepRecord>;
    let mut phi;
    let mut phi0;
    let mut disc: Option<DiscriminatorSet>;
    let mut dtm_prev: Option<DTMParams>;
    let mut dtms: Vec<DTMParams> = Vec::new();
    let next_step;

    let eval_step = |phi: &DetectorParams, step: usize, label: String| -> Result<StepRecord> {
        Ok(StepRecord {
            step,
            label,
            source_report: map_over_dataset(phi, source)?,
            target_reports: targets
                .iter()
                .map(|t| map_over_dataset(phi, t))
                .collect::<Result<_>>()?,
        })
    };

    match resume {
        Some(r) => {
            log = r.access_log;
            records = r.records;
            phi = r.phi;
            phi0 = r.phi0;
            disc = r.disc;
            dtm_prev = r.dtm;
            next_step = r.next_step;
            if let Some(d) = &dtm_prev {
                dtms.push(d.clone());
            }
        }
        None => {
            log = AccessLog::new();
            records = Vec::new();
            phi = DetectorParams::new(seeds::derive(hyper.seed, "init-det"), NUM_CLASSES);
            phi0 = phi.clone();
            disc = None;
            dtm_prev = None;
            next_step = 0;
        }
    }

    // step 0: supervised pretraining on the source
    if next_step == 0 {
        let schedule = make_schedule(hyper, 1);
        supervised_phase(
            &mut phi,
            &[source],
            &schedule,
            seeds::derive_idx(hyper.seed, "phase", 0),
            &mut log,
            0,
        )?;
        phi0 = phi.clone();
        let record = eval_step(&phi, 0, "pretrain".into())?;
        on_step(&StepSnapshot {
            step: 0,
            label: record.label.clone(),
            phi: &phi,
            disc: None,
            dtm: None,
            record: &record,
            access_log: &log,
        })?;
        records.push(record);
    }

    let adaptation_steps: usize = match id {
        StrategyId::SourceOnly => 0,
        StrategyId::Mixed | StrategyId::SupMixed => 1,
        _ => n,
    };

    for step in next_step.max(1)..=adaptation_steps {
        let phase_seed = seeds::derive_idx(hyper.seed, "phase", step as u64);
        let mut dtm_for_step: Option<DTMParams> = None;
        let label: String;
        match id {
            StrategyId::SourceOnly => unreachable!(),
            StrategyId::Uft | StrategyId::UftPrev | StrategyId::Mixed => {
                let d = disc.get_or_insert_with(|| {
                    DiscriminatorSet::new(seeds::derive(hyper.seed, "init-disc"), hyper.grl_lambda)
                });
                let phase_targets: Vec<&DomainDataset> = match id {
                    StrategyId::Uft => vec![targets[step - 1]],
                    StrategyId::UftPrev => targets[..step].to_vec(),
                    StrategyId::Mixed => targets.clone(),
                    _ => unreachable!(),
                };
                let schedule = make_schedule(hyper, step);
                da_phase(
                    &mut phi,
                    d,
                    source,
                    &phase_targets,
                    &schedule,
                    &PhaseExtras {
                        lambda: hyper.lambda,
                        kind: hyper.l_c_kind,
                        pseudo: None,
                        kd: None,
                    },
                    phase_seed,
                    &mut log,
                    step,
                )?;
                label = match id {
                    StrategyId::Mixed => "mixed".into(),
                    _ => targets[step - 1].spec.name.clone(),
                };
            }
            StrategyId::OnlyDa => {
                // independent detector per target, from the shared pretrain
                phi = phi0.clone();
                let mut d = DiscriminatorSet::new(
                    seeds::derive_idx(hyper.seed, "init-disc", step as u64),
                    hyper.grl_lambda,
                );
                let schedule = make_schedule(hyper, 1);
                da_phase(
                    &mut phi,
                    &mut d,
                    source,
                    &[targets[step - 1]],
                    &schedule,
                    &PhaseExtras {
                        lambda: hyper.lambda,
                        kind: hyper.l_c_kind,
                        pseudo: None,
                        kd: None,
                    },
                    phase_seed,
                    &mut log,
                    step,
                )?;
                disc = Some(d);
                label = targets[step - 1].spec.name.clone();
            }
            StrategyId::IncrMtdaKd => {
                let d = disc.get_or_insert_with(|| {
                    DiscriminatorSet::new(seeds::derive(hyper.seed, "init-disc"), hyper.grl_lambda)
                });
                let teacher = phi.clone();
                let schedule = make_schedule(hyper, step);
                da_phase(
                    &mut phi,
                    d,
                    source,
                    &[targets[step - 1]],
                    &schedule,
                    &PhaseExtras {
                        lambda: hyper.lambda,
                        kind: hyper.l_c_kind,
                        pseudo: None,
                        kd: Some((&teacher, hyper.kd_weight)),
                    },
                    phase_seed,
                    &mut log,
                    step,
                )?;
                label = targets[step - 1].spec.name.clone();
            }
            StrategyId::MtdaDtm => {
                let d = disc.get_or_insert_with(|| {
                    DiscriminatorSet::new(seeds::derive(hyper.seed, "init-disc"), hyper.grl_lambda)
                });
                let schedule = make_schedule(hyper, step);
                let pseudo = if step >= 2 {
                    let g = dtm_prev.as_ref().ok_or_else(|| {
                        Error::Strategy("incremental step without a trained DTM".into())
                    })?;
                    Some((g.clone(), hyper.alpha))
                } else {
                    None
                };
                da_phase(
                    &mut phi,
                    d,
                    source,
                    &[targets[step - 1]],
                    &schedule,
                    &PhaseExtras {
                        lambda: hyper.lambda,
                        kind: hyper.l_c_kind,
                        pseudo: pseudo.as_ref().map(|(g, a)| (g, *a)),
                        kd: None,
                    },
                    phase_seed,
                    &mut log,
                    step,
                )?;
                // freeze and train a fresh DTM covering targets 1..=step
                let g = train_dtm(
                    &phi,
                    disc.as_ref().unwrap(),
                    source,
                    hyper.dtm_variant,
                    hyper.dtm_iters,
                    hyper.dtm_lr,
                    hyper.l_c_kind,
                    seeds::derive_idx(hyper.seed, "dtm", step as u64),
                    &mut log,
                    step,
                )?;
                dtms.push(g.clone());
                dtm_for_step = Some(g.clone());
                dtm_prev = Some(g);
                label = targets[step - 1].spec.name.clone();
            }
            StrategyId::SupOnly | StrategyId::SupFt | StrategyId::SupMixed => {
                let phase_targets: Vec<&DomainDataset> = match id {
                    StrategyId::SupOnly => {
                        phi = phi0.clone();
                        vec![targets[step - 1]]
                    }
                    StrategyId::SupFt => vec![targets[step - 1]],
                    StrategyId::SupMixed => targets.clone(),
                    _ => unreachable!(),
                };
                let phase_index = if id == StrategyId::SupFt { step } else { 1 };
                let schedule = make_schedule(hyper, phase_index);
                supervised_phase(&mut phi, &phase_targets, &schedule, phase_seed, &mut log, step)?;
                label = match id {
                    StrategyId::SupMixed => "sup_mixed".into(),
                    _ => targets[step - 1].spec.name.clone(),
                };
            }
        }

        let record = eval_step(&phi, step, label)?;
        on_step(&StepSnapshot {
            step,
            label: record.label.clone(),
            phi: &phi,
            disc: disc.as_ref(),
            dtm: dtm_for_step.as_ref(),
            record: &record,
            access_log: &log,
        })?;
        records.push(record);
    }

    let state = ExperimentState {
        strategy: id,
        target_names: targets.iter().map(|t| t.spec.name.clone()).collect(),
        records,
        access_log: log,
    };
    Ok(RunOutcome {
        state,
        phi,
        phi0,
        disc,
        dtms,
    })
}

/// Convenience entry point without resume or checkpointing.
pub fn run_strategy(
    strategy: &Strategy,
    source: &DomainDataset,
    targets: &[DomainDataset],
) -> Result<RunOutcome> {
    let refs: Vec<&DomainDataset> = targets.iter().collect();
    run_strategy_with(strategy, source, &refs, None, &mut |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_domain_dataset, DomainKind, DomainSpec};

    fn tiny_hyper(iters: usize) -> HyperParams {
        HyperParams {
            iters_per_phase: iters,
            dtm_iters: iters,
            seed: 5,
            ..HyperParams::default()
        }
    }

    fn tiny_data() -> (DomainDataset, Vec<DomainDataset>) {
        let source = build_domain_dataset(&DomainSpec::new("source", DomainKind::Source, 1), 6, 2)
            .unwrap();
        let fog =
            build_domain_dataset(&DomainSpec::new("fog", DomainKind::Fog, 2), 6, 2).unwrap();
        let noise =
            build_domain_dataset(&DomainSpec::new("noise", DomainKind::Noise, 3), 6, 2).unwrap();
        (source, vec![fog, noise])
    }

    #[test]
    fn schedule_matches_phase_rules() {
        let h = HyperParams::default();
        let s1 = make_schedule(&h, 1);
        assert_eq!(s1.lr_at(0), 1e-3);
        assert_eq!(s1.lr_at(s1.decay_at), 1e-4);
        assert_eq!(s1.decay_at, (5.0 / 7.0 * 1500.0) as usize);
        let s2 = make_schedule(&h, 2);
        assert!((s2.lr_at(0) - 1e-4).abs() < 1e-18);
        assert!((s2.lr_at(s2.iters - 1) - 1e-5).abs() < 1e-19);
        // decay_point = 1.0 keeps the high rate the whole phase
        let h1 = HyperParams {
            decay_point: 1.0,
            ..h
        };
        let s = make_schedule(&h1, 1);
        assert_eq!(s.lr_at(s.iters - 1), 1e-3);
    }

    #[test]
    fn permutation_validation() {
        let t = vec!["a", "b", "c"];
        assert_eq!(permute_targets(&t, &[2, 0, 1]).unwrap(), vec!["c", "a", "b"]);
        assert!(permute_targets(&t, &[0, 0, 1]).is_err());
        assert!(permute_targets(&t, &[0, 1]).is_err());
        assert!(permute_targets(&t, &[0, 1, 3]).is_err());
    }

    #[test]
    fn source_only_has_single_row() {
        let (source, targets) = tiny_data();
        let strategy = Strategy {
            id: StrategyId::SourceOnly,
            hyper: tiny_hyper(2),
        };
        let out = run_strategy(&strategy, &source, &targets).unwrap();
        assert_eq!(out.state.records.len(), 1);
        assert_eq!(out.state.records[0].step, 0);
        assert_eq!(out.state.records[0].target_reports.len(), 2);
    }

    #[test]
    fn mixed_with_one_target_equals_uft() {
        let (source, targets) = tiny_data();
        let one = vec![targets[0].clone()];
        let hyper = tiny_hyper(3);
        let uft = run_strategy(
            &Strategy {
                id: StrategyId::Uft,
                hyper: hyper.clone(),
            },
            &source,
            &one,
        )
        .unwrap();
        let mixed = run_strategy(
            &Strategy {
                id: StrategyId::Mixed,
                hyper,
            },
            &source,
            &one,
        )
        .unwrap();
        assert_eq!(uft.phi, mixed.phi);
        assert_eq!(
            uft.state.records.last().unwrap().target_map(0),
            mixed.state.records.last().unwrap().target_map(0)
        );
    }

    #[test]
    fn alpha_zero_matches_uft_trajectory() {
        let (source, targets) = tiny_data();
        let hyper = HyperParams {
            alpha: 0.0,
            ..tiny_hyper(3)
        };
        let dtm_run = run_strategy(
            &Strategy {
                id: StrategyId::MtdaDtm,
                hyper: hyper.clone(),
            },
            &source,
            &targets,
        )
        .unwrap();
        let uft_run = run_strategy(
            &Strategy {
                id: StrategyId::Uft,
                hyper,
            },
            &source,
            &targets,
        )
        .unwrap();
        assert_eq!(dtm_run.phi, uft_run.phi);
    }

    #[test]
    fn strategy_label_mismatch_rejected() {
        let (source, targets) = tiny_data();
        let labeled: Vec<DomainDataset> = targets.iter().map(|t| t.relabeled(true)).collect();
        let strategy = Strategy {
            id: StrategyId::Uft,
            hyper: tiny_hyper(2),
        };
        assert!(matches!(
            run_strategy(&strategy, &source, &labeled),
            Err(Error::Strategy(_))
        ));
    }

    #[test]
    fn no_retention_log_for_incremental_strategies() {
        let (source, targets) = tiny_data();
        for id in [StrategyId::Uft, StrategyId::MtdaDtm, StrategyId::IncrMtdaKd] {
            let out = run_strategy(
                &Strategy {
                    id,
                    hyper: tiny_hyper(3),
                },
                &source,
                &targets,
            )
            .unwrap();
            let names: Vec<String> = out.state.target_names.clone();
            let v = out.state.access_log.no_retention_violations("source", &names);
            assert!(v.is_empty(), "{id}: {v:?}");
        }
        // the retention baseline must trip the audit at step 2
        let out = run_strategy(
            &Strategy {
                id: StrategyId::UftPrev,
                hyper: tiny_hyper(6),
            },
            &source,
            &targets,
        )
        .unwrap();
        let names = out.state.target_names.clone();
        assert!(!out
            .state
            .access_log
            .no_retention_violations("source", &names)
            .is_empty());
    }

    #[test]
    fn kd_teacher_unchanged_and_penalizes_deviation() {
        let (source, targets) = tiny_data();
        let teacher = DetectorParams::new(77, NUM_CLASSES);
        let checks = teacher.clone();
        let mut student = DetectorParams::new(78, NUM_CLASSES);
        let (img, _) = crate::synth::render_scene(5, 2);

        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut tape, &student, true, &mut reg);
        let fwd = forward_image(&mut tape, &det, &img).unwrap();
        let kd = kd_term(&mut tape, &det, &fwd, &teacher, &img)
            .unwrap()
            .expect("teacher proposals");
        assert!(tape.scalar_value(kd) > 0.0);
        assert_eq!(teacher, checks);

        // identical student ==> zero distillation loss
        student.load_named(
            &teacher
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let det = bind_detector(&mut tape, &student, true, &mut reg);
        let fwd = forward_image(&mut tape, &det, &img).unwrap();
        let kd = kd_term(&mut tape, &det, &fwd, &teacher, &img)
            .unwrap()
            .expect("teacher proposals");
        assert!(tape.scalar_value(kd).abs() < 1e-18);
        let _ = (source, targets);
    }

    #[test]
    fn runs_are_reproducible() {
        let (source, targets) = tiny_data();
        let strategy = Strategy {
            id: StrategyId::MtdaDtm,
            hyper: tiny_hyper(3),
        };
        let a = run_strategy(&strategy, &source, &targets).unwrap();
        let b = run_strategy(&strategy, &source, &targets).unwrap();
        assert_eq!(a.state.map_csv(), b.state.map_csv());
        assert_eq!(a.phi, b.phi);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (source, targets) = tiny_data();
        let strategy = Strategy {
            id: StrategyId::MtdaDtm,
            hyper: tiny_hyper(3),
        };
        let full = run_strategy(&strategy, &source, &targets).unwrap();

        // run only through step 1, capture state, then resume
        let refs: Vec<&DomainDataset> = targets.iter().collect();
        let mut snap: Option<ResumeState> = None;
        let mut phi0_holder: Option<DetectorParams> = None;
        let result = run_strategy_with(&strategy, &source, &refs, None, &mut |s| {
            if s.step == 0 {
                phi0_holder = Some(s.phi.clone());
            }
            if s.step == 1 {
                snap = Some(ResumeState {
                    next_step: 2,
                    phi0: phi0_holder.clone().unwrap(),
                    phi: s.phi.clone(),
                    disc: s.disc.cloned(),
                    dtm: s.dtm.cloned(),
                    records: vec![],
                    access_log: AccessLog::new(),
                });
                return Err(Error::Strategy("interrupt".into()));
            }
            Ok(())
        });
        assert!(result.is_err());
        let mut resume = snap.unwrap();
        // carry over the records the interrupted run produced
        resume.records = full.state.records[..2].to_vec();
        let resumed = run_strategy_with(&strategy, &source, &refs, Some(resume), &mut |_| Ok(()))
            .unwrap();
        assert_eq!(resumed.phi, full.phi);
        assert_eq!(
            resumed.state.records.last().unwrap().to_text(),
            full.state.records.last().unwrap().to_text()
        );
    }

    #[test]
    fn every_strategy_runs_and_reports_expected_rows() {
        let (source, targets) = tiny_data();
        for id in StrategyId::all() {
            let out = run_strategy(
                &Strategy {
                    id,
                    hyper: tiny_hyper(2),
                },
                &source,
                &targets,
            )
            .unwrap();
            let expected_rows = match id {
                StrategyId::SourceOnly => 1,
                StrategyId::Mixed | StrategyId::SupMixed => 2,
                _ => 3,
            };
            assert_eq!(out.state.records.len(), expected_rows, "{id}");
            for rec in &out.state.records {
                assert_eq!(rec.target_reports.len(), 2, "{id}");
            }
            if id == StrategyId::MtdaDtm {
                assert_eq!(out.dtms.len(), 2, "one DTM per completed step");
            }
        }
    }

    #[test]
    fn step_record_text_round_trip() {
        let (source, targets) = tiny_data();
        let strategy = Strategy {
            id: StrategyId::SourceOnly,
            hyper: tiny_hyper(2),
        };
        let out = run_strategy(&strategy, &source, &targets).unwrap();
        let rec = &out.state.records[0];
        let text = rec.to_text();
        let back = StepRecord::from_text(&text).unwrap();
        assert_eq!(back.step, rec.step);
        assert_eq!(back.label, rec.label);
        assert_eq!(back.source_report.map, rec.source_report.map);
        assert_eq!(back.target_reports.len(), rec.target_reports.len());
        for (a, b) in back.target_reports.iter().zip(&rec.target_reports) {
            assert_eq!(a.map, b.map);
            assert_eq!(a.per_class_ap, b.per_class_ap);
        }
    }
}
