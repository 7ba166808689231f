//! Warmup / search / final training, baselines, lambda sweeps and Pareto fronts.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Optimizer, OptimizerConfig, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hwmodel::{self, CostTarget, LayerLoad, Rounding, Tau, Unit};
use crate::mapping::{split_assignment, ThetaMode};
use crate::rng;
use crate::supernet::{BankAssignment, Phase, Supernet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub epochs: usize,
    /// Epochs without improvement before stopping early.
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_patience() -> usize {
    5
}

/// Checkpoint selection during the search phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchSelect {
    /// Lowest validation task loss plus lambda times relaxed cost.
    Objective,
    /// Highest validation accuracy.
    Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub warmup: PhaseConfig,
    pub search: PhaseConfig,
    #[serde(rename = "final")]
    pub final_: PhaseConfig,
    pub batch_size: usize,
    pub weight_optimizer: OptimizerConfig,
    pub theta_optimizer: OptimizerConfig,
    /// Cost weight applied to the raw cost (cycles or mW * cycles).
    pub lambda: f64,
    pub target: CostTarget,
    pub seed: u64,
    /// Softmax temperature of the assignment banks at the start of the search.
    pub tau: f32,
    /// Temperature reached at the last search epoch (linear anneal), if any.
    pub tau_final: Option<f32>,
    pub search_select: SearchSelect,
    /// Training batches used to calibrate activation ranges before final training.
    pub calibration_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup: PhaseConfig { epochs: 20, patience: 5 },
            search: PhaseConfig { epochs: 20, patience: 5 },
            final_: PhaseConfig { epochs: 10, patience: 5 },
            batch_size: 64,
            weight_optimizer: OptimizerConfig::adam(2e-3),
            theta_optimizer: OptimizerConfig::adam(5e-2),
            lambda: 0.0,
            target: CostTarget::Latency,
            seed: 0,
            tau: 1.0,
            tau_final: None,
            search_select: SearchSelect::Objective,
            calibration_batches: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("warmup", self.warmup), ("search", self.search), ("final", self.final_)] {
            if p.epochs == 0 || p.patience == 0 {
                return Err(Error::Config(format!("{name}: epochs and patience must be >= 1")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be a finite non-negative number, got {}", self.lambda)));
        }
        if !(self.tau > 0.0) || self.tau_final.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// One row of a phase history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: f64,
    pub task_loss: f64,
    pub cost_relaxed: f64,
    pub cost_exact: f64,
    pub val_accuracy: f64,
}

pub const HISTORY_HEADER: &str = "phase,epoch,loss,task_loss,cost_relaxed,cost_exact,val_accuracy";

/// Loss terms of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub loss: f32,
    pub task_loss: f32,
    pub cost: f32,
    pub lambda: f32,
}

#[derive(Clone, Debug, Default)]
pub struct PhaseReport {
    pub history: Vec<HistoryRow>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Validation accuracy and mean cross-entropy in eval mode.
pub fn evaluate(net: &mut Supernet, ds: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    for idx in ds.batches(batch_size.max(1), None) {
        let (x, y) = ds.batch(&idx);
        let mut tape = Tape::new();
        let thetas = net.thetas(&mut tape)?;
        let xv = tape.constant(x);
        let logits = net.forward(&mut tape, xv, &thetas, false)?;
        let ce = tape.cross_entropy(logits, &y)?;
        loss += tape.value(ce).item() as f64 * y.len() as f64;
        correct += tape
            .value(logits)
            .argmax_rows()
            .iter()
            .zip(&y)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok((correct as f64 / ds.len() as f64, loss / ds.len() as f64))
}

fn check_order(net: &Supernet, phase: Phase) -> Result<()> {
    let ok = match phase {
        Phase::Warmup => net.phase.is_none(),
        Phase::Search => matches!(net.phase, Some(Phase::Warmup | Phase::Search)),
        Phase::Final => match net.phase {
            Some(Phase::Search | Phase::Final) => true,
            Some(Phase::Warmup) => net.is_hard(),
            None => false,
        },
    };
    if ok {
        Ok(())
    } else {
        Err(Error::PhaseOrder(format!(
            "cannot run {} after {}",
            phase.as_str(),
            net.phase.map_or("nothing", Phase::as_str)
        )))
    }
}

fn stream(phase: Phase) -> u64 {
    match phase {
        Phase::Warmup => 0x11,
        Phase::Search => 0x22,
        Phase::Final => 0x33,
    }
}

/// Runs one phase of the protocol with early stopping on the validation set
/// and restores the best checkpoint.
pub fn run_phase(
    phase: Phase,
    net: &mut Supernet,
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<PhaseReport> {
    cfg.validate()?;
    check_order(net, phase)?;
    let pcfg = match phase {
        Phase::Warmup => cfg.warmup,
        Phase::Search => cfg.search,
        Phase::Final => cfg.final_,
    };
    let lambda = if phase == Phase::Search { cfg.lambda } else { 0.0 };
    match phase {
        Phase::Warmup => {
            net.quant_active = false;
            net.set_theta_frozen(true);
            net.set_tau(cfg.tau);
        }
        Phase::Search => {
            net.quant_active = true;
            net.clear_hard_assignment();
            net.unfreeze_quantizers();
            net.set_theta_frozen(false);
            net.set_tau(cfg.tau);
        }
        Phase::Final => {
            if !net.is_hard() {
                let a = net.discretize();
                net.set_hard_assignment(&a)?;
            }
            net.set_theta_frozen(true);
            net.quant_active = true;
            let calib: Vec<Tensor> = train
                .batches(cfg.batch_size, Some(&mut rng::derive(cfg.seed, 0x44)))
                .into_iter()
                .take(cfg.calibration_batches.max(1))
                .map(|idx| train.batch(&idx).0)
                .collect();
            net.freeze_quantizers(&calib)?;
        }
    }
    let mut w_opt = Optimizer::new(cfg.weight_optimizer, net.weight_ids());
    let mut t_opt = (phase == Phase::Search).then(|| Optimizer::new(cfg.theta_optimizer, net.theta_ids()));
    let mut shuffle = rng::derive(cfg.seed, stream(phase));

    let mut report = PhaseReport::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut since_best = 0usize;
    for epoch in 0..pcfg.epochs {
        if phase == Phase::Search {
            if let Some(tf) = cfg.tau_final {
                let frac = if pcfg.epochs > 1 { epoch as f32 / (pcfg.epochs - 1) as f32 } else { 1.0 };
                net.set_tau(cfg.tau + (tf - cfg.tau) * frac);
            }
        }
        let (mut sum_loss, mut sum_task, mut sum_cost, mut n) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        for idx in train.batches(cfg.batch_size, Some(&mut shuffle)) {
            let (x, y) = train.batch(&idx);
            let mut tape = Tape::new();
            let thetas = net.thetas(&mut tape)?;
            let xv = tape.constant(x);
            let logits = net.forward(&mut tape, xv, &thetas, true)?;
            let task = tape.cross_entropy(logits, &y)?;
            let (root, cost) = if phase == Phase::Search {
                let cost = net.relaxed_cost(&mut tape, &thetas, cfg.target, Tau::Relative)?;
                let weighted = tape.scale(cost, lambda as f32);
                (tape.add(task, weighted)?, Some(cost))
            } else {
                (task, None)
            };
            let rec = StepRecord {
                loss: tape.value(root).item(),
                task_loss: tape.value(task).item(),
                cost: cost.map_or(0.0, |c| tape.value(c).item()),
                lambda: lambda as f32,
            };
            tape.backward(root, &mut net.store)?;
            w_opt.step(&mut net.store)?;
            if let Some(o) = t_opt.as_mut() {
                o.step(&mut net.store)?;
            }
            net.store.zero_grad();
            sum_loss += rec.loss as f64;
            sum_task += rec.task_loss as f64;
            sum_cost += rec.cost as f64;
            n += 1;
            report.steps.push(rec);
        }
        let (val_acc, val_loss) = evaluate(net, val, cfg.batch_size.max(256))?;
        let cost_exact = net.exact_report()?.value(cfg.target);
        let cost_relaxed = if phase == Phase::Search {
            sum_cost / n as f64
        } else {
            net.relaxed_cost_value(cfg.target)?
        };
        report.history.push(HistoryRow {
            phase,
            epoch,
            loss: sum_loss / n as f64,
            task_loss: sum_task / n as f64,
            cost_relaxed,
            cost_exact,
            val_accuracy: val_acc,
        });
        // larger is better
        let score = match (phase, cfg.search_select) {
            (Phase::Search, SearchSelect::Objective) => -(val_loss + lambda * net.relaxed_cost_value(cfg.target)?),
            _ => val_acc,
        };
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, net.store.snapshot()));
            report.best_epoch = epoch;
            report.best_val_accuracy = val_acc;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= pcfg.patience {
                break;
            }
        }
    }
    if let Some((_, snap)) = best {
        net.store.restore(&snap);
    }
    net.phase = Some(phase);
    Ok(report)
}

/// Raw lambda for a normalized one: divides by the uniform-theta relaxed cost.
pub fn raw_lambda(net: &Supernet, normalized: f64, target: CostTarget) -> Result<f64> {
    let mut probe = net.clone();
    probe.clear_hard_assignment();
    for b in &probe.banks {
        probe.store.value_mut(b.logits).fill(0.0);
    }
    probe.set_tau(1.0);
    let c = probe.relaxed_cost_value(target)?;
    if !(c > 0.0) {
        return Err(Error::Invalid("network has zero relaxed cost; cannot normalize lambda".into()));
    }
    Ok(normalized / c)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BaselineKind {
    AllOnCu { cu: String },
    IoHeuristic { edge: Option<String>, backbone: Option<String> },
    MinCost,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "min-cost" => Ok(BaselineKind::MinCost),
            None if s == "io-heuristic" => Ok(BaselineKind::IoHeuristic { edge: None, backbone: None }),
            Some(("all-on-cu", cu)) if !cu.is_empty() => Ok(BaselineKind::AllOnCu { cu: cu.to_string() }),
            Some(("io-heuristic", rest)) => match rest.split_once(',') {
                Some((e, b)) => Ok(BaselineKind::IoHeuristic {
                    edge: Some(e.to_string()),
                    backbone: Some(b.to_string()),
                }),
                None => Err(Error::Invalid(format!("io-heuristic takes `edge,backbone`, got `{rest}`"))),
            },
            _ => Err(Error::Invalid(format!(
                "unknown baseline `{s}` (all-on-cu:<name> | io-heuristic[:edge,backbone] | min-cost)"
            ))),
        }
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BaselineKind::AllOnCu { cu } => write!(f, "all-on-cu:{cu}"),
            BaselineKind::IoHeuristic { edge: Some(e), backbone: Some(b) } => write!(f, "io-heuristic:{e},{b}"),
            BaselineKind::IoHeuristic { .. } => write!(f, "io-heuristic"),
            BaselineKind::MinCost => write!(f, "min-cost"),
        }
    }
}

/// Branch index of `cu` in a bank, or an error naming the layer.
fn branch_of(net: &Supernet, bank: usize, cu: usize) -> Result<usize> {
    let layer = net.bank_layers[bank][0];
    let c = net.nodes[layer].compute.as_ref().expect("mapped");
    c.placement.branch_cus().iter().position(|&x| x == cu).ok_or_else(|| {
        Error::Unsupported(format!(
            "CU `{}` is not an alternative of layer `{}`",
            net.platform.cus[cu].name, net.nodes[layer].name
        ))
    })
}

fn fill_bank(net: &Supernet, bank: usize, cu: usize) -> Result<Vec<usize>> {
    let j = branch_of(net, bank, cu)?;
    let c = net.banks[bank].channels();
    Ok(match net.banks[bank].mode {
        ThetaMode::Contiguous { .. } => split_assignment(if j == 0 { c } else { 0 }, c),
        ThetaMode::PerChannel { .. } => vec![j; c],
    })
}

/// Fixed, accuracy-unaware assignment for a baseline.
pub fn build_baseline(kind: &BaselineKind, net: &Supernet, target: CostTarget) -> Result<BankAssignment> {
    let p = &net.platform;
    match kind {
        BaselineKind::AllOnCu { cu } => {
            let cu = p.cu_index(cu)?;
            (0..net.banks.len()).map(|b| fill_bank(net, b, cu)).collect()
        }
        BaselineKind::IoHeuristic { edge, backbone } => {
            let mut precisions: Vec<_> = p.cus.iter().map(|c| c.precision).collect();
            precisions.sort_by_key(|x| x.rank());
            precisions.dedup();
            if precisions.len() < 2 {
                return Err(Error::Unsupported(format!(
                    "io-heuristic needs two CUs of distinct precision on `{}`",
                    p.name
                )));
            }
            let pick = |name: &Option<String>, highest: bool| -> Result<usize> {
                match name {
                    Some(n) => p.cu_index(n),
                    None => Ok((0..p.cus.len())
                        .max_by_key(|&i| {
                            let r = p.cus[i].accuracy_rank();
                            (if highest { r } else { (u8::MAX - r.0, u8::MAX - r.1) }, std::cmp::Reverse(i))
                        })
                        .expect("cus")),
                }
            };
            let edge = pick(edge, true)?;
            let backbone = pick(backbone, false)?;
            let mapped = net.mapped_layers();
            let (first, last) = (mapped.first().copied(), mapped.last().copied());
            (0..net.banks.len())
                .map(|b| {
                    let is_edge = net.bank_layers[b].iter().any(|&l| Some(l) == first || Some(l) == last);
                    fill_bank(net, b, if is_edge { edge } else { backbone })
                })
                .collect()
        }
        BaselineKind::MinCost => (0..net.banks.len()).map(|b| min_cost_bank(net, b, target)).collect(),
    }
}

/// Every way of writing `total` as an ordered sum of `parts` non-negative counts.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Per-branch channel counts minimizing the exact cost of a set of layers
/// sharing one assignment. Ties keep the split that puts the most channels on
/// the most accurate branch (then the next, and so on).
pub fn min_cost_counts(
    platform: &hwmodel::PlatformProfile,
    layers: &[(crate::netspec::LayerGeometry, Vec<(usize, hwmodel::OpKind)>)],
    channels: usize,
    contiguous: bool,
    target: CostTarget,
) -> Result<Vec<usize>> {
    let branches = layers[0].1.len();
    let candidates = if contiguous {
        (0..=channels).map(|k| vec![k, channels - k]).collect()
    } else {
        compositions(channels, branches)
    };
    let mut pref: Vec<usize> = (0..branches).collect();
    let ranks: Vec<_> = layers[0].1.iter().map(|&(cu, _)| platform.cus[cu].accuracy_rank()).collect();
    pref.sort_by(|&a, &b| ranks[b].cmp(&ranks[a]).then(a.cmp(&b)));
    let mut best: Option<(f64, Vec<usize>)> = None;
    for counts in candidates {
        let mut total = 0.0f64;
        let mut feasible = true;
        for (g, units) in layers {
            let load = LayerLoad {
                name: String::new(),
                geometry: *g,
                units: units
                    .iter()
                    .zip(&counts)
                    .map(|(&(cu, op), &n)| Unit {
                        cu,
                        op,
                        channels: n as f64,
                    })
                    .collect(),
            };
            match hwmodel::layer_cost(platform, &load, Rounding::Ceil) {
                Ok(lc) => {
                    total += match target {
                        CostTarget::Latency => lc.cycles,
                        CostTarget::Energy => lc.energy,
                    }
                }
                Err(_) => {
                    feasible = false;
                    break;
                }
            }
        }
        if !feasible {
            continue;
        }
        let better = match &best {
            None => true,
            Some((c, prev)) => {
                total < *c || (total == *c && pref.iter().map(|&j| counts[j]).gt(pref.iter().map(|&j| prev[j])))
            }
        };
        if better {
            best = Some((total, counts));
        }
    }
    best.map(|(_, c)| c)
        .ok_or_else(|| Error::Unsupported("no feasible split for a mapped layer".into()))
}

fn min_cost_bank(net: &Supernet, bank: usize, target: CostTarget) -> Result<Vec<usize>> {
    let layers: Vec<_> = net.bank_layers[bank]
        .iter()
        .map(|&i| {
            let n = &net.nodes[i];
            let c = n.compute.as_ref().expect("mapped");
            let units = c.placement.branch_cus().into_iter().zip(c.placement.branch_ops(c.op)).collect();
            (n.geometry, units)
        })
        .collect();
    let contiguous = matches!(net.banks[bank].mode, ThetaMode::Contiguous { .. });
    let counts = min_cost_counts(&net.platform, &layers, net.banks[bank].channels(), contiguous, target)?;
    Ok(counts.iter().enumerate().flat_map(|(j, &n)| std::iter::repeat_n(j, n)).collect())
}

/// Indices of the points not dominated in (accuracy up, cost down).
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            let (a, c) = points[i];
            !points
                .iter()
                .any(|&(qa, qc)| qa >= a && qc <= c && (qa > a || qc < c))
        })
        .collect()
}

/// Average ranks (1-based); ties share the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Datasets used by a run.
#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: Option<&'a Dataset>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub label: String,
    /// Normalized lambda (NaN-free; 0 for baselines).
    pub lambda: f64,
    pub lambda_raw: f64,
    pub val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub cycles: f64,
    /// mW * cycles.
    pub energy: f64,
    pub latency_s: f64,
    pub energy_uj: f64,
    pub artifact: Option<String>,
}

/// A finished pipeline run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub net: Supernet,
    pub assignment: BankAssignment,
    pub history: Vec<HistoryRow>,
    pub point: ParetoPoint,
}

fn finish(
    net: Supernet,
    history: Vec<HistoryRow>,
    label: String,
    lambda: f64,
    lambda_raw: f64,
    splits: Splits<'_>,
    batch: usize,
) -> Result<RunOutcome> {
    let mut net = net;
    let (val_accuracy, _) = evaluate(&mut net, splits.val, batch)?;
    let test_accuracy = match splits.test {
        Some(t) => Some(evaluate(&mut net, t, batch)?.0),
        None => None,
    };
    let assignment = net.discretize();
    let report = net.cost_report(&assignment, Rounding::Ceil)?;
    Ok(RunOutcome {
        point: ParetoPoint {
            label,
            lambda,
            lambda_raw,
            val_accuracy,
            test_accuracy,
            cycles: report.total_cycles,
            energy: report.total_energy,
            latency_s: report.latency_s,
            energy_uj: report.energy_uj,
            artifact: None,
        },
        net,
        assignment,
        history,
    })
}

/// Warmup of a fresh supernet.
pub fn warmup(net: &mut Supernet, cfg: &TrainConfig, splits: Splits<'_>) -> Result<PhaseReport> {
    run_phase(Phase::Warmup, net, cfg, splits.train, splits.val)
}

/// Search then final training from a warmed-up network, at a normalized lambda.
pub fn search_and_finetune(warmed: &Supernet, cfg: &TrainConfig, lambda: f64, splits: Splits<'_>) -> Result<RunOutcome> {
    let mut net = warmed.clone();
    let lambda_raw = raw_lambda(&net, lambda, cfg.target)?;
    let run_cfg = TrainConfig {
        lambda: lambda_raw,
        ..cfg.clone()
    };
    let mut history = run_phase(Phase::Search, &mut net, &run_cfg, splits.train, splits.val)?.history;
    history.extend(run_phase(Phase::Final, &mut net, &run_cfg, splits.train, splits.val)?.history);
    finish(net, history, format!("lambda={lambda}"), lambda, lambda_raw, splits, cfg.batch_size.max(256))
}

/// Baseline assignment followed by final training from a warmed-up network.
pub fn run_baseline(warmed: &Supernet, cfg: &TrainConfig, kind: &BaselineKind, splits: Splits<'_>) -> Result<RunOutcome> {
    let mut net = warmed.clone();
    let a = build_baseline(kind, &net, cfg.target)?;
    net.set_hard_assignment(&a)?;
    let history = run_phase(Phase::Final, &mut net, cfg, splits.train, splits.val)?.history;
    finish(net, history, format!("baseline:{kind}"), 0.0, 0.0, splits, cfg.batch_size.max(256))
}

/// Result of one sweep entry: a finished run or the error that stopped it.
pub type SweepEntry = (f64, Result<RunOutcome>);

/// Runs search + final for every normalized lambda from a shared warmup,
/// with up to `jobs` runs in parallel.
pub fn sweep(warmed: &Supernet, cfg: &TrainConfig, lambdas: &[f64], jobs: usize, splits: Splits<'_>) -> Vec<SweepEntry> {
    let jobs = jobs.max(1);
    let mut results: Vec<Option<Result<RunOutcome>>> = (0..lambdas.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|s| {
        for _ in 0..jobs.min(lambdas.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= lambdas.len() {
                    break;
                }
                let r = search_and_finetune(warmed, cfg, lambdas[i], splits);
                slots.lock().expect("no poisoned runs")[i] = Some(r);
            });
        }
    });
    lambdas
        .iter()
        .zip(results)
        .map(|(&l, r)| (l, r.expect("every lambda ran")))
        .collect()
}

pub const SUMMARY_HEADER: &str =
    "label,lambda,lambda_raw,val_accuracy,test_accuracy,cycles,energy_mw_cycles,latency_s,energy_uj,artifact,error";

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn point_row(p: &ParetoPoint) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},",
        p.label,
        p.lambda,
        p.lambda_raw,
        p.val_accuracy,
        opt_f64(p.test_accuracy),
        p.cycles,
        p.energy,
        p.latency_s,
        p.energy_uj,
        p.artifact.as_deref().unwrap_or("")
    )
}

/// Summary CSV text: one row per point, failures keep only label, lambda and error.
pub fn summary_csv(rows: &[(String, f64, std::result::Result<ParetoPoint, String>)]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for (label, lambda, r) in rows {
        match r {
            Ok(p) => out.push_str(&point_row(p)),
            Err(e) => {
                let _ = write!(out, "{label},{lambda},,,,,,,,,\"{}\"", e.replace('"', "'"));
            }
        }
        out.push('\n');
    }
    out
}

pub fn front_csv(points: &[ParetoPoint]) -> String {
    let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.val_accuracy, p.cycles)).collect();
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for i in pareto_front(&pts) {
        out.push_str(&point_row(&points[i]));
        out.push('\n');
    }
    out
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.phase.as_str(),
            r.epoch,
            r.loss,
            r.task_loss,
            r.cost_relaxed,
            r.cost_exact,
            r.val_accuracy
        );
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
