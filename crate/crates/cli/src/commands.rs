use std::path::{Path, PathBuf};

use chanmap::checkpoint::Checkpoint;
use chanmap::data::{self, Dataset, Normalization, Split, SyntheticParams};
use chanmap::export::{self, MappingArtifact};
use chanmap::hwmodel::{CostReport, PlatformProfile, Rounding};
use chanmap::netspec::NetworkSpec;
use chanmap::rng;
use chanmap::search::{
    self, evaluate, front_csv, history_csv, raw_lambda, run_phase, summary_csv, write_text, BaselineKind, HistoryRow,
    ParetoPoint, RunOutcome, Splits, TrainConfig,
};
use chanmap::supernet::{Phase, Supernet, SupernetConfig};
use serde::Serialize;
use serde_json::json;

use crate::args::{Cli, Command, Common};
use crate::manifest::{self, content_hash, file_sha256, HashInput, Manifest};
use crate::{CliError, CliResult};

const WARMUP_CKPT: &str = "warmup.ckpt.json";
const SEARCH_CKPT: &str = "search.ckpt.json";
const FINAL_CKPT: &str = "final.ckpt.json";
const ARTIFACT_STEM: &str = "mapping";

struct Ctx {
    spec: NetworkSpec,
    platform: PlatformProfile,
    cfg: TrainConfig,
    common: Common,
}

impl Ctx {
    fn load(common: &Common) -> CliResult<Self> {
        let spec = NetworkSpec::resolve_name(&common.net)?;
        spec.resolve()?;
        let platform = PlatformProfile::resolve(&common.platform)?;
        platform.validate()?;
        let mut cfg = match &common.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| chanmap::Error::Config(format!("{}: {e}", p.display())))?;
                toml::from_str::<TrainConfig>(&text)
                    .map_err(|e| chanmap::Error::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => TrainConfig::default(),
        };
        cfg.seed = common.seed;
        cfg.validate()?;
        Ok(Ctx {
            spec,
            platform,
            cfg,
            common: common.clone(),
        })
    }

    fn out(&self) -> &Path {
        &self.common.out
    }

    fn fresh_net(&self) -> CliResult<Supernet> {
        Ok(Supernet::build(
            &self.spec,
            &self.platform,
            SupernetConfig::default(),
            &mut rng::derive(self.common.seed, 0x6e65),
        )?)
    }

    /// Restores a checkpoint, refusing one made for another network or platform.
    fn restore(&self, path: &Path) -> CliResult<(Supernet, Checkpoint)> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.network != self.spec {
            return Err(CliError::Conflict(format!(
                "checkpoint {} holds network `{}`, --net is `{}`",
                path.display(),
                ckpt.network.name,
                self.spec.name
            )));
        }
        if ckpt.platform != self.platform {
            return Err(CliError::Conflict(format!(
                "checkpoint {} targets platform `{}`, --platform is `{}`",
                path.display(),
                ckpt.platform.name,
                self.platform.name
            )));
        }
        Ok((ckpt.restore()?, ckpt))
    }
}

struct Data {
    train: Dataset,
    val: Dataset,
    test: Option<Dataset>,
}

impl Data {
    fn splits(&self) -> Splits<'_> {
        Splits {
            train: &self.train,
            val: &self.val,
            test: self.test.as_ref(),
        }
    }
}

fn load_data(ctx: &Ctx) -> CliResult<Data> {
    let c = &ctx.common;
    if c.train_size == 0 || c.val_size == 0 {
        return Err(chanmap::Error::Invalid("--train-size and --val-size must be positive".into()).into());
    }
    let synthetic = match c.data.as_str() {
        "synthetic" => Some(SyntheticParams::EASY),
        "synthetic:cifar-proxy" => Some(SyntheticParams::CIFAR_PROXY),
        s if s.starts_with("synthetic:") => {
            return Err(chanmap::Error::Invalid(format!("unknown synthetic preset `{s}`")).into())
        }
        _ => None,
    };
    if let Some(params) = synthetic {
        let n = c.train_size + c.val_size + c.test_size;
        let all = data::gen_synthetic_with(ctx.spec.classes, n, ctx.spec.input, c.seed, params)?;
        let range = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
        let train = all.subset(&range(0, c.train_size), Split::Train);
        let val = all.subset(&range(c.train_size, c.train_size + c.val_size), Split::Val);
        let test = (c.test_size > 0).then(|| all.subset(&range(c.train_size + c.val_size, n), Split::Test));
        return Ok(Data { train, val, test });
    }
    if ctx.spec.input != [3, 32, 32] || ctx.spec.classes != 10 {
        return Err(CliError::Conflict(format!(
            "CIFAR-10 data needs a [3, 32, 32] input and 10 classes; network `{}` has {:?} and {}",
            ctx.spec.name, ctx.spec.input, ctx.spec.classes
        )));
    }
    let dir = Path::new(&c.data);
    let norm = Normalization::default();
    let pool = data::load_cifar10_binary(dir, Split::Train, Some(c.train_size + c.val_size), c.seed, &norm)?;
    let fraction = c.val_size as f64 / pool.len() as f64;
    let (train, val) = pool.split_validation(fraction, c.seed)?;
    let test = if c.test_size > 0 {
        Some(data::load_cifar10_binary(dir, Split::Test, Some(c.test_size), c.seed, &norm)?)
    } else {
        None
    };
    Ok(Data { train, val, test })
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    let started_at = manifest::now();
    let cmd = cli.command;
    let common = cmd.common().clone();
    std::fs::create_dir_all(&common.out)?;
    let mut config_hash = String::new();
    let result = Ctx::load(&common).and_then(|ctx| {
        config_hash = hash_of(&cmd, &ctx)?;
        execute(&cmd, &ctx)
    });
    let m = Manifest {
        command: cmd.name().to_string(),
        argv: std::env::args().collect(),
        net: common.net.clone(),
        platform: common.platform.clone(),
        config: common.config.as_ref().map(|p| p.display().to_string()),
        data: common.data.clone(),
        seed: common.seed,
        normalization: Normalization::default(),
        config_hash,
        out: common.out.display().to_string(),
        started_at,
        finished_at: manifest::now(),
        status: match &result {
            Ok(()) => "ok".to_string(),
            Err(e) => e.tag().to_string(),
        },
    };
    m.write(&common.out)?;
    result
}

fn hash_of(cmd: &Command, ctx: &Ctx) -> CliResult<String> {
    let (params, input) = match cmd {
        Command::Warmup { .. } => (json!({}), None),
        Command::Search { lambda, target, from, .. } => (json!({"lambda": lambda, "target": target}), from.as_ref()),
        Command::Finetune { from, .. } | Command::Export { from, .. } => (json!({}), Some(from)),
        Command::Run { lambda, target, .. } => (json!({"lambda": lambda, "target": target}), None),
        Command::Sweep { lambdas, target, from, .. } => (json!({"lambdas": lambdas, "target": target}), from.as_ref()),
        Command::Baseline { kind, target, from, .. } => (json!({"kind": kind, "target": target}), from.as_ref()),
        Command::EvalCost { artifact, from, .. } => (json!({}), artifact.as_ref().or(from.as_ref())),
        Command::Verify { artifact, from, samples, .. } => {
            let from_hash = from.as_ref().map(|p| file_sha256(p)).transpose()?;
            (json!({"samples": samples, "from": from_hash}), Some(artifact))
        }
    };
    let input_sha256 = input.map(|p| file_sha256(p)).transpose()?;
    let c = &ctx.common;
    Ok(content_hash(&HashInput {
        command: cmd.name(),
        network: ctx.spec.to_toml(),
        platform: ctx.platform.to_toml(),
        train_config: toml::to_string(&ctx.cfg).expect("config serializes"),
        data: &c.data,
        train_size: c.train_size,
        val_size: c.val_size,
        test_size: c.test_size,
        seed: c.seed,
        params,
        input_sha256,
    }))
}

fn execute(cmd: &Command, ctx: &Ctx) -> CliResult<()> {
    match cmd {
        Command::Warmup { .. } => {
            let data = load_data(ctx)?;
            let (net, history) = do_warmup(ctx, &data)?;
            save_ckpt(&net, None, &ctx.out().join(WARMUP_CKPT))?;
            write_text(&ctx.out().join("history.csv"), &history_csv(&history))?;
            println!("warmup: val_accuracy={}", last_accuracy(&history));
            Ok(())
        }
        Command::Search { lambda, target, from, .. } => {
            let data = load_data(ctx)?;
            let (mut net, mut history) = warmed(ctx, &data, from.as_deref())?;
            let lambda_raw = raw_lambda(&net, *lambda, *target)?;
            let cfg = TrainConfig {
                lambda: lambda_raw,
                target: *target,
                ..ctx.cfg.clone()
            };
            history.extend(run_phase(Phase::Search, &mut net, &cfg, &data.train, &data.val)?.history);
            save_ckpt(&net, Some((*lambda, lambda_raw)), &ctx.out().join(SEARCH_CKPT))?;
            write_text(&ctx.out().join("history.csv"), &history_csv(&history))?;
            let report = net.exact_report()?;
            println!(
                "search: lambda={lambda} val_accuracy={} cycles={}",
                last_accuracy(&history),
                report.total_cycles
            );
            Ok(())
        }
        Command::Finetune { from, .. } => {
            let data = load_data(ctx)?;
            let (mut net, ckpt) = ctx.restore(from)?;
            if net.phase != Some(Phase::Search) {
                return Err(chanmap::Error::PhaseOrder(format!("{} is not a search checkpoint", from.display())).into());
            }
            let (lambda, lambda_raw) = ckpt.lambda.unwrap_or((0.0, 0.0));
            let cfg = TrainConfig {
                lambda: lambda_raw,
                ..ctx.cfg.clone()
            };
            let history = run_phase(Phase::Final, &mut net, &cfg, &data.train, &data.val)?.history;
            let assignment = net.discretize();
            let point = point_of(ctx, &mut net, &data, format!("lambda={lambda}"), lambda, lambda_raw)?;
            let outcome = RunOutcome {
                net,
                assignment,
                history,
                point,
            };
            let rows = vec![finish_run(ctx, outcome, ctx.out(), "")];
            write_summaries(ctx.out(), &rows)?;
            first_error(&rows)
        }
        Command::Run { lambda, target, .. } => {
            let data = load_data(ctx)?;
            let (net, mut history) = do_warmup(ctx, &data)?;
            save_ckpt(&net, None, &ctx.out().join(WARMUP_CKPT))?;
            let cfg = TrainConfig {
                target: *target,
                ..ctx.cfg.clone()
            };
            let mut outcome = search::search_and_finetune(&net, &cfg, *lambda, data.splits())?;
            history.append(&mut outcome.history);
            outcome.history = history;
            let rows = vec![finish_run(ctx, outcome, ctx.out(), "")];
            write_summaries(ctx.out(), &rows)?;
            first_error(&rows)
        }
        Command::Sweep {
            lambdas, jobs, target, from, ..
        } => {
            let data = load_data(ctx)?;
            let (net, history) = warmed(ctx, &data, from.as_deref())?;
            if from.is_none() {
                save_ckpt(&net, None, &ctx.out().join(WARMUP_CKPT))?;
                write_text(&ctx.out().join("history.csv"), &history_csv(&history))?;
            }
            let cfg = TrainConfig {
                target: *target,
                ..ctx.cfg.clone()
            };
            let runs = search::sweep(&net, &cfg, lambdas, *jobs, data.splits());
            let mut rows = Vec::with_capacity(runs.len());
            for (i, (lambda, r)) in runs.into_iter().enumerate() {
                let rel = format!("runs/lambda-{i}/");
                let dir = ctx.out().join(&rel);
                rows.push(match r {
                    Ok(outcome) => finish_run(ctx, outcome, &dir, &rel),
                    Err(e) => Row::failed(format!("lambda={lambda}"), lambda, &e.into()),
                });
            }
            write_summaries(ctx.out(), &rows)?;
            first_error(&rows)
        }
        Command::Baseline { kind, target, from, .. } => {
            let kind: BaselineKind = kind.parse()?;
            let data = load_data(ctx)?;
            let (net, mut history) = warmed(ctx, &data, from.as_deref())?;
            let cfg = TrainConfig {
                target: *target,
                ..ctx.cfg.clone()
            };
            let mut outcome = search::run_baseline(&net, &cfg, &kind, data.splits())?;
            history.append(&mut outcome.history);
            outcome.history = history;
            let rows = vec![finish_run(ctx, outcome, ctx.out(), "")];
            write_summaries(ctx.out(), &rows)?;
            first_error(&rows)
        }
        Command::Export { from, .. } => {
            let (net, _) = ctx.restore(from)?;
            if net.phase != Some(Phase::Final) || !net.is_hard() {
                return Err(chanmap::Error::PhaseOrder(format!(
                    "{} is not a finetuned checkpoint; run `finetune` first",
                    from.display()
                ))
                .into());
            }
            let path = write_artifact(ctx, &net, ctx.out())?;
            println!("export: {}", path.display());
            Ok(())
        }
        Command::EvalCost { artifact, from, .. } => {
            let report = match (artifact, from) {
                (Some(path), _) => {
                    let (a, _) = MappingArtifact::load(path)?;
                    check_artifact_flags(ctx, &a)?;
                    let report = export::artifact_cost(&a, Rounding::Ceil)?;
                    if report != a.cost {
                        return Err(CliError::CostMismatch(format!(
                            "recomputed {} cycles / {} mW*cycles, artifact records {} / {}",
                            report.total_cycles, report.total_energy, a.cost.total_cycles, a.cost.total_energy
                        )));
                    }
                    report
                }
                (None, Some(path)) => {
                    let (net, _) = ctx.restore(path)?;
                    net.exact_report()?
                }
                (None, None) => unreachable!("clap requires one of --artifact and --from"),
            };
            write_cost(ctx.out(), &report)?;
            println!(
                "eval-cost: cycles={} energy_mw_cycles={} latency_s={} energy_uj={}",
                report.total_cycles, report.total_energy, report.latency_s, report.energy_uj
            );
            Ok(())
        }
        Command::Verify {
            artifact, from, samples, ..
        } => {
            let (a, blob) = MappingArtifact::load(artifact)?;
            check_artifact_flags(ctx, &a)?;
            let probe_ok = export::check_probe(&a, &blob)?;
            let report = match from {
                Some(path) => {
                    let (net, _) = ctx.restore(path)?;
                    let data = load_data(ctx)?;
                    let n = (*samples).clamp(1, data.val.len());
                    let idx: Vec<usize> = (0..n).collect();
                    let (x, _) = data.val.batch(&idx);
                    Some(export::verify_artifact(&a, &blob, &net, &x)?)
                }
                None => None,
            };
            let text = serde_json::to_string_pretty(&json!({
                "probe_checksum_ok": probe_ok,
                "reference": report,
            }))
            .expect("report serializes");
            write_text(&ctx.out().join("verify.json"), &(text + "\n"))?;
            if !probe_ok {
                return Err(CliError::VerifyFailed("replayed probe output does not match the recorded checksum".into()));
            }
            if let Some(r) = &report {
                if !r.passed {
                    return Err(CliError::VerifyFailed(format!(
                        "layer `{}` deviates from the reference (max logit deviation {:e})",
                        r.failed_layer.as_deref().unwrap_or("?"),
                        r.max_abs_dev
                    )));
                }
            }
            println!(
                "verify: pass{}",
                report.map(|r| format!(" max_abs_dev={:e}", r.max_abs_dev)).unwrap_or_default()
            );
            Ok(())
        }
    }
}

fn do_warmup(ctx: &Ctx, data: &Data) -> CliResult<(Supernet, Vec<HistoryRow>)> {
    let mut net = ctx.fresh_net()?;
    let report = search::warmup(&mut net, &ctx.cfg, data.splits())?;
    Ok((net, report.history))
}

/// A warmed-up network: restored from `from`, or trained now.
fn warmed(ctx: &Ctx, data: &Data, from: Option<&Path>) -> CliResult<(Supernet, Vec<HistoryRow>)> {
    match from {
        Some(p) => {
            let (net, _) = ctx.restore(p)?;
            if net.phase != Some(Phase::Warmup) {
                return Err(chanmap::Error::PhaseOrder(format!("{} is not a warmup checkpoint", p.display())).into());
            }
            Ok((net, Vec::new()))
        }
        None => do_warmup(ctx, data),
    }
}

fn save_ckpt(net: &Supernet, lambda: Option<(f64, f64)>, path: &Path) -> CliResult<()> {
    let mut c = Checkpoint::of(net);
    c.lambda = lambda;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    c.save(path)?;
    Ok(())
}

fn last_accuracy(history: &[HistoryRow]) -> f64 {
    history.iter().map(|h| h.val_accuracy).fold(f64::NAN, f64::max)
}

fn point_of(ctx: &Ctx, net: &mut Supernet, data: &Data, label: String, lambda: f64, lambda_raw: f64) -> CliResult<ParetoPoint> {
    let bs = ctx.cfg.batch_size.max(256);
    let (val_accuracy, _) = evaluate(net, &data.val, bs)?;
    let test_accuracy = match &data.test {
        Some(t) => Some(evaluate(net, t, bs)?.0),
        None => None,
    };
    let report = net.exact_report()?;
    Ok(ParetoPoint {
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
    })
}

fn write_artifact(ctx: &Ctx, net: &Supernet, dir: &Path) -> CliResult<PathBuf> {
    let ex = export::export(net, &net.discretize(), ctx.common.seed)?;
    std::fs::create_dir_all(dir)?;
    Ok(ex.artifact.save(&ex.blob, dir, ARTIFACT_STEM)?)
}

fn check_artifact_flags(ctx: &Ctx, a: &MappingArtifact) -> CliResult<()> {
    if a.network != ctx.spec {
        return Err(CliError::Conflict(format!(
            "artifact describes network `{}`, --net is `{}`",
            a.network.name, ctx.spec.name
        )));
    }
    if a.platform != ctx.platform {
        return Err(CliError::Conflict(format!(
            "artifact targets platform `{}`, --platform is `{}`",
            a.platform.name, ctx.platform.name
        )));
    }
    Ok(())
}

struct Row {
    label: String,
    lambda: f64,
    result: Result<ParetoPoint, (String, String)>,
}

impl Row {
    fn failed(label: String, lambda: f64, e: &CliError) -> Self {
        Row {
            label,
            lambda,
            result: Err((e.tag().to_string(), e.to_string())),
        }
    }
}

/// Writes the run's checkpoint, history and artifact into `dir`.
fn finish_run(ctx: &Ctx, outcome: RunOutcome, dir: &Path, rel: &str) -> Row {
    let RunOutcome {
        net, history, mut point, ..
    } = outcome;
    let label = point.label.clone();
    let lambda = point.lambda;
    let r = (|| -> CliResult<ParetoPoint> {
        std::fs::create_dir_all(dir)?;
        save_ckpt(&net, Some((point.lambda, point.lambda_raw)), &dir.join(FINAL_CKPT))?;
        write_text(&dir.join("history.csv"), &history_csv(&history))?;
        write_artifact(ctx, &net, dir)?;
        point.artifact = Some(format!("{rel}{ARTIFACT_STEM}.toml"));
        Ok(point)
    })();
    match r {
        Ok(p) => {
            println!(
                "{}: val_accuracy={} cycles={} energy_uj={}",
                p.label, p.val_accuracy, p.cycles, p.energy_uj
            );
            Row {
                label,
                lambda,
                result: Ok(p),
            }
        }
        Err(e) => Row::failed(label, lambda, &e),
    }
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    points: Vec<SummaryEntry<'a>>,
    /// Labels of the non-dominated points (accuracy vs exact cycles).
    front: Vec<&'a str>,
}

#[derive(Serialize)]
struct SummaryEntry<'a> {
    label: &'a str,
    lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    point: Option<&'a ParetoPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error_tag: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

fn write_summaries(out: &Path, rows: &[Row]) -> CliResult<()> {
    let csv_rows: Vec<(String, f64, Result<ParetoPoint, String>)> = rows
        .iter()
        .map(|r| {
            (
                r.label.clone(),
                r.lambda,
                r.result.clone().map_err(|(tag, msg)| format!("{tag}: {msg}")),
            )
        })
        .collect();
    write_text(&out.join("summary.csv"), &summary_csv(&csv_rows))?;
    let points: Vec<ParetoPoint> = rows.iter().filter_map(|r| r.result.as_ref().ok().cloned()).collect();
    write_text(&out.join("front.csv"), &front_csv(&points))?;
    let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.val_accuracy, p.cycles)).collect();
    let summary = SummaryJson {
        points: rows
            .iter()
            .map(|r| SummaryEntry {
                label: &r.label,
                lambda: r.lambda,
                point: r.result.as_ref().ok(),
                error_tag: r.result.as_ref().err().map(|e| e.0.as_str()),
                error: r.result.as_ref().err().map(|e| e.1.as_str()),
            })
            .collect(),
        front: search::pareto_front(&pts).into_iter().map(|i| points[i].label.as_str()).collect(),
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&out.join("summary.json"), &(text + "\n"))?;
    Ok(())
}

fn first_error(rows: &[Row]) -> CliResult<()> {
    let failed: Vec<&Row> = rows.iter().filter(|r| r.result.is_err()).collect();
    match failed.first() {
        None => Ok(()),
        Some(r) => {
            let (tag, msg) = r.result.as_ref().err().expect("failed row");
            Err(CliError::RunFailed(format!(
                "{} of {} runs failed; first: {} [{tag}] {msg}",
                failed.len(),
                rows.len(),
                r.label
            )))
        }
    }
}

fn write_cost(out: &Path, report: &CostReport) -> CliResult<()> {
    let text = serde_json::to_string_pretty(report).expect("cost serializes");
    write_text(&out.join("cost.json"), &(text + "\n"))?;
    let mut csv = String::from("layer,cycles,energy_mw_cycles");
    for cu in &report.cu_names {
        csv.push_str(&format!(",{cu}_cycles"));
    }
    csv.push('\n');
    for l in &report.layers {
        csv.push_str(&format!("{},{},{}", l.name, l.cycles, l.energy));
        for c in &l.cu_cycles {
            csv.push_str(&format!(",{c}"));
        }
        csv.push('\n');
    }
    write_text(&out.join("cost.csv"), &csv)?;
    Ok(())
}
