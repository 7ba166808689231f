//! Desk-scale lambda sweep on the depthwise/cluster platform.

use std::path::Path;

use chanmap::data::{self, Dataset, Normalization, Split, SyntheticParams, DATA_DIR_ENV};
use chanmap::hwmodel::{PlatformProfile, Rounding};
use chanmap::netspec::{mbv1_micro, CIFAR_INPUT};
use chanmap::rng;
use chanmap::search::{build_baseline, spearman, sweep, warmup, BaselineKind, Splits, TrainConfig};
use chanmap::supernet::{Supernet, SupernetConfig};

use crate::Outcome;

const LAMBDAS: [f64; 5] = [0.0, 0.005, 0.02, 0.05, 0.2];
const SEEDS: [u64; 3] = [0, 1, 2];
const WIDTH: f64 = 0.5;
const TRAIN: usize = 4000;
const VAL: usize = 1000;

fn config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    cfg.warmup.epochs = 12;
    cfg.search.epochs = 8;
    cfg.final_.epochs = 4;
    cfg
}

/// CIFAR-10 when the binary files are available, else the synthetic proxy.
fn load(seed: u64) -> (Dataset, Dataset, &'static str) {
    if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
        let pool = data::load_cifar10_binary(Path::new(&dir), Split::Train, Some(TRAIN + VAL), seed, &Normalization::default())
            .expect("CIFAR-10 binaries");
        let (train, val) = pool.split_validation(VAL as f64 / pool.len() as f64, seed).unwrap();
        return (train, val, "cifar-10");
    }
    let all = data::gen_synthetic_with(10, TRAIN + VAL, CIFAR_INPUT, seed, SyntheticParams::CIFAR_PROXY).unwrap();
    let train = all.subset(&(0..TRAIN).collect::<Vec<_>>(), Split::Train);
    let val = all.subset(&(TRAIN..TRAIN + VAL).collect::<Vec<_>>(), Split::Val);
    (train, val, "proxy data")
}

struct SeedResult {
    clauses: [bool; 4],
    summary: String,
}

fn one_seed(seed: u64) -> Result<SeedResult, String> {
    let (train, val, source) = load(seed);
    let splits = Splits { train: &train, val: &val, test: None };
    let platform = PlatformProfile::darkside_like();
    let spec = mbv1_micro(CIFAR_INPUT, 10, WIDTH);
    let cfg = config(seed);
    let mut net = Supernet::build(&spec, &platform, SupernetConfig::default(), &mut rng::seeded(seed)).map_err(|e| e.to_string())?;
    let warm = warmup(&mut net, &cfg, splits).map_err(|e| e.to_string())?;

    let baseline = |cu: &str| -> Result<f64, String> {
        let kind = BaselineKind::AllOnCu { cu: cu.into() };
        let a = build_baseline(&kind, &net, cfg.target).map_err(|e| e.to_string())?;
        Ok(net.cost_report(&a, Rounding::Ceil).map_err(|e| e.to_string())?.total_cycles)
    };
    let (c_cluster, c_dwe) = (baseline("cluster")?, baseline("dwe")?);

    let mut points = Vec::new();
    for (lambda, run) in sweep(&net, &cfg, &LAMBDAS, 1, splits) {
        let run = run.map_err(|e| format!("lambda {lambda}: {e}"))?;
        points.push(run.point);
    }
    let cycles: Vec<f64> = points.iter().map(|p| p.cycles).collect();
    let rho = spearman(&LAMBDAS, &cycles);
    let largest = *cycles.last().unwrap();
    let acc0 = points[0].val_accuracy;
    let clauses = [
        rho <= -0.7,
        (largest - c_dwe).abs() <= 0.1 * c_dwe,
        (acc0 - warm.best_val_accuracy).abs() <= 0.02,
        cycles.iter().any(|&c| c_dwe < c && c < c_cluster),
    ];
    let summary = format!(
        "seed {seed} [{source}]: rho {rho:.2}, cycles {cycles:?} (dwe {c_dwe}, cluster {c_cluster}), acc(lambda=0) {acc0:.3} vs warmup {:.3} -> {}",
        warm.best_val_accuracy,
        clauses.iter().map(|&c| if c { "y" } else { "n" }).collect::<String>()
    );
    Ok(SeedResult { clauses, summary })
}

pub fn pareto_behavior() -> Outcome {
    let mut passing = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        match one_seed(seed) {
            Ok(r) => {
                passing += usize::from(r.clauses.iter().all(|&c| c));
                lines.push(r.summary);
            }
            Err(e) => lines.push(format!("seed {seed}: {e}")),
        }
    }
    Outcome::new(
        passing >= 2,
        format!("{passing}/3 seeds satisfy all clauses (need 2); {}", lines.join("; ")),
    )
}
