//! Frozen assignment logits during warmup, and byte-identical sweeps.

use std::path::Path;
use std::process::Command;

use chanmap::data::{gen_synthetic, Split};
use chanmap::hwmodel::PlatformProfile;
use chanmap::netspec::{mbv1_micro, tiny_cnn};
use chanmap::rng;
use chanmap::search::{warmup, Splits, TrainConfig};
use chanmap::supernet::{Supernet, SupernetConfig};

use crate::Outcome;

fn theta_bits(net: &Supernet) -> Vec<u32> {
    net.theta_ids()
        .into_iter()
        .flat_map(|id| net.store.value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

/// Warmup on both mapping modes; returns a description of any change.
fn warmup_freeze() -> Result<String, String> {
    let mut cfg = TrainConfig::default();
    cfg.warmup.epochs = 2;
    let cases = [
        (tiny_cnn([3, 16, 16], 4), PlatformProfile::diana_like()),
        (mbv1_micro([3, 16, 16], 4, 0.25), PlatformProfile::darkside_like()),
    ];
    let mut weights_moved = 0;
    for (spec, platform) in cases {
        let all = gen_synthetic(spec.classes, 384, spec.input, 5).map_err(|e| e.to_string())?;
        let train = all.subset(&(0..256).collect::<Vec<_>>(), Split::Train);
        let val = all.subset(&(256..384).collect::<Vec<_>>(), Split::Val);
        let mut net = Supernet::build(&spec, &platform, SupernetConfig::default(), &mut rng::seeded(5)).map_err(|e| e.to_string())?;
        // non-uniform logits, so a leaked update cannot hide behind symmetry
        for b in net.banks.clone() {
            let shape = net.store.value(b.logits).shape().to_vec();
            *net.store.value_mut(b.logits) = chanmap::Tensor::normal(shape, 1.0, &mut rng::seeded(6));
        }
        let before = theta_bits(&net);
        let weights_before = net.store.value(net.weight_ids()[0]).clone();
        warmup(&mut net, &cfg, Splits { train: &train, val: &val, test: None }).map_err(|e| e.to_string())?;
        if theta_bits(&net) != before {
            return Err(format!("{}: assignment logits changed during warmup", spec.name));
        }
        weights_moved += usize::from(net.store.value(net.weight_ids()[0]) != &weights_before);
    }
    if weights_moved != 2 {
        return Err("weights did not train during warmup".into());
    }
    Ok("assignment logits bit-identical across warmup (per-channel and contiguous)".into())
}

const SWEEP_CONFIG: &str = "\
batch_size = 32

[warmup]
epochs = 2
patience = 2

[search]
epochs = 2
patience = 2

[final]
epochs = 1
patience = 1
";

fn sweep_once(dir: &Path, config: &Path, jobs: usize) -> Result<(String, Vec<u8>), String> {
    let out = dir.join(format!("jobs-{jobs}"));
    let status = Command::new(env!("CARGO_BIN_EXE_chanmap"))
        .args(["sweep", "--net", "tiny-cnn", "--platform", "diana-like", "--data", "synthetic"])
        .args(["--seed", "11", "--lambdas", "0,0.3,1", "--train-size", "256", "--val-size", "128"])
        .arg("--jobs")
        .arg(jobs.to_string())
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(&out)
        .env_remove(chanmap::data::DATA_DIR_ENV)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).trim().to_string());
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let hash = manifest["config_hash"].as_str().unwrap_or_default().to_string();
    let summary = std::fs::read(out.join("summary.csv")).map_err(|e| e.to_string())?;
    Ok((hash, summary))
}

fn sweep_determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("train.toml");
    std::fs::write(&config, SWEEP_CONFIG).map_err(|e| e.to_string())?;
    // the job count is not part of the configuration hash
    let (h1, s1) = sweep_once(dir.path(), &config, 1)?;
    let (h2, s2) = sweep_once(dir.path(), &config, 2)?;
    if h1.is_empty() || h1 != h2 {
        return Err(format!("manifest hashes differ: {h1} vs {h2}"));
    }
    if s1 != s2 {
        return Err("summary.csv differs between runs with the same hash".into());
    }
    let rows = s1.iter().filter(|&&b| b == b'\n').count() - 1;
    Ok(format!("two sweeps with hash {}.. produced identical summary.csv ({rows} rows)", &h1[..12]))
}

pub fn freeze_and_determinism() -> Outcome {
    match (warmup_freeze(), sweep_determinism()) {
        (Ok(a), Ok(b)) => Outcome::new(true, format!("{a}; {b}")),
        (a, b) => Outcome::new(
            false,
            [a, b].into_iter().filter_map(|r| r.err()).collect::<Vec<_>>().join("; "),
        ),
    }
}
