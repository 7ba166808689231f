use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const FAST: &str = "batch_size = 32\n[warmup]\nepochs = 1\n[search]\nepochs = 1\n[final]\nepochs = 1\n";

struct Fixture {
    _root: tempfile::TempDir,
    config: PathBuf,
    run: PathBuf,
}

fn chanmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chanmap"))
        .args(args)
        .env_remove("CHANMAP_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn common<'a>(out: &'a Path, config: &'a Path) -> Vec<String> {
    [
        "--net", "tiny-cnn", "--platform", "diana-like", "--data", "synthetic", "--seed", "3",
        "--train-size", "128", "--val-size", "64",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain(["--out".into(), out.display().to_string(), "--config".into(), config.display().to_string()])
    .collect()
}

fn invoke(cmd: &str, out: &Path, config: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd.to_string()];
    args.extend(common(out, config));
    args.extend(extra.iter().map(|s| s.to_string()));
    chanmap(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

/// The one-line error tag printed on failure.
fn error_tag(o: &Output) -> String {
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().unwrap_or_default();
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    line.strip_prefix("error[")
        .and_then(|s| s.split_once(']'))
        .map(|(tag, _)| tag.to_string())
        .unwrap_or_else(|| panic!("untagged error: {line}"))
}

/// One `run` shared by the tests that inspect its outputs.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let config = root.path().join("fast.toml");
        std::fs::write(&config, FAST).unwrap();
        let run = root.path().join("run");
        assert_ok(&invoke("run", &run, &config, &["--lambda", "0.1", "--target", "latency"]));
        Fixture { _root: root, config, run }
    })
}

fn csv_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn run_writes_one_summary_row_and_an_artifact() {
    let f = fixture();
    assert_eq!(csv_rows(&f.run.join("summary.csv")).len(), 1);
    for file in ["manifest.json", "history.csv", "front.csv", "summary.json", "final.ckpt.json", "mapping.toml", "mapping.bin"] {
        assert!(f.run.join(file).exists(), "{file} missing");
    }
}

#[test]
fn eval_cost_agrees_with_the_summary() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let artifact = f.run.join("mapping.toml");
    let o = invoke("eval-cost", dir.path(), &f.config, &["--artifact", artifact.to_str().unwrap()]);
    assert_ok(&o);
    let cost: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("cost.json")).unwrap()).unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(f.run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(cost["total_cycles"], summary["points"][0]["point"]["cycles"]);

    let ckpt = f.run.join("final.ckpt.json");
    let o = invoke("eval-cost", dir.path(), &f.config, &["--from", ckpt.to_str().unwrap()]);
    assert_ok(&o);
    let again: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("cost.json")).unwrap()).unwrap();
    assert_eq!(again["total_cycles"], cost["total_cycles"]);
}

#[test]
fn verify_replays_the_artifact_against_its_checkpoint() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let artifact = f.run.join("mapping.toml");
    let ckpt = f.run.join("final.ckpt.json");
    let o = invoke("verify", dir.path(), &f.config, &["--artifact", artifact.to_str().unwrap(), "--from", ckpt.to_str().unwrap()]);
    assert_ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("verify: pass"));
}

#[test]
fn tampered_blob_fails_verification() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    for file in ["mapping.toml", "mapping.bin"] {
        std::fs::copy(f.run.join(file), dir.path().join(file)).unwrap();
    }
    let blob = dir.path().join("mapping.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[0] ^= 0x40;
    std::fs::write(&blob, bytes).unwrap();
    let artifact = dir.path().join("mapping.toml");
    let o = invoke("verify", &dir.path().join("out"), &f.config, &["--artifact", artifact.to_str().unwrap()]);
    assert_eq!(error_tag(&o), "artifact");
}

#[test]
fn phased_commands_chain_through_checkpoints() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (w, s, t, e) = (dir.path().join("w"), dir.path().join("s"), dir.path().join("t"), dir.path().join("e"));
    assert_ok(&invoke("warmup", &w, &f.config, &[]));
    let warm = w.join("warmup.ckpt.json");
    assert_ok(&invoke("search", &s, &f.config, &["--lambda", "0.1", "--target", "energy", "--from", warm.to_str().unwrap()]));
    let searched = s.join("search.ckpt.json");
    // export needs the final phase
    let o = invoke("export", &e, &f.config, &["--from", searched.to_str().unwrap()]);
    assert_eq!(error_tag(&o), "phase-order");
    assert_ok(&invoke("finetune", &t, &f.config, &["--from", searched.to_str().unwrap()]));
    let finals = t.join("final.ckpt.json");
    assert_ok(&invoke("export", &e, &f.config, &["--from", finals.to_str().unwrap()]));
    assert!(e.join("mapping.toml").exists());
}

#[test]
fn sweep_summarizes_every_lambda() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let warm = dir.path().join("w");
    assert_ok(&invoke("warmup", &warm, &f.config, &[]));
    let from = warm.join("warmup.ckpt.json");
    let out = dir.path().join("sweep");
    assert_ok(&invoke("sweep", &out, &f.config, &["--lambdas", "0,1", "--jobs", "2", "--from", from.to_str().unwrap()]));
    assert_eq!(csv_rows(&out.join("summary.csv")).len(), 2);
    assert!(!csv_rows(&out.join("front.csv")).is_empty());
    assert!(out.join("runs/lambda-1/mapping.toml").exists());
}

#[test]
fn baselines_run_from_a_warmup() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let warm = dir.path().join("w");
    assert_ok(&invoke("warmup", &warm, &f.config, &[]));
    let from = warm.join("warmup.ckpt.json");
    let mut cycles = Vec::new();
    for kind in ["all-on-cu:digital", "all-on-cu:analog", "io-heuristic", "min-cost"] {
        let out = dir.path().join(kind.replace(':', "-"));
        assert_ok(&invoke("baseline", &out, &f.config, &["--kind", kind, "--from", from.to_str().unwrap()]));
        let s: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
        cycles.push(s["points"][0]["point"]["cycles"].as_f64().unwrap());
    }
    let min = cycles[3];
    assert!(cycles.iter().all(|&c| min <= c), "{cycles:?}");
}

#[test]
fn unknown_cu_is_tagged() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = invoke("baseline", dir.path(), &f.config, &["--kind", "all-on-cu:gpu"]);
    assert_eq!(error_tag(&o), "unknown-cu");
}

#[test]
fn malformed_config_is_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "batch_size = \"many\"\n").unwrap();
    assert_eq!(error_tag(&invoke("warmup", &dir.path().join("o"), &bad, &[])), "malformed-config");
    std::fs::write(&bad, "batch_size = 0\n").unwrap();
    assert_eq!(error_tag(&invoke("warmup", &dir.path().join("o"), &bad, &[])), "malformed-config");
    let platform = dir.path().join("p.toml");
    std::fs::write(&platform, "name = \"x\"\n").unwrap();
    let o = chanmap(&[
        "warmup", "--net", "tiny-cnn", "--platform", platform.to_str().unwrap(), "--data", "synthetic",
        "--seed", "0", "--out", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(error_tag(&o), "malformed-config");
}

#[test]
fn conflicting_flags_are_tagged() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let artifact = f.run.join("mapping.toml");
    let ckpt = f.run.join("final.ckpt.json");
    let o = invoke("eval-cost", dir.path(), &f.config, &["--artifact", artifact.to_str().unwrap(), "--from", ckpt.to_str().unwrap()]);
    assert_eq!(error_tag(&o), "usage");
    // an artifact for tiny-cnn evaluated as another network
    let o = chanmap(&[
        "eval-cost", "--net", "resnet8-slim", "--platform", "diana-like", "--data", "synthetic", "--seed", "0",
        "--out", dir.path().to_str().unwrap(), "--artifact", artifact.to_str().unwrap(),
    ]);
    assert_eq!(error_tag(&o), "conflicting-flags");
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let o = chanmap(&["run", "--net", "tiny-cnn", "--platform", "diana-like", "--data", "synthetic", "--out", "x", "--seed", "1"]);
    assert_eq!(error_tag(&o), "usage");
    assert_eq!(o.status.code(), Some(2));
}
