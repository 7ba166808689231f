use std::path::Path;

use chanmap::data::Normalization;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything that determines the results of a command. Timestamps, the
/// output directory and `--jobs` are deliberately absent.
#[derive(Serialize)]
pub struct HashInput<'a> {
    pub command: &'a str,
    pub network: String,
    pub platform: String,
    pub train_config: String,
    pub data: &'a str,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub params: serde_json::Value,
    /// Content hash of the input checkpoint or artifact, if any.
    pub input_sha256: Option<String>,
}

/// Git-style content hash: sha256 over `blob <len>\0<canonical json>`.
pub fn content_hash(input: &HashInput<'_>) -> String {
    let body = serde_json::to_vec(input).expect("hash input serializes");
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(&body);
    hex(&h.finalize())
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub net: String,
    pub platform: String,
    pub config: Option<String>,
    pub data: String,
    pub seed: u64,
    pub normalization: Normalization,
    pub config_hash: String,
    pub out: String,
    pub started_at: String,
    pub finished_at: String,
    /// `ok` or the error tag.
    pub status: String,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
