//! `<output>.provenance.json` records written next to every artifact.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

#[derive(Debug, Serialize)]
struct InputHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    args: Vec<String>,
    config_sha256: String,
    inputs: Vec<InputHash>,
    outputs: Vec<String>,
    unix_time: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn provenance_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".provenance.json");
    output.with_file_name(name)
}

/// Writes the provenance record for `primary` (an output file or directory).
pub fn record(subcommand: &str, inputs: &[PathBuf], outputs: &[PathBuf], primary: &Path) -> CliResult {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let config_sha256 = hex(&Sha256::digest(args.join("\u{1f}").as_bytes()));
    let inputs = inputs
        .iter()
        .map(|p| Ok(InputHash { path: p.display().to_string(), sha256: sha256_file(p)? }))
        .collect::<CliResult<Vec<_>>>()?;
    let rec = Provenance {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        args,
        config_sha256,
        inputs,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let path = if primary.is_dir() { primary.join("provenance.json") } else { provenance_path(primary) };
    std::fs::write(&path, serde_json::to_string_pretty(&rec)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
