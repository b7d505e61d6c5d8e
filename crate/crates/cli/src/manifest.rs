//! Provenance embedded in every report: enough to re-run the command and
//! get the same bytes back.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name, verbatim.
    pub argv: Vec<String>,
    pub params: serde_json::Value,
    /// SHA-256 of every input file, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
}

impl RunManifest {
    pub fn new(
        command: &str,
        argv: &[String],
        params: &impl Serialize,
        inputs: &[&Path],
        seed: Option<u64>,
    ) -> CliResult<Self> {
        let mut digests = BTreeMap::new();
        for p in inputs {
            digests.insert(p.display().to_string(), digest_file(p)?);
        }
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv: argv.to_vec(),
            params: serde_json::to_value(params).expect("parameters serialize"),
            inputs: digests,
            seed,
        })
    }

    /// Fails if any input changed since the manifest was written.
    pub fn verify_inputs(&self) -> CliResult<()> {
        for (path, want) in &self.inputs {
            let p = Path::new(path);
            let got = digest_file(p)?;
            if &got != want {
                return Err(CliError::input(p, format!("input changed since the run (sha256 {got}, manifest has {want})")));
            }
        }
        Ok(())
    }
}

pub fn digest_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Shape of every JSON document the tool writes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub manifest: RunManifest,
    pub report: T,
}

/// Location of the manifest written next to a JSONL output.
pub fn sidecar_path(out: &Path) -> std::path::PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    s.into()
}
