use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// Record of one command run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub inputs: Vec<InputFile>,
    /// Hash over every input byte and the effective configuration.
    pub config_digest: String,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub wall_time_secs: f64,
    pub stop_reason: Option<String>,
    /// Column layout of each output file.
    pub schemas: BTreeMap<String, String>,
    pub details: serde_json::Value,
}

pub struct ManifestBuilder {
    command: String,
    started: Instant,
    inputs: Vec<(String, Vec<u8>)>,
    config: Vec<(String, String)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            started: Instant::now(),
            inputs: Vec::new(),
            config: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs
            .push((path.display().to_string(), bytes.to_vec()));
    }

    pub fn config(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.to_string(), value.to_string()));
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, bytes) in &self.inputs {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
        for (k, v) in &self.config {
            h.update(format!("{}={}\n", k.len(), k));
            h.update(format!("{}:{}\n", v.len(), v));
        }
        hex(&h.finalize())
    }

    pub fn finish(
        self,
        seed: Option<u64>,
        stop_reason: Option<String>,
        schemas: &[(&str, &str)],
        details: serde_json::Value,
    ) -> RunManifest {
        RunManifest {
            config_digest: self.digest(),
            command: self.command,
            args: std::env::args().collect(),
            inputs: self
                .inputs
                .iter()
                .map(|(path, bytes)| InputFile {
                    path: path.clone(),
                    sha256: hex(&Sha256::digest(bytes)),
                })
                .collect(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            stop_reason,
            schemas: schemas
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            details,
        }
    }
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join(FILE_NAME), text + "\n")
    }
}
