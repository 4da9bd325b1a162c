use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use hiernas::decoder::sha256_hex;
use serde::Serialize;

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

/// Record of one command invocation that wrote files.
#[derive(Serialize)]
pub struct RunManifest {
    command: String,
    config_sha256: String,
    seed: Option<u64>,
    artifacts: Vec<Artifact>,
    engine_version: String,
    started_unix_seconds: u64,
    wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, config_text: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            seed,
            artifacts: Vec::new(),
            engine_version: env!("CARGO_PKG_VERSION").into(),
            started_unix_seconds: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .unwrap_or(Duration::ZERO)
                .as_secs(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn add(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        self.artifacts.push(Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    /// Writes the manifest to `path` and returns it.
    pub fn finish(mut self, elapsed: Duration, path: PathBuf) -> Result<PathBuf> {
        self.wall_clock_seconds = elapsed.as_secs_f64();
        std::fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// `<file>.manifest.json` beside a single output file.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
