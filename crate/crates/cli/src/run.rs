use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "FSFM_SEED";

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or input documents.
    Validation(String),
    Core(fsfm::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 3,
            CliError::Core(e) if e.is_validation() => 3,
            CliError::Core(_) => 4,
        }
    }

    pub fn to_json(&self) -> String {
        let kind = if self.exit_code() == 3 { "validation" } else { "runtime" };
        serde_json::json!({ "error": kind, "message": self.to_string() }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<fsfm::Error> for CliError {
    fn from(e: fsfm::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// `--seed` first, then FSFM_SEED, then the config value.
pub fn resolve_seed(flag: Option<u64>, config: u64) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(config),
    }
}

/// Reads and parses a JSON config document; any failure is a validation error.
pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("invalid config {}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub run_id: String,
    pub seed: u64,
    pub config: Value,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    /// The run id is a short hash of the command and resolved config, so
    /// identical invocations share it.
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(seed.to_le_bytes());
        h.update(config.to_string().as_bytes());
        let run_id = h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect();
        RunManifest {
            command: command.to_string(),
            run_id,
            seed,
            config,
            artifacts: Vec::new(),
        }
    }

    pub fn add(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| fsfm::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join("run.json");
        let text = serde_json::to_string_pretty(self).map_err(fsfm::Error::from)?;
        std::fs::write(&path, text + "\n").map_err(|e| fsfm::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        log::info!("run {} manifest at {}", self.run_id, path.display());
        Ok(path)
    }
}
