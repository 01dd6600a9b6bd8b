//! Run manifest and output-directory lock.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".rft.lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Input path to SHA-256 of its content.
    pub inputs: BTreeMap<String, String>,
    /// Output paths relative to the output directory.
    pub outputs: Vec<String>,
}

/// One per output directory; each stage replaces its own entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            stages: BTreeMap::new(),
        }
    }
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = File::open(path).map_err(CliError::io(path))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(CliError::io(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp).map_err(CliError::io(&tmp))?;
        f.write_all(bytes).map_err(CliError::io(&tmp))?;
        f.sync_all().map_err(CliError::io(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(CliError::io(path))
}

impl RunManifest {
    pub fn load_or_default(out: &Path) -> Result<Self, CliError> {
        let path = out.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Records a finished stage and rewrites the manifest atomically.
    pub fn record(out: &Path, stage: &str, record: StageRecord) -> Result<(), CliError> {
        let mut m = Self::load_or_default(out)?;
        m.code_version = env!("CARGO_PKG_VERSION").to_string();
        m.stages.insert(stage.to_string(), record);
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        write_atomic(&out.join(MANIFEST_FILE), json.as_bytes())
    }
}

/// Builder for one stage's manifest entry.
pub struct StageLog {
    config_hash: String,
    started: u64,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl StageLog {
    pub fn start(config_hash: String) -> Self {
        Self {
            config_hash,
            started: now_unix(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let key = std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        self.inputs.insert(key.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, relative: impl Into<String>) {
        self.outputs.push(relative.into());
    }

    pub fn finish(self, out: &Path, stage: &str) -> Result<(), CliError> {
        RunManifest::record(
            out,
            stage,
            StageRecord {
                config_hash: self.config_hash,
                started_unix: self.started,
                finished_unix: now_unix(),
                inputs: self.inputs,
                outputs: self.outputs,
            },
        )
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutLock {
    path: PathBuf,
}

impl OutLock {
    pub fn acquire(out: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(out).map_err(CliError::io(out))?;
        let path = out.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Config(format!(
                "{} is in use by another run (remove {} if that run is gone)",
                out.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Io { path, source: e }),
        }
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
