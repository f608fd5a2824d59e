//! Run directories: one per (config hash, seed), guarded by a lock file.
//!
//! Each completed stage leaves a record under `stages/` with a digest of
//! its inputs and of every output it wrote. A completed stage is never
//! rerun unless forced; `--if-changed` turns a rerun with identical inputs
//! into a no-op.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::LoadedConfig;
use crate::error::{LabError, Result};
use crate::io::{read_bytes, read_json, sha256_hex, to_json_pretty, write_atomic};

pub const RUN_DIR_ENV: &str = "LIGER_RUN_DIR";

/// `$LIGER_RUN_DIR`, else `runs` under the working directory.
pub fn default_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WriteMode {
    /// Refuse to touch completed stages.
    #[default]
    Normal,
    /// Recompute and overwrite.
    Force,
    /// Skip completed stages whose inputs are unchanged.
    IfChanged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub config_hash: String,
    pub inputs: String,
    /// `(path relative to the run directory, sha256)` for every output.
    pub outputs: Vec<(String, String)>,
}

/// Exclusive hold on a directory; the lock file is removed on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                fs::write(&path, std::process::id().to_string()).map_err(|e| LabError::io(&path, e))?;
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(LabError::Locked { path }),
            Err(e) => Err(LabError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Whether a stage should run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Plan {
    Run { inputs: String },
    Skip,
}

/// A directory of staged artifacts (a seed's run directory or the
/// per-config directory holding cross-seed summaries).
#[derive(Debug)]
pub struct StageDir {
    dir: PathBuf,
    config_hash: String,
    mode: WriteMode,
    _lock: DirLock,
}

impl StageDir {
    pub fn open(dir: PathBuf, config_hash: &str, mode: WriteMode) -> Result<Self> {
        let lock = DirLock::acquire(&dir)?;
        Ok(StageDir { dir, config_hash: config_hash.to_string(), mode, _lock: lock })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn mode(&self) -> WriteMode {
        self.mode
    }

    fn record_path(&self, stage: &str) -> PathBuf {
        self.dir.join("stages").join(format!("{stage}.json"))
    }

    /// The stage's record if it completed and its outputs are intact.
    pub fn completed(&self, stage: &str) -> Option<StageRecord> {
        let rec: StageRecord = read_json(&self.record_path(stage)).ok()?;
        let intact = rec.outputs.iter().all(|(rel, sha)| read_bytes(&self.path(rel)).is_ok_and(|b| sha256_hex(&b) == *sha));
        intact.then_some(rec)
    }

    /// Path of an upstream artifact; errors with the producing command when
    /// that stage has not completed.
    pub fn require(&self, stage: &str, rel: &str, artifact: &str, command: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if self.completed(stage).is_none() || !path.exists() {
            return Err(LabError::MissingArtifact { artifact: artifact.into(), path, command: command.into() });
        }
        Ok(path)
    }

    /// Digest of the config, the stage name and the given input files.
    pub fn digest_inputs(&self, stage: &str, inputs: &[PathBuf], extra: &str) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.config_hash.as_bytes());
        h.update([0]);
        h.update(stage.as_bytes());
        h.update([0]);
        h.update(extra.as_bytes());
        for p in inputs {
            h.update([0]);
            h.update(sha256_hex(&read_bytes(p)?).as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn plan(&self, stage: &str, inputs: String) -> Result<Plan> {
        let Some(rec) = self.completed(stage) else {
            return Ok(Plan::Run { inputs });
        };
        match self.mode {
            WriteMode::Force => Ok(Plan::Run { inputs }),
            WriteMode::IfChanged if rec.inputs == inputs => Ok(Plan::Skip),
            WriteMode::IfChanged => Err(LabError::Stale { stage: stage.into(), path: self.record_path(stage) }),
            WriteMode::Normal => Err(LabError::Exists { path: self.record_path(stage) }),
        }
    }

    /// Writes the outputs and then the stage record.
    pub fn commit(&self, stage: &str, inputs: &str, outputs: &[(String, Vec<u8>)]) -> Result<()> {
        let mut written = Vec::with_capacity(outputs.len());
        for (rel, bytes) in outputs {
            write_atomic(&self.path(rel), bytes)?;
            written.push((rel.clone(), sha256_hex(bytes)));
        }
        let rec = StageRecord {
            stage: stage.into(),
            config_hash: self.config_hash.clone(),
            inputs: inputs.into(),
            outputs: written,
        };
        write_atomic(&self.record_path(stage), &to_json_pretty(&rec))
    }
}

/// `<root>/<name>-<hash12>`.
pub fn config_dir(root: &Path, cfg: &LoadedConfig) -> PathBuf {
    root.join(format!("{}-{}", cfg.config.name, cfg.short_hash()))
}

/// `<root>/<name>-<hash12>/seed-<seed>`.
pub fn seed_dir(root: &Path, cfg: &LoadedConfig, seed: u64) -> PathBuf {
    config_dir(root, cfg).join(format!("seed-{seed}"))
}
