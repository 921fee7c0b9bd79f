//! Run directories, their manifest, and the exit-code taxonomy.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xct_core::phantom::DatasetManifest;

pub const RUN_MANIFEST: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

/// Bumped whenever an on-disk artifact changes shape.
pub const ARTIFACT_VERSION: u32 = 1;

/// Bad invocation: wrong flags, invalid config, refused overwrite.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 usage, 3 data or format, 4 numerical abort, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<xct_core::Error>() {
            use xct_core::Error as E;
            return match e {
                E::Config(_) => 2,
                E::NonFinite { .. } => 4,
                E::Contract(_)
                | E::Format { .. }
                | E::Io { .. }
                | E::Json(_)
                | E::Generation { .. }
                | E::Evaluation(_) => 3,
                E::GraphIntegrity(_) => 1,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub role: String,
    pub path: PathBuf,
    pub manifest: DatasetManifest,
}

/// Everything needed to reproduce a run: the exact config bytes (by hash and
/// by value), the datasets it read and the command that started it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: u32,
    pub tool_version: String,
    pub command_line: Vec<String>,
    pub config_file: String,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub datasets: Vec<DatasetRef>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// An output directory being filled by one command.
pub struct RunDir {
    pub path: PathBuf,
    started_at: DateTime<Utc>,
    config_bytes: Vec<u8>,
    datasets: Vec<DatasetRef>,
}

fn is_empty_dir(path: &Path) -> Result<bool> {
    Ok(fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .next()
        .is_none())
}

impl RunDir {
    /// Creates `path`, refusing a non-empty directory unless `force` (or
    /// `resume`, which continues a run in place).
    pub fn create(path: &Path, force: bool, resume: bool) -> Result<Self> {
        if path.exists() {
            if !path.is_dir() {
                return Err(usage(format!("{} exists and is not a directory", path.display())));
            }
            if !force && !resume && !is_empty_dir(path)? {
                return Err(usage(format!(
                    "output directory {} is not empty (use --force to write into it)",
                    path.display()
                )));
            }
        }
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            started_at: Utc::now(),
            config_bytes: Vec::new(),
            datasets: Vec::new(),
        })
    }

    /// Stores the config verbatim; the manifest hashes these bytes.
    pub fn store_config(&mut self, bytes: Vec<u8>) -> Result<()> {
        let p = self.path.join(CONFIG_FILE);
        fs::write(&p, &bytes).with_context(|| format!("writing {}", p.display()))?;
        self.config_bytes = bytes;
        Ok(())
    }

    pub fn add_dataset(&mut self, role: &str, path: &Path, manifest: DatasetManifest) {
        self.datasets.push(DatasetRef {
            role: role.into(),
            path: path.to_path_buf(),
            manifest,
        });
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes the manifest last, listing every other file in the directory.
    pub fn finish(self) -> Result<RunManifest> {
        let mut outputs = Vec::new();
        collect_files(&self.path, &self.path, &mut outputs)?;
        outputs.retain(|p| p != RUN_MANIFEST);
        outputs.sort();
        let config = if self.config_bytes.is_empty() {
            serde_json::Value::Null
        } else {
            serde_json::from_slice(&self.config_bytes)?
        };
        let m = RunManifest {
            artifact_version: ARTIFACT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command_line: std::env::args().collect(),
            config_file: CONFIG_FILE.into(),
            config_sha256: sha256_hex(&self.config_bytes),
            config,
            datasets: self.datasets,
            started_at: self.started_at,
            finished_at: Utc::now(),
            outputs,
        };
        let p = self.path.join(RUN_MANIFEST);
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(m)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn usage_errors_map_to_two() {
        assert_eq!(exit_code(&usage("bad flag")), 2);
        let e: anyhow::Error = xct_core::Error::NonFinite {
            step: 1,
            term: "l_re".into(),
            max_grad: 0.0,
        }
        .into();
        assert_eq!(exit_code(&e), 4);
        let e: anyhow::Error = xct_core::Error::Evaluation("x".into()).into();
        assert_eq!(exit_code(&e.context("while evaluating")), 3);
    }

    #[test]
    fn refuses_non_empty_dir_without_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), b"1").unwrap();
        let err = RunDir::create(dir.path(), false, false).err().unwrap();
        assert_eq!(exit_code(&err), 2);
        assert!(RunDir::create(dir.path(), true, false).is_ok());
    }
}
