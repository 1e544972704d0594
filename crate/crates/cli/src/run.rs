//! Run identity and provenance: content-addressed run directories and the
//! `run.manifest` file listing every artifact a command emitted.

use crate::errors::CliError;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io("read", path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Run id: first 16 hex digits of `sha256(config bytes ++ "\nseed=" ++ seed)`.
/// The same config and seed always map to the same directory name, so a rerun
/// collides instead of overwriting.
pub fn run_id(config_bytes: &[u8], seed: u64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config_bytes);
    hasher.update(format!("\nseed={seed}").as_bytes());
    let digest = hasher.finalize();
    let mut s = String::with_capacity(16);
    for b in &digest[..8] {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Hash of a dataset directory's identity files (`manifest.csv` plus
/// `dataset.meta`); slide payloads are already covered by the generator's
/// determinism.
pub fn dataset_sha256(dir: &Path) -> Result<String, CliError> {
    let mut hasher = Sha256::new();
    for name in ["manifest.csv", "dataset.meta"] {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| CliError::io("read", &path, e))?;
        hasher.update(&bytes);
    }
    Ok(sha256_hex(&hasher.finalize()))
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Provenance record for one command invocation. Every emitted file is listed
/// with its hash; `verify` recomputes them.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub config_sha256: String,
    pub dataset_sha256: String,
    pub checkpoint_sha256: String,
    /// name -> (relative path, sha256)
    pub artifacts: BTreeMap<String, (String, String)>,
}

pub const MANIFEST_FILE: &str = "run.manifest";

impl RunManifest {
    /// Records `rel` (already written inside `dir`) under `name`.
    pub fn add_artifact(&mut self, dir: &Path, name: &str, rel: &str) -> Result<(), CliError> {
        let hash = file_sha256(&dir.join(rel))?;
        self.artifacts.insert(name.to_string(), (rel.to_string(), hash));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let mut out = String::new();
        let _ = writeln!(out, "run_id={}", self.run_id);
        let _ = writeln!(out, "command={}", self.command);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "started_unix={}", self.started_unix);
        let _ = writeln!(out, "finished_unix={}", self.finished_unix);
        let _ = writeln!(out, "config_sha256={}", self.config_sha256);
        let _ = writeln!(out, "dataset_sha256={}", self.dataset_sha256);
        let _ = writeln!(out, "checkpoint_sha256={}", self.checkpoint_sha256);
        for (name, (rel, hash)) in &self.artifacts {
            let _ = writeln!(out, "artifact.{name}={rel}");
            let _ = writeln!(out, "sha256.{name}={hash}");
        }
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, out).map_err(|e| CliError::io("write", &path, e))
    }

    pub fn load(dir: &Path) -> Result<RunManifest, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io("read", &path, e))?;
        let mut fields: BTreeMap<String, String> = BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let take = |k: &str| -> Result<String, CliError> {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| CliError::Io(format!("{}: missing field `{k}`", path.display())))
        };
        let mut artifacts = BTreeMap::new();
        for (k, rel) in &fields {
            if let Some(name) = k.strip_prefix("artifact.") {
                let hash = take(&format!("sha256.{name}"))?;
                artifacts.insert(name.to_string(), (rel.clone(), hash));
            }
        }
        let int = |k: &str| -> Result<u64, CliError> {
            take(k)?
                .parse()
                .map_err(|e| CliError::Io(format!("{}: field `{k}`: {e}", path.display())))
        };
        Ok(RunManifest {
            run_id: take("run_id")?,
            command: take("command")?,
            seed: int("seed")?,
            started_unix: int("started_unix")?,
            finished_unix: int("finished_unix")?,
            config_sha256: take("config_sha256")?,
            dataset_sha256: take("dataset_sha256")?,
            checkpoint_sha256: take("checkpoint_sha256")?,
            artifacts,
        })
    }

    /// Recomputes every artifact hash; errors name the first mismatch.
    pub fn verify(&self, dir: &Path) -> Result<(), CliError> {
        for (name, (rel, recorded)) in &self.artifacts {
            let actual = file_sha256(&dir.join(rel))?;
            if &actual != recorded {
                return Err(CliError::Io(format!(
                    "artifact `{name}` ({rel}) hash mismatch: manifest {recorded}, file {actual}"
                )));
            }
        }
        Ok(())
    }
}
