//! Timestamped run directories and their manifests.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use radaug_core::storage::{file_sha256, list_files};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const OUT_DIR_ENV: &str = "RADAUG_OUT_DIR";

/// Output root: `--out`, then the config's `output_dir`, then
/// `$RADAUG_OUT_DIR`, then `./runs`.
pub fn output_root(cli: Option<&Path>, config: Option<&Path>) -> PathBuf {
    cli.or(config)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    /// Directory hash of an on-disk input dataset, or the content digest of
    /// a dataset generated in memory.
    pub input_dataset_hash: Option<String>,
    pub outputs: Vec<OutputEntry>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(run_dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| CliError::Core(e.into()))
    }

    /// Re-hashes every listed output.
    pub fn verify(&self, run_dir: &Path) -> Result<(), CliError> {
        for entry in &self.outputs {
            let actual = file_sha256(&run_dir.join(&entry.path))?;
            if actual != entry.sha256 {
                return Err(CliError::Config(format!("{} does not match its manifest hash", entry.path)));
            }
        }
        Ok(())
    }
}

/// A run directory being filled by one command.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    command: String,
    seed: u64,
    started: DateTime<Utc>,
}

impl RunDir {
    /// Creates `<root>/<command>-<UTC timestamp>-s<seed>`, adding a numeric
    /// suffix if that name is taken.
    pub fn create(root: &Path, command: &str, seed: u64) -> Result<Self, CliError> {
        let started = Utc::now();
        fs::create_dir_all(root)?;
        let stem = format!("{command}-{}-s{seed}", started.format("%Y%m%dT%H%M%S%.3fZ"));
        let mut path = root.join(&stem);
        let mut n = 1;
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    path = root.join(format!("{stem}-{n}"));
                    n += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(RunDir {
            path,
            command: command.to_string(),
            seed,
            started,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    /// Inventories every file and writes the manifest (via a temporary file
    /// and rename).
    pub fn finish(self, config_hash: &str, input_dataset_hash: Option<String>) -> Result<RunManifest, CliError> {
        let mut outputs = Vec::new();
        for rel_path in list_files(&self.path)? {
            let file = self.path.join(&rel_path);
            let rel = rel_path
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            if rel == MANIFEST_FILE || rel.ends_with(".tmp") {
                continue;
            }
            outputs.push(OutputEntry {
                bytes: fs::metadata(&file)?.len(),
                sha256: file_sha256(&file)?,
                path: rel,
            });
        }
        let manifest = RunManifest {
            command: self.command.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            seed: self.seed,
            started_at: self.started.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            input_dataset_hash,
            outputs,
        };
        let tmp = self.path.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&manifest).map_err(radaug_core::Error::from)?)?;
        fs::rename(&tmp, self.path.join(MANIFEST_FILE))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_inventories_outputs() {
        let root = tempfile::tempdir().unwrap();
        let run = RunDir::create(root.path(), "train", 7).unwrap();
        fs::create_dir_all(run.join("sub")).unwrap();
        fs::write(run.join("a.txt"), b"hello").unwrap();
        fs::write(run.join("sub/b.txt"), b"world").unwrap();
        let dir = run.path().to_path_buf();
        let m = run.finish("abc", None).unwrap();
        let paths: Vec<_> = m.outputs.iter().map(|o| o.path.as_str()).collect();
        assert_eq!(paths, vec!["a.txt", "sub/b.txt"]);
        assert_eq!(RunManifest::load(&dir).unwrap(), m);
        m.verify(&dir).unwrap();
        fs::write(dir.join("a.txt"), b"tampered").unwrap();
        assert!(m.verify(&dir).is_err());
    }

    #[test]
    fn colliding_names_get_suffixes() {
        let root = tempfile::tempdir().unwrap();
        let a = RunDir::create(root.path(), "x", 1).unwrap();
        let b = RunDir::create(root.path(), "x", 1).unwrap();
        assert_ne!(a.path(), b.path());
    }

    #[test]
    fn output_root_precedence() {
        assert_eq!(output_root(Some(Path::new("a")), Some(Path::new("b"))), PathBuf::from("a"));
        assert_eq!(output_root(None, Some(Path::new("b"))), PathBuf::from("b"));
    }
}
