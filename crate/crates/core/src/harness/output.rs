//! Atomic artifact writing and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::HarnessError;

/// Git-style content hash of the canonical config text: `sha256("blob <len>\0" ++ text)`.
/// The `output_dir` line is left out, so moving a run does not change its hash.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let text: String = cfg
        .to_text()
        .lines()
        .filter(|l| !l.starts_with("output_dir ="))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

/// Writes `bytes` to `path` via a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let io = |e: std::io::Error| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputFile {
    pub name: String,
    pub bytes: usize,
}

/// Collects outputs of one run under a directory.
#[derive(Debug)]
pub struct OutputSink {
    dir: PathBuf,
    hash: String,
    files: Vec<OutputFile>,
}

impl OutputSink {
    pub fn new(dir: PathBuf, hash: String) -> Self {
        Self {
            dir,
            hash,
            files: Vec::new(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// CSV with the `# config_hash=` comment line, then `header`, then `body` rows.
    pub fn csv(&mut self, name: &str, header: &str, body: &str) -> Result<(), HarnessError> {
        let mut text = format!("# config_hash={}\n{}\n", self.hash, header);
        text.push_str(body);
        if !body.is_empty() && !body.ends_with('\n') {
            text.push('\n');
        }
        self.file(name, text.as_bytes())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), HarnessError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Io {
            path: self.dir.join(name),
            message: e.to_string(),
        })?;
        text.push('\n');
        self.file(name, text.as_bytes())
    }

    pub fn file(&mut self, name: &str, bytes: &[u8]) -> Result<(), HarnessError> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.files.retain(|f| f.name != name);
        self.files.push(OutputFile {
            name: name.to_string(),
            bytes: bytes.len(),
        });
        Ok(())
    }

    pub fn files(&self) -> &[OutputFile] {
        &self.files
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub experiment: String,
    pub config: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub tool_version: String,
    pub output_dir: PathBuf,
    pub outputs: Vec<OutputFile>,
    /// `false` when a verification recipe found violations.
    pub verified: bool,
}

pub(crate) fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Experiment;

    #[test]
    fn hash_is_stable_and_seed_sensitive() {
        let a = ExperimentConfig::defaults(Experiment::Escape);
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
        b.output_dir = "elsewhere".into();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.seed = 1;
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("x.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn csv_starts_with_hash_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = OutputSink::new(dir.path().to_path_buf(), "abc".into());
        sink.csv("t.csv", "a,b", "1,2").unwrap();
        let text = fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert_eq!(text, "# config_hash=abc\na,b\n1,2\n");
        assert_eq!(sink.files().len(), 1);
    }
}
