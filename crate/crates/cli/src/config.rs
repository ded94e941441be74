//! Flat key=value run configuration: parsing, typed access, and exhaustive
//! unknown-key rejection.
//!
//! A config file is plain text, one `key = value` pair per line, `#` starts a
//! comment. Every key must be consumed by the task that runs; anything left
//! over is reported as unknown so typos cannot silently change a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use divlvm::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Task {
    TrainBmem,
    TrainIlfm,
    Eval,
    SamplePrior,
    Diagnose,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::TrainBmem => "train-bmem",
            Task::TrainIlfm => "train-ilfm",
            Task::Eval => "eval",
            Task::SamplePrior => "sample-prior",
            Task::Diagnose => "diagnose",
        }
    }
}

/// Key=value pairs from a config file plus command-line overrides. Typed
/// accessors remove entries as they are read; [`RawConfig::finish`] rejects
/// whatever is left.
#[derive(Debug, Clone)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
    /// Snapshot of the effective settings, kept for the manifest after the
    /// accessors have drained `values`.
    resolved: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line_no}: expected key = value, got {line:?}"))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line_no}: empty key")));
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("line {line_no}: duplicate key {key:?}")));
            }
        }
        let resolved = values.clone();
        Ok(RawConfig { values, resolved })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Command-line flags land here so the manifest records what actually ran.
    pub fn apply_override(&mut self, key: &str, value: String) {
        self.values.insert(key.to_string(), value.clone());
        self.resolved.insert(key.to_string(), value);
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }

    /// Hash of the effective settings (task line plus sorted key=value
    /// lines), the reproducibility fingerprint stored in the manifest.
    pub fn config_hash(&self, task: Task) -> String {
        let mut canon = format!("task={}\n", task.name());
        for (k, v) in &self.resolved {
            let _ = writeln!(canon, "{k}={v}");
        }
        let digest = Sha256::digest(canon.as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }

    pub fn take_string(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    pub fn take_path(&mut self, key: &str) -> Option<PathBuf> {
        self.values.remove(key).map(PathBuf::from)
    }

    pub fn take_f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.take_parsed(key, "a real number")
    }

    pub fn take_u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.take_parsed(key, "a non-negative integer")
    }

    pub fn take_usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.take_parsed(key, "a non-negative integer")
    }

    pub fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.values.remove(key) {
            None => Ok(None),
            Some(v) => match v.as_str() {
                "true" | "yes" | "1" => Ok(Some(true)),
                "false" | "no" | "0" => Ok(Some(false)),
                other => Err(Error::Config(format!(
                    "key {key:?}: expected a boolean, got {other:?}"
                ))),
            },
        }
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str, what: &str) -> Result<Option<T>> {
        match self.values.remove(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::Config(format!("key {key:?}: expected {what}, got {v:?}"))
            }),
        }
    }

    pub fn require_string(&mut self, key: &str) -> Result<String> {
        self.take_string(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    pub fn require_path(&mut self, key: &str) -> Result<PathBuf> {
        self.take_path(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    pub fn require_usize(&mut self, key: &str) -> Result<usize> {
        self.take_usize(key)?
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    /// Rejects everything not consumed by the task, so unknown or misspelled
    /// keys are hard errors instead of silent no-ops.
    pub fn finish(self) -> Result<()> {
        if self.values.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.values.keys().map(|k| k.as_str()).collect();
            Err(Error::Config(format!(
                "unknown configuration keys: {}",
                keys.join(", ")
            )))
        }
    }
}

/// Settings shared by every task, resolved from the config file and the
/// command-line overrides.
#[derive(Debug, Clone)]
pub struct CommonSettings {
    pub task: Task,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub workers: usize,
    pub strict_paper: bool,
}

impl CommonSettings {
    pub fn resolve(task: Task, raw: &mut RawConfig) -> Result<Self> {
        if let Some(declared) = raw.take_string("task") {
            if declared != task.name() {
                return Err(Error::Config(format!(
                    "config declares task {declared:?} but the {} subcommand was invoked",
                    task.name()
                )));
            }
        }
        let seed = raw.take_u64("seed")?.unwrap_or(0);
        let out = raw.take_path("out");
        let workers = raw.take_usize("workers")?.unwrap_or(1);
        if workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let strict_paper = raw.take_bool("strict_paper")?.unwrap_or(false);
        Ok(CommonSettings {
            task,
            seed,
            out,
            workers,
            strict_paper,
        })
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| {
            Error::Config(format!(
                "task {} writes artifacts and needs an output directory (--out or out=)",
                self.task.name()
            ))
        })
    }
}
