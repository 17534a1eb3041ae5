//! The run directory and its append-only manifest.
//!
//! Every executed step appends one record. A step's latest record is
//! current when its prerequisite's current record is older; rerunning a step
//! therefore makes everything downstream stale without rewriting history.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clonematch::digest::sha256_hex;
use clonematch::Error;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;

/// Steps in roadmap order with their single direct prerequisite.
pub const STEPS: [(&str, Option<&str>); 12] = [
    ("load", None),
    ("fit", Some("load")),
    ("bin", Some("fit")),
    ("balance", Some("bin")),
    ("trim", Some("balance")),
    ("freeze", Some("trim")),
    ("match", Some("freeze")),
    ("release", Some("match")),
    ("effects", Some("release")),
    ("rank", Some("effects")),
    ("compare", Some("rank")),
    ("evaluate", Some("effects")),
];

/// Steps that shape the design and are locked once it is frozen.
pub const DESIGN_STEPS: [&str; 6] = ["load", "fit", "bin", "balance", "trim", "freeze"];

pub fn prerequisite(step: &str) -> Option<&'static str> {
    STEPS.iter().find(|(s, _)| *s == step).and_then(|(_, p)| *p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Resolved configuration the step ran with.
    pub config: serde_json::Value,
    #[serde(default)]
    pub summary: serde_json::Value,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    pub steps: Vec<StepRecord>,
}

impl RunManifest {
    /// Index of the step's current record.
    pub fn current(&self, step: &str) -> Option<usize> {
        let idx = self.steps.iter().rposition(|r| r.step == step)?;
        if let Some(p) = prerequisite(step) {
            if self.current(p)? > idx {
                return None;
            }
        }
        Some(idx)
    }

    pub fn records(&self, step: &str) -> impl Iterator<Item = &StepRecord> + '_ {
        let step = step.to_string();
        self.steps.iter().filter(move |r| r.step == step)
    }

    pub fn latest_config(&self) -> Option<&serde_json::Value> {
        self.steps.last().map(|r| &r.config)
    }
}

pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl Run {
    pub fn open(dir: &Path) -> Result<Run, CliError> {
        let path = dir.join(MANIFEST);
        let manifest = if path.exists() {
            serde_json::from_slice(&fs::read(&path)?)?
        } else {
            RunManifest { format: FORMAT, steps: Vec::new() }
        };
        Ok(Run { dir: dir.to_path_buf(), manifest })
    }

    /// Fail unless `step`'s prerequisite has a current record.
    pub fn require(&self, step: &str) -> Result<(), CliError> {
        if let Some(p) = prerequisite(step) {
            if self.manifest.current(p).is_none() {
                return Err(CliError::Missing { step: step.into(), missing: p.into() });
            }
        }
        Ok(())
    }

    pub fn frozen(&self) -> bool {
        self.manifest.current("freeze").is_some()
    }

    /// Read an output of `step`'s current record, checking its digest.
    pub fn artifact(&self, step: &str, name: &str) -> Result<Vec<u8>, CliError> {
        let idx = self
            .manifest
            .current(step)
            .ok_or_else(|| CliError::Missing { step: step.into(), missing: step.into() })?;
        let rel = format!("{step}/{name}");
        let want = self.manifest.steps[idx]
            .outputs
            .iter()
            .find(|o| o.path == rel)
            .ok_or_else(|| Error::Provenance(format!("{rel} is not an output of the recorded {step} step")))?;
        let bytes = fs::read(self.dir.join(&rel))?;
        if sha256_hex(&bytes) != want.sha256 {
            return Err(Error::Provenance(format!("{rel} was modified after {step} wrote it")).into());
        }
        Ok(bytes)
    }

    pub fn artifact_json<T: serde::de::DeserializeOwned>(&self, step: &str, name: &str) -> Result<T, CliError> {
        Ok(serde_json::from_slice(&self.artifact(step, name)?)?)
    }

    pub fn begin(&self, step: &str) -> Result<StepWriter, CliError> {
        fs::create_dir_all(self.dir.join(step))?;
        Ok(StepWriter {
            step: step.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
            started: unix_now(),
        })
    }

    pub fn commit(&mut self, w: StepWriter, config: serde_json::Value) -> Result<StepRecord, CliError> {
        let record = StepRecord {
            step: w.step,
            inputs: w.inputs,
            outputs: w.outputs,
            config,
            summary: w.summary,
            started_unix: w.started,
            finished_unix: unix_now(),
        };
        self.manifest.steps.push(record.clone());
        let tmp = self.dir.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(&self.manifest)?)?;
        fs::rename(&tmp, self.dir.join(MANIFEST))?;
        Ok(record)
    }
}

pub struct StepWriter {
    step: String,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    pub summary: serde_json::Value,
    started: u64,
}

impl StepWriter {
    pub fn input(&mut self, path: &str, sha256: &str) {
        self.inputs.push(FileDigest { path: path.into(), sha256: sha256.into() });
    }

    /// Record the current digest of an upstream artifact as an input.
    pub fn upstream(&mut self, run: &Run, step: &str, name: &str) -> Result<(), CliError> {
        let bytes = run.artifact(step, name)?;
        self.input(&format!("{step}/{name}"), &sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&mut self, run: &Run, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let rel = format!("{}/{name}", self.step);
        fs::write(run.dir.join(&rel), bytes)?;
        self.outputs.push(FileDigest { path: rel, sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn write_with(
        &mut self,
        run: &Run,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> clonematch::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(run, name, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, run: &Run, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(run, name, &bytes)
    }
}
