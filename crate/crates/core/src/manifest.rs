//! Append-only run records.
//!
//! A manifest is deterministic given its inputs. Wall-clock time is the one
//! non-reproducible quantity, so it is kept out of the manifest body and
//! written to a `.timing.json` file next to it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the manifest's directory when written by the CLI.
    pub path: String,
    pub sha256: String,
}

impl ArtifactRecord {
    pub fn from_bytes(path: impl Into<String>, bytes: &[u8]) -> Self {
        Self {
            path: path.into(),
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(path.to_string_lossy(), &bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub artifact: ArtifactRecord,
}

/// Which run produced a figure or table, and from what inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub kind: String,
    pub artifact: ArtifactRecord,
    pub inputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub loss_trace: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    pub outputs: Vec<OutputRecord>,
    pub notes: BTreeMap<String, String>,
    finalized: bool,
    #[serde(skip)]
    wall_clock_secs: Option<f64>,
}

#[derive(Serialize)]
struct Timing {
    config_hash: String,
    wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            command: command.into(),
            config_hash: config_hash.into(),
            seeds: BTreeMap::new(),
            loss_trace: Vec::new(),
            checkpoints: Vec::new(),
            artifacts: BTreeMap::new(),
            outputs: Vec::new(),
            notes: BTreeMap::new(),
            finalized: false,
            wall_clock_secs: None,
        }
    }

    fn open(&mut self) -> Result<&mut Self> {
        if self.finalized {
            return Err(Error::contract("manifest is finalized"));
        }
        Ok(self)
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn record_seed(&mut self, stream: impl Into<String>, seed: u64) -> Result<()> {
        self.open()?.seeds.insert(stream.into(), seed);
        Ok(())
    }

    pub fn push_loss(&mut self, loss: f64) -> Result<()> {
        self.open()?.loss_trace.push(loss);
        Ok(())
    }

    pub fn add_checkpoint(&mut self, step: usize, artifact: ArtifactRecord) -> Result<()> {
        self.open()?.checkpoints.push(Checkpoint { step, artifact });
        Ok(())
    }

    /// Artifact names are write-once.
    pub fn add_artifact(&mut self, name: impl Into<String>, artifact: ArtifactRecord) -> Result<()> {
        let name = name.into();
        let m = self.open()?;
        if m.artifacts.contains_key(&name) {
            return Err(Error::contract(format!("artifact `{name}` already recorded")));
        }
        m.artifacts.insert(name, artifact);
        Ok(())
    }

    pub fn add_output(&mut self, record: OutputRecord) -> Result<()> {
        self.open()?.outputs.push(record);
        Ok(())
    }

    pub fn add_note(&mut self, key: impl Into<String>, value: impl Into<String>) -> Result<()> {
        self.open()?.notes.insert(key.into(), value.into());
        Ok(())
    }

    pub fn finalize(&mut self, wall_clock_secs: f64) -> Result<()> {
        self.open()?;
        self.finalized = true;
        self.wall_clock_secs = Some(wall_clock_secs);
        Ok(())
    }

    pub fn wall_clock_secs(&self) -> Option<f64> {
        self.wall_clock_secs
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

pub fn timing_path(manifest_path: &Path) -> PathBuf {
    let mut name = manifest_path.file_name().unwrap_or_default().to_os_string();
    name.push(".timing.json");
    manifest_path.with_file_name(name)
}

/// Writes a finalized manifest, plus its timing record when one is set.
pub fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<()> {
    if !manifest.finalized {
        return Err(Error::contract("only finalized manifests are written"));
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, manifest.to_json())?;
    std::fs::rename(&tmp, path)?;
    if let Some(secs) = manifest.wall_clock_secs {
        let timing = Timing {
            config_hash: manifest.config_hash.clone(),
            wall_clock_secs: secs,
        };
        std::fs::write(
            timing_path(path),
            serde_json::to_string_pretty(&timing).expect("timing serializes"),
        )?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
