//! Run-directory layout, artifact loading and the render path shared by the
//! CLI and the service.

use std::path::{Path, PathBuf};

use latent_directions::bank::{load_bank, DirectionBank};
use latent_directions::config::{parse_config, ExperimentConfig};
use latent_directions::data::{encode_latent, image_to_latent};
use latent_directions::denoiser::{load_model, Condition, DenoiserModel, NoisePredictor};
use latent_directions::edit::{EditSet, Editor, Init, StepDiagnostic};
use latent_directions::error::{Error, Result};
use latent_directions::schedule::{LatentState, NoiseSchedule, SamplingGrid};
use sha2::{Digest, Sha256};

use crate::wire::{Sidecar, Source, SIDECAR_FORMAT_VERSION};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// File names inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.bin")
    }

    pub fn bank(&self) -> PathBuf {
        self.root.join("bank.bin")
    }

    pub fn probe(&self) -> PathBuf {
        self.root.join("probe.json")
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join(format!("{command}.manifest.json"))
    }
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    parse_config(&text)
}

/// A clean image read from raster bytes, with its content id.
pub fn image_from_bytes(bytes: &[u8], config: &ExperimentConfig) -> Result<(LatentState, String)> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Ingestion(format!("undecodable image: {e}")))?;
    let row = image_to_latent(&img, config.latent_shape)?;
    let x = row.insert_axis(ndarray::Axis(0));
    Ok((LatentState::clean(x, config.latent_shape)?, sha256_hex(bytes)))
}

pub struct Rendered {
    pub png: Vec<u8>,
    pub sidecar: Sidecar,
    pub diagnostics: Vec<StepDiagnostic>,
}

/// Model, frozen bank and config of one run, loaded together.
pub struct Loaded {
    pub config: ExperimentConfig,
    pub model: DenoiserModel,
    pub bank: DirectionBank,
    pub schedule: NoiseSchedule,
    pub grid: SamplingGrid,
    pub model_checksum: String,
    pub bank_sha256: String,
}

impl Loaded {
    /// Loads `config.toml`, `model.bin` and `bank.bin` from `run`, with
    /// `config` overriding the run's own config file.
    pub fn open(run: &RunDir, config: Option<&Path>) -> Result<Self> {
        let config = read_config(config.unwrap_or(&run.config()))?;
        let model = load_model(&run.model())?;
        let bank = load_bank(&run.bank())?;
        Self::from_parts(config, model, bank)
    }

    pub fn from_parts(config: ExperimentConfig, model: DenoiserModel, bank: DirectionBank) -> Result<Self> {
        if !bank.is_frozen() {
            return Err(Error::InvalidArgument("the service only serves frozen banks".into()));
        }
        let schedule = NoiseSchedule::new(config.schedule.clone())?;
        if model.schedule_id() != schedule.id() {
            return Err(Error::InvalidArgument(format!(
                "model was trained under schedule {}, config declares {}",
                model.schedule_id(),
                schedule.id()
            )));
        }
        let grid = SamplingGrid::for_schedule(&schedule)?;
        Ok(Self {
            model_checksum: model.param_checksum(),
            bank_sha256: sha256_hex(&bank.to_bytes()),
            config,
            model,
            bank,
            schedule,
            grid,
        })
    }

    pub fn editor(&self) -> Result<Editor<'_>> {
        Editor::new(&self.model, &self.bank, &self.schedule, &self.grid)
    }

    /// Renders `edits` from `source`. Image sources need the decoded image.
    pub fn render(&self, source: &Source, edits: &EditSet, image: Option<&LatentState>) -> Result<Rendered> {
        let editor = self.editor()?;
        let refine = self.config.edit.inversion_refine_iters;
        let (outcome, refine_iters) = match source {
            Source::Seed { seed } => (
                editor.sample_edited(&Init::Seeds(vec![*seed]), &Condition::Null, 1.0, edits)?,
                None,
            ),
            Source::Image { image_id } => {
                let image = image.ok_or_else(|| {
                    Error::InvalidArgument(format!("image {image_id} is not available"))
                })?;
                (editor.edit_real(image, edits, refine)?, Some(refine))
            }
        };
        let png = encode_latent(outcome.image.x.row(0), self.config.latent_shape)?;
        let sidecar = Sidecar {
            format_version: SIDECAR_FORMAT_VERSION,
            source: source.clone(),
            edits: edits.canonical().into_iter().cloned().collect(),
            schedule_id: self.schedule.id(),
            guidance_scale: 1.0,
            refine_iters,
            model_checksum: self.model_checksum.clone(),
            bank_sha256: self.bank_sha256.clone(),
        };
        Ok(Rendered {
            png,
            sidecar,
            diagnostics: outcome.diagnostics,
        })
    }

    /// Checks that a sidecar was produced by these artifacts.
    pub fn check_sidecar(&self, sidecar: &Sidecar) -> Result<()> {
        if sidecar.model_checksum != self.model_checksum || sidecar.bank_sha256 != self.bank_sha256 {
            return Err(Error::InvalidArgument(
                "sidecar was rendered with a different model or bank".into(),
            ));
        }
        if sidecar.schedule_id != self.schedule.id() {
            return Err(Error::InvalidArgument("sidecar schedule does not match".into()));
        }
        Ok(())
    }
}
