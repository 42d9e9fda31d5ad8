//! Experiment configuration: strict TOML with every default declared here.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::TrainerConfig;
use crate::data::{gen_synthetic_factors, load_image_folder, FactorSpec, FolderOptions, LatentDataset};
use crate::denoiser::{load_model, DenoiserTrainConfig};
use crate::edit::{sample_dataset, TimeWindow};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::schedule::{LatentShape, NoiseSchedule, SamplingGrid, ScheduleParams};

/// SHA-256 of the canonical JSON serialization (fields in declaration order,
/// maps sorted), hex encoded.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(FactorSpec),
    Folder {
        path: PathBuf,
        #[serde(default)]
        options: FolderOptions,
    },
    /// Samples drawn from a trained denoiser.
    Generated { model: PathBuf, count: usize },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(FactorSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditDefaults {
    pub guidance_scale: f64,
    pub fine_window: TimeWindow,
    pub coarse_window: TimeWindow,
    pub scale: f64,
    pub strip_scales: Vec<f64>,
    /// Fixed-point refinements per inversion step.
    pub inversion_refine_iters: usize,
}

impl Default for EditDefaults {
    fn default() -> Self {
        Self {
            guidance_scale: 7.5,
            fine_window: TimeWindow::FINE,
            coarse_window: TimeWindow::COARSE,
            scale: 8.0,
            strip_scales: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            inversion_refine_iters: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalDefaults {
    pub eval_size: usize,
    /// First seed of the evaluation list `eval_seed_start..eval_seed_start + eval_size`.
    pub eval_seed_start: u64,
    pub near_duplicate_threshold: f64,
    pub diversity_timesteps: Vec<usize>,
    pub diversity_images: usize,
    pub probe: ProbeConfig,
    /// Samples in the probe's own training set.
    pub probe_samples: usize,
    /// Within-level jitter of the probe's training set.
    pub probe_jitter: f64,
    /// Render seed of the probe's training set.
    pub probe_data_seed: u64,
}

impl Default for EvalDefaults {
    fn default() -> Self {
        Self {
            eval_size: 64,
            eval_seed_start: 1000,
            near_duplicate_threshold: 0.9,
            diversity_timesteps: vec![200, 500, 800],
            diversity_images: 16,
            probe: ProbeConfig::default(),
            probe_samples: 2048,
            probe_jitter: 0.1,
            probe_data_seed: 7,
        }
    }
}

impl EvalDefaults {
    pub fn eval_seeds(&self) -> Vec<u64> {
        (self.eval_seed_start..self.eval_seed_start + self.eval_size as u64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub domain: String,
    /// Global seed. Every stream in the run derives from it.
    pub seed: u64,
    pub latent_shape: LatentShape,
    pub dataset: DatasetSource,
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserTrainConfig,
    pub trainer: TrainerConfig,
    pub edit: EditDefaults,
    pub eval: EvalDefaults,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            domain: "synthetic".into(),
            seed: 0,
            latent_shape: LatentShape::new(1, 8, 8),
            dataset: DatasetSource::default(),
            schedule: ScheduleParams::default(),
            denoiser: DenoiserTrainConfig::default(),
            trainer: TrainerConfig::default(),
            edit: EditDefaults::default(),
            eval: EvalDefaults::default(),
        }
    }
}

fn config_err(path: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

impl ExperimentConfig {
    /// Semantic checks beyond what the schema enforces.
    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed.
        let mut seeds = vec![
            ("seed", self.seed),
            ("eval.eval_seed_start", self.eval.eval_seed_start.saturating_add(self.eval.eval_size as u64)),
            ("eval.probe_data_seed", self.eval.probe_data_seed),
        ];
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            seeds.push(("dataset.seed", spec.seed));
        }
        for (name, v) in seeds {
            if v > i64::MAX as u64 {
                return Err(config_err(name, format!("{v} does not fit a TOML integer")));
            }
        }
        let t = &self.trainer;
        if !(t.tau > 0.0) || !t.tau.is_finite() {
            return Err(config_err("trainer.tau", format!("must be > 0, got {}", t.tau)));
        }
        if t.seed != self.seed {
            return Err(config_err(
                "trainer.seed",
                format!("must equal the global seed {} (or be omitted)", self.seed),
            ));
        }
        t.validate().map_err(|e| config_err("trainer", e.to_string()))?;
        NoiseSchedule::new(self.schedule.clone())
            .map_err(|e| config_err("schedule", e.to_string()))?;
        if self.latent_shape.numel() == 0 {
            return Err(config_err("latent_shape", "must be non-empty"));
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate(self.latent_shape)
                .map_err(|e| config_err("dataset", e.to_string()))?;
        }
        for (name, w) in [
            ("edit.fine_window", self.edit.fine_window),
            ("edit.coarse_window", self.edit.coarse_window),
        ] {
            w.validate().map_err(|e| config_err(name, e.to_string()))?;
        }
        if self.edit.strip_scales.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(config_err("edit.strip_scales", "must be sorted ascending"));
        }
        if self.eval.eval_size == 0 {
            return Err(config_err("eval.eval_size", "must be positive"));
        }
        if self.denoiser.steps == 0 || self.denoiser.batch_size == 0 {
            return Err(config_err("denoiser", "steps and batch_size must be positive"));
        }
        Ok(())
    }

    /// Materializes the configured dataset. Relative paths resolve against
    /// `base_dir`.
    pub fn load_dataset(&self, base_dir: &Path) -> Result<LatentDataset> {
        match &self.dataset {
            DatasetSource::Synthetic(spec) => gen_synthetic_factors(spec, self.latent_shape),
            DatasetSource::Folder { path, options } => load_image_folder(
                &base_dir.join(path),
                self.latent_shape,
                self.trainer.n_images,
                self.seed,
                options,
            ),
            DatasetSource::Generated { model, count } => {
                let model = load_model(&base_dir.join(model))?;
                let schedule = NoiseSchedule::new(self.schedule.clone())?;
                let grid = SamplingGrid::for_schedule(&schedule)?;
                sample_dataset(&model, &schedule, &grid, *count, self.seed)
            }
        }
    }

    /// Labelled images for fitting the evaluation probe: the synthetic
    /// factors rendered afresh from `eval.probe_data_seed`.
    pub fn probe_dataset(&self) -> Result<LatentDataset> {
        let DatasetSource::Synthetic(spec) = &self.dataset else {
            return Err(Error::invalid("a probe can only be fitted to the synthetic factor dataset"));
        };
        let spec = FactorSpec {
            samples: self.eval.probe_samples,
            jitter: self.eval.probe_jitter,
            seed: self.eval.probe_data_seed,
            ..spec.clone()
        };
        gen_synthetic_factors(&spec, self.latent_shape)
    }

    pub fn hash(&self) -> String {
        canonical_hash(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// Parses a TOML experiment file. Missing keys take their defaults, unknown
/// keys are rejected, and errors carry the dotted path of the offending key.
/// An absent `trainer.seed` inherits the global seed.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut value: toml::Table =
        toml::from_str(text).map_err(|e| config_err("<root>", e.message().to_string()))?;
    let global_seed = value.get("seed").cloned();
    if let Some(seed) = global_seed {
        let trainer = value
            .entry("trainer")
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if let toml::Value::Table(t) = trainer {
            t.entry("seed").or_insert(seed);
        }
    }
    let config: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(value))
        .map_err(|e| {
            let path = e.path().to_string();
            config_err(path, e.into_inner().message().to_string())
        })?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.trainer.tau, 0.5);
        assert_eq!(c.trainer.lr, 1e-3);
        assert_eq!(c.trainer.subset_dirs, 20);
        assert_eq!(c.trainer.subset_images, 6);
        assert_eq!(c.trainer.n_images, 100);
        assert_eq!(c.trainer.directions, 100);
        assert_eq!(c.edit.fine_window, TimeWindow { start: 0.5, end: 0.0 });
        assert_eq!(c.edit.coarse_window, TimeWindow { start: 0.9, end: 0.8 });
    }

    #[test]
    fn errors_name_the_key() {
        match parse_config("[trainer]\ntau = 0.0\n") {
            Err(Error::Config { path, .. }) => assert_eq!(path, "trainer.tau"),
            other => panic!("{other:?}"),
        }
        match parse_config("[trainer]\nbogus = 1\n") {
            Err(Error::Config { path, msg }) => {
                assert!(path.starts_with("trainer"), "{path}");
                assert!(msg.contains("bogus"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        match parse_config("[trainer]\nsteps = \"many\"\n") {
            Err(Error::Config { path, .. }) => assert_eq!(path, "trainer.steps"),
            other => panic!("{other:?}"),
        }
        match parse_config("[dataset]\nkind = \"folder\"\n") {
            Err(Error::Config { path, msg }) => {
                assert!(path.starts_with("dataset"), "{path}");
                assert!(msg.contains("path"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_config("seed = 3\n[trainer]\nseed = 4\n").is_err());
    }

    #[test]
    fn global_seed_flows_into_trainer() {
        let c = parse_config("seed = 7\n").unwrap();
        assert_eq!(c.trainer.seed, 7);
    }

    #[test]
    fn dataset_variants_parse() {
        let c = parse_config("[dataset]\nkind = \"folder\"\npath = \"imgs\"\n").unwrap();
        assert!(matches!(c.dataset, DatasetSource::Folder { .. }));
        let c = parse_config("[dataset]\nkind = \"generated\"\nmodel = \"m.bin\"\ncount = 10\n").unwrap();
        assert!(matches!(c.dataset, DatasetSource::Generated { count: 10, .. }));
        let c = parse_config("[dataset]\nkind = \"synthetic\"\nsamples = 64\n").unwrap();
        match c.dataset {
            DatasetSource::Synthetic(s) => assert_eq!(s.samples, 64),
            _ => panic!(),
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.trainer.steps += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
