use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::divergence::{divergences_traced, DivergenceInputs};
use super::loss::ContrastiveLoss;
use crate::bank::{init_bank, save_bank, DirectionBank};
use crate::data::LatentDataset;
use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::manifest::{ArtifactRecord, RunManifest};
use crate::nn::{clip_global_norm, AdamW, AdamWConfig};
use crate::schedule::NoiseSchedule;
use crate::seed::{self, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSampling {
    /// One `t` per step, uniform over `[1, T]`.
    #[default]
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Training images drawn from the dataset.
    pub n_images: usize,
    /// Directions in the bank.
    pub directions: usize,
    /// Images per step.
    pub subset_images: usize,
    /// Directions per step; capped at `directions`.
    pub subset_dirs: usize,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub steps: usize,
    pub seed: u64,
    pub t_sampling: TimestepSampling,
    /// Images per forward pass when evaluating divergences.
    pub micro_batch: usize,
    /// Std of the initial offsets from the null embedding.
    pub init_scale: f64,
    pub include_positives_in_denominator: bool,
    /// Write a bank checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            n_images: 100,
            directions: 100,
            subset_images: 6,
            subset_dirs: 20,
            tau: 0.5,
            lr: 1e-3,
            weight_decay: 0.01,
            grad_clip: 1.0,
            steps: 3000,
            seed: 0,
            t_sampling: TimestepSampling::Uniform,
            micro_batch: 6,
            init_scale: 0.01,
            include_positives_in_denominator: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.subset_images < 2 {
            return bad("subset_images must be at least 2".into());
        }
        if self.subset_dirs < 2 || self.directions < 2 {
            return bad("subset_dirs and directions must be at least 2".into());
        }
        if self.subset_images > self.n_images {
            return bad(format!(
                "subset_images {} exceeds n_images {}",
                self.subset_images, self.n_images
            ));
        }
        if !(self.lr > 0.0) || !(self.init_scale > 0.0) || !(self.grad_clip > 0.0) {
            return bad("lr, init_scale and grad_clip must be positive".into());
        }
        if self.weight_decay < 0.0 || self.micro_batch == 0 {
            return bad("weight_decay must be >= 0 and micro_batch >= 1".into());
        }
        Ok(())
    }

    pub fn loss(&self) -> Result<ContrastiveLoss> {
        let mut l = ContrastiveLoss::new(self.tau)?;
        l.include_positives_in_denominator = self.include_positives_in_denominator;
        Ok(l)
    }

    pub fn effective_subset_dirs(&self) -> usize {
        self.subset_dirs.min(self.directions)
    }
}

/// What one optimizer step saw and produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub loss: f64,
    pub t: usize,
    pub image_indices: Vec<usize>,
    pub dir_indices: Vec<usize>,
    pub grad_norm: f64,
}

/// Optimizes a direction bank against a frozen denoiser. The model is only
/// ever borrowed immutably.
pub struct ContrastiveTrainer<'m> {
    model: &'m dyn NoisePredictor,
    schedule: &'m NoiseSchedule,
    pool: Array2<f64>,
    config: TrainerConfig,
    loss: ContrastiveLoss,
    bank: DirectionBank,
    opt: AdamW,
    rng: Rng,
}

impl<'m> ContrastiveTrainer<'m> {
    /// `pool` holds the clean training images, one per row.
    pub fn new(
        model: &'m dyn NoisePredictor,
        schedule: &'m NoiseSchedule,
        pool: Array2<f64>,
        bank: DirectionBank,
        config: TrainerConfig,
    ) -> Result<Self> {
        config.validate()?;
        if pool.ncols() != model.latent_shape().numel() {
            return Err(Error::invalid("image pool does not match the model's latent shape"));
        }
        if pool.nrows() < config.subset_images {
            return Err(Error::invalid(format!(
                "pool of {} images is smaller than subset_images {}",
                pool.nrows(),
                config.subset_images
            )));
        }
        if bank.cond_dim() != model.cond_dim() || bank.len() < 2 {
            return Err(Error::invalid("bank must have >= 2 rows of the model's condition size"));
        }
        let opt = AdamW::new(
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..AdamWConfig::with_lr(config.lr)
            },
            bank.embeddings().len(),
        );
        Ok(Self {
            model,
            schedule,
            pool,
            loss: config.loss()?,
            rng: seed::stream(config.seed, "trainer/steps"),
            config,
            bank,
            opt,
        })
    }

    pub fn bank(&self) -> &DirectionBank {
        &self.bank
    }

    pub fn into_bank(self) -> DirectionBank {
        self.bank
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        if self.bank.is_frozen() {
            return Err(Error::contract("cannot train a frozen bank"));
        }
        let n_sub = self.config.subset_images;
        let k_sub = self.config.effective_subset_dirs().min(self.bank.len());
        let mut image_indices =
            rand::seq::index::sample(&mut self.rng, self.pool.nrows(), n_sub).into_vec();
        image_indices.sort_unstable();
        let dir_indices = self.bank.sample_subset(k_sub, &mut self.rng)?;
        let t = match self.config.t_sampling {
            TimestepSampling::Uniform => self.rng.random_range(1..=self.schedule.num_steps()),
        };
        let eps = seed::gaussian_matrix(&mut self.rng, n_sub, self.pool.ncols());
        let images = self.pool.select(Axis(0), &image_indices);

        let inputs = DivergenceInputs {
            model: self.model,
            schedule: self.schedule,
            images: images.view(),
            t,
            bank: &self.bank,
            dir_indices: &dir_indices,
            eps: eps.view(),
            micro_batch: self.config.micro_batch,
        };
        let traced = divergences_traced(&inputs, true)?;
        let (loss, g_div) = self.loss.mean_loss_and_grad(traced.values.view())?;
        if !loss.is_finite() || g_div.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite contrastive loss at t = {t}")));
        }
        let g_rows = traced.embedding_grad(&g_div);

        let mut grads = Array2::<f64>::zeros(self.bank.embeddings().dim());
        for (r, &k) in dir_indices.iter().enumerate() {
            let mut dst = grads.row_mut(k);
            dst += &g_rows.row(r);
        }
        let flat_g = grads.as_slice_mut().expect("contiguous");
        let grad_norm = clip_global_norm(flat_g, self.config.grad_clip);
        let mut params = self.bank.embeddings().clone();
        self.opt
            .update(params.as_slice_mut().expect("contiguous"), flat_g);
        self.bank.set_embeddings(params)?;

        Ok(StepRecord {
            loss,
            t,
            image_indices,
            dir_indices,
            grad_norm,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct DiscoverOptions {
    /// Recorded in the manifest and the bank; defaults to the hash of the
    /// trainer config.
    pub config_hash: Option<String>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct Discovery {
    pub bank: DirectionBank,
    pub manifest: RunManifest,
    pub pool_indices: Vec<usize>,
}

/// Seeded subset of `n` dataset rows, in dataset order.
pub fn training_pool(dataset: &LatentDataset, n: usize, seed_: u64) -> Result<Vec<usize>> {
    if dataset.len() < n {
        return Err(Error::invalid(format!(
            "dataset has {} images, n_images is {n}",
            dataset.len()
        )));
    }
    let mut rng = seed::stream(seed_, "trainer/pool");
    let mut idx = rand::seq::index::sample(&mut rng, dataset.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Initializes a bank near the null condition, runs `config.steps` training
/// steps and returns the frozen bank with its run manifest.
pub fn discover(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    dataset: &LatentDataset,
    config: &TrainerConfig,
    options: &DiscoverOptions,
) -> Result<Discovery> {
    let started = Instant::now();
    config.validate()?;
    let pool_indices = training_pool(dataset, config.n_images, config.seed)?;
    let pool = dataset.x.select(Axis(0), &pool_indices);
    let null = model.null_embedding();
    let bank = init_bank(
        config.directions,
        model.cond_dim(),
        config.seed,
        null.view(),
        config.init_scale,
    )?;
    let config_hash = options
        .config_hash
        .clone()
        .unwrap_or_else(|| crate::config::canonical_hash(config));
    let mut manifest = RunManifest::new("discover", config_hash.clone());
    manifest.record_seed("trainer", config.seed)?;
    manifest.add_note("denoiser_checksum", model.param_checksum())?;
    manifest.add_note("schedule", schedule.id())?;

    let mut trainer = ContrastiveTrainer::new(model, schedule, pool, bank, config.clone())?;
    for step in 1..=config.steps {
        let rec = trainer.train_step()?;
        manifest.push_loss(rec.loss)?;
        if step % 100 == 0 {
            log::debug!("discover step {step}: loss {:.5}", rec.loss);
        }
        if let (Some(dir), true) = (
            &options.checkpoint_dir,
            config.checkpoint_every > 0 && step % config.checkpoint_every == 0,
        ) {
            std::fs::create_dir_all(dir)?;
            let name = format!("bank-step{step:06}.bin");
            let path = dir.join(&name);
            save_bank(trainer.bank(), &path)?;
            let bytes = std::fs::read(&path)?;
            manifest.add_checkpoint(step, ArtifactRecord::from_bytes(name, &bytes))?;
        }
    }
    let mut bank = trainer.into_bank();
    bank.set_config_hash(config_hash);
    bank.freeze();
    manifest.add_artifact("bank", ArtifactRecord::from_bytes("bank.bin", &bank.to_bytes()))?;
    manifest.finalize(started.elapsed().as_secs_f64())?;
    Ok(Discovery {
        bank,
        manifest,
        pool_indices,
    })
}
