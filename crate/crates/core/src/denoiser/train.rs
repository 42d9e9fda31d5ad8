use ndarray::{Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{DenoiserModel, UNetConfig};
use crate::data::LatentDataset;
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, AdamW, AdamWConfig, ParamVisit};
use crate::schedule::NoiseSchedule;
use crate::seed::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub cond_dim: usize,
    pub arch: UNetConfig,
    /// Train with label conditions (when the dataset has labels) so the
    /// condition space carries meaning and guidance can be exercised.
    pub label_conditioning: bool,
    /// Per-factor probability of dropping a label from the condition.
    pub factor_drop_prob: f64,
    /// Probability of training a row on the null condition outright.
    pub null_prob: f64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 1e-3,
            batch_size: 64,
            weight_decay: 0.01,
            grad_clip: 1.0,
            cond_dim: 4,
            arch: UNetConfig::default(),
            label_conditioning: true,
            factor_drop_prob: 0.3,
            null_prob: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
    /// Loss of the untrained network on a fixed evaluation batch.
    pub initial_eval_loss: f64,
    /// Loss of the trained network on the same batch.
    pub final_eval_loss: f64,
}

struct Batch {
    xt: Array2<f64>,
    eps: Array2<f64>,
    ts: Vec<usize>,
    cond: Array2<f64>,
    labels: Vec<Vec<Option<usize>>>,
}

fn draw_batch(
    data: &LatentDataset,
    schedule: &NoiseSchedule,
    model: &DenoiserModel,
    cfg: &DenoiserTrainConfig,
    size: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    let n = data.len();
    let d = data.shape.numel();
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..n)).collect();
    let ts: Vec<usize> = (0..size)
        .map(|_| rng.random_range(1..=schedule.num_steps()))
        .collect();
    let eps = seed::gaussian_matrix(rng, size, d);
    let mut xt = Array2::zeros((size, d));
    for (r, (&i, &t)) in idx.iter().zip(&ts).enumerate() {
        let ab = schedule.alpha_bar(t);
        let mut row = xt.row_mut(r);
        row.assign(&data.x.row(i));
        row *= ab.sqrt();
        row.scaled_add((1.0 - ab).sqrt(), &eps.row(r));
    }

    let mut cond = Array2::zeros((size, model.net.cond_dim));
    let mut labels = Vec::new();
    if let (Some(vocab), Some(lab), true) = (&model.vocab, &data.labels, cfg.label_conditioning) {
        for (r, &i) in idx.iter().enumerate() {
            let mut row_labels: Vec<Option<usize>> = vec![None; vocab.tables.len()];
            if rng.random::<f64>() >= cfg.null_prob {
                for (f, slot) in row_labels.iter_mut().enumerate() {
                    if rng.random::<f64>() >= cfg.factor_drop_prob {
                        *slot = Some(lab.values[i][f]);
                    }
                }
            }
            cond.row_mut(r).assign(&vocab.condition(&row_labels)?);
            labels.push(row_labels);
        }
    }
    Ok(Batch {
        xt,
        eps,
        ts,
        cond,
        labels,
    })
}

fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = a - b;
    diff.mapv(|v| v * v).mean().unwrap_or(0.0)
}

fn eval_loss(model: &DenoiserModel, batch: &Batch) -> f64 {
    mse(&model.net.forward(&batch.xt, &batch.ts, &batch.cond), &batch.eps)
}

/// Minimizes `E || eps - eps_theta(x_t, t, c) ||^2` with AdamW.
pub fn train_denoiser(
    dataset: &LatentDataset,
    schedule: &NoiseSchedule,
    config: &DenoiserTrainConfig,
    seed_: u64,
) -> Result<(DenoiserModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if config.batch_size == 0 || config.steps == 0 {
        return Err(Error::invalid("steps and batch_size must be positive"));
    }
    let level_counts = dataset
        .labels
        .as_ref()
        .filter(|_| config.label_conditioning)
        .map(|l| l.levels.clone());
    let mut init_rng = seed::stream(seed_, "denoiser/init");
    let mut model = DenoiserModel::new(
        config.arch.clone(),
        dataset.shape,
        config.cond_dim,
        level_counts.as_deref(),
        schedule.id(),
        &mut init_rng,
    );

    let mut eval_rng = seed::stream(seed_, "denoiser/eval");
    let eval_batch = draw_batch(dataset, schedule, &model, config, 256, &mut eval_rng)?;
    let initial_eval_loss = eval_loss(&model, &eval_batch);

    let mut rng = seed::stream(seed_, "denoiser/batches");
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::with_lr(config.lr)
        },
        model.num_params(),
    );
    let mut loss_trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = draw_batch(dataset, schedule, &model, config, config.batch_size, &mut rng)?;
        let (out, trace) = model.net.forward_traced(&batch.xt, &batch.ts, &batch.cond);
        let diff = &out - &batch.eps;
        let loss = diff.mapv(|v| v * v).mean().unwrap_or(0.0);
        if !loss.is_finite() {
            return Err(Error::contract(format!("denoiser loss diverged at step {step}")));
        }
        loss_trace.push(loss);
        let g_out = diff * (2.0 / out.len() as f64);

        let mut grads = model.zeros_like();
        let g_cond = model.net.backward(&trace, &g_out, Some(&mut grads.net));
        if let Some(vg) = grads.vocab.as_mut() {
            for (row_labels, g_row) in batch.labels.iter().zip(g_cond.axis_iter(Axis(0))) {
                for (table, l) in vg.tables.iter_mut().zip(row_labels) {
                    if let Some(l) = l {
                        let mut r = table.row_mut(*l);
                        r += &g_row;
                    }
                }
            }
        }
        let mut flat_grads = grads.flat_params();
        clip_global_norm(&mut flat_grads, config.grad_clip);
        let mut flat = model.flat_params();
        opt.update(&mut flat, &flat_grads);
        model.load_flat(&flat);
        if step % 500 == 0 {
            log::debug!("denoiser step {step}: loss {loss:.5}");
        }
    }
    let final_eval_loss = eval_loss(&model, &eval_batch);
    Ok((
        model,
        TrainReport {
            loss_trace,
            initial_eval_loss,
            final_eval_loss,
        },
    ))
}
