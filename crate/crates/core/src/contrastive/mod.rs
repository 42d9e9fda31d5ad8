//! The contrastive objective over noise-prediction divergences and the loop
//! that optimizes a direction bank against a frozen denoiser.

mod divergence;
mod loss;
mod trainer;

pub use divergence::{compute_divergences, DivergenceSet};
pub use loss::{cosine_sim, ContrastiveLoss, NORM_GUARD};
pub use trainer::{
    discover, training_pool, ContrastiveTrainer, DiscoverOptions, Discovery, StepRecord,
    TimestepSampling, TrainerConfig,
};

use crate::error::Result;

/// Loss with slot `j` as the positive direction, using exact cosine
/// similarities. The trainer uses the guarded form instead.
pub fn contrastive_loss(divs: &DivergenceSet, j: usize, tau: f64) -> Result<f64> {
    ContrastiveLoss::exact(tau)?.slot_loss(divs.values.view(), j)
}

/// Mean contrastive loss over the directions `dir_indices` and its gradient
/// with respect to their embeddings, as `[dir_indices.len(), cond_dim]`.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_embedding_grad(
    model: &dyn crate::denoiser::NoisePredictor,
    schedule: &crate::schedule::NoiseSchedule,
    images: ndarray::ArrayView2<f64>,
    t: usize,
    bank: &crate::bank::DirectionBank,
    dir_indices: &[usize],
    eps: ndarray::ArrayView2<f64>,
    loss: &ContrastiveLoss,
) -> Result<(f64, ndarray::Array2<f64>)> {
    let inputs = divergence::DivergenceInputs {
        model,
        schedule,
        images,
        t,
        bank,
        dir_indices,
        eps,
        micro_batch: images.nrows(),
    };
    let traced = divergence::divergences_traced(&inputs, true)?;
    let (value, g) = loss.mean_loss_and_grad(traced.values.view())?;
    Ok((value, traced.embedding_grad(&g)))
}
