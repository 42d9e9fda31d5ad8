use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::bank::DirectionBank;
use crate::denoiser::{CondBackward, NoisePredictor};
use crate::error::{Error, Result};
use crate::schedule::{forward_noise_with, NoiseSchedule};

/// Per-image, per-direction change of the noise prediction caused by a
/// direction's condition, flattened over the latent.
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceSet {
    /// `[images, directions, numel]`
    pub values: Array3<f64>,
    pub t: usize,
    pub image_indices: Vec<usize>,
    pub dir_indices: Vec<usize>,
}

pub(crate) struct DivergenceInputs<'a> {
    pub model: &'a dyn NoisePredictor,
    pub schedule: &'a NoiseSchedule,
    pub images: ArrayView2<'a, f64>,
    pub t: usize,
    pub bank: &'a DirectionBank,
    pub dir_indices: &'a [usize],
    pub eps: ArrayView2<'a, f64>,
    pub micro_batch: usize,
}

/// Divergences plus, per micro-batch, the pull-back from divergence gradients
/// to direction-conditioned rows.
pub(crate) struct TracedDivergences<'a> {
    pub values: Array3<f64>,
    chunks: Vec<(std::ops::Range<usize>, Box<dyn CondBackward + 'a>)>,
    k: usize,
}

impl TracedDivergences<'_> {
    /// Gradient on the embeddings of `dir_indices`, as `[directions, cond_dim]`.
    pub fn embedding_grad(self, g_values: &Array3<f64>) -> Array2<f64> {
        let k = self.k;
        let d = g_values.dim().2;
        let mut out: Option<Array2<f64>> = None;
        for (range, back) in self.chunks {
            let rows = range.len() * k;
            let upstream = g_values
                .slice(s![range.clone(), .., ..])
                .to_owned()
                .into_shape_with_order((rows, d))
                .expect("contiguous");
            let g_cond = back.cond_grad(&upstream);
            let acc = out.get_or_insert_with(|| Array2::zeros((k, g_cond.ncols())));
            for (r, row) in g_cond.axis_iter(Axis(0)).enumerate() {
                let mut dst = acc.row_mut(r % k);
                dst += &row;
            }
        }
        out.expect("at least one image")
    }
}

fn validate(inp: &DivergenceInputs) -> Result<()> {
    let numel = inp.model.latent_shape().numel();
    if inp.images.ncols() != numel || inp.eps.dim() != inp.images.dim() {
        return Err(Error::invalid(format!(
            "images {:?} and noise {:?} must both be [n, {numel}]",
            inp.images.dim(),
            inp.eps.dim()
        )));
    }
    if inp.images.nrows() == 0 || inp.dir_indices.is_empty() {
        return Err(Error::invalid("divergences need at least one image and one direction"));
    }
    if inp.bank.cond_dim() != inp.model.cond_dim() {
        return Err(Error::invalid("bank and model condition sizes differ"));
    }
    if inp.t == 0 || inp.t > inp.schedule.num_steps() {
        return Err(Error::invalid(format!("timestep {} outside [1, T]", inp.t)));
    }
    for &k in inp.dir_indices {
        inp.bank.row(k)?;
    }
    Ok(())
}

pub(crate) fn divergences_traced<'a>(
    inp: &DivergenceInputs<'a>,
    traced: bool,
) -> Result<TracedDivergences<'a>> {
    validate(inp)?;
    let n = inp.images.nrows();
    let k = inp.dir_indices.len();
    let numel = inp.images.ncols();
    let xt = forward_noise_with(
        &inp.images.to_owned(),
        &inp.eps.to_owned(),
        inp.schedule.alpha_bar(inp.t),
    );
    let null = inp.model.null_embedding();
    let dirs: Vec<_> = inp
        .dir_indices
        .iter()
        .map(|&i| inp.bank.row(i).expect("validated"))
        .collect();

    let mut values = Array3::zeros((n, k, numel));
    let mut chunks = Vec::new();
    let mb = inp.micro_batch.max(1);
    let mut start = 0;
    while start < n {
        let end = (start + mb).min(n);
        let m = end - start;
        let x_chunk = xt.slice(s![start..end, ..]);
        let ts_null = vec![inp.t; m];
        let null_cond = crate::denoiser::broadcast_rows(null.view(), m);
        let eps_null = inp.model.predict(&x_chunk.to_owned(), &ts_null, &null_cond);

        // Row a * k + i pairs image a with direction i.
        let mut x_rep = Array2::zeros((m * k, numel));
        let mut cond = Array2::zeros((m * k, inp.model.cond_dim()));
        for a in 0..m {
            for (i, d) in dirs.iter().enumerate() {
                x_rep.row_mut(a * k + i).assign(&x_chunk.row(a));
                cond.row_mut(a * k + i).assign(d);
            }
        }
        let ts = vec![inp.t; m * k];
        let eps_dir = if traced {
            let (out, back) = inp.model.predict_traced(&x_rep, &ts, &cond);
            chunks.push((start..end, back));
            out
        } else {
            inp.model.predict(&x_rep, &ts, &cond)
        };
        for a in 0..m {
            for i in 0..k {
                let mut dst = values.slice_mut(s![start + a, i, ..]);
                dst.assign(&eps_dir.row(a * k + i));
                dst -= &eps_null.row(a);
            }
        }
        start = end;
    }
    Ok(TracedDivergences { values, chunks, k })
}

/// `eps(x_t^n, d_k) - eps(x_t^n, null)` for every image `n` and direction `k`,
/// where `x_t^n` noises image `n` with row `n` of `eps` (shared across
/// directions).
#[allow(clippy::too_many_arguments)]
pub fn compute_divergences(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    images: ArrayView2<f64>,
    image_indices: &[usize],
    t: usize,
    bank: &DirectionBank,
    dir_indices: &[usize],
    eps: ArrayView2<f64>,
) -> Result<DivergenceSet> {
    if image_indices.len() != images.nrows() {
        return Err(Error::invalid("one index per image is required"));
    }
    let inp = DivergenceInputs {
        model,
        schedule,
        images,
        t,
        bank,
        dir_indices,
        eps,
        micro_batch: images.nrows(),
    };
    let traced = divergences_traced(&inp, false)?;
    Ok(DivergenceSet {
        values: traced.values,
        t,
        image_indices: image_indices.to_vec(),
        dir_indices: dir_indices.to_vec(),
    })
}
