use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::bank::DirectionBank;
use crate::contrastive::compute_divergences;
use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Per direction: mean cosine between its divergences on different images.
    pub self_consistency: Vec<f64>,
    /// `[k, l]`: mean cosine between directions `k` and `l` on the same image.
    pub cross: Array2<f64>,
    /// `[k, l]`: |cosine| between the image-averaged divergences.
    pub cross_of_means: Array2<f64>,
    pub mean_self_consistency: f64,
    /// Mean of `|cross|` over `k != l`.
    pub mean_cross: f64,
    /// Mean of `cross_of_means` over `k != l`.
    pub mean_cross_of_means: f64,
    pub threshold: f64,
    /// Pairs `(k, l, similarity)`, `k < l`, with `cross >= threshold`.
    pub near_duplicates: Vec<(usize, usize, f64)>,
}

fn cos(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Divergences of every direction on `images` at each timestep of `t_grid`
/// (noise drawn from `seed_`), summarized into consistency and overlap.
pub fn diversity_report(
    bank: &DirectionBank,
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    images: &Array2<f64>,
    t_grid: &[usize],
    threshold: f64,
    seed_: u64,
) -> Result<DiversityReport> {
    let k = bank.len();
    let n = images.nrows();
    if n < 2 || t_grid.is_empty() {
        return Err(Error::invalid("diversity needs >= 2 images and >= 1 timestep"));
    }
    let dirs: Vec<usize> = (0..k).collect();
    let ids: Vec<usize> = (0..n).collect();
    let mut rng = seed::stream(seed_, "eval/diversity");
    let mut self_c = vec![0.0; k];
    let mut cross = Array2::zeros((k, k));
    let mut cross_means = Array2::zeros((k, k));
    for &t in t_grid {
        let eps = seed::gaussian_matrix(&mut rng, n, images.ncols());
        let divs = compute_divergences(model, schedule, images.view(), &ids, t, bank, &dirs, eps.view())?;
        let v = &divs.values;
        for a in 0..k {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        s += cos(v.slice(ndarray::s![i, a, ..]), v.slice(ndarray::s![j, a, ..]));
                    }
                }
            }
            self_c[a] += s / (n * (n - 1)) as f64;
            for b in 0..k {
                let c: f64 = (0..n)
                    .map(|i| cos(v.slice(ndarray::s![i, a, ..]), v.slice(ndarray::s![i, b, ..])))
                    .sum();
                cross[[a, b]] += c / n as f64;
            }
        }
        let means = v.mean_axis(Axis(0)).expect("non-empty");
        for a in 0..k {
            for b in 0..k {
                cross_means[[a, b]] += cos(means.row(a), means.row(b)).abs();
            }
        }
    }
    let nt = t_grid.len() as f64;
    self_c.iter_mut().for_each(|v| *v /= nt);
    cross /= nt;
    cross_means /= nt;

    let off = |m: &Array2<f64>, abs: bool| {
        if k < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    s += if abs { m[[a, b]].abs() } else { m[[a, b]] };
                }
            }
        }
        s / (k * (k - 1)) as f64
    };
    let mut near_duplicates = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            if cross[[a, b]] >= threshold {
                near_duplicates.push((a, b, cross[[a, b]]));
            }
        }
    }
    Ok(DiversityReport {
        mean_self_consistency: self_c.iter().sum::<f64>() / k as f64,
        self_consistency: self_c,
        mean_cross: off(&cross, true),
        mean_cross_of_means: off(&cross_means, false),
        cross,
        cross_of_means: cross_means,
        threshold,
        near_duplicates,
    })
}
