use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Norm guard used inside the trainer, where near-null directions produce
/// vanishing divergences.
pub const NORM_GUARD: f64 = 1e-8;

/// `u . v / (|u| |v|)`. Zero-norm inputs are rejected.
pub fn cosine_sim(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!(
            "cosine of vectors with {} and {} entries",
            u.len(),
            v.len()
        )));
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateInput("cosine of a zero-norm vector".into()));
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveLoss {
    pub tau: f64,
    pub norm_guard: f64,
    /// Adds the positive terms to the denominator as well (the normalized
    /// temperature-scaled form). Off by default.
    pub include_positives_in_denominator: bool,
}

impl ContrastiveLoss {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid(format!("tau must be positive, got {tau}")));
        }
        Ok(Self {
            tau,
            norm_guard: NORM_GUARD,
            include_positives_in_denominator: false,
        })
    }

    /// Plain cosine similarities, no guard. Zero-norm divergences are rejected.
    pub fn exact(tau: f64) -> Result<Self> {
        Ok(Self {
            norm_guard: 0.0,
            ..Self::new(tau)?
        })
    }

    /// Loss for one positive slot given its similarity lists: positives are
    /// `sim(D_j^a, D_j^b)` over ordered pairs `a != b`, negatives are
    /// `sim(D_j^a, D_i^a)` over images `a` and slots `i != j`.
    pub fn from_similarities(&self, positives: &[f64], negatives: &[f64]) -> f64 {
        let t = self.tau;
        let num = log_sum_exp(positives.iter().map(|s| s / t));
        let den = if self.include_positives_in_denominator {
            log_sum_exp(positives.iter().chain(negatives).map(|s| s / t))
        } else {
            log_sum_exp(negatives.iter().map(|s| s / t))
        };
        den - num
    }

    fn check(divs: ArrayView3<f64>) -> Result<()> {
        let (n, k, _) = divs.dim();
        if n < 2 || k < 2 {
            return Err(Error::invalid(format!(
                "contrastive loss needs at least 2 images and 2 directions, got {n} x {k}"
            )));
        }
        Ok(())
    }

    /// Row-normalized divergences `[n * k, d]` (row `a * k + i`) and the norms.
    fn normalize(&self, divs: ArrayView3<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let (n, k, d) = divs.dim();
        let mut u = divs
            .to_owned()
            .into_shape_with_order((n * k, d))
            .expect("contiguous");
        let norms: Array1<f64> = u.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if self.norm_guard == 0.0 && norms.iter().any(|&nr| nr == 0.0) {
            return Err(Error::DegenerateInput("zero-norm divergence without a norm guard".into()));
        }
        for (mut row, &nr) in u.axis_iter_mut(Axis(0)).zip(&norms) {
            row /= nr + self.norm_guard;
        }
        Ok((u, norms))
    }

    fn slot_terms(gram: &Array2<f64>, n: usize, k: usize, j: usize) -> (Vec<f64>, Vec<f64>) {
        let mut pos = Vec::with_capacity(n * (n - 1));
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    pos.push(gram[[a * k + j, b * k + j]]);
                }
            }
        }
        let mut neg = Vec::with_capacity(n * (k - 1));
        for a in 0..n {
            for i in 0..k {
                if i != j {
                    neg.push(gram[[a * k + j, a * k + i]]);
                }
            }
        }
        (pos, neg)
    }

    /// Loss with `j` as the positive slot. `divs` is `[images, directions, d]`.
    pub fn slot_loss(&self, divs: ArrayView3<f64>, j: usize) -> Result<f64> {
        Self::check(divs)?;
        let (n, k, _) = divs.dim();
        if j >= k {
            return Err(Error::invalid(format!("slot {j} out of range for {k} directions")));
        }
        let (u, _) = self.normalize(divs)?;
        let gram = u.dot(&u.t());
        let (pos, neg) = Self::slot_terms(&gram, n, k, j);
        Ok(self.from_similarities(&pos, &neg))
    }

    /// Mean of the slot losses over every slot, and its gradient with respect
    /// to the raw divergences.
    pub fn mean_loss_and_grad(&self, divs: ArrayView3<f64>) -> Result<(f64, Array3<f64>)> {
        Self::check(divs)?;
        let (n, k, d) = divs.dim();
        let (u, norms) = self.normalize(divs)?;
        let gram = u.dot(&u.t());
        let t = self.tau;
        let scale = 1.0 / k as f64;

        // Gradient of the loss with respect to gram entries.
        let mut g_gram = Array2::<f64>::zeros((n * k, n * k));
        let mut total = 0.0;
        for j in 0..k {
            let (pos, neg) = Self::slot_terms(&gram, n, k, j);
            total += self.from_similarities(&pos, &neg);

            let num_lse = log_sum_exp(pos.iter().map(|s| s / t));
            let den_lse = if self.include_positives_in_denominator {
                log_sum_exp(pos.iter().chain(&neg).map(|s| s / t))
            } else {
                log_sum_exp(neg.iter().map(|s| s / t))
            };
            let mut idx = 0;
            for a in 0..n {
                for b in 0..n {
                    if a != b {
                        let s = pos[idx] / t;
                        let mut g = -(s - num_lse).exp() / t;
                        if self.include_positives_in_denominator {
                            g += (s - den_lse).exp() / t;
                        }
                        g_gram[[a * k + j, b * k + j]] += g * scale;
                        idx += 1;
                    }
                }
            }
            let mut idx = 0;
            for a in 0..n {
                for i in 0..k {
                    if i != j {
                        let g = (neg[idx] / t - den_lse).exp() / t;
                        g_gram[[a * k + j, a * k + i]] += g * scale;
                        idx += 1;
                    }
                }
            }
        }

        // gram = U U^T  =>  dU = (G + G^T) U
        let sym = &g_gram + &g_gram.t();
        let g_u = sym.dot(&u);

        // u = x / (|x| + guard)
        let x = divs.to_owned().into_shape_with_order((n * k, d)).expect("contiguous");
        let mut g_x = Array2::zeros((n * k, d));
        for r in 0..n * k {
            let nr = norms[r];
            let denom = nr + self.norm_guard;
            let gu = g_u.row(r);
            let mut gx = g_x.row_mut(r);
            gx.assign(&gu);
            gx /= denom;
            if nr > 0.0 {
                let xr = x.row(r);
                let coef = xr.dot(&gu) / (nr * denom * denom);
                gx.scaled_add(-coef, &xr);
            }
        }
        let g = g_x.into_shape_with_order((n, k, d)).expect("contiguous");
        Ok((total * scale, g))
    }
}
