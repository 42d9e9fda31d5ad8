//! Measuring edits: probe re-scoring, perceptual distances and diagnostics of
//! how distinct the discovered directions are.

mod diversity;
mod probe;
mod rescore;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

pub use diversity::{diversity_report, DiversityReport};
pub use probe::{train_probe, AttributeProbe, MlpProbe, ProbeConfig, ProbeReport};
pub use rescore::{checked_classify, rescore, rescore_sets, EvalSet, RescoreMatrix, RowAnnotation};

fn feature_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    if a == b {
        return 0.0;
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - a.dot(&b) / (na * nb)).clamp(0.0, 2.0)
}

/// `1 - cos(features(before), features(after))`, in `[0, 2]`.
pub fn perceptual_distance(
    before: ArrayView1<f64>,
    after: ArrayView1<f64>,
    probe: &dyn AttributeProbe,
) -> Result<f64> {
    let numel = probe.latent_shape().numel();
    if before.len() != numel || after.len() != numel {
        return Err(Error::invalid(format!(
            "images of {} and {} entries for a probe over {numel}",
            before.len(),
            after.len()
        )));
    }
    let x = ndarray::stack(Axis(0), &[before, after]).expect("equal lengths");
    let f = probe.features(&x);
    Ok(feature_distance(f.row(0), f.row(1)))
}

/// Row-wise [`perceptual_distance`].
pub fn perceptual_distances(
    before: &Array2<f64>,
    after: &Array2<f64>,
    probe: &dyn AttributeProbe,
) -> Result<Array1<f64>> {
    if before.dim() != after.dim() || before.ncols() != probe.latent_shape().numel() {
        return Err(Error::invalid(format!(
            "image batches {:?} and {:?} do not match the probe",
            before.dim(),
            after.dim()
        )));
    }
    let fa = probe.features(before);
    let fb = probe.features(after);
    Ok(fa
        .axis_iter(Axis(0))
        .zip(fb.axis_iter(Axis(0)))
        .map(|(a, b)| feature_distance(a, b))
        .collect())
}

/// True when `values` never moves against `increasing` by more than `tol`.
pub fn is_monotone(values: &[f64], increasing: bool, tol: f64) -> bool {
    values.windows(2).all(|w| {
        if increasing {
            w[1] >= w[0] - tol
        } else {
            w[1] <= w[0] + tol
        }
    })
}
