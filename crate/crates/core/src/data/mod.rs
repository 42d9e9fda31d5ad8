//! Datasets: folder ingestion, the synthetic factor generator, and the
//! lossless raster codec used for exchanging latents as images.

mod folder;
mod raster;
mod synthetic;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{LatentShape, LatentState};

pub use folder::{load_image_folder, FolderOptions};
pub use raster::{area_resize, decode_latent, encode_latent, image_to_latent};
pub use synthetic::{factor_correlations, gen_synthetic_factors, Factor, FactorSpec, RenderRule};

/// Ground-truth generative factors of a synthetic dataset. Used to train
/// probes and (optionally) label-conditioned denoisers; never seen by
/// direction discovery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorLabels {
    pub names: Vec<String>,
    /// Number of levels per factor.
    pub levels: Vec<usize>,
    /// `values[sample][factor]`
    pub values: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentDataset {
    /// `[samples, numel]`, intensities in `[-1, 1]`.
    pub x: Array2<f64>,
    pub shape: LatentShape,
    pub labels: Option<FactorLabels>,
    /// Stable per-sample identifiers (file names or generated ids).
    pub ids: Vec<String>,
}

impl LatentDataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_clean_state(&self) -> LatentState {
        LatentState {
            x: self.x.clone(),
            shape: self.shape,
            t: 0,
        }
    }

    /// Rows `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<LatentDataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!(
                "sample {bad} out of range for {} samples",
                self.len()
            )));
        }
        Ok(LatentDataset {
            x: self.x.select(Axis(0), indices),
            shape: self.shape,
            labels: self.labels.as_ref().map(|l| FactorLabels {
                names: l.names.clone(),
                levels: l.levels.clone(),
                values: indices.iter().map(|&i| l.values[i].clone()).collect(),
            }),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        })
    }

    /// Copy without ground-truth labels, as handed to discovery.
    pub fn unlabeled(&self) -> LatentDataset {
        LatentDataset {
            labels: None,
            ..self.clone()
        }
    }
}
