use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{FactorLabels, LatentDataset};
use crate::error::{Error, Result};
use crate::schedule::LatentShape;
use crate::seed;

/// How a factor's value is drawn into the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderRule {
    /// Offset added to every pixel.
    Brightness,
    /// Horizontal blob centre, in pixels.
    BlobX,
    /// Vertical blob centre, in pixels.
    BlobY,
    /// Gaussian blob radius, in pixels.
    BlobSize,
    /// Peak blob amplitude.
    BlobAmplitude,
    /// Moves intensity from the last channel into the first; needs >= 2 channels.
    Tint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Factor {
    pub name: String,
    pub rule: RenderRule,
    pub min: f64,
    pub max: f64,
    pub levels: usize,
}

impl Factor {
    fn value(&self, level: usize) -> f64 {
        self.min + (self.max - self.min) * level as f64 / (self.levels - 1) as f64
    }

    fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.levels - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorSpec {
    pub factors: Vec<Factor>,
    pub samples: usize,
    pub seed: u64,
    /// Uniform within-level jitter, as a fraction of the level spacing.
    pub jitter: f64,
    pub background: f64,
    pub blob_amplitude: f64,
    pub blob_size: f64,
}

impl Default for FactorSpec {
    /// Two binary factors on an 8x8 canvas: global brightness and the
    /// horizontal position of a blob.
    fn default() -> Self {
        Self {
            factors: vec![
                Factor {
                    name: "brightness".into(),
                    rule: RenderRule::Brightness,
                    min: -0.3,
                    max: 0.3,
                    levels: 2,
                },
                Factor {
                    name: "position".into(),
                    rule: RenderRule::BlobX,
                    min: 2.0,
                    max: 5.0,
                    levels: 2,
                },
            ],
            samples: 512,
            seed: 0,
            jitter: 0.1,
            background: -0.6,
            blob_amplitude: 1.0,
            blob_size: 1.1,
        }
    }
}

impl FactorSpec {
    pub fn validate(&self, shape: LatentShape) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::invalid("synthetic dataset needs at least one factor"));
        }
        if self.samples == 0 {
            return Err(Error::invalid("synthetic dataset needs at least one sample"));
        }
        for f in &self.factors {
            if f.levels < 2 || !(f.max > f.min) || !f.min.is_finite() || !f.max.is_finite() {
                return Err(Error::invalid(format!(
                    "factor `{}` has a degenerate range [{}, {}] with {} levels",
                    f.name, f.min, f.max, f.levels
                )));
            }
            if f.rule == RenderRule::Tint && shape.channels < 2 {
                return Err(Error::invalid(format!(
                    "factor `{}` tints channels but the latent has one channel",
                    f.name
                )));
            }
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::invalid("jitter must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

struct Scene {
    brightness: f64,
    cx: f64,
    cy: f64,
    size: f64,
    amplitude: f64,
    tint: f64,
}

fn render(scene: &Scene, shape: LatentShape, background: f64, out: &mut [f64]) {
    let hw = shape.height * shape.width;
    for c in 0..shape.channels {
        let tint = if shape.channels > 1 {
            if c == 0 {
                scene.tint
            } else if c == shape.channels - 1 {
                -scene.tint
            } else {
                0.0
            }
        } else {
            0.0
        };
        for y in 0..shape.height {
            for x in 0..shape.width {
                let d2 = (x as f64 - scene.cx).powi(2) + (y as f64 - scene.cy).powi(2);
                let blob = scene.amplitude * (-d2 / (2.0 * scene.size * scene.size)).exp();
                let v = background + scene.brightness + blob * (1.0 + tint);
                out[c * hw + y * shape.width + x] = v.clamp(-1.0, 1.0);
            }
        }
    }
}

/// Renders samples whose factors are drawn independently and uniformly over
/// their levels, each jittered within its level.
pub fn gen_synthetic_factors(spec: &FactorSpec, shape: LatentShape) -> Result<LatentDataset> {
    spec.validate(shape)?;
    let mut rng = seed::stream(spec.seed, "data/synthetic");
    let mut x = Array2::zeros((spec.samples, shape.numel()));
    let mut values = Vec::with_capacity(spec.samples);
    for mut row in x.rows_mut() {
        let mut scene = Scene {
            brightness: 0.0,
            cx: (shape.width as f64 - 1.0) / 2.0,
            cy: (shape.height as f64 - 1.0) / 2.0,
            size: spec.blob_size,
            amplitude: spec.blob_amplitude,
            tint: 0.0,
        };
        let mut levels = Vec::with_capacity(spec.factors.len());
        for f in &spec.factors {
            let level = rng.random_range(0..f.levels);
            let j = rng.random_range(-spec.jitter..=spec.jitter) * f.spacing();
            let v = f.value(level) + j;
            match f.rule {
                RenderRule::Brightness => scene.brightness += v,
                RenderRule::BlobX => scene.cx = v,
                RenderRule::BlobY => scene.cy = v,
                RenderRule::BlobSize => scene.size = v.max(0.1),
                RenderRule::BlobAmplitude => scene.amplitude = v,
                RenderRule::Tint => scene.tint = v,
            }
            levels.push(level);
        }
        render(&scene, shape, spec.background, row.as_slice_mut().expect("row"));
        values.push(levels);
    }
    Ok(LatentDataset {
        x,
        shape,
        labels: Some(FactorLabels {
            names: spec.factors.iter().map(|f| f.name.clone()).collect(),
            levels: spec.factors.iter().map(|f| f.levels).collect(),
            values,
        }),
        ids: (0..spec.samples).map(|i| format!("synthetic-{i:05}")).collect(),
    })
}

/// Pearson correlation between every pair of factor level indices.
pub fn factor_correlations(labels: &FactorLabels) -> Array2<f64> {
    let f = labels.names.len();
    let n = labels.values.len() as f64;
    let cols: Vec<Vec<f64>> = (0..f)
        .map(|j| labels.values.iter().map(|v| v[j] as f64).collect())
        .collect();
    let mean: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let mut out = Array2::zeros((f, f));
    for a in 0..f {
        for b in 0..f {
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for (xa, xb) in cols[a].iter().zip(&cols[b]) {
                let da = xa - mean[a];
                let db = xb - mean[b];
                sab += da * db;
                saa += da * da;
                sbb += db * db;
            }
            out[[a, b]] = sab / (saa * sbb).sqrt();
        }
    }
    out
}
