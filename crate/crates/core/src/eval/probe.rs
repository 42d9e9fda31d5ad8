use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::LatentDataset;
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, silu, silu_backward, AdamW, AdamWConfig, Linear, ParamVisit};
use crate::schedule::LatentShape;
use crate::seed;

/// Scores images for named attributes. Attributes come in mutually exclusive
/// groups whose probabilities sum to one.
pub trait AttributeProbe: Send + Sync {
    fn id(&self) -> String;
    fn latent_shape(&self) -> LatentShape;
    fn attributes(&self) -> Vec<String>;
    fn groups(&self) -> Vec<Range<usize>>;
    /// `[images, attributes]` probabilities.
    fn classify(&self, x: &Array2<f64>) -> Array2<f64>;
    /// `[images, feature_dim]` embedding used for perceptual distances.
    fn features(&self, x: &Array2<f64>) -> Array2<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub feature_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Std of Gaussian noise added to training inputs.
    pub input_noise: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            feature_dim: 32,
            steps: 1500,
            batch_size: 64,
            lr: 3e-3,
            input_noise: 0.1,
        }
    }
}

/// Two-hidden-layer classifier with one softmax head per factor; the second
/// hidden layer is the feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpProbe {
    shape: LatentShape,
    factor_names: Vec<String>,
    levels: Vec<usize>,
    l1: Linear,
    l2: Linear,
    head: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Held-out accuracy per factor.
    pub accuracy: Vec<f64>,
    pub final_loss: f64,
}

struct ProbeTrace {
    x: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
}

impl MlpProbe {
    fn new(
        shape: LatentShape,
        factor_names: Vec<String>,
        levels: Vec<usize>,
        cfg: &ProbeConfig,
        rng: &mut seed::Rng,
    ) -> Self {
        let outputs = levels.iter().sum();
        Self {
            shape,
            factor_names,
            levels,
            l1: Linear::init(shape.numel(), cfg.hidden, 1.0, rng),
            l2: Linear::init(cfg.hidden, cfg.feature_dim, 1.0, rng),
            head: Linear::init(cfg.feature_dim, outputs, 1.0, rng),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, ProbeTrace) {
        let z1 = self.l1.forward(x);
        let h1 = silu(&z1);
        let z2 = self.l2.forward(&h1);
        let h2 = silu(&z2);
        let logits = self.head.forward(&h2);
        (
            logits,
            ProbeTrace {
                x: x.clone(),
                z1,
                h1,
                z2,
                h2,
            },
        )
    }

    fn group_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.levels
            .iter()
            .map(|&n| {
                let r = start..start + n;
                start += n;
                r
            })
            .collect()
    }

    fn softmax_groups(&self, logits: &Array2<f64>) -> Array2<f64> {
        let mut p = logits.clone();
        for r in self.group_ranges() {
            for mut row in p.slice_mut(s![.., r]).axis_iter_mut(Axis(0)) {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|v| (v - m).exp());
                let z = row.sum();
                row /= z;
            }
        }
        p
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ProbeFile {
            format_version: 1,
            shape: self.shape,
            factor_names: self.factor_names.clone(),
            levels: self.levels.clone(),
            hidden: self.l1.fan_out(),
            feature_dim: self.l2.fan_out(),
            params: self.flat_params(),
            checksum: self.checksum(),
        };
        std::fs::write(path, serde_json::to_vec(&file).expect("probe serializes"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let file: ProbeFile =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        if file.format_version != 1 {
            return Err(Error::format(path, "unsupported probe format version"));
        }
        let cfg = ProbeConfig {
            hidden: file.hidden,
            feature_dim: file.feature_dim,
            ..ProbeConfig::default()
        };
        let mut rng = seed::stream(0, "probe/layout");
        let mut probe = Self::new(file.shape, file.factor_names, file.levels, &cfg, &mut rng);
        if probe.num_params() != file.params.len() {
            return Err(Error::format(path, "probe parameter count mismatch"));
        }
        probe.load_flat(&file.params);
        if probe.checksum() != file.checksum {
            return Err(Error::format(path, "probe checksum mismatch"));
        }
        Ok(probe)
    }
}

#[derive(Serialize, Deserialize)]
struct ProbeFile {
    format_version: u32,
    shape: LatentShape,
    factor_names: Vec<String>,
    levels: Vec<usize>,
    hidden: usize,
    feature_dim: usize,
    params: Vec<f64>,
    checksum: String,
}

impl ParamVisit for MlpProbe {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.l1.visit("l1", f);
        self.l2.visit("l2", f);
        self.head.visit("head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.l1.visit_mut("l1", f);
        self.l2.visit_mut("l2", f);
        self.head.visit_mut("head", f);
    }
}

impl AttributeProbe for MlpProbe {
    fn id(&self) -> String {
        format!("mlp-{}", &self.checksum()[..16])
    }

    fn latent_shape(&self) -> LatentShape {
        self.shape
    }

    fn attributes(&self) -> Vec<String> {
        self.factor_names
            .iter()
            .zip(&self.levels)
            .flat_map(|(name, &n)| (0..n).map(move |l| format!("{name}={l}")))
            .collect()
    }

    fn groups(&self) -> Vec<Range<usize>> {
        self.group_ranges()
    }

    fn classify(&self, x: &Array2<f64>) -> Array2<f64> {
        self.softmax_groups(&self.forward(x).0)
    }

    fn features(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward(x).1.h2
    }
}

/// Fits a probe to a labelled dataset; accuracy is measured on a held-out
/// quarter of it.
pub fn train_probe(
    dataset: &LatentDataset,
    config: &ProbeConfig,
    seed_: u64,
) -> Result<(MlpProbe, ProbeReport)> {
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("probe training needs a labelled dataset"))?;
    if dataset.len() < 8 {
        return Err(Error::invalid("probe training needs at least 8 samples"));
    }
    let mut rng = seed::stream(seed_, "probe/init");
    let mut probe = MlpProbe::new(
        dataset.shape,
        labels.names.clone(),
        labels.levels.clone(),
        config,
        &mut rng,
    );
    let n = dataset.len();
    let n_train = n - n / 4;
    let ranges = probe.group_ranges();
    let mut opt = AdamW::new(AdamWConfig::with_lr(config.lr), probe.num_params());
    let mut rng = seed::stream(seed_, "probe/batches");
    let mut final_loss = 0.0;
    for _ in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..n_train))
            .collect();
        let mut x = dataset.x.select(Axis(0), &idx);
        x += &(seed::gaussian_matrix(&mut rng, idx.len(), x.ncols()) * config.input_noise);
        let (logits, tr) = probe.forward(&x);
        let p = probe.softmax_groups(&logits);
        // Cross-entropy summed over factor heads, averaged over the batch.
        let mut g = p.clone();
        let mut loss = 0.0;
        for (r, &i) in idx.iter().enumerate() {
            for (f, range) in ranges.iter().enumerate() {
                let col = range.start + labels.values[i][f];
                loss -= p[[r, col]].max(1e-300).ln();
                g[[r, col]] -= 1.0;
            }
        }
        let b = idx.len() as f64;
        final_loss = loss / b;
        g /= b;
        let mut grads = probe.zeros_like();
        let g_h2 = probe.head.backward(&tr.h2, &g, Some(&mut grads.head));
        let g_z2 = silu_backward(&tr.z2, &g_h2);
        let g_h1 = probe.l2.backward(&tr.h1, &g_z2, Some(&mut grads.l2));
        let g_z1 = silu_backward(&tr.z1, &g_h1);
        probe.l1.backward_params(&tr.x, &g_z1, &mut grads.l1);
        let mut flat_g = grads.flat_params();
        clip_global_norm(&mut flat_g, 1.0);
        let mut flat = probe.flat_params();
        opt.update(&mut flat, &flat_g);
        probe.load_flat(&flat);
    }

    let held: Vec<usize> = (n_train..n).collect();
    let p = probe.classify(&dataset.x.select(Axis(0), &held));
    let accuracy = ranges
        .iter()
        .enumerate()
        .map(|(f, range)| {
            let correct = held
                .iter()
                .enumerate()
                .filter(|&(r, &i)| {
                    let row = p.slice(s![r, range.clone()]);
                    let best = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |a, (j, &v)| if v > a.1 { (j, v) } else { a })
                        .0;
                    best == labels.values[i][f]
                })
                .count();
            correct as f64 / held.len() as f64
        })
        .collect();
    Ok((probe, ProbeReport { accuracy, final_loss }))
}
