//! Conditional noise prediction, classifier-free guidance and the trained
//! denoiser artifact.

mod container;
mod toy;
mod train;
mod unet;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::bank::DirectionBank;
use crate::error::{Error, Result};
use crate::nn::ParamVisit;
use crate::schedule::{LatentShape, LatentState};
use crate::seed::Rng;

pub use container::{load_model, save_model, MODEL_FORMAT_VERSION};
pub use toy::LinearToyDenoiser;
pub use train::{train_denoiser, DenoiserTrainConfig, TrainReport};
pub use unet::{DenseUNet, UNetConfig};

/// Pull-back of an upstream gradient on the prediction to the condition rows.
pub trait CondBackward {
    fn cond_grad(self: Box<Self>, upstream: &Array2<f64>) -> Array2<f64>;
}

/// Any conditional noise predictor `eps(x_t, t, c)`.
///
/// Rows of `x`, `ts` and `cond` are independent samples. Implementations must
/// be deterministic and row-independent: a row's output may not depend on
/// what else shares the batch.
pub trait NoisePredictor: Send + Sync {
    fn latent_shape(&self) -> LatentShape;
    fn cond_dim(&self) -> usize;

    /// The null condition. Fixed and zero for every built-in predictor.
    fn null_embedding(&self) -> Array1<f64> {
        Array1::zeros(self.cond_dim())
    }

    fn predict(&self, x: &Array2<f64>, ts: &[usize], cond: &Array2<f64>) -> Array2<f64>;

    fn predict_traced<'a>(
        &'a self,
        x: &Array2<f64>,
        ts: &[usize],
        cond: &Array2<f64>,
    ) -> (Array2<f64>, Box<dyn CondBackward + 'a>);

    fn param_checksum(&self) -> String;
}

#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Null,
    Direction(usize),
    Raw(Array1<f64>),
}

impl Condition {
    pub fn resolve(
        &self,
        model: &dyn NoisePredictor,
        bank: Option<&DirectionBank>,
    ) -> Result<Array1<f64>> {
        let v = match self {
            Condition::Null => model.null_embedding(),
            Condition::Direction(k) => {
                let bank = bank.ok_or_else(|| {
                    Error::invalid(format!("direction {k} requested without a bank"))
                })?;
                bank.row(*k)?.to_owned()
            }
            Condition::Raw(v) => v.clone(),
        };
        if v.len() != model.cond_dim() {
            return Err(Error::invalid(format!(
                "condition has {} entries, model expects {}",
                v.len(),
                model.cond_dim()
            )));
        }
        Ok(v)
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Condition::Null)
    }
}

pub(crate) fn broadcast_rows(v: ArrayView1<f64>, rows: usize) -> Array2<f64> {
    v.insert_axis(Axis(0))
        .broadcast((rows, v.len()))
        .expect("broadcast")
        .to_owned()
}

fn check_latent(model: &dyn NoisePredictor, x_t: &LatentState) -> Result<()> {
    if x_t.shape != model.latent_shape() {
        return Err(Error::invalid(format!(
            "latent shape {} does not match model shape {}",
            x_t.shape,
            model.latent_shape()
        )));
    }
    Ok(())
}

pub fn predict_noise(
    model: &dyn NoisePredictor,
    x_t: &LatentState,
    cond: &Condition,
    bank: Option<&DirectionBank>,
) -> Result<Array2<f64>> {
    check_latent(model, x_t)?;
    let c = cond.resolve(model, bank)?;
    let rows = x_t.batch_size();
    let ts = vec![x_t.t; rows];
    Ok(model.predict(&x_t.x, &ts, &broadcast_rows(c.view(), rows)))
}

/// `eps(x, null) + g * (eps(x, c) - eps(x, null))`.
pub fn combine_guidance(eps_null: &Array2<f64>, eps_cond: &Array2<f64>, guidance: f64) -> Array2<f64> {
    let mut diff = eps_cond - eps_null;
    diff *= guidance;
    diff += eps_null;
    diff
}

pub fn cfg_predict(
    model: &dyn NoisePredictor,
    x_t: &LatentState,
    cond: &Condition,
    bank: Option<&DirectionBank>,
    guidance_scale: f64,
) -> Result<Array2<f64>> {
    let eps_null = predict_noise(model, x_t, &Condition::Null, bank)?;
    if cond.is_null() {
        // eps + g * 0 == eps bit for bit.
        return Ok(eps_null);
    }
    let eps_cond = predict_noise(model, x_t, cond, bank)?;
    Ok(combine_guidance(&eps_null, &eps_cond, guidance_scale))
}

/// Learned per-factor label embeddings used as probe conditions during
/// pretraining. A label condition is the sum of its factors' level vectors;
/// a dropped factor contributes nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVocabulary {
    pub tables: Vec<Array2<f64>>,
}

impl LabelVocabulary {
    pub fn new(levels: &[usize], cond_dim: usize, rng: &mut Rng) -> Self {
        let tables = levels
            .iter()
            .map(|&n| crate::seed::gaussian_matrix(rng, n, cond_dim) * (1.0 / (cond_dim as f64).sqrt()))
            .collect();
        Self { tables }
    }

    pub fn levels(&self) -> Vec<usize> {
        self.tables.iter().map(|t| t.nrows()).collect()
    }

    /// `labels[f] = Some(level)` includes factor `f`.
    pub fn condition(&self, labels: &[Option<usize>]) -> Result<Array1<f64>> {
        if labels.len() != self.tables.len() {
            return Err(Error::invalid(format!(
                "{} label slots for {} factors",
                labels.len(),
                self.tables.len()
            )));
        }
        let dim = self.tables.first().map_or(0, |t| t.ncols());
        let mut c = Array1::zeros(dim);
        for (table, l) in self.tables.iter().zip(labels) {
            if let Some(l) = l {
                if *l >= table.nrows() {
                    return Err(Error::invalid(format!("label level {l} out of range")));
                }
                c += &table.row(*l);
            }
        }
        Ok(c)
    }
}

/// A trained denoiser: network, declared latent shape, the schedule it was
/// trained under and optional label conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    net: DenseUNet,
    latent_shape: LatentShape,
    schedule_id: String,
    vocab: Option<LabelVocabulary>,
}

impl DenoiserModel {
    pub fn new(
        config: UNetConfig,
        latent_shape: LatentShape,
        cond_dim: usize,
        label_levels: Option<&[usize]>,
        schedule_id: impl Into<String>,
        rng: &mut Rng,
    ) -> Self {
        let net = DenseUNet::new(config, latent_shape.numel(), cond_dim, rng);
        let vocab = label_levels.map(|l| LabelVocabulary::new(l, cond_dim, rng));
        Self {
            net,
            latent_shape,
            schedule_id: schedule_id.into(),
            vocab,
        }
    }

    pub fn net(&self) -> &DenseUNet {
        &self.net
    }

    pub fn schedule_id(&self) -> &str {
        &self.schedule_id
    }

    pub fn vocabulary(&self) -> Option<&LabelVocabulary> {
        self.vocab.as_ref()
    }

    pub fn label_condition(&self, labels: &[Option<usize>]) -> Result<Condition> {
        let vocab = self
            .vocab
            .as_ref()
            .ok_or_else(|| Error::invalid("model was trained without label conditions"))?;
        Ok(Condition::Raw(vocab.condition(labels)?))
    }
}

impl ParamVisit for DenoiserModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.net.visit(f);
        if let Some(v) = &self.vocab {
            for (i, t) in v.tables.iter().enumerate() {
                f(&format!("labels.{i}"), t.as_slice().expect("contiguous"));
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.net.visit_mut(f);
        if let Some(v) = &mut self.vocab {
            for (i, t) in v.tables.iter_mut().enumerate() {
                f(&format!("labels.{i}"), t.as_slice_mut().expect("contiguous"));
            }
        }
    }
}

struct UNetBackward<'a> {
    net: &'a DenseUNet,
    trace: unet::Trace,
}

impl CondBackward for UNetBackward<'_> {
    fn cond_grad(self: Box<Self>, upstream: &Array2<f64>) -> Array2<f64> {
        self.net.backward(&self.trace, upstream, None)
    }
}

impl NoisePredictor for DenoiserModel {
    fn latent_shape(&self) -> LatentShape {
        self.latent_shape
    }

    fn cond_dim(&self) -> usize {
        self.net.cond_dim
    }

    fn predict(&self, x: &Array2<f64>, ts: &[usize], cond: &Array2<f64>) -> Array2<f64> {
        self.net.forward(x, ts, cond)
    }

    fn predict_traced<'a>(
        &'a self,
        x: &Array2<f64>,
        ts: &[usize],
        cond: &Array2<f64>,
    ) -> (Array2<f64>, Box<dyn CondBackward + 'a>) {
        let (out, trace) = self.net.forward_traced(x, ts, cond);
        (out, Box::new(UNetBackward { net: &self.net, trace }))
    }

    fn param_checksum(&self) -> String {
        self.checksum()
    }
}
