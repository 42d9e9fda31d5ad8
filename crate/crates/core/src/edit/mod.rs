//! Applying directions during sampling: single and composed edits, timestep
//! windows, real-image edits through inversion, and scale strips.

mod window;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::bank::DirectionBank;
use crate::data::LatentDataset;
use crate::denoiser::{cfg_predict, predict_noise, Condition, NoisePredictor};
use crate::error::{Error, Result};
use crate::schedule::{ddim_invert, ddim_sample, LatentState, NoiseSchedule, SamplingGrid};
use crate::seed;

pub use window::TimeWindow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSpec {
    pub direction: usize,
    pub scale: f64,
    pub window: TimeWindow,
}

impl EditSpec {
    pub fn new(direction: usize, scale: f64, window: TimeWindow) -> Self {
        Self {
            direction,
            scale,
            window,
        }
    }

    fn sort_key(&self) -> (usize, u64, u64, u64) {
        (
            self.direction,
            self.scale.to_bits(),
            self.window.start.to_bits(),
            self.window.end.to_bits(),
        )
    }
}

/// An unordered collection of edits; the summed edit term is independent of
/// the order they were added in.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EditSet {
    pub edits: Vec<EditSpec>,
}

impl EditSet {
    pub fn new(edits: Vec<EditSpec>) -> Self {
        Self { edits }
    }

    pub fn single(spec: EditSpec) -> Self {
        Self { edits: vec![spec] }
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    /// Edits in a fixed canonical order, so floating-point summation does
    /// not depend on insertion order.
    pub fn canonical(&self) -> Vec<&EditSpec> {
        let mut v: Vec<&EditSpec> = self.edits.iter().collect();
        v.sort_by_key(|e| e.sort_key());
        v
    }

    pub fn validate(&self, bank: &DirectionBank) -> Result<()> {
        for e in &self.edits {
            e.window.validate()?;
            if e.direction >= bank.len() {
                return Err(Error::invalid(format!(
                    "direction {} out of range for a bank of {}",
                    e.direction,
                    bank.len()
                )));
            }
            if !e.scale.is_finite() {
                return Err(Error::invalid("edit scale must be finite"));
            }
        }
        Ok(())
    }
}

/// `eps(x_t, d) - eps(x_t, null)`.
pub fn edit_direction_delta(
    model: &dyn NoisePredictor,
    bank: &DirectionBank,
    x_t: &LatentState,
    direction: usize,
) -> Result<Array2<f64>> {
    let eps_dir = predict_noise(model, x_t, &Condition::Direction(direction), Some(bank))?;
    let eps_null = predict_noise(model, x_t, &Condition::Null, Some(bank))?;
    Ok(eps_dir - eps_null)
}

/// Guided prediction plus one edit term:
/// `cfg(x_t, c) + scale * (eps(x_t, d) - eps(x_t, null))`.
///
/// The caller decides whether `x_t.t` lies inside the edit's window.
pub fn edit_term_single(
    model: &dyn NoisePredictor,
    bank: &DirectionBank,
    x_t: &LatentState,
    cond: &Condition,
    guidance_scale: f64,
    spec: &EditSpec,
) -> Result<Array2<f64>> {
    bank.row(spec.direction)?;
    let mut out = cfg_predict(model, x_t, cond, Some(bank), guidance_scale)?;
    if spec.scale != 0.0 {
        let delta = edit_direction_delta(model, bank, x_t, spec.direction)?;
        out.scaled_add(spec.scale, &delta);
    }
    Ok(out)
}

fn multi_with_null(
    model: &dyn NoisePredictor,
    bank: &DirectionBank,
    x_t: &LatentState,
    edits: &EditSet,
    grid: &SamplingGrid,
    eps_null: &Array2<f64>,
) -> Result<Option<Array2<f64>>> {
    let mut sum: Option<Array2<f64>> = None;
    for e in edits.canonical() {
        if e.scale == 0.0 || !e.window.contains(x_t.t, grid) {
            continue;
        }
        let eps_dir = predict_noise(model, x_t, &Condition::Direction(e.direction), Some(bank))?;
        let mut term = eps_dir - eps_null;
        term *= e.scale;
        match sum.as_mut() {
            Some(s) => *s += &term,
            None => sum = Some(term),
        }
    }
    Ok(sum)
}

/// `sum_i scale_i * (eps(x_t, d_i) - eps(x_t, null))` over edits whose window
/// contains `x_t.t` on `grid`.
pub fn edit_term_multi(
    model: &dyn NoisePredictor,
    bank: &DirectionBank,
    x_t: &LatentState,
    edits: &EditSet,
    grid: &SamplingGrid,
) -> Result<Array2<f64>> {
    edits.validate(bank)?;
    let eps_null = predict_noise(model, x_t, &Condition::Null, Some(bank))?;
    Ok(multi_with_null(model, bank, x_t, edits, grid, &eps_null)?
        .unwrap_or_else(|| Array2::zeros(x_t.x.dim())))
}

/// Where a trajectory starts.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// One row per seed, each drawn from its own stream.
    Seeds(Vec<u64>),
    Latent(LatentState),
}

pub fn initial_noise(seeds: &[u64], numel: usize) -> Array2<f64> {
    let mut x = Array2::zeros((seeds.len(), numel));
    for (mut row, &s) in x.axis_iter_mut(Axis(0)).zip(seeds) {
        let mut rng = seed::stream(s, "sample/init");
        row.assign(&ndarray::Array1::from(seed::gaussian_vec(&mut rng, numel)));
    }
    x
}

/// RMS over rows of the summed edit term's per-row L2 norm at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostic {
    pub t: usize,
    pub edit_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditOutcome {
    pub image: LatentState,
    pub diagnostics: Vec<StepDiagnostic>,
}

/// Read-only bundle of what every edit needs.
#[derive(Clone, Copy)]
pub struct Editor<'a> {
    pub model: &'a dyn NoisePredictor,
    pub bank: &'a DirectionBank,
    pub schedule: &'a NoiseSchedule,
    pub grid: &'a SamplingGrid,
}

impl<'a> Editor<'a> {
    pub fn new(
        model: &'a dyn NoisePredictor,
        bank: &'a DirectionBank,
        schedule: &'a NoiseSchedule,
        grid: &'a SamplingGrid,
    ) -> Result<Self> {
        if bank.cond_dim() != model.cond_dim() {
            return Err(Error::invalid("bank and model condition sizes differ"));
        }
        if grid.num_train_steps() != schedule.num_steps() {
            return Err(Error::invalid("sampling grid was built for another schedule"));
        }
        Ok(Self {
            model,
            bank,
            schedule,
            grid,
        })
    }

    fn start_state(&self, init: &Init) -> Result<LatentState> {
        let shape = self.model.latent_shape();
        match init {
            Init::Seeds(seeds) => {
                if seeds.is_empty() {
                    return Err(Error::invalid("no seeds given"));
                }
                LatentState::new(initial_noise(seeds, shape.numel()), shape, self.grid.start())
            }
            Init::Latent(s) => {
                if s.shape != shape || s.t != self.grid.start() {
                    return Err(Error::invalid(format!(
                        "initial latent must be {} at t = {}",
                        shape,
                        self.grid.start()
                    )));
                }
                Ok(s.clone())
            }
        }
    }

    /// Full reverse trajectory using `cfg(x_t, c)` plus the active edit terms.
    pub fn sample_edited(
        &self,
        init: &Init,
        cond: &Condition,
        guidance_scale: f64,
        edits: &EditSet,
    ) -> Result<EditOutcome> {
        edits.validate(self.bank)?;
        let start = self.start_state(init)?;
        let shape = start.shape;
        let mut diagnostics = Vec::new();
        let image = ddim_sample(&start, self.schedule, self.grid, |x, t| {
            let state = LatentState::new(x.clone(), shape, t)?;
            let eps_null = predict_noise(self.model, &state, &Condition::Null, Some(self.bank))?;
            let mut eps = if cond.is_null() {
                eps_null.clone()
            } else {
                cfg_predict(self.model, &state, cond, Some(self.bank), guidance_scale)?
            };
            let term = multi_with_null(self.model, self.bank, &state, edits, self.grid, &eps_null)?;
            let edit_norm = match term {
                Some(term) => {
                    let n = term.map_axis(Axis(1), |r| r.dot(&r)).mean().unwrap_or(0.0).sqrt();
                    eps += &term;
                    n
                }
                None => 0.0,
            };
            diagnostics.push(StepDiagnostic { t, edit_norm });
            Ok(eps)
        })?;
        Ok(EditOutcome { image, diagnostics })
    }

    pub fn sample(&self, init: &Init, cond: &Condition, guidance_scale: f64) -> Result<LatentState> {
        Ok(self
            .sample_edited(init, cond, guidance_scale, &EditSet::default())?
            .image)
    }

    /// Inverts clean images to the grid start under the null condition.
    pub fn invert(&self, image: &LatentState, refine_iters: usize) -> Result<LatentState> {
        if image.shape != self.model.latent_shape() {
            return Err(Error::invalid("image does not match the model's latent shape"));
        }
        ddim_invert(image, self.schedule, self.grid, refine_iters, |x, t| {
            let state = LatentState::new(x.clone(), image.shape, t)?;
            predict_noise(self.model, &state, &Condition::Null, Some(self.bank))
        })
    }

    /// Inversion, then regeneration with the unconditional prediction plus
    /// the edit terms.
    pub fn edit_real(
        &self,
        image: &LatentState,
        edits: &EditSet,
        refine_iters: usize,
    ) -> Result<EditOutcome> {
        edits.validate(self.bank)?;
        let x_t = self.invert(image, refine_iters)?;
        self.sample_edited(&Init::Latent(x_t), &Condition::Null, 1.0, edits)
    }

    /// One edited sample per scale from a shared start; scales ascend.
    pub fn interpolation_strip(
        &self,
        init: &Init,
        direction: usize,
        scales: &[f64],
        window: TimeWindow,
    ) -> Result<Vec<LatentState>> {
        if scales.is_empty() {
            return Err(Error::invalid("interpolation strip needs at least one scale"));
        }
        if scales.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::invalid("strip scales must be sorted ascending"));
        }
        let start = Init::Latent(self.start_state(init)?);
        scales
            .iter()
            .map(|&s| {
                let edits = EditSet::single(EditSpec::new(direction, s, window));
                Ok(self
                    .sample_edited(&start, &Condition::Null, 1.0, &edits)?
                    .image)
            })
            .collect()
    }
}

/// Samples `count` images from the model under the null condition: the
/// generated ("fake") dataset source.
pub fn sample_dataset(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    grid: &SamplingGrid,
    count: usize,
    seed_: u64,
) -> Result<LatentDataset> {
    if count == 0 {
        return Err(Error::invalid("generated dataset needs at least one sample"));
    }
    let seeds: Vec<u64> = {
        use rand::Rng as _;
        let mut rng = seed::stream(seed_, "data/generated");
        (0..count).map(|_| rng.random()).collect()
    };
    let shape = model.latent_shape();
    let x_t = LatentState::new(initial_noise(&seeds, shape.numel()), shape, grid.start())?;
    let out = ddim_sample(&x_t, schedule, grid, |x, t| {
        let s = LatentState::new(x.clone(), shape, t)?;
        predict_noise(model, &s, &Condition::Null, None)
    })?;
    Ok(LatentDataset {
        x: out.x.mapv(|v| v.clamp(-1.0, 1.0)),
        shape,
        labels: None,
        ids: (0..count).map(|i| format!("generated-{i:05}")).collect(),
    })
}
