use ndarray::{Array1, Array2};

use super::{CondBackward, NoisePredictor};
use crate::nn::ParamVisit;
use crate::schedule::LatentShape;
use crate::seed::{self, Rng};

/// A predictor that is linear in the condition for any fixed input:
///
/// `eps = x A + (1 + t / T) c B + (x G) * (c H)`
///
/// The bilinear term makes the condition's effect depend on the sample, so
/// contrastive gradients are non-trivial, while keeping every quantity
/// closed-form for gradient checks.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearToyDenoiser {
    shape: LatentShape,
    t_max: usize,
    a: Array2<f64>,
    b: Array2<f64>,
    g: Array2<f64>,
    h: Array2<f64>,
}

impl LinearToyDenoiser {
    pub fn random(shape: LatentShape, cond_dim: usize, t_max: usize, rng: &mut Rng) -> Self {
        let d = shape.numel();
        let k = 1.0 / (d as f64).sqrt();
        Self {
            shape,
            t_max,
            a: seed::gaussian_matrix(rng, d, d) * k,
            b: seed::gaussian_matrix(rng, cond_dim, d),
            g: seed::gaussian_matrix(rng, d, d) * k,
            h: seed::gaussian_matrix(rng, cond_dim, d),
        }
    }

    fn time_gain(&self, ts: &[usize]) -> Array1<f64> {
        ts.iter()
            .map(|&t| 1.0 + t as f64 / self.t_max as f64)
            .collect()
    }

    fn parts(&self, x: &Array2<f64>, ts: &[usize], cond: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array1<f64>) {
        let gain = self.time_gain(ts);
        let xg = x.dot(&self.g);
        let ch = cond.dot(&self.h);
        let mut out = x.dot(&self.a);
        let mut cb = cond.dot(&self.b);
        for (mut row, k) in cb.rows_mut().into_iter().zip(gain.iter()) {
            row *= *k;
        }
        out += &cb;
        out += &(&xg * &ch);
        (out, xg, ch, gain)
    }
}

struct ToyBackward<'a> {
    model: &'a LinearToyDenoiser,
    xg: Array2<f64>,
    gain: Array1<f64>,
}

impl CondBackward for ToyBackward<'_> {
    fn cond_grad(self: Box<Self>, upstream: &Array2<f64>) -> Array2<f64> {
        let mut scaled = upstream.clone();
        for (mut row, k) in scaled.rows_mut().into_iter().zip(self.gain.iter()) {
            row *= *k;
        }
        let mut g = scaled.dot(&self.model.b.t());
        g += &(upstream * &self.xg).dot(&self.model.h.t());
        g
    }
}

impl NoisePredictor for LinearToyDenoiser {
    fn latent_shape(&self) -> LatentShape {
        self.shape
    }

    fn cond_dim(&self) -> usize {
        self.b.nrows()
    }

    fn predict(&self, x: &Array2<f64>, ts: &[usize], cond: &Array2<f64>) -> Array2<f64> {
        self.parts(x, ts, cond).0
    }

    fn predict_traced<'a>(
        &'a self,
        x: &Array2<f64>,
        ts: &[usize],
        cond: &Array2<f64>,
    ) -> (Array2<f64>, Box<dyn CondBackward + 'a>) {
        let (out, xg, _ch, gain) = self.parts(x, ts, cond);
        (out, Box::new(ToyBackward { model: self, xg, gain }))
    }

    fn param_checksum(&self) -> String {
        self.checksum()
    }
}

impl ParamVisit for LinearToyDenoiser {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (n, m) in [("a", &self.a), ("b", &self.b), ("g", &self.g), ("h", &self.h)] {
            f(n, m.as_slice().expect("contiguous"));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (n, m) in [
            ("a", &mut self.a),
            ("b", &mut self.b),
            ("g", &mut self.g),
            ("h", &mut self.h),
        ] {
            f(n, m.as_slice_mut().expect("contiguous"));
        }
    }
}
