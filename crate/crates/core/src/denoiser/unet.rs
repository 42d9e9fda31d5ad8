//! Dense U-shaped noise predictor.
//!
//! ```text
//! x ─ in ─ hi1 ─┬─ down ─ lo1 ─ lo2 ─ up ─(+)─ hi2 ─ silu ─ out ─ eps
//!               └──────────── skip ─────────┘
//! emb = time_mlp(sinusoid(t)) + cond_mlp(c)   → FiLM scale/shift in every block
//! ```

use ndarray::{s, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::nn::{self, Linear, ParamVisit};
use crate::seed::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub emb_dim: usize,
    pub time_freqs: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            bottleneck: 128,
            emb_dim: 128,
            time_freqs: 32,
        }
    }
}

/// Residual block `h + W2 silu(FiLM(W1 h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmBlock {
    pub lin1: Linear,
    pub film: Linear,
    pub lin2: Linear,
}

pub(crate) struct BlockTrace {
    h: Array2<f64>,
    z: Array2<f64>,
    scale: Array2<f64>,
    m: Array2<f64>,
    a: Array2<f64>,
}

impl FilmBlock {
    fn init(width: usize, emb_dim: usize, rng: &mut Rng) -> Self {
        Self {
            lin1: Linear::init(width, width, 1.0, rng),
            film: Linear::init(emb_dim, 2 * width, 0.5, rng),
            lin2: Linear::init(width, width, 0.5, rng),
        }
    }

    fn width(&self) -> usize {
        self.lin1.fan_out()
    }

    fn forward(&self, h: &Array2<f64>, emb_act: &Array2<f64>) -> (Array2<f64>, BlockTrace) {
        let w = self.width();
        let z = self.lin1.forward(h);
        let fm = self.film.forward(emb_act);
        let scale = fm.slice(s![.., ..w]).to_owned();
        let shift = fm.slice(s![.., w..]);
        let mut m = Array2::zeros(z.dim());
        Zip::from(&mut m)
            .and(&z)
            .and(&scale)
            .and(shift)
            .for_each(|m, &z, &sc, &sh| *m = z * (1.0 + sc) + sh);
        let a = nn::silu(&m);
        let out = h + &self.lin2.forward(&a);
        (
            out,
            BlockTrace {
                h: h.clone(),
                z,
                scale,
                m,
                a,
            },
        )
    }

    /// Returns the gradient w.r.t. the block input and adds the gradient
    /// w.r.t. the activated embedding into `g_emb_act`.
    fn backward(
        &self,
        tr: &BlockTrace,
        emb_act: &Array2<f64>,
        g_out: &Array2<f64>,
        g_emb_act: &mut Array2<f64>,
        mut grads: Option<&mut FilmBlock>,
    ) -> Array2<f64> {
        let w = self.width();
        let g_a = self
            .lin2
            .backward(&tr.a, g_out, grads.as_deref_mut().map(|g| &mut g.lin2));
        let g_m = nn::silu_backward(&tr.m, &g_a);
        let mut g_fm = Array2::zeros((g_m.nrows(), 2 * w));
        let mut g_z = Array2::zeros(g_m.dim());
        Zip::from(&mut g_z)
            .and(g_fm.slice_mut(s![.., ..w]))
            .and(&g_m)
            .and(&tr.z)
            .and(&tr.scale)
            .for_each(|gz, gs, &gm, &z, &sc| {
                *gz = gm * (1.0 + sc);
                *gs = gm * z;
            });
        g_fm.slice_mut(s![.., w..]).assign(&g_m);
        *g_emb_act += &self
            .film
            .backward(emb_act, &g_fm, grads.as_deref_mut().map(|g| &mut g.film));
        let mut g_h = self
            .lin1
            .backward(&tr.h, &g_z, grads.map(|g| &mut g.lin1));
        g_h += g_out;
        g_h
    }

    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.lin1.visit(&format!("{p}.lin1"), f);
        self.film.visit(&format!("{p}.film"), f);
        self.lin2.visit(&format!("{p}.lin2"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.lin1.visit_mut(&format!("{p}.lin1"), f);
        self.film.visit_mut(&format!("{p}.film"), f);
        self.lin2.visit_mut(&format!("{p}.lin2"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseUNet {
    pub config: UNetConfig,
    pub latent_numel: usize,
    pub cond_dim: usize,
    pub in_proj: Linear,
    pub time1: Linear,
    pub time2: Linear,
    pub cond1: Linear,
    pub cond2: Linear,
    pub hi1: FilmBlock,
    pub down: Linear,
    pub lo1: FilmBlock,
    pub lo2: FilmBlock,
    pub up: Linear,
    pub hi2: FilmBlock,
    pub out_proj: Linear,
}

pub(crate) struct Trace {
    c: Array2<f64>,
    c_h: Array2<f64>,
    c_act: Array2<f64>,
    tf: Array2<f64>,
    t_h: Array2<f64>,
    t_act: Array2<f64>,
    emb: Array2<f64>,
    emb_act: Array2<f64>,
    x: Array2<f64>,
    hi1: BlockTrace,
    h1: Array2<f64>,
    lo1: BlockTrace,
    lo2: BlockTrace,
    h3: Array2<f64>,
    hi2: BlockTrace,
    h4: Array2<f64>,
    h4_act: Array2<f64>,
}

impl DenseUNet {
    pub fn new(config: UNetConfig, latent_numel: usize, cond_dim: usize, rng: &mut Rng) -> Self {
        let (h, l, e) = (config.hidden, config.bottleneck, config.emb_dim);
        Self {
            in_proj: Linear::init(latent_numel, h, 1.0, rng),
            time1: Linear::init(2 * config.time_freqs, e, 1.0, rng),
            time2: Linear::init(e, e, 1.0, rng),
            cond1: Linear::init(cond_dim, e, 1.0, rng),
            cond2: Linear::init(e, e, 1.0, rng),
            hi1: FilmBlock::init(h, e, rng),
            down: Linear::init(h, l, 1.0, rng),
            lo1: FilmBlock::init(l, e, rng),
            lo2: FilmBlock::init(l, e, rng),
            up: Linear::init(l, h, 1.0, rng),
            hi2: FilmBlock::init(h, e, rng),
            out_proj: Linear::init(h, latent_numel, 0.5, rng),
            config,
            latent_numel,
            cond_dim,
        }
    }

    pub(crate) fn forward_traced(
        &self,
        x: &Array2<f64>,
        ts: &[usize],
        c: &Array2<f64>,
    ) -> (Array2<f64>, Trace) {
        let tf = nn::timestep_features(ts, self.config.time_freqs);
        let t_h = self.time1.forward(&tf);
        let t_act = nn::silu(&t_h);
        let c_h = self.cond1.forward(c);
        let c_act = nn::silu(&c_h);
        let emb = self.time2.forward(&t_act) + self.cond2.forward(&c_act);
        let emb_act = nn::silu(&emb);

        let h0 = self.in_proj.forward(x);
        let (h1, hi1) = self.hi1.forward(&h0, &emb_act);
        let d = self.down.forward(&h1);
        let (h2, lo1) = self.lo1.forward(&d, &emb_act);
        let (h3, lo2) = self.lo2.forward(&h2, &emb_act);
        let u = self.up.forward(&h3) + &h1;
        let (h4, hi2) = self.hi2.forward(&u, &emb_act);
        let h4_act = nn::silu(&h4);
        let out = self.out_proj.forward(&h4_act);
        (
            out,
            Trace {
                c: c.clone(),
                c_h,
                c_act,
                tf,
                t_h,
                t_act,
                emb,
                emb_act,
                x: x.clone(),
                hi1,
                h1,
                lo1,
                lo2,
                h3,
                hi2,
                h4,
                h4_act,
            },
        )
    }

    pub fn forward(&self, x: &Array2<f64>, ts: &[usize], c: &Array2<f64>) -> Array2<f64> {
        self.forward_traced(x, ts, c).0
    }

    /// Back-propagates `g_out`; returns the gradient w.r.t. the condition
    /// rows. Weight gradients are accumulated into `grads` when given.
    pub(crate) fn backward(
        &self,
        tr: &Trace,
        g_out: &Array2<f64>,
        mut grads: Option<&mut DenseUNet>,
    ) -> Array2<f64> {
        let ea = &tr.emb_act;
        let mut g_ea = Array2::zeros(ea.dim());
        let g_h4a = self
            .out_proj
            .backward(&tr.h4_act, g_out, grads.as_deref_mut().map(|g| &mut g.out_proj));
        let g_h4 = nn::silu_backward(&tr.h4, &g_h4a);
        let g_u = self
            .hi2
            .backward(&tr.hi2, ea, &g_h4, &mut g_ea, grads.as_deref_mut().map(|g| &mut g.hi2));
        let g_h3 = self
            .up
            .backward(&tr.h3, &g_u, grads.as_deref_mut().map(|g| &mut g.up));
        let g_h2 = self
            .lo2
            .backward(&tr.lo2, ea, &g_h3, &mut g_ea, grads.as_deref_mut().map(|g| &mut g.lo2));
        let g_d = self
            .lo1
            .backward(&tr.lo1, ea, &g_h2, &mut g_ea, grads.as_deref_mut().map(|g| &mut g.lo1));
        let mut g_h1 = self
            .down
            .backward(&tr.h1, &g_d, grads.as_deref_mut().map(|g| &mut g.down));
        g_h1 += &g_u;
        let g_h0 = self
            .hi1
            .backward(&tr.hi1, ea, &g_h1, &mut g_ea, grads.as_deref_mut().map(|g| &mut g.hi1));

        let g_emb = nn::silu_backward(&tr.emb, &g_ea);
        if let Some(g) = grads.as_deref_mut() {
            self.in_proj.backward_params(&tr.x, &g_h0, &mut g.in_proj);
            let g_ta = self.time2.backward(&tr.t_act, &g_emb, Some(&mut g.time2));
            let g_th = nn::silu_backward(&tr.t_h, &g_ta);
            self.time1.backward_params(&tr.tf, &g_th, &mut g.time1);
        }
        let g_ca = self
            .cond2
            .backward(&tr.c_act, &g_emb, grads.as_deref_mut().map(|g| &mut g.cond2));
        let g_ch = nn::silu_backward(&tr.c_h, &g_ca);
        self.cond1.backward(&tr.c, &g_ch, grads.map(|g| &mut g.cond1))
    }
}

impl ParamVisit for DenseUNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.in_proj.visit("in_proj", f);
        self.time1.visit("time1", f);
        self.time2.visit("time2", f);
        self.cond1.visit("cond1", f);
        self.cond2.visit("cond2", f);
        self.hi1.visit("hi1", f);
        self.down.visit("down", f);
        self.lo1.visit("lo1", f);
        self.lo2.visit("lo2", f);
        self.up.visit("up", f);
        self.hi2.visit("hi2", f);
        self.out_proj.visit("out_proj", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.in_proj.visit_mut("in_proj", f);
        self.time1.visit_mut("time1", f);
        self.time2.visit_mut("time2", f);
        self.cond1.visit_mut("cond1", f);
        self.cond2.visit_mut("cond2", f);
        self.hi1.visit_mut("hi1", f);
        self.down.visit_mut("down", f);
        self.lo1.visit_mut("lo1", f);
        self.lo2.visit_mut("lo2", f);
        self.up.visit_mut("up", f);
        self.hi2.visit_mut("hi2", f);
        self.out_proj.visit_mut("out_proj", f);
    }
}
