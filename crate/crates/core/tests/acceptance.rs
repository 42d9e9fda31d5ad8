//! Acceptance suite. Runs every primary criterion against the toy fixture in
//! `tests/fixtures` and prints one PASS/FAIL line per criterion.
//!
//! Built with `harness = false`: the trained fixture is shared by most
//! criteria and takes a few minutes to produce, so the checks run in order
//! from one `main`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use latent_directions::bank::DirectionBank;
use latent_directions::config::{parse_config, ExperimentConfig};
use latent_directions::contrastive::{
    discover, loss_and_embedding_grad, ContrastiveLoss, DiscoverOptions, Discovery,
};
use latent_directions::data::LatentDataset;
use latent_directions::denoiser::{
    cfg_predict, train_denoiser, Condition, DenoiserModel, LinearToyDenoiser,
    NoisePredictor,
};
use latent_directions::edit::{
    edit_direction_delta, edit_term_multi, edit_term_single, EditSet, EditSpec, Editor, Init,
    TimeWindow,
};
use latent_directions::eval::{
    is_monotone, perceptual_distances, rescore, train_probe, AttributeProbe, EvalSet, MlpProbe,
    RescoreMatrix,
};
use latent_directions::schedule::{
    forward_noise, LatentShape, LatentState, NoiseSchedule, SamplingGrid, ScheduleParams,
};
use latent_directions::seed;
use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng as _;
use serde::Deserialize;

#[derive(Deserialize)]
struct Thresholds {
    budget: Budget,
    disentanglement: Disentanglement,
    inversion: Inversion,
    monotonicity: Monotonicity,
    composition: Composition,
    coherence: Coherence,
}

#[derive(Deserialize)]
struct Budget {
    pretrain_secs: f64,
    discover_secs: f64,
    inversion_secs: f64,
}

#[derive(Deserialize)]
struct Disentanglement {
    min_aligned: usize,
    min_diagonal_pp: f64,
    max_off_diagonal_pp: f64,
}

#[derive(Deserialize)]
struct Inversion {
    images: usize,
    max_mse: f64,
}

#[derive(Deserialize)]
struct Monotonicity {
    strips: u64,
    min_monotone: usize,
    tolerance: f64,
}

#[derive(Deserialize)]
struct Composition {
    min_fraction: f64,
}

#[derive(Deserialize)]
struct Coherence {
    seeds: u64,
    magnitudes: Vec<f64>,
    min_wins: usize,
}

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Loss and gradient criteria (no trained model needed)

fn brute_cos(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for i in 0..u.len() {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    dot / (nu.sqrt() * nv.sqrt())
}

/// Slot loss by direct enumeration of positive and negative pairs.
fn brute_slot_loss(v: &Array3<f64>, j: usize, tau: f64) -> f64 {
    let (n, k, _) = v.dim();
    let vec = |a: usize, i: usize| v.slice(s![a, i, ..]).to_vec();
    let mut pos = 0.0;
    for a in 0..n {
        for b in 0..n {
            if a != b {
                pos += (brute_cos(&vec(a, j), &vec(b, j)) / tau).exp();
            }
        }
    }
    let mut neg = 0.0;
    for a in 0..n {
        for i in 0..k {
            if i != j {
                neg += (brute_cos(&vec(a, j), &vec(a, i)) / tau).exp();
            }
        }
    }
    -(pos / neg).ln()
}

fn loss_oracle() -> Check {
    let started = Instant::now();
    let mut rng = seed::stream(0, "acceptance/loss-oracle");
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=5);
        let k = rng.random_range(2..=6);
        let d = rng.random_range(1..=16);
        let tau = rng.random_range(0.05..2.0);
        let v = Array3::from_shape_vec((n, k, d), seed::gaussian_vec(&mut rng, n * k * d))
            .expect("shape");
        let loss = ContrastiveLoss::exact(tau).map_err(|e| e.to_string())?;
        let (mean, _) = loss.mean_loss_and_grad(v.view()).map_err(|e| e.to_string())?;
        let mut brute_mean = 0.0;
        for j in 0..k {
            let brute = brute_slot_loss(&v, j, tau);
            let fast = loss.slot_loss(v.view(), j).map_err(|e| e.to_string())?;
            worst = worst.max((brute - fast).abs());
            brute_mean += brute / k as f64;
        }
        worst = worst.max((brute_mean - mean).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(
        worst < 1e-6 && secs < 10.0,
        format!("200 instances, max |diff| {worst:.2e} (< 1e-6), {secs:.2}s (< 10s)"),
    )
}

fn hand_computed_cases() -> Check {
    let loss = ContrastiveLoss::exact(0.5).map_err(|e| e.to_string())?;
    // Both images share orthogonal unit divergences: positives 1, negatives 0.
    let mut sym = Array3::zeros((2, 2, 2));
    for a in 0..2 {
        sym[[a, 0, 0]] = 1.0;
        sym[[a, 1, 1]] = 1.0;
    }
    let equal = Array3::from_elem((2, 2, 3), 0.7);
    let mut out = Vec::new();
    for (name, v, want) in [("symmetric", sym, -2.0), ("all-equal", equal, 0.0)] {
        for j in 0..2 {
            let got = loss.slot_loss(v.view(), j).map_err(|e| e.to_string())?;
            if (got - want).abs() > 1e-9 {
                return Err(format!("{name} slot {j}: {got} != {want}"));
            }
        }
        let (mean, _) = loss.mean_loss_and_grad(v.view()).map_err(|e| e.to_string())?;
        if (mean - want).abs() > 1e-9 {
            return Err(format!("{name} mean: {mean} != {want}"));
        }
        out.push(format!("{name} = {mean:+.12}"));
    }
    Ok(out.join(", "))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

fn gradient_checks() -> Check {
    let started = Instant::now();
    let mut rng = seed::stream(0, "acceptance/gradients");
    let h = 1e-6;

    let mut worst_div = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(2..=5);
        let k = rng.random_range(2..=6);
        let d = rng.random_range(2..=16);
        let tau = rng.random_range(0.2..1.0);
        let v = Array3::from_shape_vec((n, k, d), seed::gaussian_vec(&mut rng, n * k * d))
            .expect("shape");
        let loss = ContrastiveLoss::exact(tau).map_err(|e| e.to_string())?;
        let (_, g) = loss.mean_loss_and_grad(v.view()).map_err(|e| e.to_string())?;
        let mut fd = Vec::with_capacity(v.len());
        for idx in 0..v.len() {
            let mut plus = v.clone();
            let mut minus = v.clone();
            plus.as_slice_mut().expect("contiguous")[idx] += h;
            minus.as_slice_mut().expect("contiguous")[idx] -= h;
            let lp = loss.mean_loss_and_grad(plus.view()).map_err(|e| e.to_string())?.0;
            let lm = loss.mean_loss_and_grad(minus.view()).map_err(|e| e.to_string())?.0;
            fd.push((lp - lm) / (2.0 * h));
        }
        worst_div = worst_div.max(rel_err(g.as_slice().expect("contiguous"), &fd));
    }

    let schedule = NoiseSchedule::new(ScheduleParams::default()).map_err(|e| e.to_string())?;
    let shape = LatentShape::new(1, 4, 4);
    let mut worst_emb = 0.0f64;
    for _ in 0..10 {
        let cond_dim = rng.random_range(2..=6);
        let k = rng.random_range(2..=5);
        let n = rng.random_range(2..=4);
        let toy = LinearToyDenoiser::random(shape, cond_dim, schedule.num_steps(), &mut rng);
        let emb = seed::gaussian_matrix(&mut rng, k, cond_dim);
        let images = seed::gaussian_matrix(&mut rng, n, shape.numel());
        let eps = seed::gaussian_matrix(&mut rng, n, shape.numel());
        let t = rng.random_range(1..=schedule.num_steps());
        let dirs: Vec<usize> = (0..k).collect();
        let loss = ContrastiveLoss::new(0.5).map_err(|e| e.to_string())?;
        let eval = |e: &Array2<f64>| -> std::result::Result<(f64, Array2<f64>), String> {
            let bank = DirectionBank::from_embeddings(e.clone(), 0).map_err(|e| e.to_string())?;
            loss_and_embedding_grad(&toy, &schedule, images.view(), t, &bank, &dirs, eps.view(), &loss)
                .map_err(|e| e.to_string())
        };
        let (_, g) = eval(&emb)?;
        let mut fd = Vec::with_capacity(emb.len());
        for idx in 0..emb.len() {
            let mut plus = emb.clone();
            let mut minus = emb.clone();
            plus.as_slice_mut().expect("contiguous")[idx] += h;
            minus.as_slice_mut().expect("contiguous")[idx] -= h;
            fd.push((eval(&plus)?.0 - eval(&minus)?.0) / (2.0 * h));
        }
        worst_emb = worst_emb.max(rel_err(g.as_slice().expect("contiguous"), &fd));
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(
        worst_div < 1e-4 && worst_emb < 1e-4 && secs < 60.0,
        format!(
            "rel err divergences {worst_div:.2e}, embeddings {worst_emb:.2e} (< 1e-4), {secs:.1}s (< 60s)"
        ),
    )
}

// ---------------------------------------------------------------------------
// Trained fixture

struct Fixture {
    config: ExperimentConfig,
    thresholds: Thresholds,
    schedule: NoiseSchedule,
    grid: SamplingGrid,
    dataset: LatentDataset,
    model: DenoiserModel,
    pretrain_secs: f64,
    checksum_before: String,
    discovery: Discovery,
    checksum_after: String,
    discover_secs: f64,
    probe: MlpProbe,
    matrix: RescoreMatrix,
    /// Best row per factor group under the disentanglement thresholds, else
    /// the best row by diagonal minus off-diagonal: `(direction, column)`.
    aligned: Vec<(usize, usize)>,
}

fn build_fixture() -> Fixture {
    let config = parse_config(include_str!("fixtures/toy.toml")).expect("fixture config");
    let thresholds: Thresholds =
        toml::from_str(include_str!("fixtures/thresholds.toml")).expect("thresholds");
    let schedule = NoiseSchedule::new(config.schedule.clone()).expect("schedule");
    let grid = SamplingGrid::for_schedule(&schedule).expect("grid");
    let dataset = config.load_dataset(Path::new(".")).expect("dataset");

    let started = Instant::now();
    let (model, report) =
        train_denoiser(&dataset, &schedule, &config.denoiser, config.seed).expect("pretraining");
    let pretrain_secs = started.elapsed().as_secs_f64();
    println!(
        "fixture: denoiser {} steps in {pretrain_secs:.0}s, eval loss {:.4} -> {:.4}",
        config.denoiser.steps, report.initial_eval_loss, report.final_eval_loss
    );

    let checksum_before = model.param_checksum();
    let started = Instant::now();
    let options = DiscoverOptions {
        config_hash: Some(config.hash()),
        checkpoint_dir: None,
    };
    let discovery =
        discover(&model, &schedule, &dataset.unlabeled(), &config.trainer, &options).expect("discover");
    let discover_secs = started.elapsed().as_secs_f64();
    let checksum_after = model.param_checksum();
    println!(
        "fixture: discovery K = {} for {} steps in {discover_secs:.0}s",
        config.trainer.directions, config.trainer.steps
    );

    let (probe, probe_report) = train_probe(
        &config.probe_dataset().expect("probe data"),
        &config.eval.probe,
        config.seed,
    )
    .expect("probe");
    println!("fixture: probe held-out accuracy {:?}", probe_report.accuracy);

    let editor = Editor::new(&model, &discovery.bank, &schedule, &grid).expect("editor");
    let edits: Vec<EditSpec> = (0..discovery.bank.len())
        .map(|k| EditSpec::new(k, config.edit.scale, TimeWindow::FULL))
        .collect();
    let eval = EvalSet::Seeds(config.eval.eval_seeds());
    let matrix = rescore(&editor, &edits, &eval, &probe).expect("rescore");
    println!("fixture: rescore matrix ({} images)", eval.len());
    for line in matrix.to_csv().lines() {
        println!("  {line}");
    }

    let d = &thresholds.disentanglement;
    let annotations = matrix.annotate();
    let mut aligned = Vec::new();
    for g in 0..matrix.groups.len() {
        let rows: Vec<(usize, f64, f64)> = annotations
            .iter()
            .enumerate()
            .filter(|(_, a)| matrix.group_of(a.matched) == Some(g))
            .map(|(r, a)| (r, a.diagonal, a.largest_off.map_or(0.0, |o| o.1.abs())))
            .collect();
        let passing = rows
            .iter()
            .filter(|r| r.1 >= d.min_diagonal_pp && r.2 <= d.max_off_diagonal_pp)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let best = passing.or_else(|| rows.iter().max_by(|a, b| (a.1 - a.2).total_cmp(&(b.1 - b.2))));
        if let Some(&(r, _, _)) = best {
            aligned.push((r, annotations[r].matched));
        }
    }
    println!(
        "fixture: factor-aligned directions {:?}",
        aligned
            .iter()
            .map(|&(k, c)| format!("d{k} -> {}", matrix.cols[c]))
            .collect::<Vec<_>>()
    );

    Fixture {
        config,
        thresholds,
        schedule,
        grid,
        dataset,
        model,
        pretrain_secs,
        checksum_before,
        discovery,
        checksum_after,
        discover_secs,
        probe,
        matrix,
        aligned,
    }
}

impl Fixture {
    fn editor(&self) -> Editor<'_> {
        Editor::new(&self.model, &self.discovery.bank, &self.schedule, &self.grid).expect("editor")
    }

    fn edit(&self, direction: usize, scale: f64) -> EditSpec {
        EditSpec::new(direction, scale, TimeWindow::FULL)
    }
}

fn bits(x: &Array2<f64>) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

fn no_op_identity(fx: &Fixture) -> Check {
    let editor = fx.editor();
    let seeds: Vec<u64> = (0..20).collect();
    let init = Init::Seeds(seeds);
    let plain = editor.sample(&init, &Condition::Null, 1.0).map_err(|e| e.to_string())?;
    for k in 0..fx.discovery.bank.len() {
        let zero = editor
            .sample_edited(&init, &Condition::Null, 1.0, &EditSet::single(fx.edit(k, 0.0)))
            .map_err(|e| e.to_string())?;
        if bits(&zero.image.x) != bits(&plain.x) {
            return Err(format!("direction {k} at scale 0 changed the output"));
        }
    }

    // Singleton composed term against the single-edit term at noisy states.
    let mut rng = seed::stream(0, "acceptance/no-op");
    let clean = LatentState::clean(fx.dataset.x.slice(s![..20, ..]).to_owned(), fx.dataset.shape)
        .map_err(|e| e.to_string())?;
    let scale = fx.config.edit.scale;
    let mut compared = 0;
    for &t in fx.grid.timesteps().iter().filter(|&&t| t > 0).step_by(7) {
        let eps = seed::gaussian_matrix(&mut rng, clean.batch_size(), clean.x.ncols());
        let x_t = forward_noise(&clean, t, &eps, &fx.schedule).map_err(|e| e.to_string())?;
        for k in 0..fx.discovery.bank.len() {
            let spec = fx.edit(k, scale);
            let multi = edit_term_multi(&fx.model, &fx.discovery.bank, &x_t, &EditSet::single(spec.clone()), &fx.grid)
                .map_err(|e| e.to_string())?;
            let mut single_term =
                edit_direction_delta(&fx.model, &fx.discovery.bank, &x_t, k).map_err(|e| e.to_string())?;
            single_term *= scale;
            if bits(&multi) != bits(&single_term) {
                return Err(format!("singleton composed term differs at t = {t}, direction {k}"));
            }
            let single = edit_term_single(&fx.model, &fx.discovery.bank, &x_t, &Condition::Null, 1.0, &spec)
                .map_err(|e| e.to_string())?;
            let mut expected = cfg_predict(&fx.model, &x_t, &Condition::Null, Some(&fx.discovery.bank), 1.0)
                .map_err(|e| e.to_string())?;
            expected.scaled_add(1.0, &multi);
            if bits(&single) != bits(&expected) {
                return Err(format!("single-edit prediction differs at t = {t}, direction {k}"));
            }
            compared += 1;
        }
    }
    Ok(format!(
        "20 seeds x {} directions byte-identical at scale 0; {compared} singleton terms exact",
        fx.discovery.bank.len()
    ))
}

fn frozen_denoiser(fx: &Fixture) -> Check {
    let now = fx.model.param_checksum();
    ensure(
        fx.checksum_before == fx.checksum_after && fx.checksum_after == now,
        format!("param checksum {}... unchanged across discover and all edits", &now[..16]),
    )
}

fn seed_reproducibility(fx: &Fixture) -> Check {
    let options = DiscoverOptions {
        config_hash: Some(fx.config.hash()),
        checkpoint_dir: None,
    };
    let again = discover(&fx.model, &fx.schedule, &fx.dataset.unlabeled(), &fx.config.trainer, &options)
        .map_err(|e| e.to_string())?;
    let same_bank = again.bank.to_bytes() == fx.discovery.bank.to_bytes();
    let trace_a: Vec<u64> = fx.discovery.manifest.loss_trace.iter().map(|v| v.to_bits()).collect();
    let trace_b: Vec<u64> = again.manifest.loss_trace.iter().map(|v| v.to_bits()).collect();
    let same_manifest = again.manifest.to_json() == fx.discovery.manifest.to_json();
    ensure(
        same_bank && trace_a == trace_b && same_manifest,
        format!(
            "seed {}: bank bytes equal {same_bank}, {} loss values equal {}, manifests equal {same_manifest}",
            fx.config.seed,
            trace_a.len(),
            trace_a == trace_b
        ),
    )
}

fn inversion_round_trip(fx: &Fixture) -> Check {
    let started = Instant::now();
    let n = fx.thresholds.inversion.images;
    let editor = fx.editor();
    let clean = LatentState::clean(fx.dataset.x.slice(s![..n, ..]).to_owned(), fx.dataset.shape)
        .map_err(|e| e.to_string())?;
    let iters = fx.config.edit.inversion_refine_iters;
    let x_t = editor.invert(&clean, iters).map_err(|e| e.to_string())?;
    let back = editor
        .sample(&Init::Latent(x_t), &Condition::Null, 1.0)
        .map_err(|e| e.to_string())?;
    let mse = (&back.x - &clean.x).mapv(|v| v * v).mean().unwrap_or(f64::NAN);
    let secs = started.elapsed().as_secs_f64();
    let limit = fx.thresholds.inversion.max_mse;
    ensure(
        mse < limit && secs < fx.thresholds.budget.inversion_secs,
        format!("{n} images, {iters} refinements per step: MSE {mse:.2e} (< {limit:e}), {secs:.1}s"),
    )
}

fn disentanglement(fx: &Fixture) -> Check {
    let d = &fx.thresholds.disentanglement;
    let b = &fx.thresholds.budget;
    let mut passing = Vec::new();
    let mut factors = std::collections::BTreeSet::new();
    for (r, a) in fx.matrix.annotate().iter().enumerate() {
        let off = a.largest_off.map_or(0.0, |o| o.1.abs());
        if a.diagonal >= d.min_diagonal_pp && off <= d.max_off_diagonal_pp {
            passing.push(format!("{} {}:{:+.1}/{:.1}", fx.matrix.rows[r], fx.matrix.cols[a.matched], a.diagonal, off));
            factors.insert(fx.matrix.group_of(a.matched));
        }
    }
    let within_budget = fx.pretrain_secs <= b.pretrain_secs && fx.discover_secs <= b.discover_secs;
    ensure(
        passing.len() >= d.min_aligned && factors.len() >= d.min_aligned && within_budget,
        format!(
            "{} rows with diagonal >= {} pp and |off| <= {} pp over {} factors [{}]; pretrain {:.0}s, discover {:.0}s",
            passing.len(),
            d.min_diagonal_pp,
            d.max_off_diagonal_pp,
            factors.len(),
            passing.join(", "),
            fx.pretrain_secs,
            fx.discover_secs
        ),
    )
}

fn interpolation_monotonicity(fx: &Fixture) -> Check {
    let m = &fx.thresholds.monotonicity;
    let editor = fx.editor();
    let scales = &fx.config.edit.strip_scales;
    let mut parts = Vec::new();
    let mut ok = true;
    for &(k, col) in &fx.aligned {
        let mut monotone = 0;
        let mut strict = 0;
        for s in 0..m.strips {
            let strip = editor
                .interpolation_strip(&Init::Seeds(vec![s]), k, scales, TimeWindow::FULL)
                .map_err(|e| e.to_string())?;
            let rows: Vec<_> = strip.iter().map(|st| st.x.row(0)).collect();
            let x = ndarray::stack(Axis(0), &rows).map_err(|e| e.to_string())?;
            let p: Vec<f64> = fx.probe.classify(&x).column(col).to_vec();
            if is_monotone(&p, true, m.tolerance) {
                monotone += 1;
            }
            if is_monotone(&p, true, 0.0) {
                strict += 1;
            }
        }
        ok &= monotone >= m.min_monotone;
        parts.push(format!(
            "d{k} {}: {monotone}/{} ({strict} with no tolerance)",
            fx.matrix.cols[col],
            m.strips
        ));
    }
    ensure(
        ok && !fx.aligned.is_empty(),
        format!(
            "scales {scales:?}, tolerance {:e}, monotone strips {} (need >= {})",
            m.tolerance,
            parts.join(", "),
            m.min_monotone
        ),
    )
}

fn mean_col_delta(fx: &Fixture, editor: &Editor, init: &Init, edits: &EditSet, base: &Array2<f64>, col: usize) -> std::result::Result<f64, String> {
    let out = editor
        .sample_edited(init, &Condition::Null, 1.0, edits)
        .map_err(|e| e.to_string())?;
    let p = fx.probe.classify(&out.image.x);
    Ok(100.0 * (p.column(col).to_owned() - base.column(col)).mean().unwrap_or(0.0))
}

fn composition(fx: &Fixture) -> Check {
    if fx.aligned.len() < 2 {
        return Err("fewer than two factor-aligned directions".into());
    }
    let (ka, ca) = fx.aligned[0];
    let (kb, cb) = fx.aligned[1];
    let scale = fx.config.edit.scale;
    let editor = fx.editor();
    let init = Init::Seeds(fx.config.eval.eval_seeds());
    let base_x = editor.sample(&init, &Condition::Null, 1.0).map_err(|e| e.to_string())?;
    let base = fx.probe.classify(&base_x.x);
    let a = EditSet::single(fx.edit(ka, scale));
    let b = EditSet::single(fx.edit(kb, scale));
    let ab = EditSet::new(vec![fx.edit(ka, scale), fx.edit(kb, scale)]);
    let ba = EditSet::new(vec![fx.edit(kb, scale), fx.edit(ka, scale)]);
    let single_a = mean_col_delta(fx, &editor, &init, &a, &base, ca)?;
    let single_b = mean_col_delta(fx, &editor, &init, &b, &base, cb)?;
    let both_a = mean_col_delta(fx, &editor, &init, &ab, &base, ca)?;
    let both_b = mean_col_delta(fx, &editor, &init, &ab, &base, cb)?;
    let out_ab = editor.sample_edited(&init, &Condition::Null, 1.0, &ab).map_err(|e| e.to_string())?;
    let out_ba = editor.sample_edited(&init, &Condition::Null, 1.0, &ba).map_err(|e| e.to_string())?;
    let same_order = bits(&out_ab.image.x) == bits(&out_ba.image.x);
    let f = fx.thresholds.composition.min_fraction;
    let ok = single_a > 0.0 && single_b > 0.0 && both_a >= f * single_a && both_b >= f * single_b && same_order;
    ensure(
        ok,
        format!(
            "{}: single {single_a:+.1} pp, combined {both_a:+.1} pp; {}: single {single_b:+.1} pp, combined {both_b:+.1} pp (need >= {:.0}%); order-independent bytes {same_order}",
            fx.matrix.cols[ca],
            fx.matrix.cols[cb],
            100.0 * f
        ),
    )
}

/// Scale at which `direction` moves `col` by `target` pp on `seeds`, found by
/// doubling then bisection on the magnitude, with the sign that helps.
fn matching_scale(
    fx: &Fixture,
    editor: &Editor,
    seeds: &[u64],
    direction: usize,
    col: usize,
    target: f64,
) -> std::result::Result<Option<f64>, String> {
    let init = Init::Seeds(seeds.to_vec());
    let base_x = editor.sample(&init, &Condition::Null, 1.0).map_err(|e| e.to_string())?;
    let base = fx.probe.classify(&base_x.x);
    let delta = |lambda: f64| {
        mean_col_delta(fx, editor, &init, &EditSet::single(fx.edit(direction, lambda)), &base, col)
    };
    let unit = fx.config.edit.scale;
    let sign = if delta(unit)? >= delta(-unit)? { 1.0 } else { -1.0 };
    let mut lo = 0.0;
    let mut hi = unit;
    let mut found = false;
    for _ in 0..6 {
        if delta(sign * hi)? >= target {
            found = true;
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    if !found {
        return Ok(None);
    }
    for _ in 0..20 {
        let mid = 0.5 * (lo + hi);
        if delta(sign * mid)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(sign * hi))
}

fn coherence_trend(fx: &Fixture) -> Check {
    let c = &fx.thresholds.coherence;
    let seeds: Vec<u64> = (0..c.seeds).map(|s| 5000 + s).collect();
    let init = Init::Seeds(seeds.clone());
    let editor = fx.editor();
    let base = editor.sample(&init, &Condition::Null, 1.0).map_err(|e| e.to_string())?;
    let scale = fx.config.edit.scale;
    let mut parts = Vec::new();
    let mut ok = !fx.aligned.is_empty();
    for &(k, col) in &fx.aligned {
        // Distance grows with |lambda| (averaged over both signs).
        let mut curve = Vec::new();
        for &m in &c.magnitudes {
            let mut total = 0.0;
            for sign in [1.0, -1.0] {
                let out = editor
                    .sample_edited(&init, &Condition::Null, 1.0, &EditSet::single(fx.edit(k, sign * m)))
                    .map_err(|e| e.to_string())?;
                let d = perceptual_distances(&base.x, &out.image.x, &fx.probe).map_err(|e| e.to_string())?;
                total += d.mean().unwrap_or(0.0);
            }
            curve.push(total / 2.0);
        }
        let increasing = curve.windows(2).all(|w| w[1] > w[0]);

        // Random direction of equal norm, scaled to the same probe delta.
        let row = fx.discovery.bank.row(k).map_err(|e| e.to_string())?.to_owned();
        let norm = row.dot(&row).sqrt();
        let disc_out = editor
            .sample_edited(&init, &Condition::Null, 1.0, &EditSet::single(fx.edit(k, scale)))
            .map_err(|e| e.to_string())?;
        let disc_p = fx.probe.classify(&disc_out.image.x);
        let base_p = fx.probe.classify(&base.x);
        let target = 100.0 * (disc_p.column(col).to_owned() - base_p.column(col)).mean().unwrap_or(0.0);
        let disc_d = perceptual_distances(&base.x, &disc_out.image.x, &fx.probe).map_err(|e| e.to_string())?;

        let mut matched = None;
        for attempt in 0..5u64 {
            let mut rng = seed::stream(attempt, "acceptance/random-direction");
            // Drawn from the orthogonal complement of the direction under test.
            let unit = &row / norm;
            let g = Array1::from(seed::gaussian_vec(&mut rng, row.len()));
            let r = &g - &(&unit * g.dot(&unit));
            let r = &r * (norm / r.dot(&r).sqrt());
            let mut emb = Array2::zeros((2, row.len()));
            emb.row_mut(0).assign(&row);
            emb.row_mut(1).assign(&r);
            let bank = DirectionBank::from_embeddings(emb, 0).map_err(|e| e.to_string())?;
            let rand_editor = Editor::new(&fx.model, &bank, &fx.schedule, &fx.grid).map_err(|e| e.to_string())?;
            if let Some(lambda) = matching_scale(fx, &rand_editor, &seeds, 1, col, target)? {
                let out = rand_editor
                    .sample_edited(&init, &Condition::Null, 1.0, &EditSet::single(fx.edit(1, lambda)))
                    .map_err(|e| e.to_string())?;
                let d = perceptual_distances(&base.x, &out.image.x, &fx.probe).map_err(|e| e.to_string())?;
                matched = Some((attempt, lambda, d));
                break;
            }
        }
        let Some((attempt, lambda, rand_d)) = matched else {
            ok = false;
            parts.push(format!("d{k}: no random direction reached {target:+.1} pp"));
            continue;
        };
        let wins = disc_d.iter().zip(rand_d.iter()).filter(|(a, b)| a < b).count();
        let mean_diff = (&disc_d - &rand_d).mean().unwrap_or(0.0);
        ok &= increasing && wins >= c.min_wins && mean_diff < 0.0;
        parts.push(format!(
            "d{k} {}: distance at |lambda| {:?} = [{}] increasing {increasing}; at {target:+.1} pp discovered {:.4} vs random#{attempt} (lambda {lambda:.2}) {:.4}, wins {wins}/{} (need >= {})",
            fx.matrix.cols[col],
            c.magnitudes,
            curve.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", "),
            disc_d.mean().unwrap_or(0.0),
            rand_d.mean().unwrap_or(0.0),
            seeds.len(),
            c.min_wins
        ));
    }
    ensure(ok, parts.join("; "))
}

// ---------------------------------------------------------------------------

fn run(name: &str, results: &mut Vec<bool>, f: impl FnOnce() -> Check) {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(msg)
    });
    let secs = started.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
        Err(detail) => println!("FAIL  {name} ({secs:.1}s): {detail}"),
    }
    results.push(outcome.is_ok());
}

fn main() {
    let mut results = Vec::new();
    run("loss-oracle equivalence", &mut results, loss_oracle);
    run("hand-computed loss cases", &mut results, hand_computed_cases);
    run("gradient checks", &mut results, gradient_checks);

    let fixture = catch_unwind(build_fixture);
    match &fixture {
        Ok(fx) => {
            run("no-op edit identity", &mut results, || no_op_identity(fx));
            run("seed reproducibility", &mut results, || seed_reproducibility(fx));
            run("inversion round trip", &mut results, || inversion_round_trip(fx));
            run("disentanglement at toy scale", &mut results, || disentanglement(fx));
            run("interpolation monotonicity", &mut results, || interpolation_monotonicity(fx));
            run("composition", &mut results, || composition(fx));
            run("coherence trend", &mut results, || coherence_trend(fx));
            run("frozen-denoiser guarantee", &mut results, || frozen_denoiser(fx));
        }
        Err(_) => {
            for name in [
                "no-op edit identity",
                "seed reproducibility",
                "inversion round trip",
                "disentanglement at toy scale",
                "interpolation monotonicity",
                "composition",
                "coherence trend",
                "frozen-denoiser guarantee",
            ] {
                println!("FAIL  {name}: fixture could not be built");
                results.push(false);
            }
        }
    }
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
