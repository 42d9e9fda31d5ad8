//! The workflow subcommands. Each writes its artifacts into the run
//! directory and records a `<command>.manifest.json` next to them.

use std::path::{Path, PathBuf};
use std::time::Instant;

use latent_directions::bank::save_bank;
use latent_directions::config::{parse_config, EditDefaults, ExperimentConfig};
use latent_directions::contrastive::{discover, DiscoverOptions};
use latent_directions::denoiser::{load_model, save_model, train_denoiser, NoisePredictor};
use latent_directions::edit::{EditSet, EditSpec, TimeWindow};
use latent_directions::error::{Error, Result};
use latent_directions::eval::{diversity_report, rescore, train_probe, DiversityReport, EvalSet, MlpProbe};
use latent_directions::manifest::{write_manifest, ArtifactRecord, OutputRecord, RunManifest};
use latent_directions::schedule::NoiseSchedule;
use serde::Serialize;

use crate::artifacts::{image_from_bytes, read_config, sha256_hex, Loaded, RunDir};
use crate::wire::{Sidecar, Source};

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// `full`, `fine`, `coarse` or `<start>-<end>` in fractions of `T`.
pub fn parse_window(text: &str, defaults: &EditDefaults) -> Result<TimeWindow> {
    match text {
        "full" => Ok(TimeWindow::FULL),
        "fine" => Ok(defaults.fine_window),
        "coarse" => Ok(defaults.coarse_window),
        _ => {
            let (a, b) = text
                .split_once('-')
                .ok_or_else(|| invalid(format!("window `{text}`: expected full, fine, coarse or START-END")))?;
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| invalid(format!("window `{text}`: `{s}` is not a number")))
            };
            TimeWindow::new(num(a)?, num(b)?)
        }
    }
}

/// `<direction>:<scale>[:<window>]`.
pub fn parse_edit(text: &str, defaults: &EditDefaults) -> Result<EditSpec> {
    let mut parts = text.splitn(3, ':');
    let bad = || invalid(format!("edit `{text}`: expected DIRECTION:SCALE[:WINDOW]"));
    let direction = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let scale = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let window = match parts.next() {
        Some(w) => parse_window(w, defaults)?,
        None => TimeWindow::FULL,
    };
    Ok(EditSpec::new(direction, scale, window))
}

fn finish(mut manifest: RunManifest, started: Instant, path: &Path) -> Result<()> {
    manifest.finalize(started.elapsed().as_secs_f64())?;
    write_manifest(&manifest, path)
}

fn relative(run: &RunDir, path: &Path) -> String {
    path.strip_prefix(&run.root)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

/// Reads the run's config, first copying `config` into the run when given.
pub fn prepare_config(run: &RunDir, config: Option<&Path>) -> Result<ExperimentConfig> {
    if let Some(src) = config {
        let text = std::fs::read_to_string(src).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(src.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let parsed = parse_config(&text)?;
        std::fs::create_dir_all(&run.root)?;
        std::fs::write(run.config(), text)?;
        return Ok(parsed);
    }
    read_config(&run.config())
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub model_checksum: String,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

pub fn train_denoiser_cmd(run: &RunDir, config: Option<&Path>) -> Result<TrainSummary> {
    let started = Instant::now();
    let config = prepare_config(run, config)?;
    let schedule = NoiseSchedule::new(config.schedule.clone())?;
    let dataset = config.load_dataset(&run.root)?;
    let (model, report) = train_denoiser(&dataset, &schedule, &config.denoiser, config.seed)?;
    save_model(&model, &run.model())?;

    let mut manifest = RunManifest::new("train-denoiser", config.hash());
    manifest.record_seed("global", config.seed)?;
    for &l in &report.loss_trace {
        manifest.push_loss(l)?;
    }
    manifest.add_artifact("model", ArtifactRecord::from_bytes("model.bin", &std::fs::read(run.model())?))?;
    manifest.add_note("schedule", schedule.id())?;
    manifest.add_note("initial_eval_loss", report.initial_eval_loss.to_string())?;
    manifest.add_note("final_eval_loss", report.final_eval_loss.to_string())?;
    finish(manifest, started, &run.manifest("train-denoiser"))?;
    Ok(TrainSummary {
        model_checksum: model.param_checksum(),
        initial_eval_loss: report.initial_eval_loss,
        final_eval_loss: report.final_eval_loss,
    })
}

#[derive(Debug, Serialize)]
pub struct DiscoverSummary {
    pub directions: usize,
    pub final_loss: Option<f64>,
    pub bank_sha256: String,
}

pub fn discover_cmd(run: &RunDir, config: Option<&Path>) -> Result<DiscoverSummary> {
    let config = prepare_config(run, config)?;
    let schedule = NoiseSchedule::new(config.schedule.clone())?;
    let model = load_model(&run.model())?;
    if model.schedule_id() != schedule.id() {
        return Err(invalid(format!(
            "model was trained under schedule {}, config declares {}",
            model.schedule_id(),
            schedule.id()
        )));
    }
    let dataset = config.load_dataset(&run.root)?;
    let options = DiscoverOptions {
        config_hash: Some(config.hash()),
        checkpoint_dir: (config.trainer.checkpoint_every > 0).then(|| run.root.join("checkpoints")),
    };
    let discovery = discover(&model, &schedule, &dataset.unlabeled(), &config.trainer, &options)?;
    save_bank(&discovery.bank, &run.bank())?;
    write_manifest(&discovery.manifest, &run.manifest("discover"))?;
    Ok(DiscoverSummary {
        directions: discovery.bank.len(),
        final_loss: discovery.manifest.loss_trace.last().copied(),
        bank_sha256: sha256_hex(&discovery.bank.to_bytes()),
    })
}

/// Where an edit starts: a seed, or an image file for inversion editing.
#[derive(Clone, Debug)]
pub enum EditInput {
    Seed(u64),
    Image(PathBuf),
}

#[derive(Debug, Serialize)]
pub struct EditSummary {
    pub image: PathBuf,
    pub sidecar: PathBuf,
}

/// Path of the sidecar written next to a rendered image.
pub fn sidecar_path(image: &Path) -> PathBuf {
    let mut name = image.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    image.with_file_name(name)
}

/// Renders `edits` from `input` into `out` (a 16-bit PNG) plus its sidecar.
pub fn edit_cmd(
    run: &RunDir,
    command: &str,
    input: &EditInput,
    edits: EditSet,
    out: &Path,
) -> Result<EditSummary> {
    let started = Instant::now();
    let loaded = Loaded::open(run, None)?;
    let (source, image) = match input {
        EditInput::Seed(seed) => (Source::Seed { seed: *seed }, None),
        EditInput::Image(path) => {
            let bytes = std::fs::read(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingArtifact(path.clone()),
                _ => Error::Io(e),
            })?;
            let (state, id) = image_from_bytes(&bytes, &loaded.config)?;
            (Source::Image { image_id: id }, Some(state))
        }
    };
    let rendered = loaded.render(&source, &edits, image.as_ref())?;
    write_rendered(&rendered.png, &rendered.sidecar, out)?;

    let mut manifest = RunManifest::new(command, loaded.config.hash());
    manifest.record_seed("global", loaded.config.seed)?;
    if let Source::Seed { seed } = source {
        manifest.record_seed("sample/init", seed)?;
    }
    manifest.add_output(OutputRecord {
        kind: "image".into(),
        artifact: ArtifactRecord::from_bytes(relative(run, out), &rendered.png),
        inputs: vec![loaded.model_checksum.clone(), loaded.bank_sha256.clone()],
    })?;
    finish(manifest, started, &run.manifest(command))?;
    Ok(EditSummary {
        image: out.to_path_buf(),
        sidecar: sidecar_path(out),
    })
}

fn write_rendered(png: &[u8], sidecar: &Sidecar, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, png)?;
    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    std::fs::write(sidecar_path(out), json)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: format!("at `{}`: {}", e.path(), e.inner()),
    })
}

/// Re-renders a sidecar. Image sources need the original image file, whose
/// content hash must match the recorded id.
pub fn replay_cmd(run: &RunDir, sidecar: &Path, image: Option<&Path>, out: &Path) -> Result<EditSummary> {
    let record = read_sidecar(sidecar)?;
    let loaded = Loaded::open(run, None)?;
    loaded.check_sidecar(&record)?;
    let input = match (&record.source, image) {
        (Source::Seed { seed }, _) => EditInput::Seed(*seed),
        (Source::Image { image_id }, Some(path)) => {
            let bytes = std::fs::read(path)?;
            if sha256_hex(&bytes) != *image_id {
                return Err(invalid(format!("{} is not image {image_id}", path.display())));
            }
            EditInput::Image(path.to_path_buf())
        }
        (Source::Image { image_id }, None) => {
            return Err(invalid(format!("sidecar edits image {image_id}; pass it with --image")));
        }
    };
    if let (Some(want), Source::Image { .. }) = (record.refine_iters, &record.source) {
        if want != loaded.config.edit.inversion_refine_iters {
            return Err(invalid(format!(
                "sidecar used {want} inversion refinements, config has {}",
                loaded.config.edit.inversion_refine_iters
            )));
        }
    }
    drop(loaded);
    edit_cmd(run, "replay", &input, EditSet::new(record.edits), out)
}

fn load_or_train_probe(run: &RunDir, config: &ExperimentConfig) -> Result<MlpProbe> {
    let path = run.probe();
    if path.exists() {
        return MlpProbe::load(&path);
    }
    let (probe, report) = train_probe(&config.probe_dataset()?, &config.eval.probe, config.seed)?;
    log::info!("probe held-out accuracy {:?}", report.accuracy);
    probe.save(&path)?;
    Ok(probe)
}

#[derive(Debug, Serialize)]
pub struct RescoreSummary {
    pub matrix: PathBuf,
    pub rows: usize,
    pub cols: usize,
}

/// Rescore matrix over `directions` (all when empty) at `scale` inside
/// `window`, written as CSV.
pub fn rescore_cmd(
    run: &RunDir,
    directions: &[usize],
    scale: Option<f64>,
    window: Option<&str>,
    out: Option<&Path>,
) -> Result<RescoreSummary> {
    let started = Instant::now();
    let loaded = Loaded::open(run, None)?;
    let config = &loaded.config;
    let probe = load_or_train_probe(run, config)?;
    let scale = scale.unwrap_or(config.edit.scale);
    let window = match window {
        Some(w) => parse_window(w, &config.edit)?,
        None => TimeWindow::FULL,
    };
    let ids: Vec<usize> = if directions.is_empty() {
        (0..loaded.bank.len()).collect()
    } else {
        directions.to_vec()
    };
    let edits: Vec<EditSpec> = ids.iter().map(|&k| EditSpec::new(k, scale, window)).collect();
    let eval = EvalSet::Seeds(config.eval.eval_seeds());
    let matrix = rescore(&loaded.editor()?, &edits, &eval, &probe)?;
    let csv = matrix.to_csv();
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| run.root.join("rescore.csv"));
    std::fs::write(&out, &csv)?;

    let mut manifest = RunManifest::new("rescore", config.hash());
    manifest.record_seed("global", config.seed)?;
    manifest.add_artifact("probe", ArtifactRecord::from_bytes("probe.json", &std::fs::read(run.probe())?))?;
    manifest.add_output(OutputRecord {
        kind: "rescore-matrix".into(),
        artifact: ArtifactRecord::from_bytes(relative(run, &out), csv.as_bytes()),
        inputs: vec![loaded.model_checksum.clone(), loaded.bank_sha256.clone(), probe_id(&probe)],
    })?;
    finish(manifest, started, &run.manifest("rescore"))?;
    Ok(RescoreSummary {
        matrix: out,
        rows: matrix.rows.len(),
        cols: matrix.cols.len(),
    })
}

fn probe_id(probe: &MlpProbe) -> String {
    use latent_directions::eval::AttributeProbe;
    probe.id()
}

/// Self-consistency and overlap of every direction on the first
/// `eval.diversity_images` dataset rows.
pub fn diversity_for(loaded: &Loaded, run: &RunDir) -> Result<DiversityReport> {
    let config = &loaded.config;
    let dataset = config.load_dataset(&run.root)?;
    let n = config.eval.diversity_images.min(dataset.len());
    let images = dataset.x.slice(ndarray::s![..n, ..]).to_owned();
    diversity_report(
        &loaded.bank,
        &loaded.model,
        &loaded.schedule,
        &images,
        &config.eval.diversity_timesteps,
        config.eval.near_duplicate_threshold,
        config.seed,
    )
}

#[derive(Debug, Serialize)]
pub struct ManifestEntry {
    pub command: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub config_hash: String,
    pub schedule_id: String,
    pub model_checksum: String,
    pub bank_sha256: String,
    pub directions: usize,
    pub diversity: DiversityReport,
    pub manifests: Vec<ManifestEntry>,
}

/// Summary of a run: diversity diagnostics plus every manifest written so far.
pub fn report_cmd(run: &RunDir, out: Option<&Path>) -> Result<PathBuf> {
    let started = Instant::now();
    let loaded = Loaded::open(run, None)?;
    let diversity = diversity_for(&loaded, run)?;
    let mut manifests = Vec::new();
    for command in ["train-denoiser", "discover", "rescore", "edit", "compose", "invert-edit", "replay"] {
        let path = run.manifest(command);
        if let Ok(bytes) = std::fs::read(&path) {
            manifests.push(ManifestEntry {
                command: command.into(),
                path: relative(run, &path),
                sha256: sha256_hex(&bytes),
            });
        }
    }
    let report = Report {
        config_hash: loaded.config.hash(),
        schedule_id: loaded.schedule.id(),
        model_checksum: loaded.model_checksum.clone(),
        bank_sha256: loaded.bank_sha256.clone(),
        directions: loaded.bank.len(),
        diversity,
        manifests,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| run.root.join("report.json"));
    std::fs::write(&out, &json)?;

    let mut manifest = RunManifest::new("report", loaded.config.hash());
    manifest.add_output(OutputRecord {
        kind: "report".into(),
        artifact: ArtifactRecord::from_bytes(relative(run, &out), json.as_bytes()),
        inputs: report.manifests.iter().map(|m| m.sha256.clone()).collect(),
    })?;
    finish(manifest, started, &run.manifest("report"))?;
    Ok(out)
}
