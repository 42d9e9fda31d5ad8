use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use latent_directions::config::EditDefaults;
use latent_directions::edit::{EditSet, EditSpec};
use latent_directions::error::{Error, Result};
use latent_directions_cli::artifacts::{read_config, RunDir};
use latent_directions_cli::commands::{self, EditInput};
use latent_directions_cli::{exit_code, service};

#[derive(Parser)]
#[command(name = "latent-directions", version, about = "Discover and apply editing directions in a diffusion denoiser")]
struct Cli {
    /// Run directory holding the config, model, bank and manifests.
    #[arg(long, global = true, env = "LATENT_DIRECTIONS_RUN", default_value = ".")]
    run: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser on the configured dataset.
    TrainDenoiser {
        /// Config to copy into the run first.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Learn a direction bank against the frozen denoiser.
    Discover {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render one generated image with at most one edit, or replay a sidecar.
    Edit {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, requires = "scale")]
        direction: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
        /// full, fine, coarse or START-END.
        #[arg(long, default_value = "full")]
        window: String,
        /// Sidecar to re-render instead.
        #[arg(long, conflicts_with_all = ["direction", "scale"])]
        replay: Option<PathBuf>,
        /// Source image of a replayed image edit.
        #[arg(long, requires = "replay")]
        image: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
    /// Render one generated image with several edits at once.
    Compose {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// DIRECTION:SCALE[:WINDOW], repeatable.
        #[arg(long = "edit", required = true)]
        edits: Vec<String>,
        #[command(flatten)]
        out: Out,
    },
    /// Invert a real image and regenerate it with edits.
    InvertEdit {
        #[arg(long)]
        image: PathBuf,
        /// DIRECTION:SCALE[:WINDOW], repeatable.
        #[arg(long = "edit")]
        edits: Vec<String>,
        #[command(flatten)]
        out: Out,
    },
    /// Probe-probability changes per direction over the evaluation seeds.
    Rescore {
        /// Comma-separated direction ids; all when omitted.
        #[arg(long, value_delimiter = ',')]
        directions: Vec<usize>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        window: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diversity diagnostics and the run's manifests, as JSON.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the run over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Upload store; defaults to `<run>/uploads`.
        #[arg(long)]
        uploads: Option<PathBuf>,
        /// Seconds an upload stays available.
        #[arg(long, default_value_t = 3600)]
        upload_ttl: u64,
    },
}

#[derive(Args)]
struct Out {
    /// Output PNG; the sidecar goes to `<out>.json`.
    #[arg(long, default_value = "edit.png")]
    out: PathBuf,
}

fn edit_defaults(run: &RunDir) -> Result<EditDefaults> {
    Ok(read_config(&run.config())?.edit)
}

fn parse_edits(run: &RunDir, raw: &[String]) -> Result<EditSet> {
    let defaults = edit_defaults(run)?;
    let specs = raw
        .iter()
        .map(|e| commands::parse_edit(e, &defaults))
        .collect::<Result<Vec<EditSpec>>>()?;
    Ok(EditSet::new(specs))
}

fn print<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn run(cli: Cli) -> Result<()> {
    let run = RunDir::new(cli.run);
    match cli.command {
        Command::TrainDenoiser { config } => print(&commands::train_denoiser_cmd(&run, config.as_deref())?),
        Command::Discover { config } => print(&commands::discover_cmd(&run, config.as_deref())?),
        Command::Edit {
            seed,
            direction,
            scale,
            window,
            replay,
            image,
            out,
        } => {
            let summary = match replay {
                Some(sidecar) => commands::replay_cmd(&run, &sidecar, image.as_deref(), &out.out)?,
                None => {
                    let edits = match (direction, scale) {
                        (Some(k), Some(s)) => {
                            let w = commands::parse_window(&window, &edit_defaults(&run)?)?;
                            EditSet::single(EditSpec::new(k, s, w))
                        }
                        _ => EditSet::default(),
                    };
                    commands::edit_cmd(&run, "edit", &EditInput::Seed(seed), edits, &out.out)?
                }
            };
            print(&summary);
        }
        Command::Compose { seed, edits, out } => {
            let edits = parse_edits(&run, &edits)?;
            print(&commands::edit_cmd(&run, "compose", &EditInput::Seed(seed), edits, &out.out)?);
        }
        Command::InvertEdit { image, edits, out } => {
            let edits = parse_edits(&run, &edits)?;
            print(&commands::edit_cmd(&run, "invert-edit", &EditInput::Image(image), edits, &out.out)?);
        }
        Command::Rescore {
            directions,
            scale,
            window,
            out,
        } => print(&commands::rescore_cmd(&run, &directions, scale, window.as_deref(), out.as_deref())?),
        Command::Report { out } => print(&commands::report_cmd(&run, out.as_deref())?),
        Command::Serve {
            addr,
            uploads,
            upload_ttl,
        } => {
            let uploads = uploads.unwrap_or_else(|| run.root.join("uploads"));
            let rt = tokio::runtime::Runtime::new().map_err(Error::Io)?;
            rt.block_on(service::serve(run, &addr, &uploads, Duration::from_secs(upload_ttl)))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
