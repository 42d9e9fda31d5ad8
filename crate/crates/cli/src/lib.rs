//! Command-line workflow and HTTP service over a run directory:
//! `config.toml`, `model.bin`, `bank.bin`, `probe.json` and one
//! `<command>.manifest.json` per subcommand.

pub mod artifacts;
pub mod commands;
pub mod service;
pub mod wire;

use latent_directions::error::Error;

/// Process exit code for a failed command, by error category.
pub fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "invalid-argument" => 3,
        "config" => 4,
        "missing-artifact" => 5,
        "format" => 6,
        "contract" => 7,
        "degenerate-input" => 8,
        "ingestion" => 9,
        "evaluation" => 10,
        "io" => 11,
        _ => 1,
    }
}
