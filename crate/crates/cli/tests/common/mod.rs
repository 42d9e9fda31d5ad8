#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

pub const BIN: &str = env!("CARGO_BIN_EXE_latent-directions");

pub fn fixture_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

pub fn cli(run: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--run")
        .arg(run)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn ok(run: &Path, args: &[&str]) -> Output {
    let out = cli(run, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A trained run shared by every test in one test binary. Tests must not
/// modify it; copy it with `copy_run` first.
pub fn trained_run() -> &'static Path {
    static RUN: OnceLock<tempfile::TempDir> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let config = fixture_config();
        ok(dir.path(), &["train-denoiser", "--config", config.to_str().unwrap()]);
        ok(dir.path(), &["discover"]);
        dir
    })
    .path()
}

pub fn copy_run(to: &Path) {
    for name in ["config.toml", "model.bin", "bank.bin", "discover.manifest.json"] {
        std::fs::copy(trained_run().join(name), to.join(name)).expect("copy artifact");
    }
}

pub fn sha256_file(path: &Path) -> String {
    latent_directions_cli::artifacts::sha256_hex(&std::fs::read(path).expect("readable"))
}
