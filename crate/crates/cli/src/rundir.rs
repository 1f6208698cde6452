use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::failure::Failure;

pub const RUN_ROOT_ENV: &str = "PERSONA_LAB_RUNS";

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Creates an empty output directory. An existing one is only replaced
/// with `force`.
pub fn create(dir: &Path, force: bool) -> Result<(), Failure> {
    if dir.exists() {
        if !force {
            return Err(Failure::usage(format!(
                "{} already exists; pass --force to replace it",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub subcommand: &'a str,
    pub config_path: Option<&'a Path>,
    pub config: &'a RunConfig,
    pub output_dir: &'a Path,
    pub version: &'a str,
}

/// Writes `config.json` (reusable with `--config`) and `manifest.json`.
pub fn write_manifest(
    dir: &Path,
    subcommand: &str,
    config_path: Option<&Path>,
    config: &RunConfig,
) -> Result<(), Failure> {
    std::fs::write(dir.join("config.json"), config.to_json())?;
    let manifest = RunManifest {
        subcommand,
        config_path,
        config,
        output_dir: dir,
        version: env!("CARGO_PKG_VERSION"),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Failure::data)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}
