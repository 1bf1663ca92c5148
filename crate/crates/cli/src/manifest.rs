use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::Config;

#[derive(Serialize)]
struct Versions {
    augnerf: &'static str,
    config: u32,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: Vec<String>,
    seed: u64,
    config_sha256: String,
    versions: Versions,
}

/// Write `manifest.json` and the resolved `config.toml` into `out`.
pub fn write(out: &Path, command: &str, seed: u64, config: &Config) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = Manifest {
        command,
        args: std::env::args().skip(1).collect(),
        seed,
        config_sha256: config.digest(),
        versions: Versions {
            augnerf: env!("CARGO_PKG_VERSION"),
            config: config.version,
        },
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    let path = out.join("config.toml");
    std::fs::write(&path, config.to_toml())
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
