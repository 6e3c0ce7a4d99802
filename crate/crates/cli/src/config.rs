//! TOML experiment configuration and content-addressed output directories.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ctc_adapt::adapt::experiment::ExperimentConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Loads `path`, or the named preset when no file is given.
pub fn load_config(path: Option<&Path>, preset: &str) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse_config(&text).with_context(|| format!("parsing config {}", p.display()))
        }
        None => match ExperimentConfig::preset(preset) {
            Some(c) => Ok(c),
            None => bail!("unknown preset {preset:?}; expected desk or desk-tiny"),
        },
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    Ok(toml::from_str(text)?)
}

pub fn render_config(config: &ExperimentConfig) -> Result<String> {
    Ok(toml::to_string_pretty(config)?)
}

/// First 16 hex digits of the SHA-256 of the value's JSON form.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serializable");
    hex::encode(Sha256::digest(json))[..16].to_string()
}

/// `root/<prefix>-<hash>`, created if missing.
pub fn content_dir<T: Serialize>(root: &Path, prefix: &str, value: &T) -> Result<PathBuf> {
    let dir = root.join(format!("{prefix}-{}", content_hash(value)));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
