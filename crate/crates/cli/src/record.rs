use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hitdvae::pipeline::RunConfig;
use hitdvae::trainer::build_id;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(hitdvae::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// A validated run config and the hash of the file it came from.
pub fn load_config(path: &Path) -> CliResult<(RunConfig, String)> {
    let config: RunConfig = read_json(path)?;
    config.validate()?;
    Ok((config, sha256_file(path)?))
}

/// What a command was run with: enough to repeat it exactly.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: &'static str,
    pub build: String,
    pub seed: u64,
    pub config: Value,
    pub arguments: BTreeMap<&'static str, Value>,
    /// Input path → SHA-256.
    pub inputs: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(command: &'static str, seed: u64, config: impl Serialize) -> CliResult<Self> {
        Ok(Self {
            command,
            build: build_id(),
            seed,
            config: serde_json::to_value(config).map_err(hitdvae::Error::from)?,
            arguments: BTreeMap::new(),
            inputs: BTreeMap::new(),
        })
    }

    pub fn arg(mut self, name: &'static str, value: impl Serialize) -> Self {
        self.arguments
            .insert(name, serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }

    pub fn input(mut self, path: &Path, sha256: String) -> Self {
        self.inputs.insert(path.display().to_string(), sha256);
        self
    }

    pub fn input_file(self, path: &Path) -> CliResult<Self> {
        let hash = sha256_file(path)?;
        Ok(self.input(path, hash))
    }

    pub fn write(&self, path: PathBuf) -> CliResult<()> {
        write_json(&path, self)
    }
}
