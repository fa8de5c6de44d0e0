use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mlh_core::format::{write_atomic, FORMAT_VERSION};
use serde::{Deserialize, Serialize};

use crate::args::Command;
use crate::error::CliError;

/// Everything needed to re-run one command and get the same artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub args: Command,
    /// Fully resolved configuration, including embedded config text.
    pub config: serde_json::Value,
    /// Relative paths in `args` resolve against this directory.
    pub working_dir: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    /// Magic to version for every binary format read or written.
    pub formats: BTreeMap<String, u32>,
    pub wall_clock_secs: f64,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(args: &Command, seed: u64) -> Self {
        RunManifest {
            subcommand: args.name().to_string(),
            args: args.clone(),
            config: serde_json::Value::Null,
            working_dir: std::env::current_dir().unwrap_or_default(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            formats: BTreeMap::new(),
            wall_clock_secs: 0.0,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn input(&mut self, path: &Path, magic: &[u8; 4]) {
        self.inputs.push(path.to_path_buf());
        self.format(magic);
    }

    pub fn output(&mut self, path: &Path, magic: Option<&[u8; 4]>) {
        self.outputs.push(path.to_path_buf());
        if let Some(m) = magic {
            self.format(m);
        }
    }

    fn format(&mut self, magic: &[u8; 4]) {
        self.formats
            .insert(String::from_utf8_lossy(magic).into_owned(), FORMAT_VERSION);
    }

    /// `<artifact>.manifest.json`
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        artifact.with_file_name(name)
    }

    pub fn write_next_to(&self, artifact: &Path) -> Result<PathBuf, CliError> {
        let path = Self::path_for(artifact);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&path, json.as_bytes()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Manifest(format!("{}: {e}", path.display())))
    }
}
