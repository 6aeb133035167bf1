use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Loaded;
use crate::CliError;

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    command: &'a str,
    config_path: Option<String>,
    /// The config file exactly as read.
    config_text: &'a str,
    /// Config after defaults and command-line overrides.
    effective_config: serde_json::Value,
    seeds: &'a [u64],
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects the files one command writes into its output directory.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Opens `name` for writing and records it.
    pub fn create(&mut self, name: &str) -> Result<fs::File, CliError> {
        let p = self.path(name);
        let f = fs::File::create(&p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        self.files.push(name.to_string());
        Ok(f)
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        use std::io::Write;
        self.create(name)?
            .write_all(contents)
            .map_err(|e| CliError::Runtime(format!("{name}: {e}")))
    }

    /// Writes `manifest.json` covering every recorded output.
    pub fn finish(
        self,
        command: &str,
        loaded: &Loaded,
        effective: &impl Serialize,
        seeds: &[u64],
        inputs: &[PathBuf],
    ) -> Result<(), CliError> {
        let digest = |p: &Path, shown: String| -> Result<FileDigest, CliError> {
            Ok(FileDigest {
                path: shown,
                sha256: sha256_file(p)?,
            })
        };
        let mut input_digests = Vec::new();
        for p in inputs {
            input_digests.push(digest(p, p.display().to_string())?);
        }
        if let Some(c) = &loaded.path {
            input_digests.push(digest(c, c.display().to_string())?);
        }
        let mut outputs = Vec::new();
        for f in &self.files {
            outputs.push(digest(&self.path(f), f.clone())?);
        }
        let m = Manifest {
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_path: loaded.path.as_ref().map(|p| p.display().to_string()),
            config_text: &loaded.text,
            effective_config: serde_json::to_value(effective).map_err(|e| CliError::Runtime(e.to_string()))?,
            seeds,
            inputs: input_digests,
            outputs,
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(self.path("manifest.json"), text + "\n")
            .map_err(|e| CliError::Runtime(format!("manifest.json: {e}")))
    }
}
