use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    /// Effective arguments after merging the config file.
    pub arguments: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<String>,
    pub excluded_replications: usize,
    pub nonconverged_replications: usize,
    pub warnings: Vec<String>,
    pub wall_time_seconds: f64,
}

pub struct Run {
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
    started: Instant,
}

impl Run {
    pub fn new(command: &str, arguments: Vec<String>, config: serde_json::Value, out_dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| CliError::io(format!("cannot create output directory `{}`: {e}", out_dir.display())))?;
        Ok(Self {
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION"),
                arguments,
                config,
                seed: None,
                threads: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                excluded_replications: 0,
                nonconverged_replications: 0,
                warnings: Vec::new(),
                wall_time_seconds: 0.0,
            },
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
        })
    }

    pub fn add_input(&mut self, path: &Path, bytes: &[u8]) {
        let digest = Sha256::digest(bytes);
        self.manifest.inputs.push(InputFile {
            path: path.display().to_string(),
            sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        });
    }

    pub fn warn(&mut self, message: String) {
        eprintln!("warning: {message}");
        self.manifest.warnings.push(message);
    }

    /// Creates `name` in the output directory, hands it to `write`, and
    /// records it.
    pub fn write_output<F>(&mut self, name: &str, write: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<(), CliError>,
    {
        let path = self.out_dir.join(name);
        let file = std::fs::File::create(&path)
            .map_err(|e| CliError::io(format!("cannot create `{}`: {e}", path.display())))?;
        let mut w = std::io::BufWriter::new(file);
        write(&mut w)?;
        std::io::Write::flush(&mut w).map_err(|e| CliError::io(e.to_string()))?;
        println!("{}", path.display());
        self.manifest.outputs.push(path.display().to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        self.write_output(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(|e| CliError::io(e.to_string()))?;
            std::io::Write::write_all(w, b"\n").map_err(|e| CliError::io(e.to_string()))
        })
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.manifest.wall_time_seconds = self.started.elapsed().as_secs_f64();
        let path = self.out_dir.join("run_manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::io(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(format!("cannot write `{}`: {e}", path.display())))?;
        println!("{}", path.display());
        Ok(())
    }
}
