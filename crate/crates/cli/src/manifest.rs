//! Per-run provenance record written next to the outputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub core_version: String,
    pub config_sha256: String,
    /// Resolved config with overrides applied; `--config` accepts this file
    /// to replay the run.
    pub config_toml: String,
    pub seeds: serde_json::Value,
    pub threads: usize,
    pub started: String,
    pub finished: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

pub fn sha256_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Tracks the files a command reads and writes.
pub struct RunContext {
    pub cfg: RunConfig,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl RunContext {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        std::fs::create_dir_all(&cfg.output_dir)
            .with_context(|| format!("cannot create output directory {}", cfg.output_dir.display()))?;
        Ok(RunContext {
            cfg,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Records an input file, failing with the config key if it is absent.
    pub fn input(&mut self, path: &Path, key: &str) -> Result<PathBuf> {
        if !path.exists() {
            anyhow::bail!("{key}: file {} does not exist", path.display());
        }
        if !self.inputs.iter().any(|p| p == path) {
            self.inputs.push(path.to_path_buf());
        }
        Ok(path.to_path_buf())
    }

    /// Opens an output file under the output directory.
    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.cfg.output(name);
        let f = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        self.outputs.push(path);
        Ok(BufWriter::new(f))
    }

    /// Registers a file written by other means.
    pub fn produced(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn outputs(&self) -> &[PathBuf] {
        &self.outputs
    }

    pub fn finish(self, command: &str, started: String) -> Result<PathBuf> {
        let cfg = &self.cfg;
        let config_toml = toml::to_string(cfg).context("cannot serialize the resolved config")?;
        let digest = |paths: &[PathBuf]| -> Result<Vec<FileDigest>> {
            paths
                .iter()
                .map(|p| {
                    Ok(FileDigest {
                        path: p.display().to_string(),
                        sha256: sha256_file(p)?,
                    })
                })
                .collect()
        };
        let manifest = RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            core_version: pmspace::VERSION.to_string(),
            config_sha256: sha256_text(&config_toml),
            config_toml,
            seeds: serde_json::json!({
                "cv": cfg.cv.seed,
                "visibility": cfg.visibility.seed,
                "synth": cfg.synth.seed,
            }),
            threads: rayon::current_num_threads(),
            started,
            finished: now(),
            inputs: digest(&self.inputs)?,
            outputs: digest(&self.outputs)?,
        };
        let path = cfg.output(&format!("manifest_{}.json", command.replace('-', "_")));
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("cannot create {}", path.display()))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(path)
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
