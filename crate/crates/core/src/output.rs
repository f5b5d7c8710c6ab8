//! Run directories: config, manifest, summary, CSV traces and snapshots.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::{Error, Result};

/// 17 significant digits, enough to round-trip any f64.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// Wall times in milliseconds, keyed by stage.
    pub timings_ms: BTreeMap<String, f64>,
    pub files: Vec<String>,
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.to_json().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

/// Writer for one run directory; tracks every file it creates.
pub struct RunWriter {
    root: PathBuf,
    files: Vec<String>,
    timings: BTreeMap<String, f64>,
}

impl RunWriter {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(RunWriter {
            root: root.to_path_buf(),
            files: Vec::new(),
            timings: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let p = self.path(rel)?;
        let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(&p, e))?;
        text.push('\n');
        fs::write(&p, text).map_err(|e| io_err(&p, e))
    }

    pub fn write_csv(&mut self, rel: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let p = self.path(rel)?;
        let mut w = csv::Writer::from_path(&p).map_err(|e| io_err(&p, e))?;
        w.write_record(header).map_err(|e| io_err(&p, e))?;
        for r in rows {
            w.write_record(r).map_err(|e| io_err(&p, e))?;
        }
        w.flush().map_err(|e| io_err(&p, e))
    }

    pub fn record_ms(&mut self, stage: impl Into<String>, ms: f64) {
        *self.timings.entry(stage.into()).or_insert(0.0) += ms;
    }

    /// Run `f`, adding its wall time to `stage`.
    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record_ms(stage, start.elapsed().as_secs_f64() * 1e3);
        out
    }

    pub fn finish(mut self, cfg: &ExperimentConfig) -> Result<RunManifest> {
        self.write_json("config.json", cfg)?;
        let mut files = self.files.clone();
        files.push("manifest.json".into());
        let manifest = RunManifest {
            experiment: cfg.experiment.name().into(),
            config_hash: config_hash(cfg),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            timings_ms: self.timings.clone(),
            files,
        };
        self.write_json("manifest.json", &manifest)?;
        Ok(manifest)
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}
