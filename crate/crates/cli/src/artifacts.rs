//! Loading and writing run artifacts.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bihoi_core::data::{Dataset, StubEmbedder};
use bihoi_models::persist::Persist;
use bihoi_nn::Checkpoint;

use crate::config::RunConfig;
use crate::error::fail;

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn embedder(cfg: &RunConfig) -> StubEmbedder {
    StubEmbedder { text_dim: cfg.data.text_dim, object_dim: cfg.data.object_dim }
}

pub fn load_dataset(cfg: &RunConfig, path: Option<&Path>) -> Result<Dataset> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| cfg.dataset_path());
    let ds = Dataset::load(&path).with_context(|| format!("loading dataset {}", path.display()))?;
    if (ds.text_dim, ds.object_dim) != (cfg.data.text_dim, cfg.data.object_dim) {
        return Err(fail(
            "InvalidConfig",
            format!("dataset feature dims ({}, {}) differ from the config", ds.text_dim, ds.object_dim),
        ));
    }
    Ok(ds)
}

/// A model from a checkpoint another stage must have written.
pub fn load_dependency<M: Persist>(path: &Path, produced_by: &str) -> Result<(M, Checkpoint)> {
    if !path.exists() {
        return Err(fail(
            "DependencyError",
            format!("missing checkpoint {} (run `{produced_by}` first)", path.display()),
        ));
    }
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let model = M::from_checkpoint(&ck)?;
    Ok((model, ck))
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    ck.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    ensure_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

/// Append-only CSV log.
pub struct CsvLog {
    out: BufWriter<File>,
}

impl CsvLog {
    /// Starts a fresh log, or appends to an existing one when resuming.
    pub fn open(path: &Path, header: &str, append: bool) -> Result<Self> {
        ensure_parent(path)?;
        let existing = append && path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(existing)
            .truncate(!existing)
            .open(path)
            .with_context(|| format!("opening log {}", path.display()))?;
        let mut out = BufWriter::new(file);
        if !existing {
            writeln!(out, "{header}")?;
        }
        Ok(CsvLog { out })
    }

    pub fn row(&mut self, step: u64, values: &[f64]) -> Result<()> {
        write!(self.out, "{step}")?;
        for v in values {
            write!(self.out, ",{v:.9e}")?;
        }
        writeln!(self.out)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
