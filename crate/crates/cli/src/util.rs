//! Shared command plumbing: output directories, line-delimited logs, and
//! the synthetic-or-folder data source.

use dcae::data::{load_image_dir, stack_images, SyntheticDataset};
use dcae::{DcaeError, Result};
use ndarray::{Array3, ArrayD};
use serde::Serialize;
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const OUTPUT_ROOT_ENV: &str = "DCAE_OUT";

pub fn config_err(msg: impl Into<String>) -> DcaeError {
    DcaeError::Config(msg.into())
}

/// Resolves the run directory for one command invocation and creates it.
/// Relative roots are prefixed with $DCAE_OUT when that is set.
pub fn run_dir(flag: Option<&str>, config_root: Option<&str>, command: &str) -> Result<PathBuf> {
    let root = flag.or(config_root).unwrap_or("runs");
    let mut base = PathBuf::from(root);
    if base.is_relative() {
        if let Ok(prefix) = std::env::var(OUTPUT_ROOT_ENV) {
            if !prefix.is_empty() {
                base = Path::new(&prefix).join(base);
            }
        }
    }
    let dir = base.join(command);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Records the fully-resolved settings of this run next to its outputs.
pub fn write_resolved<S: Serialize>(dir: &Path, name: &str, value: &S) -> Result<()> {
    let json = serde_json::to_vec_pretty(value)
        .map_err(|e| config_err(format!("cannot serialize {name}: {e}")))?;
    std::fs::write(dir.join(name), json)?;
    Ok(())
}

pub struct JsonlWriter {
    file: std::io::BufWriter<std::fs::File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<JsonlWriter> {
        Ok(JsonlWriter { file: std::io::BufWriter::new(std::fs::File::create(path)?) })
    }

    pub fn write<S: Serialize>(&mut self, record: &S) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| config_err(format!("cannot serialize log record: {e}")))?;
        writeln!(self.file, "{line}")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

/// Where training and evaluation images come from. Synthetic scenes are
/// generated on the fly at any resolution; folders are loaded once per
/// resolution and cycled deterministically.
pub enum DataSource {
    Synthetic(SyntheticDataset),
    Folder { dir: PathBuf, cache: HashMap<usize, Vec<Array3<f64>>> },
}

impl DataSource {
    pub fn synthetic(scene: &str, seed: u64) -> Result<DataSource> {
        let kind = dcae::data::SceneKind::from_str(scene)?;
        Ok(DataSource::Synthetic(SyntheticDataset::new(kind, seed, 4096)))
    }

    pub fn from_run(run: &crate::config::RunSection) -> Result<DataSource> {
        match &run.data_dir {
            Some(dir) => Ok(DataSource::Folder { dir: PathBuf::from(dir), cache: HashMap::new() }),
            None => DataSource::synthetic(&run.scene, run.seed),
        }
    }

    /// "synthetic:<scene>", a bare scene name, or an image folder path.
    pub fn parse(spec: &str, seed: u64) -> Result<DataSource> {
        if let Some(scene) = spec.strip_prefix("synthetic:") {
            return DataSource::synthetic(scene, seed);
        }
        match DataSource::synthetic(spec, seed) {
            Ok(ds) => Ok(ds),
            Err(_) => Ok(DataSource::Folder { dir: PathBuf::from(spec), cache: HashMap::new() }),
        }
    }

    fn folder_images(&mut self, resolution: usize) -> Result<&Vec<Array3<f64>>> {
        match self {
            DataSource::Synthetic(_) => unreachable!("folder_images on synthetic source"),
            DataSource::Folder { dir, cache } => {
                if !cache.contains_key(&resolution) {
                    cache.insert(resolution, load_image_dir(dir, resolution)?);
                }
                Ok(&cache[&resolution])
            }
        }
    }

    /// Batch [n, 3, r, r] for a step index; deterministic per (step, n, r).
    pub fn batch_for_step(&mut self, step: usize, n: usize, r: usize) -> Result<ArrayD<f64>> {
        match self {
            DataSource::Synthetic(ds) => Ok(ds.batch_for_step(step, n, r)),
            DataSource::Folder { .. } => {
                let images = self.folder_images(r)?;
                let len = images.len();
                let picked: Vec<Array3<f64>> =
                    (0..n).map(|j| images[(step * n + j) % len].clone()).collect();
                Ok(stack_images(&picked))
            }
        }
    }

    /// A fixed evaluation batch disjoint from the training stream.
    pub fn eval_batch(&mut self, n: usize, r: usize) -> Result<ArrayD<f64>> {
        match self {
            DataSource::Synthetic(ds) => {
                let indices: Vec<usize> = (0..n).map(|i| 100_000 + i).collect();
                Ok(ds.batch(&indices, r))
            }
            DataSource::Folder { .. } => {
                let images = self.folder_images(r)?;
                let len = images.len();
                let picked: Vec<Array3<f64>> =
                    (0..n).map(|i| images[len - 1 - (i % len)].clone()).collect();
                Ok(stack_images(&picked))
            }
        }
    }
}
