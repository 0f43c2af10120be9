//! Checkpoint format: a human-readable `manifest.json` next to a raw
//! `tensors.bin` of little-endian f64 values. The manifest stores per-tensor
//! SHA-256 digests, so corruption is caught on load and a byte-identical
//! round trip is verifiable. Writes go through temp files renamed into
//! place, with the manifest renamed last as the validity marker.

use crate::error::{CheckpointError, DcaeError, Result};
use crate::model::{Autoencoder, AutoencoderConfig, LatentStats};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";
pub const TENSORS_NAME: &str = "tensors.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into tensors.bin.
    pub offset: u64,
    /// Hex SHA-256 of this tensor's raw little-endian bytes.
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: AutoencoderConfig,
    /// Which training phases have completed, in order.
    pub phase_history: Vec<u8>,
    pub latent_stats: Option<LatentStats>,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: HashMap<String, ArrayD<f64>>,
}

pub(crate) fn tensor_bytes(data: &ArrayD<f64>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub(crate) fn sha_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

pub fn save(
    dir: &Path,
    model: &Autoencoder,
    phase_history: &[u8],
    latent_stats: Option<&LatentStats>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CheckpointError::Io)?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, tensor) in model.named_params() {
        let data = tensor.data();
        let bytes = tensor_bytes(&data);
        entries.push(TensorEntry {
            name,
            shape: data.shape().to_vec(),
            offset: blob.len() as u64,
            sha256: sha_hex(&bytes),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        phase_history: phase_history.to_vec(),
        latent_stats: latent_stats.cloned(),
        tensors: entries,
    };
    let manifest_json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| CheckpointError::CorruptManifest(e.to_string()))?;
    write_atomic(&dir.join(TENSORS_NAME), &blob).map_err(CheckpointError::Io)?;
    write_atomic(&dir.join(MANIFEST_NAME), &manifest_json).map_err(CheckpointError::Io)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest_bytes = std::fs::read(dir.join(MANIFEST_NAME)).map_err(CheckpointError::Io)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| CheckpointError::CorruptManifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        }
        .into());
    }
    let blob = std::fs::read(dir.join(TENSORS_NAME)).map_err(CheckpointError::Io)?;
    let mut tensors = HashMap::new();
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let len = numel as u64 * 8;
        let end = entry.offset + len;
        if end > blob.len() as u64 {
            return Err(CheckpointError::TruncatedBlob { expected: end, found: blob.len() as u64 }.into());
        }
        let bytes = &blob[entry.offset as usize..end as usize];
        if sha_hex(bytes) != entry.sha256 {
            return Err(CheckpointError::ChecksumMismatch { name: entry.name.clone() }.into());
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| CheckpointError::CorruptManifest(format!("bad shape for {}: {e}", entry.name)))?;
        tensors.insert(entry.name.clone(), arr);
    }
    Ok(Checkpoint { manifest, tensors })
}

/// Rebuilds the model recorded in the checkpoint and loads its weights.
pub fn load_model(dir: &Path) -> Result<(Autoencoder, Manifest)> {
    let ckpt = load(dir)?;
    let model = Autoencoder::build(&ckpt.manifest.config, 0)?;
    restore_into(&model, &ckpt)?;
    Ok((model, ckpt.manifest))
}

/// Like load_model, but refuses a checkpoint whose config differs from the
/// one the caller expects.
pub fn load_model_expecting(dir: &Path, expected: &AutoencoderConfig) -> Result<(Autoencoder, Manifest)> {
    let ckpt = load(dir)?;
    if &ckpt.manifest.config != expected {
        return Err(CheckpointError::ConfigMismatch(format!(
            "stored f={} c={} widths {:?}, requested f={} c={} widths {:?}",
            ckpt.manifest.config.f,
            ckpt.manifest.config.latent_channels,
            ckpt.manifest.config.stage_widths,
            expected.f,
            expected.latent_channels,
            expected.stage_widths
        ))
        .into());
    }
    let model = Autoencoder::build(expected, 0)?;
    restore_into(&model, &ckpt)?;
    Ok((model, ckpt.manifest))
}

fn restore_into(model: &Autoencoder, ckpt: &Checkpoint) -> Result<()> {
    let named = model.named_params();
    if named.len() != ckpt.manifest.tensors.len() {
        return Err(DcaeError::from(CheckpointError::ConfigMismatch(format!(
            "checkpoint has {} tensors, model expects {}",
            ckpt.manifest.tensors.len(),
            named.len()
        ))));
    }
    for (name, tensor) in named {
        let stored = ckpt.tensors.get(&name).ok_or_else(|| {
            DcaeError::from(CheckpointError::ConfigMismatch(format!("missing tensor '{name}'")))
        })?;
        if stored.shape() != tensor.data().shape() {
            return Err(CheckpointError::ConfigMismatch(format!(
                "tensor '{name}' has shape {:?}, model expects {:?}",
                stored.shape(),
                tensor.data().shape()
            ))
            .into());
        }
        tensor.set_data(stored.clone());
    }
    Ok(())
}
