//! Checkpoints: a JSON metadata document next to a raw little-endian f32
//! blob. `model.json` pairs with `model.bin`.
//!
//! The blob holds every parameter in manifest order, followed by the Adam
//! moments of each parameter that has optimizer state. Offsets in the
//! manifest are byte offsets into the blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::classifier::GenreClassifier;
use crate::model::config::ModelConfig;
use crate::model::genres::vocabulary;
use crate::nn::params::AdamState;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub name: String,
    pub step: u64,
    pub first_moment_offset: u64,
    pub second_moment_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub format_version: u32,
    pub genres: Vec<String>,
    pub config: ModelConfig,
    /// Blob file name, relative to the metadata file.
    pub blob: String,
    pub blob_bytes: u64,
    pub parameter_count: usize,
    pub parameters: Vec<TensorEntry>,
    #[serde(default)]
    pub optimizer: Vec<OptimizerEntry>,
    /// Opaque state of whatever produced the checkpoint (e.g. a trainer).
    #[serde(default)]
    pub trainer: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: GenreClassifier<f32>,
    pub trainer: Option<serde_json::Value>,
}

pub fn blob_path(metadata_path: &Path) -> PathBuf {
    metadata_path.with_extension("bin")
}

fn push_f32s(blob: &mut Vec<u8>, values: &[f32]) -> u64 {
    let offset = blob.len() as u64;
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    offset
}

/// Writes `path` (JSON) and its sibling blob. Both are written to temporary
/// names first and renamed into place.
pub fn save_checkpoint(
    path: &Path,
    model: &GenreClassifier<f32>,
    trainer: Option<&serde_json::Value>,
) -> Result<()> {
    let store = model.params();
    let mut blob = Vec::with_capacity(store.total_parameter_count() * 4);
    let mut parameters = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        let offset = push_f32s(&mut blob, t.data());
        parameters.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
    }
    let mut optimizer = Vec::new();
    for name in store.names() {
        if let Some(s) = store.adam_state(name) {
            let first_moment_offset = push_f32s(&mut blob, &s.first_moment);
            let second_moment_offset = push_f32s(&mut blob, &s.second_moment);
            optimizer.push(OptimizerEntry {
                name: name.to_string(),
                step: s.step,
                first_moment_offset,
                second_moment_offset,
            });
        }
    }
    let bin = blob_path(path);
    let meta = CheckpointMetadata {
        format_version: FORMAT_VERSION,
        genres: vocabulary(),
        config: model.config().clone(),
        blob: bin
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Config(format!("bad checkpoint path {}", path.display())))?,
        blob_bytes: blob.len() as u64,
        parameter_count: store.total_parameter_count(),
        parameters,
        optimizer,
        trainer: trainer.cloned(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::json(path, e))?;
    write_atomic(&bin, &blob)?;
    write_atomic(path, &json)?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_metadata(path: &Path) -> Result<CheckpointMetadata> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let meta: CheckpointMetadata = serde_json::from_slice(&text).map_err(|e| Error::json(path, e))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported checkpoint format version {}",
            path.display(),
            meta.format_version
        )));
    }
    if meta.genres != vocabulary() {
        return Err(Error::Config(format!(
            "{}: checkpoint genre vocabulary does not match this build",
            path.display()
        )));
    }
    Ok(meta)
}

fn read_f32s(blob: &[u8], offset: u64, count: usize, bin: &Path) -> Result<Vec<f32>> {
    let start = offset as usize;
    let end = start
        .checked_add(count * 4)
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| Error::Format {
            path: bin.to_path_buf(),
            offset,
            message: format!("{count} floats run past the end of the {}-byte blob", blob.len()),
        })?;
    Ok(blob[start..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let meta = read_metadata(path)?;
    let bin = path.with_file_name(&meta.blob);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if blob.len() as u64 != meta.blob_bytes {
        return Err(Error::Format {
            path: bin,
            offset: blob.len() as u64,
            message: format!("expected {} bytes", meta.blob_bytes),
        });
    }
    let fresh = GenreClassifier::<f32>::new(meta.config.clone(), 0)?;
    let mut store = fresh.params().clone();
    let expected: Vec<&str> = store.names().collect();
    let listed: Vec<&str> = meta.parameters.iter().map(|e| e.name.as_str()).collect();
    if expected != listed {
        return Err(Error::Config(format!(
            "{}: parameter manifest does not match the stored configuration",
            path.display()
        )));
    }
    let mut values = Vec::with_capacity(meta.parameters.len());
    for e in &meta.parameters {
        let n = e.shape.iter().product();
        values.push(Tensor::new(e.shape.clone(), read_f32s(&blob, e.offset, n, &bin)?)?);
    }
    store.load_values(values)?;
    for o in &meta.optimizer {
        let n = store
            .get(&o.name)
            .ok_or_else(|| Error::Config(format!("optimizer state for unknown parameter {}", o.name)))?
            .numel();
        let state = AdamState {
            first_moment: read_f32s(&blob, o.first_moment_offset, n, &bin)?,
            second_moment: read_f32s(&blob, o.second_moment_offset, n, &bin)?,
            step: o.step,
        };
        store.set_adam_state(&o.name, state)?;
    }
    Ok(Checkpoint {
        model: GenreClassifier::from_parameters(meta.config, store)?,
        trainer: meta.trainer,
    })
}
