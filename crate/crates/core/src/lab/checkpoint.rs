//! Single-file checkpoints: one JSON manifest line, then the raw payload of
//! little-endian `f64`s for every tensor, row-major, in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterParams, TiedLoraConfig};
use crate::error::{LabError, Result};
use crate::nanoformer::{BaseWeights, Model, TransformerConfig};
use crate::numkit::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Base,
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Byte length in the payload.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub model: Option<TransformerConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adapter: Option<TiedLoraConfig>,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes a manifest header and tensors into checkpoint bytes.
pub fn encode(
    kind: CheckpointKind,
    model: Option<TransformerConfig>,
    adapter: Option<TiedLoraConfig>,
    tensors: &[(String, &Tensor)],
) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        let length = t.numel() * 8;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            length,
        });
        offset += length;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind,
        model,
        adapter,
        tensors: entries,
    };
    let mut out = serde_json::to_vec(&manifest).map_err(|e| LabError::Data(format!("manifest: {e}")))?;
    out.push(b'\n');
    out.reserve(offset);
    for (_, t) in tensors {
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

/// Parses checkpoint bytes, checking the manifest against the payload.
pub fn decode(bytes: &[u8], origin: &str) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let bad = |reason: String| LabError::Checkpoint {
        path: origin.into(),
        reason,
    };
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing manifest line".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| bad(format!("unreadable manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", manifest.format_version)));
    }
    let payload = &bytes[newline + 1..];
    let declared: usize = manifest.tensors.iter().map(|e| e.length).sum();
    if declared != payload.len() {
        return Err(bad(format!(
            "payload holds {} bytes but the manifest declares {declared}",
            payload.len()
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0;
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.length != numel * 8 {
            return Err(bad(format!("tensor {} has an inconsistent offset or length", e.name)));
        }
        expected_offset += e.length;
        let data = payload[e.offset..e.offset + e.length]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| bad(format!("tensor {}: {err}", e.name)))?;
        tensors.push((e.name.clone(), t));
    }
    Ok((manifest, tensors))
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| LabError::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| LabError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| LabError::io(&tmp, e))?;
    f.sync_all().map_err(|e| LabError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

fn read(path: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

pub fn base_bytes(model: &Model) -> Result<Vec<u8>> {
    encode(CheckpointKind::Base, Some(model.config.clone()), None, &model.base.named())
}

pub fn adapter_bytes(params: &AdapterParams, config: &TiedLoraConfig) -> Result<Vec<u8>> {
    let slots: Vec<(String, &Tensor)> = params.slots().into_iter().map(|s| (s.name, s.tensor)).collect();
    encode(CheckpointKind::Adapter, None, Some(config.clone()), &slots)
}

/// Saves the base weights of `model`; an attached adapter is not included.
pub fn save_base(path: &Path, model: &Model) -> Result<()> {
    write_atomic(path, &base_bytes(model)?)
}

pub fn load_base(path: &Path) -> Result<Model> {
    let (manifest, tensors) = read(path)?;
    let config = match (manifest.kind, manifest.model) {
        (CheckpointKind::Base, Some(c)) => c,
        _ => {
            return Err(LabError::Checkpoint {
                path: path.into(),
                reason: "not a base-model checkpoint".into(),
            })
        }
    };
    let base = BaseWeights::from_named(&config, tensors)?;
    Model::from_parts(config, base)
}

pub fn save_adapter(path: &Path, params: &AdapterParams, config: &TiedLoraConfig) -> Result<()> {
    write_atomic(path, &adapter_bytes(params, config)?)
}

pub fn load_adapter(path: &Path) -> Result<(AdapterParams, TiedLoraConfig)> {
    let (manifest, tensors) = read(path)?;
    let config = match (manifest.kind, manifest.adapter) {
        (CheckpointKind::Adapter, Some(c)) => c,
        _ => {
            return Err(LabError::Checkpoint {
                path: path.into(),
                reason: "not an adapter checkpoint".into(),
            })
        }
    };
    config.validate()?;
    let params = AdapterParams::from_named(&config, tensors)?;
    Ok((params, config))
}
