//! Model checkpoints as safetensors files. Parameters are stored as F64 under
//! their hierarchical names; the header metadata carries the model spec and
//! any caller-supplied strings.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::{Dtype, SafeTensors};

use super::{build_model, Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Entry of the parsed metadata holding the JSON model spec.
pub const SPEC_KEY: &str = "model_spec";
/// The single header metadata entry: a JSON object with sorted keys, so the
/// file bytes do not depend on hash-map iteration order.
const HEADER_KEY: &str = "drivefusion";

fn load_err(path: &Path, reason: impl ToString) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            load_err(path, "file not found")
        } else {
            Error::io(path, e)
        }
    })
}

/// Every tensor in a safetensors file, converted to f64. F32 and F64 are
/// accepted.
pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = read_bytes(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| load_err(path, e))?;
    let mut out = Vec::new();
    for (name, view) in st.tensors() {
        let data: Vec<f64> = match view.dtype() {
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => {
                return Err(load_err(
                    path,
                    format!("tensor {name} has unsupported dtype {other:?}"),
                ))
            }
        };
        let t =
            Tensor::from_shape_vec(view.shape().to_vec(), data).map_err(|e| load_err(path, e))?;
        out.push((name, t));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Header metadata of a safetensors file.
pub fn read_metadata(path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = read_bytes(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| load_err(path, e))?;
    match meta.metadata().as_ref().and_then(|m| m.get(HEADER_KEY)) {
        Some(json) => serde_json::from_str(json).map_err(|e| load_err(path, e)),
        None => Ok(BTreeMap::new()),
    }
}

/// Writes every parameter (including batch-norm running statistics) plus the
/// spec and `extra` metadata. The file is written beside the target and
/// renamed into place.
pub fn save_model(model: &Model, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
    let mut sorted = extra.clone();
    sorted.insert(
        SPEC_KEY.into(),
        serde_json::to_string(&model.spec).map_err(|e| Error::Serde(e.to_string()))?,
    );
    let meta = HashMap::from([(
        HEADER_KEY.to_string(),
        serde_json::to_string(&sorted).map_err(|e| Error::Serde(e.to_string()))?,
    )]);
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .store
        .iter()
        .map(|(_, e)| {
            let bytes = e.value.iter().flat_map(|v| v.to_le_bytes()).collect();
            (e.name.clone(), e.value.shape().to_vec(), bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(n, shape, data)| {
            safetensors::tensor::TensorView::new(Dtype::F64, shape.clone(), data)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Serde(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes =
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Serde(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("safetensors.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model described by the stored spec and restores every
/// parameter. Returns the model and the remaining metadata.
pub fn load_model(path: &Path) -> Result<(Model, BTreeMap<String, String>)> {
    let mut meta = read_metadata(path)?;
    let spec_json = meta
        .remove(SPEC_KEY)
        .ok_or_else(|| load_err(path, "missing model spec metadata"))?;
    let spec: ModelSpec = serde_json::from_str(&spec_json).map_err(|e| load_err(path, e))?;
    let mut plain = spec.clone();
    for b in &mut plain.backbones {
        b.pretrained = false;
    }
    let mut model = build_model(&plain, 0)?;
    model.spec = spec;
    let tensors = read_tensors(path)?;
    if tensors.len() != model.store.len() {
        return Err(load_err(
            path,
            format!(
                "{} tensors stored, model has {} parameters",
                tensors.len(),
                model.store.len()
            ),
        ));
    }
    for (name, value) in tensors {
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| load_err(path, format!("unexpected tensor {name}")))?;
        if model.store.value(id).shape() != value.shape() {
            return Err(load_err(
                path,
                format!(
                    "tensor {name}: shape {:?}, model expects {:?}",
                    value.shape(),
                    model.store.value(id).shape()
                ),
            ));
        }
        *model.store.value_mut(id) = value;
    }
    Ok((model, meta))
}
