//! Checkpoint archive: one safetensors file holding every parameter as a
//! little-endian f64 array, with the model config and format version in
//! the header metadata.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::model::{expected_shapes, tensor_shape_ok, ModelConfig, TrackerModel};
use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;

/// Metadata stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub model: ModelConfig,
    pub seed: u64,
    /// Completed epochs, when written by training.
    #[serde(default)]
    pub epoch: Option<usize>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &TrackerModel, seed: u64, epoch: Option<usize>) -> Result<()> {
    let path = path.as_ref();
    let info = CheckpointInfo {
        model: model.config.clone(),
        seed,
        epoch,
    };
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .params
        .iter()
        .map(|(name, t)| {
            let raw = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.to_string(), t.shape.clone(), raw)
        })
        .collect();
    let views: Vec<(String, TensorView<'_>)> = bytes
        .iter()
        .map(|(n, shape, raw)| {
            let view = TensorView::new(Dtype::F64, shape.clone(), raw)
                .map_err(|e| Error::Checkpoint(format!("tensor {n}: {e}")))?;
            Ok((n.clone(), view))
        })
        .collect::<Result<_>>()?;
    let mut meta = HashMap::new();
    meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    meta.insert("config".to_string(), serde_json::to_string(&info)?);
    meta.insert("param_order".to_string(), serde_json::to_string(model.params.names())?);
    let data = safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, data).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrackerModel, CheckpointInfo)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| bad("missing metadata".into()))?;
    let version: u32 = meta
        .get("format_version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing format version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let info: CheckpointInfo =
        serde_json::from_str(meta.get("config").ok_or_else(|| bad("missing config".into()))?)?;
    info.model.validate()?;
    let order: Vec<String> = match meta.get("param_order") {
        Some(s) => serde_json::from_str(s)?,
        None => Vec::new(),
    };
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let expected = expected_shapes(&info.model)?;
    let mut params = ParamSet::new();
    let names: Vec<String> = if order.is_empty() {
        expected.iter().map(|(n, _)| n.clone()).collect()
    } else {
        order
    };
    for name in &names {
        let view = st.tensor(name).map_err(|_| bad(format!("missing tensor {name}")))?;
        if view.dtype() != Dtype::F64 {
            return Err(bad(format!("tensor {name} is {:?}, expected F64", view.dtype())));
        }
        let data: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(name.clone(), Tensor::new(view.shape().to_vec(), data));
    }
    if params.len() != expected.len() {
        return Err(bad(format!(
            "{} tensors stored, model needs {}",
            params.len(),
            expected.len()
        )));
    }
    for (name, shape) in &expected {
        let t = params.get(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if !tensor_shape_ok(t, shape) {
            return Err(bad(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape)));
        }
    }
    if !params.all_finite() {
        return Err(bad("non-finite parameter values".into()));
    }
    Ok((
        TrackerModel {
            config: info.model.clone(),
            params,
        },
        info,
    ))
}
