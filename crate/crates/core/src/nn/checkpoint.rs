//! Checkpoints: named weight tensors in the portable tensor format plus a
//! `meta.json` with provenance, and the conv-stack transplant used by the
//! transfer-learning protocols.

use super::backbone::{build_model, BackboneSpec, Init};
use super::graph::Model;
use super::ModelError;
use crate::types::Modality;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

/// Which domain a checkpoint was trained in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Patch,
    Slice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub domain: Domain,
    pub modality: Modality,
    pub backbone: BackboneSpec,
    pub input_hw: (usize, usize),
    pub config_hash: String,
    pub best_val_auc: f64,
    pub epoch: usize,
    /// Weights digest of the source checkpoint for transferred models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_checkpoint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub weights: BTreeMap<String, ArrayD<f32>>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            weights: model.weights_map(),
            meta,
        }
    }

    /// SHA-256 over all weight bytes in name order.
    pub fn weights_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in &self.weights {
            hasher.update(name.as_bytes());
            for &v in tensor.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| ModelError::Io(crate::io::TensorIoError::Io(e)))?;
        for (name, tensor) in &self.weights {
            crate::io::write_raw(&dir.join(format!("{name}.ptnsr")), tensor)?;
        }
        let meta = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| ModelError::Config(format!("meta serialization failed: {e}")))?;
        std::fs::write(dir.join("meta.json"), meta)
            .map_err(|e| ModelError::Io(crate::io::TensorIoError::Io(e)))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint, ModelError> {
        let meta_text = std::fs::read_to_string(dir.join("meta.json"))
            .map_err(|e| ModelError::Io(crate::io::TensorIoError::Io(e)))?;
        let meta: CheckpointMeta = serde_json::from_str(&meta_text)
            .map_err(|e| ModelError::Config(format!("bad meta.json: {e}")))?;
        let expected = super::backbone::parameter_shapes(&meta.backbone)?;
        let mut weights = BTreeMap::new();
        for (name, shape) in &expected {
            let tensor = crate::io::read_raw(&dir.join(format!("{name}.ptnsr")))?;
            if tensor.shape() != shape.as_slice() {
                return Err(ModelError::Init(format!(
                    "checkpoint tensor {} has shape {:?}, expected {:?}",
                    name,
                    tensor.shape(),
                    shape
                )));
            }
            weights.insert(name.clone(), tensor);
        }
        Ok(Checkpoint { weights, meta })
    }

    /// Rebuild the exact model this checkpoint was saved from.
    pub fn restore_model(&self) -> Result<Model, ModelError> {
        let mut model = build_model(&self.meta.backbone, Init::Random { seed: 0 })?;
        model.load_weights_map(&self.weights)?;
        Ok(model)
    }
}

/// Copy the convolutional stack of `src` into a model built for
/// `target_spec`; the classifier head is freshly initialized from
/// `head_seed`.
///
/// The two specs must share family, channel count and width; only the input
/// size may differ. Conv activations of the result on any source-sized crop
/// match the source model exactly, since conv stacks are size-agnostic.
pub fn transplant_conv_stack(
    src: &Checkpoint,
    target_spec: &BackboneSpec,
    head_seed: u64,
) -> Result<Model, ModelError> {
    let s = &src.meta.backbone;
    if s.family != target_spec.family {
        return Err(ModelError::Transplant(format!(
            "family mismatch: {} vs {}",
            s.family.as_str(),
            target_spec.family.as_str()
        )));
    }
    if s.input_channels != target_spec.input_channels {
        return Err(ModelError::Transplant(format!(
            "channel mismatch: {} vs {}",
            s.input_channels, target_spec.input_channels
        )));
    }
    if (s.width_multiplier - target_spec.width_multiplier).abs() > 1e-12 {
        return Err(ModelError::Transplant(format!(
            "width mismatch: {} vs {}",
            s.width_multiplier, target_spec.width_multiplier
        )));
    }

    let mut model = build_model(target_spec, Init::Random { seed: head_seed })?;
    for p in &mut model.params {
        if p.name.starts_with("fc") {
            continue; // flatten-dependent head stays fresh
        }
        let v = src.weights.get(&p.name).ok_or_else(|| {
            ModelError::Transplant(format!("source checkpoint lacks tensor {:?}", p.name))
        })?;
        if v.shape() != p.value.shape() {
            return Err(ModelError::Transplant(format!(
                "conv tensor {} has shape {:?}, expected {:?}",
                p.name,
                v.shape(),
                p.value.shape()
            )));
        }
        p.value.assign(v);
    }
    Ok(model)
}
