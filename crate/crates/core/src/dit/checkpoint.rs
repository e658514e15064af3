use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::DitModel;
use super::ModelConfig;
use crate::attention::Mat;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "groundtraj-dit";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Tensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

/// Writes the config and every named tensor as JSON. Floats round-trip exactly.
pub fn save_checkpoint(model: &DitModel, path: &Path) -> Result<()> {
    let tensors = model
        .params
        .named()
        .into_iter()
        .map(|(name, m)| Tensor {
            name,
            shape: [m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        })
        .collect();
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        tensors,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec(&ck)?)?;
    Ok(())
}

/// Loads a checkpoint, checking every tensor name and shape against the
/// architecture its config describes.
pub fn load_checkpoint(path: &Path) -> Result<DitModel> {
    let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unexpected format `{}`", ck.format)));
    }
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
    }
    let mut model = DitModel::new(ck.config, 0)?;
    let mut slots = model.params.named_mut();
    if slots.len() != ck.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, architecture has {}",
            ck.tensors.len(),
            slots.len()
        )));
    }
    for ((name, slot), t) in slots.iter_mut().zip(ck.tensors) {
        if *name != t.name {
            return Err(Error::Checkpoint(format!("expected tensor `{name}`, found `{}`", t.name)));
        }
        if slot.dim() != (t.shape[0], t.shape[1]) || t.data.len() != t.shape[0] * t.shape[1] {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape,
                slot.dim()
            )));
        }
        let m = Mat::from_shape_vec((t.shape[0], t.shape[1]), t.data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        slot.assign(&m);
    }
    drop(slots);
    Ok(model)
}

