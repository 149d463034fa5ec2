use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{decode_tensors, encode_tensors, NamedTensor};
use crate::model::{layout, ModelConfig, ParamStore};

use super::TrainError;

pub const CHECKPOINT_FILE: &str = "checkpoint.smrt";
/// Written next to every checkpoint.
pub const CONFIG_FILE: &str = "config.json";

fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name(CONFIG_FILE)
}

/// Write the parameters as a tensor container at `path` and the config
/// beside it. Banked tensors get a leading group axis.
pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ParamStore<f32>) -> Result<(), TrainError> {
    let tensors: Vec<NamedTensor> = params
        .specs()
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut shape = spec.shape.clone();
            if spec.banked {
                shape.insert(0, params.groups());
            }
            NamedTensor { name: spec.name.clone(), shape, values: params.values(crate::model::ParamId(i)).to_vec() }
        })
        .collect();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_tensors(&tensors))?;
    fs::write(config_path(path), serde_json::to_vec_pretty(config)?)?;
    Ok(())
}

/// Inverse of [`save_checkpoint`]; every tensor must match the layout the
/// stored config implies.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore<f32>), TrainError> {
    let config: ModelConfig = serde_json::from_slice(&fs::read(config_path(path))?)?;
    config.validate()?;
    let tensors = decode_tensors(&fs::read(path)?)?;
    let specs = layout(&config);
    if tensors.len() != specs.len() {
        return Err(TrainError::Mismatch(format!(
            "checkpoint holds {} tensors, configuration expects {}",
            tensors.len(),
            specs.len()
        )));
    }
    let groups = config.num_puzzle_groups;
    let mut values = Vec::with_capacity(specs.len());
    for (spec, t) in specs.iter().zip(tensors) {
        let mut shape = spec.shape.clone();
        if spec.banked {
            shape.insert(0, groups);
        }
        if t.name != spec.name || t.shape != shape {
            return Err(TrainError::Mismatch(format!(
                "tensor '{}' {:?} does not match expected '{}' {:?}",
                t.name, t.shape, spec.name, shape
            )));
        }
        values.push(t.values);
    }
    Ok((config, ParamStore::from_parts(specs, values, groups)))
}
