//! Directory checkpoints: one little-endian `f32` file per array plus a
//! manifest with shapes and the model config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, ParamArray};
use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    arrays: BTreeMap<String, [usize; 2]>,
}

fn file_name(array: &str) -> String {
    format!("{array}.f32")
}

pub fn save_checkpoint(params: &ModelParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut arrays = BTreeMap::new();
    for (name, a) in params.iter() {
        let bytes: Vec<u8> = a.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(file_name(name)), bytes)?;
        arrays.insert(name.to_string(), a.shape);
    }
    let manifest = Manifest {
        config: params.config.clone(),
        arrays,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelParams> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::MissingFile(manifest_path));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let mut arrays = BTreeMap::new();
    for (name, shape) in manifest.arrays {
        let path = dir.join(file_name(&name));
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        let bytes = fs::read(&path)?;
        if bytes.len() != 4 * shape[0] * shape[1] {
            return Err(Error::shape(format!(
                "{} holds {} bytes, expected {} for shape {shape:?}",
                path.display(),
                bytes.len(),
                4 * shape[0] * shape[1]
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        arrays.insert(name, ParamArray { shape, data });
    }
    ModelParams::from_arrays(manifest.config, arrays)
}
