//! Dataset directories: `features.f32`, `labels.i64` and `meta.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DistributionTag, LabeledDataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub tag: DistributionTag,
    pub provenance: String,
    pub n: usize,
    pub dim_x: usize,
}

pub fn save_dataset(ds: &LabeledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut features = Vec::with_capacity(ds.features().len() * 4);
    for v in ds.features() {
        features.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join("features.f32"), features)?;
    let mut labels = Vec::with_capacity(ds.len() * 8);
    for v in ds.labels() {
        labels.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join("labels.i64"), labels)?;
    let meta = DatasetMeta {
        tag: ds.tag,
        provenance: ds.provenance.clone(),
        n: ds.len(),
        dim_x: ds.dim(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

pub fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    let meta: DatasetMeta = serde_json::from_slice(&read(&dir.join("meta.json"))?)?;
    let raw = read(&dir.join("features.f32"))?;
    if raw.len() != meta.n * meta.dim_x * 4 {
        return Err(Error::shape(format!(
            "features.f32 holds {} bytes, expected {}",
            raw.len(),
            meta.n * meta.dim_x * 4
        )));
    }
    let features = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let raw = read(&dir.join("labels.i64"))?;
    if raw.len() != meta.n * 8 {
        return Err(Error::shape("labels.i64 length does not match meta.json"));
    }
    let labels = raw
        .chunks_exact(8)
        .map(|b| i64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    LabeledDataset::new(meta.dim_x, features, labels, meta.tag, meta.provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let features = vec![0.1f32, -2.5, f32::MIN_POSITIVE, 7.0e10, 3.0, -0.0];
        let ds = LabeledDataset::new(3, features, vec![1, -1], DistributionTag::SemanticShift, "p")
            .unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.tag, ds.tag);
        let bits = |d: &LabeledDataset| d.features().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ds));
    }

    #[test]
    fn missing_directory_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(&dir.path().join("nope")), Err(Error::MissingFile(_))));
    }
}
