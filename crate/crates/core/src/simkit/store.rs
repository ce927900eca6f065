//! Dataset container: `manifest.json` plus `data.bin`.
//!
//! `data.bin` holds, for each item in order, `F` (`n_l × n_t`) followed by
//! `D` (`n_p × n_p`), row-major, as little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataItem, Dataset, DatasetMeta, OdMatrix, Result, SimConfig, SimError, Split, TrafficCounts};
use crate::storage::{decode_f32_le, encode_f32_le, sha256_hex, write_dir_atomically};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "data.bin";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    n_items: usize,
    n_l: usize,
    n_t: usize,
    n_p: usize,
    seed: u64,
    split: Split,
    config: SimConfig,
    blob: BlobInfo,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobInfo {
    file: String,
    dtype: String,
    layout: String,
    sha256: String,
}

fn item_len(n_l: usize, n_t: usize, n_p: usize) -> usize {
    n_l * n_t + n_p * n_p
}

pub(crate) fn encode_blob(dataset: &Dataset) -> Vec<u8> {
    let meta = &dataset.meta;
    let mut blob = Vec::with_capacity(dataset.items.len() * item_len(meta.n_l, meta.n_t, meta.n_p) * 4);
    for item in &dataset.items {
        encode_f32_le(item.counts.as_slice().iter().copied(), &mut blob);
        encode_f32_le(item.od.as_slice().iter().copied(), &mut blob);
    }
    blob
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<String> {
    let meta = &dataset.meta;
    for item in &dataset.items {
        if item.counts.n_links() != meta.n_l
            || item.counts.n_slices() != meta.n_t
            || item.od.n_spots() != meta.n_p
        {
            return Err(SimError::InvalidConfig(
                "item shapes disagree with dataset metadata".into(),
            ));
        }
    }
    let blob = encode_blob(dataset);
    let checksum = sha256_hex(&blob);
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        n_items: dataset.items.len(),
        n_l: meta.n_l,
        n_t: meta.n_t,
        n_p: meta.n_p,
        seed: meta.seed,
        split: dataset.split.clone(),
        config: meta.config.clone(),
        blob: BlobInfo {
            file: BLOB.into(),
            dtype: "f32le".into(),
            layout: "per item: F (n_l x n_t) then D (n_p x n_p), row-major".into(),
            sha256: checksum.clone(),
        },
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| SimError::Manifest(e.to_string()))?;
    write_dir_atomically(dir, |tmp| -> Result<()> {
        fs::write(tmp.join(BLOB), &blob)?;
        fs::write(tmp.join(MANIFEST), &json)?;
        Ok(())
    })?;
    Ok(checksum)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let raw = fs::read(dir.join(MANIFEST))?;
    let value: serde_json::Value =
        serde_json::from_slice(&raw).map_err(|e| SimError::Manifest(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| SimError::Manifest("missing format_version".into()))?;
    if version != DATASET_FORMAT_VERSION as u64 {
        return Err(SimError::Version {
            found: version as u32,
            supported: DATASET_FORMAT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| SimError::Manifest(e.to_string()))?;
    let blob = fs::read(dir.join(&manifest.blob.file))?;
    let per_item = item_len(manifest.n_l, manifest.n_t, manifest.n_p);
    let expected = manifest.n_items * per_item * 4;
    if blob.len() != expected {
        return Err(SimError::ShapeMismatch {
            expected,
            found: blob.len(),
        });
    }
    let found = sha256_hex(&blob);
    if found != manifest.blob.sha256 {
        return Err(SimError::Checksum {
            expected: manifest.blob.sha256,
            found,
        });
    }
    let mut all = manifest.split.train.clone();
    all.extend(&manifest.split.validation);
    all.sort_unstable();
    if all != (0..manifest.n_items).collect::<Vec<_>>() {
        return Err(SimError::Manifest(
            "split indices must partition the items".into(),
        ));
    }
    let values = decode_f32_le(&blob);
    let f_len = manifest.n_l * manifest.n_t;
    let items = values
        .chunks_exact(per_item)
        .map(|chunk| {
            Ok(DataItem {
                counts: TrafficCounts::from_values(manifest.n_l, manifest.n_t, chunk[..f_len].to_vec())?,
                od: OdMatrix::from_values(manifest.n_p, chunk[f_len..].to_vec())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        items,
        split: manifest.split,
        meta: DatasetMeta {
            seed: manifest.seed,
            config: manifest.config,
            n_l: manifest.n_l,
            n_t: manifest.n_t,
            n_p: manifest.n_p,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::{generate_dataset, NetworkConfig};

    fn toy() -> Dataset {
        let cfg = SimConfig {
            network: NetworkConfig {
                rows: 2,
                cols: 2,
                link_length_m: 500.0,
            },
            n_items: 6,
            trips_min: 50,
            trips_max: 80,
            ..SimConfig::default()
        };
        generate_dataset(&cfg, 11).unwrap()
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds");
        let ds = toy();
        let sum = save_dataset(&ds, &path).unwrap();
        assert_eq!(sum.len(), 64);
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_blob_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds");
        save_dataset(&toy(), &path).unwrap();
        let blob = fs::read(path.join(BLOB)).unwrap();
        fs::write(path.join(BLOB), &blob[..blob.len() - 4]).unwrap();
        assert!(matches!(load_dataset(&path), Err(SimError::ShapeMismatch { .. })));
    }

    #[test]
    fn flipped_byte_is_a_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds");
        save_dataset(&toy(), &path).unwrap();
        let mut blob = fs::read(path.join(BLOB)).unwrap();
        blob[3] ^= 0x40;
        fs::write(path.join(BLOB), &blob).unwrap();
        assert!(matches!(load_dataset(&path), Err(SimError::Checksum { .. })));
    }

    #[test]
    fn unsupported_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds");
        save_dataset(&toy(), &path).unwrap();
        let text = fs::read_to_string(path.join(MANIFEST)).unwrap();
        let text = text.replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(path.join(MANIFEST), text).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(SimError::Version { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn garbage_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds");
        save_dataset(&toy(), &path).unwrap();
        fs::write(path.join(MANIFEST), b"{ not json").unwrap();
        assert!(matches!(load_dataset(&path), Err(SimError::Manifest(_))));
    }
}
