//! Model container: `model.json` describing the blocks of `model.bin`.
//!
//! Parameters are stored as little-endian `f32`; trained models are rounded
//! to `f32` precision so a save/load cycle reproduces them exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    CGameModel, CgameError, GraphMatcherState, ModelConfig, ModelDims, NormPolicy, Result,
    Standardizer,
};
use crate::numcore::{Matrix, Mlp2Params};
use crate::storage::{decode_f32_le, encode_f32_le, sha256_hex, write_dir_atomically};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "model.json";
const BLOB: &str = "model.bin";
const NETS: [&str; 4] = ["fwd_enc", "fwd_dec", "inv_enc", "inv_dec"];
const PARTS: [&str; 4] = ["w1", "b1", "w2", "b2"];

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    dims: ModelDims,
    config: ModelConfig,
    counts_norm: NormPolicy,
    od_norm: NormPolicy,
    matcher_frozen: bool,
    blob: BlobInfo,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobInfo {
    file: String,
    dtype: String,
    sha256: String,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Block {
    name: String,
    rows: usize,
    cols: usize,
}

fn nets(model: &CGameModel) -> [&Mlp2Params; 4] {
    [&model.fwd_enc, &model.fwd_dec, &model.inv_enc, &model.inv_dec]
}

/// Block layout implied by the dimensions, in blob order.
fn layout(dims: &ModelDims, n_s: usize) -> Vec<Block> {
    let (c, o, f, h) = (dims.n_counts(), dims.n_od(), dims.n_f, dims.n_h);
    let shapes = [(c, f), (f, o), (o, f), (f, c)];
    let mut out = Vec::new();
    for (net, (n_in, n_out)) in NETS.iter().zip(shapes) {
        let dims = [(h, n_in), (1, h), (n_out, h), (1, n_out)];
        for (part, (rows, cols)) in PARTS.iter().zip(dims) {
            out.push(Block { name: format!("{net}.{part}"), rows, cols });
        }
    }
    out.push(Block { name: "matcher.m".into(), rows: f, cols: n_s });
    out.push(Block { name: "matcher.v".into(), rows: 1, cols: n_s });
    for (name, width) in [("counts_norm", c), ("od_norm", o)] {
        out.push(Block { name: format!("{name}.mean"), rows: 1, cols: width });
        out.push(Block { name: format!("{name}.scale"), rows: 1, cols: width });
    }
    out
}

pub fn save_model(model: &CGameModel, dir: &Path) -> Result<String> {
    let blocks = layout(&model.dims, model.config.matcher.n_s);
    let mut blob = Vec::new();
    let mut sources: Vec<&[f64]> = Vec::new();
    for p in nets(model) {
        sources.extend(p.blocks());
    }
    sources.push(model.matcher.m().as_slice());
    sources.push(model.matcher.v().as_slice());
    for s in [&model.counts_norm, &model.od_norm] {
        sources.push(&s.mean);
        sources.push(&s.scale);
    }
    for (block, values) in blocks.iter().zip(&sources) {
        if values.len() != block.rows * block.cols {
            return Err(CgameError::Shape(format!(
                "{} holds {} values, layout expects {}x{}",
                block.name,
                values.len(),
                block.rows,
                block.cols
            )));
        }
        encode_f32_le(values.iter().copied(), &mut blob);
    }
    let checksum = sha256_hex(&blob);
    let manifest = Manifest {
        format_version: MODEL_FORMAT_VERSION,
        dims: model.dims,
        config: model.config,
        counts_norm: model.counts_norm.policy,
        od_norm: model.od_norm.policy,
        matcher_frozen: model.matcher_frozen,
        blob: BlobInfo {
            file: BLOB.into(),
            dtype: "f32le".into(),
            sha256: checksum.clone(),
            blocks,
        },
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CgameError::Manifest(e.to_string()))?;
    write_dir_atomically(dir, |tmp| -> Result<()> {
        fs::write(tmp.join(BLOB), &blob)?;
        fs::write(tmp.join(MANIFEST), &json)?;
        Ok(())
    })?;
    Ok(checksum)
}

pub fn load_model(dir: &Path) -> Result<CGameModel> {
    let raw = fs::read(dir.join(MANIFEST))?;
    let value: serde_json::Value =
        serde_json::from_slice(&raw).map_err(|e| CgameError::Manifest(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CgameError::Manifest("missing format_version".into()))?;
    if version != MODEL_FORMAT_VERSION as u64 {
        return Err(CgameError::Version {
            found: version as u32,
            supported: MODEL_FORMAT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| CgameError::Manifest(e.to_string()))?;
    manifest.config.validate()?;
    let dims = manifest.dims;
    if dims.n_f != manifest.config.n_f || dims.n_h != manifest.config.n_h {
        return Err(CgameError::Manifest("dims disagree with config".into()));
    }
    let blocks = layout(&dims, manifest.config.matcher.n_s);
    if blocks != manifest.blob.blocks {
        return Err(CgameError::Manifest("block list disagrees with dims".into()));
    }
    let blob = fs::read(dir.join(&manifest.blob.file))?;
    let expected = blocks.iter().map(|b| b.rows * b.cols * 4).sum();
    if blob.len() != expected {
        return Err(CgameError::BlobShape { expected, found: blob.len() });
    }
    let found = sha256_hex(&blob);
    if found != manifest.blob.sha256 {
        return Err(CgameError::Checksum {
            expected: manifest.blob.sha256,
            found,
        });
    }

    let values = decode_f32_le(&blob);
    let mut offset = 0;
    let mut take = |b: &Block| -> Result<Matrix> {
        let n = b.rows * b.cols;
        let m = Matrix::from_vec(b.rows, b.cols, values[offset..offset + n].to_vec())?;
        offset += n;
        Ok(m)
    };
    let mut it = blocks.iter();
    let mut next = || take(it.next().expect("layout covers every block"));
    let slope = manifest.config.slope;
    let mut net = || -> Result<Mlp2Params> {
        let (w1, b1, w2, b2) = (next()?, next()?, next()?, next()?);
        Ok(Mlp2Params::new(w1, b1.into_vec(), w2, b2.into_vec(), slope)?)
    };
    let (fwd_enc, fwd_dec, inv_enc, inv_dec) = (net()?, net()?, net()?, net()?);
    drop(net);
    let matcher = GraphMatcherState::from_parts(next()?, next()?, manifest.config.matcher)?;
    let mut norm = |policy: NormPolicy| -> Result<Standardizer> {
        Ok(Standardizer {
            policy,
            mean: next()?.into_vec(),
            scale: next()?.into_vec(),
        })
    };
    let counts_norm = norm(manifest.counts_norm)?;
    let od_norm = norm(manifest.od_norm)?;
    Ok(CGameModel {
        dims,
        config: manifest.config,
        fwd_enc,
        fwd_dec,
        inv_enc,
        inv_dec,
        matcher,
        counts_norm,
        od_norm,
        matcher_frozen: manifest.matcher_frozen,
    })
}
