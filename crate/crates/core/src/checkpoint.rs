//! On-disk model state.
//!
//! A checkpoint directory holds `params.bin` (every tensor as little-endian
//! f64, concatenated in `ModelParams::tensors` order), `params.json` (shapes,
//! offsets, aggregator and a SHA-256 of the blob), `pipeline.json` (training
//! config and target scaling) and, unless the model reads raw features,
//! `ensemble.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::Standardizer;
use crate::gbdt::TreeEnsemble;
use crate::gnn::{Aggregator, ModelParams};
use crate::pipeline::{RevenueScale, TrainedModel};
use crate::train::TrainConfig;

const PARAMS_FORMAT: &str = "fraudgraph-params";
const PIPELINE_FORMAT: &str = "fraudgraph-pipeline";
const VERSION: u32 = 1;

pub const PARAMS_BIN: &str = "params.bin";
pub const PARAMS_JSON: &str = "params.json";
pub const PIPELINE_JSON: &str = "pipeline.json";
pub const ENSEMBLE_JSON: &str = "ensemble.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamsManifest {
    format: String,
    version: u32,
    aggregator: Aggregator,
    leaky_slope: f64,
    input_width: usize,
    hidden: usize,
    n_layers: usize,
    sha256: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PipelineDoc {
    format: String,
    version: u32,
    config: TrainConfig,
    revenue: RevenueScale,
    standardizer: Option<Standardizer>,
    best_epoch: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => bad(format!("missing {}", path.display())),
        _ => Error::io(path, e),
    })
}

pub fn encode_params(p: &ModelParams) -> Result<(Vec<u8>, String)> {
    let mut blob = Vec::with_capacity(p.param_count() * 8);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in p.tensors() {
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry { name, shape: t.shape.clone(), offset, len: t.len() });
        offset += t.len();
    }
    let manifest = ParamsManifest {
        format: PARAMS_FORMAT.into(),
        version: VERSION,
        aggregator: p.aggregator,
        leaky_slope: p.leaky_slope,
        input_width: p.input_width(),
        hidden: p.hidden(),
        n_layers: p.n_layers(),
        sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
    };
    Ok((blob, serde_json::to_string_pretty(&manifest)?))
}

pub fn decode_params(blob: &[u8], manifest: &str) -> Result<ModelParams> {
    let m: ParamsManifest = serde_json::from_str(manifest).map_err(|e| bad(format!("params manifest: {e}")))?;
    if m.format != PARAMS_FORMAT || m.version != VERSION {
        return Err(bad(format!("unsupported params {} v{}", m.format, m.version)));
    }
    if hex::encode(Sha256::digest(blob)) != m.sha256 {
        return Err(bad("params blob does not match its checksum"));
    }
    if !blob.len().is_multiple_of(8) {
        return Err(bad("params blob length is not a multiple of 8"));
    }
    let mut p = ModelParams::init(m.aggregator, m.input_width, m.hidden, m.n_layers, 0)
        .map_err(|e| bad(format!("params manifest: {e}")))?;
    p.leaky_slope = m.leaky_slope;
    let values: Vec<f64> = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut slots = p.tensors_mut();
    if slots.len() != m.tensors.len() {
        return Err(bad(format!("{} tensors listed, architecture has {}", m.tensors.len(), slots.len())));
    }
    for ((name, t), e) in slots.iter_mut().zip(&m.tensors) {
        if *name != e.name || t.shape != e.shape || e.len != t.len() {
            return Err(bad(format!("tensor `{}` {:?} does not match expected `{name}` {:?}", e.name, e.shape, t.shape)));
        }
        let end = e.offset.checked_add(e.len).filter(|&end| end <= values.len()).ok_or_else(|| bad("tensor outside blob"))?;
        t.data.copy_from_slice(&values[e.offset..end]);
    }
    drop(slots);
    if let Some(name) = p.first_non_finite() {
        return Err(bad(format!("tensor `{name}` holds a non-finite value")));
    }
    Ok(p)
}

pub fn save_params(p: &ModelParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (blob, manifest) = encode_params(p)?;
    write(&dir.join(PARAMS_BIN), &blob)?;
    write(&dir.join(PARAMS_JSON), manifest.as_bytes())
}

pub fn load_params(dir: &Path) -> Result<ModelParams> {
    let blob = read(&dir.join(PARAMS_BIN))?;
    let manifest = read(&dir.join(PARAMS_JSON))?;
    decode_params(&blob, &String::from_utf8(manifest).map_err(|_| bad("params manifest is not UTF-8"))?)
}

/// Writes a trained model; returns the files written.
pub fn save_model(model: &TrainedModel, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    save_params(&model.params, dir)?;
    let mut files = vec![dir.join(PARAMS_BIN), dir.join(PARAMS_JSON)];
    let doc = PipelineDoc {
        format: PIPELINE_FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        revenue: model.revenue,
        standardizer: model.standardizer.clone(),
        best_epoch: model.best_epoch,
    };
    let path = dir.join(PIPELINE_JSON);
    write(&path, serde_json::to_string_pretty(&doc)?.as_bytes())?;
    files.push(path);
    let ens = dir.join(ENSEMBLE_JSON);
    match &model.ensemble {
        Some(e) => {
            write(&ens, e.to_json()?.as_bytes())?;
            files.push(ens);
        }
        None if ens.exists() => fs::remove_file(&ens).map_err(|e| Error::io(&ens, e))?,
        None => {}
    }
    Ok(files)
}

pub fn load_model(dir: &Path) -> Result<TrainedModel> {
    let params = load_params(dir)?;
    let raw = read(&dir.join(PIPELINE_JSON))?;
    let doc: PipelineDoc = serde_json::from_slice(&raw).map_err(|e| bad(format!("pipeline: {e}")))?;
    if doc.format != PIPELINE_FORMAT || doc.version != VERSION {
        return Err(bad(format!("unsupported pipeline {} v{}", doc.format, doc.version)));
    }
    let ens_path = dir.join(ENSEMBLE_JSON);
    let ensemble = if ens_path.exists() {
        let s = String::from_utf8(read(&ens_path)?).map_err(|_| bad("ensemble is not UTF-8"))?;
        Some(TreeEnsemble::from_json(&s)?)
    } else {
        None
    };
    let width = match (&ensemble, &doc.standardizer) {
        (Some(e), _) => e.total_leaves(),
        (None, Some(s)) => s.mean.len(),
        (None, None) => return Err(bad("checkpoint has neither an ensemble nor a standardizer")),
    };
    if width != params.input_width() {
        return Err(bad(format!("feature width {width} does not match model input width {}", params.input_width())));
    }
    Ok(TrainedModel {
        config: doc.config,
        params,
        ensemble,
        standardizer: doc.standardizer,
        revenue: doc.revenue,
        best_epoch: doc.best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(agg: Aggregator) -> ModelParams {
        let mut p = ModelParams::init(agg, 6, 3, 2, 5).unwrap();
        p.bias_cls.data[0] = 0.1 + 0.2;
        p
    }

    #[test]
    fn params_round_trip_bit_exact() {
        for agg in [Aggregator::Attention, Aggregator::Mean, Aggregator::RelationTyped] {
            let p = model(agg);
            let (blob, manifest) = encode_params(&p).unwrap();
            assert_eq!(blob.len(), p.param_count() * 8);
            let q = decode_params(&blob, &manifest).unwrap();
            assert_eq!(p, q);
        }
    }

    #[test]
    fn corrupt_blob_is_rejected() {
        let (mut blob, manifest) = encode_params(&model(Aggregator::Mean)).unwrap();
        blob[3] ^= 0xFF;
        assert!(matches!(decode_params(&blob, &manifest), Err(Error::Checkpoint(_))));
        assert!(matches!(decode_params(&blob[..8], &manifest), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn malformed_manifest_is_rejected() {
        let (blob, manifest) = encode_params(&model(Aggregator::Mean)).unwrap();
        assert!(matches!(decode_params(&blob, "{"), Err(Error::Checkpoint(_))));
        let renamed = manifest.replace("layer0.w2", "layer0.wx");
        assert!(matches!(decode_params(&blob, &renamed), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_files_are_checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_params(dir.path()), Err(Error::Checkpoint(_))));
        assert!(load_model(dir.path()).unwrap_err().is_data_error());
    }
}
