use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FusionWeights, ModelConfig, PrccfModel};
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::text::Vocab;

const MODEL_FILE: &str = "model.json";
const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_fingerprint: String,
    pub registry_hash: String,
    pub step: u64,
    pub epoch: usize,
    pub validation_ppl: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: CheckpointMeta,
    model: ModelConfig,
    fusion_weights: FusionWeights,
    vocab: Vocab,
    seed: u64,
    /// `(name, rows, cols)` in storage order.
    tensors: Vec<(String, usize, usize)>,
}

/// A model directory: a JSON manifest plus raw little-endian f64 tensors.
pub struct Checkpoint;

impl Checkpoint {
    pub fn save(model: &PrccfModel, meta: &CheckpointMeta, seed: u64, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::new();
        let mut bytes = Vec::new();
        for id in model.store.ids() {
            let v = model.store.value(id);
            tensors.push((model.store.name(id).to_string(), v.rows, v.cols));
            for x in &v.data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = Manifest {
            meta: meta.clone(),
            model: model.config,
            fusion_weights: model.fusion.weights(&model.store),
            vocab: model.vocab.clone(),
            seed,
            tensors,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write(&dir.join(MODEL_FILE), json.as_bytes())?;
        write(&dir.join(PARAMS_FILE), &bytes)
    }

    pub fn load(dir: &Path) -> Result<(PrccfModel, CheckpointMeta)> {
        let manifest_path = dir.join(MODEL_FILE);
        if !manifest_path.exists() {
            return Err(Error::MissingArtifact {
                path: manifest_path,
                producer: "train".into(),
            });
        }
        let raw = read(&manifest_path)?;
        let mut m: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::Load {
            source_name: manifest_path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })?;
        m.vocab.reindex();
        let mut model = PrccfModel::new(m.model, m.vocab, m.seed);
        let bytes = read(&dir.join(PARAMS_FILE))?;
        let corrupt = |msg: String| Error::Load {
            source_name: dir.join(PARAMS_FILE).display().to_string(),
            line: 0,
            message: msg,
        };
        if m.tensors.len() != model.store.len() {
            return Err(corrupt(format!(
                "{} tensors stored, model has {}",
                m.tensors.len(),
                model.store.len()
            )));
        }
        let mut offset = 0;
        for (id, (name, rows, cols)) in model.store.ids().collect::<Vec<_>>().into_iter().zip(m.tensors) {
            let expected = model.store.value(id).shape();
            if model.store.name(id) != name || expected != (rows, cols) {
                return Err(corrupt(format!("tensor `{name}` {rows}x{cols} does not match the model")));
            }
            let n = rows * cols;
            let chunk = bytes
                .get(offset..offset + n * 8)
                .ok_or_else(|| corrupt("truncated parameter file".into()))?;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            *model.store.value_mut(id) = Matrix::from_vec(rows, cols, data);
            offset += n * 8;
        }
        if offset != bytes.len() {
            return Err(corrupt("trailing bytes in parameter file".into()));
        }
        Ok((model, m.meta))
    }

    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join(MODEL_FILE)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
