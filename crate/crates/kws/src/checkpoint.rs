//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `QBYECKPT`, a little-endian `u32` version, a
//! `u64` header length, a JSON [`CheckpointHeader`], then the raw `f64`
//! little-endian values of every store entry in header order, followed by
//! the Adam first and second moments in the same order when present.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use qbye_core::data::Vocabulary;
use qbye_core::losses::{HeadDims, HybridLossConfig};
use qbye_core::model::{KwsModel, ModelConfig};
use qbye_core::training::{Adam, TrainConfig};
use qbye_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 8] = b"QBYECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    /// Epochs completed.
    pub epoch: usize,
    /// Optimiser steps completed.
    pub step: u64,
    /// Best dev word error so far; `None` without a dev split.
    pub best_dev_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub loss: HybridLossConfig,
    pub dims: HeadDims,
    pub vocabulary: Vocabulary,
    pub model_seed: u64,
    pub state: TrainingState,
    pub tensors: Vec<TensorMeta>,
    pub has_optimizer: bool,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<Tensor>,
    /// Moments `(m, v)` and the step count of the optimiser.
    pub optimizer: Option<(Vec<Tensor>, Vec<Tensor>)>,
}

impl Checkpoint {
    pub fn capture(
        model: &KwsModel,
        loss: &HybridLossConfig,
        vocabulary: &Vocabulary,
        model_seed: u64,
        state: TrainingState,
        adam: Option<&Adam>,
    ) -> Self {
        let entries = model.store.entries();
        let tensors = entries
            .iter()
            .map(|e| TensorMeta {
                name: e.name.clone(),
                rows: e.value.rows(),
                cols: e.value.cols(),
            })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                model: model.config.clone(),
                loss: *loss,
                dims: model.dims,
                vocabulary: vocabulary.clone(),
                model_seed,
                state,
                tensors,
                has_optimizer: adam.is_some(),
            },
            values: entries.iter().map(|e| e.value.clone()).collect(),
            optimizer: adam.map(|a| (a.m.clone(), a.v.clone())),
        }
    }

    pub fn to_bytes(&self) -> AppResult<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(
            header.len() + 20 + 8 * self.values.iter().map(Tensor::len).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |ts: &[Tensor]| {
            ts.iter()
                .flat_map(|t| t.data())
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
        };
        put(&self.values);
        if let Some((m, v)) = &self.optimizer {
            put(m);
            put(v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> AppResult<Self> {
        let bad = |m: String| AppError::Data(format!("{origin}: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let mut cursor = &bytes[20 + hlen..];
        let mut take = |meta: &[TensorMeta]| -> AppResult<Vec<Tensor>> {
            meta.iter()
                .map(|m| {
                    let n = m.rows * m.cols;
                    if cursor.len() < 8 * n {
                        return Err(bad(format!("truncated values at {}", m.name)));
                    }
                    let data = cursor[..8 * n]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    cursor = &cursor[8 * n..];
                    Ok(Tensor::from_vec(m.rows, m.cols, data))
                })
                .collect()
        };
        let values = take(&header.tensors)?;
        let optimizer = if header.has_optimizer {
            Some((take(&header.tensors)?, take(&header.tensors)?))
        } else {
            None
        };
        if !cursor.is_empty() {
            return Err(bad(format!("{} trailing bytes", cursor.len())));
        }
        Ok(Checkpoint {
            header,
            values,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f =
            fs::File::create(&tmp).map_err(|e| AppError::Io(format!("{}: {e}", tmp.display())))?;
        f.write_all(&bytes)?;
        drop(f);
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Rebuilds the model stored in the checkpoint.
    pub fn model(&self) -> AppResult<KwsModel> {
        let h = &self.header;
        let mut model = KwsModel::new(&h.model, &h.loss, h.dims, h.model_seed)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    /// Copies stored values into `model` by name; any layout difference is
    /// an error naming the checkpoint's and the model's side.
    pub fn restore_into(&self, model: &mut KwsModel) -> AppResult<()> {
        let h = &self.header;
        if h.dims != model.dims {
            return Err(AppError::Config(format!(
                "dimension mismatch: checkpoint heads {:?} vs config heads {:?}",
                h.dims, model.dims
            )));
        }
        if h.tensors.len() != model.store.len() {
            return Err(AppError::Config(format!(
                "dimension mismatch: checkpoint has {} tensors, config builds {}",
                h.tensors.len(),
                model.store.len()
            )));
        }
        for (meta, value) in h.tensors.iter().zip(&self.values) {
            let id = model.store.find(&meta.name).ok_or_else(|| {
                AppError::Config(format!(
                    "dimension mismatch: checkpoint tensor {} absent from config model",
                    meta.name
                ))
            })?;
            let have = model.store.get(id).shape();
            if have != (meta.rows, meta.cols) {
                return Err(AppError::Config(format!(
                    "dimension mismatch at {}: checkpoint {}x{} vs config {}x{}",
                    meta.name, meta.rows, meta.cols, have.0, have.1
                )));
            }
            *model.store.get_mut(id) = value.clone();
        }
        Ok(())
    }

    /// Optimiser state to continue training with `cfg`.
    pub fn adam(&self, model: &KwsModel, cfg: &TrainConfig) -> AppResult<Adam> {
        let mut adam = Adam::new(&model.store, cfg);
        let (m, v) = self
            .optimizer
            .clone()
            .ok_or_else(|| AppError::Data("checkpoint has no optimiser state".into()))?;
        adam.m = m;
        adam.v = v;
        adam.step = self.header.state.step;
        Ok(adam)
    }
}
