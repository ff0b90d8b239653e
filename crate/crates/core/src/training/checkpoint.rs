//! Binary checkpoint: magic, version, a JSON header, then raw f32 tensors
//! (parameters, Adam first moments, Adam second moments) in declared order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig};
use crate::error::{Error, Result};
use crate::layers::{HgnnModel, ModelConfig};
use crate::tensor::{rng_from_seed, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of the mini-batch sampler. Batches are a pure function of these
/// values, so they stand in for a serialized generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    pub split_seed: u64,
    /// Index into the concatenated per-epoch shuffles of the next sample.
    pub next_position: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub model: HgnnModel<f32>,
    pub adam: AdamState<f32>,
    pub iteration: u64,
    pub sampler: SamplerState,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    train: TrainConfig,
    model: ModelConfig,
    iteration: u64,
    adam: AdamHeader,
    sampler: SamplerState,
    tensors: Vec<TensorHeader>,
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = *at + n;
    if end > bytes.len() {
        return Err(Error::Length {
            expected: end as u64,
            actual: bytes.len() as u64,
        });
    }
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            train: self.train.clone(),
            model: self.model.config.clone(),
            iteration: self.iteration,
            adam: AdamHeader {
                step: self.adam.step,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
            },
            sampler: self.sampler,
            tensors: params
                .iter()
                .map(|(name, t)| TensorHeader {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = params.iter().map(|(_, t)| *t).chain(&self.adam.m).chain(&self.adam.v);
        for t in tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut at = 0;
        if take(bytes, &mut at, 4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic".into()));
        }
        let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let json_len = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(bytes, &mut at, json_len)?)?;

        // Rebuild the layout, then overwrite every tensor from the payload.
        let mut model = HgnnModel::new(header.model, &mut rng_from_seed(0))?;
        let names = model.param_names();
        let listed: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
        if names != listed {
            return Err(Error::Format(format!(
                "checkpoint tensors {listed:?} do not match model layout {names:?}"
            )));
        }
        let mut read = |rows: usize, cols: usize| -> Result<Tensor<f32>> {
            let raw = take(bytes, &mut at, rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(rows, cols, data)
        };
        for (p, th) in model.params_mut().into_iter().zip(&header.tensors) {
            if p.shape() != (th.rows, th.cols) {
                return Err(Error::shape("checkpoint", p.shape(), (th.rows, th.cols)));
            }
            *p = read(th.rows, th.cols)?;
        }
        let mut adam = AdamState::new(
            header.tensors.iter().map(|t| (t.rows, t.cols)),
            header.adam.beta1,
            header.adam.beta2,
            header.adam.eps,
        );
        adam.step = header.adam.step;
        for m in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            *m = read(m.rows(), m.cols())?;
        }
        if at != bytes.len() {
            return Err(Error::Length {
                expected: at as u64,
                actual: bytes.len() as u64,
            });
        }
        Ok(Checkpoint {
            train: header.train,
            model,
            adam,
            iteration: header.iteration,
            sampler: header.sampler,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(Error::at_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::at_path(path))?;
        Self::from_bytes(&bytes)
    }
}
