//! Trained models and the `.mlpmodel` file format.
//!
//! ```text
//! "MLPM" | version u32 = 1 | layer count u32 | sizes u32… | dropout_rate f32
//! per layer: W (out×in, row-major), b,
//!            then for hidden layers: scale, shift, running mean, running var
//! footer:    u64 byte length | UTF-8 JSON {"config": …, "history": […]}
//! ```
//!
//! Tensors are stored as little-endian `f32`; training runs in `f64`, so a
//! loaded model equals the in-memory one up to `f32` rounding.

use std::fs;
use std::io;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mlp::{BatchNorm, HiddenLayer, Linear, MlpError, MlpParams};
use crate::optimizer::TrainConfig;

pub const MAGIC: [u8; 4] = *b"MLPM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"MLPM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported model version {0}")]
    UnsupportedVersion(u32),
    #[error("model file truncated at offset {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after footer")]
    TrailingBytes(usize),
    #[error("footer: {0}")]
    Footer(#[from] serde_json::Error),
    #[error(transparent)]
    Mlp(#[from] MlpError),
}

/// Summary of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_cvar_loss: f64,
    pub mean_lambda: f64,
    pub active_fraction: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: MlpParams,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct Footer {
    config: TrainConfig,
    history: Vec<EpochRecord>,
}

impl TrainedModel {
    pub fn feature_dim(&self) -> usize {
        self.params.input_dim()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.params.dims();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.config.dropout_rate as f32).to_le_bytes());
        let mut put = |values: &[f64]| {
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        };
        let slice = |a: &Array1<f64>| a.as_slice().expect("standard layout").to_vec();
        for h in &self.params.hidden {
            put(h.linear.weight.as_slice().expect("standard layout"));
            put(&slice(&h.linear.bias));
            put(&slice(&h.norm.scale));
            put(&slice(&h.norm.shift));
            put(&slice(&h.norm.running_mean));
            put(&slice(&h.norm.running_var));
        }
        put(self
            .params
            .output
            .weight
            .as_slice()
            .expect("standard layout"));
        put(&slice(&self.params.output.bias));
        let footer = serde_json::to_vec(&Footer {
            config: self.config.clone(),
            history: self.history.clone(),
        })
        .expect("config serializes");
        out.extend_from_slice(&(footer.len() as u64).to_le_bytes());
        out.extend_from_slice(&footer);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(ModelError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        if count > bytes.len() {
            return Err(ModelError::Truncated(r.pos));
        }
        let dims = (0..count)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if dims.len() < 3 || dims.contains(&0) || dims[dims.len() - 1] != 1 {
            return Err(MlpError::BadDims(dims).into());
        }
        let _dropout = r.f32()?;
        let mut hidden = Vec::with_capacity(dims.len() - 2);
        for l in 0..dims.len() - 2 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            hidden.push(HiddenLayer {
                linear: Linear {
                    weight: r.matrix(fan_out, fan_in)?,
                    bias: r.vector(fan_out)?,
                },
                norm: BatchNorm {
                    scale: r.vector(fan_out)?,
                    shift: r.vector(fan_out)?,
                    running_mean: r.vector(fan_out)?,
                    running_var: r.vector(fan_out)?,
                },
            });
        }
        let fan_in = dims[dims.len() - 2];
        let output = Linear {
            weight: r.matrix(1, fan_in)?,
            bias: r.vector(1)?,
        };
        let len = r.u64()? as usize;
        let footer: Footer = serde_json::from_slice(r.take(len)?)?;
        if r.pos != bytes.len() {
            return Err(ModelError::TrailingBytes(bytes.len() - r.pos));
        }
        let params = MlpParams { hidden, output };
        params.validate()?;
        Ok(Self {
            params,
            config: footer.config,
            history: footer.history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// History as JSON lines, one object per epoch.
    pub fn history_jsonl(&self) -> String {
        self.history
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(ModelError::Truncated(self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32, ModelError> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn floats(&mut self, len: usize) -> Result<Vec<f64>, ModelError> {
        let raw = self.take(len.checked_mul(4).ok_or(ModelError::Truncated(self.pos))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }

    fn vector(&mut self, len: usize) -> Result<Array1<f64>, ModelError> {
        Ok(Array1::from(self.floats(len)?))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>, ModelError> {
        let data = self.floats(
            rows.checked_mul(cols)
                .ok_or(ModelError::Truncated(self.pos))?,
        )?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("rows × cols values"))
    }
}
