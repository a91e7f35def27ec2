//! `RAPC` checkpoint container: magic, version byte, `u32` little-endian
//! manifest length, JSON manifest, then each tensor's little-endian values in
//! manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BnStats, ModelConfig, ModelError, ModelState, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RAPC";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<StoredTensor>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn write_container(path: &Path, c: &Container) -> Result<(), ModelError> {
    let mut entries = Vec::with_capacity(c.tensors.len());
    for t in &c.tensors {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(ModelError::Shape(format!(
                "tensor {} has {} values for shape {:?}",
                t.name,
                t.data.len(),
                t.shape
            )));
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: t.data.dtype(),
        });
    }
    let manifest = Manifest {
        kind: c.kind.clone(),
        meta: c.meta.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| ModelError::InvalidState(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &c.tensors {
        match &t.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    fs::write(path, out).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_container(path: &Path) -> Result<Container, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let err = |offset: usize, message: String| ModelError::Checkpoint {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.get(..4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(err(0, "missing RAPC magic".into()));
    }
    if bytes.get(4) != Some(&CHECKPOINT_VERSION) {
        return Err(err(4, format!("unsupported version {:?}", bytes.get(4))));
    }
    let len = bytes
        .get(5..9)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .ok_or_else(|| err(5, "truncated manifest length".into()))?;
    let json = bytes
        .get(9..9 + len)
        .ok_or_else(|| err(bytes.len(), "truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| err(9, format!("manifest: {e}")))?;
    let mut offset = 9 + len;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let size = n * e.dtype.width();
        let raw = bytes
            .get(offset..offset + size)
            .ok_or_else(|| err(bytes.len(), format!("tensor {} truncated: needs {size} bytes", e.name)))?;
        let data = match e.dtype {
            DType::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
        };
        offset += size;
        tensors.push(StoredTensor {
            name: e.name,
            shape: e.shape,
            data,
        });
    }
    if offset != bytes.len() {
        return Err(err(offset, format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(Container {
        kind: manifest.kind,
        meta: manifest.meta,
        tensors,
    })
}

const BN_NAMES: [[&str; 2]; 2] = [
    ["bn1.running_mean", "bn1.running_var"],
    ["bn2.running_mean", "bn2.running_var"],
];

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    rng_seed: u64,
}

impl<F: Real> ModelState<F> {
    pub fn to_container(&self) -> Container {
        let f32s = |v: &[F]| TensorData::F32(v.iter().map(|x| x.to_f32().expect("finite")).collect());
        let mut tensors: Vec<StoredTensor> = self
            .params
            .iter()
            .map(|t| StoredTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: f32s(&t.data),
            })
            .collect();
        for (stats, names) in self.bn.iter().zip(BN_NAMES) {
            for (values, name) in [&stats.mean, &stats.var].into_iter().zip(names) {
                tensors.push(StoredTensor {
                    name: name.into(),
                    shape: vec![values.len()],
                    data: f32s(values),
                });
            }
        }
        Container {
            kind: "model".into(),
            meta: serde_json::to_value(ModelMeta {
                config: self.config.clone(),
                rng_seed: self.rng_seed,
            })
            .expect("serializable"),
            tensors,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self, ModelError> {
        if c.kind != "model" {
            return Err(ModelError::InvalidState(format!("checkpoint holds a {:?}, not a model", c.kind)));
        }
        let meta: ModelMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| ModelError::InvalidState(e.to_string()))?;
        let fresh = ModelState::<F>::new(meta.config.clone(), 0)?;
        let take = |name: &str, shape: &[usize]| -> Result<Vec<F>, ModelError> {
            let t = c
                .tensor(name)
                .ok_or_else(|| ModelError::Shape(format!("checkpoint lacks tensor {name}")))?;
            if t.shape != shape {
                return Err(ModelError::Shape(format!(
                    "tensor {name} has shape {:?}, the config implies {shape:?}",
                    t.shape
                )));
            }
            Ok(t.data.to_f64().into_iter().map(F::of).collect())
        };
        let params = fresh
            .params
            .iter()
            .map(|p| {
                Ok(Tensor {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: take(&p.name, &p.shape)?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let mut bn = fresh.bn.clone();
        for (stats, names) in bn.iter_mut().zip(BN_NAMES) {
            let shape = [stats.mean.len()];
            *stats = BnStats {
                mean: take(names[0], &shape)?,
                var: take(names[1], &shape)?,
            };
        }
        Self::from_parts(meta.config, params, bn, meta.rng_seed)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_container(path, &self.to_container())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_container(&read_container(path)?)
    }
}
