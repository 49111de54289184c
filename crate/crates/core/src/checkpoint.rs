//! Training snapshots with a self-describing binary format.
//!
//! Layout: magic `SMTCKPT1`; u32 LE format version; u32 LE config-JSON
//! byte length and the UTF-8 JSON; u32 LE tensor count; per tensor a
//! u16 LE name length, the UTF-8 name, a u8 dtype code (0 = f32, 1 =
//! f64), a u8 rank, rank u32 LE dims, and the raw little-endian
//! payload; finally a CRC32 of every preceding byte.
//!
//! Model tensors use their store names. Optimizer and loop state live
//! under the reserved `opt/` prefix: first/second moments per parameter
//! (`opt/adamw.m/<name>`, `opt/adamw.v/<name>`), the completed-step
//! counter (`opt/step`), and the RNG state as four u64 words split into
//! exact high/low 32-bit halves (`opt/rng`, eight f64 values).

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::{atomic_write, crc32};
use crate::model::Model;
use crate::optim::AdamW;
use crate::rng::Rng;
use crate::tensor::{Dtype, Scalar, Tensor};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 8] = b"SMTCKPT1";
pub const CKPT_VERSION: u32 = 1;

/// One named tensor in wire form.
#[derive(Debug, Clone, PartialEq)]
pub struct CkptTensor {
    pub name: String,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    /// Raw little-endian payload, `numel * dtype size` bytes.
    pub payload: Vec<u8>,
}

impl CkptTensor {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn from_f32(name: impl Into<String>, t: &Tensor<f32>) -> CkptTensor {
        let mut payload = Vec::with_capacity(4 * t.numel());
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        CkptTensor {
            name: name.into(),
            dtype: Dtype::F32,
            dims: t.shape().to_vec(),
            payload,
        }
    }

    pub fn from_f64_slice(name: impl Into<String>, dims: &[usize], data: &[f64]) -> CkptTensor {
        let mut payload = Vec::with_capacity(8 * data.len());
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        CkptTensor {
            name: name.into(),
            dtype: Dtype::F64,
            dims: dims.to_vec(),
            payload,
        }
    }

    pub fn from_scalar_tensor<S: Scalar>(name: impl Into<String>, t: &Tensor<S>) -> CkptTensor {
        match S::DTYPE {
            Dtype::F32 => {
                let mut payload = Vec::with_capacity(4 * t.numel());
                for v in t.data() {
                    payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
                }
                CkptTensor {
                    name: name.into(),
                    dtype: Dtype::F32,
                    dims: t.shape().to_vec(),
                    payload,
                }
            }
            Dtype::F64 => {
                let data: Vec<f64> = t.data().iter().map(|v| v.to_f64()).collect();
                CkptTensor::from_f64_slice(name, t.shape(), &data)
            }
        }
    }

    /// Decode into the requested scalar type; the stored dtype must
    /// match exactly (no silent casts).
    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        if self.dtype != S::DTYPE {
            return Err(Error::Data(format!(
                "tensor '{}' is {:?}, requested {:?}",
                self.name,
                self.dtype,
                S::DTYPE
            )));
        }
        let data: Vec<S> = match self.dtype {
            Dtype::F32 => self
                .payload
                .chunks_exact(4)
                .map(|c| S::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            Dtype::F64 => self
                .payload
                .chunks_exact(8)
                .map(|c| S::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        Tensor::from_vec(&self.dims, data)
    }

    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        if self.dtype != Dtype::F64 {
            return Err(Error::Data(format!(
                "tensor '{}' is {:?}, expected f64",
                self.name, self.dtype
            )));
        }
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// A decoded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<CkptTensor>,
}

fn corrupt(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint".into(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn find(&self, name: &str) -> Option<&CkptTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Completed training steps recorded in the snapshot.
    pub fn step(&self) -> Result<u64> {
        let t = self
            .find("opt/step")
            .ok_or_else(|| Error::Data("checkpoint lacks opt/step".into()))?;
        Ok(t.to_f64_vec()?[0] as u64)
    }

    /// RNG state words, reassembled from their exact 32-bit halves.
    pub fn rng_state(&self) -> Result<[u64; 4]> {
        let t = self
            .find("opt/rng")
            .ok_or_else(|| Error::Data("checkpoint lacks opt/rng".into()))?;
        let halves = t.to_f64_vec()?;
        if halves.len() != 8 {
            return Err(Error::Data(format!(
                "opt/rng holds {} values, expected 8",
                halves.len()
            )));
        }
        let mut words = [0u64; 4];
        for (i, w) in words.iter_mut().enumerate() {
            let hi = halves[2 * i] as u64;
            let lo = halves[2 * i + 1] as u64;
            *w = (hi << 32) | lo;
        }
        Ok(words)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let config_json = serde_json::to_string(&self.config)?;
        out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(config_json.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if t.name.len() > u16::MAX as usize {
                return Err(Error::Data(format!("tensor name too long: {}", t.name)));
            }
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(match t.dtype {
                Dtype::F32 => 0,
                Dtype::F64 => 1,
            });
            if t.dims.len() > u8::MAX as usize {
                return Err(Error::Data(format!("tensor rank too high: {}", t.dims.len())));
            }
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let expect = t.numel() * t.dtype.size_bytes();
            if t.payload.len() != expect {
                return Err(Error::Data(format!(
                    "tensor '{}' payload is {} bytes, dims say {expect}",
                    t.name,
                    t.payload.len()
                )));
            }
            out.extend_from_slice(&t.payload);
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < CKPT_MAGIC.len() + 4 + 4 {
            return Err(corrupt(bytes.len(), "file shorter than any valid checkpoint"));
        }
        if &bytes[..8] != CKPT_MAGIC {
            return Err(corrupt(0, "bad magic, expected SMTCKPT1"));
        }
        // Integrity first: a bad trailing CRC means corruption anywhere.
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32(body);
        if stored != computed {
            return Err(corrupt(
                bytes.len() - 4,
                format!("checksum mismatch: stored {stored:08x}, computed {computed:08x}"),
            ));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(corrupt(
                8,
                format!("unsupported format version {version}, this build reads {CKPT_VERSION}"),
            ));
        }
        let mut pos = 12;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(corrupt(*pos, format!("needed {n} more bytes past end")));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let config_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let config_bytes = take(&mut pos, config_len)?;
        let config: ModelConfig = serde_json::from_slice(config_bytes)?;
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name_at = pos;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| corrupt(name_at, "tensor name is not UTF-8"))?
                .to_string();
            let dtype = match take(&mut pos, 1)?[0] {
                0 => Dtype::F32,
                1 => Dtype::F64,
                other => return Err(corrupt(pos - 1, format!("unknown dtype code {other}"))),
            };
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = dims.iter().product();
            let payload = take(&mut pos, numel * dtype.size_bytes())?.to_vec();
            tensors.push(CkptTensor {
                name,
                dtype,
                dims,
                payload,
            });
        }
        if pos != body.len() {
            return Err(corrupt(pos, format!("{} trailing bytes", body.len() - pos)));
        }
        Ok(Checkpoint {
            version,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes)
    }
}

/// Snapshot the full training state: every model tensor (weights and
/// running statistics), optimizer moments, RNG words, completed steps.
pub fn snapshot<S: Scalar>(
    model: &Model<S>,
    opt: &AdamW,
    rng: &Rng,
    step: u64,
) -> Result<Checkpoint> {
    let mut tensors = Vec::new();
    for entry in model.params.entries() {
        tensors.push(CkptTensor::from_scalar_tensor(&entry.name, &entry.tensor));
    }
    for id in model.params.ids() {
        if !model.params.entry(id).trainable {
            continue;
        }
        let name = model.params.name(id);
        let (m, v) = opt.moments(id);
        let dims = vec![m.len()];
        tensors.push(CkptTensor::from_f64_slice(format!("opt/adamw.m/{name}"), &dims, m));
        tensors.push(CkptTensor::from_f64_slice(format!("opt/adamw.v/{name}"), &dims, v));
    }
    tensors.push(CkptTensor::from_f64_slice("opt/step", &[1], &[step as f64]));
    let words = rng.state();
    let mut halves = Vec::with_capacity(8);
    for w in words {
        halves.push((w >> 32) as f64);
        halves.push((w & 0xFFFF_FFFF) as f64);
    }
    tensors.push(CkptTensor::from_f64_slice("opt/rng", &[8], &halves));
    Ok(Checkpoint {
        version: CKPT_VERSION,
        config: model.config.clone(),
        tensors,
    })
}

/// Load model tensors from a checkpoint by name. The model and snapshot
/// must describe exactly the same tensors; any difference is refused
/// with the full list of mismatches.
pub fn apply_to_model<S: Scalar>(ckpt: &Checkpoint, model: &mut Model<S>) -> Result<()> {
    let mut problems = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for id in model.params.ids() {
        let name = model.params.name(id).to_string();
        seen.insert(name.clone());
        match ckpt.find(&name) {
            None => problems.push(format!("missing from checkpoint: {name}")),
            Some(t) => {
                if t.dims != model.params.get(id).shape() {
                    problems.push(format!(
                        "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                        t.dims,
                        model.params.get(id).shape()
                    ));
                } else if t.dtype != S::DTYPE {
                    problems.push(format!(
                        "dtype mismatch for {name}: checkpoint {:?}, model {:?}",
                        t.dtype,
                        S::DTYPE
                    ));
                }
            }
        }
    }
    for t in &ckpt.tensors {
        if !t.name.starts_with("opt/") && !seen.contains(&t.name) {
            problems.push(format!("unknown to this model: {}", t.name));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Data(format!(
            "checkpoint does not fit model '{}': {}",
            model.config.name,
            problems.join("; ")
        )));
    }
    for id in model.params.ids() {
        let name = model.params.name(id).to_string();
        let tensor = ckpt.find(&name).expect("checked above").to_tensor::<S>()?;
        *model.params.get_mut(id) = tensor;
    }
    Ok(())
}

/// Restore optimizer moments and step counter recorded for a model's
/// trainable parameters.
pub fn restore_optimizer<S: Scalar>(
    ckpt: &Checkpoint,
    model: &Model<S>,
    opt: &mut AdamW,
) -> Result<()> {
    for id in model.params.ids() {
        if !model.params.entry(id).trainable {
            continue;
        }
        let name = model.params.name(id);
        let m = ckpt
            .find(&format!("opt/adamw.m/{name}"))
            .ok_or_else(|| Error::Data(format!("checkpoint lacks opt/adamw.m/{name}")))?
            .to_f64_vec()?;
        let v = ckpt
            .find(&format!("opt/adamw.v/{name}"))
            .ok_or_else(|| Error::Data(format!("checkpoint lacks opt/adamw.v/{name}")))?
            .to_f64_vec()?;
        opt.restore(id, m, v)?;
    }
    opt.set_step_count(ckpt.step()?);
    Ok(())
}
