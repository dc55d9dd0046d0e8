//! Self-describing training checkpoint: "CKP1" magic, format version,
//! run-config snapshot, named parameter tensors (dtype tag, extents,
//! little-endian payload — batch-norm running stats included), optimizer
//! moments, the training RNG state, the epoch history, and a trailing
//! CRC32 of every preceding byte.

use std::fs;
use std::path::Path;

use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::metrics::EpochStats;
use crate::model::FusionModel;
use crate::optim::{AdamConfig, AdamState, Moments};
use crate::tensor::{DType, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Key = value snapshot of the full run configuration.
    pub config_text: String,
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<AdamSnapshot>,
    /// Serialized train RNG (JSON of the xoshiro state).
    pub rng_state: Vec<u8>,
    pub epochs_done: usize,
    pub history: Vec<EpochStats>,
    /// (epoch, validation accuracy) of the best epoch so far.
    pub best: Option<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct AdamSnapshot {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<(String, Moments)>,
}

impl Checkpoint {
    /// Snapshots a model plus optional optimizer and RNG state.
    pub fn capture(
        config_text: String,
        model: &FusionModel,
        adam: Option<&AdamState>,
        rng: &Xoshiro256PlusPlus,
        epochs_done: usize,
        history: Vec<EpochStats>,
        best: Option<(usize, f64)>,
    ) -> Result<Self> {
        let params = model
            .params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let adam = adam.map(|a| AdamSnapshot {
            config: a.config,
            step: a.step,
            moments: a.moments.clone(),
        });
        let rng_state = serde_json::to_vec(rng)?;
        Ok(Checkpoint {
            config_text,
            params,
            adam,
            rng_state,
            epochs_done,
            history,
            best,
        })
    }

    /// Writes parameters (and optimizer state when present) back into a
    /// freshly built model. Every name and shape must match.
    pub fn restore_into(&self, model: &mut FusionModel) -> Result<()> {
        let mut restored = 0usize;
        for (name, tensor) in model.params_mut() {
            let stored = self
                .params
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::MalformedHeader {
                    path: "<checkpoint>".into(),
                    detail: format!("missing parameter {name}"),
                })?;
            if stored.1.shape() != tensor.shape() {
                return Err(Error::MalformedHeader {
                    path: "<checkpoint>".into(),
                    detail: format!(
                        "parameter {name}: shape {:?} in checkpoint, {:?} in model",
                        stored.1.shape(),
                        tensor.shape()
                    ),
                });
            }
            tensor.data_mut().copy_from_slice(stored.1.data());
            restored += 1;
        }
        if restored != self.params.len() {
            return Err(Error::MalformedHeader {
                path: "<checkpoint>".into(),
                detail: format!(
                    "checkpoint has {} parameters, model expects {restored}",
                    self.params.len()
                ),
            });
        }
        Ok(())
    }

    pub fn adam_state(&self) -> Option<AdamState> {
        self.adam.as_ref().map(|a| AdamState {
            config: a.config,
            step: a.step,
            moments: a.moments.clone(),
        })
    }

    pub fn rng(&self) -> Result<Xoshiro256PlusPlus> {
        Ok(serde_json::from_slice(&self.rng_state)?)
    }
}

fn push_str(bytes: &mut Vec<u8>, s: &str) {
    bytes.extend_from_slice(&(s.len() as u32).to_le_bytes());
    bytes.extend_from_slice(s.as_bytes());
}

fn push_f64s(bytes: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_str(&mut bytes, &ckpt.config_text);
    bytes.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.params {
        push_str(&mut bytes, name);
        bytes.push(DType::F64.tag());
        bytes.push(t.requires_grad() as u8);
        bytes.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        push_f64s(&mut bytes, t.data());
    }
    match &ckpt.adam {
        None => bytes.push(0),
        Some(a) => {
            bytes.push(1);
            bytes.extend_from_slice(&a.step.to_le_bytes());
            push_f64s(
                &mut bytes,
                &[
                    a.config.lr,
                    a.config.beta1,
                    a.config.beta2,
                    a.config.eps,
                    a.config.weight_decay,
                ],
            );
            bytes.extend_from_slice(&(a.moments.len() as u32).to_le_bytes());
            for (name, m) in &a.moments {
                push_str(&mut bytes, name);
                bytes.extend_from_slice(&(m.m.len() as u32).to_le_bytes());
                push_f64s(&mut bytes, &m.m);
                push_f64s(&mut bytes, &m.v);
            }
        }
    }
    bytes.extend_from_slice(&(ckpt.rng_state.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&ckpt.rng_state);
    bytes.extend_from_slice(&(ckpt.epochs_done as u32).to_le_bytes());
    bytes.extend_from_slice(&(ckpt.history.len() as u32).to_le_bytes());
    for h in &ckpt.history {
        bytes.extend_from_slice(&(h.epoch as u32).to_le_bytes());
        push_f64s(
            &mut bytes,
            &[h.train_loss, h.train_accuracy, h.val_loss, h.val_accuracy],
        );
    }
    match ckpt.best {
        None => bytes.push(0),
        Some((epoch, acc)) => {
            bytes.push(1);
            bytes.extend_from_slice(&(epoch as u32).to_le_bytes());
            bytes.extend_from_slice(&acc.to_le_bytes());
        }
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&bytes);
    bytes.extend_from_slice(&hasher.finalize().to_le_bytes());
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.clone(),
                detail: format!("wanted {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec()).map_err(|_| Error::MalformedHeader {
            path: self.path.clone(),
            detail: "non-utf8 string".into(),
        })
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let p = path.display().to_string();
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            path: p,
            detail: "shorter than magic + version + checksum".into(),
        });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: p,
            expected: "CKP1".into(),
        });
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&bytes[..body_end]);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(Error::ChecksumMismatch {
            path: p,
            stored,
            computed,
        });
    }
    let mut r = Reader {
        bytes: &bytes[..body_end],
        pos: 4,
        path: p.clone(),
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: p,
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let config_text = r.string()?;
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.string()?;
        let dtype = r.u8()?;
        let requires_grad = r.u8()? != 0;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = match dtype {
            2 => r.f64s(n)?,
            1 => r.f32s(n)?,
            other => {
                return Err(Error::MalformedHeader {
                    path: p,
                    detail: format!("unknown dtype tag {other} for {name}"),
                })
            }
        };
        let mut t = Tensor::new(shape, data)?;
        if requires_grad {
            t = t.with_grad();
        }
        params.push((name, t));
    }
    let adam = if r.u8()? == 1 {
        let step = r.u64()?;
        let h = r.f64s(5)?;
        let config = AdamConfig {
            lr: h[0],
            beta1: h[1],
            beta2: h[2],
            eps: h[3],
            weight_decay: h[4],
        };
        let n_entries = r.u32()? as usize;
        let mut moments = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let name = r.string()?;
            let len = r.u32()? as usize;
            let m = r.f64s(len)?;
            let v = r.f64s(len)?;
            moments.push((name, Moments { m, v }));
        }
        Some(AdamSnapshot {
            config,
            step,
            moments,
        })
    } else {
        None
    };
    let rng_len = r.u32()? as usize;
    let rng_state = r.take(rng_len)?.to_vec();
    let epochs_done = r.u32()? as usize;
    let n_history = r.u32()? as usize;
    let mut history = Vec::with_capacity(n_history);
    for _ in 0..n_history {
        let epoch = r.u32()? as usize;
        let vals = r.f64s(4)?;
        history.push(EpochStats {
            epoch,
            train_loss: vals[0],
            train_accuracy: vals[1],
            val_loss: vals[2],
            val_accuracy: vals[3],
        });
    }
    let best = if r.u8()? == 1 {
        let epoch = r.u32()? as usize;
        let acc = r.f64()?;
        Some((epoch, acc))
    } else {
        None
    };
    if r.pos != body_end {
        return Err(Error::MalformedHeader {
            path: p,
            detail: format!("{} trailing bytes after checkpoint body", body_end - r.pos),
        });
    }
    Ok(Checkpoint {
        config_text,
        params,
        adam,
        rng_state,
        epochs_done,
        history,
        best,
    })
}
