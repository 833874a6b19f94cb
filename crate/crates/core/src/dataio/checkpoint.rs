//! Training checkpoints, little-endian throughout.
//!
//! ```text
//! magic[8] "AVJCKPT\0" | u32 version
//! u32 config_len | config as key=value text
//! u64 global_step | u8 has_loss | f64 lambda, l_cos, l_class, l2, total (if has_loss)
//! u32 block_count | per block: u32 rows | u32 cols | f64 values…
//! u8 optimizer (0 adam, 1 sgd) | f64 beta1, beta2, epsilon (adam only) | u64 t
//! adam only: first moments then second moments, one f64 per parameter
//! ```

use std::path::Path;

use super::{write_atomic, Corpus};
use crate::error::{Error, FormatError, Result};
use crate::losses::LossBreakdown;
use crate::network::init_model;
use crate::numerics::Rng;
use crate::trainer::{OptimizerKind, OptimizerState, TrainState, TrainingConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AVJCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainingConfig,
    pub state: TrainState,
}

impl Checkpoint {
    /// Errors unless the checkpoint can continue training on `corpus`.
    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.visual_dim() != self.config.visual_input_dim {
            return Err(Error::DimensionMismatch {
                context: "corpus visual dim vs checkpoint",
                expected: self.config.visual_input_dim,
                actual: corpus.visual_dim(),
            });
        }
        if corpus.audio_dim() != self.config.audio_input_dim {
            return Err(Error::DimensionMismatch {
                context: "corpus audio dim vs checkpoint",
                expected: self.config.audio_input_dim,
                actual: corpus.audio_dim(),
            });
        }
        if corpus.num_classes() > self.config.num_classes {
            return Err(Error::Config(format!(
                "corpus has {} classes, checkpoint model only {}",
                corpus.num_classes(),
                self.config.num_classes
            )));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(config: &TrainingConfig, state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let kv = config.to_kv();
    put_u32(&mut out, kv.len() as u32);
    out.extend_from_slice(kv.as_bytes());

    out.extend_from_slice(&state.global_step.to_le_bytes());
    match &state.last_loss {
        Some(l) => {
            out.push(1);
            for v in [l.lambda, l.l_cos, l.l_class, l.l2, l.total] {
                put_f64(&mut out, v);
            }
        }
        None => out.push(0),
    }

    let shapes = state.model.block_shapes();
    put_u32(&mut out, shapes.len() as u32);
    for ((_, (r, c)), (_, values)) in shapes.iter().zip(state.model.param_blocks()) {
        put_u32(&mut out, *r as u32);
        put_u32(&mut out, *c as u32);
        values.iter().for_each(|&v| put_f64(&mut out, v));
    }

    let opt = &state.optimizer;
    match opt.kind {
        OptimizerKind::Adam { beta1, beta2, epsilon } => {
            out.push(0);
            for v in [beta1, beta2, epsilon] {
                put_f64(&mut out, v);
            }
        }
        OptimizerKind::Sgd => out.push(1),
    }
    out.extend_from_slice(&opt.t.to_le_bytes());
    for moment in [&opt.first_moment, &opt.second_moment] {
        moment.iter().flatten().for_each(|&v| put_f64(&mut out, v));
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
        }
        .into());
    }
    r.pos = 8;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        }
        .into());
    }
    let kv_len = r.u32()? as usize;
    let kv_at = r.pos;
    let kv = std::str::from_utf8(r.take(kv_len)?).map_err(|_| r.corrupt_at(kv_at, "config is not UTF-8"))?;
    let config = TrainingConfig::from_kv(kv).map_err(|e| r.corrupt_at(kv_at, &e.to_string()))?;

    let global_step = r.u64()?;
    let last_loss = match r.u8()? {
        0 => None,
        1 => {
            let mut v = [0.0; 5];
            for x in &mut v {
                *x = r.f64()?;
            }
            Some(LossBreakdown {
                lambda: v[0],
                l_cos: v[1],
                l_class: v[2],
                l2: v[3],
                total: v[4],
            })
        }
        _ => return Err(r.corrupt_at(r.pos - 1, "bad loss flag")),
    };

    // The configuration fixes the architecture; build a template and fill it.
    let mut model = init_model(&config, &mut Rng::new(0))?;
    let shapes = model.block_shapes();
    let count = r.u32()? as usize;
    if count != shapes.len() {
        return Err(FormatError::Shape {
            block: "model".into(),
            expected: format!("{} blocks", shapes.len()),
            found: format!("{count} blocks"),
        }
        .into());
    }
    for ((id, (rows, cols)), (_, values)) in shapes.iter().zip(model.param_blocks_mut()) {
        let found = (r.u32()? as usize, r.u32()? as usize);
        if found != (*rows, *cols) {
            return Err(FormatError::Shape {
                block: id.to_string(),
                expected: format!("{rows}x{cols}"),
                found: format!("{}x{}", found.0, found.1),
            }
            .into());
        }
        for v in values.iter_mut() {
            *v = r.f64()?;
        }
    }

    let kind = match r.u8()? {
        0 => OptimizerKind::Adam {
            beta1: r.f64()?,
            beta2: r.f64()?,
            epsilon: r.f64()?,
        },
        1 => OptimizerKind::Sgd,
        _ => return Err(r.corrupt_at(r.pos - 1, "unknown optimizer")),
    };
    let mut optimizer = OptimizerState::new(kind, &model);
    optimizer.t = r.u64()?;
    for moment in [&mut optimizer.first_moment, &mut optimizer.second_moment] {
        for v in moment.iter_mut().flatten() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes {
            count: count as u64,
            offset: r.pos as u64,
            extra: (bytes.len() - r.pos) as u64,
        }
        .into());
    }
    Ok(Checkpoint {
        config,
        state: TrainState {
            model,
            optimizer,
            global_step,
            last_loss,
        },
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &TrainingConfig, state: &TrainState) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(config, state))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::Truncated {
                offset: self.bytes.len() as u64,
                record: 0,
            }),
        }
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn corrupt_at(&self, offset: usize, reason: &str) -> Error {
        FormatError::Corrupt {
            offset: offset as u64,
            reason: reason.to_string(),
        }
        .into()
    }
}
