//! Binary corpus format, little-endian throughout.
//!
//! ```text
//! header  magic[8] "AVJCORP\0" | u32 version | u64 count
//!         | u32 visual_dim | u32 audio_dim | u32 class_count
//! record  u32 id_len | id (UTF-8) | u32 label_count | u32 labels…
//!         | u32 visual_len | f32 visual… | u32 audio_len | f32 audio…
//! ```

use std::collections::HashSet;
use std::path::Path;

use super::{write_atomic, Corpus, FeatureRecord};
use crate::error::{Error, FormatError, Result};

pub const CORPUS_MAGIC: &[u8; 8] = b"AVJCORP\0";
pub const CORPUS_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

pub fn encode_corpus(corpus: &Corpus) -> Vec<u8> {
    let per_record = 16 + 4 * (corpus.visual_dim() + corpus.audio_dim());
    let mut out = Vec::with_capacity(HEADER_LEN + corpus.len() * (per_record + 24));
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&(corpus.len() as u64).to_le_bytes());
    out.extend_from_slice(&(corpus.visual_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.audio_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.num_classes() as u32).to_le_bytes());
    for r in corpus.records() {
        out.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
        out.extend_from_slice(&(r.labels.len() as u32).to_le_bytes());
        for l in &r.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for feats in [&r.visual, &r.audio] {
            out.extend_from_slice(&(feats.len() as u32).to_le_bytes());
            for v in feats {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    write_atomic(path.as_ref(), &encode_corpus(corpus))
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_corpus(&bytes)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: u64,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(FormatError::Truncated {
                offset: self.bytes.len() as u64,
                record: self.record,
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(n.saturating_mul(4))?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus, FormatError> {
    if bytes.len() < 8 || &bytes[..8] != CORPUS_MAGIC {
        return Err(FormatError::BadMagic { expected: CORPUS_MAGIC });
    }
    let mut cur = Cursor {
        bytes,
        pos: 8,
        record: 0,
    };
    let version = cur.u32()?;
    if version != CORPUS_VERSION {
        return Err(FormatError::Version {
            found: version,
            supported: CORPUS_VERSION,
        });
    }
    let count = cur.u64()?;
    let visual_dim = cur.u32()? as usize;
    let audio_dim = cur.u32()? as usize;
    let num_classes = cur.u32()? as usize;
    if visual_dim == 0 || audio_dim == 0 || num_classes == 0 {
        return Err(FormatError::InvalidRecord {
            record: 0,
            offset: 20,
            reason: "header dimensions must be positive".into(),
        });
    }

    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    let mut seen = HashSet::new();
    for index in 0..count {
        cur.record = index;
        let offset = cur.pos as u64;
        let invalid = |reason: String| FormatError::InvalidRecord {
            record: index,
            offset,
            reason,
        };

        let id_len = cur.u32()? as usize;
        let id = std::str::from_utf8(cur.take(id_len)?)
            .map_err(|e| invalid(format!("id is not UTF-8: {e}")))?
            .to_owned();
        if id.is_empty() {
            return Err(invalid("empty id".into()));
        }
        let n_labels = cur.u32()? as usize;
        if n_labels == 0 {
            return Err(invalid("no labels".into()));
        }
        let mut labels = Vec::with_capacity(n_labels.min(1024));
        for _ in 0..n_labels {
            let l = cur.u32()?;
            if l as usize >= num_classes {
                return Err(invalid(format!("label {l} >= class count {num_classes}")));
            }
            labels.push(l);
        }
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != labels {
            return Err(invalid("labels not sorted and unique".into()));
        }

        let mut feats = [Vec::new(), Vec::new()];
        for (slot, (field, dim)) in feats.iter_mut().zip([("visual", visual_dim), ("audio", audio_dim)]) {
            let len = cur.u32()? as usize;
            if len != dim {
                return Err(FormatError::DimMismatch {
                    record: index,
                    offset,
                    field,
                    expected: dim,
                    actual: len,
                });
            }
            *slot = cur.f32s(len)?;
            if !slot.iter().all(|v| v.is_finite()) {
                return Err(invalid(format!("non-finite {field} feature")));
            }
        }
        if !seen.insert(id.clone()) {
            return Err(FormatError::DuplicateId {
                record: index,
                offset,
                id,
            });
        }
        let [visual, audio] = feats;
        records.push(FeatureRecord {
            id,
            labels,
            visual,
            audio,
        });
    }
    if cur.pos != bytes.len() {
        return Err(FormatError::TrailingBytes {
            count,
            offset: cur.pos as u64,
            extra: (bytes.len() - cur.pos) as u64,
        });
    }
    Ok(Corpus::new(visual_dim, audio_dim, num_classes, records).expect("decoded records were validated"))
}
