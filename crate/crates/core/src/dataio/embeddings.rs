//! Export of computed embeddings, little-endian.
//!
//! ```text
//! header  magic[8] "AVJEMBD\0" | u32 version | u64 count | u32 dim
//! record  u32 id_len | id | u32 label_count | u32 labels… | f64 visual[dim] | f64 audio[dim]
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::write_atomic;
use crate::error::{Error, FormatError, Result};
use crate::network::Modality;
use crate::numerics::DenseMatrix;
use crate::retrieval::EmbeddingStore;

pub const EMBEDDINGS_MAGIC: &[u8; 8] = b"AVJEMBD\0";
pub const EMBEDDINGS_VERSION: u32 = 1;

pub fn encode_embeddings(store: &EmbeddingStore) -> Vec<u8> {
    let d = store.dim();
    let mut out = Vec::with_capacity(24 + store.len() * (16 + 16 * d));
    out.extend_from_slice(EMBEDDINGS_MAGIC);
    out.extend_from_slice(&EMBEDDINGS_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    let (image, audio) = (store.embeddings(Modality::Visual), store.embeddings(Modality::Audio));
    for (i, id) in store.ids().iter().enumerate() {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        let labels = &store.labels()[i];
        out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for v in image.row(i).iter().chain(audio.row(i)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingStore> {
    let mut pos = 0usize;
    let mut record = 0u64;
    let mut take = |n: usize, record: u64| -> std::result::Result<&[u8], FormatError> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or(FormatError::Truncated {
                offset: bytes.len() as u64,
                record,
            })?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());

    if take(8, 0).ok() != Some(&EMBEDDINGS_MAGIC[..]) {
        return Err(FormatError::BadMagic {
            expected: EMBEDDINGS_MAGIC,
        }
        .into());
    }
    let version = u32_at(take(4, 0)?);
    if version != EMBEDDINGS_VERSION {
        return Err(FormatError::Version {
            found: version,
            supported: EMBEDDINGS_VERSION,
        }
        .into());
    }
    let count = u64::from_le_bytes(take(8, 0)?.try_into().unwrap());
    let d = u32_at(take(4, 0)?) as usize;
    let (mut ids, mut labels, mut image, mut audio) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    while record < count {
        let id_len = u32_at(take(4, record)?) as usize;
        let id = String::from_utf8(take(id_len, record)?.to_vec()).map_err(|_| FormatError::InvalidRecord {
            record,
            offset: 0,
            reason: "id is not UTF-8".into(),
        })?;
        let n_labels = u32_at(take(4, record)?) as usize;
        let mut ls = Vec::with_capacity(n_labels.min(1024));
        for _ in 0..n_labels {
            ls.push(u32_at(take(4, record)?));
        }
        for target in [&mut image, &mut audio] {
            for chunk in take(8 * d, record)?.chunks_exact(8) {
                target.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
        ids.push(id);
        labels.push(ls);
        record += 1;
    }
    let end = take(0, record)?.as_ptr() as usize - bytes.as_ptr() as usize;
    if end != bytes.len() {
        return Err(FormatError::TrailingBytes {
            count,
            offset: end as u64,
            extra: (bytes.len() - end) as u64,
        }
        .into());
    }
    let n = ids.len();
    EmbeddingStore::from_parts(
        ids,
        labels,
        DenseMatrix::from_vec(n, d, image)?,
        DenseMatrix::from_vec(n, d, audio)?,
    )
}

/// `id,labels,visual,audio` with `;`-joined lists, one line per video.
/// Values print in shortest round-trip form.
pub fn embeddings_to_csv(store: &EmbeddingStore) -> String {
    let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
    let mut out = String::from("id,labels,visual,audio\n");
    for (i, id) in store.ids().iter().enumerate() {
        let labels: Vec<String> = store.labels()[i].iter().map(u32::to_string).collect();
        let _ = writeln!(
            out,
            "{id},{},{},{}",
            labels.join(";"),
            join(store.embeddings(Modality::Visual).row(i)),
            join(store.embeddings(Modality::Audio).row(i))
        );
    }
    out
}

pub fn write_embeddings(path: impl AsRef<Path>, store: &EmbeddingStore) -> Result<()> {
    write_atomic(path.as_ref(), &encode_embeddings(store))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> EmbeddingStore {
        EmbeddingStore::from_parts(
            vec!["a".into(), "bé".into(), "c".into()],
            vec![vec![0], vec![1, 4], vec![2]],
            DenseMatrix::from_vec(3, 2, vec![0.1, -2.0, 1e-300, 3.5, f64::MIN_POSITIVE, 0.0]).unwrap(),
            DenseMatrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, -0.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let s = store();
        let bytes = encode_embeddings(&s);
        assert_eq!(&bytes[..8], EMBEDDINGS_MAGIC);
        let back = decode_embeddings(&bytes).unwrap();
        assert_eq!(back.ids(), s.ids());
        assert_eq!(back.labels(), s.labels());
        assert_eq!(encode_embeddings(&back), bytes);
    }

    #[test]
    fn binary_errors() {
        let bytes = encode_embeddings(&store());
        assert!(matches!(
            decode_embeddings(&bytes[..bytes.len() - 1]),
            Err(Error::Format(FormatError::Truncated { record: 2, .. }))
        ));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0]);
        assert!(matches!(
            decode_embeddings(&long),
            Err(Error::Format(FormatError::TrailingBytes { extra: 2, .. }))
        ));
        assert!(matches!(
            decode_embeddings(b"nope"),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
    }

    #[test]
    fn csv_values_parse_back_exactly() {
        let s = store();
        let text = embeddings_to_csv(&s);
        let line = text.lines().nth(1).unwrap();
        assert!(line.starts_with("a,0,"));
        let visual: Vec<f64> = line
            .split(',')
            .nth(2)
            .unwrap()
            .split(';')
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(visual, s.embeddings(Modality::Visual).row(0));
        assert!(text.lines().nth(2).unwrap().starts_with("bé,1;4,"));
    }
}
