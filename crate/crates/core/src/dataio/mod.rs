//! Feature records, the binary corpus format, CSV interchange, checkpoints,
//! embedding export and the synthetic correlated-corpus generator.

mod checkpoint;
mod corpus_file;
mod csv_import;
mod embeddings;
mod synthetic;

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use corpus_file::{decode_corpus, encode_corpus, read_corpus, write_corpus, CORPUS_MAGIC, CORPUS_VERSION};
pub use csv_import::{corpus_to_csv, export_csv, import_csv, parse_csv};
pub use embeddings::{
    decode_embeddings, embeddings_to_csv, encode_embeddings, read_embeddings, write_embeddings, EMBEDDINGS_MAGIC,
    EMBEDDINGS_VERSION,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};

/// One video: its id, class labels and the two pooled feature vectors.
/// Features are kept at 32-bit precision, the precision they are stored at.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    /// Sorted, without duplicates.
    pub labels: Vec<u32>,
    pub visual: Vec<f32>,
    pub audio: Vec<f32>,
}

impl FeatureRecord {
    pub fn new(id: impl Into<String>, mut labels: Vec<u32>, visual: Vec<f32>, audio: Vec<f32>) -> Self {
        labels.sort_unstable();
        labels.dedup();
        FeatureRecord {
            id: id.into(),
            labels,
            visual,
            audio,
        }
    }

    pub fn visual_f64(&self) -> Vec<f64> {
        self.visual.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn audio_f64(&self) -> Vec<f64> {
        self.audio.iter().map(|&v| f64::from(v)).collect()
    }

    /// True when the two records have no label in common.
    pub fn labels_disjoint(&self, other: &FeatureRecord) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.labels.len() && j < other.labels.len() {
            match self.labels[i].cmp(&other.labels[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return false,
            }
        }
        true
    }

    /// Reason the record is invalid under the given dimensions, if any.
    fn problem(&self, visual_dim: usize, audio_dim: usize, num_classes: usize) -> Option<String> {
        if self.id.is_empty() {
            return Some("empty id".into());
        }
        if self.labels.is_empty() {
            return Some(format!("record {:?} has no labels", self.id));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= num_classes) {
            return Some(format!("label {l} out of range for {num_classes} classes"));
        }
        if self.visual.len() != visual_dim {
            return Some(format!("visual length {} != {visual_dim}", self.visual.len()));
        }
        if self.audio.len() != audio_dim {
            return Some(format!("audio length {} != {audio_dim}", self.audio.len()));
        }
        if !self.visual.iter().chain(&self.audio).all(|v| v.is_finite()) {
            return Some(format!("record {:?} has non-finite features", self.id));
        }
        None
    }
}

/// A validated set of records sharing feature dimensions and a class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    visual_dim: usize,
    audio_dim: usize,
    num_classes: usize,
    records: Vec<FeatureRecord>,
}

impl Corpus {
    pub fn new(visual_dim: usize, audio_dim: usize, num_classes: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        if visual_dim == 0 || audio_dim == 0 || num_classes == 0 {
            return Err(Error::Config("corpus dimensions must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if let Some(reason) = r.problem(visual_dim, audio_dim, num_classes) {
                return Err(Error::Contract(format!("record {i}: {reason}")));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Corpus {
            visual_dim,
            audio_dim,
            num_classes,
            records,
        })
    }

    /// Dimensions taken from the first record, class count from the largest label.
    pub fn infer(records: Vec<FeatureRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Contract("cannot infer dimensions of an empty corpus".into()))?;
        let classes = records
            .iter()
            .flat_map(|r| r.labels.iter())
            .max()
            .map_or(1, |&m| m as usize + 1);
        Corpus::new(first.visual.len(), first.audio.len(), classes, records)
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_dim
    }

    pub fn audio_dim(&self) -> usize {
        self.audio_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<FeatureRecord> {
        self.records
    }

    /// Splits off the records from `at` onwards into a second corpus.
    pub fn split_at(mut self, at: usize) -> (Corpus, Corpus) {
        let tail = self.records.split_off(at.min(self.records.len()));
        let other = Corpus {
            records: tail,
            ..self.clone()
        };
        (self, other)
    }

    /// A corpus holding the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> Corpus {
        Corpus {
            visual_dim: self.visual_dim,
            audio_dim: self.audio_dim,
            num_classes: self.num_classes,
            records: Vec::new(),
        }
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, labels: Vec<u32>) -> FeatureRecord {
        FeatureRecord::new(id, labels, vec![1.0, 2.0], vec![3.0])
    }

    #[test]
    fn labels_are_normalized_and_compared() {
        let a = rec("a", vec![3, 1, 3]);
        assert_eq!(a.labels, [1, 3]);
        assert!(a.labels_disjoint(&rec("b", vec![0, 2, 4])));
        assert!(!a.labels_disjoint(&rec("c", vec![4, 3])));
    }

    #[test]
    fn corpus_validation() {
        assert!(Corpus::new(2, 1, 5, vec![rec("a", vec![1]), rec("b", vec![4])]).is_ok());
        assert!(matches!(
            Corpus::new(2, 1, 5, vec![rec("a", vec![1]), rec("a", vec![2])]),
            Err(Error::DuplicateId(_))
        ));
        assert!(Corpus::new(2, 1, 5, vec![rec("a", vec![5])]).is_err());
        assert!(Corpus::new(2, 1, 5, vec![rec("a", vec![])]).is_err());
        assert!(Corpus::new(3, 1, 5, vec![rec("a", vec![1])]).is_err());
        assert!(Corpus::new(2, 1, 5, vec![rec("", vec![1])]).is_err());
        let mut bad = rec("x", vec![0]);
        bad.audio[0] = f32::NAN;
        assert!(Corpus::new(2, 1, 5, vec![bad]).is_err());
        assert!(Corpus::new(2, 1, 5, vec![]).unwrap().is_empty());
    }

    #[test]
    fn infer_and_split() {
        let c = Corpus::infer(vec![rec("a", vec![1]), rec("b", vec![6]), rec("c", vec![0])]).unwrap();
        assert_eq!((c.visual_dim(), c.audio_dim(), c.num_classes()), (2, 1, 7));
        let (head, tail) = c.clone().split_at(2);
        assert_eq!(head.len(), 2);
        assert_eq!(tail.records()[0].id, "c");
        assert_eq!(c.subset(&[2, 0]).records()[1].id, "a");
    }
}
