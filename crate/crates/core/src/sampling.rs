//! Positive and negative audio-visual pairs.
//!
//! Each slot of a batch consumes one anchor record. With probability
//! `p_negative` the slot becomes a negative: the anchor keeps one of its two
//! modalities (chosen by a fair coin) and the other side comes from a random
//! record sharing no label with it, found by rejection sampling. Otherwise the
//! slot is the anchor's own audio and visual features.

use crate::dataio::FeatureRecord;
use crate::error::{Error, Result};
use crate::losses::PairLabel;
use crate::numerics::Rng;

/// Stream ids `EPOCH_STREAM_BASE + epoch` drive the per-epoch shuffles.
pub const EPOCH_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy)]
pub struct PairSample<'a> {
    pub audio: &'a FeatureRecord,
    pub visual: &'a FeatureRecord,
    pub label: PairLabel,
    /// Corpus index of the record that produced this slot.
    pub anchor: usize,
}

impl PairSample<'_> {
    pub fn y(&self) -> i8 {
        self.label.y()
    }

    /// `(audio source id, visual source id)`.
    pub fn source_ids(&self) -> (&str, &str) {
        (&self.audio.id, &self.visual.id)
    }

    /// Positives come from one video; negatives from two videos with no
    /// common label.
    pub fn is_valid(&self) -> bool {
        match self.label {
            PairLabel::Positive => self.audio.id == self.visual.id && self.audio.labels == self.visual.labels,
            PairLabel::Negative => self.audio.id != self.visual.id && self.audio.labels_disjoint(self.visual),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub p_negative: f64,
    pub max_attempts: usize,
}

impl BatchSpec {
    pub fn new(batch_size: usize, p_negative: f64) -> Self {
        BatchSpec {
            batch_size,
            p_negative,
            max_attempts: 1000,
        }
    }

    fn validate(&self, corpus_len: usize) -> Result<()> {
        if corpus_len == 0 {
            return Err(Error::Contract("cannot sample from an empty corpus".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_negative) {
            return Err(Error::Config(format!("p_negative {} outside [0, 1]", self.p_negative)));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

fn sample_slot<'a>(
    records: &'a [FeatureRecord],
    anchor: usize,
    spec: &BatchSpec,
    rng: &mut Rng,
) -> Result<PairSample<'a>> {
    let a = &records[anchor];
    if !rng.bernoulli(spec.p_negative) {
        return Ok(PairSample {
            audio: a,
            visual: a,
            label: PairLabel::Positive,
            anchor,
        });
    }
    let anchor_is_audio = rng.bernoulli(0.5);
    for _ in 0..spec.max_attempts {
        let partner = &records[rng.below(records.len())];
        if a.labels_disjoint(partner) {
            let (audio, visual) = if anchor_is_audio { (a, partner) } else { (partner, a) };
            return Ok(PairSample {
                audio,
                visual,
                label: PairLabel::Negative,
                anchor,
            });
        }
    }
    Err(Error::SamplingExhausted {
        attempts: spec.max_attempts,
    })
}

/// `batch_size` pairs with anchors drawn uniformly with replacement.
pub fn make_batch<'a>(records: &'a [FeatureRecord], spec: &BatchSpec, rng: &mut Rng) -> Result<Vec<PairSample<'a>>> {
    spec.validate(records.len())?;
    (0..spec.batch_size)
        .map(|_| {
            let anchor = rng.below(records.len());
            sample_slot(records, anchor, spec, rng)
        })
        .collect()
}

/// Batches of one epoch: anchors sweep a seeded permutation of the corpus,
/// `len / batch_size` batches, the remainder dropped.
pub struct EpochBatches<'a> {
    records: &'a [FeatureRecord],
    spec: BatchSpec,
    order: Vec<usize>,
    next: usize,
    rng: Rng,
}

impl<'a> EpochBatches<'a> {
    pub fn num_batches(&self) -> usize {
        self.order.len() / self.spec.batch_size
    }
}

impl<'a> Iterator for EpochBatches<'a> {
    type Item = Result<Vec<PairSample<'a>>>;

    fn next(&mut self) -> Option<Self::Item> {
        let end = self.next + self.spec.batch_size;
        if end > self.order.len() {
            return None;
        }
        let batch = self.order[self.next..end]
            .iter()
            .map(|&anchor| sample_slot(self.records, anchor, &self.spec, &mut self.rng))
            .collect();
        self.next = end;
        Some(batch)
    }
}

pub fn epoch_iterator<'a>(
    records: &'a [FeatureRecord],
    spec: &BatchSpec,
    seed: u64,
    epoch: u64,
) -> Result<EpochBatches<'a>> {
    spec.validate(records.len())?;
    let mut rng = Rng::stream(seed, EPOCH_STREAM_BASE + epoch);
    let order = rng.permutation(records.len());
    Ok(EpochBatches {
        records,
        spec: *spec,
        order,
        next: 0,
        rng,
    })
}
