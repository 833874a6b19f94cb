//! Exact cross-modal nearest-neighbor search and Recall@K.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;

use crate::dataio::FeatureRecord;
use crate::error::{Error, Result};
use crate::network::{JointModel, Modality};
use crate::numerics::{cosine_from_parts, norm, DenseMatrix, Rng};

/// Stream id used by [`recall_table`] to draw its pools.
pub const POOL_STREAM: u64 = 0x706f_6f6c;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Query with an audio embedding, rank the visual embeddings.
    AudioToVideo,
    /// Query with a visual embedding, rank the audio embeddings.
    VideoToAudio,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::AudioToVideo, Direction::VideoToAudio];

    pub fn query_modality(self) -> Modality {
        match self {
            Direction::AudioToVideo => Modality::Audio,
            Direction::VideoToAudio => Modality::Visual,
        }
    }

    pub fn target_modality(self) -> Modality {
        match self.query_modality() {
            Modality::Audio => Modality::Visual,
            Modality::Visual => Modality::Audio,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::AudioToVideo => "audio->video",
            Direction::VideoToAudio => "video->audio",
        })
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio->video" | "a2v" | "audio-to-video" => Ok(Direction::AudioToVideo),
            "video->audio" | "v2a" | "video-to-audio" => Ok(Direction::VideoToAudio),
            _ => Err(Error::Config(format!("unknown direction {s:?} (expected a2v or v2a)"))),
        }
    }
}

/// Paired embeddings of N videos, aligned by row. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    labels: Vec<Vec<u32>>,
    image: DenseMatrix,
    audio: DenseMatrix,
    image_norms: Vec<f64>,
    audio_norms: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn from_parts(ids: Vec<String>, labels: Vec<Vec<u32>>, image: DenseMatrix, audio: DenseMatrix) -> Result<Self> {
        let n = ids.len();
        for (context, actual) in [
            ("store labels", labels.len()),
            ("store image rows", image.rows()),
            ("store audio rows", audio.rows()),
        ] {
            if actual != n {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: n,
                    actual,
                });
            }
        }
        if image.cols() != audio.cols() {
            return Err(Error::DimensionMismatch {
                context: "store embedding width",
                expected: image.cols(),
                actual: audio.cols(),
            });
        }
        let mut index = HashMap::with_capacity(n);
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let norms = |m: &DenseMatrix| (0..m.rows()).map(|i| norm(m.row(i))).collect();
        Ok(EmbeddingStore {
            image_norms: norms(&image),
            audio_norms: norms(&audio),
            ids,
            labels,
            image,
            audio,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.image.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[Vec<u32>] {
        &self.labels
    }

    pub fn embeddings(&self, modality: Modality) -> &DenseMatrix {
        match modality {
            Modality::Visual => &self.image,
            Modality::Audio => &self.audio,
        }
    }

    fn norms(&self, modality: Modality) -> &[f64] {
        match modality {
            Modality::Visual => &self.image_norms,
            Modality::Audio => &self.audio_norms,
        }
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// The rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<EmbeddingStore> {
        let pick = |m: &DenseMatrix| {
            let values = indices.iter().flat_map(|&i| m.row(i).iter().copied()).collect();
            DenseMatrix::from_vec(indices.len(), m.cols(), values)
        };
        EmbeddingStore::from_parts(
            indices.iter().map(|&i| self.ids[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i].clone()).collect(),
            pick(&self.image)?,
            pick(&self.audio)?,
        )
    }

    /// Cosine scores of `query` against every target-modality row.
    fn scores(&self, query: &[f64], direction: Direction) -> Vec<f64> {
        let target = direction.target_modality();
        let m = self.embeddings(target);
        let mut dots = vec![0.0; m.rows()];
        m.matvec_into(query, &mut dots);
        let qn = norm(query);
        dots.iter()
            .zip(self.norms(target))
            // `+ 0.0` folds -0.0 into 0.0 so the two tie under `total_cmp`.
            .map(|(&d, &n)| cosine_from_parts(d, qn, n).value + 0.0)
            .collect()
    }

    /// Candidate `a` outranks `b`: higher score, or equal score and smaller id.
    fn outranks(&self, scores: &[f64], a: usize, b: usize) -> bool {
        match scores[a].total_cmp(&scores[b]) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => self.ids[a] < self.ids[b],
        }
    }
}

/// Embeds every record with both branches.
pub fn build_store(model: &JointModel, records: &[FeatureRecord]) -> Result<EmbeddingStore> {
    let d = model.embedding_dim();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = records
        .par_iter()
        .map(|r| {
            let v = model.visual.embed(&r.visual_f64())?;
            let a = model.audio.embed(&r.audio_f64())?;
            Ok((v.into_inner(), a.into_inner()))
        })
        .collect::<Result<_>>()?;
    let (image, audio): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    EmbeddingStore::from_parts(
        records.iter().map(|r| r.id.clone()).collect(),
        records.iter().map(|r| r.labels.clone()).collect(),
        DenseMatrix::from_vec(records.len(), d, image.concat())?,
        DenseMatrix::from_vec(records.len(), d, audio.concat())?,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: Option<String>,
    pub direction: Direction,
    /// Descending by score, ties by ascending id.
    pub hits: Vec<Hit>,
}

fn check_query(store: &EmbeddingStore, query: &[f64]) -> Result<()> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    if query.len() != store.dim() {
        return Err(Error::DimensionMismatch {
            context: "query embedding",
            expected: store.dim(),
            actual: query.len(),
        });
    }
    Ok(())
}

fn ranked(
    store: &EmbeddingStore,
    query: &[f64],
    direction: Direction,
    exclude: Option<usize>,
    top_k: Option<usize>,
) -> Vec<Hit> {
    let scores = store.scores(query, direction);
    let mut order: Vec<usize> = (0..store.len()).filter(|&i| Some(i) != exclude).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| store.ids[a].cmp(&store.ids[b]))
    });
    if let Some(k) = top_k {
        order.truncate(k);
    }
    order
        .into_iter()
        .map(|i| Hit {
            id: store.ids[i].clone(),
            index: i,
            score: scores[i],
        })
        .collect()
}

/// Ranks the target modality of `store` against an arbitrary query embedding.
pub fn rank(
    store: &EmbeddingStore,
    query: &[f64],
    direction: Direction,
    top_k: Option<usize>,
) -> Result<RetrievalResult> {
    check_query(store, query)?;
    Ok(RetrievalResult {
        query_id: None,
        direction,
        hits: ranked(store, query, direction, None, top_k),
    })
}

/// Queries with the stored embedding of `id`. With `exclude_self` the video's
/// own counterpart is dropped before truncation, so the best other video
/// comes first.
pub fn query_cross_modal(
    store: &EmbeddingStore,
    id: &str,
    direction: Direction,
    exclude_self: bool,
    top_k: Option<usize>,
) -> Result<RetrievalResult> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    let i = store.position(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
    let query = store.embeddings(direction.query_modality()).row(i);
    Ok(RetrievalResult {
        query_id: Some(id.to_string()),
        direction,
        hits: ranked(store, query, direction, exclude_self.then_some(i), top_k),
    })
}

/// Zero-based rank of each query's own counterpart among all N candidates.
pub fn target_ranks(store: &EmbeddingStore, direction: Direction) -> Vec<usize> {
    let queries = store.embeddings(direction.query_modality());
    (0..store.len())
        .into_par_iter()
        .map(|i| {
            let scores = store.scores(queries.row(i), direction);
            (0..store.len())
                .filter(|&j| j != i && store.outranks(&scores, j, i))
                .count()
        })
        .collect()
}

fn check_k(store: &EmbeddingStore, k: usize) -> Result<()> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    if k == 0 || k > store.len() {
        return Err(Error::KOutOfRange { k, n: store.len() });
    }
    Ok(())
}

/// Fraction of queries whose own counterpart is in the top `k`.
pub fn recall_at_k(store: &EmbeddingStore, k: usize, direction: Direction) -> Result<f64> {
    check_k(store, k)?;
    let hits = target_ranks(store, direction).into_iter().filter(|&r| r < k).count();
    Ok(hits as f64 / store.len() as f64)
}

/// Fraction of queries whose top `k` holds at least one video sharing a label
/// with the query video (its own counterpart included).
pub fn label_recall_at_k(store: &EmbeddingStore, k: usize, direction: Direction) -> Result<f64> {
    check_k(store, k)?;
    let queries = store.embeddings(direction.query_modality());
    let hits = (0..store.len())
        .into_par_iter()
        .filter(|&i| {
            ranked(store, queries.row(i), direction, None, Some(k))
                .iter()
                .any(|h| store.labels[h.index].iter().any(|l| store.labels[i].contains(l)))
        })
        .count();
    Ok(hits as f64 / store.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallRow {
    pub pool: usize,
    pub audio_to_video: Vec<f64>,
    pub video_to_audio: Vec<f64>,
}

impl RecallRow {
    pub fn get(&self, direction: Direction) -> &[f64] {
        match direction {
            Direction::AudioToVideo => &self.audio_to_video,
            Direction::VideoToAudio => &self.video_to_audio,
        }
    }
}

/// Recall@K per pool size and direction.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallTable {
    pub ks: Vec<usize>,
    pub rows: Vec<RecallRow>,
}

impl RecallTable {
    /// `direction,pool,R@k…` lines with a header.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("direction,pool");
        for k in &self.ks {
            out.push_str(&format!(",R@{k}"));
        }
        out.push('\n');
        for dir in Direction::BOTH {
            for row in &self.rows {
                out.push_str(&format!("{dir},{}", row.pool));
                for v in row.get(dir) {
                    out.push_str(&format!(",{v:.6}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

impl fmt::Display for RecallTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, dir) in Direction::BOTH.into_iter().enumerate() {
            if n > 0 {
                writeln!(f)?;
            }
            writeln!(f, "Recall {dir}")?;
            write!(f, "{:>10}", "pool size")?;
            for k in &self.ks {
                write!(f, "{:>9}", format!("R@{k}"))?;
            }
            writeln!(f)?;
            for row in &self.rows {
                write!(f, "{:>10}", row.pool)?;
                for v in row.get(dir) {
                    write!(f, "{:>8.1}%", 100.0 * v)?;
                }
                writeln!(f)?;
            }
        }
        Ok(())
    }
}

/// Draws one seeded permutation of the store; pool `p` is its first `p`
/// entries, so smaller pools are subsets of larger ones.
pub fn recall_table(store: &EmbeddingStore, pools: &[usize], ks: &[usize], seed: u64) -> Result<RecallTable> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    if ks.is_empty() || pools.is_empty() {
        return Err(Error::Config("need at least one pool size and one k".into()));
    }
    for &pool in pools {
        if pool == 0 || pool > store.len() {
            return Err(Error::PoolTooLarge { pool, n: store.len() });
        }
        if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > pool) {
            return Err(Error::KOutOfRange { k, n: pool });
        }
    }
    let order = Rng::stream(seed, POOL_STREAM).permutation(store.len());
    let rows = pools
        .iter()
        .map(|&pool| {
            let sub = store.subset(&order[..pool])?;
            let mut recalls = Direction::BOTH.into_iter().map(|dir| {
                let ranks = target_ranks(&sub, dir);
                ks.iter()
                    .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / pool as f64)
                    .collect::<Vec<_>>()
            });
            Ok(RecallRow {
                pool,
                audio_to_video: recalls.next().unwrap(),
                video_to_audio: recalls.next().unwrap(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(RecallTable { ks: ks.to_vec(), rows })
}
