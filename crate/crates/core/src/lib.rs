//! Two-branch joint audio-visual embeddings.
//!
//! A visual MLP and an audio MLP map pooled per-video features into one
//! embedding space. Training pairs the two modalities of the same video
//! (positives) or of label-disjoint videos (negatives) under a cosine margin
//! loss, optionally regularized by a classifier shared by both branches.
//! Retrieval ranks one modality against the other by exact cosine search.

pub mod dataio;
pub mod error;
pub mod losses;
pub mod network;
pub mod numerics;
pub mod retrieval;
pub mod sampling;
pub mod trainer;

pub use error::{Error, FormatError, Result};
