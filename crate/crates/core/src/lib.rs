//! Curation primitives for building interleaved image/text corpora.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`corpus`]: shared record types and the similarity-unit convention.
//! * [`ingest`]: manifest parsing, sentence splitting and image URL rules.
//! * [`imagehash`]: DCT perceptual hashing and duplicate detection.
//! * [`filters`]: size/aspect gating and embedding classifier heads.
//! * [`embeddings`]: cosine similarity, shard I/O and the mock embedder.
//! * [`aligner`]: similarity matrices and image-to-sentence assignment.
//! * [`evalbench`]: AUC / precision@1 and the brute-force assignment oracle.
//! * [`subsets`]: fewer-faces and core corpus variants.
//! * [`flatten`]: training-sequence construction.
//! * [`stats`]: corpus statistics.
//!
//! Everything here is synchronous and free of I/O except the binary
//! readers/writers; network access lives in the fetch crate.

pub mod aligner;
pub mod cascade;
pub mod corpus;
pub mod embeddings;
pub mod evalbench;
pub mod filters;
pub mod flatten;
pub mod imagehash;
pub mod ingest;
pub mod rng;
pub mod stats;
pub mod subsets;

pub use corpus::{
    Assignment, ImageCandidate, ImageInfo, ImageRecord, InterleavedDocument, MatchKind, Pair,
    Placement, RawDocument, Sentence, SimilarityMatrix, SimilarityUnit, Threshold,
};
