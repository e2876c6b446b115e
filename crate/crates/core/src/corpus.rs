//! Shared record types.
//!
//! Similarities are stored everywhere as raw cosine values in `[-1, 1]`.
//! Thresholds that are conventionally quoted as "points" (cosine × 100) are
//! converted once, when configuration is parsed, via [`normalize_threshold`].

use std::collections::BTreeMap;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imagehash::PHash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityUnit {
    Cosine,
    Points,
}

#[derive(Debug, Error, PartialEq)]
pub enum ThresholdError {
    #[error("threshold {value} is not finite")]
    NotFinite { value: f64 },
    #[error("threshold {value} is outside [{min}, {max}] for unit {unit:?}")]
    OutOfRange {
        value: f64,
        unit: SimilarityUnit,
        min: f64,
        max: f64,
    },
}

/// Convert a similarity threshold to canonical cosine units.
pub fn normalize_threshold(value: f64, unit: SimilarityUnit) -> Result<f64, ThresholdError> {
    if !value.is_finite() {
        return Err(ThresholdError::NotFinite { value });
    }
    let limit = match unit {
        SimilarityUnit::Cosine => 1.0,
        SimilarityUnit::Points => 100.0,
    };
    if !(-limit..=limit).contains(&value) {
        return Err(ThresholdError::OutOfRange {
            value,
            unit,
            min: -limit,
            max: limit,
        });
    }
    Ok(match unit {
        SimilarityUnit::Cosine => value,
        SimilarityUnit::Points => value / 100.0,
    })
}

/// A similarity threshold as written in configuration: always with a unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Threshold {
    pub value: f64,
    pub unit: SimilarityUnit,
}

impl Threshold {
    pub const fn cosine(value: f64) -> Self {
        Threshold {
            value,
            unit: SimilarityUnit::Cosine,
        }
    }

    pub const fn points(value: f64) -> Self {
        Threshold {
            value,
            unit: SimilarityUnit::Points,
        }
    }

    pub fn to_cosine(self) -> Result<f64, ThresholdError> {
        normalize_threshold(self.value, self.unit)
    }
}

/// Document id used when the manifest line carries none: the first 8 bytes
/// of `sha256(url)`, hex encoded.
pub fn stable_doc_id(url: &str) -> String {
    let digest = Sha256::digest(url.as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCandidate {
    /// Absolute URL used for fetching.
    pub url: String,
    /// The reference exactly as it appeared in the manifest.
    pub raw_url: String,
    pub source_doc: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    pub url: String,
    pub sentences: Vec<Sentence>,
    pub image_candidates: Vec<ImageCandidate>,
}

impl RawDocument {
    pub fn sentence_texts(&self) -> Vec<String> {
        self.sentences.iter().map(|s| s.text.clone()).collect()
    }

    /// Embedding id of sentence `index` within this document.
    pub fn sentence_embedding_id(&self, index: usize) -> String {
        sentence_embedding_id(&self.doc_id, index)
    }
}

pub fn sentence_embedding_id(doc_id: &str, index: usize) -> String {
    format!("{doc_id}:s{index}")
}

/// One fetched image belonging to one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub doc_id: String,
    /// Position of the candidate in the document's candidate list.
    pub candidate_index: usize,
    pub image_id: String,
    pub raw_url: String,
    pub width: u32,
    pub height: u32,
    pub phash: PHash,
    pub embedding_id: String,
    #[serde(default)]
    pub head_scores: BTreeMap<String, f64>,
}

/// Sentence × image cosine similarities, row-major (rows are sentences).
///
/// Serialized as an array of rows, matching the released corpus format.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n_sentences: usize,
    n_images: usize,
    values: Vec<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum MatrixError {
    #[error("expected {expected} values for a {rows}x{cols} matrix, got {got}")]
    Shape {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("row {row} has {got} columns, expected {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        got: usize,
    },
}

impl SimilarityMatrix {
    pub fn new(n_sentences: usize, n_images: usize, values: Vec<f64>) -> Result<Self, MatrixError> {
        if values.len() != n_sentences * n_images {
            return Err(MatrixError::Shape {
                rows: n_sentences,
                cols: n_images,
                expected: n_sentences * n_images,
                got: values.len(),
            });
        }
        Ok(SimilarityMatrix {
            n_sentences,
            n_images,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatrixError> {
        let n_images = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * n_images);
        for (row, r) in rows.iter().enumerate() {
            if r.len() != n_images {
                return Err(MatrixError::Ragged {
                    row,
                    expected: n_images,
                    got: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Ok(SimilarityMatrix {
            n_sentences: rows.len(),
            n_images,
            values,
        })
    }

    pub fn n_sentences(&self) -> usize {
        self.n_sentences
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn get(&self, sentence: usize, image: usize) -> f64 {
        assert!(sentence < self.n_sentences && image < self.n_images);
        self.values[sentence * self.n_images + image]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, sentence: usize) -> &[f64] {
        &self.values[sentence * self.n_images..(sentence + 1) * self.n_images]
    }

    pub fn column(&self, image: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_sentences).map(move |s| self.get(s, image))
    }

    /// Index and value of the column maximum; ties go to the lowest sentence.
    pub fn column_argmax(&self, image: usize) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (s, v) in self.column(image).enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((s, v)),
            }
        }
        best
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_sentences).map(|s| self.row(s).to_vec()).collect()
    }

    /// Keep only the listed image columns, in the order given.
    pub fn select_columns(&self, keep: &[usize]) -> SimilarityMatrix {
        let mut values = Vec::with_capacity(self.n_sentences * keep.len());
        for s in 0..self.n_sentences {
            values.extend(keep.iter().map(|&i| self.get(s, i)));
        }
        SimilarityMatrix {
            n_sentences: self.n_sentences,
            n_images: keep.len(),
            values,
        }
    }

    /// Keep only the listed sentence rows, in the order given.
    pub fn select_rows(&self, keep: &[usize]) -> SimilarityMatrix {
        let mut values = Vec::with_capacity(keep.len() * self.n_images);
        for &s in keep {
            values.extend_from_slice(self.row(s));
        }
        SimilarityMatrix {
            n_sentences: keep.len(),
            n_images: self.n_images,
            values,
        }
    }
}

impl Serialize for SimilarityMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = serializer.serialize_seq(Some(self.n_sentences))?;
        for s in 0..self.n_sentences {
            seq.serialize_element(self.row(s))?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for SimilarityMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        SimilarityMatrix::from_rows(&rows).map_err(D::Error::custom)
    }
}

/// How a pair in an [`Assignment`] was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    /// Part of the one-image-per-sentence linear assignment.
    Assignment,
    /// Image attached to its best sentence (max baseline, or images left
    /// over once every sentence holds one).
    MaxSimilarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub image: usize,
    pub sentence: usize,
    pub similarity: f64,
    pub kind: MatchKind,
}

/// Image → sentence mapping; pairs are sorted by image index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<Pair>,
    pub unassigned_images: Vec<usize>,
}

impl Assignment {
    pub fn total_similarity(&self) -> f64 {
        self.pairs.iter().map(|p| p.similarity).sum()
    }

    /// Total over pairs produced by the linear assignment only.
    pub fn assignment_total(&self) -> f64 {
        self.pairs
            .iter()
            .filter(|p| p.kind == MatchKind::Assignment)
            .map(|p| p.similarity)
            .sum()
    }

    pub fn distinct_sentences(&self) -> usize {
        let mut s: Vec<usize> = self.pairs.iter().map(|p| p.sentence).collect();
        s.sort_unstable();
        s.dedup();
        s.len()
    }

    pub fn sentence_of(&self, image: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|p| p.image == image)
            .map(|p| p.sentence)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Before,
    #[default]
    After,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementPolicy {
    Before,
    #[default]
    After,
    Random,
}

impl fmt::Display for PlacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlacementPolicy::Before => "before",
            PlacementPolicy::After => "after",
            PlacementPolicy::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub image_name: String,
    pub raw_url: String,
    pub matched_text_index: usize,
    pub matched_sim: f64,
    /// Side of the matched sentence the image is rendered on.
    #[serde(default)]
    pub placement: Placement,
}

/// Output record; one JSON line per document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterleavedDocument {
    pub url: String,
    pub text_list: Vec<String>,
    pub image_info: Vec<ImageInfo>,
    pub similarity_matrix: SimilarityMatrix,
    #[serde(default)]
    pub doc_id: String,
}

impl InterleavedDocument {
    /// `doc_id`, or the URL-derived id for records produced elsewhere.
    pub fn effective_doc_id(&self) -> String {
        if self.doc_id.is_empty() {
            stable_doc_id(&self.url)
        } else {
            self.doc_id.clone()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.similarity_matrix.n_sentences() != self.text_list.len()
            || self.similarity_matrix.n_images() != self.image_info.len()
        {
            return Err(format!(
                "similarity matrix is {}x{} but document has {} sentences and {} images",
                self.similarity_matrix.n_sentences(),
                self.similarity_matrix.n_images(),
                self.text_list.len(),
                self.image_info.len()
            ));
        }
        for (i, info) in self.image_info.iter().enumerate() {
            if info.matched_text_index >= self.text_list.len() {
                return Err(format!(
                    "image {i} matched_text_index {} out of range",
                    info.matched_text_index
                ));
            }
            if !(-1.0..=1.0).contains(&info.matched_sim) {
                return Err(format!("image {i} matched_sim {} outside [-1,1]", info.matched_sim));
            }
        }
        Ok(())
    }
}
