//! Image ↔ sentence alignment.
//!
//! Images whose best sentence similarity is below the relevance threshold are
//! discarded; the rest are matched to sentences by a maximum-weight linear
//! assignment in which each sentence takes at most one image. When a
//! document has more images than sentences, every sentence first receives
//! one image through the assignment and the remaining images join their
//! highest-similarity sentence.

mod lap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    Assignment, ImageInfo, InterleavedDocument, MatchKind, Pair, Placement, PlacementPolicy,
    SimilarityMatrix,
};
use crate::embeddings::{cosine, EmbeddingError};
use crate::rng::derive_rng;

pub const RELEVANCE_TAU: f64 = 0.15;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("zero-norm embedding at sentence {sentence}, image {image}")]
    ZeroVector { sentence: usize, image: usize },
    #[error("embedding dims differ at sentence {sentence}, image {image}: {source}")]
    Dim {
        sentence: usize,
        image: usize,
        #[source]
        source: EmbeddingError,
    },
    #[error("similarity matrix needs at least one sentence and one image")]
    EmptyMatrix,
    #[error("non-finite similarity at sentence {sentence}, image {image}")]
    InvalidMatrix { sentence: usize, image: usize },
    #[error("relevance threshold {0} outside [-1, 1]")]
    BadTau(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentParams {
    /// Cosine units.
    pub relevance_tau: f64,
    pub placement: PlacementPolicy,
    pub rng_seed: u64,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        AlignmentParams {
            relevance_tau: RELEVANCE_TAU,
            placement: PlacementPolicy::After,
            rng_seed: 0,
        }
    }
}

impl AlignmentParams {
    pub fn validate(&self) -> Result<(), AlignError> {
        if !(-1.0..=1.0).contains(&self.relevance_tau) {
            return Err(AlignError::BadTau(self.relevance_tau));
        }
        Ok(())
    }
}

/// `values[s][i] = cosine(sentence_s, image_i)`.
pub fn build_similarity_matrix<S, I>(sentences: &[S], images: &[I]) -> Result<SimilarityMatrix, AlignError>
where
    S: AsRef<[f32]>,
    I: AsRef<[f32]>,
{
    if sentences.is_empty() || images.is_empty() {
        return Err(AlignError::EmptyMatrix);
    }
    let mut values = Vec::with_capacity(sentences.len() * images.len());
    for (s, sv) in sentences.iter().enumerate() {
        for (i, iv) in images.iter().enumerate() {
            let c = cosine(sv.as_ref(), iv.as_ref()).map_err(|e| match e {
                EmbeddingError::ZeroVector => AlignError::ZeroVector { sentence: s, image: i },
                other => AlignError::Dim {
                    sentence: s,
                    image: i,
                    source: other,
                },
            })?;
            values.push(c);
        }
    }
    Ok(SimilarityMatrix::new(sentences.len(), images.len(), values).expect("shape is consistent"))
}

/// Keep image columns whose maximum over sentences is at least `tau`.
/// Returns the reduced matrix and the original indices of kept columns.
pub fn drop_low_relevance(matrix: &SimilarityMatrix, tau: f64) -> (SimilarityMatrix, Vec<usize>) {
    let kept: Vec<usize> = (0..matrix.n_images())
        .filter(|&i| matrix.column(i).any(|v| v >= tau))
        .collect();
    (matrix.select_columns(&kept), kept)
}

fn check_finite(matrix: &SimilarityMatrix) -> Result<(), AlignError> {
    if matrix.n_sentences() == 0 || matrix.n_images() == 0 {
        return Err(AlignError::EmptyMatrix);
    }
    if let Some(pos) = matrix.values().iter().position(|v| !v.is_finite()) {
        return Err(AlignError::InvalidMatrix {
            sentence: pos / matrix.n_images(),
            image: pos % matrix.n_images(),
        });
    }
    Ok(())
}

/// Maximum-total image → sentence assignment with at most one image per
/// sentence; surplus images go to their column-max sentence.
pub fn solve_assignment(matrix: &SimilarityMatrix) -> Result<Assignment, AlignError> {
    check_finite(matrix)?;
    let (ns, ni) = (matrix.n_sentences(), matrix.n_images());
    // Shift so costs are non-negative; a constant shift leaves the argmin of
    // a fixed-cardinality assignment unchanged.
    let max = matrix.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut sentence_of = vec![usize::MAX; ni];
    let mut kinds = vec![MatchKind::Assignment; ni];
    if ni <= ns {
        let costs: Vec<f64> = (0..ni)
            .flat_map(|i| (0..ns).map(move |s| (i, s)))
            .map(|(i, s)| max - matrix.get(s, i))
            .collect();
        for (i, s) in lap::min_cost_assignment(&costs, ni, ns).into_iter().enumerate() {
            sentence_of[i] = s;
        }
    } else {
        let costs: Vec<f64> = matrix.values().iter().map(|v| max - v).collect();
        for (s, i) in lap::min_cost_assignment(&costs, ns, ni).into_iter().enumerate() {
            sentence_of[i] = s;
        }
        for i in 0..ni {
            if sentence_of[i] == usize::MAX {
                sentence_of[i] = matrix.column_argmax(i).expect("non-empty column").0;
                kinds[i] = MatchKind::MaxSimilarity;
            }
        }
    }

    let pairs = (0..ni)
        .map(|i| Pair {
            image: i,
            sentence: sentence_of[i],
            similarity: matrix.get(sentence_of[i], i),
            kind: kinds[i],
        })
        .collect();
    Ok(Assignment {
        pairs,
        unassigned_images: Vec::new(),
    })
}

/// Each image on its own argmax sentence (ties → lowest index).
pub fn max_assignment_baseline(matrix: &SimilarityMatrix) -> Assignment {
    let pairs = (0..matrix.n_images())
        .filter_map(|i| {
            matrix.column_argmax(i).map(|(s, v)| Pair {
                image: i,
                sentence: s,
                similarity: v,
                kind: MatchKind::MaxSimilarity,
            })
        })
        .collect();
    Assignment {
        pairs,
        unassigned_images: Vec::new(),
    }
}

/// Identity of an image that survived filtering, in matrix column order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedImage {
    pub image_name: String,
    pub raw_url: String,
}

/// Assemble the output record. Returns `None` for a document without images.
pub fn interleave(
    doc_id: &str,
    url: &str,
    text_list: Vec<String>,
    images: &[AlignedImage],
    matrix: SimilarityMatrix,
    assignment: &Assignment,
    params: &AlignmentParams,
) -> Option<InterleavedDocument> {
    if images.is_empty() || assignment.pairs.is_empty() {
        return None;
    }
    assert_eq!(images.len(), matrix.n_images());
    let mut rng = derive_rng(params.rng_seed, "placement", doc_id);
    let image_info = assignment
        .pairs
        .iter()
        .map(|p| {
            let placement = match params.placement {
                PlacementPolicy::Before => Placement::Before,
                PlacementPolicy::After => Placement::After,
                PlacementPolicy::Random => {
                    if rng.random_bool(0.5) {
                        Placement::Before
                    } else {
                        Placement::After
                    }
                }
            };
            ImageInfo {
                image_name: images[p.image].image_name.clone(),
                raw_url: images[p.image].raw_url.clone(),
                matched_text_index: p.sentence,
                matched_sim: p.similarity,
                placement,
            }
        })
        .collect();
    Some(InterleavedDocument {
        url: url.to_string(),
        text_list,
        image_info,
        similarity_matrix: matrix,
        doc_id: doc_id.to_string(),
    })
}

/// Result of aligning one document.
#[derive(Debug, Clone)]
pub struct AlignOutcome {
    pub document: Option<InterleavedDocument>,
    pub low_relevance_dropped: usize,
}

/// Full alignment of one document from its embeddings.
pub fn align_document<S, I>(
    doc_id: &str,
    url: &str,
    text_list: Vec<String>,
    images: &[AlignedImage],
    sentence_embeddings: &[S],
    image_embeddings: &[I],
    params: &AlignmentParams,
) -> Result<AlignOutcome, AlignError>
where
    S: AsRef<[f32]>,
    I: AsRef<[f32]>,
{
    params.validate()?;
    if images.is_empty() {
        return Ok(AlignOutcome {
            document: None,
            low_relevance_dropped: 0,
        });
    }
    let full = build_similarity_matrix(sentence_embeddings, image_embeddings)?;
    let (matrix, kept) = drop_low_relevance(&full, params.relevance_tau);
    let dropped = images.len() - kept.len();
    if kept.is_empty() {
        return Ok(AlignOutcome {
            document: None,
            low_relevance_dropped: dropped,
        });
    }
    let assignment = solve_assignment(&matrix)?;
    let kept_images: Vec<AlignedImage> = kept.iter().map(|&i| images[i].clone()).collect();
    Ok(AlignOutcome {
        document: interleave(doc_id, url, text_list, &kept_images, matrix, &assignment, params),
        low_relevance_dropped: dropped,
    })
}
