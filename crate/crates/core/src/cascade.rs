//! The per-document image filter cascade: within-document dedup, frequent
//! duplicate removal, size/aspect, NSFW, then text relevance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aligner::RELEVANCE_TAU;
use crate::corpus::ImageRecord;
use crate::filters::{nsfw_gate, size_aspect_filter, Rejection, SizeRules, NSFW_THRESHOLD};
use crate::imagehash::{dedup_within_document, DuplicateIndex};

pub const WITHIN_DOC_THRESHOLD: u32 = 5;
pub const MAX_DUPLICATES: u32 = 10;
pub const NSFW_HEAD: &str = "nsfw";
pub const FACE_HEAD: &str = "face";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    WithinDocDuplicate,
    FrequentDuplicate,
    TooSmall,
    Aspect,
    Nsfw,
    LowRelevance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeParams {
    pub within_doc_threshold: u32,
    pub max_duplicates: u32,
    pub size: SizeRules,
    /// `None` skips the NSFW stage.
    pub nsfw_cutoff: Option<f64>,
    /// Cosine; `None` skips the relevance stage.
    pub relevance_tau: Option<f64>,
}

impl Default for CascadeParams {
    fn default() -> Self {
        CascadeParams {
            within_doc_threshold: WITHIN_DOC_THRESHOLD,
            max_duplicates: MAX_DUPLICATES,
            size: SizeRules::default(),
            nsfw_cutoff: Some(NSFW_THRESHOLD),
            relevance_tau: Some(RELEVANCE_TAU),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CascadeError {
    #[error("image {image_id} has no `{head}` score")]
    MissingScore { image_id: String, head: String },
    #[error("relevance unavailable for image {image_id}: {reason}")]
    Relevance { image_id: String, reason: String },
}

/// Drop counts per stage. `images_in == images_out + dropped()` always holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeCounters {
    pub images_in: u64,
    pub within_doc_duplicate: u64,
    pub frequent_duplicate: u64,
    pub too_small: u64,
    pub aspect: u64,
    pub nsfw: u64,
    pub low_relevance: u64,
    pub images_out: u64,
}

impl CascadeCounters {
    pub fn dropped(&self) -> u64 {
        self.within_doc_duplicate + self.frequent_duplicate + self.too_small + self.aspect + self.nsfw + self.low_relevance
    }

    pub fn is_balanced(&self) -> bool {
        self.images_in == self.images_out + self.dropped()
    }

    pub fn record(&mut self, reason: DropReason) {
        match reason {
            DropReason::WithinDocDuplicate => self.within_doc_duplicate += 1,
            DropReason::FrequentDuplicate => self.frequent_duplicate += 1,
            DropReason::TooSmall => self.too_small += 1,
            DropReason::Aspect => self.aspect += 1,
            DropReason::Nsfw => self.nsfw += 1,
            DropReason::LowRelevance => self.low_relevance += 1,
        }
    }

    pub fn merge(&mut self, other: &CascadeCounters) {
        self.images_in += other.images_in;
        self.within_doc_duplicate += other.within_doc_duplicate;
        self.frequent_duplicate += other.frequent_duplicate;
        self.too_small += other.too_small;
        self.aspect += other.aspect;
        self.nsfw += other.nsfw;
        self.low_relevance += other.low_relevance;
        self.images_out += other.images_out;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutcome {
    pub kept: Vec<ImageRecord>,
    pub dropped: Vec<(ImageRecord, DropReason)>,
    pub counters: CascadeCounters,
}

/// Run the cascade over one document's images, in stage order. `relevance`
/// returns the image's highest cosine similarity to any sentence of the
/// document and is only called for images reaching that stage.
pub fn run_cascade<F>(
    records: Vec<ImageRecord>,
    index: Option<&DuplicateIndex>,
    params: &CascadeParams,
    mut relevance: F,
) -> Result<CascadeOutcome, CascadeError>
where
    F: FnMut(&ImageRecord) -> Result<f64, String>,
{
    let mut counters = CascadeCounters {
        images_in: records.len() as u64,
        ..Default::default()
    };
    let mut dropped = Vec::new();

    let (mut kept, dups) = dedup_within_document(records, params.within_doc_threshold);
    dropped.extend(dups.into_iter().map(|r| (r, DropReason::WithinDocDuplicate)));

    if let Some(index) = index {
        let (k, frequent) = crate::imagehash::drop_frequent_duplicates(kept, index, params.max_duplicates);
        kept = k;
        dropped.extend(frequent.into_iter().map(|r| (r, DropReason::FrequentDuplicate)));
    }

    let mut survivors = Vec::with_capacity(kept.len());
    for r in kept {
        match size_aspect_filter(r.width, r.height, &params.size) {
            Ok(()) => survivors.push(r),
            Err(Rejection::TooSmall) => dropped.push((r, DropReason::TooSmall)),
            Err(Rejection::Aspect) => dropped.push((r, DropReason::Aspect)),
        }
    }
    kept = survivors;

    if let Some(cutoff) = params.nsfw_cutoff {
        let mut survivors = Vec::with_capacity(kept.len());
        for r in kept {
            let prob = *r.head_scores.get(NSFW_HEAD).ok_or_else(|| CascadeError::MissingScore {
                image_id: r.image_id.clone(),
                head: NSFW_HEAD.into(),
            })?;
            if nsfw_gate(prob, cutoff) {
                survivors.push(r);
            } else {
                dropped.push((r, DropReason::Nsfw));
            }
        }
        kept = survivors;
    }

    if let Some(tau) = params.relevance_tau {
        let mut survivors = Vec::with_capacity(kept.len());
        for r in kept {
            let best = relevance(&r).map_err(|reason| CascadeError::Relevance {
                image_id: r.image_id.clone(),
                reason,
            })?;
            if best >= tau {
                survivors.push(r);
            } else {
                dropped.push((r, DropReason::LowRelevance));
            }
        }
        kept = survivors;
    }

    for (_, reason) in &dropped {
        counters.record(*reason);
    }
    counters.images_out = kept.len() as u64;
    debug_assert!(counters.is_balanced());
    Ok(CascadeOutcome { kept, dropped, counters })
}
