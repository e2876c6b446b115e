//! Interleaved documents → capped training sequences.
//!
//! A sequence is a maximal contiguous window of sentences fitting the token
//! budget, with the window's images inserted before or after their matched
//! sentence. Images below the similarity floor are removed, at most
//! `max_images` are kept (highest similarity first), sequences without
//! images are discarded, and single-image sequences are dropped with a
//! configurable probability.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{InterleavedDocument, Placement, Threshold, ThresholdError};
use crate::rng::derive_rng;

/// Splits sentence text into training tokens.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;

    fn count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }

    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlattenConfig {
    pub token_cap: usize,
    pub min_sim: Threshold,
    pub max_images: usize,
    pub single_image_drop: f64,
}

impl Default for FlattenConfig {
    fn default() -> Self {
        FlattenConfig {
            token_cap: 256,
            min_sim: Threshold::points(20.0),
            max_images: 5,
            single_image_drop: 0.5,
        }
    }
}

/// Flattening parameters in canonical units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlattenParams {
    pub token_cap: usize,
    pub min_sim: f64,
    pub max_images: usize,
    pub single_image_drop: f64,
}

impl Default for FlattenParams {
    fn default() -> Self {
        FlattenConfig::default().resolve().expect("defaults are valid")
    }
}

impl FlattenConfig {
    pub fn resolve(&self) -> Result<FlattenParams, String> {
        let min_sim = self.min_sim.to_cosine().map_err(|e: ThresholdError| e.to_string())?;
        if self.token_cap == 0 || self.max_images == 0 {
            return Err("token_cap and max_images must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.single_image_drop) {
            return Err(format!("single_image_drop {} is not a probability", self.single_image_drop));
        }
        Ok(FlattenParams {
            token_cap: self.token_cap,
            min_sim,
            max_images: self.max_images,
            single_image_drop: self.single_image_drop,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSlot {
    /// Token offset the image is inserted at.
    pub position: usize,
    pub image_id: String,
    pub sim: f64,
    #[serde(skip)]
    pub image_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub doc_id: String,
    pub token_texts: Vec<String>,
    pub images: Vec<ImageSlot>,
}

/// Inclusive sentence window; `truncated` marks a lone over-budget sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub first: usize,
    pub last: usize,
    pub truncated: bool,
}

/// Every maximal window under `cap`, plus each over-budget sentence alone.
pub fn candidate_windows(token_counts: &[usize], cap: usize) -> Vec<Window> {
    let n = token_counts.len();
    let mut out = Vec::new();
    let mut end = 0usize; // exclusive
    let mut sum = 0usize;
    for first in 0..n {
        if end < first {
            end = first;
            sum = 0;
        }
        while end < n && sum + token_counts[end] <= cap {
            sum += token_counts[end];
            end += 1;
        }
        if end == first {
            // sentence `first` alone exceeds the budget
            out.push(Window {
                first,
                last: first,
                truncated: true,
            });
            continue;
        }
        let left_maximal = first == 0 || sum + token_counts[first - 1] > cap;
        if left_maximal {
            out.push(Window {
                first,
                last: end - 1,
                truncated: false,
            });
        }
        sum -= token_counts[first];
    }
    out
}

/// Pick a window uniformly among [`candidate_windows`] and lay out tokens and
/// images.
pub fn sample_subsequence<R: Rng + ?Sized>(
    doc: &InterleavedDocument,
    cap: usize,
    tokenizer: &dyn Tokenizer,
    rng: &mut R,
) -> Option<TrainingSequence> {
    let tokens: Vec<Vec<String>> = doc.text_list.iter().map(|t| tokenizer.tokenize(t)).collect();
    let counts: Vec<usize> = tokens.iter().map(Vec::len).collect();
    let windows = candidate_windows(&counts, cap);
    if windows.is_empty() {
        return None;
    }
    let w = windows[rng.random_range(0..windows.len())];

    let mut token_texts = Vec::new();
    let mut bounds = Vec::with_capacity(w.last - w.first + 1);
    for s in w.first..=w.last {
        let start = token_texts.len();
        token_texts.extend(tokens[s].iter().cloned());
        if w.truncated {
            token_texts.truncate(cap);
        }
        bounds.push((start, token_texts.len()));
    }

    let mut slots: Vec<(usize, usize, ImageSlot)> = doc
        .image_info
        .iter()
        .enumerate()
        .filter(|(_, info)| (w.first..=w.last).contains(&info.matched_text_index))
        .map(|(i, info)| {
            let (start, end) = bounds[info.matched_text_index - w.first];
            let position = match info.placement {
                Placement::Before => start,
                Placement::After => end,
            };
            (
                info.matched_text_index,
                i,
                ImageSlot {
                    position,
                    image_id: info.image_name.clone(),
                    sim: info.matched_sim,
                    image_index: i,
                },
            )
        })
        .collect();
    slots.sort_by_key(|(s, i, slot)| (slot.position, *s, *i));

    Some(TrainingSequence {
        doc_id: doc.effective_doc_id(),
        token_texts,
        images: slots.into_iter().map(|(_, _, slot)| slot).collect(),
    })
}

/// Drop images under `min_sim`, keep the `max_images` most similar (ties →
/// lower image index), discard the sequence if none remain.
pub fn filter_sequence(mut seq: TrainingSequence, min_sim: f64, max_images: usize) -> Option<TrainingSequence> {
    seq.images.retain(|s| s.sim >= min_sim);
    if seq.images.len() > max_images {
        let mut ranked: Vec<(f64, usize)> = seq.images.iter().map(|s| (s.sim, s.image_index)).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let keep: Vec<usize> = ranked[..max_images].iter().map(|&(_, i)| i).collect();
        seq.images.retain(|s| keep.contains(&s.image_index));
    }
    (!seq.images.is_empty()).then_some(seq)
}

/// Discard single-image sequences with probability `p_drop`.
pub fn drop_single_image<R: Rng + ?Sized>(
    seq: TrainingSequence,
    p_drop: f64,
    rng: &mut R,
) -> Option<TrainingSequence> {
    if seq.images.len() == 1 && rng.random_bool(p_drop) {
        None
    } else {
        Some(seq)
    }
}

/// Flatten one document with its own random stream derived from
/// `(seed, doc_id)`.
pub fn flatten_document(
    doc: &InterleavedDocument,
    params: &FlattenParams,
    tokenizer: &dyn Tokenizer,
    seed: u64,
) -> Option<TrainingSequence> {
    let mut rng = derive_rng(seed, "flatten", &doc.effective_doc_id());
    let seq = sample_subsequence(doc, params.token_cap, tokenizer, &mut rng)?;
    let seq = filter_sequence(seq, params.min_sim, params.max_images)?;
    drop_single_image(seq, params.single_image_drop, &mut rng)
}
