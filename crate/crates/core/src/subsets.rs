//! Fewer-faces and core corpus variants.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{InterleavedDocument, Threshold, ThresholdError};
use crate::imagehash::{dedup_within_document, PHash};

#[derive(Debug, Error, PartialEq)]
pub enum SubsetError {
    #[error("no face score for image `{0}`")]
    MissingScore(String),
    #[error("no perceptual hash for image `{0}`")]
    MissingHash(String),
    #[error("invalid core parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
}

/// Remove images whose face probability is at or above `threshold`.
///
/// Matrix columns and `image_info` are pruned together; `None` when no image
/// remains. A document with nothing to remove is returned unchanged.
pub fn ff_transform(
    doc: &InterleavedDocument,
    face_scores: &HashMap<String, f64>,
    threshold: f64,
) -> Result<Option<InterleavedDocument>, SubsetError> {
    let mut keep = Vec::with_capacity(doc.image_info.len());
    for (i, info) in doc.image_info.iter().enumerate() {
        let p = face_scores
            .get(&info.image_name)
            .ok_or_else(|| SubsetError::MissingScore(info.image_name.clone()))?;
        if *p < threshold {
            keep.push(i);
        }
    }
    if keep.is_empty() {
        return Ok(None);
    }
    if keep.len() == doc.image_info.len() {
        return Ok(Some(doc.clone()));
    }
    Ok(Some(InterleavedDocument {
        url: doc.url.clone(),
        text_list: doc.text_list.clone(),
        image_info: keep.iter().map(|&i| doc.image_info[i].clone()).collect(),
        similarity_matrix: doc.similarity_matrix.select_columns(&keep),
        doc_id: doc.doc_id.clone(),
    }))
}

/// Core-subset parameters, as written in a params file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoreParams {
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub min_images: usize,
    pub max_images: usize,
    pub dedup_threshold: u32,
    pub sim_floor: Threshold,
    pub sim_floor_fraction: f64,
}

impl Default for CoreParams {
    fn default() -> Self {
        CoreParams {
            min_sentences: 4,
            max_sentences: 40,
            min_images: 2,
            max_images: 15,
            dedup_threshold: 10,
            sim_floor: Threshold::points(25.0),
            sim_floor_fraction: 0.75,
        }
    }
}

impl CoreParams {
    /// Validate and return the similarity floor in cosine units.
    pub fn checked_sim_floor(&self) -> Result<f64, SubsetError> {
        if self.min_sentences > self.max_sentences || self.min_images > self.max_images {
            return Err(SubsetError::Params("minimum exceeds maximum".into()));
        }
        if !(0.0..=1.0).contains(&self.sim_floor_fraction) {
            return Err(SubsetError::Params(format!(
                "sim_floor_fraction {} outside [0, 1]",
                self.sim_floor_fraction
            )));
        }
        if self.dedup_threshold > 64 {
            return Err(SubsetError::Params("dedup_threshold exceeds 64".into()));
        }
        Ok(self.sim_floor.to_cosine()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreFailure {
    MinSentences,
    MaxSentences,
    MinImages,
    MaxImages,
    Duplicates,
    SimilarityFloor,
}

/// Check one document against the core criteria, first failure wins.
///
/// `hashes` maps image names to perceptual hashes; documents whose image set
/// would shrink under dedup at `dedup_threshold` fail.
pub fn core_filter(
    doc: &InterleavedDocument,
    hashes: &HashMap<String, PHash>,
    params: &CoreParams,
) -> Result<Result<(), CoreFailure>, SubsetError> {
    let floor = params.checked_sim_floor()?;
    let n_sent = doc.text_list.len();
    let n_img = doc.image_info.len();
    if n_sent < params.min_sentences {
        return Ok(Err(CoreFailure::MinSentences));
    }
    if n_sent > params.max_sentences {
        return Ok(Err(CoreFailure::MaxSentences));
    }
    if n_img < params.min_images {
        return Ok(Err(CoreFailure::MinImages));
    }
    if n_img > params.max_images {
        return Ok(Err(CoreFailure::MaxImages));
    }
    let doc_hashes = doc
        .image_info
        .iter()
        .map(|i| {
            hashes
                .get(&i.image_name)
                .copied()
                .ok_or_else(|| SubsetError::MissingHash(i.image_name.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (kept, _) = dedup_within_document(doc_hashes, params.dedup_threshold);
    if kept.len() != n_img {
        return Ok(Err(CoreFailure::Duplicates));
    }
    let above = doc.image_info.iter().filter(|i| i.matched_sim > floor).count();
    if (above as f64) < params.sim_floor_fraction * n_img as f64 {
        return Ok(Err(CoreFailure::SimilarityFloor));
    }
    Ok(Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ImageInfo, Placement, SimilarityMatrix};

    fn make_doc(n_sent: usize, sims: &[f64]) -> InterleavedDocument {
        let n_img = sims.len();
        let mut values = vec![0.0; n_sent * n_img];
        let image_info = sims
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let row = i % n_sent;
                values[row * n_img + i] = s;
                ImageInfo {
                    image_name: format!("img{i}"),
                    raw_url: format!("http://h/{i}.jpg"),
                    matched_text_index: row,
                    matched_sim: s,
                    placement: Placement::After,
                }
            })
            .collect();
        InterleavedDocument {
            url: "http://h/doc".into(),
            text_list: (0..n_sent).map(|i| format!("sentence {i}")).collect(),
            image_info,
            similarity_matrix: SimilarityMatrix::new(n_sent, n_img, values).unwrap(),
            doc_id: "d".into(),
        }
    }

    fn distinct_hashes(n: usize) -> HashMap<String, PHash> {
        // splitmix64 outputs; pairwise distances are checked below
        let mut x = 0x9E37_79B9_7F4A_7C15u64;
        (0..n)
            .map(|i| {
                x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
                let mut z = x;
                z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
                (format!("img{i}"), PHash(z ^ (z >> 31)))
            })
            .collect()
    }

    #[test]
    fn ff_examples() {
        let doc = make_doc(3, &[0.3, 0.4]);
        let scores: HashMap<String, f64> = [("img0".into(), 0.9), ("img1".into(), 0.1)].into();
        let out = ff_transform(&doc, &scores, 0.5).unwrap().unwrap();
        assert_eq!(out.image_info.len(), 1);
        assert_eq!(out.image_info[0].image_name, "img1");
        assert_eq!(out.similarity_matrix.n_images(), 1);
        assert_eq!(out.similarity_matrix.get(1, 0), 0.4);
        assert!(out.validate().is_ok());

        let all: HashMap<String, f64> = [("img0".into(), 0.9), ("img1".into(), 0.5)].into();
        assert_eq!(ff_transform(&doc, &all, 0.5).unwrap(), None);

        let none: HashMap<String, f64> = [("img0".into(), 0.1), ("img1".into(), 0.2)].into();
        assert_eq!(ff_transform(&doc, &none, 0.5).unwrap().unwrap(), doc);

        let missing: HashMap<String, f64> = [("img0".into(), 0.1)].into();
        assert_eq!(ff_transform(&doc, &missing, 0.5), Err(SubsetError::MissingScore("img1".into())));
    }

    #[test]
    fn ff_is_idempotent() {
        let doc = make_doc(4, &[0.3, 0.4, 0.2]);
        let scores: HashMap<String, f64> = [("img0".into(), 0.9), ("img1".into(), 0.1), ("img2".into(), 0.2)].into();
        let once = ff_transform(&doc, &scores, 0.5).unwrap().unwrap();
        let twice = ff_transform(&once, &scores, 0.5).unwrap().unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn core_examples() {
        let p = CoreParams::default();
        let h = distinct_hashes(16);
        assert_eq!(core_filter(&make_doc(3, &[0.3, 0.3]), &h, &p).unwrap(), Err(CoreFailure::MinSentences));
        assert_eq!(core_filter(&make_doc(10, &[0.30, 0.30]), &h, &p).unwrap(), Ok(()));
        assert_eq!(
            core_filter(&make_doc(10, &[0.30, 0.30, 0.20, 0.20]), &h, &p).unwrap(),
            Err(CoreFailure::SimilarityFloor)
        );
        // strictly greater than the floor
        assert_eq!(core_filter(&make_doc(10, &[0.25, 0.30]), &h, &p).unwrap(), Err(CoreFailure::SimilarityFloor));
        // 3 of 4 above = exactly 75%
        assert_eq!(core_filter(&make_doc(10, &[0.3, 0.3, 0.3, 0.1]), &h, &p).unwrap(), Ok(()));
    }

    #[test]
    fn core_rejects_near_duplicates() {
        let p = CoreParams::default();
        let mut h = distinct_hashes(2);
        let near = PHash(h["img0"].0 ^ 0b11_1111_1111); // distance 10
        h.insert("img1".into(), near);
        assert_eq!(core_filter(&make_doc(5, &[0.3, 0.3]), &h, &p).unwrap(), Err(CoreFailure::Duplicates));
        assert!(matches!(core_filter(&make_doc(5, &[0.3, 0.3]), &HashMap::new(), &p), Err(SubsetError::MissingHash(_))));
    }

    #[test]
    fn hashes_fixture_is_spread() {
        let h = distinct_hashes(16);
        let v: Vec<PHash> = (0..16).map(|i| h[&format!("img{i}")]).collect();
        for i in 0..16 {
            for j in i + 1..16 {
                assert!(crate::imagehash::hamming(v[i], v[j]) > 10, "{i} {j}");
            }
        }
    }
}
