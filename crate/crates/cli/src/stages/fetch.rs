use std::collections::HashMap;

use mm_interleave_core::corpus::{ImageRecord, RawDocument};
use mm_interleave_core::imagehash::phash64;
use mm_interleave_fetch::{fetch_all_blocking, FetchError, ImageCache};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{counters, require, Context, DOCS, FETCH_ERRORS, IMAGES};
use crate::error::{CliError, Result};
use crate::io::{read_jsonl, write_jsonl, RunManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchFailure {
    pub doc_id: String,
    pub candidate_index: usize,
    pub raw_url: String,
    pub error: FetchError,
}

pub fn image_id(doc_id: &str, candidate_index: usize) -> String {
    format!("{doc_id}:i{candidate_index}")
}

/// Embedding id shared by byte-identical images.
pub fn image_embedding_id(content_hash: &str) -> String {
    format!("img:{content_hash}")
}

/// Fetch every candidate of `docs.jsonl` into `images.jsonl`.
pub fn run(ctx: &Context) -> Result<RunManifest> {
    let docs_path = ctx.path(DOCS);
    require(&docs_path)?;
    let docs: Vec<RawDocument> = read_jsonl(&docs_path)?;

    let mut unique: Vec<String> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for c in docs.iter().flat_map(|d| &d.image_candidates) {
        slot.entry(c.url.as_str()).or_insert_with(|| {
            unique.push(c.url.clone());
            unique.len() - 1
        });
    }

    let cache_root = ctx.config.cache_root(&ctx.work);
    let cache = ImageCache::open(&cache_root).map_err(|e| CliError::write(&cache_root, e))?;
    let (results, stats) =
        fetch_all_blocking(ctx.config.fetch.clone(), Some(cache), unique.clone()).map_err(CliError::config)?;
    log::info!("fetch: {stats:?}");

    let hashes: Vec<Option<mm_interleave_core::imagehash::PHash>> = ctx.install(|| {
        results
            .par_iter()
            .map(|r| r.as_ref().ok().map(|img| phash64(&img.image)))
            .collect()
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut by_label: HashMap<&'static str, u64> = HashMap::new();
    for doc in &docs {
        for (candidate_index, c) in doc.image_candidates.iter().enumerate() {
            let i = slot[c.url.as_str()];
            match &results[i] {
                Ok(img) => records.push(ImageRecord {
                    doc_id: doc.doc_id.clone(),
                    candidate_index,
                    image_id: image_id(&doc.doc_id, candidate_index),
                    raw_url: c.raw_url.clone(),
                    width: img.original_width,
                    height: img.original_height,
                    phash: hashes[i].expect("hash for every fetched image"),
                    embedding_id: image_embedding_id(&img.content_hash),
                    head_scores: Default::default(),
                }),
                Err(e) => {
                    *by_label.entry(e.label()).or_default() += 1;
                    failures.push(FetchFailure {
                        doc_id: doc.doc_id.clone(),
                        candidate_index,
                        raw_url: c.raw_url.clone(),
                        error: e.clone(),
                    });
                }
            }
        }
    }

    let images_path = ctx.path(IMAGES);
    let errors_path = ctx.path(FETCH_ERRORS);
    write_jsonl(&images_path, &records)?;
    write_jsonl(&errors_path, &failures)?;
    let label = |l: &str| by_label.get(l).copied().unwrap_or(0);
    ctx.finish(
        "fetch",
        &[docs_path],
        &[images_path, errors_path],
        counters([
            ("images_in", (records.len() + failures.len()) as u64),
            ("images_out", records.len() as u64),
            ("unique_urls", unique.len() as u64),
            ("invalid_url", label("invalid_url")),
            ("fetch_failed", label("fetch_failed")),
            ("http_status", label("http_status")),
            ("too_large", label("too_large")),
            ("decode_failed", label("decode_failed")),
        ]),
    )
}
