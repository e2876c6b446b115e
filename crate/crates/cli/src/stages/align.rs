use std::collections::HashMap;
use std::path::PathBuf;

use mm_interleave_core::aligner::{align_document, AlignError, AlignedImage, AlignmentParams};
use mm_interleave_core::corpus::{ImageRecord, InterleavedDocument, RawDocument};
use rayon::prelude::*;

use super::embed::load_store;
use super::{counters, require, Context, CORPUS, DOCS, FILTERED, SHARD_SET};
use crate::error::{CliError, Result};
use crate::io::{read_jsonl, write_jsonl, RunManifest};

pub fn params(ctx: &Context) -> Result<AlignmentParams> {
    let tau = ctx.config.align.relevance_tau.to_cosine().map_err(CliError::config)?;
    let params = AlignmentParams {
        relevance_tau: tau,
        placement: ctx.config.align.placement,
        rng_seed: ctx.config.seed,
    };
    params.validate().map_err(CliError::config)?;
    Ok(params)
}

/// Relevance filtering and sentence assignment, writing the corpus.
pub fn run(ctx: &Context, output: Option<PathBuf>) -> Result<RunManifest> {
    let params = params(ctx)?;
    let docs_path = ctx.path(DOCS);
    let images_path = ctx.path(FILTERED);
    require(&docs_path)?;
    require(&images_path)?;
    let docs: Vec<RawDocument> = read_jsonl(&docs_path)?;
    let images: Vec<ImageRecord> = read_jsonl(&images_path)?;
    let store = load_store(ctx)?;

    let mut by_doc: HashMap<&str, Vec<&ImageRecord>> = HashMap::new();
    for r in &images {
        by_doc.entry(r.doc_id.as_str()).or_default().push(r);
    }

    let aligned: Vec<Result<(Option<InterleavedDocument>, usize, usize)>> = ctx.install(|| {
        docs.par_iter()
            .map(|doc| {
                let imgs = by_doc.get(doc.doc_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
                if imgs.is_empty() {
                    return Ok((None, 0, 0));
                }
                let sentence_vecs = doc
                    .sentences
                    .iter()
                    .map(|s| {
                        let id = doc.sentence_embedding_id(s.index);
                        store
                            .get(&id)
                            .ok_or_else(|| CliError::Input(format!("no embedding for sentence `{id}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let image_vecs = imgs
                    .iter()
                    .map(|r| {
                        store
                            .get(&r.embedding_id)
                            .ok_or_else(|| CliError::Input(format!("no embedding for image `{}`", r.image_id)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let aligned_images: Vec<AlignedImage> = imgs
                    .iter()
                    .map(|r| AlignedImage {
                        image_name: r.image_id.clone(),
                        raw_url: r.raw_url.clone(),
                    })
                    .collect();
                let outcome = align_document(
                    &doc.doc_id,
                    &doc.url,
                    doc.sentence_texts(),
                    &aligned_images,
                    &sentence_vecs,
                    &image_vecs,
                    &params,
                )
                .map_err(|e| match e {
                    AlignError::BadTau(_) => CliError::config(e),
                    other => CliError::Input(format!("document {}: {other}", doc.doc_id)),
                })?;
                Ok((outcome.document, imgs.len(), outcome.low_relevance_dropped))
            })
            .collect()
    });

    let mut corpus = Vec::new();
    let (mut images_in, mut low_relevance, mut no_images) = (0u64, 0u64, 0u64);
    for r in aligned {
        let (doc, n_in, dropped) = r?;
        images_in += n_in as u64;
        low_relevance += dropped as u64;
        if n_in == 0 {
            no_images += 1;
        }
        corpus.extend(doc);
    }
    let images_out: u64 = corpus.iter().map(|d| d.image_info.len() as u64).sum();

    let out = output.unwrap_or_else(|| ctx.path(CORPUS));
    write_jsonl(&out, &corpus)?;
    ctx.finish(
        "align",
        &[docs_path, images_path, ctx.path(SHARD_SET)],
        &[out],
        counters([
            ("docs_in", docs.len() as u64),
            ("docs_out", corpus.len() as u64),
            ("docs_without_images", no_images),
            ("docs_all_low_relevance", docs.len() as u64 - corpus.len() as u64 - no_images),
            ("images_in", images_in),
            ("images_out", images_out),
            ("low_relevance", low_relevance),
        ]),
    )
}
