use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use mm_interleave_core::cascade::{run_cascade, CascadeCounters, CascadeParams, DropReason, FACE_HEAD, NSFW_HEAD};
use mm_interleave_core::corpus::ImageRecord;
use mm_interleave_core::embeddings::{EmbeddingProvider, EmbeddingStore};
use mm_interleave_core::filters::{ClassifierHead, SizeRules};
use mm_interleave_core::imagehash::DuplicateIndex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embed::load_store;
use super::{counters, group_by_doc, require, Context, DEDUP_INDEX, FILTERED, FILTER_DROPS, IMAGES, SHARD_SET};
use crate::error::{CliError, Result};
use crate::io::{read_jsonl, write_jsonl, RunManifest};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterDrop {
    MissingEmbedding,
    #[serde(untagged)]
    Cascade(DropReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    pub doc_id: String,
    pub image_id: String,
    pub reason: FilterDrop,
}

pub fn load_head(path: &Path, store: &EmbeddingStore) -> Result<ClassifierHead> {
    let file = File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let head = ClassifierHead::read_from(BufReader::new(file))
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if head.input_dim() != store.dim() {
        return Err(CliError::Config(format!(
            "{}: head expects dim {} but embeddings have dim {}",
            path.display(),
            head.input_dim(),
            store.dim()
        )));
    }
    Ok(head)
}

struct DocResult {
    kept: Vec<ImageRecord>,
    drops: Vec<DropRecord>,
    counters: CascadeCounters,
    missing: u64,
}

/// Score classifier heads and run the image cascade (everything except text
/// relevance, which needs the sentences and happens in `align`).
pub fn run(ctx: &Context) -> Result<RunManifest> {
    let images_path = ctx.path(IMAGES);
    let index_path = ctx.path(DEDUP_INDEX);
    require(&images_path)?;
    require(&index_path)?;
    let records: Vec<ImageRecord> = read_jsonl(&images_path)?;
    let index = DuplicateIndex::read_from(BufReader::new(
        File::open(&index_path).map_err(|e| CliError::read(&index_path, e))?,
    ))
    .map_err(|e| CliError::read(&index_path, e))?;
    let store = load_store(ctx)?;

    let cfg = &ctx.config.filter;
    let nsfw = cfg.nsfw_head.as_deref().map(|p| load_head(p, &store)).transpose()?;
    let face = cfg.face_head.as_deref().map(|p| load_head(p, &store)).transpose()?;
    let params = CascadeParams {
        within_doc_threshold: ctx.config.dedup.within_doc_threshold,
        max_duplicates: ctx.config.dedup.max_duplicates,
        size: SizeRules {
            min_side_px: cfg.min_side_px,
            max_aspect: cfg.max_aspect,
        },
        nsfw_cutoff: nsfw.as_ref().map(|_| cfg.nsfw_cutoff),
        relevance_tau: None,
    };
    if nsfw.is_none() {
        log::warn!("no NSFW head configured; NSFW filtering skipped");
    }

    let groups = group_by_doc(records);
    let results: Vec<Result<DocResult>> = ctx.install(|| {
        groups
            .into_par_iter()
            .map(|(doc_id, group)| {
                let mut drops = Vec::new();
                let mut scored = Vec::with_capacity(group.len());
                for mut r in group {
                    let Some(v) = store.get(&r.embedding_id) else {
                        drops.push(DropRecord {
                            doc_id: doc_id.clone(),
                            image_id: r.image_id.clone(),
                            reason: FilterDrop::MissingEmbedding,
                        });
                        continue;
                    };
                    for (name, head) in [(NSFW_HEAD, &nsfw), (FACE_HEAD, &face)] {
                        if let Some(h) = head {
                            let p = h.score(v).map_err(CliError::input)?;
                            r.head_scores.insert(name.to_string(), p);
                        }
                    }
                    scored.push(r);
                }
                let missing = drops.len() as u64;
                let out = run_cascade(scored, Some(&index), &params, |_| Err("relevance runs in align".into()))
                    .map_err(CliError::internal)?;
                drops.extend(out.dropped.into_iter().map(|(r, reason)| DropRecord {
                    doc_id: doc_id.clone(),
                    image_id: r.image_id,
                    reason: FilterDrop::Cascade(reason),
                }));
                Ok(DocResult {
                    kept: out.kept,
                    drops,
                    counters: out.counters,
                    missing,
                })
            })
            .collect()
    });

    let mut kept = Vec::new();
    let mut drops = Vec::new();
    let mut total = CascadeCounters::default();
    let mut missing = 0;
    for r in results {
        let r = r?;
        kept.extend(r.kept);
        drops.extend(r.drops);
        total.merge(&r.counters);
        missing += r.missing;
    }

    let kept_path = ctx.path(FILTERED);
    let drops_path = ctx.path(FILTER_DROPS);
    write_jsonl(&kept_path, &kept)?;
    write_jsonl(&drops_path, &drops)?;
    ctx.finish(
        "filter",
        &[images_path, index_path, ctx.path(SHARD_SET)],
        &[kept_path, drops_path],
        counters([
            ("images_in", total.images_in + missing),
            ("images_out", total.images_out),
            ("missing_embedding", missing),
            ("within_doc_duplicate", total.within_doc_duplicate),
            ("frequent_duplicate", total.frequent_duplicate),
            ("too_small", total.too_small),
            ("aspect", total.aspect),
            ("nsfw", total.nsfw),
            ("face_scored", if face.is_some() { kept.len() as u64 } else { 0 }),
        ]),
    )
}
