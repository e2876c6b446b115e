use mm_interleave_core::corpus::ImageRecord;
use mm_interleave_core::imagehash::{choose_sample, dedup_within_document, DuplicateIndex, IndexError};

use super::{counters, group_by_doc, require, Context, DEDUP_INDEX, IMAGES};
use crate::error::{CliError, Result};
use crate::io::{read_jsonl, write_atomic, RunManifest};

/// Build the frequent-duplicate index from a sample of per-document unique
/// image hashes.
pub fn run(ctx: &Context) -> Result<RunManifest> {
    let images_path = ctx.path(IMAGES);
    require(&images_path)?;
    let records: Vec<ImageRecord> = read_jsonl(&images_path)?;
    let n_in = records.len();
    let cfg = &ctx.config.dedup;

    let mut hashes = Vec::new();
    for (_, group) in group_by_doc(records) {
        let (kept, _) = dedup_within_document(group, cfg.within_doc_threshold);
        hashes.extend(kept.iter().map(|r| r.phash));
    }
    let sample = choose_sample(&hashes, cfg.sample_size, ctx.config.seed);
    let index = DuplicateIndex::build(&sample, cfg.index_threshold).map_err(|e| match e {
        IndexError::BadThreshold(_) => CliError::config(e),
        other => CliError::internal(other),
    })?;

    let mut bytes = Vec::new();
    index.write_to(&mut bytes).map_err(CliError::internal)?;
    let index_path = ctx.path(DEDUP_INDEX);
    write_atomic(&index_path, &bytes)?;

    let frequent = index.clusters().iter().filter(|c| c.count > cfg.max_duplicates).count();
    ctx.finish(
        "hashdedup",
        &[images_path],
        &[index_path],
        counters([
            ("images_in", n_in as u64),
            ("unique_within_docs", hashes.len() as u64),
            ("sample_size", sample.len() as u64),
            ("clusters", index.clusters().len() as u64),
            ("frequent_clusters", frequent as u64),
        ]),
    )
}
