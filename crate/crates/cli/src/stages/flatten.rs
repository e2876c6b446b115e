use std::path::PathBuf;

use mm_interleave_core::corpus::InterleavedDocument;
use mm_interleave_core::flatten::{drop_single_image, filter_sequence, sample_subsequence, WhitespaceTokenizer};
use mm_interleave_core::rng::derive_rng;
use rayon::prelude::*;

use super::{counters, require, Context, CORPUS, SEQUENCES};
use crate::error::{CliError, Result};
use crate::io::{read_jsonl, write_jsonl, RunManifest};

#[derive(Clone, Copy)]
enum Fate {
    Emitted,
    NoWindow,
    NoImages,
    SingleImageDropped,
}

pub fn run(ctx: &Context, input: Option<PathBuf>, output: Option<PathBuf>) -> Result<RunManifest> {
    let params = ctx.config.flatten.resolve().map_err(CliError::Config)?;
    let input = input.unwrap_or_else(|| ctx.path(CORPUS));
    require(&input)?;
    let docs: Vec<InterleavedDocument> = read_jsonl(&input)?;
    let seed = ctx.config.seed;

    let results: Vec<_> = ctx.install(|| {
        docs.par_iter()
            .map(|doc| {
                let mut rng = derive_rng(seed, "flatten", &doc.effective_doc_id());
                let Some(seq) = sample_subsequence(doc, params.token_cap, &WhitespaceTokenizer, &mut rng) else {
                    return (None, Fate::NoWindow);
                };
                let Some(seq) = filter_sequence(seq, params.min_sim, params.max_images) else {
                    return (None, Fate::NoImages);
                };
                match drop_single_image(seq, params.single_image_drop, &mut rng) {
                    Some(seq) => (Some(seq), Fate::Emitted),
                    None => (None, Fate::SingleImageDropped),
                }
            })
            .collect()
    });

    let mut seqs = Vec::new();
    let (mut no_window, mut no_images, mut single) = (0u64, 0u64, 0u64);
    for (seq, fate) in results {
        match fate {
            Fate::Emitted => seqs.extend(seq),
            Fate::NoWindow => no_window += 1,
            Fate::NoImages => no_images += 1,
            Fate::SingleImageDropped => single += 1,
        }
    }
    let output = output.unwrap_or_else(|| ctx.path(SEQUENCES));
    write_jsonl(&output, &seqs)?;
    ctx.finish(
        "flatten",
        &[input],
        &[output],
        counters([
            ("docs_in", docs.len() as u64),
            ("sequences_out", seqs.len() as u64),
            ("no_window", no_window),
            ("no_images_after_filter", no_images),
            ("single_image_dropped", single),
            ("images_out", seqs.iter().map(|s| s.images.len() as u64).sum()),
        ]),
    )
}
