use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mm_interleave_core::corpus::InterleavedDocument;
use mm_interleave_core::stats::CorpusStats;
use rayon::prelude::*;

use super::{counters, require, Context, CORPUS, STATS};
use crate::error::{CliError, Result};
use crate::io::{read_jsonl, write_atomic, write_json, RunManifest};

fn accumulate(ctx: &Context, docs: &[InterleavedDocument]) -> CorpusStats {
    // per-document accumulators are merged in input order so float sums do
    // not depend on the thread count
    let parts: Vec<CorpusStats> = ctx.install(|| {
        docs.par_iter()
            .map(|d| {
                let mut s = CorpusStats::default();
                s.add(d);
                s
            })
            .collect()
    });
    let mut total = CorpusStats::default();
    for p in &parts {
        total.merge(p);
    }
    total
}

fn csv<K: std::fmt::Display>(header: &str, rows: impl IntoIterator<Item = (K, u64)>) -> Vec<u8> {
    let mut out = format!("{header}\n");
    for (k, v) in rows {
        writeln!(out, "{k},{v}").expect("write to string");
    }
    out.into_bytes()
}

fn domain_rows(freq: &std::collections::BTreeMap<String, u64>) -> Vec<(String, u64)> {
    let mut rows: Vec<(String, u64)> = freq.iter().map(|(k, v)| (k.clone(), *v)).collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    rows
}

fn load(ctx: &Context, input: Option<PathBuf>) -> Result<(PathBuf, Vec<InterleavedDocument>)> {
    let input = input.unwrap_or_else(|| ctx.path(CORPUS));
    require(&input)?;
    let docs = read_jsonl(&input)?;
    Ok((input, docs))
}

/// `stats.json` plus domain frequency tables.
pub fn run(ctx: &Context, input: Option<PathBuf>, out_dir: Option<PathBuf>) -> Result<RunManifest> {
    let (input, docs) = load(ctx, input)?;
    let acc = accumulate(ctx, &docs);
    let report = acc.report().map_err(CliError::input)?;
    let dir = out_dir.unwrap_or_else(|| ctx.work.clone());
    let stats_path = dir.join(STATS);
    let doc_domains = dir.join("doc_domains.csv");
    let image_domains = dir.join("image_domains.csv");
    write_json(&stats_path, &report)?;
    write_atomic(&doc_domains, &csv("domain,docs", domain_rows(&acc.doc_domains)))?;
    write_atomic(&image_domains, &csv("domain,images", domain_rows(&acc.image_domains)))?;
    ctx.finish(
        "stats",
        &[input],
        &[stats_path, doc_domains, image_domains],
        counters([("docs", acc.docs), ("images", acc.images), ("sentences", acc.sentences)]),
    )
}

/// Histogram data files for external plotting.
pub fn plot(ctx: &Context, input: Option<PathBuf>, out_dir: &Path) -> Result<RunManifest> {
    let (input, docs) = load(ctx, input)?;
    let acc = accumulate(ctx, &docs);
    if acc.docs == 0 {
        return Err(CliError::Input("corpus is empty".into()));
    }
    let images = out_dir.join("images_per_doc.csv");
    let sentences = out_dir.join("sentences_per_doc.csv");
    let joint = out_dir.join("images_sentences_joint.csv");
    write_atomic(&images, &csv("n_images,docs", acc.image_histogram.clone()))?;
    write_atomic(&sentences, &csv("n_sentences,docs", acc.sentence_histogram.clone()))?;
    let mut j = String::from("n_images,n_sentences,docs\n");
    for ((ni, ns), c) in &acc.joint_histogram {
        writeln!(j, "{ni},{ns},{c}").expect("write to string");
    }
    write_atomic(&joint, j.as_bytes())?;
    ctx.finish(
        "plot",
        &[input],
        &[images, sentences, joint],
        counters([("docs", acc.docs)]),
    )
}
