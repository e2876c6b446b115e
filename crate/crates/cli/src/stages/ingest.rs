use std::collections::HashSet;
use std::path::Path;

use mm_interleave_core::corpus::RawDocument;
use mm_interleave_core::ingest::{parse_manifest_line, CandidateStats, LedgerEntry};
use rayon::prelude::*;
use url::Url;

use super::{counters, Context, DOCS, INGEST_ERRORS};
use crate::error::{CliError, Result};
use crate::io::{write_jsonl, RunManifest};

/// Manifest → `docs.jsonl` plus a ledger of rejected lines.
pub fn run(ctx: &Context, manifest: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(manifest).map_err(|e| CliError::read(manifest, e))?;
    let dir = manifest
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let dir = dir.canonicalize().map_err(|e| CliError::read(dir, e))?;
    let base = Url::from_directory_path(&dir).map_err(|_| CliError::Input(format!("{} is not a usable base", dir.display())))?;

    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let rules = &ctx.config.ingest;
    let parsed: Vec<_> = ctx.install(|| {
        lines
            .par_iter()
            .map(|&(n, line)| (n, parse_manifest_line(line, rules, Some(&base))))
            .collect()
    });

    let mut docs: Vec<RawDocument> = Vec::new();
    let mut ledger = Vec::new();
    let mut seen = HashSet::new();
    let mut stats = CandidateStats::default();
    let mut image_refs = 0usize;
    for (line_number, result) in parsed {
        match result {
            Ok(p) => {
                let doc = p.doc.expect("parsed line carries a document");
                if !seen.insert(doc.doc_id.clone()) {
                    ledger.push(LedgerEntry {
                        line_number,
                        reason: format!("duplicate doc_id `{}`", doc.doc_id),
                    });
                    continue;
                }
                stats.merge(&p.candidates);
                image_refs += p.image_refs;
                docs.push(doc);
            }
            Err(reason) => ledger.push(LedgerEntry { line_number, reason }),
        }
    }

    let docs_path = ctx.path(DOCS);
    let ledger_path = ctx.path(INGEST_ERRORS);
    write_jsonl(&docs_path, &docs)?;
    write_jsonl(&ledger_path, &ledger)?;
    ctx.finish(
        "ingest",
        &[manifest.to_path_buf()],
        &[docs_path, ledger_path],
        counters([
            ("lines", lines.len() as u64),
            ("docs_out", docs.len() as u64),
            ("lines_rejected", ledger.len() as u64),
            ("sentences", docs.iter().map(|d| d.sentences.len() as u64).sum()),
            ("image_refs", image_refs as u64),
            ("candidates_kept", stats.kept as u64),
            ("rejected_unparseable", stats.unparseable as u64),
            ("rejected_extension", stats.bad_extension as u64),
            ("rejected_blocked_token", stats.blocked_token as u64),
        ]),
    )
}
