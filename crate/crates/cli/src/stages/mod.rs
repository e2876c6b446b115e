//! Pipeline stages. Each reads checkpoints from the work directory, writes
//! its own outputs atomically and records a run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mm_interleave_core::corpus::ImageRecord;

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::io::{digests, write_json, RunManifest};

pub mod align;
pub mod dedup;
pub mod embed;
pub mod eval;
pub mod fetch;
pub mod filter;
pub mod flatten;
pub mod ingest;
pub mod stats;
pub mod subset;

pub const DOCS: &str = "docs.jsonl";
pub const INGEST_ERRORS: &str = "ingest_errors.jsonl";
pub const IMAGES: &str = "images.jsonl";
pub const FETCH_ERRORS: &str = "fetch_errors.jsonl";
pub const DEDUP_INDEX: &str = "dedup_index.mmdi";
pub const SIDECAR_MANIFEST: &str = "sidecar_manifest.jsonl";
pub const EMBED_DIR: &str = "embeddings";
pub const SHARD_SET: &str = "embeddings/shards.json";
pub const FILTERED: &str = "images.filtered.jsonl";
pub const FILTER_DROPS: &str = "filter_drops.jsonl";
pub const CORPUS: &str = "corpus.jsonl";
pub const SEQUENCES: &str = "sequences.jsonl";
pub const STATS: &str = "stats.json";

pub struct Context {
    pub work: PathBuf,
    pub config: Config,
    pool: rayon::ThreadPool,
}

impl Context {
    pub fn new(work: impl Into<PathBuf>, config: Config) -> Result<Self> {
        config.validate()?;
        let work = work.into();
        std::fs::create_dir_all(&work).map_err(|e| CliError::write(&work, e))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(CliError::internal)?;
        Ok(Context { work, config, pool })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.work.join(name)
    }

    /// Run `f` on this context's worker pool.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    pub fn finish(
        &self,
        stage: &str,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        counters: BTreeMap<String, u64>,
    ) -> Result<RunManifest> {
        let manifest = RunManifest {
            stage: stage.to_string(),
            config_hash: self.config.hash(),
            inputs: digests(&self.work, inputs)?,
            outputs: digests(&self.work, outputs)?,
            counters,
        };
        write_json(&RunManifest::path(&self.work, stage), &manifest)?;
        log::info!("{stage}: {:?}", manifest.counters);
        Ok(manifest)
    }
}

pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{} not found; run the earlier stage first", path.display())))
    }
}

/// Split records into per-document runs, keeping first-seen document order.
pub fn group_by_doc(records: Vec<ImageRecord>) -> Vec<(String, Vec<ImageRecord>)> {
    let mut order: Vec<(String, Vec<ImageRecord>)> = Vec::new();
    let mut index: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for r in records {
        match index.get(&r.doc_id) {
            Some(&i) => order[i].1.push(r),
            None => {
                index.insert(r.doc_id.clone(), order.len());
                order.push((r.doc_id.clone(), vec![r]));
            }
        }
    }
    order
}

pub(crate) fn counters<const N: usize>(pairs: [(&str, u64); N]) -> BTreeMap<String, u64> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}
