use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use mm_interleave_core::corpus::{ImageRecord, RawDocument};
use mm_interleave_core::embeddings::{mock_embed, EmbeddingProvider, EmbeddingShard, EmbeddingStore, ShardSetManifest};
use mm_interleave_fetch::ImageCache;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{counters, require, Context, DOCS, EMBED_DIR, IMAGES, SHARD_SET, SIDECAR_MANIFEST};
use crate::config::Provider;
use crate::error::{CliError, Result};
use crate::io::{write_atomic, write_json, write_jsonl, RunManifest};

/// One line of the sidecar input manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SidecarItem {
    Text { id: String, text: String },
    Image { id: String, path: PathBuf },
}

impl SidecarItem {
    pub fn id(&self) -> &str {
        match self {
            SidecarItem::Text { id, .. } | SidecarItem::Image { id, .. } => id,
        }
    }
}

fn sidecar_items(docs: &[RawDocument], images: &[ImageRecord], cache: &ImageCache) -> Vec<SidecarItem> {
    let mut items = Vec::new();
    for d in docs {
        for s in &d.sentences {
            items.push(SidecarItem::Text {
                id: d.sentence_embedding_id(s.index),
                text: s.text.clone(),
            });
        }
    }
    let mut seen = HashSet::new();
    for r in images {
        if seen.insert(r.embedding_id.as_str()) {
            let hash = r.embedding_id.trim_start_matches("img:");
            items.push(SidecarItem::Image {
                id: r.embedding_id.clone(),
                path: cache.blob_path(hash),
            });
        }
    }
    items
}

/// Produce embeddings for every sentence and fetched image and record the
/// shard set at `embeddings/shards.json`.
pub fn run(ctx: &Context) -> Result<RunManifest> {
    let docs_path = ctx.path(DOCS);
    let images_path = ctx.path(IMAGES);
    require(&docs_path)?;
    require(&images_path)?;
    let docs: Vec<RawDocument> = crate::io::read_jsonl(&docs_path)?;
    let images: Vec<ImageRecord> = crate::io::read_jsonl(&images_path)?;
    let cache_root = ctx.config.cache_root(&ctx.work);
    let cache = ImageCache::open(&cache_root).map_err(|e| CliError::write(&cache_root, e))?;
    let items = sidecar_items(&docs, &images, &cache);

    let sidecar_path = ctx.path(SIDECAR_MANIFEST);
    write_jsonl(&sidecar_path, &items)?;
    let set_path = ctx.path(SHARD_SET);
    let cfg = &ctx.config.embed;

    let mut outputs = vec![sidecar_path.clone(), set_path.clone()];
    match cfg.provider {
        Provider::Mock => {
            let (dim, seed) = (cfg.dim, ctx.config.seed);
            let vectors: Vec<Vec<f32>> =
                ctx.install(|| items.par_iter().map(|it| mock_embed(it.id(), dim, seed)).collect());
            let mut names = Vec::new();
            for (k, chunk) in items.chunks(cfg.shard_size).zip(vectors.chunks(cfg.shard_size)).enumerate() {
                let mut shard = EmbeddingShard::new(dim);
                for (it, v) in chunk.0.iter().zip(chunk.1) {
                    shard.push(it.id(), v.clone()).map_err(CliError::internal)?;
                }
                let mut bytes = Vec::new();
                shard.write_to(&mut bytes).map_err(CliError::internal)?;
                let name = format!("shard-{k:05}.mmeb");
                let path = ctx.path(EMBED_DIR).join(&name);
                write_atomic(&path, &bytes)?;
                outputs.push(path);
                names.push(PathBuf::from(name));
            }
            write_json(&set_path, &ShardSetManifest { dim, shards: names })?;
        }
        Provider::Shards => {
            let given = cfg
                .shards
                .as_ref()
                .ok_or_else(|| CliError::Config("embed.shards is required for provider \"shards\"".into()))?;
            let manifest: ShardSetManifest = crate::io::read_json(given)?;
            let base = given.parent().unwrap_or(Path::new("."));
            let shards = manifest
                .shards
                .iter()
                .map(|p| {
                    let p = base.join(p);
                    p.canonicalize().map_err(|e| CliError::read(&p, e))
                })
                .collect::<Result<Vec<_>>>()?;
            write_json(&set_path, &ShardSetManifest { dim: manifest.dim, shards })?;
        }
        Provider::Sidecar => {
            let (program, args) = cfg
                .sidecar_command
                .split_first()
                .ok_or_else(|| CliError::Config("embed.sidecar_command is empty".into()))?;
            let status = Command::new(program)
                .args(args)
                .arg("--manifest")
                .arg(&sidecar_path)
                .arg("--out")
                .arg(ctx.path(EMBED_DIR))
                .arg("--model")
                .arg(&cfg.model)
                .arg("--batch-size")
                .arg(cfg.batch_size.to_string())
                .status()
                .map_err(|e| CliError::Config(format!("cannot start sidecar `{program}`: {e}")))?;
            if !status.success() {
                return Err(CliError::Internal(format!("sidecar exited with {status}")));
            }
        }
    }

    let store = EmbeddingStore::load(&set_path).map_err(CliError::input)?;
    let missing_text = items
        .iter()
        .filter(|it| matches!(it, SidecarItem::Text { .. }))
        .find(|it| store.get(it.id()).is_none());
    if let Some(it) = missing_text {
        return Err(CliError::Input(format!("no embedding for sentence `{}`", it.id())));
    }
    let n_text = items.iter().filter(|it| matches!(it, SidecarItem::Text { .. })).count();
    let n_image = items.len() - n_text;
    let image_missing = items
        .iter()
        .filter(|it| matches!(it, SidecarItem::Image { .. }) && store.get(it.id()).is_none())
        .count();
    ctx.finish(
        "embed",
        &[docs_path, images_path],
        &outputs,
        counters([
            ("texts", n_text as u64),
            ("images", n_image as u64),
            ("images_without_embedding", image_missing as u64),
            ("dim", store.dim() as u64),
        ]),
    )
}

/// Load the shard set written by [`run`].
pub fn load_store(ctx: &Context) -> Result<EmbeddingStore> {
    let path = ctx.path(SHARD_SET);
    require(&path)?;
    EmbeddingStore::load(&path).map_err(CliError::input)
}
