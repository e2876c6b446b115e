//! Pipeline configuration, loaded from TOML. Every section and field is
//! optional; similarity thresholds must state their unit.

use std::path::{Path, PathBuf};

use mm_interleave_core::aligner::RELEVANCE_TAU;
use mm_interleave_core::cascade::{MAX_DUPLICATES, WITHIN_DOC_THRESHOLD};
use mm_interleave_core::corpus::PlacementPolicy;
use mm_interleave_core::filters::{MAX_ASPECT, MIN_SIDE_PX, NSFW_THRESHOLD};
use mm_interleave_core::flatten::FlattenConfig;
use mm_interleave_core::ingest::UrlRules;
use mm_interleave_core::subsets::CoreParams;
use mm_interleave_core::Threshold;
use mm_interleave_fetch::FetchPolicy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const CACHE_ENV: &str = "MM_INTERLEAVE_CACHE";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Worker threads for document-level work; 0 uses every core.
    pub jobs: usize,
    pub cache_dir: Option<PathBuf>,
    pub ingest: UrlRules,
    pub fetch: FetchPolicy,
    pub dedup: DedupConfig,
    pub embed: EmbedConfig,
    pub filter: FilterConfig,
    pub align: AlignConfig,
    pub subset: SubsetConfig,
    pub flatten: FlattenConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupConfig {
    pub within_doc_threshold: u32,
    pub index_threshold: u32,
    pub max_duplicates: u32,
    pub sample_size: usize,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig {
            within_doc_threshold: WITHIN_DOC_THRESHOLD,
            index_threshold: WITHIN_DOC_THRESHOLD,
            max_duplicates: MAX_DUPLICATES,
            sample_size: 60_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    Mock,
    Shards,
    Sidecar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub provider: Provider,
    /// Vector size of the mock provider.
    pub dim: usize,
    /// Shard-set manifest for `provider = "shards"`.
    pub shards: Option<PathBuf>,
    /// Program and leading arguments for `provider = "sidecar"`.
    pub sidecar_command: Vec<String>,
    pub model: String,
    pub batch_size: usize,
    pub shard_size: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            provider: Provider::Mock,
            dim: 64,
            shards: None,
            sidecar_command: Vec::new(),
            model: "ViT-L/14".into(),
            batch_size: 64,
            shard_size: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_side_px: u32,
    pub max_aspect: f64,
    /// Probability cutoff; images scoring above it are dropped.
    pub nsfw_cutoff: f64,
    /// MMHD head files; without an NSFW head the NSFW stage is skipped.
    pub nsfw_head: Option<PathBuf>,
    pub face_head: Option<PathBuf>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_side_px: MIN_SIDE_PX,
            max_aspect: MAX_ASPECT,
            nsfw_cutoff: NSFW_THRESHOLD,
            nsfw_head: None,
            face_head: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub relevance_tau: Threshold,
    pub placement: PlacementPolicy,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            relevance_tau: Threshold::cosine(RELEVANCE_TAU),
            placement: PlacementPolicy::After,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsetConfig {
    /// Face-probability threshold for the face-free variants.
    pub face_threshold: Option<f64>,
    /// A calibration result file; used when `face_threshold` is unset.
    pub calibration: Option<PathBuf>,
    pub core: CoreParams,
}

impl Config {
    /// Parse a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Config = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p.as_mut() {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        resolve(&mut cfg.cache_dir);
        resolve(&mut cfg.embed.shards);
        resolve(&mut cfg.filter.nsfw_head);
        resolve(&mut cfg.filter.face_head);
        resolve(&mut cfg.subset.calibration);
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Config> {
        match path {
            Some(p) => Config::load(p),
            None => Ok(Config::default()),
        }
    }

    /// Range checks that do not need any input files.
    pub fn validate(&self) -> Result<()> {
        let tau = self.align.relevance_tau.to_cosine().map_err(CliError::config)?;
        if !(-1.0..=1.0).contains(&tau) {
            return Err(CliError::Config(format!("relevance_tau {tau} outside [-1, 1]")));
        }
        if !(0.0..=1.0).contains(&self.filter.nsfw_cutoff) {
            return Err(CliError::Config(format!("nsfw_cutoff {} is not a probability", self.filter.nsfw_cutoff)));
        }
        if self.filter.max_aspect < 1.0 {
            return Err(CliError::Config("max_aspect must be at least 1".into()));
        }
        if self.dedup.within_doc_threshold > 64 || self.dedup.index_threshold > 64 {
            return Err(CliError::Config("hamming thresholds must be at most 64".into()));
        }
        if self.embed.dim == 0 || self.embed.shard_size == 0 {
            return Err(CliError::Config("embed.dim and embed.shard_size must be positive".into()));
        }
        if let Some(t) = self.subset.face_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(CliError::Config(format!("face_threshold {t} is not a probability")));
            }
        }
        self.subset.core.checked_sim_floor().map_err(CliError::config)?;
        self.flatten.resolve().map_err(CliError::Config)?;
        Ok(())
    }

    /// sha256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Image cache root: config, then the environment, then `<work>/cache`.
    pub fn cache_root(&self, work: &Path) -> PathBuf {
        if let Some(dir) = &self.cache_dir {
            return dir.clone();
        }
        match std::env::var_os(CACHE_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => work.join("cache"),
        }
    }
}
