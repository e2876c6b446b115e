use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mm_interleave_core::cascade::FACE_HEAD;
use mm_interleave_core::corpus::{ImageRecord, InterleavedDocument};
use mm_interleave_core::filters::CalibrationResult;
use mm_interleave_core::imagehash::PHash;
use mm_interleave_core::subsets::{core_filter, ff_transform, CoreFailure, CoreParams, SubsetError};
use rayon::prelude::*;
use serde::Serialize;

use super::{require, Context, CORPUS, FILTERED};
use crate::error::{CliError, Result};
use crate::io::{read_json, read_jsonl, write_jsonl, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Ff,
    Core,
    CoreFf,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ff => "ff",
            Variant::Core => "core",
            Variant::CoreFf => "core-ff",
        }
    }

    fn face_free(self) -> bool {
        matches!(self, Variant::Ff | Variant::CoreFf)
    }

    fn core(self) -> bool {
        matches!(self, Variant::Core | Variant::CoreFf)
    }
}

pub struct SubsetArgs {
    pub variant: Variant,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub face_threshold: Option<f64>,
}

fn load_core_params(path: &Path) -> Result<CoreParams> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn face_threshold(ctx: &Context, flag: Option<f64>) -> Result<f64> {
    if let Some(t) = flag.or(ctx.config.subset.face_threshold) {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::Config(format!("face threshold {t} is not a probability")));
        }
        return Ok(t);
    }
    match &ctx.config.subset.calibration {
        Some(p) => Ok(read_json::<CalibrationResult>(p)?.threshold),
        None => Err(CliError::Config(
            "face-free subsets need --face-threshold, subset.face_threshold or subset.calibration".into(),
        )),
    }
}

fn failure_name(f: CoreFailure) -> &'static str {
    match f {
        CoreFailure::MinSentences => "core_min_sentences",
        CoreFailure::MaxSentences => "core_max_sentences",
        CoreFailure::MinImages => "core_min_images",
        CoreFailure::MaxImages => "core_max_images",
        CoreFailure::Duplicates => "core_duplicates",
        CoreFailure::SimilarityFloor => "core_similarity_floor",
    }
}

enum Outcome {
    Kept(InterleavedDocument),
    NoFaceFreeImages,
    Core(CoreFailure),
}

pub fn run(ctx: &Context, args: &SubsetArgs) -> Result<RunManifest> {
    let params = match &args.params {
        Some(p) => load_core_params(p)?,
        None => ctx.config.subset.core,
    };
    params.checked_sim_floor().map_err(CliError::config)?;
    let threshold = if args.variant.face_free() {
        Some(face_threshold(ctx, args.face_threshold)?)
    } else {
        None
    };

    let input = args.input.clone().unwrap_or_else(|| ctx.path(CORPUS));
    let images_path = ctx.path(FILTERED);
    require(&input)?;
    require(&images_path)?;
    let docs: Vec<InterleavedDocument> = read_jsonl(&input)?;
    let images: Vec<ImageRecord> = read_jsonl(&images_path)?;
    let faces: HashMap<String, f64> = images
        .iter()
        .filter_map(|r| r.head_scores.get(FACE_HEAD).map(|&p| (r.image_id.clone(), p)))
        .collect();
    let hashes: HashMap<String, PHash> = images.iter().map(|r| (r.image_id.clone(), r.phash)).collect();

    let outcomes: Vec<std::result::Result<Outcome, SubsetError>> = ctx.install(|| {
        docs.par_iter()
            .map(|doc| {
                let doc = match threshold {
                    Some(t) => match ff_transform(doc, &faces, t)? {
                        Some(d) => d,
                        None => return Ok(Outcome::NoFaceFreeImages),
                    },
                    None => doc.clone(),
                };
                if args.variant.core() {
                    if let Err(f) = core_filter(&doc, &hashes, &params)? {
                        return Ok(Outcome::Core(f));
                    }
                }
                Ok(Outcome::Kept(doc))
            })
            .collect()
    });

    let mut kept = Vec::new();
    let mut tally: BTreeMap<String, u64> = BTreeMap::new();
    for o in outcomes {
        match o.map_err(|e| match e {
            SubsetError::MissingScore(id) => CliError::Input(format!(
                "image `{id}` has no face score; configure filter.face_head and rerun filter"
            )),
            other => CliError::input(other),
        })? {
            Outcome::Kept(d) => kept.push(d),
            Outcome::NoFaceFreeImages => *tally.entry("docs_without_face_free_images".into()).or_default() += 1,
            Outcome::Core(f) => *tally.entry(failure_name(f).into()).or_default() += 1,
        }
    }
    let images_in: u64 = docs.iter().map(|d| d.image_info.len() as u64).sum();
    let images_out: u64 = kept.iter().map(|d| d.image_info.len() as u64).sum();
    tally.insert("docs_in".into(), docs.len() as u64);
    tally.insert("docs_out".into(), kept.len() as u64);
    tally.insert("images_in".into(), images_in);
    tally.insert("images_out".into(), images_out);

    let output = args
        .output
        .clone()
        .unwrap_or_else(|| ctx.path(&format!("corpus.{}.jsonl", args.variant.name())));
    write_jsonl(&output, &kept)?;
    ctx.finish(&format!("subset-{}", args.variant.name()), &[input, images_path], &[output], tally)
}
