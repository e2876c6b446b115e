use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mm_interleave_core::evalbench::{run_benchmark, synthetic_suite, BenchmarkReport, LabeledDocument, Scorer};
use mm_interleave_core::filters::{calibrate_threshold, CalibrationResult};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::{read_jsonl, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Synthetic {
    /// Uniform random scores with no signal.
    Random,
    /// Gold cells boosted by 0.5.
    Planted,
}

pub struct EvalArgs {
    pub input: Option<PathBuf>,
    pub synthetic: Option<Synthetic>,
    pub docs: usize,
    pub k: usize,
    pub images_per_doc: usize,
    pub scorer: Scorer,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

pub fn run(args: &EvalArgs) -> Result<BenchmarkReport> {
    let docs: Vec<LabeledDocument> = match (&args.input, args.synthetic) {
        (Some(p), None) => read_jsonl(p)?,
        (None, Some(kind)) => {
            if args.k == 0 || args.images_per_doc == 0 || args.images_per_doc > args.k {
                return Err(CliError::Config("need 1 <= images-per-doc <= k".into()));
            }
            let signal = match kind {
                Synthetic::Random => 0.0,
                Synthetic::Planted => 0.5,
            };
            synthetic_suite(args.docs, args.k, args.images_per_doc, signal, args.seed)
        }
        _ => return Err(CliError::Config("give exactly one of --input or --synthetic".into())),
    };
    let report = run_benchmark(&docs, args.scorer).map_err(CliError::input)?;
    if let Some(out) = &args.output {
        write_json(out, &report)?;
    }
    Ok(report)
}

/// One labeled classifier score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub prob: f64,
    pub label: bool,
}

pub fn calibrate(scores: &Path, target_recall: f64, output: Option<&Path>) -> Result<CalibrationResult> {
    let rows: Vec<ScoredLabel> = read_jsonl(scores)?;
    let pairs: Vec<(f64, bool)> = rows.iter().map(|r| (r.prob, r.label)).collect();
    let result = calibrate_threshold(&pairs, target_recall).map_err(|e| match e {
        mm_interleave_core::filters::CalibrationError::BadTarget(_) => CliError::config(e),
        other => CliError::input(other),
    })?;
    if let Some(out) = output {
        write_json(out, &result)?;
    }
    Ok(result)
}
