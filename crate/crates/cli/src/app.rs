use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mm_interleave_core::evalbench::Scorer;
use mm_interleave_core::Threshold;

use crate::config::Config;
use crate::error::Result;
use crate::io::RunManifest;
use crate::stages::eval::{EvalArgs, Synthetic};
use crate::stages::subset::{SubsetArgs, Variant};
use crate::stages::{self, Context};

#[derive(Debug, Parser)]
#[command(name = "mm-interleave", version, about = "Build interleaved image-text corpora from document manifests")]
pub struct Cli {
    /// Work directory holding stage checkpoints.
    #[arg(long, global = true, default_value = ".")]
    pub work: PathBuf,
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for document-level work (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct FetchFlags {
    #[arg(long)]
    pub max_concurrent: Option<usize>,
    #[arg(long)]
    pub per_host: Option<usize>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub retries: Option<u32>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a document manifest into docs.jsonl.
    Ingest { manifest: PathBuf },
    /// Download, decode, resize and hash candidate images.
    Fetch(FetchFlags),
    /// Build the frequent-duplicate index.
    Hashdedup,
    /// Embed sentences and images (mock, precomputed shards, or sidecar).
    Embed,
    /// Score classifier heads and apply the image filter cascade.
    Filter,
    /// Drop low-relevance images and assign images to sentences.
    Align {
        /// Relevance threshold in cosine units.
        #[arg(long)]
        relevance_tau: Option<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Derive the face-free and/or core subsets of a corpus.
    Subset {
        #[arg(long, value_enum)]
        variant: Variant,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// TOML file overriding core-subset parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        face_threshold: Option<f64>,
    },
    /// Pick the face-probability threshold reaching a target recall.
    Calibrate {
        /// JSON Lines of {prob, label}.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        target_recall: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Cut documents into capped training sequences.
    Flatten {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Corpus statistics as JSON and CSV.
    Stats {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write histogram data files for plotting.
    Plot {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score an assignment method on a labeled benchmark.
    Eval {
        #[arg(long, conflicts_with = "synthetic")]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        synthetic: Option<Synthetic>,
        #[arg(long, default_value_t = 1000)]
        docs: usize,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        images_per_doc: usize,
        #[arg(long, value_enum, default_value = "lap")]
        scorer: ScorerArg,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run ingest through stats in one go.
    Pipeline {
        manifest: PathBuf,
        /// Also derive this subset after alignment.
        #[arg(long, value_enum)]
        subset: Option<Variant>,
        #[command(flatten)]
        fetch: FetchFlags,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ScorerArg {
    Lap,
    Max,
}

impl From<ScorerArg> for Scorer {
    fn from(s: ScorerArg) -> Scorer {
        match s {
            ScorerArg::Lap => Scorer::Lap,
            ScorerArg::Max => Scorer::Max,
        }
    }
}

fn apply_fetch_flags(cfg: &mut Config, f: &FetchFlags) {
    if let Some(v) = f.max_concurrent {
        cfg.fetch.max_concurrency = v;
    }
    if let Some(v) = f.per_host {
        cfg.fetch.per_host = v;
    }
    if let Some(v) = f.timeout_ms {
        cfg.fetch.timeout_ms = v;
    }
    if let Some(v) = f.retries {
        cfg.fetch.retries = v;
    }
}

fn print_manifest(m: &RunManifest) {
    println!("{}", serde_json::to_string(m).expect("manifest serializes"));
}

/// Every stage from a manifest to statistics.
pub fn pipeline(ctx: &Context, manifest: &Path, subset: Option<Variant>) -> Result<Vec<RunManifest>> {
    let mut runs = vec![
        stages::ingest::run(ctx, manifest)?,
        stages::fetch::run(ctx)?,
        stages::dedup::run(ctx)?,
        stages::embed::run(ctx)?,
        stages::filter::run(ctx)?,
        stages::align::run(ctx, None)?,
    ];
    let corpus = match subset {
        Some(variant) => {
            let out = ctx.path(&format!("corpus.{}.jsonl", variant.name()));
            runs.push(stages::subset::run(
                ctx,
                &SubsetArgs {
                    variant,
                    input: None,
                    output: Some(out.clone()),
                    params: None,
                    face_threshold: None,
                },
            )?);
            Some(out)
        }
        None => None,
    };
    runs.push(stages::flatten::run(ctx, corpus.clone(), None)?);
    let final_docs = runs
        .iter()
        .rev()
        .find_map(|r| r.counters.get("docs_out"))
        .copied()
        .unwrap_or(0);
    if final_docs == 0 {
        log::warn!("no documents survived; statistics skipped");
    } else {
        runs.push(stages::stats::run(ctx, corpus, None)?);
    }
    Ok(runs)
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut config = Config::load_or_default(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(j) = cli.jobs {
        config.jobs = j;
    }
    match &cli.command {
        Command::Fetch(f) | Command::Pipeline { fetch: f, .. } => apply_fetch_flags(&mut config, f),
        Command::Align {
            relevance_tau: Some(t), ..
        } => config.align.relevance_tau = Threshold::cosine(*t),
        _ => {}
    }

    match cli.command {
        Command::Eval {
            input,
            synthetic,
            docs,
            k,
            images_per_doc,
            scorer,
            output,
        } => {
            let report = stages::eval::run(&EvalArgs {
                input,
                synthetic,
                docs,
                k,
                images_per_doc,
                scorer: scorer.into(),
                seed: config.seed,
                output,
            })?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            return Ok(());
        }
        Command::Calibrate {
            scores,
            target_recall,
            output,
        } => {
            let r = stages::eval::calibrate(&scores, target_recall, output.as_deref())?;
            println!("{}", serde_json::to_string(&r).expect("result serializes"));
            return Ok(());
        }
        _ => {}
    }

    let ctx = Context::new(&cli.work, config)?;
    let runs = match cli.command {
        Command::Ingest { manifest } => vec![stages::ingest::run(&ctx, &manifest)?],
        Command::Fetch(_) => vec![stages::fetch::run(&ctx)?],
        Command::Hashdedup => vec![stages::dedup::run(&ctx)?],
        Command::Embed => vec![stages::embed::run(&ctx)?],
        Command::Filter => vec![stages::filter::run(&ctx)?],
        Command::Align { output, .. } => vec![stages::align::run(&ctx, output)?],
        Command::Subset {
            variant,
            input,
            output,
            params,
            face_threshold,
        } => vec![stages::subset::run(
            &ctx,
            &SubsetArgs {
                variant,
                input,
                output,
                params,
                face_threshold,
            },
        )?],
        Command::Flatten { input, output } => vec![stages::flatten::run(&ctx, input, output)?],
        Command::Stats { input, out_dir } => vec![stages::stats::run(&ctx, input, out_dir)?],
        Command::Plot { input, out_dir } => vec![stages::stats::plot(&ctx, input, &out_dir)?],
        Command::Pipeline { manifest, subset, .. } => pipeline(&ctx, &manifest, subset)?,
        Command::Eval { .. } | Command::Calibrate { .. } => unreachable!("handled above"),
    };
    runs.iter().for_each(print_manifest);
    Ok(())
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
