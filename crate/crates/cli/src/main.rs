//! `focus-bench`: build mosaic sets, run explainers over them and score the
//! resulting attribution maps with the Focus metric.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use focus_bench::explainer::exit_code;
use focus_bench::FocusError;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "focus-bench", version, about = "Mosaic-based Focus evaluation of attribution methods")]
struct Cli {
    /// Worker threads for composition, scoring and overlays (default: logical CPUs).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan a labeled image folder (or CSV) into an index file.
    Index(IndexArgs),
    /// Plan and compose a mosaic set from an index.
    Mosaics(MosaicsArgs),
    /// Produce attribution maps for a mosaic set.
    Explain(ExplainArgs),
    /// Score an attribution run and summarise its Focus distribution.
    Focus(FocusArgs),
    /// Compare two attribution runs over the same mosaics.
    Compare(CompareArgs),
    /// Run the six fixed layouts plus random end to end and tabulate them.
    LayoutStudy(LayoutStudyArgs),
    /// Rank class pairs of a two-class run and render exemplar overlays.
    Bias(BiasArgs),
    /// Built-in explainer speaking the subprocess protocol.
    #[command(hide = true)]
    SyntheticExplainer(SyntheticExplainerArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IndexArgs {
    /// Dataset root with one folder per class.
    #[arg(long, conflicts_with = "csv", required_unless_present = "csv")]
    pub root: Option<PathBuf>,
    /// CSV manifest with header `path,label,split`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// all-eval | subdirs | first:N
    #[arg(long, default_value = "all-eval", conflicts_with = "train_list")]
    pub split: String,
    /// File listing training image ids (`<class>/<file>`), one per line.
    #[arg(long)]
    pub train_list: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PlanArgs {
    /// Index file written by `index`.
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    /// standard | two-class
    #[arg(long, default_value = "standard")]
    pub mode: String,
    #[arg(long, default_value_t = 448)]
    pub width: u32,
    #[arg(long, default_value_t = 448)]
    pub height: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MosaicsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub plan: PlanArgs,
    /// random, or one of top-row, bottom-row, left-col, right-col, main-diag, anti-diag.
    #[arg(long, default_value = "random")]
    pub layout: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExplainerArgs {
    /// Built-in explainer: uniform, iid-uniform-random, target-perfect,
    /// anti-target, gaussian-blob[:cx,cy,sigma].
    #[arg(long, conflicts_with = "cmd", required_unless_present = "cmd")]
    pub synthetic: Option<String>,
    /// External explainer command line; protocol flags are appended.
    #[arg(long)]
    pub cmd: Option<String>,
    /// Seconds before the external explainer is killed.
    #[arg(long, default_value_t = 3600.0)]
    pub timeout: f64,
    /// Environment variable passed through to the external explainer.
    #[arg(long = "env")]
    pub env: Vec<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub explainer: ExplainerArgs,
    /// Seed for randomized synthetic explainers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FocusArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub attributions: PathBuf,
    #[arg(long, default_value = "run")]
    pub label: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    /// Manifest shared by both runs.
    #[arg(long, required_unless_present_all = ["manifest_a", "manifest_b"])]
    pub manifest: Option<PathBuf>,
    #[arg(long, conflicts_with = "manifest", requires = "manifest_b")]
    pub manifest_a: Option<PathBuf>,
    #[arg(long, conflicts_with = "manifest", requires = "manifest_a")]
    pub manifest_b: Option<PathBuf>,
    /// Attribution directory of the first run.
    #[arg(long)]
    pub a: PathBuf,
    /// Attribution directory of the second run.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value = "a")]
    pub label_a: String,
    #[arg(long, default_value = "b")]
    pub label_b: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LayoutStudyArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub plan: PlanArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub explainer: ExplainerArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BiasArgs {
    /// Manifest of a two-class mosaic set; mosaics are read from its folder.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub attributions: PathBuf,
    /// Number of lowest-mean class pairs to render.
    #[arg(long, default_value_t = focus_bench::bias::DEFAULT_TOP_PAIRS)]
    pub top_pairs: usize,
    /// Lowest and highest mosaics rendered per pair.
    #[arg(long, default_value_t = focus_bench::bias::DEFAULT_EXEMPLARS)]
    pub exemplars: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SyntheticExplainerArgs {
    #[arg(long, default_value = "uniform")]
    pub kind: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long, default_value = focus_bench::explainer::TARGET_CLASS_FIELD)]
    pub target_class_field: String,
}

#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// An explainer ran but did not deliver a complete, valid run.
#[derive(Debug)]
pub struct ExplainerIncomplete(pub String);

impl std::fmt::Display for ExplainerIncomplete {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ExplainerIncomplete {}

fn exit_status(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if err.downcast_ref::<ExplainerIncomplete>().is_some() {
        return 3;
    }
    match err.downcast_ref::<FocusError>() {
        Some(FocusError::InvalidArgument(_)) => 1,
        Some(FocusError::ExplainerFailed { .. } | FocusError::ExplainerTimeout(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FOCUS_BENCH_LOG", "warn"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(exit_code::USAGE as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }

    let result = match &cli.command {
        Command::Index(a) => commands::index(a),
        Command::Mosaics(a) => commands::mosaics(a),
        Command::Explain(a) => commands::explain(a),
        Command::Focus(a) => commands::focus(a),
        Command::Compare(a) => commands::compare(a),
        Command::LayoutStudy(a) => commands::layout_study(a),
        Command::Bias(a) => commands::bias(a),
        Command::SyntheticExplainer(a) => commands::synthetic_explainer(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
