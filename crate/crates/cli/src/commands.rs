use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::Serialize;

use focus_bench::attribution::{map_path, validate_run, write_map, ValidationReport};
use focus_bench::bias::{bias_report, rank_pairs, ReportSources};
use focus_bench::explainer::{run_explainer, ExplainerInvocation, TARGET_CLASS_FIELD};
use focus_bench::focus::{score_run, write_results_csv, DISTRIBUTION_FILE, RESULTS_FILE};
use focus_bench::mosaic::{emit_mosaic_set, plan_mosaics, PlanConfig, MANIFEST_FILE};
use focus_bench::sanity::{
    compare_runs, generate_synthetic, layout_experiment, plan_layout_study, LayoutRunInput, Run, SyntheticExplainer,
    SyntheticKind, COMPARISON_FILE, LAYOUT_BOXPLOT_FILE, LAYOUT_TABLE_FILE,
};
use focus_bench::{aggregate, DatasetIndex, Execution, LayoutPolicy, MosaicManifest, MosaicMode, SplitRule};

use crate::{
    BiasArgs, CompareArgs, ExplainArgs, ExplainerArgs, ExplainerIncomplete, FocusArgs, IndexArgs, LayoutStudyArgs,
    MosaicsArgs, PlanArgs, SyntheticExplainerArgs, UsageError,
};

pub const RUNCONFIG_FILE: &str = "runconfig.json";
pub const INDEX_FILE: &str = "index.json";
const PROGRESS_CHUNK: usize = 64;

#[derive(Serialize)]
struct RunConfig<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    args: &'a T,
}

fn write_runconfig<T: Serialize>(out_dir: &Path, command: &str, args: &T) -> Result<()> {
    let config = RunConfig {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        args,
    };
    let path = out_dir.join(RUNCONFIG_FILE);
    let mut text = serde_json::to_string_pretty(&config)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_split(args: &IndexArgs) -> Result<SplitRule> {
    if let Some(list) = &args.train_list {
        let text = fs::read_to_string(list).with_context(|| format!("reading {}", list.display()))?;
        let ids: BTreeSet<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        return Ok(SplitRule::TrainList(ids));
    }
    match args.split.as_str() {
        "all-eval" => Ok(SplitRule::AllEval),
        "subdirs" => Ok(SplitRule::Subdirectories),
        other => match other.strip_prefix("first:").map(str::parse::<usize>) {
            Some(Ok(n)) => Ok(SplitRule::FirstPerClass(n)),
            _ => Err(usage(format!("unknown split rule {other:?}; expected all-eval, subdirs or first:N"))),
        },
    }
}

pub fn index(args: &IndexArgs) -> Result<()> {
    let index = match (&args.root, &args.csv) {
        (_, Some(csv)) => DatasetIndex::from_csv(csv)?,
        (Some(root), None) => {
            let (index, summary) = DatasetIndex::build_with(root, &parse_split(args)?, Execution::default())?;
            for s in &summary.skipped {
                warn!("skipped {}: {}", s.path.display(), s.reason);
            }
            info!("scanned {} files, skipped {}", summary.scanned, summary.skipped.len());
            index
        }
        (None, None) => return Err(usage("one of --root or --csv is required")),
    };
    create_out_dir(&args.out_dir)?;
    index.save(&args.out_dir.join(INDEX_FILE))?;
    write_runconfig(&args.out_dir, "index", args)?;
    println!(
        "indexed {} images in {} classes ({} eval)",
        index.len(),
        index.num_classes(),
        index.count_split(focus_bench::Split::Eval)
    );
    Ok(())
}

fn plan_config(plan: &PlanArgs, layout: LayoutPolicy) -> Result<PlanConfig> {
    let mode: MosaicMode = plan.mode.parse()?;
    if plan.per_class == 0 {
        return Err(usage("--per-class must be positive"));
    }
    if plan.width < 2 || plan.height < 2 || !plan.width.is_multiple_of(2) || !plan.height.is_multiple_of(2) {
        return Err(usage("mosaic width and height must be even and at least 2"));
    }
    Ok(PlanConfig {
        per_class: plan.per_class,
        mode,
        layout,
        width: plan.width,
        height: plan.height,
    })
}

pub fn mosaics(args: &MosaicsArgs) -> Result<()> {
    let layout: LayoutPolicy = args.layout.parse()?;
    let config = plan_config(&args.plan, layout)?;
    let index = DatasetIndex::load(&args.plan.index)?;
    let specs = plan_mosaics(&index, &config, args.plan.seed)?;
    create_out_dir(&args.out_dir)?;
    let manifest = emit_mosaic_set(&specs, &index, &args.out_dir, args.plan.seed, Execution::default())?;
    write_runconfig(&args.out_dir, "mosaics", args)?;
    println!(
        "wrote {} mosaics to {}",
        manifest.mosaics.len(),
        args.out_dir.display()
    );
    Ok(())
}

enum Explainer {
    Synthetic(SyntheticExplainer),
    External(ExplainerInvocation),
}

fn explainer_from(args: &ExplainerArgs, seed: u64) -> Result<Explainer> {
    if let Some(kind) = &args.synthetic {
        let kind: SyntheticKind = kind.parse()?;
        return Ok(Explainer::Synthetic(SyntheticExplainer::new(kind, seed)));
    }
    let cmd = args.cmd.as_deref().unwrap_or_default();
    let mut words = shlex::split(cmd).ok_or_else(|| usage(format!("cannot parse --cmd {cmd:?}")))?;
    if words.is_empty() {
        return Err(usage("--cmd is empty"));
    }
    if !(args.timeout.is_finite() && args.timeout > 0.0) {
        return Err(usage("--timeout must be a positive number of seconds"));
    }
    let program = words.remove(0);
    let invocation = ExplainerInvocation::new(program, words, Duration::from_secs_f64(args.timeout))?
        .with_env(args.env.iter().cloned());
    Ok(Explainer::External(invocation))
}

/// Produce one attribution run and insist that it is complete.
fn run_explainer_on(explainer: &Explainer, manifest_path: &Path, out_dir: &Path) -> Result<ValidationReport> {
    let manifest = MosaicManifest::load(manifest_path)?;
    create_out_dir(out_dir)?;
    let report = match explainer {
        Explainer::Synthetic(synthetic) => {
            generate_synthetic(&manifest, synthetic, out_dir, Execution::default())?;
            validate_run(&manifest, out_dir)
        }
        Explainer::External(invocation) => {
            let run = run_explainer(invocation, manifest_path, out_dir)?;
            info!("explainer finished in {:.1}s", run.duration_secs);
            run.report
        }
    };
    if !report.complete {
        return Err(ExplainerIncomplete(format!(
            "explainer output in {} is incomplete ({}/{} valid):\n{}",
            out_dir.display(),
            report.valid,
            report.total,
            report.describe_problems(20)
        ))
        .into());
    }
    Ok(report)
}

pub fn explain(args: &ExplainArgs) -> Result<()> {
    let explainer = explainer_from(&args.explainer, args.seed)?;
    let report = run_explainer_on(&explainer, &args.manifest, &args.out_dir)?;
    write_runconfig(&args.out_dir, "explain", args)?;
    println!("wrote {} attribution maps to {}", report.valid, args.out_dir.display());
    Ok(())
}

/// Load a manifest and refuse to go on unless its run is complete.
fn load_complete_run(manifest_path: &Path, attributions: &Path) -> Result<MosaicManifest> {
    let manifest = MosaicManifest::load(manifest_path)?;
    let report = validate_run(&manifest, attributions);
    if !report.complete {
        bail!(
            "attribution run {} is incomplete ({}/{} valid):\n{}",
            attributions.display(),
            report.valid,
            report.total,
            report.describe_problems(20)
        );
    }
    Ok(manifest)
}

pub fn focus(args: &FocusArgs) -> Result<()> {
    let manifest = load_complete_run(&args.manifest, &args.attributions)?;
    let results = score_run(&manifest, &args.attributions, Execution::default())?;
    let distribution = aggregate(&args.label, &results)?;
    create_out_dir(&args.out_dir)?;
    write_results_csv(&results, &args.out_dir.join(RESULTS_FILE))?;
    distribution.save(&args.out_dir.join(DISTRIBUTION_FILE))?;
    write_runconfig(&args.out_dir, "focus", args)?;
    println!(
        "{}: n={} undefined={} mean={:.6} std={:.6} median={:.6}",
        distribution.label,
        distribution.n_defined,
        distribution.n_undefined,
        distribution.mean,
        distribution.std,
        distribution.median
    );
    Ok(())
}

pub fn compare(args: &CompareArgs) -> Result<()> {
    let (path_a, path_b) = match (&args.manifest, &args.manifest_a, &args.manifest_b) {
        (Some(m), _, _) => (m, m),
        (None, Some(a), Some(b)) => (a, b),
        _ => return Err(usage("give --manifest, or both --manifest-a and --manifest-b")),
    };
    let manifest_a = load_complete_run(path_a, &args.a)?;
    let manifest_b = load_complete_run(path_b, &args.b)?;
    let results_a = score_run(&manifest_a, &args.a, Execution::default())?;
    let results_b = score_run(&manifest_b, &args.b, Execution::default())?;
    let (specs_a, specs_b) = (manifest_a.specs(), manifest_b.specs());
    let report = compare_runs(
        Run {
            label: &args.label_a,
            specs: &specs_a,
            results: &results_a,
        },
        Run {
            label: &args.label_b,
            specs: &specs_b,
            results: &results_b,
        },
    )?;
    create_out_dir(&args.out_dir)?;
    report.save(&args.out_dir.join(COMPARISON_FILE))?;
    write_runconfig(&args.out_dir, "compare", args)?;
    println!(
        "{} vs {}: mean difference {:.6}, KS {:.6}",
        report.label_a, report.label_b, report.mean_difference, report.ks
    );
    Ok(())
}

pub fn layout_study(args: &LayoutStudyArgs) -> Result<()> {
    let explainer = explainer_from(&args.explainer, args.plan.seed)?;
    let base = plan_config(&args.plan, LayoutPolicy::Random)?;
    let index = DatasetIndex::load(&args.plan.index)?;
    create_out_dir(&args.out_dir)?;
    let mut inputs = Vec::new();
    for (policy, specs) in plan_layout_study(&index, &base, args.plan.seed)? {
        let run_dir = args.out_dir.join(policy.name());
        let mosaics_dir = run_dir.join("mosaics");
        let attribution_dir = run_dir.join("attributions");
        info!("layout {policy}: composing {} mosaics", specs.len());
        let manifest = emit_mosaic_set(&specs, &index, &mosaics_dir, args.plan.seed, Execution::default())?;
        run_explainer_on(&explainer, &mosaics_dir.join(MANIFEST_FILE), &attribution_dir)?;
        inputs.push(LayoutRunInput {
            policy,
            manifest,
            attribution_dir,
        });
    }
    let table = layout_experiment(&inputs, Execution::default())?;
    table.write_csv(&args.out_dir.join(LAYOUT_TABLE_FILE))?;
    table.write_boxplot_json(&args.out_dir.join(LAYOUT_BOXPLOT_FILE))?;
    write_runconfig(&args.out_dir, "layout-study", args)?;
    for row in &table.rows {
        println!(
            "{:<11} n={:<5} mean={:.6} std={:.6} median={:.6}",
            row.layout, row.n, row.mean, row.std, row.median
        );
    }
    Ok(())
}

pub fn bias(args: &BiasArgs) -> Result<()> {
    let manifest = load_complete_run(&args.manifest, &args.attributions)?;
    let specs = manifest.specs();
    let results = score_run(&manifest, &args.attributions, Execution::default())?;
    let ranked = rank_pairs(&results, &specs, args.exemplars)?;
    let mosaics_dir: PathBuf = args
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    create_out_dir(&args.out_dir)?;
    let sources = ReportSources {
        specs: &specs,
        mosaics_dir: &mosaics_dir,
        attribution_dir: &args.attributions,
    };
    let bundle = bias_report(
        &ranked,
        args.top_pairs,
        args.exemplars,
        &sources,
        &args.out_dir,
        Execution::default(),
    )?;
    write_runconfig(&args.out_dir, "bias", args)?;
    println!(
        "ranked {} class pairs; wrote {} overlays for {} pairs to {}",
        ranked.len(),
        bundle.overlays_written,
        bundle.pairs.len(),
        args.out_dir.display()
    );
    Ok(())
}

/// The built-in explainer behind the subprocess protocol; used to exercise
/// the protocol end to end without an external model.
pub fn synthetic_explainer(args: &SyntheticExplainerArgs) -> Result<()> {
    if args.target_class_field != TARGET_CLASS_FIELD {
        return Err(usage(format!(
            "unsupported --target-class-field {:?}",
            args.target_class_field
        )));
    }
    let kind: SyntheticKind = args.kind.parse()?;
    let explainer = SyntheticExplainer::new(kind, args.seed);
    let manifest = MosaicManifest::load(&args.manifest)?;
    create_out_dir(&args.output_dir)?;
    let specs = manifest.specs();
    let total = specs.len();
    let stdout = std::io::stdout();
    let mut done = 0;
    for chunk in specs.chunks(PROGRESS_CHUNK) {
        Execution::default().try_map(chunk, |spec| {
            write_map(&explainer.explain(spec), &map_path(&args.output_dir, &spec.id))
        })?;
        done += chunk.len();
        let mut out = stdout.lock();
        writeln!(out, "PROGRESS {done}/{total}")?;
        out.flush()?;
    }
    Ok(())
}
