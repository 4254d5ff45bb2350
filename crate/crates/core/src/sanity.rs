//! Synthetic explainers and the randomization / layout comparisons used to
//! sanity-check the metric without a trained model.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{map_path, write_map, AttributionMap};
use crate::dataset::DatasetIndex;
use crate::error::{FocusError, Result};
use crate::exec::Execution;
use crate::focus::{aggregate, defined_values, score_run, FocusDistribution, FocusResult};
use crate::mosaic::{plan_mosaics, LayoutPolicy, MosaicManifest, MosaicSpec, PlanConfig, Quadrant};
use crate::rng::substream;

pub const COMPARISON_FILE: &str = "comparison.json";
pub const LAYOUT_TABLE_FILE: &str = "layout_table.csv";
pub const LAYOUT_BOXPLOT_FILE: &str = "layout_boxplot.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Relevance 1 on every pixel.
    Uniform,
    /// Independent U[0, 1) per pixel.
    IidUniformRandom,
    /// Relevance 1 on the target quadrants, 0 elsewhere.
    TargetPerfect,
    /// Relevance 1 on the outer quadrants, 0 elsewhere.
    AntiTarget,
    /// Isotropic Gaussian bump; center in fractions of width/height, sigma in
    /// fractions of the width.
    GaussianBlob { cx: f64, cy: f64, sigma: f64 },
}

impl SyntheticKind {
    pub fn name(&self) -> &'static str {
        match self {
            SyntheticKind::Uniform => "uniform",
            SyntheticKind::IidUniformRandom => "iid-uniform-random",
            SyntheticKind::TargetPerfect => "target-perfect",
            SyntheticKind::AntiTarget => "anti-target",
            SyntheticKind::GaussianBlob { .. } => "gaussian-blob",
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyntheticKind::GaussianBlob { cx, cy, sigma } => write!(f, "gaussian-blob:{cx},{cy},{sigma}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = FocusError;

    /// Accepts the kind names; the blob takes optional `:cx,cy,sigma`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || FocusError::InvalidArgument(format!("unknown synthetic explainer {s:?}"));
        match s {
            "uniform" => Ok(SyntheticKind::Uniform),
            "iid-uniform-random" => Ok(SyntheticKind::IidUniformRandom),
            "target-perfect" => Ok(SyntheticKind::TargetPerfect),
            "anti-target" => Ok(SyntheticKind::AntiTarget),
            "gaussian-blob" => Ok(SyntheticKind::GaussianBlob {
                cx: 0.5,
                cy: 0.5,
                sigma: 0.25,
            }),
            _ => {
                let params = s.strip_prefix("gaussian-blob:").ok_or_else(bad)?;
                let nums: Vec<f64> = params
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?;
                match nums[..] {
                    [cx, cy, sigma] if sigma > 0.0 && cx.is_finite() && cy.is_finite() => {
                        Ok(SyntheticKind::GaussianBlob { cx, cy, sigma })
                    }
                    _ => Err(bad()),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticExplainer {
    pub kind: SyntheticKind,
    pub seed: u64,
}

impl SyntheticExplainer {
    pub fn new(kind: SyntheticKind, seed: u64) -> Self {
        SyntheticExplainer { kind, seed }
    }

    /// The map this explainer produces for one mosaic. Random kinds draw from
    /// a substream keyed by the mosaic id.
    pub fn explain(&self, spec: &MosaicSpec) -> AttributionMap {
        let (w, h) = (spec.width, spec.height);
        match self.kind {
            SyntheticKind::Uniform => AttributionMap::filled(w, h, 1.0),
            SyntheticKind::IidUniformRandom => {
                let mut rng = substream(self.seed, "synthetic/iid-uniform-random", &spec.id);
                AttributionMap::from_fn(w, h, |_, _| rng.random::<f32>())
            }
            SyntheticKind::TargetPerfect | SyntheticKind::AntiTarget => {
                let layout = spec.layout();
                let on_target = self.kind == SyntheticKind::TargetPerfect;
                let mut map = AttributionMap::filled(w, h, 0.0);
                for q in Quadrant::ALL {
                    if layout.is_target(q) != on_target {
                        continue;
                    }
                    let (r0, r1, c0, c1) = q.region(w, h);
                    for y in r0..r1 {
                        let row = (y * w) as usize;
                        map.values[row + c0 as usize..row + c1 as usize].fill(1.0);
                    }
                }
                map
            }
            SyntheticKind::GaussianBlob { cx, cy, sigma } => {
                let (mx, my) = (cx * w as f64, cy * h as f64);
                let s2 = 2.0 * (sigma * w as f64).powi(2);
                AttributionMap::from_fn(w, h, |x, y| {
                    let dx = x as f64 + 0.5 - mx;
                    let dy = y as f64 + 0.5 - my;
                    (-(dx * dx + dy * dy) / s2).exp() as f32
                })
            }
        }
    }
}

/// Write one `.foc1` per mosaic of the manifest into `out_dir`.
pub fn generate_synthetic(
    manifest: &MosaicManifest,
    explainer: &SyntheticExplainer,
    out_dir: &Path,
    exec: Execution,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| FocusError::io(out_dir, e))?;
    let specs = manifest.specs();
    exec.try_map(&specs, |spec| write_map(&explainer.explain(spec), &map_path(out_dir, &spec.id)))?;
    Ok(())
}

/// Score synthetic maps directly, without touching the filesystem.
pub fn score_synthetic(
    specs: &[MosaicSpec],
    explainer: &SyntheticExplainer,
    exec: Execution,
) -> Result<Vec<FocusResult>> {
    exec.try_map(specs, |spec| crate::focus::compute_focus(&explainer.explain(spec), spec))
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub label_a: String,
    pub label_b: String,
    pub distribution_a: FocusDistribution,
    pub distribution_b: FocusDistribution,
    /// `mean(a) − mean(b)`
    pub mean_difference: f64,
    pub ks: f64,
}

impl ComparisonReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        fs::write(path, s).map_err(|e| FocusError::io(path, e))
    }
}

/// One scored run over a mosaic set.
#[derive(Debug, Clone, Copy)]
pub struct Run<'a> {
    pub label: &'a str,
    pub specs: &'a [MosaicSpec],
    pub results: &'a [FocusResult],
}

fn sorted_specs(specs: &[MosaicSpec]) -> Vec<&MosaicSpec> {
    let mut v: Vec<&MosaicSpec> = specs.iter().collect();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

fn check_results_cover(run: &Run<'_>) -> Result<()> {
    let ids: BTreeSet<&str> = run.specs.iter().map(|s| s.id.as_str()).collect();
    let got: BTreeSet<&str> = run.results.iter().map(|r| r.mosaic_id.as_str()).collect();
    if ids != got || run.results.len() != got.len() {
        return Err(FocusError::Incomparable(format!(
            "run {:?} is incomplete: {} results for {} mosaics",
            run.label,
            run.results.len(),
            ids.len()
        )));
    }
    Ok(())
}

pub fn compare_runs(a: Run<'_>, b: Run<'_>) -> Result<ComparisonReport> {
    if sorted_specs(a.specs) != sorted_specs(b.specs) {
        return Err(FocusError::Incomparable(format!(
            "runs {:?} and {:?} were produced from different mosaic sets",
            a.label, b.label
        )));
    }
    check_results_cover(&a)?;
    check_results_cover(&b)?;
    let distribution_a = aggregate(a.label, a.results)?;
    let distribution_b = aggregate(b.label, b.results)?;
    Ok(ComparisonReport {
        label_a: a.label.to_string(),
        label_b: b.label.to_string(),
        mean_difference: distribution_a.mean - distribution_b.mean,
        ks: ks_statistic(&defined_values(a.results), &defined_values(b.results)),
        distribution_a,
        distribution_b,
    })
}

/// The seven mosaic sets of a layout study (six fixed layouts, then random),
/// all drawing the same images per mosaic id.
pub fn plan_layout_study(
    index: &DatasetIndex,
    base: &PlanConfig,
    seed: u64,
) -> Result<Vec<(LayoutPolicy, Vec<MosaicSpec>)>> {
    LayoutPolicy::STUDY
        .iter()
        .map(|&layout| {
            let config = PlanConfig { layout, ..*base };
            Ok((layout, plan_mosaics(index, &config, seed)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutRow {
    pub layout: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutTable {
    pub rows: Vec<LayoutRow>,
}

/// Input for one configuration of the layout study.
#[derive(Debug, Clone)]
pub struct LayoutRunInput {
    pub policy: LayoutPolicy,
    pub manifest: MosaicManifest,
    pub attribution_dir: PathBuf,
}

/// Build the per-layout table from seven scored runs.
pub fn layout_table(runs: &[(LayoutPolicy, Vec<MosaicSpec>, Vec<FocusResult>)]) -> Result<LayoutTable> {
    let missing: Vec<String> = LayoutPolicy::STUDY
        .iter()
        .filter(|p| !runs.iter().any(|(q, _, _)| q == *p))
        .map(|p| p.name().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(FocusError::MissingLayoutRun(missing));
    }
    let class_set = |specs: &[MosaicSpec]| specs.iter().map(|s| s.target_class.clone()).collect::<BTreeSet<_>>();
    let reference = class_set(&runs[0].1);
    let mut rows = Vec::with_capacity(LayoutPolicy::STUDY.len());
    for policy in LayoutPolicy::STUDY {
        let (_, specs, results) = runs.iter().find(|(p, _, _)| *p == policy).expect("checked above");
        if class_set(specs) != reference {
            return Err(FocusError::Incomparable(format!(
                "layout run {policy} uses a different target class set"
            )));
        }
        let d = aggregate(policy.name(), results)?;
        rows.push(LayoutRow {
            layout: policy.name().to_string(),
            n: d.n_defined,
            mean: d.mean,
            std: d.std,
            min: d.min,
            q1: d.q1,
            median: d.median,
            q3: d.q3,
            max: d.max,
        });
    }
    Ok(LayoutTable { rows })
}

/// Score seven attribution runs from disk and tabulate them.
pub fn layout_experiment(inputs: &[LayoutRunInput], exec: Execution) -> Result<LayoutTable> {
    let mut runs = Vec::with_capacity(inputs.len());
    for input in inputs {
        let results = score_run(&input.manifest, &input.attribution_dir, exec)?;
        runs.push((input.policy, input.manifest.specs(), results));
    }
    layout_table(&runs)
}

impl LayoutTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| FocusError::csv(path, e))?;
        w.write_record(["layout", "n", "mean", "std", "q1", "median", "q3"])
            .map_err(|e| FocusError::csv(path, e))?;
        for r in &self.rows {
            w.write_record([
                r.layout.clone(),
                r.n.to_string(),
                r.mean.to_string(),
                r.std.to_string(),
                r.q1.to_string(),
                r.median.to_string(),
                r.q3.to_string(),
            ])
            .map_err(|e| FocusError::csv(path, e))?;
        }
        w.flush().map_err(|e| FocusError::io(path, e))
    }

    /// Five-number summaries per layout, ready for a box plot.
    pub fn write_boxplot_json(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).expect("table serializes");
        s.push('\n');
        fs::write(path, s).map_err(|e| FocusError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImageRecord, Split};
    use crate::focus::compute_focus;
    use crate::mosaic::Layout;

    fn index(classes: usize, n: usize) -> DatasetIndex {
        let records = (0..classes)
            .flat_map(|c| {
                (0..n).map(move |i| ImageRecord {
                    id: format!("k{c}/{i}.png"),
                    path: format!("k{c}/{i}.png"),
                    class_label: format!("k{c}"),
                    split: Split::Eval,
                })
            })
            .collect();
        DatasetIndex::from_records("/", records).unwrap()
    }

    fn specs(per_class: usize, w: u32, h: u32) -> Vec<MosaicSpec> {
        let config = PlanConfig {
            per_class,
            width: w,
            height: h,
            ..PlanConfig::default()
        };
        plan_mosaics(&index(2, 6), &config, 1).unwrap()
    }

    fn focus_of(kind: SyntheticKind, specs: &[MosaicSpec]) -> Vec<Option<f64>> {
        score_synthetic(specs, &SyntheticExplainer::new(kind, 5), Execution::default())
            .unwrap()
            .into_iter()
            .map(|r| r.focus)
            .collect()
    }

    #[test]
    fn deterministic_kinds() {
        let s = specs(20, 16, 10);
        assert!(focus_of(SyntheticKind::Uniform, &s).iter().all(|f| *f == Some(0.5)));
        assert!(focus_of(SyntheticKind::TargetPerfect, &s).iter().all(|f| *f == Some(1.0)));
        assert!(focus_of(SyntheticKind::AntiTarget, &s).iter().all(|f| *f == Some(0.0)));
    }

    #[test]
    fn blob_prefers_its_quadrant() {
        let s = specs(10, 64, 64);
        let blob = SyntheticKind::GaussianBlob {
            cx: 0.25,
            cy: 0.25,
            sigma: 0.05,
        };
        for (spec, f) in s.iter().zip(focus_of(blob, &s)) {
            let f = f.unwrap();
            if spec.layout().is_target(Quadrant::TL) {
                assert!(f > 0.99, "{f}");
            } else {
                assert!(f < 0.01, "{f}");
            }
        }
    }

    #[test]
    fn iid_random_near_half() {
        let s = specs(50, 64, 64);
        let fs: Vec<f64> = focus_of(SyntheticKind::IidUniformRandom, &s).into_iter().flatten().collect();
        let mean = fs.iter().sum::<f64>() / fs.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn kind_parsing() {
        for k in ["uniform", "iid-uniform-random", "target-perfect", "anti-target"] {
            assert_eq!(k.parse::<SyntheticKind>().unwrap().to_string(), k);
        }
        assert_eq!(
            "gaussian-blob:0.2,0.8,0.1".parse::<SyntheticKind>().unwrap(),
            SyntheticKind::GaussianBlob {
                cx: 0.2,
                cy: 0.8,
                sigma: 0.1
            }
        );
        assert!("gaussian-blob:1,2".parse::<SyntheticKind>().is_err());
        assert!("gaussian-blob:0.5,0.5,0".parse::<SyntheticKind>().is_err());
        assert!("smoothgrad".parse::<SyntheticKind>().is_err());
    }

    #[test]
    fn generation_is_reproducible_across_strategies() {
        let s = specs(5, 12, 8);
        let manifest = MosaicManifest::from_specs(&s, 1, "fp").unwrap();
        let ex = SyntheticExplainer::new(SyntheticKind::IidUniformRandom, 77);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_synthetic(&manifest, &ex, d1.path(), Execution::default()).unwrap();
        generate_synthetic(&manifest, &ex, d2.path(), Execution::Sequential).unwrap();
        for spec in &s {
            let a = fs::read(map_path(d1.path(), &spec.id)).unwrap();
            let b = fs::read(map_path(d2.path(), &spec.id)).unwrap();
            assert_eq!(a, b);
        }
        let results = score_run(&manifest, d1.path(), Execution::default()).unwrap();
        let direct: Vec<FocusResult> = manifest
            .specs()
            .iter()
            .map(|sp| compute_focus(&ex.explain(sp), sp).unwrap())
            .collect();
        assert_eq!(results, direct);
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_statistic(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9]), 0.0);
        assert_eq!(ks_statistic(&[1.0, 1.0], &[0.0, 0.0, 0.0]), 1.0);
        // brute force over all evaluation points
        let a = [0.1, 0.4, 0.4, 0.7];
        let b = [0.2, 0.4, 0.8];
        let cdf = |v: &[f64], x: f64| v.iter().filter(|&&y| y <= x).count() as f64 / v.len() as f64;
        let want = a
            .iter()
            .chain(&b)
            .map(|&x| (cdf(&a, x) - cdf(&b, x)).abs())
            .fold(0.0, f64::max);
        assert!((ks_statistic(&a, &b) - want).abs() < 1e-15);
        assert!((ks_statistic(&b, &a) - want).abs() < 1e-15);
    }

    fn scored(kind: SyntheticKind, s: &[MosaicSpec]) -> Vec<FocusResult> {
        score_synthetic(s, &SyntheticExplainer::new(kind, 1), Execution::default()).unwrap()
    }

    #[test]
    fn compare_self_and_extremes() {
        let s = specs(10, 8, 8);
        let u = scored(SyntheticKind::IidUniformRandom, &s);
        let run = |label, results| Run {
            label,
            specs: &s,
            results,
        };
        let same = compare_runs(run("a", &u), run("a", &u)).unwrap();
        assert_eq!((same.mean_difference, same.ks), (0.0, 0.0));

        let tp = scored(SyntheticKind::TargetPerfect, &s);
        let at = scored(SyntheticKind::AntiTarget, &s);
        let r = compare_runs(run("tp", &tp), run("at", &at)).unwrap();
        assert_eq!((r.mean_difference, r.ks), (1.0, 1.0));
        let back = compare_runs(run("at", &at), run("tp", &tp)).unwrap();
        assert_eq!(back.mean_difference, -r.mean_difference);

        let uni = scored(SyntheticKind::Uniform, &s);
        let r = compare_runs(run("u", &uni), run("tp", &tp)).unwrap();
        assert_eq!((r.mean_difference, r.ks), (-0.5, 1.0));
    }

    #[test]
    fn compare_rejects_different_manifests() {
        let s1 = specs(10, 8, 8);
        let s2 = specs(11, 8, 8);
        let r1 = scored(SyntheticKind::Uniform, &s1);
        let r2 = scored(SyntheticKind::Uniform, &s2);
        let err = compare_runs(
            Run {
                label: "a",
                specs: &s1,
                results: &r1,
            },
            Run {
                label: "b",
                specs: &s2,
                results: &r2,
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("incomparable"));
        let partial = &r1[1..];
        assert!(compare_runs(
            Run {
                label: "a",
                specs: &s1,
                results: &r1
            },
            Run {
                label: "b",
                specs: &s1,
                results: partial
            }
        )
        .is_err());
    }

    fn study(kind: SyntheticKind) -> Vec<(LayoutPolicy, Vec<MosaicSpec>, Vec<FocusResult>)> {
        let base = PlanConfig {
            per_class: 15,
            width: 8,
            height: 8,
            ..PlanConfig::default()
        };
        plan_layout_study(&index(3, 5), &base, 2)
            .unwrap()
            .into_iter()
            .map(|(p, s)| {
                let r = scored(kind, &s);
                (p, s, r)
            })
            .collect()
    }

    #[test]
    fn layout_study_uniform_and_perfect() {
        let table = layout_table(&study(SyntheticKind::Uniform)).unwrap();
        assert_eq!(table.rows.len(), 7);
        assert_eq!(table.rows[6].layout, "random");
        for r in &table.rows {
            assert_eq!((r.n, r.mean, r.std), (45, 0.5, 0.0));
        }
        for r in layout_table(&study(SyntheticKind::TargetPerfect)).unwrap().rows {
            assert_eq!(r.mean, 1.0);
        }
    }

    #[test]
    fn layout_study_fixed_runs_use_their_layout() {
        for (p, s, _) in study(SyntheticKind::Uniform) {
            if let LayoutPolicy::Fixed(l) = p {
                assert!(s.iter().all(|m| m.layout() == l));
            }
        }
    }

    #[test]
    fn layout_study_missing_run() {
        let mut runs = study(SyntheticKind::Uniform);
        runs.retain(|(p, _, _)| *p != LayoutPolicy::Fixed(Layout::MainDiag));
        match layout_table(&runs) {
            Err(FocusError::MissingLayoutRun(m)) => assert_eq!(m, vec!["main-diag"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn layout_table_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(LAYOUT_TABLE_FILE);
        layout_table(&study(SyntheticKind::Uniform)).unwrap().write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "layout,n,mean,std,q1,median,q3");
        assert_eq!(lines.next().unwrap(), "top-row,45,0.5,0,0.5,0.5,0.5");
        assert_eq!(text.lines().count(), 8);
    }
}
