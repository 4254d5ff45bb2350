//! The Focus score and its summary statistics.
//!
//! For a mosaic with target quadrants `a`, `b` and outer quadrants `c`, `d`,
//! with `R(q)` the sum of positive relevance inside quadrant `q`:
//!
//! ```text
//! focus = (R(a) + R(b)) / (R(a) + R(b) + R(c) + R(d))
//! ```
//!
//! Negative relevance counts as zero. A map with no positive relevance has
//! no defined focus; such mosaics are counted but excluded from statistics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::{map_path, read_map, AttributionMap};
use crate::error::{FocusError, Result};
use crate::exec::Execution;
use crate::mosaic::{Layout, MosaicManifest, MosaicSpec, Quadrant};

pub const HISTOGRAM_BINS: usize = 50;
pub const KDE_POINTS: usize = 256;
pub const RESULTS_FILE: &str = "focus_results.csv";
pub const DISTRIBUTION_FILE: &str = "distribution.json";

#[derive(Debug, Clone, PartialEq)]
pub struct FocusResult {
    pub mosaic_id: String,
    pub target_class: String,
    /// Clamped relevance per quadrant, indexed by [`Quadrant::index`].
    pub quadrant_relevance: [f64; 4],
    /// `None` when the map carries no positive relevance.
    pub focus: Option<f64>,
    pub layout: Layout,
}

impl FocusResult {
    pub fn target_positions(&self) -> [Quadrant; 2] {
        self.layout.target_positions()
    }

    pub fn is_defined(&self) -> bool {
        self.focus.is_some()
    }
}

pub fn clamp_positive(map: &AttributionMap) -> AttributionMap {
    AttributionMap {
        width: map.width,
        height: map.height,
        values: map.values.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// Sum of clamped relevance per quadrant, accumulated in f64.
pub fn quadrant_sums(map: &AttributionMap) -> [f64; 4] {
    let (w, h) = (map.width as usize, map.height as usize);
    let (hw, hh) = (w / 2, h / 2);
    let mut sums = [0.0f64; 4];
    for (y, row) in map.values.chunks_exact(w).enumerate() {
        let (left, right) = row.split_at(hw);
        let (li, ri) = if y < hh {
            (Quadrant::TL.index(), Quadrant::TR.index())
        } else {
            (Quadrant::BL.index(), Quadrant::BR.index())
        };
        sums[li] += left.iter().map(|&v| v.max(0.0) as f64).sum::<f64>();
        sums[ri] += right.iter().map(|&v| v.max(0.0) as f64).sum::<f64>();
    }
    debug_assert_eq!(map.values.len(), w * h);
    sums
}

/// Focus of a quadrant-sum vector for the given target layout.
pub fn focus_from_sums(sums: &[f64; 4], layout: Layout) -> Option<f64> {
    let [a, b] = layout.target_positions();
    let [c, d] = layout.outer_positions();
    let target = sums[a.index()] + sums[b.index()];
    let outer = sums[c.index()] + sums[d.index()];
    let total = target + outer;
    (total > 0.0).then(|| target / total)
}

pub fn compute_focus(map: &AttributionMap, spec: &MosaicSpec) -> Result<FocusResult> {
    let layout = spec.validate()?;
    if (map.width, map.height) != (spec.width, spec.height) {
        return Err(FocusError::DimensionMismatch {
            expected_w: spec.width,
            expected_h: spec.height,
            found_w: map.width,
            found_h: map.height,
        });
    }
    if map.values.len() != map.width as usize * map.height as usize {
        return Err(FocusError::InvalidArgument(format!(
            "map payload has {} values for {}x{}",
            map.values.len(),
            map.width,
            map.height
        )));
    }
    if let Some(i) = map.values.iter().position(|v| !v.is_finite()) {
        return Err(FocusError::NonFinite(i));
    }
    let sums = quadrant_sums(map);
    Ok(FocusResult {
        mosaic_id: spec.id.clone(),
        target_class: spec.target_class.clone(),
        quadrant_relevance: sums,
        focus: focus_from_sums(&sums, layout),
        layout,
    })
}

/// Read and score every attribution file of a run.
pub fn score_run(manifest: &MosaicManifest, attribution_dir: &Path, exec: Execution) -> Result<Vec<FocusResult>> {
    let specs = manifest.specs();
    exec.try_map(&specs, |spec| {
        let map = read_map(&map_path(attribution_dir, &spec.id))?;
        compute_focus(&map, spec)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: usize,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn of(values: &[f64], bins: usize) -> Self {
        let mut counts = vec![0u64; bins];
        for &v in values {
            let b = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Histogram { bins, counts }
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.bins).map(|i| i as f64 / self.bins as f64).collect()
    }
}

/// Summary of a run's defined focus values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusDistribution {
    pub label: String,
    pub n_defined: usize,
    pub n_undefined: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub histogram: Histogram,
    pub per_class: BTreeMap<String, ClassStats>,
    /// Unweighted mean of the per-class means.
    pub class_balanced_mean: f64,
}

impl FocusDistribution {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("distribution serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| FocusError::io(path, e))
    }
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Defined focus values sorted by mosaic id.
pub fn defined_values(results: &[FocusResult]) -> Vec<f64> {
    let mut sorted: Vec<&FocusResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.mosaic_id.cmp(&b.mosaic_id));
    sorted.iter().filter_map(|r| r.focus).collect()
}

pub fn aggregate(label: &str, results: &[FocusResult]) -> Result<FocusDistribution> {
    let mut sorted: Vec<&FocusResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.mosaic_id.cmp(&b.mosaic_id));

    let mut values = Vec::with_capacity(sorted.len());
    let mut by_class: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut n_undefined = 0;
    for r in &sorted {
        match r.focus {
            Some(f) => {
                values.push(f);
                by_class.entry(r.target_class.as_str()).or_default().push(f);
            }
            None => n_undefined += 1,
        }
    }
    if values.is_empty() {
        return Err(FocusError::EmptyDistribution);
    }

    let (mean, std) = mean_std(&values);
    let histogram = Histogram::of(&values, HISTOGRAM_BINS);
    let mut ordered = values.clone();
    ordered.sort_by(f64::total_cmp);

    let per_class: BTreeMap<String, ClassStats> = by_class
        .into_iter()
        .map(|(c, v)| {
            let (mean, std) = mean_std(&v);
            (c.to_string(), ClassStats { n: v.len(), mean, std })
        })
        .collect();
    let class_balanced_mean = per_class.values().map(|s| s.mean).sum::<f64>() / per_class.len() as f64;

    Ok(FocusDistribution {
        label: label.to_string(),
        n_defined: values.len(),
        n_undefined,
        mean,
        std,
        min: ordered[0],
        q1: quantile_sorted(&ordered, 0.25),
        median: quantile_sorted(&ordered, 0.5),
        q3: quantile_sorted(&ordered, 0.75),
        max: ordered[ordered.len() - 1],
        histogram,
        per_class,
        class_balanced_mean,
    })
}

/// Gaussian kernel density estimate sampled on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub bandwidth: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

impl KdeCurve {
    /// Trapezoid-rule integral of the sampled curve.
    pub fn integral(&self) -> f64 {
        self.x
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| (x[1] - x[0]) * (d[0] + d[1]) / 2.0)
            .sum()
    }
}

/// Silverman's rule: `0.9 · min(σ, IQR / 1.34) · n^(-1/5)`, using σ alone
/// when the IQR is zero.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(FocusError::Degenerate);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt();
    if sd == 0.0 {
        return Err(FocusError::Degenerate);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

/// Density of focus values on `[0, 1]` at [`KDE_POINTS`] evenly spaced points.
///
/// Kernels are reflected at 0 and 1 so mass that would fall outside the
/// support of the score is folded back; the curve integrates to ~1 on the
/// unit interval.
pub fn kde_curve(values: &[f64]) -> Result<KdeCurve> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(FocusError::InvalidArgument("non-finite value in KDE input".into()));
    }
    let h = silverman_bandwidth(values)?;
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let kernel = |u: f64| (-0.5 * u * u).exp();
    let x: Vec<f64> = (0..KDE_POINTS).map(|i| i as f64 / (KDE_POINTS - 1) as f64).collect();
    let density = x
        .iter()
        .map(|&t| {
            values
                .iter()
                .map(|&v| kernel((t - v) / h) + kernel((t + v) / h) + kernel((t - (2.0 - v)) / h))
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(KdeCurve { bandwidth: h, x, density })
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Write `focus_results.csv`, rows sorted by mosaic id.
pub fn write_results_csv(results: &[FocusResult], path: &Path) -> Result<()> {
    let mut sorted: Vec<&FocusResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.mosaic_id.cmp(&b.mosaic_id));
    let mut w = csv::Writer::from_path(path).map_err(|e| FocusError::csv(path, e))?;
    w.write_record(["mosaic_id", "target_class", "focus", "undefined", "r_TL", "r_TR", "r_BL", "r_BR"])
        .map_err(|e| FocusError::csv(path, e))?;
    for r in sorted {
        let mut row = vec![
            r.mosaic_id.clone(),
            r.target_class.clone(),
            r.focus.map(fmt_f64).unwrap_or_default(),
            (!r.is_defined()).to_string(),
        ];
        row.extend(r.quadrant_relevance.iter().map(|v| fmt_f64(*v)));
        w.write_record(&row).map_err(|e| FocusError::csv(path, e))?;
    }
    w.flush().map_err(|e| FocusError::io(path, e))
}
