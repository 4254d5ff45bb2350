//! Class-pair bias mining on two-class mosaic runs.
//!
//! Pairs `(target, outer)` are ranked by mean focus, lowest first. For the
//! worst pairs the extreme mosaics are rendered as heatmap overlays and
//! collected into a report for a human reviewer, who records each finding
//! in `findings.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::warn;
use serde::Serialize;

use crate::attribution::{map_path, read_map, AttributionMap};
use crate::error::{FocusError, Result};
use crate::exec::Execution;
use crate::focus::{mean_std, FocusResult};
use crate::mosaic::{MosaicMode, MosaicSpec};
use crate::sanitize_id;

pub const DEFAULT_TOP_PAIRS: usize = 10;
pub const DEFAULT_EXEMPLARS: usize = 5;
pub const OVERLAY_BLEND: f64 = 0.5;
pub const NO_RELEVANCE_KEY: &str = "focus-bench";
pub const NO_RELEVANCE_TEXT: &str = "no relevance";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exemplar {
    pub mosaic_id: String,
    pub focus: f64,
    pub overlay: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassPairBiasReport {
    pub target_class: String,
    pub outer_class: String,
    pub n: usize,
    pub mean_focus: f64,
    pub std_focus: f64,
    /// Ascending focus.
    pub lowest: Vec<Exemplar>,
    /// Descending focus.
    pub highest: Vec<Exemplar>,
}

impl ClassPairBiasReport {
    pub fn pair_name(&self) -> String {
        format!("{}__{}", sanitize_id(&self.target_class), sanitize_id(&self.outer_class))
    }
}

type ScoredId<'a> = (&'a str, Option<f64>);

/// Rank ordered class pairs of a two-class run by mean focus, keeping
/// `exemplars` extreme mosaics on each side.
pub fn rank_pairs(results: &[FocusResult], specs: &[MosaicSpec], exemplars: usize) -> Result<Vec<ClassPairBiasReport>> {
    let by_id: BTreeMap<&str, &MosaicSpec> = specs.iter().map(|s| (s.id.as_str(), s)).collect();
    if let Some(s) = specs.iter().find(|s| s.mode != MosaicMode::TwoClass) {
        return Err(FocusError::InvalidArgument(format!(
            "bias mining needs two-class mosaics; {} is standard",
            s.id
        )));
    }

    let mut pairs: BTreeMap<(String, String), Vec<ScoredId<'_>>> = BTreeMap::new();
    for r in results {
        let spec = by_id
            .get(r.mosaic_id.as_str())
            .ok_or_else(|| FocusError::InvalidArgument(format!("result for unknown mosaic {}", r.mosaic_id)))?;
        let outer = spec
            .outer_class()
            .ok_or_else(|| FocusError::InvalidMosaic(format!("{}: outer classes differ", spec.id)))?;
        pairs
            .entry((spec.target_class.clone(), outer.to_string()))
            .or_default()
            .push((r.mosaic_id.as_str(), r.focus));
    }

    let mut reports = Vec::with_capacity(pairs.len());
    for ((target_class, outer_class), entries) in pairs {
        let mut defined: Vec<(&str, f64)> = entries.iter().filter_map(|(id, f)| f.map(|f| (*id, f))).collect();
        if defined.is_empty() {
            return Err(FocusError::EmptyDistribution);
        }
        defined.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
        let values: Vec<f64> = {
            let mut by_id = defined.clone();
            by_id.sort_by(|a, b| a.0.cmp(b.0));
            by_id.iter().map(|(_, f)| *f).collect()
        };
        let (mean_focus, std_focus) = mean_std(&values);
        let take = exemplars.min(defined.len());
        let exemplar = |&(id, focus): &(&str, f64)| Exemplar {
            mosaic_id: id.to_string(),
            focus,
            overlay: None,
        };
        let lowest = defined[..take].iter().map(exemplar).collect();
        let mut desc = defined.clone();
        desc.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
        let highest = desc[..take].iter().map(exemplar).collect();
        reports.push(ClassPairBiasReport {
            target_class,
            outer_class,
            n: defined.len(),
            mean_focus,
            std_focus,
            lowest,
            highest,
        });
    }
    reports.sort_by(|a, b| {
        a.mean_focus
            .total_cmp(&b.mean_focus)
            .then_with(|| a.target_class.cmp(&b.target_class))
            .then_with(|| a.outer_class.cmp(&b.outer_class))
    });
    Ok(reports)
}

/// Three-stop ramp: 0 → blue, 0.5 → yellow, 1 → red.
pub fn ramp(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.5 {
        let t = v / 0.5;
        [255.0 * t, 255.0 * t, 255.0 * (1.0 - t)]
    } else {
        let t = (v - 0.5) / 0.5;
        [255.0, 255.0 * (1.0 - t), 0.0]
    }
}

fn luma(p: &Rgb<u8>) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// Heatmap over a grayscale copy of the mosaic. The flag is true when the map
/// has no positive relevance, in which case the output is the plain
/// grayscale mosaic.
pub fn overlay_image(mosaic: &RgbImage, map: &AttributionMap) -> Result<(RgbImage, bool)> {
    if mosaic.dimensions() != (map.width, map.height) {
        return Err(FocusError::DimensionMismatch {
            expected_w: mosaic.width(),
            expected_h: mosaic.height(),
            found_w: map.width,
            found_h: map.height,
        });
    }
    let max = map.values.iter().fold(0.0f32, |m, &v| m.max(v)) as f64;
    let no_relevance = max <= 0.0;
    let out = RgbImage::from_fn(mosaic.width(), mosaic.height(), |x, y| {
        let g = luma(mosaic.get_pixel(x, y));
        if no_relevance {
            let g = g.round() as u8;
            return Rgb([g, g, g]);
        }
        let v = (map.get(x, y) as f64).max(0.0) / max;
        let c = ramp(v);
        let mix = |k: usize| ((1.0 - OVERLAY_BLEND) * g + OVERLAY_BLEND * c[k]).round().clamp(0.0, 255.0) as u8;
        Rgb([mix(0), mix(1), mix(2)])
    });
    Ok((out, no_relevance))
}

fn write_png(img: &RgbImage, path: &Path, note: Option<&str>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| FocusError::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width(), img.height());
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| FocusError::io(path, std::io::Error::other(e));
    if let Some(text) = note {
        encoder
            .add_text_chunk(NO_RELEVANCE_KEY.to_string(), text.to_string())
            .map_err(encode_err)?;
    }
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(img.as_raw()).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// Render an overlay PNG; returns whether the map had no positive relevance.
pub fn render_overlay(mosaic_png: &Path, map: &AttributionMap, out_path: &Path) -> Result<bool> {
    let mosaic = image::open(mosaic_png)
        .map_err(|source| FocusError::Image {
            what: mosaic_png.display().to_string(),
            source,
        })?
        .to_rgb8();
    let (img, flagged) = overlay_image(&mosaic, map)?;
    write_png(&img, out_path, flagged.then_some(NO_RELEVANCE_TEXT))?;
    Ok(flagged)
}

/// Where the inputs of a bias report live.
#[derive(Debug, Clone)]
pub struct ReportSources<'a> {
    pub specs: &'a [MosaicSpec],
    pub mosaics_dir: &'a Path,
    pub attribution_dir: &'a Path,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasBundle {
    pub pairs: Vec<ClassPairBiasReport>,
    pub overlays_written: usize,
    pub warnings: Vec<String>,
}

fn overlay_rel(pair_name: &str, ex: &Exemplar) -> PathBuf {
    PathBuf::from(pair_name).join(format!("{}_{:.4}.png", sanitize_id(&ex.mosaic_id), ex.focus))
}

/// Write overlays for the `top_pairs` lowest-mean pairs (`exemplars` lowest
/// and highest mosaics each), plus `summary.md`, `pairs.csv` and a
/// `findings.csv` stub into `out_dir`.
pub fn bias_report(
    ranked: &[ClassPairBiasReport],
    top_pairs: usize,
    exemplars: usize,
    sources: &ReportSources<'_>,
    out_dir: &Path,
    exec: Execution,
) -> Result<BiasBundle> {
    let mut warnings = Vec::new();
    let k = if top_pairs > ranked.len() {
        warnings.push(format!(
            "requested {top_pairs} pairs but only {} are available",
            ranked.len()
        ));
        ranked.len()
    } else {
        top_pairs
    };

    let mut selected: Vec<ClassPairBiasReport> = ranked[..k].to_vec();
    for pair in selected.iter_mut() {
        let available = pair.lowest.len().min(pair.highest.len());
        if exemplars > available {
            warnings.push(format!(
                "pair {} has {} usable exemplars per extreme, {} requested",
                pair.pair_name(),
                available,
                exemplars
            ));
        }
        let j = exemplars.min(available);
        pair.lowest.truncate(j);
        pair.highest.truncate(j);
        let name = pair.pair_name();
        for ex in pair.lowest.iter_mut().chain(pair.highest.iter_mut()) {
            ex.overlay = Some(overlay_rel(&name, ex));
        }
    }
    for w in &warnings {
        warn!("{w}");
    }

    fs::create_dir_all(out_dir).map_err(|e| FocusError::io(out_dir, e))?;
    let specs: BTreeMap<&str, &MosaicSpec> = sources.specs.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut jobs: BTreeMap<PathBuf, String> = BTreeMap::new();
    for pair in &selected {
        fs::create_dir_all(out_dir.join(pair.pair_name())).map_err(|e| FocusError::io(out_dir, e))?;
        for ex in pair.lowest.iter().chain(&pair.highest) {
            jobs.insert(ex.overlay.clone().expect("set above"), ex.mosaic_id.clone());
        }
    }
    let jobs: Vec<(PathBuf, String)> = jobs.into_iter().collect();
    exec.try_map(&jobs, |(rel, id)| {
        let spec = specs
            .get(id.as_str())
            .ok_or_else(|| FocusError::InvalidArgument(format!("no spec for mosaic {id}")))?;
        let map = read_map(&map_path(sources.attribution_dir, id))?;
        render_overlay(&sources.mosaics_dir.join(spec.file_name()), &map, &out_dir.join(rel)).map(|_| ())
    })?;

    write_pairs_csv(ranked, &out_dir.join("pairs.csv"))?;
    write_findings_stub(&selected, &out_dir.join("findings.csv"))?;
    let summary = summary_markdown(&selected, ranked.len(), &warnings);
    let summary_path = out_dir.join("summary.md");
    fs::write(&summary_path, summary).map_err(|e| FocusError::io(&summary_path, e))?;

    Ok(BiasBundle {
        pairs: selected,
        overlays_written: jobs.len(),
        warnings,
    })
}

fn write_pairs_csv(ranked: &[ClassPairBiasReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| FocusError::csv(path, e))?;
    w.write_record(["target", "outer", "n", "mean", "std"])
        .map_err(|e| FocusError::csv(path, e))?;
    for p in ranked {
        w.write_record([
            p.target_class.clone(),
            p.outer_class.clone(),
            p.n.to_string(),
            p.mean_focus.to_string(),
            p.std_focus.to_string(),
        ])
        .map_err(|e| FocusError::csv(path, e))?;
    }
    w.flush().map_err(|e| FocusError::io(path, e))
}

fn write_findings_stub(selected: &[ClassPairBiasReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| FocusError::csv(path, e))?;
    w.write_record(["pair", "mosaic_id", "bias_type", "note"])
        .map_err(|e| FocusError::csv(path, e))?;
    for pair in selected {
        let mut seen = std::collections::BTreeSet::new();
        for ex in pair.lowest.iter().chain(&pair.highest) {
            if seen.insert(ex.mosaic_id.as_str()) {
                w.write_record([pair.pair_name().as_str(), ex.mosaic_id.as_str(), "", ""])
                    .map_err(|e| FocusError::csv(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| FocusError::io(path, e))
}

fn summary_markdown(selected: &[ClassPairBiasReport], total_pairs: usize, warnings: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Class-pair bias review\n");
    let _ = writeln!(
        s,
        "{} of {} ordered class pairs shown, lowest mean focus first. Each pair lists the \
         mosaics with the lowest and highest focus; overlays show the clamped relevance \
         (blue = low, yellow = mid, red = high) over a grayscale copy of the mosaic.\n",
        selected.len(),
        total_pairs
    );
    let _ = writeln!(s, "Record each reviewed mosaic in `findings.csv` with `bias_type` set to one of:\n");
    let _ = writeln!(
        s,
        "- `shared`: evidence the model uses for the target class also appears in the outer-class images."
    );
    let _ = writeln!(
        s,
        "- `missing`: target-class images lack evidence the model expects for that class."
    );
    let _ = writeln!(s, "- `other`: anything else worth noting.\n");
    let _ = writeln!(
        s,
        "Typical follow-ups are adding training images that separate the two classes, or images of the \
         target class without the confounding context. Nothing here is applied automatically.\n"
    );
    if !warnings.is_empty() {
        let _ = writeln!(s, "## Warnings\n");
        for w in warnings {
            let _ = writeln!(s, "- {w}");
        }
        let _ = writeln!(s);
    }
    for (rank, p) in selected.iter().enumerate() {
        let _ = writeln!(s, "## {}. {} vs {}\n", rank + 1, p.target_class, p.outer_class);
        let _ = writeln!(
            s,
            "n = {}, mean focus = {:.4}, std = {:.4}\n",
            p.n, p.mean_focus, p.std_focus
        );
        for (title, list) in [("Lowest focus", &p.lowest), ("Highest focus", &p.highest)] {
            let _ = writeln!(s, "### {title}\n");
            let _ = writeln!(s, "| mosaic | focus | overlay |\n|---|---|---|");
            for ex in list.iter() {
                let path = ex
                    .overlay
                    .as_ref()
                    .map(|p| p.to_string_lossy().replace('\\', "/"))
                    .unwrap_or_default();
                let _ = writeln!(s, "| {} | {:.4} | ![]({}) |", ex.mosaic_id, ex.focus, path);
            }
            let _ = writeln!(s);
        }
    }
    s
}
