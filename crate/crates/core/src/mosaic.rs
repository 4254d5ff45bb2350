//! 2×2 mosaic planning and composition.
//!
//! A mosaic holds two eval images of its target class and two images of
//! other classes. Planning is deterministic in `(dataset fingerprint, seed)`
//! and draws each mosaic from its own RNG substream keyed by the mosaic id.
//! Images are drawn before the layout, so runs that differ only in layout
//! policy share the same image selection per id.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetIndex, ImageRecord};
use crate::error::{FocusError, Result};
use crate::exec::Execution;
use crate::rng::substream;
use crate::sanitize_id;

pub const MANIFEST_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";
pub const DEFAULT_SIDE: u32 = 448;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    TL,
    TR,
    BL,
    BR,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::TL, Quadrant::TR, Quadrant::BL, Quadrant::BR];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::TL => "TL",
            Quadrant::TR => "TR",
            Quadrant::BL => "BL",
            Quadrant::BR => "BR",
        }
    }

    /// Pixel region as `(row_start, row_end, col_start, col_end)`, half-open.
    pub fn region(self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let (hw, hh) = (width / 2, height / 2);
        match self {
            Quadrant::TL => (0, hh, 0, hw),
            Quadrant::TR => (0, hh, hw, width),
            Quadrant::BL => (hh, height, 0, hw),
            Quadrant::BR => (hh, height, hw, width),
        }
    }
}

/// Placement of the two target-class images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    TopRow,
    BottomRow,
    LeftCol,
    RightCol,
    MainDiag,
    AntiDiag,
}

impl Layout {
    pub const ALL: [Layout; 6] = [
        Layout::TopRow,
        Layout::BottomRow,
        Layout::LeftCol,
        Layout::RightCol,
        Layout::MainDiag,
        Layout::AntiDiag,
    ];

    pub fn target_positions(self) -> [Quadrant; 2] {
        use Quadrant::*;
        match self {
            Layout::TopRow => [TL, TR],
            Layout::BottomRow => [BL, BR],
            Layout::LeftCol => [TL, BL],
            Layout::RightCol => [TR, BR],
            Layout::MainDiag => [TL, BR],
            Layout::AntiDiag => [TR, BL],
        }
    }

    pub fn outer_positions(self) -> [Quadrant; 2] {
        self.complement().target_positions()
    }

    pub fn complement(self) -> Layout {
        match self {
            Layout::TopRow => Layout::BottomRow,
            Layout::BottomRow => Layout::TopRow,
            Layout::LeftCol => Layout::RightCol,
            Layout::RightCol => Layout::LeftCol,
            Layout::MainDiag => Layout::AntiDiag,
            Layout::AntiDiag => Layout::MainDiag,
        }
    }

    pub fn is_target(self, q: Quadrant) -> bool {
        self.target_positions().contains(&q)
    }

    pub fn from_positions(a: Quadrant, b: Quadrant) -> Option<Layout> {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        Layout::ALL.into_iter().find(|l| l.target_positions() == [a, b])
    }

    pub fn name(self) -> &'static str {
        match self {
            Layout::TopRow => "top-row",
            Layout::BottomRow => "bottom-row",
            Layout::LeftCol => "left-col",
            Layout::RightCol => "right-col",
            Layout::MainDiag => "main-diag",
            Layout::AntiDiag => "anti-diag",
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Layout {
    type Err = FocusError;

    fn from_str(s: &str) -> Result<Self> {
        Layout::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| FocusError::InvalidArgument(format!("unknown layout {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayoutPolicy {
    /// Uniform over the six layouts, drawn per mosaic.
    Random,
    Fixed(Layout),
}

impl LayoutPolicy {
    /// The six fixed layouts followed by the random policy.
    pub const STUDY: [LayoutPolicy; 7] = [
        LayoutPolicy::Fixed(Layout::TopRow),
        LayoutPolicy::Fixed(Layout::BottomRow),
        LayoutPolicy::Fixed(Layout::LeftCol),
        LayoutPolicy::Fixed(Layout::RightCol),
        LayoutPolicy::Fixed(Layout::MainDiag),
        LayoutPolicy::Fixed(Layout::AntiDiag),
        LayoutPolicy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayoutPolicy::Random => "random",
            LayoutPolicy::Fixed(l) => l.name(),
        }
    }
}

impl fmt::Display for LayoutPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayoutPolicy {
    type Err = FocusError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            Ok(LayoutPolicy::Random)
        } else {
            s.parse().map(LayoutPolicy::Fixed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MosaicMode {
    Standard,
    TwoClass,
}

impl MosaicMode {
    pub fn name(self) -> &'static str {
        match self {
            MosaicMode::Standard => "standard",
            MosaicMode::TwoClass => "two-class",
        }
    }
}

impl FromStr for MosaicMode {
    type Err = FocusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(MosaicMode::Standard),
            "two-class" => Ok(MosaicMode::TwoClass),
            _ => Err(FocusError::InvalidArgument(format!("unknown mosaic mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuadrantSource {
    pub image_id: String,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Quadrants {
    #[serde(rename = "TL")]
    pub tl: QuadrantSource,
    #[serde(rename = "TR")]
    pub tr: QuadrantSource,
    #[serde(rename = "BL")]
    pub bl: QuadrantSource,
    #[serde(rename = "BR")]
    pub br: QuadrantSource,
}

impl Quadrants {
    pub fn get(&self, q: Quadrant) -> &QuadrantSource {
        match q {
            Quadrant::TL => &self.tl,
            Quadrant::TR => &self.tr,
            Quadrant::BL => &self.bl,
            Quadrant::BR => &self.br,
        }
    }

    pub fn get_mut(&mut self, q: Quadrant) -> &mut QuadrantSource {
        match q {
            Quadrant::TL => &mut self.tl,
            Quadrant::TR => &mut self.tr,
            Quadrant::BL => &mut self.bl,
            Quadrant::BR => &mut self.br,
        }
    }
}

/// Composition plan for one mosaic.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MosaicSpec {
    pub id: String,
    pub target_class: String,
    pub mode: MosaicMode,
    pub quadrants: Quadrants,
    pub width: u32,
    pub height: u32,
}

impl MosaicSpec {
    /// Checks the mosaic invariants and returns the implied layout.
    pub fn validate(&self) -> Result<Layout> {
        let bad = |msg: String| Err(FocusError::InvalidMosaic(format!("{}: {msg}", self.id)));
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(2) || !self.height.is_multiple_of(2) {
            return bad(format!("dimensions {}x{} must be even and non-zero", self.width, self.height));
        }
        let targets: Vec<Quadrant> = Quadrant::ALL
            .into_iter()
            .filter(|q| self.quadrants.get(*q).class == self.target_class)
            .collect();
        if targets.len() != 2 {
            return bad(format!("{} quadrants carry the target class, expected 2", targets.len()));
        }
        let layout = Layout::from_positions(targets[0], targets[1]).expect("two distinct quadrants");
        let [a, b] = layout.target_positions();
        if self.quadrants.get(a).image_id == self.quadrants.get(b).image_id {
            return bad("target images are not distinct".into());
        }
        let [o1, o2] = layout.outer_positions();
        if self.mode == MosaicMode::TwoClass && self.quadrants.get(o1).class != self.quadrants.get(o2).class {
            return bad("two-class mosaic has outer quadrants of different classes".into());
        }
        Ok(layout)
    }

    /// Target-class quadrants; assumes a valid spec.
    pub fn layout(&self) -> Layout {
        self.validate().expect("valid mosaic spec")
    }

    /// Outer class of a two-class mosaic.
    pub fn outer_class(&self) -> Option<&str> {
        let [o1, o2] = self.layout().outer_positions();
        let (c1, c2) = (&self.quadrants.get(o1).class, &self.quadrants.get(o2).class);
        (c1 == c2).then_some(c1.as_str())
    }

    pub fn file_name(&self) -> String {
        format!("{}.png", sanitize_id(&self.id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub target_class: String,
    pub mode: MosaicMode,
    pub quadrants: Quadrants,
}

/// The `manifest.json` document shared with explainers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MosaicManifest {
    pub version: String,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub width: u32,
    pub height: u32,
    pub mosaics: Vec<ManifestEntry>,
}

impl MosaicManifest {
    /// Assemble a manifest from specs, sorted by mosaic id.
    pub fn from_specs(specs: &[MosaicSpec], seed: u64, dataset_fingerprint: &str) -> Result<Self> {
        let first = specs
            .first()
            .ok_or_else(|| FocusError::InvalidMosaic("no mosaics to write".into()))?;
        let (width, height) = (first.width, first.height);
        let mut mosaics = Vec::with_capacity(specs.len());
        for s in specs {
            s.validate()?;
            if (s.width, s.height) != (width, height) {
                return Err(FocusError::InvalidMosaic(format!("{}: geometry differs within the set", s.id)));
            }
            mosaics.push(ManifestEntry {
                id: s.id.clone(),
                file: s.file_name(),
                target_class: s.target_class.clone(),
                mode: s.mode,
                quadrants: s.quadrants.clone(),
            });
        }
        mosaics.sort_by(|a, b| a.id.cmp(&b.id));
        if mosaics.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(FocusError::InvalidMosaic("duplicate mosaic ids".into()));
        }
        Ok(MosaicManifest {
            version: MANIFEST_VERSION.into(),
            seed,
            dataset_fingerprint: dataset_fingerprint.into(),
            width,
            height,
            mosaics,
        })
    }

    pub fn specs(&self) -> Vec<MosaicSpec> {
        self.mosaics
            .iter()
            .map(|m| MosaicSpec {
                id: m.id.clone(),
                target_class: m.target_class.clone(),
                mode: m.mode,
                quadrants: m.quadrants.clone(),
                width: self.width,
                height: self.height,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(FocusError::InvalidMosaic(format!("unsupported manifest version {:?}", self.version)));
        }
        let mut ids = BTreeSet::new();
        for spec in self.specs() {
            spec.validate()?;
            if !ids.insert(spec.id.clone()) {
                return Err(FocusError::InvalidMosaic(format!("duplicate mosaic id {:?}", spec.id)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| FocusError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FocusError::io(path, e))?;
        let manifest: MosaicManifest = serde_json::from_str(&text).map_err(|e| FocusError::json(path, e))?;
        manifest.validate()?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanConfig {
    pub per_class: usize,
    pub mode: MosaicMode,
    pub layout: LayoutPolicy,
    pub width: u32,
    pub height: u32,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            per_class: 100,
            mode: MosaicMode::Standard,
            layout: LayoutPolicy::Random,
            width: DEFAULT_SIDE,
            height: DEFAULT_SIDE,
        }
    }
}

/// Eval pools grouped by class, with the flattened pool used for
/// "any image of another class" draws.
struct Pools<'a> {
    classes: Vec<&'a str>,
    flat: Vec<&'a ImageRecord>,
    ranges: Vec<(usize, usize)>,
}

impl<'a> Pools<'a> {
    fn new(index: &'a DatasetIndex) -> Result<Self> {
        let mut flat = Vec::new();
        let mut ranges = Vec::new();
        let mut short = Vec::new();
        for class in &index.classes {
            let start = flat.len();
            match index.eligible_pool(class) {
                Ok(pool) if pool.len() >= 2 => flat.extend(pool),
                _ => short.push(class.clone()),
            }
            ranges.push((start, flat.len()));
        }
        if !short.is_empty() {
            return Err(FocusError::InsufficientImages(short));
        }
        Ok(Pools {
            classes: index.classes.iter().map(String::as_str).collect(),
            flat,
            ranges,
        })
    }

    fn class_pool(&self, c: usize) -> &[&'a ImageRecord] {
        let (s, e) = self.ranges[c];
        &self.flat[s..e]
    }

    /// Two distinct records from one class.
    fn pick_two<R: Rng>(&self, c: usize, rng: &mut R) -> [&'a ImageRecord; 2] {
        let pool = self.class_pool(c);
        let a = rng.random_range(0..pool.len());
        let mut b = rng.random_range(0..pool.len() - 1);
        if b >= a {
            b += 1;
        }
        [pool[a], pool[b]]
    }

    /// Two distinct records drawn uniformly from every class except `c`.
    fn pick_two_outside<R: Rng>(&self, c: usize, rng: &mut R) -> [&'a ImageRecord; 2] {
        let (s, e) = self.ranges[c];
        let n = self.flat.len() - (e - s);
        let map = |i: usize| if i < s { i } else { i + (e - s) };
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        [self.flat[map(a)], self.flat[map(b)]]
    }
}

pub fn mosaic_id(class: &str, k: usize) -> String {
    format!("{class}/{k:05}")
}

/// Plan `per_class` mosaics for every class of the index.
pub fn plan_mosaics(index: &DatasetIndex, config: &PlanConfig, seed: u64) -> Result<Vec<MosaicSpec>> {
    if config.width == 0 || config.height == 0 || !config.width.is_multiple_of(2) || !config.height.is_multiple_of(2) {
        return Err(FocusError::InvalidArgument(format!(
            "mosaic dimensions {}x{} must be even and non-zero",
            config.width, config.height
        )));
    }
    if index.num_classes() < 2 {
        return Err(FocusError::Dataset("mosaics need at least two classes".into()));
    }
    let pools = Pools::new(index)?;
    let fingerprint = index.fingerprint();
    let source = |r: &ImageRecord| QuadrantSource {
        image_id: r.id.clone(),
        class: r.class_label.clone(),
    };

    let mut specs = Vec::with_capacity(config.per_class * pools.classes.len());
    for (ci, class) in pools.classes.iter().enumerate() {
        for k in 0..config.per_class {
            let id = mosaic_id(class, k);
            let mut rng = substream(seed, &fingerprint, &id);
            let targets = pools.pick_two(ci, &mut rng);
            let outers = match config.mode {
                MosaicMode::Standard => pools.pick_two_outside(ci, &mut rng),
                MosaicMode::TwoClass => {
                    let mut oc = rng.random_range(0..pools.classes.len() - 1);
                    if oc >= ci {
                        oc += 1;
                    }
                    pools.pick_two(oc, &mut rng)
                }
            };
            let layout = match config.layout {
                LayoutPolicy::Random => Layout::ALL[rng.random_range(0..Layout::ALL.len())],
                LayoutPolicy::Fixed(l) => l,
            };
            let placeholder = QuadrantSource {
                image_id: String::new(),
                class: String::new(),
            };
            let mut quadrants = Quadrants {
                tl: placeholder.clone(),
                tr: placeholder.clone(),
                bl: placeholder.clone(),
                br: placeholder,
            };
            for (q, r) in layout.target_positions().into_iter().zip(targets) {
                *quadrants.get_mut(q) = source(r);
            }
            for (q, r) in layout.outer_positions().into_iter().zip(outers) {
                *quadrants.get_mut(q) = source(r);
            }
            specs.push(MosaicSpec {
                id,
                target_class: class.to_string(),
                mode: config.mode,
                quadrants,
                width: config.width,
                height: config.height,
            });
        }
    }
    Ok(specs)
}

/// Resize `src` to cover `qw × qh` (shorter side onto the quadrant side for
/// square quadrants), bilinearly, then center-crop to exactly `qw × qh`.
///
/// Pixel centers are aligned (`src = (dst + 0.5) · scale − 0.5`), so a source
/// that already has the quadrant size is copied unchanged.
pub fn fit_quadrant(src: &RgbImage, qw: u32, qh: u32) -> RgbImage {
    let (sw, sh) = src.dimensions();
    let scale = f64::max(qw as f64 / sw as f64, qh as f64 / sh as f64);
    let rw = ((sw as f64 * scale).round() as u32).max(qw);
    let rh = ((sh as f64 * scale).round() as u32).max(qh);
    let (ox, oy) = ((rw - qw) / 2, (rh - qh) / 2);
    let (fx, fy) = (sw as f64 / rw as f64, sh as f64 / rh as f64);

    let axis = |d: u32, off: u32, f: f64, n: u32| -> (u32, u32, f64) {
        let s = ((d + off) as f64 + 0.5) * f - 0.5;
        let s = s.clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as u32;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<(u32, u32, f64)> = (0..qw).map(|x| axis(x, ox, fx, sw)).collect();

    let mut out = RgbImage::new(qw, qh);
    for y in 0..qh {
        let (y0, y1, wy) = axis(y, oy, fy, sh);
        for (x, &(x0, x1, wx)) in cols.iter().enumerate() {
            let p00 = src.get_pixel(x0, y0).0;
            let p10 = src.get_pixel(x1, y0).0;
            let p01 = src.get_pixel(x0, y1).0;
            let p11 = src.get_pixel(x1, y1).0;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - wx) + p10[c] as f64 * wx;
                let bottom = p01[c] as f64 * (1.0 - wx) + p11[c] as f64 * wx;
                let v = top * (1.0 - wy) + bottom * wy;
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x as u32, y, Rgb(px));
        }
    }
    out
}

fn load_source(index: &DatasetIndex, image_id: &str) -> Result<RgbImage> {
    let record = index
        .get(image_id)
        .ok_or_else(|| FocusError::Dataset(format!("image {image_id:?} is not in the index")))?;
    let path = index.resolve(record);
    image::open(&path)
        .map(|img| img.to_rgb8())
        .map_err(|source| FocusError::Image {
            what: format!("{image_id} ({})", path.display()),
            source,
        })
}

/// Render a mosaic as an 8-bit RGB raster.
pub fn compose_mosaic(spec: &MosaicSpec, index: &DatasetIndex) -> Result<RgbImage> {
    spec.validate()?;
    let (qw, qh) = (spec.width / 2, spec.height / 2);
    let mut canvas = RgbImage::new(spec.width, spec.height);
    for q in Quadrant::ALL {
        let src = load_source(index, &spec.quadrants.get(q).image_id)?;
        let tile = fit_quadrant(&src, qw, qh);
        let (r0, _, c0, _) = q.region(spec.width, spec.height);
        image::imageops::replace(&mut canvas, &tile, c0 as i64, r0 as i64);
    }
    Ok(canvas)
}

/// Compose every spec into `out_dir` as `<id>.png` and write `manifest.json`.
///
/// On failure an `INCOMPLETE` marker is left in `out_dir` and no manifest is
/// written.
pub fn emit_mosaic_set(
    specs: &[MosaicSpec],
    index: &DatasetIndex,
    out_dir: &Path,
    seed: u64,
    exec: Execution,
) -> Result<MosaicManifest> {
    let manifest = MosaicManifest::from_specs(specs, seed, &index.fingerprint())?;
    fs::create_dir_all(out_dir).map_err(|e| FocusError::io(out_dir, e))?;
    let marker = out_dir.join(INCOMPLETE_MARKER);
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(&marker, "composition in progress\n").map_err(|e| FocusError::io(&marker, e))?;
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| FocusError::io(&manifest_path, e))?;
    }

    let result = exec
        .try_map(specs, |spec| {
            let img = compose_mosaic(spec, index)?;
            let path: PathBuf = out_dir.join(spec.file_name());
            img.save_with_format(&path, image::ImageFormat::Png)
                .map_err(|source| FocusError::Image {
                    what: path.display().to_string(),
                    source,
                })
        })
        .and_then(|_| manifest.save(&manifest_path));

    match result {
        Ok(()) => {
            fs::remove_file(&marker).map_err(|e| FocusError::io(&marker, e))?;
            Ok(manifest)
        }
        Err(e) => {
            let _ = fs::write(&marker, format!("composition failed: {e}\n"));
            Err(e)
        }
    }
}
