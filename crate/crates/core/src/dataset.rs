//! Labeled image dataset discovery and split bookkeeping.
//!
//! Two ingestion layouts are supported:
//!
//! * a directory tree with one subdirectory per class (optionally nested
//!   under `train/` and `eval/`), and
//! * a CSV manifest with header `path,label,split`.
//!
//! Record ids are `<class>/<file name>`, so an index built from two copies of
//! the same dataset on different machines is identical apart from `root`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FocusError, Result};
use crate::exec::Execution;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Relative to the index root unless absolute.
    pub path: String,
    pub class_label: String,
    pub split: Split,
}

/// How records are assigned to the train and eval splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitRule {
    /// Every image is eligible for mosaics.
    AllEval,
    /// `root/train/<class>/*` and `root/eval/<class>/*`.
    Subdirectories,
    /// The first `n` files of each class (by file name) are training images.
    FirstPerClass(usize),
    /// Explicit record ids (`<class>/<file>`) that belong to the training split.
    TrainList(BTreeSet<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// What a directory scan saw, including files that were dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanSummary {
    pub scanned: usize,
    pub skipped: Vec<SkippedFile>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub records: Vec<ImageRecord>,
}

/// Hashed subset of the index; excludes `root` so the fingerprint is
/// machine-independent.
#[derive(Serialize)]
struct FingerprintView<'a> {
    classes: &'a [String],
    records: &'a [ImageRecord],
}

struct Candidate {
    path: PathBuf,
    rel: String,
    class_label: String,
    file_name: String,
    split_hint: Option<Split>,
}

impl DatasetIndex {
    /// Build an index from records, enforcing the index invariants.
    pub fn from_records(root: impl Into<PathBuf>, mut records: Vec<ImageRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let mut seen = BTreeSet::new();
        for r in &records {
            if r.class_label.is_empty() {
                return Err(FocusError::Dataset(format!("record {:?} has an empty class label", r.id)));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(FocusError::Dataset(format!("duplicate record id {:?}", r.id)));
            }
        }
        let classes: BTreeSet<String> = records.iter().map(|r| r.class_label.clone()).collect();
        Ok(DatasetIndex {
            root: root.into(),
            classes: classes.into_iter().collect(),
            records,
        })
    }

    /// Scan a class-per-directory tree.
    pub fn build(root: &Path, rule: &SplitRule) -> Result<(Self, ScanSummary)> {
        Self::build_with(root, rule, Execution::default())
    }

    pub fn build_with(root: &Path, rule: &SplitRule, exec: Execution) -> Result<(Self, ScanSummary)> {
        let candidates = match rule {
            SplitRule::Subdirectories => {
                let mut all = Vec::new();
                for (dir, split) in [("train", Split::Train), ("eval", Split::Eval)] {
                    let sub = root.join(dir);
                    if sub.is_dir() {
                        all.extend(scan_class_dirs(&sub, &format!("{dir}/"), Some(split))?);
                    }
                }
                if all.is_empty() {
                    return Err(FocusError::Dataset(format!(
                        "{} has neither train/ nor eval/ class directories",
                        root.display()
                    )));
                }
                all
            }
            _ => scan_class_dirs(root, "", None)?,
        };

        let decoded = exec.map(&candidates, |c| check_decodable(&c.path));
        let mut summary = ScanSummary {
            scanned: candidates.len(),
            skipped: Vec::new(),
        };
        let mut per_class: BTreeMap<String, Vec<&Candidate>> = BTreeMap::new();
        let mut class_dirs: BTreeSet<String> = BTreeSet::new();
        for (c, ok) in candidates.iter().zip(decoded) {
            class_dirs.insert(c.class_label.clone());
            match ok {
                Ok(()) => per_class.entry(c.class_label.clone()).or_default().push(c),
                Err(reason) => {
                    warn!("skipping undecodable image {}: {}", c.path.display(), reason);
                    summary.skipped.push(SkippedFile {
                        path: c.path.clone(),
                        reason,
                    });
                }
            }
        }
        if let Some(empty) = class_dirs.iter().find(|c| !per_class.contains_key(*c)) {
            return Err(FocusError::EmptyClass(empty.clone()));
        }
        if !summary.skipped.is_empty() {
            warn!(
                "{} of {} image files could not be decoded and were skipped",
                summary.skipped.len(),
                summary.scanned
            );
        }

        let mut records = Vec::new();
        for (class_label, mut files) in per_class {
            files.sort_by(|a, b| a.file_name.cmp(&b.file_name).then(a.rel.cmp(&b.rel)));
            for (i, c) in files.into_iter().enumerate() {
                let id = format!("{}/{}", class_label, c.file_name);
                let split = match rule {
                    SplitRule::AllEval => Split::Eval,
                    SplitRule::Subdirectories => c.split_hint.unwrap_or(Split::Eval),
                    SplitRule::FirstPerClass(n) => {
                        if i < *n {
                            Split::Train
                        } else {
                            Split::Eval
                        }
                    }
                    SplitRule::TrainList(ids) => {
                        if ids.contains(&id) {
                            Split::Train
                        } else {
                            Split::Eval
                        }
                    }
                };
                records.push(ImageRecord {
                    id,
                    path: c.rel.clone(),
                    class_label: class_label.clone(),
                    split,
                });
            }
        }
        let index = Self::from_records(root, records)?;
        Ok((index, summary))
    }

    /// Read a `path,label,split` CSV manifest. Relative paths resolve against
    /// the manifest's directory. Rows are not decoded here.
    pub fn from_csv(csv_path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            path: String,
            label: String,
            split: String,
        }
        let mut reader = csv::Reader::from_path(csv_path).map_err(|e| FocusError::csv(csv_path, e))?;
        let headers = reader.headers().map_err(|e| FocusError::csv(csv_path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(FocusError::Dataset(format!(
                "{}: expected header path,label,split",
                csv_path.display()
            )));
        }
        let mut records = Vec::new();
        for row in reader.deserialize::<Row>() {
            let row = row.map_err(|e| FocusError::csv(csv_path, e))?;
            let split = match row.split.trim() {
                "train" => Split::Train,
                "eval" => Split::Eval,
                other => {
                    return Err(FocusError::Dataset(format!("unknown split {other:?} for {}", row.path)));
                }
            };
            let file_name = Path::new(&row.path)
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .ok_or_else(|| FocusError::Dataset(format!("bad path {:?}", row.path)))?;
            records.push(ImageRecord {
                id: format!("{}/{}", row.label, file_name),
                path: row.path,
                class_label: row.label,
                split,
            });
        }
        let root = csv_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_records(root, records)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records
            .binary_search_by(|r| r.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Eval-split records of one class; training images never enter a mosaic.
    pub fn eligible_pool(&self, class_label: &str) -> Result<Vec<&ImageRecord>> {
        if self.classes.binary_search_by(|c| c.as_str().cmp(class_label)).is_err() {
            return Err(FocusError::UnknownClass(class_label.to_string()));
        }
        let pool: Vec<&ImageRecord> = self
            .records
            .iter()
            .filter(|r| r.class_label == class_label && r.split == Split::Eval)
            .collect();
        if pool.is_empty() {
            return Err(FocusError::NoEvalSamples(class_label.to_string()));
        }
        Ok(pool)
    }

    pub fn count_split(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    /// Hex SHA-256 over the canonical JSON of classes and records.
    pub fn fingerprint(&self) -> String {
        let view = FingerprintView {
            classes: &self.classes,
            records: &self.records,
        };
        let bytes = serde_json::to_vec(&view).expect("index serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("index serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| FocusError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FocusError::io(path, e))?;
        let raw: DatasetIndex = serde_json::from_str(&text).map_err(|e| FocusError::json(path, e))?;
        let rebuilt = Self::from_records(raw.root.clone(), raw.records.clone())?;
        if rebuilt.classes != raw.classes {
            return Err(FocusError::Dataset(format!(
                "{}: class list does not match record labels",
                path.display()
            )));
        }
        Ok(rebuilt)
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| FocusError::io(dir, e))? {
        let entry = entry.map_err(|e| FocusError::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        entries.push(entry.path());
    }
    entries.sort();
    Ok(entries)
}

fn scan_class_dirs(dir: &Path, rel_prefix: &str, split_hint: Option<Split>) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    let mut n_classes = 0;
    for class_dir in sorted_entries(dir)? {
        if !class_dir.is_dir() {
            continue;
        }
        n_classes += 1;
        let class_label = class_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut found = 0;
        for file in sorted_entries(&class_dir)? {
            if !file.is_file() || !is_image_file(&file) {
                continue;
            }
            found += 1;
            let file_name = file.file_name().unwrap().to_string_lossy().into_owned();
            out.push(Candidate {
                rel: format!("{rel_prefix}{class_label}/{file_name}"),
                path: file,
                class_label: class_label.clone(),
                file_name,
                split_hint,
            });
        }
        if found == 0 {
            return Err(FocusError::EmptyClass(class_label));
        }
    }
    if n_classes == 0 {
        return Err(FocusError::Dataset(format!("{} contains no class directories", dir.display())));
    }
    Ok(out)
}

fn check_decodable(path: &Path) -> std::result::Result<(), String> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?;
    reader.decode().map(|_| ()).map_err(|e| e.to_string())
}
