//! `.foc1` attribution-map files.
//!
//! Layout (all little-endian):
//!
//! | offset | size      | field                       |
//! |--------|-----------|-----------------------------|
//! | 0      | 4         | magic `FOC1`                |
//! | 4      | 4         | width (u32)                 |
//! | 8      | 4         | height (u32)                |
//! | 12     | 4         | reserved (u32, must be 0)   |
//! | 16     | 4·W·H     | f32 relevance, row-major, top row first |
//!
//! Values are stored exactly as the explainer produced them; negative
//! relevance is clamped later by the scorer, not here.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::error::{FocusError, Result};
use crate::exec::Execution;
use crate::mosaic::MosaicManifest;
use crate::sanitize_id;

pub const MAGIC: [u8; 4] = *b"FOC1";
pub const HEADER_LEN: usize = 16;
pub const EXTENSION: &str = "foc1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("file shorter than the 16-byte header ({0} bytes)")]
    TruncatedHeader(usize),
    #[error("reserved header field is {0:#x}, expected 0")]
    ReservedNonZero(u32),
    #[error("zero-sized map {width}x{height}")]
    EmptyMap { width: u32, height: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("size mismatch with header: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: u64, found: u64 },
    #[error("non-finite relevance at index {0}")]
    NonFinite(usize),
}

impl FormatError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic(_) => "bad-magic",
            FormatError::TruncatedHeader(_) => "truncated-header",
            FormatError::ReservedNonZero(_) => "reserved-nonzero",
            FormatError::EmptyMap { .. } => "empty-map",
            FormatError::TruncatedPayload { .. } => "truncated-payload",
            FormatError::SizeMismatch { .. } => "size-mismatch",
            FormatError::NonFinite(_) => "non-finite",
        }
    }
}

/// Dense per-pixel relevance aligned to one mosaic.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl AttributionMap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> std::result::Result<Self, FormatError> {
        let map = AttributionMap { width, height, values };
        map.check()?;
        Ok(map)
    }

    pub fn filled(width: u32, height: u32, value: f32) -> Self {
        AttributionMap {
            width,
            height,
            values: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> f32) -> Self {
        let mut values = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        AttributionMap { width, height, values }
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn row(&self, y: u32) -> &[f32] {
        let w = self.width as usize;
        &self.values[y as usize * w..(y as usize + 1) * w]
    }

    pub fn check(&self) -> std::result::Result<(), FormatError> {
        if self.width == 0 || self.height == 0 {
            return Err(FormatError::EmptyMap {
                width: self.width,
                height: self.height,
            });
        }
        let expected = self.width as u64 * self.height as u64;
        if self.values.len() as u64 != expected {
            return Err(FormatError::SizeMismatch {
                expected: expected * 4,
                found: self.values.len() as u64 * 4,
            });
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite(i));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> std::result::Result<Vec<u8>, FormatError> {
        self.check()?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::TruncatedHeader(bytes.len()));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let reserved = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        if reserved != 0 {
            return Err(FormatError::ReservedNonZero(reserved));
        }
        if width == 0 || height == 0 {
            return Err(FormatError::EmptyMap { width, height });
        }
        // u32·u32·4 fits in u128 and cannot wrap.
        let expected = width as u128 * height as u128 * 4;
        let found = (bytes.len() - HEADER_LEN) as u128;
        if found < expected {
            return Err(FormatError::TruncatedPayload {
                expected: expected.min(u64::MAX as u128) as u64,
                found: found as u64,
            });
        }
        if found > expected {
            return Err(FormatError::SizeMismatch {
                expected: expected as u64,
                found: found as u64,
            });
        }
        let values: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite(i));
        }
        Ok(AttributionMap { width, height, values })
    }
}

pub fn write_map(map: &AttributionMap, path: &Path) -> Result<()> {
    let bytes = map.to_bytes().map_err(|source| FocusError::Format {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, bytes).map_err(|e| FocusError::io(path, e))
}

pub fn read_map(path: &Path) -> Result<AttributionMap> {
    let bytes = fs::read(path).map_err(|e| FocusError::io(path, e))?;
    AttributionMap::from_bytes(&bytes).map_err(|source| FocusError::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// `<dir>/<sanitized mosaic id>.foc1`
pub fn map_path(dir: &Path, mosaic_id: &str) -> PathBuf {
    dir.join(format!("{}.{EXTENSION}", sanitize_id(mosaic_id)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum MapStatus {
    Valid,
    Missing,
    Corrupt { code: String, detail: String },
    DimensionMismatch { expected: (u32, u32), found: (u32, u32) },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MapCheck {
    pub mosaic_id: String,
    #[serde(flatten)]
    pub status: MapStatus,
}

/// Per-mosaic status of an attribution directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub complete: bool,
    pub total: usize,
    pub valid: usize,
    pub entries: Vec<MapCheck>,
}

impl ValidationReport {
    pub fn problems(&self) -> impl Iterator<Item = &MapCheck> {
        self.entries.iter().filter(|e| e.status != MapStatus::Valid)
    }

    pub fn missing_ids(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.status == MapStatus::Missing)
            .map(|e| e.mosaic_id.as_str())
            .collect()
    }

    /// One line per problem, for logs and error messages.
    pub fn describe_problems(&self, limit: usize) -> String {
        let mut lines: Vec<String> = self
            .problems()
            .take(limit)
            .map(|e| match &e.status {
                MapStatus::Missing => format!("{}: missing", e.mosaic_id),
                MapStatus::Corrupt { code, detail } => format!("{}: corrupt ({code}: {detail})", e.mosaic_id),
                MapStatus::DimensionMismatch { expected, found } => format!(
                    "{}: dimension mismatch (expected {}x{}, found {}x{})",
                    e.mosaic_id, expected.0, expected.1, found.0, found.1
                ),
                MapStatus::Valid => unreachable!(),
            })
            .collect();
        let n = self.total - self.valid;
        if n > limit {
            lines.push(format!("... and {} more", n - limit));
        }
        lines.join("\n")
    }
}

fn check_one(path: &Path, expected: (u32, u32)) -> MapStatus {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return MapStatus::Missing,
        Err(e) => {
            return MapStatus::Corrupt {
                code: "io".into(),
                detail: e.to_string(),
            }
        }
    };
    match AttributionMap::from_bytes(&bytes) {
        Ok(map) if (map.width, map.height) == expected => MapStatus::Valid,
        Ok(map) => MapStatus::DimensionMismatch {
            expected,
            found: (map.width, map.height),
        },
        Err(e) => MapStatus::Corrupt {
            code: e.code().into(),
            detail: e.to_string(),
        },
    }
}

pub fn validate_run(manifest: &MosaicManifest, dir: &Path) -> ValidationReport {
    validate_run_with(manifest, dir, Execution::default())
}

pub fn validate_run_with(manifest: &MosaicManifest, dir: &Path, exec: Execution) -> ValidationReport {
    let expected = (manifest.width, manifest.height);
    let entries = exec.map(&manifest.mosaics, |m| MapCheck {
        mosaic_id: m.id.clone(),
        status: check_one(&map_path(dir, &m.id), expected),
    });
    let valid = entries.iter().filter(|e| e.status == MapStatus::Valid).count();
    ValidationReport {
        complete: valid == entries.len(),
        total: entries.len(),
        valid,
        entries,
    }
}
