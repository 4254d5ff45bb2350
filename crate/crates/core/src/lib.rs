//! Mosaic-based evaluation of feature-attribution methods.
//!
//! The crate covers the whole offline pipeline: indexing a labeled image
//! dataset, planning and composing 2×2 mosaics, exchanging attribution maps
//! with external explainers through `.foc1` files, scoring each map with the
//! Focus metric, and summarising runs (distributions, randomization checks,
//! layout studies, class-pair bias mining).
//!
//! Per-mosaic work runs on rayon when the `parallel` feature is enabled
//! (the default). Every batch entry point also accepts an explicit
//! [`Execution`] so the sequential path stays reachable; outputs are
//! identical either way.

pub mod attribution;
pub mod bias;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod explainer;
pub mod focus;
pub mod mosaic;
pub mod rng;
pub mod sanity;

pub use attribution::{read_map, write_map, AttributionMap, FormatError, ValidationReport};
pub use dataset::{DatasetIndex, ImageRecord, ScanSummary, Split, SplitRule};
pub use error::{FocusError, Result};
pub use exec::Execution;
pub use focus::{aggregate, compute_focus, FocusDistribution, FocusResult};
pub use mosaic::{Layout, LayoutPolicy, MosaicManifest, MosaicMode, MosaicSpec, Quadrant};

/// Replace path separators so an id can be used as a single file name.
pub fn sanitize_id(id: &str) -> String {
    id.replace(['/', '\\'], "__")
}
