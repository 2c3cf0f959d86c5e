//! Scan and volume data model, disk ingest and preprocessing.

pub mod io;
mod manifest;
pub mod preprocess;
mod stats;
mod types;

use std::path::Path;

use rayon::prelude::*;

pub use manifest::{Manifest, ManifestEntry, MANIFEST_FILE};
pub use preprocess::{
    crop_resize_normalize, filter_slices, pad_volume, prep_root_for, prepare_dataset,
    segment_brain, BBox, IntensityRange, LengthPolicy, PrepConfig,
};
pub use stats::{dataset_stats, SliceStats};
pub use types::{Label, Modality, Scan, Slice, Volume, PADDING_VALUE};

use crate::error::Result;

/// Loads every scan of a preprocessed root and pads each modality to its
/// configured length.
pub fn load_prepared_dataset(
    root: &Path,
    lengths: [usize; 4],
    policy: LengthPolicy,
) -> Result<Vec<Scan>> {
    let manifest = Manifest::load(root)?;
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let scan = io::load_prepared_scan(e, root)?;
            pad_scan(&scan, lengths, policy)
        })
        .collect()
}

pub fn pad_scan(scan: &Scan, lengths: [usize; 4], policy: LengthPolicy) -> Result<Scan> {
    let mut vols = Vec::with_capacity(4);
    for (v, &t) in scan.volumes().iter().zip(&lengths) {
        vols.push(pad_volume(v, t, policy)?);
    }
    Scan::new(
        scan.scan_id.clone(),
        vols.try_into().expect("four volumes"),
        scan.label,
    )
}
