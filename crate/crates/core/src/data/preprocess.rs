//! Slice-level preprocessing: brain segmentation, slice filtering, crop,
//! resize, intensity normalization and padding.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{load_scan, write_prepared_volume};
use super::{Manifest, ManifestEntry, Modality, Slice, Volume, PADDING_VALUE};
use crate::error::{Error, Result};

pub const PREP_META_FILE: &str = "prep_meta.json";
const OTSU_BINS: usize = 256;

/// Axis-aligned box with exclusive `bottom`/`right` edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.bottom.saturating_sub(self.top)
    }

    pub fn width(&self) -> usize {
        self.right.saturating_sub(self.left)
    }

    pub fn full(height: usize, width: usize) -> Self {
        BBox {
            top: 0,
            left: 0,
            bottom: height,
            right: width,
        }
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            top: self.top.min(other.top),
            left: self.left.min(other.left),
            bottom: self.bottom.max(other.bottom),
            right: self.right.max(other.right),
        }
    }
}

/// Per-volume intensity range mapped linearly onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityRange {
    pub min: f64,
    pub max: f64,
}

impl IntensityRange {
    pub const NORMALIZED: IntensityRange = IntensityRange {
        min: -1.0,
        max: 1.0,
    };

    fn map(&self, v: f64) -> f64 {
        if self.max <= self.min {
            return -1.0;
        }
        ((v - self.min) / (self.max - self.min) * 2.0 - 1.0).clamp(-1.0, 1.0)
    }
}

/// What to do with a volume longer than its padded length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthPolicy {
    Strict,
    /// Keep the central `t` slices and log a warning.
    Truncate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    /// Slices whose largest foreground component covers less than this
    /// fraction of the image are dropped.
    pub min_area_frac: f64,
    pub image_size: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            min_area_frac: 0.02,
            image_size: 224,
        }
    }
}

/// Otsu's threshold over a 256-bin histogram spanning `[min, max]`.
/// Returns the last background bin, or `None` for constant images.
fn otsu_bin(gray: &ArrayView2<f64>, lo: f64, hi: f64) -> Option<usize> {
    if !(hi > lo) {
        return None;
    }
    let mut hist = [0usize; OTSU_BINS];
    for &v in gray.iter() {
        hist[bin_of(v, lo, hi)] += 1;
    }
    let total = gray.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (k, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += c as f64;
        sum0 += k as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best.0 {
            best = (between, k);
        }
    }
    best.0.is_finite().then_some(best.1)
}

fn bin_of(v: f64, lo: f64, hi: f64) -> usize {
    (((v - lo) / (hi - lo)) * OTSU_BINS as f64)
        .floor()
        .clamp(0.0, (OTSU_BINS - 1) as f64) as usize
}

/// Foreground mask by Otsu thresholding; `None` when the slice has no contrast.
pub fn foreground_mask(gray: &ArrayView2<f64>) -> Option<Array2<bool>> {
    let lo = gray.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = gray.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let k = otsu_bin(gray, lo, hi)?;
    Some(gray.mapv(|v| bin_of(v, lo, hi) > k))
}

/// Largest 4-connected component of `mask` as `(area, bbox)`.
pub fn largest_component(mask: &Array2<bool>) -> Option<(usize, BBox)> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut best: Option<(usize, BBox)> = None;
    let mut queue = VecDeque::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if !mask[[r0, c0]] || seen[[r0, c0]] {
                continue;
            }
            seen[[r0, c0]] = true;
            queue.push_back((r0, c0));
            let mut area = 0;
            let mut bb = BBox {
                top: r0,
                left: c0,
                bottom: r0 + 1,
                right: c0 + 1,
            };
            while let Some((r, c)) = queue.pop_front() {
                area += 1;
                bb.top = bb.top.min(r);
                bb.left = bb.left.min(c);
                bb.bottom = bb.bottom.max(r + 1);
                bb.right = bb.right.max(c + 1);
                let neighbors = [
                    (r.wrapping_sub(1), c),
                    (r + 1, c),
                    (r, c.wrapping_sub(1)),
                    (r, c + 1),
                ];
                for (nr, nc) in neighbors {
                    if nr < h && nc < w && mask[[nr, nc]] && !seen[[nr, nc]] {
                        seen[[nr, nc]] = true;
                        queue.push_back((nr, nc));
                    }
                }
            }
            if best.is_none_or(|(a, _)| area > a) {
                best = Some((area, bb));
            }
        }
    }
    best
}

/// Bounding box of the brain region in a raw slice, or `None` when the
/// largest foreground component is smaller than `min_area_frac` of the image.
pub fn segment_brain(slice: &Slice, min_area_frac: f64) -> Option<BBox> {
    let gray = slice.gray();
    let mask = foreground_mask(&gray)?;
    let (area, bbox) = largest_component(&mask)?;
    let needed = min_area_frac * gray.len() as f64;
    (area as f64 >= needed).then_some(bbox)
}

/// Drops slices without a sufficiently large brain region, keeping order.
pub fn filter_slices(volume: &Volume, min_area_frac: f64) -> Result<Volume> {
    let kept: Vec<Slice> = volume
        .real_slices()
        .iter()
        .filter(|s| segment_brain(s, min_area_frac).is_some())
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyVolume {
            modality: volume.modality,
        });
    }
    Ok(Volume::new(volume.modality, kept))
}

/// Bilinear resize with half-pixel centers. Same-size resizes are exact
/// copies and 2x downsampling of a nearest-upsampled image is exact.
pub fn bilinear_resize(src: &ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ys = axis(out_h, in_h);
    let xs = axis(out_w, in_w);
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let (y0, y1, fy) = ys[r];
        let (x0, x1, fx) = xs[c];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Crops to `bbox`, resizes to `size`x`size`, maps `range` onto `[-1, 1]` and
/// replicates the result into three channels.
pub fn crop_resize_normalize(
    slice: &Slice,
    bbox: BBox,
    range: IntensityRange,
    size: usize,
) -> Result<Slice> {
    if bbox.height() == 0 || bbox.width() == 0 {
        return Err(Error::DegenerateRegion {
            height: bbox.height(),
            width: bbox.width(),
        });
    }
    if bbox.bottom > slice.height() || bbox.right > slice.width() {
        return Err(Error::InvalidParameter(format!(
            "crop {bbox:?} exceeds slice {}x{}",
            slice.height(),
            slice.width()
        )));
    }
    let gray = slice.gray();
    let crop = gray.slice(s![bbox.top..bbox.bottom, bbox.left..bbox.right]);
    let resized = bilinear_resize(&crop, size, size).mapv(|v| range.map(v));
    let mut out = Array3::zeros((3, size, size));
    for mut ch in out.outer_iter_mut() {
        ch.assign(&resized);
    }
    Ok(Slice::new(out))
}

/// Appends constant `-1` slices up to `t`. Over-long volumes fail under
/// [`LengthPolicy::Strict`] and are center-truncated otherwise.
pub fn pad_volume(volume: &Volume, t: usize, policy: LengthPolicy) -> Result<Volume> {
    let l = volume.true_length();
    let mut real = volume.real_slices().to_vec();
    let mut true_length = l;
    if l > t {
        match policy {
            LengthPolicy::Strict => {
                return Err(Error::VolumeTooLong {
                    modality: volume.modality,
                    length: l,
                    max: t,
                })
            }
            LengthPolicy::Truncate => {
                let start = (l - t) / 2;
                log::warn!(
                    "{} volume of {l} slices truncated to central {t}",
                    volume.modality
                );
                real = real[start..start + t].to_vec();
                true_length = t;
            }
        }
    }
    let (c, h, w) = volume.slice_dim().ok_or(Error::EmptyVolume {
        modality: volume.modality,
    })?;
    real.resize_with(t, || Slice::filled(c, h, w, PADDING_VALUE));
    Volume::with_true_length(volume.modality, real, true_length)
}

/// Reproducibility record for one preprocessed volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumePrep {
    pub bbox: BBox,
    pub range: IntensityRange,
    /// Indices (into the raw stack) of the slices that survived filtering.
    pub kept: Vec<usize>,
    pub raw_count: usize,
}

/// Full per-volume pipeline: filter, union crop box, per-volume range,
/// crop/resize/normalize.
pub fn preprocess_volume(volume: &Volume, cfg: &PrepConfig) -> Result<(Volume, VolumePrep)> {
    let mut kept = Vec::new();
    let mut bbox: Option<BBox> = None;
    for (i, s) in volume.real_slices().iter().enumerate() {
        if let Some(b) = segment_brain(s, cfg.min_area_frac) {
            kept.push(i);
            bbox = Some(bbox.map_or(b, |u| u.union(&b)));
        }
    }
    let bbox = bbox.ok_or(Error::EmptyVolume {
        modality: volume.modality,
    })?;
    let mut range = IntensityRange {
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
    };
    for &i in &kept {
        let g = volume.slices[i].gray();
        for &v in g.slice(s![bbox.top..bbox.bottom, bbox.left..bbox.right]) {
            range.min = range.min.min(v);
            range.max = range.max.max(v);
        }
    }
    let slices = kept
        .iter()
        .map(|&i| crop_resize_normalize(&volume.slices[i], bbox, range, cfg.image_size))
        .collect::<Result<Vec<_>>>()?;
    let meta = VolumePrep {
        bbox,
        range,
        kept,
        raw_count: volume.true_length(),
    };
    Ok((Volume::new(volume.modality, slices), meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepMeta {
    pub min_area_frac: f64,
    pub image_size: usize,
    pub threshold: String,
    pub encoding: String,
    pub source_root: PathBuf,
    pub volumes: BTreeMap<String, BTreeMap<Modality, VolumePrep>>,
}

/// `d/` -> `d_prep/`.
pub fn prep_root_for(root: &Path) -> PathBuf {
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    root.with_file_name(format!("{name}_prep"))
}

/// Preprocesses every scan of `manifest` into `out_root` (same layout) and
/// writes the post-filter manifest plus `prep_meta.json`.
pub fn prepare_dataset(manifest: &Manifest, out_root: &Path, cfg: &PrepConfig) -> Result<Manifest> {
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let results: Vec<(ManifestEntry, BTreeMap<Modality, VolumePrep>)> = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let scan = load_scan(entry, &manifest.root)?;
            let mut counts = BTreeMap::new();
            let mut metas = BTreeMap::new();
            for m in Modality::ALL {
                let (vol, meta) = preprocess_volume(scan.volume(m), cfg)?;
                write_prepared_volume(&out_root.join(entry.modality_dir(m)), &vol)?;
                counts.insert(m, vol.true_length());
                metas.insert(m, meta);
            }
            Ok((
                ManifestEntry {
                    scan_id: entry.scan_id.clone(),
                    label: entry.label,
                    counts,
                },
                metas,
            ))
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::with_capacity(results.len());
    let mut volumes = BTreeMap::new();
    for (e, m) in results {
        volumes.insert(e.scan_id.clone(), m);
        entries.push(e);
    }
    let meta = PrepMeta {
        min_area_frac: cfg.min_area_frac,
        image_size: cfg.image_size,
        threshold: "otsu-256-bins, largest 4-connected component".into(),
        encoding: "png16: q = round((v + 1) / 2 * 65535)".into(),
        source_root: manifest.root.clone(),
        volumes,
    };
    let meta_path = out_root.join(PREP_META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;
    let out = Manifest::new(out_root, entries)?;
    out.save()?;
    Ok(out)
}
