//! Synthetic multimodal scans with a planted, tunable class signal.
//!
//! Every volume is a stack of ellipse cross-sections of an ellipsoid
//! "brain" on a black background. Each FLAIR and T2 volume also carries a
//! spherical blob over a contiguous slice range; positive scans get a
//! brighter and larger blob, scaled by `separability`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::io::write_raw_scan;
use crate::data::{Label, Manifest, ManifestEntry, Modality};
use crate::error::{Error, Result};
use crate::training::derive_seed;

pub const SYNTH_LEDGER_FILE: &str = "synth_ledger.json";

/// Modalities that carry the blob.
pub const SIGNAL_MODALITIES: [Modality; 2] = [Modality::Flair, Modality::T2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_scans: usize,
    pub image_size: usize,
    /// Inclusive slice-count range per modality.
    pub slices_flair: [usize; 2],
    pub slices_t1w: [usize; 2],
    pub slices_t1wce: [usize; 2],
    pub slices_t2: [usize; 2],
    pub positive_fraction: f64,
    /// 0 makes both classes identical; 1 is the default contrast.
    pub separability: f64,
    /// Blob brightness above tissue for negative scans.
    pub blob_contrast: f64,
    /// Extra brightness of positive blobs at separability 1.
    pub blob_gain: f64,
    /// Blob radius as a fraction of the brain's minor radius.
    pub blob_radius: f64,
    pub blob_radius_gain: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_scans: 20,
            image_size: 64,
            slices_flair: [60, 120],
            slices_t1w: [40, 100],
            slices_t1wce: [40, 100],
            slices_t2: [60, 120],
            positive_fraction: 0.5,
            separability: 1.0,
            blob_contrast: 0.12,
            blob_gain: 0.45,
            blob_radius: 0.3,
            blob_radius_gain: 0.15,
            noise: 0.04,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn range(&self, m: Modality) -> [usize; 2] {
        match m {
            Modality::Flair => self.slices_flair,
            Modality::T1w => self.slices_t1w,
            Modality::T1wCe => self.slices_t1wce,
            Modality::T2 => self.slices_t2,
        }
    }

    pub fn set_ranges(&mut self, range: [usize; 2]) {
        self.slices_flair = range;
        self.slices_t1w = range;
        self.slices_t1wce = range;
        self.slices_t2 = range;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.num_scans == 0 {
            return bad("synth.num_scans must be positive".into());
        }
        if self.image_size < 16 {
            return bad(format!(
                "synth.image_size must be at least 16, got {}",
                self.image_size
            ));
        }
        for m in Modality::ALL {
            let [lo, hi] = self.range(m);
            if lo < 1 || lo > hi {
                return bad(format!(
                    "synth slice range for {m} must satisfy 1 <= min <= max, got [{lo}, {hi}]"
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad(format!(
                "synth.positive_fraction must lie in [0, 1], got {}",
                self.positive_fraction
            ));
        }
        for (k, v) in [
            ("separability", self.separability),
            ("blob_contrast", self.blob_contrast),
            ("blob_gain", self.blob_gain),
            ("blob_radius", self.blob_radius),
            ("blob_radius_gain", self.blob_radius_gain),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("synth.{k} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Ground truth of one planted blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobTruth {
    /// Centre in normalized volume coordinates, each in `[-1, 1]`.
    pub center: [f64; 3],
    /// Half-extent along the slice axis, normalized.
    pub half_extent: f64,
    /// In-plane radius as a fraction of the brain's minor radius.
    pub radius: f64,
    pub intensity: f64,
    /// Slices (start inclusive, end exclusive) the blob touches, per modality.
    pub slice_ranges: BTreeMap<Modality, [usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanTruth {
    pub scan_id: String,
    pub label: Label,
    pub counts: BTreeMap<Modality, usize>,
    pub tissue: BTreeMap<Modality, f64>,
    pub blob: BlobTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLedger {
    pub config: SynthConfig,
    pub scans: Vec<ScanTruth>,
}

impl SynthLedger {
    pub fn totals(&self) -> BTreeMap<Modality, usize> {
        let mut t = BTreeMap::new();
        for s in &self.scans {
            for (&m, &n) in &s.counts {
                *t.entry(m).or_default() += n;
            }
        }
        t
    }
}

fn tissue_level(m: Modality) -> f64 {
    match m {
        Modality::Flair => 0.35,
        Modality::T1w => 0.45,
        Modality::T1wCe => 0.4,
        Modality::T2 => 0.3,
    }
}

/// Slice index `k` of `n` as a coordinate in `(-1, 1)`.
fn slice_z(k: usize, n: usize) -> f64 {
    -1.0 + 2.0 * (k as f64 + 0.5) / n as f64
}

struct Geometry {
    size: usize,
    /// Brain semi-axes in pixels (rows, cols) at the central slice.
    axes: (f64, f64),
    /// Slightly above 1 so the end slices keep some brain.
    z_axis: f64,
}

fn render_slice<R: Rng + ?Sized>(
    geo: &Geometry,
    z: f64,
    tissue: f64,
    blob: Option<&BlobTruth>,
    noise: f64,
    rng: &mut R,
) -> Array2<u16> {
    let n = geo.size;
    let c = (n as f64 - 1.0) / 2.0;
    let shrink = (1.0 - (z / geo.z_axis).powi(2)).max(0.0).sqrt();
    let (ar, ac) = (geo.axes.0 * shrink, geo.axes.1 * shrink);
    let minor = geo.axes.0.min(geo.axes.1);
    let blob_disc = blob.and_then(|b| {
        let dz = (z - b.center[2]) / b.half_extent;
        (dz.abs() < 1.0).then(|| {
            let r = b.radius * minor * (1.0 - dz * dz).sqrt();
            (
                c + b.center[0] * geo.axes.0 * 0.5,
                c + b.center[1] * geo.axes.1 * 0.5,
                r,
                b.intensity,
            )
        })
    });
    Array2::from_shape_fn((n, n), |(i, j)| {
        let (y, x) = (i as f64 - c, j as f64 - c);
        if ar <= 0.0 || (y / ar).powi(2) + (x / ac).powi(2) > 1.0 {
            return 0;
        }
        let mut v = tissue + noise * rng.random_range(-1.0..=1.0);
        if let Some((by, bx, r, level)) = blob_disc {
            if (i as f64 - by).powi(2) + (j as f64 - bx).powi(2) <= r * r {
                v += level;
            }
        }
        (v.clamp(0.02, 1.0) * 65535.0).round() as u16
    })
}

fn blob_slices(blob: &BlobTruth, n: usize) -> [usize; 2] {
    let hits: Vec<usize> = (0..n)
        .filter(|&k| ((slice_z(k, n) - blob.center[2]) / blob.half_extent).abs() < 1.0)
        .collect();
    match (hits.first(), hits.last()) {
        (Some(&a), Some(&b)) => [a, b + 1],
        _ => [0, 0],
    }
}

fn generate_scan(
    cfg: &SynthConfig,
    index: usize,
    label: Label,
    root: &Path,
) -> Result<(ManifestEntry, ScanTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[index as u64]));
    let scan_id = format!("synth_{index:05}");
    let size = cfg.image_size as f64;
    let geo = Geometry {
        size: cfg.image_size,
        axes: (
            size * rng.random_range(0.36..0.44),
            size * rng.random_range(0.3..0.38),
        ),
        z_axis: 1.08,
    };
    let gain = if label == Label::Positive {
        cfg.separability
    } else {
        0.0
    };
    // half-extent keeps the blob inside the volume
    let half_extent = rng.random_range(0.3..0.5);
    let mut blob = BlobTruth {
        center: [
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.3..0.3),
        ],
        half_extent,
        radius: (cfg.blob_radius + gain * cfg.blob_radius_gain) * rng.random_range(0.85..1.15),
        intensity: (cfg.blob_contrast + gain * cfg.blob_gain) * rng.random_range(0.85..1.15),
        slice_ranges: BTreeMap::new(),
    };
    let mut stacks = Vec::with_capacity(4);
    let mut tissue = BTreeMap::new();
    for m in Modality::ALL {
        let [lo, hi] = cfg.range(m);
        let n = rng.random_range(lo..=hi);
        let level = tissue_level(m) * rng.random_range(0.9..1.1);
        let carries = SIGNAL_MODALITIES.contains(&m);
        if carries {
            blob.slice_ranges.insert(m, blob_slices(&blob, n));
        }
        let slices: Vec<Array2<u16>> = (0..n)
            .map(|k| {
                render_slice(
                    &geo,
                    slice_z(k, n),
                    level,
                    carries.then_some(&blob),
                    cfg.noise,
                    &mut rng,
                )
            })
            .collect();
        stacks.push((m, slices));
        tissue.insert(m, level);
    }
    let entry = write_raw_scan(root, &scan_id, &stacks, label)?;
    let truth = ScanTruth {
        scan_id,
        label,
        counts: entry.counts.clone(),
        tissue,
        blob,
    };
    Ok((entry, truth))
}

/// Class labels: `round(n * positive_fraction)` positives, shuffled.
fn draw_labels(cfg: &SynthConfig) -> Vec<Label> {
    let pos = (cfg.num_scans as f64 * cfg.positive_fraction).round() as usize;
    let mut labels: Vec<Label> = (0..cfg.num_scans)
        .map(|i| {
            if i < pos {
                Label::Positive
            } else {
                Label::Negative
            }
        })
        .collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &[u64::MAX],
    )));
    labels
}

/// Writes the raw on-disk layout, `manifest.json` and the generator ledger
/// under `out_root`. Output is a pure function of the config.
pub fn generate_synthetic(cfg: &SynthConfig, out_root: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let labels = draw_labels(cfg);
    let results: Vec<(ManifestEntry, ScanTruth)> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| generate_scan(cfg, i, label, out_root))
        .collect::<Result<_>>()?;
    let (entries, scans): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let ledger = SynthLedger {
        config: cfg.clone(),
        scans,
    };
    let path = out_root.join(SYNTH_LEDGER_FILE);
    fs::write(&path, serde_json::to_string_pretty(&ledger)?).map_err(|e| Error::io(&path, e))?;
    let manifest = Manifest::new(out_root, entries)?;
    manifest.save()?;
    Ok(manifest)
}

pub fn read_synth_ledger(root: &Path) -> Result<SynthLedger> {
    let path = root.join(SYNTH_LEDGER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
