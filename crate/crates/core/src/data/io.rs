//! On-disk slice stacks: `<root>/<scan_id>/<MODALITY>/<idx:05d>.png`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::{Array2, Array3, Axis};

use super::{Label, ManifestEntry, Modality, Scan, Slice, Volume};
use crate::error::{Error, Result};

pub fn slice_file_name(index: usize) -> String {
    format!("{index:05}.png")
}

/// Numerically sorted slice files of one modality directory.
fn list_slice_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .is_some_and(|ext| ext.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        let Some(idx) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        files.push((idx, path));
    }
    files.sort_by_key(|(idx, _)| *idx);
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

/// Reads a grayscale PNG without rescaling: 8-bit files keep 0..=255,
/// 16-bit files keep 0..=65535.
pub fn read_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::CorruptSlice {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
        other => other
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(f64::from)
            .collect(),
    };
    Ok(Array2::from_shape_vec((h, w), data).expect("image buffer matches its dimensions"))
}

pub fn write_gray16(path: &Path, pixels: &Array2<u16>) -> Result<()> {
    let (h, w) = pixels.dim();
    let raw: Vec<u16> = pixels.iter().copied().collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::CorruptSlice {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn load_volume(entry: &ManifestEntry, root: &Path, m: Modality) -> Result<Vec<Array2<f64>>> {
    let dir = root.join(entry.modality_dir(m));
    if !dir.is_dir() {
        return Err(Error::MissingModality {
            scan_id: entry.scan_id.clone(),
            modality: m,
            path: dir,
        });
    }
    let files = list_slice_files(&dir)?;
    let expected = entry.count(m).ok_or_else(|| {
        Error::InvalidManifest(format!("scan '{}' has no count for {m}", entry.scan_id))
    })?;
    if files.len() != expected {
        return Err(Error::ManifestMismatch {
            scan_id: entry.scan_id.clone(),
            modality: m,
            expected,
            found: files.len(),
        });
    }
    files.iter().map(|p| read_gray(p)).collect()
}

/// Loads one raw scan; slices come back single-channel with raw intensities.
pub fn load_scan(entry: &ManifestEntry, root: &Path) -> Result<Scan> {
    let volumes = load_modalities(entry, root, |gray| Slice::from_gray(gray))?;
    Scan::new(entry.scan_id.clone(), volumes, entry.label)
}

fn load_modalities(
    entry: &ManifestEntry,
    root: &Path,
    to_slice: impl Fn(Array2<f64>) -> Slice,
) -> Result<[Volume; 4]> {
    let mut vols = Vec::with_capacity(4);
    for m in Modality::ALL {
        let slices = load_volume(entry, root, m)?
            .into_iter()
            .map(&to_slice)
            .collect();
        vols.push(Volume::new(m, slices));
    }
    Ok(vols.try_into().expect("four modalities"))
}

/// Quantizes a normalized value in `[-1, 1]` to 16 bits. `-1` and `1` are exact.
pub fn encode_normalized(v: f64) -> u16 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 65535.0).round() as u16
}

pub fn decode_normalized(q: u16) -> f64 {
    f64::from(q) / 65535.0 * 2.0 - 1.0
}

/// Writes a preprocessed volume's real slices (first channel only; the
/// channels are identical by construction).
pub fn write_prepared_volume(dir: &Path, volume: &Volume) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in volume.real_slices().iter().enumerate() {
        let q = s.gray().mapv(encode_normalized);
        write_gray16(&dir.join(slice_file_name(i)), &q)?;
    }
    Ok(())
}

/// Loads a scan from a preprocessed cache, restoring `[-1, 1]` values and
/// three identical channels. Volumes are unpadded.
pub fn load_prepared_scan(entry: &ManifestEntry, root: &Path) -> Result<Scan> {
    let volumes = load_modalities(entry, root, |gray| {
        let gray = gray.mapv(|v| decode_normalized(v as u16));
        let (h, w) = gray.dim();
        let gray3 = gray
            .insert_axis(Axis(0))
            .broadcast((3, h, w))
            .expect("broadcast to three channels")
            .to_owned();
        Slice::new(Array3::from(gray3))
    })?;
    Scan::new(entry.scan_id.clone(), volumes, entry.label)
}

/// Convenience for tests and tools: a label plus raw slice stacks written to disk.
pub fn write_raw_scan(
    root: &Path,
    scan_id: &str,
    stacks: &[(Modality, Vec<Array2<u16>>)],
    label: Label,
) -> Result<ManifestEntry> {
    let mut counts = std::collections::BTreeMap::new();
    for (m, slices) in stacks {
        let dir = root.join(scan_id).join(m.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, px) in slices.iter().enumerate() {
            write_gray16(&dir.join(slice_file_name(i)), px)?;
        }
        counts.insert(*m, slices.len());
    }
    Ok(ManifestEntry {
        scan_id: scan_id.to_string(),
        label,
        counts,
    })
}
