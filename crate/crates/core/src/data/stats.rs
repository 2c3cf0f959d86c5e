use std::collections::BTreeMap;
use std::fmt::Write as _;

use image::{Rgb, RgbImage};

use super::{Manifest, Modality};

/// Slice counts per modality, in total and per scan.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SliceStats {
    pub totals: BTreeMap<Modality, usize>,
    pub per_scan: Vec<(String, BTreeMap<Modality, usize>)>,
}

pub fn dataset_stats(manifest: &Manifest) -> SliceStats {
    let mut stats = SliceStats::default();
    for e in &manifest.entries {
        for (&m, &n) in &e.counts {
            *stats.totals.entry(m).or_default() += n;
        }
        stats.per_scan.push((e.scan_id.clone(), e.counts.clone()));
    }
    stats
}

impl SliceStats {
    pub fn totals_csv(&self) -> String {
        let mut out = String::from("modality,total\n");
        for (m, n) in &self.totals {
            let _ = writeln!(out, "{m},{n}");
        }
        out
    }

    pub fn counts_csv(&self) -> String {
        let mut out = String::from("scan_id,modality,count\n");
        for (id, counts) in &self.per_scan {
            for (m, n) in counts {
                let _ = writeln!(out, "{id},{m},{n}");
            }
        }
        out
    }

    pub fn total(&self, m: Modality) -> usize {
        self.totals.get(&m).copied().unwrap_or(0)
    }
    /// Two-panel bar chart: slice totals per modality on the left, a
    /// histogram of per-scan counts (one colour per modality) on the right.
    pub fn chart(&self) -> RgbImage {
        const W: u32 = 720;
        const H: u32 = 320;
        const PAD: u32 = 20;
        let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
        let colours = [[200, 60, 60], [60, 120, 200], [60, 170, 90], [230, 160, 40]];
        let base = H - PAD;
        let plot_h = (H - 2 * PAD) as f64;
        let mut fill = |x0: u32, x1: u32, h: f64, c: [u8; 3]| {
            let top = base - (h * plot_h).round().clamp(0.0, plot_h) as u32;
            for x in x0..x1.min(W) {
                for y in top..base {
                    img.put_pixel(x, y, Rgb(c));
                }
            }
        };

        let max_total = self.totals.values().copied().max().unwrap_or(0).max(1) as f64;
        for (i, m) in Modality::ALL.into_iter().enumerate() {
            let x0 = PAD + 10 + i as u32 * 60;
            fill(x0, x0 + 44, self.total(m) as f64 / max_total, colours[i]);
        }

        let counts: Vec<usize> = self
            .per_scan
            .iter()
            .flat_map(|(_, c)| c.values().copied())
            .collect();
        if let (Some(&lo), Some(&hi)) = (counts.iter().min(), counts.iter().max()) {
            const BINS: usize = 24;
            let width = ((hi - lo) as f64 / BINS as f64).max(1.0);
            let mut hist = [[0usize; BINS]; 4];
            for (_, c) in &self.per_scan {
                for (&m, &n) in c {
                    let b = (((n - lo) as f64 / width) as usize).min(BINS - 1);
                    hist[m.index()][b] += 1;
                }
            }
            let peak = hist.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
            for b in 0..BINS {
                for (i, h) in hist.iter().enumerate() {
                    let x0 = 300 + b as u32 * 17 + i as u32 * 4;
                    fill(x0, x0 + 4, h[b] as f64 / peak, colours[i]);
                }
            }
        }

        for x in PAD..W - PAD {
            img.put_pixel(x, base, Rgb([0, 0, 0]));
        }
        for x in [PAD, 290] {
            for y in PAD..=base {
                img.put_pixel(x, y, Rgb([0, 0, 0]));
            }
        }
        img
    }
}
