//! Training-time geometric transforms, MixAugment virtual examples and
//! test-time augmentation versions.
//!
//! Training transforms are sampled independently for every real slice of a
//! volume. Test-time versions apply one flip/rotation to the whole scan.

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{Modality, Scan, Slice, Volume, PADDING_VALUE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Rotations are drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub hflip_prob: f64,
    /// Beta(alpha, alpha) parameter for the mixing coefficient.
    pub mix_alpha: f64,
    pub tta_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 15.0,
            hflip_prob: 0.5,
            mix_alpha: 0.2,
            tta_seed: 2021,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_deg >= 0.0 && self.rotation_deg <= 180.0) {
            return Err(Error::InvalidParameter(format!(
                "augment.rotation_deg must lie in [0, 180], got {}",
                self.rotation_deg
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::InvalidParameter(format!(
                "augment.hflip_prob must lie in [0, 1], got {}",
                self.hflip_prob
            )));
        }
        if !(self.mix_alpha > 0.0 && self.mix_alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "augment.mix_alpha must be positive, got {}",
                self.mix_alpha
            )));
        }
        Ok(())
    }

    /// No flips, no rotations.
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            hflip_prob: 0.0,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub hflip: bool,
    pub rotation_deg: f64,
}

impl TransformSpec {
    pub const IDENTITY: TransformSpec = TransformSpec {
        hflip: false,
        rotation_deg: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let hflip = rng.random_bool(cfg.hflip_prob);
        let rotation_deg = if cfg.rotation_deg > 0.0 {
            rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg)
        } else {
            0.0
        };
        TransformSpec {
            hflip,
            rotation_deg,
        }
    }
}

pub fn hflip(img: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = img.to_owned();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().into_owned()
}

/// Rotates about the image center with bilinear sampling; samples falling
/// outside the source are filled with the padding value.
pub fn rotate(img: &ArrayView2<f64>, degrees: f64) -> Array2<f64> {
    if degrees == 0.0 {
        return img.to_owned();
    }
    let (h, w) = img.dim();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let sample = |y: f64, x: f64| -> f64 {
        if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
            return PADDING_VALUE;
        }
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
        let bot = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    };
    Array2::from_shape_fn((h, w), |(r, c)| {
        let dy = r as f64 - cy;
        let dx = c as f64 - cx;
        // inverse map: destination -> source
        let sy = cos * dy - sin * dx + cy;
        let sx = sin * dy + cos * dx + cx;
        sample(sy, sx).clamp(-1.0, 1.0)
    })
}

pub fn apply_transform(slice: &Slice, spec: TransformSpec) -> Slice {
    let (c, h, w) = slice.pixels().dim();
    let mut out = Array3::zeros((c, h, w));
    for (src, mut dst) in slice.pixels().outer_iter().zip(out.outer_iter_mut()) {
        let flipped;
        let view = if spec.hflip {
            flipped = hflip(&src);
            flipped.view()
        } else {
            src
        };
        if spec.rotation_deg == 0.0 {
            dst.assign(&view);
        } else {
            dst.assign(&rotate(&view, spec.rotation_deg));
        }
    }
    Slice::new(out)
}

/// Draws one spec per real slice, in slice order.
pub fn sample_specs<R: Rng + ?Sized>(
    n: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Vec<TransformSpec> {
    (0..n).map(|_| TransformSpec::sample(cfg, rng)).collect()
}

/// Applies an independently sampled transform to every real slice; padding
/// slices are left untouched.
pub fn geometric_transform<R: Rng + ?Sized>(
    volume: &Volume,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Volume {
    let l = volume.true_length();
    let specs = sample_specs(l, cfg, rng);
    let mut slices = Vec::with_capacity(volume.padded_length());
    for (s, spec) in volume.real_slices().iter().zip(specs) {
        slices.push(apply_transform(s, spec));
    }
    slices.extend_from_slice(volume.padding_slices());
    Volume::with_true_length(volume.modality, slices, l).expect("length unchanged")
}

/// Transforms the listed modalities of a scan; other volumes are copied.
pub fn transform_scan<R: Rng + ?Sized>(
    scan: &Scan,
    modalities: &[Modality],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Scan {
    let mut out = scan.clone();
    for &m in modalities {
        *out.volume_mut(m) = geometric_transform(scan.volume(m), cfg, rng);
    }
    out
}

/// λ ~ Beta(alpha, alpha).
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "beta alpha must be positive, got {alpha}"
        )));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(beta.sample(rng))
}

/// A convex combination of two scans with its soft label.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualExample {
    pub volumes: [Volume; 4],
    /// `lambda * y_i + (1 - lambda) * y_j`.
    pub soft_label: [f64; 2],
    /// Effective weight of the first source; see [`mixing_weights`].
    pub lambda: f64,
    pub sources: (String, String),
}

/// Weights `(w_i, w_j)` with `w_i + w_j == 1` exactly and
/// `mixing_weights(1 - λ) == swap(mixing_weights(λ))`.
///
/// For λ < 0.5, `1 - λ` may round; `w_i` is then recomputed as
/// `1 - w_j`, which is exact. The returned `w_i` may differ from λ by one
/// ulp in that case.
pub fn mixing_weights(lambda: f64) -> (f64, f64) {
    if lambda >= 0.5 {
        (lambda, 1.0 - lambda)
    } else {
        let wj = 1.0 - lambda;
        (1.0 - wj, wj)
    }
}

fn mix_volume(a: &Volume, b: &Volume, wa: f64, wb: f64) -> Volume {
    let len = a.true_length().max(b.true_length());
    let slices = if wb == 0.0 {
        a.slices.clone()
    } else if wa == 0.0 {
        b.slices.clone()
    } else {
        a.slices
            .iter()
            .zip(&b.slices)
            .map(|(sa, sb)| {
                let mut px = sa.pixels().mapv(|v| v * wa);
                px.zip_mut_with(sb.pixels(), |x, &y| *x += wb * y);
                Slice::new(px)
            })
            .collect()
    };
    let len = if wb == 0.0 {
        a.true_length()
    } else if wa == 0.0 {
        b.true_length()
    } else {
        len
    };
    Volume::with_true_length(a.modality, slices, len).expect("length within padded size")
}

/// `X = λ X_i + (1 - λ) X_j` per modality and `y = λ y_i + (1 - λ) y_j`.
///
/// Both scans must be padded to identical per-modality shapes. The mixed
/// true length is `max(l_i, l_j)`, except at λ ∈ {0, 1} where the selected
/// source is reproduced unchanged.
pub fn mix_scans(a: &Scan, b: &Scan, lambda: f64) -> Result<VirtualExample> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    for m in Modality::ALL {
        if !a.volume(m).same_shape(b.volume(m)) {
            return Err(Error::ShapeMismatch(format!(
                "{m}: {} vs {} cannot be mixed",
                a.scan_id, b.scan_id
            )));
        }
    }
    let (wa, wb) = mixing_weights(lambda);
    let volumes = Modality::ALL.map(|m| mix_volume(a.volume(m), b.volume(m), wa, wb));
    let (ya, yb) = (a.label.one_hot(), b.label.one_hot());
    let soft_label = [wa * ya[0] + wb * yb[0], wa * ya[1] + wb * yb[1]];
    Ok(VirtualExample {
        volumes,
        soft_label,
        lambda: wa,
        sources: (a.scan_id.clone(), b.scan_id.clone()),
    })
}

/// The per-run rotation used by all test-time versions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtaPlan {
    pub rotation_deg: f64,
    /// When false the "flipped" versions skip the flip.
    #[serde(default = "flip_on")]
    pub hflip: bool,
}

fn flip_on() -> bool {
    true
}

impl TtaPlan {
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let rotation_deg = if cfg.rotation_deg > 0.0 {
            rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg)
        } else {
            0.0
        };
        TtaPlan {
            rotation_deg,
            hflip: true,
        }
    }

    /// All four versions equal the input.
    pub fn identity() -> Self {
        TtaPlan {
            rotation_deg: 0.0,
            hflip: false,
        }
    }

    /// Plan derived from `augment.tta_seed`.
    pub fn from_config(cfg: &AugmentConfig) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.tta_seed);
        TtaPlan::sample(cfg, &mut rng)
    }
}

fn whole_scan(scan: &Scan, spec: TransformSpec) -> Scan {
    let mut out = scan.clone();
    for v in out.volumes_mut() {
        let l = v.true_length();
        for s in &mut v.slices[..l] {
            *s = apply_transform(s, spec);
        }
    }
    out
}

/// `[X, F_X, R_X, FR_X]`: original, flipped, rotated, flipped then rotated.
/// Each version applies one transform to every real slice of every modality.
pub fn tta_versions(scan: &Scan, plan: &TtaPlan) -> [Scan; 4] {
    let flip = TransformSpec {
        hflip: plan.hflip,
        rotation_deg: 0.0,
    };
    let rot = TransformSpec {
        hflip: false,
        rotation_deg: plan.rotation_deg,
    };
    let both = TransformSpec {
        hflip: plan.hflip,
        rotation_deg: plan.rotation_deg,
    };
    [
        scan.clone(),
        whole_scan(scan, flip),
        whole_scan(scan, rot),
        whole_scan(scan, both),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{pad_volume, Label, LengthPolicy};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn textured(n: usize, t: usize, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slices = (0..n)
            .map(|_| {
                Slice::new(Array3::from_shape_fn((3, 12, 12), |_| {
                    rng.random_range(-1.0..1.0)
                }))
            })
            .collect();
        pad_volume(
            &Volume::new(Modality::Flair, slices),
            t,
            LengthPolicy::Strict,
        )
        .unwrap()
    }

    fn scan(id: &str, seed: u64, label: Label) -> Scan {
        let vols = Modality::ALL.map(|m| {
            let mut v = textured(3 + m.index(), 8, seed + m.index() as u64);
            v.modality = m;
            v
        });
        Scan::new(id, vols, label).unwrap()
    }

    fn constant_scan(id: &str, value: f64, label: Label) -> Scan {
        let vols = Modality::ALL.map(|m| Volume::new(m, vec![Slice::filled(3, 4, 4, value); 3]));
        Scan::new(id, vols, label).unwrap()
    }

    #[test]
    fn transform_is_seed_deterministic() {
        let v = textured(6, 10, 1);
        let cfg = AugmentConfig::default();
        let a = geometric_transform(&v, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = geometric_transform(&v, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.padding_slices().iter().all(|s| s.is_constant(-1.0)));
        assert!(a
            .slices
            .iter()
            .all(|s| s.pixels().iter().all(|x| (-1.0..=1.0).contains(x))));
    }

    #[test]
    fn zero_range_is_identity() {
        let v = textured(6, 10, 2);
        let out = geometric_transform(
            &v,
            &AugmentConfig::identity(),
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        assert_eq!(out, v);
    }

    #[test]
    fn slices_receive_distinct_specs() {
        // Over 100 seeded draws of a 2-slice volume, count how often the two
        // slices got different specs.
        let cfg = AugmentConfig::default();
        let mut differing = 0;
        for seed in 0..100 {
            let specs = sample_specs(2, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            if specs[0] != specs[1] {
                differing += 1;
            }
        }
        assert_eq!(differing, 100);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = Array2::from_shape_fn((5, 7), |(r, c)| (r * 7 + c) as f64);
        assert_eq!(hflip(&hflip(&img.view()).view()), img);
        assert_eq!(hflip(&img.view())[[2, 0]], img[[2, 6]]);
    }

    #[test]
    fn rotation_by_90_moves_pixels() {
        let mut img = Array2::from_elem((5, 5), -1.0);
        img[[0, 2]] = 1.0;
        let r = rotate(&img.view(), 90.0);
        // counter-clockwise in (row, col) space maps top-center to left-center
        assert!((r[[2, 0]] - 1.0).abs() < 1e-12 || (r[[2, 4]] - 1.0).abs() < 1e-12);
        assert!((r.sum() - img.sum()).abs() < 1e-9);
    }

    #[test]
    fn lambda_rejects_bad_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_lambda(0.0, &mut rng),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            sample_lambda(-1.0, &mut rng),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn lambda_alpha_one_is_uniform() {
        // Kolmogorov-Smirnov statistic against U[0, 1].
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n)
            .map(|_| sample_lambda(1.0, &mut rng).unwrap())
            .collect();
        xs.sort_by(f64::total_cmp);
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let lo = i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64;
                (x - lo).abs().max((hi - x).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS = {ks}");
    }

    #[test]
    fn lambda_large_alpha_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| sample_lambda(100.0, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn mix_endpoints_and_arithmetic() {
        let a = scan("a", 1, Label::Negative);
        let b = scan("b", 2, Label::Positive);
        let v = mix_scans(&a, &b, 1.0).unwrap();
        assert_eq!(&v.volumes, a.volumes());
        assert_eq!(v.soft_label, [1.0, 0.0]);

        let c1 = constant_scan("c1", 0.2, Label::Negative);
        let c2 = constant_scan("c2", -0.4, Label::Positive);
        let v = mix_scans(&c1, &c2, 0.5).unwrap();
        for vol in &v.volumes {
            for s in &vol.slices {
                assert!(s.pixels().iter().all(|&x| (x - -0.1).abs() < 1e-15));
            }
        }
        let v = mix_scans(&c1, &c2, 0.3).unwrap();
        assert!((v.soft_label[0] - 0.3).abs() < 1e-15);
        assert!((v.soft_label[1] - 0.7).abs() < 1e-15);
        assert_eq!(v.soft_label[0] + v.soft_label[1], 1.0);
    }

    #[test]
    fn mix_true_length_is_max() {
        let a = scan("a", 1, Label::Negative);
        let mut b = scan("b", 2, Label::Positive);
        let shorter = textured(2, 8, 5);
        *b.volume_mut(Modality::Flair) = shorter;
        let v = mix_scans(&a, &b, 0.4).unwrap();
        assert_eq!(v.volumes[0].true_length(), 3);
    }

    #[test]
    fn mix_shape_mismatch() {
        let a = scan("a", 1, Label::Negative);
        let b = constant_scan("c", 0.0, Label::Positive);
        assert!(matches!(
            mix_scans(&a, &b, 0.5),
            Err(Error::ShapeMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn mixing_is_symmetric_and_bounded(lambda in 0.0f64..=1.0, sa in 0u64..50, sb in 50u64..100) {
            let a = scan("a", sa, Label::Negative);
            let b = scan("b", sb, Label::Positive);
            let ab = mix_scans(&a, &b, lambda).unwrap();
            let ba = mix_scans(&b, &a, 1.0 - lambda).unwrap();
            prop_assert_eq!(&ab.volumes.clone().map(|v| v.slices), &ba.volumes.clone().map(|v| v.slices));
            prop_assert_eq!(ab.soft_label, [ba.soft_label[0], ba.soft_label[1]]);
            let (wa, wb) = mixing_weights(lambda);
            prop_assert_eq!(wa + wb, 1.0);
            for m in Modality::ALL {
                for ((x, y), z) in a.volume(m).slices.iter().zip(&b.volume(m).slices).zip(&ab.volumes[m.index()].slices) {
                    for ((&p, &q), &r) in x.pixels().iter().zip(y.pixels().iter()).zip(z.pixels().iter()) {
                        prop_assert!(r >= p.min(q) - 1e-15 && r <= p.max(q) + 1e-15);
                        prop_assert_eq!(r, if wb == 0.0 { p } else if wa == 0.0 { q } else { wa * p + wb * q });
                    }
                }
            }
        }
    }

    #[test]
    fn tta_versions_contract() {
        let s = scan("s", 4, Label::Positive);
        let plan = TtaPlan {
            rotation_deg: 7.0,
            hflip: true,
        };
        let v = tta_versions(&s, &plan);
        assert_eq!(v.len(), 4);
        assert_eq!(v[0], s);
        // flipping F_X again gives X
        let back = whole_scan(
            &v[1],
            TransformSpec {
                hflip: true,
                rotation_deg: 0.0,
            },
        );
        assert_eq!(back, s);

        let zero = tta_versions(
            &s,
            &TtaPlan {
                rotation_deg: 0.0,
                hflip: true,
            },
        );
        assert_eq!(zero[2], s);
        assert_eq!(zero[3], zero[1]);
        let id = tta_versions(&s, &TtaPlan::identity());
        assert!(id.iter().all(|v| *v == s));
    }

    #[test]
    fn tta_plan_is_reproducible() {
        let cfg = AugmentConfig::default();
        assert_eq!(TtaPlan::from_config(&cfg), TtaPlan::from_config(&cfg));
        let p = TtaPlan::from_config(&cfg);
        assert!(p.rotation_deg.abs() <= cfg.rotation_deg);
    }
}
