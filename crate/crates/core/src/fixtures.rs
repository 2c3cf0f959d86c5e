//! Small random inputs and configs for tests, the self-test and benchmarks.

use ndarray::Array3;
use rand::Rng;

use crate::data::{Label, Modality, Scan, Slice, Volume, PADDING_VALUE};
use crate::network::{BackboneConfig, BackboneKind, ModelConfig, RoutingSharing};

/// A prepared-looking scan: real slices uniform in `[-1, 1]`, padding `-1`.
pub fn random_scan<R: Rng + ?Sized>(
    rng: &mut R,
    id: &str,
    label: Label,
    t: [usize; 4],
    lengths: [usize; 4],
    size: usize,
) -> Scan {
    let vols = Modality::ALL.map(|m| {
        let (n, l) = (t[m.index()], lengths[m.index()]);
        assert!(l >= 1 && l <= n, "true length {l} outside 1..={n}");
        let slices = (0..n)
            .map(|k| {
                if k < l {
                    Slice::new(Array3::from_shape_fn((3, size, size), |_| {
                        rng.random_range(-1.0..=1.0)
                    }))
                } else {
                    Slice::filled(3, size, size, PADDING_VALUE)
                }
            })
            .collect();
        Volume::with_true_length(m, slices, l).expect("length checked")
    });
    Scan::new(id, vols, label).expect("modality order")
}

/// Random true lengths in `1..=t` per modality, with at least one below `t`
/// whenever `t > 1`.
pub fn random_lengths<R: Rng + ?Sized>(rng: &mut R, t: [usize; 4]) -> [usize; 4] {
    let mut l = t.map(|n| rng.random_range(1..=n));
    if l == t && t[0] > 1 {
        l[0] = t[0] - 1;
    }
    l
}

/// Replaces every padding slice of `scan` with random content.
pub fn scramble_padding<R: Rng + ?Sized>(rng: &mut R, scan: &mut Scan) {
    for v in scan.volumes_mut() {
        let l = v.true_length();
        for sl in &mut v.slices[l..] {
            sl.pixels_mut()
                .mapv_inplace(|_| rng.random_range(-1.0..=1.0));
        }
    }
}

/// The small `tiny_cnn` model used in checks: `t = 8` everywhere.
pub fn tiny_model_config(t: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            kind: BackboneKind::TinyCnn,
            pretrained: None,
        },
        rnn_units: 6,
        routing_units: 5,
        fusion_units: 7,
        t_flair: t,
        t_t1w: t,
        t_t1wce: t,
        t_t2: t,
        routing_sharing: RoutingSharing::ByLength,
        skip_padding: false,
    }
}
