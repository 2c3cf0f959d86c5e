//! Inputs shared by the criterion benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use btdnet::fixtures::{random_lengths, random_scan};
use btdnet::network::{BackboneConfig, RoutingSharing};
use btdnet::objective::MixedBatch;
use btdnet::training::derangement;
use btdnet::{BackboneKind, BtdNet, Label, ModelConfig, Scan, Topology};

/// Desk-scale model: tiny backbone, `t` slices per modality.
pub fn desk_model_config(t: usize, skip_padding: bool) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            kind: BackboneKind::TinyCnn,
            pretrained: None,
        },
        rnn_units: 16,
        routing_units: 16,
        fusion_units: 32,
        t_flair: t,
        t_t1w: t,
        t_t1wce: t,
        t_t2: t,
        routing_sharing: RoutingSharing::ByLength,
        skip_padding,
    }
}

pub fn model(cfg: ModelConfig, topology: Topology, seed: u64) -> BtdNet {
    BtdNet::new(cfg, topology, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid config")
}

pub fn scans(n: usize, t: usize, size: usize, seed: u64) -> Vec<Scan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let l = random_lengths(&mut rng, [t; 4]);
            random_scan(
                &mut rng,
                &format!("b{i}"),
                Label::from_class(i % 2),
                [t; 4],
                l,
                size,
            )
        })
        .collect()
}

pub fn mixed_batch(n: usize, t: usize, size: usize, seed: u64) -> MixedBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairing = derangement(n, &mut rng).expect("n >= 2");
    MixedBatch::new(scans(n, t, size, seed), pairing, 0.4).expect("consistent batch")
}

/// Random `[3, h, w]` image.
pub fn image(h: usize, w: usize, seed: u64) -> ndarray::Array3<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ndarray::Array3::from_shape_fn((3, h, w), |_| rng.random_range(-1.0..1.0))
}
