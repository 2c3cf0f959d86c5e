//! Fast invariant suite run by `btdnet selftest`.

use std::collections::HashMap;

use ndarray::{ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::{mix_scans, tta_versions, TtaPlan};
use crate::autodiff::{Graph, ParamStore};
use crate::data::{Label, Scan, Volume};
use crate::error::Result;
use crate::evaluation::{macro_f1, tta_predict};
use crate::fixtures::{random_lengths, random_scan, scramble_padding, tiny_model_config};
use crate::network::{BtdNet, Mode, Topology};
use crate::objective::{focal_loss, loss_gradient_check, LossConfig, MixedBatch, Reduction};
use crate::training::{derangement, sam_step, stratified_kfold, SgdMomentum, StepEval};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

fn scans<R: Rng>(rng: &mut R, n: usize, t: usize, size: usize) -> Vec<Scan> {
    (0..n)
        .map(|i| {
            let l = random_lengths(rng, [t; 4]);
            random_scan(
                rng,
                &format!("st{i}"),
                Label::from_class(i % 2),
                [t; 4],
                l,
                size,
            )
        })
        .collect()
}

fn refs(s: &[Scan]) -> Vec<&[Volume; 4]> {
    s.iter().map(|s| s.volumes()).collect()
}

fn padding_invariance(rng: &mut ChaCha8Rng) -> Result<Check> {
    let net = BtdNet::new(tiny_model_config(8), Topology::Full, rng)?;
    let mut data = scans(rng, 20, 8, 16);
    let before = net.predict(&refs(&data))?;
    for s in &mut data {
        scramble_padding(rng, s);
    }
    let after = net.predict(&refs(&data))?;
    let diff = before
        .iter()
        .zip(&after)
        .flat_map(|(a, b)| [(a[0] - b[0]).abs(), (a[1] - b[1]).abs()])
        .fold(0.0, f64::max);
    Ok(check(
        "padding invariance",
        diff < 1e-6,
        format!("max logit change {diff:.3e}"),
    ))
}

fn masked_gradients(rng: &mut ChaCha8Rng) -> Result<Check> {
    let net = BtdNet::new(tiny_model_config(8), Topology::Full, rng)?;
    let data = scans(rng, 4, 8, 16);
    let mut g = Graph::new(net.store());
    let tr = net.forward(&mut g, &refs(&data), Mode::Train, true)?;
    let dy = g.value(tr.logits).mapv(|_| rng.random_range(-1.0..1.0));
    let loss = g.scalar_fn(tr.logits, 0.0, dy);
    let grads = g.backward(loss);
    let mut worst = 0.0f64;
    if let Some(dx) = grads.of(tr.input) {
        for (k, row) in tr.rows.iter().enumerate() {
            if row.slice >= data[row.item].volume(row.modality).true_length() {
                worst = dx
                    .index_axis(Axis(0), k)
                    .iter()
                    .fold(worst, |m, v| m.max(v.abs()));
            }
        }
    }
    for m in &tr.modalities {
        if let Some(d) = grads.of(m.rnn_out) {
            for (b, &l) in m.lengths.iter().enumerate() {
                let row = d.index_axis(Axis(0), b);
                for t in l..row.len_of(Axis(0)) {
                    worst = row
                        .index_axis(Axis(0), t)
                        .iter()
                        .fold(worst, |a, v| a.max(v.abs()));
                }
            }
        }
    }
    Ok(check(
        "masked gradients are zero",
        worst == 0.0,
        format!("max |grad| on padding {worst:e}"),
    ))
}

fn focal_reduces_to_bce(rng: &mut ChaCha8Rng) -> Result<Check> {
    let cfg = LossConfig {
        alpha: 0.5,
        gamma: 0.0,
        reduction: Reduction::Sum,
        ..LossConfig::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let z: [f64; 2] = [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)];
        let y = Label::from_class(rng.random_range(0..2));
        let p1 = 1.0 / (1.0 + (z[0] - z[1]).exp());
        let bce = match y {
            Label::Positive => -p1.ln(),
            Label::Negative => -(1.0 - p1).ln(),
        };
        let fl = focal_loss(&[z], &[y], &cfg)?;
        worst = worst.max((fl - 0.5 * bce).abs());
    }
    Ok(check(
        "focal(gamma=0, alpha=.5) = BCE/2",
        worst < 1e-9,
        format!("max error {worst:.3e}"),
    ))
}

fn mix_endpoints(rng: &mut ChaCha8Rng) -> Result<Check> {
    let s = scans(rng, 2, 4, 8);
    let one = mix_scans(&s[0], &s[1], 1.0)?;
    let zero = mix_scans(&s[0], &s[1], 0.0)?;
    let half = mix_scans(&s[0], &s[1], 0.5)?;
    let ends = one.volumes == *s[0].volumes() && zero.volumes == *s[1].volumes();
    let mut worst = 0.0f64;
    for (m, v) in half.volumes.iter().enumerate() {
        for (k, sl) in v.slices.iter().enumerate() {
            let a = s[0].volumes()[m].slices[k].pixels();
            let b = s[1].volumes()[m].slices[k].pixels();
            for ((x, y), z) in sl.pixels().iter().zip(a.iter()).zip(b.iter()) {
                worst = worst.max((x - 0.5 * (y + z)).abs());
            }
        }
    }
    Ok(check(
        "mix endpoints and midpoint",
        ends && worst < 1e-12,
        format!("endpoints exact: {ends}, midpoint error {worst:.3e}"),
    ))
}

fn tta_identity(rng: &mut ChaCha8Rng) -> Result<Check> {
    let net = BtdNet::new(tiny_model_config(4), Topology::Full, rng)?;
    let data = scans(rng, 3, 4, 10);
    let plan = TtaPlan::identity();
    let mut ok = true;
    for s in &data {
        ok &= tta_versions(s, &plan).iter().all(|v| v == s);
        let plain = net.predict_one(s.volumes())?;
        let p = tta_predict(&net, s, &plan)?;
        ok &= p.p_final == [4.0 * plain[0], 4.0 * plain[1]];
    }
    Ok(check(
        "TTA with identity transforms",
        ok,
        "summed logits equal four times the plain logits".into(),
    ))
}

fn macro_f1_constant() -> Result<Check> {
    let truth: Vec<Label> = (0..100).map(|i| Label::from_class(i % 2)).collect();
    let f = macro_f1(&vec![Label::Positive; 100], &truth)?;
    Ok(check(
        "macro F1 of a constant predictor",
        f == 1.0 / 3.0,
        format!("{f}"),
    ))
}

fn sam_toy() -> Result<Check> {
    let mut s = ParamStore::new();
    let id = s.add_param("theta", ArrayD::from_elem(IxDyn(&[1]), 1.0));
    let mut opt = SgdMomentum::new(0.1, 0.0);
    sam_step(&mut s, &mut opt, 0.1, |p: &ParamStore| {
        let t = p.get(id)[[0]];
        Ok(StepEval {
            loss: t * t,
            grads: HashMap::from([(id, ArrayD::from_elem(IxDyn(&[1]), 2.0 * t))]),
            bn_updates: Vec::new(),
        })
    })?;
    let theta = s.get(id)[[0]];
    Ok(check(
        "SAM step on theta^2",
        (theta - 0.78).abs() < 1e-12,
        format!("theta = {theta}"),
    ))
}

fn stratified_partition(rng: &mut ChaCha8Rng) -> Result<Check> {
    let labels: Vec<Label> = (0..585)
        .map(|_| Label::from_class(rng.random_bool(0.52) as usize))
        .collect();
    let split = stratified_kfold(&labels, 5, 0)?;
    let mut all = split.folds.concat();
    all.sort_unstable();
    let partition = all == (0..585).collect::<Vec<_>>();
    let pos = labels.iter().filter(|&&l| l == Label::Positive).count() as f64;
    let dev = split
        .folds
        .iter()
        .map(|f| {
            (f.iter().filter(|&&i| labels[i] == Label::Positive).count() as f64 - pos / 5.0).abs()
        })
        .fold(0.0, f64::max);
    Ok(check(
        "stratified folds",
        partition && dev <= 1.0,
        format!("partition: {partition}, max class deviation {dev:.2}"),
    ))
}

fn gradient_check(rng: &mut ChaCha8Rng) -> Result<Check> {
    let net = BtdNet::new(tiny_model_config(4), Topology::Full, rng)?;
    let data = scans(rng, 4, 4, 10);
    let batch = MixedBatch::new(data, derangement(4, rng)?, 0.35)?;
    let r = loss_gradient_check(&net, &batch, &LossConfig::default(), 100, 1e-5, rng)?;
    Ok(check(
        "loss gradients match finite differences",
        r.checked >= 100 && r.max_rel_error < 1e-4,
        format!(
            "{} parameters, max relative error {:.3e}",
            r.checked, r.max_rel_error
        ),
    ))
}

/// Runs every check; errors inside a check count as failures.
pub fn run_selftest(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let results: Vec<(&'static str, Result<Check>)> = vec![
        ("padding invariance", padding_invariance(&mut rng)),
        ("masked gradients are zero", masked_gradients(&mut rng)),
        (
            "focal(gamma=0, alpha=.5) = BCE/2",
            focal_reduces_to_bce(&mut rng),
        ),
        ("mix endpoints and midpoint", mix_endpoints(&mut rng)),
        ("TTA with identity transforms", tta_identity(&mut rng)),
        ("macro F1 of a constant predictor", macro_f1_constant()),
        ("SAM step on theta^2", sam_toy()),
        ("stratified folds", stratified_partition(&mut rng)),
        (
            "loss gradients match finite differences",
            gradient_check(&mut rng),
        ),
    ];
    results
        .into_iter()
        .map(|(name, r)| r.unwrap_or_else(|e| check(name, false, format!("error: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run_selftest(1) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
