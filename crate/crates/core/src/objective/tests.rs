use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::fixtures::{random_lengths, random_scan, tiny_model_config};
use crate::network::Topology;

fn cfg(alpha: f64, gamma: f64) -> LossConfig {
    LossConfig {
        alpha,
        gamma,
        ..LossConfig::default()
    }
}

/// Logits whose positive-class softmax probability is `p`.
fn logits_for(p: f64) -> [f64; 2] {
    [0.0, (p / (1.0 - p)).ln()]
}

/// Explicit-loop reference: softmax, then the label-conditional term.
fn reference_fl(z: [f64; 2], class: usize, alpha: f64, gamma: f64) -> f64 {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let p = e1 / (e0 + e1);
    if class == 1 {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

fn labels(v: &[usize]) -> Vec<Label> {
    v.iter().map(|&c| Label::from_class(c)).collect()
}

#[test]
fn closed_form_examples() {
    let pos = labels(&[1]);
    let certain = focal_loss(&[[0.0, 1e4]], &pos, &LossConfig::default()).unwrap();
    assert_eq!(certain, 0.0);
    let half = focal_loss(&[[0.0, 0.0]], &pos, &cfg(0.5, 0.0)).unwrap();
    assert!((half - 0.5 * 2f64.ln()).abs() < 1e-15);
    let v = focal_loss(&[logits_for(0.7)], &pos, &cfg(0.25, 2.0)).unwrap();
    let want = 0.25 * 0.3f64.powi(2) * -(0.7f64.ln());
    assert!((v - want).abs() < 1e-15, "{v} vs {want}");
}

#[test]
fn gamma_zero_is_half_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = cfg(0.5, 0.0);
    for _ in 0..1000 {
        let z: [f64; 2] = [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)];
        let class = rng.random_range(0..2);
        let p1 = 1.0 / (1.0 + (z[0] - z[1]).exp());
        let bce = if class == 1 {
            -p1.ln()
        } else {
            -(1.0 - p1).ln()
        };
        let fl = focal_loss(&[z], &labels(&[class]), &c).unwrap();
        assert!((fl - 0.5 * bce).abs() < 1e-9);
    }
}

#[test]
fn matches_loop_reference_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = LossConfig::default();
    for _ in 0..50 {
        let n = rng.random_range(1..9);
        let z: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
            .collect();
        let zr: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
            .collect();
        let perm: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
        let zj: Vec<[f64; 2]> = perm.iter().map(|&j| zr[j]).collect();
        let yi: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let yj: Vec<usize> = perm.iter().map(|&j| yi[j]).collect();
        let lam: f64 = rng.random_range(0.0..1.0);
        let got = total_loss(&z, &zr, &zj, &labels(&yi), &labels(&yj), lam, &c).unwrap();
        let mut want = 0.0;
        for b in 0..n {
            want += lam * reference_fl(z[b], yi[b], 0.25, 2.0);
            want += (1.0 - lam) * reference_fl(z[b], yj[b], 0.25, 2.0);
            want += reference_fl(zr[b], yi[b], 0.25, 2.0);
            want += reference_fl(zj[b], yj[b], 0.25, 2.0);
        }
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn total_loss_endpoints() {
    let c = LossConfig::default();
    let z = vec![[0.3, -0.2], [1.0, 2.0]];
    let zr = vec![[-0.5, 0.1], [0.0, 0.7]];
    let (yi, yj) = (labels(&[1, 0]), labels(&[0, 0]));
    let at_one = total_loss(&z, &zr, &zr, &yi, &yj, 1.0, &c).unwrap();
    let parts = focal_loss(&z, &yi, &c).unwrap()
        + focal_loss(&zr, &yi, &c).unwrap()
        + focal_loss(&zr, &yj, &c).unwrap();
    assert_eq!(at_one, parts);
    let same = total_loss(&z, &z, &z, &yi, &yi, 1.0, &c).unwrap();
    assert!((same - 3.0 * focal_loss(&z, &yi, &c).unwrap()).abs() < 1e-15);
}

#[test]
fn stable_for_huge_logits() {
    for c in [
        LossConfig::default(),
        LossConfig {
            literal_eq2: true,
            ..LossConfig::default()
        },
    ] {
        for z in [[1e4, -1e4], [-1e4, 1e4], [1e4, 1e4], [0.0, -1e4]] {
            for class in 0..2 {
                let (v, g) =
                    weighted_focal(&[z], &[Label::from_class(class).one_hot()], &c).unwrap();
                assert!(v.is_finite() && v >= 0.0);
                assert!(g[0].iter().all(|x| x.is_finite()));
            }
        }
    }
}

#[test]
fn rejects_bad_inputs() {
    let c = LossConfig::default();
    assert!(matches!(
        focal_loss(&[[f64::NAN, 0.0]], &labels(&[1]), &c),
        Err(Error::NonFiniteInput(_))
    ));
    assert!(matches!(
        focal_loss(&[[f64::INFINITY, 0.0]], &labels(&[0]), &c),
        Err(Error::NonFiniteInput(_))
    ));
    assert!(FocalParams::new(0.0, 2.0).is_err());
    assert!(FocalParams::new(1.0, 2.0).is_err());
    assert!(FocalParams::new(0.5, -0.1).is_err());
    assert!(total_loss(
        &[[0.0; 2]],
        &[[0.0; 2]],
        &[[0.0; 2]],
        &labels(&[1]),
        &labels(&[0]),
        1.5,
        &c
    )
    .is_err());
}

#[test]
fn analytic_logit_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for literal in [false, true] {
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let c = LossConfig {
                literal_eq2: literal,
                reduction,
                ..LossConfig::default()
            };
            let z: Vec<[f64; 2]> = (0..5)
                .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
                .collect();
            let w: Vec<[f64; 2]> = (0..5)
                .map(|_| {
                    let a: f64 = rng.random_range(0.0..1.0);
                    [a, 1.0 - a]
                })
                .collect();
            let (_, g) = weighted_focal(&z, &w, &c).unwrap();
            let h = 1e-6;
            for b in 0..5 {
                for k in 0..2 {
                    let mut zp = z.clone();
                    zp[b][k] += h;
                    let mut zm = z.clone();
                    zm[b][k] -= h;
                    let num = (weighted_focal(&zp, &w, &c).unwrap().0
                        - weighted_focal(&zm, &w, &c).unwrap().0)
                        / (2.0 * h);
                    assert!(
                        (g[b][k] - num).abs() < 1e-7,
                        "literal={literal}: {} vs {num}",
                        g[b][k]
                    );
                }
            }
        }
    }
}

#[test]
fn literal_form_penalises_confident_correct() {
    let lit = LossConfig {
        literal_eq2: true,
        ..LossConfig::default()
    };
    let confident = focal_loss(&[[0.0, 20.0]], &labels(&[1]), &lit).unwrap();
    let standard = focal_loss(&[[0.0, 20.0]], &labels(&[1]), &LossConfig::default()).unwrap();
    assert!(confident > 1.0);
    assert!(standard < 1e-12);
}

#[test]
fn confident_correct_batch_has_vanishing_gradient() {
    let z = vec![[-30.0, 30.0], [30.0, -30.0]];
    let w = vec![[0.0, 1.0], [1.0, 0.0]];
    let (v, g) = weighted_focal(&z, &w, &LossConfig::default()).unwrap();
    assert!(v < 1e-20);
    assert!(g.iter().flatten().all(|x| x.abs() < 1e-20));
}

proptest! {
    #[test]
    fn non_negative_and_decreasing_for_positives(a in 0.01f64..0.98, gap in 0.001f64..0.01, gamma in 0.0f64..4.0) {
        let c = cfg(0.25, gamma);
        let lo = focal_loss(&[logits_for(a)], &labels(&[1]), &c).unwrap();
        let hi = focal_loss(&[logits_for(a + gap)], &labels(&[1]), &c).unwrap();
        prop_assert!(lo >= 0.0 && hi >= 0.0);
        prop_assert!(hi < lo);
    }

    #[test]
    fn swapping_sources_and_lambda_is_symmetric(
        lam in 0.0f64..=1.0,
        zs in proptest::collection::vec((-6.0f64..6.0, -6.0f64..6.0), 4),
        ys in proptest::collection::vec(0usize..2, 4),
    ) {
        let c = LossConfig::default();
        let z: Vec<[f64; 2]> = zs.iter().map(|&(a, b)| [a, b]).collect();
        let (zi, zj) = (z[..2].to_vec(), z[2..].to_vec());
        let (yi, yj) = (labels(&ys[..2]), labels(&ys[2..]));
        let v = vec![[0.1, -0.3], [2.0, 0.5]];
        let a = total_loss(&v, &zi, &zj, &yi, &yj, lam, &c).unwrap();
        let b = total_loss(&v, &zj, &zi, &yj, &yi, 1.0 - lam, &c).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

fn tiny_batch(seed: u64, t: usize, n: usize) -> (crate::network::BtdNet, MixedBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model =
        crate::network::BtdNet::new(tiny_model_config(t), Topology::Full, &mut rng).unwrap();
    let scans: Vec<Scan> = (0..n)
        .map(|i| {
            let l = random_lengths(&mut rng, [t; 4]);
            random_scan(
                &mut rng,
                &format!("g{i}"),
                Label::from_class(i % 2),
                [t; 4],
                l,
                12,
            )
        })
        .collect();
    let pairing: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
    (model, MixedBatch::new(scans, pairing, 0.37).unwrap())
}

#[test]
fn gradient_check_on_tiny_model() {
    let (model, batch) = tiny_batch(4, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rep =
        loss_gradient_check(&model, &batch, &LossConfig::default(), 60, 1e-5, &mut rng).unwrap();
    assert!(rep.checked >= 60);
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

#[test]
fn routing_weights_behind_the_mask_get_zero_gradient() {
    let (model, batch) = tiny_batch(6, 6, 3);
    let mut g = Graph::new(model.store());
    let obj = record_objective(
        &mut g,
        &model,
        &batch,
        &LossConfig::default(),
        Mode::Train,
        false,
    )
    .unwrap();
    let grads = g.backward(obj.loss);
    let longest = batch
        .real
        .iter()
        .map(|s| s.true_lengths())
        .chain(
            batch
                .virtuals
                .iter()
                .map(|v| v.volumes.each_ref().map(|x| x.true_length())),
        )
        .flat_map(|l| l.into_iter())
        .max()
        .unwrap();
    let v = model.config().rnn_units;
    let name = format!(
        "routing.{}.dense.weight",
        model
            .config()
            .routing_group_name(crate::data::Modality::Flair)
    );
    let id = model.store().id(&name).unwrap();
    let dw = grads.param(id).unwrap();
    for row in dw.outer_iter() {
        for k in longest * v..row.len() {
            assert_eq!(row[k], 0.0);
        }
    }
    if longest < 6 {
        assert!(dw
            .outer_iter()
            .any(|r| r.iter().take(longest * v).any(|&x| x != 0.0)));
    }
}

#[test]
fn lambda_one_virtual_term_equals_real_term() {
    let (model, mut batch) = tiny_batch(7, 4, 4);
    batch = MixedBatch::new(batch.real, batch.pairing, 1.0).unwrap();
    let c = LossConfig::default();
    let mut g = Graph::new(model.store());
    let obj = record_objective(&mut g, &model, &batch, &c, Mode::Eval, false).unwrap();
    let lv = crate::network::logit_rows(g.value(obj.virt.logits));
    let lr = crate::network::logit_rows(g.value(obj.real.logits));
    assert_eq!(lv, lr);
    let yi = batch.labels_i();
    let fl = focal_loss(&lr, &yi, &c).unwrap();
    let lj = crate::network::logit_rows(g.value(obj.logits_rj));
    let want = 2.0 * fl + focal_loss(&lj, &batch.labels_j(), &c).unwrap();
    assert!((g.scalar(obj.loss) - want).abs() < 1e-12);
}
