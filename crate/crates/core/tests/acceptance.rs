//! Acceptance checks, one PASS/FAIL line each.
//!
//! `cargo test -p btdnet --test acceptance` runs all of them; numeric
//! arguments select a subset, e.g. `-- 1 4 9`.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{ArrayD, Axis, IxDyn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use btdnet::augment::{mix_scans, TtaPlan};
use btdnet::autodiff::{Graph, ParamStore};
use btdnet::config::{build_synthetic, PipelineConfig};
use btdnet::evaluation::{argmax, macro_f1, tta_predict};
use btdnet::fixtures::{random_lengths, random_scan, scramble_padding, tiny_model_config};
use btdnet::network::{BtdNet, Mode, Topology};
use btdnet::objective::{focal_loss, record_objective, LossConfig, MixedBatch, Reduction};
use btdnet::training::{
    cross_validate, derangement, sam_step, stratified_kfold, CvOptions, CvSummary, SgdMomentum,
    StepEval,
};
use btdnet::{Label, Modality, Scan, Volume};

type Outcome = Result<(bool, String), String>;

fn scans(rng: &mut ChaCha8Rng, n: usize, t: usize, size: usize) -> Vec<Scan> {
    (0..n)
        .map(|i| {
            let l = random_lengths(rng, [t; 4]);
            random_scan(
                rng,
                &format!("a{i}"),
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

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn padding_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = BtdNet::new(tiny_model_config(8), Topology::Full, &mut rng).map_err(err)?;
    let mut data = scans(&mut rng, 20, 8, 16);
    let before = net.predict(&refs(&data)).map_err(err)?;
    let mut worst = 0.0f64;
    for _ in 0..3 {
        for s in &mut data {
            scramble_padding(&mut rng, s);
        }
        let after = net.predict(&refs(&data)).map_err(err)?;
        for (a, b) in before.iter().zip(&after) {
            worst = worst.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
        }
    }
    Ok((
        worst <= 1e-6,
        format!("max eval logit change {worst:.3e} over 3 replacements"),
    ))
}

fn masked_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let net = BtdNet::new(tiny_model_config(8), Topology::Full, &mut rng).map_err(err)?;
    let data = scans(&mut rng, 6, 8, 16);
    let pairing = derangement(6, &mut rng).map_err(err)?;
    let batch = MixedBatch::new(data, pairing, 0.3).map_err(err)?;
    let mut g = Graph::new(net.store());
    let obj = record_objective(
        &mut g,
        &net,
        &batch,
        &LossConfig::default(),
        Mode::Train,
        true,
    )
    .map_err(err)?;
    let grads = g.backward(obj.loss);

    let virt_vols: Vec<&[Volume; 4]> = batch.virtuals.iter().map(|v| &v.volumes).collect();
    let real_vols = refs(&batch.real);
    let (mut worst, mut pixels, mut rows, mut live) = (0.0f64, 0usize, 0usize, 0.0f64);
    for (trace, vols) in [(&obj.real, &real_vols), (&obj.virt, &virt_vols)] {
        let dx = grads
            .of(trace.input)
            .ok_or("no gradient reached the input")?;
        for (k, r) in trace.rows.iter().enumerate() {
            let block = dx.index_axis(Axis(0), k);
            if r.slice >= vols[r.item][r.modality.index()].true_length() {
                pixels += block.len();
                worst = block.iter().fold(worst, |a, v| a.max(v.abs()));
            } else {
                live = block.iter().fold(live, |a, v| a.max(v.abs()));
            }
        }
        for m in &trace.modalities {
            let d = grads
                .of(m.rnn_out)
                .ok_or("no gradient reached the RNN outputs")?;
            for (b, &l) in m.lengths.iter().enumerate() {
                let seq = d.index_axis(Axis(0), b);
                for t in l..seq.len_of(Axis(0)) {
                    rows += 1;
                    worst = seq
                        .index_axis(Axis(0), t)
                        .iter()
                        .fold(worst, |a, v| a.max(v.abs()));
                }
            }
        }
    }
    let ok = worst == 0.0 && pixels > 0 && rows > 0 && live > 0.0;
    Ok((
        ok,
        format!("{pixels} padding pixels, {rows} padded RNN rows, max |grad| {worst:e}; real-slice max |grad| {live:.2e}"),
    ))
}

fn loss_value(net: &BtdNet, batch: &MixedBatch, cfg: &LossConfig) -> Result<f64, String> {
    let mut g = Graph::new(net.store());
    let obj = record_objective(&mut g, net, batch, cfg, Mode::Train, false).map_err(err)?;
    Ok(g.scalar(obj.loss))
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let net = BtdNet::new(tiny_model_config(5), Topology::Full, &mut rng).map_err(err)?;
    let data = scans(&mut rng, 4, 5, 12);
    let batch = MixedBatch::new(data, derangement(4, &mut rng).map_err(err)?, 0.37).map_err(err)?;
    let cfg = LossConfig::default();
    let mut g = Graph::new(net.store());
    let obj = record_objective(&mut g, &net, &batch, &cfg, Mode::Train, false).map_err(err)?;
    let grads = g.backward(obj.loss);
    drop(g);

    let h = 1e-5;
    let mut probe = net.clone();
    let ids: Vec<_> = net.store().trainable_ids().collect();
    let (mut checked, mut worst, mut at) = (0usize, 0.0f64, String::new());
    let per_tensor = 120usize.div_ceil(ids.len());
    for &id in &ids {
        let n = net.store().get(id).len();
        for i in sample(&mut rng, n, per_tensor.min(n)) {
            let orig = net.store().get(id).as_slice().unwrap()[i];
            let set =
                |p: &mut BtdNet, v: f64| p.store_mut().get_mut(id).as_slice_mut().unwrap()[i] = v;
            set(&mut probe, orig + h);
            let up = loss_value(&probe, &batch, &cfg)?;
            set(&mut probe, orig - h);
            let down = loss_value(&probe, &batch, &cfg)?;
            set(&mut probe, orig);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.param(id).map_or(0.0, |t| t.as_slice().unwrap()[i]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            checked += 1;
            if rel > worst {
                worst = rel;
                at = format!("{}[{i}]", net.store().name(id));
            }
        }
    }
    Ok((
        checked >= 100 && worst < 1e-4,
        format!("{checked} parameters, max relative error {worst:.3e} at {at}"),
    ))
}

fn focal_vs_bce() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = LossConfig {
        alpha: 0.5,
        gamma: 0.0,
        reduction: Reduction::Sum,
        ..LossConfig::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let z = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
        let y = rng.random_range(0..2usize);
        // softmax over two logits is the sigmoid of their difference
        let d: f64 = z[1] - z[0];
        let bce = if y == 1 {
            (-d).exp().ln_1p()
        } else {
            d.exp().ln_1p()
        };
        let fl = focal_loss(&[z], &[Label::from_class(y)], &cfg).map_err(err)?;
        worst = worst.max((fl - 0.5 * bce).abs());
    }
    Ok((
        worst <= 1e-9,
        format!("1000 pairs, max |FL - BCE/2| {worst:.3e}"),
    ))
}

fn mix_endpoints() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst = 0.0f64;
    let mut ends = true;
    for _ in 0..10 {
        let mut s = scans(&mut rng, 2, 6, 8);
        s[1].label = Label::Positive;
        s[0].label = Label::Negative;
        let one = mix_scans(&s[0], &s[1], 1.0).map_err(err)?;
        let zero = mix_scans(&s[0], &s[1], 0.0).map_err(err)?;
        ends &= one.volumes == *s[0].volumes() && one.soft_label == s[0].label.one_hot();
        ends &= zero.volumes == *s[1].volumes() && zero.soft_label == s[1].label.one_hot();
        let half = mix_scans(&s[0], &s[1], 0.5).map_err(err)?;
        for m in Modality::ALL {
            for (k, sl) in half.volumes[m.index()].slices.iter().enumerate() {
                let a = s[0].volume(m).slices[k].pixels();
                let b = s[1].volume(m).slices[k].pixels();
                for ((x, p), q) in sl.pixels().iter().zip(a).zip(b) {
                    worst = worst.max((x - (p + q) / 2.0).abs());
                }
            }
        }
        worst = worst
            .max((half.soft_label[0] - 0.5).abs())
            .max((half.soft_label[1] - 0.5).abs());
    }
    Ok((
        ends && worst <= 1e-12,
        format!("endpoints bitwise: {ends}; midpoint max error {worst:.3e}"),
    ))
}

fn tta_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let net = BtdNet::new(tiny_model_config(6), Topology::Full, &mut rng).map_err(err)?;
    let data = scans(&mut rng, 8, 6, 12);
    let mut exact = true;
    for s in &data {
        let plain = net.predict_one(s.volumes()).map_err(err)?;
        let p = tta_predict(&net, s, &TtaPlan::identity()).map_err(err)?;
        exact &= p.p_final == [4.0 * plain[0], 4.0 * plain[1]] && p.label == argmax(plain);
    }
    let mut invariant = true;
    for _ in 0..10_000 {
        let z = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
        let c = 10f64.powf(rng.random_range(-6.0..6.0));
        invariant &= argmax([c * z[0], c * z[1]]) == argmax(z);
    }
    invariant &= argmax([2.0, 2.0]) == argmax([7.0, 7.0]);
    Ok((
        exact && invariant,
        format!("p_final == 4 x logits on 8 scans: {exact}; argmax scale invariant: {invariant}"),
    ))
}

fn reference_f1(pred: &[usize], truth: &[usize]) -> f64 {
    let mut cm = [[0usize; 2]; 2];
    for (&p, &t) in pred.iter().zip(truth) {
        cm[t][p] += 1;
    }
    let mut total = 0.0;
    for c in 0..2 {
        let tp = cm[c][c] as f64;
        let fp = cm[1 - c][c] as f64;
        let fneg = cm[c][1 - c] as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fneg > 0.0 {
            tp / (tp + fneg)
        } else {
            0.0
        };
        total += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    total / 2.0
}

fn f1_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let bias = rng.random_range(0.05..0.95);
        let truth: Vec<usize> = (0..1000).map(|_| rng.random_bool(bias) as usize).collect();
        let pred: Vec<usize> = (0..1000).map(|_| rng.random_bool(0.5) as usize).collect();
        let lab = |v: &[usize]| v.iter().map(|&c| Label::from_class(c)).collect::<Vec<_>>();
        let f = macro_f1(&lab(&pred), &lab(&truth)).map_err(err)?;
        worst = worst.max((f - reference_f1(&pred, &truth)).abs());
    }
    let truth: Vec<Label> = (0..1000).map(|i| Label::from_class(i % 2)).collect();
    let pos = macro_f1(&vec![Label::Positive; 1000], &truth).map_err(err)?;
    let neg = macro_f1(&vec![Label::Negative; 1000], &truth).map_err(err)?;
    let third = pos == 1.0 / 3.0 && neg == 1.0 / 3.0;
    Ok((
        worst <= 1e-12 && third,
        format!("max difference from reference {worst:.3e}; constant predictor {pos}, {neg}"),
    ))
}

fn stratified_585() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut labels: Vec<Label> = (0..585)
        .map(|i| Label::from_class((i < 307) as usize))
        .collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    let mut worst = 0.0f64;
    let mut partition = true;
    for seed in 0..10 {
        let split = stratified_kfold(&labels, 5, seed).map_err(err)?;
        let mut seen = vec![0u32; 585];
        for f in &split.folds {
            for &i in f {
                seen[i] += 1;
            }
            for (class, total) in [(Label::Positive, 307.0), (Label::Negative, 278.0)] {
                let n = f.iter().filter(|&&i| labels[i] == class).count() as f64;
                worst = worst.max((n - total / 5.0).abs());
            }
        }
        partition &= split.folds.len() == 5 && seen.iter().all(|&c| c == 1);
    }
    Ok((
        partition && worst <= 1.0,
        format!(
            "307/278 labels, 10 seeds: partition {partition}, max class-count deviation {worst:.2}"
        ),
    ))
}

fn sam_reduction() -> Outcome {
    let mut store = ParamStore::new();
    let a = store.add_param(
        "a",
        ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap(),
    );
    let b = store.add_param(
        "b",
        ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.3, 0.1, -0.7, 2.0]).unwrap(),
    );
    let objective = |p: &ParamStore| -> btdnet::Result<StepEval> {
        let (x, y) = (p.get(a), p.get(b));
        let s: f64 = y.iter().sum();
        let loss = x.iter().map(|v| v * v * v * v / 4.0).sum::<f64>() + s * s / 2.0 + x[[0]] * s;
        let gx = x.mapv(|v| v * v * v)
            + &ArrayD::from_shape_vec(IxDyn(&[3]), vec![s, 0.0, 0.0]).unwrap();
        let gy = y.mapv(|_| s + x[[0]]);
        Ok(StepEval {
            loss,
            grads: HashMap::from([(a, gx), (b, gy)]),
            bn_updates: Vec::new(),
        })
    };
    let (lr, mu) = (0.01, 0.9);
    let mut sam = store.clone();
    let mut opt = SgdMomentum::new(lr, mu);
    let mut plain = store.clone();
    let mut vel: HashMap<_, ArrayD<f64>> = HashMap::new();
    for _ in 0..100 {
        sam_step(&mut sam, &mut opt, 0.0, objective).map_err(err)?;
        let e = objective(&plain).map_err(err)?;
        for (id, g) in e.grads {
            let v = vel.entry(id).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            for (vi, gi) in v.iter_mut().zip(g.iter()) {
                *vi = mu * *vi + gi;
            }
            for (p, vi) in plain.get_mut(id).iter_mut().zip(v.iter()) {
                *p -= lr * vi;
            }
        }
    }
    let bitwise = [a, b].iter().all(|&id| {
        sam.get(id)
            .iter()
            .zip(plain.get(id).iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    });

    let mut q = ParamStore::new();
    let t = q.add_param("theta", ArrayD::from_elem(IxDyn(&[1]), 1.0));
    let mut sgd = SgdMomentum::new(0.1, 0.0);
    sam_step(&mut q, &mut sgd, 0.1, |p: &ParamStore| {
        let th = p.get(t)[[0]];
        Ok(StepEval {
            loss: th * th,
            grads: HashMap::from([(t, ArrayD::from_elem(IxDyn(&[1]), 2.0 * th))]),
            bn_updates: Vec::new(),
        })
    })
    .map_err(err)?;
    let theta = q.get(t)[[0]];
    Ok((
        bitwise && (theta - 0.78).abs() <= 1e-12,
        format!("rho=0 bitwise over 100 steps: {bitwise}; quadratic theta {theta}"),
    ))
}

fn synthetic_run(separability: f64, seed: u64) -> Result<CvSummary, String> {
    let mut cfg = PipelineConfig::desk_synthetic();
    cfg.synth.separability = separability;
    cfg.synth.seed = seed;
    cfg.train.seed = seed;
    let dir = tempfile::tempdir().map_err(err)?;
    let data = build_synthetic(&cfg, dir.path()).map_err(err)?;
    cross_validate(&cfg.setup(), &data.scans, &CvOptions::default()).map_err(err)
}

fn end_to_end(separable: &CvSummary) -> Outcome {
    let mut chance = Vec::new();
    for seed in 1..=3 {
        chance.push(synthetic_run(0.0, seed)?.tta.mean);
    }
    let null_mean = chance.iter().sum::<f64>() / chance.len() as f64;
    let ok = separable.tta.mean >= 0.90 && (null_mean - 0.5).abs() <= 0.15;
    Ok((
        ok,
        format!(
            "separable 5-fold TTA F1 {} (phase-2 val {}); separability 0 per seed {:?}, mean {null_mean:.3}",
            separable.tta,
            separable.phase2,
            chance.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        ),
    ))
}

fn fused_vs_streams(s: &CvSummary) -> Outcome {
    let (m, best) = s.best_phase1().ok_or("phase 1 did not run")?;
    let streams: Vec<String> = s
        .phase1
        .iter()
        .map(|(m, r)| format!("{m} {:.3}", r.mean))
        .collect();
    Ok((
        s.phase2.mean >= best - 0.02,
        format!(
            "phase-2 mean {:.3} vs best stream {m} {best:.3} ({})",
            s.phase2.mean,
            streams.join(", ")
        ),
    ))
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut failed = 0;
    let mut report = |n: usize, name: &str, start: Instant, out: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = out.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !ok {
            failed += 1;
        }
        println!(
            "{} [{n:>2}] {name}: {detail} ({secs:.1}s)",
            if ok { "PASS" } else { "FAIL" }
        );
    };

    let quick: [(&str, fn() -> Outcome); 9] = [
        ("padding invariance", padding_invariance),
        ("masked gradients are exactly zero", masked_gradients),
        ("finite-difference gradient check", gradient_check),
        ("focal loss reduces to half BCE", focal_vs_bce),
        ("mixing endpoints and midpoint", mix_endpoints),
        ("TTA contract", tta_contract),
        ("macro F1 oracle", f1_oracle),
        ("stratified 5-fold on 585 labels", stratified_585),
        ("SAM reduction", sam_reduction),
    ];
    for (i, (name, f)) in quick.into_iter().enumerate() {
        if run(i + 1) {
            let t = Instant::now();
            report(i + 1, name, t, f());
        }
    }

    if run(10) || run(11) {
        let t = Instant::now();
        match synthetic_run(1.0, 0) {
            Ok(s) => {
                if run(10) {
                    report(10, "synthetic end-to-end", t, end_to_end(&s));
                }
                if run(11) {
                    report(
                        11,
                        "fused model vs single streams",
                        Instant::now(),
                        fused_vs_streams(&s),
                    );
                }
            }
            Err(e) => {
                for n in [10, 11].into_iter().filter(|&n| run(n)) {
                    report(n, "synthetic run", t, Err(e.clone()));
                }
            }
        }
    }

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
