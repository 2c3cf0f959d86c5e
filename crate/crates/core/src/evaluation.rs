//! Macro F1, test-time augmentation with logit summation, fold aggregation.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{tta_versions, TtaPlan};
use crate::data::{Label, Scan, Volume};
use crate::error::{Error, Result};
use crate::network::BtdNet;

/// Anything that maps a batch of scans to two logits each.
pub trait LogitModel {
    fn logits(&self, batch: &[&[Volume; 4]]) -> Result<Vec<[f64; 2]>>;
}

impl LogitModel for BtdNet {
    fn logits(&self, batch: &[&[Volume; 4]]) -> Result<Vec<[f64; 2]>> {
        self.predict(batch)
    }
}

/// Scans forwarded together during evaluation.
const EVAL_CHUNK: usize = 16;

/// Class with the larger logit; ties go to class 0.
pub fn argmax(z: [f64; 2]) -> Label {
    if z[1] > z[0] {
        Label::Positive
    } else {
        Label::Negative
    }
}

/// Mean of the two per-class F1 scores, with F1 = 0 when P + R = 0.
pub fn macro_f1(pred: &[Label], truth: &[Label]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions, {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("macro F1 of an empty set".into()));
    }
    let mut total = 0.0;
    for c in [Label::Negative, Label::Positive] {
        let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                (false, false) => {}
            }
        }
        // 2PR / (P + R) = 2 tp / (2 tp + fp + fn), zero when tp = 0
        if tp > 0 {
            total += 2.0 * tp as f64 / (2 * tp + fp + fnn) as f64;
        }
    }
    Ok(total / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaPrediction {
    /// Logits of the original, flipped, rotated and flipped+rotated versions.
    pub versions: [[f64; 2]; 4],
    pub p_final: [f64; 2],
    pub label: Label,
}

/// `(z0 + z1) + (z2 + z3)`, so four equal vectors sum to exactly `4 z`.
fn sum4(z: &[[f64; 2]]) -> [f64; 2] {
    [
        (z[0][0] + z[1][0]) + (z[2][0] + z[3][0]),
        (z[0][1] + z[1][1]) + (z[2][1] + z[3][1]),
    ]
}

/// Sums the logits of the four test-time versions of each scan.
pub fn tta_predict_batch<M: LogitModel + ?Sized>(
    model: &M,
    scans: &[&Scan],
    plan: &TtaPlan,
) -> Result<Vec<TtaPrediction>> {
    let versions: Vec<[Scan; 4]> = scans.iter().map(|s| tta_versions(s, plan)).collect();
    let flat: Vec<&[Volume; 4]> = versions
        .iter()
        .flat_map(|v| v.iter().map(|s| s.volumes()))
        .collect();
    let mut logits = Vec::with_capacity(flat.len());
    for chunk in flat.chunks(EVAL_CHUNK * 4) {
        logits.extend(model.logits(chunk)?);
    }
    Ok(logits
        .chunks_exact(4)
        .map(|z| {
            let p_final = sum4(z);
            TtaPrediction {
                versions: [z[0], z[1], z[2], z[3]],
                p_final,
                label: argmax(p_final),
            }
        })
        .collect())
}

pub fn tta_predict<M: LogitModel + ?Sized>(
    model: &M,
    scan: &Scan,
    plan: &TtaPlan,
) -> Result<TtaPrediction> {
    Ok(tta_predict_batch(model, &[scan], plan)?.remove(0))
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scan_id: String,
    /// One logit pair without TTA, four with.
    pub logits: Vec<[f64; 2]>,
    pub p_final: [f64; 2],
    pub label: Label,
    pub truth: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldEvaluation {
    pub macro_f1: f64,
    pub records: Vec<PredictionRecord>,
}

/// Predicts every validation scan (summing TTA logits when `tta` is given)
/// and scores the fold.
pub fn evaluate_fold<M: LogitModel + ?Sized>(
    model: &M,
    scans: &[&Scan],
    tta: Option<&TtaPlan>,
) -> Result<FoldEvaluation> {
    if scans.is_empty() {
        return Err(Error::EmptyFold("no validation scans".into()));
    }
    let mut records = Vec::with_capacity(scans.len());
    match tta {
        Some(plan) => {
            for chunk in scans.chunks(EVAL_CHUNK) {
                for (s, p) in chunk.iter().zip(tta_predict_batch(model, chunk, plan)?) {
                    records.push(PredictionRecord {
                        scan_id: s.scan_id.clone(),
                        logits: p.versions.to_vec(),
                        p_final: p.p_final,
                        label: p.label,
                        truth: s.label,
                    });
                }
            }
        }
        None => {
            for chunk in scans.chunks(EVAL_CHUNK) {
                let vols: Vec<&[Volume; 4]> = chunk.iter().map(|s| s.volumes()).collect();
                for (s, z) in chunk.iter().zip(model.logits(&vols)?) {
                    records.push(PredictionRecord {
                        scan_id: s.scan_id.clone(),
                        logits: vec![z],
                        p_final: z,
                        label: argmax(z),
                        truth: s.label,
                    });
                }
            }
        }
    }
    let macro_f1 = score_records(&records)?;
    Ok(FoldEvaluation { macro_f1, records })
}

/// Macro F1 recomputed from dumped predictions.
pub fn score_records(records: &[PredictionRecord]) -> Result<f64> {
    let pred: Vec<Label> = records.iter().map(|r| r.label).collect();
    let truth: Vec<Label> = records.iter().map(|r| r.truth).collect();
    macro_f1(&pred, &truth)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Per-fold scores with their mean and spread (max - min).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub spread: f64,
}

pub fn aggregate_folds(scores: &[f64]) -> Result<FoldReport> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no fold scores".into()));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(FoldReport {
        per_fold: scores.to_vec(),
        mean: mean.clamp(min, max),
        spread: max - min,
    })
}

impl std::fmt::Display for FoldReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.spread)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::augment::AugmentConfig;
    use crate::fixtures::{random_lengths, random_scan, tiny_model_config};
    use crate::network::Topology;

    fn l(v: &[usize]) -> Vec<Label> {
        v.iter().map(|&c| Label::from_class(c)).collect()
    }

    /// Loop-based reference: confusion matrix, then P, R, F1 per class.
    fn reference(pred: &[Label], truth: &[Label]) -> f64 {
        let mut cm = [[0usize; 2]; 2];
        for (p, t) in pred.iter().zip(truth) {
            cm[t.class()][p.class()] += 1;
        }
        let mut f = 0.0;
        for c in 0..2 {
            let tp = cm[c][c] as f64;
            let predicted = (cm[0][c] + cm[1][c]) as f64;
            let actual = (cm[c][0] + cm[c][1]) as f64;
            let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let r = if actual > 0.0 { tp / actual } else { 0.0 };
            f += if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            };
        }
        f / 2.0
    }

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1(&l(&[0, 1, 1, 0]), &l(&[0, 1, 1, 0])).unwrap(), 1.0);
        assert_eq!(
            macro_f1(&l(&[0, 0, 0, 0]), &l(&[0, 0, 1, 1])).unwrap(),
            1.0 / 3.0
        );
        assert_eq!(macro_f1(&l(&[1, 1, 0, 0]), &l(&[0, 0, 1, 1])).unwrap(), 0.0);
        assert!(matches!(
            macro_f1(&l(&[0]), &l(&[0, 1])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn f1_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let bias: f64 = rng.random_range(0.05..0.95);
            let t: Vec<Label> = (0..1000)
                .map(|_| Label::from_class(rng.random_bool(bias) as usize))
                .collect();
            let p: Vec<Label> = (0..1000)
                .map(|_| Label::from_class(rng.random_bool(0.5) as usize))
                .collect();
            assert!((macro_f1(&p, &t).unwrap() - reference(&p, &t)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn f1_bounded_and_relabel_symmetric(pairs in proptest::collection::vec((0usize..2, 0usize..2), 1..60)) {
            let p: Vec<Label> = pairs.iter().map(|x| Label::from_class(x.0)).collect();
            let t: Vec<Label> = pairs.iter().map(|x| Label::from_class(x.1)).collect();
            let f = macro_f1(&p, &t).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            let ps: Vec<Label> = p.iter().map(|x| Label::from_class(1 - x.class())).collect();
            let ts: Vec<Label> = t.iter().map(|x| Label::from_class(1 - x.class())).collect();
            prop_assert!((macro_f1(&ps, &ts).unwrap() - f).abs() < 1e-15);
        }
    }

    struct Constant([f64; 2]);

    impl LogitModel for Constant {
        fn logits(&self, batch: &[&[Volume; 4]]) -> Result<Vec<[f64; 2]>> {
            Ok(vec![self.0; batch.len()])
        }
    }

    /// Returns the true label's pattern, recovered from the scan's FLAIR
    /// slice-0 sign (`flip` inverts it).
    struct Oracle {
        flip: bool,
    }

    impl LogitModel for Oracle {
        fn logits(&self, batch: &[&[Volume; 4]]) -> Result<Vec<[f64; 2]>> {
            Ok(batch
                .iter()
                .map(|v| {
                    let pos = (v[0].slices[0].pixels()[[0, 0, 0]] > 0.0) != self.flip;
                    if pos {
                        [0.0, 1.0]
                    } else {
                        [1.0, 0.0]
                    }
                })
                .collect())
        }
    }

    fn scans(n: usize) -> Vec<Scan> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n)
            .map(|i| {
                let label = Label::from_class(i % 2);
                let mut s = random_scan(&mut rng, &format!("e{i}"), label, [3; 4], [2; 4], 8);
                let v = if i % 2 == 1 { 0.5 } else { -0.5 };
                s.volume_mut(crate::data::Modality::Flair).slices[0]
                    .pixels_mut()
                    .fill(v);
                s
            })
            .collect()
    }

    #[test]
    fn constant_model_tta() {
        let s = scans(1);
        let plan = TtaPlan::from_config(&AugmentConfig::default());
        let p = tta_predict(&Constant([0.2, -1.5]), &s[0], &plan).unwrap();
        assert_eq!(p.p_final, [0.8, -6.0]);
        assert_eq!(p.label, Label::Negative);
        let q = tta_predict(&Constant([0.2 * 7.0, -1.5 * 7.0]), &s[0], &plan).unwrap();
        assert_eq!(q.label, p.label);
    }

    #[test]
    fn ties_predict_class_zero() {
        assert_eq!(argmax([0.3, 0.3]), Label::Negative);
    }

    #[test]
    fn oracle_and_anti_oracle() {
        let data = scans(6);
        let refs: Vec<&Scan> = data.iter().collect();
        let plan = TtaPlan {
            rotation_deg: 0.0,
            hflip: true,
        };
        for tta in [None, Some(&plan)] {
            assert_eq!(
                evaluate_fold(&Oracle { flip: false }, &refs, tta)
                    .unwrap()
                    .macro_f1,
                1.0
            );
            assert_eq!(
                evaluate_fold(&Oracle { flip: true }, &refs, tta)
                    .unwrap()
                    .macro_f1,
                0.0
            );
        }
        assert!(matches!(
            evaluate_fold(&Oracle { flip: false }, &[], None),
            Err(Error::EmptyFold(_))
        ));
    }

    #[test]
    fn identity_tta_is_four_times_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = BtdNet::new(tiny_model_config(4), Topology::Full, &mut rng).unwrap();
        let data: Vec<Scan> = (0..3)
            .map(|i| {
                let len = random_lengths(&mut rng, [4; 4]);
                random_scan(&mut rng, &format!("x{i}"), Label::Negative, [4; 4], len, 10)
            })
            .collect();
        for s in &data {
            let plain = net.predict_one(s.volumes()).unwrap();
            let p = tta_predict(&net, s, &TtaPlan::identity()).unwrap();
            assert_eq!(p.p_final, [4.0 * plain[0], 4.0 * plain[1]]);
            assert_eq!(p.label, argmax(plain));
            let q = tta_predict(
                &net,
                s,
                &TtaPlan {
                    rotation_deg: 0.0,
                    hflip: true,
                },
            )
            .unwrap();
            assert_eq!(q.versions[0], plain);
            assert_eq!(q.versions[2], plain);
        }
        // with a real rotation, p_final is the sum of four separate forwards
        let plan = TtaPlan {
            rotation_deg: 9.0,
            hflip: true,
        };
        let p = tta_predict(&net, &data[0], &plan).unwrap();
        let vs = tta_versions(&data[0], &plan);
        let sep: Vec<[f64; 2]> = vs
            .iter()
            .map(|v| net.predict_one(v.volumes()).unwrap())
            .collect();
        let want = sum4(&sep);
        assert!((p.p_final[0] - want[0]).abs() < 1e-12 && (p.p_final[1] - want[1]).abs() < 1e-12);
    }

    #[test]
    fn dumps_round_trip_and_rescore() {
        let dir = tempfile::tempdir().unwrap();
        let data = scans(4);
        let refs: Vec<&Scan> = data.iter().collect();
        let ev = evaluate_fold(
            &Oracle { flip: false },
            &refs,
            Some(&TtaPlan {
                rotation_deg: 3.0,
                hflip: true,
            }),
        )
        .unwrap();
        let path = dir.path().join("preds_fold0.jsonl");
        write_predictions(&path, &ev.records).unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back, ev.records);
        assert_eq!(score_records(&back).unwrap(), ev.macro_f1);
    }

    #[test]
    fn aggregation() {
        let r = aggregate_folds(&[0.6, 0.7]).unwrap();
        assert!((r.mean - 0.65).abs() < 1e-15 && (r.spread - 0.1).abs() < 1e-15);
        assert_eq!(aggregate_folds(&[0.4, 0.4, 0.4]).unwrap().spread, 0.0);
        let one = aggregate_folds(&[0.8]).unwrap();
        assert_eq!((one.mean, one.spread), (0.8, 0.0));
        assert!(matches!(aggregate_folds(&[]), Err(Error::EmptyInput(_))));
        assert_eq!(r.to_string(), "65.0 ± 10.0");
    }
}
