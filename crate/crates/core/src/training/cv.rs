use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{stratified_kfold, EpochRecord};
use super::{
    train_phase1, train_phase2, FoldData, FoldSplit, Phase2Init, StreamModel, TrainLog, TrainSetup,
};
use crate::augment::TtaPlan;
use crate::data::{Modality, Scan};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate_folds, evaluate_fold, write_predictions, FoldReport};
use crate::network::{
    load_checkpoint, save_checkpoint, BtdNet, CheckpointMeta, ModelKind, Topology,
};

pub const RUN_META_FILE: &str = "run_meta.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const TRAIN_LOG_FILE: &str = "train_log.ndjson";

pub fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join("ckpt").join(format!("fold{fold}"))
}

fn phase1_path(out: &Path, fold: usize, m: Modality) -> PathBuf {
    fold_dir(out, fold).join(format!("phase1_{m}_best.bin"))
}

fn phase2_path(out: &Path, fold: usize) -> PathBuf {
    fold_dir(out, fold).join("phase2_best.bin")
}

/// Hex SHA-256 of the canonical JSON form of `setup`.
pub fn config_digest(setup: &TrainSetup) -> Result<String> {
    let json = serde_json::to_vec(setup)?;
    Ok(Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[derive(Debug, Clone, Default)]
pub struct CvOptions {
    /// Where logs, checkpoints and reports go; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    /// Subset of folds to run; all when unset.
    pub folds: Option<Vec<usize>>,
    /// Extra configuration recorded verbatim in the run metadata.
    pub extra_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub code_version: String,
    pub config_digest: String,
    pub setup: TrainSetup,
    #[serde(default)]
    pub extra_config: Option<serde_json::Value>,
    pub seed: u64,
    pub tta_seed: u64,
    pub tta_rotation_deg: f64,
    pub init: String,
    pub scan_ids: Vec<String>,
    /// Validation scan ids per fold.
    pub folds: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub spread: f64,
    pub folds: Vec<usize>,
    pub config_digest: String,
    pub tta: bool,
    pub tta_seed: u64,
    pub tta_rotation_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldOutcome {
    pub fold: usize,
    /// Best validation macro F1 of each phase-1 stream.
    pub phase1: Vec<(Modality, f64)>,
    pub phase2_val_f1: f64,
    pub phase2_best_epoch: usize,
    /// Validation macro F1 of the phase-2 model with test-time augmentation.
    pub tta_f1: f64,
}

#[derive(Debug, Clone)]
pub struct CvSummary {
    pub split: FoldSplit,
    pub folds: Vec<FoldOutcome>,
    pub phase1: Vec<(Modality, FoldReport)>,
    pub phase2: FoldReport,
    pub tta: FoldReport,
    pub log: Vec<EpochRecord>,
    pub models: Vec<BtdNet>,
}

impl CvSummary {
    /// Highest mean phase-1 score over modalities, if phase 1 ran.
    pub fn best_phase1(&self) -> Option<(Modality, f64)> {
        self.phase1
            .iter()
            .map(|(m, r)| (*m, r.mean))
            .fold(None, |b, x| match b {
                Some(b) if b.1 >= x.1 => Some(b),
                _ => Some(x),
            })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn selected_folds(k: usize, wanted: Option<&[usize]>) -> Result<Vec<usize>> {
    match wanted {
        None => Ok((0..k).collect()),
        Some(list) => {
            if let Some(&bad) = list.iter().find(|&&f| f >= k) {
                return Err(Error::InvalidParameter(format!(
                    "fold {bad} out of range for {k} folds"
                )));
            }
            Ok(list.to_vec())
        }
    }
}

/// Stratified k-fold run of both phases, followed by a TTA evaluation of
/// each fold's phase-2 model.
pub fn cross_validate(setup: &TrainSetup, data: &[Scan], opts: &CvOptions) -> Result<CvSummary> {
    setup.validate()?;
    let labels: Vec<_> = data.iter().map(|s| s.label).collect();
    let split = stratified_kfold(&labels, setup.train.folds, setup.train.seed)?;
    let fold_ids = selected_folds(split.k(), opts.folds.as_deref())?;
    let plan = TtaPlan::from_config(&setup.augment);
    let digest = config_digest(setup)?;

    let mut log = match &opts.out_dir {
        Some(out) => {
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let ids: Vec<String> = data.iter().map(|s| s.scan_id.clone()).collect();
            let meta = RunMeta {
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                config_digest: digest.clone(),
                setup: setup.clone(),
                extra_config: opts.extra_config.clone(),
                seed: setup.train.seed,
                tta_seed: setup.augment.tta_seed,
                tta_rotation_deg: plan.rotation_deg,
                init: "fan-in uniform dense/conv, orthogonal recurrent, forget bias 1".into(),
                folds: split.to_ids(&ids),
                scan_ids: ids,
            };
            write_json(&out.join(RUN_META_FILE), &meta)?;
            TrainLog::to_file(&out.join(TRAIN_LOG_FILE))?
        }
        None => TrainLog::in_memory(),
    };

    let mut outcomes = Vec::new();
    let mut models = Vec::new();
    for &f in &fold_ids {
        let train = split.train(f);
        let fold = FoldData {
            index: f,
            data,
            train: &train,
            val: split.validation(f),
        };
        let mut streams = Vec::new();
        if setup.train.phase2_init == Phase2Init::Phase1 {
            for m in Modality::ALL {
                let out = train_phase1(setup, &fold, m, &mut log)?;
                if let Some(dir) = &opts.out_dir {
                    let meta = CheckpointMeta {
                        kind: ModelKind::Phase1,
                        topology: Topology::Stream(m),
                        fold: Some(f),
                        epoch: Some(out.best_epoch),
                        val_f1: Some(out.best_val_f1),
                    };
                    save_checkpoint(&phase1_path(dir, f, m), &out.model, &meta)?;
                }
                streams.push(StreamModel {
                    model: out.model,
                    val_f1: out.best_val_f1,
                });
            }
        }
        let p2 = train_phase2(setup, &fold, &streams, &mut log)?;
        let val = fold.val_scans();
        let ev = evaluate_fold(&p2.model, &val, Some(&plan))?;
        if let Some(dir) = &opts.out_dir {
            let meta = CheckpointMeta {
                kind: ModelKind::Phase2,
                topology: Topology::Full,
                fold: Some(f),
                epoch: Some(p2.best_epoch),
                val_f1: Some(p2.best_val_f1),
            };
            save_checkpoint(&phase2_path(dir, f), &p2.model, &meta)?;
            write_predictions(&dir.join(format!("preds_fold{f}.jsonl")), &ev.records)?;
        }
        log::info!(
            "fold {f}: phase-2 val F1 {:.4}, with TTA {:.4}",
            p2.best_val_f1,
            ev.macro_f1
        );
        outcomes.push(FoldOutcome {
            fold: f,
            phase1: streams
                .iter()
                .zip(Modality::ALL)
                .map(|(s, m)| (m, s.val_f1))
                .collect(),
            phase2_val_f1: p2.best_val_f1,
            phase2_best_epoch: p2.best_epoch,
            tta_f1: ev.macro_f1,
        });
        models.push(p2.model);
    }

    let mut phase1 = Vec::new();
    if setup.train.phase2_init == Phase2Init::Phase1 {
        for (i, m) in Modality::ALL.into_iter().enumerate() {
            let scores: Vec<f64> = outcomes.iter().map(|o| o.phase1[i].1).collect();
            phase1.push((m, aggregate_folds(&scores)?));
        }
    }
    let phase2 = aggregate_folds(&outcomes.iter().map(|o| o.phase2_val_f1).collect::<Vec<_>>())?;
    let tta = aggregate_folds(&outcomes.iter().map(|o| o.tta_f1).collect::<Vec<_>>())?;
    if let Some(dir) = &opts.out_dir {
        let report = EvalReport {
            per_fold: tta.per_fold.clone(),
            mean: tta.mean,
            spread: tta.spread,
            folds: fold_ids.clone(),
            config_digest: digest,
            tta: true,
            tta_seed: setup.augment.tta_seed,
            tta_rotation_deg: plan.rotation_deg,
        };
        write_json(&dir.join(EVAL_REPORT_FILE), &report)?;
    }
    Ok(CvSummary {
        split,
        folds: outcomes,
        phase1,
        phase2,
        tta,
        log: log.records,
        models,
    })
}

pub fn read_run_meta(run_dir: &Path) -> Result<RunMeta> {
    let path = run_dir.join(RUN_META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Re-evaluates the phase-2 checkpoints of a finished run on its
/// validation folds and rewrites the prediction dumps and report.
pub fn evaluate_run(
    run_dir: &Path,
    data: &[Scan],
    tta: bool,
    folds: Option<&[usize]>,
) -> Result<EvalReport> {
    let meta = read_run_meta(run_dir)?;
    let plan = TtaPlan::from_config(&meta.setup.augment);
    let fold_ids = selected_folds(meta.folds.len(), folds)?;
    let mut scores = Vec::new();
    for &f in &fold_ids {
        let val: Vec<&Scan> = meta.folds[f]
            .iter()
            .map(|id| {
                data.iter().find(|s| &s.scan_id == id).ok_or_else(|| {
                    Error::InvalidManifest(format!("scan {id} of fold {f} is not in the dataset"))
                })
            })
            .collect::<Result<_>>()?;
        let (model, _) = load_checkpoint(&phase2_path(run_dir, f))?;
        let ev = evaluate_fold(&model, &val, tta.then_some(&plan))?;
        write_predictions(&run_dir.join(format!("preds_fold{f}.jsonl")), &ev.records)?;
        scores.push(ev.macro_f1);
    }
    let agg = aggregate_folds(&scores)?;
    let report = EvalReport {
        per_fold: agg.per_fold,
        mean: agg.mean,
        spread: agg.spread,
        folds: fold_ids,
        config_digest: meta.config_digest,
        tta,
        tta_seed: meta.setup.augment.tta_seed,
        tta_rotation_deg: plan.rotation_deg,
    };
    write_json(&run_dir.join(EVAL_REPORT_FILE), &report)?;
    Ok(report)
}
