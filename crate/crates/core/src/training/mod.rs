//! Two-phase training with mixed batches and sharpness-aware momentum SGD,
//! stratified cross-validation and checkpointing.

mod cv;
mod folds;
mod optim;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cv::{
    config_digest, cross_validate, evaluate_run, fold_dir, read_run_meta, CvOptions, CvSummary,
    EvalReport, FoldOutcome, RunMeta, EVAL_REPORT_FILE, RUN_META_FILE, TRAIN_LOG_FILE,
};
pub use folds::{derangement, stratified_kfold, FoldSplit};
pub use optim::{batch_objective, sam_step, train_step, Parameterized, SgdMomentum, StepEval};

use crate::augment::{sample_lambda, transform_scan, AugmentConfig};
use crate::data::{Modality, Scan};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_fold;
use crate::network::{ensure_same_arch, BtdNet, ModelConfig, Topology};
use crate::objective::{LossConfig, MixedBatch};

/// How the end-to-end phase starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase2Init {
    /// Shared CNN/RNN and routing weights from the best phase-1 streams.
    Phase1,
    /// Skip phase 1 entirely.
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub momentum: f64,
    pub sam_rho: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub seed: u64,
    pub folds: usize,
    pub phase2_init: Phase2Init,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            lr_phase1: 1e-4,
            lr_phase2: 1e-5,
            momentum: 0.9,
            sam_rho: 0.05,
            epochs_phase1: 30,
            epochs_phase2: 20,
            patience: 7,
            seed: 0,
            folds: 5,
            phase2_init: Phase2Init::Phase1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.batch_size < 2 {
            return bad(format!(
                "train.batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        for (k, v) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("train.{k} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "train.momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.sam_rho >= 0.0 && self.sam_rho.is_finite()) {
            return bad(format!("train.sam_rho must be >= 0, got {}", self.sam_rho));
        }
        if self.folds < 2 {
            return bad(format!(
                "train.folds must be at least 2, got {}",
                self.folds
            ));
        }
        if self.patience == 0 {
            return bad("train.patience must be at least 1".into());
        }
        Ok(())
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        self.loss.focal()?;
        self.train.validate()
    }
}

/// Indices of one fold's training and validation scans.
#[derive(Debug, Clone, Copy)]
pub struct FoldData<'a> {
    pub index: usize,
    pub data: &'a [Scan],
    pub train: &'a [usize],
    pub val: &'a [usize],
}

impl FoldData<'_> {
    fn val_scans(&self) -> Vec<&Scan> {
        self.val.iter().map(|&i| &self.data[i]).collect()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub fold: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    pub train_loss: f64,
    pub val_f1: f64,
    pub lr: f64,
    pub timestamp: f64,
}

impl EpochRecord {
    /// The record without its wall-clock field.
    pub fn curve_point(&self) -> (usize, u8, usize, Option<Modality>, f64, f64) {
        (
            self.epoch,
            self.phase,
            self.fold,
            self.modality,
            self.train_loss,
            self.val_f1,
        )
    }
}

/// Collects epoch records and optionally appends them to an NDJSON file.
#[derive(Debug, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    sink: Option<BufWriter<File>>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        TrainLog::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(TrainLog {
            records: Vec::new(),
            sink: Some(BufWriter::new(f)),
        })
    }

    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        if let Some(w) = &mut self.sink {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io("training log", e))?;
        }
        self.records.push(record);
        Ok(())
    }
}

pub fn read_train_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Best-validation model of one phase with its curve.
#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub model: BtdNet,
    pub best_val_f1: f64,
    /// 0 when no epoch beat the initialization.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Mixes `base` with a list of tags into an independent stream seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    tags.iter()
        .fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

const TAG_INIT: u64 = 101;
const TAG_TRAIN: u64 = 202;

fn stream_tag(m: Option<Modality>) -> u64 {
    m.map_or(4, |m| m.index() as u64)
}

/// Batch boundaries over `n` items; a trailing singleton joins the
/// previous batch so every batch can be paired.
fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> =
        (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() >= 2 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn run_phase(
    setup: &TrainSetup,
    fold: &FoldData,
    mut model: BtdNet,
    phase: u8,
    log: &mut TrainLog,
) -> Result<PhaseOutcome> {
    if fold.train.is_empty() || fold.val.is_empty() {
        return Err(Error::EmptyFold(format!(
            "fold {} has {} training and {} validation scans",
            fold.index,
            fold.train.len(),
            fold.val.len()
        )));
    }
    if fold.train.len() < 2 {
        return Err(Error::EmptyFold(format!(
            "fold {} needs at least 2 training scans to pair",
            fold.index
        )));
    }
    let tc = &setup.train;
    let (lr, epochs) = match phase {
        1 => (tc.lr_phase1, tc.epochs_phase1),
        _ => (tc.lr_phase2, tc.epochs_phase2),
    };
    let stream = match model.topology() {
        Topology::Stream(m) => Some(m),
        Topology::Full => None,
    };
    let modalities = model.topology().modalities();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        tc.seed,
        &[
            TAG_TRAIN,
            fold.index as u64,
            phase as u64,
            stream_tag(stream),
        ],
    ));
    let val = fold.val_scans();

    let mut best_f1 = evaluate_fold(&model, &val, None)?.macro_f1;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut opt = SgdMomentum::new(lr, tc.momentum);
    let mut order = fold.train.to_vec();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let ranges = batch_ranges(order.len(), tc.batch_size);
        for r in &ranges {
            let real: Vec<Scan> = order[r.clone()]
                .iter()
                .map(|&i| transform_scan(&fold.data[i], &modalities, &setup.augment, &mut rng))
                .collect();
            let lambda = sample_lambda(setup.augment.mix_alpha, &mut rng)?;
            let pairing = derangement(real.len(), &mut rng)?;
            let batch = MixedBatch::new(real, pairing, lambda)?;
            total += train_step(&mut model, &mut opt, tc.sam_rho, &batch, &setup.loss)?;
        }
        let val_f1 = evaluate_fold(&model, &val, None)?.macro_f1;
        let record = EpochRecord {
            epoch,
            phase,
            fold: fold.index,
            modality: stream,
            train_loss: total / ranges.len() as f64,
            val_f1,
            lr,
            timestamp: now(),
        };
        log::info!(
            "fold {} phase {phase}{} epoch {epoch}: loss {:.4} val F1 {val_f1:.4}",
            fold.index,
            stream.map(|m| format!(" {m}")).unwrap_or_default(),
            record.train_loss
        );
        history.push(record.clone());
        log.push(record)?;
        if val_f1 > best_f1 {
            best_f1 = val_f1;
            best = model.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= tc.patience {
            break;
        }
    }
    Ok(PhaseOutcome {
        model: best,
        best_val_f1: best_f1,
        best_epoch,
        history,
    })
}

/// Fresh stream model for phase 1 of `fold`.
pub fn init_stream(setup: &TrainSetup, fold: usize, modality: Modality) -> Result<BtdNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        setup.train.seed,
        &[TAG_INIT, fold as u64, 1, stream_tag(Some(modality))],
    ));
    BtdNet::new(setup.model.clone(), Topology::Stream(modality), &mut rng)
}

/// Trains one modality stream (CNN, RNN, routing and a temporary head).
pub fn train_phase1(
    setup: &TrainSetup,
    fold: &FoldData,
    modality: Modality,
    log: &mut TrainLog,
) -> Result<PhaseOutcome> {
    setup.validate()?;
    run_phase(
        setup,
        fold,
        init_stream(setup, fold.index, modality)?,
        1,
        log,
    )
}

/// A finished phase-1 stream.
#[derive(Debug, Clone)]
pub struct StreamModel {
    pub model: BtdNet,
    pub val_f1: f64,
}

/// Builds the full model: fusion layers fresh, CNN and RNN from the best
/// stream, each routing group from its best member stream.
pub fn init_phase2(setup: &TrainSetup, fold: usize, streams: &[StreamModel]) -> Result<BtdNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        setup.train.seed,
        &[TAG_INIT, fold as u64, 2, 4],
    ));
    let mut net = BtdNet::new(setup.model.clone(), Topology::Full, &mut rng)?;
    let mut seen = Vec::new();
    for s in streams {
        ensure_same_arch(&setup.model, s.model.config(), "phase-1 stream")?;
        match s.model.topology() {
            Topology::Stream(m) if !seen.contains(&m) => seen.push(m),
            other => {
                return Err(Error::CheckpointMismatch(format!(
                    "expected one stream per modality, got {other:?}"
                )))
            }
        }
    }
    // first maximum in modality order wins ties
    let best_of = |members: &[Modality]| {
        streams
            .iter()
            .filter(|s| {
                members
                    .iter()
                    .any(|m| s.model.topology() == Topology::Stream(*m))
            })
            .fold(None::<&StreamModel>, |b, s| match b {
                Some(b) if b.val_f1 >= s.val_f1 => Some(b),
                _ => Some(s),
            })
    };
    if let Some(best) = best_of(&Modality::ALL) {
        net.store_mut()
            .copy_prefix_from(best.model.store(), "cnn.")?;
        net.store_mut()
            .copy_prefix_from(best.model.store(), "rnn.")?;
    }
    for group in setup.model.routing_groups() {
        if let Some(best) = best_of(&group) {
            let prefix = format!("routing.{}.", setup.model.routing_group_name(group[0]));
            net.store_mut()
                .copy_prefix_from(best.model.store(), &prefix)?;
        }
    }
    Ok(net)
}

/// End-to-end training of the full model, started from `streams` (or from
/// scratch when empty).
pub fn train_phase2(
    setup: &TrainSetup,
    fold: &FoldData,
    streams: &[StreamModel],
    log: &mut TrainLog,
) -> Result<PhaseOutcome> {
    setup.validate()?;
    run_phase(
        setup,
        fold,
        init_phase2(setup, fold.index, streams)?,
        2,
        log,
    )
}
