//! Binary focal loss on two-logit outputs and the mixed-batch objective.

mod gradcheck;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

pub use gradcheck::{loss_gradient_check, GradcheckReport, GRADCHECK_FLOOR};

use crate::augment::{mix_scans, mixing_weights, VirtualExample};
use crate::autodiff::{Graph, Var};
use crate::data::{Label, Scan, Volume};
use crate::error::{Error, Result};
use crate::network::{BtdNet, ForwardTrace, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    alpha: f64,
    gamma: f64,
}

impl FocalParams {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "focal alpha must lie in (0, 1), got {alpha}"
            )));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "focal gamma must be >= 0, got {gamma}"
            )));
        }
        Ok(FocalParams { alpha, gamma })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Apply both focal terms to every sample, with `p` the probability of
    /// the labelled class.
    pub literal_eq2: bool,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.25,
            gamma: 2.0,
            literal_eq2: false,
            reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn focal(&self) -> Result<FocalParams> {
        FocalParams::new(self.alpha, self.gamma)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `-alpha (1-p)^gamma log p` with `p = sigmoid(d)`, and its derivative in `d`.
fn pos_term(d: f64, p: FocalParams) -> (f64, f64) {
    let log_p = -softplus(-d);
    let log_q = -softplus(d);
    let (pp, q) = (log_p.exp(), log_q.exp());
    let w = (p.gamma * log_q).exp();
    let value = -p.alpha * w * log_p;
    let grad = -p.alpha * w * (q - p.gamma * pp * log_p);
    (value, grad)
}

/// `-(1-alpha) p^gamma log(1-p)` with `p = sigmoid(d)`, and its derivative.
fn neg_term(d: f64, p: FocalParams) -> (f64, f64) {
    let log_p = -softplus(-d);
    let log_q = -softplus(d);
    let (pp, q) = (log_p.exp(), log_q.exp());
    let w = (p.gamma * log_p).exp();
    let value = -(1.0 - p.alpha) * w * log_q;
    let grad = -(1.0 - p.alpha) * w * (p.gamma * q * log_q - pp);
    (value, grad)
}

/// Focal loss of one sample for hard class `c`, with the derivative with
/// respect to the margin `d = z1 - z0`.
pub fn focal_term(logits: [f64; 2], class: usize, p: FocalParams, literal: bool) -> (f64, f64) {
    let d = logits[1] - logits[0];
    match (literal, class) {
        (false, 1) => pos_term(d, p),
        (false, _) => neg_term(d, p),
        (true, 1) => {
            let (a, da) = pos_term(d, p);
            let (b, db) = neg_term(d, p);
            (a + b, da + db)
        }
        (true, _) => {
            // same form with p the probability of class 0, i.e. margin -d
            let (a, da) = pos_term(-d, p);
            let (b, db) = neg_term(-d, p);
            (a + b, -(da + db))
        }
    }
}

fn check_finite(logits: &[[f64; 2]]) -> Result<()> {
    if let Some(bad) = logits.iter().flatten().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!("logit {bad}")));
    }
    Ok(())
}

/// Loss and `dL/dlogits` for per-sample class weights `w[b] = [w0, w1]`:
/// `sum_b (w0 FL(z_b, 0) + w1 FL(z_b, 1))`, then reduced.
pub fn weighted_focal(
    logits: &[[f64; 2]],
    weights: &[[f64; 2]],
    cfg: &LossConfig,
) -> Result<(f64, Vec<[f64; 2]>)> {
    if logits.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows, {} targets",
            logits.len(),
            weights.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput("focal loss of an empty batch".into()));
    }
    check_finite(logits)?;
    let p = cfg.focal()?;
    let scale = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / logits.len() as f64,
    };
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, w) in logits.iter().zip(weights) {
        let mut dd = 0.0;
        for c in 0..2 {
            if w[c] != 0.0 {
                let (v, g) = focal_term(*z, c, p, cfg.literal_eq2);
                total += w[c] * v;
                dd += w[c] * g;
            }
        }
        grads.push([-dd * scale, dd * scale]);
    }
    Ok((total * scale, grads))
}

fn one_hot(labels: &[Label]) -> Vec<[f64; 2]> {
    labels.iter().map(|l| l.one_hot()).collect()
}

/// Focal loss of a batch with hard labels.
pub fn focal_loss(logits: &[[f64; 2]], labels: &[Label], cfg: &LossConfig) -> Result<f64> {
    Ok(weighted_focal(logits, &one_hot(labels), cfg)?.0)
}

/// Per-sample class weights of the virtual term:
/// `lambda FL(., y_i) + (1 - lambda) FL(., y_j)`.
pub fn virtual_weights(y_i: &[Label], y_j: &[Label], lambda: f64) -> Result<Vec<[f64; 2]>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    if y_i.len() != y_j.len() {
        return Err(Error::ShapeMismatch("label lists differ in length".into()));
    }
    let (wi, wj) = mixing_weights(lambda);
    Ok(y_i
        .iter()
        .zip(y_j)
        .map(|(a, b)| {
            let mut w = [0.0; 2];
            w[a.class()] += wi;
            w[b.class()] += wj;
            w
        })
        .collect())
}

/// `L_v + L_ri + L_rj`.
pub fn total_loss(
    logits_v: &[[f64; 2]],
    logits_ri: &[[f64; 2]],
    logits_rj: &[[f64; 2]],
    y_i: &[Label],
    y_j: &[Label],
    lambda: f64,
    cfg: &LossConfig,
) -> Result<f64> {
    let lv = weighted_focal(logits_v, &virtual_weights(y_i, y_j, lambda)?, cfg)?.0;
    let li = focal_loss(logits_ri, y_i, cfg)?;
    let lj = focal_loss(logits_rj, y_j, cfg)?;
    Ok(lv + li + lj)
}

/// Records a weighted focal loss of `logits` (`[B, 2]`) on the graph.
pub fn graph_focal(
    g: &mut Graph,
    logits: Var,
    weights: &[[f64; 2]],
    cfg: &LossConfig,
) -> Result<Var> {
    let rows = crate::network::logit_rows(g.value(logits));
    let (value, grads) = weighted_focal(&rows, weights, cfg)?;
    let flat: Vec<f64> = grads.into_iter().flatten().collect();
    let dx = ArrayD::from_shape_vec(IxDyn(&[rows.len(), 2]), flat).expect("two logits per row");
    Ok(g.scalar_fn(logits, value, dx))
}

/// Records the mixed-batch objective. `logits_rj` is usually a row
/// permutation of `logits_ri`.
#[allow(clippy::too_many_arguments)]
pub fn graph_total_loss(
    g: &mut Graph,
    logits_v: Var,
    logits_ri: Var,
    logits_rj: Var,
    y_i: &[Label],
    y_j: &[Label],
    lambda: f64,
    cfg: &LossConfig,
) -> Result<Var> {
    let lv = graph_focal(g, logits_v, &virtual_weights(y_i, y_j, lambda)?, cfg)?;
    let li = graph_focal(g, logits_ri, &one_hot(y_i), cfg)?;
    let lj = graph_focal(g, logits_rj, &one_hot(y_j), cfg)?;
    let s = g.add(lv, li);
    Ok(g.add(s, lj))
}

/// Real (transformed) scans, their pairing `i -> pairing[i]` and the
/// virtual examples mixed from each pair with one shared lambda.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub real: Vec<Scan>,
    pub pairing: Vec<usize>,
    pub lambda: f64,
    pub virtuals: Vec<VirtualExample>,
}

impl MixedBatch {
    pub fn new(real: Vec<Scan>, pairing: Vec<usize>, lambda: f64) -> Result<Self> {
        if pairing.len() != real.len() || pairing.iter().any(|&j| j >= real.len()) {
            return Err(Error::ShapeMismatch("pairing must index the batch".into()));
        }
        let virtuals = pairing
            .iter()
            .enumerate()
            .map(|(i, &j)| mix_scans(&real[i], &real[j], lambda))
            .collect::<Result<Vec<_>>>()?;
        Ok(MixedBatch {
            real,
            pairing,
            lambda,
            virtuals,
        })
    }

    pub fn labels_i(&self) -> Vec<Label> {
        self.real.iter().map(|s| s.label).collect()
    }

    pub fn labels_j(&self) -> Vec<Label> {
        self.pairing.iter().map(|&j| self.real[j].label).collect()
    }
}

/// Graph handles of one recorded objective.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub loss: Var,
    pub real: ForwardTrace,
    pub virt: ForwardTrace,
    pub logits_rj: Var,
}

/// Forwards the virtual and the real batch and records
/// `L_v + L_ri + L_rj` on `g`.
pub fn record_objective(
    g: &mut Graph,
    model: &BtdNet,
    batch: &MixedBatch,
    cfg: &LossConfig,
    mode: Mode,
    input_grad: bool,
) -> Result<BatchObjective> {
    let virt_in: Vec<&[Volume; 4]> = batch.virtuals.iter().map(|v| &v.volumes).collect();
    let real_in: Vec<&[Volume; 4]> = batch.real.iter().map(|s| s.volumes()).collect();
    let virt = model.forward(g, &virt_in, mode, input_grad)?;
    let real = model.forward(g, &real_in, mode, input_grad)?;
    let logits_rj = g.gather_rows(real.logits, &batch.pairing);
    let loss = graph_total_loss(
        g,
        virt.logits,
        real.logits,
        logits_rj,
        &batch.labels_i(),
        &batch.labels_j(),
        batch.lambda,
        cfg,
    )?;
    Ok(BatchObjective {
        loss,
        real,
        virt,
        logits_rj,
    })
}

#[cfg(test)]
mod tests;
