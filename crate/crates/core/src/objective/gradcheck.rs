use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use super::{record_objective, LossConfig, MixedBatch};
use crate::autodiff::Graph;
use crate::error::Result;
use crate::network::{BtdNet, Mode};

/// Denominator floor of the relative error `|a - n| / max(|a|, |n|, floor)`.
/// Central differences with step 1e-5 carry an absolute error of about 1e-10
/// here, so components smaller than this floor are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub step: f64,
    pub floor: f64,
}

fn loss_value(model: &BtdNet, batch: &MixedBatch, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new(model.store());
    let obj = record_objective(&mut g, model, batch, cfg, Mode::Train, false)?;
    Ok(g.scalar(obj.loss))
}

/// Splits `n` picks evenly over tensors of the given sizes; tensors too
/// small for their share pass the rest on to larger ones.
fn spread_quota(n: usize, sizes: &[usize]) -> Vec<usize> {
    let mut quota = vec![0; sizes.len()];
    let mut left = n.min(sizes.iter().sum());
    while left > 0 {
        for (q, &len) in quota.iter_mut().zip(sizes) {
            if left > 0 && *q < len {
                *q += 1;
                left -= 1;
            }
        }
    }
    quota
}

/// Compares analytic gradients of the mixed-batch objective with central
/// differences on at least `n_params` randomly chosen trainable scalars,
/// drawn evenly across parameter tensors.
pub fn loss_gradient_check<R: Rng + ?Sized>(
    model: &BtdNet,
    batch: &MixedBatch,
    cfg: &LossConfig,
    n_params: usize,
    step: f64,
    rng: &mut R,
) -> Result<GradcheckReport> {
    let mut g = Graph::new(model.store());
    let obj = record_objective(&mut g, model, batch, cfg, Mode::Train, false)?;
    let grads = g.backward(obj.loss);
    drop(g);

    let ids: Vec<_> = model.store().trainable_ids().collect();
    let sizes: Vec<usize> = ids.iter().map(|&id| model.store().get(id).len()).collect();
    let quota = spread_quota(n_params, &sizes);
    let mut probe = model.clone();
    let mut report = GradcheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        step,
        floor: GRADCHECK_FLOOR,
    };
    for (id, (&len, &k)) in ids.into_iter().zip(sizes.iter().zip(&quota)) {
        let picks = sample(rng, len, k).into_vec();
        for idx in picks {
            let analytic = grads
                .param(id)
                .map_or(0.0, |t| t.as_slice().expect("standard layout")[idx]);
            let orig = model.store().get(id).as_slice().expect("standard layout")[idx];
            probe
                .store_mut()
                .get_mut(id)
                .as_slice_mut()
                .expect("standard layout")[idx] = orig + step;
            let up = loss_value(&probe, batch, cfg)?;
            probe
                .store_mut()
                .get_mut(id)
                .as_slice_mut()
                .expect("standard layout")[idx] = orig - step;
            let down = loss_value(&probe, batch, cfg)?;
            probe
                .store_mut()
                .get_mut(id)
                .as_slice_mut()
                .expect("standard layout")[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst_param = model.store().name(id).to_string();
                report.worst_index = idx;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
