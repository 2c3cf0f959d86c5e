use std::collections::HashMap;

use crate::autodiff::{BnUpdate, Graph, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::network::{BtdNet, Mode};
use crate::objective::{record_objective, LossConfig, MixedBatch};

/// Anything that owns a parameter store.
pub trait Parameterized {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl Parameterized for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

impl Parameterized for BtdNet {
    fn params(&self) -> &ParamStore {
        self.store()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.store_mut()
    }
}

/// Loss, parameter gradients and queued batch-norm statistics of one
/// objective evaluation.
#[derive(Debug, Clone, Default)]
pub struct StepEval {
    pub loss: f64,
    pub grads: HashMap<ParamId, Tensor>,
    pub bn_updates: Vec<BnUpdate>,
}

/// `v <- mu v + g; theta <- theta - lr v`. Parameters without a gradient
/// are left alone.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<ParamId, Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Tensor>) {
        for (&id, g) in grads {
            if !store.is_trainable(id) {
                continue;
            }
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = self.momentum * *v + g);
            let lr = self.lr;
            store.get_mut(id).zip_mut_with(v, |p, &v| *p -= lr * v);
        }
    }
}

fn global_norm(grads: &HashMap<ParamId, Tensor>, store: &ParamStore) -> f64 {
    let mut ids: Vec<&ParamId> = grads.keys().filter(|&&id| store.is_trainable(id)).collect();
    ids.sort_unstable();
    ids.iter()
        .map(|id| grads[id].iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Sharpness-aware step: gradient at `theta`, then at
/// `theta + rho g / |g|`, which updates the original `theta`. With
/// `rho = 0` or a zero gradient this is exactly one momentum step.
/// Returns the evaluation at the unperturbed point.
pub fn sam_step<M, F>(
    model: &mut M,
    opt: &mut SgdMomentum,
    rho: f64,
    mut objective: F,
) -> Result<StepEval>
where
    M: Parameterized,
    F: FnMut(&M) -> Result<StepEval>,
{
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "SAM rho must be >= 0, got {rho}"
        )));
    }
    let first = objective(model)?;
    if !first.loss.is_finite() {
        return Err(Error::NonFiniteInput(format!("loss {}", first.loss)));
    }
    let norm = global_norm(&first.grads, model.params());
    if !norm.is_finite() {
        return Err(Error::NonFiniteInput("gradient norm".into()));
    }
    if rho == 0.0 || norm == 0.0 {
        opt.step(model.params_mut(), &first.grads);
        return Ok(first);
    }
    let store = model.params_mut();
    let mut saved = Vec::with_capacity(first.grads.len());
    for (&id, g) in &first.grads {
        if !store.is_trainable(id) {
            continue;
        }
        let p = store.get_mut(id);
        saved.push((id, p.clone()));
        p.zip_mut_with(g, |p, &g| *p += rho * g / norm);
    }
    let second = objective(model);
    let store = model.params_mut();
    for (id, p) in saved {
        *store.get_mut(id) = p;
    }
    opt.step(store, &second?.grads);
    Ok(first)
}

/// Evaluates the mixed-batch objective of `net` in training mode.
pub fn batch_objective(net: &BtdNet, batch: &MixedBatch, cfg: &LossConfig) -> Result<StepEval> {
    let mut g = Graph::new(net.store());
    let obj = record_objective(&mut g, net, batch, cfg, Mode::Train, false)?;
    let loss = g.scalar(obj.loss);
    let bn_updates = g.take_bn_updates();
    let grads = g.backward(obj.loss).into_params();
    Ok(StepEval {
        loss,
        grads,
        bn_updates,
    })
}

/// One sharpness-aware step on a mixed batch; running statistics follow
/// the unperturbed forward pass.
pub fn train_step(
    net: &mut BtdNet,
    opt: &mut SgdMomentum,
    rho: f64,
    batch: &MixedBatch,
    cfg: &LossConfig,
) -> Result<f64> {
    let first = sam_step(net, opt, rho, |m| batch_objective(m, batch, cfg))?;
    net.apply_bn_updates(&first.bn_updates);
    Ok(first.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn scalar_store(theta: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add_param("theta", ArrayD::from_elem(IxDyn(&[1]), theta));
        (s, id)
    }

    fn square(id: ParamId) -> impl Fn(&ParamStore) -> Result<StepEval> {
        move |s: &ParamStore| {
            let t = s.get(id)[[0]];
            let mut grads = HashMap::new();
            grads.insert(id, ArrayD::from_elem(IxDyn(&[1]), 2.0 * t));
            Ok(StepEval {
                loss: t * t,
                grads,
                bn_updates: Vec::new(),
            })
        }
    }

    #[test]
    fn quadratic_plain_step() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = SgdMomentum::new(0.1, 0.0);
        sam_step(&mut s, &mut opt, 0.0, square(id)).unwrap();
        assert!((s.get(id)[[0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn quadratic_sam_step() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = SgdMomentum::new(0.1, 0.0);
        let first = sam_step(&mut s, &mut opt, 0.1, square(id)).unwrap();
        assert_eq!(first.loss, 1.0);
        assert!((s.get(id)[[0]] - 0.78).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_skips_perturbation() {
        let (mut s, id) = scalar_store(0.0);
        let mut opt = SgdMomentum::new(0.1, 0.9);
        let mut calls = 0;
        sam_step(&mut s, &mut opt, 0.5, |m: &ParamStore| {
            calls += 1;
            square(id)(m)
        })
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(s.get(id)[[0]], 0.0);
    }

    #[test]
    fn momentum_accumulates() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = SgdMomentum::new(0.1, 0.9);
        sam_step(&mut s, &mut opt, 0.0, square(id)).unwrap();
        // v = 2, theta = 0.8; v = 0.9*2 + 1.6 = 3.4, theta = 0.8 - 0.34
        sam_step(&mut s, &mut opt, 0.0, square(id)).unwrap();
        assert!((s.get(id)[[0]] - 0.46).abs() < 1e-15);
    }

    #[test]
    fn rejects_negative_rho() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = SgdMomentum::new(0.1, 0.0);
        assert!(sam_step(&mut s, &mut opt, -0.1, square(id)).is_err());
    }

    #[test]
    fn buffers_are_not_stepped() {
        let mut s = ParamStore::new();
        let b = s.add_buffer("bn.running_mean", ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let mut grads = HashMap::new();
        grads.insert(b, ArrayD::from_elem(IxDyn(&[1]), 1.0));
        SgdMomentum::new(1.0, 0.0).step(&mut s, &grads);
        assert_eq!(s.get(b)[[0]], 3.0);
    }
}
