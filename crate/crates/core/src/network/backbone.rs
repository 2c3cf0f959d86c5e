use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init;
use crate::autodiff::{ConvSpec, Graph, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    TinyCnn,
    Resnet18Gap,
}

impl BackboneKind {
    pub fn feature_dim(self) -> usize {
        match self {
            BackboneKind::TinyCnn => TINY_WIDTHS[2],
            BackboneKind::Resnet18Gap => 512,
        }
    }

    /// Smallest accepted slice side.
    pub fn min_side(self) -> usize {
        match self {
            BackboneKind::TinyCnn => 2,
            BackboneKind::Resnet18Gap => 32,
        }
    }

    pub fn has_batch_norm(self) -> bool {
        matches!(self, BackboneKind::Resnet18Gap)
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny_cnn" => Ok(BackboneKind::TinyCnn),
            "resnet18_gap" => Ok(BackboneKind::Resnet18Gap),
            other => Err(format!("unknown backbone '{other}'")),
        }
    }
}

/// Side of the parameter-free average-pool stem of `tiny_cnn`.
pub const TINY_STEM: usize = 16;
const TINY_WIDTHS: [usize; 3] = [8, 16, 32];
const BN_EPS: f64 = 1e-5;

pub(super) fn init_params<R: Rng + ?Sized>(
    kind: BackboneKind,
    store: &mut ParamStore,
    rng: &mut R,
) {
    match kind {
        BackboneKind::TinyCnn => {
            let mut cin = 3;
            for (i, &w) in TINY_WIDTHS.iter().enumerate() {
                let p = format!("cnn.conv{}", i + 1);
                store.add_param(
                    &format!("{p}.weight"),
                    init::uniform(rng, &[w, cin, 3, 3], cin * 9),
                );
                store.add_param(&format!("{p}.bias"), init::uniform(rng, &[w], cin * 9));
                cin = w;
            }
        }
        BackboneKind::Resnet18Gap => {
            conv_no_bias(store, rng, "cnn.conv1", 64, 3, 7);
            bn(store, "cnn.bn1", 64);
            let mut cin = 64;
            for (li, &w) in [64, 128, 256, 512].iter().enumerate() {
                for bi in 0..2 {
                    let p = format!("cnn.layer{}.{bi}", li + 1);
                    let stride = if bi == 0 && li > 0 { 2 } else { 1 };
                    conv_no_bias(store, rng, &format!("{p}.conv1"), w, cin, 3);
                    bn(store, &format!("{p}.bn1"), w);
                    conv_no_bias(store, rng, &format!("{p}.conv2"), w, w, 3);
                    bn(store, &format!("{p}.bn2"), w);
                    if bi == 0 && (stride != 1 || cin != w) {
                        conv_no_bias(store, rng, &format!("{p}.downsample.0"), w, cin, 1);
                        bn(store, &format!("{p}.downsample.1"), w);
                    }
                    cin = w;
                }
            }
        }
    }
}

fn conv_no_bias<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    out: usize,
    cin: usize,
    k: usize,
) {
    store.add_param(
        &format!("{name}.weight"),
        init::uniform(rng, &[out, cin, k, k], cin * k * k),
    );
}

pub(super) fn bn(store: &mut ParamStore, name: &str, c: usize) {
    store.add_param(&format!("{name}.weight"), ArrayD::ones(IxDyn(&[c])));
    store.add_param(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[c])));
    store.add_buffer(&format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[c])));
    store.add_buffer(&format!("{name}.running_var"), ArrayD::ones(IxDyn(&[c])));
}

pub(super) fn apply_bn(g: &mut Graph, x: Var, name: &str, training: bool) -> Var {
    let gamma = g.param(&format!("{name}.weight"));
    let beta = g.param(&format!("{name}.bias"));
    let store = g.store();
    let rm = store
        .id(&format!("{name}.running_mean"))
        .expect("batch-norm buffers");
    let rv = store
        .id(&format!("{name}.running_var"))
        .expect("batch-norm buffers");
    g.batch_norm(x, gamma, beta, rm, rv, training, BN_EPS)
}

/// `[N, 3, H, W] -> [N, D]`.
pub(super) fn forward(kind: BackboneKind, g: &mut Graph, x: Var, training: bool) -> Var {
    match kind {
        BackboneKind::TinyCnn => {
            let mut h = g.adaptive_avg_pool(x, TINY_STEM);
            for i in 1..=3 {
                let w = g.param(&format!("cnn.conv{i}.weight"));
                let b = g.param(&format!("cnn.conv{i}.bias"));
                h = g.conv2d(h, w, Some(b), ConvSpec::new(3, 2, 1));
                h = g.gelu(h);
            }
            g.global_avg_pool(h)
        }
        BackboneKind::Resnet18Gap => {
            let w = g.param("cnn.conv1.weight");
            let mut h = g.conv2d(x, w, None, ConvSpec::new(7, 2, 3));
            h = apply_bn(g, h, "cnn.bn1", training);
            h = g.relu(h);
            h = g.max_pool(h, 3, 2, 1);
            for li in 1..=4 {
                for bi in 0..2 {
                    let p = format!("cnn.layer{li}.{bi}");
                    let stride = if bi == 0 && li > 1 { 2 } else { 1 };
                    h = basic_block(g, h, &p, stride, training);
                }
            }
            g.global_avg_pool(h)
        }
    }
}

fn basic_block(g: &mut Graph, x: Var, p: &str, stride: usize, training: bool) -> Var {
    let w1 = g.param(&format!("{p}.conv1.weight"));
    let mut h = g.conv2d(x, w1, None, ConvSpec::new(3, stride, 1));
    h = apply_bn(g, h, &format!("{p}.bn1"), training);
    h = g.relu(h);
    let w2 = g.param(&format!("{p}.conv2.weight"));
    h = g.conv2d(h, w2, None, ConvSpec::new(3, 1, 1));
    h = apply_bn(g, h, &format!("{p}.bn2"), training);
    let down = format!("{p}.downsample.0.weight");
    let skip = if g.store().id(&down).is_some() {
        let wd = g.param(&down);
        let s = g.conv2d(x, wd, None, ConvSpec::new(1, stride, 0));
        apply_bn(g, s, &format!("{p}.downsample.1"), training)
    } else {
        x
    };
    let sum = g.add(h, skip);
    g.relu(sum)
}
