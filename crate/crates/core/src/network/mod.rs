//! The classifier: shared per-slice CNN, shared unidirectional LSTM, masked
//! routing per modality group, and modality fusion.

mod backbone;
mod checkpoint;
pub mod init;

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{s, Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{BackboneKind, TINY_STEM};
pub(crate) use checkpoint::ensure_same_arch;
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, ModelKind, CHECKPOINT_MAGIC,
};

use crate::autodiff::{BnUpdate, Graph, ParamStore, Var};
use crate::data::{Modality, Slice, Volume};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 2;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
}

impl BackboneConfig {
    pub fn feature_dim(&self) -> usize {
        self.kind.feature_dim()
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::TinyCnn,
            pretrained: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingSharing {
    /// One routing layer per set of modalities with equal padded length.
    ByLength,
    PerModality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub rnn_units: usize,
    pub routing_units: usize,
    pub fusion_units: usize,
    pub t_flair: usize,
    pub t_t1w: usize,
    pub t_t1wce: usize,
    pub t_t2: usize,
    pub routing_sharing: RoutingSharing,
    /// Run the CNN and LSTM only over real slices. Outputs are identical to
    /// the full computation because the recurrence is causal and the mask
    /// zeroes every later position.
    pub skip_padding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            rnn_units: 128,
            routing_units: 64,
            fusion_units: 128,
            t_flair: 250,
            t_t1w: 200,
            t_t1wce: 200,
            t_t2: 250,
            routing_sharing: RoutingSharing::ByLength,
            skip_padding: true,
        }
    }
}

impl ModelConfig {
    pub fn lengths(&self) -> [usize; 4] {
        [self.t_flair, self.t_t1w, self.t_t1wce, self.t_t2]
    }

    pub fn length(&self, m: Modality) -> usize {
        self.lengths()[m.index()]
    }

    pub fn set_lengths(&mut self, t: [usize; 4]) {
        [self.t_flair, self.t_t1w, self.t_t1wce, self.t_t2] = t;
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.rnn_units, self.routing_units, self.fusion_units];
        if widths.contains(&0) || self.lengths().contains(&0) {
            return Err(Error::InvalidParameter(
                "model widths and lengths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Routing groups in modality order; each group shares one dense layer.
    pub fn routing_groups(&self) -> Vec<Vec<Modality>> {
        let mut groups: Vec<Vec<Modality>> = Vec::new();
        for m in Modality::ALL {
            let slot = match self.routing_sharing {
                RoutingSharing::PerModality => None,
                RoutingSharing::ByLength => groups
                    .iter()
                    .position(|g| self.length(g[0]) == self.length(m)),
            };
            match slot {
                Some(i) => groups[i].push(m),
                None => groups.push(vec![m]),
            }
        }
        groups
    }

    pub fn routing_group_name(&self, m: Modality) -> String {
        let group = self
            .routing_groups()
            .into_iter()
            .find(|g| g.contains(&m))
            .expect("every modality has a group");
        group
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join("_")
    }
}

/// Which part of the network a model instance holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "modality", rename_all = "snake_case")]
pub enum Topology {
    /// All four modalities with fusion layers.
    Full,
    /// One modality stream with a temporary 2-unit head on its routed features.
    Stream(Modality),
}

impl Topology {
    pub fn modalities(self) -> Vec<Modality> {
        match self {
            Topology::Full => Modality::ALL.to_vec(),
            Topology::Stream(m) => vec![m],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Identifies the origin of one CNN input row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceRef {
    pub item: usize,
    pub modality: Modality,
    pub slice: usize,
}

#[derive(Debug, Clone)]
pub struct ModalityTrace {
    pub modality: Modality,
    /// `[B, t, D]` per-slice features.
    pub features: Var,
    /// `[B, t, V]` LSTM outputs before masking.
    pub rnn_out: Var,
    /// `[B, t * V]` masked concatenation.
    pub masked: Var,
    /// `[B, V']` routed features.
    pub routed: Var,
    pub lengths: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[N, 3, H, W]` CNN input; row `k` holds `rows[k]`.
    pub input: Var,
    pub rows: Vec<SliceRef>,
    pub modalities: Vec<ModalityTrace>,
    /// `[B, V'']`, absent for single streams.
    pub fused: Option<Var>,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct BtdNet {
    config: ModelConfig,
    topology: Topology,
    store: ParamStore,
}

impl BtdNet {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        topology: Topology,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        backbone::init_params(config.backbone.kind, &mut store, rng);

        let (d, v) = (config.backbone.feature_dim(), config.rnn_units);
        store.add_param("rnn.weight_ih", init::uniform(rng, &[4 * v, d], v));
        let mut w_hh = Array2::<f64>::zeros((4 * v, v));
        for gate in 0..4 {
            w_hh.slice_mut(s![gate * v..(gate + 1) * v, ..])
                .assign(&init::orthogonal(rng, v));
        }
        store.add_param("rnn.weight_hh", w_hh.into_dyn());
        let mut bias = Array1::<f64>::zeros(4 * v);
        bias.slice_mut(s![v..2 * v]).fill(1.0);
        store.add_param("rnn.bias", bias.into_dyn());

        let vp = config.routing_units;
        let mut groups_done = Vec::new();
        for m in topology.modalities() {
            let name = config.routing_group_name(m);
            if groups_done.contains(&name) {
                continue;
            }
            let fan_in = config.length(m) * v;
            store.add_param(
                &format!("routing.{name}.dense.weight"),
                init::uniform(rng, &[vp, fan_in], fan_in),
            );
            store.add_param(
                &format!("routing.{name}.dense.bias"),
                init::uniform(rng, &[vp], fan_in),
            );
            backbone::bn(&mut store, &format!("routing.{name}.bn"), vp);
            groups_done.push(name);
        }

        match topology {
            Topology::Full => {
                let (fin, vpp) = (4 * vp, config.fusion_units);
                store.add_param("fusion.dense.weight", init::uniform(rng, &[vpp, fin], fin));
                store.add_param("fusion.dense.bias", init::uniform(rng, &[vpp], fin));
                store.add_param(
                    "fusion.out.weight",
                    init::uniform(rng, &[NUM_CLASSES, vpp], vpp),
                );
                store.add_param("fusion.out.bias", init::uniform(rng, &[NUM_CLASSES], vpp));
            }
            Topology::Stream(_) => {
                store.add_param("head.weight", init::uniform(rng, &[NUM_CLASSES, vp], vp));
                store.add_param("head.bias", init::uniform(rng, &[NUM_CLASSES], vp));
            }
        }

        let mut net = BtdNet {
            config,
            topology,
            store,
        };
        if let Some(path) = net.config.backbone.pretrained.clone() {
            net.load_backbone_weights(&path)?;
        }
        Ok(net)
    }

    pub(crate) fn from_parts(config: ModelConfig, topology: Topology, store: ParamStore) -> Self {
        BtdNet {
            config,
            topology,
            store,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Copies `cnn.*` tensors from a checkpoint file whose backbone matches.
    pub fn load_backbone_weights(&mut self, path: &std::path::Path) -> Result<()> {
        let (other, _) = load_checkpoint(path)?;
        let n = self.store.copy_prefix_from(other.store(), "cnn.")?;
        let expected = self
            .store
            .named()
            .filter(|(name, _, _)| name.starts_with("cnn."))
            .count();
        if n != expected {
            return Err(Error::CheckpointMismatch(format!(
                "backbone file provides {n} of {expected} backbone tensors"
            )));
        }
        Ok(())
    }

    /// Folds queued running-statistics updates into the buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let mean = self.store.get_mut(u.mean);
            for (r, &b) in mean.iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            let var = self.store.get_mut(u.var);
            for (r, &b) in var.iter_mut().zip(&u.batch_var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    fn check_input(&self, batch: &[&[Volume; 4]]) -> Result<(usize, usize)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("forward on an empty batch".into()));
        }
        let mut dims = None;
        for vols in batch {
            for m in self.topology.modalities() {
                let v = &vols[m.index()];
                let t = self.config.length(m);
                if v.modality != m || v.padded_length() != t {
                    return Err(Error::ShapeMismatch(format!(
                        "{m} volume has {} slices, model expects {t}",
                        v.padded_length()
                    )));
                }
                for sl in &v.slices {
                    let d = (sl.channels(), sl.height(), sl.width());
                    if d.0 != 3 || d.1.min(d.2) < self.config.backbone.kind.min_side() {
                        return Err(Error::ShapeMismatch(format!(
                            "slice of shape {d:?} is not a 3-channel image"
                        )));
                    }
                    match dims {
                        None => dims = Some(d),
                        Some(prev) if prev != d => {
                            return Err(Error::ShapeMismatch(format!(
                                "slice shapes {prev:?} and {d:?} in one batch"
                            )))
                        }
                        _ => {}
                    }
                }
            }
        }
        let d = dims.expect("volumes hold at least one slice");
        Ok((d.1, d.2))
    }

    /// Records the forward computation of a batch on `g`.
    ///
    /// `input_grad` marks the pixel input as differentiable so gradients with
    /// respect to individual slices can be inspected.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &[&[Volume; 4]],
        mode: Mode,
        input_grad: bool,
    ) -> Result<ForwardTrace> {
        let (h, w) = self.check_input(batch)?;
        let training = mode == Mode::Train;
        let b = batch.len();
        let mods = self.topology.modalities();

        let mut rows = Vec::new();
        for &m in &mods {
            for (item, vols) in batch.iter().enumerate() {
                let v = &vols[m.index()];
                let n = if self.config.skip_padding {
                    v.true_length()
                } else {
                    v.padded_length()
                };
                rows.extend((0..n).map(|slice| SliceRef {
                    item,
                    modality: m,
                    slice,
                }));
            }
        }
        let mut pixels = Vec::with_capacity(rows.len() * 3 * h * w);
        for r in &rows {
            let sl = &batch[r.item][r.modality.index()].slices[r.slice];
            pixels.extend(sl.pixels().iter());
        }
        let x = ArrayD::from_shape_vec(IxDyn(&[rows.len(), 3, h, w]), pixels).expect("pixel count");
        let input = g.input(x, input_grad);
        let feats = backbone::forward(self.config.backbone.kind, g, input, training);
        let d = self.config.backbone.feature_dim();
        let v = self.config.rnn_units;

        // Row of `feats` for each (modality, item, position); padding
        // positions point at an appended zero row when they were skipped.
        let zero = g.input(ArrayD::zeros(IxDyn(&[1, d])), false);
        let feats = g.concat(&[feats, zero], 0);
        let zero_row = rows.len();
        let mut lookup: BTreeMap<(Modality, usize, usize), usize> = BTreeMap::new();
        for (k, r) in rows.iter().enumerate() {
            lookup.insert((r.modality, r.item, r.slice), k);
        }

        let (w_ih, w_hh, bias) = (
            g.param("rnn.weight_ih"),
            g.param("rnn.weight_hh"),
            g.param("rnn.bias"),
        );
        let mut traces = Vec::new();
        for &m in &mods {
            let t = self.config.length(m);
            let index: Vec<usize> = (0..b)
                .flat_map(|item| (0..t).map(move |s| (item, s)))
                .map(|(item, s)| lookup.get(&(m, item, s)).copied().unwrap_or(zero_row))
                .collect();
            let fm = g.gather_rows(feats, &index);
            let fm = g.reshape(fm, &[b, t, d]);
            let lengths: Vec<usize> = batch
                .iter()
                .map(|vols| vols[m.index()].true_length())
                .collect();
            let steps = if self.config.skip_padding {
                lengths.clone()
            } else {
                vec![t; b]
            };
            let rnn_out = g.lstm(fm, w_ih, w_hh, bias, &steps);
            let masked3 = g.mask_rows(rnn_out, &lengths);
            let masked = g.reshape(masked3, &[b, t * v]);
            traces.push(ModalityTrace {
                modality: m,
                features: fm,
                rnn_out,
                masked,
                routed: masked,
                lengths,
            });
        }

        // Routing: one dense + batch norm + GELU per group, with batch
        // statistics over all rows of the group.
        for group in self.config.routing_groups() {
            let members: Vec<usize> = traces
                .iter()
                .enumerate()
                .filter(|(_, tr)| group.contains(&tr.modality))
                .map(|(i, _)| i)
                .collect();
            if members.is_empty() {
                continue;
            }
            let name = self.config.routing_group_name(traces[members[0]].modality);
            let parts: Vec<Var> = members.iter().map(|&i| traces[i].masked).collect();
            let stacked = if parts.len() == 1 {
                parts[0]
            } else {
                g.concat(&parts, 0)
            };
            let wd = g.param(&format!("routing.{name}.dense.weight"));
            let bd = g.param(&format!("routing.{name}.dense.bias"));
            let z = g.linear(stacked, wd, Some(bd));
            let z = backbone::apply_bn(g, z, &format!("routing.{name}.bn"), training);
            let z = g.gelu(z);
            for (k, &i) in members.iter().enumerate() {
                traces[i].routed = if members.len() == 1 {
                    z
                } else {
                    g.narrow(z, 0, k * b, b)
                };
            }
        }

        let (fused, logits) = match self.topology {
            Topology::Full => {
                let parts: Vec<Var> = traces.iter().map(|tr| tr.routed).collect();
                let cat = g.concat(&parts, 1);
                let (w1, b1) = (g.param("fusion.dense.weight"), g.param("fusion.dense.bias"));
                let f = g.linear(cat, w1, Some(b1));
                let f = g.gelu(f);
                let (w2, b2) = (g.param("fusion.out.weight"), g.param("fusion.out.bias"));
                (Some(f), g.linear(f, w2, Some(b2)))
            }
            Topology::Stream(_) => {
                let (wh, bh) = (g.param("head.weight"), g.param("head.bias"));
                (None, g.linear(traces[0].routed, wh, Some(bh)))
            }
        };
        Ok(ForwardTrace {
            input,
            rows,
            modalities: traces,
            fused,
            logits,
        })
    }

    /// Eval-mode logits for a batch.
    pub fn predict(&self, batch: &[&[Volume; 4]]) -> Result<Vec<[f64; 2]>> {
        let mut g = Graph::new(&self.store);
        let tr = self.forward(&mut g, batch, Mode::Eval, false)?;
        Ok(logit_rows(g.value(tr.logits)))
    }

    pub fn predict_one(&self, volumes: &[Volume; 4]) -> Result<[f64; 2]> {
        Ok(self.predict(&[volumes])?[0])
    }

    /// Eval-mode CNN feature vector of one slice.
    pub fn cnn_features(&self, slice: &Slice) -> Result<Array1<f64>> {
        if slice.channels() != 3
            || slice.height().min(slice.width()) < self.config.backbone.kind.min_side()
        {
            return Err(Error::ShapeMismatch(format!(
                "slice of shape {:?} is not a 3-channel image",
                slice.pixels().dim()
            )));
        }
        let mut g = Graph::new(&self.store);
        let x = slice.pixels().clone().insert_axis(Axis(0)).into_dyn();
        let x = g.input(x, false);
        let f = backbone::forward(self.config.backbone.kind, &mut g, x, false);
        Ok(g.value(f)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .expect("1-D"))
    }

    /// LSTM outputs `[t, V]` for a `[t, D]` feature sequence.
    pub fn rnn_sequence(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        let (t, d) = features.dim();
        if d != self.config.backbone.feature_dim() {
            return Err(Error::ShapeMismatch(format!(
                "feature width {d}, expected {}",
                self.config.backbone.feature_dim()
            )));
        }
        let mut g = Graph::new(&self.store);
        let x = g.input(features.clone().insert_axis(Axis(0)).into_dyn(), false);
        let (a, b, c) = (
            g.param("rnn.weight_ih"),
            g.param("rnn.weight_hh"),
            g.param("rnn.bias"),
        );
        let y = g.lstm(x, a, b, c, &[t]);
        Ok(g.value(y)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .expect("2-D"))
    }
}

/// Flattens rows `0..l` of a `[t, V]` matrix and zero-fills the remainder.
pub fn mask_and_concat(outputs: &Array2<f64>, l: usize) -> Result<Array1<f64>> {
    let (t, v) = outputs.dim();
    if l == 0 || l > t {
        return Err(Error::InvalidLength { length: l, max: t });
    }
    let mut out = Array1::<f64>::zeros(t * v);
    for (k, row) in outputs.rows().into_iter().take(l).enumerate() {
        out.slice_mut(s![k * v..(k + 1) * v]).assign(&row);
    }
    Ok(out)
}

pub fn logit_rows(t: &ArrayD<f64>) -> Vec<[f64; 2]> {
    t.outer_iter()
        .map(|row| {
            let r: Vec<f64> = row.iter().copied().collect();
            [r[0], r[1]]
        })
        .collect()
}
