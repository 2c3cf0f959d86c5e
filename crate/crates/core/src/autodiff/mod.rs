//! Tape-based reverse-mode differentiation over `f64` tensors.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation of one
//! forward pass. [`Graph::backward`] then walks the tape in reverse. Ops are
//! coarse (a whole convolution, a whole LSTM unroll) so the tape stays short.

mod conv;
mod lstm;
mod norm;
mod params;

use std::collections::HashMap;

use ndarray::{Array0, Array2, ArrayD, Axis, Ix2, IxDyn, Slice as NdSlice};

pub use conv::ConvSpec;
pub use params::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        cols: Array2<f64>,
        in_shape: [usize; 4],
    },
    AdaptiveAvgPool {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: norm::BnCache,
    },
    Gelu {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Lstm {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        cache: lstm::LstmCache,
    },
    MaskRows {
        x: Var,
        lengths: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    /// A scalar whose gradient with respect to `x` was computed in the
    /// forward pass.
    ScalarFn {
        x: Var,
        dx: Tensor,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar: shape {:?}", t.shape());
        t.iter().copied().next().unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(
            value.as_standard_layout().into_owned(),
            Op::Leaf,
            requires_grad,
        )
    }

    /// The node for a stored tensor. Panics on unknown names; models check
    /// their parameter set when they are built or loaded.
    pub fn param(&mut self, name: &str) -> Var {
        let id = self
            .store
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        self.param_id(id)
    }

    pub fn param_id(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `x @ w^T + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = as2(self.value(x));
        let wv = as2(self.value(w));
        assert_eq!(xv.ncols(), wv.ncols(), "linear: input width vs weight");
        let mut y = xv.dot(&wv.t());
        if let Some(b) = b {
            let bv = self.value(b);
            for mut row in y.rows_mut() {
                row.zip_mut_with(bv, |a, &c| *a += c);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(y.into_dyn(), Op::Linear { x, w, b }, rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let (y, cols, in_shape) =
            conv::forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                spec,
                cols,
                in_shape,
            },
            rg,
        )
    }

    /// Average pooling of `[N, C, H, W]` onto an `out x out` grid of
    /// (possibly overlapping) bins.
    pub fn adaptive_avg_pool(&mut self, x: Var, out: usize) -> Var {
        let y = conv::adaptive_pool_forward(self.value(x), out);
        let rg = self.rg(x);
        self.push(y, Op::AdaptiveAvgPool { x }, rg)
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let (y, argmax) = conv::max_pool_forward(self.value(x), kernel, stride, pad);
        let rg = self.rg(x);
        self.push(y, Op::MaxPool { x, argmax }, rg)
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let sh = xv.shape();
        let (n, c) = (sh[0], sh[1]);
        let y = xv
            .to_shape((n, c, sh[2] * sh[3]))
            .expect("contiguous")
            .mean_axis(Axis(2))
            .expect("non-empty spatial extent");
        let rg = self.rg(x);
        self.push(y.into_dyn(), Op::GlobalAvgPool { x }, rg)
    }

    /// Batch norm over every axis except axis 1. In training mode batch
    /// statistics are used and a running-statistics update is queued.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
        training: bool,
        eps: f64,
    ) -> Var {
        let rm = self.store.get(running_mean);
        let rv = self.store.get(running_var);
        let (y, cache, stats) = norm::forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            rm,
            rv,
            training,
            eps,
        );
        if let Some((batch_mean, batch_var)) = stats {
            self.bn_updates.push(BnUpdate {
                mean: running_mean,
                var: running_var,
                batch_mean,
                batch_var,
            });
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
            rg,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(gelu);
        let rg = self.rg(x);
        self.push(y, Op::Gelu { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(y, Op::Relu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let y = av + bv;
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x) * c;
        let rg = self.rg(x);
        self.push(y, Op::Scale { x, c }, rg)
    }

    /// Unidirectional LSTM over `x: [B, T, D]` with gate order (i, f, g, o).
    /// Sequence `b` is unrolled for `steps[b]` steps; later outputs are zero.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, steps: &[usize]) -> Var {
        let (y, cache) = lstm::forward(
            self.value(x),
            self.value(w_ih),
            self.value(w_hh),
            self.value(bias),
            steps,
        );
        let rg = self.rg(x) || self.rg(w_ih) || self.rg(w_hh) || self.rg(bias);
        self.push(
            y,
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                bias,
                cache,
            },
            rg,
        )
    }

    /// Multiplies row `t` of sequence `b` in `x: [B, T, V]` by `[t < lengths[b]]`.
    pub fn mask_rows(&mut self, x: Var, lengths: &[usize]) -> Var {
        let mut y = self.value(x).clone();
        let mask = row_mask(y.shape(), lengths);
        y.zip_mut_with(&mask, |a, &m| *a *= m);
        let rg = self.rg(x);
        self.push(
            y,
            Op::MaskRows {
                x,
                lengths: lengths.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self
            .value(x)
            .to_shape(IxDyn(shape))
            .expect("reshape: element count must match")
            .into_owned();
        let rg = self.rg(x);
        self.push(y, Op::Reshape { x }, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y =
            ndarray::concatenate(Axis(axis), &views).expect("concat: shapes must agree off-axis");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            y.as_standard_layout().into_owned(),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let y = self
            .value(x)
            .slice_axis(Axis(axis), NdSlice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(x);
        self.push(y, Op::Narrow { x, axis, start }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let y = self.value(x).select(Axis(0), rows);
        let rg = self.rg(x);
        self.push(
            y,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Registers a scalar `value = f(x)` whose gradient `dx` the caller
    /// computed alongside it.
    pub fn scalar_fn(&mut self, x: Var, value: f64, dx: Tensor) -> Var {
        assert_eq!(
            dx.shape(),
            self.value(x).shape(),
            "scalar_fn: gradient shape"
        );
        let rg = self.rg(x);
        self.push(
            Array0::from_elem((), value).into_dyn(),
            Op::ScalarFn { x, dx },
            rg,
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = self.value(root);
        grads[root.0] = Some(ArrayD::ones(rv.raw_dim()));

        for i in (0..=root.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if !g.is_standard_layout() {
                g = g.as_standard_layout().into_owned();
            }
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = HashMap::new();
        for (&id, &v) in &self.param_vars {
            if let Some(g) = grads[v.0].take() {
                params.insert(id, g);
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, d: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let g2 = as2(g);
                if self.rg(*x) {
                    acc(*x, g2.dot(&as2(self.value(*w))).into_dyn());
                }
                if self.rg(*w) {
                    acc(*w, g2.t().dot(&as2(self.value(*x))).into_dyn());
                }
                if let Some(b) = b {
                    acc(*b, g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                spec,
                cols,
                in_shape,
            } => {
                let (dx, dw, db) =
                    conv::backward(g, self.value(*w), cols, *in_shape, *spec, self.rg(*x));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::AdaptiveAvgPool { x } => {
                acc(*x, conv::adaptive_pool_backward(g, self.value(*x).shape()));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = ArrayD::zeros(self.value(*x).raw_dim());
                let flat = dx.as_slice_mut().expect("standard layout");
                for (&src, &gv) in argmax.iter().zip(g.iter()) {
                    flat[src] += gv;
                }
                acc(*x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let sh = self.value(*x).shape().to_vec();
                let hw = (sh[2] * sh[3]) as f64;
                let g2 = as2(g);
                let dx = ArrayD::from_shape_fn(IxDyn(&sh), |ix| g2[[ix[0], ix[1]]] / hw);
                acc(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dgamma, dbeta) = norm::backward(g, self.value(*gamma), cache);
                if self.rg(*x) {
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Gelu { x } => {
                let mut dx = self.value(*x).mapv(gelu_grad);
                dx *= g;
                acc(*x, dx);
            }
            Op::Relu { x } => {
                let mut dx = self.value(*x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                dx *= g;
                acc(*x, dx);
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale { x, c } => acc(*x, g * *c),
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                bias,
                cache,
            } => {
                let grads_l = lstm::backward(
                    g,
                    self.value(*x),
                    self.value(*w_ih),
                    self.value(*w_hh),
                    cache,
                    self.rg(*x),
                );
                if let Some(dx) = grads_l.dx {
                    acc(*x, dx);
                }
                acc(*w_ih, grads_l.dw_ih);
                acc(*w_hh, grads_l.dw_hh);
                acc(*bias, grads_l.dbias);
            }
            Op::MaskRows { x, lengths } => {
                let mut dx = g.clone();
                let mask = row_mask(dx.shape(), lengths);
                dx.zip_mut_with(&mask, |a, &m| *a *= m);
                acc(*x, dx);
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                acc(
                    *x,
                    g.to_shape(IxDyn(&shape))
                        .expect("same element count")
                        .into_owned(),
                );
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    if self.rg(p) {
                        let piece = g
                            .slice_axis(Axis(*axis), NdSlice::from(start..start + len))
                            .as_standard_layout()
                            .into_owned();
                        acc(p, piece);
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let mut dx = ArrayD::zeros(self.value(*x).raw_dim());
                let len = g.shape()[*axis];
                dx.slice_axis_mut(Axis(*axis), NdSlice::from(*start..*start + len))
                    .assign(g);
                acc(*x, dx);
            }
            Op::GatherRows { x, rows } => {
                let mut dx = ArrayD::zeros(self.value(*x).raw_dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = dx.index_axis_mut(Axis(0), r);
                    dst += &g.index_axis(Axis(0), k);
                }
                acc(*x, dx);
            }
            Op::ScalarFn { x, dx } => {
                let s = g.iter().copied().next().unwrap_or_default();
                acc(*x, dx * s);
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient of an intermediate or input node, if any flowed to it.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-D tensor")
}

fn row_mask(shape: &[usize], lengths: &[usize]) -> Tensor {
    assert_eq!(shape.len(), 3, "mask_rows expects [B, T, V]");
    assert_eq!(shape[0], lengths.len(), "one length per sequence");
    ArrayD::from_shape_fn(
        IxDyn(shape),
        |ix| if ix[1] < lengths[ix[0]] { 1.0 } else { 0.0 },
    )
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}
