use ndarray::{s, Array2, Array3, Axis, Ix2, IxDyn};

use super::Tensor;

#[derive(Debug)]
pub(super) struct LstmCache {
    steps: Vec<usize>,
    /// Post-activation gates `[i | f | g | o]` per step, `[T, B, 4V]`.
    gates: Array3<f64>,
    /// Cell states, `c[t + 1]` after step `t`; `[T + 1, B, V]`.
    c: Array3<f64>,
    /// Hidden states, same layout as `c`.
    h: Array3<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims(x: &Tensor, w_ih: &Tensor, w_hh: &Tensor) -> (usize, usize, usize, usize) {
    let xs = x.shape();
    assert_eq!(xs.len(), 3, "lstm input must be [B, T, D]");
    let v = w_hh.shape()[1];
    assert_eq!(w_hh.shape()[0], 4 * v, "w_hh must be [4V, V]");
    assert_eq!(w_ih.shape(), &[4 * v, xs[2]], "w_ih must be [4V, D]");
    (xs[0], xs[1], xs[2], v)
}

pub(super) fn forward(
    x: &Tensor,
    w_ih: &Tensor,
    w_hh: &Tensor,
    bias: &Tensor,
    steps: &[usize],
) -> (Tensor, LstmCache) {
    let (b, t, d, v) = dims(x, w_ih, w_hh);
    assert_eq!(steps.len(), b, "one step count per sequence");
    assert!(
        steps.iter().all(|&n| n <= t),
        "step count beyond sequence length"
    );
    let tmax = steps.iter().copied().max().unwrap_or(0);
    let wi = w_ih.view().into_dimensionality::<Ix2>().expect("2-D");
    let wh = w_hh.view().into_dimensionality::<Ix2>().expect("2-D");
    let x2 = x.to_shape((b * t, d)).expect("contiguous");
    let mut xw = x2
        .dot(&wi.t())
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, t, 4 * v))
        .expect("gate inputs");
    for mut row in xw.lanes_mut(Axis(2)) {
        row.zip_mut_with(bias, |a, &c| *a += c);
    }

    let mut gates = Array3::<f64>::zeros((tmax, b, 4 * v));
    let mut c = Array3::<f64>::zeros((tmax + 1, b, v));
    let mut h = Array3::<f64>::zeros((tmax + 1, b, v));
    let mut y = Array3::<f64>::zeros((b, t, v));
    for step in 0..tmax {
        let pre = xw.slice(s![.., step, ..]).to_owned() + h.slice(s![step, .., ..]).dot(&wh.t());
        for bi in 0..b {
            if step >= steps[bi] {
                continue;
            }
            for k in 0..v {
                let ig = sigmoid(pre[[bi, k]]);
                let fg = sigmoid(pre[[bi, v + k]]);
                let gg = pre[[bi, 2 * v + k]].tanh();
                let og = sigmoid(pre[[bi, 3 * v + k]]);
                let cn = fg * c[[step, bi, k]] + ig * gg;
                let hn = og * cn.tanh();
                gates[[step, bi, k]] = ig;
                gates[[step, bi, v + k]] = fg;
                gates[[step, bi, 2 * v + k]] = gg;
                gates[[step, bi, 3 * v + k]] = og;
                c[[step + 1, bi, k]] = cn;
                h[[step + 1, bi, k]] = hn;
                y[[bi, step, k]] = hn;
            }
        }
    }
    (
        y.into_dyn(),
        LstmCache {
            steps: steps.to_vec(),
            gates,
            c,
            h,
        },
    )
}

pub(super) struct LstmGrads {
    pub dx: Option<Tensor>,
    pub dw_ih: Tensor,
    pub dw_hh: Tensor,
    pub dbias: Tensor,
}

pub(super) fn backward(
    g: &Tensor,
    x: &Tensor,
    w_ih: &Tensor,
    w_hh: &Tensor,
    cache: &LstmCache,
    need_dx: bool,
) -> LstmGrads {
    let (b, t, d, v) = dims(x, w_ih, w_hh);
    let tmax = cache.gates.dim().0;
    let wi = w_ih.view().into_dimensionality::<Ix2>().expect("2-D");
    let wh = w_hh.view().into_dimensionality::<Ix2>().expect("2-D");
    let mut dpre_all = Array3::<f64>::zeros((b, t, 4 * v));
    let mut dw_hh = Array2::<f64>::zeros((4 * v, v));
    let mut dh_next = Array2::<f64>::zeros((b, v));
    let mut dc_next = Array2::<f64>::zeros((b, v));
    for step in (0..tmax).rev() {
        let mut dpre = Array2::<f64>::zeros((b, 4 * v));
        for bi in 0..b {
            if step >= cache.steps[bi] {
                continue;
            }
            for k in 0..v {
                let ig = cache.gates[[step, bi, k]];
                let fg = cache.gates[[step, bi, v + k]];
                let gg = cache.gates[[step, bi, 2 * v + k]];
                let og = cache.gates[[step, bi, 3 * v + k]];
                let ct = cache.c[[step + 1, bi, k]];
                let cp = cache.c[[step, bi, k]];
                let tc = ct.tanh();
                let dh = g[[bi, step, k]] + dh_next[[bi, k]];
                let d_o = dh * tc;
                let dc = dc_next[[bi, k]] + dh * og * (1.0 - tc * tc);
                dpre[[bi, k]] = dc * gg * ig * (1.0 - ig);
                dpre[[bi, v + k]] = dc * cp * fg * (1.0 - fg);
                dpre[[bi, 2 * v + k]] = dc * ig * (1.0 - gg * gg);
                dpre[[bi, 3 * v + k]] = d_o * og * (1.0 - og);
                dc_next[[bi, k]] = dc * fg;
            }
        }
        dw_hh += &dpre.t().dot(&cache.h.slice(s![step, .., ..]));
        dh_next = dpre.dot(&wh);
        dpre_all.slice_mut(s![.., step, ..]).assign(&dpre);
    }
    let dpre2 = dpre_all
        .into_shape_with_order((b * t, 4 * v))
        .expect("gate grads");
    let x2 = x.to_shape((b * t, d)).expect("contiguous");
    let dw_ih = dpre2.t().dot(&x2);
    let dbias = dpre2.sum_axis(Axis(0));
    let dx = need_dx.then(|| {
        dpre2
            .dot(&wi)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[b, t, d]))
            .expect("input grads")
    });
    LstmGrads {
        dx,
        dw_ih: dw_ih.into_dyn(),
        dw_hh: dw_hh.into_dyn(),
        dbias: dbias.into_dyn(),
    }
}
