use ndarray::{Array2, ArrayD, Axis, IxDyn};

use super::Tensor;

/// Square-kernel convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected [N, C, H, W], got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

/// Unfolds every receptive field of every image into one column matrix of
/// shape `[C*K*K, N*Ho*Wo]`.
fn im2col(x: &Tensor, spec: ConvSpec) -> Array2<f64> {
    let [n, c, h, w] = dims4(x);
    let (ho, wo) = (spec.out_size(h), spec.out_size(w));
    let k = spec.kernel;
    let xs = x.as_slice().expect("standard layout");
    let ncols = n * ho * wo;
    let mut cols = Array2::<f64>::zeros((c * k * k, ncols));
    let out = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let dst = &mut out[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let img = &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oh in 0..ho {
                        let ih = (oh * spec.stride + kh) as isize - spec.pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let base = (ni * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = (ow * spec.stride + kw) as isize - spec.pad as isize;
                            if iw >= 0 && iw < w as isize {
                                dst[base + ow] = img[ih as usize * w + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, shape: [usize; 4], spec: ConvSpec) -> Tensor {
    let [n, c, h, w] = shape;
    let (ho, wo) = (spec.out_size(h), spec.out_size(w));
    let k = spec.kernel;
    let ncols = n * ho * wo;
    let src = cols.as_slice().expect("standard layout");
    let mut x = ArrayD::<f64>::zeros(IxDyn(&shape));
    let xs = x.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let col = &src[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let img = &mut xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oh in 0..ho {
                        let ih = (oh * spec.stride + kh) as isize - spec.pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let base = (ni * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = (ow * spec.stride + kw) as isize - spec.pad as isize;
                            if iw >= 0 && iw < w as isize {
                                img[ih as usize * w + iw as usize] += col[base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

pub(super) fn forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    spec: ConvSpec,
) -> (Tensor, Array2<f64>, [usize; 4]) {
    let in_shape = dims4(x);
    let [n, c, h, wd] = in_shape;
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [O, C, K, K]");
    assert_eq!(ws[1], c, "conv: input channels vs weight");
    assert!(
        ws[2] == spec.kernel && ws[3] == spec.kernel,
        "conv: kernel size vs weight"
    );
    let o = ws[0];
    let (ho, wo) = (spec.out_size(h), spec.out_size(wd));
    let cols = im2col(x, spec);
    let wm = w
        .to_shape((o, c * spec.kernel * spec.kernel))
        .expect("contiguous weight");
    let mut y2 = wm.dot(&cols).as_standard_layout().into_owned();
    if let Some(b) = b {
        for (mut row, &bv) in y2.rows_mut().into_iter().zip(b.iter()) {
            row += bv;
        }
    }
    // [O, N, Ho*Wo] -> [N, O, Ho*Wo]
    let y = y2
        .into_shape_with_order((o, n, ho * wo))
        .expect("conv output")
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[n, o, ho, wo]))
        .expect("conv output");
    (y, cols, in_shape)
}

/// Returns `(dx, dw, db)`; `dx` is skipped when the input needs no gradient.
pub(super) fn backward(
    g: &Tensor,
    w: &Tensor,
    cols: &Array2<f64>,
    in_shape: [usize; 4],
    spec: ConvSpec,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let [n, o, ho, wo] = dims4(g);
    let g2 = g
        .to_shape((n, o, ho * wo))
        .expect("contiguous gradient")
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((o, n * ho * wo))
        .expect("gradient matrix");
    let dw = g2
        .dot(&cols.t())
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(w.shape()))
        .expect("weight shape");
    let db = g2.sum_axis(Axis(1)).into_dyn();
    let dx = need_dx.then(|| {
        let wm = w.to_shape((o, cols.nrows())).expect("contiguous weight");
        let dcols = wm.t().dot(&g2);
        col2im(&dcols, in_shape, spec)
    });
    (dx, dw, db)
}

fn bins(n: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| ((i * n) / out, ((i + 1) * n).div_ceil(out)))
        .collect()
}

pub(super) fn adaptive_pool_forward(x: &Tensor, out: usize) -> Tensor {
    let [n, c, h, w] = dims4(x);
    let (bh, bw) = (bins(h, out), bins(w, out));
    let xs = x.as_slice().expect("standard layout");
    let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, c, out, out]));
    let ys = y.as_slice_mut().expect("fresh array");
    for img in 0..n * c {
        let src = &xs[img * h * w..(img + 1) * h * w];
        for (i, &(h0, h1)) in bh.iter().enumerate() {
            for (j, &(w0, w1)) in bw.iter().enumerate() {
                let mut s = 0.0;
                for r in h0..h1 {
                    s += src[r * w + w0..r * w + w1].iter().sum::<f64>();
                }
                ys[(img * out + i) * out + j] = s / ((h1 - h0) * (w1 - w0)) as f64;
            }
        }
    }
    y
}

pub(super) fn adaptive_pool_backward(g: &Tensor, in_shape: &[usize]) -> Tensor {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let out = g.shape()[2];
    let (bh, bw) = (bins(h, out), bins(w, out));
    let gs = g.as_slice().expect("standard layout");
    let mut dx = ArrayD::<f64>::zeros(IxDyn(in_shape));
    let ds = dx.as_slice_mut().expect("fresh array");
    for img in 0..n * c {
        let dst = &mut ds[img * h * w..(img + 1) * h * w];
        for (i, &(h0, h1)) in bh.iter().enumerate() {
            for (j, &(w0, w1)) in bw.iter().enumerate() {
                let v = gs[(img * out + i) * out + j] / ((h1 - h0) * (w1 - w0)) as f64;
                for r in h0..h1 {
                    for d in &mut dst[r * w + w0..r * w + w1] {
                        *d += v;
                    }
                }
            }
        }
    }
    dx
}

/// Max pooling with implicit `-inf` padding. Returns the output and, for each
/// output element, the flat index of the winning input element.
pub(super) fn max_pool_forward(
    x: &Tensor,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = dims4(x);
    let spec = ConvSpec::new(k, stride, pad);
    let (ho, wo) = (spec.out_size(h), spec.out_size(w));
    let xs = x.as_slice().expect("standard layout");
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for img in 0..n * c {
        let base = img * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut at = usize::MAX;
                for kh in 0..k {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = base + ih as usize * w + iw as usize;
                        if xs[idx] > best || at == usize::MAX {
                            best = xs[idx];
                            at = idx;
                        }
                    }
                }
                y.push(best);
                arg.push(at);
            }
        }
    }
    let y = ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), y).expect("pool output");
    (y, arg)
}

/// Plain direct convolution, used as an oracle in tests.
#[cfg(test)]
pub(super) fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let [n, c, h, wd] = dims4(x);
    let o = w.shape()[0];
    let (ho, wo) = (spec.out_size(h), spec.out_size(wd));
    let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, o, ho, wo]));
    for ni in 0..n {
        for oi in 0..o {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut s = b.map_or(0.0, |b| b[[oi]]);
                    for ci in 0..c {
                        for kh in 0..spec.kernel {
                            for kw in 0..spec.kernel {
                                let ih = (oh * spec.stride + kh) as isize - spec.pad as isize;
                                let iw = (ow * spec.stride + kw) as isize - spec.pad as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                    s +=
                                        x[[ni, ci, ih as usize, iw as usize]] * w[[oi, ci, kh, kw]];
                                }
                            }
                        }
                    }
                    y[[ni, oi, oh, ow]] = s;
                }
            }
        }
    }
    y
}
