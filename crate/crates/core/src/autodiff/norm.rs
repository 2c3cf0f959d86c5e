use ndarray::{Array3, ArrayD, IxDyn};

use super::Tensor;

#[derive(Debug)]
pub(super) struct BnCache {
    xhat: Array3<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
    training: bool,
}

/// `[N, C, ...]` viewed as `[N, C, S]`.
fn as3(x: &Tensor) -> Array3<f64> {
    let s = x.shape();
    assert!(s.len() >= 2, "batch norm expects at least [N, C]");
    let rest: usize = s[2..].iter().product();
    x.to_shape((s[0], s[1], rest))
        .expect("contiguous")
        .into_owned()
}

/// Returns the output, the backward cache and, in training mode, the batch
/// mean and unbiased batch variance per channel.
#[allow(clippy::type_complexity)]
pub(super) fn forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    training: bool,
    eps: f64,
) -> (Tensor, BnCache, Option<(Vec<f64>, Vec<f64>)>) {
    let x3 = as3(x);
    let (n, c, s) = x3.dim();
    assert_eq!(gamma.len(), c, "batch norm: gamma length vs channels");
    let m = n * s;
    let (mean, var): (Vec<f64>, Vec<f64>) = if training {
        assert!(m > 0, "batch norm over an empty batch");
        (0..c)
            .map(|ci| {
                let mut sum = 0.0;
                for ni in 0..n {
                    for si in 0..s {
                        sum += x3[[ni, ci, si]];
                    }
                }
                let mu = sum / m as f64;
                let mut sq = 0.0;
                for ni in 0..n {
                    for si in 0..s {
                        let d = x3[[ni, ci, si]] - mu;
                        sq += d * d;
                    }
                }
                (mu, sq / m as f64)
            })
            .unzip()
    } else {
        (
            running_mean.iter().copied().collect(),
            running_var.iter().copied().collect(),
        )
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let g: Vec<f64> = gamma.iter().copied().collect();
    let b: Vec<f64> = beta.iter().copied().collect();
    let mut xhat = x3;
    let mut y = Array3::<f64>::zeros((n, c, s));
    for ni in 0..n {
        for ci in 0..c {
            for si in 0..s {
                let h = (xhat[[ni, ci, si]] - mean[ci]) * inv_std[ci];
                xhat[[ni, ci, si]] = h;
                y[[ni, ci, si]] = g[ci] * h + b[ci];
            }
        }
    }
    let stats = training.then(|| {
        let unbiased = if m > 1 {
            var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect()
        } else {
            var.clone()
        };
        (mean, unbiased)
    });
    let shape = x.shape().to_vec();
    let y = y
        .into_shape_with_order(IxDyn(&shape))
        .expect("same element count");
    (
        y,
        BnCache {
            xhat,
            inv_std,
            shape,
            training,
        },
        stats,
    )
}

pub(super) fn backward(g: &Tensor, gamma: &Tensor, cache: &BnCache) -> (Tensor, Tensor, Tensor) {
    let g3 = as3(g);
    let (n, c, s) = g3.dim();
    let m = (n * s) as f64;
    let gam: Vec<f64> = gamma.iter().copied().collect();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            for si in 0..s {
                let gv = g3[[ni, ci, si]];
                dbeta[ci] += gv;
                dgamma[ci] += gv * cache.xhat[[ni, ci, si]];
            }
        }
    }
    let mut dx = Array3::<f64>::zeros((n, c, s));
    for ni in 0..n {
        for ci in 0..c {
            let k = gam[ci] * cache.inv_std[ci];
            for si in 0..s {
                let gv = g3[[ni, ci, si]];
                dx[[ni, ci, si]] = if cache.training {
                    // with dxhat = g * gamma:
                    // dx = inv_std / m * (m dxhat - sum dxhat - xhat sum(dxhat xhat))
                    k * (gv - dbeta[ci] / m - cache.xhat[[ni, ci, si]] * dgamma[ci] / m)
                } else {
                    k * gv
                };
            }
        }
    }
    let dx = dx
        .into_shape_with_order(IxDyn(&cache.shape))
        .expect("same element count");
    (
        dx,
        ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).expect("vector"),
        ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).expect("vector"),
    )
}
