//! Low-level differentiable ops on `f32` tensors.
//!
//! Convolutions go through im2col and a single GEMM per layer. All math is
//! single-threaded and accumulation orders are fixed, so every op is
//! bitwise deterministic.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};

/// Output spatial size of a conv/pool window.
pub fn out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Gather conv windows: `(N, C, H, W)` -> `(N*Ho*Wo, C*K*K)`.
pub fn im2col(x: &ArrayView4<f32>, k: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(w, k, stride, pad);
    let ckk = c * k * k;
    let mut cols = Array2::<f32>::zeros((n * ho * wo, ckk));
    let x_slice = x.as_slice().expect("x is standard layout");
    let cols_slice = cols.as_slice_mut().expect("cols is standard layout");
    for ni in 0..n {
        for hi in 0..ho {
            let y0 = (hi * stride) as isize - pad as isize;
            for wi in 0..wo {
                let x0 = (wi * stride) as isize - pad as isize;
                let row = ((ni * ho + hi) * wo + wi) * ckk;
                let mut col = 0usize;
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for ky in 0..k {
                        let yy = y0 + ky as isize;
                        if yy < 0 || yy >= h as isize {
                            col += k;
                            continue;
                        }
                        let line = base + yy as usize * w;
                        for kx in 0..k {
                            let xx = x0 + kx as isize;
                            if xx >= 0 && xx < w as isize {
                                cols_slice[row + col] = x_slice[line + xx as usize];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the inverse of [`im2col`]: `(N*Ho*Wo, C*K*K)` -> `(N, C, H, W)`.
pub fn col2im(
    dcols: &Array2<f32>,
    input_dim: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (n, c, h, w) = input_dim;
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(w, k, stride, pad);
    let ckk = c * k * k;
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let dcols_slice = dcols.as_slice().expect("dcols is standard layout");
    let dx_slice = dx.as_slice_mut().expect("dx is standard layout");
    for ni in 0..n {
        for hi in 0..ho {
            let y0 = (hi * stride) as isize - pad as isize;
            for wi in 0..wo {
                let x0 = (wi * stride) as isize - pad as isize;
                let row = ((ni * ho + hi) * wo + wi) * ckk;
                let mut col = 0usize;
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for ky in 0..k {
                        let yy = y0 + ky as isize;
                        if yy < 0 || yy >= h as isize {
                            col += k;
                            continue;
                        }
                        let line = base + yy as usize * w;
                        for kx in 0..k {
                            let xx = x0 + kx as isize;
                            if xx >= 0 && xx < w as isize {
                                dx_slice[line + xx as usize] += dcols_slice[row + col];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Conv2d forward. `weight` is `(Cout, Cin, K, K)`, `bias` is `(Cout,)`.
pub fn conv2d_forward(
    x: &ArrayView4<f32>,
    weight: &ArrayView4<f32>,
    bias: &ArrayView1<f32>,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (n, _c, h, w) = x.dim();
    let (cout, cin, k, _) = weight.dim();
    debug_assert_eq!(_c, cin);
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(w, k, stride, pad);

    let cols = im2col(x, k, stride, pad);
    let w2 = weight
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .expect("contiguous kernel");
    // (N*Ho*Wo, CKK) x (CKK, Cout)
    let y2 = cols.dot(&w2.t());

    let mut y = Array4::<f32>::zeros((n, cout, ho, wo));
    {
        let y2s = y2.as_slice().expect("standard layout");
        let ys = y.as_slice_mut().expect("standard layout");
        let bs = bias.as_slice().expect("standard layout");
        for ni in 0..n {
            for hi in 0..ho {
                for wi in 0..wo {
                    let row = ((ni * ho + hi) * wo + wi) * cout;
                    for co in 0..cout {
                        ys[((ni * cout + co) * ho + hi) * wo + wi] = y2s[row + co] + bs[co];
                    }
                }
            }
        }
    }
    y
}

/// Conv2d backward. Returns `(dx, dw, db)`; recomputes im2col from `x`.
pub fn conv2d_backward(
    x: &ArrayView4<f32>,
    weight: &ArrayView4<f32>,
    dy: &ArrayView4<f32>,
    stride: usize,
    pad: usize,
) -> (Array4<f32>, Array4<f32>, Array1<f32>) {
    let (n, cin, h, w) = x.dim();
    let (cout, _cin, k, _) = weight.dim();
    let (_, _, ho, wo) = dy.dim();

    // dy (N, Cout, Ho, Wo) -> (N*Ho*Wo, Cout)
    let mut dy2 = Array2::<f32>::zeros((n * ho * wo, cout));
    {
        let dys = dy.as_slice().expect("standard layout");
        let d2 = dy2.as_slice_mut().expect("standard layout");
        for ni in 0..n {
            for co in 0..cout {
                for hi in 0..ho {
                    for wi in 0..wo {
                        d2[((ni * ho + hi) * wo + wi) * cout + co] =
                            dys[((ni * cout + co) * ho + hi) * wo + wi];
                    }
                }
            }
        }
    }

    let cols = im2col(x, k, stride, pad);
    let dw2 = dy2.t().dot(&cols); // (Cout, CKK)
    let dw = dw2
        .into_shape_with_order((cout, cin, k, k))
        .expect("contiguous");
    let db = dy2.sum_axis(Axis(0));

    let w2 = weight
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .expect("contiguous kernel");
    let dcols = dy2.dot(&w2); // (N*Ho*Wo, CKK)
    let dx = col2im(&dcols, (n, cin, h, w), k, stride, pad);
    (dx, dw, db)
}

/// Max-pool forward; `argmax` records the flat input index of the winner
/// for every output element.
pub fn maxpool_forward(
    x: &ArrayView4<f32>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array4<f32>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(w, k, stride, pad);
    let mut y = Array4::<f32>::zeros((n, c, ho, wo));
    let mut argmax = vec![0u32; n * c * ho * wo];
    let xs = x.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for hi in 0..ho {
                let y0 = (hi * stride) as isize - pad as isize;
                for wi in 0..wo {
                    let x0 = (wi * stride) as isize - pad as isize;
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..k {
                        let yy = y0 + ky as isize;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xx = x0 + kx as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let idx = base + yy as usize * w + xx as usize;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let out_idx = ((ni * c + ci) * ho + hi) * wo + wi;
                    ys[out_idx] = best;
                    argmax[out_idx] = best_idx as u32;
                }
            }
        }
    }
    (y, argmax)
}

pub fn maxpool_backward(
    dy: &ArrayView4<f32>,
    argmax: &[u32],
    input_dim: (usize, usize, usize, usize),
) -> Array4<f32> {
    let mut dx = Array4::<f32>::zeros(input_dim);
    let dxs = dx.as_slice_mut().expect("standard layout");
    for (i, &d) in dy.as_slice().expect("standard layout").iter().enumerate() {
        dxs[argmax[i] as usize] += d;
    }
    dx
}

/// Dense forward: `x (N, F)`, `weight (O, F)`, `bias (O,)` -> `(N, O)`.
pub fn dense_forward(x: &ArrayView2<f32>, weight: &ArrayView2<f32>, bias: &ArrayView1<f32>) -> Array2<f32> {
    let mut y = x.dot(&weight.t());
    for mut row in y.rows_mut() {
        row += bias;
    }
    y
}

/// Dense backward: returns `(dx, dw, db)`.
pub fn dense_backward(
    x: &ArrayView2<f32>,
    weight: &ArrayView2<f32>,
    dy: &ArrayView2<f32>,
) -> (Array2<f32>, Array2<f32>, Array1<f32>) {
    let dw = dy.t().dot(x);
    let db = dy.sum_axis(Axis(0));
    let dx = dy.dot(weight);
    (dx, dw, db)
}

/// Batch-norm forward over the channel axis of `(N, C, H, W)`.
///
/// In training mode normalizes with batch statistics and returns them; in
/// eval mode uses the provided running statistics. Returns
/// `(y, xhat, inv_std, batch_mean, batch_var)`; the last two are zero-length
/// in eval mode.
#[allow(clippy::type_complexity)]
pub fn batchnorm_forward(
    x: &ArrayView4<f32>,
    gamma: &ArrayView1<f32>,
    beta: &ArrayView1<f32>,
    running_mean: &ArrayView1<f32>,
    running_var: &ArrayView1<f32>,
    eps: f64,
    training: bool,
) -> (Array4<f32>, Array4<f32>, Array1<f32>, Array1<f32>, Array1<f32>) {
    let (n, c, h, w) = x.dim();
    let m = (n * h * w) as f64;
    let mut mean = Array1::<f32>::zeros(c);
    let mut var = Array1::<f32>::zeros(c);
    if training {
        for ci in 0..c {
            let ch = x.index_axis(Axis(1), ci);
            let mu: f64 = ch.iter().map(|&v| v as f64).sum::<f64>() / m;
            let v2: f64 = ch.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / m;
            mean[ci] = mu as f32;
            var[ci] = v2 as f32;
        }
    } else {
        mean.assign(running_mean);
        var.assign(running_var);
    }
    let inv_std = var.mapv(|v| 1.0 / ((v as f64 + eps).sqrt() as f32));
    let mut xhat = Array4::<f32>::zeros((n, c, h, w));
    let mut y = Array4::<f32>::zeros((n, c, h, w));
    for ci in 0..c {
        let mu = mean[ci];
        let is = inv_std[ci];
        let g = gamma[ci];
        let b = beta[ci];
        let xc = x.index_axis(Axis(1), ci);
        let mut xh = xhat.index_axis_mut(Axis(1), ci);
        let mut yc = y.index_axis_mut(Axis(1), ci);
        ndarray::Zip::from(&mut xh).and(&mut yc).and(&xc).for_each(|xh, yc, &xv| {
            let t = (xv - mu) * is;
            *xh = t;
            *yc = g * t + b;
        });
    }
    if training {
        (y, xhat, inv_std, mean, var)
    } else {
        (y, xhat, inv_std, Array1::zeros(0), Array1::zeros(0))
    }
}

/// Batch-norm backward (training mode). Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(
    dy: &ArrayView4<f32>,
    xhat: &ArrayView4<f32>,
    inv_std: &ArrayView1<f32>,
    gamma: &ArrayView1<f32>,
    train_stats: bool,
) -> (Array4<f32>, Array1<f32>, Array1<f32>) {
    let (n, c, h, w) = dy.dim();
    let m = (n * h * w) as f64;
    let mut dgamma = Array1::<f32>::zeros(c);
    let mut dbeta = Array1::<f32>::zeros(c);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for ci in 0..c {
        let dyc = dy.index_axis(Axis(1), ci);
        let xhc = xhat.index_axis(Axis(1), ci);
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for (&d, &xh) in dyc.iter().zip(xhc.iter()) {
            sum_dy += d as f64;
            sum_dy_xhat += d as f64 * xh as f64;
        }
        dgamma[ci] = sum_dy_xhat as f32;
        dbeta[ci] = sum_dy as f32;
        let g = gamma[ci] as f64;
        let is = inv_std[ci] as f64;
        let mut dxc = dx.index_axis_mut(Axis(1), ci);
        if train_stats {
            // Full backward through the batch statistics.
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xhc)
                .for_each(|dx, &d, &xh| {
                    let t = g * is
                        * (d as f64 - sum_dy / m - xh as f64 * sum_dy_xhat / m);
                    *dx = t as f32;
                });
        } else {
            // Eval-mode normalization (frozen stats): plain affine chain.
            ndarray::Zip::from(&mut dxc).and(&dyc).for_each(|dx, &d| {
                *dx = (g * is * d as f64) as f32;
            });
        }
    }
    (dx, dgamma, dbeta)
}

/// ReLU forward (any dimensionality handled by the caller per array type).
pub fn relu4(x: &mut Array4<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

pub fn relu2(x: &mut Array2<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Global average pool `(N, C, H, W)` -> `(N, C)`.
pub fn global_avg_pool(x: &ArrayView4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut y = Array2::<f32>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let s: f32 = x
                .index_axis(Axis(0), ni)
                .index_axis(Axis(0), ci)
                .iter()
                .sum();
            y[[ni, ci]] = s * scale;
        }
    }
    y
}

pub fn global_avg_pool_backward(
    dy: &ArrayView2<f32>,
    input_dim: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (n, c, h, w) = input_dim;
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let v = dy[[ni, ci]] * scale;
            dx.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .fill(v);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn4(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(dim, |_| rng.gen_range(-1.0f32..1.0))
    }

    /// Direct nested-loop convolution: the oracle for the im2col path.
    fn conv2d_direct(
        x: &Array4<f32>,
        weight: &Array4<f32>,
        bias: &Array1<f32>,
        stride: usize,
        pad: usize,
    ) -> Array4<f32> {
        let (n, cin, h, w) = x.dim();
        let (cout, _, k, _) = weight.dim();
        let ho = out_size(h, k, stride, pad);
        let wo = out_size(w, k, stride, pad);
        let mut y = Array4::<f32>::zeros((n, cout, ho, wo));
        for ni in 0..n {
            for co in 0..cout {
                for hi in 0..ho {
                    for wi in 0..wo {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                let yy = (hi * stride + ky) as isize - pad as isize;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let xx = (wi * stride + kx) as isize - pad as isize;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    acc += x[[ni, ci, yy as usize, xx as usize]]
                                        * weight[[co, ci, ky, kx]];
                                }
                            }
                        }
                        y[[ni, co, hi, wi]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_conv() {
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 3, 7), (2, 0, 1)] {
            let x = randn4((2, 3, 12, 12), 10 + k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let w = Array4::from_shape_fn((4, 3, k, k), |_| rng.gen_range(-0.5f32..0.5));
            let b = Array1::from_shape_fn(4, |_| rng.gen_range(-0.5f32..0.5));
            let fast = conv2d_forward(&x.view(), &w.view(), &b.view(), stride, pad);
            let slow = conv2d_direct(&x, &w, &b, stride, pad);
            let max_abs = fast
                .iter()
                .zip(slow.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_abs < 1e-4, "stride={stride} pad={pad} k={k}: {max_abs}");
        }
    }

    /// Central finite differences of scalar L = sum(y * r) wrt one tensor.
    fn approx_grad<F>(param: &mut [f32], loss: &mut F, h: f32) -> Vec<f32>
    where
        F: FnMut(&[f32]) -> f64,
    {
        let mut grad = vec![0f32; param.len()];
        for i in 0..param.len() {
            let orig = param[i];
            param[i] = orig + h;
            let lp = loss(param);
            param[i] = orig - h;
            let lm = loss(param);
            param[i] = orig;
            grad[i] = ((lp - lm) / (2.0 * h as f64)) as f32;
        }
        grad
    }

    fn assert_close(analytic: &[f32], numeric: &[f32], tol: f32, what: &str) {
        for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            let denom = a.abs().max(n.abs()).max(1.0);
            assert!(
                (a - n).abs() / denom < tol,
                "{what}[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x0 = randn4((2, 2, 6, 6), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w0 = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.gen_range(-0.5f32..0.5));
        let b0 = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5f32..0.5));
        let r = randn4((2, 3, 6, 6), 3);

        let y = conv2d_forward(&x0.view(), &w0.view(), &b0.view(), 1, 1);
        assert_eq!(y.dim(), r.dim());
        let (dx, dw, db) = conv2d_backward(&x0.view(), &w0.view(), &r.view(), 1, 1);

        let mut w_flat: Vec<f32> = w0.iter().copied().collect();
        let numeric_dw = approx_grad(
            &mut w_flat,
            &mut |p: &[f32]| {
                let w = Array4::from_shape_vec((3, 2, 3, 3), p.to_vec()).unwrap();
                let y = conv2d_forward(&x0.view(), &w.view(), &b0.view(), 1, 1);
                y.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            },
            1e-2,
        );
        assert_close(dw.as_slice().unwrap(), &numeric_dw, 2e-2, "dw");

        let mut x_flat: Vec<f32> = x0.iter().copied().collect();
        let numeric_dx = approx_grad(
            &mut x_flat,
            &mut |p: &[f32]| {
                let x = Array4::from_shape_vec((2, 2, 6, 6), p.to_vec()).unwrap();
                let y = conv2d_forward(&x.view(), &w0.view(), &b0.view(), 1, 1);
                y.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            },
            1e-2,
        );
        assert_close(dx.as_slice().unwrap(), &numeric_dx, 2e-2, "dx");

        let mut b_flat: Vec<f32> = b0.iter().copied().collect();
        let numeric_db = approx_grad(
            &mut b_flat,
            &mut |p: &[f32]| {
                let b = Array1::from_vec(p.to_vec());
                let y = conv2d_forward(&x0.view(), &w0.view(), &b.view(), 1, 1);
                y.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            },
            1e-2,
        );
        assert_close(db.as_slice().unwrap(), &numeric_db, 2e-2, "db");
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0f32..1.0));
        let w0 = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-0.5f32..0.5));
        let b0 = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5f32..0.5));
        let r = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0f32..1.0));

        let (dx, dw, db) = dense_backward(&x0.view(), &w0.view(), &r.view());

        let mut w_flat: Vec<f32> = w0.iter().copied().collect();
        let numeric_dw = approx_grad(
            &mut w_flat,
            &mut |p: &[f32]| {
                let w = Array2::from_shape_vec((3, 5), p.to_vec()).unwrap();
                let y = dense_forward(&x0.view(), &w.view(), &b0.view());
                y.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            },
            1e-2,
        );
        assert_close(dw.as_slice().unwrap(), &numeric_dw, 2e-2, "dw");

        let mut x_flat: Vec<f32> = x0.iter().copied().collect();
        let numeric_dx = approx_grad(
            &mut x_flat,
            &mut |p: &[f32]| {
                let x = Array2::from_shape_vec((4, 5), p.to_vec()).unwrap();
                let y = dense_forward(&x.view(), &w0.view(), &b0.view());
                y.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            },
            1e-2,
        );
        assert_close(dx.as_slice().unwrap(), &numeric_dx, 2e-2, "dx");

        let mut b_flat: Vec<f32> = b0.iter().copied().collect();
        let numeric_db = approx_grad(
            &mut b_flat,
            &mut |p: &[f32]| {
                let b = Array1::from_vec(p.to_vec());
                let y = dense_forward(&x0.view(), &w0.view(), &b.view());
                y.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            },
            1e-2,
        );
        assert_close(db.as_slice().unwrap(), &numeric_db, 2e-2, "db");
    }

    #[test]
    fn maxpool_roundtrip_gradient() {
        let x = randn4((2, 3, 8, 8), 4);
        let (y, argmax) = maxpool_forward(&x.view(), 2, 2, 0);
        assert_eq!(y.dim(), (2, 3, 4, 4));
        // Each input element participates in exactly one window; the winner
        // receives the full gradient.
        let dy = Array4::from_elem((2, 3, 4, 4), 1.0f32);
        let dx = maxpool_backward(&dy.view(), &argmax, (2, 3, 8, 8));
        let total: f32 = dx.iter().sum();
        assert_eq!(total, (2 * 3 * 4 * 4) as f32);
        // Winners are the max of their window.
        for ((n, c, h, w), &v) in y.indexed_iter() {
            let window = x.slice(ndarray::s![n, c, h * 2..h * 2 + 2, w * 2..w * 2 + 2]);
            let m = window.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(v, m);
        }
    }

    #[test]
    fn maxpool_padded_stem_shape() {
        let x = randn4((1, 2, 16, 16), 5);
        let (y, _) = maxpool_forward(&x.view(), 3, 2, 1);
        assert_eq!(y.dim(), (1, 2, 8, 8));
    }

    #[test]
    fn batchnorm_normalizes_and_backprops() {
        let x = randn4((4, 3, 5, 5), 6);
        let gamma = Array1::from_elem(3, 1.5f32);
        let beta = Array1::from_elem(3, 0.25f32);
        let rm = Array1::zeros(3);
        let rv = Array1::ones(3);
        let (y, xhat, inv_std, mean, var) =
            batchnorm_forward(&x.view(), &gamma.view(), &beta.view(), &rm.view(), &rv.view(), 1e-5, true);
        assert_eq!(mean.len(), 3);
        assert_eq!(var.len(), 3);
        // Per-channel output mean ~= beta, std ~= gamma.
        for ci in 0..3 {
            let ch = y.index_axis(Axis(1), ci);
            let m: f64 = ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64;
            assert!((m - 0.25).abs() < 1e-4, "mean {m}");
        }

        // Finite-difference check for dx.
        let r = randn4((4, 3, 5, 5), 7);
        let (dx, _dg, _db) = batchnorm_backward(&r.view(), &xhat.view(), &inv_std.view(), &gamma.view(), true);
        let mut x_flat: Vec<f32> = x.iter().copied().collect();
        let loss = |p: &[f32]| -> f64 {
            let xx = Array4::from_shape_vec((4, 3, 5, 5), p.to_vec()).unwrap();
            let (yy, _, _, _, _) = batchnorm_forward(&xx.view(), &gamma.view(), &beta.view(), &rm.view(), &rv.view(), 1e-5, true);
            yy.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let mut numeric = vec![0f32; x_flat.len()];
        // Spot-check a subset; full check is slow.
        let picks: Vec<usize> = (0..x_flat.len()).step_by(37).collect();
        for &i in &picks {
            let orig = x_flat[i];
            let h = 1e-2f32;
            x_flat[i] = orig + h;
            let lp = loss(&x_flat);
            x_flat[i] = orig - h;
            let lm = loss(&x_flat);
            x_flat[i] = orig;
            numeric[i] = ((lp - lm) / (2.0 * h as f64)) as f32;
        }
        let dx_flat = dx.as_slice().unwrap();
        for &i in &picks {
            let denom = dx_flat[i].abs().max(numeric[i].abs()).max(1.0);
            assert!(
                (dx_flat[i] - numeric[i]).abs() / denom < 3e-2,
                "dx[{i}]: {} vs {}",
                dx_flat[i],
                numeric[i]
            );
        }
    }

    #[test]
    fn gap_forward_backward() {
        let x = randn4((2, 3, 4, 4), 8);
        let y = global_avg_pool(&x.view());
        assert_eq!(y.dim(), (2, 3));
        let expect: f32 = x.slice(ndarray::s![0, 0, .., ..]).iter().sum::<f32>() / 16.0;
        assert!((y[[0, 0]] - expect).abs() < 1e-6);
        let dy = Array2::from_elem((2, 3), 1.0f32);
        let dx = global_avg_pool_backward(&dy.view(), (2, 3, 4, 4));
        assert!((dx[[0, 0, 0, 0]] - 1.0 / 16.0).abs() < 1e-7);
    }
}
