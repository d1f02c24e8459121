//! Per-channel batch normalization forward/backward.
//!
//! Train mode normalizes with biased batch statistics and reports updated
//! running statistics; eval mode uses the stored running statistics. Running
//! variance is updated with the unbiased estimate.

use ndarray::{Array1, Array4, ArrayView4};

pub struct BnForward {
    pub y: Array4<f64>,
    /// Normalized activations, kept for the backward pass.
    pub xhat: Array4<f64>,
    /// Per-channel 1/sqrt(var + eps) actually used for normalization.
    pub inv_std: Array1<f64>,
    /// Updated running statistics (train mode only).
    pub new_running: Option<(Array1<f64>, Array1<f64>)>,
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward(
    x: ArrayView4<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    running_mean: &Array1<f64>,
    running_var: &Array1<f64>,
    training: bool,
    momentum: f64,
    eps: f64,
) -> BnForward {
    let (b, c, h, w) = x.dim();
    assert_eq!(gamma.len(), c);
    let plane = h * w;
    let n = (b * plane) as f64;
    let xs = x.as_slice().expect("contiguous input");

    let (mean, var) = if training {
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let mut s = 0.0f64;
            let mut s2 = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for v in &xs[base..base + plane] {
                    s += v;
                    s2 += v * v;
                }
            }
            let m = s / n;
            mean[ci] = m;
            var[ci] = ((s2 / n) - m * m).max(0.0);
        }
        (mean, var)
    } else {
        (running_mean.clone(), running_var.clone())
    };

    let mut inv_std = Array1::<f64>::zeros(c);
    for ci in 0..c {
        inv_std[ci] = 1.0 / (var[ci] + eps).sqrt();
    }

    let mut xhat = vec![0.0f64; b * c * plane];
    let mut y = vec![0.0f64; b * c * plane];
    for bi in 0..b {
        for ci in 0..c {
            let (m, is, g, bt) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            let base = (bi * c + ci) * plane;
            for i in base..base + plane {
                let xh = (xs[i] - m) * is;
                xhat[i] = xh;
                y[i] = g * xh + bt;
            }
        }
    }

    let new_running = if training {
        let mut rm = running_mean.clone();
        let mut rv = running_var.clone();
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for ci in 0..c {
            rm[ci] = (1.0 - momentum) * rm[ci] + momentum * mean[ci];
            rv[ci] = (1.0 - momentum) * rv[ci] + momentum * var[ci] * unbias;
        }
        Some((rm, rv))
    } else {
        None
    };

    BnForward {
        y: Array4::from_shape_vec((b, c, h, w), y).unwrap(),
        xhat: Array4::from_shape_vec((b, c, h, w), xhat).unwrap(),
        inv_std,
        new_running,
    }
}

pub struct BnGrads {
    pub gx: Array4<f64>,
    pub ggamma: Array1<f64>,
    pub gbeta: Array1<f64>,
}

pub fn batchnorm_backward(
    grad_out: ArrayView4<f64>,
    xhat: &Array4<f64>,
    inv_std: &Array1<f64>,
    gamma: &Array1<f64>,
    training: bool,
) -> BnGrads {
    let (b, c, h, w) = grad_out.dim();
    let plane = h * w;
    let n = (b * plane) as f64;
    let gs = grad_out.as_slice().expect("contiguous grad");
    let xh = xhat.as_slice().expect("contiguous xhat");

    let mut ggamma = Array1::<f64>::zeros(c);
    let mut gbeta = Array1::<f64>::zeros(c);
    let mut sum_gy = vec![0.0f64; c];
    let mut sum_gy_xhat = vec![0.0f64; c];
    for ci in 0..c {
        let mut sg = 0.0f64;
        let mut sgx = 0.0f64;
        for bi in 0..b {
            let base = (bi * c + ci) * plane;
            for i in base..base + plane {
                sg += gs[i];
                sgx += gs[i] * xh[i];
            }
        }
        sum_gy[ci] = sg;
        sum_gy_xhat[ci] = sgx;
        gbeta[ci] = sg;
        ggamma[ci] = sgx;
    }

    let mut gx = vec![0.0f64; b * c * plane];
    for ci in 0..c {
        let g_is = gamma[ci] * inv_std[ci];
        let mean_gy = sum_gy[ci] / n;
        let mean_gy_xhat = sum_gy_xhat[ci] / n;
        for bi in 0..b {
            let base = (bi * c + ci) * plane;
            if training {
                for i in base..base + plane {
                    gx[i] = g_is * (gs[i] - mean_gy - xh[i] * mean_gy_xhat);
                }
            } else {
                // Eval statistics do not depend on x.
                for i in base..base + plane {
                    gx[i] = g_is * gs[i];
                }
            }
        }
    }

    BnGrads {
        gx: Array4::from_shape_vec((b, c, h, w), gx).unwrap(),
        ggamma,
        gbeta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::prelude::*;

    #[test]
    fn train_mode_output_is_normalized() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let x = Array4::from_shape_fn((4, 2, 5, 5), |_| rng.gen::<f64>() * 3.0 + 1.0);
        let gamma = Array1::ones(2);
        let beta = Array1::zeros(2);
        let rm = Array1::zeros(2);
        let rv = Array1::ones(2);
        let out = batchnorm_forward(x.view(), &gamma, &beta, &rm, &rv, true, 0.1, 1e-5);
        for ci in 0..2 {
            let ch = out.y.index_axis(ndarray::Axis(1), ci);
            let n = ch.len() as f64;
            let mean: f64 = ch.iter().sum::<f64>() / n;
            let var: f64 = ch.iter().map(|v| (*v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        assert!(out.new_running.is_some());
    }

    #[test]
    fn eval_mode_uses_running_stats_and_is_per_sample() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        let x = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.gen::<f64>());
        let gamma = Array1::from_vec(vec![2.0, 0.5]);
        let beta = Array1::from_vec(vec![0.1, -0.2]);
        let rm = Array1::from_vec(vec![0.4, 0.6]);
        let rv = Array1::from_vec(vec![0.25, 4.0]);
        let full = batchnorm_forward(x.view(), &gamma, &beta, &rm, &rv, false, 0.1, 1e-5);
        // Single-sample slice must match the batched result exactly.
        let x0 = x.slice(ndarray::s![0..1, .., .., ..]).to_owned();
        let single = batchnorm_forward(x0.view(), &gamma, &beta, &rm, &rv, false, 0.1, 1e-5);
        let diff = (&full.y.slice(ndarray::s![0..1, .., .., ..]) - &single.y)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        assert_eq!(diff, 0.0);
        assert!(full.new_running.is_none());
    }
}
