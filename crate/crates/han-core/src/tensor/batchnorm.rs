//! Fused 2-D batch normalization with full backward through the batch
//! statistics. Train mode normalizes by per-channel batch mean/variance
//! (biased, eps inside the square root) and folds the batch statistics into
//! the running buffers; eval mode normalizes by the running statistics.

use super::profile::span;
use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

impl Tensor {
    /// x [n, c, h, w], gamma/beta/running_mean/running_var [c].
    /// In train mode the running buffers are updated in place:
    /// `running = momentum * running + (1 - momentum) * batch_stat`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &Tensor,
        running_var: &Tensor,
        momentum: f64,
        eps: f64,
        mode: Mode,
    ) -> Result<Tensor> {
        let (n, c, h, w) = match *self.shape() {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(TensorError::BadRank { expected: 4, got: self.shape().to_vec() }),
        };
        for t in [gamma, beta, running_mean, running_var] {
            if t.shape() != [c] {
                return Err(TensorError::ShapeMismatch(t.shape().to_vec(), vec![c]));
            }
        }
        let area = h * w;
        let m = n * area;
        if mode == Mode::Train && m < 2 {
            return Err(TensorError::BatchNormTooSmall(m));
        }

        let _p = span("batchnorm.forward");
        let (mean, inv_std) = match mode {
            Mode::Train => {
                let x = self.data();
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let plane = &x[(s * c + ch) * area..(s * c + ch + 1) * area];
                        mean[ch] += plane.iter().sum::<f64>();
                    }
                }
                for v in mean.iter_mut() {
                    *v /= m as f64;
                }
                for s in 0..n {
                    for ch in 0..c {
                        let mu = mean[ch];
                        let plane = &x[(s * c + ch) * area..(s * c + ch + 1) * area];
                        var[ch] += plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                }
                for v in var.iter_mut() {
                    *v /= m as f64;
                }
                drop(x);
                {
                    let mut rm = running_mean.data_mut();
                    let mut rv = running_var.data_mut();
                    for ch in 0..c {
                        rm[ch] = momentum * rm[ch] + (1.0 - momentum) * mean[ch];
                        rv[ch] = momentum * rv[ch] + (1.0 - momentum) * var[ch];
                    }
                }
                let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                (mean, inv_std)
            }
            Mode::Eval => {
                let mean = running_mean.to_vec();
                let inv_std: Vec<f64> =
                    running_var.data().iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                (mean, inv_std)
            }
        };

        let mut out = vec![0.0f64; n * c * area];
        {
            let x = self.data();
            let g = gamma.data();
            let b = beta.data();
            for s in 0..n {
                for ch in 0..c {
                    let scale = g[ch] * inv_std[ch];
                    let shift = b[ch] - mean[ch] * scale;
                    let src = &x[(s * c + ch) * area..(s * c + ch + 1) * area];
                    let dst = &mut out[(s * c + ch) * area..(s * c + ch + 1) * area];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = v * scale + shift;
                    }
                }
            }
        }

        let x_saved = self.clone();
        let g_saved = gamma.clone();
        let b_saved = beta.clone();
        Ok(Tensor::from_op(
            vec![n, c, h, w],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |ctx| {
                let _p = span("batchnorm.backward");
                let up = ctx.grad;
                let x = x_saved.data();
                let gam = g_saved.data();
                // per-channel sums of g and g * x_hat
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * area;
                        let mu = mean[ch];
                        let is = inv_std[ch];
                        let gsl = &up[off..off + area];
                        let xsl = &x[off..off + area];
                        let mut sg = 0.0;
                        let mut sgx = 0.0;
                        for (&gv, &xv) in gsl.iter().zip(xsl) {
                            sg += gv;
                            sgx += gv * (xv - mu) * is;
                        }
                        sum_g[ch] += sg;
                        sum_gx[ch] += sgx;
                    }
                }
                if b_saved.requires_grad() {
                    b_saved.add_to_grad(&sum_g);
                }
                if g_saved.requires_grad() {
                    g_saved.add_to_grad(&sum_gx);
                }
                if x_saved.requires_grad() {
                    let mut dx = x_saved.grad_buf_mut();
                    let mf = m as f64;
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * area;
                            let mu = mean[ch];
                            let is = inv_std[ch];
                            let coeff = gam[ch] * is;
                            let gsl = &up[off..off + area];
                            let xsl = &x[off..off + area];
                            let dsl = &mut dx[off..off + area];
                            match mode {
                                Mode::Train => {
                                    let mg = sum_g[ch] / mf;
                                    let mgx = sum_gx[ch] / mf;
                                    for ((d, &gv), &xv) in dsl.iter_mut().zip(gsl).zip(xsl) {
                                        let xh = (xv - mu) * is;
                                        *d += coeff * (gv - mg - xh * mgx);
                                    }
                                }
                                Mode::Eval => {
                                    for (d, &gv) in dsl.iter_mut().zip(gsl) {
                                        *d += coeff * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_pair(c: usize) -> (Tensor, Tensor) {
        (Tensor::zeros(&[c]), Tensor::full(&[c], 1.0))
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::param(&[2, 2, 2, 2], vec![3.0; 16]).unwrap();
        let gamma = Tensor::param(&[2], vec![1.5, 0.5]).unwrap();
        let beta = Tensor::param(&[2], vec![-1.0, 2.0]).unwrap();
        let (rm, rv) = stats_pair(2);
        let y = x.batchnorm2d(&gamma, &beta, &rm, &rv, 0.9, 1e-5, Mode::Train).unwrap();
        let v = y.to_vec();
        for s in 0..2 {
            for (ch, want) in [(0usize, -1.0), (1, 2.0)] {
                for i in 0..4 {
                    assert!((v[(s * 2 + ch) * 4 + i] - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn normalizes_to_zero_mean_unit_variance() {
        let data: Vec<f64> = (0..32).map(|i| (i as f64) * 0.37 - 3.0).collect();
        let x = Tensor::param(&[2, 1, 4, 4], data).unwrap();
        let gamma = Tensor::param(&[1], vec![1.0]).unwrap();
        let beta = Tensor::param(&[1], vec![0.0]).unwrap();
        let (rm, rv) = stats_pair(1);
        let y = x.batchnorm2d(&gamma, &beta, &rm, &rv, 0.9, 1e-5, Mode::Train).unwrap();
        let v = y.to_vec();
        let mean: f64 = v.iter().sum::<f64>() / 32.0;
        let var: f64 = v.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let x = Tensor::param(&[1, 1, 2, 2], vec![2.0, 4.0, 6.0, 8.0]).unwrap();
        let gamma = Tensor::param(&[1], vec![1.0]).unwrap();
        let beta = Tensor::param(&[1], vec![0.0]).unwrap();
        let (rm, rv) = stats_pair(1);
        x.batchnorm2d(&gamma, &beta, &rm, &rv, 0.9, 1e-5, Mode::Train).unwrap();
        // batch mean 5, biased variance 5
        assert!((rm.to_vec()[0] - 0.5).abs() < 1e-12);
        assert!((rv.to_vec()[0] - (0.9 + 0.1 * 5.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_uses_running_stats_deterministically() {
        let x = Tensor::param(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::param(&[1], vec![2.0]).unwrap();
        let beta = Tensor::param(&[1], vec![1.0]).unwrap();
        let rm = Tensor::constant(&[1], vec![2.0]).unwrap();
        let rv = Tensor::constant(&[1], vec![4.0]).unwrap();
        let y = x.batchnorm2d(&gamma, &beta, &rm, &rv, 0.9, 0.0, Mode::Eval).unwrap();
        let v = y.to_vec();
        for (i, xin) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            let want = 2.0 * (xin - 2.0) / 2.0 + 1.0;
            assert!((v[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_element_train_rejected() {
        let x = Tensor::param(&[1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let gamma = Tensor::param(&[3], vec![1.0; 3]).unwrap();
        let beta = Tensor::param(&[3], vec![0.0; 3]).unwrap();
        let (rm, rv) = stats_pair(3);
        let err = x.batchnorm2d(&gamma, &beta, &rm, &rv, 0.9, 1e-5, Mode::Train);
        assert!(matches!(err, Err(TensorError::BatchNormTooSmall(1))));
    }
}
