//! Batch normalization over `[N, C]` features or `[N, C, H, W]` maps, with
//! statistics taken per channel over every other axis.

use super::tape::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch statistics observed in a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the estimator used for running statistics.
    pub var: Vec<T>,
}

/// Channels, elements per channel and sample, and elements per channel.
fn layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "batch_norm expects [N, C, ...], got {shape:?}");
    let s: usize = shape[2..].iter().product();
    (shape[1], s, shape[0] * s)
}

impl<T: Scalar> Tape<T> {
    /// Training-mode batch normalization using the statistics of `x` itself.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> (Var, BatchStats<T>) {
        let xs = self.shape(x).to_vec();
        let (c, s, m) = layout(&xs);
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let ch = move |k: usize| (k / s) % c;
        let xv = self.value(x).data();
        let nt = T::from_usize_lossy(m);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for (k, &v) in xv.iter().enumerate() {
            mean[ch(k)] += v;
        }
        for mu in &mut mean {
            *mu /= nt;
        }
        for (k, &v) in xv.iter().enumerate() {
            let d = v - mean[ch(k)];
            var[ch(k)] += d * d;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / nt + eps).sqrt()).collect();
        let xhat = Tensor::from_fn(&xs, |k| (xv[k] - mean[ch(k)]) * inv_std[ch(k)]);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let value = Tensor::from_fn(&xs, |k| gv[ch(k)] * xhat.data()[k] + bv[ch(k)]);
        let unbiased = if m > 1 {
            var.iter().map(|&v| v / T::from_usize_lossy(m - 1)).collect()
        } else {
            vec![T::zero(); c]
        };
        let stats = BatchStats { mean, var: unbiased };

        let out = self.push_op(value, &[x, gamma, beta], move |g, inputs, _| {
            let gd = g.data();
            let gamma = inputs[1].data();
            let xh = xhat.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for k in 0..gd.len() {
                dgamma[ch(k)] += gd[k] * xh[k];
                dbeta[ch(k)] += gd[k];
            }
            let dx = Tensor::from_fn(&xs, |k| {
                let j = ch(k);
                gamma[j] * inv_std[j] * (gd[k] - dbeta[j] / nt - xh[k] * dgamma[j] / nt)
            });
            vec![
                Some(dx),
                Some(Tensor::new(&[c], dgamma).expect("c")),
                Some(Tensor::new(&[c], dbeta).expect("c")),
            ]
        });
        (out, stats)
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Var {
        let xs = self.shape(x).to_vec();
        let (c, s, _) = layout(&xs);
        let ch = move |k: usize| (k / s) % c;
        assert_eq!(mean.len(), c);
        assert_eq!(var.len(), c);
        let mean = mean.to_vec();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let value = Tensor::from_fn(&xs, |k| {
            let j = ch(k);
            gv[j] * (xv[k] - mean[j]) * inv_std[j] + bv[j]
        });
        self.push_op(value, &[x, gamma, beta], move |g, inputs, _| {
            let (gd, xv, gamma) = (g.data(), inputs[0].data(), inputs[1].data());
            let dx = Tensor::from_fn(&xs, |k| gd[k] * gamma[ch(k)] * inv_std[ch(k)]);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for k in 0..gd.len() {
                let j = ch(k);
                dgamma[j] += gd[k] * (xv[k] - mean[j]) * inv_std[j];
                dbeta[j] += gd[k];
            }
            vec![
                Some(dx),
                Some(Tensor::new(&[c], dgamma).expect("c")),
                Some(Tensor::new(&[c], dbeta).expect("c")),
            ]
        })
    }
}
