//! Fused loss operations with hand-written backward passes.

use super::basic::{log_sum_exp, softmax_in_place};
use super::tape::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

impl<T: Scalar> Tape<T> {
    /// Mean softmax cross-entropy of `logits: [N, M]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let shape = self.shape(logits).to_vec();
        assert_eq!(shape.len(), 2);
        let (n, m) = (shape[0], shape[1]);
        assert_eq!(labels.len(), n);
        assert!(labels.iter().all(|&l| l < m), "label outside classifier range");
        let lv = self.value(logits);
        let nt = T::from_usize_lossy(n);
        let loss: T = (0..n)
            .map(|i| {
                let row = lv.row(i);
                log_sum_exp(row.iter().copied()) - row[labels[i]]
            })
            .sum::<T>()
            / nt;
        let labels = labels.to_vec();
        self.push_op(Tensor::scalar(loss), &[logits], move |g, inputs, _| {
            let scale = g.item() / nt;
            let mut d = inputs[0].clone();
            for (i, row) in d.data_mut().chunks_mut(m).enumerate() {
                softmax_in_place(row);
                row[labels[i]] -= T::one();
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            vec![Some(d)]
        })
    }

    /// Batch-hard triplet loss: for every anchor the farthest same-label
    /// sample and the nearest other-label sample under Euclidean distance,
    /// hinge `max(0, d_ap - d_an + margin)`, averaged over anchors.
    ///
    /// Ties resolve to the lowest index. Callers validate the batch layout.
    pub fn batch_hard_triplet(&mut self, x: Var, labels: &[usize], margin: T) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 2);
        let (n, d) = (shape[0], shape[1]);
        assert_eq!(labels.len(), n);
        let xv = self.value(x);
        let dist = |a: usize, b: usize| euclidean(xv.row(a), xv.row(b));
        // (anchor, positive, negative, d_ap, d_an) for anchors with positive hinge.
        let mut active: Vec<(usize, usize, usize, T, T)> = Vec::new();
        let mut total = T::zero();
        for a in 0..n {
            let mut pos: Option<(usize, T)> = None;
            let mut neg: Option<(usize, T)> = None;
            for b in 0..n {
                if b == a {
                    continue;
                }
                let dab = dist(a, b);
                if labels[b] == labels[a] {
                    if pos.is_none_or(|(_, best)| dab > best) {
                        pos = Some((b, dab));
                    }
                } else if neg.is_none_or(|(_, best)| dab < best) {
                    neg = Some((b, dab));
                }
            }
            let ((p, dap), (ng, dan)) = (
                pos.expect("anchor without a positive"),
                neg.expect("anchor without a negative"),
            );
            let hinge = dap - dan + margin;
            if hinge > T::zero() {
                total += hinge;
                active.push((a, p, ng, dap, dan));
            }
        }
        let nt = T::from_usize_lossy(n);
        self.push_op(Tensor::scalar(total / nt), &[x], move |g, inputs, _| {
            let xv = inputs[0];
            let scale = g.item() / nt;
            let mut dx = Tensor::zeros(&[n, d]);
            for &(a, p, ng, dap, dan) in &active {
                for k in 0..d {
                    let (xa, xp, xn) = (xv.row(a)[k], xv.row(p)[k], xv.row(ng)[k]);
                    let ga = if dap > T::zero() { (xa - xp) / dap } else { T::zero() };
                    let gn = if dan > T::zero() { (xa - xn) / dan } else { T::zero() };
                    let dd = dx.data_mut();
                    dd[a * d + k] += scale * (ga - gn);
                    dd[p * d + k] -= scale * ga;
                    dd[ng * d + k] += scale * gn;
                }
            }
            vec![Some(dx)]
        })
    }

    /// Mean over rows of `‖a_i - b_i‖²` for `[N, D]` operands.
    pub fn squared_distance_mean(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape, self.shape(b), "squared distance operands differ");
        let n = shape[0];
        let nt = T::from_usize_lossy(n);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let total: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push_op(Tensor::scalar(total / nt), &[a, b], move |g, inputs, _| {
            let s = T::lit(2.0) * g.item() / nt;
            let (av, bv) = (inputs[0].data(), inputs[1].data());
            let da = Tensor::from_fn(&shape, |k| s * (av[k] - bv[k]));
            let db = da.map(|v| -v);
            vec![Some(da), Some(db)]
        })
    }

    /// Multi-positive contrastive negative log-likelihood.
    ///
    /// `logits: [N, K, K]` holds `logits[n, i, j]`, the similarity of part
    /// `i` to channel group `j`. `positive[i * K + j]` marks the positive set
    /// of part `i`. Per image the loss is
    /// `Σ_i -(logsumexp_{j∈P(i)} l_ij - logsumexp_j l_ij)`; the result is the
    /// mean over images.
    pub fn multi_positive_nll(&mut self, logits: Var, positive: &[bool]) -> Var {
        let shape = self.shape(logits).to_vec();
        assert_eq!(shape.len(), 3);
        let (n, k) = (shape[0], shape[1]);
        assert_eq!(shape[2], k);
        assert_eq!(positive.len(), k * k);
        let lv = self.value(logits).data();
        let nt = T::from_usize_lossy(n);
        assert!(
            positive.chunks(k).all(|m| m.iter().any(|&p| p)),
            "every part needs a non-empty positive set"
        );
        let mut total = T::zero();
        for img in 0..n {
            for i in 0..k {
                let row = &lv[(img * k + i) * k..(img * k + i + 1) * k];
                let mask = &positive[i * k..(i + 1) * k];
                let pos = log_sum_exp(row.iter().zip(mask).filter(|(_, &m)| m).map(|(&x, _)| x));
                let all = log_sum_exp(row.iter().copied());
                total += all - pos;
            }
        }
        let positive = positive.to_vec();
        self.push_op(Tensor::scalar(total / nt), &[logits], move |g, inputs, _| {
            let scale = g.item() / nt;
            let mut d = inputs[0].clone();
            for (r, row) in d.data_mut().chunks_mut(k).enumerate() {
                let i = r % k;
                let mask = &positive[i * k..(i + 1) * k];
                let mut pos_soft: Vec<T> = row
                    .iter()
                    .zip(mask)
                    .map(|(&x, &m)| if m { x } else { T::neg_infinity() })
                    .collect();
                softmax_in_place(&mut pos_soft);
                softmax_in_place(row);
                for (v, &p) in row.iter_mut().zip(&pos_soft) {
                    *v = scale * (*v - p);
                }
            }
            vec![Some(d)]
        })
    }
}
