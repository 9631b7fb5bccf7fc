//! Element-wise, reshaping and small linear-algebra operations.

use super::tape::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "element-wise operands differ in shape");
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
        .expect("same shape")
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push_op(value, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push_op(value, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push_op(value, &[a, b], |g, inputs, _| {
            vec![
                Some(zip_map(g, inputs[1], |gv, y| gv * y)),
                Some(zip_map(g, inputs[0], |gv, x| gv * x)),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push_op(value, &[a], move |g, _, _| vec![Some(g.map(|v| v * s))])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push_op(value, &[a], |g, inputs, _| {
            vec![Some(zip_map(g, inputs[0], |gv, x| if x > T::zero() { gv } else { T::zero() }))]
        })
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push_op(value, &[a], |g, inputs, _| {
            vec![Some(zip_map(g, inputs[0], |gv, x| gv * sigmoid(x)))]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let original = self.shape(a).to_vec();
        let value = self.value(a).clone().reshaped(shape).expect("reshape preserves element count");
        self.push_op(value, &[a], move |g, _, _| vec![Some(g.clone().reshaped(&original).expect("same numel"))])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let value = Tensor::scalar(self.value(a).data().iter().copied().sum());
        self.push_op(value, &[a], move |g, _, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_usize_lossy(self.value(a).numel());
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let (_, len, inner) = axis_split(&shape, axis);
        let inv = T::one() / T::from_usize_lossy(len);
        let x = self.value(a).data();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::from_fn(&out_shape, |idx| {
            let (o, i) = (idx / inner, idx % inner);
            (0..len).map(|k| x[(o * len + k) * inner + i]).sum::<T>() * inv
        });
        self.push_op(value, &[a], move |g, _, _| {
            vec![Some(Tensor::from_fn(&shape, |idx| {
                let (o, i) = (idx / (len * inner), idx % inner);
                g.data()[o * inner + i] * inv
            }))]
        })
    }

    /// `Σ w_i x_i` over scalar values.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for &(v, w) in terms {
            assert_eq!(self.value(v).numel(), 1, "weighted_sum takes scalars");
            total += w * self.value(v).item();
        }
        let weights: Vec<T> = terms.iter().map(|&(_, w)| w).collect();
        let parents: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        self.push_op(Tensor::scalar(total), &parents, move |g, inputs, _| {
            weights
                .iter()
                .zip(inputs)
                .map(|(&w, x)| Some(Tensor::full(x.shape(), g.item() * w)))
                .collect()
        })
    }

    /// Row-wise dot product of two `[N, D]` matrices, giving `[N]`.
    pub fn rowwise_dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        assert_eq!(va.shape().len(), 2);
        let (n, d) = (va.dim(0), va.dim(1));
        let value = Tensor::from_fn(&[n], |i| va.row(i).iter().zip(vb.row(i)).map(|(&x, &y)| x * y).sum());
        self.push_op(value, &[a, b], move |g, inputs, _| {
            let (xa, xb) = (inputs[0], inputs[1]);
            let ga = Tensor::from_fn(&[n, d], |k| g.data()[k / d] * xb.data()[k]);
            let gb = Tensor::from_fn(&[n, d], |k| g.data()[k / d] * xa.data()[k]);
            vec![Some(ga), Some(gb)]
        })
    }

    /// Batched `A Bᵀ`: `[B, M, D] x [B, P, D] -> [B, M, P]`. Rank-2 operands
    /// are treated as a batch of one.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, d) = batch_dims(&sa);
        let (batch_b, p, d_b) = batch_dims(&sb);
        assert_eq!(batch, batch_b, "bmm_nt batch mismatch {sa:?} vs {sb:?}");
        assert_eq!(d, d_b, "bmm_nt inner dimension mismatch {sa:?} vs {sb:?}");
        let out_shape: Vec<usize> = if sa.len() == 2 { vec![m, p] } else { vec![batch, m, p] };
        let mut out = Tensor::zeros(&out_shape);
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for i in 0..batch {
                T::gemm(
                    m,
                    d,
                    p,
                    T::one(),
                    &va[i * m * d..(i + 1) * m * d],
                    (d as isize, 1),
                    &vb[i * p * d..(i + 1) * p * d],
                    (1, d as isize),
                    T::zero(),
                    &mut od[i * m * p..(i + 1) * m * p],
                    (p as isize, 1),
                );
            }
        }
        self.push_op(out, &[a, b], move |g, inputs, _| {
            let (va, vb, gd) = (inputs[0].data(), inputs[1].data(), g.data());
            let mut ga = Tensor::zeros(&sa);
            let mut gb = Tensor::zeros(&sb);
            for i in 0..batch {
                let gi = &gd[i * m * p..(i + 1) * m * p];
                // dA = G B
                T::gemm(
                    m,
                    p,
                    d,
                    T::one(),
                    gi,
                    (p as isize, 1),
                    &vb[i * p * d..(i + 1) * p * d],
                    (d as isize, 1),
                    T::zero(),
                    &mut ga.data_mut()[i * m * d..(i + 1) * m * d],
                    (d as isize, 1),
                );
                // dB = Gᵀ A
                T::gemm(
                    p,
                    m,
                    d,
                    T::one(),
                    gi,
                    (1, p as isize),
                    &va[i * m * d..(i + 1) * m * d],
                    (d as isize, 1),
                    T::zero(),
                    &mut gb.data_mut()[i * p * d..(i + 1) * p * d],
                    (d as isize, 1),
                );
            }
            vec![Some(ga), Some(gb)]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("softmax needs rank >= 1");
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push_op(value, &[a], move |g, _, y| {
            let mut out = Tensor::zeros(y.shape());
            for ((go, gi), yi) in out.data_mut().chunks_mut(d).zip(g.data().chunks(d)).zip(y.data().chunks(d)) {
                let dot: T = gi.iter().zip(yi).map(|(&a, &b)| a * b).sum();
                for k in 0..d {
                    go[k] = yi[k] * (gi[k] - dot);
                }
            }
            vec![Some(out)]
        })
    }

    /// Unit-normalizes along `axis`; `eps` bounds the norm away from zero.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: T) -> Var {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a);
        let mut norms = vec![T::zero(); outer * inner];
        let mut clamped = vec![false; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = T::zero();
                for k in 0..len {
                    let v = x.data()[(o * len + k) * inner + i];
                    s += v * v;
                }
                let raw = s.sqrt();
                clamped[o * inner + i] = raw < eps;
                norms[o * inner + i] = raw.max(eps);
            }
        }
        let value = Tensor::from_fn(&shape, |idx| {
            let (o, i) = (idx / (len * inner), idx % inner);
            x.data()[idx] / norms[o * inner + i]
        });
        self.push_op(value, &[a], move |g, _, y| {
            let mut out = Tensor::zeros(&shape);
            let (gd, yd) = (g.data(), y.data());
            let od = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let nrm = norms[o * inner + i];
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: T = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                    // Below eps the map is a plain scaling.
                    let scaled_only = clamped[o * inner + i];
                    for k in 0..len {
                        od[at(k)] = if scaled_only {
                            gd[at(k)] / nrm
                        } else {
                            (gd[at(k)] - yd[at(k)] * dot) / nrm
                        };
                    }
                }
            }
            vec![Some(out)]
        })
    }
}

fn batch_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [m, d] => (1, *m, *d),
        [b, m, d] => (*b, *m, *d),
        _ => panic!("bmm_nt expects rank 2 or 3, got {shape:?}"),
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // log1p(exp(x)) = max(x, 0) + log1p(exp(-|x|))
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable in-place softmax (max-subtracted).
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(x_i)`, max-subtracted.
pub(crate) fn log_sum_exp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let max = xs.clone().fold(T::neg_infinity(), |m, x| m.max(x));
    if max == T::neg_infinity() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<T>().ln()
}
