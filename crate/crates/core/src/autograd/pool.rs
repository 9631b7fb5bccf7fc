//! Spatial pooling and per-part linear maps over `[N, C, H, W]` feature maps.

use super::tape::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn nchw<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected an NCHW tensor, got {s:?}");
    (s[0], s[1], s[2] * s[3])
}

impl<T: Scalar> Tape<T> {
    /// Global average pooling: `[N, C, H, W] -> [N, C]`.
    pub fn spatial_mean(&mut self, f: Var) -> Var {
        let shape = self.shape(f).to_vec();
        let (n, c, s) = nchw(self.value(f));
        let inv = T::one() / T::from_usize_lossy(s);
        let fv = self.value(f).data();
        let value = Tensor::from_fn(&[n, c], |i| fv[i * s..(i + 1) * s].iter().copied().sum::<T>() * inv);
        self.push_op(value, &[f], move |g, _, _| {
            vec![Some(Tensor::from_fn(&shape, |k| g.data()[k / s] * inv))]
        })
    }

    /// Weighted spatial pooling with `R` weight maps:
    /// `out[n, r, c] = scale * Σ_s w[n, r, s] f[n, c, s]`, giving `[N, R, C]`.
    pub fn weighted_spatial_pool(&mut self, f: Var, w: Var, scale: T) -> Var {
        let fshape = self.shape(f).to_vec();
        let wshape = self.shape(w).to_vec();
        let (n, c, s) = nchw(self.value(f));
        let (nw, r, sw) = nchw(self.value(w));
        assert_eq!((n, s), (nw, sw), "weight maps {wshape:?} do not match features {fshape:?}");
        assert_eq!(fshape[2..], wshape[2..], "spatial size mismatch");
        let mut out = Tensor::zeros(&[n, r, c]);
        {
            let (fv, wv) = (self.value(f).data(), self.value(w).data());
            for i in 0..n {
                T::gemm(
                    r,
                    s,
                    c,
                    scale,
                    &wv[i * r * s..(i + 1) * r * s],
                    (s as isize, 1),
                    &fv[i * c * s..(i + 1) * c * s],
                    (1, s as isize),
                    T::zero(),
                    &mut out.data_mut()[i * r * c..(i + 1) * r * c],
                    (c as isize, 1),
                );
            }
        }
        self.push_op(out, &[f, w], move |g, inputs, _| {
            let (fv, wv, gd) = (inputs[0].data(), inputs[1].data(), g.data());
            let mut df = Tensor::zeros(&fshape);
            let mut dw = Tensor::zeros(&wshape);
            for i in 0..n {
                let gi = &gd[i * r * c..(i + 1) * r * c];
                // df[c, s] = scale * Σ_r g[r, c] w[r, s]
                T::gemm(
                    c,
                    r,
                    s,
                    scale,
                    gi,
                    (1, c as isize),
                    &wv[i * r * s..(i + 1) * r * s],
                    (s as isize, 1),
                    T::zero(),
                    &mut df.data_mut()[i * c * s..(i + 1) * c * s],
                    (s as isize, 1),
                );
                // dw[r, s] = scale * Σ_c g[r, c] f[c, s]
                T::gemm(
                    r,
                    c,
                    s,
                    scale,
                    gi,
                    (c as isize, 1),
                    &fv[i * c * s..(i + 1) * c * s],
                    (s as isize, 1),
                    T::zero(),
                    &mut dw.data_mut()[i * r * s..(i + 1) * r * s],
                    (s as isize, 1),
                );
            }
            vec![Some(df), Some(dw)]
        })
    }

    /// Per-pixel dot product with one vector per image:
    /// `out[n, s] = Σ_c f[n, c, s] v[n, c]`, giving `[N, H*W]`.
    pub fn pixel_dot(&mut self, f: Var, v: Var) -> Var {
        let fshape = self.shape(f).to_vec();
        let (n, c, s) = nchw(self.value(f));
        assert_eq!(self.shape(v), &[n, c], "query vector shape");
        let (fv, vv) = (self.value(f).data(), self.value(v).data());
        let value = Tensor::from_fn(&[n, s], |k| {
            let (i, p) = (k / s, k % s);
            (0..c).map(|ch| fv[(i * c + ch) * s + p] * vv[i * c + ch]).sum()
        });
        self.push_op(value, &[f, v], move |g, inputs, _| {
            let (fv, vv, gd) = (inputs[0].data(), inputs[1].data(), g.data());
            let df = Tensor::from_fn(&fshape, |k| {
                let (i, ch, p) = (k / (c * s), (k / s) % c, k % s);
                gd[i * s + p] * vv[i * c + ch]
            });
            let dv = Tensor::from_fn(&[n, c], |k| {
                let i = k / c;
                (0..s).map(|p| gd[i * s + p] * fv[k * s + p]).sum()
            });
            vec![Some(df), Some(dv)]
        })
    }

    /// Independent linear map per part: `x: [N, K, C]`, `w: [K, D, C]` ->
    /// `[N, K, D]` with `out[n, k] = w[k] x[n, k]`.
    pub fn part_linear(&mut self, x: Var, w: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(ws.len(), 3);
        let (n, k, c) = (xs[0], xs[1], xs[2]);
        let d = ws[1];
        assert_eq!((ws[0], ws[2]), (k, c), "part weight {ws:?} incompatible with input {xs:?}");
        let mut out = Tensor::zeros(&[n, k, d]);
        {
            let (xv, wv) = (self.value(x).data(), self.value(w).data());
            for part in 0..k {
                T::gemm(
                    n,
                    c,
                    d,
                    T::one(),
                    &xv[part * c..],
                    ((k * c) as isize, 1),
                    &wv[part * d * c..(part + 1) * d * c],
                    (1, c as isize),
                    T::zero(),
                    &mut out.data_mut()[part * d..],
                    ((k * d) as isize, 1),
                );
            }
        }
        self.push_op(out, &[x, w], move |g, inputs, _| {
            let (xv, wv, gd) = (inputs[0].data(), inputs[1].data(), g.data());
            let mut dx = Tensor::zeros(&xs);
            let mut dw = Tensor::zeros(&ws);
            for part in 0..k {
                // dx[:, part] = g[:, part] w[part]
                T::gemm(
                    n,
                    d,
                    c,
                    T::one(),
                    &gd[part * d..],
                    ((k * d) as isize, 1),
                    &wv[part * d * c..(part + 1) * d * c],
                    (c as isize, 1),
                    T::zero(),
                    &mut dx.data_mut()[part * c..],
                    ((k * c) as isize, 1),
                );
                // dw[part] = g[:, part]ᵀ x[:, part]
                T::gemm(
                    d,
                    n,
                    c,
                    T::one(),
                    &gd[part * d..],
                    (1, (k * d) as isize),
                    &xv[part * c..],
                    ((k * c) as isize, 1),
                    T::zero(),
                    &mut dw.data_mut()[part * d * c..(part + 1) * d * c],
                    (c as isize, 1),
                );
            }
            vec![Some(dx), Some(dw)]
        })
    }
}
