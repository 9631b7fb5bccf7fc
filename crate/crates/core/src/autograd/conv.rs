//! 2-D convolution (NCHW) via im2col and GEMM.

use rayon::prelude::*;

use super::tape::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (ho, wo, k) = (g.out_height(), g.out_width(), g.kernel);
    let n_cols = ho * wo;
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                            x[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (ho, wo, k) = (g.out_height(), g.out_width(), g.kernel);
    let n_cols = ho * wo;
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        dx[(c * g.height + iy as usize) * g.width + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Square-kernel convolution with bias. `x: [N, C_in, H, W]`,
    /// `weight: [C_out, C_in, k, k]`, `bias: [C_out]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [out, in, k, k], got {ws:?}");
        assert_eq!(ws[1], xs[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d needs a square kernel");
        assert_eq!(self.shape(bias), &[ws[0]]);
        let geom = ConvGeometry {
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            padding,
        };
        let (n, c_out) = (xs[0], ws[0]);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let in_len = geom.in_channels * geom.height * geom.width;
        let out_len = c_out * ncols;

        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut cols = vec![T::zero(); n * rows * ncols];
        let mut out = Tensor::zeros(&[n, c_out, geom.out_height(), geom.out_width()]);
        cols.par_chunks_mut(rows * ncols)
            .zip(out.data_mut().par_chunks_mut(out_len))
            .zip(xv.par_chunks(in_len))
            .for_each(|((col, o), xi)| {
                im2col(xi, &geom, col);
                for (co, orow) in o.chunks_mut(ncols).enumerate() {
                    orow.fill(bv[co]);
                }
                T::gemm(c_out, rows, ncols, T::one(), wv, (rows as isize, 1), col, (ncols as isize, 1), T::one(), o, (ncols as isize, 1));
            });

        self.push_op(out, &[x, weight, bias], move |g, inputs, _| {
            let wv = inputs[1].data();
            let gd = g.data();
            let mut dx = Tensor::zeros(&xs);
            dx.data_mut()
                .par_chunks_mut(in_len)
                .zip(gd.par_chunks(out_len))
                .for_each(|(dxi, gi)| {
                    let mut dcol = vec![T::zero(); rows * ncols];
                    T::gemm(rows, c_out, ncols, T::one(), wv, (1, rows as isize), gi, (ncols as isize, 1), T::zero(), &mut dcol, (ncols as isize, 1));
                    col2im(&dcol, &geom, dxi);
                });
            let partial_dw: Vec<Vec<T>> = cols
                .par_chunks(rows * ncols)
                .zip(gd.par_chunks(out_len))
                .map(|(col, gi)| {
                    let mut dw = vec![T::zero(); c_out * rows];
                    T::gemm(c_out, ncols, rows, T::one(), gi, (ncols as isize, 1), col, (1, ncols as isize), T::zero(), &mut dw, (rows as isize, 1));
                    dw
                })
                .collect();
            // Fixed-order reduction keeps training bit-reproducible.
            let mut dw = Tensor::zeros(&ws);
            for p in &partial_dw {
                for (a, &b) in dw.data_mut().iter_mut().zip(p) {
                    *a += b;
                }
            }
            let mut db = Tensor::zeros(&[c_out]);
            for gi in gd.chunks(out_len) {
                for (co, grow) in gi.chunks(ncols).enumerate() {
                    db.data_mut()[co] += grow.iter().copied().sum::<T>();
                }
            }
            vec![Some(dx), Some(dw), Some(db)]
        })
    }
}

/// Multiply-accumulate count of one convolution on one image.
pub fn conv_multiply_adds(geom: &ConvGeometry, out_channels: usize) -> u64 {
    (out_channels * geom.col_rows() * geom.col_cols()) as u64
}
