//! Plain-loop numeric kernels. Every reduction runs in a fixed order so
//! results are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Column tile width of the blocked matmuls; four output-row tiles stay in L1.
const TILE: usize = 256;

/// `out[m×n] += a[m×k] · b[k×n]`.
///
/// Every output element accumulates its `k` products in ascending order,
/// whatever the blocking.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + TILE).min(n);
        let mut i = 0;
        while i + 4 <= m {
            let (r0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, r3) = rest.split_at_mut(n);
            let (r0, r1, r2, r3) = (&mut r0[j0..j1], &mut r1[j0..j1], &mut r2[j0..j1], &mut r3[j0..j1]);
            for p in 0..k {
                let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
                let b_row = &b[p * n + j0..p * n + j1];
                let rows = r0.iter_mut().zip(r1.iter_mut()).zip(r2.iter_mut()).zip(r3.iter_mut());
                for ((((o0, o1), o2), o3), &bv) in rows.zip(b_row) {
                    *o0 += a0 * bv;
                    *o1 += a1 * bv;
                    *o2 += a2 * bv;
                    *o3 += a3 * bv;
                }
            }
            i += 4;
        }
        for i in i..m {
            let row = &mut out[i * n + j0..i * n + j1];
            for p in 0..k {
                let aik = a[i * k + p];
                for (o, &bv) in row.iter_mut().zip(&b[p * n + j0..p * n + j1]) {
                    *o += aik * bv;
                }
            }
        }
        j0 = j1;
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_a_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for j in 0..n {
        let b_row = &b[j * k..(j + 1) * k];
        for i in 0..m {
            out[i * n + j] += dot(&a[i * k..(i + 1) * k], b_row);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn matmul_at_b_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut at = vec![0.0; k * m];
    for i in 0..m {
        for p in 0..k {
            at[p * m + i] = a[i * k + p];
        }
    }
    matmul_into(&at, b, out, k, m, n);
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Output extent of a convolution along one axis (floor semantics).
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel % 2 == 0 || padded < kernel {
        return Err(Error::ConvOutputSize {
            size,
            kernel,
            stride,
            padding,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(in_shape: &[usize], kernel_shape: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if in_shape.len() != 3 || kernel_shape.len() != 4 || kernel_shape[1] != in_shape[0] || kernel_shape[2] != kernel_shape[3] {
            return Err(Error::ShapeMismatch {
                lhs: in_shape.to_vec(),
                rhs: kernel_shape.to_vec(),
            });
        }
        let k = kernel_shape[2];
        let ho = conv_output_size(in_shape[1], k, stride, padding)?;
        let wo = conv_output_size(in_shape[2], k, stride, padding)?;
        Ok(ConvGeom {
            cin: in_shape[0],
            h: in_shape[1],
            w: in_shape[2],
            cout: kernel_shape[0],
            k,
            stride,
            padding,
            ho,
            wo,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output columns `ox` whose source column `ox·stride + kx − padding`
    /// lies inside the input.
    #[inline]
    fn valid_ox(&self, kx: usize) -> core::ops::Range<usize> {
        let lo = self.padding.saturating_sub(kx).div_ceil(self.stride);
        let hi = (self.w + self.padding).saturating_sub(kx).div_ceil(self.stride).min(self.wo);
        lo..hi.max(lo)
    }

    /// Calls `f(col_offset, input_offset, len)` for every run of valid patch
    /// entries; consecutive entries are `stride` apart in the input.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let p = self.cols();
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let xs = self.valid_ox(kx);
                    if xs.is_empty() {
                        continue;
                    }
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let ix0 = xs.start * self.stride + kx - self.padding;
                        f(
                            r * p + oy * self.wo + xs.start,
                            (ci * self.h + iy as usize) * self.w + ix0,
                            xs.len(),
                        );
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let mut col = vec![0.0; self.rows() * self.cols()];
        let s = self.stride;
        self.for_each_run(|c, i, len| {
            let dst = &mut col[c..c + len];
            if s == 1 {
                dst.copy_from_slice(&input[i..i + len]);
            } else {
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = input[i + t * s];
                }
            }
        });
        col
    }

    fn col2im_add(&self, col: &[f64], d_input: &mut [f64]) {
        let s = self.stride;
        self.for_each_run(|c, i, len| {
            for (t, &v) in col[c..c + len].iter().enumerate() {
                d_input[i + t * s] += v;
            }
        });
    }
}

/// Cross-correlation of a `Cin×H×W` input with a `Cout×Cin×k×k` kernel.
/// Returns the output data and its `(H', W')`.
pub fn conv2d_forward(
    input: &[f64],
    in_shape: &[usize],
    kernel: &[f64],
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(Vec<f64>, usize, usize)> {
    let g = ConvGeom::new(in_shape, kernel_shape, stride, padding)?;
    Ok((conv_forward_geom(&g, input, kernel), g.ho, g.wo))
}

pub(crate) fn conv_forward_geom(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.cout * g.cols()];
    if g.is_pointwise() {
        matmul_into(kernel, input, &mut out, g.cout, g.rows(), g.cols());
    } else {
        let col = g.im2col(input);
        matmul_into(kernel, &col, &mut out, g.cout, g.rows(), g.cols());
    }
    out
}

/// Returns `(d_input, d_kernel)`; either is skipped when not requested.
pub(crate) fn conv_backward_geom(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (r, p) = (g.rows(), g.cols());
    let col_owned;
    let col: &[f64] = if !want_kernel {
        &[]
    } else if g.is_pointwise() {
        input
    } else {
        col_owned = g.im2col(input);
        &col_owned
    };
    let d_kernel = want_kernel.then(|| {
        let mut dk = vec![0.0; g.cout * r];
        matmul_a_bt_into(grad_out, col, &mut dk, g.cout, p, r);
        dk
    });
    let d_input = want_input.then(|| {
        let mut dcol = vec![0.0; r * p];
        matmul_at_b_into(kernel, grad_out, &mut dcol, g.cout, r, p);
        if g.is_pointwise() {
            dcol
        } else {
            let mut di = vec![0.0; g.cin * g.h * g.w];
            g.col2im_add(&dcol, &mut di);
            di
        }
    });
    (d_input, d_kernel)
}
