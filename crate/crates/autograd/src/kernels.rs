//! Raw numeric kernels: GEMM and the three convolution products.
//!
//! Convolutions lay the patches of a whole batch side by side (im2col) and
//! issue a single GEMM, which keeps the packing overhead of small layers low.

use crate::Tensor;

/// `c = beta * c + a * b` for row/column-strided `a` (m×k) and `b` (k×n);
/// `c` is dense row-major m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense matrix product of `[m, k]` and `[k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.ndim() == 2 && b.ndim() == 2, "matmul needs matrices");
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dimensions differ: {:?} x {:?}", a.shape(), b.shape());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, 0.0);
    Tensor::new(&[m, n], out)
}

/// Static geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> ConvGeom {
        assert_eq!(x_shape.len(), 4, "conv input must be NCHW, got {:?}", x_shape);
        assert_eq!(w_shape.len(), 4, "conv weight must be OIHW, got {:?}", w_shape);
        assert_eq!(
            x_shape[1], w_shape[1],
            "conv channel mismatch: input {:?}, weight {:?}",
            x_shape, w_shape
        );
        assert!(stride >= 1);
        let (h, w) = (x_shape[2], x_shape[3]);
        let (kh, kw) = (w_shape[2], w_shape[3]);
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "kernel {}x{} larger than padded input {}x{}",
            kh,
            kw,
            h + 2 * pad,
            w + 2 * pad
        );
        ConvGeom {
            batch: x_shape[0],
            in_ch: x_shape[1],
            in_h: h,
            in_w: w,
            out_ch: w_shape[0],
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        }
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_ch * self.out_h * self.out_w
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_ch, self.in_h, self.in_w]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kh, self.kw]
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kx`: the
    /// columns whose input index `ox·stride + kx − pad` lies inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        let hi = if self.in_w + self.pad <= kx { 0 } else { (self.in_w + self.pad - kx - 1) / s + 1 };
        (lo.min(self.out_w), hi.min(self.out_w).max(lo.min(self.out_w)))
    }

    /// Writes the patch matrix of one image into `col`, whose rows have
    /// stride `ld`; columns `0..out_h·out_w` of each row are filled.
    fn im2col(&self, x: &[f64], col: &mut [f64], ld: usize) {
        let cols = self.col_cols();
        for c in 0..self.in_ch {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * ld..row * ld + cols];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        if lo < hi {
                            let base = (c * self.in_h + iy as usize) * self.in_w;
                            let first = base + lo * self.stride + kx - self.pad;
                            if self.stride == 1 {
                                line[lo..hi].copy_from_slice(&x[first..first + hi - lo]);
                            } else {
                                for (j, v) in line[lo..hi].iter_mut().enumerate() {
                                    *v = x[first + j * self.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a patch matrix (row stride `ld`) back onto one image.
    fn col2im(&self, col: &[f64], ld: usize, x: &mut [f64]) {
        for c in 0..self.in_ch {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * ld..];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let base = (c * self.in_h + iy as usize) * self.in_w;
                        let first = base + lo * self.stride + kx - self.pad;
                        let line = &src[oy * self.out_w + lo..oy * self.out_w + hi];
                        if self.stride == 1 {
                            for (d, v) in x[first..first + hi - lo].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (j, v) in line.iter().enumerate() {
                                x[first + j * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Batch items per fused GEMM, bounding the patch matrix to ~8M values.
    fn chunk(&self) -> usize {
        const CAP: usize = 8 << 20;
        (CAP / (self.col_rows() * self.col_cols()).max(1)).clamp(1, self.batch.max(1))
    }
}

/// Copies NCHW-ordered `[nb, ch, cols]` into `[ch, nb·cols]`.
fn to_channel_major(src: &[f64], nb: usize, ch: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; nb * ch * cols];
    for n in 0..nb {
        for c in 0..ch {
            let s = &src[(n * ch + c) * cols..(n * ch + c + 1) * cols];
            out[c * nb * cols + n * cols..c * nb * cols + (n + 1) * cols].copy_from_slice(s);
        }
    }
    out
}

/// Inverse of [`to_channel_major`], writing into `dst`.
fn from_channel_major(src: &[f64], nb: usize, ch: usize, cols: usize, dst: &mut [f64]) {
    for n in 0..nb {
        for c in 0..ch {
            dst[(n * ch + c) * cols..(n * ch + c + 1) * cols]
                .copy_from_slice(&src[c * nb * cols + n * cols..c * nb * cols + (n + 1) * cols]);
        }
    }
}

/// Patch matrix `[rows, nb·cols]` for batch items `n0..n0+nb`.
fn patches(g: &ConvGeom, x: &[f64], n0: usize, nb: usize) -> Vec<f64> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let ld = nb * cols;
    let mut col = vec![0.0; rows * ld];
    for j in 0..nb {
        let n = n0 + j;
        g.im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], &mut col[j * cols..], ld);
    }
    col
}

/// Cross-correlation `y = x ⋆ w` (no bias).
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = vec![0.0; g.batch * g.out_len()];
    let step = g.chunk();
    for n0 in (0..g.batch).step_by(step) {
        let nb = step.min(g.batch - n0);
        let col = patches(&g, x.data(), n0, nb);
        let mut y = vec![0.0; g.out_ch * nb * cols];
        gemm(g.out_ch, rows, nb * cols, w.data(), (rows, 1), &col, (nb * cols, 1), &mut y, 0.0);
        from_channel_major(&y, nb, g.out_ch, cols, &mut out[n0 * g.out_len()..]);
    }
    Tensor::new(&g.output_shape(), out)
}

/// Adjoint of [`conv2d`] with respect to its input: maps an output-shaped
/// tensor back to an input of spatial size `in_hw`. This is the transposed
/// convolution.
pub fn conv2d_transpose(
    gy: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Tensor {
    let ws = w.shape();
    let ys = gy.shape();
    assert_eq!(ys.len(), 4, "transposed conv input must be NCHW");
    assert_eq!(ys[1], ws[0], "transposed conv channel mismatch");
    let g = ConvGeom::new(&[ys[0], ws[1], in_hw.0, in_hw.1], ws, stride, pad);
    assert_eq!(
        (g.out_h, g.out_w),
        (ys[2], ys[3]),
        "transposed conv spatial size {:?} inconsistent with target {:?}",
        ys,
        in_hw
    );
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = vec![0.0; g.batch * g.in_len()];
    let step = g.chunk();
    for n0 in (0..g.batch).step_by(step) {
        let nb = step.min(g.batch - n0);
        let ld = nb * cols;
        let gm = to_channel_major(&gy.data()[n0 * g.out_len()..(n0 + nb) * g.out_len()], nb, g.out_ch, cols);
        // col[rows, nb·cols] = wᵀ[rows, out_ch] · gy[out_ch, nb·cols]
        let mut col = vec![0.0; rows * ld];
        gemm(rows, g.out_ch, ld, w.data(), (1, rows), &gm, (ld, 1), &mut col, 0.0);
        for j in 0..nb {
            let n = n0 + j;
            g.col2im(&col[j * cols..], ld, &mut out[n * g.in_len()..(n + 1) * g.in_len()]);
        }
    }
    Tensor::new(&g.input_shape(), out)
}

/// Adjoint of [`conv2d`] with respect to its weight, for a kernel of size `k_hw`.
pub fn conv2d_weight_grad(
    x: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    k_hw: (usize, usize),
) -> Tensor {
    let xs = x.shape();
    let ys = gy.shape();
    assert_eq!(ys.len(), 4, "weight grad upstream must be NCHW");
    assert_eq!(xs[0], ys[0], "weight grad batch mismatch");
    let g = ConvGeom::new(xs, &[ys[1], xs[1], k_hw.0, k_hw.1], stride, pad);
    assert_eq!((g.out_h, g.out_w), (ys[2], ys[3]), "weight grad spatial mismatch");
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut dw = vec![0.0; g.out_ch * rows];
    let step = g.chunk();
    for n0 in (0..g.batch).step_by(step) {
        let nb = step.min(g.batch - n0);
        let ld = nb * cols;
        let col = patches(&g, x.data(), n0, nb);
        let gm = to_channel_major(&gy.data()[n0 * g.out_len()..(n0 + nb) * g.out_len()], nb, g.out_ch, cols);
        // dw[out_ch, rows] += gy[out_ch, nb·cols] · colᵀ[nb·cols, rows]
        let beta = if n0 == 0 { 0.0 } else { 1.0 };
        gemm(g.out_ch, ld, rows, &gm, (ld, 1), &col, (1, ld), &mut dw, beta);
    }
    Tensor::new(&g.weight_shape(), dw)
}
