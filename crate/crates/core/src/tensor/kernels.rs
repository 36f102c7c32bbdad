//! Slice-level numeric kernels shared by forward and backward passes.
//!
//! Loop orders are fixed so every result is bit-reproducible.

use super::Real;

/// `c[m x n] += a[m x k] * b[k x n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[Real], b: &[Real], c: &mut [Real]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[n x k]^T`
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[Real], b: &[Real], c: &mut [Real]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m x n] += a[k x m]^T * b[k x n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[Real], b: &[Real], c: &mut [Real]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `lo..hi` whose input coordinate `o * stride + k - padding`
/// falls inside `0..extent`.
fn valid_range(out: usize, extent: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    let hi = if extent + padding > k { ((extent + padding - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one `C x H x W` sample into a `(C*kh*kw) x (H'*W')` matrix.
pub fn im2col(g: &ConvGeom, input: &[Real], cols: &mut [Real]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            let (y_lo, y_hi) = valid_range(g.out_h, g.height, ki, g.stride, g.padding);
            for kj in 0..g.kw {
                let (x_lo, x_hi) = valid_range(g.out_w, g.width, kj, g.stride, g.padding);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if oy < y_lo || oy >= y_hi || x_lo == x_hi {
                        d.fill(0.0);
                        continue;
                    }
                    let iy = oy * g.stride + ki - g.padding;
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    d[..x_lo].fill(0.0);
                    d[x_hi..].fill(0.0);
                    let x0 = x_lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        d[x_lo..x_hi].copy_from_slice(&src[x0..x0 + (x_hi - x_lo)]);
                    } else {
                        for (o, v) in d[x_lo..x_hi].iter_mut().zip(src[x0..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
pub fn col2im(g: &ConvGeom, cols: &[Real], input_grad: &mut [Real]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut input_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            let (y_lo, y_hi) = valid_range(g.out_h, g.height, ki, g.stride, g.padding);
            for kj in 0..g.kw {
                let (x_lo, x_hi) = valid_range(g.out_w, g.width, kj, g.stride, g.padding);
                if x_lo == x_hi {
                    continue;
                }
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ki - g.padding;
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let s = &src[oy * g.out_w + x_lo..oy * g.out_w + x_hi];
                    let x0 = x_lo * g.stride + kj - g.padding;
                    for (d, v) in dst[x0..].iter_mut().step_by(g.stride).zip(s) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_row(row: &[Real], out: &mut [Real]) {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Log-sum-exp stabilized log-softmax of one row.
pub fn log_softmax_row(row: &[Real], out: &mut [Real]) {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let sum: Real = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Splits a shape around `axis` into `(outer, extent, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
