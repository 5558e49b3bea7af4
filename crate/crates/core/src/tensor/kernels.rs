//! Slice-level numeric kernels shared by the tape operations.
//!
//! Everything here is single-threaded and has a fixed summation order, so
//! identical inputs always produce bit-identical outputs.

use super::Scalar;

const TILE: usize = 256;

const LOG2E: f32 = std::f32::consts::LOG2_E;
const LN2_HI: f32 = 0.693_359_4;
const LN2_LO: f32 = -2.121_944_4e-4;

/// `exp` on `f32` lanes by range reduction and a degree-6 polynomial
/// (relative error about 2e-7). Inputs below about −87.3 saturate to the
/// smallest normal number instead of flushing to zero.
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    let x = x.clamp(-87.3, 88.7);
    let n = (x * LOG2E + 0.5).floor();
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = ((((1.987_569_2e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
        + 1.666_666_5e-1)
        * r
        + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

/// Natural log of a positive normal `f32` by mantissa split and a degree-9
/// polynomial (relative error about 1e-7).
#[inline(always)]
pub fn ln_f32(x: f32) -> f32 {
    let bits = x.to_bits();
    let mut e = ((bits >> 23) & 0xff) as i32 - 126;
    let mut m = f32::from_bits((bits & 0x007f_ffff) | 0x3f00_0000);
    let small = m < std::f32::consts::FRAC_1_SQRT_2;
    e -= small as i32;
    m = if small { m + m - 1.0 } else { m - 1.0 };
    let e = e as f32;
    let z = m * m;
    let mut y = ((((((((7.037_683_6e-2 * m - 1.151_461e-1) * m + 1.167_699_9e-1) * m - 1.242_014_1e-1) * m
        + 1.424_932_3e-1)
        * m
        - 1.666_805_8e-1)
        * m
        + 2.000_071_4e-1)
        * m
        - 2.499_999_4e-1)
        * m
        + 3.333_333e-1)
        * m
        * z;
    y += LN2_LO * e;
    y -= 0.5 * z;
    m + y + LN2_HI * e
}


#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with eight independent accumulators.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

#[inline]
fn axpy4<T: Scalar>(a: [T; 4], x: [&[T]; 4], y: &mut [T]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for j in 0..n {
        y[j] += a[0] * x0[j] + a[1] * x1[j] + a[2] * x2[j] + a[3] * x3[j];
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    out.fill(T::zero());
    let k4 = k - k % 4;
    for j0 in (0..n).step_by(TILE) {
        let j1 = (j0 + TILE).min(n);
        let brow = |p: usize| &b[p * n + j0..p * n + j1];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut out[i * n + j0..i * n + j1];
            for p in (0..k4).step_by(4) {
                axpy4(
                    [arow[p], arow[p + 1], arow[p + 2], arow[p + 3]],
                    [brow(p), brow(p + 1), brow(p + 2), brow(p + 3)],
                    crow,
                );
            }
            for p in k4..k {
                axpy(arow[p], brow(p), crow);
            }
        }
    }
}

/// `out[k×n] += aᵀ · b` for `a[m×k]`, `b[m×n]`.
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let m4 = m - m % 4;
    for j0 in (0..n).step_by(TILE) {
        let j1 = (j0 + TILE).min(n);
        let brow = |i: usize| &b[i * n + j0..i * n + j1];
        for p in 0..k {
            let orow = &mut out[p * n + j0..p * n + j1];
            for i in (0..m4).step_by(4) {
                axpy4(
                    [a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]],
                    [brow(i), brow(i + 1), brow(i + 2), brow(i + 3)],
                    orow,
                );
            }
            for i in m4..m {
                axpy(a[i * k + p], brow(i), orow);
            }
        }
    }
}

/// Four dot products sharing the left operand.
#[inline]
fn dot4<T: Scalar>(a: &[T], b: [&[T]; 4]) -> [T; 4] {
    let n = a.len();
    let (b0, b1, b2, b3) = (&b[0][..n], &b[1][..n], &b[2][..n], &b[3][..n]);
    let mut acc = [[T::zero(); 8]; 4];
    let n8 = n - n % 8;
    for j in (0..n8).step_by(8) {
        for l in 0..8 {
            let av = a[j + l];
            acc[0][l] += av * b0[j + l];
            acc[1][l] += av * b1[j + l];
            acc[2][l] += av * b2[j + l];
            acc[3][l] += av * b3[j + l];
        }
    }
    let mut out = [T::zero(); 4];
    for (o, ac) in out.iter_mut().zip(&acc) {
        *o = ((ac[0] + ac[1]) + (ac[2] + ac[3])) + ((ac[4] + ac[5]) + (ac[6] + ac[7]));
    }
    for j in n8..n {
        out[0] += a[j] * b0[j];
        out[1] += a[j] * b1[j];
        out[2] += a[j] * b2[j];
        out[3] += a[j] * b3[j];
    }
    out
}

const KBLOCK: usize = 128;

/// `out[m×n] += a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub fn matmul_a_bt_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let n4 = n - n % 4;
    for k0 in (0..k).step_by(KBLOCK) {
        let k1 = (k0 + KBLOCK).min(k);
        let brow = |j: usize| &b[j * k + k0..j * k + k1];
        for i in 0..m {
            let arow = &a[i * k + k0..i * k + k1];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in (0..n4).step_by(4) {
                let d = dot4(arow, [brow(j), brow(j + 1), brow(j + 2), brow(j + 3)]);
                for (o, v) in orow[j..j + 4].iter_mut().zip(d) {
                    *o += v;
                }
            }
            for j in n4..n {
                orow[j] += dot(arow, brow(j));
            }
        }
    }
}

/// Geometry of a 3×3 convolution over an NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad: usize,
}

pub const KSIZE: usize = 3;

impl ConvGeom {
    /// Output extent of one spatial axis, `None` if it is not integral.
    pub fn out_extent(size: usize, stride: usize, pad: usize) -> Option<usize> {
        let span = (size + 2 * pad).checked_sub(KSIZE)?;
        (span % stride == 0).then_some(span / stride + 1)
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * KSIZE * KSIZE
    }

    pub fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfold `x[B,C,H,W]` into `col[C·9, B·H'·W']` with zero padding.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.positions();
    let plane = g.out_h * g.out_w;
    col.fill(T::zero());
    for c in 0..g.in_ch {
        for kh in 0..KSIZE {
            for kw in 0..KSIZE {
                let row = (c * KSIZE + kh) * KSIZE + kw;
                let dst = &mut col[row * p..(row + 1) * p];
                for b in 0..g.batch {
                    let src = &x[(b * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..][..g.w];
                        let drow = &mut dst[b * plane + oy * g.out_w..][..g.out_w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fold `col[C·9, B·H'·W']` back onto `dx[B,C,H,W]`, accumulating overlaps.
pub fn col2im_acc<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    let plane = g.out_h * g.out_w;
    for c in 0..g.in_ch {
        for kh in 0..KSIZE {
            for kw in 0..KSIZE {
                let row = (c * KSIZE + kh) * KSIZE + kw;
                let src = &col[row * p..(row + 1) * p];
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[b * plane + oy * g.out_w..][..g.out_w];
                        let drow = &mut dst[iy as usize * g.w..][..g.w];
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                drow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[C, B, S]` → `[B, C, S]`.
pub fn channel_major_to_batch_major<T: Scalar>(src: &[T], c: usize, b: usize, s: usize, dst: &mut [T]) {
    for ci in 0..c {
        for bi in 0..b {
            dst[(bi * c + ci) * s..][..s].copy_from_slice(&src[(ci * b + bi) * s..][..s]);
        }
    }
}

/// `[B, C, S]` → `[C, B, S]`.
pub fn batch_major_to_channel_major<T: Scalar>(src: &[T], b: usize, c: usize, s: usize, dst: &mut [T]) {
    for bi in 0..b {
        for ci in 0..c {
            dst[(ci * b + bi) * s..][..s].copy_from_slice(&src[(bi * c + ci) * s..][..s]);
        }
    }
}

/// Forward 3×3 cross-correlation. Returns the output and the unfolded input.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let p = g.positions();
    let mut col = vec![T::zero(); g.patch_len() * p];
    im2col(x, g, &mut col);
    let mut ycm = vec![T::zero(); g.out_ch * p];
    matmul(w, &col, g.out_ch, g.patch_len(), p, &mut ycm);
    let mut y = vec![T::zero(); g.out_ch * p];
    channel_major_to_batch_major(&ycm, g.out_ch, g.batch, g.out_h * g.out_w, &mut y);
    (y, col)
}

/// Backward 3×3 cross-correlation; either gradient may be skipped.
pub fn conv2d_backward<T: Scalar>(
    dy: &[T],
    w: &[T],
    col: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.positions();
    let mut dycm = vec![T::zero(); g.out_ch * p];
    batch_major_to_channel_major(dy, g.batch, g.out_ch, g.out_h * g.out_w, &mut dycm);
    let dw = want_dw.then(|| {
        let mut dw = vec![T::zero(); g.out_ch * g.patch_len()];
        matmul_a_bt_acc(&dycm, col, g.out_ch, p, g.patch_len(), &mut dw);
        dw
    });
    let dx = want_dx.then(|| {
        let mut dcol = vec![T::zero(); g.patch_len() * p];
        matmul_at_b_acc(w, &dycm, g.out_ch, g.patch_len(), p, &mut dcol);
        let mut dx = vec![T::zero(); g.batch * g.in_ch * g.h * g.w];
        col2im_acc(&dcol, g, &mut dx);
        dx
    });
    (dx, dw)
}
