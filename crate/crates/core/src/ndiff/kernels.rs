//! Dense kernels shared by the tape operations.

use super::Real;

/// Storage order of a row-major matrix operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Use the matrix as stored.
    Plain,
    /// Use the transpose of the stored matrix.
    Trans,
}

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a` and `b` are row-major in their stored orientation; `c` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    if m <= SMALL_M || k == 1 {
        return gemm_small(m, k, n, a, la, b, lb, c, accumulate);
    }
    let (rsa, csa) = match la {
        Layout::Plain => (k as isize, 1),
        Layout::Trans => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Plain => (n as isize, 1),
        Layout::Trans => (1, k as isize),
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths were checked above and the strides address exactly
    // those row-major buffers; `c` is uniquely borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Below this many output rows packing costs more than it saves.
const SMALL_M: usize = 2;

#[allow(clippy::too_many_arguments)]
fn gemm_small<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    c: &mut [T],
    accumulate: bool,
) {
    if !accumulate {
        c.fill(T::zero());
    }
    let a_at = |i: usize, p: usize| match la {
        Layout::Plain => a[i * k + p],
        Layout::Trans => a[p * m + i],
    };
    for (i, row) in c.chunks_exact_mut(n).enumerate() {
        match lb {
            Layout::Plain => {
                for (p, b_row) in b.chunks_exact(n).enumerate() {
                    let s = a_at(i, p);
                    for (o, &w) in row.iter_mut().zip(b_row) {
                        *o += s * w;
                    }
                }
            }
            Layout::Trans => {
                for (o, b_col) in row.iter_mut().zip(b.chunks_exact(k)) {
                    let mut acc = T::zero();
                    for (p, &w) in b_col.iter().enumerate() {
                        acc += a_at(i, p) * w;
                    }
                    *o += acc;
                }
            }
        }
    }
}

/// Geometry of a 3×3, padding-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        self.height.div_ceil(self.stride)
    }

    pub fn out_width(&self) -> usize {
        self.width.div_ceil(self.stride)
    }

    pub fn patch_len(&self) -> usize {
        self.channels * 9
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds `x` (`C×H×W`) into a `(C·9)×(H'·W')` patch matrix.
pub fn im2col<T: Real>(x: &[T], g: ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let p = ho * wo;
    let mut cols = vec![T::zero(); g.patch_len() * p];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..][..g.width];
                    let dst = &mut row[oy * wo..][..wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im<T: Real>(cols: &[T], g: ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let p = ho * wo;
    let mut x = vec![T::zero(); g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..][..g.width];
                    let src = &row[oy * wo..][..wo];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Bin boundaries of an adaptive average pool: `[floor(i·n/s), ceil((i+1)·n/s))`.
pub fn adaptive_bins(n: usize, s: usize) -> Vec<(usize, usize)> {
    (0..s)
        .map(|i| ((i * n) / s, ((i + 1) * n).div_ceil(s)))
        .collect()
}
