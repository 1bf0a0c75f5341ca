//! im2col based convolution kernels on HWC images with HWIO kernels.
//!
//! Padding follows the "same" rule: output extent is `ceil(extent / stride)`,
//! the total padding is split with the extra row/column at the bottom/right.

/// Geometry of a strided, same-padded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(h: usize, w: usize, cin: usize, kh: usize, kw: usize, stride: usize) -> Self {
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let pad_h = ((oh.max(1) - 1) * stride + kh).saturating_sub(h);
        let pad_w = ((ow.max(1) - 1) * stride + kw).saturating_sub(w);
        Self {
            h,
            w,
            cin,
            kh,
            kw,
            stride,
            oh,
            ow,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    /// Rows of the patch matrix (one per output pixel).
    pub fn patches(&self) -> usize {
        self.oh * self.ow
    }

    /// Columns of the patch matrix (`kh * kw * cin`).
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad_top as isize;
        let x = (ox * self.stride + kx) as isize - self.pad_left as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Patch rows for output rows `rows.start..rows.end`.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom, rows: std::ops::Range<usize>) -> Vec<f64> {
    let r = g.patch_len();
    let mut cols = vec![0.0; rows.len() * g.ow * r];
    for (i, oy) in rows.enumerate() {
        for ox in 0..g.ow {
            let row = &mut cols[(i * g.ow + ox) * r..][..r];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                        let dst = (ky * g.kw + kx) * g.cin;
                        let src = (y * g.w + x) * g.cin;
                        row[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch rows for output rows
/// `rows.start..rows.end` back into an image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, rows: std::ops::Range<usize>, out: &mut [f64]) {
    let r = g.patch_len();
    for (i, oy) in rows.enumerate() {
        for ox in 0..g.ow {
            let row = &cols[(i * g.ow + ox) * r..][..r];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                        let src = (ky * g.kw + kx) * g.cin;
                        let dst = (y * g.w + x) * g.cin;
                        for (o, v) in out[dst..dst + g.cin].iter_mut().zip(&row[src..src + g.cin]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

/// Splits the output rows into tiles whose patch matrices stay below a
/// fixed element budget.
pub(crate) fn row_tiles(g: &ConvGeom) -> impl Iterator<Item = std::ops::Range<usize>> {
    const BUDGET: usize = 1 << 22;
    let per_row = (g.ow * g.patch_len()).max(1);
    let step = (BUDGET / per_row).clamp(1, g.oh.max(1));
    let oh = g.oh;
    (0..oh).step_by(step).map(move |r0| r0..(r0 + step).min(oh))
}

/// `c (+)= op(a) * op(b)` for row-major operands, where `op` optionally
/// transposes. `a` is `m x k` after `op`, `b` is `k x n` after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices are large enough for the given extents and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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
