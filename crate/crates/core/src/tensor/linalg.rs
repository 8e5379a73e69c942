//! GEMM and the im2col/col2im lowering used by both convolutions.

/// `c (m x n) = a (m x k) * b (k x n)` (or `+=` when `accumulate`), with
/// arbitrary row/column strides on the inputs and a dense row-major output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output buffer too small");
    assert!(a.len() > (m - 1) * a_strides.0 + k.saturating_sub(1) * a_strides.1 || k == 0);
    assert!(b.len() > k.saturating_sub(1) * b_strides.0 + (n - 1) * b_strides.1 || k == 0);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a sliding-window lowering over one `(c, h, w)` image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + kj - pad` is inside `0..w`.
fn valid_span(g: &Window, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride).min(g.ow);
    // Largest ox with ox * stride + kj < w + pad.
    let hi = if g.w + g.pad > kj { ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.ow) } else { 0 };
    (lo, hi.max(lo))
}

/// Lower an image to a `(c*kh*kw, oh*ow)` patch matrix; padding reads as zero.
pub(crate) fn im2col(src: &[f64], g: &Window, cols: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_span(g, kj);
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[(c * g.h + y as usize) * g.w..(c * g.h + y as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let x0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src_row[x0..x0 + (hi - lo)]);
                    } else {
                        for (k, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src_row[x0 + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back into an image.
pub(crate) fn col2im(cols: &[f64], g: &Window, dst: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_span(g, kj);
                if lo == hi {
                    continue;
                }
                let x0 = lo * g.stride + kj - g.pad;
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + y as usize) * g.w;
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, v) in dst[base + x0..base + x0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (k, v) in line.iter().enumerate() {
                            dst[base + x0 + k * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}
