//! Raw slice kernels behind the graph ops. Shapes are validated by the caller.

/// `c[m×n] (+)= a[m×k] · b[k×n]`, all row-major. `a_t`/`b_t` read the
/// operand transposed from its stored row-major layout.
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
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe exactly the m×k, k×n and m×n row-major
    // buffers whose lengths are asserted above.
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1 unpadded convolutions read the input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo);
        (lo, hi.max(lo))
    }

    /// Output rows `oy` whose input row `oy + ky - pad` is in range.
    fn valid_rows(&self, ky: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(ky);
        let hi = (self.h + self.pad).saturating_sub(ky).min(self.ho);
        lo..hi.max(lo)
    }
}

pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ncols];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.valid_cols(kx);
                let src_lo = lo + kx - g.pad;
                for oy in g.valid_rows(ky) {
                    let src = &plane[(oy + ky - g.pad) * g.w..][src_lo..src_lo + hi - lo];
                    dst[oy * g.wo + lo..oy * g.wo + hi].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, grad_input: &mut [f64]) {
    let ncols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut grad_input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.valid_cols(kx);
                let dst_lo = lo + kx - g.pad;
                for oy in g.valid_rows(ky) {
                    let dst = &mut plane[(oy + ky - g.pad) * g.w..][dst_lo..dst_lo + hi - lo];
                    dst.iter_mut().zip(&src[oy * g.wo + lo..oy * g.wo + hi]).for_each(|(d, s)| *d += s);
                }
            }
        }
    }
}

/// Max pooling over non-overlapping k×k windows. Returns the pooled values
/// and, per output cell, the flat input index of the first maximum in scan order.
pub(crate) fn max_pool(input: &[f64], c: usize, h: usize, w: usize, k: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / k, w / k);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + oy * k * w + ox * k;
                let mut best = input[best_idx];
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * w + ox * k + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}
