//! Slice-level numeric kernels shared by the forward and backward passes.

/// `c = a · b (+ c if accumulate)` for row-major matrices, with optional transposes.
///
/// `a` is `m×k` after transposition, `b` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are checked on entry.
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

/// Geometry of a stride-1 2-D convolution over an NCHW batch.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kw
    }

    /// Rows of the column matrix: one per (channel, ky, kx).
    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    /// Columns of the column matrix: one per (sample, oy, ox).
    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let ncols = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ncols];
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_ch + c) * g.height * g.width..][..g.height * g.width];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < g.pad || iy - g.pad >= g.height {
                            continue;
                        }
                        let iy = iy - g.pad;
                        for ox in 0..ow {
                            let ix = ox + kx;
                            if ix < g.pad || ix - g.pad >= g.width {
                                continue;
                            }
                            dst[oy * ow + ox] = src[iy * g.width + ix - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let ncols = g.col_cols();
    let mut x = vec![0.0; g.batch * g.in_ch * g.height * g.width];
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut x[(n * g.in_ch + c) * g.height * g.width..][..g.height * g.width];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < g.pad || iy - g.pad >= g.height {
                            continue;
                        }
                        let iy = iy - g.pad;
                        for ox in 0..ow {
                            let ix = ox + kx;
                            if ix < g.pad || ix - g.pad >= g.width {
                                continue;
                            }
                            dst[iy * g.width + ix - g.pad] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(O, N·P)` channel-major matrix to an `(N, O, P)` batch layout.
pub fn channel_major_to_batch(src: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for o in 0..channels {
        for n in 0..batch {
            out[(n * channels + o) * plane..][..plane]
                .copy_from_slice(&src[(o * batch + n) * plane..][..plane]);
        }
    }
    out
}

pub fn batch_to_channel_major(src: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for n in 0..batch {
        for o in 0..channels {
            out[(o * batch + n) * plane..][..plane]
                .copy_from_slice(&src[(n * channels + o) * plane..][..plane]);
        }
    }
    out
}

/// Source taps for one output coordinate of a ×2 bilinear resize
/// (half-pixel centres, edge clamped).
pub fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_loops_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        // a: 2×3, b: 3×4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, false, &b, false, &mut c, false);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-14);
            }
        }
        // aᵀ: treat `a` as 3×2 stored, use it as 2×3 via transpose
        let mut ct = vec![0.0; 4];
        gemm(2, 3, 2, &a, true, &a, false, &mut ct, false);
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|p| a[p * 2 + i] * a[p * 2 + j]).sum();
                assert!((ct[i * 2 + j] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            batch: 2,
            in_ch: 2,
            height: 4,
            width: 3,
            kh: 3,
            kw: 3,
            pad: 1,
        };
        let x: Vec<f64> = (0..48).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|v| ((v * 3) % 5) as f64 - 2.0)
            .collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn layout_permutations_invert() {
        let src: Vec<f64> = (0..24).map(f64::from).collect();
        let cm = batch_to_channel_major(&src, 2, 3, 4);
        assert_eq!(channel_major_to_batch(&cm, 2, 3, 4), src);
    }
}
