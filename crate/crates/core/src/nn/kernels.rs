//! Low-level numeric kernels shared by the graph ops.

/// `c = alpha * a·b + beta * c` for row/column-strided matrices.
///
/// `a` is m×k, `b` is k×n, `c` is m×n. Strides are in elements.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa), "gemm: a too small");
    assert!(b.len() >= span(k, n, rsb, csb), "gemm: b too small");
    assert!(c.len() >= span(m, n, rsc, csc), "gemm: c too small");
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        ((self.h + 2 * self.pad - self.k) / self.stride + 1, (self.w + 2 * self.pad - self.k) / self.stride + 1)
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Unfolds one CHW image into a (C·k·k)×(Ho·Wo) column matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let ncol = ho * wo;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a CHW image.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let ncol = ho * wo;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Orthonormal single-level 2-D Haar analysis of a CHW block.
///
/// Output is `4·C` channels of size (H/2)×(W/2), band-major: LL, LH, HL, HH,
/// each holding the C input channels in order.
pub fn haar_forward(x: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (hh, hw) = (h / 2, w / 2);
    let band = c * hh * hw;
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..hh {
            for xx in 0..hw {
                let a = src[(2 * y) * w + 2 * xx];
                let b = src[(2 * y) * w + 2 * xx + 1];
                let cc = src[(2 * y + 1) * w + 2 * xx];
                let d = src[(2 * y + 1) * w + 2 * xx + 1];
                let o = ch * hh * hw + y * hw + xx;
                out[o] = 0.5 * (a + b + cc + d);
                out[band + o] = 0.5 * (a - b + cc - d);
                out[2 * band + o] = 0.5 * (a + b - cc - d);
                out[3 * band + o] = 0.5 * (a - b - cc + d);
            }
        }
    }
}

/// Inverse of [`haar_forward`]; `c` is the number of image channels.
pub fn haar_inverse(p: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (hh, hw) = (h / 2, w / 2);
    let band = c * hh * hw;
    for ch in 0..c {
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..hh {
            for xx in 0..hw {
                let o = ch * hh * hw + y * hw + xx;
                let (ll, lh, hl, hh_) = (p[o], p[band + o], p[2 * band + o], p[3 * band + o]);
                dst[(2 * y) * w + 2 * xx] = 0.5 * (ll + lh + hl + hh_);
                dst[(2 * y) * w + 2 * xx + 1] = 0.5 * (ll - lh + hl - hh_);
                dst[(2 * y + 1) * w + 2 * xx] = 0.5 * (ll + lh - hl - hh_);
                dst[(2 * y + 1) * w + 2 * xx + 1] = 0.5 * (ll - lh - hl + hh_);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, &a, 3, 1, &b, 4, 1, 0.0, &mut c, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { c_in: 2, h: 5, w: 4, k: 3, stride: 2, pad: 1 };
        let (ho, wo) = g.out_hw();
        let x: Vec<f64> = (0..40).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.col_rows() * ho * wo).map(|v| ((v * 3) % 7) as f64 - 3.0).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
