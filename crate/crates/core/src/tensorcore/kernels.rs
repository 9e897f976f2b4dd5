//! Raw numeric kernels behind the graph ops. Everything here works on flat
//! row-major slices; shape validation happens in the graph layer.

/// `c[m,n] = alpha * a[m,k] @ b[k,n] + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a`, `b` and `c`, which the
    // callers size as [m,k], [k,n] and [m,n].
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
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            self.height + 2 * self.pad + 1 - self.kernel,
            self.width + 2 * self.pad + 1 - self.kernel,
        )
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfolds one sample `[C,H,W]` into `[C*k*k, OH*OW]`.
pub(crate) fn im2col(x: &[f64], g: ConvGeom, col: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds `[C*k*k, OH*OW]` back, accumulating into `dx`.
pub(crate) fn col2im(col: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of a batch `[N,C,H,W]` with `[K,C,k,k]` plus bias.
pub(crate) fn conv2d_forward(
    x: &[f64],
    n: usize,
    g: ConvGeom,
    w: &[f64],
    bias: &[f64],
    out_channels: usize,
) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let in_len = g.channels * g.height * g.width;
    let mut out = vec![0.0; n * out_channels * plane];
    let mut col = vec![0.0; g.col_rows() * plane];
    for s in 0..n {
        let dst = &mut out[s * out_channels * plane..(s + 1) * out_channels * plane];
        for (kch, b) in bias.iter().enumerate() {
            dst[kch * plane..(kch + 1) * plane].fill(*b);
        }
        let xs = &x[s * in_len..(s + 1) * in_len];
        let rows = g.col_rows() as isize;
        if g.kernel == 1 && g.pad == 0 {
            gemm(
                out_channels,
                g.col_rows(),
                plane,
                1.0,
                w,
                (rows, 1),
                xs,
                (plane as isize, 1),
                1.0,
                dst,
            );
        } else {
            im2col(xs, g, &mut col);
            gemm(
                out_channels,
                g.col_rows(),
                plane,
                1.0,
                w,
                (rows, 1),
                &col,
                (plane as isize, 1),
                1.0,
                dst,
            );
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    g: ConvGeom,
    w: &[f64],
    out_channels: usize,
    dout: &[f64],
    need_dx: bool,
) -> ConvGrads {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let rows = g.col_rows();
    let in_len = g.channels * g.height * g.width;
    let mut dw = vec![0.0; out_channels * rows];
    let mut db = vec![0.0; out_channels];
    let mut dx = need_dx.then(|| vec![0.0; n * in_len]);
    let direct = g.kernel == 1 && g.pad == 0;
    let mut col = vec![0.0; if direct { 0 } else { rows * plane }];
    let mut dcol = vec![0.0; if direct || !need_dx { 0 } else { rows * plane }];
    for s in 0..n {
        let ds = &dout[s * out_channels * plane..(s + 1) * out_channels * plane];
        for (kch, acc) in db.iter_mut().enumerate() {
            *acc += ds[kch * plane..(kch + 1) * plane].iter().sum::<f64>();
        }
        let xs = &x[s * in_len..(s + 1) * in_len];
        let colref: &[f64] = if direct {
            xs
        } else {
            im2col(xs, g, &mut col);
            &col
        };
        // dW[K, R] += dout[K, P] @ col[R, P]^T
        gemm(
            out_channels,
            plane,
            rows,
            1.0,
            ds,
            (plane as isize, 1),
            colref,
            (1, plane as isize),
            1.0,
            &mut dw,
        );
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if direct {
                // dx[R, P] = W[K, R]^T @ dout[K, P]
                gemm(
                    rows,
                    out_channels,
                    plane,
                    1.0,
                    w,
                    (1, rows as isize),
                    ds,
                    (plane as isize, 1),
                    0.0,
                    dxs,
                );
            } else {
                gemm(
                    rows,
                    out_channels,
                    plane,
                    1.0,
                    w,
                    (1, rows as isize),
                    ds,
                    (plane as isize, 1),
                    0.0,
                    &mut dcol,
                );
                col2im(&dcol, g, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, (3, 1), &b, (2, 1), 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 3,
            width: 4,
            kernel: 3,
            pad: 1,
        };
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let (oh, ow) = g.out_hw();
        let y: Vec<f64> = (0..g.col_rows() * oh * ow)
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, g, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
