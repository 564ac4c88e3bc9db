//! Raw slice kernels shared by the tape and by value-level helpers.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row/column strides of a logical matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `rows x cols` matrix.
    pub fn rm(cols: usize) -> Self {
        Layout {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn tr(cols: usize) -> Self {
        Layout {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = a * b + beta * c` for an `m x k` by `k x n` product; `c` is row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strided kernel touches:
    // operands are dense m*k, k*n and m*n buffers addressed through
    // row-major or transposed-row-major strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::invalid("conv2d", "kernel larger than padded input"));
        }
        Ok(ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one `c x h x w` image into a `(c*kh*kw) x (ho*wo)` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let ncol = g.cols();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut out[row * ncol..(row + 1) * ncol];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: scatters-adds columns back into an image gradient.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncol = g.cols();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Sampling positions this close to a pixel center are snapped onto it, so
/// that the identity lattice reproduces its input bit for bit.
const SNAP_PX: f64 = 1e-9;

/// Maps a normalized coordinate in `[-1, 1]` to pixel units (align-corners).
#[inline]
pub(crate) fn unnormalize(coord: f64, size: usize) -> f64 {
    let p = (coord + 1.0) * 0.5 * (size as f64 - 1.0);
    let r = libm::round(p);
    if libm::fabs(p - r) <= SNAP_PX {
        r
    } else {
        p
    }
}

/// Bilinear corner indices and weights for one sampling position.
struct Taps {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

impl Taps {
    fn new(gx: f64, gy: f64, h: usize, w: usize) -> Self {
        let px = unnormalize(gx, w);
        let py = unnormalize(gy, h);
        let x0 = libm::floor(px);
        let y0 = libm::floor(py);
        Taps {
            x0: x0 as isize,
            y0: y0 as isize,
            fx: px - x0,
            fy: py - y0,
        }
    }
}

#[inline]
fn pixel(img: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        img[y as usize * w + x as usize]
    }
}

/// Bilinear sampling of `x: [B,C,H,W]` at `grid: [B,Ho,Wo,2]` (x then y,
/// normalized, align-corners, zeros outside).
pub(crate) fn grid_sample_forward(x: &[f64], xs: &[usize], grid: &[f64], gs: &[usize]) -> Vec<f64> {
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (ho, wo) = (gs[1], gs[2]);
    let mut out = vec![0.0; b * c * ho * wo];
    for bi in 0..b {
        for p in 0..ho * wo {
            let g = &grid[(bi * ho * wo + p) * 2..][..2];
            let t = Taps::new(g[0], g[1], h, w);
            for ci in 0..c {
                let img = &x[(bi * c + ci) * h * w..][..h * w];
                let v00 = pixel(img, h, w, t.y0, t.x0);
                let v01 = pixel(img, h, w, t.y0, t.x0 + 1);
                let v10 = pixel(img, h, w, t.y0 + 1, t.x0);
                let v11 = pixel(img, h, w, t.y0 + 1, t.x0 + 1);
                let top = v00 * (1.0 - t.fx) + v01 * t.fx;
                let bot = v10 * (1.0 - t.fx) + v11 * t.fx;
                out[(bi * c + ci) * ho * wo + p] = top * (1.0 - t.fy) + bot * t.fy;
            }
        }
    }
    out
}

/// Gradients of [`grid_sample_forward`] wrt the image and the grid.
pub(crate) fn grid_sample_backward(
    x: &[f64],
    xs: &[usize],
    grid: &[f64],
    gs: &[usize],
    dout: &[f64],
    want_dx: bool,
    want_dgrid: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (ho, wo) = (gs[1], gs[2]);
    let mut dx = if want_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dgrid = if want_dgrid {
        vec![0.0; grid.len()]
    } else {
        Vec::new()
    };
    let sx = 0.5 * (w as f64 - 1.0);
    let sy = 0.5 * (h as f64 - 1.0);
    for bi in 0..b {
        for p in 0..ho * wo {
            let g = &grid[(bi * ho * wo + p) * 2..][..2];
            let t = Taps::new(g[0], g[1], h, w);
            let (mut dpx, mut dpy) = (0.0, 0.0);
            for ci in 0..c {
                let go = dout[(bi * c + ci) * ho * wo + p];
                if go == 0.0 {
                    continue;
                }
                let base = (bi * c + ci) * h * w;
                if want_dx {
                    let taps = [
                        (t.y0, t.x0, (1.0 - t.fy) * (1.0 - t.fx)),
                        (t.y0, t.x0 + 1, (1.0 - t.fy) * t.fx),
                        (t.y0 + 1, t.x0, t.fy * (1.0 - t.fx)),
                        (t.y0 + 1, t.x0 + 1, t.fy * t.fx),
                    ];
                    for (yy, xx, wt) in taps {
                        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                            dx[base + yy as usize * w + xx as usize] += go * wt;
                        }
                    }
                }
                if want_dgrid {
                    let img = &x[base..base + h * w];
                    let v00 = pixel(img, h, w, t.y0, t.x0);
                    let v01 = pixel(img, h, w, t.y0, t.x0 + 1);
                    let v10 = pixel(img, h, w, t.y0 + 1, t.x0);
                    let v11 = pixel(img, h, w, t.y0 + 1, t.x0 + 1);
                    dpx += go * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                    dpy += go * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                }
            }
            if want_dgrid {
                let d = &mut dgrid[(bi * ho * wo + p) * 2..][..2];
                d[0] += dpx * sx;
                d[1] += dpy * sy;
            }
        }
    }
    (dx, dgrid)
}

/// Value-level bilinear sampling, for callers outside a [`crate::Graph`]
/// (data synthesis, CLI warps).
pub fn grid_sample_values(x: &Tensor, grid: &Tensor) -> Result<Tensor> {
    check_grid("grid_sample", x.shape(), grid.shape())?;
    let out = grid_sample_forward(x.data(), x.shape(), grid.data(), grid.shape());
    let s = x.shape();
    Ok(Tensor::from_parts(vec![s[0], s[1], s[2], s[3]], out))
}

pub(crate) fn check_grid(op: &'static str, xs: &[usize], gs: &[usize]) -> Result<()> {
    if xs.len() != 4 || gs.len() != 4 || gs[3] != 2 || gs[0] != xs[0] {
        return Err(Error::shape(op, xs, gs));
    }
    if gs[1] != xs[2] || gs[2] != xs[3] {
        return Err(Error::shape(op, xs, gs));
    }
    Ok(())
}

/// Bilinear resize of an `h x w` map to `out_h x out_w` with half-pixel
/// centres; source coordinates are clamped at the border.
pub fn upsample_bilinear(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let scale = |o: usize, n_out: usize, n_in: usize| -> f64 {
        let p = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        p.clamp(0.0, (n_in - 1) as f64)
    };
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let py = scale(oy, out_h, h);
        let y0 = (libm::floor(py) as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = py - y0 as f64;
        for ox in 0..out_w {
            let px = scale(ox, out_w, w);
            let x0 = (libm::floor(px) as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = px - x0 as f64;
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bot = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Swaps axes `a0` and `a1` of a row-major buffer.
pub(crate) fn swap_axes(data: &[f64], shape: &[usize], a0: usize, a1: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a0, a1);
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(a0, a1);
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, Layout::tr(2), &b, Layout::rm(2), 0.0, &mut c);
        // a^T b = [[1,3],[2,4]] [[5,6],[7,8]]
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, Layout::rm(2), &b, Layout::tr(2), 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn upsample_preserves_corners_and_constants() {
        let m = [1.0, 2.0, 3.0, 4.0];
        let up = upsample_bilinear(&m, 2, 2, 5, 5);
        assert_eq!(up[0], 1.0);
        assert_eq!(up[4], 2.0);
        assert_eq!(up[20], 3.0);
        assert_eq!(up[24], 4.0);
        assert!((up[12] - 2.5).abs() < 1e-12);
        let flat = upsample_bilinear(&[0.7; 16], 4, 4, 64, 64);
        assert!(flat.iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn swap_axes_matches_manual_transpose() {
        let data: Vec<f64> = (0..6).map(f64::from).collect();
        let (t, s) = swap_axes(&data, &[2, 3], 0, 1);
        assert_eq!(s, vec![3, 2]);
        assert_eq!(t, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let (t, s) = swap_axes(&data, &[2, 3, 4], 1, 2);
        assert_eq!(s, vec![2, 4, 3]);
        // out[b][k][j] = in[b][j][k]
        assert_eq!(t[(4 + 1) * 3 + 2], data[12 + 2 * 4 + 1]);
    }
}
