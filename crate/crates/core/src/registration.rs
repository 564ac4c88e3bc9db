//! Near-identity affine pre-alignment of the main image onto the reference.
//!
//! A shallow CNN over the channel-stacked pair predicts `theta = [A | t]`
//! (2x3, normalized align-corners coordinates). Each target pixel `x_tgt`
//! samples the main image at `A x_tgt + t`. Only the main image is warped.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{Bound, ConvBlock, Linear, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::rng::StreamRng;
use crate::tensor::{Graph, Tensor, Var};

/// The 2x3 affine block `[A | t]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        a: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    /// Row-major `[a11, a12, tx, a21, a22, ty]`.
    pub fn to_row_major(&self) -> [f64; 6] {
        [
            self.a[0][0],
            self.a[0][1],
            self.t[0],
            self.a[1][0],
            self.a[1][1],
            self.t[1],
        ]
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 6 {
            return Err(Error::invalid("affine", "expected 6 values"));
        }
        Ok(Self {
            a: [[v[0], v[1]], [v[3], v[4]]],
            t: [v[2], v[5]],
        })
    }

    /// Rotation by `deg` degrees, isotropic `scale`, translation in pixels
    /// for an `h x w` image.
    pub fn from_similarity(deg: f64, scale: f64, tx_px: f64, ty_px: f64, h: usize, w: usize) -> Self {
        let r = deg.to_radians();
        let (s, c) = (libm::sin(r), libm::cos(r));
        Self {
            a: [[scale * c, -scale * s], [scale * s, scale * c]],
            t: [px_to_norm(tx_px, w), px_to_norm(ty_px, h)],
        }
    }

    pub fn det(&self) -> f64 {
        self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0]
    }

    /// Inverse map, `None` when `A` is singular.
    pub fn inverse(&self) -> Option<Self> {
        let d = self.det();
        if d.abs() < 1e-15 {
            return None;
        }
        let inv = [
            [self.a[1][1] / d, -self.a[0][1] / d],
            [-self.a[1][0] / d, self.a[0][0] / d],
        ];
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        Some(Self { a: inv, t })
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a[0][0] * p[0] + self.a[0][1] * p[1] + self.t[0],
            self.a[1][0] * p[0] + self.a[1][1] * p[1] + self.t[1],
        ]
    }

    /// Translation in pixel units (x, y) for an `h x w` image.
    pub fn translation_px(&self, h: usize, w: usize) -> [f64; 2] {
        [norm_to_px(self.t[0], w), norm_to_px(self.t[1], h)]
    }

    pub fn to_tensor(list: &[AffineParams]) -> Tensor {
        let data = list.iter().flat_map(|p| p.to_row_major()).collect();
        Tensor::from_parts(vec![list.len(), 2, 3], data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Vec<AffineParams>> {
        if t.numel() % 6 != 0 {
            return Err(Error::invalid("affine", "expected B x 2 x 3"));
        }
        t.data().chunks(6).map(Self::from_row_major).collect()
    }

    /// Comma-separated 2x3 matrix, one row per line.
    pub fn to_csv(&self) -> alloc::string::String {
        let v = self.to_row_major();
        alloc::format!("{:?},{:?},{:?}\n{:?},{:?},{:?}\n", v[0], v[1], v[2], v[3], v[4], v[5])
    }
}

/// A pixel offset expressed in normalized align-corners units.
pub fn px_to_norm(px: f64, size: usize) -> f64 {
    px * 2.0 / (size as f64 - 1.0)
}

pub fn norm_to_px(v: f64, size: usize) -> f64 {
    v * (size as f64 - 1.0) / 2.0
}

/// Weights of the three regularizer terms.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegLossWeights {
    pub w_small: f64,
    pub w_det: f64,
    pub w_trans: f64,
}

impl Default for RegLossWeights {
    fn default() -> Self {
        Self {
            w_small: 1e-4,
            w_det: 1e-5,
            w_trans: 1e-6,
        }
    }
}

impl RegLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_small, self.w_det, self.w_trans]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        {
            Ok(())
        } else {
            Err(Error::invalid("reg_loss", "weights must be finite and non-negative"))
        }
    }
}

/// `w_small ||theta - I||_F^2 + w_det (det A - 1)^2 + w_trans ||t||^2`,
/// averaged over the batch. `I` is the 2x3 identity affine, so `t` enters
/// both the first and the last term.
pub fn reg_loss(g: &mut Graph, theta: Var, w: &RegLossWeights) -> Result<Var> {
    let shape = g.shape(theta).to_vec();
    let batch = g.value(theta).numel() / 6;
    if shape.last() != Some(&3) || batch * 6 != g.value(theta).numel() {
        return Err(Error::shape("reg_loss", &shape, &[batch, 2, 3]));
    }
    let rows = g.reshape(theta, &[batch, 6])?;
    let ident = g.constant(AffineParams::to_tensor(&vec![AffineParams::IDENTITY; batch]).reshape(&[batch, 6])?);
    let diff = g.sub(rows, ident)?;
    let sq = g.mul(diff, diff)?;
    let small = g.sum(sq)?;

    let col = |g: &mut Graph, c: usize| g.slice(rows, 1, c, 1);
    let (a11, a12, tx, a21, a22, ty) = (
        col(g, 0)?,
        col(g, 1)?,
        col(g, 2)?,
        col(g, 3)?,
        col(g, 4)?,
        col(g, 5)?,
    );
    let p = g.mul(a11, a22)?;
    let q = g.mul(a12, a21)?;
    let det = g.sub(p, q)?;
    let one = g.constant(Tensor::scalar(1.0));
    let dd = g.sub(det, one)?;
    let dd2 = g.mul(dd, dd)?;
    let det_term = g.sum(dd2)?;
    let tx2 = g.mul(tx, tx)?;
    let ty2 = g.mul(ty, ty)?;
    let t2 = g.add(tx2, ty2)?;
    let trans = g.sum(t2)?;

    let a = g.scale(small, w.w_small)?;
    let b = g.scale(det_term, w.w_det)?;
    let c = g.scale(trans, w.w_trans)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    g.scale(total, 1.0 / batch as f64)
}

/// `h*w x 3` matrix of homogeneous normalized target coordinates
/// `(x_j, y_i, 1)` in row-major pixel order.
pub fn base_lattice(h: usize, w: usize) -> Tensor {
    let coord = |i: usize, n: usize| -1.0 + 2.0 * i as f64 / (n as f64 - 1.0);
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            data.extend_from_slice(&[coord(j, w), coord(i, h), 1.0]);
        }
    }
    Tensor::from_parts(vec![h * w, 3], data)
}

/// Sampling grid `[B, H, W, 2]` with source = `A x_tgt + t` per target pixel.
pub fn affine_grid(g: &mut Graph, theta: Var, h: usize, w: usize) -> Result<Var> {
    if h < 2 || w < 2 {
        return Err(Error::invalid("affine_grid", "H and W must be >= 2"));
    }
    let batch = g.value(theta).numel() / 6;
    if batch == 0 || batch * 6 != g.value(theta).numel() {
        return Err(Error::shape("affine_grid", g.shape(theta), &[batch, 2, 3]));
    }
    let base = g.constant(base_lattice(h, w));
    let rows = g.reshape(theta, &[2 * batch, 3])?;
    let mut parts = Vec::with_capacity(batch);
    for b in 0..batch {
        let th = g.slice(rows, 0, 2 * b, 2)?;
        let tht = g.t(th)?;
        parts.push(g.matmul(base, tht)?);
    }
    let grid = if batch == 1 { parts[0] } else { g.concat(&parts, 0)? };
    g.reshape(grid, &[batch, h, w, 2])
}

/// Value-level [`affine_grid`].
pub fn affine_grid_values(theta: &[AffineParams], h: usize, w: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let th = g.constant(AffineParams::to_tensor(theta));
    let grid = affine_grid(&mut g, th, h, w)?;
    Ok(g.value(grid).clone())
}

/// Warps the main image with `theta`; the reference image is never touched.
pub fn warp_main(g: &mut Graph, main: Var, theta: Var) -> Result<Var> {
    let s = g.shape(main).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("warp_main", &s, &[1, 1, 0, 0]));
    }
    let grid = affine_grid(g, theta, s[2], s[3])?;
    g.grid_sample(main, grid)
}

/// Value-level warp of an `[B, C, H, W]` image.
pub fn warp_values(img: &Tensor, theta: &[AffineParams]) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 4 || s[0] != theta.len() {
        return Err(Error::shape("warp", s, &[theta.len(), 1, 0, 0]));
    }
    let grid = affine_grid_values(theta, s[2], s[3])?;
    crate::tensor::grid_sample_values(img, &grid)
}

/// Shallow CNN predicting `theta` from the stacked (main, reference) pair.
#[derive(Clone, Debug)]
pub struct AffinePredictor {
    pub convs: Vec<ConvBlock>,
    pub head: Linear,
}

impl AffinePredictor {
    /// `channels` lists the output width of each stride-2 block. The head
    /// starts at zero weights and identity bias, so a fresh predictor emits
    /// exactly the identity transform.
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, channels: &[usize], rng: &mut StreamRng) -> Self {
        let mut convs = Vec::with_capacity(channels.len());
        let mut c_in = 2 * in_channels;
        for (i, &c) in channels.iter().enumerate() {
            convs.push(ConvBlock::new(store, &alloc::format!("{name}.conv{i}"), c_in, c, 3, 2, rng));
            c_in = c;
        }
        let head = Linear::with_bias(
            store,
            &alloc::format!("{name}.head"),
            c_in,
            &AffineParams::IDENTITY.to_row_major(),
        );
        Self { convs, head }
    }

    /// `main, ref: [B, C, H, W] -> theta: [B, 2, 3]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, main: Var, reference: Var) -> Result<Var> {
        if g.shape(main) != g.shape(reference) {
            return Err(Error::shape("predict_affine", g.shape(main), g.shape(reference)));
        }
        let mut x = g.concat(&[main, reference], 1)?;
        for c in &self.convs {
            x = c.forward(g, p, x)?;
        }
        let pooled = global_avg_pool(g, x)?;
        let out = self.head.forward(g, p, pooled)?;
        let batch = g.shape(out)[0];
        g.reshape(out, &[batch, 2, 3])
    }
}

/// `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let hw = s[2] * s[3];
    let flat = g.reshape(x, &[s[0] * s[1], hw])?;
    let avg = g.constant(Tensor::full(&[hw, 1], 1.0 / hw as f64));
    let m = g.matmul(flat, avg)?;
    g.reshape(m, &[s[0], s[1]])
}

/// Outcome of [`fit_affine_mse`].
#[derive(Clone, Copy, Debug)]
pub struct AffineFit {
    pub theta: AffineParams,
    pub mse: f64,
    pub steps: usize,
}

/// Directly optimizes `theta` so that the warped main image matches the
/// reference under pixel MSE plus the registration regularizer. The MSE
/// covers the interior only: a band of `size / 8` pixels along each edge is
/// left out, since zero padding from either warp would otherwise pull the
/// fit towards a zoom.
pub fn fit_affine_mse(
    main: &Tensor,
    reference: &Tensor,
    weights: &RegLossWeights,
    steps: usize,
    lr: f64,
) -> Result<AffineFit> {
    if main.shape() != reference.shape() || main.shape().len() != 4 || main.shape()[0] != 1 {
        return Err(Error::shape("fit_affine", main.shape(), reference.shape()));
    }
    let s = main.shape();
    let (h, w) = (s[2], s[3]);
    let (bh, bw) = (h / 8, w / 8);
    let inside = Tensor::from_fn(s, |k| {
        let (y, x) = ((k / w) % h, k % w);
        if y >= bh && y < h - bh && x >= bw && x < w - bw {
            1.0
        } else {
            0.0
        }
    });
    let count = inside.data().iter().sum::<f64>();
    let mut theta = AffineParams::to_tensor(&[AffineParams::IDENTITY]);
    let mut opt = Adam::new(AdamConfig {
        lr,
        ..AdamConfig::default()
    });
    let mut mse = f64::NAN;
    for _ in 0..steps {
        let mut g = Graph::new();
        let th = g.param(theta.clone());
        let m = g.constant(main.clone());
        let r = g.constant(reference.clone());
        let keep = g.constant(inside.clone());
        let warped = warp_main(&mut g, m, th)?;
        let diff = g.sub(warped, r)?;
        let diff = g.mul(diff, keep)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum(sq)?;
        let l_img = g.scale(total, 1.0 / count)?;
        let l_reg = reg_loss(&mut g, th, weights)?;
        let loss = g.add(l_img, l_reg)?;
        mse = g.value(l_img).item();
        g.backward(loss)?;
        let grad = g.grad_tensor(th).unwrap_or_else(|| Tensor::zeros(theta.shape()));
        opt.step(core::slice::from_mut(&mut theta), &[grad]);
    }
    Ok(AffineFit {
        theta: AffineParams::from_tensor(&theta)?[0],
        mse,
        steps,
    })
}
