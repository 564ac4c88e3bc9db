//! Keyword-conditioned Grad-CAM and the shared saliency mask.
//!
//! For a target score `y`, channel weights are the spatial means of
//! `dy/dA_k` over the last conv feature map `A`; the raw map is
//! `relu(sum_k alpha_k A_k)`, upsampled to image size and divided by its
//! maximum. The two per-image maps are fused by elementwise maximum and
//! min-max normalized; the fused map multiplies both images.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{upsample_bilinear, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapSource {
    Main,
    Ref,
    Shared,
}

/// An `h x w` map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    h: usize,
    w: usize,
    values: Vec<f64>,
    source: MapSource,
}

impl SaliencyMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>, source: MapSource) -> Result<Self> {
        if values.len() != h * w || h == 0 || w == 0 {
            return Err(Error::invalid("saliency", "values do not match h x w"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("saliency", "values must lie in [0, 1]"));
        }
        Ok(Self { h, w, values, source })
    }

    pub fn ones(h: usize, w: usize, source: MapSource) -> Self {
        Self {
            h,
            w,
            values: vec![1.0; h * w],
            source,
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source(&self) -> MapSource {
        self.source
    }

    /// Flat index of the largest value (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn threshold(&self, t: f64) -> Vec<bool> {
        self.values.iter().map(|&v| v >= t).collect()
    }

    pub fn is_all_ones(&self) -> bool {
        self.values.iter().all(|&v| v == 1.0)
    }
}

/// Divides by the range after subtracting the minimum; constant input maps
/// to all ones.
pub fn minmax(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![1.0; values.len()];
    }
    let range = hi - lo;
    values.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// The explanation target: a keyword located inside a teacher-forced answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CamTarget {
    keyword_ids: Vec<u32>,
    answer_ids: Vec<u32>,
    positions: Vec<usize>,
}

impl CamTarget {
    /// `positions[i]` must index `keyword_ids[i]` inside `answer_ids`.
    pub fn new(keyword_ids: Vec<u32>, answer_ids: Vec<u32>, positions: Vec<usize>) -> Result<Self> {
        let ok = !keyword_ids.is_empty()
            && positions.len() == keyword_ids.len()
            && positions
                .iter()
                .zip(&keyword_ids)
                .all(|(&p, &k)| answer_ids.get(p) == Some(&k));
        if !ok {
            return Err(Error::invalid("cam_target", "keyword positions do not point at keyword tokens"));
        }
        Ok(Self {
            keyword_ids,
            answer_ids,
            positions,
        })
    }

    pub fn keyword_ids(&self) -> &[u32] {
        &self.keyword_ids
    }

    pub fn answer_ids(&self) -> &[u32] {
        &self.answer_ids
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }
}

/// Which image branch a Grad-CAM map is taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Main,
    Ref,
}

/// Handles produced by a model's Grad-CAM forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CamForward {
    /// Scalar target score `y`.
    pub score: Var,
    /// Watched last conv feature maps `[1, C, h, w]` of each branch.
    pub feat_main: Var,
    pub feat_ref: Var,
}

/// A model able to expose its conv feature maps for Grad-CAM.
pub trait CamModel {
    /// Image spatial size `(H, W)` the maps are upsampled to.
    fn image_size(&self) -> (usize, usize);

    /// Runs the forward pass with both feature maps watched.
    fn cam_forward(
        &self,
        g: &mut Graph,
        main: &Tensor,
        reference: &Tensor,
        question: &[u32],
        target: &CamTarget,
    ) -> Result<CamForward>;
}

/// Grad-CAM map from one feature map `[C, h, w]` and its gradient.
pub fn cam_from_activations(
    feat: &[f64],
    grad: &[f64],
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    source: MapSource,
) -> Result<SaliencyMap> {
    if feat.len() != c * h * w || grad.len() != feat.len() {
        return Err(Error::invalid("gradcam", "feature map and gradient shapes differ"));
    }
    let hw = h * w;
    let mut raw = vec![0.0; hw];
    for k in 0..c {
        let a = &feat[k * hw..(k + 1) * hw];
        let alpha = grad[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64;
        for (r, &v) in raw.iter_mut().zip(a) {
            *r += alpha * v;
        }
    }
    for r in raw.iter_mut() {
        *r = r.max(0.0);
    }
    let up = upsample_bilinear(&raw, h, w, out_h, out_w);
    let peak = up.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Ok(SaliencyMap::ones(out_h, out_w, source));
    }
    let values = up.iter().map(|&v| (v / peak).clamp(0.0, 1.0)).collect();
    SaliencyMap::new(out_h, out_w, values, source)
}

/// Grad-CAM maps of both branches from one forward/backward pass.
pub fn gradcam_pair<M: CamModel + ?Sized>(
    model: &M,
    main: &Tensor,
    reference: &Tensor,
    question: &[u32],
    target: &CamTarget,
) -> Result<(SaliencyMap, SaliencyMap)> {
    let (hh, ww) = model.image_size();
    let mut g = Graph::new();
    let fwd = model.cam_forward(&mut g, main, reference, question, target)?;
    g.backward(fwd.score)?;
    let map = |g: &Graph, v: Var, src: MapSource| -> Result<SaliencyMap> {
        let s = g.shape(v);
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::invalid("gradcam", "feature map must be [1, C, h, w]"));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let zeros = vec![0.0; c * h * w];
        let grad = g.grad(v).unwrap_or(&zeros);
        cam_from_activations(g.value(v).data(), grad, c, h, w, hh, ww, src)
    };
    Ok((
        map(&g, fwd.feat_main, MapSource::Main)?,
        map(&g, fwd.feat_ref, MapSource::Ref)?,
    ))
}

/// Grad-CAM map of one branch.
pub fn gradcam<M: CamModel + ?Sized>(
    model: &M,
    main: &Tensor,
    reference: &Tensor,
    question: &[u32],
    target: &CamTarget,
    which: Which,
) -> Result<SaliencyMap> {
    let (m, r) = gradcam_pair(model, main, reference, question, target)?;
    Ok(match which {
        Which::Main => m,
        Which::Ref => r,
    })
}

/// Elementwise maximum of the two maps followed by min-max normalization.
pub fn shared_mask(s_main: &SaliencyMap, s_ref: &SaliencyMap) -> Result<SaliencyMap> {
    if s_main.h != s_ref.h || s_main.w != s_ref.w {
        return Err(Error::shape("shared_mask", &[s_main.h, s_main.w], &[s_ref.h, s_ref.w]));
    }
    let fused: Vec<f64> = s_main
        .values
        .iter()
        .zip(&s_ref.values)
        .map(|(&a, &b)| a.max(b))
        .collect();
    SaliencyMap::new(s_main.h, s_main.w, minmax(&fused), MapSource::Shared)
}

/// Multiplies every `H x W` plane of `img` (`[.., H, W]`) by the mask.
pub fn apply_mask(img: &Tensor, s: &SaliencyMap) -> Result<Tensor> {
    let shape = img.shape();
    let n = shape.len();
    if n < 2 || shape[n - 2] != s.h || shape[n - 1] != s.w {
        return Err(Error::shape("apply_mask", shape, &[s.h, s.w]));
    }
    let plane = s.h * s.w;
    let data = img
        .data()
        .chunks(plane)
        .flat_map(|p| p.iter().zip(&s.values).map(|(a, b)| a * b))
        .collect();
    Tensor::new(shape, data)
}

/// Applies one shared map to both images of a pair.
pub fn apply_shared(main: &Tensor, reference: &Tensor, s: &SaliencyMap) -> Result<(Tensor, Tensor)> {
    Ok((apply_mask(main, s)?, apply_mask(reference, s)?))
}
