//! Procedural longitudinal image pairs with known lesions, changes,
//! ground-truth masks and nuisance warps, plus the question/answer
//! templates they are described with.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::registration::{warp_values, AffineParams};
use crate::rng::{self, streams, uniform, Rng, StreamRng};
use crate::tensor::Tensor;

/// Support threshold: a lesion covers the pixels above this fraction of its
/// peak.
pub const SUPPORT_FRACTION: f64 = 0.05;
/// Radius multiplier of an enlarged lesion (a shrunk lesion divides by it).
pub const GROWTH: f64 = 1.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LesionKind {
    Opacity,
    Effusion,
    Nodule,
    Consolidation,
}

impl LesionKind {
    pub const ALL: [LesionKind; 4] = [Self::Opacity, Self::Effusion, Self::Nodule, Self::Consolidation];

    pub fn name(self) -> &'static str {
        match self {
            Self::Opacity => "opacity",
            Self::Effusion => "effusion",
            Self::Nodule => "nodule",
            Self::Consolidation => "consolidation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Support radius range in pixels at 64 px; scaled with image size.
    fn radius_range(self) -> (f64, f64) {
        match self {
            Self::Nodule => (4.0, 5.0),
            Self::Opacity => (6.5, 7.5),
            Self::Consolidation => (8.0, 9.0),
            Self::Effusion => (10.0, 11.0),
        }
    }

    fn peak_range(self) -> (f64, f64) {
        match self {
            Self::Nodule => (0.85, 0.9),
            Self::Opacity => (0.45, 0.5),
            Self::Consolidation => (0.7, 0.75),
            Self::Effusion => (0.55, 0.6),
        }
    }
}

/// Cell of the 3x3 zone grid; `col` 0..3 is left/central/right, `row` 0..3
/// is upper/middle/lower.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Zone {
    pub col: u8,
    pub row: u8,
}

impl Zone {
    const COLS: [&'static str; 3] = ["left", "central", "right"];
    const ROWS: [&'static str; 3] = ["upper", "middle", "lower"];

    pub fn all() -> impl Iterator<Item = Zone> {
        (0..3).flat_map(|row| (0..3).map(move |col| Zone { col, row }))
    }

    pub fn name(self) -> String {
        format!("{} {}", Self::COLS[self.col as usize], Self::ROWS[self.row as usize])
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::all().find(|z| z.name() == s)
    }

    /// Pixel span `[lo, hi)` of the zone along x and y.
    pub fn bounds(self, size: usize) -> ([f64; 2], [f64; 2]) {
        let third = size as f64 / 3.0;
        let (c, r) = (self.col as f64, self.row as f64);
        ([c * third, (c + 1.0) * third], [r * third, (r + 1.0) * third])
    }

    pub fn contains(self, p: [f64; 2], size: usize) -> bool {
        let (x, y) = self.bounds(size);
        p[0] >= x[0] && p[0] < x[1] && p[1] >= y[0] && p[1] < y[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Change {
    Appeared,
    Disappeared,
    Enlarged,
    Shrunk,
    Unchanged,
}

impl Change {
    pub const ALL: [Change; 5] = [
        Self::Appeared,
        Self::Disappeared,
        Self::Enlarged,
        Self::Shrunk,
        Self::Unchanged,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Appeared => "appeared",
            Self::Disappeared => "disappeared",
            Self::Enlarged => "enlarged",
            Self::Shrunk => "shrunk",
            Self::Unchanged => "unchanged",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Change type read back from an answer produced by the template table.
    pub fn from_answer(answer: &str) -> Option<Self> {
        let words = crate::text::words(answer);
        let has = |w: &str| words.iter().any(|t| t == w);
        if has("disappeared") {
            Some(Self::Disappeared)
        } else if has("appeared") {
            Some(Self::Appeared)
        } else if has("enlarged") {
            Some(Self::Enlarged)
        } else if has("shrunk") {
            Some(Self::Shrunk)
        } else if has("no") && has("change") {
            Some(Self::Unchanged)
        } else {
            None
        }
    }
}

/// One radial Gaussian blob. `radius` is the support radius: the blob
/// exceeds [`SUPPORT_FRACTION`] of `peak` exactly inside it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionSpec {
    pub kind: LesionKind,
    pub zone: Zone,
    /// `(x, y)` in pixels.
    pub center: [f64; 2],
    pub radius: f64,
    pub peak: f64,
}

impl LesionSpec {
    fn sigma(&self) -> f64 {
        self.radius / libm::sqrt(2.0 * libm::log(1.0 / SUPPORT_FRACTION))
    }

    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let s = self.sigma();
        self.peak * libm::exp(-(dx * dx + dy * dy) / (2.0 * s * s))
    }

    pub fn in_support(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        dx * dx + dy * dy < self.radius * self.radius
    }

    pub fn with_radius(&self, radius: f64) -> Self {
        Self { radius, ..*self }
    }
}

/// Generator knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub max_distractors: usize,
    pub max_translation_px: f64,
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            max_distractors: 2,
            max_translation_px: 4.0,
            max_rotation_deg: 4.0,
            scale_range: (0.95, 1.05),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if self.image_size < 32 {
            return Err(Error::invalid("synth", "image size must be >= 32"));
        }
        if !(self.max_translation_px >= 0.0 && self.max_rotation_deg >= 0.0 && lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("synth", "nuisance ranges must be non-negative and ordered"));
        }
        Ok(())
    }
}

/// A generated longitudinal sample.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyPair {
    /// Current study after the nuisance warp, `[1, 1, H, W]` in `[0, 1]`.
    pub main: Tensor,
    /// Prior study, `[1, 1, H, W]`.
    pub reference: Tensor,
    /// Nuisance warp applied to the main image.
    pub theta_star: AffineParams,
    pub change: Change,
    /// The lesion the question/answer is about (in its reference-frame
    /// position; for `Appeared`, as it appears in the main image).
    pub target: LesionSpec,
    pub lesions_ref: Vec<LesionSpec>,
    pub lesions_main: Vec<LesionSpec>,
    /// `H * W` row-major; union of the changed lesion's supports.
    pub gt_mask: Vec<bool>,
    pub question: String,
    pub answer: String,
    pub keyword: String,
}

impl StudyPair {
    pub fn size(&self) -> usize {
        self.reference.shape()[3]
    }

    /// Bounding box `(x0, y0, x1, y1)` (inclusive) of the ground-truth mask.
    pub fn gt_bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let n = self.size();
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.gt_mask.iter().enumerate().filter(|(_, &m)| m) {
            let (x, y) = (i % n, i / n);
            bb = Some(match bb {
                None => (x, y, x, y),
                Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
            });
        }
        bb
    }
}

/// [`StudyPair`] together with the main image before the nuisance warp.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPair {
    pub pair: StudyPair,
    pub main_clean: Tensor,
}

pub const QUESTIONS: [&str; 3] = [
    "what has changed?",
    "what is the difference between the two images?",
    "how has the {kind} changed?",
];

/// `(answer, keyword)` for a change of `kind` in `zone`.
pub fn answer_text(kind: LesionKind, zone: Zone, change: Change) -> (String, String) {
    let (k, z) = (kind.name(), zone.name());
    let answer = match change {
        Change::Appeared => format!("a new {k} has appeared in the {z} zone"),
        Change::Disappeared => format!("the {k} in the {z} zone has disappeared"),
        Change::Enlarged => format!("the {k} in the {z} zone has enlarged"),
        Change::Shrunk => format!("the {k} in the {z} zone has shrunk"),
        Change::Unchanged => String::from("no change is observed"),
    };
    let keyword = match change {
        Change::Unchanged => String::from("change"),
        _ => String::from(k),
    };
    (answer, keyword)
}

/// `(question, answer, keyword)`; the question template is drawn from `rng`.
pub fn answer_of(spec: &LesionSpec, change: Change, rng: &mut impl Rng) -> (String, String, String) {
    let q = QUESTIONS[rng.random_range(0..QUESTIONS.len())].replace("{kind}", spec.kind.name());
    let (a, k) = answer_text(spec.kind, spec.zone, change);
    (q, a, k)
}

/// Every question and answer the generator can emit, in a fixed order.
pub fn corpus_words() -> Vec<String> {
    let mut out = Vec::new();
    for kind in LesionKind::ALL {
        for q in QUESTIONS {
            out.push(q.replace("{kind}", kind.name()));
        }
        for zone in Zone::all() {
            for change in Change::ALL {
                out.push(answer_text(kind, zone, change).0);
            }
        }
    }
    out
}

/// Per-sample seed of sample `index` in a corpus generated from `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut r = rng::stream(seed, streams::SAMPLE ^ index);
    r.random()
}

fn sample_lesion(kind: LesionKind, zone: Zone, margin_scale: f64, size: usize, r: &mut StreamRng) -> Option<LesionSpec> {
    let s = size as f64 / 64.0;
    let (rlo, rhi) = kind.radius_range();
    let radius = uniform(r, rlo, rhi) * s;
    let (plo, phi) = kind.peak_range();
    let peak = uniform(r, plo, phi);
    // the largest radius this lesion takes in either image must fit
    let margin = radius * margin_scale + 1.0;
    let (xb, yb) = zone.bounds(size);
    let lo_x = xb[0].max(margin);
    let hi_x = xb[1].min(size as f64 - 1.0 - margin);
    let lo_y = yb[0].max(margin);
    let hi_y = yb[1].min(size as f64 - 1.0 - margin);
    if lo_x >= hi_x || lo_y >= hi_y {
        return None;
    }
    Some(LesionSpec {
        kind,
        zone,
        center: [uniform(r, lo_x, hi_x), uniform(r, lo_y, hi_y)],
        radius,
        peak,
    })
}

/// Smooth low-frequency field plus rib-like bands, roughly in `[0.1, 0.45]`.
fn background(size: usize, r: &mut StreamRng) -> Vec<f64> {
    let n = size as f64;
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                uniform(r, 0.01, 0.04),
                uniform(r, -2.0, 2.0),
                uniform(r, -2.0, 2.0),
                uniform(r, 0.0, core::f64::consts::TAU),
            ]
        })
        .collect();
    let period = uniform(r, 0.11, 0.16) * n;
    let bend = uniform(r, 0.5, 1.5) / n;
    let phase = uniform(r, 0.0, core::f64::consts::TAU);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64 / n, y as f64 / n);
            let mut v = 0.27;
            for w in &waves {
                v += w[0] * libm::cos(core::f64::consts::TAU * (w[1] * xf + w[2] * yf) + w[3]);
            }
            let dx = x as f64 - n / 2.0;
            let rib = core::f64::consts::TAU * (y as f64 + bend * dx * dx) / period + phase;
            v += 0.02 * libm::sin(rib);
            out.push(v);
        }
    }
    out
}

fn render(bg: &[f64], lesions: &[LesionSpec], size: usize) -> Tensor {
    let mut data = bg.to_vec();
    for (i, v) in data.iter_mut().enumerate() {
        let (x, y) = ((i % size) as f64, (i / size) as f64);
        for l in lesions {
            *v += l.value_at(x, y);
        }
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_parts(alloc::vec![1, 1, size, size], data)
}

/// Renders one sample. Pure function of `(seed, cfg)`.
pub fn render_pair(seed: u64, cfg: &SynthConfig) -> Result<RenderedPair> {
    cfg.validate()?;
    let size = cfg.image_size;
    let mut r = rng::stream(seed, streams::SAMPLE);
    let change = Change::ALL[r.random_range(0..Change::ALL.len())];
    let margin_scale = match change {
        Change::Enlarged => GROWTH,
        _ => 1.0,
    };
    let mut zones: Vec<Zone> = Zone::all().collect();
    let target = loop {
        let zi = r.random_range(0..zones.len());
        let kind = LesionKind::ALL[r.random_range(0..4)];
        if let Some(l) = sample_lesion(kind, zones[zi], margin_scale, size, &mut r) {
            zones.remove(zi);
            break l;
        }
    };
    let n_distract = r.random_range(0..=cfg.max_distractors);
    let mut distractors = Vec::new();
    while distractors.len() < n_distract && !zones.is_empty() {
        let zi = r.random_range(0..zones.len());
        let kind = LesionKind::ALL[r.random_range(0..4)];
        let zone = zones.remove(zi);
        if let Some(l) = sample_lesion(kind, zone, 1.0, size, &mut r) {
            distractors.push(l);
        }
    }
    let (t_ref, t_main): (Option<LesionSpec>, Option<LesionSpec>) = match change {
        Change::Appeared => (None, Some(target)),
        Change::Disappeared => (Some(target), None),
        Change::Enlarged => (Some(target), Some(target.with_radius(target.radius * GROWTH))),
        Change::Shrunk => (Some(target), Some(target.with_radius(target.radius / GROWTH))),
        Change::Unchanged => (Some(target), Some(target)),
    };
    let mut lesions_ref = distractors.clone();
    lesions_ref.extend(t_ref);
    let mut lesions_main = distractors;
    lesions_main.extend(t_main);

    let bg = background(size, &mut r);
    let reference = render(&bg, &lesions_ref, size);
    let main_clean = render(&bg, &lesions_main, size);

    let t = cfg.max_translation_px;
    let rot = cfg.max_rotation_deg;
    let (slo, shi) = cfg.scale_range;
    let theta_star = AffineParams::from_similarity(
        uniform(&mut r, -rot, rot),
        uniform(&mut r, slo, shi),
        uniform(&mut r, -t, t),
        uniform(&mut r, -t, t),
        size,
        size,
    );
    let main = warp_values(&main_clean, &[theta_star])?;

    let changed: Vec<LesionSpec> = match change {
        Change::Unchanged => Vec::new(),
        _ => t_ref.into_iter().chain(t_main).collect(),
    };
    let gt_mask = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            changed.iter().any(|l| l.in_support(x, y))
        })
        .collect();
    let (question, answer, keyword) = answer_of(&target, change, &mut r);
    Ok(RenderedPair {
        pair: StudyPair {
            main,
            reference,
            theta_star,
            change,
            target,
            lesions_ref,
            lesions_main,
            gt_mask,
            question,
            answer,
            keyword,
        },
        main_clean,
    })
}

/// [`render_pair`] without the pre-warp image.
pub fn generate_pair(seed: u64, cfg: &SynthConfig) -> Result<StudyPair> {
    Ok(render_pair(seed, cfg)?.pair)
}

/// `(train, valid, test)` counts: valid and test take the floor of their
/// ratio, train gets the remainder.
pub fn split_sizes(count: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split", "ratios must be non-negative and sum to 1"));
    }
    let valid = libm::floor(count as f64 * ratios[1]) as usize;
    let test = libm::floor(count as f64 * ratios[2]) as usize;
    Ok([count - valid - test, valid, test])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn find(cfg: &SynthConfig, change: Change) -> RenderedPair {
        (0..)
            .map(|s| render_pair(s, cfg).unwrap())
            .find(|p| p.pair.change == change)
            .unwrap()
    }

    #[test]
    fn template_examples() {
        let z = Zone { col: 0, row: 0 };
        let (a, k) = answer_text(LesionKind::Opacity, z, Change::Appeared);
        assert_eq!(a, "a new opacity has appeared in the left upper zone");
        assert_eq!(k, "opacity");
        assert_eq!(answer_text(LesionKind::Nodule, z, Change::Unchanged).1, "change");
    }

    #[test]
    fn keyword_in_every_answer() {
        for kind in LesionKind::ALL {
            for zone in Zone::all() {
                for change in Change::ALL {
                    let (a, k) = answer_text(kind, zone, change);
                    assert!(tokenize(&a).contains(&k), "{a} / {k}");
                    assert_eq!(Change::from_answer(&a), Some(change));
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_pair(42, &cfg).unwrap(), generate_pair(42, &cfg).unwrap());
        assert_ne!(generate_pair(42, &cfg).unwrap(), generate_pair(43, &cfg).unwrap());
    }

    #[test]
    fn unchanged_main_equals_reference_before_warp() {
        let p = find(&SynthConfig::default(), Change::Unchanged);
        assert_eq!(p.main_clean, p.pair.reference);
        assert!(p.pair.gt_mask.iter().all(|&m| !m));
    }

    #[test]
    fn appeared_mask_is_thresholded_support() {
        let p = find(&SynthConfig::default(), Change::Appeared);
        let l = p.pair.target;
        let n = 64;
        for (i, &m) in p.pair.gt_mask.iter().enumerate() {
            let v = l.value_at((i % n) as f64, (i / n) as f64);
            assert_eq!(m, v > SUPPORT_FRACTION * l.peak, "pixel {i}");
        }
        assert!(p.pair.gt_mask.iter().any(|&m| m));
    }

    #[test]
    fn lesions_respect_zones_and_bounds() {
        let cfg = SynthConfig::default();
        for s in 0..200 {
            let p = generate_pair(s, &cfg).unwrap();
            for l in p.lesions_ref.iter().chain(&p.lesions_main) {
                assert!(l.radius >= 2.0);
                assert!(l.zone.contains(l.center, 64));
                assert!(l.center[0] - l.radius >= 0.0 && l.center[0] + l.radius <= 63.0);
                assert!(l.center[1] - l.radius >= 0.0 && l.center[1] + l.radius <= 63.0);
            }
            assert!(p.main.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(p.gt_mask.iter().any(|&m| m), p.change != Change::Unchanged);
        }
    }

    #[test]
    fn gt_mask_matches_difference_support() {
        let cfg = SynthConfig::default();
        for s in 0..200 {
            let p = render_pair(s, &cfg).unwrap();
            if p.pair.change == Change::Unchanged {
                continue;
            }
            let diff: Vec<bool> = p
                .main_clean
                .data()
                .iter()
                .zip(p.pair.reference.data())
                .map(|(a, b)| (a - b).abs() > 0.05)
                .collect();
            let inter = diff.iter().zip(&p.pair.gt_mask).filter(|(a, b)| **a && **b).count();
            let union = diff.iter().zip(&p.pair.gt_mask).filter(|(a, b)| **a || **b).count();
            let iou = inter as f64 / union as f64;
            assert!(iou >= 0.5, "seed {s}: {iou} ({:?})", p.pair.change);
        }
    }

    #[test]
    fn split_floor_rule() {
        assert_eq!(split_sizes(2500, [0.8, 0.1, 0.1]).unwrap(), [2000, 250, 250]);
        assert_eq!(split_sizes(33, [0.8, 0.1, 0.1]).unwrap(), [27, 3, 3]);
        assert!(split_sizes(10, [0.5, 0.1, 0.1]).is_err());
    }
}
