//! Warm-up and saliency-masked training steps, and single/two-pass
//! inference.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::keyword::{extract_keyword, keyword_to_target, KeywordLexicon};
use crate::model::DiffVqaModel;
use crate::nn::Bound;
use crate::optim::{Adam, AdamConfig};
use crate::registration::{reg_loss, warp_main, AffineParams, RegLossWeights};
use crate::saliency::{apply_shared, gradcam_pair, shared_mask, CamTarget, MapSource, SaliencyMap};
use crate::tensor::{Graph, Tensor, Var};

/// One encoded training/evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, 1, H, W]`.
    pub main: Tensor,
    pub reference: Tensor,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    pub answer_text: String,
}

/// Produces the two per-image saliency maps for step 1 / pass 2.
pub trait MaskSource {
    fn maps(
        &mut self,
        model: &DiffVqaModel,
        main: &Tensor,
        reference: &Tensor,
        question: &[u32],
        target: &CamTarget,
    ) -> Result<(SaliencyMap, SaliencyMap)>;
}

/// Keyword-conditioned Grad-CAM; counts its invocations.
#[derive(Clone, Debug, Default)]
pub struct GradCam {
    pub calls: usize,
}

impl MaskSource for GradCam {
    fn maps(
        &mut self,
        model: &DiffVqaModel,
        main: &Tensor,
        reference: &Tensor,
        question: &[u32],
        target: &CamTarget,
    ) -> Result<(SaliencyMap, SaliencyMap)> {
        self.calls += 1;
        gradcam_pair(model, main, reference, question, target)
    }
}

/// All-ones maps; masking becomes a no-op.
#[derive(Clone, Copy, Debug, Default)]
pub struct OnesMask;

impl MaskSource for OnesMask {
    fn maps(
        &mut self,
        model: &DiffVqaModel,
        _main: &Tensor,
        _reference: &Tensor,
        _question: &[u32],
        _target: &CamTarget,
    ) -> Result<(SaliencyMap, SaliencyMap)> {
        let n = model.cfg.image_size;
        Ok((SaliencyMap::ones(n, n, MapSource::Main), SaliencyMap::ones(n, n, MapSource::Ref)))
    }
}

/// Mean losses of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub l_reg: f64,
    pub l_lm: f64,
    pub total: f64,
    /// Samples trained on masked inputs.
    pub masked: usize,
    /// Samples whose keyword could not be located (trained unmasked).
    pub fallback: usize,
}

/// Graph handles of one sample's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SampleForward {
    pub theta: Var,
    pub l_reg: Var,
    pub l_lm: Var,
    pub total: Var,
}

/// `theta = predict_affine`, warp the main image, optionally multiply both
/// images by the (constant) shared mask, encode, decode, and sum the losses.
pub fn sample_forward(
    g: &mut Graph,
    model: &DiffVqaModel,
    p: &Bound,
    sample: &Sample,
    weights: &RegLossWeights,
    mask: Option<&SaliencyMap>,
) -> Result<SampleForward> {
    let main = g.constant(sample.main.clone());
    let reference = g.constant(sample.reference.clone());
    let theta = model.predict_affine(g, p, main, reference)?;
    let warped = warp_main(g, main, theta)?;
    let (m_in, r_in) = match mask {
        None => (warped, reference),
        Some(s) => {
            let s_t = Tensor::new(sample.main.shape(), s.values().to_vec())?;
            let s_v = g.constant(s_t);
            let m = g.mul(warped, s_v)?;
            let (_, r_masked) = apply_shared(&sample.main, &sample.reference, s)?;
            (m, g.constant(r_masked))
        }
    };
    let enc = model.encode_pair(g, p, m_in, r_in, &sample.question, false)?;
    let (_, l_lm) = model.decode_teacher_forced(g, p, &enc, &sample.answer)?;
    let l_reg = reg_loss(g, theta, weights)?;
    let total = g.add(l_reg, l_lm)?;
    Ok(SampleForward {
        theta,
        l_reg,
        l_lm,
        total,
    })
}

/// Registered (warped) main image for the current parameters; no gradients.
pub fn register(model: &DiffVqaModel, main: &Tensor, reference: &Tensor) -> Result<(AffineParams, Tensor)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let m = g.constant(main.clone());
    let r = g.constant(reference.clone());
    let theta = model.predict_affine(&mut g, &p, m, r)?;
    let warped = warp_main(&mut g, m, theta)?;
    Ok((AffineParams::from_tensor(g.value(theta))?[0], g.value(warped).clone()))
}

/// Shared saliency mask for a sample, or `None` when the keyword is not
/// found in the answer.
pub fn saliency_for(
    model: &DiffVqaModel,
    masks: &mut dyn MaskSource,
    lexicon: &KeywordLexicon,
    warped_main: &Tensor,
    reference: &Tensor,
    question: &[u32],
    answer_text: &str,
    answer_ids: &[u32],
) -> Result<Option<SaliencyMap>> {
    let Ok(keyword) = extract_keyword(answer_text, lexicon) else {
        return Ok(None);
    };
    let Some(target) = keyword_to_target(&keyword, &model.vocab, answer_ids) else {
        return Ok(None);
    };
    let (s_main, s_ref) = masks.maps(model, warped_main, reference, question, &target)?;
    Ok(Some(shared_mask(&s_main, &s_ref)?))
}

/// Owns the model and optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: DiffVqaModel,
    pub opt: Adam,
    pub weights: RegLossWeights,
    pub lexicon: KeywordLexicon,
    /// Debug switch: back-propagate only `L_reg`.
    pub detach_lm: bool,
}

impl Trainer {
    pub fn new(model: DiffVqaModel, adam: AdamConfig, weights: RegLossWeights) -> Self {
        Self {
            model,
            opt: Adam::new(adam),
            weights,
            lexicon: KeywordLexicon::synthetic(),
            detach_lm: false,
        }
    }

    /// Forward/backward of one sample; returns losses and per-parameter
    /// gradients.
    fn sample_grads(&self, sample: &Sample, mask: Option<&SaliencyMap>) -> Result<(f64, f64, f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = self.model.bind(&mut g, true);
        let f = sample_forward(&mut g, &self.model, &p, sample, &self.weights, mask)?;
        let root = if self.detach_lm { f.l_reg } else { f.total };
        g.backward(root)?;
        let (r, l, t) = (g.value(f.l_reg).item(), g.value(f.l_lm).item(), g.value(f.total).item());
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "train_step" });
        }
        Ok((r, l, t, p.grads(&g)))
    }

    fn apply(&mut self, items: Vec<(f64, f64, f64, Vec<Tensor>)>, masked: usize, fallback: usize) -> Result<StepLosses> {
        let n = items.len();
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        let mut out = StepLosses {
            masked,
            fallback,
            ..StepLosses::default()
        };
        let mut acc: Option<Vec<Tensor>> = None;
        for (r, l, t, grads) in items {
            out.l_reg += r;
            out.l_lm += l;
            out.total += t;
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(&grads) {
                        for (u, v) in x.data_mut().iter_mut().zip(y.data()) {
                            *u += v;
                        }
                    }
                }
            }
        }
        let mut grads = acc.unwrap_or_default();
        let inv = 1.0 / n as f64;
        for gt in grads.iter_mut() {
            for v in gt.data_mut() {
                *v *= inv;
            }
        }
        out.l_reg *= inv;
        out.l_lm *= inv;
        out.total *= inv;
        self.opt.step(self.model.params.tensors_mut(), &grads);
        Ok(out)
    }

    /// Unmasked step: `L_total = L_reg + L_LM`, one update.
    pub fn step_warmup(&mut self, batch: &[Sample]) -> Result<StepLosses> {
        let items = batch
            .iter()
            .map(|s| self.sample_grads(s, None))
            .collect::<Result<Vec<_>>>()?;
        self.apply(items, 0, 0)
    }

    /// Step 1 (read-only): per-sample shared saliency masks.
    pub fn masks_for(&self, batch: &[Sample], masks: &mut dyn MaskSource) -> Result<Vec<Option<SaliencyMap>>> {
        batch
            .iter()
            .map(|s| {
                let (_, warped) = register(&self.model, &s.main, &s.reference)?;
                saliency_for(
                    &self.model,
                    masks,
                    &self.lexicon,
                    &warped,
                    &s.reference,
                    &s.question,
                    &s.answer_text,
                    &s.answer,
                )
            })
            .collect()
    }

    /// Two-step update: saliency from the current parameters, then one
    /// update on the masked pair.
    pub fn step_masked(&mut self, batch: &[Sample], masks: &mut dyn MaskSource) -> Result<StepLosses> {
        let maps = self.masks_for(batch, masks)?;
        let masked = maps.iter().filter(|m| m.is_some()).count();
        let items = batch
            .iter()
            .zip(&maps)
            .map(|(s, m)| self.sample_grads(s, m.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        self.apply(items, masked, batch.len() - masked)
    }
}

/// Pass-1 output, shared by both inference modes.
#[derive(Clone, Debug, PartialEq)]
pub struct SinglePass {
    pub theta: AffineParams,
    pub warped_main: Tensor,
    pub answer: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoPass {
    pub preliminary: SinglePass,
    pub keyword: Option<String>,
    /// `None` when masking was skipped.
    pub mask: Option<SaliencyMap>,
    pub answer: Vec<u32>,
}

fn generate_from(model: &DiffVqaModel, main: &Tensor, reference: &Tensor, question: &[u32]) -> Result<Vec<u32>> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let m = g.constant(main.clone());
    let r = g.constant(reference.clone());
    let enc = model.encode_pair(&mut g, &p, m, r, question, false)?;
    model.generate(&mut g, &p, &enc, model.cfg.max_answer_len)
}

/// Register, then generate without masking.
pub fn infer_single_pass(model: &DiffVqaModel, main: &Tensor, reference: &Tensor, question: &[u32]) -> Result<SinglePass> {
    let (theta, warped_main) = register(model, main, reference)?;
    let answer = generate_from(model, &warped_main, reference, question)?;
    Ok(SinglePass {
        theta,
        warped_main,
        answer,
    })
}

/// Pass 1, keyword from the preliminary answer, shared mask, pass 2. Falls
/// back to the preliminary answer when the keyword cannot be located.
pub fn infer_two_pass(
    model: &DiffVqaModel,
    masks: &mut dyn MaskSource,
    lexicon: &KeywordLexicon,
    main: &Tensor,
    reference: &Tensor,
    question: &[u32],
) -> Result<TwoPass> {
    let pre = infer_single_pass(model, main, reference, question)?;
    let text = model.vocab.decode(&pre.answer)?;
    let keyword = extract_keyword(&text, lexicon).ok();
    let mask = saliency_for(model, masks, lexicon, &pre.warped_main, reference, question, &text, &pre.answer)?;
    let answer = match &mask {
        None => pre.answer.clone(),
        Some(s) => {
            let (m, r) = apply_shared(&pre.warped_main, reference, s)?;
            generate_from(model, &m, &r, question)?
        }
    };
    Ok(TwoPass {
        preliminary: pre,
        keyword,
        mask,
        answer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Vocabulary};
    use crate::synth::{generate_pair, SynthConfig};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            in_channels: 1,
            reg_channels: alloc::vec![4, 4],
            enc_channels: alloc::vec![4, 8, 8],
            embed_dim: 16,
            projector_heads: 2,
            text_layers: 1,
            text_heads: 2,
            decoder_layers: 1,
            decoder_heads: 2,
            ffn_mult: 2,
            max_question_len: 12,
            max_answer_len: 14,
        }
    }

    fn samples(n: u64, vocab: &Vocabulary) -> Vec<Sample> {
        let cfg = SynthConfig {
            image_size: 32,
            ..SynthConfig::default()
        };
        (0..n)
            .map(|i| {
                let p = generate_pair(i, &cfg).unwrap();
                Sample {
                    main: p.main,
                    reference: p.reference,
                    question: vocab.encode(&p.question).unwrap(),
                    answer: vocab.encode(&p.answer).unwrap(),
                    answer_text: p.answer,
                }
            })
            .collect()
    }

    fn trainer(seed: u64) -> Trainer {
        let m = DiffVqaModel::new(tiny_cfg(), Vocabulary::synthetic(), seed).unwrap();
        Trainer::new(
            m,
            AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            RegLossWeights::default(),
        )
    }

    /// Sums `l_reg + l_lm` after a nontrivial predictor update.
    #[test]
    fn total_is_sum_of_parts() {
        let mut t = trainer(1);
        let batch = samples(2, &t.model.vocab);
        let first = t.step_warmup(&batch).unwrap();
        assert!(first.total.is_finite());
        assert!((first.total - (first.l_reg + first.l_lm)).abs() < 1e-12);
        let again = t.step_warmup(&batch).unwrap();
        assert!((again.total - (again.l_reg + again.l_lm)).abs() < 1e-12);
    }

    #[test]
    fn ones_mask_matches_warmup() {
        let mut a = trainer(2);
        let mut b = a.clone();
        let batch = samples(2, &a.model.vocab);
        let la = a.step_warmup(&batch).unwrap();
        let lb = b.step_masked(&batch, &mut OnesMask).unwrap();
        assert!((la.total - lb.total).abs() <= 1e-12);
        assert_eq!(lb.masked, 2);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn step_one_is_read_only() {
        let t = trainer(3);
        let before = t.model.params.clone();
        let batch = samples(2, &t.model.vocab);
        let mut cam = GradCam::default();
        let maps = t.masks_for(&batch, &mut cam).unwrap();
        assert_eq!(cam.calls, 2);
        assert!(maps.iter().all(Option::is_some));
        assert_eq!(t.model.params, before);
    }

    #[test]
    fn one_mask_for_both_images() {
        struct Half;
        impl MaskSource for Half {
            fn maps(
                &mut self,
                model: &DiffVqaModel,
                _: &Tensor,
                _: &Tensor,
                _: &[u32],
                _: &CamTarget,
            ) -> Result<(SaliencyMap, SaliencyMap)> {
                let n = model.cfg.image_size;
                let v: Vec<f64> = (0..n * n).map(|i| (i % n) as f64 / (n - 1) as f64).collect();
                Ok((
                    SaliencyMap::new(n, n, v.clone(), MapSource::Main)?,
                    SaliencyMap::new(n, n, alloc::vec![0.0; n * n], MapSource::Ref)?,
                ))
            }
        }
        let t = trainer(4);
        let s = &samples(1, &t.model.vocab)[0];
        let mut src = Half;
        let maps = t.masks_for(core::slice::from_ref(s), &mut src).unwrap();
        let shared = maps[0].clone().unwrap();
        // manual: same S multiplies the warped main and the reference
        let (_, warped) = register(&t.model, &s.main, &s.reference).unwrap();
        let (m, r) = apply_shared(&warped, &s.reference, &shared).unwrap();
        let mut g = Graph::new();
        let p = t.model.bind(&mut g, false);
        let (mv, rv) = (g.constant(m), g.constant(r));
        let enc = t.model.encode_pair(&mut g, &p, mv, rv, &s.question, false).unwrap();
        let (_, l) = t.model.decode_teacher_forced(&mut g, &p, &enc, &s.answer).unwrap();
        let mut g2 = Graph::new();
        let p2 = t.model.bind(&mut g2, false);
        let f = sample_forward(&mut g2, &t.model, &p2, s, &t.weights, Some(&shared)).unwrap();
        assert!((g.value(l).item() - g2.value(f.l_lm).item()).abs() < 1e-12);
    }

    #[test]
    fn detached_lm_leaves_decoder_untouched() {
        let mut t = trainer(5);
        t.detach_lm = true;
        let before = t.model.params.clone();
        let batch = samples(1, &t.model.vocab);
        t.step_warmup(&batch).unwrap();
        for (name, tensor) in before.iter() {
            if name.starts_with("dec.") || name.starts_with("tok_emb") {
                assert_eq!(t.model.params.get(t.model.params.find(name).unwrap()), tensor, "{name}");
            }
        }
    }

    #[test]
    fn absent_keyword_falls_back() {
        let t = trainer(6);
        let s = &samples(1, &t.model.vocab)[0];
        let mut cam = GradCam::default();
        let got = saliency_for(
            &t.model,
            &mut cam,
            &t.lexicon,
            &s.main,
            &s.reference,
            &s.question,
            "effusion",
            &t.model.vocab.encode("no change is observed").unwrap(),
        )
        .unwrap();
        assert!(got.is_none());
        assert_eq!(cam.calls, 0);
    }

    #[test]
    fn inference_contracts() {
        let t = trainer(7);
        let s = &samples(1, &t.model.vocab)[0];
        let single = infer_single_pass(&t.model, &s.main, &s.reference, &s.question).unwrap();
        let two = infer_two_pass(&t.model, &mut OnesMask, &t.lexicon, &s.main, &s.reference, &s.question).unwrap();
        assert_eq!(two.preliminary, single);
        assert_eq!(two.answer, single.answer);
        let again = infer_two_pass(&t.model, &mut GradCam::default(), &t.lexicon, &s.main, &s.reference, &s.question)
            .unwrap();
        let again2 = infer_two_pass(&t.model, &mut GradCam::default(), &t.lexicon, &s.main, &s.reference, &s.question)
            .unwrap();
        assert_eq!(again, again2);
    }
}
