//! Image encoder, projector, text encoder and causal multimodal decoder.
//!
//! All weights are shared between the main and reference image branches.
//! The token embedding table is one parameter used by the text encoder, the
//! decoder input and the (tied) output head.

mod config;
mod layout;
mod vocab;

use alloc::vec::Vec;

pub use config::ModelConfig;
pub use layout::{SequenceLayout, Slot};
pub use vocab::{Vocabulary, ANS, EOS, IMG, PAD, QTN};

use crate::error::{Error, Result};
use crate::nn::{Bound, ConvBlock, LayerNorm, Linear, Mlp, ParamId, ParamStore, TransformerBlock};
use crate::registration::AffinePredictor;
use crate::rng::{self, normal, streams};
use crate::saliency::{CamForward, CamModel, CamTarget};
use crate::tensor::{Graph, Tensor, Var};

const POS_STD: f64 = 0.25;

/// The complete network.
#[derive(Clone, Debug)]
pub struct DiffVqaModel {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    registration: AffinePredictor,
    encoder: Vec<ConvBlock>,
    proj_in: Linear,
    /// Spatial position of each image token, shared by both branches.
    proj_pos: ParamId,
    proj_block: TransformerBlock,
    proj_mlp: Mlp,
    /// Output norm; gamma starts at the token-embedding scale.
    proj_ln: LayerNorm,
    /// Spatial code added to the projected tokens, so main and reference
    /// tokens of the same grid cell carry the same vector into the decoder.
    proj_pos_out: ParamId,
    tok_emb: ParamId,
    text_pos: ParamId,
    text_blocks: Vec<TransformerBlock>,
    text_ln: LayerNorm,
    dec_pos: ParamId,
    dec_blocks: Vec<TransformerBlock>,
    dec_ln: LayerNorm,
}

/// Graph handles for one encoded (main, reference, question) triple.
#[derive(Clone, Copy, Debug)]
pub struct PairEncoding {
    /// Last conv feature maps `[1, C, h, w]`.
    pub feat_main: Var,
    pub feat_ref: Var,
    /// Projected image tokens `[N, D]`.
    pub z_main: Var,
    pub z_ref: Var,
    /// Encoded question `[L, D]`.
    pub z_q: Var,
}

impl DiffVqaModel {
    pub fn new(cfg: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, streams::PARAM_INIT);
        let mut ps = ParamStore::new();
        let d = cfg.embed_dim;
        let ffn = cfg.ffn_mult * d;
        let registration = AffinePredictor::new(&mut ps, "reg", cfg.in_channels, &cfg.reg_channels, &mut r);
        let mut encoder = Vec::new();
        let mut c_in = cfg.in_channels;
        for (i, &c) in cfg.enc_channels.iter().enumerate() {
            encoder.push(ConvBlock::new(&mut ps, &alloc::format!("enc.conv{i}"), c_in, c, 3, 2, &mut r));
            c_in = c;
        }
        let proj_in = Linear::new(&mut ps, "proj.in", cfg.channels(), d, &mut r);
        let proj_pos = ps.add(
            "proj.pos",
            Tensor::from_fn(&[cfg.tokens_per_image(), d], |_| POS_STD * normal(&mut r)),
        );
        let proj_block = TransformerBlock::new(&mut ps, "proj.block", d, cfg.projector_heads, ffn, &mut r);
        let proj_mlp = Mlp::new(&mut ps, "proj.mlp", d, d, d, &mut r);
        let emb_std = 1.0 / libm::sqrt(d as f64);
        let proj_ln = LayerNorm::new(&mut ps, "proj.ln", d);
        ps.get_mut(proj_ln.gamma).data_mut().fill(emb_std);
        let proj_pos_out = ps.add(
            "proj.pos_out",
            Tensor::from_fn(&[cfg.tokens_per_image(), d], |_| emb_std * normal(&mut r)),
        );
        let tok_emb = ps.add(
            "tok_emb",
            Tensor::from_fn(&[vocab.len(), d], |_| emb_std * normal(&mut r)),
        );
        let text_pos = ps.add(
            "text.pos",
            Tensor::from_fn(&[cfg.max_question_len, d], |_| emb_std * normal(&mut r)),
        );
        let text_blocks = (0..cfg.text_layers)
            .map(|i| TransformerBlock::new(&mut ps, &alloc::format!("text.block{i}"), d, cfg.text_heads, ffn, &mut r))
            .collect();
        let text_ln = LayerNorm::new(&mut ps, "text.ln", d);
        let dec_pos = ps.add(
            "dec.pos",
            Tensor::from_fn(&[cfg.max_sequence_len(), d], |_| emb_std * normal(&mut r)),
        );
        let dec_blocks = (0..cfg.decoder_layers)
            .map(|i| TransformerBlock::new(&mut ps, &alloc::format!("dec.block{i}"), d, cfg.decoder_heads, ffn, &mut r))
            .collect();
        let dec_ln = LayerNorm::new(&mut ps, "dec.ln", d);
        Ok(Self {
            cfg,
            vocab,
            params: ps,
            registration,
            encoder,
            proj_in,
            proj_pos,
            proj_block,
            proj_mlp,
            proj_ln,
            proj_pos_out,
            tok_emb,
            text_pos,
            text_blocks,
            text_ln,
            dec_pos,
            dec_blocks,
            dec_ln,
        })
    }

    /// Rebuilds the architecture for `cfg` and installs `params` by name.
    pub fn with_params(cfg: ModelConfig, vocab: Vocabulary, params: ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg, vocab, 0)?;
        if params.len() != m.params.len() {
            return Err(Error::invalid("model", "parameter count does not match the architecture"));
        }
        for (name, t) in params.iter() {
            m.params.set(name, t.clone())?;
        }
        Ok(m)
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    pub fn image_shape(&self) -> [usize; 4] {
        [1, self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size]
    }

    fn check_image(&self, g: &Graph, img: Var) -> Result<()> {
        let s = g.shape(img);
        let want = self.image_shape();
        if s.len() != 4 || s[1..] != want[1..] {
            return Err(Error::shape("image", s, &want));
        }
        Ok(())
    }

    /// `theta: [B, 2, 3]` for the stacked pair.
    pub fn predict_affine(&self, g: &mut Graph, p: &Bound, main: Var, reference: Var) -> Result<Var> {
        self.check_image(g, main)?;
        self.registration.forward(g, p, main, reference)
    }

    /// Last conv feature map `[B, C, h, w]`.
    pub fn image_features(&self, g: &mut Graph, p: &Bound, img: Var) -> Result<Var> {
        self.check_image(g, img)?;
        let mut x = img;
        for c in &self.encoder {
            x = c.forward(g, p, x)?;
        }
        Ok(x)
    }

    /// `[B, C, h, w] -> [B, h*w, C]` in row-major spatial order.
    pub fn tokens_from_features(&self, g: &mut Graph, feat: Var) -> Result<Var> {
        let s = g.shape(feat).to_vec();
        let flat = g.reshape(feat, &[s[0], s[1], s[2] * s[3]])?;
        g.transpose(flat, 1, 2)
    }

    /// `img: [B, 1, H, W] -> [B, N, C]`.
    pub fn encode_image(&self, g: &mut Graph, p: &Bound, img: Var) -> Result<Var> {
        let f = self.image_features(g, p, img)?;
        self.tokens_from_features(g, f)
    }

    /// `[B, n, C] -> [B, n, D]`: linear plus spatial position, one
    /// self-attention block, two-layer MLP, then layer norm plus a second
    /// spatial code. `n <= N`; the first `n` positions are used. Batch items
    /// never attend to each other.
    pub fn project(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 3 || s[2] != self.cfg.channels() || s[1] > self.cfg.tokens_per_image() {
            return Err(Error::shape("project", &s, &[0, 0, self.cfg.channels()]));
        }
        let (b, n, d) = (s[0], s[1], self.cfg.embed_dim);
        let x = self.proj_in.forward(g, p, tokens)?;
        let mut outs = Vec::with_capacity(b);
        for bi in 0..b {
            let xb = g.slice(x, 0, bi, 1)?;
            let xb = g.reshape(xb, &[n, d])?;
            let pos = g.slice(p.var(self.proj_pos), 0, 0, n)?;
            let xb = g.add(xb, pos)?;
            let h = self.proj_block.forward(g, p, xb, false)?;
            let z = self.proj_mlp.forward(g, p, h)?;
            let z = self.proj_ln.forward(g, p, z)?;
            let pos_out = g.slice(p.var(self.proj_pos_out), 0, 0, n)?;
            let z = g.add(z, pos_out)?;
            outs.push(z);
        }
        let cat = if b == 1 { outs[0] } else { g.concat(&outs, 0)? };
        g.reshape(cat, &[b, n, d])
    }

    fn encode_question(&self, g: &mut Graph, p: &Bound, ids: &[u32]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.cfg.max_question_len {
            return Err(Error::invalid("encode_text", "question length out of range"));
        }
        let idx = self.checked_ids(ids)?;
        let e = g.embedding(p.var(self.tok_emb), &idx)?;
        let pos = g.slice(p.var(self.text_pos), 0, 0, ids.len())?;
        let mut x = g.add(e, pos)?;
        for blk in &self.text_blocks {
            x = blk.forward(g, p, x, false)?;
        }
        self.text_ln.forward(g, p, x)
    }

    /// Questions of equal length `L` -> `[B, L, D]`.
    pub fn encode_text(&self, g: &mut Graph, p: &Bound, questions: &[Vec<u32>]) -> Result<Var> {
        let first = questions.first().ok_or(Error::Empty("questions"))?;
        if questions.iter().any(|q| q.len() != first.len()) {
            return Err(Error::invalid("encode_text", "questions in a batch must share a length"));
        }
        let outs = questions
            .iter()
            .map(|q| self.encode_question(g, p, q))
            .collect::<Result<Vec<_>>>()?;
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 0)? };
        g.reshape(cat, &[questions.len(), first.len(), self.cfg.embed_dim])
    }

    fn checked_ids(&self, ids: &[u32]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&t| {
                if (t as usize) < self.vocab.len() {
                    Ok(t as usize)
                } else {
                    Err(Error::TokenOutOfRange(t))
                }
            })
            .collect()
    }

    /// Encodes both images (already registered/masked) and the question of
    /// one sample. With `watch`, the feature maps track gradients for
    /// Grad-CAM.
    pub fn encode_pair(
        &self,
        g: &mut Graph,
        p: &Bound,
        main: Var,
        reference: Var,
        question: &[u32],
        watch: bool,
    ) -> Result<PairEncoding> {
        let mut feats = [main, reference];
        let mut zs = [main, reference];
        for (i, img) in [main, reference].into_iter().enumerate() {
            let mut f = self.image_features(g, p, img)?;
            if watch {
                f = g.watch(f);
            }
            let t = self.tokens_from_features(g, f)?;
            let z = self.project(g, p, t)?;
            let s = g.shape(z).to_vec();
            feats[i] = f;
            zs[i] = g.reshape(z, &[s[1], s[2]])?;
        }
        let z_q = self.encode_question(g, p, question)?;
        Ok(PairEncoding {
            feat_main: feats[0],
            feat_ref: feats[1],
            z_main: zs[0],
            z_ref: zs[1],
            z_q,
        })
    }

    /// Final hidden states `[T, D]` of the causal decoder over
    /// `<img> Z_main <img> Z_ref <qtn> Z_q <ans> answer..`; returns the
    /// index of `<ans>` as well.
    fn decoder_hidden(&self, g: &mut Graph, p: &Bound, enc: &PairEncoding, answer: &[u32]) -> Result<(Var, usize)> {
        let table = p.var(self.tok_emb);
        let img = g.embedding(table, &[IMG as usize])?;
        let qtn = g.embedding(table, &[QTN as usize])?;
        let mut ans_ids = alloc::vec![ANS as usize];
        ans_ids.extend(self.checked_ids(answer)?);
        let ans = g.embedding(table, &ans_ids)?;
        let x = g.concat(&[img, enc.z_main, img, enc.z_ref, qtn, enc.z_q, ans], 0)?;
        let t = g.shape(x)[0];
        if t > self.cfg.max_sequence_len() {
            return Err(Error::invalid("decode", "sequence exceeds the positional table"));
        }
        let ans_marker = t - ans_ids.len();
        let pos = g.slice(p.var(self.dec_pos), 0, 0, t)?;
        let mut h = g.add(x, pos)?;
        for blk in &self.dec_blocks {
            h = blk.forward(g, p, h, true)?;
        }
        Ok((self.dec_ln.forward(g, p, h)?, ans_marker))
    }

    fn logits(&self, g: &mut Graph, p: &Bound, hidden: Var) -> Result<Var> {
        let et = g.t(p.var(self.tok_emb))?;
        g.matmul(hidden, et)
    }

    /// Teacher-forced logits `[A+1, V]` (row `i` predicts answer token `i`,
    /// the last row predicts `<eos>`) and the answer-only cross entropy.
    pub fn decode_teacher_forced(
        &self,
        g: &mut Graph,
        p: &Bound,
        enc: &PairEncoding,
        answer: &[u32],
    ) -> Result<(Var, Var)> {
        if answer.len() > self.cfg.max_answer_len {
            return Err(Error::invalid("decode", "answer longer than max_answer_len"));
        }
        let (hidden, ans_marker) = self.decoder_hidden(g, p, enc, answer)?;
        let rows = answer.len() + 1;
        let h = g.slice(hidden, 0, ans_marker, rows)?;
        let logits = self.logits(g, p, h)?;
        let mut targets: Vec<usize> = answer.iter().map(|&t| t as usize).collect();
        targets.push(EOS as usize);
        let l_lm = g.cross_entropy(logits, &targets, &alloc::vec![true; rows])?;
        Ok((logits, l_lm))
    }

    /// Layout of the decoder input for one sample.
    pub fn layout(&self, question_len: usize, answer: &[u32]) -> Result<SequenceLayout> {
        SequenceLayout::new(self.cfg.tokens_per_image(), question_len, answer, None)
    }

    /// Greedy decoding from `<ans>` until `<eos>` or `max_len` tokens.
    /// `<pad>`, `<img>`, `<qtn>` and `<ans>` are never emitted.
    pub fn generate(&self, g: &mut Graph, p: &Bound, enc: &PairEncoding, max_len: usize) -> Result<Vec<u32>> {
        let max_len = max_len.min(self.cfg.max_answer_len);
        let mut out: Vec<u32> = Vec::new();
        while out.len() < max_len {
            let (hidden, _) = self.decoder_hidden(g, p, enc, &out)?;
            let t = g.shape(hidden)[0];
            let last = g.slice(hidden, 0, t - 1, 1)?;
            let logits = self.logits(g, p, last)?;
            let row = g.value(logits).data();
            let mut best = EOS as usize;
            for (i, &v) in row.iter().enumerate().skip(EOS as usize) {
                if v > row[best] {
                    best = i;
                }
            }
            if best == EOS as usize {
                break;
            }
            out.push(best as u32);
        }
        Ok(out)
    }
}

impl CamModel for DiffVqaModel {
    fn image_size(&self) -> (usize, usize) {
        (self.cfg.image_size, self.cfg.image_size)
    }

    /// Score = sum over keyword positions of the teacher-forced
    /// log-probability of the keyword token.
    fn cam_forward(
        &self,
        g: &mut Graph,
        main: &Tensor,
        reference: &Tensor,
        question: &[u32],
        target: &CamTarget,
    ) -> Result<CamForward> {
        let p = self.bind(g, false);
        let m = g.constant(main.clone());
        let r = g.constant(reference.clone());
        let enc = self.encode_pair(g, &p, m, r, question, true)?;
        let answer = target.answer_ids();
        let (hidden, ans_marker) = self.decoder_hidden(g, &p, &enc, answer)?;
        let rows = answer.len() + 1;
        let h = g.slice(hidden, 0, ans_marker, rows)?;
        let logits = self.logits(g, &p, h)?;
        let mut targets: Vec<usize> = answer.iter().map(|&t| t as usize).collect();
        targets.push(EOS as usize);
        let mut mask = alloc::vec![false; rows];
        for &pos in target.positions() {
            mask[pos] = true;
        }
        let nll = g.cross_entropy(logits, &targets, &mask)?;
        let score = g.scale(nll, -(target.positions().len() as f64))?;
        Ok(CamForward {
            score,
            feat_main: enc.feat_main,
            feat_ref: enc.feat_ref,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::gradcheck::{grad_check, grad_check_coords};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            in_channels: 1,
            reg_channels: alloc::vec![2],
            enc_channels: alloc::vec![4, 4, 8],
            embed_dim: 8,
            projector_heads: 2,
            text_layers: 1,
            text_heads: 2,
            decoder_layers: 1,
            decoder_heads: 2,
            ffn_mult: 2,
            max_question_len: 6,
            max_answer_len: 6,
        }
    }

    fn image(seed: u64, size: usize) -> Tensor {
        let mut r = rng::stream(seed, 0);
        Tensor::from_fn(&[1, 1, size, size], |_| r.random::<f64>())
    }

    #[test]
    fn toy_model_is_desk_scale() {
        let m = DiffVqaModel::new(ModelConfig::toy(), Vocabulary::synthetic(), 0).unwrap();
        assert!(m.params.num_scalars() < 5_000_000, "{}", m.params.num_scalars());
    }

    #[test]
    fn encode_image_token_count_and_determinism() {
        let m = DiffVqaModel::new(ModelConfig::toy(), Vocabulary::synthetic(), 0).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let img = image(1, 64);
        let a = g.constant(img.clone());
        let b = g.constant(img);
        let ta = m.encode_image(&mut g, &p, a).unwrap();
        let tb = m.encode_image(&mut g, &p, b).unwrap();
        assert_eq!(g.shape(ta), &[1, 16, 128]);
        assert_eq!(g.value(ta), g.value(tb));
    }

    #[test]
    fn project_keeps_batch_items_separate() {
        let m = DiffVqaModel::new(tiny_cfg(), Vocabulary::synthetic(), 3).unwrap();
        let mut r = rng::stream(5, 0);
        let x = Tensor::from_fn(&[2, 4, 8], |_| r.random::<f64>() - 0.5);
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = m.project(&mut g, &p, xv).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 8]);
        // swap the two batch items
        let d = x.data();
        let swapped = Tensor::new(&[2, 4, 8], [&d[32..], &d[..32]].concat()).unwrap();
        let sv = g.constant(swapped);
        let ys = m.project(&mut g, &p, sv).unwrap();
        let (a, b) = (g.value(y).data(), g.value(ys).data());
        assert_eq!(&a[..32], &b[32..]);
        assert_eq!(&a[32..], &b[..32]);
    }

    #[test]
    fn text_encoding_mixes_positions() {
        let m = DiffVqaModel::new(tiny_cfg(), Vocabulary::synthetic(), 3).unwrap();
        let v = &m.vocab;
        let q1 = v.encode("what has changed ?").unwrap();
        let mut q2 = q1.clone();
        q2[0] = v.id("how").unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let e1 = m.encode_text(&mut g, &p, &[q1.clone()]).unwrap();
        let e1b = m.encode_text(&mut g, &p, &[q1]).unwrap();
        let e2 = m.encode_text(&mut g, &p, &[q2]).unwrap();
        assert_eq!(g.shape(e1), &[1, 4, 8]);
        assert_eq!(g.value(e1), g.value(e1b));
        let (a, b) = (g.value(e1).data(), g.value(e2).data());
        let changed_rows = a.chunks(8).zip(b.chunks(8)).filter(|(x, y)| x != y).count();
        assert_eq!(changed_rows, 4);
    }

    #[test]
    fn decoder_is_causal() {
        let m = DiffVqaModel::new(tiny_cfg(), Vocabulary::synthetic(), 3).unwrap();
        let v = &m.vocab;
        let q = v.encode("what has changed ?").unwrap();
        let a1 = v.encode("the nodule has enlarged").unwrap();
        let mut a2 = a1.clone();
        a2[3] = v.id("shrunk").unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let mi = g.constant(image(1, 32));
        let ri = g.constant(image(2, 32));
        let enc = m.encode_pair(&mut g, &p, mi, ri, &q, false).unwrap();
        let (l1, _) = m.decode_teacher_forced(&mut g, &p, &enc, &a1).unwrap();
        let (l2, _) = m.decode_teacher_forced(&mut g, &p, &enc, &a2).unwrap();
        let vsz = m.vocab.len();
        let (x, y) = (g.value(l1).data(), g.value(l2).data());
        // rows 0..=3 only see answer tokens < 3
        assert_eq!(&x[..4 * vsz], &y[..4 * vsz]);
        assert_ne!(&x[4 * vsz..], &y[4 * vsz..]);
    }

    #[test]
    fn uniform_logits_loss_is_log_vocab() {
        let mut m = DiffVqaModel::new(tiny_cfg(), Vocabulary::synthetic(), 3).unwrap();
        let id = m.token_embedding();
        let shape = m.params.get(id).shape().to_vec();
        *m.params.get_mut(id) = Tensor::zeros(&shape);
        let q = m.vocab.encode("what has changed ?").unwrap();
        let a = m.vocab.encode("no change is observed").unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let mi = g.constant(image(1, 32));
        let ri = g.constant(image(2, 32));
        let enc = m.encode_pair(&mut g, &p, mi, ri, &q, false).unwrap();
        let (_, l) = m.decode_teacher_forced(&mut g, &p, &enc, &a).unwrap();
        assert!((g.value(l).item() - libm::log(m.vocab.len() as f64)).abs() < 1e-12);
    }

    #[test]
    fn generate_is_deterministic_and_skips_specials() {
        let m = DiffVqaModel::new(tiny_cfg(), Vocabulary::synthetic(), 9).unwrap();
        let q = m.vocab.encode("what has changed ?").unwrap();
        let run = || {
            let mut g = Graph::new();
            let p = m.bind(&mut g, false);
            let mi = g.constant(image(1, 32));
            let ri = g.constant(image(2, 32));
            let enc = m.encode_pair(&mut g, &p, mi, ri, &q, false).unwrap();
            m.generate(&mut g, &p, &enc, 6).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|&t| t > EOS));
    }

    #[test]
    fn embedding_table_is_shared() {
        let m = DiffVqaModel::new(tiny_cfg(), Vocabulary::synthetic(), 3).unwrap();
        let q = m.vocab.encode("what has changed ?").unwrap();
        let a = m.vocab.encode("no change is observed").unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, true);
        let mi = g.constant(image(1, 32));
        let ri = g.constant(image(2, 32));
        let enc = m.encode_pair(&mut g, &p, mi, ri, &q, false).unwrap();
        let text_only = g.sum(enc.z_q).unwrap();
        g.backward(text_only).unwrap();
        let from_text = g.grad(p.var(m.token_embedding())).unwrap().to_vec();
        assert!(from_text.iter().any(|&v| v != 0.0));
        g.zero_grad();
        let (_, l) = m.decode_teacher_forced(&mut g, &p, &enc, &a).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(p.var(m.token_embedding())).is_some());
        assert_eq!(m.params.names().iter().filter(|n| n.contains("emb")).count(), 1);
    }

    #[test]
    fn encode_image_gradcheck() {
        let mut cfg = tiny_cfg();
        cfg.enc_channels = alloc::vec![2, 3];
        let m = DiffVqaModel::new(cfg, Vocabulary::synthetic(), 4).unwrap();
        let img = image(7, 32);
        let err = grad_check_coords(
            |g, x| {
                let p = m.bind(g, false);
                let t = m.encode_image(g, &p, x)?;
                let sq = g.mul(t, t)?;
                g.sum(sq)
            },
            &img,
            1e-5,
            &[0, 33, 100, 517, 800, 1023],
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn lm_loss_gradcheck_wrt_projector_weight() {
        let m = DiffVqaModel::new(tiny_cfg(), Vocabulary::synthetic(), 11).unwrap();
        let id = m.params.find("proj.in.w").unwrap();
        let w0 = m.params.get(id).clone();
        let q = m.vocab.encode("what has changed ?").unwrap();
        let a = m.vocab.encode("the nodule has enlarged").unwrap();
        let (mi, ri) = (image(1, 32), image(2, 32));
        let coords: Vec<usize> = (0..w0.numel()).step_by(5).collect();
        let err = grad_check_coords(
            |g, w| {
                let p = m.bind(g, false).with_var(id, w);
                let mv = g.constant(mi.clone());
                let rv = g.constant(ri.clone());
                let enc = m.encode_pair(g, &p, mv, rv, &q, false)?;
                Ok(m.decode_teacher_forced(g, &p, &enc, &a)?.1)
            },
            &w0,
            1e-5,
            &coords,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn project_gradcheck() {
        let m = DiffVqaModel::new(tiny_cfg(), Vocabulary::synthetic(), 3).unwrap();
        let mut r = rng::stream(8, 0);
        let x = Tensor::from_fn(&[1, 4, 8], |_| 2.0 * r.random::<f64>() - 1.0);
        let w = Tensor::from_fn(&[1, 4, 8], |_| r.random::<f64>() - 0.5);
        let err = grad_check(
            |g, xv| {
                let p = m.bind(g, false);
                let y = m.project(g, &p, xv)?;
                let wv = g.constant(w.clone());
                let yw = g.mul(y, wv)?;
                g.sum(yw)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }
}
