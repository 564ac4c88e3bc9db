//! Training schedule, validation-driven checkpoint selection and
//! evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use diffvqa_core::keyword::KeywordLexicon;
use diffvqa_core::metrics::{EvalPair, ScoreReport};
use diffvqa_core::model::{DiffVqaModel, Vocabulary};
use diffvqa_core::rng::{self, streams};
use diffvqa_core::saliency::SaliencyMap;
use diffvqa_core::synth::Change;
use diffvqa_core::text::words;
use diffvqa_core::train::{infer_two_pass, register, saliency_for, GradCam, MaskSource, Sample, Trainer};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::dataset::{read_split, Record};
use crate::error::{Error, Result};

pub const BEST_CHECKPOINT: &str = "best.dvqk";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Masked,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub phase: Phase,
    pub steps: usize,
    pub mean_l_reg: f64,
    pub mean_l_lm: f64,
    pub mean_total: f64,
    /// Grad-CAM invocations made by training steps this epoch.
    pub gradcam_calls: usize,
    /// Samples trained unmasked in a masked epoch because no keyword target
    /// was found.
    pub fallback: usize,
    pub val: Option<ScoreReport>,
    pub val_keyword_acc: Option<f64>,
    pub val_change_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Parameters after the last epoch.
    pub last: DiffVqaModel,
}

/// Where `train` writes its artifacts.
pub fn artifact_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(BEST_CHECKPOINT), dir.join(TRAIN_LOG))
}

fn limit<T>(mut v: Vec<T>, n: usize) -> Vec<T> {
    if n > 0 {
        v.truncate(n);
    }
    v
}

/// Loads the dataset named by `cfg` and trains on it.
pub fn run_training(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let vocab = Vocabulary::synthetic();
    let train = limit(read_split(&cfg.dataset_root, "train")?, cfg.train_limit);
    let valid = limit(read_split(&cfg.dataset_root, "valid")?, cfg.valid_limit);
    let samples = train.iter().map(|r| r.to_sample(&vocab)).collect::<Result<Vec<_>>>()?;
    train_on(cfg, vocab, &samples, &valid)
}

/// Warm-up epochs, then masked epochs; validation with two-pass inference
/// after every `eval_every`-th and the final epoch; the best checkpoint by
/// combined score (first one on ties) is saved to `checkpoint_dir`, the log
/// is appended line by line.
pub fn train_on(cfg: &TrainConfig, vocab: Vocabulary, train: &[Sample], valid: &[Record]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Dataset("training and validation splits must be non-empty".into()));
    }
    let (ckpt_path, log_path) = artifact_paths(&cfg.checkpoint_dir);
    fs::create_dir_all(&cfg.checkpoint_dir).map_err(Error::io(&cfg.checkpoint_dir))?;
    let mut log_file = fs::File::create(&log_path).map_err(Error::io(&log_path))?;

    let model = DiffVqaModel::new(cfg.model.clone(), vocab, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.adam, cfg.reg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::new();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let phase = if epoch <= cfg.warmup_epochs { Phase::Warmup } else { Phase::Masked };
        order.shuffle(&mut rng::stream(cfg.seed, streams::SHUFFLE + epoch as u64));
        let mut cam = GradCam::default();
        let (mut l_reg, mut l_lm, mut total, mut fallback, mut steps) = (0.0, 0.0, 0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let s = match phase {
                Phase::Warmup => trainer.step_warmup(&batch)?,
                Phase::Masked => trainer.step_masked(&batch, &mut cam)?,
            };
            let n = batch.len() as f64;
            l_reg += s.l_reg * n;
            l_lm += s.l_lm * n;
            total += s.total * n;
            fallback += s.fallback;
            steps += 1;
        }
        if fallback > 0 {
            log::info!("epoch {epoch}: {fallback} samples trained unmasked (no keyword target)");
        }
        let n = train.len() as f64;
        let mut entry = EpochLog {
            epoch,
            phase,
            steps,
            mean_l_reg: l_reg / n,
            mean_l_lm: l_lm / n,
            mean_total: total / n,
            gradcam_calls: cam.calls,
            fallback,
            val: None,
            val_keyword_acc: None,
            val_change_acc: None,
        };
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let ev = evaluate(&trainer.model, valid, &mut GradCam::default())?;
            let score = ev.two_pass.combined;
            if best.as_ref().is_none_or(|b| score > b.score) {
                let ck = Checkpoint::new(&trainer.model, &trainer.opt, epoch, score);
                ck.save(&ckpt_path)?;
                best = Some(ck);
            }
            entry.val = Some(ev.two_pass);
            entry.val_keyword_acc = Some(ev.keyword_acc);
            entry.val_change_acc = Some(ev.change_acc);
        }
        let line = serde_json::to_string(&entry).map_err(|e| Error::Dataset(e.to_string()))?;
        writeln!(log_file, "{line}").map_err(Error::io(&log_path))?;
        log::info!(
            "epoch {epoch} ({phase:?}) l_reg {:.3e} l_lm {:.4} val combined {} in {:.1}s",
            entry.mean_l_reg,
            entry.mean_l_lm,
            entry.val.map_or("-".into(), |v| format!("{:.4}", v.combined)),
            started.elapsed().as_secs_f64()
        );
        log.push(entry);
    }
    Ok(TrainOutcome {
        best: best.expect("the final epoch is always evaluated"),
        log,
        last: trainer.model,
    })
}

/// Parses a training log back.
pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Dataset(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub preliminary: String,
    pub answer: String,
    pub reference: String,
    pub keyword: Option<String>,
    pub masked: bool,
}

/// Two-pass evaluation, with the preliminary (single-pass) answers scored
/// alongside.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub two_pass: ScoreReport,
    pub single_pass: ScoreReport,
    /// Fraction of answers containing the ground-truth keyword.
    pub keyword_acc: f64,
    pub single_keyword_acc: f64,
    /// Fraction whose template-parsed change type is correct.
    pub change_acc: f64,
    pub single_change_acc: f64,
    pub predictions: Vec<Prediction>,
}

fn keyword_hit(answer: &str, keyword: &str) -> bool {
    let toks = words(answer);
    let kw = words(keyword);
    !kw.is_empty() && toks.windows(kw.len()).any(|w| w == kw.as_slice())
}

pub fn evaluate(model: &DiffVqaModel, records: &[Record], masks: &mut dyn MaskSource) -> Result<EvalOutcome> {
    if records.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let lex = KeywordLexicon::synthetic();
    let mut predictions = Vec::with_capacity(records.len());
    for r in records {
        let q = model.vocab.encode(&r.ann.question)?;
        let out = infer_two_pass(model, masks, &lex, &r.main, &r.reference, &q)?;
        if out.mask.is_none() {
            log::debug!("sample {}: keyword not in the preliminary answer, masking skipped", r.ann.id);
        }
        predictions.push(Prediction {
            id: r.ann.id.clone(),
            preliminary: model.vocab.decode(&out.preliminary.answer)?,
            answer: model.vocab.decode(&out.answer)?,
            reference: r.ann.answer.clone(),
            keyword: out.keyword,
            masked: out.mask.is_some(),
        });
    }
    let n = records.len() as f64;
    let rate = |f: &dyn Fn(&Prediction, &Record) -> bool| {
        predictions.iter().zip(records).filter(|(p, r)| f(p, r)).count() as f64 / n
    };
    let keyword_acc = rate(&|p, r| keyword_hit(&p.answer, &r.ann.keyword));
    let single_keyword_acc = rate(&|p, r| keyword_hit(&p.preliminary, &r.ann.keyword));
    let change_acc = rate(&|p, r| Change::from_answer(&p.answer) == Some(r.change));
    let single_change_acc = rate(&|p, r| Change::from_answer(&p.preliminary) == Some(r.change));
    let score = |pick: &dyn Fn(&Prediction) -> &str| -> Result<ScoreReport> {
        let pairs: Vec<EvalPair> = predictions
            .iter()
            .map(|p| EvalPair::new(pick(p), &[p.reference.as_str()]))
            .collect();
        Ok(ScoreReport::compute(&pairs)?)
    };
    Ok(EvalOutcome {
        two_pass: score(&|p| &p.answer)?,
        single_pass: score(&|p| &p.preliminary)?,
        keyword_acc,
        single_keyword_acc,
        change_acc,
        single_change_acc,
        predictions,
    })
}

/// Saliency localization against ground-truth lesion masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    /// Samples with a change (the others have empty masks).
    pub samples: usize,
    /// Mean IoU of the shared map thresholded at 0.5.
    pub mean_iou: f64,
    /// Fraction whose map argmax lies inside the mask's bounding box.
    pub argmax_in_bbox: f64,
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Shared mask conditioned on the ground-truth answer's keyword, computed
/// on the registered main image and the reference.
pub fn saliency_of(model: &DiffVqaModel, r: &Record) -> Result<Option<SaliencyMap>> {
    let lex = KeywordLexicon::synthetic();
    let (_, warped) = register(model, &r.main, &r.reference)?;
    let q = model.vocab.encode(&r.ann.question)?;
    let a = model.vocab.encode(&r.ann.answer)?;
    Ok(saliency_for(
        model,
        &mut GradCam::default(),
        &lex,
        &warped,
        &r.reference,
        &q,
        &r.ann.answer,
        &a,
    )?)
}

/// Samples without a keyword target count as misses.
pub fn localization(model: &DiffVqaModel, records: &[Record]) -> Result<Localization> {
    let (mut n, mut iou_sum, mut hits) = (0usize, 0.0, 0usize);
    for r in records.iter().filter(|r| r.change != Change::Unchanged) {
        n += 1;
        let (Some(s), Some((x0, y0, x1, y1))) = (saliency_of(model, r)?, r.bbox()) else {
            continue;
        };
        iou_sum += iou(&s.threshold(0.5), &r.mask);
        let i = s.argmax();
        let (x, y) = (i % s.width(), i / s.width());
        if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(Error::Dataset("no changed samples to localize".into()));
    }
    Ok(Localization {
        samples: n,
        mean_iou: iou_sum / n as f64,
        argmax_in_bbox: hits as f64 / n as f64,
    })
}
