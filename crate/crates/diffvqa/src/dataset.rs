//! On-disk synthetic corpus: PGM images and masks, one JSONL annotation
//! file per split, and a manifest.
//!
//! ```text
//! root/manifest.json
//! root/{train,valid,test}.jsonl
//! root/{train,valid,test}/images/<id>_main.pgm, <id>_ref.pgm
//! root/{train,valid,test}/masks/<id>.pgm
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use diffvqa_core::model::Vocabulary;
use diffvqa_core::registration::AffineParams;
use diffvqa_core::synth::{generate_pair, sample_seed, split_sizes, Change, StudyPair, SynthConfig};
use diffvqa_core::tensor::Tensor;
use diffvqa_core::train::Sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pgm::Gray;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// One JSONL line. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub main_path: String,
    pub ref_path: String,
    pub question: String,
    pub answer: String,
    pub keyword: String,
    pub change: String,
    /// Row-major `[a11, a12, tx, a21, a22, ty]`, normalized coordinates.
    pub theta_star: [f64; 6],
    pub mask_path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub root: String,
    pub seed: u64,
    /// SHA-256 (hex) of the generator settings.
    pub config_hash: String,
    pub image_size: usize,
    pub split_ratios: [f64; 3],
    pub splits: Vec<SplitInfo>,
}

impl Manifest {
    pub fn count(&self, split: &str) -> Option<usize> {
        self.splits.iter().find(|s| s.name == split).map(|s| s.count)
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
    }
}

/// Settings of `gen-data`.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub count: usize,
    pub seed: u64,
    pub split_ratios: [f64; 3],
    pub synth: SynthConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 2500,
            seed: 0,
            split_ratios: [0.8, 0.1, 0.1],
            synth: SynthConfig::default(),
        }
    }
}

impl GenConfig {
    pub fn hash(&self) -> String {
        let s = &self.synth;
        let text = format!(
            "count={};ratios={:?};size={};distractors={};translation={:?};rotation={:?};scale={:?}",
            self.count,
            self.split_ratios,
            s.image_size,
            s.max_distractors,
            s.max_translation_px,
            s.max_rotation_deg,
            s.scale_range
        );
        hex(&Sha256::digest(text.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(Error::io(p))
}

/// Generates and writes the whole corpus. Sample `i` (counted across
/// splits, train first) is drawn from `sample_seed(seed, i)`.
pub fn write_dataset(root: &Path, cfg: &GenConfig) -> Result<Manifest> {
    cfg.synth.validate()?;
    let sizes = split_sizes(cfg.count, cfg.split_ratios)?;
    let mut index = 0u64;
    let mut splits = Vec::new();
    for (name, &n) in SPLITS.iter().zip(&sizes) {
        create_dir(&root.join(name).join("images"))?;
        create_dir(&root.join(name).join("masks"))?;
        let jsonl = root.join(format!("{name}.jsonl"));
        let mut out = Vec::new();
        for _ in 0..n {
            let pair = generate_pair(sample_seed(cfg.seed, index), &cfg.synth)?;
            let ann = write_pair(root, name, &format!("{index:06}"), &pair)?;
            serde_json::to_writer(&mut out, &ann).expect("annotation serializes");
            out.push(b'\n');
            index += 1;
        }
        fs::write(&jsonl, out).map_err(Error::io(&jsonl))?;
        splits.push(SplitInfo {
            name: name.to_string(),
            count: n,
        });
    }
    let manifest = Manifest {
        root: root.display().to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        image_size: cfg.synth.image_size,
        split_ratios: cfg.split_ratios,
        splits,
    };
    let path = root.join("manifest.json");
    let mut f = fs::File::create(&path).map_err(Error::io(&path))?;
    serde_json::to_writer_pretty(&mut f, &manifest).expect("manifest serializes");
    f.write_all(b"\n").map_err(Error::io(&path))?;
    Ok(manifest)
}

fn write_pair(root: &Path, split: &str, id: &str, p: &StudyPair) -> Result<Annotation> {
    let n = p.size();
    let ann = Annotation {
        id: id.to_string(),
        main_path: format!("{split}/images/{id}_main.pgm"),
        ref_path: format!("{split}/images/{id}_ref.pgm"),
        question: p.question.clone(),
        answer: p.answer.clone(),
        keyword: p.keyword.clone(),
        change: p.change.name().to_string(),
        theta_star: p.theta_star.to_row_major(),
        mask_path: format!("{split}/masks/{id}.pgm"),
    };
    Gray::from_tensor(&p.main)?.write(&root.join(&ann.main_path))?;
    Gray::from_tensor(&p.reference)?.write(&root.join(&ann.ref_path))?;
    Gray::from_mask(n, n, &p.gt_mask).write(&root.join(&ann.mask_path))?;
    Ok(ann)
}

/// A sample loaded back from disk; images carry the 1/255 quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub ann: Annotation,
    pub main: Tensor,
    pub reference: Tensor,
    pub mask: Vec<bool>,
    pub change: Change,
    pub theta_star: AffineParams,
}

impl Record {
    pub fn size(&self) -> usize {
        self.reference.shape()[3]
    }

    pub fn to_sample(&self, vocab: &Vocabulary) -> Result<Sample> {
        Ok(Sample {
            main: self.main.clone(),
            reference: self.reference.clone(),
            question: vocab.encode(&self.ann.question)?,
            answer: vocab.encode(&self.ann.answer)?,
            answer_text: self.ann.answer.clone(),
        })
    }

    /// Inclusive `(x0, y0, x1, y1)` of the ground-truth mask.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let n = self.size();
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for i in (0..self.mask.len()).filter(|&i| self.mask[i]) {
            let (x, y) = (i % n, i / n);
            bb = Some(match bb {
                None => (x, y, x, y),
                Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
            });
        }
        bb
    }
}

/// Parses one split's JSONL without touching the images.
pub fn read_annotations(root: &Path, split: &str) -> Result<Vec<Annotation>> {
    let path = root.join(format!("{split}.jsonl"));
    let f = fs::File::open(&path).map_err(Error::io(&path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(Error::io(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: Annotation = serde_json::from_str(&line).map_err(|e| Error::Annotation {
            path: path.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(ann);
    }
    Ok(out)
}

/// Loads a split, checking the line count against the manifest.
pub fn read_split(root: &Path, split: &str) -> Result<Vec<Record>> {
    let manifest = Manifest::read(root)?;
    let expected = manifest
        .count(split)
        .ok_or_else(|| Error::Dataset(format!("manifest has no split `{split}`")))?;
    let anns = read_annotations(root, split)?;
    if anns.len() != expected {
        return Err(Error::Dataset(format!(
            "{split}.jsonl has {} samples, manifest says {expected}",
            anns.len()
        )));
    }
    anns.into_iter().map(|a| load_record(root, a)).collect()
}

fn load_record(root: &Path, ann: Annotation) -> Result<Record> {
    let main = Gray::read(&root.join(&ann.main_path))?.to_tensor();
    let reference = Gray::read(&root.join(&ann.ref_path))?.to_tensor();
    let mask_img = Gray::read(&root.join(&ann.mask_path))?;
    if main.shape() != reference.shape() || mask_img.width * mask_img.height != reference.numel() {
        return Err(Error::Dataset(format!("sample {}: image sizes differ", ann.id)));
    }
    let change = Change::parse(&ann.change).ok_or_else(|| Error::Dataset(format!("sample {}: unknown change `{}`", ann.id, ann.change)))?;
    let theta_star = AffineParams::from_row_major(&ann.theta_star)?;
    Ok(Record {
        mask: mask_img.to_mask(),
        main,
        reference,
        change,
        theta_star,
        ann,
    })
}

/// Every file below `root`, relative and sorted, with its SHA-256.
pub fn tree_digest(root: &Path) -> Result<Vec<(PathBuf, String)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(Error::io(&dir))? {
            let p = entry.map_err(Error::io(&dir))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).map_err(Error::io(&p))?;
                let rel = p.strip_prefix(root).expect("below root").to_path_buf();
                out.push((rel, hex(&Sha256::digest(&bytes))));
            }
        }
    }
    out.sort();
    Ok(out)
}
