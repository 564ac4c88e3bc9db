//! Training configuration and its `key = value` file format.

use std::path::{Path, PathBuf};

use diffvqa_core::model::ModelConfig;
use diffvqa_core::optim::AdamConfig;
use diffvqa_core::registration::RegLossWeights;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub reg: RegLossWeights,
    pub model: ModelConfig,
    pub dataset_root: PathBuf,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Validate after every `eval_every`-th epoch and after the last one.
    pub eval_every: usize,
    /// Use at most this many training samples (0 = all).
    pub train_limit: usize,
    /// Use at most this many validation samples (0 = all).
    pub valid_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            warmup_epochs: 1,
            batch_size: 8,
            adam: AdamConfig::default(),
            reg: RegLossWeights::default(),
            model: ModelConfig::toy(),
            dataset_root: PathBuf::from("data"),
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            eval_every: 1,
            train_limit: 0,
            valid_limit: 0,
        }
    }
}

/// Every accepted key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("epochs", "total number of epochs"),
    ("warmup_epochs", "leading epochs trained without saliency masking"),
    ("batch_size", "samples per optimizer update"),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("eps", "Adam denominator epsilon"),
    ("reg_w_small", "weight of ||theta - I||^2"),
    ("reg_w_det", "weight of (det A - 1)^2"),
    ("reg_w_trans", "weight of ||t||^2"),
    ("image_size", "square image side in pixels"),
    ("in_channels", "image channels"),
    ("reg_channels", "comma-separated widths of the registration CNN blocks"),
    ("enc_channels", "comma-separated widths of the image encoder blocks"),
    ("embed_dim", "shared embedding width"),
    ("projector_heads", "attention heads of the projector"),
    ("text_layers", "question encoder layers"),
    ("text_heads", "question encoder heads"),
    ("decoder_layers", "decoder layers"),
    ("decoder_heads", "decoder heads"),
    ("ffn_mult", "MLP hidden width as a multiple of embed_dim"),
    ("max_question_len", "question length cap in tokens"),
    ("max_answer_len", "answer length cap in tokens"),
    ("dataset_root", "directory written by gen-data"),
    ("seed", "seed for initialization and shuffling"),
    ("checkpoint_dir", "where checkpoints and the training log go"),
    ("eval_every", "validate every n epochs"),
    ("train_limit", "cap on training samples, 0 for all"),
    ("valid_limit", "cap on validation samples, 0 for all"),
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::Config {
                line: 0,
                reason: reason.to_string(),
            })
        };
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("epochs, batch_size and eval_every must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be smaller than epochs");
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return bad("optimizer settings out of range");
        }
        self.reg.validate()?;
        self.model.validate()?;
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown or
    /// repeated keys are errors. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |reason: String| Error::Config { line, reason };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(err)?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("`{v}` is not a valid value for `{key}`"))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>, String> {
            v.split(',').map(|s| num(key, s.trim())).collect()
        }
        let m = &mut self.model;
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.adam.lr = num(key, value)?,
            "beta1" => self.adam.beta1 = num(key, value)?,
            "beta2" => self.adam.beta2 = num(key, value)?,
            "eps" => self.adam.eps = num(key, value)?,
            "reg_w_small" => self.reg.w_small = num(key, value)?,
            "reg_w_det" => self.reg.w_det = num(key, value)?,
            "reg_w_trans" => self.reg.w_trans = num(key, value)?,
            "image_size" => m.image_size = num(key, value)?,
            "in_channels" => m.in_channels = num(key, value)?,
            "reg_channels" => m.reg_channels = list(key, value)?,
            "enc_channels" => m.enc_channels = list(key, value)?,
            "embed_dim" => m.embed_dim = num(key, value)?,
            "projector_heads" => m.projector_heads = num(key, value)?,
            "text_layers" => m.text_layers = num(key, value)?,
            "text_heads" => m.text_heads = num(key, value)?,
            "decoder_layers" => m.decoder_layers = num(key, value)?,
            "decoder_heads" => m.decoder_heads = num(key, value)?,
            "ffn_mult" => m.ffn_mult = num(key, value)?,
            "max_question_len" => m.max_question_len = num(key, value)?,
            "max_answer_len" => m.max_answer_len = num(key, value)?,
            "dataset_root" => self.dataset_root = PathBuf::from(value),
            "seed" => self.seed = num(key, value)?,
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(value),
            "eval_every" => self.eval_every = num(key, value)?,
            "train_limit" => self.train_limit = num(key, value)?,
            "valid_limit" => self.valid_limit = num(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Renders every key; `parse(render())` reproduces `self`.
    pub fn render(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let m = &self.model;
        let values: Vec<String> = vec![
            self.epochs.to_string(),
            self.warmup_epochs.to_string(),
            self.batch_size.to_string(),
            format!("{:?}", self.adam.lr),
            format!("{:?}", self.adam.beta1),
            format!("{:?}", self.adam.beta2),
            format!("{:?}", self.adam.eps),
            format!("{:?}", self.reg.w_small),
            format!("{:?}", self.reg.w_det),
            format!("{:?}", self.reg.w_trans),
            m.image_size.to_string(),
            m.in_channels.to_string(),
            join(&m.reg_channels),
            join(&m.enc_channels),
            m.embed_dim.to_string(),
            m.projector_heads.to_string(),
            m.text_layers.to_string(),
            m.text_heads.to_string(),
            m.decoder_layers.to_string(),
            m.decoder_heads.to_string(),
            m.ffn_mult.to_string(),
            m.max_question_len.to_string(),
            m.max_answer_len.to_string(),
            self.dataset_root.display().to_string(),
            self.seed.to_string(),
            self.checkpoint_dir.display().to_string(),
            self.eval_every.to_string(),
            self.train_limit.to_string(),
            self.valid_limit.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|((k, doc), v)| format!("# {doc}\n{k} = {v}\n"))
            .collect()
    }
}
