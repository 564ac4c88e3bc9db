//! Binary checkpoint format.
//!
//! ```text
//! "DVQK" | version: u32 LE | header_len: u64 LE | header (UTF-8 JSON) | payload
//! ```
//!
//! The header carries the model config, vocabulary, epoch, score, optimizer
//! scalars, a SHA-256 of the payload and a tensor directory. The payload is
//! every tensor as little-endian f64 in directory order: parameters, then
//! the optimizer's first and second moments.

use std::fs;
use std::path::Path;

use diffvqa_core::model::{DiffVqaModel, ModelConfig, Vocabulary};
use diffvqa_core::nn::ParamStore;
use diffvqa_core::optim::{Adam, AdamConfig};
use diffvqa_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::hex;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DVQK";
pub const VERSION: u32 = 1;
const DTYPE_F64: &str = "f64le";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub adam: Adam,
    pub epoch: usize,
    /// Combined validation score of this epoch.
    pub score: f64,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerState {
    config: AdamConfig,
    step: u64,
    moments: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab: Vec<String>,
    epoch: usize,
    score: f64,
    optimizer: OptimizerState,
    payload_bytes: u64,
    sha256: String,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(model: &DiffVqaModel, adam: &Adam, epoch: usize, score: f64) -> Self {
        Self {
            config: model.cfg.clone(),
            vocab: model.vocab.clone(),
            params: model.params.clone(),
            adam: adam.clone(),
            epoch,
            score,
        }
    }

    pub fn model(&self) -> Result<DiffVqaModel> {
        Ok(DiffVqaModel::with_params(self.config.clone(), self.vocab.clone(), self.params.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !self.score.is_finite() {
            return Err(Error::Header(format!("score {} is not finite", self.score)));
        }
        let moments = !self.adam.m.is_empty();
        let mut named: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if moments {
            if self.adam.m.len() != named.len() || self.adam.v.len() != named.len() {
                return Err(Error::Header("optimizer moments do not match the parameters".into()));
            }
            let names: Vec<String> = self.params.names().to_vec();
            named.extend(names.iter().zip(&self.adam.m).map(|(n, t)| (format!("adam.m.{n}"), t)));
            named.extend(names.iter().zip(&self.adam.v).map(|(n, t)| (format!("adam.v.{n}"), t)));
        }
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(named.len());
        for (name, t) in named {
            tensors.push(Entry {
                name,
                dtype: DTYPE_F64.into(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            model: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            epoch: self.epoch,
            score: self.score,
            optimizer: OptimizerState {
                config: self.adam.cfg,
                step: self.adam.step,
                moments,
            },
            payload_bytes: payload.len() as u64,
            sha256: hex(&Sha256::digest(&payload)),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Header(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated("preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body = &bytes[16..];
        if (body.len() as u64) < hlen {
            return Err(Error::Truncated(format!("header needs {hlen} bytes, {} present", body.len())));
        }
        let (json, payload) = body.split_at(hlen as usize);
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Header(e.to_string()))?;
        if payload.len() as u64 != header.payload_bytes {
            return Err(Error::Truncated(format!(
                "payload has {} bytes, header says {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        let actual = hex(&Sha256::digest(payload));
        if actual != header.sha256 {
            return Err(Error::ChecksumMismatch {
                expected: header.sha256,
                actual,
            });
        }
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.tensors {
            if e.dtype != DTYPE_F64 {
                return Err(Error::Header(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = n
                .checked_mul(8)
                .and_then(|b| start.checked_add(b))
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| Error::Truncated(format!("tensor {} runs past the payload", e.name)))?;
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&e.shape, data)?;
            if e.name.starts_with("adam.m.") {
                m.push(t);
            } else if e.name.starts_with("adam.v.") {
                v.push(t);
            } else {
                if params.find(&e.name).is_some() {
                    return Err(Error::Header(format!("duplicate tensor {}", e.name)));
                }
                params.add(&e.name, t);
            }
        }
        let o = &header.optimizer;
        let expect = if o.moments { params.len() } else { 0 };
        if m.len() != expect || v.len() != expect {
            return Err(Error::Header("optimizer moments do not match the parameters".into()));
        }
        let specials = 5;
        if header.vocab.len() < specials {
            return Err(Error::Header("vocabulary lacks the special tokens".into()));
        }
        let vocab = Vocabulary::new(header.vocab[specials..].iter().map(String::as_str));
        if vocab.tokens() != header.vocab.as_slice() {
            return Err(Error::Header("vocabulary does not round-trip".into()));
        }
        Ok(Self {
            config: header.model,
            vocab,
            params,
            adam: Adam {
                cfg: o.config,
                step: o.step,
                m,
                v,
            },
            epoch: header.epoch,
            score: header.score,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        fs::write(path, bytes).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }
}
