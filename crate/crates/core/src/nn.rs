//! Parameter storage and the handful of layers the networks are built from.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{normal, StreamRng};
use crate::tensor::{Graph, Tensor, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter `{name}`");
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::invalid("param", alloc::format!("unknown parameter `{name}`")))?;
        if self.tensors[id.0].shape() != t.shape() {
            return Err(Error::shape("param", self.tensors[id.0].shape(), t.shape()));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    /// Puts every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect(),
        }
    }
}

/// Parameters bound to one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Substitutes `v` for one parameter (e.g. a tensor under gradient check).
    pub fn with_var(mut self, id: ParamId, v: Var) -> Self {
        self.vars[id.0] = v;
        self
    }

    /// Gradients in store order; parameters the loss never reached get zeros.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                g.grad_tensor(v)
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
            })
            .collect()
    }
}

fn gaussian(shape: &[usize], std: f64, rng: &mut StreamRng) -> Tensor {
    Tensor::from_fn(shape, |_| std * normal(rng))
}

/// Affine map `x W + b` on the trailing axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut StreamRng) -> Self {
        let std = 1.0 / libm::sqrt(d_in as f64);
        Self {
            w: store.add(&alloc::format!("{name}.w"), gaussian(&[d_in, d_out], std, rng)),
            b: store.add(&alloc::format!("{name}.b"), Tensor::zeros(&[d_out])),
            d_in,
            d_out,
        }
    }

    /// Weights zero, bias set to `bias`.
    pub fn with_bias(store: &mut ParamStore, name: &str, d_in: usize, bias: &[f64]) -> Self {
        Self {
            w: store.add(&alloc::format!("{name}.w"), Tensor::zeros(&[d_in, bias.len()])),
            b: store.add(
                &alloc::format!("{name}.b"),
                Tensor::from_parts(alloc::vec![bias.len()], bias.to_vec()),
            ),
            d_in,
            d_out: bias.len(),
        }
    }

    /// `x: [.., d_in] -> [.., d_out]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::shape("linear", &shape, &[self.d_in, self.d_out]));
        }
        let rows = g.value(x).numel() / self.d_in;
        let x2 = if shape.len() == 2 {
            x
        } else {
            g.reshape(x, &[rows, self.d_in])?
        };
        let y = g.matmul(x2, p.var(self.w))?;
        let y = g.add_row(y, p.var(self.b))?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.d_out;
            g.reshape(y, &out)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(&alloc::format!("{name}.gamma"), Tensor::ones(&[d])),
            beta: store.add(&alloc::format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let axis = g.shape(x).len() - 1;
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), axis, Self::EPS)
    }
}

/// Convolution block: conv, instance norm, per-channel shift, ReLU.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlock {
    pub w: ParamId,
    /// Per-channel shift applied after normalization.
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        Self {
            w: store.add(
                &alloc::format!("{name}.w"),
                gaussian(&[c_out, c_in, k, k], libm::sqrt(2.0 / fan_in), rng),
            ),
            b: store.add(&alloc::format!("{name}.b"), Tensor::zeros(&[c_out])),
            stride,
            pad: k / 2,
        }
    }

    /// Convolution, instance normalization (each channel of each image to
    /// zero mean and unit variance over space), per-channel shift, ReLU.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let c_out = g.shape(p.var(self.w))[0];
        let no_bias = g.constant(Tensor::zeros(&[c_out]));
        let y = g.conv2d(x, p.var(self.w), no_bias, self.stride, self.pad)?;
        let s = g.shape(y).to_vec();
        let (bc, hw) = (s[0] * s[1], s[2] * s[3]);
        let flat = g.reshape(y, &[bc, hw])?;
        let ones = g.constant(Tensor::ones(&[hw]));
        let zeros = g.constant(Tensor::zeros(&[hw]));
        let n = g.layer_norm(flat, ones, zeros, 1, 1e-5)?;
        let n = g.reshape(n, &[s[0], s[1], hw])?;
        let n = g.transpose(n, 1, 2)?;
        let n = g.add_row(n, p.var(self.b))?;
        let n = g.transpose(n, 1, 2)?;
        let y = g.reshape(n, &s)?;
        g.relu(y)
    }
}

/// Multi-head scaled dot-product self-attention over a `T x D` sequence.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut StreamRng) -> Self {
        assert!(heads > 0 && d % heads == 0, "model dim must divide into heads");
        Self {
            qkv: Linear::new(store, &alloc::format!("{name}.qkv"), d, 3 * d, rng),
            out: Linear::new(store, &alloc::format!("{name}.out"), d, d, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, causal: bool) -> Result<Var> {
        let d = self.out.d_in;
        let dh = d / self.heads;
        let qkv = self.qkv.forward(g, p, x)?;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice(qkv, 1, h * dh, dh)?;
            let k = g.slice(qkv, 1, d + h * dh, dh)?;
            let v = g.slice(qkv, 1, 2 * d + h * dh, dh)?;
            let kt = g.t(k)?;
            let s = g.matmul(q, kt)?;
            let s = g.scale(s, scale)?;
            let a = if causal {
                g.causal_softmax(s)?
            } else {
                let axis = 1;
                g.softmax(s, axis)?
            };
            heads.push(g.matmul(a, v)?);
        }
        let cat = g.concat(&heads, 1)?;
        self.out.forward(g, p, cat)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut StreamRng) -> Self {
        Self {
            fc1: Linear::new(store, &alloc::format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(store, &alloc::format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, p, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn: usize,
        rng: &mut StreamRng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &alloc::format!("{name}.ln1"), d),
            attn: SelfAttention::new(store, &alloc::format!("{name}.attn"), d, heads, rng),
            ln2: LayerNorm::new(store, &alloc::format!("{name}.ln2"), d),
            mlp: Mlp::new(store, &alloc::format!("{name}.mlp"), d, ffn, d, rng),
        }
    }

    /// `x: [T x D]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, causal: bool) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let h = self.attn.forward(g, p, h, causal)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.mlp.forward(g, p, h)?;
        g.add(x, h)
    }
}
