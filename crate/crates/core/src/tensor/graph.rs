use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom, Layout};
use super::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Watch(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Max(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose {
        x: Var,
        a0: usize,
        a1: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    AddRow(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    GridSample {
        x: Var,
        grid: Var,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A define-by-run tape. Nodes are appended in creation order, so the node
/// list is always a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Identity node that always tracks gradients, used to read gradients of
    /// intermediate activations (e.g. Grad-CAM feature maps) even when no
    /// upstream input requires them.
    pub fn watch(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, true, Op::Watch(x))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last backward passes, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn emit(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[Var],
        op: Op,
    ) -> Result<Var> {
        check_finite(op_name, &data)?;
        let rg = self.rg(parents);
        Ok(self.push(Tensor::from_parts(shape, data), rg, op))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------------
    // elementwise

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (da, db) = (self.data(a), self.data(b));
        let (shape, out) = if sa == sb {
            (sa, da.iter().zip(db).map(|(x, y)| f(*x, *y)).collect())
        } else if db.len() == 1 {
            let y = db[0];
            (sa, da.iter().map(|x| f(*x, y)).collect())
        } else if da.len() == 1 {
            let x = da[0];
            (sb, db.iter().map(|y| f(x, *y)).collect())
        } else {
            return Err(Error::shape(name, &sa, &sb));
        };
        self.emit(name, shape, out, &[a, b], op)
    }

    /// Elementwise sum (identical shapes or scalar-vs-tensor).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("max", a, b, |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.emit("scale", shape, out, &[a], Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = self.shape(a).to_vec();
        self.emit("relu", shape, out, &[a], Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| libm::exp(x)).collect();
        let shape = self.shape(a).to_vec();
        self.emit("exp", shape, out, &[a], Op::Exp(a))
    }

    /// Natural log; non-positive inputs are a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| !(x > 0.0)) {
            return Err(Error::invalid("log", "input must be positive"));
        }
        let out = self.data(a).iter().map(|&x| libm::log(x)).collect();
        let shape = self.shape(a).to_vec();
        self.emit("log", shape, out, &[a], Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.emit("sum", Vec::new(), vec![s], &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.emit("mean", Vec::new(), vec![s], &[a], Op::Mean(a))
    }

    // ---------------------------------------------------------------------
    // shape manipulation

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::Reshape(a)))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, a0: usize, a1: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if a0 >= shape.len() || a1 >= shape.len() {
            return Err(Error::invalid("transpose", "axis out of range"));
        }
        let (out, out_shape) = kernels::swap_axes(self.data(a), &shape, a0, a1);
        self.emit("transpose", out_shape, out, &[a], Op::Transpose { x: a, a0, a1 })
    }

    /// Transpose of a 2-D matrix.
    pub fn t(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::invalid("transpose", "expected a matrix"));
        }
        self.transpose(a, 0, 1)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", "axis out of range"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                out.extend_from_slice(&self.data(*p)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.emit(
            "concat",
            shape,
            out,
            parts,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid("slice", "range out of bounds"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        self.emit("slice", s, out, &[a], Op::Slice { x: a, axis, start })
    }

    // ---------------------------------------------------------------------
    // normalization

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", "axis out of range"));
        }
        check_finite("softmax", self.data(a))?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.data(a);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = libm::exp(d[idx(k)] - m);
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[idx(k)] /= z;
                }
            }
        }
        self.emit("softmax", shape, out, &[a], Op::Softmax { x: a, axis })
    }

    /// Row softmax of a `T x S` score matrix where row `i` only sees columns
    /// `0..=i + (S - T)`; hidden entries get probability zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] > shape[1] {
            return Err(Error::invalid("causal_softmax", "expected T x S with T <= S"));
        }
        check_finite("causal_softmax", self.data(a))?;
        let (t, s) = (shape[0], shape[1]);
        let d = self.data(a);
        let mut out = vec![0.0; d.len()];
        for i in 0..t {
            let visible = i + (s - t) + 1;
            let row = &d[i * s..i * s + visible];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * s..i * s + visible];
            let mut z = 0.0;
            for (dst, &x) in o.iter_mut().zip(row) {
                *dst = libm::exp(x - m);
                z += *dst;
            }
            for dst in o.iter_mut() {
                *dst /= z;
            }
        }
        self.emit("causal_softmax", shape, out, &[a], Op::CausalSoftmax(a))
    }

    /// Normalizes along `axis` to zero mean / unit variance, then applies the
    /// per-feature affine `gamma`, `beta` (both of length `shape[axis]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("layer_norm", "axis out of range"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let d = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        let mut rstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mean = (0..n).map(|k| d[idx(k)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|k| { let c = d[idx(k)] - mean; c * c }).sum::<f64>() / n as f64;
                let r = 1.0 / libm::sqrt(var + eps);
                rstd[o * inner + i] = r;
                for k in 0..n {
                    let h = (d[idx(k)] - mean) * r;
                    xhat[idx(k)] = h;
                    out[idx(k)] = h * gd[k] + bd[k];
                }
            }
        }
        self.emit(
            "layer_norm",
            shape,
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            },
        )
    }

    /// Gathers rows of a `V x D` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid("embedding", "table must be V x D"));
        }
        if ids.is_empty() {
            return Err(Error::Empty("embedding ids"));
        }
        let (v, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange(bad as u32));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&td[i * dim..(i + 1) * dim]);
        }
        self.emit(
            "embedding",
            vec![ids.len(), dim],
            out,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    // ---------------------------------------------------------------------
    // linear algebra

    /// `[m x k] . [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.data(a),
            Layout::rm(k),
            self.data(b),
            Layout::rm(n),
            0.0,
            &mut out,
        );
        self.emit("matmul", vec![m, n], out, &[a, b], Op::MatMul(a, b))
    }

    /// Adds a length-`n` vector to every trailing row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_row", &shape, self.shape(bias)));
        }
        let bd = self.data(bias);
        let out = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(a, b)| a + b))
            .collect();
        self.emit("add_row", shape, out, &[x, bias], Op::AddRow(x, bias))
    }

    /// Zero-padded cross-correlation of `x: [B,C,H,W]` with `w: [O,C,kh,kw]`
    /// plus per-channel bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if self.value(b).numel() != ws[0] {
            return Err(Error::shape("conv2d", &ws, self.shape(b)));
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad)?;
        let (batch, o) = (xs[0], ws[0]);
        let (rows, ncol) = (geom.rows(), geom.cols());
        let keep = self.rg(&[w]);
        let mut cols_all = if keep {
            vec![0.0; batch * rows * ncol]
        } else {
            Vec::new()
        };
        let mut scratch = vec![0.0; rows * ncol];
        let mut out = vec![0.0; batch * o * ncol];
        let chw = geom.c * geom.h * geom.w;
        for bi in 0..batch {
            let cols: &mut [f64] = if keep {
                &mut cols_all[bi * rows * ncol..(bi + 1) * rows * ncol]
            } else {
                &mut scratch
            };
            kernels::im2col(&self.data(x)[bi * chw..(bi + 1) * chw], &geom, cols);
            let dst = &mut out[bi * o * ncol..(bi + 1) * o * ncol];
            for (oc, row) in dst.chunks_mut(ncol).enumerate() {
                row.fill(self.data(b)[oc]);
            }
            kernels::gemm(
                o,
                rows,
                ncol,
                self.data(w),
                Layout::rm(rows),
                cols,
                Layout::rm(ncol),
                1.0,
                dst,
            );
        }
        self.emit(
            "conv2d",
            vec![batch, o, geom.ho, geom.wo],
            out,
            &[x, w, b],
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: cols_all,
            },
        )
    }

    /// Bilinear sampling of `x: [B,C,H,W]` at normalized positions
    /// `grid: [B,H,W,2]` (x then y). Align-corners: -1 and +1 are the centers
    /// of the first and last pixels; samples outside the image read zero.
    pub fn grid_sample(&mut self, x: Var, grid: Var) -> Result<Var> {
        let (xs, gs) = (self.shape(x).to_vec(), self.shape(grid).to_vec());
        kernels::check_grid("grid_sample", &xs, &gs)?;
        let out = kernels::grid_sample_forward(self.data(x), &xs, self.data(grid), &gs);
        self.emit(
            "grid_sample",
            vec![xs[0], xs[1], gs[1], gs[2]],
            out,
            &[x, grid],
            Op::GridSample { x, grid },
        )
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits: [T x V]`, over rows where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || targets.len() != shape[0] || mask.len() != shape[0] {
            return Err(Error::invalid("cross_entropy", "targets/mask must match logits rows"));
        }
        let v = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange(bad as u32));
        }
        check_finite("cross_entropy", self.data(logits))?;
        let rows: Vec<(usize, usize)> = targets
            .iter()
            .zip(mask)
            .enumerate()
            .filter(|(_, (_, &m))| m)
            .map(|(r, (&t, _))| (r, t))
            .collect();
        if rows.is_empty() {
            return Err(Error::EmptyLossMask);
        }
        let d = self.data(logits);
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut total = 0.0;
        for &(r, t) in &rows {
            let row = &d[r * v..(r + 1) * v];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| libm::exp(x - m)).sum();
            let lse = m + libm::log(z);
            total += lse - row[t];
            probs.extend(row.iter().map(|&x| libm::exp(x - lse)));
        }
        let loss = total / rows.len() as f64;
        self.emit(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                rows,
                probs,
            },
        )
    }

    // ---------------------------------------------------------------------
    // reverse pass

    /// Accumulates d(root)/d(node) into the gradient buffer of every node
    /// that requires gradients. Repeated calls add to existing buffers.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(rs.to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            match &mut self.nodes[i].grad {
                Some(acc) => add_into(acc, &g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let n = nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Watch(x) | Op::Reshape(x) => acc(*x, &mut |b| add_into(b, g)),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    acc(v, &mut |buf| {
                        if buf.len() == g.len() {
                            for (d, x) in buf.iter_mut().zip(g) {
                                *d += s * x;
                            }
                        } else {
                            buf[0] += s * g.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let od = val(other);
                    acc(v, &mut |buf| {
                        if buf.len() == g.len() {
                            if od.len() == g.len() {
                                for ((d, x), y) in buf.iter_mut().zip(g).zip(od) {
                                    *d += x * y;
                                }
                            } else {
                                for (d, x) in buf.iter_mut().zip(g) {
                                    *d += x * od[0];
                                }
                            }
                        } else {
                            buf[0] += g.iter().zip(od).map(|(x, y)| x * y).sum::<f64>();
                        }
                    });
                }
            }
            Op::Max(a, b) => {
                let (da, db) = (val(*a), val(*b));
                let n = g.len();
                let pick = |k: usize| {
                    let x = if da.len() == 1 { da[0] } else { da[k] };
                    let y = if db.len() == 1 { db[0] } else { db[k] };
                    x >= y
                };
                acc(*a, &mut |buf| {
                    for k in 0..n {
                        if pick(k) {
                            buf[if buf.len() == 1 { 0 } else { k }] += g[k];
                        }
                    }
                });
                acc(*b, &mut |buf| {
                    for k in 0..n {
                        if !pick(k) {
                            buf[if buf.len() == 1 { 0 } else { k }] += g[k];
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |b| {
                for (d, x) in b.iter_mut().zip(g) {
                    *d += c * x;
                }
            }),
            Op::Relu(a) => acc(*a, &mut |b| {
                for ((d, x), y) in b.iter_mut().zip(g).zip(out) {
                    if *y > 0.0 {
                        *d += x;
                    }
                }
            }),
            Op::Exp(a) => acc(*a, &mut |b| {
                for ((d, x), y) in b.iter_mut().zip(g).zip(out) {
                    *d += x * y;
                }
            }),
            Op::Log(a) => {
                let xa = val(*a);
                acc(*a, &mut |b| {
                    for ((d, x), y) in b.iter_mut().zip(g).zip(xa) {
                        *d += x / y;
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |b| {
                for d in b.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(a) => acc(*a, &mut |b| {
                let s = g[0] / b.len() as f64;
                for d in b.iter_mut() {
                    *d += s;
                }
            }),
            Op::Transpose { x, a0, a1 } => {
                let (back, _) = kernels::swap_axes(g, nodes[i].value.shape(), *a0, *a1);
                acc(*x, &mut |b| add_into(b, &back));
            }
            Op::Concat { parts, axis } => {
                let shape = nodes[i].value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    acc(*p, &mut |b| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut b[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = nodes[x.0].value.shape();
                let (outer, n, inner) = split_axis(in_shape, *axis);
                let len = nodes[i].value.shape()[*axis];
                acc(*x, &mut |b| {
                    for o in 0..outer {
                        let dst = &mut b[(o * n + start) * inner..(o * n + start + len) * inner];
                        add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(nodes[i].value.shape(), *axis);
                acc(*x, &mut |b| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + ii;
                            let dot: f64 = (0..n).map(|k| g[idx(k)] * out[idx(k)]).sum();
                            for k in 0..n {
                                b[idx(k)] += out[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CausalSoftmax(x) => {
                let s = nodes[i].value.shape()[1];
                acc(*x, &mut |b| {
                    for ((brow, grow), yrow) in b.chunks_mut(s).zip(g.chunks(s)).zip(out.chunks(s)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, c)| a * c).sum();
                        for ((d, gg), y) in brow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gg - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            } => {
                let (outer, n, inner) = split_axis(nodes[i].value.shape(), *axis);
                let gd = val(*gamma);
                let idx = |o: usize, k: usize, ii: usize| (o * n + k) * inner + ii;
                acc(*gamma, &mut |b| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            for (k, d) in b.iter_mut().enumerate() {
                                *d += g[idx(o, k, ii)] * xhat[idx(o, k, ii)];
                            }
                        }
                    }
                });
                acc(*beta, &mut |b| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            for (k, d) in b.iter_mut().enumerate() {
                                *d += g[idx(o, k, ii)];
                            }
                        }
                    }
                });
                acc(*x, &mut |b| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let r = rstd[o * inner + ii];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for k in 0..n {
                                let dh = g[idx(o, k, ii)] * gd[k];
                                s1 += dh;
                                s2 += dh * xhat[idx(o, k, ii)];
                            }
                            let (m1, m2) = (s1 / n as f64, s2 / n as f64);
                            for k in 0..n {
                                let j = idx(o, k, ii);
                                let dh = g[j] * gd[k];
                                b[j] += r * (dh - m1 - xhat[j] * m2);
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = nodes[table.0].value.shape()[1];
                acc(*table, &mut |b| {
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut b[id * dim..(id + 1) * dim], &g[row * dim..(row + 1) * dim]);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |buf| {
                    kernels::gemm(m, n, k, g, Layout::rm(n), bd, Layout::tr(n), 1.0, buf)
                });
                acc(*b, &mut |buf| {
                    kernels::gemm(k, m, n, ad, Layout::tr(k), g, Layout::rm(n), 1.0, buf)
                });
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |b| add_into(b, g));
                let n = nodes[bias.0].value.numel();
                acc(*bias, &mut |b| {
                    for row in g.chunks(n) {
                        add_into(b, row);
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let ws = nodes[w.0].value.shape();
                let o = ws[0];
                let (rows, ncol) = (geom.rows(), geom.cols());
                let batch = nodes[x.0].value.shape()[0];
                let chw = geom.c * geom.h * geom.w;
                acc(*b, &mut |buf| {
                    for gb in g.chunks(o * ncol) {
                        for (oc, row) in gb.chunks(ncol).enumerate() {
                            buf[oc] += row.iter().sum::<f64>();
                        }
                    }
                });
                acc(*w, &mut |buf| {
                    for bi in 0..batch {
                        kernels::gemm(
                            o,
                            ncol,
                            rows,
                            &g[bi * o * ncol..],
                            Layout::rm(ncol),
                            &cols[bi * rows * ncol..],
                            Layout::tr(ncol),
                            1.0,
                            buf,
                        );
                    }
                });
                if needs(*x) {
                    let wd = val(*w);
                    let mut dcols = vec![0.0; rows * ncol];
                    acc(*x, &mut |buf| {
                        for bi in 0..batch {
                            kernels::gemm(
                                rows,
                                o,
                                ncol,
                                wd,
                                Layout::tr(rows),
                                &g[bi * o * ncol..],
                                Layout::rm(ncol),
                                0.0,
                                &mut dcols,
                            );
                            kernels::col2im(&dcols, geom, &mut buf[bi * chw..(bi + 1) * chw]);
                        }
                    });
                }
            }
            Op::GridSample { x, grid } => {
                let (wx, wg) = (needs(*x), needs(*grid));
                let (dx, dgrid) = kernels::grid_sample_backward(
                    val(*x),
                    nodes[x.0].value.shape(),
                    val(*grid),
                    nodes[grid.0].value.shape(),
                    g,
                    wx,
                    wg,
                );
                acc(*x, &mut |b| add_into(b, &dx));
                acc(*grid, &mut |b| add_into(b, &dgrid));
            }
            Op::CrossEntropy {
                logits,
                rows,
                probs,
            } => {
                let v = nodes[logits.0].value.shape()[1];
                let s = g[0] / rows.len() as f64;
                acc(*logits, &mut |b| {
                    for (j, &(r, t)) in rows.iter().enumerate() {
                        let dst = &mut b[r * v..(r + 1) * v];
                        for (d, p) in dst.iter_mut().zip(&probs[j * v..(j + 1) * v]) {
                            *d += s * p;
                        }
                        dst[t] -= s;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));

        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[10.0]);

        let big = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert!(g.conv2d(x, big, b, 1, 0).is_err());
        assert!(g.conv2d(x, w, b, 0, 0).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(z, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let bad = g.constant(t(&[2], &[-1.0, 1.0]));
        assert!(g.log(bad).is_err());
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn backward_linear_quadratic_and_fanout() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[2], &[3.0, 4.0]));
        let a = g.sum(x).unwrap();
        let b = g.sum(x).unwrap();
        let y = g.add(a, b).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        // repeated calls accumulate
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 4.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn max_ties_route_to_first_argument() {
        let mut g = Graph::new();
        let a = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let b = g.param(t(&[3], &[1.0, 5.0, 0.0]));
        let m = g.max(a, b).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 0.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[2, 4]));
        let ce = g.cross_entropy(l, &[1, 3], &[true, true]).unwrap();
        assert!((g.value(ce).item() - libm::log(4.0)).abs() < 1e-15);
        let mut logits = [0.0; 4];
        logits[2] = 1000.0;
        let l = g.constant(t(&[1, 4], &logits));
        let ce = g.cross_entropy(l, &[2], &[true]).unwrap();
        assert!(g.value(ce).item().abs() < 1e-12);
        assert_eq!(
            g.cross_entropy(l, &[2], &[false]).unwrap_err(),
            Error::EmptyLossMask
        );
    }

    #[test]
    fn watch_exposes_intermediate_gradient() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 3.0).unwrap();
        let y = g.watch(y);
        let z = g.mul(y, y).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(y).unwrap(), &[6.0, 12.0]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn causal_softmax_hides_future() {
        let mut g = Graph::new();
        let s = g.constant(t(&[2, 3], &[0.0, 0.0, 9.0, 0.0, 0.0, 0.0]));
        let p = g.causal_softmax(s).unwrap();
        let d = g.value(p).data();
        assert_eq!(&d[..3], &[0.5, 0.5, 0.0]);
        assert!((d[3] - 1.0 / 3.0).abs() < 1e-15);
    }
}
