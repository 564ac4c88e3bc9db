//! Finite-difference check of every differentiable operation, runnable from
//! tests and from the CLI.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::model::{DiffVqaModel, ModelConfig, Vocabulary};
use crate::registration::{reg_loss, RegLossWeights};
use crate::rng::{self, uniform, Rng, StreamRng};
use crate::tensor::gradcheck::{grad_check, grad_check_coords, DEFAULT_EPS};
use crate::tensor::{Graph, Tensor, Var};

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Uniform in `[-2, 2]` with `|v| >= 0.1` (away from relu kinks).
fn rand_t(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = uniform(r, 0.1, 2.0);
        if r.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// `sum(w * y)` for a fixed random `w`, so every output coordinate matters.
fn weighted(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    g.sum(p)
}

fn tiny_model_cfg() -> ModelConfig {
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
        max_question_len: 12,
        max_answer_len: 14,
    }
}

/// Runs every check; errors only on a failing operation, not on a large
/// relative error (that is reported).
pub fn gradient_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut r = rng::stream(seed, 0);
    let mut out = Vec::new();
    let tol = 1e-5;
    let mut push = |name: &str, err: f64, tol: f64| {
        out.push(GradReport {
            name: String::from(name),
            max_rel_err: err,
            tol,
        })
    };
    let eps = DEFAULT_EPS;

    let a = rand_t(&mut r, &[3, 3]);
    let b = rand_t(&mut r, &[3, 3]);
    push("matmul/sum wrt a", grad_check(|g, x| {
        let bv = g.constant(b.clone());
        let y = g.matmul(x, bv)?;
        g.sum(y)
    }, &a, eps)?, 1e-6);
    let w33 = rand_t(&mut r, &[3, 3]);
    push("matmul wrt b", grad_check(|g, x| {
        let av = g.constant(a.clone());
        let y = g.matmul(av, x)?;
        weighted(g, y, &w33)
    }, &b, eps)?, tol);

    let cx = rand_t(&mut r, &[1, 2, 5, 5]);
    let cw = rand_t(&mut r, &[3, 2, 3, 3]);
    let cb = rand_t(&mut r, &[3]);
    for (stride, pad) in [(1, 1), (2, 0)] {
        let oh = (5 + 2 * pad - 3) / stride + 1;
        let wo = rand_t(&mut r, &[1, 3, oh, oh]);
        let conv = |g: &mut Graph, x: Var, w: Var, bb: Var| -> Result<Var> {
            let y = g.conv2d(x, w, bb, stride, pad)?;
            weighted(g, y, &wo)
        };
        push(&alloc::format!("conv2d s{stride}p{pad} wrt x"), grad_check(|g, x| {
            let (w, bb) = (g.constant(cw.clone()), g.constant(cb.clone()));
            conv(g, x, w, bb)
        }, &cx, eps)?, tol);
        push(&alloc::format!("conv2d s{stride}p{pad} wrt w"), grad_check(|g, w| {
            let (x, bb) = (g.constant(cx.clone()), g.constant(cb.clone()));
            conv(g, x, w, bb)
        }, &cw, eps)?, tol);
        push(&alloc::format!("conv2d s{stride}p{pad} wrt b"), grad_check(|g, bb| {
            let (x, w) = (g.constant(cx.clone()), g.constant(cw.clone()));
            conv(g, x, w, bb)
        }, &cb, eps)?, tol);
    }

    // grid positions with fractional pixel offsets in [0.2, 0.8]
    let gx = rand_t(&mut r, &[1, 1, 4, 4]);
    let grid = Tensor::from_fn(&[1, 4, 4, 2], |_| {
        let px = r.random_range(0..3) as f64 + uniform(&mut r, 0.2, 0.8);
        px * 2.0 / 3.0 - 1.0
    });
    let gw = rand_t(&mut r, &[1, 1, 4, 4]);
    push("grid_sample wrt x", grad_check(|g, x| {
        let gr = g.constant(grid.clone());
        let y = g.grid_sample(x, gr)?;
        weighted(g, y, &gw)
    }, &gx, eps)?, tol);
    push("grid_sample wrt grid", grad_check(|g, gr| {
        let x = g.constant(gx.clone());
        let y = g.grid_sample(x, gr)?;
        weighted(g, y, &gw)
    }, &grid, eps)?, tol);

    let x = rand_t(&mut r, &[2, 3]);
    let y = rand_t(&mut r, &[2, 3]);
    let w23 = rand_t(&mut r, &[2, 3]);
    let unary: [(&str, fn(&mut Graph, Var) -> Result<Var>); 6] = [
        ("scale", |g, v| g.scale(v, -1.7)),
        ("relu", |g, v| g.relu(v)),
        ("exp", |g, v| g.exp(v)),
        ("softmax axis 1", |g, v| g.softmax(v, 1)),
        ("softmax axis 0", |g, v| g.softmax(v, 0)),
        ("transpose", |g, v| {
            let t = g.transpose(v, 0, 1)?;
            g.transpose(t, 0, 1)
        }),
    ];
    for (name, f) in unary {
        push(name, grad_check(|g, v| {
            let o = f(g, v)?;
            weighted(g, o, &w23)
        }, &x, eps)?, tol);
    }
    let xpos = Tensor::from_fn(&[2, 3], |i| 0.2 + 0.3 * i as f64);
    push("log", grad_check(|g, v| {
        let o = g.log(v)?;
        weighted(g, o, &w23)
    }, &xpos, eps)?, tol);
    // keep the max operands apart
    let ymax = Tensor::from_fn(&[2, 3], |i| x.data()[i] + if i % 2 == 0 { 0.5 } else { -0.5 });
    let binary: [(&str, fn(&mut Graph, Var, Var) -> Result<Var>); 4] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
        ("max", |g, a, b| g.max(a, b)),
    ];
    for (name, f) in binary {
        let other = if name == "max" { ymax.clone() } else { y.clone() };
        push(&alloc::format!("{name} wrt a"), grad_check(|g, v| {
            let o = g.constant(other.clone());
            let z = f(g, v, o)?;
            weighted(g, z, &w23)
        }, &x, eps)?, tol);
        push(&alloc::format!("{name} wrt b"), grad_check(|g, v| {
            let o = g.constant(x.clone());
            let z = f(g, o, v)?;
            weighted(g, z, &w23)
        }, &other, eps)?, tol);
    }
    push("mul scalar broadcast", grad_check(|g, v| {
        let s = g.constant(Tensor::scalar(1.3));
        let z = g.mul(s, v)?;
        weighted(g, z, &w23)
    }, &x, eps)?, tol);
    push("mean", grad_check(|g, v| {
        let sq = g.mul(v, v)?;
        g.mean(sq)
    }, &x, eps)?, tol);
    push("sum", grad_check(|g, v| g.sum(v), &x, eps)?, 1e-9);
    let w32 = rand_t(&mut r, &[3, 2]);
    push("reshape", grad_check(|g, v| {
        let z = g.reshape(v, &[3, 2])?;
        weighted(g, z, &w32)
    }, &x, eps)?, tol);
    let w43 = rand_t(&mut r, &[4, 3]);
    push("concat", grad_check(|g, v| {
        let o = g.constant(y.clone());
        let z = g.concat(&[o, v], 0)?;
        weighted(g, z, &w43)
    }, &x, eps)?, tol);
    let w22 = rand_t(&mut r, &[2, 2]);
    push("slice", grad_check(|g, v| {
        let z = g.slice(v, 1, 1, 2)?;
        weighted(g, z, &w22)
    }, &x, eps)?, tol);
    let sq = rand_t(&mut r, &[3, 3]);
    push("causal_softmax", grad_check(|g, v| {
        let z = g.causal_softmax(v)?;
        weighted(g, z, &w33)
    }, &sq, eps)?, tol);
    let w34 = rand_t(&mut r, &[3, 4]);
    let ln_x = rand_t(&mut r, &[3, 4]);
    let gamma = rand_t(&mut r, &[4]);
    let beta = rand_t(&mut r, &[4]);
    push("layer_norm wrt x", grad_check(|g, v| {
        let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        let z = g.layer_norm(v, ga, be, 1, 1e-5)?;
        weighted(g, z, &w34)
    }, &ln_x, eps)?, tol);
    push("layer_norm wrt gamma", grad_check(|g, v| {
        let (xv, be) = (g.constant(ln_x.clone()), g.constant(beta.clone()));
        let z = g.layer_norm(xv, v, be, 1, 1e-5)?;
        weighted(g, z, &w34)
    }, &gamma, eps)?, tol);
    push("layer_norm wrt beta", grad_check(|g, v| {
        let (xv, ga) = (g.constant(ln_x.clone()), g.constant(gamma.clone()));
        let z = g.layer_norm(xv, ga, v, 1, 1e-5)?;
        weighted(g, z, &w34)
    }, &beta, eps)?, tol);
    let table = rand_t(&mut r, &[5, 3]);
    let w_emb = rand_t(&mut r, &[4, 3]);
    push("embedding", grad_check(|g, v| {
        let z = g.embedding(v, &[1, 4, 1, 0])?;
        weighted(g, z, &w_emb)
    }, &table, eps)?, tol);
    let bias = rand_t(&mut r, &[3]);
    push("add_row", grad_check(|g, v| {
        let xv = g.constant(x.clone());
        let z = g.add_row(xv, v)?;
        weighted(g, z, &w23)
    }, &bias, eps)?, tol);
    let logits = rand_t(&mut r, &[3, 5]);
    push("cross_entropy", grad_check(|g, v| g.cross_entropy(v, &[1, 4, 2], &[true, false, true]), &logits, eps)?, tol);

    let theta = Tensor::from_fn(&[2, 2, 3], |i| {
        let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0][i % 6];
        id + uniform(&mut r, -0.3, 0.3)
    });
    push("reg_loss", grad_check(|g, t| reg_loss(g, t, &RegLossWeights::default()), &theta, eps)?, 1e-6);

    // full model: L_LM wrt the projector's input weight
    let model = DiffVqaModel::new(tiny_model_cfg(), Vocabulary::synthetic(), seed)?;
    let id = model.params.find("proj.in.w").expect("projector weight");
    let w0 = model.params.get(id).clone();
    let img = |r: &mut StreamRng| Tensor::from_fn(&[1, 1, 32, 32], |_| r.random::<f64>());
    let (mi, ri) = (img(&mut r), img(&mut r));
    let q = model.vocab.encode("what has changed?")?;
    let ans = model.vocab.encode("the nodule in the left upper zone has enlarged")?;
    let coords: Vec<usize> = (0..w0.numel()).step_by(3).collect();
    let err = grad_check_coords(
        |g, w| {
            let p = model.bind(g, false).with_var(id, w);
            let (mv, rv) = (g.constant(mi.clone()), g.constant(ri.clone()));
            let enc = model.encode_pair(g, &p, mv, rv, &q, false)?;
            Ok(model.decode_teacher_forced(g, &p, &enc, &ans)?.1)
        },
        &w0,
        eps,
        &coords,
    )?;
    push("model L_LM wrt projector weight", err, 1e-4);
    Ok(out)
}
