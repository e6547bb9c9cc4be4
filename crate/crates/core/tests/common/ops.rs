//! One finite-difference check per differentiable graph op, each a function
//! of an instance seed returning the worst relative error.

use clipforge::contrastive::{clip_loss, similarity};
use clipforge::model::{Binder, DualEncoderModel, TokenBatch};
use clipforge::tensor::{Graph, Tensor, Var};
use rand::Rng;

use super::{gradcheck, micro_config, random_tokens, rng, uniform, weighted_sum};

pub type OpCheck = fn(u64) -> f64;

fn unary(seed: u64, shape: &[usize], op: impl Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let x = uniform(&mut rng(seed), shape);
    gradcheck(&[x], |g, v| {
        let y = op(g, v[0]);
        weighted_sum(g, y, seed)
    })
}

fn binary(seed: u64, sa: &[usize], sb: &[usize], op: impl Fn(&mut Graph<f64>, Var, Var) -> Var) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, sa);
    let b = uniform(&mut r, sb);
    gradcheck(&[a, b], |g, v| {
        let y = op(g, v[0], v[1]);
        weighted_sum(g, y, seed)
    })
}

fn matmul(seed: u64) -> f64 {
    binary(seed, &[3, 4], &[4, 2], |g, a, b| g.matmul(a, b).unwrap())
}

fn matmul_batched(seed: u64) -> f64 {
    let e = binary(seed, &[2, 3, 4], &[2, 4, 5], |g, a, b| g.matmul(a, b).unwrap());
    e.max(binary(seed + 1, &[2, 2, 3, 4], &[4, 2], |g, a, b| g.matmul(a, b).unwrap()))
}

fn add(seed: u64) -> f64 {
    let same = binary(seed, &[3, 4], &[3, 4], |g, a, b| g.add(a, b).unwrap());
    let suffix = binary(seed + 1, &[2, 3, 4], &[4], |g, a, b| g.add(a, b).unwrap());
    let scalar = binary(seed + 2, &[3, 2], &[1], |g, a, b| g.add(a, b).unwrap());
    same.max(suffix).max(scalar)
}

fn mul(seed: u64) -> f64 {
    let same = binary(seed, &[3, 4], &[3, 4], |g, a, b| g.mul(a, b).unwrap());
    let suffix = binary(seed + 1, &[2, 3, 4], &[3, 4], |g, a, b| g.mul(a, b).unwrap());
    let scalar = binary(seed + 2, &[5], &[1], |g, a, b| g.mul(a, b).unwrap());
    same.max(suffix).max(scalar)
}

fn scale(seed: u64) -> f64 {
    unary(seed, &[3, 5], |g, x| g.scale(x, -1.7))
}

fn gelu(seed: u64) -> f64 {
    unary(seed, &[4, 6], |g, x| g.gelu(x))
}

fn exp(seed: u64) -> f64 {
    unary(seed, &[3, 4], |g, x| g.exp(x))
}

/// Inputs are kept away from the kink, where the derivative is undefined.
fn clamp_max(seed: u64) -> f64 {
    let mut r = rng(seed);
    let data: Vec<f64> = (0..12)
        .map(|_| loop {
            let v: f64 = r.random_range(-1.0..=1.0);
            if (v - 0.25).abs() > 1e-3 {
                break v;
            }
        })
        .collect();
    let x = Tensor::new(vec![3, 4], data).unwrap();
    gradcheck(&[x], |g, v| {
        let y = g.clamp_max(v[0], 0.25);
        weighted_sum(g, y, seed)
    })
}

fn embedding(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ids: Vec<usize> = (0..7).map(|_| r.random_range(0..6)).collect();
    unary(seed, &[6, 4], move |g, t| g.embedding(t, &ids).unwrap())
}

fn reshape(seed: u64) -> f64 {
    unary(seed, &[2, 6], |g, x| g.reshape(x, &[3, 2, 2]).unwrap())
}

fn permute(seed: u64) -> f64 {
    let p3 = unary(seed, &[2, 3, 4], |g, x| g.permute(x, &[2, 0, 1]).unwrap());
    p3.max(unary(seed + 1, &[2, 3, 2, 2], |g, x| g.permute(x, &[0, 2, 1, 3]).unwrap()))
}

fn transpose(seed: u64) -> f64 {
    unary(seed, &[2, 3, 4], |g, x| g.transpose(x).unwrap())
}

fn sum(seed: u64) -> f64 {
    let x = uniform(&mut rng(seed), &[3, 4]);
    gradcheck(&[x], |g, v| {
        let sq = g.mul(v[0], v[0]).unwrap();
        g.sum(sq)
    })
}

fn mean(seed: u64) -> f64 {
    let x = uniform(&mut rng(seed), &[2, 5]);
    gradcheck(&[x], |g, v| {
        let e = g.exp(v[0]);
        g.mean(e)
    })
}

fn softmax(seed: u64) -> f64 {
    unary(seed, &[3, 5], |g, x| g.softmax(x))
}

fn layer_norm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[3, 6]);
    let gain = uniform(&mut r, &[6]);
    let bias = uniform(&mut r, &[6]);
    gradcheck(&[x, gain, bias], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        weighted_sum(g, y, seed)
    })
}

fn cross_entropy(seed: u64) -> f64 {
    let mut r = rng(seed);
    let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..4)).collect();
    let x = uniform(&mut r, &[4, 4]);
    gradcheck(&[x], |g, v| g.softmax_cross_entropy(v[0], &targets).unwrap())
}

fn l2_normalize(seed: u64) -> f64 {
    unary(seed, &[3, 5], |g, x| g.l2_normalize(x, 1e-12))
}

/// Scaled dot-product attention over `[batch, heads, seq, dim]`.
fn attention(seed: u64) -> f64 {
    let mut r = rng(seed);
    let q = uniform(&mut r, &[2, 2, 3, 4]);
    let k = uniform(&mut r, &[2, 2, 3, 4]);
    let v = uniform(&mut r, &[2, 2, 3, 4]);
    gradcheck(&[q, k, v], |g, x| {
        let kt = g.transpose(x[1]).unwrap();
        let s = g.matmul(x[0], kt).unwrap();
        let s = g.scale(s, 0.5);
        let a = g.softmax(s);
        let y = g.matmul(a, x[2]).unwrap();
        weighted_sum(g, y, seed)
    })
}

/// Every forward op with a gradient, by name.
pub const OP_CHECKS: &[(&str, OpCheck)] = &[
    ("matmul", matmul),
    ("matmul_batched", matmul_batched),
    ("add", add),
    ("mul", mul),
    ("scale", scale),
    ("gelu", gelu),
    ("exp", exp),
    ("clamp_max", clamp_max),
    ("embedding", embedding),
    ("reshape", reshape),
    ("permute", permute),
    ("transpose", transpose),
    ("sum", sum),
    ("mean", mean),
    ("softmax", softmax),
    ("layer_norm", layer_norm),
    ("softmax_cross_entropy", cross_entropy),
    ("l2_normalize", l2_normalize),
    ("attention", attention),
];

/// Contrastive loss from raw embeddings through normalisation, clamped
/// exponentiated scale and the symmetric cross-entropy.
pub fn clip_loss_composed(seed: u64) -> f64 {
    let mut r = rng(seed);
    let img = uniform(&mut r, &[6, 5]);
    let txt = uniform(&mut r, &[6, 5]);
    let logit = Tensor::new(vec![1], vec![r.random_range(0.5..2.5)]).unwrap();
    gradcheck(&[img, txt, logit], |g, v| {
        let i = g.l2_normalize(v[0], 1e-12);
        let t = g.l2_normalize(v[1], 1e-12);
        let e = g.exp(v[2]);
        let s = g.clamp_max(e, 100.0);
        let sim = similarity(g, i, t, s).unwrap();
        clip_loss(g, &sim).unwrap()
    })
}

/// Loss of the full dual encoder at f64 for the given parameter values.
pub fn model_loss(
    model: &DualEncoderModel,
    params: &[Tensor<f64>],
    images: &Tensor<f64>,
    tokens: &TokenBatch,
    with_grads: bool,
) -> (f64, Option<Vec<Option<Vec<f64>>>>) {
    let mut g = Graph::<f64>::new();
    let trainable = vec![true; params.len()];
    let mut b = Binder::new(params, &trainable);
    let fi = model.image_features_graph(&mut g, &mut b, images).unwrap();
    let ft = model.text_features_graph(&mut g, &mut b, tokens).unwrap();
    let i = model.project_image_graph(&mut g, &mut b, fi).unwrap();
    let t = model.project_text_graph(&mut g, &mut b, ft).unwrap();
    let s = model.logit_scale_graph(&mut g, &mut b);
    let sim = similarity(&mut g, i, t, s).unwrap();
    let loss = clip_loss(&mut g, &sim).unwrap();
    let value = g.value(loss).data()[0];
    if !with_grads {
        return (value, None);
    }
    g.backward(loss).unwrap();
    (value, Some(b.grads(&mut g)))
}

/// Every parameter of a two-layer dual encoder against finite differences.
/// Returns the worst error and the number of coordinates checked.
pub fn full_model(seed: u64) -> (f64, usize) {
    let cfg = micro_config();
    let model = DualEncoderModel::new(cfg.clone(), seed).unwrap();
    let mut r = rng(seed);
    // move away from the zero/one initial values so no term is degenerate
    let params: Vec<Tensor<f64>> = model
        .params()
        .iter()
        .map(|p| {
            let mut t = p.cast::<f64>();
            t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
            t
        })
        .collect();
    let n = 4;
    let images = uniform(&mut r, &[n, 3, cfg.image_size, cfg.image_size]);
    let tokens = random_tokens(&mut r, n, cfg.vocab_size, cfg.max_text_len);
    super::sampled_gradcheck(&params, usize::MAX, seed, |p, grads| model_loss(&model, p, &images, &tokens, grads))
}
