#![allow(dead_code)]

pub mod ops;
pub mod oracle;

use std::path::Path;

use clipforge::model::{ModelConfig, TokenBatch};
use clipforge::run::{cmd_datagen, DatagenOptions, RunConfig};
use clipforge::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step. At f64 both truncation and rounding error stay
/// near 1e-11 for the values these checks see.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor so that gradients which are zero up to rounding do not
/// produce huge relative errors.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in [-1, 1].
pub fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()).unwrap()
}

/// Reduces `y` to a scalar with fixed pseudo-random weights, so every output
/// element reaches the gradient.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let shape = g.shape(y).to_vec();
    let w = g.constant(uniform(&mut rng(seed ^ 0x5eed), &shape));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

/// Largest relative error between backprop and central differences over
/// every element of every input. `f` maps the input leaves to a scalar.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let value = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let y = f(&mut g, &vs);
        g.value(y).data()[0]
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vs);
    assert_eq!(g.value(y).numel(), 1, "gradcheck needs a scalar");
    g.backward(y).unwrap();
    let analytic: Vec<Vec<f64>> = vs
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for (j, &a) in analytic[i].iter().enumerate() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + FD_STEP;
            let up = value(&work);
            work[i].data_mut()[j] = x - FD_STEP;
            let down = value(&work);
            work[i].data_mut()[j] = x;
            worst = worst.max(rel_error(a, (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Scalar-loss function of flat parameter values, for sampled checks on
/// models too large to perturb every coordinate.
pub fn sampled_gradcheck<F>(params: &[Tensor<f64>], per_tensor: usize, seed: u64, f: F) -> (f64, usize)
where
    F: Fn(&[Tensor<f64>], bool) -> (f64, Option<Vec<Option<Vec<f64>>>>),
{
    let (_, grads) = f(params, true);
    let grads = grads.expect("gradients requested");
    let mut r = rng(seed);
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..params.len() {
        let n = params[i].numel();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| r.random_range(0..n)).collect()
        };
        for j in picks {
            let x = params[i].data()[j];
            work[i].data_mut()[j] = x + FD_STEP;
            let up = f(&work, false).0;
            work[i].data_mut()[j] = x - FD_STEP;
            let down = f(&work, false).0;
            work[i].data_mut()[j] = x;
            let a = grads[i].as_ref().map(|g| g[j]).unwrap_or(0.0);
            worst = worst.max(rel_error(a, (up - down) / (2.0 * FD_STEP)));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Two-layer towers small enough to finite-difference every parameter.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        image_size: 4,
        patch_size: 2,
        channels: 3,
        image_layers: 2,
        image_heads: 2,
        image_dim: 8,
        text_layers: 2,
        text_heads: 2,
        text_dim: 8,
        vocab_size: 10,
        max_text_len: 5,
        embed_dim: 4,
    }
}

pub fn random_images(rng: &mut impl Rng, n: usize, side: usize) -> Tensor {
    let len = n * 3 * side * side;
    Tensor::new(vec![n, 3, side, side], (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random token rows `BOS w.. EOS` with lengths in `3..=max_len`.
pub fn random_tokens(rng: &mut impl Rng, n: usize, vocab: usize, max_len: usize) -> TokenBatch {
    let mut rows = Vec::new();
    let mut lens = Vec::new();
    for _ in 0..n {
        let len = rng.random_range(3..=max_len);
        let mut row = vec![1];
        row.extend((0..len - 2).map(|_| rng.random_range(4..vocab)));
        row.push(2);
        rows.push(row);
        lens.push(len);
    }
    TokenBatch::new(&rows, &lens).unwrap()
}

/// Synthetic corpus written to `dir` with the datagen command defaults
/// except for the arguments.
pub fn make_dataset(dir: &Path, images: usize, languages: usize, image_size: usize, seed: u64) {
    cmd_datagen(&DatagenOptions {
        output: dir.to_path_buf(),
        images,
        languages,
        image_size,
        seed,
        ..Default::default()
    })
    .unwrap();
}

/// Small fast config: b-b towers, 8x8 images, two epochs.
pub fn tiny_config(dataset: &Path, output: &Path) -> RunConfig {
    RunConfig {
        preset: "b-b".parse().unwrap(),
        batch_size: 16,
        epochs: 2,
        image_size: 8,
        patch_size: 4,
        dataset: dataset.to_path_buf(),
        output: output.to_path_buf(),
        ..Default::default()
    }
}

/// Runs `steps` optimizer steps under `regime` on `cfg` and compares every
/// parameter with its initial bits. Returns, per component, whether it
/// stayed bit-identical.
pub fn steps_unchanged(
    cfg: &RunConfig,
    regime: clipforge::model::FreezeRegime,
    steps: usize,
) -> Vec<(clipforge::model::Component, bool)> {
    use clipforge::model::Component;
    use clipforge::run::{Trainer, TrainingData};
    let cfg = RunConfig { regime, ..cfg.clone() };
    let data = TrainingData::load(&cfg).unwrap();
    let n = data.train.len();
    let n_lang = data.train.dataset.languages().len();
    let mut t = Trainer::new(cfg.clone(), data).unwrap();
    let before: Vec<Vec<u32>> = t.model().params().iter().map(|p| p.data().iter().map(|v| v.to_bits()).collect()).collect();
    for s in 0..steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|j| (s * cfg.batch_size + j) % n).collect();
        let langs: Vec<usize> = idx.iter().map(|&i| (i + s) % n_lang).collect();
        t.step(&idx, &langs).unwrap();
    }
    let m = t.model();
    let comps = [
        Component::ImageEncoder,
        Component::TextEncoder,
        Component::VisualProjection,
        Component::TextProjection,
        Component::LogitScale,
    ];
    comps
        .iter()
        .map(|&c| {
            let same = (0..m.params().len())
                .filter(|&i| m.component(i) == c)
                .all(|i| m.params()[i].data().iter().map(|v| v.to_bits()).eq(before[i].iter().copied()));
            (c, same)
        })
        .collect()
}
