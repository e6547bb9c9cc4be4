//! Lion, 8-bit Lion and AdamW, plus the warmup/cosine learning-rate schedule.

mod quant;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use quant::{dequantize_block, quantize_block, QuantizedBuffer, DEFAULT_BLOCK_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LionConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
}

impl Default for LionConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
        }
    }
}

impl LionConfig {
    // negated comparisons so that NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lion lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("lion {name} must be in (0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// `sign` with `sign(0) = 0`.
#[inline]
fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One Lion update of a single tensor, in place.
pub fn lion_step(param: &mut [f32], grad: &[f32], momentum: &mut [f32], cfg: &LionConfig, lr: f32) {
    let (b1, b2, wd) = (cfg.beta1, cfg.beta2, cfg.weight_decay);
    for ((p, &g), m) in param.iter_mut().zip(grad).zip(momentum.iter_mut()) {
        let c = b1 * *m + (1.0 - b1) * g;
        *p -= lr * (sign(c) + wd * *p);
        *m = b2 * *m + (1.0 - b2) * g;
    }
}

/// Lion with the momentum held as a [`QuantizedBuffer`]: dequantised before
/// the update and requantised after it.
pub fn lion8_step(param: &mut [f32], grad: &[f32], state: &mut QuantizedBuffer, cfg: &LionConfig, lr: f32, scratch: &mut Vec<f32>) {
    scratch.resize(state.len(), 0.0);
    quant::dequantize_into(state, scratch);
    lion_step(param, grad, scratch, cfg, lr);
    quant::quantize_into(scratch, state);
}

/// One bias-corrected AdamW update; `step` is 1-based.
pub fn adamw_step(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    cfg: &AdamWConfig,
    lr: f32,
) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - (b1 as f64).powi(step as i32);
    let bc2 = 1.0 - (b2 as f64).powi(step as i32);
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
    }
}

/// Linear warmup to `base_lr` over `warmup_steps`, then cosine decay to 0 at
/// `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    Lion,
    Lion8,
    AdamW,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Lion => "lion",
            OptimizerKind::Lion8 => "lion8",
            OptimizerKind::AdamW => "adamw",
        }
    }

    fn code(self) -> f32 {
        match self {
            OptimizerKind::Lion => 0.0,
            OptimizerKind::Lion8 => 1.0,
            OptimizerKind::AdamW => 2.0,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lion" => Ok(OptimizerKind::Lion),
            "lion8" | "lion-8bit" => Ok(OptimizerKind::Lion8),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (expected lion, lion8 or adamw)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Slot {
    Momentum(Vec<f32>),
    Quantized(QuantizedBuffer),
    Adam { m: Vec<f32>, v: Vec<f32> },
}

/// Per-parameter optimizer state for a whole model.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lion: LionConfig,
    adam: AdamWConfig,
    slots: Vec<Slot>,
    step: u64,
}

impl Optimizer {
    /// Zero-initialised state shaped like `params`. `lion` is used by both
    /// Lion variants, `adam` by AdamW; the unused one is ignored.
    pub fn new(kind: OptimizerKind, lion: LionConfig, adam: AdamWConfig, block_size: usize, params: &[Tensor]) -> Result<Self> {
        if kind == OptimizerKind::AdamW {
            LionConfig {
                lr: adam.lr,
                beta1: adam.beta1,
                beta2: adam.beta2,
                weight_decay: adam.weight_decay,
            }
            .validate()?;
        } else {
            lion.validate()?;
        }
        if block_size == 0 {
            return Err(Error::Config("block_size must be >= 1".into()));
        }
        let slots = params
            .iter()
            .map(|p| match kind {
                OptimizerKind::Lion => Slot::Momentum(vec![0.0; p.numel()]),
                OptimizerKind::Lion8 => Slot::Quantized(QuantizedBuffer::zeros(p.numel(), block_size)),
                OptimizerKind::AdamW => Slot::Adam {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                },
            })
            .collect();
        Ok(Self {
            kind,
            lion,
            adam,
            slots,
            step: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn base_lr(&self) -> f32 {
        match self.kind {
            OptimizerKind::AdamW => self.adam.lr,
            _ => self.lion.lr,
        }
    }

    /// Applies one update with learning rate `lr` to every trainable
    /// parameter. A missing gradient counts as zero. Fails before touching
    /// anything if a trainable gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f32>>], trainable: &[bool], names: &[String], lr: f32) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != params.len() || trainable.len() != params.len() {
            return Err(Error::dim("optimizer_step", &[self.slots.len()], &[params.len(), grads.len(), trainable.len()]));
        }
        for (i, g) in grads.iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            if let Some(g) = g {
                if g.len() != params[i].numel() {
                    return Err(Error::dim("optimizer_step", params[i].shape(), &[g.len()]));
                }
                if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Training(format!(
                        "non-finite gradient in parameter `{}` at element {bad}",
                        names.get(i).map(String::as_str).unwrap_or("?")
                    )));
                }
            }
        }
        self.step += 1;
        let mut zeros = Vec::new();
        let mut scratch = Vec::new();
        for (i, p) in params.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let g: &[f32] = match &grads[i] {
                Some(g) => g,
                None => {
                    zeros.resize(p.numel(), 0.0);
                    &zeros
                }
            };
            match &mut self.slots[i] {
                Slot::Momentum(m) => lion_step(p.data_mut(), g, m, &self.lion, lr),
                Slot::Quantized(q) => lion8_step(p.data_mut(), g, q, &self.lion, lr, &mut scratch),
                Slot::Adam { m, v } => adamw_step(p.data_mut(), g, m, v, self.step, &self.adam, lr),
            }
        }
        Ok(())
    }

    /// Bytes held by optimizer state buffers.
    pub fn state_bytes(&self) -> usize {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Momentum(m) => 4 * m.len(),
                Slot::Quantized(q) => q.memory_bytes(),
                Slot::Adam { m, v } => 4 * (m.len() + v.len()),
            })
            .sum()
    }

    /// Momentum of parameter `i`, dequantised if needed.
    pub fn momentum(&self, i: usize) -> Vec<f32> {
        match &self.slots[i] {
            Slot::Momentum(m) => m.clone(),
            Slot::Quantized(q) => dequantize_block(q),
            Slot::Adam { m, .. } => m.clone(),
        }
    }

    /// Serialises state as named tensors for the checkpoint container.
    pub fn export(&self, names: &[String]) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("optim.kind".to_string(), Tensor::new(vec![1], vec![self.kind.code()]).unwrap()),
            ("optim.step".to_string(), Tensor::new(vec![1], vec![self.step as f32]).unwrap()),
        ];
        for (slot, name) in self.slots.iter().zip(names) {
            match slot {
                Slot::Momentum(m) => out.push((format!("optim.m.{name}"), vec_tensor(m.clone()))),
                Slot::Quantized(q) => {
                    let codes = q.codes.iter().map(|&c| c as f32).collect();
                    out.push((format!("optim.codes.{name}"), vec_tensor(codes)));
                    out.push((format!("optim.absmax.{name}"), vec_tensor(q.absmax.clone())));
                }
                Slot::Adam { m, v } => {
                    out.push((format!("optim.m.{name}"), vec_tensor(m.clone())));
                    out.push((format!("optim.v.{name}"), vec_tensor(v.clone())));
                }
            }
        }
        out
    }

    /// Restores state written by [`Optimizer::export`].
    pub fn import(&mut self, names: &[String], lookup: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        let get = |key: String| lookup(&key).ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")));
        let kind = get("optim.kind".into())?.data()[0];
        if kind != self.kind.code() {
            return Err(Error::Mismatch(format!(
                "checkpoint optimizer code {kind} does not match `{}`",
                self.kind
            )));
        }
        self.step = get("optim.step".into())?.data()[0] as u64;
        for (slot, name) in self.slots.iter_mut().zip(names) {
            match slot {
                Slot::Momentum(m) => copy_checked(m, &get(format!("optim.m.{name}"))?)?,
                Slot::Quantized(q) => {
                    let codes = get(format!("optim.codes.{name}"))?;
                    let absmax = get(format!("optim.absmax.{name}"))?;
                    if codes.numel() != q.codes.len() || absmax.numel() != q.absmax.len() {
                        return Err(Error::Format(format!("quantized state for `{name}` has wrong size")));
                    }
                    q.codes = codes.data().iter().map(|&c| c as i8).collect();
                    q.absmax = absmax.data().to_vec();
                }
                Slot::Adam { m, v } => {
                    copy_checked(m, &get(format!("optim.m.{name}"))?)?;
                    copy_checked(v, &get(format!("optim.v.{name}"))?)?;
                }
            }
        }
        Ok(())
    }
}

fn vec_tensor(v: Vec<f32>) -> Tensor {
    Tensor::new(vec![v.len()], v).expect("1-d")
}

fn copy_checked(dst: &mut [f32], src: &Tensor) -> Result<()> {
    if dst.len() != src.numel() {
        return Err(Error::Format(format!(
            "optimizer state has {} elements, expected {}",
            src.numel(),
            dst.len()
        )));
    }
    dst.copy_from_slice(src.data());
    Ok(())
}
