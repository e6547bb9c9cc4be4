//! Dual-encoder model: a patch transformer for images, a token transformer
//! for text, one linear projection per tower into a shared space, and a
//! learnable log-temperature.

pub mod checkpoint;
mod config;
mod encoder;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ModelConfig, PresetPair, SizePreset, MLP_RATIO};
pub use encoder::TokenBatch;

/// Initial log-temperature, `ln(1 / 0.07)`.
pub const LOGIT_SCALE_INIT: f64 = 2.659_260_036_932_778;
/// Upper bound on the multiplicative logit scale.
pub const LOGIT_SCALE_MAX: f64 = 100.0;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
/// Token embeddings start wider so that rare per-language tokens separate early.
pub const TOKEN_INIT_STD: f64 = 0.1;
pub(crate) const NORMALIZE_EPS: f64 = 1e-12;

/// Which parameter subsets are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FreezeRegime {
    /// Everything trainable.
    Full,
    /// Image encoder frozen.
    TextEncoder,
    /// Both encoders frozen; projections and logit scale train.
    ProjectionOnly,
}

impl FreezeRegime {
    pub const ALL: [FreezeRegime; 3] = [
        FreezeRegime::Full,
        FreezeRegime::TextEncoder,
        FreezeRegime::ProjectionOnly,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FreezeRegime::Full => "full",
            FreezeRegime::TextEncoder => "text-encoder",
            FreezeRegime::ProjectionOnly => "projection",
        }
    }

    fn trains(self, component: Component) -> bool {
        match self {
            FreezeRegime::Full => true,
            FreezeRegime::TextEncoder => component != Component::ImageEncoder,
            FreezeRegime::ProjectionOnly => !matches!(
                component,
                Component::ImageEncoder | Component::TextEncoder
            ),
        }
    }
}

impl fmt::Display for FreezeRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FreezeRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(FreezeRegime::Full),
            "text-encoder" | "text_encoder" | "textencoder" => Ok(FreezeRegime::TextEncoder),
            "projection" | "projection-only" | "projection_only" => Ok(FreezeRegime::ProjectionOnly),
            other => Err(Error::Config(format!(
                "unknown regime `{other}` (expected full, text-encoder or projection)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    ImageEncoder,
    TextEncoder,
    VisualProjection,
    TextProjection,
    LogitScale,
}

impl Component {
    pub fn of(name: &str) -> Component {
        if name.starts_with("image.") {
            Component::ImageEncoder
        } else if name.starts_with("text.") {
            Component::TextEncoder
        } else if name == "visual_projection" {
            Component::VisualProjection
        } else if name == "text_projection" {
            Component::TextProjection
        } else {
            Component::LogitScale
        }
    }
}

/// Exact parameter counts per component.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub image_encoder: usize,
    pub text_encoder: usize,
    pub visual_projection: usize,
    pub text_projection: usize,
    pub logit_scale: usize,
    pub total: usize,
}

impl ParameterCounts {
    pub fn projections(&self) -> usize {
        self.visual_projection + self.text_projection
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BlockLayout {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub q_weight: usize,
    pub q_bias: usize,
    pub k_weight: usize,
    pub k_bias: usize,
    pub v_weight: usize,
    pub v_bias: usize,
    pub o_weight: usize,
    pub o_bias: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub fc1_weight: usize,
    pub fc1_bias: usize,
    pub fc2_weight: usize,
    pub fc2_bias: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct TowerLayout {
    pub blocks: Vec<BlockLayout>,
    pub heads: usize,
    pub final_gain: usize,
    pub final_bias: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub patch_weight: usize,
    pub patch_bias: usize,
    pub image_pos: usize,
    pub image_tower: TowerLayout,
    pub token_embed: usize,
    pub text_pos: usize,
    pub text_tower: TowerLayout,
    pub visual_projection: usize,
    pub text_projection: usize,
    pub logit_scale: usize,
}

enum Init {
    Normal,
    NormalStd(f64),
    Zeros,
    Ones,
    Const(f64),
}

struct Builder {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let mut t = Tensor::zeros(shape);
        match init {
            Init::Zeros => {}
            Init::Ones => t.data_mut().iter_mut().for_each(|v| *v = 1.0),
            Init::Const(c) => t.data_mut().iter_mut().for_each(|v| *v = c as f32),
            Init::Normal => {
                for v in t.data_mut() {
                    *v = self.normal.sample(&mut self.rng) as f32;
                }
            }
            Init::NormalStd(std) => {
                let scale = std / INIT_STD;
                for v in t.data_mut() {
                    *v = (scale * self.normal.sample(&mut self.rng)) as f32;
                }
            }
        }
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn tower(&mut self, prefix: &str, layers: usize, dim: usize, heads: usize) -> TowerLayout {
        let hidden = dim * MLP_RATIO;
        let mut blocks = Vec::with_capacity(layers);
        for i in 0..layers {
            let p = format!("{prefix}.blocks.{i}");
            blocks.push(BlockLayout {
                ln1_gain: self.add(format!("{p}.ln1.gain"), vec![dim], Init::Ones),
                ln1_bias: self.add(format!("{p}.ln1.bias"), vec![dim], Init::Zeros),
                q_weight: self.add(format!("{p}.attn.q.weight"), vec![dim, dim], Init::Normal),
                q_bias: self.add(format!("{p}.attn.q.bias"), vec![dim], Init::Zeros),
                k_weight: self.add(format!("{p}.attn.k.weight"), vec![dim, dim], Init::Normal),
                k_bias: self.add(format!("{p}.attn.k.bias"), vec![dim], Init::Zeros),
                v_weight: self.add(format!("{p}.attn.v.weight"), vec![dim, dim], Init::Normal),
                v_bias: self.add(format!("{p}.attn.v.bias"), vec![dim], Init::Zeros),
                o_weight: self.add(format!("{p}.attn.o.weight"), vec![dim, dim], Init::Normal),
                o_bias: self.add(format!("{p}.attn.o.bias"), vec![dim], Init::Zeros),
                ln2_gain: self.add(format!("{p}.ln2.gain"), vec![dim], Init::Ones),
                ln2_bias: self.add(format!("{p}.ln2.bias"), vec![dim], Init::Zeros),
                fc1_weight: self.add(format!("{p}.mlp.fc1.weight"), vec![dim, hidden], Init::Normal),
                fc1_bias: self.add(format!("{p}.mlp.fc1.bias"), vec![hidden], Init::Zeros),
                fc2_weight: self.add(format!("{p}.mlp.fc2.weight"), vec![hidden, dim], Init::Normal),
                fc2_bias: self.add(format!("{p}.mlp.fc2.bias"), vec![dim], Init::Zeros),
            });
        }
        TowerLayout {
            blocks,
            heads,
            final_gain: self.add(format!("{prefix}.ln_final.gain"), vec![dim], Init::Ones),
            final_bias: self.add(format!("{prefix}.ln_final.bias"), vec![dim], Init::Zeros),
        }
    }
}

/// All learnable parameters plus the per-parameter trainable mask.
#[derive(Clone, Debug)]
pub struct DualEncoderModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    trainable: Vec<bool>,
    layout: Layout,
}

impl DualEncoderModel {
    /// Randomly initialised model: Gaussian(0, 0.02) weights, Gaussian(0, 0.1)
    /// token embeddings, zero biases and position embeddings, unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let c = &config;
        let patch_weight = b.add("image.patch_embed.weight".into(), vec![c.patch_dim(), c.image_dim], Init::Normal);
        let patch_bias = b.add("image.patch_embed.bias".into(), vec![c.image_dim], Init::Zeros);
        let image_pos = b.add("image.pos_embed".into(), vec![c.num_patches(), c.image_dim], Init::Zeros);
        let image_tower = b.tower("image", c.image_layers, c.image_dim, c.image_heads);
        let token_embed = b.add("text.token_embed".into(), vec![c.vocab_size, c.text_dim], Init::NormalStd(TOKEN_INIT_STD));
        let text_pos = b.add("text.pos_embed".into(), vec![c.max_text_len, c.text_dim], Init::Zeros);
        let text_tower = b.tower("text", c.text_layers, c.text_dim, c.text_heads);
        let visual_projection = b.add("visual_projection".into(), vec![c.image_dim, c.embed_dim], Init::Normal);
        let text_projection = b.add("text_projection".into(), vec![c.text_dim, c.embed_dim], Init::Normal);
        let logit_scale = b.add("logit_scale".into(), vec![1], Init::Const(LOGIT_SCALE_INIT));
        let layout = Layout {
            patch_weight,
            patch_bias,
            image_pos,
            image_tower,
            token_embed,
            text_pos,
            text_tower,
            visual_projection,
            text_projection,
            logit_scale,
        };
        let n = b.tensors.len();
        Ok(Self {
            config,
            names: b.names,
            params: b.tensors,
            trainable: vec![true; n],
            layout,
        })
    }

    /// Rebuilds a model from named tensors, checking every expected
    /// parameter is present with the right shape.
    pub fn from_named(config: ModelConfig, named: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        for (i, name) in model.names.iter().enumerate() {
            let (_, t) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
            if t.shape() != model.params[i].shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params[i].shape()
                )));
            }
            model.params[i] = t.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.params[i])
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn component(&self, index: usize) -> Component {
        Component::of(&self.names[index])
    }

    pub fn apply_freeze(&mut self, regime: FreezeRegime) {
        for (i, flag) in self.trainable.iter_mut().enumerate() {
            *flag = regime.trains(Component::of(&self.names[i]));
        }
    }

    /// Multiplicative logit scale actually used: `min(exp(logit_scale), 100)`.
    pub fn logit_scale(&self) -> f32 {
        (self.params[self.layout.logit_scale].data()[0] as f64)
            .exp()
            .min(LOGIT_SCALE_MAX) as f32
    }

    pub fn count_parameters(&self) -> ParameterCounts {
        let mut c = ParameterCounts::default();
        for (i, t) in self.params.iter().enumerate() {
            let n = t.numel();
            match self.component(i) {
                Component::ImageEncoder => c.image_encoder += n,
                Component::TextEncoder => c.text_encoder += n,
                Component::VisualProjection => c.visual_projection += n,
                Component::TextProjection => c.text_projection += n,
                Component::LogitScale => c.logit_scale += n,
            }
            c.total += n;
        }
        c
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(p, _)| p.numel())
            .sum()
    }

    /// Whether every parameter of the given component is frozen.
    pub fn is_frozen(&self, component: Component) -> bool {
        self.trainable
            .iter()
            .enumerate()
            .filter(|(i, _)| self.component(*i) == component)
            .all(|(_, &t)| !t)
    }

    pub fn logit_scale_index(&self) -> usize {
        self.layout.logit_scale
    }
}

/// Lazily inserts model parameters into a graph as leaves.
pub struct Binder<'a, T: Element> {
    values: &'a [Tensor<T>],
    trainable: &'a [bool],
    vars: Vec<Option<Var>>,
}

impl<'a, T: Element> Binder<'a, T> {
    pub fn new(values: &'a [Tensor<T>], trainable: &'a [bool]) -> Self {
        Self {
            values,
            trainable,
            vars: vec![None; values.len()],
        }
    }

    pub fn get(&mut self, g: &mut Graph<T>, index: usize) -> Var {
        if let Some(v) = self.vars[index] {
            return v;
        }
        let v = g.leaf(self.values[index].clone(), self.trainable[index]);
        self.vars[index] = Some(v);
        v
    }

    /// Graph variable for parameter `index`, if it was used.
    pub fn var(&self, index: usize) -> Option<Var> {
        self.vars[index]
    }

    /// Per-parameter gradients after [`Graph::backward`]. Unused or frozen
    /// parameters yield `None`.
    pub fn grads(&self, g: &mut Graph<T>) -> Vec<Option<Vec<T>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| g.take_grad(v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::from_presets("b-b".parse().unwrap(), 8, 4, 20, 6).unwrap()
    }

    #[test]
    fn freeze_regimes() {
        let mut m = DualEncoderModel::new(tiny(), 1).unwrap();
        m.apply_freeze(FreezeRegime::Full);
        assert!(m.trainable_mask().iter().all(|&t| t));
        m.apply_freeze(FreezeRegime::TextEncoder);
        assert!(m.is_frozen(Component::ImageEncoder));
        assert!(!m.is_frozen(Component::TextEncoder));
        m.apply_freeze(FreezeRegime::ProjectionOnly);
        let c = m.config().clone();
        assert_eq!(
            m.trainable_parameter_count(),
            c.image_dim * c.embed_dim + c.text_dim * c.embed_dim + 1
        );
    }

    #[test]
    fn counts_sum_to_total() {
        let m = DualEncoderModel::new(tiny(), 1).unwrap();
        let c = m.count_parameters();
        assert_eq!(
            c.total,
            c.image_encoder + c.text_encoder + c.visual_projection + c.text_projection + c.logit_scale
        );
        assert_eq!(c.logit_scale, 1);
    }

    #[test]
    fn deeper_text_tower_has_more_parameters() {
        let base = tiny();
        let mut deeper = base.clone();
        deeper.text_layers *= 2;
        let a = DualEncoderModel::new(base, 0).unwrap().count_parameters();
        let b = DualEncoderModel::new(deeper, 0).unwrap().count_parameters();
        assert!(b.text_encoder > a.text_encoder);
        assert_eq!(a.image_encoder, b.image_encoder);
    }

    #[test]
    fn logit_scale_initial_value() {
        let m = DualEncoderModel::new(tiny(), 0).unwrap();
        assert!((m.logit_scale() - 14.2857).abs() < 1e-3);
    }

    #[test]
    fn regime_parsing() {
        assert_eq!("text-encoder".parse::<FreezeRegime>().unwrap(), FreezeRegime::TextEncoder);
        assert_eq!("projection".parse::<FreezeRegime>().unwrap(), FreezeRegime::ProjectionOnly);
        assert!("frozen".parse::<FreezeRegime>().is_err());
    }
}
