//! Tiny pre-norm GPT-style decoder: learned positional embeddings, GELU MLP,
//! bias-free attention projections.
//!
//! Linear weights are stored `out × in` and applied as `y = x · Wᵀ`, so a
//! weight row is one output channel and a weight column is one input channel.

mod decode;
mod forward;
mod io;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Matrix;

pub(crate) use decode::Decoder;
pub use forward::{forward, forward_with_taps, nll_per_token, ActivationTap};
pub(crate) use forward::{forward_last_logits, forward_trace, gelu_grad, BlockTrace, LnCache};
pub use io::{load_weights, save_weights};

pub(crate) const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Byte vocabulary plus BOS, d_model 128, two blocks, four heads.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: 257,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.max_seq_len < 2 {
            return bad(format!(
                "max_seq_len must be >= 2, got {}",
                self.max_seq_len
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return bad("d_model, n_heads, d_ff and n_layers must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn has_bos(&self) -> bool {
        self.vocab_size > crate::tokenizer::BOS as usize
    }

    /// Every tensor name with its shape, in name order.
    pub fn tensor_shapes(&self) -> BTreeMap<String, (usize, usize)> {
        let d = self.d_model;
        let mut shapes = BTreeMap::new();
        shapes.insert("tok_emb".to_string(), (self.vocab_size, d));
        shapes.insert("pos_emb".to_string(), (self.max_seq_len, d));
        for b in 0..self.n_layers {
            for ln in ["ln1", "ln2"] {
                shapes.insert(format!("layers.{b}.{ln}.gain"), (1, d));
                shapes.insert(format!("layers.{b}.{ln}.bias"), (1, d));
            }
            for kind in LinearKind::ALL {
                shapes.insert(LayerId::new(b, kind).to_string(), kind.shape(self));
            }
        }
        shapes.insert("ln_f.gain".to_string(), (1, d));
        shapes.insert("ln_f.bias".to_string(), (1, d));
        shapes.insert("unembed".to_string(), (self.vocab_size, d));
        shapes
    }

    /// The `6 · n_layers` prunable linear layers, block by block.
    pub fn prunable_layers(&self) -> Vec<LayerId> {
        (0..self.n_layers)
            .flat_map(|b| LinearKind::ALL.into_iter().map(move |k| LayerId::new(b, k)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LinearKind {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpUp,
    MlpDown,
}

impl LinearKind {
    pub const ALL: [LinearKind; 6] = [
        LinearKind::AttnQ,
        LinearKind::AttnK,
        LinearKind::AttnV,
        LinearKind::AttnO,
        LinearKind::MlpUp,
        LinearKind::MlpDown,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            LinearKind::AttnQ => "attn_q",
            LinearKind::AttnK => "attn_k",
            LinearKind::AttnV => "attn_v",
            LinearKind::AttnO => "attn_o",
            LinearKind::MlpUp => "mlp_up",
            LinearKind::MlpDown => "mlp_down",
        }
    }

    /// `(out, in)`.
    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            LinearKind::MlpUp => (cfg.d_ff, cfg.d_model),
            LinearKind::MlpDown => (cfg.d_model, cfg.d_ff),
            _ => (cfg.d_model, cfg.d_model),
        }
    }
}

/// A prunable linear layer: block index plus projection kind. Displays as the
/// tensor name, e.g. `layers.1.mlp_down`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub block: usize,
    pub kind: LinearKind,
}

impl LayerId {
    pub fn new(block: usize, kind: LinearKind) -> Self {
        LayerId { block, kind }
    }

    pub fn parse(name: &str, cfg: &ModelConfig) -> Result<Self> {
        let unknown = || Error::UnknownLayer(name.to_string());
        let rest = name.strip_prefix("layers.").ok_or_else(unknown)?;
        let (block, suffix) = rest.split_once('.').ok_or_else(unknown)?;
        let block: usize = block.parse().map_err(|_| unknown())?;
        if block >= cfg.n_layers {
            return Err(unknown());
        }
        let kind = LinearKind::ALL
            .into_iter()
            .find(|k| k.suffix() == suffix)
            .ok_or_else(unknown)?;
        Ok(LayerId { block, kind })
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.block, self.kind.suffix())
    }
}

/// Named f32 tensors of one model, always complete and shape-checked.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightContainer {
    config: ModelConfig,
    tensors: BTreeMap<String, Matrix>,
}

impl WeightContainer {
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Matrix>) -> Result<Self> {
        config.validate()?;
        let shapes = config.tensor_shapes();
        for (name, &shape) in &shapes {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: shape,
                    found: t.shape(),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !shapes.contains_key(*k)) {
            return Err(Error::invalid(format!("unexpected tensor `{extra}`")));
        }
        Ok(WeightContainer { config, tensors })
    }

    /// All tensors zero, including layer-norm gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .tensor_shapes()
            .into_iter()
            .map(|(name, (r, c))| (name, Matrix::zeros(r, c)))
            .collect();
        Ok(WeightContainer { config, tensors })
    }

    /// Normal(0, `std`) matrices, unit layer-norm gains, zero biases.
    pub fn init_random(config: ModelConfig, std: f32, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, (r, c)) in config.tensor_shapes() {
            let m = if name.ends_with(".gain") {
                Matrix::filled(r, c, 1.0)
            } else if name.ends_with(".bias") {
                Matrix::zeros(r, c)
            } else {
                Matrix::from_fn(r, c, |_, _| rng.normal(0.0, std))
            };
            tensors.insert(name, m);
        }
        Ok(WeightContainer { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Matrix> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn layer(&self, id: LayerId) -> &Matrix {
        &self.tensors[&id.to_string()]
    }

    pub(crate) fn t(&self, name: &str) -> &Matrix {
        &self.tensors[name]
    }

    pub(crate) fn t_mut(&mut self, name: &str) -> &mut Matrix {
        self.tensors.get_mut(name).expect("tensor present")
    }

    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: slot.shape(),
                found: value.shape(),
            });
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        *slot = value;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }
}
