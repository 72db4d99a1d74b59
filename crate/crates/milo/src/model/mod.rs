//! Decoder-only transformer: config, parameters, deterministic init.
//!
//! Pre-RMS-norm blocks with causal attention and a gated feed-forward,
//! rotary positions by default (learned absolute positions behind a flag),
//! untied output projection by default (tying behind a flag). No dropout,
//! so identical params and tokens always produce identical logits.
//!
//! Parameter init draws from N(0, 1/dim) in a fixed tensor order from the
//! config's seed via the "init" stream; normalization gains start at 1 and
//! consume no draws. Changing the draw order is a format break for
//! seed-reproducibility, like changing the checkpoint layout.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, OptimizerSnapshot};
pub use forward::ForwardPass;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng::{stream_rng, STREAM_INIT};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    #[default]
    Rotary,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub positions: Positions,
    #[serde(default)]
    pub tied_output: bool,
}

impl ModelConfig {
    /// dim 64, 2 layers, 2 heads, vocab 512, sequences of 128.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 512,
            dim: 64,
            n_layers: 2,
            n_heads: 2,
            seq_len: 128,
            seed: 0,
            activation: Activation::Silu,
            positions: Positions::Rotary,
            tied_output: false,
        }
    }

    /// dim 128, 4 layers, 4 heads, vocab 2048, sequences of 256.
    pub fn small() -> Self {
        ModelConfig {
            vocab_size: 2048,
            dim: 128,
            n_layers: 4,
            n_heads: 4,
            seq_len: 256,
            ..Self::tiny()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.dim == 0 || self.n_heads == 0 {
            return bad("dim and n_heads must be positive".into());
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "dim {} not divisible by n_heads {}",
                self.dim, self.n_heads
            ));
        }
        if self.positions == Positions::Rotary && !(self.dim / self.n_heads).is_multiple_of(2) {
            return bad(format!(
                "rotary positions need an even head dim, got {}",
                self.dim / self.n_heads
            ));
        }
        if self.seq_len == 0 {
            return bad("seq_len must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// Feed-forward hidden width: 8/3 * dim rounded up to a multiple of 16.
    pub fn ffn_hidden(&self) -> usize {
        let target = (8 * self.dim).div_ceil(3);
        target.div_ceil(16) * 16
    }
}

/// Exact parameter count for a config, as a closed form over shapes.
pub fn count_params(config: &ModelConfig) -> u64 {
    let n = config.vocab_size as u64;
    let d = config.dim as u64;
    let f = config.ffn_hidden() as u64;
    let ffn_in = match config.activation {
        Activation::Silu => 2 * d * f,
        Activation::Gelu => d * f,
    };
    let per_layer = 2 * d + 4 * d * d + ffn_in + f * d;
    let mut total = n * d + config.n_layers as u64 * per_layer;
    if config.positions == Positions::Learned {
        total += config.seq_len as u64 * d;
    }
    if config.n_layers >= 1 {
        total += d;
    }
    if !config.tied_output {
        total += n * d;
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w1: Tensor,
    /// Gate projection; present only for the gated (SiLU) feed-forward.
    pub w3: Option<Tensor>,
    pub w2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Tensor,
    /// Learned absolute position table; None under rotary positions.
    pub positions: Option<Tensor>,
    pub layers: Vec<LayerParams>,
    /// Final pre-output normalization; None for the zero-layer model.
    pub final_norm: Option<Tensor>,
    /// Untied output projection (vocab, dim); None when tied to the embedding.
    pub output: Option<Tensor>,
}

fn gain(dim: usize) -> Tensor {
    Tensor::param(&[dim], vec![1.0; dim])
}

/// Deterministic parameter init from `config.seed`.
pub fn init(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, STREAM_INIT);
    let normal = Normal::new(0.0, 1.0 / (config.dim as f64).sqrt())
        .map_err(|e| Error::InvalidConfig(format!("init distribution: {e}")))?;
    let mut draw = |shape: &[usize]| -> Tensor {
        let len = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
        Tensor::param(shape, data)
    };

    let d = config.dim;
    let f = config.ffn_hidden();
    let embedding = draw(&[config.vocab_size, d]);
    let positions = match config.positions {
        Positions::Learned => Some(draw(&[config.seq_len, d])),
        Positions::Rotary => None,
    };
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            attn_norm: gain(d),
            wq: draw(&[d, d]),
            wk: draw(&[d, d]),
            wv: draw(&[d, d]),
            wo: draw(&[d, d]),
            ffn_norm: gain(d),
            w1: draw(&[d, f]),
            w3: match config.activation {
                Activation::Silu => Some(draw(&[d, f])),
                Activation::Gelu => None,
            },
            w2: draw(&[f, d]),
        })
        .collect();
    let final_norm = (config.n_layers >= 1).then(|| gain(d));
    let output = (!config.tied_output).then(|| draw(&[config.vocab_size, d]));
    Ok(ModelParams {
        config: config.clone(),
        embedding,
        positions,
        layers,
        final_norm,
        output,
    })
}

impl ModelParams {
    /// Stable (name, tensor) listing; the order defines checkpoint layout
    /// and optimizer state pairing.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("embedding".into(), &self.embedding));
        if let Some(p) = &self.positions {
            out.push(("positions".into(), p));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.wq"), &l.wq));
            out.push((format!("layers.{i}.wk"), &l.wk));
            out.push((format!("layers.{i}.wv"), &l.wv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.ffn_norm"), &l.ffn_norm));
            out.push((format!("layers.{i}.w1"), &l.w1));
            if let Some(w3) = &l.w3 {
                out.push((format!("layers.{i}.w3"), w3));
            }
            out.push((format!("layers.{i}.w2"), &l.w2));
        }
        if let Some(fnorm) = &self.final_norm {
            out.push(("final_norm".into(), fnorm));
        }
        if let Some(output) = &self.output {
            out.push(("output".into(), output));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("embedding".into(), &mut self.embedding));
        if let Some(p) = &mut self.positions {
            out.push(("positions".into(), p));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &mut l.attn_norm));
            out.push((format!("layers.{i}.wq"), &mut l.wq));
            out.push((format!("layers.{i}.wk"), &mut l.wk));
            out.push((format!("layers.{i}.wv"), &mut l.wv));
            out.push((format!("layers.{i}.wo"), &mut l.wo));
            out.push((format!("layers.{i}.ffn_norm"), &mut l.ffn_norm));
            out.push((format!("layers.{i}.w1"), &mut l.w1));
            if let Some(w3) = &mut l.w3 {
                out.push((format!("layers.{i}.w3"), w3));
            }
            out.push((format!("layers.{i}.w2"), &mut l.w2));
        }
        if let Some(fnorm) = &mut self.final_norm {
            out.push(("final_norm".into(), fnorm));
        }
        if let Some(output) = &mut self.output {
            out.push(("output".into(), output));
        }
        out
    }

    pub fn param_count(&self) -> u64 {
        self.named_params()
            .iter()
            .map(|(_, t)| t.len() as u64)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_params()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }
}
