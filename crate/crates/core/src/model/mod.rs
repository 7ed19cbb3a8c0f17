//! Desk-scale character-level decoder: analog and spiking forwards,
//! baseline training, generation, and checkpoint I/O.

mod ann;
mod checkpoint;
mod generate;
mod params;
mod snn;
mod train;

pub(crate) use generate::argmax;
pub use train::eval_windows;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::NeuronParams;

pub use ann::{backward, forward_ann, forward_batch, AnnCache, LayerActivations, LnAffine, LnCache, LnMode};
pub use checkpoint::{load, save, CheckpointKind, ModelCheckpoint, Tensor, FORMAT_VERSION, MAGIC};
pub use generate::{generate, DecodeMode};
pub use params::{AnnParams, LayerParams};
pub use snn::{forward_snn, forward_snn_batch, forward_snn_traced, SnnLayer, SnnLayerTrace, SnnModel, SnnTrace};
pub use train::{cross_entropy, train_baseline, TrainReport, TrainSettings};

/// LayerNorm epsilon used throughout.
pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Relu,
    /// Tanh-approximated GeLU. Trainable, but not convertible.
    Gelu,
}

impl Nonlinearity {
    pub fn name(&self) -> &'static str {
        match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::Gelu => "gelu",
        }
    }
}

/// Spiking-side settings carried in the model config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnnSettings {
    pub time_window: usize,
    pub neuron: NeuronParams,
    /// Fixed encoder clip; `None` calibrates it from the embedding maximum.
    pub encoder_clip: Option<f64>,
    /// Score-neuron threshold; `None` means `sqrt(d_head) * v_th`.
    pub score_threshold: Option<f64>,
}

impl Default for SnnSettings {
    fn default() -> Self {
        Self {
            time_window: 64,
            neuron: NeuronParams::default(),
            encoder_clip: None,
            score_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub block_size: usize,
    pub vocab_size: usize,
    pub ffn_mult: usize,
    pub nonlinearity: Nonlinearity,
    pub snn: SnnSettings,
}

impl TransformerConfig {
    pub fn new(n_layer: usize, n_head: usize, d_model: usize, block_size: usize, vocab_size: usize) -> Self {
        Self {
            n_layer,
            n_head,
            d_model,
            block_size,
            vocab_size,
            ffn_mult: 4,
            nonlinearity: Nonlinearity::Relu,
            snn: SnnSettings::default(),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn d_ff(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layer", self.n_layer),
            ("n_head", self.n_head),
            ("d_model", self.d_model),
            ("block_size", self.block_size),
            ("vocab_size", self.vocab_size),
            ("ffn_mult", self.ffn_mult),
            ("snn.time_window", self.snn.time_window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidParam(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_head) {
            return Err(Error::InvalidParam(format!(
                "d_model {} is not divisible by n_head {}",
                self.d_model, self.n_head
            )));
        }
        self.snn.neuron.validate()?;
        if let Some(c) = self.snn.encoder_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidParam(format!("encoder clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Parameters of the spiking score layer.
    pub fn score_neuron(&self) -> NeuronParams {
        let mut p = crate::attention::score_neuron_params(self.d_head(), &self.snn.neuron);
        if let Some(th) = self.snn.score_threshold {
            p.threshold = th;
        }
        p
    }
}

pub(crate) fn check_tokens(cfg: &TransformerConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidParam("token sequence is empty".into()));
    }
    if tokens.len() > cfg.block_size {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            block_size: cfg.block_size,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}
