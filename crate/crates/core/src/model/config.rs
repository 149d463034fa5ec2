use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::RecordDims;
use crate::tensor::Activation;

use super::ModelError;

/// Which constituents enter the composite representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeMask {
    /// Adaptive image representation.
    pub r1: bool,
    /// QF multimodal representation.
    pub r2: bool,
    /// Pooled text representation.
    pub r3: bool,
}

impl CompositeMask {
    pub const ALL: CompositeMask = CompositeMask { r1: true, r2: true, r3: true };
}

impl Default for CompositeMask {
    fn default() -> Self {
        Self::ALL
    }
}

/// Nonlinearity used at each site of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationSites {
    pub image_encoder: Activation,
    pub qf_intermediate: Activation,
    pub fusion: Activation,
    pub decoder: Activation,
}

impl Default for ActivationSites {
    fn default() -> Self {
        Self {
            image_encoder: Activation::Gelu,
            qf_intermediate: Activation::Gelu,
            fusion: Activation::Gelu,
            decoder: Activation::Gelu,
        }
    }
}

/// Linear warmup length, either absolute or as a fraction of all steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warmup {
    Steps(usize),
    Fraction(f64),
}

impl Warmup {
    pub fn steps(self, total_steps: usize) -> usize {
        match self {
            Warmup::Steps(n) => n,
            Warmup::Fraction(f) => (f * total_steps as f64).round() as usize,
        }
    }
}

/// Optimization recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: Warmup,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 128,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.2,
            warmup: Warmup::Steps(10),
            clip_norm: 1.0,
        }
    }
}

/// Every architectural and training hyperparameter of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_puzzle_groups: usize,
    pub text_seq_len: usize,
    pub text_dim: usize,
    pub vision_dim_each: usize,
    /// Width between the two per-group image encoder layers.
    pub image_hidden_dim: usize,
    pub adaptive_image_dim: usize,
    pub qf_heads: usize,
    pub qf_intermediate_dim: usize,
    /// Number of key/value tokens the adaptive image vector is expanded into.
    pub kv_tokens: usize,
    pub hidden_dim: usize,
    pub gru_hidden: usize,
    pub dropout_p: f64,
    pub ln_eps: f64,
    pub activations: ActivationSites,
    pub composite_mask: CompositeMask,
    /// Residual around the QF intermediate stack (with its dropout and layer-norm).
    pub qf_residual: bool,
    /// Pre-norm residual around the QF self-attention sublayer.
    pub self_attention_residual: bool,
    pub answer_classes: usize,
    /// Output vocabulary of the sequence decoder: digits plus end marker.
    pub seq_vocab: usize,
    pub max_decode_len: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

/// Digit symbols of the sequence vocabulary; the end marker follows them.
pub const DIGITS: usize = 10;

impl ModelConfig {
    /// The final configuration of the reasoner: 101 puzzle groups, SigLIP/DinoV2
    /// widths, two QF heads.
    pub fn full() -> Self {
        Self {
            num_puzzle_groups: 101,
            text_seq_len: 110,
            text_dim: 768,
            vision_dim_each: 768,
            image_hidden_dim: 128,
            adaptive_image_dim: 128,
            qf_heads: 2,
            qf_intermediate_dim: 256,
            kv_tokens: 8,
            hidden_dim: 128,
            gru_hidden: 256,
            dropout_p: 0.2,
            ln_eps: 1e-6,
            activations: ActivationSites::default(),
            composite_mask: CompositeMask::ALL,
            qf_residual: true,
            self_attention_residual: true,
            answer_classes: 5,
            seq_vocab: DIGITS + 1,
            max_decode_len: 10,
            train: TrainConfig::default(),
            seed: 0,
        }
    }

    /// Tiny configuration for finite-difference checks: 2 groups,
    /// sequence length 6, all widths 8.
    pub fn shrunken() -> Self {
        Self {
            num_puzzle_groups: 2,
            text_seq_len: 6,
            text_dim: 8,
            vision_dim_each: 8,
            image_hidden_dim: 8,
            adaptive_image_dim: 8,
            qf_heads: 2,
            qf_intermediate_dim: 8,
            kv_tokens: 2,
            hidden_dim: 8,
            gru_hidden: 8,
            max_decode_len: 4,
            ..Self::full()
        }
    }

    pub fn record_dims(&self) -> RecordDims {
        RecordDims { vision_dim: self.vision_dim_each, text_seq_len: self.text_seq_len, text_dim: self.text_dim }
    }

    pub fn head_dim(&self) -> usize {
        self.text_dim / self.qf_heads
    }

    /// Length of the composite representation under the current mask.
    pub fn composite_dim(&self) -> usize {
        let m = self.composite_mask;
        (m.r1 as usize) * self.adaptive_image_dim + (m.r2 as usize) * self.text_dim + (m.r3 as usize) * self.text_dim
    }

    /// Inputs of the GRU: the output vocabulary plus a start marker.
    pub fn gru_input_vocab(&self) -> usize {
        self.seq_vocab + 1
    }

    pub fn start_token(&self) -> usize {
        self.seq_vocab
    }

    pub fn end_token(&self) -> usize {
        self.seq_vocab - 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        let positive = [
            ("num_puzzle_groups", self.num_puzzle_groups),
            ("text_seq_len", self.text_seq_len),
            ("text_dim", self.text_dim),
            ("vision_dim_each", self.vision_dim_each),
            ("image_hidden_dim", self.image_hidden_dim),
            ("adaptive_image_dim", self.adaptive_image_dim),
            ("qf_heads", self.qf_heads),
            ("qf_intermediate_dim", self.qf_intermediate_dim),
            ("kv_tokens", self.kv_tokens),
            ("hidden_dim", self.hidden_dim),
            ("gru_hidden", self.gru_hidden),
            ("max_decode_len", self.max_decode_len),
            ("epochs", self.train.epochs),
            ("batch_size", self.train.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if !self.text_dim.is_multiple_of(self.qf_heads) {
            return bad(format!("text_dim {} is not divisible by qf_heads {}", self.text_dim, self.qf_heads));
        }
        let m = self.composite_mask;
        if !(m.r1 || m.r2 || m.r3) {
            return bad("composite_mask must enable at least one constituent".into());
        }
        if self.answer_classes != 5 {
            return bad(format!("answer_classes must be 5, got {}", self.answer_classes));
        }
        if self.seq_vocab < 2 {
            return bad("seq_vocab needs at least one symbol and the end marker".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return bad(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        let t = &self.train;
        if t.lr < 0.0 || t.weight_decay < 0.0 || t.clip_norm <= 0.0 || t.eps <= 0.0 {
            return bad("lr and weight_decay must be non-negative; clip_norm and eps positive".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("betas must be in [0, 1)".into());
        }
        if let Warmup::Fraction(f) = t.warmup {
            if !(0.0..1.0).contains(&f) {
                return bad(format!("warmup fraction must be in [0, 1), got {f}"));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let hash = Sha256::digest(&json);
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}
