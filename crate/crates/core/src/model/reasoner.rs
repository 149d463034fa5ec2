use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::data::{AnswerType, EmbeddingRecord};
use crate::tensor::{Fault, Graph, Scalar, Var};

use super::config::ModelConfig;
use super::params::{GradStore, ParamId, ParamStore};
use super::ModelError;

/// One forward/backward pass: a graph plus the parameter leaves bound into it.
pub struct Session<'a, T: Scalar> {
    pub graph: Graph<'a, T>,
    pub config: &'a ModelConfig,
    params: &'a ParamStore<T>,
    bound: HashMap<(ParamId, usize), Var>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(config: &'a ModelConfig, params: &'a ParamStore<T>) -> Self {
        Self { graph: Graph::new(), config, params, bound: HashMap::new() }
    }

    pub fn with_fault(config: &'a ModelConfig, params: &'a ParamStore<T>, fault: Fault) -> Self {
        Self { graph: Graph::with_fault(fault), config, params, bound: HashMap::new() }
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    /// Leaf for parameter `name`, group copy `group`. Bound once per session.
    pub fn param(&mut self, name: &str, group: usize) -> Result<Var, ModelError> {
        let id = self.params.id(name)?;
        let spec = self.params.spec(id);
        let copy = if spec.banked { group } else { 0 };
        if let Some(&v) = self.bound.get(&(id, copy)) {
            return Ok(v);
        }
        let params: &'a ParamStore<T> = self.params;
        let var = self.graph.param(params.slice(id, copy), &spec.shape)?;
        self.bound.insert((id, copy), var);
        Ok(var)
    }

    /// `x · W + b` for the parameter pair under `prefix`.
    pub fn linear(&mut self, x: Var, prefix: &str, group: usize) -> Result<Var, ModelError> {
        let w = self.param(&format!("{prefix}.weight"), group)?;
        let b = self.param(&format!("{prefix}.bias"), group)?;
        let y = self.graph.matmul(x, w)?;
        Ok(self.graph.add_bias(y, b)?)
    }

    pub fn norm(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let gain = self.param(&format!("{prefix}.gain"), 0)?;
        let bias = self.param(&format!("{prefix}.bias"), 0)?;
        Ok(self.graph.layer_norm(x, gain, bias, self.config.ln_eps)?)
    }

    /// Backpropagate `loss` and add every bound parameter's gradient into `out`.
    /// Parameters unreachable from the loss are left untouched.
    pub fn backward_into(&self, loss: Var, out: &mut GradStore<T>) -> Result<(), ModelError> {
        let grads = self.graph.backward(loss)?;
        let mut bound: Vec<_> = self.bound.iter().collect();
        bound.sort();
        for (&(id, copy), &var) in bound {
            if let Some(g) = grads.get(var) {
                out.accumulate(id, copy, g);
            }
        }
        Ok(())
    }

    fn check_group(&self, group: usize) -> Result<(), ModelError> {
        if group >= self.config.num_puzzle_groups {
            return Err(ModelError::GroupOutOfRange { group, groups: self.config.num_puzzle_groups });
        }
        Ok(())
    }

    fn expect_shape(&self, what: &'static str, v: Var, expected: usize) -> Result<(), ModelError> {
        let shape = self.graph.shape(v);
        if shape != [1, expected] {
            return Err(ModelError::Dimension { what, expected, got: shape.to_vec() });
        }
        Ok(())
    }
}

/// The three constituent representations and their composite.
#[derive(Debug, Clone, Copy)]
pub struct Representation {
    pub r1: Option<Var>,
    pub r2: Option<Var>,
    pub r3: Option<Var>,
    pub composite: Var,
    pub fused: Var,
}

/// Pooled text representation: mean of the first `valid_len` token rows.
pub fn encode_text<T: Scalar>(s: &mut Session<'_, T>, tokens: Var, valid_len: usize) -> Result<Var, ModelError> {
    let rows = s.graph.shape(tokens)[0];
    if valid_len == 0 || valid_len > rows {
        return Err(ModelError::ValidLen { valid_len, max: rows });
    }
    Ok(s.graph.mean_rows(tokens, valid_len)?)
}

/// Per-group adaptive image representation from the fused vision embeddings.
pub fn encode_image_adaptive<T: Scalar>(
    s: &mut Session<'_, T>,
    dino: Var,
    siglip: Var,
    group: usize,
) -> Result<Var, ModelError> {
    s.check_group(group)?;
    let fused = s.graph.concat(&[dino, siglip], 1)?;
    let h = s.linear(fused, "image.fc_in", group)?;
    let h = s.graph.activation(h, s.config.activations.image_encoder)?;
    s.linear(h, "image.fc_out", group)
}

/// Multi-head scaled dot-product attention. Queries come from `q_src`, keys
/// and values from `kv_src`; `key_mask` marks valid key rows. Returns the
/// projected output and each head's attention weights.
pub fn multi_head_attention<T: Scalar>(
    s: &mut Session<'_, T>,
    prefix: &str,
    q_src: Var,
    kv_src: Var,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>), ModelError> {
    let heads = s.config.qf_heads;
    let dh = s.config.head_dim();
    let q = s.linear(q_src, &format!("{prefix}.q"), 0)?;
    let k = s.linear(kv_src, &format!("{prefix}.k"), 0)?;
    let v = s.linear(kv_src, &format!("{prefix}.v"), 0)?;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                s.graph.slice_cols(q, h * dh, dh)?,
                s.graph.slice_cols(k, h * dh, dh)?,
                s.graph.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = s.graph.matmul_t(qh, kh)?;
        let scores = s.graph.scale(scores, scale)?;
        let p = s.graph.softmax_masked(scores, key_mask)?;
        outputs.push(s.graph.matmul(p, vh)?);
        weights.push(p);
    }
    let joined = s.graph.concat(&outputs, 1)?;
    let out = s.linear(joined, &format!("{prefix}.o"), 0)?;
    Ok((out, weights))
}

/// QF multimodal layer: text self-attention, text-to-image cross-attention,
/// residual intermediate stack, then a masked mean over positions.
pub fn qf_layer<T: Scalar>(
    s: &mut Session<'_, T>,
    tokens: Var,
    mask: &[bool],
    r1: Var,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var, ModelError> {
    let cfg = s.config;
    let rows = s.graph.shape(tokens)[0];
    if mask.len() != rows {
        return Err(ModelError::Dimension { what: "qf mask", expected: rows, got: vec![mask.len()] });
    }
    if !mask.iter().any(|&m| m) {
        return Err(ModelError::FullyMasked);
    }
    let key_mask = if mask.iter().all(|&m| m) { None } else { Some(mask) };

    let attended = if cfg.self_attention_residual {
        let normed = s.norm(tokens, "qf.self_norm")?;
        let (a, _) = multi_head_attention(s, "qf.self_attn", normed, normed, key_mask)?;
        s.graph.add(tokens, a)?
    } else {
        multi_head_attention(s, "qf.self_attn", tokens, tokens, key_mask)?.0
    };

    let kv = s.linear(r1, "qf.kv_expand", 0)?;
    let kv = s.graph.reshape(kv, &[cfg.kv_tokens, cfg.text_dim])?;
    let (x, _) = multi_head_attention(s, "qf.cross_attn", attended, kv, None)?;

    let h = s.linear(x, "qf.ffn.fc_in", 0)?;
    let h = s.graph.activation(h, cfg.activations.qf_intermediate)?;
    let h = s.linear(h, "qf.ffn.fc_out", 0)?;
    let seq = if cfg.qf_residual {
        let h = s.graph.dropout(h, cfg.dropout_p, training, rng)?;
        let sum = s.graph.add(x, h)?;
        s.norm(sum, "qf.norm")?
    } else {
        h
    };
    Ok(s.graph.mean_rows_masked(seq, mask)?)
}

/// Concatenate the enabled constituents (in r1, r2, r3 order) and normalize.
pub fn compose<T: Scalar>(
    s: &mut Session<'_, T>,
    r1: Option<Var>,
    r2: Option<Var>,
    r3: Option<Var>,
) -> Result<Var, ModelError> {
    let m = s.config.composite_mask;
    let mut parts = Vec::with_capacity(3);
    for (enabled, part, name) in [(m.r1, r1, "r1"), (m.r2, r2, "r2"), (m.r3, r3, "r3")] {
        if enabled {
            parts.push(part.ok_or(ModelError::MissingConstituent(name))?);
        }
    }
    if parts.is_empty() {
        return Err(ModelError::Config("composite_mask must enable at least one constituent".into()));
    }
    let cat = s.graph.concat(&parts, 1)?;
    s.norm(cat, "composite.norm")
}

/// FC-GELU-FC, then GELU and layer-norm.
pub fn qv_fusion<T: Scalar>(s: &mut Session<'_, T>, composite: Var) -> Result<Var, ModelError> {
    let act = s.config.activations.fusion;
    let expected = s.config.composite_dim();
    s.expect_shape("composite", composite, expected)?;
    let h = s.linear(composite, "fusion.fc_in", 0)?;
    let h = s.graph.activation(h, act)?;
    let y = s.linear(h, "fusion.fc_out", 0)?;
    let y = s.graph.activation(y, act)?;
    s.norm(y, "fusion.norm")
}

/// Per-group three-layer classifier over the five answer options.
pub fn mlp_decode<T: Scalar>(s: &mut Session<'_, T>, fused: Var, group: usize) -> Result<Var, ModelError> {
    s.check_group(group)?;
    let act = s.config.activations.decoder;
    let h = s.linear(fused, "decoder.fc1", group)?;
    let h = s.graph.activation(h, act)?;
    let h = s.linear(h, "decoder.fc2", group)?;
    let h = s.graph.activation(h, act)?;
    s.linear(h, "decoder.fc3", group)
}

/// Build every representation for `record` up to the fused decoder input.
pub fn represent<'a, T: Scalar>(
    s: &mut Session<'a, T>,
    record: &'a EmbeddingRecord,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Representation, ModelError> {
    let cfg = s.config;
    let dims = cfg.record_dims();
    if let Some(field) = record.invalid_field(&dims, cfg.num_puzzle_groups, cfg.answer_classes) {
        return Err(ModelError::InvalidRecord(field));
    }
    let m = cfg.composite_mask;
    let group = record.puzzle_group;

    let r3 = if m.r3 || m.r2 {
        // Padded rows never enter the graph; they could only reach the output
        // through masked keys and masked pooling, both of which drop them.
        let tokens = s.graph.input(T::cow_from_f32(record.valid_tokens(cfg.text_dim)), &[record.valid_len, cfg.text_dim])?;
        Some((tokens, encode_text(s, tokens, record.valid_len)?))
    } else {
        None
    };
    let r1 = if m.r1 || m.r2 {
        let dino = s.graph.input(T::cow_from_f32(&record.dino), &[1, cfg.vision_dim_each])?;
        let siglip = s.graph.input(T::cow_from_f32(&record.siglip), &[1, cfg.vision_dim_each])?;
        let r1 = encode_image_adaptive(s, dino, siglip, group)?;
        s.expect_shape("r1", r1, cfg.adaptive_image_dim)?;
        Some(r1)
    } else {
        None
    };
    let r2 = match (m.r2, r3, r1) {
        (true, Some((tokens, _)), Some(r1)) => {
            let mask = vec![true; record.valid_len];
            let r2 = qf_layer(s, tokens, &mask, r1, training, rng)?;
            s.expect_shape("r2", r2, cfg.text_dim)?;
            Some(r2)
        }
        _ => None,
    };
    let r3 = r3.map(|(_, r3)| r3);
    if let Some(r3) = r3 {
        s.expect_shape("r3", r3, cfg.text_dim)?;
    }
    let composite = compose(s, r1.filter(|_| m.r1), r2, r3.filter(|_| m.r3))?;
    s.expect_shape("composite", composite, cfg.composite_dim())?;
    let fused = qv_fusion(s, composite)?;
    s.expect_shape("fused", fused, cfg.hidden_dim)?;
    Ok(Representation { r1, r2, r3, composite, fused })
}

/// Result of [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: Var,
    /// Option logits for classification-type records.
    pub logits: Option<Var>,
    /// Per-step vocabulary logits for sequence-type records.
    pub step_logits: Vec<Var>,
    pub representation: Representation,
}

/// Full pipeline for one record: representations, decoder for its answer
/// type, and cross-entropy loss (averaged over steps for sequences).
pub fn forward<'a, T: Scalar>(
    s: &mut Session<'a, T>,
    record: &'a EmbeddingRecord,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardOutput, ModelError> {
    let rep = represent(s, record, training, rng)?;
    match record.answer_type {
        AnswerType::Classification => {
            let logits = mlp_decode(s, rep.fused, record.puzzle_group)?;
            let loss = s.graph.cross_entropy(logits, &[record.label])?;
            Ok(ForwardOutput { loss, logits: Some(logits), step_logits: Vec::new(), representation: rep })
        }
        AnswerType::Sequence => {
            let answer = record.answer_sequence.as_deref().ok_or(ModelError::InvalidRecord("answer_sequence"))?;
            let mut targets = answer.to_vec();
            targets.push(s.config.end_token());
            let out = super::decode::gru_decode(s, rep.fused, s.config.max_decode_len, Some(answer))?;
            let stacked = s.graph.concat(&out.step_logits, 0)?;
            let loss = s.graph.cross_entropy(stacked, &targets)?;
            Ok(ForwardOutput { loss, logits: None, step_logits: out.step_logits, representation: rep })
        }
    }
}

/// Predicted option index (inference mode, no dropout).
pub fn predict<'a, T: Scalar>(s: &mut Session<'a, T>, record: &'a EmbeddingRecord) -> Result<usize, ModelError> {
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    let rep = represent(s, record, false, &mut rng)?;
    match record.answer_type {
        AnswerType::Classification => {
            let logits = mlp_decode(s, rep.fused, record.puzzle_group)?;
            Ok(argmax(s.graph.value(logits)))
        }
        AnswerType::Sequence => {
            let out = super::decode::gru_decode(s, rep.fused, s.config.max_decode_len, None)?;
            let options = record.option_sequences.as_deref().ok_or(ModelError::InvalidRecord("option_sequences"))?;
            Ok(super::decode::map_sequence_to_option(&out.tokens, options))
        }
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
