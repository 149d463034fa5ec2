use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Scalar;

use super::config::ModelConfig;
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±1/√fan_in, fan_in being the first extent.
    Uniform,
    Zeros,
    Ones,
}

/// Declaration of one trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    /// Shape of one copy (per group, for banked parameters).
    pub shape: Vec<usize>,
    /// One independent copy per puzzle group.
    pub banked: bool,
    /// Subject to decoupled weight decay.
    pub decay: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn copies(&self, groups: usize) -> usize {
        if self.banked {
            groups
        } else {
            1
        }
    }
}

fn linear(specs: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize, banked: bool) {
    specs.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![fan_in, fan_out],
        banked,
        decay: true,
        init: Init::Uniform,
    });
    specs.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![fan_out], banked, decay: false, init: Init::Zeros });
}

fn norm(specs: &mut Vec<ParamSpec>, prefix: &str, dim: usize) {
    specs.push(ParamSpec { name: format!("{prefix}.gain"), shape: vec![dim], banked: false, decay: false, init: Init::Ones });
    specs.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![dim], banked: false, decay: false, init: Init::Zeros });
}

/// Every trainable tensor of the reasoner, in a fixed order.
///
/// All blocks exist regardless of the composite mask; blocks the mask leaves
/// unused simply receive no gradient.
pub fn layout(c: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let d = c.text_dim;
    linear(&mut s, "image.fc_in", 2 * c.vision_dim_each, c.image_hidden_dim, true);
    linear(&mut s, "image.fc_out", c.image_hidden_dim, c.adaptive_image_dim, true);

    if c.self_attention_residual {
        norm(&mut s, "qf.self_norm", d);
    }
    for proj in ["q", "k", "v", "o"] {
        linear(&mut s, &format!("qf.self_attn.{proj}"), d, d, false);
    }
    linear(&mut s, "qf.kv_expand", c.adaptive_image_dim, c.kv_tokens * d, false);
    for proj in ["q", "k", "v", "o"] {
        linear(&mut s, &format!("qf.cross_attn.{proj}"), d, d, false);
    }
    linear(&mut s, "qf.ffn.fc_in", d, c.qf_intermediate_dim, false);
    linear(&mut s, "qf.ffn.fc_out", c.qf_intermediate_dim, d, false);
    if c.qf_residual {
        norm(&mut s, "qf.norm", d);
    }

    norm(&mut s, "composite.norm", c.composite_dim());
    linear(&mut s, "fusion.fc_in", c.composite_dim(), c.hidden_dim, false);
    linear(&mut s, "fusion.fc_out", c.hidden_dim, c.hidden_dim, false);
    norm(&mut s, "fusion.norm", c.hidden_dim);

    linear(&mut s, "decoder.fc1", c.hidden_dim, c.hidden_dim, true);
    linear(&mut s, "decoder.fc2", c.hidden_dim, c.hidden_dim, true);
    linear(&mut s, "decoder.fc3", c.hidden_dim, c.answer_classes, true);

    let g = c.gru_hidden;
    linear(&mut s, "gru.init", c.hidden_dim, g, false);
    linear(&mut s, "gru.input", c.gru_input_vocab(), 3 * g, false);
    linear(&mut s, "gru.hidden", g, 3 * g, false);
    linear(&mut s, "gru.out", g, c.seq_vocab, false);
    s
}

/// Exact number of trainable scalars for `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    layout(config).iter().map(|p| p.numel() * p.copies(config.num_puzzle_groups)).sum()
}

/// Named trainable tensors. Banked tensors hold one contiguous copy per group.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    values: Vec<Vec<T>>,
    index: HashMap<String, ParamId>,
    groups: usize,
}

impl<T: Scalar> ParamStore<T> {
    /// Initialize from `config.seed`: uniform ±1/√fan_in weights, zero biases,
    /// unit layer-norm gains.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let groups = config.num_puzzle_groups;
        let specs = layout(config);
        let values = specs
            .iter()
            .map(|spec| {
                let n = spec.numel() * spec.copies(groups);
                match spec.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Uniform => {
                        let bound = 1.0 / (spec.shape[0] as f64).sqrt();
                        (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
                    }
                }
            })
            .collect();
        Ok(Self::from_parts(specs, values, groups))
    }

    pub(crate) fn from_parts(specs: Vec<ParamSpec>, values: Vec<Vec<T>>, groups: usize) -> Self {
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), ParamId(i))).collect();
        Self { specs, values, index, groups }
    }

    /// Same layout with values converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let values = self.values.iter().map(|v| v.iter().map(|&x| U::of(x.as_f64())).collect()).collect();
        ParamStore::from_parts(self.specs.clone(), values, self.groups)
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn id(&self, name: &str) -> Result<ParamId, ModelError> {
        self.index.get(name).copied().ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// All copies of a parameter, concatenated by group.
    pub fn values(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    /// The copy used by `group` (the only copy for shared parameters).
    pub fn slice(&self, id: ParamId, group: usize) -> &[T] {
        let n = self.specs[id.0].numel();
        if self.specs[id.0].banked {
            &self.values[id.0][group * n..(group + 1) * n]
        } else {
            &self.values[id.0]
        }
    }

    pub fn slice_mut(&mut self, id: ParamId, group: usize) -> &mut [T] {
        let n = self.specs[id.0].numel();
        if self.specs[id.0].banked {
            &mut self.values[id.0][group * n..(group + 1) * n]
        } else {
            &mut self.values[id.0]
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

}

/// Accumulated gradients, laid out like a [`ParamStore`].
///
/// Each (parameter, group copy) slot tracks whether any record touched it;
/// the optimizer skips untouched slots entirely.
#[derive(Debug, Clone)]
pub struct GradStore<T> {
    numel: Vec<usize>,
    banked: Vec<bool>,
    groups: usize,
    grads: Vec<Vec<T>>,
    touched: Vec<Vec<bool>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn new<U: Scalar>(params: &ParamStore<U>) -> Self {
        let groups = params.groups();
        Self {
            numel: params.specs().iter().map(ParamSpec::numel).collect(),
            banked: params.specs().iter().map(|s| s.banked).collect(),
            groups,
            grads: vec![Vec::new(); params.len()],
            touched: params.specs().iter().map(|s| vec![false; s.copies(groups)]).collect(),
        }
    }

    fn copy_index(&self, id: ParamId, group: usize) -> usize {
        if self.banked[id.0] {
            group
        } else {
            0
        }
    }

    /// Add `grad` into the copy of `id` used by `group`.
    pub fn accumulate(&mut self, id: ParamId, group: usize, grad: &[T]) {
        let n = self.numel[id.0];
        assert_eq!(grad.len(), n, "gradient extent for parameter {}", id.0);
        let copy = self.copy_index(id, group);
        if self.grads[id.0].is_empty() {
            let copies = if self.banked[id.0] { self.groups } else { 1 };
            self.grads[id.0] = vec![T::zero(); n * copies];
        }
        self.touched[id.0][copy] = true;
        let dst = &mut self.grads[id.0][copy * n..(copy + 1) * n];
        dst.iter_mut().zip(grad).for_each(|(d, &g)| *d += g);
    }

    /// Add every slot of `other` into `self`.
    pub fn merge(&mut self, other: &GradStore<T>) {
        for id in 0..self.numel.len() {
            let n = self.numel[id];
            for (copy, &t) in other.touched[id].iter().enumerate() {
                if t {
                    let src = &other.grads[id][copy * n..(copy + 1) * n];
                    self.accumulate(ParamId(id), copy, src);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn is_touched(&self, id: ParamId, group: usize) -> bool {
        self.touched[id.0][self.copy_index(id, group)]
    }

    /// Gradient of one copy, if touched.
    pub fn slice(&self, id: ParamId, group: usize) -> Option<&[T]> {
        if !self.is_touched(id, group) {
            return None;
        }
        let n = self.numel[id.0];
        let copy = self.copy_index(id, group);
        Some(&self.grads[id.0][copy * n..(copy + 1) * n])
    }

    pub fn slice_mut(&mut self, id: ParamId, group: usize) -> Option<&mut [T]> {
        if !self.is_touched(id, group) {
            return None;
        }
        let n = self.numel[id.0];
        let copy = self.copy_index(id, group);
        Some(&mut self.grads[id.0][copy * n..(copy + 1) * n])
    }

    /// Number of copies of a parameter (groups for banked ones).
    pub fn copies(&self, id: ParamId) -> usize {
        self.touched[id.0].len()
    }

    pub fn num_params(&self) -> usize {
        self.numel.len()
    }

    /// Global L2 norm over every touched slot.
    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt()
    }
}
