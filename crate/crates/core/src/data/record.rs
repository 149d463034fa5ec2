use serde::{Deserialize, Serialize};

/// Reasoning skill used for the per-skill accuracy breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkillClass {
    Counting,
    Math,
    Logic,
    Path,
    Algebra,
    Measure,
    Spatial,
    Pattern,
}

impl SkillClass {
    pub const ALL: [SkillClass; 8] = [
        SkillClass::Counting,
        SkillClass::Math,
        SkillClass::Logic,
        SkillClass::Path,
        SkillClass::Algebra,
        SkillClass::Measure,
        SkillClass::Spatial,
        SkillClass::Pattern,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SkillClass::Counting => "counting",
            SkillClass::Math => "math",
            SkillClass::Logic => "logic",
            SkillClass::Path => "path",
            SkillClass::Algebra => "algebra",
            SkillClass::Measure => "measure",
            SkillClass::Spatial => "spatial",
            SkillClass::Pattern => "pattern",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Classification,
    Sequence,
}

/// Embedding shapes shared by every record of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordDims {
    pub vision_dim: usize,
    pub text_seq_len: usize,
    pub text_dim: usize,
}

impl RecordDims {
    /// Number of `f32` values one record occupies in the blob.
    pub fn floats_per_record(&self) -> usize {
        2 * self.vision_dim + self.text_seq_len * self.text_dim
    }
}

/// One puzzle instance as precomputed frozen-backbone embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub puzzle_group: usize,
    pub skill_class: SkillClass,
    pub answer_type: AnswerType,
    pub dino: Vec<f32>,
    pub siglip: Vec<f32>,
    /// `text_seq_len × text_dim`, row-major, zero past `valid_len`.
    pub text_tokens: Vec<f32>,
    pub valid_len: usize,
    /// Correct option, 0..5 for A..E.
    pub label: usize,
    /// Five candidate answers, present iff sequence-type.
    pub option_sequences: Option<Vec<Vec<usize>>>,
    /// Target token sequence (without end marker), present iff sequence-type.
    pub answer_sequence: Option<Vec<usize>>,
}

impl EmbeddingRecord {
    /// Token rows that carry question content.
    pub fn valid_tokens(&self, text_dim: usize) -> &[f32] {
        &self.text_tokens[..self.valid_len * text_dim]
    }

    /// Name of the first field violating the record invariants, if any.
    pub fn invalid_field(&self, dims: &RecordDims, num_groups: usize, answer_classes: usize) -> Option<&'static str> {
        if self.puzzle_group >= num_groups {
            return Some("puzzle_group");
        }
        if self.dino.len() != dims.vision_dim {
            return Some("dino");
        }
        if self.siglip.len() != dims.vision_dim {
            return Some("siglip");
        }
        if self.text_tokens.len() != dims.text_seq_len * dims.text_dim {
            return Some("text_tokens");
        }
        if self.valid_len == 0 || self.valid_len > dims.text_seq_len {
            return Some("valid_len");
        }
        if self.label >= answer_classes {
            return Some("label");
        }
        let sequence = self.answer_type == AnswerType::Sequence;
        match (&self.option_sequences, sequence) {
            (Some(opts), true) if opts.len() == answer_classes && opts.iter().all(|o| !o.is_empty()) => {}
            (None, false) => {}
            _ => return Some("option_sequences"),
        }
        match (&self.answer_sequence, &self.option_sequences) {
            (Some(ans), Some(opts)) if opts.get(self.label) == Some(ans) => {}
            (None, None) => {}
            _ => return Some("answer_sequence"),
        }
        if !self.dino.iter().chain(&self.siglip).chain(&self.text_tokens).all(|v| v.is_finite()) {
            return Some("embeddings");
        }
        None
    }
}
