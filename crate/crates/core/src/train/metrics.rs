use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::SkillClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    /// One optimizer step.
    Step,
    /// End-of-epoch summary for a split.
    Epoch,
}

/// One line of `metrics.jsonl`.
///
/// Wall-clock time is deliberately absent so that reruns are bitwise
/// identical; it goes to the timings sidecar instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: RecordKind,
    pub epoch: usize,
    /// Optimizer steps completed before this record (epoch records) or the
    /// index of the step taken (step records).
    pub step: usize,
    pub split: String,
    pub loss: Option<f64>,
    pub lr: f64,
    /// Global gradient norm before clipping (step records).
    pub grad_norm: Option<f64>,
    pub accuracy: Option<f64>,
    /// Every skill class; `None` when the split holds no record of it.
    pub skill_accuracy: BTreeMap<SkillClass, Option<f64>>,
    pub seed: u64,
    pub config_digest: String,
}

impl MetricsRecord {
    pub fn skills_absent() -> BTreeMap<SkillClass, Option<f64>> {
        SkillClass::ALL.iter().map(|&s| (s, None)).collect()
    }
}

/// One line of the `timings.jsonl` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub epoch: usize,
    pub step: usize,
    pub split: String,
    pub seconds: f64,
}
