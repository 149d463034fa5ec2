use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{AnswerType, EmbeddingRecord, SkillClass};
use crate::model::{argmax, forward, predict, ModelConfig, ParamStore, Session};

use super::TrainError;

/// Evaluation counts over a set of records.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub records: usize,
    /// Mean cross-entropy (teacher-forced for sequence answers).
    pub loss: f64,
    pub correct: usize,
    pub skill_correct: [usize; 8],
    pub skill_total: [usize; 8],
}

impl EvalResult {
    pub fn accuracy(&self) -> Option<f64> {
        (self.records > 0).then(|| self.correct as f64 / self.records as f64)
    }

    /// Accuracy per skill; skills with no records are `None`, not zero.
    pub fn skill_accuracy(&self) -> BTreeMap<SkillClass, Option<f64>> {
        SkillClass::ALL
            .iter()
            .map(|&s| {
                let i = s.index();
                let acc = (self.skill_total[i] > 0).then(|| self.skill_correct[i] as f64 / self.skill_total[i] as f64);
                (s, acc)
            })
            .collect()
    }
}

struct Outcome {
    loss: f64,
    correct: bool,
    skill: usize,
}

fn score(config: &ModelConfig, params: &ParamStore<f32>, record: &EmbeddingRecord) -> Result<Outcome, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = Session::new(config, params);
    let out = forward(&mut s, record, false, &mut rng)?;
    let loss = s.graph.scalar(out.loss) as f64;
    let predicted = match (record.answer_type, out.logits) {
        (AnswerType::Classification, Some(logits)) => argmax(s.graph.value(logits)),
        _ => {
            let mut s = Session::new(config, params);
            predict(&mut s, record)?
        }
    };
    Ok(Outcome { loss, correct: predicted == record.label, skill: record.skill_class.index() })
}

/// Greedy predictions (dropout off) for `indices`; overall and per-skill
/// accuracy plus mean loss.
pub fn evaluate(
    config: &ModelConfig,
    params: &ParamStore<f32>,
    records: &[EmbeddingRecord],
    indices: &[usize],
) -> Result<EvalResult, TrainError> {
    let outcomes: Vec<Outcome> =
        indices.par_iter().map(|&i| score(config, params, &records[i])).collect::<Result<_, _>>()?;
    let mut result = EvalResult {
        records: outcomes.len(),
        loss: 0.0,
        correct: 0,
        skill_correct: [0; 8],
        skill_total: [0; 8],
    };
    for o in &outcomes {
        result.loss += o.loss;
        result.skill_total[o.skill] += 1;
        if o.correct {
            result.correct += 1;
            result.skill_correct[o.skill] += 1;
        }
    }
    if !outcomes.is_empty() {
        result.loss /= outcomes.len() as f64;
    }
    Ok(result)
}
