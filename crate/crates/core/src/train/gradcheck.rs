use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{AnswerType, EmbeddingRecord, SkillClass};
use crate::model::{forward, GradStore, ModelConfig, ParamId, ParamStore, Session};
use crate::seed::derive_seed;
use crate::tensor::Fault;

use super::TrainError;

/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Largest accepted per-block relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;
/// Block gradient scale below which the gradient counts as identically zero
/// (central-difference noise at the check point is ~1e-10).
const ZERO: f64 = 1e-8;
const MAX_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockStatus {
    Pass,
    Fail,
    /// Gradient identically zero (unreachable from the loss, or invariant
    /// by construction); skipped.
    ZeroGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub scalars: usize,
    /// Largest gradient magnitude in the block, `max(‖analytic‖∞, ‖numeric‖∞)`.
    pub scale: f64,
    /// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)`.
    pub max_rel_error: f64,
    pub status: BlockStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.status != BlockStatus::Fail)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.blocks.iter().filter(|b| b.status == BlockStatus::Fail).map(|b| b.name.as_str()).collect()
    }
}

/// A classification record per group (one padded, one full) plus a
/// sequence-type record, so every decoder path contributes to the loss.
pub fn gradcheck_records(config: &ModelConfig) -> Vec<EmbeddingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x6C]));
    let (l, d, v) = (config.text_seq_len, config.text_dim, config.vision_dim_each);
    let groups = config.num_puzzle_groups;
    let mut make = |group: usize, valid_len: usize, label: usize| {
        let mut text_tokens: Vec<f32> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        text_tokens[valid_len * d..].iter_mut().for_each(|x| *x = 0.0);
        EmbeddingRecord {
            puzzle_group: group,
            skill_class: SkillClass::ALL[group % 8],
            answer_type: AnswerType::Classification,
            dino: (0..v).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            siglip: (0..v).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            text_tokens,
            valid_len,
            label,
            option_sequences: None,
            answer_sequence: None,
        }
    };
    let mut records: Vec<EmbeddingRecord> =
        (0..groups).map(|g| make(g, if g % 2 == 0 { l.div_ceil(2) } else { l }, (g + 1) % 5)).collect();
    let mut seq = make(groups - 1, l.max(2) - 1, 2);
    let longest = config.max_decode_len.saturating_sub(1).max(1);
    let options: Vec<Vec<usize>> = (0..5).map(|k| (0..longest.min(k + 1)).map(|j| (k + j) % 10).collect()).collect();
    seq.answer_type = AnswerType::Sequence;
    seq.answer_sequence = Some(options[seq.label].clone());
    seq.option_sequences = Some(options);
    records.push(seq);
    records
}

/// Parameters drawn away from their initial values: biases non-zero, gains
/// off one and weights wide enough that attention is far from uniform, so no
/// block sits at a point where its gradient is degenerate or tiny.
fn check_point(config: &ModelConfig) -> Result<ParamStore<f64>, TrainError> {
    let mut params = ParamStore::<f64>::init(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x9C]));
    for i in 0..params.len() {
        let id = ParamId(i);
        let gain = params.spec(id).name.ends_with(".gain");
        for v in params.values_mut(id) {
            *v = if gain { 1.0 + rng.gen_range(-0.5..0.5) } else { rng.gen_range(-1.0..1.0) };
        }
    }
    Ok(params)
}

fn mean_loss(config: &ModelConfig, params: &ParamStore<f64>, records: &[EmbeddingRecord]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (k, r) in records.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[k as u64]));
        let mut s = Session::new(config, params);
        let out = forward(&mut s, r, true, &mut rng)?;
        total += s.graph.scalar(out.loss);
    }
    Ok(total / records.len() as f64)
}

fn analytic(
    config: &ModelConfig,
    params: &ParamStore<f64>,
    records: &[EmbeddingRecord],
    fault: Option<Fault>,
) -> Result<GradStore<f64>, TrainError> {
    let mut grads = GradStore::new(params);
    for (k, r) in records.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[k as u64]));
        let mut s = match fault {
            Some(f) => Session::with_fault(config, params, f),
            None => Session::new(config, params),
        };
        let out = forward(&mut s, r, true, &mut rng)?;
        s.backward_into(out.loss, &mut grads)?;
    }
    grads.scale(1.0 / records.len() as f64);
    Ok(grads)
}

/// Compare backpropagated gradients with central differences, in f64, for
/// every parameter block of a shrunken configuration. Dropout masks are
/// fixed per record so the loss is a deterministic function of the weights.
pub fn gradcheck(config: &ModelConfig, fault: Option<Fault>) -> Result<GradcheckReport, TrainError> {
    gradcheck_with_step(config, fault, GRADCHECK_STEP)
}

/// [`gradcheck`] with an explicit central-difference step.
pub fn gradcheck_with_step(config: &ModelConfig, fault: Option<Fault>, step: f64) -> Result<GradcheckReport, TrainError> {
    config.validate()?;
    let widths = [
        config.text_dim,
        config.vision_dim_each,
        config.image_hidden_dim,
        config.adaptive_image_dim,
        config.qf_intermediate_dim,
        config.hidden_dim,
        config.gru_hidden,
    ];
    if config.num_puzzle_groups > 2 || config.text_seq_len > 6 || widths.iter().any(|&w| w > MAX_DIM) {
        return Err(TrainError::Invalid(
            "gradcheck needs a shrunken configuration: at most 2 groups, sequence length 6, widths 8".into(),
        ));
    }
    let records = gradcheck_records(config);
    let mut params = check_point(config)?;
    let grads = analytic(config, &params, &records, fault)?;

    let mut blocks = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let id = ParamId(i);
        let spec = params.spec(id).clone();
        let n = spec.numel();
        let copies = grads.copies(id);
        let mut analytic_values = Vec::with_capacity(n * copies);
        for c in 0..copies {
            match grads.slice(id, c) {
                Some(g) => analytic_values.extend_from_slice(g),
                None => analytic_values.extend(std::iter::repeat_n(0.0, n)),
            }
        }
        let mut numeric = Vec::with_capacity(analytic_values.len());
        for j in 0..analytic_values.len() {
            let original = params.values(id)[j];
            params.values_mut(id)[j] = original + step;
            let plus = mean_loss(config, &params, &records)?;
            params.values_mut(id)[j] = original - step;
            let minus = mean_loss(config, &params, &records)?;
            params.values_mut(id)[j] = original;
            numeric.push((plus - minus) / (2.0 * step));
        }
        let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let diff = analytic_values.iter().zip(&numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = inf(&analytic_values).max(inf(&numeric));
        let max_rel_error = if scale == 0.0 { 0.0 } else { diff / scale };
        // Blocks with no path to the loss, or whose gradient vanishes
        // identically (key biases under softmax shift invariance).
        let status = if scale < ZERO {
            BlockStatus::ZeroGradient
        } else if max_rel_error < GRADCHECK_TOLERANCE {
            BlockStatus::Pass
        } else {
            BlockStatus::Fail
        };
        blocks.push(BlockCheck { name: spec.name, scalars: analytic_values.len(), scale, max_rel_error, status });
    }
    Ok(GradcheckReport { blocks })
}
