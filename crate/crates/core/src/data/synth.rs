//! Synthetic embedding datasets with a planted, linearly readable answer.
//!
//! Every (group, option) pair owns a Gaussian direction for the image vector
//! and one for the text rows. A record with label `c` adds `separability ×`
//! those directions to unit Gaussian noise: at 1 the classes sit
//! `√(2·dim)` noise-widths apart, at 0 the inputs carry no label information.
//! The second vision vector stays pure noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::{ModelConfig, DIGITS};
use crate::seed::derive_seed;

use super::record::{AnswerType, EmbeddingRecord, SkillClass};
use super::DataError;

/// Shortest synthetic question, in token rows.
pub const MIN_VALID_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub seed: u64,
    pub per_group: usize,
    pub separability: f64,
    /// The last `sequence_groups` groups get sequence-type answers.
    pub sequence_groups: usize,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Classification-only synthetic records for every group of `config`.
pub fn synth_generate(
    config: &ModelConfig,
    seed: u64,
    per_group: usize,
    separability: f64,
) -> Result<Vec<EmbeddingRecord>, DataError> {
    synth_generate_with(config, &SynthOptions { seed, per_group, separability, sequence_groups: 0 })
}

pub fn synth_generate_with(config: &ModelConfig, opts: &SynthOptions) -> Result<Vec<EmbeddingRecord>, DataError> {
    if opts.per_group < 5 {
        return Err(DataError::Invalid(format!("per_group must be at least 5, got {}", opts.per_group)));
    }
    if !(0.0..=1.0).contains(&opts.separability) {
        return Err(DataError::Invalid(format!("separability must be in [0, 1], got {}", opts.separability)));
    }
    if opts.sequence_groups > config.num_puzzle_groups {
        return Err(DataError::Invalid("more sequence groups than groups".into()));
    }
    let classes = config.answer_classes;
    let (v, l, d) = (config.vision_dim_each, config.text_seq_len, config.text_dim);
    let max_len = config.text_seq_len;
    let min_len = MIN_VALID_LEN.min(max_len);
    let strength = opts.separability as f32;
    let mut records = Vec::with_capacity(config.num_puzzle_groups * opts.per_group);

    for group in 0..config.num_puzzle_groups {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[group as u64]));
        let image_means: Vec<Vec<f32>> = (0..classes).map(|_| gaussian(&mut rng, v)).collect();
        let text_means: Vec<Vec<f32>> = (0..classes).map(|_| gaussian(&mut rng, d)).collect();
        let sequence = group >= config.num_puzzle_groups - opts.sequence_groups;
        let options = sequence.then(|| option_sequences(&mut rng, classes, config.max_decode_len));

        for _ in 0..opts.per_group {
            let label = rng.gen_range(0..classes);
            let mut dino = gaussian(&mut rng, v);
            for (x, m) in dino.iter_mut().zip(&image_means[label]) {
                *x += strength * m;
            }
            let siglip = gaussian(&mut rng, v);
            let valid_len = rng.gen_range(min_len..=max_len);
            let mut text_tokens = vec![0.0f32; l * d];
            for row in text_tokens.chunks_exact_mut(d).take(valid_len) {
                for (x, m) in row.iter_mut().zip(&text_means[label]) {
                    *x = rng.sample::<f32, _>(StandardNormal) + strength * m;
                }
            }
            records.push(EmbeddingRecord {
                puzzle_group: group,
                skill_class: SkillClass::ALL[group % SkillClass::ALL.len()],
                answer_type: if sequence { AnswerType::Sequence } else { AnswerType::Classification },
                dino,
                siglip,
                text_tokens,
                valid_len,
                label,
                answer_sequence: options.as_ref().map(|o: &Vec<Vec<usize>>| o[label].clone()),
                option_sequences: options.clone(),
            });
        }
    }
    Ok(records)
}

/// Distinct digit sequences, short enough to decode with the end marker.
fn option_sequences(rng: &mut ChaCha8Rng, classes: usize, max_decode_len: usize) -> Vec<Vec<usize>> {
    let longest = max_decode_len.saturating_sub(1).max(1);
    let mut options: Vec<Vec<usize>> = Vec::with_capacity(classes);
    while options.len() < classes {
        let len = rng.gen_range(1..=longest);
        let candidate: Vec<usize> = (0..len).map(|_| rng.gen_range(0..DIGITS)).collect();
        if !options.contains(&candidate) {
            options.push(candidate);
        }
    }
    options
}
