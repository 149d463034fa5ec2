use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::seed::derive_seed;

use super::io::{DatasetManifest, Split};
use super::record::EmbeddingRecord;
use super::DataError;

/// The 60:20:20 protocol.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.6, 0.2, 0.2];

/// Per-group seeded shuffle, keep `per_group_cap` records, assign
/// train/val/test. Validation and test sizes are floored so rounding
/// favours train.
pub fn split_dataset(
    manifest: &DatasetManifest,
    fractions: [f64; 3],
    per_group_cap: usize,
    seed: u64,
) -> Result<Vec<Option<Split>>, DataError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Invalid(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let mut assignment = vec![None; manifest.records.len()];
    for group in &manifest.groups {
        let mut members: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, m)| m.puzzle_group == group.id)
            .map(|(i, _)| i)
            .collect();
        if per_group_cap > members.len() {
            return Err(DataError::CapExceedsGroup { group: group.id, cap: per_group_cap, size: members.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[group.id as u64]));
        members.shuffle(&mut rng);
        members.truncate(per_group_cap);
        let n_val = (per_group_cap as f64 * fractions[1]).floor() as usize;
        let n_test = (per_group_cap as f64 * fractions[2]).floor() as usize;
        let n_train = per_group_cap - n_val - n_test;
        for (k, &i) in members.iter().enumerate() {
            assignment[i] = Some(if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    Ok(assignment)
}

/// Batches for one epoch: seeded shuffle of `indices`, chunks of
/// `batch_size` (final partial batch kept), each chunk ordered by puzzle group.
pub fn epoch_batches(
    indices: &[usize],
    records: &[EmbeddingRecord],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xBA7C, epoch as u64]));
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let mut batch = chunk.to_vec();
            batch.sort_by_key(|&i| records[i].puzzle_group);
            batch
        })
        .collect()
}
