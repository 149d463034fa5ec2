use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{epoch_batches, DatasetManifest, EmbeddingRecord, Split};
use crate::model::{forward, GradStore, ModelConfig, ModelError, ParamStore, Session};
use crate::optim::{adamw_step, clip_global_norm, cosine_lr, AdamW, OptimState, Schedule};
use crate::seed::derive_seed;
use crate::tensor::TensorError;

use super::checkpoint::{save_checkpoint, CHECKPOINT_FILE};
use super::eval::{evaluate, EvalResult};
use super::metrics::{MetricsRecord, RecordKind, StepTiming};
use super::TrainError;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";

/// Records per gradient work unit. Fixed so that the summation order, and
/// with it every bit of the result, does not depend on the thread count.
const CHUNK: usize = 16;

/// Mean loss and mean gradient over `batch`, one graph per record.
///
/// Record `k` of the batch draws its dropout masks from a stream keyed by
/// (seed, epoch, step, k).
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients(
    config: &ModelConfig,
    params: &ParamStore<f32>,
    records: &[EmbeddingRecord],
    batch: &[usize],
    seed: u64,
    epoch: usize,
    step: usize,
    lr: f64,
) -> Result<(GradStore<f32>, f64), TrainError> {
    let non_finite = |group: usize| TrainError::NonFinite { what: "loss", step, group: Some(group), lr };
    let partials: Vec<(GradStore<f32>, f64)> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut grads = GradStore::new(params);
            let mut loss_sum = 0.0;
            for (k, &i) in chunk.iter().enumerate() {
                let record = &records[i];
                let position = (c * CHUNK + k) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64, step as u64, position]));
                let mut s = Session::new(config, params);
                let out = match forward(&mut s, record, true, &mut rng) {
                    Err(ModelError::Tensor(TensorError::NonFinite { .. })) => return Err(non_finite(record.puzzle_group)),
                    other => other?,
                };
                let loss = s.graph.scalar(out.loss) as f64;
                if !loss.is_finite() {
                    return Err(non_finite(record.puzzle_group));
                }
                loss_sum += loss;
                s.backward_into(out.loss, &mut grads)?;
            }
            Ok((grads, loss_sum))
        })
        .collect::<Result<_, TrainError>>()?;

    let mut total = GradStore::new(params);
    let mut loss_sum = 0.0;
    for (g, l) in &partials {
        total.merge(g);
        loss_sum += l;
    }
    let n = batch.len().max(1) as f64;
    total.scale(1.0 / n as f32);
    Ok((total, loss_sum / n))
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: ModelConfig,
    /// Parameters of the best validation epoch.
    pub params: ParamStore<f32>,
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    /// Held-out test evaluation of the best parameters, if the split exists.
    pub test: Option<EvalResult>,
    pub metrics: Vec<MetricsRecord>,
    pub total_steps: usize,
}

struct Sink {
    metrics: Option<BufWriter<File>>,
    timings: Option<BufWriter<File>>,
    records: Vec<MetricsRecord>,
}

impl Sink {
    fn open(out_dir: Option<&Path>) -> Result<Self, TrainError> {
        let (metrics, timings) = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                (
                    Some(BufWriter::new(File::create(dir.join(METRICS_FILE))?)),
                    Some(BufWriter::new(File::create(dir.join(TIMINGS_FILE))?)),
                )
            }
            None => (None, None),
        };
        Ok(Self { metrics, timings, records: Vec::new() })
    }

    fn line<T: Serialize>(w: &mut Option<BufWriter<File>>, value: &T) -> Result<(), TrainError> {
        if let Some(w) = w {
            serde_json::to_writer(&mut *w, value)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }

    fn push(&mut self, record: MetricsRecord, started: Instant) -> Result<(), TrainError> {
        let timing = StepTiming {
            epoch: record.epoch,
            step: record.step,
            split: record.split.clone(),
            seconds: started.elapsed().as_secs_f64(),
        };
        Self::line(&mut self.metrics, &record)?;
        Self::line(&mut self.timings, &timing)?;
        self.records.push(record);
        Ok(())
    }
}

fn check_dataset(config: &ModelConfig, manifest: &DatasetManifest, records: &[EmbeddingRecord]) -> Result<(), TrainError> {
    if manifest.dims != config.record_dims() {
        return Err(TrainError::Mismatch(format!(
            "dataset dims {:?} vs configuration {:?}",
            manifest.dims,
            config.record_dims()
        )));
    }
    if manifest.groups.len() > config.num_puzzle_groups {
        return Err(TrainError::Mismatch(format!(
            "dataset has {} puzzle groups, configuration {}",
            manifest.groups.len(),
            config.num_puzzle_groups
        )));
    }
    if records.len() != manifest.records.len() {
        return Err(TrainError::Mismatch("record count differs from the manifest".into()));
    }
    Ok(())
}

/// Train on the manifest's train split with the configured recipe; validate
/// once per epoch and keep the best-validation parameters (ties keep the
/// earlier epoch). With `out_dir`, metrics, timings and the best checkpoint
/// are written there.
pub fn train(
    config: &ModelConfig,
    records: &[EmbeddingRecord],
    manifest: &DatasetManifest,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let config = ModelConfig { seed, ..config.clone() };
    config.validate()?;
    check_dataset(&config, manifest, records)?;
    let train_idx = manifest.split_indices(Split::Train);
    let val_idx = manifest.split_indices(Split::Val);
    let test_idx = manifest.split_indices(Split::Test);
    if train_idx.is_empty() {
        return Err(TrainError::Invalid("the train split is empty".into()));
    }

    let tc = config.train;
    let per_epoch = train_idx.len().div_ceil(tc.batch_size);
    let total_steps = tc.epochs * per_epoch;
    let schedule = Schedule::from_config(&tc, total_steps);
    let digest = config.digest();
    let mut params = ParamStore::<f32>::init(&config)?;
    let mut state = OptimState::new(&params, AdamW::from(&tc));
    let mut sink = Sink::open(out_dir)?;
    let record = |kind, epoch, step, split: &str, loss, lr, grad_norm, eval: Option<&EvalResult>| MetricsRecord {
        kind,
        epoch,
        step,
        split: split.to_string(),
        loss,
        lr,
        grad_norm,
        accuracy: eval.and_then(EvalResult::accuracy),
        skill_accuracy: eval.map(EvalResult::skill_accuracy).unwrap_or_else(MetricsRecord::skills_absent),
        seed,
        config_digest: digest.clone(),
    };

    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut step = 0;
    for epoch in 0..tc.epochs {
        let mut epoch_loss = 0.0;
        for batch in epoch_batches(&train_idx, records, tc.batch_size, seed, epoch) {
            let started = Instant::now();
            let lr = cosine_lr(step, &schedule);
            let (mut grads, loss) = batch_gradients(&config, &params, records, &batch, seed, epoch, step, lr)?;
            let norm = clip_global_norm(&mut grads, tc.clip_norm);
            if !norm.is_finite() {
                return Err(TrainError::NonFinite { what: "gradient norm", step, group: None, lr });
            }
            adamw_step(&mut params, &grads, &mut state, lr)?;
            if !params.all_finite() {
                return Err(TrainError::NonFinite { what: "parameters", step, group: None, lr });
            }
            epoch_loss += loss * batch.len() as f64;
            sink.push(record(RecordKind::Step, epoch, step, "train", Some(loss), lr, Some(norm), None), started)?;
            step += 1;
        }

        let started = Instant::now();
        let lr = cosine_lr(step, &schedule);
        let mean = epoch_loss / train_idx.len() as f64;
        sink.push(record(RecordKind::Epoch, epoch, step, "train", Some(mean), lr, None, None), started)?;
        if !val_idx.is_empty() {
            let started = Instant::now();
            let val = evaluate(&config, &params, records, &val_idx)?;
            sink.push(record(RecordKind::Epoch, epoch, step, "val", Some(val.loss), lr, None, Some(&val)), started)?;
            let acc = val.accuracy().unwrap_or(0.0);
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, params.clone()));
            }
        }
    }

    let (best_val_accuracy, best_epoch, params) = match best {
        Some((acc, epoch, p)) => (Some(acc), epoch, p),
        None => (None, tc.epochs - 1, params),
    };
    let test = if test_idx.is_empty() {
        None
    } else {
        let started = Instant::now();
        let test = evaluate(&config, &params, records, &test_idx)?;
        let lr = cosine_lr(step, &schedule);
        sink.push(record(RecordKind::Epoch, best_epoch, step, "test", Some(test.loss), lr, None, Some(&test)), started)?;
        Some(test)
    };
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &config, &params)?;
    }
    Ok(TrainOutcome { config, params, best_epoch, best_val_accuracy, test, metrics: sink.records, total_steps })
}

/// Held-out accuracy across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSweep {
    pub accuracies: Vec<(u64, f64)>,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
}

/// Train once per seed and summarize test accuracy (validation when the
/// dataset has no test split).
pub fn seed_sweep(
    config: &ModelConfig,
    records: &[EmbeddingRecord],
    manifest: &DatasetManifest,
    seeds: &[u64],
) -> Result<SeedSweep, TrainError> {
    let mut accuracies = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run = train(config, records, manifest, seed, None)?;
        let acc = run.test.as_ref().and_then(EvalResult::accuracy).or(run.best_val_accuracy).unwrap_or(0.0);
        accuracies.push((seed, acc));
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().map(|(_, a)| a).sum::<f64>() / n;
    let var = if accuracies.len() > 1 {
        accuracies.iter().map(|(_, a)| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(SeedSweep { accuracies, mean, std: var.sqrt() })
}
