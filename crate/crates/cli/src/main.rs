use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use smarter_core::data::{
    read_dataset, split_dataset, synth_generate_with, write_dataset, DatasetManifest, Provenance, Split, SynthOptions,
    DEFAULT_FRACTIONS,
};
use smarter_core::model::{param_count, ModelConfig};
use smarter_core::tensor::Fault;
use smarter_core::train::{
    evaluate, gradcheck, load_checkpoint, run_ablation, seed_sweep, train, AblationAxis, AblationSpec, BlockStatus,
    MetricsRecord, RecordKind, RowStatus,
};

const PUBLISHED_PARAM_COUNT: i64 = 29_623_375;

#[derive(Parser)]
#[command(name = "smarter", version, about = "Puzzle reasoner over frozen vision/text embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with the configured recipe; writes metrics.jsonl, timings.jsonl and checkpoint.smrt.
    Train {
        /// Model configuration JSON; defaults to the full configuration sized to the dataset's groups.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split; prints a metrics record as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// One training run per axis value; writes summary.csv.
    Ablate {
        /// heads | intermediate | activation | composite | residual | dropout | lr | grid
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the axis's standard row set when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every parameter block on the shrunken configuration.
    Gradcheck {
        /// Override the shrunken configuration (must stay within its limits).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corrupt the layer-norm gain gradient to exercise failure reporting.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Generate a synthetic dataset with a planted answer signal, split 60/20/20 per group.
    Synth {
        #[arg(long)]
        groups: usize,
        #[arg(long)]
        per_group: usize,
        #[arg(long)]
        separability: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Embedding dims come from this configuration (full dims by default).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of trailing groups with sequence-type answers.
        #[arg(long, default_value_t = 0)]
        sequence_groups: usize,
        /// Records per group entering the split (all of them by default).
        #[arg(long)]
        cap: Option<usize>,
    },
    /// Print the trainable parameter count.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train once per seed and report held-out accuracy mean and standard deviation.
    SeedSweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,7,42")]
        seeds: Vec<u64>,
    },
}

fn load_config(path: Option<&Path>) -> Result<Option<ModelConfig>> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config: ModelConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    config.validate()?;
    Ok(Some(config))
}

fn config_for_data(path: Option<&Path>, manifest: &DatasetManifest) -> Result<ModelConfig> {
    Ok(load_config(path)?.unwrap_or_else(|| ModelConfig { num_puzzle_groups: manifest.groups.len(), ..ModelConfig::full() }))
}

fn load_data(dir: &Path) -> Result<(Vec<smarter_core::data::EmbeddingRecord>, DatasetManifest)> {
    read_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn print_accuracy(prefix: &str, record: &MetricsRecord) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{:.2}%", 100.0 * a));
    let skills: Vec<String> = record
        .skill_accuracy
        .iter()
        .filter_map(|(s, a)| a.map(|a| format!("{}={:.2}%", s.name(), 100.0 * a)))
        .collect();
    println!("{prefix}: loss {:.4}, accuracy {} [{}]", record.loss.unwrap_or(f64::NAN), fmt(record.accuracy), skills.join(" "));
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, data, seed, out } => {
            let (records, manifest) = load_data(&data)?;
            let config = config_for_data(config.as_deref(), &manifest)?;
            let started = Instant::now();
            let outcome = train(&config, &records, &manifest, seed, Some(&out))?;
            for r in outcome.metrics.iter().filter(|r| r.kind == RecordKind::Epoch) {
                print_accuracy(&format!("epoch {} {}", r.epoch, r.split), r);
            }
            println!(
                "{} steps in {:.1}s; best epoch {}; checkpoint in {}",
                outcome.total_steps,
                started.elapsed().as_secs_f64(),
                outcome.best_epoch,
                out.display()
            );
        }
        Command::Eval { checkpoint, data, split } => {
            let (config, params) = load_checkpoint(&checkpoint)?;
            let (records, manifest) = load_data(&data)?;
            if manifest.dims != config.record_dims() {
                bail!("dataset dims {:?} do not match the checkpoint's {:?}", manifest.dims, config.record_dims());
            }
            let indices = manifest.split_indices(split);
            let result = evaluate(&config, &params, &records, &indices)?;
            let record = MetricsRecord {
                kind: RecordKind::Epoch,
                epoch: 0,
                step: 0,
                split: split.name().to_string(),
                loss: Some(result.loss),
                lr: 0.0,
                grad_norm: None,
                accuracy: result.accuracy(),
                skill_accuracy: result.skill_accuracy(),
                seed: config.seed,
                config_digest: config.digest(),
            };
            println!("{}", serde_json::to_string(&record)?);
        }
        Command::Ablate { axis, values, config, data, out, seed } => {
            let (records, manifest) = load_data(&data)?;
            let base = config_for_data(config.as_deref(), &manifest)?;
            let spec = AblationSpec { axis: axis.parse::<AblationAxis>()?, values, base };
            let rows = run_ablation(&spec, &records, &manifest, seed, Some(&out))?;
            for r in &rows {
                match r.status {
                    RowStatus::Completed => println!(
                        "{:<45} test {}",
                        r.label,
                        r.test_accuracy.map_or("n/a".into(), |a| format!("{:.2}%", 100.0 * a))
                    ),
                    RowStatus::Failed => println!("{:<45} FAILED: {}", r.label, r.error.as_deref().unwrap_or("")),
                }
            }
            println!("summary written to {}", out.join("summary.csv").display());
            return Ok(rows.iter().all(|r| r.status == RowStatus::Completed));
        }
        Command::Gradcheck { config, inject_fault } => {
            let config = load_config(config.as_deref())?.unwrap_or_else(ModelConfig::shrunken);
            let started = Instant::now();
            let report = gradcheck(&config, inject_fault.then_some(Fault::LayerNormGainGrad))?;
            for b in &report.blocks {
                let status = match b.status {
                    BlockStatus::Pass => "pass",
                    BlockStatus::Fail => "FAIL",
                    BlockStatus::ZeroGradient => "zero-gradient (skipped)",
                };
                println!("{:<28} {:>6} scalars  grad scale {:.2e}  max rel err {:.3e}  {status}", b.name, b.scalars, b.scale, b.max_rel_error);
            }
            println!("{:.2}s", started.elapsed().as_secs_f64());
            if !report.passed() {
                println!("failed blocks: {}", report.failures().join(", "));
            }
            return Ok(report.passed());
        }
        Command::Synth { groups, per_group, separability, seed, out, config, sequence_groups, cap } => {
            let base = load_config(config.as_deref())?.unwrap_or_else(ModelConfig::full);
            let config = ModelConfig { num_puzzle_groups: groups, ..base };
            let opts = SynthOptions { seed, per_group, separability, sequence_groups };
            let records = synth_generate_with(&config, &opts)?;
            let mut manifest = DatasetManifest::describe(
                &records,
                config.record_dims(),
                groups,
                Provenance::Synthetic { seed, separability },
            );
            let splits = split_dataset(&manifest, DEFAULT_FRACTIONS, cap.unwrap_or(per_group), seed)?;
            manifest.set_splits(&splits);
            write_dataset(&out, &records, &manifest)?;
            let n = |s| manifest.split_indices(s).len();
            println!(
                "{} records ({} train / {} val / {} test) written to {}",
                records.len(),
                n(Split::Train),
                n(Split::Val),
                n(Split::Test),
                out.display()
            );
        }
        Command::Params { config } => {
            let config = load_config(config.as_deref())?.unwrap_or_else(ModelConfig::full);
            let count = param_count(&config);
            println!("{count}");
            if config == ModelConfig::full() {
                let delta = count as i64 - PUBLISHED_PARAM_COUNT;
                println!("published count: {PUBLISHED_PARAM_COUNT} (delta {delta:+}, {:+.2}%)", 100.0 * delta as f64 / PUBLISHED_PARAM_COUNT as f64);
            }
        }
        Command::SeedSweep { config, data, seeds } => {
            let (records, manifest) = load_data(&data)?;
            let config = config_for_data(config.as_deref(), &manifest)?;
            let sweep = seed_sweep(&config, &records, &manifest, &seeds)?;
            for (seed, acc) in &sweep.accuracies {
                println!("seed {seed}: {:.2}%", 100.0 * acc);
            }
            println!("mean {:.2}%  std {:.2}", 100.0 * sweep.mean, 100.0 * sweep.std);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
