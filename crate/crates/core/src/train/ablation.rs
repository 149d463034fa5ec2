use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::data::{DatasetManifest, EmbeddingRecord, SkillClass};
use crate::model::{param_count, CompositeMask, ModelConfig};
use crate::tensor::Activation;

use super::eval::EvalResult;
use super::run::train;
use super::TrainError;

pub const SUMMARY_FILE: &str = "summary.csv";

/// A hyperparameter varied by an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Heads,
    Intermediate,
    Activation,
    Composite,
    Residual,
    Dropout,
    Lr,
    /// Every architecture row: heads, intermediate size,
    /// activation, composite, residual off, dropout.
    Grid,
}

impl FromStr for AblationAxis {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "heads" => Self::Heads,
            "intermediate" => Self::Intermediate,
            "activation" => Self::Activation,
            "composite" => Self::Composite,
            "residual" => Self::Residual,
            "dropout" => Self::Dropout,
            "lr" | "learning-rate" => Self::Lr,
            "grid" => Self::Grid,
            other => return Err(TrainError::Invalid(format!("unknown ablation axis '{other}'"))),
        })
    }
}

impl AblationAxis {
    /// The standard row set for this axis.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::Heads => &["1", "2", "3", "4", "8"],
            Self::Intermediate => &["128", "256", "512", "768"],
            Self::Activation => &["gelu", "relu", "silu"],
            Self::Composite => &["all", "no-qf", "qf-only", "qf-vision", "qf-language"],
            Self::Residual => &["off"],
            Self::Dropout => &["0", "0.1", "0.2"],
            Self::Lr => &["0.0001", "0.0003", "0.0005", "0.001", "0.002"],
            Self::Grid => &[],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    const GRID: [AblationAxis; 6] =
        [Self::Heads, Self::Intermediate, Self::Activation, Self::Composite, Self::Residual, Self::Dropout];
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    /// Empty means the axis's default row set.
    pub values: Vec<String>,
    pub base: ModelConfig,
}

fn parse<T: FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse '{value}'"))
}

/// Row label and configuration for one axis value.
fn row(axis: AblationAxis, value: &str, base: &ModelConfig) -> (String, Result<ModelConfig, String>) {
    let mut cfg = base.clone();
    let label_and_change = (|| -> Result<String, String> {
        Ok(match axis {
            AblationAxis::Heads => {
                cfg.qf_heads = parse(value)?;
                format!("{value} MHA heads")
            }
            AblationAxis::Intermediate => {
                cfg.qf_intermediate_dim = parse(value)?;
                format!("QF Intermediate size {value}")
            }
            AblationAxis::Activation => {
                let act: Activation = value.parse().map_err(|e| format!("{e}"))?;
                cfg.activations.qf_intermediate = act;
                let name = match act {
                    Activation::Gelu => "GELU",
                    Activation::Relu => "ReLU",
                    Activation::Silu => "SiLU",
                };
                format!("QF Intermediate {name}")
            }
            AblationAxis::Composite => {
                let (mask, label) = match value {
                    "all" => ((true, true, true), "Composite: all"),
                    "no-qf" => ((true, false, true), "Composite: no QF layer"),
                    "qf-only" => ((false, true, false), "Composite: QF only"),
                    "qf-vision" => ((true, true, false), "Composite: QF and Vision only"),
                    "qf-language" => ((false, true, true), "Composite: QF and Language only"),
                    other => return Err(format!("unknown composite '{other}'")),
                };
                cfg.composite_mask = CompositeMask { r1: mask.0, r2: mask.1, r3: mask.2 };
                label.to_string()
            }
            AblationAxis::Residual => match value {
                "on" => {
                    cfg.qf_residual = true;
                    "Residual connection in QF intermediate".to_string()
                }
                "off" => {
                    cfg.qf_residual = false;
                    "No residual connection in QF intermediate".to_string()
                }
                other => return Err(format!("residual must be on or off, got '{other}'")),
            },
            AblationAxis::Dropout => {
                cfg.dropout_p = parse(value)?;
                format!("Dropout {value} in QF layer")
            }
            AblationAxis::Lr => {
                cfg.train.lr = parse(value)?;
                format!("lr {value}")
            }
            AblationAxis::Grid => return Err("grid is not a single axis".into()),
        })
    })();
    match label_and_change {
        Ok(label) => {
            let checked = cfg.validate().map(|_| cfg).map_err(|e| e.to_string());
            (label, checked)
        }
        Err(e) => (format!("{axis:?} {value}"), Err(e)),
    }
}

/// Every (label, config) pair of an ablation, in row order.
pub fn ablation_rows(spec: &AblationSpec) -> Vec<(String, Result<ModelConfig, String>)> {
    let axes: Vec<(AblationAxis, Vec<String>)> = match spec.axis {
        AblationAxis::Grid => AblationAxis::GRID.iter().map(|&a| (a, a.default_values())).collect(),
        axis if spec.values.is_empty() => vec![(axis, axis.default_values())],
        axis => vec![(axis, spec.values.clone())],
    };
    axes.iter().flat_map(|(axis, values)| values.iter().map(|v| row(*axis, v, &spec.base))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub status: RowStatus,
    pub param_count: Option<usize>,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub skill_accuracy: BTreeMap<SkillClass, Option<f64>>,
    pub error: Option<String>,
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

/// Train and evaluate one run per row with the same seed. A failing row is
/// recorded and the rest proceed. With `out_dir`, each row writes into its
/// own subdirectory and the table goes to `summary.csv`.
pub fn run_ablation(
    spec: &AblationSpec,
    records: &[EmbeddingRecord],
    manifest: &DatasetManifest,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::new();
    for (label, cfg) in ablation_rows(spec) {
        let run_dir = out_dir.map(|d| d.join(slug(&label)));
        let result = cfg.map_err(TrainError::Invalid).and_then(|cfg| {
            let run = train(&cfg, records, manifest, seed, run_dir.as_deref())?;
            Ok((param_count(&cfg), run))
        });
        rows.push(match result {
            Ok((count, run)) => AblationRow {
                label,
                status: RowStatus::Completed,
                param_count: Some(count),
                val_accuracy: run.best_val_accuracy,
                test_accuracy: run.test.as_ref().and_then(EvalResult::accuracy),
                skill_accuracy: run.test.as_ref().map(EvalResult::skill_accuracy).unwrap_or_default(),
                error: None,
            },
            Err(e) => AblationRow {
                label,
                status: RowStatus::Failed,
                param_count: None,
                val_accuracy: None,
                test_accuracy: None,
                skill_accuracy: BTreeMap::new(),
                error: Some(e.to_string()),
            },
        });
    }
    if let Some(dir) = out_dir {
        write_summary(&dir.join(SUMMARY_FILE), &rows)?;
    }
    Ok(rows)
}

/// One CSV line per row: label, status, size, accuracies, per-skill test
/// accuracy (blank when absent) and the failure message.
pub fn write_summary(path: &Path, rows: &[AblationRow]) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label", "status", "param_count", "val_accuracy", "test_accuracy"];
    header.extend(SkillClass::ALL.iter().map(|s| s.name()));
    header.push("error");
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let mut line = vec![
            r.label.clone(),
            if r.status == RowStatus::Completed { "completed".into() } else { "failed".into() },
            r.param_count.map(|c| c.to_string()).unwrap_or_default(),
            opt(r.val_accuracy),
            opt(r.test_accuracy),
        ];
        line.extend(SkillClass::ALL.iter().map(|s| opt(r.skill_accuracy.get(s).copied().flatten())));
        line.push(r.error.clone().unwrap_or_default());
        w.write_record(&line)?;
    }
    w.flush()?;
    Ok(())
}
