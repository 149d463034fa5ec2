use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{
    split_dataset, synth_generate, DatasetManifest, EmbeddingRecord, Provenance, SkillClass, Split, DEFAULT_FRACTIONS,
};
use crate::model::{forward, CompositeMask, ModelConfig, ParamStore, Session, TrainConfig};
use crate::optim::{cosine_lr, Schedule};
use crate::seed::derive_seed;
use crate::tensor::Fault;

fn micro(groups: usize) -> ModelConfig {
    ModelConfig {
        num_puzzle_groups: groups,
        text_seq_len: 8,
        text_dim: 24,
        vision_dim_each: 12,
        image_hidden_dim: 8,
        adaptive_image_dim: 8,
        qf_intermediate_dim: 16,
        kv_tokens: 2,
        hidden_dim: 8,
        gru_hidden: 8,
        ..ModelConfig::full()
    }
}

fn dataset(config: &ModelConfig, per_group: usize, separability: f64, seed: u64) -> (Vec<EmbeddingRecord>, DatasetManifest) {
    let records = synth_generate(config, seed, per_group, separability).unwrap();
    let mut manifest = DatasetManifest::describe(
        &records,
        config.record_dims(),
        config.num_puzzle_groups,
        Provenance::Synthetic { seed, separability },
    );
    let splits = split_dataset(&manifest, DEFAULT_FRACTIONS, per_group, seed).unwrap();
    manifest.set_splits(&splits);
    (records, manifest)
}

#[test]
fn batch_loss_is_mean_of_record_losses() {
    let cfg = micro(2);
    let (records, _) = dataset(&cfg, 20, 1.0, 3);
    let params = ParamStore::<f32>::init(&cfg).unwrap();
    let batch: Vec<usize> = (0..records.len()).step_by(2).collect();
    let (_, loss) = batch_gradients(&cfg, &params, &records, &batch, 5, 1, 4, 1e-4).unwrap();
    let mut expected = 0.0;
    for (k, &i) in batch.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(5, &[1, 4, k as u64]));
        let mut s = Session::new(&cfg, &params);
        let out = forward(&mut s, &records[i], true, &mut rng).unwrap();
        expected += s.graph.scalar(out.loss) as f64;
    }
    expected /= batch.len() as f64;
    assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
}

#[test]
fn batch_gradients_independent_of_thread_count() {
    let cfg = micro(2);
    let (records, _) = dataset(&cfg, 40, 1.0, 3);
    let params = ParamStore::<f32>::init(&cfg).unwrap();
    let batch: Vec<usize> = (0..records.len()).collect();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| batch_gradients(&cfg, &params, &records, &batch, 0, 0, 0, 0.0).unwrap())
    };
    let (g1, l1) = run(1);
    let (g3, l3) = run(3);
    assert_eq!(l1.to_bits(), l3.to_bits());
    assert_eq!(g1.global_norm().to_bits(), g3.global_norm().to_bits());
}

#[test]
fn first_step_loss_near_uniform() {
    let cfg = micro(2);
    let (records, manifest) = dataset(&cfg, 40, 1.0, 0);
    let run = train(&cfg, &records, &manifest, 0, None).unwrap();
    let first = run.metrics.iter().find(|r| r.kind == RecordKind::Step).unwrap();
    assert!((first.loss.unwrap() - 5f64.ln()).abs() < 0.3, "{:?}", first.loss);
}

#[test]
fn logged_lr_follows_schedule() {
    // 2 × 640 records → 768 train records → 6 steps per epoch, 18 in total.
    let cfg = micro(2);
    let (records, manifest) = dataset(&cfg, 640, 1.0, 0);
    let run = train(&cfg, &records, &manifest, 0, None).unwrap();
    assert_eq!(run.total_steps, 18);
    let schedule = Schedule::from_config(&cfg.train, run.total_steps);
    for r in &run.metrics {
        assert_eq!(r.lr.to_bits(), cosine_lr(r.step, &schedule).to_bits(), "step {}", r.step);
    }
    let lr_at = |step| run.metrics.iter().find(|r| r.step == step).unwrap().lr;
    assert!(lr_at(0).abs() < 1e-12);
    assert!((lr_at(10) - 3e-4).abs() < 1e-12);
    assert!(lr_at(run.total_steps).abs() < 1e-12);
    let steps: Vec<usize> = run.metrics.iter().filter(|r| r.kind == RecordKind::Step).map(|r| r.step).collect();
    assert_eq!(steps, (0..18).collect::<Vec<_>>());
}

#[test]
fn rerun_metrics_bitwise_identical() {
    let cfg = micro(2);
    let (records, manifest) = dataset(&cfg, 60, 1.0, 1);
    let dir = tempfile::tempdir().unwrap();
    let a = train(&cfg, &records, &manifest, 7, Some(&dir.path().join("a"))).unwrap();
    let b = train(&cfg, &records, &manifest, 7, Some(&dir.path().join("b"))).unwrap();
    assert_eq!(a.metrics, b.metrics);
    let bytes = |run: &str| std::fs::read(dir.path().join(run).join(METRICS_FILE)).unwrap();
    assert_eq!(bytes("a"), bytes("b"));
    let c = train(&cfg, &records, &manifest, 8, None).unwrap();
    assert_ne!(a.metrics, c.metrics);
}

#[test]
fn separable_micro_data_is_learned() {
    let cfg = ModelConfig { train: TrainConfig { epochs: 10, batch_size: 32, lr: 1e-2, ..TrainConfig::default() }, ..micro(2) };
    let (records, manifest) = dataset(&cfg, 200, 1.0, 0);
    let run = train(&cfg, &records, &manifest, 0, None).unwrap();
    let acc = run.test.unwrap().accuracy().unwrap();
    assert!(acc > 0.95, "{acc}");
}

fn constant_a_params(cfg: &ModelConfig) -> ParamStore<f32> {
    let mut params = ParamStore::<f32>::init(cfg).unwrap();
    let w3 = params.id("decoder.fc3.weight").unwrap();
    let b3 = params.id("decoder.fc3.bias").unwrap();
    params.values_mut(w3).iter_mut().for_each(|w| *w = 0.0);
    for g in 0..cfg.num_puzzle_groups {
        params.slice_mut(b3, g)[0] = 1.0;
    }
    params
}

#[test]
fn constant_answer_scores_label_frequency() {
    let cfg = micro(3);
    let (records, manifest) = dataset(&cfg, 100, 1.0, 2);
    let params = constant_a_params(&cfg);
    let all: Vec<usize> = (0..records.len()).collect();
    let result = evaluate(&cfg, &params, &records, &all).unwrap();
    let zeros = records.iter().filter(|r| r.label == 0).count();
    assert_eq!(result.correct, zeros);
    assert!((result.accuracy().unwrap() - 0.2).abs() < 0.05);

    // Overall accuracy is the count-weighted mean of per-skill accuracy.
    let skills = result.skill_accuracy();
    let weighted: f64 = SkillClass::ALL
        .iter()
        .filter_map(|s| skills[s].map(|a| a * result.skill_total[s.index()] as f64))
        .sum::<f64>()
        / result.records as f64;
    assert!((weighted - result.accuracy().unwrap()).abs() < 1e-12);
    let test = manifest.split_indices(Split::Test);
    assert_eq!(evaluate(&cfg, &params, &records, &test).unwrap().records, test.len());
}

#[test]
fn perfect_predictions_score_one() {
    let cfg = micro(3);
    let (mut records, _) = dataset(&cfg, 10, 1.0, 5);
    let picked: Vec<usize> = (0..10).map(|k| k * 3).collect();
    for &i in &picked {
        records[i].label = 0;
    }
    let result = evaluate(&cfg, &constant_a_params(&cfg), &records, &picked).unwrap();
    assert_eq!(result.accuracy(), Some(1.0));
    for (skill, acc) in result.skill_accuracy() {
        let represented = picked.iter().any(|&i| records[i].skill_class == skill);
        assert_eq!(acc, represented.then_some(1.0), "{skill:?}");
    }
}

#[test]
fn absent_skills_are_none() {
    let cfg = micro(2);
    let (records, _) = dataset(&cfg, 20, 1.0, 2);
    let params = ParamStore::<f32>::init(&cfg).unwrap();
    let only_group0: Vec<usize> = (0..records.len()).filter(|&i| records[i].puzzle_group == 0).collect();
    let skills = evaluate(&cfg, &params, &records, &only_group0).unwrap().skill_accuracy();
    assert!(skills[&SkillClass::ALL[0]].is_some());
    for s in &SkillClass::ALL[1..] {
        assert_eq!(skills[s], None);
    }
    let empty = evaluate(&cfg, &params, &records, &[]).unwrap();
    assert_eq!(empty.accuracy(), None);
}

#[test]
fn checkpoint_round_trip() {
    let cfg = micro(3);
    let (records, manifest) = dataset(&cfg, 30, 1.0, 4);
    let dir = tempfile::tempdir().unwrap();
    let run = train(&cfg, &records, &manifest, 1, Some(dir.path())).unwrap();
    let (config, params) = load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(config, run.config);
    for i in 0..params.len() {
        let id = crate::model::ParamId(i);
        assert_eq!(params.values(id), run.params.values(id));
    }
    let test = manifest.split_indices(Split::Test);
    assert_eq!(evaluate(&config, &params, &records, &test).unwrap(), run.test.unwrap());
}

#[test]
fn checkpoint_shape_mismatch_refused() {
    let cfg = micro(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    save_checkpoint(&path, &cfg, &ParamStore::<f32>::init(&cfg).unwrap()).unwrap();
    let other = ModelConfig { hidden_dim: 4, ..cfg };
    std::fs::write(dir.path().join(CONFIG_FILE), serde_json::to_vec(&other).unwrap()).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(TrainError::Mismatch(_))));
}

#[test]
fn divergence_aborts_with_context() {
    // Adam moves every weight by about lr per step; at 1e36 the second
    // update pushes the weights far enough that the forward pass overflows.
    let cfg = ModelConfig { train: TrainConfig { lr: 1e36, batch_size: 8, ..TrainConfig::default() }, ..micro(2) };
    let (records, manifest) = dataset(&cfg, 20, 1.0, 0);
    match train(&cfg, &records, &manifest, 0, None) {
        Err(TrainError::NonFinite { what, step, group, lr }) => {
            assert!(step >= 1, "{what} at step {step}");
            assert!(lr > 0.0);
            if what == "loss" {
                assert!(group.is_some());
            }
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.metrics.len())),
    }
}

#[test]
fn non_finite_records_refused() {
    let cfg = micro(2);
    let (mut records, manifest) = dataset(&cfg, 20, 1.0, 0);
    records[3].dino[0] = f32::NAN;
    assert!(matches!(train(&cfg, &records, &manifest, 0, None), Err(TrainError::Model(_))));
}

#[test]
fn dataset_mismatch_refused() {
    let cfg = micro(2);
    let (records, manifest) = dataset(&cfg, 20, 1.0, 0);
    let wider = ModelConfig { text_dim: 48, ..cfg.clone() };
    assert!(matches!(train(&wider, &records, &manifest, 0, None), Err(TrainError::Mismatch(_))));
    let fewer = ModelConfig { num_puzzle_groups: 1, ..cfg };
    assert!(matches!(train(&fewer, &records, &manifest, 0, None), Err(TrainError::Mismatch(_))));
}

#[test]
fn seed_sweep_reports_sample_std() {
    let cfg = ModelConfig { train: TrainConfig { epochs: 1, ..TrainConfig::default() }, ..micro(2) };
    let (records, manifest) = dataset(&cfg, 40, 0.5, 0);
    let sweep = seed_sweep(&cfg, &records, &manifest, &[0, 7, 42]).unwrap();
    let accs: Vec<f64> = sweep.accuracies.iter().map(|(_, a)| *a).collect();
    let mean = accs.iter().sum::<f64>() / 3.0;
    let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((sweep.mean - mean).abs() < 1e-15);
    assert!((sweep.std - std).abs() < 1e-15);
}

#[test]
fn ablation_row_sets() {
    let spec = |axis: &str| AblationSpec { axis: axis.parse().unwrap(), values: vec![], base: micro(2) };
    let labels = |axis: &str| ablation_rows(&spec(axis)).into_iter().map(|(l, _)| l).collect::<Vec<_>>();
    assert_eq!(labels("heads"), ["1 MHA heads", "2 MHA heads", "3 MHA heads", "4 MHA heads", "8 MHA heads"]);
    assert_eq!(labels("composite").len(), 5);
    assert_eq!(labels("lr").len(), 5);
    let grid = labels("grid");
    assert_eq!(grid.len(), 21);
    let unique: std::collections::BTreeSet<_> = grid.iter().collect();
    assert_eq!(unique.len(), 21);
    assert!(grid.contains(&"No residual connection in QF intermediate".to_string()));
    assert!(grid.contains(&"Composite: QF and Language only".to_string()));
    assert!(ablation_rows(&spec("grid")).iter().all(|(_, c)| c.is_ok()));
    assert!("nonsense".parse::<AblationAxis>().is_err());

    let (_, cfg) = ablation_rows(&spec("composite")).remove(2);
    assert_eq!(cfg.unwrap().composite_mask, CompositeMask { r1: false, r2: true, r3: false });
}

#[test]
fn ablation_failed_row_recorded_and_rest_proceed() {
    let base = ModelConfig { train: TrainConfig { epochs: 1, ..TrainConfig::default() }, ..micro(2) };
    let (records, manifest) = dataset(&base, 20, 1.0, 0);
    // 24 is not divisible by 5 heads.
    let spec = AblationSpec { axis: AblationAxis::Heads, values: vec!["2".into(), "5".into(), "3".into()], base };
    let dir = tempfile::tempdir().unwrap();
    let rows = run_ablation(&spec, &records, &manifest, 0, Some(dir.path())).unwrap();
    let status: Vec<RowStatus> = rows.iter().map(|r| r.status).collect();
    assert_eq!(status, [RowStatus::Completed, RowStatus::Failed, RowStatus::Completed]);
    assert!(rows[1].error.is_some());

    let mut reader = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
    let lines: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(&lines[1][0], "5 MHA heads");
    assert_eq!(&lines[1][1], "failed");
    assert_eq!(&lines[0][1], "completed");
    assert!(dir.path().join("2-mha-heads").join(CHECKPOINT_FILE).exists());
}

#[test]
fn gradcheck_passes_on_shrunken_config() {
    let report = gradcheck(&ModelConfig::shrunken(), None).unwrap();
    assert!(report.passed(), "{:?}", report.failures());
    let checked = report.blocks.iter().filter(|b| b.status == BlockStatus::Pass).count();
    assert!(checked > 30, "{checked}");
    assert!(report.blocks.iter().all(|b| b.max_rel_error < GRADCHECK_TOLERANCE || b.status == BlockStatus::ZeroGradient));
}

#[test]
fn gradcheck_names_faulty_blocks() {
    let report = gradcheck(&ModelConfig::shrunken(), Some(Fault::LayerNormGainGrad)).unwrap();
    assert!(!report.passed());
    let failures = report.failures();
    assert!(!failures.is_empty());
    assert!(failures.iter().all(|name| name.ends_with(".gain")), "{failures:?}");
}

#[test]
fn gradcheck_skips_unreachable_blocks() {
    let cfg = ModelConfig { composite_mask: CompositeMask { r1: false, r2: false, r3: true }, ..ModelConfig::shrunken() };
    let report = gradcheck(&cfg, None).unwrap();
    assert!(report.passed(), "{:?}", report.failures());
    let skipped: Vec<&str> =
        report.blocks.iter().filter(|b| b.status == BlockStatus::ZeroGradient).map(|b| b.name.as_str()).collect();
    assert!(skipped.contains(&"image.fc_in.weight"));
    assert!(skipped.contains(&"qf.cross_attn.q.weight"));
}

#[test]
fn gradcheck_refuses_large_configs() {
    assert!(matches!(gradcheck(&micro(2), None), Err(TrainError::Invalid(_))));
}
