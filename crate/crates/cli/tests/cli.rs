use std::path::Path;
use std::process::{Command, Output};

fn smarter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smarter")).args(args).output().expect("spawn smarter")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const MICRO: &str = r#"{
    "num_puzzle_groups": 2,
    "text_seq_len": 8,
    "text_dim": 24,
    "vision_dim_each": 12,
    "image_hidden_dim": 8,
    "adaptive_image_dim": 8,
    "qf_intermediate_dim": 16,
    "kv_tokens": 2,
    "hidden_dim": 8,
    "gru_hidden": 8,
    "train": {"epochs": 2, "batch_size": 16}
}"#;

fn micro_data(dir: &Path) -> (String, String) {
    let config = dir.join("micro.json");
    std::fs::write(&config, MICRO).unwrap();
    let data = dir.join("data");
    let out = smarter(&[
        "synth",
        "--groups",
        "2",
        "--per-group",
        "40",
        "--separability",
        "1",
        "--seed",
        "3",
        "--sequence-groups",
        "1",
        "--config",
        config.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("80 records (48 train / 16 val / 16 test)"), "{}", stdout(&out));
    (config.to_str().unwrap().to_string(), data.to_str().unwrap().to_string())
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = micro_data(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let out = smarter(&["train", "--config", &config, "--data", &data, "--seed", "1", "--out", run_s]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["metrics.jsonl", "timings.jsonl", "checkpoint.smrt", "config.json"] {
        assert!(run.join(file).exists(), "{file}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // 48 train records / batch 16 → 3 steps per epoch; 2 epochs of 3 steps,
    // 2 epoch summaries (train, val) and the final test record.
    assert_eq!(lines.len(), 6 + 4 + 1);
    assert!(lines.iter().all(|l| l["seed"] == 1 && l.get("seconds").is_none()));

    let checkpoint = run.join("checkpoint.smrt");
    let out = smarter(&["eval", "--checkpoint", checkpoint.to_str().unwrap(), "--data", &data, "--split", "test"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let record: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    let test = lines.last().unwrap();
    assert_eq!(record["split"], "test");
    assert_eq!(record["accuracy"], test["accuracy"]);
    assert_eq!(record["skill_accuracy"], test["skill_accuracy"]);
    assert_eq!(record["skill_accuracy"].as_object().unwrap().len(), 8);

    // Same inputs, same metrics file.
    let again = dir.path().join("again");
    let out = smarter(&["train", "--config", &config, "--data", &data, "--seed", "1", "--out", again.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(again.join("metrics.jsonl")).unwrap(), metrics.as_bytes());
}

#[test]
fn ablate_writes_summary_and_flags_failed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = micro_data(dir.path());
    let out_dir = dir.path().join("heads");
    let out = smarter(&[
        "ablate",
        "--axis",
        "heads",
        "--values",
        "1,5,2",
        "--config",
        &config,
        "--data",
        &data,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    // 24 is not divisible by 5: that row fails, the others complete, exit is nonzero.
    assert!(!out.status.success());
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("1 MHA heads,completed"));
    assert!(rows[1].starts_with("5 MHA heads,failed"));
    assert!(rows[2].starts_with("2 MHA heads,completed"));
}

#[test]
fn gradcheck_exit_status() {
    let out = smarter(&["gradcheck"]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(stdout(&out).contains("decoder.fc3.weight"));
    let out = smarter(&["gradcheck", "--inject-fault"]);
    assert!(!out.status.success());
    let text = stdout(&out);
    let failed = text.lines().find(|l| l.starts_with("failed blocks:")).unwrap();
    assert!(failed.contains("composite.norm.gain"), "{failed}");
}

#[test]
fn params_reports_published_delta() {
    let out = smarter(&["params"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let count: i64 = text.lines().next().unwrap().trim().parse().unwrap();
    assert!(text.contains(&format!("delta {:+}", count - 29_623_375)));
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = smarter(&["train", "--data", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = smarter(&["synth", "--groups", "2", "--per-group", "3", "--separability", "1", "--out", missing.to_str().unwrap()]);
    assert!(!out.status.success());
    let out = smarter(&["ablate", "--axis", "depth", "--data", missing.to_str().unwrap(), "--out", missing.to_str().unwrap()]);
    assert!(!out.status.success());
}
