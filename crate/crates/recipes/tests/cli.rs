use std::path::Path;
use std::process::Command;

use minitune_recipes::cli::cli_main;

fn config(name: &str) -> String {
    format!("{}/configs/{name}.yaml", env!("CARGO_MANIFEST_DIR"))
}

fn tune(args: &[&str]) -> i32 {
    cli_main(std::iter::once("tune").chain(args.iter().copied()))
}

fn out_override(dir: &Path) -> String {
    format!("output_dir={}", dir.display())
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(tune(&[]), 2);
    assert_eq!(tune(&["run", "sft_huge", "--config", "x.yaml"]), 2);
    assert_eq!(tune(&["run", "sft_full"]), 2);
    assert_eq!(tune(&["frobnicate"]), 2);
    assert_eq!(tune(&["--help"]), 0);
}

#[test]
fn recipe_failures_exit_with_one() {
    assert_eq!(tune(&["run", "sft_full", "--config", "/no/such/file.yaml"]), 1);
    assert_eq!(tune(&["run", "sft_full", "--config", &config("sft_full"), "batch_sise=4"]), 1);
    assert_eq!(tune(&["run", "sft_full", "--config", &config("sft_full"), "compile=True"]), 1);
    assert_eq!(tune(&["run", "sft_full", "--config", &config("sft_full"), "not-an-override"]), 1);
    // the recipe name has to match the model the config builds
    assert_eq!(tune(&["run", "sft_full", "--config", &config("sft_lora")]), 1);
    assert_eq!(tune(&["run", "sft_lora", "--config", &config("sft_full")]), 1);
}

#[test]
fn gen_corpus_writes_jsonl() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("corpus.jsonl");
    let out_str = out.display().to_string();
    assert_eq!(tune(&["gen-corpus", "--num-samples", "12", "--seed", "3", "--out", &out_str]), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 12);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.is_object(), "{line}");
    }
    let again = tmp.path().join("again.jsonl");
    tune(&["gen-corpus", "--num-samples", "12", "--seed", "3", "--out", &again.display().to_string()]);
    assert_eq!(std::fs::read(&again).unwrap(), text.as_bytes());
}

#[test]
fn sft_lora_runs_and_writes_its_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let code = tune(&[
        "run",
        "sft_lora",
        "--config",
        &config("sft_lora"),
        &out_override(tmp.path()),
        "max_steps=2",
        "dataset.num_samples=16",
    ]);
    assert_eq!(code, 0);
    let report = std::fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3, "{report}");
    assert!(tmp.path().join("summary.txt").exists());
    assert!(tmp.path().join("logs/metrics.csv").exists());
    assert!(tmp.path().join("checkpoints/step_2/manifest.json").exists());
}

#[test]
fn async_grpo_runs_and_writes_a_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let code = tune(&[
        "run",
        "async_grpo",
        "--config",
        &config("async_grpo"),
        &out_override(tmp.path()),
        "orchestrator.total_steps=5",
    ]);
    assert_eq!(code, 0);
    let trace = std::fs::read_to_string(tmp.path().join("trace.jsonl")).unwrap();
    assert!(trace.lines().count() > 5);
    for line in trace.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    assert!(tmp.path().join("report.csv").exists());
}

#[test]
fn the_binary_reports_and_exits() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tune"))
        .args(["run", "async_grpo", "--config", &config("async_grpo")])
        .arg(out_override(tmp.path()))
        .arg("orchestrator.total_steps=3")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("recipe: async_grpo") && stdout.contains("steps: 3"), "{stdout}");

    let bad =
        Command::new(env!("CARGO_BIN_EXE_tune")).args(["run", "sft_full", "--config", "/nope.yaml"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error:"));
    let usage = Command::new(env!("CARGO_BIN_EXE_tune")).arg("run").output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
}
