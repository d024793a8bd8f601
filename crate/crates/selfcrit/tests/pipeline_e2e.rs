//! Drives the whole pipeline — all six stages — against the scripted mock
//! endpoints, then pokes at the stage-dependency, failure-threshold, lock,
//! and CLI exit-code contracts.

mod support;

use std::collections::BTreeSet;
use std::fs;
use std::process::Command;

use selfcrit::pipeline::{
    run_stage, PipelineError, Stage, COR_ERR_FILE, DPO_CHECK_FILE, EVAL_REPORT_TXT,
    JUDGE_REJECTS_FILE, JUDGMENTS_FILE, LOCK_FILE, PAIRS_FILE, PAIR_STATS_FILE, PREDICTIONS_FILE,
    SAMPLES_FILE, SFT_REJECTS_FILE, SFT_TRAINER_FILE,
};

use support::{expected_cartesian_pairs, expected_sft_rejects, run_full_pipeline};

fn read_lines(path: &std::path::Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
        .lines()
        .map(|line| serde_json::from_str(line).expect("line is JSON"))
        .collect()
}

#[tokio::test]
async fn full_pipeline_matches_the_scripted_transcript() {
    let run = run_full_pipeline().await;

    // Stage 1: every question lands in records or rejects, per script.
    let trainer = read_lines(&run.out_file(SFT_TRAINER_FILE));
    let rejects = read_lines(&run.out_file(SFT_REJECTS_FILE));
    assert_eq!(trainer.len(), run.questions.len() - expected_sft_rejects(&run.questions));
    assert_eq!(rejects.len(), expected_sft_rejects(&run.questions));
    let rejected_ids: BTreeSet<String> = rejects
        .iter()
        .map(|r| {
            assert_eq!(r["reason"]["kind"], "answer_mismatch", "scripted reject kind");
            r["question_id"].as_str().unwrap().to_string()
        })
        .collect();
    let scripted_ids: BTreeSet<String> = run
        .questions
        .iter()
        .filter(|q| q.teacher_mismatch)
        .map(|q| q.id.clone())
        .collect();
    assert_eq!(rejected_ids, scripted_ids);

    // Stage 2 sampling: n per question, untagged ones flagged but present.
    let samples = read_lines(&run.out_file(SAMPLES_FILE));
    assert_eq!(samples.len(), run.questions.len() * 4);
    let flagged = samples.iter().filter(|s| !s["issue"].is_null()).count();
    assert_eq!(flagged, 1, "exactly the scripted untagged sample is flagged");

    // Judge: verdicts partition exactly as scripted, per question.
    let judgments = read_lines(&run.out_file(JUDGMENTS_FILE));
    let judge_rejects = read_lines(&run.out_file(JUDGE_REJECTS_FILE));
    assert_eq!(judge_rejects.len(), 1, "exactly the scripted prose judgment is rejected");
    let cor_err = read_lines(&run.out_file(COR_ERR_FILE));
    assert_eq!(cor_err.len(), run.questions.len());
    for (row, q) in cor_err.iter().zip(&run.questions) {
        assert_eq!(row["id"].as_str().unwrap(), q.id);
        let as_indices = |key: &str| -> Vec<u32> {
            row[key]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_u64().unwrap() as u32)
                .collect()
        };
        assert_eq!(as_indices("correct"), q.correct_indices(), "{} correct set", q.id);
        assert_eq!(as_indices("incorrect"), q.incorrect_indices(), "{} incorrect set", q.id);
        assert_eq!(as_indices("excluded"), q.excluded_indices(), "{} excluded set", q.id);
    }
    let scripted_verdicts: usize = run
        .questions
        .iter()
        .map(|q| q.correct_indices().len() + q.incorrect_indices().len())
        .sum();
    assert_eq!(judgments.len(), scripted_verdicts);

    // Pairs: file, stats, and manifest all agree with the independent count.
    let expected_pairs = expected_cartesian_pairs(&run.questions);
    let pairs = read_lines(&run.out_file(PAIRS_FILE));
    assert_eq!(pairs.len(), expected_pairs);
    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.out_file(PAIR_STATS_FILE)).unwrap()).unwrap();
    assert_eq!(stats["pairs"].as_u64().unwrap() as usize, expected_pairs);
    let make_pairs_manifest = &run.manifests["make-pairs"];
    assert_eq!(make_pairs_manifest.counts["pairs"] as usize, expected_pairs);

    // Objective check and evaluation both completed.
    let dpo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.out_file(DPO_CHECK_FILE)).unwrap()).unwrap();
    assert_eq!(dpo["passed"], true);
    let predictions = read_lines(&run.out_file(PREDICTIONS_FILE));
    assert_eq!(predictions.len(), run.questions.len());
    let report = fs::read_to_string(run.out_file(EVAL_REPORT_TXT)).unwrap();
    assert!(report.starts_with("Model  Train  Test  Total\n"), "report: {report}");

    // Every manifest records the same resolved-config digest and lists
    // digests for each of its outputs.
    for manifest in run.manifests.values() {
        assert_eq!(manifest.config_sha256, run.config.digest());
        assert!(!manifest.outputs.is_empty());
        for digest in manifest.outputs.values() {
            assert_eq!(digest.len(), 64, "sha256 hex digest");
        }
    }

    // The lock is released after each stage.
    assert!(!run.out_file(LOCK_FILE).exists());
}

#[tokio::test]
async fn warm_cache_rerun_makes_no_network_calls_and_reproduces_digests() {
    let run = run_full_pipeline().await;
    let digests_before = run.output_digests();
    let requests_before = run.servers.total_requests();

    for stage in [
        Stage::BuildSft,
        Stage::Generate,
        Stage::Judge,
        Stage::MakePairs,
        Stage::DpoCheck,
        Stage::Evaluate,
    ] {
        let manifest = run.run(stage).await;
        if let Some(first) = run.manifests.get(stage.name()) {
            assert_eq!(manifest.outputs, first.outputs, "{} output digests drifted", stage.name());
        }
        let calls = manifest.counts.get("network_calls").copied().unwrap_or(0);
        assert_eq!(calls, 0, "{} hit the network", stage.name());
    }

    assert_eq!(run.servers.total_requests(), requests_before, "mock servers saw new requests");
    assert_eq!(run.output_digests(), digests_before, "output files drifted");
}

#[tokio::test]
async fn stage_dependencies_name_the_stage_to_run_first() {
    let run = run_full_pipeline().await;

    // A fresh output directory with no samples at all: make-pairs wants
    // generate's output.
    let mut config = run.config.clone();
    config.output_dir = run.dir.path().join("out-fresh");
    let err = run_stage(&config, Stage::MakePairs, false).await.unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(
        matches!(&err, PipelineError::MissingStageInput { stage, missing }
            if *stage == "make-pairs" && missing.contains("generate")),
        "unexpected error: {err}"
    );

    // After generate (warm cache, so no network), make-pairs is still
    // blocked — this time on the judge stage's output.
    run_stage(&config, Stage::Generate, false).await.expect("generate replays from cache");
    let err = run_stage(&config, Stage::MakePairs, false).await.unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(
        matches!(&err, PipelineError::MissingStageInput { stage, missing }
            if *stage == "make-pairs" && missing.contains("judge")),
        "unexpected error: {err}"
    );

    // Judge itself is blocked the same way in an empty directory.
    let mut config = run.config.clone();
    config.output_dir = run.dir.path().join("out-fresh2");
    let err = run_stage(&config, Stage::Judge, false).await.unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("generate"), "unexpected error: {err}");
}

#[tokio::test]
async fn failure_rate_above_threshold_aborts_with_exit_code_4_but_keeps_outputs() {
    let run = run_full_pipeline().await;
    let mut config = run.config.clone();
    config.output_dir = run.dir.path().join("out-strict-gate");
    // The script rejects 2 of 20 questions (10%); a 5% threshold trips.
    config.max_failure_rate = 0.05;
    let before = run.servers.total_requests();
    let err = run_stage(&config, Stage::BuildSft, false).await.unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert_eq!(run.servers.total_requests(), before, "warm cache, no new calls");
    // Outputs are kept for the post-mortem; the manifest is withheld.
    let trainer = read_lines(&config.output_dir.join(SFT_TRAINER_FILE));
    assert_eq!(trainer.len(), 18);
    assert!(!config.output_dir.join("manifests").join("build-sft.json").exists());
    assert!(!config.output_dir.join(LOCK_FILE).exists(), "lock released on failure");
}

#[tokio::test]
async fn a_held_lock_turns_away_a_second_run() {
    let run = run_full_pipeline().await;
    let lock_path = run.out_file(LOCK_FILE);
    fs::write(&lock_path, "pid=999999 stage=generate\n").unwrap();
    let err = run_stage(&run.config, Stage::DpoCheck, false).await.unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(matches!(err, PipelineError::Locked { .. }));
    fs::remove_file(&lock_path).unwrap();
}

// ---------------------------------------------------------------------------
// CLI process-level contract: exit codes and stdout/stderr shapes.
// ---------------------------------------------------------------------------

fn selfcrit_cmd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_selfcrit"))
}

/// The error report is the last stderr line; log lines may precede it.
fn last_stderr_json(output: &std::process::Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&output.stderr);
    let line = stderr.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or_default();
    serde_json::from_str(line)
        .unwrap_or_else(|e| panic!("stderr tail is not JSON ({e}): {stderr}"))
}

/// A syntactically valid config whose endpoints point at a dead port; good
/// enough for subcommands that never reach the network.
fn offline_config(dir: &std::path::Path) -> std::path::PathBuf {
    let questions = dir.join("questions.jsonl");
    fs::write(
        &questions,
        "{\"id\":\"q1\",\"text\":\"stub question\",\"answer\":\"stub answer text\",\"split\":\"train\"}\n",
    )
    .unwrap();
    let path = dir.join("pipeline.toml");
    fs::write(
        &path,
        r#"[dataset]
questions = "questions.jsonl"

[endpoints.teacher]
base_url = "http://127.0.0.1:9/v1"
model = "t"

[endpoints.student]
base_url = "http://127.0.0.1:9/v1"
model = "s"

[endpoints.judge]
alias = "teacher"
"#,
    )
    .unwrap();
    path
}

#[test]
fn cli_dpo_check_needs_no_config_and_exits_zero() {
    let output = selfcrit_cmd().arg("dpo-check").output().expect("binary runs");
    assert_eq!(output.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("stdout is the report JSON");
    assert_eq!(report["passed"], true);
    assert!(report["checks"].as_array().unwrap().len() >= 5);
}

#[test]
fn cli_unreadable_config_exits_two_with_structured_error() {
    let output = selfcrit_cmd()
        .args(["build-sft", "--config", "/nonexistent/pipeline.toml"])
        .output()
        .expect("binary runs");
    assert_eq!(output.status.code(), Some(2));
    let err = last_stderr_json(&output);
    assert_eq!(err["kind"], "config");
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn cli_invalid_config_value_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = offline_config(dir.path());
    let body = fs::read_to_string(&path).unwrap();
    fs::write(&path, format!("[sampling]\nn = 1\n{body}")).unwrap();
    let output = selfcrit_cmd()
        .args(["generate", "--config"])
        .arg(&path)
        .output()
        .expect("binary runs");
    assert_eq!(output.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn cli_print_config_dumps_resolved_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = offline_config(dir.path());
    let output = selfcrit_cmd()
        .args(["build-sft", "--print-config", "--config"])
        .arg(&path)
        .output()
        .expect("binary runs");
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8(output.stdout).unwrap();
    for needle in ["random_seed = 0", "n = 4", "beta = 0.1", "max_failure_rate = 0.2"] {
        assert!(stdout.contains(needle), "resolved dump missing {needle:?}:\n{stdout}");
    }
}

#[test]
fn cli_missing_stage_input_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = offline_config(dir.path());
    let output = selfcrit_cmd()
        .args(["make-pairs", "--config"])
        .arg(&path)
        .output()
        .expect("binary runs");
    assert_eq!(output.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let err = last_stderr_json(&output);
    assert_eq!(err["kind"], "missing-stage-input");
}

#[tokio::test]
async fn cli_make_pairs_replays_pipeline_outputs_and_exits_zero() {
    let run = run_full_pipeline().await;
    let output = selfcrit_cmd()
        .args(["make-pairs", "--config"])
        .arg(&run.config_path)
        .output()
        .expect("binary runs");
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let manifest: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("stdout is the manifest JSON");
    assert_eq!(manifest["stage"], "make-pairs");
    assert_eq!(
        manifest["counts"]["pairs"].as_u64().unwrap() as usize,
        expected_cartesian_pairs(&run.questions)
    );
}
