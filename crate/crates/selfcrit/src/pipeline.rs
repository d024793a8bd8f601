//! Stage runner: wires configuration, gateway, and the stage modules into
//! six subcommand-shaped stages with deterministic output names, run
//! manifests, and an output-directory lock.
//!
//! Stage outputs land under the configured output directory with fixed
//! filenames, so a stage's consumers never guess paths. Re-running a stage
//! over a warm cache reproduces byte-identical outputs; only the manifest's
//! timestamps move.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::Utc;
use futures::stream::{self, StreamExt};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig, RunManifest};
use crate::dpo;
use crate::eval::{self, Prediction};
use crate::gateway::{CompletionRequest, Gateway, Role};
use crate::pairs::{
    self, build_cor_err_record, export_cor_err, export_preference_pairs, judge_samples,
    make_preference_pairs, mark_judge_rejects, sample_student_answers, JudgeReject, Judgment,
    PreferencePair, StudentSample,
};
use crate::sft::{self, load_questions, Question, Split};
use crate::templates::{render_prompt, student_bindings, TemplateSet};
use crate::util::{atomic_write, file_sha256, read_jsonl, write_jsonl};

pub const SFT_TRAINER_FILE: &str = "sft_trainer.jsonl";
pub const SFT_SIDECAR_FILE: &str = "sft_sidecar.jsonl";
pub const SFT_REJECTS_FILE: &str = "sft_rejects.jsonl";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const JUDGMENTS_FILE: &str = "judgments.jsonl";
pub const JUDGE_REJECTS_FILE: &str = "judge_rejects.jsonl";
pub const COR_ERR_FILE: &str = "cor_err.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const PAIR_STATS_FILE: &str = "pair_stats.json";
pub const DPO_CHECK_FILE: &str = "dpo_check.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const EVAL_REPORT_JSON: &str = "eval_report.json";
pub const EVAL_REPORT_TXT: &str = "eval_report.txt";
pub const LOCK_FILE: &str = ".selfcrit.lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    BuildSft,
    Generate,
    Judge,
    MakePairs,
    DpoCheck,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::BuildSft => "build-sft",
            Stage::Generate => "generate",
            Stage::Judge => "judge",
            Stage::MakePairs => "make-pairs",
            Stage::DpoCheck => "dpo-check",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Exit 2: the configuration itself is unusable.
    #[error("configuration error: {0}")]
    Config(String),
    /// Exit 3: a required input artifact is absent.
    #[error("stage {stage} is missing its input: {missing}")]
    MissingStageInput { stage: &'static str, missing: String },
    /// Exit 4: too many per-item failures.
    #[error(
        "stage {stage} failed on {failed} of {total} items ({rate:.1}%, allowed {threshold:.1}%)"
    )]
    FailureRateExceeded {
        stage: &'static str,
        failed: usize,
        total: usize,
        rate: f64,
        threshold: f64,
    },
    /// Exit 2: another run holds the output directory.
    #[error("output directory {dir} is locked by another run ({holder}); remove {LOCK_FILE} if that run is dead")]
    Locked { dir: String, holder: String },
    /// Exit 1: anything else that stopped the stage.
    #[error("{0}")]
    Stage(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Locked { .. } => 2,
            PipelineError::MissingStageInput { .. } => 3,
            PipelineError::FailureRateExceeded { .. } => 4,
            PipelineError::Stage(_) => 1,
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e.to_string())
    }
}
impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Stage(format!("io: {e}"))
    }
}
impl From<crate::templates::TemplateError> for PipelineError {
    fn from(e: crate::templates::TemplateError) -> Self {
        PipelineError::Stage(format!("templates: {e}"))
    }
}
impl From<sft::SftError> for PipelineError {
    fn from(e: sft::SftError) -> Self {
        PipelineError::Stage(e.to_string())
    }
}
impl From<pairs::PairError> for PipelineError {
    fn from(e: pairs::PairError) -> Self {
        PipelineError::Stage(e.to_string())
    }
}
impl From<eval::EvalError> for PipelineError {
    fn from(e: eval::EvalError) -> Self {
        PipelineError::Stage(e.to_string())
    }
}

/// Stable per-question seed base: derived from the question id (not its file
/// position), offset by the run's random_seed. Sample i of a question is
/// requested with seed `question_seed(seed, id) + i`.
pub fn question_seed(random_seed: u64, question_id: &str) -> u64 {
    let digest = Sha256::digest(question_id.as_bytes());
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(first).wrapping_add(random_seed)
}

/// Guards an output directory for the duration of one stage. The lock file
/// is created with O_EXCL semantics, so two concurrent runs cannot both
/// hold it; it is removed on drop.
struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    fn acquire(dir: &Path, stage: Stage) -> Result<Self, PipelineError> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "pid={} stage={} at={}", std::process::id(), stage.name(), Utc::now().to_rfc3339());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&path).unwrap_or_default().trim().to_string();
                Err(PipelineError::Locked { dir: dir.display().to_string(), holder })
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn check_failure_rate(
    stage: &'static str,
    failed: usize,
    total: usize,
    threshold: f64,
) -> Result<(), PipelineError> {
    if total == 0 {
        return Ok(());
    }
    let rate = failed as f64 / total as f64;
    if rate > threshold {
        return Err(PipelineError::FailureRateExceeded {
            stage,
            failed,
            total,
            rate: rate * 100.0,
            threshold: threshold * 100.0,
        });
    }
    Ok(())
}

fn require_input(stage: Stage, path: &Path) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingStageInput {
            stage: stage.name(),
            missing: path.display().to_string(),
        })
    }
}

/// Like `require_input`, but for artifacts produced by an earlier stage:
/// the error names the stage to run first.
fn require_produced(stage: Stage, path: &Path, producer: Stage) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingStageInput {
            stage: stage.name(),
            missing: format!("{} (run `{}` first)", path.display(), producer.name()),
        })
    }
}

struct StageContext {
    manifest: RunManifest,
    out_dir: PathBuf,
}

impl StageContext {
    fn new(config: &PipelineConfig, stage: Stage) -> Self {
        let now = Utc::now();
        Self {
            manifest: RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                stage: stage.name().to_string(),
                config_sha256: config.digest(),
                started_at: now,
                finished_at: now,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                counts: BTreeMap::new(),
            },
            out_dir: config.output_dir.clone(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<(), PipelineError> {
        self.manifest.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path, digest: String) {
        self.manifest.outputs.insert(path.display().to_string(), digest);
    }

    fn output_file(&mut self, path: &Path) -> Result<(), PipelineError> {
        let digest = file_sha256(path)?;
        self.output(path, digest);
        Ok(())
    }

    fn count(&mut self, name: &str, value: usize) {
        self.manifest.counts.insert(name.to_string(), value as u64);
    }

    fn finish(mut self) -> Result<RunManifest, PipelineError> {
        self.manifest.finished_at = Utc::now();
        let path =
            self.out_dir.join("manifests").join(format!("{}.json", self.manifest.stage));
        self.manifest.write(&path)?;
        Ok(self.manifest)
    }
}

fn load_stage_questions(
    stage: Stage,
    path: &Path,
    format: crate::sft::QuestionFormat,
    split: Option<Split>,
    ctx: &mut StageContext,
) -> Result<Vec<Question>, PipelineError> {
    require_input(stage, path)?;
    ctx.input(path)?;
    let load = load_questions(path, format)?;
    if !load.rejects.is_empty() {
        tracing::warn!(
            file = %path.display(),
            rejected_rows = load.rejects.len(),
            "skipping malformed question rows"
        );
    }
    ctx.count("question_row_rejects", load.rejects.len());
    Ok(load
        .questions
        .into_iter()
        .filter(|q| split.is_none_or(|s| q.split == s))
        .collect())
}

fn load_templates(config: &PipelineConfig) -> Result<TemplateSet, PipelineError> {
    match &config.templates.manifest {
        Some(path) => {
            if !path.exists() {
                return Err(PipelineError::Config(format!(
                    "template manifest {} does not exist",
                    path.display()
                )));
            }
            Ok(TemplateSet::from_manifest(path)?)
        }
        None => Ok(TemplateSet::bundled()),
    }
}

/// Runs one stage end to end: lock, inputs, work, outputs, manifest.
pub async fn run_stage(
    config: &PipelineConfig,
    stage: Stage,
    strict_judge: bool,
) -> Result<RunManifest, PipelineError> {
    fs::create_dir_all(&config.output_dir)?;
    let _lock = OutDirLock::acquire(&config.output_dir, stage)?;
    let mut ctx = StageContext::new(config, stage);
    tracing::info!(stage = stage.name(), out = %config.output_dir.display(), "stage started");
    match stage {
        Stage::BuildSft => run_build_sft(config, &mut ctx).await?,
        Stage::Generate => run_generate(config, &mut ctx).await?,
        Stage::Judge => run_judge(config, strict_judge, &mut ctx).await?,
        Stage::MakePairs => run_make_pairs(config, &mut ctx)?,
        Stage::DpoCheck => run_dpo_check(config, &mut ctx)?,
        Stage::Evaluate => run_evaluate(config, &mut ctx).await?,
    }
    ctx.finish()
}

async fn run_build_sft(
    config: &PipelineConfig,
    ctx: &mut StageContext,
) -> Result<(), PipelineError> {
    let questions = load_stage_questions(
        Stage::BuildSft,
        &config.dataset.questions,
        config.dataset.format,
        config.sft.split,
        ctx,
    )?;
    let templates = load_templates(config)?;
    let teacher = config.endpoint(Role::Teacher)?;
    let gateway = Gateway::new(&config.cache_dir).map_err(|e| PipelineError::Stage(e.to_string()))?;
    let options = config.sft_options();

    let (records, rejects) =
        sft::build_sft_dataset(&questions, &teacher, &templates.teacher, &gateway, &options)
            .await?;

    let rejects_path = ctx.out_dir.join(SFT_REJECTS_FILE);
    let rejects_digest = write_jsonl(&rejects_path, &rejects)?;
    ctx.output(&rejects_path, rejects_digest);

    let trainer_path = ctx.out_dir.join(SFT_TRAINER_FILE);
    let sidecar_path = ctx.out_dir.join(SFT_SIDECAR_FILE);
    let summary =
        sft::export_sft_records(&records, &trainer_path, &sidecar_path, &templates.student)?;
    ctx.output(&trainer_path, summary.trainer_sha256.clone());
    ctx.output(&sidecar_path, summary.sidecar_sha256.clone());

    ctx.count("questions", questions.len());
    ctx.count("records", records.len());
    ctx.count("rejects", rejects.len());
    ctx.count("network_calls", gateway.network_calls() as usize);
    check_failure_rate("build-sft", rejects.len(), questions.len(), config.max_failure_rate)
}

async fn run_generate(
    config: &PipelineConfig,
    ctx: &mut StageContext,
) -> Result<(), PipelineError> {
    let questions = load_stage_questions(
        Stage::Generate,
        &config.dataset.questions,
        config.dataset.format,
        config.sampling.split,
        ctx,
    )?;
    let templates = load_templates(config)?;
    let student = config.endpoint(Role::Student)?;
    let gateway = Gateway::new(&config.cache_dir).map_err(|e| PipelineError::Stage(e.to_string()))?;

    let mut samples: Vec<StudentSample> = Vec::with_capacity(questions.len() * 4);
    for question in &questions {
        let options = config.sample_options(question_seed(config.random_seed, &question.id));
        let drawn = sample_student_answers(
            question,
            config.sampling.n,
            &student,
            &templates.student,
            &gateway,
            &options,
        )
        .await?;
        samples.extend(drawn);
    }
    let flagged = samples.iter().filter(|s| !s.usable()).count();

    let samples_path = ctx.out_dir.join(SAMPLES_FILE);
    let digest = write_jsonl(&samples_path, &samples)?;
    ctx.output(&samples_path, digest);

    ctx.count("questions", questions.len());
    ctx.count("samples", samples.len());
    ctx.count("flagged_samples", flagged);
    ctx.count("network_calls", gateway.network_calls() as usize);
    check_failure_rate("generate", flagged, samples.len(), config.max_failure_rate)
}

fn load_samples(stage: Stage, path: &Path) -> Result<Vec<StudentSample>, PipelineError> {
    require_produced(stage, path, Stage::Generate)?;
    let (samples, rejects) = read_jsonl::<StudentSample>(path)?;
    if let Some(first) = rejects.first() {
        return Err(PipelineError::Stage(format!(
            "{} line {} is corrupt: {}",
            path.display(),
            first.line,
            first.reason
        )));
    }
    Ok(samples)
}

async fn run_judge(
    config: &PipelineConfig,
    strict_judge: bool,
    ctx: &mut StageContext,
) -> Result<(), PipelineError> {
    let samples_path = ctx.out_dir.join(SAMPLES_FILE);
    let samples = load_samples(Stage::Judge, &samples_path)?;
    ctx.input(&samples_path)?;
    let questions = load_stage_questions(
        Stage::Judge,
        &config.dataset.questions,
        config.dataset.format,
        config.sampling.split,
        ctx,
    )?;
    let templates = load_templates(config)?;
    let judge = config.endpoint(Role::Judge)?;
    let gateway = Gateway::new(&config.cache_dir).map_err(|e| PipelineError::Stage(e.to_string()))?;
    let options = config.judge_options(strict_judge);

    let (judgments, judge_rejects) =
        judge_samples(&questions, &samples, &judge, &templates.judge, &gateway, &options).await?;

    let judgments_path = ctx.out_dir.join(JUDGMENTS_FILE);
    let digest = write_jsonl(&judgments_path, &judgments)?;
    ctx.output(&judgments_path, digest);
    let rejects_path = ctx.out_dir.join(JUDGE_REJECTS_FILE);
    let digest = write_jsonl(&rejects_path, &judge_rejects)?;
    ctx.output(&rejects_path, digest);

    let usable = samples.iter().filter(|s| s.usable()).count();
    ctx.count("samples", samples.len());
    ctx.count("judgeable_samples", usable);
    ctx.count("judgments", judgments.len());
    ctx.count("judge_rejects", judge_rejects.len());
    ctx.count("network_calls", gateway.network_calls() as usize);
    check_failure_rate("judge", judge_rejects.len(), usable, config.max_failure_rate)
}

fn run_make_pairs(config: &PipelineConfig, ctx: &mut StageContext) -> Result<(), PipelineError> {
    let samples_path = ctx.out_dir.join(SAMPLES_FILE);
    let mut samples = load_samples(Stage::MakePairs, &samples_path)?;
    ctx.input(&samples_path)?;

    let judgments_path = ctx.out_dir.join(JUDGMENTS_FILE);
    require_produced(Stage::MakePairs, &judgments_path, Stage::Judge)?;
    ctx.input(&judgments_path)?;
    let (judgments, judgment_rejects) = read_jsonl::<Judgment>(&judgments_path)?;
    if let Some(first) = judgment_rejects.first() {
        return Err(PipelineError::Stage(format!(
            "{} line {} is corrupt: {}",
            judgments_path.display(),
            first.line,
            first.reason
        )));
    }
    let judge_rejects_path = ctx.out_dir.join(JUDGE_REJECTS_FILE);
    let judge_rejects: Vec<JudgeReject> = if judge_rejects_path.exists() {
        ctx.input(&judge_rejects_path)?;
        read_jsonl::<JudgeReject>(&judge_rejects_path)?.0
    } else {
        Vec::new()
    };
    mark_judge_rejects(&mut samples, &judge_rejects);

    let questions = load_stage_questions(
        Stage::MakePairs,
        &config.dataset.questions,
        config.dataset.format,
        config.sampling.split,
        ctx,
    )?;
    let templates = load_templates(config)?;
    let strategy = config.sampling.strategy()?;

    let mut records = Vec::new();
    let mut all_pairs: Vec<PreferencePair> = Vec::new();
    for question in &questions {
        if !samples.iter().any(|s| s.question_id == question.id) {
            continue;
        }
        let record = build_cor_err_record(question, &samples, &judgments)?;
        let prompt = render_prompt(&templates.student, &student_bindings(&question.text))?;
        all_pairs.extend(make_preference_pairs(&record, &prompt, strategy));
        records.push(record);
    }

    let cor_err_path = ctx.out_dir.join(COR_ERR_FILE);
    let digest = export_cor_err(&records, &cor_err_path)?;
    ctx.output(&cor_err_path, digest);

    let pairs_path = ctx.out_dir.join(PAIRS_FILE);
    let summary = export_preference_pairs(&all_pairs, &pairs_path)?;
    ctx.output(&pairs_path, summary.sha256.clone());

    let stats =
        pairs::pair_stats(&records, &all_pairs, judgments.len(), judge_rejects.len());
    let stats_path = ctx.out_dir.join(PAIR_STATS_FILE);
    let mut body = serde_json::to_string_pretty(&stats).expect("stats serialize");
    body.push('\n');
    atomic_write(&stats_path, body.as_bytes())?;
    ctx.output_file(&stats_path)?;

    ctx.count("questions", records.len());
    ctx.count("pairs", all_pairs.len());
    ctx.count("correct_samples", records.iter().map(|r| r.correct.len()).sum());
    ctx.count("incorrect_samples", records.iter().map(|r| r.incorrect.len()).sum());
    ctx.count("excluded_samples", records.iter().map(|r| r.excluded.len()).sum());
    Ok(())
}

fn run_dpo_check(config: &PipelineConfig, ctx: &mut StageContext) -> Result<(), PipelineError> {
    let report = dpo::verify::run_battery(config.random_seed);
    let path = ctx.out_dir.join(DPO_CHECK_FILE);
    let mut body = serde_json::to_string_pretty(&report).expect("report serialize");
    body.push('\n');
    atomic_write(&path, body.as_bytes())?;
    ctx.output_file(&path)?;
    ctx.count("checks", report.checks.len());
    ctx.count("checks_failed", report.checks.iter().filter(|c| !c.passed).count());
    if !report.passed {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        return Err(PipelineError::Stage(format!(
            "dpo verification battery failed: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

async fn run_evaluate(
    config: &PipelineConfig,
    ctx: &mut StageContext,
) -> Result<(), PipelineError> {
    let questions_path =
        config.eval.questions.as_ref().unwrap_or(&config.dataset.questions).clone();
    let questions = load_stage_questions(
        Stage::Evaluate,
        &questions_path,
        config.eval.format,
        config.eval.split,
        ctx,
    )?;

    let student = config.endpoint(Role::Student)?;
    let model_name =
        config.eval.model_name.clone().unwrap_or_else(|| student.model_id.clone());

    let (predictions, live_failures) = match &config.eval.predictions {
        Some(path) => {
            require_input(Stage::Evaluate, path)?;
            ctx.input(path)?;
            (eval::load_predictions(path)?, 0)
        }
        None => {
            let templates = load_templates(config)?;
            let gateway =
                Gateway::new(&config.cache_dir).map_err(|e| PipelineError::Stage(e.to_string()))?;
            let outcome =
                predict_live(config, &questions, &student, &templates, &gateway).await?;
            ctx.count("network_calls", gateway.network_calls() as usize);
            let path = ctx.out_dir.join(PREDICTIONS_FILE);
            let digest = write_jsonl(&path, &outcome.0)?;
            ctx.output(&path, digest);
            outcome
        }
    };

    let report = eval::score(&predictions, &questions, &model_name)?;
    let json_path = ctx.out_dir.join(EVAL_REPORT_JSON);
    let mut body = serde_json::to_string_pretty(&report).expect("report serialize");
    body.push('\n');
    atomic_write(&json_path, body.as_bytes())?;
    ctx.output_file(&json_path)?;

    let txt_path = ctx.out_dir.join(EVAL_REPORT_TXT);
    atomic_write(&txt_path, eval::render_report(std::slice::from_ref(&report)).as_bytes())?;
    ctx.output_file(&txt_path)?;

    ctx.count("questions", questions.len());
    ctx.count("predictions", predictions.len());
    ctx.count("correct", report.overall.correct);
    check_failure_rate("evaluate", live_failures, predictions.len(), config.max_failure_rate)
}

async fn predict_live(
    config: &PipelineConfig,
    questions: &[Question],
    student: &crate::gateway::EndpointConfig,
    templates: &TemplateSet,
    gateway: &Gateway,
) -> Result<(Vec<Prediction>, usize), PipelineError> {
    let outcomes: Vec<Result<Prediction, PipelineError>> = stream::iter(questions.iter())
        .map(|question| async move {
            let prompt = render_prompt(&templates.student, &student_bindings(&question.text))?;
            let request = CompletionRequest {
                prompt,
                temperature: config.eval.temperature,
                max_tokens: config.eval.max_tokens,
                sample_index: 0,
                seed_hint: Some(question_seed(config.random_seed, &question.id)),
            };
            let response = match gateway.complete(student, &request).await {
                Ok(completion) => crate::templates::parse_tagged_response(&completion.text).ok(),
                Err(e) => {
                    tracing::warn!(question = %question.id, error = %e, "prediction failed");
                    None
                }
            };
            let extracted_choice = match (&response, &question.options) {
                (Some(r), Some(options)) => eval::extract_choice(r, options),
                _ => None,
            };
            Ok(Prediction {
                question_id: question.id.clone(),
                response,
                extracted_choice,
            })
        })
        .buffered(config.parallelism.max(1))
        .collect()
        .await;
    let mut predictions = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        predictions.push(outcome?);
    }
    let failures = predictions.iter().filter(|p| p.response.is_none()).count();
    Ok((predictions, failures))
}
