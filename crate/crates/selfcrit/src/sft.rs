//! Stage 1: distill long chain-of-thought SFT records from a teacher model.
//!
//! For every question, the teacher prompt embeds the reference answer and
//! asks for a `<think>…</think><answer>…</answer>` response. Responses that
//! fail to parse are re-asked with a format reminder a bounded number of
//! times; chains whose final answer disagrees with the reference answer (or
//! that echo the answer-embedding scaffold) are rejected rather than
//! exported. Accepted records export as `{prompt, completion}` JSONL against
//! the student prompt — which carries no reference answer — plus a sidecar
//! with the per-record fields split out.

use std::collections::BTreeSet;
use std::path::Path;

use chrono::{DateTime, Utc};
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval;
use crate::gateway::{CompletionRequest, EndpointConfig, Gateway, GatewayError};
use crate::templates::{
    parse_tagged_response, render_prompt, student_bindings, teacher_bindings, PromptTemplate,
    TaggedResponse, TemplateError, TemplateKind, ANSWER_EMBED_PREFIX,
};
use crate::util::{normalize_ws as normalize, read_jsonl, write_jsonl};

#[derive(Debug, Error)]
pub enum SftError {
    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("template error: {0}")]
    Template(#[from] TemplateError),
    #[error("record for question {0} echoes the answer-embedding scaffold")]
    TemplateLeak(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One benchmark question. `options` is present for multiple-choice items,
/// in which case the reference answer must be one of the option labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<(String, String)>>,
    #[serde(rename = "answer")]
    pub reference_answer: String,
    pub split: Split,
}

impl Question {
    fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".to_string());
        }
        if self.text.trim().is_empty() {
            return Err(format!("question {} has empty text", self.id));
        }
        if let Some(options) = &self.options {
            if options.is_empty() {
                return Err(format!("question {} has an empty options list", self.id));
            }
            let mut labels = BTreeSet::new();
            for (label, _) in options {
                if !labels.insert(label) {
                    return Err(format!("question {} repeats option label {label}", self.id));
                }
            }
            if !options.iter().any(|(label, _)| label == &self.reference_answer) {
                return Err(format!(
                    "question {} answer {:?} is not among option labels",
                    self.id, self.reference_answer
                ));
            }
        } else if self.reference_answer.trim().is_empty() {
            return Err(format!("question {} has empty answer", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionFormat {
    #[default]
    Jsonl,
    Csv,
}

/// A row that failed to load, kept for the rejects report.
#[derive(Debug, Clone, Serialize)]
pub struct RowReject {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug)]
pub struct QuestionLoad {
    pub questions: Vec<Question>,
    pub rejects: Vec<RowReject>,
}

/// Loads questions from JSONL or CSV. Malformed rows, duplicate ids, and
/// answers that name no option label land in the rejects list instead of
/// being silently dropped.
pub fn load_questions(path: &Path, format: QuestionFormat) -> Result<QuestionLoad, SftError> {
    let mut load = match format {
        QuestionFormat::Jsonl => {
            let (questions, json_rejects) =
                read_jsonl::<Question>(path).map_err(|source| SftError::FileUnreadable {
                    path: path.display().to_string(),
                    source,
                })?;
            QuestionLoad {
                questions,
                rejects: json_rejects
                    .into_iter()
                    .map(|r| RowReject { line: r.line, reason: r.reason })
                    .collect(),
            }
        }
        QuestionFormat::Csv => load_questions_csv(path)?,
    };
    let mut seen = BTreeSet::new();
    let mut kept = Vec::with_capacity(load.questions.len());
    for (idx, question) in load.questions.into_iter().enumerate() {
        if let Err(reason) = question.check() {
            load.rejects.push(RowReject { line: idx + 1, reason });
            continue;
        }
        if !seen.insert(question.id.clone()) {
            load.rejects.push(RowReject {
                line: idx + 1,
                reason: format!("duplicate question id {}", question.id),
            });
            continue;
        }
        kept.push(question);
    }
    load.questions = kept;
    Ok(load)
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    id: String,
    text: String,
    answer: String,
    split: String,
    #[serde(default)]
    options: String,
}

fn load_questions_csv(path: &Path) -> Result<QuestionLoad, SftError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => SftError::FileUnreadable {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => SftError::SchemaError(e.to_string()),
    })?;
    let header = reader.headers().map_err(|e| SftError::SchemaError(e.to_string()))?.clone();
    for required in ["id", "text", "answer", "split"] {
        if !header.iter().any(|h| h == required) {
            return Err(SftError::SchemaError(format!("CSV is missing column `{required}`")));
        }
    }
    let mut questions = Vec::new();
    let mut rejects = Vec::new();
    for (idx, row) in reader.deserialize::<CsvRow>().enumerate() {
        let line = idx + 2; // header occupies line 1
        let row = match row {
            Ok(row) => row,
            Err(e) => {
                rejects.push(RowReject { line, reason: e.to_string() });
                continue;
            }
        };
        let split = match row.split.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                rejects.push(RowReject { line, reason: format!("unknown split {other:?}") });
                continue;
            }
        };
        // Options travel as a JSON array of [label, text] pairs in one cell.
        let options = if row.options.trim().is_empty() {
            None
        } else {
            match serde_json::from_str::<Vec<(String, String)>>(&row.options) {
                Ok(options) => Some(options),
                Err(e) => {
                    rejects.push(RowReject { line, reason: format!("bad options cell: {e}") });
                    continue;
                }
            }
        };
        questions.push(Question {
            id: row.id,
            text: row.text,
            options,
            reference_answer: row.answer,
            split,
        });
    }
    Ok(QuestionLoad { questions, rejects })
}

/// One accepted distillation record. `created_at` is bookkeeping only and is
/// excluded from every exported file and digest.
#[derive(Debug, Clone, Serialize)]
pub struct SftRecord {
    pub question_id: String,
    pub question_text: String,
    pub reference_answer: String,
    pub chain: TaggedResponse,
    pub teacher_model: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RejectReason {
    MalformedTags { detail: String, attempts: u32 },
    AnswerMismatch { expected: String, got: String },
    TemplateLeak,
    Gateway { detail: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct SftReject {
    pub question_id: String,
    pub reason: RejectReason,
}

/// How chain answers are matched against free-text reference answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerMatch {
    /// The normalized chain answer must contain the normalized reference.
    NormalizedSubstring,
    /// The normalized chain answer must equal the normalized reference.
    NormalizedExact,
}

#[derive(Debug, Clone)]
pub struct SftBuildOptions {
    pub temperature: f64,
    pub max_tokens: u32,
    /// Re-asks after a parse failure, each with one more format reminder.
    pub parse_retries: u32,
    pub parallelism: usize,
    pub answer_match: AnswerMatch,
    pub seed_base: Option<u64>,
}

impl Default for SftBuildOptions {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 4096,
            parse_retries: 2,
            parallelism: 4,
            answer_match: AnswerMatch::NormalizedSubstring,
            seed_base: None,
        }
    }
}

const FORMAT_REMINDER: &str = "Reminder: respond with exactly one <think>...</think> block \
followed by exactly one <answer>...</answer> block and nothing else.";

/// True when the chain's answer agrees with the reference: for
/// multiple-choice questions the extracted label must equal the reference
/// label; for free text the configured normalized match applies.
pub fn answer_is_consistent(question: &Question, chain: &TaggedResponse, mode: AnswerMatch) -> bool {
    match &question.options {
        Some(options) => {
            eval::extract_choice(chain, options).as_deref() == Some(question.reference_answer.as_str())
        }
        None => {
            let answer = normalize(&chain.answer);
            let reference = normalize(&question.reference_answer);
            match mode {
                AnswerMatch::NormalizedSubstring => answer.contains(&reference),
                AnswerMatch::NormalizedExact => answer == reference,
            }
        }
    }
}

async fn distill_one(
    question: &Question,
    endpoint: &EndpointConfig,
    template: &PromptTemplate,
    gateway: &Gateway,
    options: &SftBuildOptions,
) -> Result<SftRecord, RejectReason> {
    let bindings = teacher_bindings(&question.text, &question.reference_answer);
    let base = render_prompt(template, &bindings).map_err(|e| RejectReason::Gateway {
        detail: format!("render: {e}"),
    })?;
    let mut last_parse_error = String::new();
    for attempt in 0..=options.parse_retries {
        // Each re-ask appends one more reminder line, so every attempt is a
        // distinct prompt and therefore a distinct cache entry.
        let mut prompt = base.clone();
        for _ in 0..attempt {
            prompt.text.push('\n');
            prompt.text.push_str(FORMAT_REMINDER);
        }
        let request = CompletionRequest {
            prompt,
            temperature: options.temperature,
            max_tokens: options.max_tokens,
            sample_index: 0,
            seed_hint: options.seed_base,
        };
        let completion = match gateway.complete(endpoint, &request).await {
            Ok(completion) => completion,
            Err(e @ GatewayError::AuthFailure(_)) | Err(e @ GatewayError::InvalidConfig(_)) => {
                return Err(RejectReason::Gateway { detail: e.to_string() })
            }
            Err(e) => return Err(RejectReason::Gateway { detail: e.to_string() }),
        };
        let chain = match parse_tagged_response(&completion.text) {
            Ok(chain) => chain,
            Err(e) => {
                last_parse_error = e.to_string();
                continue;
            }
        };
        if chain.raw.contains(ANSWER_EMBED_PREFIX) {
            return Err(RejectReason::TemplateLeak);
        }
        if !answer_is_consistent(question, &chain, options.answer_match) {
            return Err(RejectReason::AnswerMismatch {
                expected: question.reference_answer.clone(),
                got: chain.answer.trim().chars().take(120).collect(),
            });
        }
        return Ok(SftRecord {
            question_id: question.id.clone(),
            question_text: question.text.clone(),
            reference_answer: question.reference_answer.clone(),
            chain,
            teacher_model: endpoint.model_id.clone(),
            created_at: Utc::now(),
        });
    }
    Err(RejectReason::MalformedTags {
        detail: last_parse_error,
        attempts: options.parse_retries + 1,
    })
}

/// Distills one record per question with bounded parallelism. Failures are
/// per-question: every input question ends up either in the records or in
/// the rejects, never both, never neither.
pub async fn build_sft_dataset(
    questions: &[Question],
    endpoint: &EndpointConfig,
    template: &PromptTemplate,
    gateway: &Gateway,
    options: &SftBuildOptions,
) -> Result<(Vec<SftRecord>, Vec<SftReject>), SftError> {
    if template.kind != TemplateKind::TeacherCot {
        return Err(SftError::SchemaError(format!(
            "stage-1 distillation requires the teacher template, got {:?}",
            template.kind
        )));
    }
    let outcomes: Vec<(usize, Result<SftRecord, RejectReason>)> = stream::iter(
        questions.iter().enumerate(),
    )
    .map(|(idx, question)| async move {
        (idx, distill_one(question, endpoint, template, gateway, options).await)
    })
    .buffered(options.parallelism.max(1))
    .collect()
    .await;

    let mut records = Vec::new();
    let mut rejects = Vec::new();
    for (idx, outcome) in outcomes {
        match outcome {
            Ok(record) => records.push(record),
            Err(reason) => rejects.push(SftReject { question_id: questions[idx].id.clone(), reason }),
        }
    }
    tracing::info!(
        questions = questions.len(),
        records = records.len(),
        rejects = rejects.len(),
        "stage-1 distillation finished"
    );
    debug_assert_eq!(records.len() + rejects.len(), questions.len());
    Ok((records, rejects))
}

/// One line of the trainer file: the student prompt (no reference answer)
/// and the serialized chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainerRow {
    pub prompt: String,
    pub completion: String,
}

/// One line of the sidecar file: the record's fields split out for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarRow {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub think: String,
    pub answer_text: String,
    pub teacher_model: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExportSummary {
    pub records: usize,
    pub trainer_path: String,
    pub trainer_sha256: String,
    pub sidecar_path: String,
    pub sidecar_sha256: String,
}

/// Writes the trainer and sidecar JSONL files. The trainer prompt is the
/// rendered student template, so exported prompts never embed the reference
/// answer; a completion that somehow carries the embedding scaffold fails
/// the export rather than leaking into training data.
pub fn export_sft_records(
    records: &[SftRecord],
    trainer_path: &Path,
    sidecar_path: &Path,
    student_template: &PromptTemplate,
) -> Result<ExportSummary, SftError> {
    let mut trainer_rows = Vec::with_capacity(records.len());
    let mut sidecar_rows = Vec::with_capacity(records.len());
    for record in records {
        let completion = record.chain.serialized();
        if completion.contains(ANSWER_EMBED_PREFIX) {
            return Err(SftError::TemplateLeak(record.question_id.clone()));
        }
        let prompt = render_prompt(student_template, &student_bindings(&record.question_text))?;
        trainer_rows.push(TrainerRow { prompt: prompt.text, completion });
        sidecar_rows.push(SidecarRow {
            id: record.question_id.clone(),
            question: record.question_text.clone(),
            answer: record.reference_answer.clone(),
            think: record.chain.think.clone(),
            answer_text: record.chain.answer.clone(),
            teacher_model: record.teacher_model.clone(),
        });
    }
    let trainer_sha256 = write_jsonl(trainer_path, &trainer_rows)?;
    let sidecar_sha256 = write_jsonl(sidecar_path, &sidecar_rows)?;
    Ok(ExportSummary {
        records: records.len(),
        trainer_path: trainer_path.display().to_string(),
        trainer_sha256,
        sidecar_path: sidecar_path.display().to_string(),
        sidecar_sha256,
    })
}

/// Rebuilds records from a sidecar file. `created_at` is not persisted, so
/// re-imported records carry the import time; every exported byte is
/// reproducible from the sidecar regardless.
pub fn import_sft_sidecar(path: &Path) -> Result<Vec<SftRecord>, SftError> {
    let (rows, rejects) = read_jsonl::<SidecarRow>(path).map_err(|source| SftError::FileUnreadable {
        path: path.display().to_string(),
        source,
    })?;
    if let Some(first) = rejects.first() {
        return Err(SftError::SchemaError(format!(
            "sidecar line {}: {}",
            first.line, first.reason
        )));
    }
    Ok(rows
        .into_iter()
        .map(|row| {
            let raw = crate::templates::serialize_tagged_response(&row.think, &row.answer_text);
            SftRecord {
                question_id: row.id,
                question_text: row.question,
                reference_answer: row.answer,
                chain: TaggedResponse { raw, think: row.think, answer: row.answer_text },
                teacher_model: row.teacher_model,
                created_at: Utc::now(),
            }
        })
        .collect())
}
