//! Stage 2: sample multiple student answers per question, judge each with a
//! binary-verdict prompt, partition into correct/incorrect sets, and emit
//! DPO preference pairs.
//!
//! The student prompt carries no reference answer (enforced by an explicit
//! leak check), so the correct/incorrect split comes entirely from the judge
//! verdicts. Samples that never parse into a tagged response are excluded
//! from judging and pairing rather than auto-labelled incorrect: a format
//! failure says nothing about the medical content. Pairs reuse the exact
//! student prompt the samples were drawn from, so an external DPO trainer
//! conditions on the same context.

use std::collections::BTreeMap;
use std::path::Path;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CompletionRequest, EndpointConfig, Gateway, GatewayError};
use crate::sft::Question;
use crate::templates::{
    judge_bindings, parse_tagged_response, render_prompt, student_bindings, PromptTemplate,
    PromptText, TaggedResponse, TemplateError, TemplateKind,
};
use crate::util::{normalize_ws, read_jsonl, write_jsonl};

#[derive(Debug, Error)]
pub enum PairError {
    #[error("need at least 2 samples per question to form pairs, got {0}")]
    InvalidSampleCount(u32),
    #[error("expected a {expected:?} template, got {got:?}")]
    WrongTemplateKind { expected: TemplateKind, got: TemplateKind },
    #[error("rendered student prompt for question {question_id} contains the reference answer")]
    AnswerLeak { question_id: String },
    #[error(
        "judge output for question {question_id} sample {sample_index} is not a bare verdict: {raw:?}"
    )]
    JudgeOutputUnparseable { question_id: String, sample_index: u32, raw: String },
    #[error("sample {sample_index} of question {question_id} has no parsed response to judge")]
    UnparseableSample { question_id: String, sample_index: u32 },
    #[error("parseable sample {sample_index} of question {question_id} has no judgment")]
    MissingJudgment { question_id: String, sample_index: u32 },
    #[error("bad stage input: {0}")]
    SchemaError(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One sampled student answer. `response` is present iff `raw_text` parsed
/// into a tagged response; otherwise `issue` says why the sample is unusable
/// (tag-parse failure, per-sample gateway error, or a later judge failure).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentSample {
    pub question_id: String,
    pub sample_index: u32,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<TaggedResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issue: Option<String>,
}

impl StudentSample {
    /// Eligible for judging and pairing.
    pub fn usable(&self) -> bool {
        self.response.is_some() && self.issue.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
}

/// The strict verdict rule: after trimming whitespace the judge output must
/// be exactly "1" (correct) or "2" (incorrect). Anything else — "1.",
/// "option 2", prose — is no verdict at all.
pub fn parse_verdict(raw: &str) -> Option<Verdict> {
    match raw.trim() {
        "1" => Some(Verdict::Correct),
        "2" => Some(Verdict::Incorrect),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub question_id: String,
    pub sample_index: u32,
    pub verdict: Verdict,
    /// Retained verbatim so verdicts stay auditable.
    pub raw_judge_output: String,
    pub judge_model: String,
}

/// A judge call that produced no verdict even after the lenient retry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeReject {
    pub question_id: String,
    pub sample_index: u32,
    pub raw: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorErrRecord {
    pub question_id: String,
    pub correct: Vec<StudentSample>,
    pub incorrect: Vec<StudentSample>,
    /// Sample indices excluded from both sets (unparseable or unjudgeable).
    pub excluded: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct PreferencePair {
    pub question_id: String,
    pub prompt: PromptText,
    pub chosen_index: u32,
    pub rejected_index: u32,
    pub chosen: String,
    pub rejected: String,
}

#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub temperature: f64,
    pub max_tokens: u32,
    pub parallelism: usize,
    /// When set, sample i is requested with seed `seed_base + i`, making
    /// multi-sample fan-out reproducible against seed-aware endpoints.
    pub seed_base: Option<u64>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        // High temperature on purpose: the stage needs answer diversity to
        // populate both the correct and the incorrect set.
        Self { temperature: 0.9, max_tokens: 4096, parallelism: 4, seed_base: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeStrictness {
    /// One attempt; a non-verdict output is an immediate error.
    Strict,
    /// One retry with a format reminder before giving up.
    Lenient,
}

/// What the judge sees as the candidate answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeScope {
    /// The full serialized `<think>…</think><answer>…</answer>` response.
    FullResponse,
    /// Only the inner answer text.
    AnswerOnly,
}

#[derive(Debug, Clone)]
pub struct JudgeOptions {
    pub strictness: JudgeStrictness,
    pub scope: JudgeScope,
    pub temperature: f64,
    pub max_tokens: u32,
    pub parallelism: usize,
}

impl Default for JudgeOptions {
    fn default() -> Self {
        // Temperature 0 and a tiny token budget: the protocol wants a
        // deterministic single-character verdict.
        Self {
            strictness: JudgeStrictness::Lenient,
            scope: JudgeScope::FullResponse,
            temperature: 0.0,
            max_tokens: 4,
            parallelism: 4,
        }
    }
}

const JUDGE_REMINDER: &str =
    "Reminder: output exactly one character: 1 if the candidate answer is correct, 2 if it is incorrect.";

/// Errors if a non-trivial reference answer appears in the rendered student
/// prompt. Single-character answers (MCQ labels such as "B") are skipped —
/// they occur in any prompt that lists the options.
fn leak_guard(question: &Question, prompt_text: &str) -> Result<(), PairError> {
    let needle = normalize_ws(&question.reference_answer);
    if needle.chars().count() < 3 {
        return Ok(());
    }
    if normalize_ws(prompt_text).contains(&needle) {
        return Err(PairError::AnswerLeak { question_id: question.id.clone() });
    }
    Ok(())
}

/// Draws `n` student answers for one question with bounded parallel fan-out.
/// Per-sample failures (gateway errors, malformed tags) are recorded on the
/// sample rather than aborting the question; indices stay 0..n in order.
pub async fn sample_student_answers(
    question: &Question,
    n: u32,
    endpoint: &EndpointConfig,
    template: &PromptTemplate,
    gateway: &Gateway,
    options: &SampleOptions,
) -> Result<Vec<StudentSample>, PairError> {
    if n < 2 {
        return Err(PairError::InvalidSampleCount(n));
    }
    if template.kind != TemplateKind::StudentCot {
        return Err(PairError::WrongTemplateKind {
            expected: TemplateKind::StudentCot,
            got: template.kind,
        });
    }
    let prompt = render_prompt(template, &student_bindings(&question.text))?;
    leak_guard(question, &prompt.text)?;

    let outcomes: Vec<(u32, Result<String, GatewayError>)> = stream::iter(0..n)
        .map(|i| {
            let prompt = prompt.clone();
            async move {
                let request = CompletionRequest {
                    prompt,
                    temperature: options.temperature,
                    max_tokens: options.max_tokens,
                    sample_index: i,
                    seed_hint: options.seed_base.map(|base| base.wrapping_add(u64::from(i))),
                };
                (i, gateway.complete(endpoint, &request).await.map(|c| c.text))
            }
        })
        .buffered(options.parallelism.max(1))
        .collect()
        .await;

    let mut samples = Vec::with_capacity(n as usize);
    for (sample_index, outcome) in outcomes {
        let sample = match outcome {
            Ok(raw_text) => match parse_tagged_response(&raw_text) {
                Ok(response) => StudentSample {
                    question_id: question.id.clone(),
                    sample_index,
                    raw_text,
                    response: Some(response),
                    issue: None,
                },
                Err(e) => StudentSample {
                    question_id: question.id.clone(),
                    sample_index,
                    raw_text,
                    response: None,
                    issue: Some(format!("tag parse: {e}")),
                },
            },
            Err(e) => StudentSample {
                question_id: question.id.clone(),
                sample_index,
                raw_text: String::new(),
                response: None,
                issue: Some(format!("gateway: {e}")),
            },
        };
        samples.push(sample);
    }
    Ok(samples)
}

/// Asks the judge for a binary verdict on one sample. Strict mode makes one
/// attempt; lenient mode re-asks once with a format reminder (a distinct
/// prompt, hence a distinct cache entry) before erroring.
pub async fn judge_answer(
    question: &Question,
    sample: &StudentSample,
    endpoint: &EndpointConfig,
    template: &PromptTemplate,
    gateway: &Gateway,
    options: &JudgeOptions,
) -> Result<Judgment, PairError> {
    if template.kind != TemplateKind::Judge {
        return Err(PairError::WrongTemplateKind {
            expected: TemplateKind::Judge,
            got: template.kind,
        });
    }
    let response = sample.response.as_ref().ok_or_else(|| PairError::UnparseableSample {
        question_id: sample.question_id.clone(),
        sample_index: sample.sample_index,
    })?;
    let candidate = match options.scope {
        JudgeScope::FullResponse => response.serialized(),
        JudgeScope::AnswerOnly => response.answer.clone(),
    };
    let base = render_prompt(template, &judge_bindings(&question.text, &candidate))?;
    let attempts = match options.strictness {
        JudgeStrictness::Strict => 1,
        JudgeStrictness::Lenient => 2,
    };
    let mut last_raw = String::new();
    for attempt in 0..attempts {
        let mut prompt = base.clone();
        if attempt > 0 {
            prompt.text.push('\n');
            prompt.text.push_str(JUDGE_REMINDER);
        }
        // sample_index is pinned to 0 so identical candidate texts share one
        // cache entry — same candidate, same verdict.
        let request = CompletionRequest {
            prompt,
            temperature: options.temperature,
            max_tokens: options.max_tokens,
            sample_index: 0,
            seed_hint: None,
        };
        // An empty completion is a protocol error for generation, but for
        // the judge it is just one more way of not answering "1" or "2" —
        // score it as an unparseable verdict, retry policy included.
        let text = match gateway.complete(endpoint, &request).await {
            Ok(completion) => completion.text,
            Err(GatewayError::EmptyResponse) => String::new(),
            Err(e) => return Err(e.into()),
        };
        match parse_verdict(&text) {
            Some(verdict) => {
                return Ok(Judgment {
                    question_id: sample.question_id.clone(),
                    sample_index: sample.sample_index,
                    verdict,
                    raw_judge_output: text,
                    judge_model: endpoint.model_id.clone(),
                })
            }
            None => last_raw = text,
        }
    }
    Err(PairError::JudgeOutputUnparseable {
        question_id: sample.question_id.clone(),
        sample_index: sample.sample_index,
        raw: last_raw,
    })
}

/// Judges every usable sample with bounded parallelism. Verdict-format
/// failures come back as rejects; gateway and configuration errors abort.
pub async fn judge_samples(
    questions: &[Question],
    samples: &[StudentSample],
    endpoint: &EndpointConfig,
    template: &PromptTemplate,
    gateway: &Gateway,
    options: &JudgeOptions,
) -> Result<(Vec<Judgment>, Vec<JudgeReject>), PairError> {
    let by_id: BTreeMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    for sample in samples {
        if !by_id.contains_key(sample.question_id.as_str()) {
            return Err(PairError::SchemaError(format!(
                "sample references unknown question id {}",
                sample.question_id
            )));
        }
    }
    let outcomes: Vec<Result<Judgment, PairError>> = stream::iter(
        samples.iter().filter(|s| s.usable()),
    )
    .map(|sample| {
        let question = by_id[sample.question_id.as_str()];
        async move { judge_answer(question, sample, endpoint, template, gateway, options).await }
    })
    .buffered(options.parallelism.max(1))
    .collect()
    .await;

    let mut judgments = Vec::new();
    let mut rejects = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(judgment) => judgments.push(judgment),
            Err(PairError::JudgeOutputUnparseable { question_id, sample_index, raw }) => {
                rejects.push(JudgeReject { question_id, sample_index, raw });
            }
            Err(e) => return Err(e),
        }
    }
    Ok((judgments, rejects))
}

/// Marks samples the judge could not produce a verdict for, so record
/// assembly excludes them instead of tripping over a missing judgment.
pub fn mark_judge_rejects(samples: &mut [StudentSample], rejects: &[JudgeReject]) {
    for reject in rejects {
        for sample in samples.iter_mut() {
            if sample.question_id == reject.question_id
                && sample.sample_index == reject.sample_index
            {
                sample.issue = Some(format!("judge verdict unparseable: {:?}", reject.raw));
            }
        }
    }
}

/// Partitions one question's samples by verdict. Unusable samples land in
/// `excluded`; a usable sample without a judgment is a hard error because it
/// means the judging pass was incomplete.
pub fn build_cor_err_record(
    question: &Question,
    samples: &[StudentSample],
    judgments: &[Judgment],
) -> Result<CorErrRecord, PairError> {
    let verdicts: BTreeMap<u32, Verdict> = judgments
        .iter()
        .filter(|j| j.question_id == question.id)
        .map(|j| (j.sample_index, j.verdict))
        .collect();
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    let mut excluded = Vec::new();
    for sample in samples.iter().filter(|s| s.question_id == question.id) {
        if !sample.usable() {
            excluded.push(sample.sample_index);
            continue;
        }
        match verdicts.get(&sample.sample_index) {
            Some(Verdict::Correct) => correct.push(sample.clone()),
            Some(Verdict::Incorrect) => incorrect.push(sample.clone()),
            None => {
                return Err(PairError::MissingJudgment {
                    question_id: question.id.clone(),
                    sample_index: sample.sample_index,
                })
            }
        }
    }
    Ok(CorErrRecord { question_id: question.id.clone(), correct, incorrect, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairStrategy {
    /// Every (correct, incorrect) combination: |A⁺|·|A⁻| pairs.
    CartesianAll,
    /// At most k pairs, cycling the correct set fastest: pair j is
    /// (correct[j mod p], incorrect[(j div p) mod r]). All emitted pairs are
    /// distinct because j < p·r.
    CappedRoundRobin(usize),
}

/// Builds preference pairs from one record. An empty correct or incorrect
/// set yields no pairs — the question simply contributes nothing.
pub fn make_preference_pairs(
    record: &CorErrRecord,
    prompt: &PromptText,
    strategy: PairStrategy,
) -> Vec<PreferencePair> {
    let p = record.correct.len();
    let r = record.incorrect.len();
    if p == 0 || r == 0 {
        return Vec::new();
    }
    let pair = |chosen: &StudentSample, rejected: &StudentSample| PreferencePair {
        question_id: record.question_id.clone(),
        prompt: prompt.clone(),
        chosen_index: chosen.sample_index,
        rejected_index: rejected.sample_index,
        chosen: chosen
            .response
            .as_ref()
            .expect("correct-set samples are parseable by construction")
            .serialized(),
        rejected: rejected
            .response
            .as_ref()
            .expect("incorrect-set samples are parseable by construction")
            .serialized(),
    };
    match strategy {
        PairStrategy::CartesianAll => record
            .correct
            .iter()
            .flat_map(|c| record.incorrect.iter().map(|e| pair(c, e)))
            .collect(),
        PairStrategy::CappedRoundRobin(k) => (0..k.min(p * r))
            .map(|j| pair(&record.correct[j % p], &record.incorrect[(j / p) % r]))
            .collect(),
    }
}

/// Wire format of one exported pair line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRow {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairExportSummary {
    pub pairs: usize,
    pub path: String,
    pub sha256: String,
}

/// Writes pairs as JSONL sorted by (question_id, chosen index, rejected
/// index), so the file bytes are independent of assembly order.
pub fn export_preference_pairs(
    pairs: &[PreferencePair],
    path: &Path,
) -> Result<PairExportSummary, PairError> {
    let mut sorted: Vec<&PreferencePair> = pairs.iter().collect();
    sorted.sort_by(|a, b| {
        (a.question_id.as_str(), a.chosen_index, a.rejected_index)
            .cmp(&(b.question_id.as_str(), b.chosen_index, b.rejected_index))
    });
    let rows: Vec<PairRow> = sorted
        .iter()
        .map(|p| PairRow {
            prompt: p.prompt.text.clone(),
            chosen: p.chosen.clone(),
            rejected: p.rejected.clone(),
        })
        .collect();
    let sha256 = export_pair_rows(&rows, path)?;
    Ok(PairExportSummary { pairs: rows.len(), path: path.display().to_string(), sha256 })
}

pub fn export_pair_rows(rows: &[PairRow], path: &Path) -> Result<String, PairError> {
    Ok(write_jsonl(path, rows)?)
}

pub fn import_pair_rows(path: &Path) -> Result<Vec<PairRow>, PairError> {
    let (rows, rejects) = read_jsonl::<PairRow>(path)?;
    if let Some(first) = rejects.first() {
        return Err(PairError::SchemaError(format!(
            "pairs file line {}: {}",
            first.line, first.reason
        )));
    }
    Ok(rows)
}

/// Compact audit row for the correct/incorrect partition of one question;
/// sample contents live in the samples file, keyed by (id, sample_index).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorErrRow {
    pub id: String,
    pub correct: Vec<u32>,
    pub incorrect: Vec<u32>,
    pub excluded: Vec<u32>,
}

impl CorErrRow {
    pub fn from_record(record: &CorErrRecord) -> Self {
        Self {
            id: record.question_id.clone(),
            correct: record.correct.iter().map(|s| s.sample_index).collect(),
            incorrect: record.incorrect.iter().map(|s| s.sample_index).collect(),
            excluded: record.excluded.clone(),
        }
    }
}

pub fn export_cor_err(records: &[CorErrRecord], path: &Path) -> Result<String, PairError> {
    let rows: Vec<CorErrRow> = records.iter().map(CorErrRow::from_record).collect();
    Ok(write_jsonl(path, &rows)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct QuestionPartitionStats {
    pub id: String,
    pub correct: usize,
    pub incorrect: usize,
    pub excluded: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairStats {
    pub questions: usize,
    pub samples: usize,
    pub judgments: usize,
    pub judge_failures: usize,
    /// Failures over all verdict attempts that ran to completion.
    pub judge_failure_rate: f64,
    pub pairs: usize,
    pub per_question: Vec<QuestionPartitionStats>,
}

pub fn pair_stats(
    records: &[CorErrRecord],
    pairs: &[PreferencePair],
    judgments: usize,
    judge_failures: usize,
) -> PairStats {
    let per_question: Vec<QuestionPartitionStats> = records
        .iter()
        .map(|record| QuestionPartitionStats {
            id: record.question_id.clone(),
            correct: record.correct.len(),
            incorrect: record.incorrect.len(),
            excluded: record.excluded.len(),
            pairs: pairs.iter().filter(|p| p.question_id == record.question_id).count(),
        })
        .collect();
    let samples = records
        .iter()
        .map(|r| r.correct.len() + r.incorrect.len() + r.excluded.len())
        .sum();
    let attempts = judgments + judge_failures;
    PairStats {
        questions: records.len(),
        samples,
        judgments,
        judge_failures,
        judge_failure_rate: if attempts == 0 {
            0.0
        } else {
            judge_failures as f64 / attempts as f64
        },
        pairs: pairs.len(),
        per_question,
    }
}
