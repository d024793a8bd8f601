//! Prompt templates and the `<think>`/`<answer>` tagged-response grammar.
//!
//! Three prompt kinds exist: the teacher distillation prompt (question plus
//! embedded reference answer), the student prompt (same scaffold without the
//! answer), and the judge prompt (question plus candidate answer). Templates
//! are plain UTF-8 text with `{placeholder}` markers and ship as editable
//! files; the copies under `templates/` are compiled in as defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// The sentence prefix the teacher template uses to embed the reference
/// answer. Exported completions must never contain it.
pub const ANSWER_EMBED_PREFIX: &str = "This question's answer is";

const BUNDLED_TEACHER: &str = include_str!("../templates/teacher_cot.txt");
const BUNDLED_STUDENT: &str = include_str!("../templates/student_cot.txt");
const BUNDLED_JUDGE: &str = include_str!("../templates/judge.txt");

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("missing binding for placeholder `{0}`")]
    MissingBinding(String),
    #[error("malformed tags: {0}")]
    MalformedTags(String),
    #[error("multiple `{0}` blocks")]
    MultipleBlocks(&'static str),
    #[error("invalid template for kind {kind:?}: missing {missing:?}, duplicated {duplicated:?}, unexpected {unexpected:?}")]
    InvalidTemplate {
        kind: TemplateKind,
        missing: Vec<String>,
        duplicated: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("template manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    TeacherCot,
    StudentCot,
    Judge,
}

impl TemplateKind {
    /// Placeholders that must appear in the template body, each exactly once.
    pub fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateKind::TeacherCot | TemplateKind::StudentCot => {
                &["user_question", "question_mark", "reference_answer"]
            }
            TemplateKind::Judge => &["user_question", "candidate_answer"],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(kind: TemplateKind, body: impl Into<String>) -> Self {
        Self { kind, body: body.into() }
    }
}

/// Outcome of checking a template body against its kind's placeholder set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub missing: Vec<String>,
    pub duplicated: Vec<String>,
    pub unexpected: Vec<String>,
}

/// A fully rendered prompt together with the bindings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub source_template: TemplateKind,
    pub bindings: BTreeMap<String, String>,
}

/// A parsed model response: one think block followed by one answer block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedResponse {
    pub raw: String,
    pub think: String,
    pub answer: String,
}

impl TaggedResponse {
    /// Canonical serialized form; feeding it back through
    /// [`parse_tagged_response`] recovers `think` and `answer` verbatim.
    pub fn serialized(&self) -> String {
        serialize_tagged_response(&self.think, &self.answer)
    }
}

pub fn serialize_tagged_response(think: &str, answer: &str) -> String {
    format!("{THINK_OPEN}{think}{THINK_CLOSE}\n{ANSWER_OPEN}{answer}{ANSWER_CLOSE}")
}

fn placeholder_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap())
}

/// Checks that the body carries each placeholder required by the kind exactly
/// once and nothing else that looks like a placeholder marker.
pub fn validate_template(template: &PromptTemplate) -> ValidationReport {
    let required = template.kind.required_placeholders();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut unexpected = Vec::new();
    for cap in placeholder_regex().captures_iter(&template.body) {
        let name = cap.get(1).unwrap().as_str();
        if required.contains(&name) {
            *counts.entry(name).or_insert(0) += 1;
        } else if !unexpected.iter().any(|u: &String| u == name) {
            unexpected.push(name.to_string());
        }
    }
    let missing: Vec<String> = required
        .iter()
        .filter(|name| counts.get(**name).copied().unwrap_or(0) == 0)
        .map(|name| name.to_string())
        .collect();
    let duplicated: Vec<String> = required
        .iter()
        .filter(|name| counts.get(**name).copied().unwrap_or(0) > 1)
        .map(|name| name.to_string())
        .collect();
    ValidationReport {
        valid: missing.is_empty() && duplicated.is_empty() && unexpected.is_empty(),
        missing,
        duplicated,
        unexpected,
    }
}

/// Substitutes every required placeholder with its binding. Each marker is
/// located on the original body, so binding values are never re-scanned and
/// no other text is altered.
pub fn render_prompt(
    template: &PromptTemplate,
    bindings: &BTreeMap<String, String>,
) -> Result<PromptText, TemplateError> {
    let report = validate_template(template);
    if !report.valid {
        return Err(TemplateError::InvalidTemplate {
            kind: template.kind,
            missing: report.missing,
            duplicated: report.duplicated,
            unexpected: report.unexpected,
        });
    }
    let mut markers: Vec<(usize, &str, &str)> = Vec::new();
    for name in template.kind.required_placeholders() {
        let marker_len = name.len() + 2;
        let pos = template
            .body
            .find(&format!("{{{name}}}"))
            .expect("validated placeholder present");
        let value = bindings
            .get(*name)
            .ok_or_else(|| TemplateError::MissingBinding(name.to_string()))?;
        markers.push((pos, value, &template.body[pos..pos + marker_len]));
    }
    markers.sort_by_key(|(pos, _, _)| *pos);
    let mut text = String::with_capacity(template.body.len());
    let mut last = 0;
    for (pos, value, marker) in markers {
        text.push_str(&template.body[last..pos]);
        text.push_str(value);
        last = pos + marker.len();
    }
    text.push_str(&template.body[last..]);
    Ok(PromptText {
        text,
        source_template: template.kind,
        bindings: bindings.clone(),
    })
}

/// `"?"` when the question text does not already end in a question mark
/// (ASCII or fullwidth), otherwise `""` — avoids rendering double marks.
pub fn question_mark_binding(question: &str) -> &'static str {
    let trimmed = question.trim_end();
    if trimmed.ends_with('?') || trimmed.ends_with('？') {
        ""
    } else {
        "?"
    }
}

pub fn teacher_bindings(question: &str, reference_answer: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("user_question".to_string(), question.to_string()),
        ("question_mark".to_string(), question_mark_binding(question).to_string()),
        ("reference_answer".to_string(), reference_answer.to_string()),
    ])
}

/// Student prompts reuse the teacher scaffold but bind the answer slot to the
/// empty string, so the rendered text never carries the reference answer.
pub fn student_bindings(question: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("user_question".to_string(), question.to_string()),
        ("question_mark".to_string(), question_mark_binding(question).to_string()),
        ("reference_answer".to_string(), String::new()),
    ])
}

pub fn judge_bindings(question: &str, candidate_answer: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("user_question".to_string(), question.to_string()),
        ("candidate_answer".to_string(), candidate_answer.to_string()),
    ])
}

/// Parses a raw model response that must consist of exactly one
/// `<think>…</think>` block followed by exactly one `<answer>…</answer>`
/// block. Whitespace outside the blocks is tolerated; anything else is not.
/// Inner content is preserved verbatim, and content containing literal tag
/// tokens is rejected because the occurrence counts no longer line up.
pub fn parse_tagged_response(raw: &str) -> Result<TaggedResponse, TemplateError> {
    let tags: [(&'static str, Vec<usize>); 4] = [
        (THINK_OPEN, raw.match_indices(THINK_OPEN).map(|(i, _)| i).collect()),
        (THINK_CLOSE, raw.match_indices(THINK_CLOSE).map(|(i, _)| i).collect()),
        (ANSWER_OPEN, raw.match_indices(ANSWER_OPEN).map(|(i, _)| i).collect()),
        (ANSWER_CLOSE, raw.match_indices(ANSWER_CLOSE).map(|(i, _)| i).collect()),
    ];
    for (tag, positions) in &tags {
        if positions.is_empty() {
            return Err(TemplateError::MalformedTags(format!("missing `{tag}` tag")));
        }
    }
    for (tag, positions) in &tags {
        if positions.len() > 1 {
            return Err(TemplateError::MultipleBlocks(tag));
        }
    }
    let (to, tc, ao, ac) = (tags[0].1[0], tags[1].1[0], tags[2].1[0], tags[3].1[0]);
    if !(to < tc && tc < ao && ao < ac) {
        return Err(TemplateError::MalformedTags(
            "tags out of order; expected <think>…</think> then <answer>…</answer>".to_string(),
        ));
    }
    if !raw[..to].trim().is_empty() {
        return Err(TemplateError::MalformedTags(
            "unexpected content before <think>".to_string(),
        ));
    }
    if !raw[tc + THINK_CLOSE.len()..ao].trim().is_empty() {
        return Err(TemplateError::MalformedTags(
            "unexpected content between </think> and <answer>".to_string(),
        ));
    }
    if !raw[ac + ANSWER_CLOSE.len()..].trim().is_empty() {
        return Err(TemplateError::MalformedTags(
            "unexpected content after </answer>".to_string(),
        ));
    }
    Ok(TaggedResponse {
        raw: raw.to_string(),
        think: raw[to + THINK_OPEN.len()..tc].to_string(),
        answer: raw[ao + ANSWER_OPEN.len()..ac].to_string(),
    })
}

/// The three templates a pipeline run needs, one per prompt kind.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub teacher: PromptTemplate,
    pub student: PromptTemplate,
    pub judge: PromptTemplate,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    teacher_cot: Option<String>,
    student_cot: Option<String>,
    judge: Option<String>,
}

impl TemplateSet {
    /// The compiled-in defaults from `templates/`.
    pub fn bundled() -> Self {
        Self {
            teacher: PromptTemplate::new(TemplateKind::TeacherCot, BUNDLED_TEACHER),
            student: PromptTemplate::new(TemplateKind::StudentCot, BUNDLED_STUDENT),
            judge: PromptTemplate::new(TemplateKind::Judge, BUNDLED_JUDGE),
        }
    }

    /// Loads templates named by a TOML manifest; paths resolve relative to
    /// the manifest file, and omitted kinds keep the bundled default. Every
    /// loaded template is validated before use.
    pub fn from_manifest(manifest_path: &Path) -> Result<Self, TemplateError> {
        let text = fs::read_to_string(manifest_path)?;
        let manifest: ManifestFile = toml::from_str(&text)
            .map_err(|e| TemplateError::Manifest(format!("{}: {e}", manifest_path.display())))?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let mut set = Self::bundled();
        if let Some(rel) = manifest.teacher_cot {
            set.teacher = PromptTemplate::new(TemplateKind::TeacherCot, fs::read_to_string(base.join(rel))?);
        }
        if let Some(rel) = manifest.student_cot {
            set.student = PromptTemplate::new(TemplateKind::StudentCot, fs::read_to_string(base.join(rel))?);
        }
        if let Some(rel) = manifest.judge {
            set.judge = PromptTemplate::new(TemplateKind::Judge, fs::read_to_string(base.join(rel))?);
        }
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        for template in [&self.teacher, &self.student, &self.judge] {
            let report = validate_template(template);
            if !report.valid {
                return Err(TemplateError::InvalidTemplate {
                    kind: template.kind,
                    missing: report.missing,
                    duplicated: report.duplicated,
                    unexpected: report.unexpected,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn teacher_stub() -> PromptTemplate {
        PromptTemplate::new(
            TemplateKind::TeacherCot,
            "Answer this.\nThis question's answer is: {reference_answer}\nQ: {user_question}{question_mark}",
        )
    }

    #[test]
    fn bundled_templates_satisfy_placeholder_contract() {
        TemplateSet::bundled().validate().unwrap();
    }

    #[test]
    fn validate_flags_missing_placeholder() {
        let t = PromptTemplate::new(TemplateKind::TeacherCot, "Q: {user_question}{question_mark}");
        let report = validate_template(&t);
        assert!(!report.valid);
        assert_eq!(report.missing, vec!["reference_answer"]);
        assert!(report.duplicated.is_empty());
    }

    #[test]
    fn validate_flags_duplicated_and_unexpected_placeholders() {
        let t = PromptTemplate::new(
            TemplateKind::Judge,
            "{user_question} {user_question} {candidate_answer} {extra}",
        );
        let report = validate_template(&t);
        assert!(!report.valid);
        assert_eq!(report.duplicated, vec!["user_question"]);
        assert_eq!(report.unexpected, vec!["extra"]);
    }

    #[test]
    fn render_substitutes_all_teacher_placeholders() {
        let rendered = render_prompt(&teacher_stub(), &teacher_bindings("What is X", "B")).unwrap();
        assert!(rendered.text.contains("What is X?"));
        assert!(rendered.text.contains("This question's answer is: B"));
        assert!(!rendered.text.contains('{'));
    }

    #[test]
    fn render_keeps_existing_question_mark() {
        let rendered =
            render_prompt(&teacher_stub(), &teacher_bindings("Already asked?", "B")).unwrap();
        assert!(rendered.text.contains("Q: Already asked?"));
        assert!(!rendered.text.contains("Already asked??"));
    }

    #[test]
    fn question_mark_binding_handles_fullwidth_mark() {
        assert_eq!(question_mark_binding("什么是X？"), "");
        assert_eq!(question_mark_binding("What is X?"), "");
        assert_eq!(question_mark_binding("What is X"), "?");
        assert_eq!(question_mark_binding("What is X?  "), "");
    }

    #[test]
    fn render_rejects_missing_binding() {
        let mut bindings = teacher_bindings("Q", "B");
        bindings.remove("reference_answer");
        match render_prompt(&teacher_stub(), &bindings) {
            Err(TemplateError::MissingBinding(name)) => assert_eq!(name, "reference_answer"),
            other => panic!("expected MissingBinding, got {other:?}"),
        }
    }

    #[test]
    fn render_does_not_rescan_binding_values() {
        // A binding value that itself looks like a placeholder must land in
        // the output verbatim.
        let mut bindings = teacher_bindings("What is {reference_answer}", "B");
        bindings.insert("user_question".into(), "What is {reference_answer}".into());
        let rendered = render_prompt(&teacher_stub(), &bindings).unwrap();
        assert!(rendered.text.contains("Q: What is {reference_answer}?"));
    }

    #[test]
    fn student_bindings_leave_answer_slot_empty() {
        let bindings = student_bindings("What is X");
        assert_eq!(bindings["reference_answer"], "");
    }

    #[test]
    fn judge_template_renders_question_and_candidate() {
        let set = TemplateSet::bundled();
        let rendered = render_prompt(&set.judge, &judge_bindings("Q text", "A text")).unwrap();
        assert!(rendered.text.contains("Q text"));
        assert!(rendered.text.contains("A text"));
        assert!(!rendered.text.contains('{'));
    }

    #[test]
    fn parse_minimal_tagged_response() {
        let parsed = parse_tagged_response("<think>reasoning</think>\n<answer>B</answer>").unwrap();
        assert_eq!(parsed.think, "reasoning");
        assert_eq!(parsed.answer, "B");
    }

    #[test]
    fn parse_tolerates_surrounding_whitespace_only() {
        let parsed =
            parse_tagged_response("  \n<think>t</think>   \n\n <answer>a</answer>\n  ").unwrap();
        assert_eq!(parsed.think, "t");
        assert_eq!(parsed.answer, "a");
    }

    #[test]
    fn parse_preserves_inner_content_verbatim() {
        let think = "  line one\nline two  ";
        let answer = "\n final answer \n";
        let raw = serialize_tagged_response(think, answer);
        let parsed = parse_tagged_response(&raw).unwrap();
        assert_eq!(parsed.think, think);
        assert_eq!(parsed.answer, answer);
    }

    #[test]
    fn parse_rejects_swapped_block_order() {
        match parse_tagged_response("<answer>B</answer><think>r</think>") {
            Err(TemplateError::MalformedTags(reason)) => assert!(reason.contains("order")),
            other => panic!("expected MalformedTags, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_duplicate_blocks() {
        let raw = "<think>a</think><answer>x</answer><think>b</think><answer>y</answer>";
        assert!(matches!(
            parse_tagged_response(raw),
            Err(TemplateError::MultipleBlocks(_))
        ));
    }

    #[test]
    fn parse_rejects_missing_answer_block() {
        match parse_tagged_response("<think>only thinking</think>") {
            Err(TemplateError::MalformedTags(reason)) => assert!(reason.contains("<answer>")),
            other => panic!("expected MalformedTags, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_prose_outside_blocks() {
        let raw = "Sure, here you go:\n<think>t</think>\n<answer>a</answer>";
        assert!(matches!(parse_tagged_response(raw), Err(TemplateError::MalformedTags(_))));
        let raw = "<think>t</think>\n<answer>a</answer>\nHope that helps!";
        assert!(matches!(parse_tagged_response(raw), Err(TemplateError::MalformedTags(_))));
        let raw = "<think>t</think>interlude<answer>a</answer>";
        assert!(matches!(parse_tagged_response(raw), Err(TemplateError::MalformedTags(_))));
    }

    #[test]
    fn parse_rejects_literal_tag_tokens_inside_content() {
        let raw = serialize_tagged_response("nested <think> token", "a");
        assert!(matches!(
            parse_tagged_response(&raw),
            Err(TemplateError::MultipleBlocks(_))
        ));
    }

    #[test]
    fn parse_pleurisy_fixture_answer() {
        let answer = "Chest pain stemming from dry pleurisy is characteristically sharp or \
stabbing in nature, often described as a \"knife-like\" sensation. A key feature of this pain \
is exacerbation with respiratory movements. It tends to significantly worsen when you inhale \
deeply, cough forcefully, sneeze, or even laugh, as these actions cause the chest wall and \
lungs to move. Conversely, patients often find that the pain lessens considerably, or may even \
temporarily disappear, when they hold their breath or take very shallow breaths. This distinct \
pattern of pain makes it a strong indicator of pleuritic involvement.";
        let raw = serialize_tagged_response(
            "The question concerns the hallmark character of pleuritic chest pain, so I should \
separate it from cardiac and muscular causes before settling on the breathing linkage.",
            answer,
        );
        let parsed = parse_tagged_response(&raw).unwrap();
        assert!(parsed.answer.contains("exacerbation with respiratory movements"));
        assert_eq!(parsed.answer, answer);
    }

    #[test]
    fn round_trip_matches_identity() {
        let cases = [("t", "a"), ("", ""), ("multi\nline", " spaced "), ("中文推理", "中文答案")];
        for (think, answer) in cases {
            let parsed = parse_tagged_response(&serialize_tagged_response(think, answer)).unwrap();
            assert_eq!(parsed.think, think);
            assert_eq!(parsed.answer, answer);
        }
    }

    #[test]
    fn manifest_loads_relative_paths_and_falls_back_to_bundled() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("judge.txt"),
            "Q {user_question} / C {candidate_answer}; reply 1 or 2",
        )
        .unwrap();
        std::fs::write(dir.path().join("manifest.toml"), "judge = \"judge.txt\"\n").unwrap();
        let set = TemplateSet::from_manifest(&dir.path().join("manifest.toml")).unwrap();
        assert!(set.judge.body.starts_with("Q {user_question}"));
        assert_eq!(set.teacher.body, TemplateSet::bundled().teacher.body);
    }

    #[test]
    fn manifest_rejects_template_violating_contract() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("judge.txt"), "no placeholders at all").unwrap();
        std::fs::write(dir.path().join("manifest.toml"), "judge = \"judge.txt\"\n").unwrap();
        assert!(matches!(
            TemplateSet::from_manifest(&dir.path().join("manifest.toml")),
            Err(TemplateError::InvalidTemplate { .. })
        ));
    }

    fn tag_free_content() -> impl Strategy<Value = String> {
        "[ -~\n]{0,80}".prop_filter("content must not contain tag tokens", |s| {
            ![THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE]
                .iter()
                .any(|tag| s.contains(tag))
        })
    }

    proptest! {
        #[test]
        fn prop_round_trip_identity(think in tag_free_content(), answer in tag_free_content()) {
            let parsed = parse_tagged_response(&serialize_tagged_response(&think, &answer)).unwrap();
            prop_assert_eq!(parsed.think, think);
            prop_assert_eq!(parsed.answer, answer);
        }

        #[test]
        fn prop_mutated_responses_rejected(
            think in tag_free_content(),
            answer in tag_free_content(),
            mutation in 0usize..6,
        ) {
            let valid = serialize_tagged_response(&think, &answer);
            let broken = match mutation {
                0 => valid.replacen(THINK_OPEN, "", 1),
                1 => valid.replacen(ANSWER_CLOSE, "", 1),
                2 => format!("{valid}{ANSWER_OPEN}extra{ANSWER_CLOSE}"),
                3 => format!("{ANSWER_OPEN}{answer}{ANSWER_CLOSE}\n{THINK_OPEN}{think}{THINK_CLOSE}"),
                4 => format!("preamble text {valid}"),
                5 => format!("{valid} trailing text"),
                _ => unreachable!(),
            };
            prop_assert!(parse_tagged_response(&broken).is_err());
        }
    }
}
