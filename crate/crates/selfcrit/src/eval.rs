//! Multiple-choice accuracy scoring with per-split (train / test / total)
//! reporting.
//!
//! Answers are matched to option labels through a fixed rule cascade, so
//! extraction is a pure function of the response text; answers that match no
//! rule count as incorrect rather than being excluded, keeping benchmark
//! denominators fixed. Percentages are rounded half-up to two decimals.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sft::{Question, Split};
use crate::templates::TaggedResponse;
use crate::util::{normalize_ws as normalize, read_jsonl};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction references unknown question id {0}")]
    UnknownQuestionId(String),
    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad predictions file: {0}")]
    SchemaError(String),
}

/// One model answer to one question. `response` is absent when the model's
/// raw output never parsed into a tagged response — such predictions stay in
/// the denominator and score as incorrect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<TaggedResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_choice: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub correct: usize,
    pub total: usize,
    /// 100·correct/total, rounded half-up to 2 decimals; 0.00 when total is 0.
    pub accuracy: f64,
}

impl SplitScore {
    fn from_counts(correct: usize, total: usize) -> Self {
        let accuracy =
            if total == 0 { 0.0 } else { round2(100.0 * correct as f64 / total as f64) };
        Self { correct, total, accuracy }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub model_name: String,
    pub per_split: BTreeMap<Split, SplitScore>,
    pub overall: SplitScore,
}

impl AccuracyReport {
    pub fn split(&self, split: Split) -> SplitScore {
        self.per_split.get(&split).copied().unwrap_or(SplitScore::from_counts(0, 0))
    }
}

/// Rounds half-up to two decimals (1.005 → 1.01): the precision used
/// everywhere accuracies are reported.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Maps a response to an option label via a three-rule cascade over the
/// answer block, first match wins:
///
/// 1. the first token, stripped of surrounding punctuation ("B", "B.",
///    "(B)"), equals a label;
/// 2. an "answer is X" phrase names a label;
/// 3. the whole answer equals exactly one option's text (case- and
///    whitespace-insensitive).
///
/// No match — including the ambiguous cases — is `None`, never an error.
pub fn extract_choice(response: &TaggedResponse, options: &[(String, String)]) -> Option<String> {
    let answer = response.answer.trim();
    if let Some(first) = answer.split_whitespace().next() {
        let token = first.trim_matches(|c: char| !c.is_alphanumeric());
        if let Some((label, _)) = options.iter().find(|(label, _)| token == label) {
            return Some(label.clone());
        }
    }
    static ANSWER_IS: OnceLock<Regex> = OnceLock::new();
    let pattern = ANSWER_IS.get_or_init(|| Regex::new(r"(?i)answer\s+is\W*([A-Za-z0-9]+)").unwrap());
    if let Some(caps) = pattern.captures(answer) {
        let token = &caps[1];
        if let Some((label, _)) = options.iter().find(|(label, _)| token.eq_ignore_ascii_case(label))
        {
            return Some(label.clone());
        }
    }
    let normalized = normalize(answer);
    let mut hit = None;
    for (label, text) in options {
        if normalize(text) == normalized {
            if hit.is_some() {
                return None;
            }
            hit = Some(label.clone());
        }
    }
    hit
}

/// Scores predictions against their questions. Denominators count
/// predictions, so a question with no prediction row simply does not
/// participate; a prediction whose answer extracts to nothing is incorrect.
/// Free-text questions (no options) are scored by normalized exact match.
pub fn score(
    predictions: &[Prediction],
    questions: &[Question],
    model_name: &str,
) -> Result<AccuracyReport, EvalError> {
    let by_id: BTreeMap<&str, &Question> =
        questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut counts: BTreeMap<Split, (usize, usize)> = BTreeMap::new();
    for prediction in predictions {
        let question = by_id
            .get(prediction.question_id.as_str())
            .ok_or_else(|| EvalError::UnknownQuestionId(prediction.question_id.clone()))?;
        let correct = match &question.options {
            Some(options) => {
                let extracted = prediction
                    .extracted_choice
                    .clone()
                    .filter(|label| options.iter().any(|(l, _)| l == label))
                    .or_else(|| {
                        prediction.response.as_ref().and_then(|r| extract_choice(r, options))
                    });
                extracted.as_deref() == Some(question.reference_answer.as_str())
            }
            None => prediction
                .response
                .as_ref()
                .is_some_and(|r| normalize(&r.answer) == normalize(&question.reference_answer)),
        };
        let entry = counts.entry(question.split).or_insert((0, 0));
        entry.0 += usize::from(correct);
        entry.1 += 1;
    }
    let per_split: BTreeMap<Split, SplitScore> = counts
        .iter()
        .map(|(split, (correct, total))| (*split, SplitScore::from_counts(*correct, *total)))
        .collect();
    let overall_correct = counts.values().map(|(c, _)| c).sum();
    let overall_total = counts.values().map(|(_, t)| t).sum();
    Ok(AccuracyReport {
        model_name: model_name.to_string(),
        per_split,
        overall: SplitScore::from_counts(overall_correct, overall_total),
    })
}

/// Combines per-split percentages into an overall percentage weighted by
/// split size, rounded to two decimals. Recomputing an overall figure from
/// already-rounded split values carries up to ±0.05 of rounding slack.
pub fn weighted_total_percent(splits: &[(f64, usize)]) -> f64 {
    let total: usize = splits.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return 0.0;
    }
    let weighted: f64 = splits.iter().map(|(pct, n)| pct * *n as f64).sum();
    round2(weighted / total as f64)
}

/// Renders reports as a two-space-delimited table, one row per report in
/// input order: Model, Train, Test, Total. Deterministic byte output.
pub fn render_report(reports: &[AccuracyReport]) -> String {
    let mut out = String::from("Model  Train  Test  Total\n");
    for report in reports {
        out.push_str(&format!(
            "{}  {:.2}  {:.2}  {:.2}\n",
            report.model_name,
            report.split(Split::Train).accuracy,
            report.split(Split::Test).accuracy,
            report.overall.accuracy,
        ));
    }
    out
}

/// Loads a predictions JSONL file, failing loudly on any malformed line —
/// these files are machine-written, so corruption should stop the run.
pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    let (rows, rejects) =
        read_jsonl::<Prediction>(path).map_err(|source| EvalError::FileUnreadable {
            path: path.display().to_string(),
            source,
        })?;
    if let Some(first) = rejects.first() {
        return Err(EvalError::SchemaError(format!("line {}: {}", first.line, first.reason)));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn options() -> Vec<(String, String)> {
        vec![
            ("A".to_string(), "aspirin".to_string()),
            ("B".to_string(), "heparin".to_string()),
            ("C".to_string(), "warfarin".to_string()),
            ("D".to_string(), "clopidogrel".to_string()),
            ("E".to_string(), "alteplase".to_string()),
        ]
    }

    fn resp(answer: &str) -> TaggedResponse {
        TaggedResponse { raw: String::new(), think: "t".to_string(), answer: answer.to_string() }
    }

    fn mcq(id: &str, answer: &str, split: Split) -> Question {
        Question {
            id: id.to_string(),
            text: format!("stem {id}"),
            options: Some(options()),
            reference_answer: answer.to_string(),
            split,
        }
    }

    #[test]
    fn label_token_rule() {
        assert_eq!(extract_choice(&resp("B"), &options()).as_deref(), Some("B"));
        assert_eq!(extract_choice(&resp("B."), &options()).as_deref(), Some("B"));
        assert_eq!(extract_choice(&resp("(B)"), &options()).as_deref(), Some("B"));
        assert_eq!(extract_choice(&resp("  B: heparin"), &options()).as_deref(), Some("B"));
        // An alphanumeric continuation is not a label token.
        assert_eq!(extract_choice(&resp("Better to avoid"), &options()), None);
    }

    #[test]
    fn answer_is_pattern_rule() {
        assert_eq!(
            extract_choice(&resp("The answer is: C because it works"), &options()).as_deref(),
            Some("C")
        );
        assert_eq!(extract_choice(&resp("the answer is (d)"), &options()).as_deref(), Some("D"));
        assert_eq!(extract_choice(&resp("The answer is nothing here"), &options()), None);
    }

    #[test]
    fn option_text_rule_and_ambiguity() {
        assert_eq!(extract_choice(&resp("heparin"), &options()).as_deref(), Some("B"));
        assert_eq!(extract_choice(&resp("  Warfarin "), &options()).as_deref(), Some("C"));
        assert_eq!(extract_choice(&resp("both A and B are plausible"), &options()), None);
        let twins = vec![
            ("A".to_string(), "same text".to_string()),
            ("B".to_string(), "same text".to_string()),
        ];
        assert_eq!(extract_choice(&resp("same text"), &twins), None);
    }

    #[test]
    fn cascade_priority_first_match_wins() {
        // Rule 1 fires before the "answer is" phrase later in the text.
        assert_eq!(
            extract_choice(&resp("A. Although some say the answer is B"), &options()).as_deref(),
            Some("A")
        );
    }

    #[test]
    fn extraction_is_deterministic() {
        let r = resp("The answer is E");
        let first = extract_choice(&r, &options());
        for _ in 0..10 {
            assert_eq!(extract_choice(&r, &options()), first);
        }
    }

    #[test]
    fn score_hand_counted_splits() {
        let questions = vec![
            mcq("t1", "A", Split::Train),
            mcq("t2", "B", Split::Train),
            mcq("e1", "C", Split::Test),
            mcq("e2", "D", Split::Test),
        ];
        let predictions = vec![
            Prediction { question_id: "t1".into(), response: Some(resp("A")), extracted_choice: None },
            Prediction { question_id: "t2".into(), response: Some(resp("E")), extracted_choice: None },
            Prediction { question_id: "e1".into(), response: Some(resp("the answer is C")), extracted_choice: None },
            Prediction { question_id: "e2".into(), response: Some(resp("clopidogrel")), extracted_choice: None },
        ];
        let report = score(&predictions, &questions, "toy").unwrap();
        assert_eq!(report.split(Split::Train).accuracy, 50.00);
        assert_eq!(report.split(Split::Test).accuracy, 100.00);
        assert_eq!(report.overall.accuracy, 75.00);
        assert_eq!(report.overall.correct, 3);
        assert_eq!(report.overall.total, 4);
    }

    #[test]
    fn absent_extraction_counts_incorrect() {
        let questions = vec![mcq("q", "A", Split::Test)];
        let predictions = vec![
            Prediction { question_id: "q".into(), response: None, extracted_choice: None },
            Prediction {
                question_id: "q".into(),
                response: Some(resp("no idea at all")),
                extracted_choice: None,
            },
        ];
        let report = score(&predictions, &questions, "toy").unwrap();
        assert_eq!(report.overall.correct, 0);
        assert_eq!(report.overall.total, 2);
        assert_eq!(report.overall.accuracy, 0.00);
    }

    #[test]
    fn stored_extraction_is_honored_when_valid() {
        let questions = vec![mcq("q", "B", Split::Train)];
        let valid = Prediction {
            question_id: "q".into(),
            response: None,
            extracted_choice: Some("B".into()),
        };
        let invalid = Prediction {
            question_id: "q".into(),
            response: None,
            extracted_choice: Some("Z".into()),
        };
        assert_eq!(score(&[valid], &questions, "m").unwrap().overall.correct, 1);
        assert_eq!(score(&[invalid], &questions, "m").unwrap().overall.correct, 0);
    }

    #[test]
    fn unknown_question_id_is_an_error() {
        let questions = vec![mcq("q", "A", Split::Train)];
        let predictions = vec![Prediction {
            question_id: "ghost".into(),
            response: Some(resp("A")),
            extracted_choice: None,
        }];
        assert!(matches!(
            score(&predictions, &questions, "m"),
            Err(EvalError::UnknownQuestionId(id)) if id == "ghost"
        ));
    }

    #[test]
    fn free_text_scoring_uses_exact_normalized_match() {
        let question = Question {
            id: "f".into(),
            text: "Which vitamin".into(),
            options: None,
            reference_answer: "Vitamin C".into(),
            split: Split::Test,
        };
        let exact = Prediction {
            question_id: "f".into(),
            response: Some(resp("  vitamin   c ")),
            extracted_choice: None,
        };
        let partial = Prediction {
            question_id: "f".into(),
            response: Some(resp("vitamin c deficiency")),
            extracted_choice: None,
        };
        let report = score(&[exact, partial], &[question], "m").unwrap();
        assert_eq!((report.overall.correct, report.overall.total), (1, 2));
    }

    #[test]
    fn rounding_is_half_up_two_decimals() {
        assert_eq!(round2(51.675), 51.68);
        assert_eq!(round2(0.004), 0.0);
        assert_eq!(round2(0.005), 0.01);
        // 1/3 correct → 33.33, 2/3 → 66.67.
        assert_eq!(SplitScore::from_counts(1, 3).accuracy, 33.33);
        assert_eq!(SplitScore::from_counts(2, 3).accuracy, 66.67);
    }

    #[test]
    fn weighted_total_reproduces_published_overall() {
        let total = weighted_total_percent(&[(68.17, 3000), (71.29, 10887)]);
        assert!((total - 70.62).abs() <= 0.05, "got {total}");
        assert_eq!(weighted_total_percent(&[]), 0.0);
        assert_eq!(weighted_total_percent(&[(50.0, 0)]), 0.0);
    }

    #[test]
    fn report_rendering_is_two_space_delimited() {
        let mut per_split = BTreeMap::new();
        per_split.insert(Split::Train, SplitScore { correct: 1427, total: 3000, accuracy: 47.57 });
        per_split.insert(Split::Test, SplitScore { correct: 5749, total: 10887, accuracy: 52.81 });
        let report = AccuracyReport {
            model_name: "student".into(),
            per_split,
            overall: SplitScore { correct: 7176, total: 13887, accuracy: 51.68 },
        };
        let text = render_report(std::slice::from_ref(&report));
        assert!(text.contains("47.57  52.81  51.68"), "table was:\n{text}");
        assert_eq!(render_report(&[]), "Model  Train  Test  Total\n");
        assert_eq!(render_report(std::slice::from_ref(&report)), render_report(&[report]));
    }

    #[test]
    fn predictions_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.jsonl");
        let rows = vec![
            Prediction {
                question_id: "q1".into(),
                response: Some(TaggedResponse {
                    raw: "<think>t</think>\n<answer>B</answer>".into(),
                    think: "t".into(),
                    answer: "B".into(),
                }),
                extracted_choice: Some("B".into()),
            },
            Prediction { question_id: "q2".into(), response: None, extracted_choice: None },
        ];
        crate::util::write_jsonl(&path, &rows).unwrap();
        let loaded = load_predictions(&path).unwrap();
        assert_eq!(loaded, rows);

        std::fs::write(&path, "{\"question_id\":\"x\"}\nnot json\n").unwrap();
        assert!(matches!(load_predictions(&path), Err(EvalError::SchemaError(_))));
    }
}
