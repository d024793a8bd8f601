//! Shared end-to-end fixture: a 20-question set, three scripted mock
//! endpoints (teacher, student, judge), and a config pointing at them, so
//! tests can drive all six stages and compare against the script.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use selfcrit::config::{PipelineConfig, RunManifest};
use selfcrit::mock::{MockLlm, MockMatcher, MockRule};
use selfcrit::pipeline::{question_seed, run_stage, Stage};
use selfcrit::util::file_sha256;

pub const FIXTURE_SEED: u64 = 41;
pub const SAMPLES_PER_QUESTION: u32 = 4;

/// What the mocks are scripted to do for one student sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleScript {
    /// Well-formed sample; judge says 1.
    Correct,
    /// Well-formed sample; judge says 2.
    Incorrect,
    /// Student returns untagged text; the sample never reaches the judge.
    Untagged,
    /// Well-formed sample, but the judge answers in prose on every attempt.
    JudgeProse,
}

use SampleScript::{Correct, Incorrect, JudgeProse, Untagged};

#[derive(Debug, Clone)]
pub struct FixtureQuestion {
    pub id: String,
    pub text: String,
    pub answer: String,
    /// Teacher replies with a chain whose answer disagrees with the
    /// reference, so stage 1 rejects the question with AnswerMismatch.
    pub teacher_mismatch: bool,
    pub samples: [SampleScript; 4],
}

impl FixtureQuestion {
    pub fn correct_indices(&self) -> Vec<u32> {
        (0..4).filter(|&i| self.samples[i as usize] == Correct).collect()
    }

    pub fn incorrect_indices(&self) -> Vec<u32> {
        (0..4).filter(|&i| self.samples[i as usize] == Incorrect).collect()
    }

    pub fn excluded_indices(&self) -> Vec<u32> {
        (0..4)
            .filter(|&i| matches!(self.samples[i as usize], Untagged | JudgeProse))
            .collect()
    }
}

/// The scripted verdict table. Twenty questions, four samples each:
/// a spread of partition shapes including all-correct (no pairs),
/// all-incorrect (no pairs), one untagged student sample, and one sample
/// whose judge output never parses.
pub fn fixture_questions() -> Vec<FixtureQuestion> {
    let script: [(bool, [SampleScript; 4]); 20] = [
        (false, [Correct, Correct, Correct, Incorrect]),   // q01
        (false, [Correct, Correct, Correct, Incorrect]),   // q02
        (false, [Correct, Correct, Correct, Incorrect]),   // q03
        (false, [Correct, Correct, Correct, Incorrect]),   // q04
        (false, [Correct, Correct, Correct, Incorrect]),   // q05
        (false, [Correct, Correct, Incorrect, Incorrect]), // q06
        (false, [Correct, Correct, Incorrect, Incorrect]), // q07
        (false, [Correct, Correct, Incorrect, Incorrect]), // q08
        (false, [Correct, Correct, Incorrect, Incorrect]), // q09
        (false, [Correct, Correct, Incorrect, Incorrect]), // q10
        (false, [Correct, Incorrect, Incorrect, Incorrect]), // q11
        (false, [Correct, Incorrect, Incorrect, Incorrect]), // q12
        (false, [Correct, Incorrect, Incorrect, Incorrect]), // q13
        (false, [Correct, Incorrect, Incorrect, Incorrect]), // q14
        (false, [Correct, Correct, Correct, Correct]),     // q15: no pairs
        (false, [Incorrect, Incorrect, Incorrect, Incorrect]), // q16: no pairs
        (false, [Correct, Correct, Incorrect, Untagged]),  // q17
        (false, [Correct, Correct, Incorrect, JudgeProse]), // q18
        (true, [Correct, Correct, Incorrect, Incorrect]),  // q19: sft reject
        (true, [Correct, Correct, Incorrect, Incorrect]),  // q20: sft reject
    ];
    script
        .iter()
        .enumerate()
        .map(|(idx, (teacher_mismatch, samples))| {
            let n = idx + 1;
            FixtureQuestion {
                id: format!("q{n:02}"),
                text: format!(
                    "What maintenance therapy is indicated for presentation code condition {n:02} in adult patients"
                ),
                answer: format!("zybrafin-{n:02} infusion protocol"),
                teacher_mismatch: *teacher_mismatch,
                samples: *samples,
            }
        })
        .collect()
}

/// Σ|A⁺|·|A⁻| over the script — the independent pair counter.
pub fn expected_cartesian_pairs(questions: &[FixtureQuestion]) -> usize {
    questions
        .iter()
        .map(|q| q.correct_indices().len() * q.incorrect_indices().len())
        .sum()
}

pub fn expected_sft_rejects(questions: &[FixtureQuestion]) -> usize {
    questions.iter().filter(|q| q.teacher_mismatch).count()
}

fn tagged(think: &str, answer: &str) -> String {
    format!("<think>{think}</think>\n<answer>{answer}</answer>")
}

fn sample_marker(question_no: usize, sample: u32) -> String {
    format!("sample-{question_no:02}-{sample}")
}

fn teacher_rules(questions: &[FixtureQuestion]) -> Vec<MockRule> {
    questions
        .iter()
        .enumerate()
        .map(|(idx, q)| {
            let n = idx + 1;
            let text = if q.teacher_mismatch {
                tagged(
                    &format!("weighing the findings for condition {n:02}"),
                    "an entirely unrelated remedy is best",
                )
            } else {
                tagged(
                    &format!("the findings in condition {n:02} point at one regimen"),
                    &format!("the indicated regimen is the {}", q.answer),
                )
            };
            MockRule::reply(
                format!("teacher-{}", q.id),
                MockMatcher::prompt(format!("This question's answer is: {}", q.answer)),
                text,
            )
        })
        .collect()
}

fn student_rules(questions: &[FixtureQuestion]) -> Vec<MockRule> {
    let mut rules = Vec::new();
    for (idx, q) in questions.iter().enumerate() {
        let n = idx + 1;
        let base = question_seed(FIXTURE_SEED, &q.id);
        for sample in 0..SAMPLES_PER_QUESTION {
            let text = match q.samples[sample as usize] {
                Untagged => "cannot structure the response in the requested format".to_string(),
                _ => tagged(
                    &format!("weighing option {sample} for condition {n:02}"),
                    &format!(
                        "{} conclusion: administer plan variant {sample}",
                        sample_marker(n, sample)
                    ),
                ),
            };
            rules.push(MockRule::reply(
                format!("student-{}-{sample}", q.id),
                MockMatcher::prompt(format!("condition {n:02}"))
                    .with_seed(base.wrapping_add(u64::from(sample))),
                text,
            ));
        }
    }
    rules
}

fn judge_rules(questions: &[FixtureQuestion]) -> Vec<MockRule> {
    let mut rules = Vec::new();
    for (idx, q) in questions.iter().enumerate() {
        let n = idx + 1;
        for sample in 0..SAMPLES_PER_QUESTION {
            let verdict = match q.samples[sample as usize] {
                Correct => "1",
                Incorrect => "2",
                JudgeProse => "the candidate appears to be broadly reasonable",
                Untagged => continue, // never judged
            };
            rules.push(MockRule::reply(
                format!("judge-{}-{sample}", q.id),
                MockMatcher::prompt(sample_marker(n, sample)),
                verdict,
            ));
        }
    }
    rules
}

pub struct FixtureServers {
    pub teacher: MockLlm,
    pub student: MockLlm,
    pub judge: MockLlm,
}

impl FixtureServers {
    pub async fn spawn(questions: &[FixtureQuestion]) -> Self {
        Self {
            teacher: MockLlm::spawn(teacher_rules(questions)).await,
            student: MockLlm::spawn(student_rules(questions)).await,
            judge: MockLlm::spawn(judge_rules(questions)).await,
        }
    }

    pub fn total_requests(&self) -> u64 {
        self.teacher.total_requests()
            + self.student.total_requests()
            + self.judge.total_requests()
    }
}

pub fn write_questions_file(path: &Path, questions: &[FixtureQuestion]) {
    let mut body = String::new();
    for q in questions {
        let row = serde_json::json!({
            "id": q.id,
            "text": q.text,
            "answer": q.answer,
            "split": "train",
        });
        body.push_str(&row.to_string());
        body.push('\n');
    }
    fs::write(path, body).expect("write questions fixture");
}

pub fn write_config_file(
    dir: &Path,
    servers: &FixtureServers,
    out_name: &str,
    max_failure_rate: f64,
) -> PathBuf {
    let config = format!(
        r#"random_seed = {FIXTURE_SEED}
cache_dir = "cache"
output_dir = "{out_name}"
parallelism = 4
max_failure_rate = {max_failure_rate}

[dataset]
questions = "questions.jsonl"

[endpoints.teacher]
base_url = "{teacher}"
model = "mock-teacher"
rate_limit_rps = 1000.0

[endpoints.student]
base_url = "{student}"
model = "mock-student"
rate_limit_rps = 1000.0

[endpoints.judge]
base_url = "{judge}"
model = "mock-judge"
rate_limit_rps = 1000.0
"#,
        teacher = servers.teacher.base_url(),
        student = servers.student.base_url(),
        judge = servers.judge.base_url(),
    );
    let path = dir.join("pipeline.toml");
    fs::write(&path, config).expect("write config fixture");
    path
}

pub struct FixtureRun {
    pub dir: tempfile::TempDir,
    pub questions: Vec<FixtureQuestion>,
    pub servers: FixtureServers,
    pub config: PipelineConfig,
    pub config_path: PathBuf,
    /// Manifests from the first full pass, keyed by stage name.
    pub manifests: BTreeMap<String, RunManifest>,
}

impl FixtureRun {
    pub fn out_dir(&self) -> PathBuf {
        self.config.output_dir.clone()
    }

    pub fn out_file(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    /// Digests of every data output of the six stages, keyed by file name.
    pub fn output_digests(&self) -> BTreeMap<String, String> {
        use selfcrit::pipeline::*;
        let names = [
            SFT_TRAINER_FILE,
            SFT_SIDECAR_FILE,
            SFT_REJECTS_FILE,
            SAMPLES_FILE,
            JUDGMENTS_FILE,
            JUDGE_REJECTS_FILE,
            COR_ERR_FILE,
            PAIRS_FILE,
            PAIR_STATS_FILE,
            DPO_CHECK_FILE,
            PREDICTIONS_FILE,
            EVAL_REPORT_JSON,
            EVAL_REPORT_TXT,
        ];
        names
            .iter()
            .map(|name| {
                let digest = file_sha256(&self.out_file(name)).expect("output exists");
                (name.to_string(), digest)
            })
            .collect()
    }

    pub async fn run(&self, stage: Stage) -> RunManifest {
        run_stage(&self.config, stage, false)
            .await
            .unwrap_or_else(|e| panic!("stage {} failed: {e}", stage.name()))
    }
}

/// Spins up the servers, writes the fixture files, and drives all six
/// stages once. Panics on any stage failure.
pub async fn run_full_pipeline() -> FixtureRun {
    let questions = fixture_questions();
    let servers = FixtureServers::spawn(&questions).await;
    let dir = tempfile::tempdir().expect("tempdir");
    write_questions_file(&dir.path().join("questions.jsonl"), &questions);
    let config_path = write_config_file(dir.path(), &servers, "out", 0.2);
    let config = PipelineConfig::load(&config_path).expect("fixture config loads");

    let mut run = FixtureRun {
        dir,
        questions,
        servers,
        config,
        config_path,
        manifests: BTreeMap::new(),
    };
    for stage in [
        Stage::BuildSft,
        Stage::Generate,
        Stage::Judge,
        Stage::MakePairs,
        Stage::DpoCheck,
        Stage::Evaluate,
    ] {
        let manifest = run.run(stage).await;
        run.manifests.insert(stage.name().to_string(), manifest);
    }
    run
}
