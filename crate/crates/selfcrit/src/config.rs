//! Pipeline configuration: one TOML file drives every stage, with defaults
//! for everything the run does not pin down.
//!
//! Relative paths are resolved against the config file's directory, so a
//! config travels with its data. Secrets never appear inline — endpoint
//! entries name an environment variable instead. The judge endpoint may
//! alias the teacher (`alias = "teacher"`), matching the usual setup where
//! the teacher model also judges.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{BackoffPolicy, EndpointConfig, Role};
use crate::pairs::{JudgeOptions, JudgeScope, JudgeStrictness, PairStrategy, SampleOptions};
use crate::sft::{AnswerMatch, QuestionFormat, SftBuildOptions, Split};
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config does not parse: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_parallelism() -> usize {
    4
}
fn default_failure_rate() -> f64 {
    0.2
}
fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub random_seed: u64,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Bounded fan-out used by every stage that talks to an endpoint.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// A stage aborts (exit 4) when more than this fraction of its items fail.
    #[serde(default = "default_failure_rate")]
    pub max_failure_rate: f64,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub templates: TemplatesSection,
    pub endpoints: EndpointsSection,
    #[serde(default)]
    pub sft: SftSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub judge: JudgeSection,
    #[serde(default)]
    pub dpo: DpoSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub questions: PathBuf,
    #[serde(default = "default_format")]
    pub format: QuestionFormat,
}

fn default_format() -> QuestionFormat {
    QuestionFormat::Jsonl
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatesSection {
    /// Template manifest path; the bundled templates are used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointsSection {
    pub teacher: EndpointEntry,
    pub student: EndpointEntry,
    pub judge: EndpointEntry,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_rate_limit() -> f64 {
    8.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointEntry {
    /// "teacher" makes this role reuse the teacher endpoint (judge only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Environment variable holding the API key; the key itself never
    /// appears in a config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_rate_limit")]
    pub rate_limit_rps: f64,
    #[serde(default)]
    pub backoff: BackoffPolicy,
}

impl EndpointEntry {
    fn resolve(&self, role: Role) -> Result<EndpointConfig, ConfigError> {
        let base_url = self.base_url.clone().ok_or_else(|| {
            ConfigError::Invalid(format!("endpoint {role:?} has no base_url"))
        })?;
        let model_id = self
            .model
            .clone()
            .ok_or_else(|| ConfigError::Invalid(format!("endpoint {role:?} has no model")))?;
        let endpoint = EndpointConfig {
            role,
            base_url,
            model_id,
            api_key_env: self.api_key_env.clone(),
            timeout_secs: self.timeout_secs,
            max_retries: self.max_retries,
            rate_limit_rps: self.rate_limit_rps,
            backoff: self.backoff,
        };
        endpoint.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(endpoint)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftSection {
    #[serde(default = "default_sft_temperature")]
    pub temperature: f64,
    #[serde(default = "default_long_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_parse_retries")]
    pub parse_retries: u32,
    #[serde(default = "default_answer_match")]
    pub answer_match: AnswerMatch,
    /// Which split stage 1 distills; absent means all questions.
    #[serde(default = "default_train_split", skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

fn default_sft_temperature() -> f64 {
    0.7
}
fn default_long_max_tokens() -> u32 {
    4096
}
fn default_parse_retries() -> u32 {
    2
}
fn default_answer_match() -> AnswerMatch {
    AnswerMatch::NormalizedSubstring
}
fn default_train_split() -> Option<Split> {
    Some(Split::Train)
}

impl Default for SftSection {
    fn default() -> Self {
        Self {
            temperature: default_sft_temperature(),
            max_tokens: default_long_max_tokens(),
            parse_retries: default_parse_retries(),
            answer_match: default_answer_match(),
            split: default_train_split(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyName {
    CartesianAll,
    CappedRoundRobin,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    /// Answers drawn per question; at least 2, or no pairs can form.
    #[serde(default = "default_n")]
    pub n: u32,
    #[serde(default = "default_sampling_temperature")]
    pub temperature: f64,
    #[serde(default = "default_long_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_strategy")]
    pub strategy: StrategyName,
    /// Pair cap; required by capped-round-robin, ignored otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<usize>,
    /// Which split stage 2 samples from; absent means all questions.
    #[serde(default = "default_train_split", skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

fn default_n() -> u32 {
    4
}
fn default_sampling_temperature() -> f64 {
    0.9
}
fn default_strategy() -> StrategyName {
    StrategyName::CartesianAll
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            n: default_n(),
            temperature: default_sampling_temperature(),
            max_tokens: default_long_max_tokens(),
            strategy: default_strategy(),
            cap: None,
            split: default_train_split(),
        }
    }
}

impl SamplingSection {
    pub fn strategy(&self) -> Result<PairStrategy, ConfigError> {
        match (self.strategy, self.cap) {
            (StrategyName::CartesianAll, _) => Ok(PairStrategy::CartesianAll),
            (StrategyName::CappedRoundRobin, Some(cap)) => {
                Ok(PairStrategy::CappedRoundRobin(cap))
            }
            (StrategyName::CappedRoundRobin, None) => Err(ConfigError::Invalid(
                "sampling.strategy = \"capped-round-robin\" needs sampling.cap".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeSection {
    #[serde(default = "default_strictness")]
    pub strictness: JudgeStrictness,
    #[serde(default = "default_scope")]
    pub scope: JudgeScope,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_judge_max_tokens")]
    pub max_tokens: u32,
}

fn default_strictness() -> JudgeStrictness {
    JudgeStrictness::Lenient
}
fn default_scope() -> JudgeScope {
    JudgeScope::FullResponse
}
fn default_judge_max_tokens() -> u32 {
    4
}

impl Default for JudgeSection {
    fn default() -> Self {
        Self {
            strictness: default_strictness(),
            scope: default_scope(),
            temperature: 0.0,
            max_tokens: default_judge_max_tokens(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoSection {
    /// β for the exported pair semantics and the toy verification battery.
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    0.1
}

impl Default for DpoSection {
    fn default() -> Self {
        Self { beta: default_beta() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Question file to score against; defaults to dataset.questions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub questions: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub format: QuestionFormat,
    /// When set, score this predictions file instead of querying the
    /// student endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    /// Report row label; defaults to the student endpoint's model id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_eval_max_tokens")]
    pub max_tokens: u32,
    /// Restrict scoring to one split; absent scores every question asked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

fn default_eval_max_tokens() -> u32 {
    1024
}

impl PipelineConfig {
    /// Parses a TOML config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Unreadable {
            path: path.display().to_string(),
            source,
        })?;
        let mut config: PipelineConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        config.check()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        anchor(&mut self.cache_dir);
        anchor(&mut self.output_dir);
        anchor(&mut self.dataset.questions);
        if let Some(manifest) = &mut self.templates.manifest {
            anchor(manifest);
        }
        if let Some(questions) = &mut self.eval.questions {
            anchor(questions);
        }
        if let Some(predictions) = &mut self.eval.predictions {
            anchor(predictions);
        }
    }

    /// Structural validation; per-stage file existence is checked by the
    /// stage runner so unrelated stages are not blocked.
    pub fn check(&self) -> Result<(), ConfigError> {
        if self.sampling.n < 2 {
            return Err(ConfigError::Invalid(format!(
                "sampling.n must be at least 2, got {}",
                self.sampling.n
            )));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return Err(ConfigError::Invalid(format!(
                "max_failure_rate must be within [0, 1], got {}",
                self.max_failure_rate
            )));
        }
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        if !(self.dpo.beta.is_finite() && self.dpo.beta >= 0.0) {
            return Err(ConfigError::Invalid(format!(
                "dpo.beta must be finite and non-negative, got {}",
                self.dpo.beta
            )));
        }
        self.sampling.strategy()?;
        for (name, entry) in
            [("teacher", &self.endpoints.teacher), ("student", &self.endpoints.student)]
        {
            if entry.alias.is_some() {
                return Err(ConfigError::Invalid(format!(
                    "endpoints.{name} cannot alias another endpoint; only the judge may"
                )));
            }
        }
        if let Some(alias) = &self.endpoints.judge.alias {
            if alias != "teacher" {
                return Err(ConfigError::Invalid(format!(
                    "endpoints.judge.alias must be \"teacher\", got {alias:?}"
                )));
            }
            if self.endpoints.judge.base_url.is_some() || self.endpoints.judge.model.is_some() {
                return Err(ConfigError::Invalid(
                    "endpoints.judge sets alias and its own base_url/model; pick one".into(),
                ));
            }
        }
        self.endpoint(Role::Teacher)?;
        self.endpoint(Role::Student)?;
        self.endpoint(Role::Judge)?;
        Ok(())
    }

    /// Fully resolved endpoint for a role, with the judge-aliases-teacher
    /// rule applied.
    pub fn endpoint(&self, role: Role) -> Result<EndpointConfig, ConfigError> {
        match role {
            Role::Teacher => self.endpoints.teacher.resolve(Role::Teacher),
            Role::Student => self.endpoints.student.resolve(Role::Student),
            Role::Judge => {
                if self.endpoints.judge.alias.as_deref() == Some("teacher") {
                    let mut endpoint = self.endpoints.teacher.resolve(Role::Judge)?;
                    endpoint.role = Role::Judge;
                    Ok(endpoint)
                } else {
                    self.endpoints.judge.resolve(Role::Judge)
                }
            }
        }
    }

    /// The resolved configuration rendered back as TOML — what
    /// `--print-config` shows and what the config digest covers.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("resolved config serializes")
    }

    /// Digest of the resolved configuration, recorded in run manifests.
    pub fn digest(&self) -> String {
        sha256_hex(self.resolved_toml().as_bytes())
    }

    pub fn sft_options(&self) -> SftBuildOptions {
        SftBuildOptions {
            temperature: self.sft.temperature,
            max_tokens: self.sft.max_tokens,
            parse_retries: self.sft.parse_retries,
            parallelism: self.parallelism,
            answer_match: self.sft.answer_match,
            seed_base: Some(self.random_seed),
        }
    }

    pub fn sample_options(&self, seed_base: u64) -> SampleOptions {
        SampleOptions {
            temperature: self.sampling.temperature,
            max_tokens: self.sampling.max_tokens,
            parallelism: self.parallelism,
            seed_base: Some(seed_base),
        }
    }

    pub fn judge_options(&self, force_strict: bool) -> JudgeOptions {
        JudgeOptions {
            strictness: if force_strict {
                JudgeStrictness::Strict
            } else {
                self.judge.strictness
            },
            scope: self.judge.scope,
            temperature: self.judge.temperature,
            max_tokens: self.judge.max_tokens,
            parallelism: self.parallelism,
        }
    }
}

/// Written at the end of every stage: enough to audit what ran, over which
/// inputs, producing which bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub stage: String,
    pub config_sha256: String,
    pub started_at: chrono::DateTime<chrono::Utc>,
    pub finished_at: chrono::DateTime<chrono::Utc>,
    /// Input path → content digest.
    pub inputs: BTreeMap<String, String>,
    /// Output path → content digest.
    pub outputs: BTreeMap<String, String>,
    pub counts: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut body = serde_json::to_string_pretty(self).expect("manifest serializes");
        body.push('\n');
        crate::util::atomic_write(path, body.as_bytes())
    }
}
