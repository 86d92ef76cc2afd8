//! The single entry point for every model-backed task. Tasks are rendered
//! from prompt templates, sent to a provider, and shape-checked before a
//! result leaves this module.

mod remote;
mod rulebook;
mod shape;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use remote::RemoteProvider;
pub use rulebook::{Category, CueGroup, Rulebook, RulebookProvider};
pub use shape::{parse_output, OutputShape};

/// Placeholder value for inputs that are intentionally empty.
pub const NONE_MARKER: &str = "(none)";
/// Fallback answer when the history cannot answer a question.
pub const NOT_ANSWERABLE: &str = "Question not answerable";
/// Prefix the event selector uses to request a new label.
pub const NEW_LABEL_PREFIX: &str = "NEW:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ScopeInduction,
    ScopeSummary,
    EventSeed,
    EventSelect,
    EntitySeed,
    EntityExtract,
    CorefRewrite,
    SnippetSummary,
    FilterDerive,
    Consolidate,
    AnswerGenerate,
    SurfaceRealize,
    EntailmentCheck,
    AnswerJudge,
}

impl TaskKind {
    pub const ALL: [TaskKind; 14] = [
        TaskKind::ScopeInduction,
        TaskKind::ScopeSummary,
        TaskKind::EventSeed,
        TaskKind::EventSelect,
        TaskKind::EntitySeed,
        TaskKind::EntityExtract,
        TaskKind::CorefRewrite,
        TaskKind::SnippetSummary,
        TaskKind::FilterDerive,
        TaskKind::Consolidate,
        TaskKind::AnswerGenerate,
        TaskKind::SurfaceRealize,
        TaskKind::EntailmentCheck,
        TaskKind::AnswerJudge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::ScopeInduction => "scope_induction",
            TaskKind::ScopeSummary => "scope_summary",
            TaskKind::EventSeed => "event_seed",
            TaskKind::EventSelect => "event_select",
            TaskKind::EntitySeed => "entity_seed",
            TaskKind::EntityExtract => "entity_extract",
            TaskKind::CorefRewrite => "coref_rewrite",
            TaskKind::SnippetSummary => "snippet_summary",
            TaskKind::FilterDerive => "filter_derive",
            TaskKind::Consolidate => "consolidate",
            TaskKind::AnswerGenerate => "answer_generate",
            TaskKind::SurfaceRealize => "surface_realize",
            TaskKind::EntailmentCheck => "entailment_check",
            TaskKind::AnswerJudge => "answer_judge",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            TaskKind::ScopeInduction => include_str!("../../prompts/scope_induction.txt"),
            TaskKind::ScopeSummary => include_str!("../../prompts/scope_summary.txt"),
            TaskKind::EventSeed => include_str!("../../prompts/event_seed.txt"),
            TaskKind::EventSelect => include_str!("../../prompts/event_select.txt"),
            TaskKind::EntitySeed => include_str!("../../prompts/entity_seed.txt"),
            TaskKind::EntityExtract => include_str!("../../prompts/entity_extract.txt"),
            TaskKind::CorefRewrite => include_str!("../../prompts/coref_rewrite.txt"),
            TaskKind::SnippetSummary => include_str!("../../prompts/snippet_summary.txt"),
            TaskKind::FilterDerive => include_str!("../../prompts/filter_derive.txt"),
            TaskKind::Consolidate => include_str!("../../prompts/consolidate.txt"),
            TaskKind::AnswerGenerate => include_str!("../../prompts/answer_generate.txt"),
            TaskKind::SurfaceRealize => include_str!("../../prompts/surface_realize.txt"),
            TaskKind::EntailmentCheck => include_str!("../../prompts/entailment_check.txt"),
            TaskKind::AnswerJudge => include_str!("../../prompts/answer_judge.txt"),
        }
    }

    pub fn shape(self) -> OutputShape {
        match self {
            TaskKind::ScopeInduction | TaskKind::EventSelect => OutputShape::SingleLabel,
            TaskKind::EventSeed => OutputShape::LabelList { allow_empty: false },
            TaskKind::EntitySeed | TaskKind::EntityExtract => OutputShape::LabelList { allow_empty: true },
            TaskKind::ScopeSummary
            | TaskKind::CorefRewrite
            | TaskKind::SnippetSummary
            | TaskKind::AnswerGenerate
            | TaskKind::SurfaceRealize => OutputShape::Text,
            TaskKind::FilterDerive => OutputShape::FilterTriple,
            TaskKind::Consolidate => OutputShape::MergePairs,
            TaskKind::EntailmentCheck => OutputShape::Verdict,
            TaskKind::AnswerJudge => OutputShape::Count,
        }
    }

    /// Input fields the template requires, in order of first use.
    pub fn required_fields(self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        for cap in placeholder_regex().captures_iter(self.template()) {
            let name = cap.get(1).unwrap().as_str();
            if !out.contains(&name) {
                out.push(name);
            }
        }
        out
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn placeholder_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelTask {
    pub task_kind: TaskKind,
    pub inputs: BTreeMap<String, String>,
    pub constraints: OutputShape,
}

impl ModelTask {
    /// Builds a task, rejecting it when a template field is missing.
    pub fn new(task_kind: TaskKind, inputs: BTreeMap<String, String>) -> Result<Self, GatewayError> {
        let missing: Vec<&str> = task_kind
            .required_fields()
            .into_iter()
            .filter(|f| !inputs.contains_key(*f))
            .collect();
        if !missing.is_empty() {
            return Err(GatewayError::TaskRejected(format!(
                "{task_kind} is missing input field(s): {}",
                missing.join(", ")
            )));
        }
        Ok(Self {
            task_kind,
            inputs,
            constraints: task_kind.shape(),
        })
    }

    pub fn with<K: Into<String>, V: Into<String>>(
        task_kind: TaskKind,
        fields: impl IntoIterator<Item = (K, V)>,
    ) -> Result<Self, GatewayError> {
        Self::new(
            task_kind,
            fields.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        )
    }

    pub fn input(&self, name: &str) -> &str {
        self.inputs.get(name).map(String::as_str).unwrap_or("")
    }

    /// Input value with the empty marker mapped to "".
    pub fn input_or_empty(&self, name: &str) -> &str {
        match self.input(name) {
            NONE_MARKER => "",
            v => v,
        }
    }

    pub fn render(&self) -> String {
        placeholder_regex()
            .replace_all(self.task_kind.template(), |caps: &regex::Captures| {
                self.inputs
                    .get(&caps[1])
                    .cloned()
                    .unwrap_or_else(|| caps[0].to_string())
            })
            .into_owned()
    }
}

/// Shape-checked model output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "shape", content = "value", rename_all = "snake_case")]
pub enum Payload {
    Label(String),
    Labels(Vec<String>),
    Text(String),
    Filter {
        scopes: Vec<String>,
        event_types: Vec<String>,
        entity_types: Vec<String>,
    },
    Merges(Vec<(String, String)>),
    Verdict(bool),
    Count(u64),
}

impl Payload {
    pub fn as_label(&self) -> Option<&str> {
        match self {
            Payload::Label(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Payload::Text(s) | Payload::Label(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_labels(&self) -> Option<&[String]> {
        match self {
            Payload::Labels(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Remote,
    #[default]
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResult {
    pub task_kind: TaskKind,
    pub payload: Payload,
    pub provider: ProviderKind,
    pub raw: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("model provider unreachable: {0}")]
    ProviderUnreachable(String),
    #[error("{task_kind} output failed the shape check after {attempts} attempt(s): {last_error}")]
    ShapeViolationExhausted {
        task_kind: TaskKind,
        attempts: u32,
        last_error: String,
        raw: String,
    },
    #[error("task rejected: {0}")]
    TaskRejected(String),
    #[error("gateway configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.to_string(),
            content: content.into(),
        }
    }
}

pub trait ModelProvider: Send + Sync {
    fn kind(&self) -> ProviderKind;
    /// Produces raw text for the task; `messages` carries the rendered prompt
    /// plus any repair turns from earlier attempts.
    fn complete(&self, task: &ModelTask, messages: &[ChatMessage]) -> Result<String, GatewayError>;
}

type ScriptFn = dyn Fn(&ModelTask, usize) -> Result<String, GatewayError> + Send + Sync;

/// Provider backed by a closure over (task, attempt); used for fault
/// injection and forced outputs in tests.
pub struct ScriptedProvider {
    script: Box<ScriptFn>,
}

impl ScriptedProvider {
    pub fn new(script: impl Fn(&ModelTask, usize) -> Result<String, GatewayError> + Send + Sync + 'static) -> Self {
        Self {
            script: Box::new(script),
        }
    }

    pub fn unreachable() -> Self {
        Self::new(|_, _| Err(GatewayError::ProviderUnreachable("scripted outage".into())))
    }
}

impl ModelProvider for ScriptedProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Deterministic
    }

    fn complete(&self, task: &ModelTask, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        let attempt = messages.iter().filter(|m| m.role == "assistant").count();
        (self.script)(task, attempt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub provider: ProviderKind,
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub temperature: f64,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub rulebook_path: Option<PathBuf>,
    pub requests_per_minute: u32,
    pub api_key_env: String,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Deterministic,
            endpoint_url: None,
            model_name: "gpt-5-mini".into(),
            temperature: 1.0,
            timeout_ms: 30_000,
            max_retries: 2,
            rulebook_path: None,
            requests_per_minute: 60,
            api_key_env: "STITCH_API_KEY".into(),
        }
    }
}

impl GatewayConfig {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))
    }
}

pub struct Gateway {
    provider: Arc<dyn ModelProvider>,
    max_retries: u32,
    calls: AtomicU64,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("provider", &self.provider.kind())
            .field("max_retries", &self.max_retries)
            .finish()
    }
}

impl Gateway {
    pub fn new(provider: Arc<dyn ModelProvider>, max_retries: u32) -> Self {
        Self {
            provider,
            max_retries,
            calls: AtomicU64::new(0),
        }
    }

    /// Deterministic gateway over the default rulebook.
    pub fn deterministic() -> Self {
        Self::new(Arc::new(RulebookProvider::new(Rulebook::default())), 2)
    }

    pub fn with_rulebook(rulebook: Rulebook) -> Self {
        Self::new(Arc::new(RulebookProvider::new(rulebook)), 2)
    }

    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        let provider: Arc<dyn ModelProvider> = match cfg.provider {
            ProviderKind::Deterministic => {
                let rulebook = match &cfg.rulebook_path {
                    Some(p) => Rulebook::load(p)?,
                    None => Rulebook::default(),
                };
                Arc::new(RulebookProvider::new(rulebook))
            }
            ProviderKind::Remote => Arc::new(RemoteProvider::from_config(cfg)?),
        };
        Ok(Self::new(provider, cfg.max_retries))
    }

    pub fn provider_kind(&self) -> ProviderKind {
        self.provider.kind()
    }

    /// Provider calls issued so far (including repair attempts).
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn run_task(&self, task: &ModelTask) -> Result<ModelResult, GatewayError> {
        let mut messages = vec![
            ChatMessage::new(
                "system",
                "You are a careful annotator. Follow the output format exactly.",
            ),
            ChatMessage::new("user", task.render()),
        ];
        let mut last_error = String::new();
        let mut last_raw = String::new();
        for attempt in 0..=self.max_retries {
            self.calls.fetch_add(1, Ordering::Relaxed);
            let raw = self.provider.complete(task, &messages)?;
            match parse_output(task.constraints, &raw) {
                Ok(payload) => {
                    return Ok(ModelResult {
                        task_kind: task.task_kind,
                        payload,
                        provider: self.provider.kind(),
                        raw,
                        attempts: attempt + 1,
                    })
                }
                Err(e) => {
                    tracing::debug!(task = %task.task_kind, attempt, error = %e, "shape violation");
                    messages.push(ChatMessage::new("assistant", raw.clone()));
                    messages.push(ChatMessage::new(
                        "user",
                        format!(
                            "Your previous answer could not be used: {e}. Reply again with only {}.",
                            task.constraints.describe()
                        ),
                    ));
                    last_error = e;
                    last_raw = raw;
                }
            }
        }
        Err(GatewayError::ShapeViolationExhausted {
            task_kind: task.task_kind,
            attempts: self.max_retries + 1,
            last_error,
            raw: last_raw,
        })
    }
}

/// Formats items as a bulleted list, or the empty marker.
pub fn bullet_list<S: AsRef<str>>(items: &[S]) -> String {
    if items.is_empty() {
        return NONE_MARKER.to_string();
    }
    items
        .iter()
        .map(|s| format!("- {}", s.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn parse_bullets(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| l.trim().strip_prefix("- "))
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// One line of history as handed to model tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextLine {
    pub step_index: u64,
    pub role: String,
    pub scope: String,
    pub event: String,
    pub text: String,
}

impl ContextLine {
    pub fn render(&self) -> String {
        format!(
            "[{} | {} | {} | {}] {}",
            self.step_index,
            self.role,
            self.scope,
            self.event,
            crate::text::collapse_whitespace(&self.text)
        )
    }

    pub fn parse(line: &str) -> Option<ContextLine> {
        let line = line.trim();
        let rest = line.strip_prefix('[')?;
        let close = rest.find(']')?;
        let header: Vec<&str> = rest[..close].split(" | ").collect();
        let text = rest[close + 1..].trim().to_string();
        let step_index = header.first()?.trim().parse().ok()?;
        let get = |i: usize| header.get(i).map(|s| s.trim().to_string()).unwrap_or_default();
        Some(ContextLine {
            step_index,
            role: get(1),
            scope: get(2),
            event: get(3),
            text,
        })
    }
}

pub fn render_context(lines: &[ContextLine]) -> String {
    if lines.is_empty() {
        return NONE_MARKER.to_string();
    }
    lines.iter().map(ContextLine::render).collect::<Vec<_>>().join("\n")
}

pub fn parse_context(text: &str) -> Vec<ContextLine> {
    text.lines().filter_map(ContextLine::parse).collect()
}
