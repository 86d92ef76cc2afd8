//! Online annotation pipeline: scope induction, event labeling over a
//! dynamic vocabulary, entity-type extraction, reference rewriting and
//! snippet construction, with seeding and consolidation on step counters.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, Embedder, EmbeddingError, EmbeddingIndex, EmbeddingRecord};
use crate::gateway::{
    bullet_list, render_context, ContextLine, Gateway, ModelTask, Payload, TaskKind,
    NEW_LABEL_PREFIX, NONE_MARKER,
};
use crate::model::{
    ContextualIntent, InvariantViolation, LabelKind, LabelVocabulary, MemorySnippet, ScopeNote,
    ScopeState, TrajectoryStep, DEFAULT_HISTORY_WINDOW, DEFAULT_MAX_SUMMARY_CHARS, UNLABELED,
    UNSEEDED,
};
use crate::store::{label_embedding_id, snippet_id, Backend, SessionState, StoreError};
use crate::text::{clean_label, find_phrase, first_sentence, normalize_label, truncate_chars};

/// Scope used when induction fails before any scope exists.
pub const FALLBACK_SCOPE: &str = "General Discussion";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("out-of-order step: expected {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("invalid step: {0}")]
    InvalidStep(#[from] InvariantViolation),
    #[error("seeding failed: {0}")]
    SeedingFailed(String),
    #[error("invalid ingestion config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(StoreError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

impl From<StoreError> for IngestError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::OutOfOrder { expected, got } => IngestError::OutOfOrder { expected, got },
            other => IngestError::Store(other),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteMode {
    /// Ask the gateway to rewrite triggered steps.
    #[default]
    Model,
    /// Store action text unchanged.
    Disabled,
    /// Apply a supplied mention -> canonical name map (evaluation upper bound).
    Oracle,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsolidationMode {
    /// Merge label pairs whose embeddings reach the similarity threshold.
    #[default]
    Embedding,
    /// Ask the gateway which labels are near-synonyms.
    Gateway,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestionConfig {
    pub n_start: usize,
    pub k_update: usize,
    pub k_event: usize,
    pub history_window: usize,
    pub consolidation_similarity_threshold: f64,
    pub max_summary_chars: usize,
    pub max_scope_summary_chars: usize,
    pub rewrite_mode: RewriteMode,
    /// Run the rewrite task on every step instead of only triggered ones.
    pub rewrite_every_step: bool,
    pub trigger_pronouns: Vec<String>,
    pub consolidation_mode: ConsolidationMode,
    pub dataset_description: String,
}

impl Default for IngestionConfig {
    fn default() -> Self {
        Self {
            n_start: 50,
            k_update: 50,
            k_event: 5,
            history_window: DEFAULT_HISTORY_WINDOW,
            consolidation_similarity_threshold: 0.90,
            max_summary_chars: DEFAULT_MAX_SUMMARY_CHARS,
            max_scope_summary_chars: 1000,
            rewrite_mode: RewriteMode::Model,
            rewrite_every_step: false,
            trigger_pronouns: ["it", "its", "this one", "that one", "the former", "the latter"]
                .map(String::from)
                .to_vec(),
            consolidation_mode: ConsolidationMode::Embedding,
            dataset_description: "A long goal-oriented conversation between a user and an assistant.".into(),
        }
    }
}

impl IngestionConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        let positive = [
            ("n_start", self.n_start),
            ("k_update", self.k_update),
            ("k_event", self.k_event),
            ("history_window", self.history_window),
            ("max_summary_chars", self.max_summary_chars),
            ("max_scope_summary_chars", self.max_scope_summary_chars),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(IngestError::InvalidConfig(format!("{name} must be positive")));
        }
        let t = self.consolidation_similarity_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(IngestError::InvalidConfig(format!(
                "consolidation_similarity_threshold {t} outside (0, 1]"
            )));
        }
        Ok(())
    }
}

fn ordinal_trigger() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\bthe\s+(first|second|third|fourth|fifth|sixth|seventh|eighth|ninth|tenth|last|\d+(?:st|nd|rd|th))\s+[a-z]+",
        )
        .unwrap()
    })
}

/// True when the text contains a configured pronoun or an ordinal reference.
pub fn needs_rewrite(text: &str, pronouns: &[String]) -> bool {
    let pronoun_hit = pronouns.iter().any(|p| {
        let mut from = 0;
        while let Some(rel) = find_phrase(&text[from..], p) {
            let end = from + rel + p.len();
            // "it's" is a contraction, not a reference.
            if !text[end..].starts_with('\'') && !text[end..].starts_with('’') {
                return true;
            }
            from = end;
        }
        false
    });
    pronoun_hit || ordinal_trigger().is_match(text)
}

fn snippet_line(s: &MemorySnippet) -> ContextLine {
    ContextLine {
        step_index: s.step_index(),
        role: s.step.role.clone(),
        scope: s.intent.scope.clone(),
        event: s.intent.event_type.clone(),
        text: s.rewritten_text.clone(),
    }
}

fn step_line(step: &TrajectoryStep, scope: &str, event: &str) -> ContextLine {
    ContextLine {
        step_index: step.step_index,
        role: step.role.clone(),
        scope: scope.to_string(),
        event: event.to_string(),
        text: step.action_text.clone(),
    }
}

fn embed_record(embedder: &dyn Embedder, id: String, text: &str) -> Result<EmbeddingRecord, EmbeddingError> {
    Ok(EmbeddingRecord {
        id,
        text: text.to_string(),
        vector: embedder.embed(text)?,
    })
}

/// Induces the scope of `step`; inherits the prior scope when the gateway
/// fails. Registers the result in the inventory and makes it current.
pub fn induce_scope(gateway: &Gateway, step: &TrajectoryStep, state: &mut ScopeState, history: &[ContextLine]) -> String {
    let previous = state.current_scope.clone();
    let task = ModelTask::with(
        TaskKind::ScopeInduction,
        [
            ("previous_scope", previous.clone().unwrap_or_else(|| NONE_MARKER.into())),
            ("scope_summary", non_empty_or_marker(state.current_summary())),
            ("existing_scopes", bullet_list(&state.scope_inventory)),
            ("history", render_context(history)),
            ("role", step.role.clone()),
            ("action_text", step.action_text.clone()),
        ],
    );
    let proposed = task.and_then(|t| gateway.run_task(&t)).map(|r| r.payload);
    let label = match proposed {
        Ok(Payload::Label(l)) => Some(l),
        Ok(other) => {
            tracing::warn!(step = step.step_index, ?other, "scope induction returned unexpected payload");
            None
        }
        Err(e) => {
            tracing::warn!(step = step.step_index, error = %e, "scope induction failed, inheriting scope");
            None
        }
    };
    let label = label
        .and_then(|l| state.register(&l))
        .or(previous)
        .unwrap_or_else(|| state.register(FALLBACK_SCOPE).expect("fallback scope is non-empty"));
    state.current_scope = Some(label.clone());
    label
}

fn non_empty_or_marker(s: &str) -> String {
    if s.trim().is_empty() {
        NONE_MARKER.to_string()
    } else {
        s.to_string()
    }
}

/// Folds `step` into the running summary of the current scope. Other
/// scopes' summaries are untouched; failures leave the summary unchanged.
pub fn update_scope_summary(gateway: &Gateway, state: &mut ScopeState, step: &TrajectoryStep, max_chars: usize) {
    let Some(scope) = state.current_scope.clone() else {
        return;
    };
    let previous = state.summaries.get(&scope).cloned().unwrap_or_default();
    let task = ModelTask::with(
        TaskKind::ScopeSummary,
        [
            ("scope", scope.clone()),
            ("previous_summary", non_empty_or_marker(&previous)),
            ("action_text", step.action_text.clone()),
            ("max_chars", max_chars.to_string()),
        ],
    );
    match task.and_then(|t| gateway.run_task(&t)) {
        Ok(r) => {
            if let Some(text) = r.payload.as_text() {
                state.summaries.insert(scope, truncate_chars(text, max_chars));
            }
        }
        Err(e) => tracing::warn!(step = step.step_index, error = %e, "scope summary update failed"),
    }
}

/// Builds the initial event vocabulary from the opening steps.
pub fn seed_event_vocabulary(gateway: &Gateway, first_steps: &[TrajectoryStep], at_step: u64) -> Result<LabelVocabulary, IngestError> {
    if first_steps.is_empty() {
        return Err(IngestError::SeedingFailed("no steps to seed from".into()));
    }
    let lines: Vec<ContextLine> = first_steps.iter().map(|s| step_line(s, "", "")).collect();
    let task = ModelTask::with(TaskKind::EventSeed, [("steps", render_context(&lines))])
        .map_err(|e| IngestError::SeedingFailed(e.to_string()))?;
    let result = gateway.run_task(&task).map_err(|e| IngestError::SeedingFailed(e.to_string()))?;
    let labels = result.payload.as_labels().unwrap_or_default().to_vec();
    let mut vocab = LabelVocabulary::new(LabelKind::Event);
    for l in labels {
        vocab.insert(&l, at_step).map_err(|e| IngestError::SeedingFailed(e.to_string()))?;
    }
    if vocab.is_empty() {
        return Err(IngestError::SeedingFailed("seed vocabulary is empty".into()));
    }
    Ok(vocab)
}

/// Builds the initial entity-type vocabulary from a sample of steps plus the
/// dataset description. An empty result is allowed.
pub fn seed_entity_vocabulary(
    gateway: &Gateway,
    sample: &[TrajectoryStep],
    dataset_description: &str,
    at_step: u64,
) -> Result<LabelVocabulary, IngestError> {
    if sample.is_empty() {
        return Err(IngestError::SeedingFailed("no steps to seed from".into()));
    }
    let lines: Vec<ContextLine> = sample.iter().map(|s| step_line(s, "", "")).collect();
    let task = ModelTask::with(
        TaskKind::EntitySeed,
        [
            ("dataset_description", dataset_description.to_string()),
            ("steps", render_context(&lines)),
        ],
    )
    .map_err(|e| IngestError::SeedingFailed(e.to_string()))?;
    let result = gateway.run_task(&task).map_err(|e| IngestError::SeedingFailed(e.to_string()))?;
    let mut vocab = LabelVocabulary::new(LabelKind::EntityType);
    for l in result.payload.as_labels().unwrap_or_default() {
        vocab.insert(l, at_step).map_err(|e| IngestError::SeedingFailed(e.to_string()))?;
    }
    Ok(vocab)
}

/// Vectors for every label of `vocab`, reusing `index` where present.
fn label_index(
    vocab: &LabelVocabulary,
    index: &EmbeddingIndex,
    embedder: &dyn Embedder,
    fresh: &mut Vec<EmbeddingRecord>,
) -> Result<EmbeddingIndex, EmbeddingError> {
    let mut out = EmbeddingIndex::new();
    for label in vocab.labels() {
        let id = label_embedding_id(vocab.kind, label);
        let rec = match index.get(&id).or_else(|| fresh.iter().find(|r| r.id == id)) {
            Some(r) => r.clone(),
            None => {
                let r = embed_record(embedder, id, label)?;
                fresh.push(r.clone());
                r
            }
        };
        out.insert(rec)?;
    }
    Ok(out)
}

/// Selects (or creates) the event label of `text`. Returns the stored label
/// and whether it was created; falls back to the unlabeled sentinel when
/// the gateway fails.
pub fn label_event(
    gateway: &Gateway,
    embedder: &dyn Embedder,
    text: &str,
    vocab: &mut LabelVocabulary,
    index: &EmbeddingIndex,
    k_event: usize,
    at_step: u64,
    fresh: &mut Vec<EmbeddingRecord>,
) -> (String, bool) {
    let candidates = match event_candidates(embedder, text, vocab, index, k_event, fresh) {
        Ok(c) => c,
        Err(e) => {
            tracing::warn!(step = at_step, error = %e, "event candidate retrieval failed");
            return (UNLABELED.to_string(), false);
        }
    };
    let task = ModelTask::with(
        TaskKind::EventSelect,
        [("action_text", text.to_string()), ("candidates", bullet_list(&candidates))],
    );
    let label = match task.and_then(|t| gateway.run_task(&t)).map(|r| r.payload) {
        Ok(Payload::Label(l)) => l,
        Ok(_) => return (UNLABELED.to_string(), false),
        Err(e) => {
            tracing::warn!(step = at_step, error = %e, "event selection failed");
            return (UNLABELED.to_string(), false);
        }
    };
    let proposed = match label.strip_prefix(NEW_LABEL_PREFIX) {
        Some(new) => clean_label(new),
        None => label,
    };
    if proposed.is_empty() || proposed == UNSEEDED || proposed == UNLABELED {
        return (UNLABELED.to_string(), false);
    }
    match vocab.insert(&proposed, at_step) {
        Ok((stored, created)) => {
            if created {
                match embed_record(embedder, label_embedding_id(LabelKind::Event, &stored), &stored) {
                    Ok(r) => fresh.push(r),
                    Err(e) => tracing::warn!(error = %e, "label embedding failed"),
                }
            }
            (stored, created)
        }
        Err(_) => (UNLABELED.to_string(), false),
    }
}

/// Top-k_event labels by embedding similarity, with an exact textual match
/// always placed first.
fn event_candidates(
    embedder: &dyn Embedder,
    text: &str,
    vocab: &LabelVocabulary,
    index: &EmbeddingIndex,
    k_event: usize,
    fresh: &mut Vec<EmbeddingRecord>,
) -> Result<Vec<String>, EmbeddingError> {
    if vocab.is_empty() {
        return Ok(Vec::new());
    }
    let labels = label_index(vocab, index, embedder, fresh)?;
    let ids: Vec<String> = labels.records().iter().map(|r| r.id.clone()).collect();
    let query = embedder.embed(text)?;
    let top = labels.top_k(&query, &ids, k_event.max(1))?;
    let mut out: Vec<String> = Vec::new();
    let exact = text.trim().trim_end_matches(|c: char| c.is_ascii_punctuation());
    if let Some(l) = vocab.find(exact) {
        out.push(l.to_string());
    }
    for (id, _) in top {
        let text = &labels.get(&id).expect("id from this index").text;
        if !out.contains(text) {
            out.push(text.clone());
        }
    }
    out.truncate(k_event.max(1));
    Ok(out)
}

/// Entity types carried by `text`; novel types are appended to the
/// vocabulary. Failures yield the empty set.
pub fn extract_entity_types(
    gateway: &Gateway,
    embedder: &dyn Embedder,
    text: &str,
    vocab: &mut LabelVocabulary,
    at_step: u64,
    fresh: &mut Vec<EmbeddingRecord>,
) -> BTreeSet<String> {
    let task = ModelTask::with(
        TaskKind::EntityExtract,
        [("entity_types", bullet_list(&vocab.label_list())), ("action_text", text.to_string())],
    );
    let labels = match task.and_then(|t| gateway.run_task(&t)).map(|r| r.payload) {
        Ok(Payload::Labels(l)) => l,
        Ok(_) => Vec::new(),
        Err(e) => {
            tracing::warn!(step = at_step, error = %e, "entity extraction failed");
            Vec::new()
        }
    };
    let mut out = BTreeSet::new();
    for l in labels {
        if let Ok((stored, created)) = vocab.insert(&l, at_step) {
            if created {
                match embed_record(embedder, label_embedding_id(LabelKind::EntityType, &stored), &stored) {
                    Ok(r) => fresh.push(r),
                    Err(e) => tracing::warn!(error = %e, "label embedding failed"),
                }
            }
            out.insert(stored);
        }
    }
    out
}

/// Prior snippets aligned with the given scope or event: same scope, or
/// the same (non-sentinel) event label; most recent first, capped.
pub fn aligned_context(snippets: &[MemorySnippet], scope: &str, event: &str, window: usize) -> Vec<ContextLine> {
    let event_ok = event != UNSEEDED && event != UNLABELED;
    snippets
        .iter()
        .rev()
        .filter(|s| s.intent.scope == scope || (event_ok && s.intent.event_type == event))
        .take(window)
        .map(snippet_line)
        .collect()
}

/// Rewrites ambiguous references in `text` against the aligned context.
/// Returns `text` unchanged unless the detector fires (or `every_step`),
/// and on gateway failure.
pub fn resolve_references(
    gateway: &Gateway,
    text: &str,
    aligned: &[ContextLine],
    pronouns: &[String],
    every_step: bool,
) -> String {
    if !every_step && !needs_rewrite(text, pronouns) {
        return text.to_string();
    }
    let task = ModelTask::with(
        TaskKind::CorefRewrite,
        [("context", render_context(aligned)), ("action_text", text.to_string())],
    );
    match task.and_then(|t| gateway.run_task(&t)).map(|r| r.payload) {
        Ok(Payload::Text(t)) if !t.trim().is_empty() => t,
        Ok(_) => text.to_string(),
        Err(e) => {
            tracing::warn!(error = %e, "reference rewrite failed");
            text.to_string()
        }
    }
}

/// Replaces each recorded referring expression with its canonical name.
pub fn apply_oracle_rewrite(text: &str, mentions: &[(String, String)]) -> String {
    let mut out = text.to_string();
    for (expression, canonical) in mentions {
        if let Some(pos) = find_phrase(&out, expression) {
            out.replace_range(pos..pos + expression.len(), canonical);
        }
    }
    out
}

/// Assembles the snippet; the summary falls back to the first sentence of
/// the rewritten text (flagged degraded) when the gateway fails.
pub fn build_snippet(
    gateway: &Gateway,
    step: &TrajectoryStep,
    rewritten_text: &str,
    intent: ContextualIntent,
    max_summary_chars: usize,
) -> MemorySnippet {
    let entity_types: Vec<&String> = intent.entity_types.iter().collect();
    let task = ModelTask::with(
        TaskKind::SnippetSummary,
        [
            ("scope", intent.scope.clone()),
            ("event_type", intent.event_type.clone()),
            ("entity_types", bullet_list(&entity_types)),
            ("rewritten_text", rewritten_text.to_string()),
            ("max_chars", max_summary_chars.to_string()),
        ],
    );
    let summary = match task.and_then(|t| gateway.run_task(&t)).map(|r| r.payload) {
        Ok(Payload::Text(t)) => Some(truncate_chars(t.trim(), max_summary_chars)).filter(|s| !s.trim().is_empty()),
        Ok(_) => None,
        Err(e) => {
            tracing::warn!(step = step.step_index, error = %e, "snippet summary failed, using fallback");
            None
        }
    };
    let (summary, degraded) = match summary {
        Some(s) => (s, false),
        None => {
            let first = first_sentence(rewritten_text).trim();
            let fallback = if first.is_empty() { rewritten_text.trim() } else { first };
            (truncate_chars(fallback, max_summary_chars), true)
        }
    };
    MemorySnippet {
        step: step.clone(),
        rewritten_text: rewritten_text.to_string(),
        intent,
        summary,
        summary_embedding_id: snippet_id(step.step_index),
        degraded,
    }
}

/// Near-synonym merges by embedding similarity: labels are visited in
/// creation order and absorbed into the most similar earlier survivor when
/// the cosine reaches `threshold`.
pub fn consolidate_by_similarity(
    vocab: &LabelVocabulary,
    vectors: &BTreeMap<String, Vec<f64>>,
    threshold: f64,
) -> BTreeMap<String, String> {
    let mut survivors: Vec<&str> = Vec::new();
    let mut remap = BTreeMap::new();
    let mut entries: Vec<_> = vocab.entries.iter().enumerate().collect();
    entries.sort_by_key(|(i, e)| (e.created_at_step, *i));
    for (_, entry) in entries {
        let Some(v) = vectors.get(&entry.label) else {
            survivors.push(&entry.label);
            continue;
        };
        let best = survivors
            .iter()
            .filter_map(|s| vectors.get(*s).map(|sv| (*s, cosine(v, sv))))
            .filter(|(_, c)| *c >= threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((s, _)) => {
                remap.insert(entry.label.clone(), s.to_string());
            }
            None => survivors.push(&entry.label),
        }
    }
    remap
}

/// Near-synonym merges proposed by the gateway, filtered to valid pairs
/// (both labels stored, survivor older, no chains).
pub fn consolidate_by_gateway(gateway: &Gateway, vocab: &LabelVocabulary) -> BTreeMap<String, String> {
    if vocab.len() < 2 {
        return BTreeMap::new();
    }
    let task = ModelTask::with(TaskKind::Consolidate, [("labels", bullet_list(&vocab.label_list()))]);
    let pairs = match task.and_then(|t| gateway.run_task(&t)).map(|r| r.payload) {
        Ok(Payload::Merges(p)) => p,
        Ok(_) => Vec::new(),
        Err(e) => {
            tracing::warn!(error = %e, "gateway consolidation failed");
            Vec::new()
        }
    };
    let position = |l: &str| vocab.entries.iter().position(|e| normalize_label(&e.label) == normalize_label(l));
    let mut remap: BTreeMap<String, String> = BTreeMap::new();
    for (a, b) in pairs {
        let (Some(pa), Some(pb)) = (position(&a), position(&b)) else { continue };
        if pa == pb {
            continue;
        }
        let (absorbed, survivor) = if pa > pb { (pa, pb) } else { (pb, pa) };
        let absorbed = vocab.entries[absorbed].label.clone();
        let survivor = vocab.entries[survivor].label.clone();
        if remap.contains_key(&survivor) || remap.contains_key(&absorbed) || remap.values().any(|v| *v == absorbed) {
            continue;
        }
        remap.insert(absorbed, survivor);
    }
    remap
}

/// Per-step accounting emitted to the audit log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepAudit {
    pub step_index: u64,
    pub gateway_calls: u64,
    pub elapsed_us: u64,
    pub seeded_now: bool,
    pub consolidated_now: bool,
}

/// Single-writer ingestion session over one trajectory.
pub struct IngestSession<B: Backend> {
    backend: B,
    gateway: Arc<Gateway>,
    embedder: Arc<dyn Embedder>,
    config: IngestionConfig,
    oracle: BTreeMap<u64, Vec<(String, String)>>,
    last_audit: StepAudit,
}

impl<B: Backend> IngestSession<B> {
    /// Opens a session; resumes from whatever the backend already holds.
    pub fn new(backend: B, gateway: Arc<Gateway>, embedder: Arc<dyn Embedder>, config: IngestionConfig) -> Result<Self, IngestError> {
        config.validate()?;
        Ok(Self {
            backend,
            gateway,
            embedder,
            config,
            oracle: BTreeMap::new(),
            last_audit: StepAudit::default(),
        })
    }

    /// Referring expressions per step used by the oracle rewrite mode.
    pub fn with_oracle(mut self, oracle: BTreeMap<u64, Vec<(String, String)>>) -> Self {
        self.oracle = oracle;
        self
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn into_backend(self) -> B {
        self.backend
    }

    pub fn config(&self) -> &IngestionConfig {
        &self.config
    }

    pub fn last_audit(&self) -> &StepAudit {
        &self.last_audit
    }

    pub fn snippet_count(&self) -> u64 {
        self.backend.state().snippets.len() as u64
    }

    fn session(&self) -> &SessionState {
        &self.backend.state().session
    }

    fn history_lines(&self, scope: &ScopeState) -> Vec<ContextLine> {
        let snippets = &self.backend.state().snippets;
        scope
            .history_buffer
            .iter()
            .filter_map(|n| snippets.get(n.turn_id as usize))
            .map(snippet_line)
            .collect()
    }

    /// Ingests one step; idempotent for already-stored step indices.
    pub fn ingest_step(&mut self, step: TrajectoryStep) -> Result<MemorySnippet, IngestError> {
        let started = Instant::now();
        let calls_before = self.gateway.calls();
        let count = self.snippet_count();
        if step.step_index < count {
            return Ok(self.backend.state().snippets[step.step_index as usize].clone());
        }
        if step.step_index > count {
            return Err(IngestError::OutOfOrder {
                expected: count,
                got: step.step_index,
            });
        }
        step.validate()?;
        if let Some(prev) = self.backend.state().snippets.last() {
            if step.timestamp.compare(&prev.step.timestamp).is_none_or(|o| o.is_lt()) {
                return Err(InvariantViolation::new(
                    "decreasing-timestamp",
                    format!("step {} at {} precedes {}", step.step_index, step.timestamp, prev.step.timestamp),
                )
                .into());
            }
        }

        let mut session = self.session().clone();
        let mut fresh: Vec<EmbeddingRecord> = Vec::new();
        let t = step.step_index;

        // Seeding closes over the first n_start steps, this one included.
        let seeded_now = !session.seeded && (count + 1) as usize >= self.config.n_start;
        if seeded_now {
            let mut sample: Vec<TrajectoryStep> = self.backend.state().snippets.iter().map(|s| s.step.clone()).collect();
            sample.push(step.clone());
            self.seed(&mut session, &sample, t, &mut fresh)?;
        }

        let history = self.history_lines(&session.scope);
        let scope = induce_scope(&self.gateway, &step, &mut session.scope, &history);
        update_scope_summary(&self.gateway, &mut session.scope, &step, self.config.max_scope_summary_chars);

        let index = &self.backend.state().index;
        let event = if session.seeded {
            label_event(
                &self.gateway,
                self.embedder.as_ref(),
                &step.action_text,
                &mut session.event_vocab,
                index,
                self.config.k_event,
                t,
                &mut fresh,
            )
            .0
        } else {
            UNSEEDED.to_string()
        };
        let entity_types = if session.seeded {
            extract_entity_types(&self.gateway, self.embedder.as_ref(), &step.action_text, &mut session.entity_vocab, t, &mut fresh)
        } else {
            BTreeSet::new()
        };

        let rewritten = self.rewrite(&step, &scope, &event);
        let intent = ContextualIntent {
            scope: scope.clone(),
            event_type: event,
            entity_types,
        };
        let snippet = build_snippet(&self.gateway, &step, &rewritten, intent, self.config.max_summary_chars);
        fresh.push(embed_record(self.embedder.as_ref(), snippet.summary_embedding_id.clone(), &snippet.summary)?);
        session.scope.push_history(ScopeNote {
            turn_id: t,
            role: step.role.clone(),
            context_scope: scope,
        });

        self.backend.append(snippet.clone(), fresh, session)?;
        if seeded_now {
            self.relabel_unseeded()?;
        }
        let processed = count + 1;
        let consolidated_now = processed % self.config.k_update as u64 == 0;
        if consolidated_now {
            self.consolidate(processed)?;
        }

        self.last_audit = StepAudit {
            step_index: t,
            gateway_calls: self.gateway.calls() - calls_before,
            elapsed_us: started.elapsed().as_micros() as u64,
            seeded_now,
            consolidated_now,
        };
        tracing::info!(
            step = t,
            gateway_calls = self.last_audit.gateway_calls,
            elapsed_us = self.last_audit.elapsed_us,
            seeded = seeded_now,
            consolidated = consolidated_now,
            "ingested step"
        );
        Ok(self.backend.state().snippets[t as usize].clone())
    }

    fn rewrite(&self, step: &TrajectoryStep, scope: &str, event: &str) -> String {
        match self.config.rewrite_mode {
            RewriteMode::Disabled => step.action_text.clone(),
            RewriteMode::Oracle => match self.oracle.get(&step.step_index) {
                Some(m) => apply_oracle_rewrite(&step.action_text, m),
                None => step.action_text.clone(),
            },
            RewriteMode::Model => {
                let aligned = aligned_context(&self.backend.state().snippets, scope, event, self.config.history_window);
                resolve_references(
                    &self.gateway,
                    &step.action_text,
                    &aligned,
                    &self.config.trigger_pronouns,
                    self.config.rewrite_every_step,
                )
            }
        }
    }

    fn seed(&self, session: &mut SessionState, sample: &[TrajectoryStep], at_step: u64, fresh: &mut Vec<EmbeddingRecord>) -> Result<(), IngestError> {
        let cap = self.config.n_start.min(sample.len());
        let sample = &sample[..cap];
        let events = seed_event_vocabulary(&self.gateway, sample, at_step)?;
        let entities = seed_entity_vocabulary(&self.gateway, sample, &self.config.dataset_description, at_step)?;
        let index = &self.backend.state().index;
        label_index(&events, index, self.embedder.as_ref(), fresh)?;
        label_index(&entities, index, self.embedder.as_ref(), fresh)?;
        session.event_vocab = events;
        session.entity_vocab = entities;
        session.seeded = true;
        Ok(())
    }

    /// Labels every stored step that was ingested before seeding.
    fn relabel_unseeded(&mut self) -> Result<(), IngestError> {
        let state = self.backend.state();
        let pending: Vec<MemorySnippet> = state
            .snippets
            .iter()
            .filter(|s| s.intent.event_type == UNSEEDED)
            .cloned()
            .collect();
        if pending.is_empty() {
            return Ok(());
        }
        let mut session = state.session.clone();
        let index = state.index.clone();
        let mut fresh = Vec::new();
        let mut updates = Vec::new();
        for s in pending {
            let t = s.step_index();
            let text = &s.step.action_text;
            let (event, _) = label_event(
                &self.gateway,
                self.embedder.as_ref(),
                text,
                &mut session.event_vocab,
                &index,
                self.config.k_event,
                t,
                &mut fresh,
            );
            let entity_types =
                extract_entity_types(&self.gateway, self.embedder.as_ref(), text, &mut session.entity_vocab, t, &mut fresh);
            updates.push((
                t,
                ContextualIntent {
                    scope: s.intent.scope.clone(),
                    event_type: event,
                    entity_types,
                },
            ));
        }
        self.backend.relabel(&updates, fresh, session)?;
        Ok(())
    }

    /// One consolidation round over both vocabularies.
    fn consolidate(&mut self, processed: u64) -> Result<(), IngestError> {
        if !self.session().seeded {
            return Ok(());
        }
        for kind in [LabelKind::Event, LabelKind::EntityType] {
            let state = self.backend.state();
            let vocab = state.session.vocab(kind).clone();
            let remap = match self.config.consolidation_mode {
                ConsolidationMode::Embedding => {
                    let mut fresh = Vec::new();
                    let labels = label_index(&vocab, &state.index, self.embedder.as_ref(), &mut fresh)?;
                    let vectors: BTreeMap<String, Vec<f64>> =
                        labels.records().iter().map(|r| (r.text.clone(), r.vector.clone())).collect();
                    consolidate_by_similarity(&vocab, &vectors, self.config.consolidation_similarity_threshold)
                }
                ConsolidationMode::Gateway => consolidate_by_gateway(&self.gateway, &vocab),
            };
            if !remap.is_empty() {
                tracing::info!(kind = kind.as_str(), merges = remap.len(), "consolidating labels");
                self.backend.apply_remap(kind, &remap, processed)?;
            }
        }
        let mut session = self.session().clone();
        session.consolidations += 1;
        session.last_consolidated_at = processed;
        self.backend.save_session(session)?;
        Ok(())
    }

    /// Ends the stream: seeds short trajectories and runs the final
    /// consolidation unless one already ran at the current count.
    pub fn finish(&mut self) -> Result<(), IngestError> {
        let count = self.snippet_count();
        if count == 0 {
            return Ok(());
        }
        if !self.session().seeded {
            let mut session = self.session().clone();
            let sample: Vec<TrajectoryStep> = self.backend.state().snippets.iter().map(|s| s.step.clone()).collect();
            let mut fresh = Vec::new();
            self.seed(&mut session, &sample, count - 1, &mut fresh)?;
            // Label embeddings travel with the relabel commit.
            self.backend.relabel(&[], fresh, session)?;
            self.relabel_unseeded()?;
        }
        if self.session().last_consolidated_at != count {
            self.consolidate(count)?;
        }
        Ok(())
    }

    /// Ingests a whole trajectory in order and finishes it.
    pub fn ingest_all(&mut self, steps: impl IntoIterator<Item = TrajectoryStep>) -> Result<u64, IngestError> {
        for step in steps {
            self.ingest_step(step)?;
        }
        self.finish()?;
        Ok(self.snippet_count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use crate::gateway::{GatewayError, ScriptedProvider};
    use crate::model::Timestamp;
    use crate::store::InMemoryBackend;

    fn step(i: u64, role: &str, text: &str) -> TrajectoryStep {
        TrajectoryStep::new(i, role, text, Timestamp::Tick(i))
    }

    fn session(config: IngestionConfig) -> IngestSession<InMemoryBackend> {
        IngestSession::new(
            InMemoryBackend::new("t"),
            Arc::new(Gateway::deterministic()),
            Arc::new(HashEmbedder::default()),
            config,
        )
        .unwrap()
    }

    fn small() -> IngestionConfig {
        IngestionConfig {
            n_start: 3,
            k_update: 4,
            ..IngestionConfig::default()
        }
    }

    #[test]
    fn opening_boundary_creates_scope_and_continuations_inherit() {
        let gw = Gateway::deterministic();
        let mut state = ScopeState::default();
        let s = induce_scope(&gw, &step(0, "user", "Let's focus on planning the itinerary for day 1."), &mut state, &[]);
        assert_eq!(normalize_label(&s), "planning the itinerary for day 1");
        let next = induce_scope(&gw, &step(1, "agent", "Great, I can help with that."), &mut state, &[]);
        assert_eq!(next, s);
        assert_eq!(state.scope_inventory.len(), 1);
    }

    #[test]
    fn case_variant_scope_reuses_canonical_label() {
        let gw = Gateway::new(Arc::new(ScriptedProvider::new(|_, _| Ok("DAY 1 ITINERARY".into()))), 2);
        let mut state = ScopeState::default();
        state.register("Day 1 Itinerary");
        let s = induce_scope(&gw, &step(3, "user", "anything"), &mut state, &[]);
        assert_eq!(s, "Day 1 Itinerary");
        assert_eq!(state.scope_inventory.len(), 1);
    }

    #[test]
    fn scope_induction_fails_open() {
        let gw = Gateway::new(Arc::new(ScriptedProvider::unreachable()), 0);
        let mut state = ScopeState::default();
        state.register("Day 2 Itinerary");
        state.current_scope = Some("Day 2 Itinerary".into());
        assert_eq!(induce_scope(&gw, &step(0, "user", "Let's focus on day 3."), &mut state, &[]), "Day 2 Itinerary");
    }

    #[test]
    fn scope_summary_is_capped_and_isolated() {
        let gw = Gateway::deterministic();
        let mut state = ScopeState::default();
        state.register("A");
        state.register("B");
        state.summaries.insert("B".into(), "b summary".into());
        state.current_scope = Some("A".into());
        let long = "The Daphne Laurel Hotel costs $120 per night. ".repeat(40);
        update_scope_summary(&gw, &mut state, &step(0, "agent", &long), 100);
        update_scope_summary(&gw, &mut state, &step(1, "agent", "We also like the Apollo Inn."), 100);
        assert!(state.summaries["A"].chars().count() <= 100);
        assert_eq!(state.summaries["B"], "b summary");
        update_scope_summary(&gw, &mut state, &step(2, "agent", "How about the Hermes Lodge?"), 1000);
        assert!(state.summaries["A"].contains("Hermes Lodge"));
    }

    #[test]
    fn seeding_dedups_and_guards_empty_input() {
        let gw = Gateway::deterministic();
        assert!(matches!(seed_event_vocabulary(&gw, &[], 0), Err(IngestError::SeedingFailed(_))));
        let steps = vec![
            step(0, "agent", "How about the Apollo Hotel?"),
            step(1, "agent", "How about the Hermes Inn?"),
            step(2, "user", "How much does the Apollo Hotel cost per night?"),
        ];
        let v = seed_event_vocabulary(&gw, &steps, 2).unwrap();
        assert_eq!(v.label_list(), vec!["Propose Option".to_string(), "Price Inquiry".to_string()]);
        let dup = Gateway::new(Arc::new(ScriptedProvider::new(|_, _| Ok(r#"["Book", "book ", "Ask"]"#.into()))), 0);
        assert_eq!(seed_event_vocabulary(&dup, &steps, 2).unwrap().len(), 2);
    }

    #[test]
    fn label_event_exact_match_new_label_and_saturation() {
        let gw = Gateway::deterministic();
        let emb = HashEmbedder::default();
        let idx = EmbeddingIndex::new();
        let mut vocab = LabelVocabulary::new(LabelKind::Event);
        vocab.insert("Price Inquiry", 0).unwrap();
        vocab.insert("Booking", 0).unwrap();
        let mut fresh = Vec::new();
        let (l, created) = label_event(&gw, &emb, "Booking.", &mut vocab, &idx, 5, 1, &mut fresh);
        assert_eq!((l.as_str(), created), ("Booking", false));
        let (l, created) = label_event(&gw, &emb, "How much is the Apollo Hotel per night?", &mut vocab, &idx, 5, 1, &mut fresh);
        assert_eq!((l.as_str(), created), ("Price Inquiry", false));
        let (l, created) = label_event(&gw, &emb, "Zorblax quixotic fnord.", &mut vocab, &idx, 5, 2, &mut fresh);
        assert!(created);
        assert!(vocab.contains(&l));
        assert!(fresh.iter().any(|r| r.id == label_embedding_id(LabelKind::Event, &l)));
        let down = Gateway::new(Arc::new(ScriptedProvider::unreachable()), 0);
        assert_eq!(label_event(&down, &emb, "x", &mut vocab, &idx, 5, 3, &mut fresh).0, UNLABELED);
    }

    #[test]
    fn entity_extraction_cases() {
        let gw = Gateway::deterministic();
        let emb = HashEmbedder::default();
        let mut vocab = LabelVocabulary::new(LabelKind::EntityType);
        let mut fresh = Vec::new();
        let mut run = |t: &str| extract_entity_types(&gw, &emb, t, &mut vocab, 0, &mut fresh);
        assert_eq!(
            run("Could you tell me about the price range for breakfast? It is $76.22."),
            BTreeSet::from(["Price".to_string()])
        );
        assert!(run("Great, focusing on day 1 is a smart way to start.").is_empty());
        assert_eq!(
            run("Can you compare the price range and the ratings?"),
            BTreeSet::from(["Price".to_string(), "Rating".to_string()])
        );
    }

    #[test]
    fn rewrite_replaces_pronoun_and_ordinal_and_leaves_plain_text() {
        let gw = Gateway::deterministic();
        let pronouns = IngestionConfig::default().trigger_pronouns;
        let ctx = vec![ContextLine {
            step_index: 0,
            role: "agent".into(),
            scope: "Day 1".into(),
            event: "Propose Option".into(),
            text: "How about the Daphne Laurel Hotel?".into(),
        }];
        assert_eq!(resolve_references(&gw, "Book it.", &ctx, &pronouns, false), "Book the Daphne Laurel Hotel.");
        assert_eq!(resolve_references(&gw, "Sounds good to me.", &ctx, &pronouns, false), "Sounds good to me.");
        let ctx2 = vec![
            ContextLine {
                text: "Another option is Athena Grill.".into(),
                ..ctx[0].clone()
            },
            ContextLine {
                text: "For lunch, how about Hestia Bistro?".into(),
                ..ctx[0].clone()
            },
        ];
        assert_eq!(
            resolve_references(&gw, "What about the 2th restaurant I raised before?", &ctx2, &pronouns, false),
            "What about the Athena Grill?"
        );
    }

    #[test]
    fn degraded_summary_on_gateway_failure() {
        let down = Gateway::new(Arc::new(ScriptedProvider::unreachable()), 0);
        let intent = ContextualIntent {
            scope: "S".into(),
            event_type: UNSEEDED.into(),
            entity_types: BTreeSet::new(),
        };
        let s = build_snippet(&down, &step(0, "user", "Book the Daphne Laurel Hotel. Thanks!"), "Book the Daphne Laurel Hotel. Thanks!", intent.clone(), 512);
        assert!(s.degraded);
        assert_eq!(s.summary, "Book the Daphne Laurel Hotel.");
        let ok = build_snippet(&Gateway::deterministic(), &step(0, "user", "Book the Daphne Laurel Hotel."), "Book the Daphne Laurel Hotel.", intent, 512);
        assert!(!ok.degraded && ok.summary.contains("Daphne Laurel Hotel"));
    }

    #[test]
    fn similarity_consolidation_keeps_older_label() {
        let emb = HashEmbedder::default();
        let mut vocab = LabelVocabulary::new(LabelKind::Event);
        vocab.insert("Price Inquiry", 0).unwrap();
        vocab.insert("Booking", 1).unwrap();
        vocab.insert("Price-Inquiry", 5).unwrap();
        let vectors: BTreeMap<String, Vec<f64>> = vocab.labels().map(|l| (l.to_string(), emb.embed(l).unwrap())).collect();
        let remap = consolidate_by_similarity(&vocab, &vectors, 0.9);
        assert_eq!(remap, BTreeMap::from([("Price-Inquiry".to_string(), "Price Inquiry".to_string())]));
        let mut fixed = LabelVocabulary::new(LabelKind::Event);
        fixed.insert("Booking", 0).unwrap();
        fixed.insert("Price Inquiry", 0).unwrap();
        let v2: BTreeMap<String, Vec<f64>> = fixed.labels().map(|l| (l.to_string(), emb.embed(l).unwrap())).collect();
        assert!(consolidate_by_similarity(&fixed, &v2, 0.9).is_empty());
    }

    #[test]
    fn pre_seed_steps_are_relabeled_and_ingest_is_idempotent() {
        let mut s = session(small());
        let texts = [
            "Let's focus on the Day 1 itinerary.",
            "How about the Apollo Hotel?",
            "How much does the Apollo Hotel cost per night?",
            "It costs $120 per night.",
            "Book it.",
        ];
        for (i, t) in texts.iter().enumerate() {
            let role = if i % 2 == 0 { "user" } else { "agent" };
            s.ingest_step(step(i as u64, role, t)).unwrap();
        }
        let snippets = &s.backend().state().snippets;
        assert!(snippets.iter().all(|x| x.intent.event_type != UNSEEDED));
        assert!(snippets[4].rewritten_text.contains("Apollo Hotel"));
        let again = s.ingest_step(step(2, "user", "different text")).unwrap();
        assert_eq!(again, s.backend().state().snippets[2]);
        assert_eq!(s.snippet_count(), 5);
        assert!(matches!(s.ingest_step(step(9, "user", "x")), Err(IngestError::OutOfOrder { expected: 5, got: 9 })));
    }

    #[test]
    fn consolidation_runs_on_schedule_only() {
        let mut s = session(IngestionConfig {
            n_start: 2,
            k_update: 3,
            ..IngestionConfig::default()
        });
        for i in 0..7u64 {
            s.ingest_step(step(i, "user", "How about the Apollo Hotel?")).unwrap();
            let expected = i + 1 == 3 || i + 1 == 6;
            assert_eq!(s.last_audit().consolidated_now, expected, "step {i}");
        }
        assert_eq!(s.backend().state().session.consolidations, 2);
        s.finish().unwrap();
        assert_eq!(s.backend().state().session.consolidations, 3);
        s.finish().unwrap();
        assert_eq!(s.backend().state().session.consolidations, 3);
    }

    #[test]
    fn seeding_failure_writes_nothing() {
        let gw = Gateway::new(
            Arc::new(ScriptedProvider::new(|t, _| match t.task_kind {
                TaskKind::EventSeed => Err(GatewayError::ProviderUnreachable("down".into())),
                _ => Ok("x".into()),
            })),
            0,
        );
        let mut s = IngestSession::new(InMemoryBackend::new("t"), Arc::new(gw), Arc::new(HashEmbedder::default()), small()).unwrap();
        s.ingest_step(step(0, "user", "a")).unwrap();
        s.ingest_step(step(1, "user", "b")).unwrap();
        assert!(matches!(s.ingest_step(step(2, "user", "c")), Err(IngestError::SeedingFailed(_))));
        assert_eq!(s.snippet_count(), 2);
    }

    #[test]
    fn short_trajectories_seed_at_finish() {
        let mut s = session(IngestionConfig::default());
        s.ingest_step(step(0, "agent", "How about the Apollo Hotel?")).unwrap();
        assert_eq!(s.backend().state().snippets[0].intent.event_type, UNSEEDED);
        s.finish().unwrap();
        let st = s.backend().state();
        assert!(st.session.seeded);
        assert_eq!(st.snippets[0].intent.event_type, "Propose Option");
        assert!(st.snippets[0].intent.entity_types.contains("Accommodation"));
    }

    #[test]
    fn trigger_detector() {
        let p = IngestionConfig::default().trigger_pronouns;
        assert!(needs_rewrite("Book it.", &p));
        assert!(!needs_rewrite("It's sunny.", &p));
        assert!(needs_rewrite("the 2nd hotel I mentioned", &p));
        assert!(!needs_rewrite("Book the Apollo Hotel.", &p));
    }

    #[test]
    fn oracle_rewrite_substitutes_expressions() {
        let out = apply_oracle_rewrite(
            "Let's book the 2nd hotel raised for Day 1.",
            &[("the 2nd hotel raised for Day 1".into(), "Apollo Hotel".into())],
        );
        assert_eq!(out, "Let's book Apollo Hotel.");
    }
}
