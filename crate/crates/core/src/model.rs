//! Domain types shared by every stage, with their invariants and record
//! forms. Behavior here is limited to construction and validation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::Record;
use crate::text::{clean_label, normalize_label};

/// Event label given to steps ingested before the event vocabulary is seeded.
pub const UNSEEDED: &str = "UNSEEDED";
/// Event label used when labeling fails at the gateway.
pub const UNLABELED: &str = "UNLABELED";

pub const DEFAULT_MAX_SUMMARY_CHARS: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{rule}: {detail}")]
pub struct InvariantViolation {
    pub rule: &'static str,
    pub detail: String,
}

impl InvariantViolation {
    pub fn new(rule: &'static str, detail: impl Into<String>) -> Self {
        Self {
            rule,
            detail: detail.into(),
        }
    }
}

/// Either an ISO-8601 string or a monotone integer tick.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Timestamp {
    Tick(u64),
    Iso(String),
}

impl Timestamp {
    fn parse_iso(s: &str) -> Option<NaiveDateTime> {
        if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            return Some(dt.naive_utc());
        }
        for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S"] {
            if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
                return Some(dt);
            }
        }
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .ok()
            .and_then(|d| d.and_hms_opt(0, 0, 0))
    }

    pub fn is_valid(&self) -> bool {
        match self {
            Timestamp::Tick(_) => true,
            Timestamp::Iso(s) => Self::parse_iso(s).is_some(),
        }
    }

    /// Ordering between two timestamps of the same kind; `None` when the
    /// kinds differ or a string does not parse.
    pub fn compare(&self, other: &Timestamp) -> Option<Ordering> {
        match (self, other) {
            (Timestamp::Tick(a), Timestamp::Tick(b)) => Some(a.cmp(b)),
            (Timestamp::Iso(a), Timestamp::Iso(b)) => {
                Some(Self::parse_iso(a)?.cmp(&Self::parse_iso(b)?))
            }
            _ => None,
        }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Timestamp::Tick(t) => write!(f, "{t}"),
            Timestamp::Iso(s) => f.write_str(s),
        }
    }
}

/// One unit of the history stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step_index: u64,
    pub role: String,
    pub action_text: String,
    pub timestamp: Timestamp,
}

impl TrajectoryStep {
    pub fn new(
        step_index: u64,
        role: impl Into<String>,
        action_text: impl Into<String>,
        timestamp: Timestamp,
    ) -> Self {
        Self {
            step_index,
            role: role.into(),
            action_text: action_text.into(),
            timestamp,
        }
    }

    /// Per-step field checks (ordering is checked across a trajectory).
    pub fn validate(&self) -> Result<(), InvariantViolation> {
        if self.role.trim().is_empty() {
            return Err(InvariantViolation::new("empty-role", format!("step {}", self.step_index)));
        }
        if self.action_text.trim().is_empty() {
            return Err(InvariantViolation::new("empty-action-text", format!("step {}", self.step_index)));
        }
        if !self.timestamp.is_valid() {
            return Err(InvariantViolation::new("invalid-timestamp", self.timestamp.to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ValidationReport {
    Ok,
    Violation { rule: String, step_index: u64 },
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        matches!(self, ValidationReport::Ok)
    }

    fn violation(rule: &str, step_index: u64) -> Self {
        ValidationReport::Violation {
            rule: rule.to_string(),
            step_index,
        }
    }
}

/// Checks contiguity from 0, non-empty fields and non-decreasing timestamps;
/// reports the first violation found.
pub fn validate_trajectory(steps: &[TrajectoryStep]) -> ValidationReport {
    let mut prev: Option<&TrajectoryStep> = None;
    for (pos, step) in steps.iter().enumerate() {
        if step.step_index != pos as u64 {
            return ValidationReport::violation("non-contiguous", step.step_index);
        }
        if let Err(v) = step.validate() {
            return ValidationReport::violation(v.rule, step.step_index);
        }
        if let Some(p) = prev {
            match p.timestamp.compare(&step.timestamp) {
                Some(Ordering::Greater) => {
                    return ValidationReport::violation("decreasing-timestamp", step.step_index)
                }
                None => return ValidationReport::violation("mixed-timestamps", step.step_index),
                _ => {}
            }
        }
        prev = Some(step);
    }
    ValidationReport::Ok
}

/// The (scope, event type, entity types) cue attached to a step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextualIntent {
    pub scope: String,
    pub event_type: String,
    pub entity_types: BTreeSet<String>,
}

impl ContextualIntent {
    pub fn validate(&self) -> Result<(), InvariantViolation> {
        if self.scope.trim().is_empty() {
            return Err(InvariantViolation::new("empty-scope", "scope must be non-empty"));
        }
        if self.event_type.trim().is_empty() {
            return Err(InvariantViolation::new("empty-event", "event type must be non-empty"));
        }
        if self.entity_types.iter().any(|e| e.trim().is_empty()) {
            return Err(InvariantViolation::new("empty-entity-type", "blank entity type"));
        }
        Ok(())
    }

    /// Checks label membership against the vocabularies (the sentinel labels
    /// are accepted for events).
    pub fn validate_against(
        &self,
        events: &LabelVocabulary,
        entities: &LabelVocabulary,
    ) -> Result<(), InvariantViolation> {
        self.validate()?;
        let sentinel = self.event_type == UNSEEDED || self.event_type == UNLABELED;
        if !sentinel && !events.contains(&self.event_type) {
            return Err(InvariantViolation::new("unknown-event", self.event_type.clone()));
        }
        if let Some(e) = self.entity_types.iter().find(|e| !entities.contains(e)) {
            return Err(InvariantViolation::new("unknown-entity-type", e.clone()));
        }
        Ok(())
    }
}

/// Stored unit: original step, disambiguated text, intent and summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySnippet {
    pub step: TrajectoryStep,
    pub rewritten_text: String,
    pub intent: ContextualIntent,
    pub summary: String,
    pub summary_embedding_id: String,
    /// Set when the summary came from the local fallback instead of the model.
    #[serde(default)]
    pub degraded: bool,
}

impl MemorySnippet {
    pub fn step_index(&self) -> u64 {
        self.step.step_index
    }

    pub fn validate(&self, max_summary_chars: usize) -> Result<(), InvariantViolation> {
        self.step.validate()?;
        self.intent.validate()?;
        if self.rewritten_text.trim().is_empty() {
            return Err(InvariantViolation::new("empty-rewritten-text", format!("step {}", self.step.step_index)));
        }
        if self.summary.trim().is_empty() {
            return Err(InvariantViolation::new("empty-summary", format!("step {}", self.step.step_index)));
        }
        let len = self.summary.chars().count();
        if len > max_summary_chars {
            return Err(InvariantViolation::new(
                "summary-too-long",
                format!("{len} > {max_summary_chars} chars"),
            ));
        }
        if self.summary_embedding_id.is_empty() {
            return Err(InvariantViolation::new("missing-embedding-id", format!("step {}", self.step.step_index)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Event,
    EntityType,
}

impl LabelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelKind::Event => "event",
            LabelKind::EntityType => "entity_type",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub label: String,
    pub created_at_step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub absorbed_label: String,
    pub surviving_label: String,
    pub at_step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabularyError {
    #[error("label is empty")]
    EmptyLabel,
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("cannot merge `{0}` into itself")]
    SelfMerge(String),
}

/// Evolving inventory of event or entity-type labels.
///
/// Labels are unique under [`normalize_label`]; the stored form keeps the
/// casing first seen. Absorbed labels are recorded in `merge_log` and never
/// re-enter `entries`; re-proposals resolve to their survivor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    pub kind: LabelKind,
    pub entries: Vec<LabelEntry>,
    pub merge_log: Vec<MergeRecord>,
}

impl LabelVocabulary {
    pub fn new(kind: LabelKind) -> Self {
        Self {
            kind,
            entries: Vec::new(),
            merge_log: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.label.as_str())
    }

    pub fn label_list(&self) -> Vec<String> {
        self.labels().map(str::to_string).collect()
    }

    /// Stored form of a label equal under normalization.
    pub fn find(&self, label: &str) -> Option<&str> {
        let key = normalize_label(label);
        self.entries
            .iter()
            .find(|e| normalize_label(&e.label) == key)
            .map(|e| e.label.as_str())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.find(label).is_some()
    }

    pub fn entry(&self, label: &str) -> Option<&LabelEntry> {
        let key = normalize_label(label);
        self.entries.iter().find(|e| normalize_label(&e.label) == key)
    }

    /// Follows the merge log from an absorbed label to its current survivor.
    pub fn survivor_of(&self, label: &str) -> Option<String> {
        let mut current = normalize_label(label);
        let mut hops = 0;
        loop {
            let next = self
                .merge_log
                .iter()
                .rev()
                .find(|m| normalize_label(&m.absorbed_label) == current)?;
            current = normalize_label(&next.surviving_label);
            hops += 1;
            if let Some(found) = self.find(&current) {
                return Some(found.to_string());
            }
            if hops > self.merge_log.len() {
                return None;
            }
        }
    }

    /// Resolves a proposal to a stored label: direct match first, then the
    /// merge log.
    pub fn resolve(&self, label: &str) -> Option<String> {
        self.find(label)
            .map(str::to_string)
            .or_else(|| self.survivor_of(label))
    }

    /// Inserts a label unless an equal one (or an absorbed alias) exists.
    /// Returns the stored form and whether a new entry was created.
    pub fn insert(&mut self, label: &str, at_step: u64) -> Result<(String, bool), VocabularyError> {
        let cleaned = clean_label(label);
        if cleaned.is_empty() {
            return Err(VocabularyError::EmptyLabel);
        }
        if let Some(existing) = self.resolve(&cleaned) {
            return Ok((existing, false));
        }
        self.entries.push(LabelEntry {
            label: cleaned.clone(),
            created_at_step: at_step,
        });
        Ok((cleaned, true))
    }

    /// Removes `absorbed` and records that it now resolves to `survivor`.
    pub fn merge(&mut self, absorbed: &str, survivor: &str, at_step: u64) -> Result<(), VocabularyError> {
        let absorbed_stored = self
            .find(absorbed)
            .ok_or_else(|| VocabularyError::UnknownLabel(absorbed.to_string()))?
            .to_string();
        let survivor_stored = self
            .find(survivor)
            .ok_or_else(|| VocabularyError::UnknownLabel(survivor.to_string()))?
            .to_string();
        if absorbed_stored == survivor_stored {
            return Err(VocabularyError::SelfMerge(absorbed_stored));
        }
        self.entries.retain(|e| e.label != absorbed_stored);
        self.merge_log.push(MergeRecord {
            absorbed_label: absorbed_stored,
            surviving_label: survivor_stored,
            at_step,
        });
        Ok(())
    }

    pub fn validate(&self) -> Result<(), InvariantViolation> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if e.label.trim().is_empty() {
                return Err(InvariantViolation::new("empty-label", self.kind.as_str()));
            }
            if !seen.insert(normalize_label(&e.label)) {
                return Err(InvariantViolation::new("duplicate-label", e.label.clone()));
            }
        }
        for m in &self.merge_log {
            if self.contains(&m.absorbed_label) {
                return Err(InvariantViolation::new("absorbed-label-present", m.absorbed_label.clone()));
            }
        }
        Ok(())
    }
}

/// One entry of the sliding history used for scope induction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeNote {
    pub turn_id: u64,
    pub role: String,
    pub context_scope: String,
}

pub const DEFAULT_HISTORY_WINDOW: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeState {
    pub current_scope: Option<String>,
    pub scope_inventory: Vec<String>,
    pub summaries: BTreeMap<String, String>,
    pub history_buffer: VecDeque<ScopeNote>,
    pub window: usize,
}

impl Default for ScopeState {
    fn default() -> Self {
        Self::new(DEFAULT_HISTORY_WINDOW)
    }
}

impl ScopeState {
    pub fn new(window: usize) -> Self {
        Self {
            current_scope: None,
            scope_inventory: Vec::new(),
            summaries: BTreeMap::new(),
            history_buffer: VecDeque::new(),
            window: window.max(1),
        }
    }

    pub fn find_scope(&self, label: &str) -> Option<&str> {
        let key = normalize_label(label);
        self.scope_inventory
            .iter()
            .find(|s| normalize_label(s) == key)
            .map(String::as_str)
    }

    /// Registers a scope label, reusing an equal stored form when present.
    pub fn register(&mut self, label: &str) -> Option<String> {
        let cleaned = clean_label(label);
        if cleaned.is_empty() {
            return None;
        }
        if let Some(existing) = self.find_scope(&cleaned) {
            return Some(existing.to_string());
        }
        self.scope_inventory.push(cleaned.clone());
        Some(cleaned)
    }

    pub fn push_history(&mut self, note: ScopeNote) {
        self.history_buffer.push_back(note);
        while self.history_buffer.len() > self.window {
            self.history_buffer.pop_front();
        }
    }

    pub fn current_summary(&self) -> &str {
        self.current_scope
            .as_ref()
            .and_then(|s| self.summaries.get(s))
            .map(String::as_str)
            .unwrap_or("")
    }

    pub fn validate(&self) -> Result<(), InvariantViolation> {
        if let Some(cur) = &self.current_scope {
            if self.find_scope(cur).is_none() {
                return Err(InvariantViolation::new("scope-not-in-inventory", cur.clone()));
            }
        }
        if self.history_buffer.len() > self.window {
            return Err(InvariantViolation::new("history-overflow", format!("{} > {}", self.history_buffer.len(), self.window)));
        }
        Ok(())
    }
}

/// The stored label spaces a filter configuration is validated against.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inventories {
    pub scopes: Vec<String>,
    pub event_types: Vec<String>,
    pub entity_types: Vec<String>,
}

impl Inventories {
    pub fn is_empty(&self) -> bool {
        self.scopes.is_empty() && self.event_types.is_empty() && self.entity_types.is_empty()
    }
}

/// Query-side target sets over the three label spaces.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub scopes: BTreeSet<String>,
    pub event_types: BTreeSet<String>,
    pub entity_types: BTreeSet<String>,
}

/// A proposed filter label that was not in the stored inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedLabel {
    pub field: String,
    pub label: String,
}

impl FilterConfig {
    pub fn is_empty(&self) -> bool {
        self.scopes.is_empty() && self.event_types.is_empty() && self.entity_types.is_empty()
    }

    pub fn label_count(&self) -> usize {
        self.scopes.len() + self.event_types.len() + self.entity_types.len()
    }

    /// Keeps only proposals present in the inventories (mapped to their
    /// stored form) and reports the rest.
    pub fn validated(
        scopes: &[String],
        event_types: &[String],
        entity_types: &[String],
        inv: &Inventories,
    ) -> (FilterConfig, Vec<DroppedLabel>) {
        let mut dropped = Vec::new();
        let mut pick = |field: &str, proposed: &[String], inventory: &[String]| {
            let mut out = BTreeSet::new();
            for p in proposed {
                let key = normalize_label(p);
                match inventory.iter().find(|s| normalize_label(s) == key) {
                    Some(s) => {
                        out.insert(s.clone());
                    }
                    None => dropped.push(DroppedLabel {
                        field: field.to_string(),
                        label: p.clone(),
                    }),
                }
            }
            out
        };
        let cfg = FilterConfig {
            scopes: pick("scopes", scopes, &inv.scopes),
            event_types: pick("event_types", event_types, &inv.event_types),
            entity_types: pick("entity_types", entity_types, &inv.entity_types),
        };
        (cfg, dropped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Travel,
    Debate,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Travel => "travel",
            Domain::Debate => "debate",
        }
    }

    pub fn action_space(self) -> &'static [ActionKind] {
        use ActionKind::*;
        match self {
            Domain::Travel => &[IndicateDate, ProposeOption, InquireDetails, CompareOptions, MakeDecision],
            Domain::Debate => &[ProposeArgument, Attack, Defend, Concede, SupplyBackground, Summarize],
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "travel" => Ok(Domain::Travel),
            "debate" => Ok(Domain::Debate),
            other => Err(format!("unknown domain `{other}` (expected travel or debate)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    IndicateDate,
    ProposeOption,
    InquireDetails,
    CompareOptions,
    MakeDecision,
    ProposeArgument,
    Attack,
    Defend,
    Concede,
    SupplyBackground,
    Summarize,
}

impl ActionKind {
    pub fn domain(self) -> Domain {
        use ActionKind::*;
        match self {
            IndicateDate | ProposeOption | InquireDetails | CompareOptions | MakeDecision => Domain::Travel,
            _ => Domain::Debate,
        }
    }

    pub fn as_str(self) -> &'static str {
        use ActionKind::*;
        match self {
            IndicateDate => "indicate_date",
            ProposeOption => "propose_option",
            InquireDetails => "inquire_details",
            CompareOptions => "compare_options",
            MakeDecision => "make_decision",
            ProposeArgument => "propose_argument",
            Attack => "attack",
            Defend => "defend",
            Concede => "concede",
            SupplyBackground => "supply_background",
            Summarize => "summarize",
        }
    }
}

/// A planned benchmark action with its payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolicOperation {
    pub op_index: u64,
    pub role: String,
    pub action_kind: ActionKind,
    pub latent_goal: String,
    pub payload: BTreeMap<String, String>,
}

impl SymbolicOperation {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.payload.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    StateTracking,
    ContextualRecall,
    MultiHop,
    Synthesis,
}

impl QuestionType {
    pub const ALL: [QuestionType; 4] = [
        QuestionType::StateTracking,
        QuestionType::ContextualRecall,
        QuestionType::MultiHop,
        QuestionType::Synthesis,
    ];

    /// Type number 1-4.
    pub fn number(self) -> u8 {
        match self {
            QuestionType::StateTracking => 1,
            QuestionType::ContextualRecall => 2,
            QuestionType::MultiHop => 3,
            QuestionType::Synthesis => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::StateTracking => "state_tracking",
            QuestionType::ContextualRecall => "contextual_recall",
            QuestionType::MultiHop => "multi_hop",
            QuestionType::Synthesis => "synthesis",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationQuestion {
    pub question_id: String,
    pub qtype: QuestionType,
    pub text: String,
    pub gold_answers: BTreeSet<String>,
    pub supporting_ops: BTreeSet<u64>,
}

impl EvaluationQuestion {
    pub fn validate(&self, op_count: usize) -> Result<(), InvariantViolation> {
        if self.gold_answers.is_empty() {
            return Err(InvariantViolation::new("empty-gold", self.question_id.clone()));
        }
        if self.supporting_ops.is_empty() {
            return Err(InvariantViolation::new("no-supporting-ops", self.question_id.clone()));
        }
        if let Some(op) = self.supporting_ops.iter().find(|&&op| op as usize >= op_count) {
            return Err(InvariantViolation::new("unknown-supporting-op", format!("{} in {}", op, self.question_id)));
        }
        Ok(())
    }
}

impl Record for TrajectoryStep {
    const KIND: &'static str = "trajectory_step";
}
impl Record for ContextualIntent {
    const KIND: &'static str = "contextual_intent";
}
impl Record for MemorySnippet {
    const KIND: &'static str = "memory_snippet";
}
impl Record for LabelVocabulary {
    const KIND: &'static str = "label_vocabulary";
}
impl Record for ScopeState {
    const KIND: &'static str = "scope_state";
}
impl Record for FilterConfig {
    const KIND: &'static str = "filter_config";
}
impl Record for SymbolicOperation {
    const KIND: &'static str = "symbolic_operation";
}
impl Record for EvaluationQuestion {
    const KIND: &'static str = "evaluation_question";
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::{from_line, to_line};

    fn step(i: u64, ts: &str) -> TrajectoryStep {
        TrajectoryStep::new(i, "user", "hello there.", Timestamp::Iso(ts.into()))
    }

    #[test]
    fn empty_trajectory_is_valid() {
        assert_eq!(validate_trajectory(&[]), ValidationReport::Ok);
    }

    #[test]
    fn well_formed_trajectory_is_valid() {
        let steps = vec![
            step(0, "2025-05-15T08:00"),
            step(1, "2025-05-15T08:00"),
            step(2, "2025-05-15T08:01"),
        ];
        assert!(validate_trajectory(&steps).is_ok());
    }

    #[test]
    fn gap_in_indices_is_reported_at_offending_step() {
        let mut steps = vec![
            step(0, "2025-05-15T08:00"),
            step(1, "2025-05-15T08:00"),
            step(2, "2025-05-15T08:01"),
        ];
        steps.remove(1);
        assert_eq!(
            validate_trajectory(&steps),
            ValidationReport::Violation {
                rule: "non-contiguous".into(),
                step_index: 2
            }
        );
    }

    #[test]
    fn decreasing_and_mixed_timestamps_are_violations() {
        let steps = vec![step(0, "2025-05-15T08:05"), step(1, "2025-05-15T08:00")];
        assert!(matches!(validate_trajectory(&steps), ValidationReport::Violation { ref rule, step_index: 1 } if rule == "decreasing-timestamp"));
        let mixed = vec![
            step(0, "2025-05-15T08:05"),
            TrajectoryStep::new(1, "agent", "ok.", Timestamp::Tick(9)),
        ];
        assert!(matches!(validate_trajectory(&mixed), ValidationReport::Violation { ref rule, .. } if rule == "mixed-timestamps"));
        let ticks = vec![
            TrajectoryStep::new(0, "a", "x.", Timestamp::Tick(3)),
            TrajectoryStep::new(1, "b", "y.", Timestamp::Tick(3)),
        ];
        assert!(validate_trajectory(&ticks).is_ok());
    }

    #[test]
    fn vocabulary_dedups_under_normalization_and_keeps_first_casing() {
        let mut v = LabelVocabulary::new(LabelKind::Event);
        assert_eq!(v.insert("Price Inquiry", 0).unwrap(), ("Price Inquiry".into(), true));
        assert_eq!(v.insert("  price   INQUIRY ", 3).unwrap(), ("Price Inquiry".into(), false));
        assert_eq!(v.len(), 1);
        assert_eq!(v.insert("   ", 3), Err(VocabularyError::EmptyLabel));
    }

    #[test]
    fn absorbed_labels_resolve_to_survivor_and_never_reenter() {
        let mut v = LabelVocabulary::new(LabelKind::Event);
        v.insert("Price Inquiry", 0).unwrap();
        v.insert("Price-Inquiry", 4).unwrap();
        v.merge("Price-Inquiry", "Price Inquiry", 50).unwrap();
        assert!(!v.contains("Price-Inquiry"));
        assert_eq!(v.insert("price-inquiry", 60).unwrap(), ("Price Inquiry".into(), false));
        assert_eq!(v.len(), 1);
        v.validate().unwrap();
        assert!(matches!(v.merge("nope", "Price Inquiry", 1), Err(VocabularyError::UnknownLabel(_))));
    }

    #[test]
    fn scope_registration_reuses_case_variants() {
        let mut s = ScopeState::new(2);
        assert_eq!(s.register("Day 1 Itinerary").as_deref(), Some("Day 1 Itinerary"));
        assert_eq!(s.register("DAY 1 ITINERARY").as_deref(), Some("Day 1 Itinerary"));
        assert_eq!(s.scope_inventory.len(), 1);
        for i in 0..5 {
            s.push_history(ScopeNote { turn_id: i, role: "user".into(), context_scope: "x".into() });
        }
        assert_eq!(s.history_buffer.len(), 2);
        s.validate().unwrap();
    }

    #[test]
    fn filter_validation_drops_unknown_labels() {
        let inv = Inventories {
            scopes: vec!["Day 1 Itinerary".into()],
            event_types: vec!["Price Inquiry".into()],
            entity_types: vec!["Price".into()],
        };
        let (cfg, dropped) = FilterConfig::validated(
            &["day 1 itinerary".into(), "Day 9".into()],
            &["Price Inquiry".into()],
            &[],
            &inv,
        );
        assert_eq!(cfg.scopes.iter().collect::<Vec<_>>(), vec!["Day 1 Itinerary"]);
        assert_eq!(cfg.event_types.len(), 1);
        assert!(cfg.entity_types.is_empty());
        assert_eq!(dropped, vec![DroppedLabel { field: "scopes".into(), label: "Day 9".into() }]);
    }

    #[test]
    fn snippet_record_carries_kind_and_round_trips() {
        let snippet = MemorySnippet {
            step: step(0, "2025-05-15T08:00"),
            rewritten_text: "hello there.".into(),
            intent: ContextualIntent {
                scope: "Greeting".into(),
                event_type: "Chat".into(),
                entity_types: BTreeSet::new(),
            },
            summary: "hello".into(),
            summary_embedding_id: "snippet:0".into(),
            degraded: false,
        };
        let line = to_line(&snippet);
        assert!(line.starts_with("{\"kind\":\"memory_snippet\""));
        assert_eq!(from_line::<MemorySnippet>(&line, 1).unwrap(), snippet);
        assert!(from_line::<TrajectoryStep>(&line, 1).is_err());
    }

    #[test]
    fn question_validation_checks_supporting_ops() {
        let q = EvaluationQuestion {
            question_id: "q1".into(),
            qtype: QuestionType::StateTracking,
            text: "?".into(),
            gold_answers: ["A".to_string()].into(),
            supporting_ops: [3].into(),
        };
        assert!(q.validate(4).is_ok());
        assert!(q.validate(3).is_err());
    }
}
