//! Query-time retrieval: filter derivation, label-density ranking with a
//! semantic tie-break, and token-budgeted context assembly.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, normalize, Embedder};
use crate::gateway::{Gateway, ModelTask, Payload, TaskKind, NONE_MARKER, NOT_ANSWERABLE};
use crate::gateway::bullet_list;
use crate::model::{ContextualIntent, DroppedLabel, FilterConfig, Inventories, MemorySnippet};
use crate::records::Record;
use crate::store::{snippet_id, StoreView};
use crate::text::{ends_with_terminator, sentence_ends, Tokenizer, WordPunctTokenizer};

pub const DEFAULT_TOKEN_BUDGET: usize = 4096;
pub const DEFAULT_K_RETRIEVE: usize = 40;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityMode {
    /// Each matched entity type counts once.
    #[default]
    PerEntity,
    /// Entity types contribute at most one.
    CappedEntity,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderField {
    #[default]
    RewrittenText,
    Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k_retrieve: usize,
    pub token_budget: usize,
    pub density_mode: DensityMode,
    pub render: RenderField,
    /// Clear the scope set of every derived filter.
    pub ablate_scope: bool,
    pub ablate_event: bool,
    pub ablate_entity: bool,
    pub task_setting: String,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_retrieve: DEFAULT_K_RETRIEVE,
            token_budget: DEFAULT_TOKEN_BUDGET,
            density_mode: DensityMode::PerEntity,
            render: RenderField::RewrittenText,
            ablate_scope: false,
            ablate_event: false,
            ablate_entity: false,
            task_setting: "A long goal-oriented conversation between a user and an assistant.".into(),
        }
    }
}

impl RetrievalConfig {
    /// Tags of the enabled ablations, for reports.
    pub fn ablation_tags(&self) -> Vec<String> {
        let mut tags = Vec::new();
        if self.ablate_scope {
            tags.push("no_scope".to_string());
        }
        if self.ablate_event {
            tags.push("no_event".to_string());
        }
        if self.ablate_entity {
            tags.push("no_entity".to_string());
        }
        tags
    }

    pub fn apply_ablations(&self, f: &mut FilterConfig) {
        if self.ablate_scope {
            f.scopes.clear();
        }
        if self.ablate_event {
            f.event_types.clear();
        }
        if self.ablate_entity {
            f.entity_types.clear();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSnippet {
    pub snippet_ref: String,
    pub step_index: u64,
    pub density: u64,
    pub similarity: f64,
    pub rank: u64,
}

/// Count of intent constraints satisfied by the filter: scope and event add
/// one each, entity types one per match (or at most one when capped).
pub fn label_density(intent: &ContextualIntent, f: &FilterConfig, mode: DensityMode) -> u64 {
    let scope = u64::from(f.scopes.contains(&intent.scope));
    let event = u64::from(f.event_types.contains(&intent.event_type));
    let entities = intent.entity_types.intersection(&f.entity_types).count() as u64;
    let entities = match mode {
        DensityMode::PerEntity => entities,
        DensityMode::CappedEntity => entities.min(1),
    };
    scope + event + entities
}

/// Resolution at which similarities are compared, so that rounding noise
/// between equal cosines does not override the step tie-break.
pub const SIMILARITY_RESOLUTION: f64 = 1e-9;

fn similarity_key(s: f64) -> i64 {
    (s / SIMILARITY_RESOLUTION).round() as i64
}

/// Ranking order: density desc, similarity desc, step ascending.
pub fn ranking_order(a: &RankedSnippet, b: &RankedSnippet) -> Ordering {
    b.density
        .cmp(&a.density)
        .then_with(|| similarity_key(b.similarity).cmp(&similarity_key(a.similarity)))
        .then_with(|| a.step_index.cmp(&b.step_index))
}

fn query_vector(embedder: &dyn Embedder, query: &str) -> Option<Vec<f64>> {
    match embedder.embed(query) {
        Ok(mut v) => {
            normalize(&mut v);
            Some(v)
        }
        Err(e) => {
            tracing::warn!(error = %e, "query embedding failed, similarity set to 0");
            None
        }
    }
}

/// Scores every stored snippet and returns the top `k_retrieve`.
pub fn rank_snippets(
    f: &FilterConfig,
    query: &str,
    view: &StoreView,
    embedder: &dyn Embedder,
    k_retrieve: usize,
    mode: DensityMode,
) -> Vec<RankedSnippet> {
    let q = query_vector(embedder, query);
    let mut scored: Vec<RankedSnippet> = view
        .snippets
        .iter()
        .map(|s| {
            let similarity = match (&q, view.index.get(&s.summary_embedding_id)) {
                (Some(q), Some(rec)) if rec.vector.len() == q.len() => dot(q, &rec.vector).clamp(-1.0, 1.0),
                _ => 0.0,
            };
            RankedSnippet {
                snippet_ref: s.summary_embedding_id.clone(),
                step_index: s.step_index(),
                density: label_density(&s.intent, f, mode),
                similarity,
                rank: 0,
            }
        })
        .collect();
    scored.sort_by(ranking_order);
    scored.truncate(k_retrieve);
    for (i, r) in scored.iter_mut().enumerate() {
        r.rank = i as u64 + 1;
    }
    scored
}

/// One context line: "[step | role | scope | event] text", terminated.
pub fn render_snippet(s: &MemorySnippet, field: RenderField) -> String {
    let text = match field {
        RenderField::RewrittenText => &s.rewritten_text,
        RenderField::Summary => &s.summary,
    };
    let text = crate::text::collapse_whitespace(text);
    let mut line = format!(
        "[{} | {} | {} | {}] {}",
        s.step_index(),
        s.step.role,
        s.intent.scope,
        s.intent.event_type,
        text
    );
    if !ends_with_terminator(&line) {
        line.push('.');
    }
    line
}

/// Concatenates ranked snippets in rank order and, when over budget,
/// tail-truncates to the last sentence boundary that fits. Returns "" when
/// not even the first sentence fits.
pub fn assemble_context(
    ranked: &[RankedSnippet],
    view: &StoreView,
    budget: usize,
    tokenizer: &dyn Tokenizer,
    field: RenderField,
) -> String {
    let lines: Vec<String> = ranked
        .iter()
        .filter_map(|r| view.snippet(r.step_index))
        .map(|s| render_snippet(s, field))
        .collect();
    let full = lines.join("\n");
    fit_to_budget(&full, budget, tokenizer)
}

/// Longest sentence-terminated prefix of `text` within `budget` tokens.
pub fn fit_to_budget(text: &str, budget: usize, tokenizer: &dyn Tokenizer) -> String {
    if tokenizer.count(text) <= budget {
        return text.to_string();
    }
    let ends = sentence_ends(text);
    // Prefix token counts are monotone in prefix length.
    let fits = ends.partition_point(|&e| tokenizer.count(&text[..e]) <= budget);
    match fits {
        0 => String::new(),
        n => text[..ends[n - 1]].trim_end().to_string(),
    }
}

/// Asks the gateway for a filter configuration and keeps only labels from
/// the inventories. Gateway errors yield the empty configuration.
pub fn derive_filter_config(gateway: &Gateway, query: &str, inv: &Inventories) -> (FilterConfig, Vec<DroppedLabel>) {
    if inv.is_empty() {
        return (FilterConfig::default(), Vec::new());
    }
    let task = ModelTask::with(
        TaskKind::FilterDerive,
        [
            ("query", query.to_string()),
            ("scopes", bullet_list(&inv.scopes)),
            ("event_types", bullet_list(&inv.event_types)),
            ("entity_types", bullet_list(&inv.entity_types)),
        ],
    );
    match task.and_then(|t| gateway.run_task(&t)).map(|r| r.payload) {
        Ok(Payload::Filter {
            scopes,
            event_types,
            entity_types,
        }) => {
            let (cfg, dropped) = FilterConfig::validated(&scopes, &event_types, &entity_types, inv);
            for d in &dropped {
                tracing::warn!(field = %d.field, label = %d.label, "dropped filter label outside inventory");
            }
            (cfg, dropped)
        }
        Ok(_) => (FilterConfig::default(), Vec::new()),
        Err(e) => {
            tracing::warn!(error = %e, "filter derivation failed, using empty filter");
            (FilterConfig::default(), Vec::new())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub query: String,
    #[serde(default)]
    pub trajectory_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_only: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_retrieve: Option<usize>,
}

impl Record for QueryRequest {
    const KIND: &'static str = "query_request";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub trajectory_id: String,
    pub query: String,
    pub filter_config: FilterConfig,
    pub dropped_labels: Vec<DroppedLabel>,
    pub ranked: Vec<RankedSnippet>,
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

impl Record for QueryResponse {
    const KIND: &'static str = "query_response";
}

impl QueryResponse {
    pub fn ranked_steps(&self) -> Vec<u64> {
        self.ranked.iter().map(|r| r.step_index).collect()
    }
}

/// Generates an answer from an assembled context; None on gateway error.
pub fn generate_answer(gateway: &Gateway, question: &str, context: &str, task_setting: &str) -> Option<String> {
    let turns = if context.trim().is_empty() { NONE_MARKER } else { context };
    let task = ModelTask::with(
        TaskKind::AnswerGenerate,
        [
            ("task_setting", task_setting.to_string()),
            ("retrieved_turns", turns.to_string()),
            ("question", question.to_string()),
        ],
    );
    match task.and_then(|t| gateway.run_task(&t)) {
        Ok(r) => r.payload.as_text().map(str::to_string),
        Err(e) => {
            tracing::warn!(error = %e, "answer generation failed");
            None
        }
    }
}

/// Full query path over one store view.
pub fn answer_query(
    gateway: &Gateway,
    embedder: &dyn Embedder,
    view: &StoreView,
    request: &QueryRequest,
    config: &RetrievalConfig,
) -> QueryResponse {
    let budget = request.budget.unwrap_or(config.token_budget).max(1);
    let k = request.k_retrieve.unwrap_or(config.k_retrieve).max(1);
    let context_only = request.context_only.unwrap_or(false);
    let mut response = QueryResponse {
        trajectory_id: view.trajectory_id.clone(),
        query: request.query.clone(),
        filter_config: FilterConfig::default(),
        dropped_labels: Vec::new(),
        ranked: Vec::new(),
        context: String::new(),
        answer: None,
    };
    if view.is_empty() {
        if !context_only {
            response.answer = Some(NOT_ANSWERABLE.to_string());
        }
        return response;
    }
    let (mut filter, dropped) = derive_filter_config(gateway, &request.query, &view.inventories());
    config.apply_ablations(&mut filter);
    let ranked = rank_snippets(&filter, &request.query, view, embedder, k, config.density_mode);
    let context = assemble_context(&ranked, view, budget, &WordPunctTokenizer, config.render);
    if !context_only {
        response.answer = generate_answer(gateway, &request.query, &context, &config.task_setting);
    }
    response.filter_config = filter;
    response.dropped_labels = dropped;
    response.ranked = ranked;
    response.context = context;
    response
}

/// Entity types of a filter that a set of intents covers, for diagnostics.
pub fn covered_labels(intent: &ContextualIntent, f: &FilterConfig) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    if f.scopes.contains(&intent.scope) {
        out.insert(format!("scope:{}", intent.scope));
    }
    if f.event_types.contains(&intent.event_type) {
        out.insert(format!("event:{}", intent.event_type));
    }
    for e in intent.entity_types.intersection(&f.entity_types) {
        out.insert(format!("entity:{e}"));
    }
    out
}

/// Id of the snippet stored for a step.
pub fn snippet_ref(step_index: u64) -> String {
    snippet_id(step_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddingRecord, HashEmbedder};
    use crate::model::{Timestamp, TrajectoryStep};
    use crate::store::{Backend, InMemoryBackend, SessionState};
    use proptest::prelude::*;

    fn intent(scope: &str, event: &str, entities: &[&str]) -> ContextualIntent {
        ContextualIntent {
            scope: scope.into(),
            event_type: event.into(),
            entity_types: entities.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn filter(scopes: &[&str], events: &[&str], entities: &[&str]) -> FilterConfig {
        let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        FilterConfig {
            scopes: set(scopes),
            event_types: set(events),
            entity_types: set(entities),
        }
    }

    #[test]
    fn density_examples() {
        let i = intent("S", "E", &["a", "b", "c"]);
        assert_eq!(label_density(&i, &FilterConfig::default(), DensityMode::PerEntity), 0);
        assert_eq!(label_density(&i, &filter(&["S"], &["E"], &["a", "b"]), DensityMode::PerEntity), 4);
        assert_eq!(label_density(&i, &filter(&["S"], &["E"], &["a", "b"]), DensityMode::CappedEntity), 3);
        assert_eq!(label_density(&i, &filter(&["S"], &[], &[]), DensityMode::PerEntity), 1);
    }

    /// Builds a store view from (intent, text) pairs.
    fn view_of(items: &[(ContextualIntent, String)]) -> StoreView {
        let emb = HashEmbedder::default();
        let mut b = InMemoryBackend::new("t");
        let mut session = SessionState::default();
        for (i, (it, _)) in items.iter().enumerate() {
            session.event_vocab.insert(&it.event_type, i as u64).unwrap();
            for e in &it.entity_types {
                session.entity_vocab.insert(e, i as u64).unwrap();
            }
            session.scope.register(&it.scope);
        }
        for (i, (it, text)) in items.iter().enumerate() {
            let s = MemorySnippet {
                step: TrajectoryStep::new(i as u64, "user", text.clone(), Timestamp::Tick(i as u64)),
                rewritten_text: text.clone(),
                intent: it.clone(),
                summary: text.clone(),
                summary_embedding_id: snippet_id(i as u64),
                degraded: false,
            };
            let rec = EmbeddingRecord {
                id: snippet_id(i as u64),
                text: text.clone(),
                vector: emb.embed(text).unwrap(),
            };
            b.append(s, vec![rec], session.clone()).unwrap();
        }
        b.view()
    }

    #[test]
    fn saturation_and_pure_similarity_reduction() {
        let items: Vec<_> = (0..7)
            .map(|i| (intent("S", "E", &[]), format!("hotel number {i} price")))
            .collect();
        let view = view_of(&items);
        let emb = HashEmbedder::default();
        let r = rank_snippets(&FilterConfig::default(), "hotel price", &view, &emb, 40, DensityMode::PerEntity);
        assert_eq!(r.len(), 7);
        assert!(r.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        assert_eq!(r.iter().map(|x| x.rank).collect::<Vec<_>>(), (1..=7).collect::<Vec<_>>());
    }

    fn brute_force(f: &FilterConfig, query: &str, items: &[(ContextualIntent, String)], k: usize) -> Vec<u64> {
        let emb = HashEmbedder::default();
        let q = emb.embed(query).unwrap();
        let mut all: Vec<(u64, f64, u64)> = items
            .iter()
            .enumerate()
            .map(|(i, (it, text))| {
                let v = emb.embed(text).unwrap();
                let sim: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                let sim = (sim * 1e9).round();
                let d = u64::from(f.scopes.contains(&it.scope))
                    + u64::from(f.event_types.contains(&it.event_type))
                    + it.entity_types.iter().filter(|e| f.entity_types.contains(*e)).count() as u64;
                (d, sim, i as u64)
            })
            .collect();
        // Exhaustive comparison sort with the same key.
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let (a, b) = (all[i], all[j]);
                let b_first = b.0 > a.0 || (b.0 == a.0 && (b.1 > a.1 || (b.1 == a.1 && b.2 < a.2)));
                if b_first {
                    all.swap(i, j);
                }
            }
        }
        all.into_iter().take(k).map(|x| x.2).collect()
    }

    #[test]
    fn ten_snippet_oracle() {
        let words = ["hotel", "price", "lunch", "rating", "museum", "day", "book", "cheap", "view", "dinner"];
        let items: Vec<_> = (0..10)
            .map(|i| {
                let it = intent(if i % 2 == 0 { "Day 1" } else { "Day 2" }, if i % 3 == 0 { "Ask" } else { "Propose" }, if i % 4 == 0 { &["Price"] } else { &[] });
                (it, format!("{} {} {}", words[i], words[(i * 3) % 10], words[(i * 7) % 10]))
            })
            .collect();
        let view = view_of(&items);
        let f = filter(&["Day 1"], &["Ask"], &["Price"]);
        let got: Vec<u64> = rank_snippets(&f, "hotel price", &view, &HashEmbedder::default(), 10, DensityMode::PerEntity)
            .iter()
            .map(|r| r.step_index)
            .collect();
        assert_eq!(got, brute_force(&f, "hotel price", &items, 10));
    }

    fn arb_items() -> impl Strategy<Value = Vec<(ContextualIntent, String)>> {
        let word = prop::sample::select(vec!["hotel", "price", "lunch", "rating", "museum", "day", "book"]);
        let item = (
            prop::sample::select(vec!["A", "B", "C"]),
            prop::sample::select(vec!["E1", "E2"]),
            prop::sample::subsequence(vec!["Price", "Rating", "Date"], 0..=3),
            prop::collection::vec(word, 1..4),
        )
            .prop_map(|(s, e, ents, words)| (intent(s, e, &ents), words.join(" ")));
        prop::collection::vec(item, 0..=12)
    }

    fn arb_filter() -> impl Strategy<Value = FilterConfig> {
        (
            prop::sample::subsequence(vec!["A", "B", "C"], 0..=3),
            prop::sample::subsequence(vec!["E1", "E2"], 0..=2),
            prop::sample::subsequence(vec!["Price", "Rating", "Date"], 0..=3),
        )
            .prop_map(|(s, e, k)| filter(&s, &e, &k))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ranking_matches_oracle(items in arb_items(), f in arb_filter(), k in 1usize..15) {
            let view = view_of(&items);
            let got: Vec<u64> = rank_snippets(&f, "hotel price", &view, &HashEmbedder::default(), k, DensityMode::PerEntity)
                .iter().map(|r| r.step_index).collect();
            prop_assert_eq!(got, brute_force(&f, "hotel price", &items, k));
        }

        #[test]
        fn adding_a_label_never_lowers_density(
            items in arb_items(),
            f in arb_filter(),
            extra in prop::sample::select(vec!["A", "B", "E1", "E2", "Price", "Date"]),
        ) {
            let mut g = f.clone();
            match extra {
                "A" | "B" => { g.scopes.insert(extra.to_string()); }
                "E1" | "E2" => { g.event_types.insert(extra.to_string()); }
                _ => { g.entity_types.insert(extra.to_string()); }
            }
            for (it, _) in &items {
                prop_assert!(label_density(it, &g, DensityMode::PerEntity) >= label_density(it, &f, DensityMode::PerEntity));
            }
        }
    }

    #[test]
    fn near_equal_similarities_fall_back_to_step_order() {
        let r = |step: u64, similarity: f64| RankedSnippet {
            snippet_ref: snippet_ref(step),
            step_index: step,
            density: 1,
            similarity,
            rank: 0,
        };
        let a = r(0, 0.447213595499958);
        let b = r(7, 0.447213595499958 + 4.0 * f64::EPSILON);
        assert_eq!(ranking_order(&a, &b), Ordering::Less);
        assert_eq!(ranking_order(&r(0, 0.4), &r(7, 0.5)), Ordering::Greater);
    }

    #[test]
    fn context_rendering_and_truncation() {
        let items = vec![
            (intent("S", "E", &[]), "First sentence here. Second sentence is longer than the first".to_string()),
            (intent("S", "E", &[]), "Another snippet. With two sentences!".to_string()),
        ];
        let view = view_of(&items);
        let ranked = rank_snippets(&FilterConfig::default(), "sentence", &view, &HashEmbedder::default(), 40, DensityMode::PerEntity);
        let tok = WordPunctTokenizer;
        let full = assemble_context(&ranked, &view, 4096, &tok, RenderField::RewrittenText);
        assert!(full.contains("[0 | user | S | E] First sentence here."));
        assert!(full.contains("than the first."));
        let total = tok.count(&full);
        let cut = assemble_context(&ranked, &view, total - 3, &tok, RenderField::RewrittenText);
        assert!(tok.count(&cut) <= total - 3);
        assert!(ends_with_terminator(&cut));
        assert_eq!(assemble_context(&ranked, &view, 2, &tok, RenderField::RewrittenText), "");
        assert_eq!(assemble_context(&[], &view, 10, &tok, RenderField::RewrittenText), "");
    }

    #[test]
    fn empty_inventories_and_invalid_proposals() {
        let gw = Gateway::deterministic();
        let (f, d) = derive_filter_config(&gw, "anything", &Inventories::default());
        assert!(f.is_empty() && d.is_empty());
        let scripted = Gateway::new(
            std::sync::Arc::new(crate::gateway::ScriptedProvider::new(|_, _| {
                Ok(r#"{"scopes":["Day 1 itinerary","Mars"],"event_types":[],"entity_types":["Price"]}"#.into())
            })),
            0,
        );
        let inv = Inventories {
            scopes: vec!["Day 1 Itinerary".into()],
            event_types: vec!["Ask".into()],
            entity_types: vec!["Price".into()],
        };
        let (f, d) = derive_filter_config(&scripted, "q", &inv);
        assert_eq!(f.scopes, BTreeSet::from(["Day 1 Itinerary".to_string()]));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].label, "Mars");
    }

    #[test]
    fn empty_store_is_not_answerable_and_context_only_omits_answer() {
        let gw = Gateway::deterministic();
        let emb = HashEmbedder::default();
        let req = QueryRequest {
            query: "What hotel?".into(),
            trajectory_id: "t".into(),
            budget: None,
            context_only: None,
            k_retrieve: None,
        };
        let r = answer_query(&gw, &emb, &StoreView::empty("t"), &req, &RetrievalConfig::default());
        assert_eq!(r.answer.as_deref(), Some(NOT_ANSWERABLE));
        let view = view_of(&[(intent("S", "E", &[]), "How about the Apollo Hotel?".into())]);
        let r = answer_query(&gw, &emb, &view, &QueryRequest { context_only: Some(true), ..req.clone() }, &RetrievalConfig::default());
        assert!(r.answer.is_none() && !r.context.is_empty());
        let r = answer_query(&gw, &emb, &view, &req, &RetrievalConfig::default());
        assert_eq!(r.answer.as_deref(), Some("Apollo Hotel"));
    }
}
