//! Measurement: answer-set scoring, entity resolution recall, label-overlap
//! diagnostics and the end-to-end evaluation runner.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{self, BenchError, BenchInstance, ClosedWorld, ProvenanceEntry};
use crate::embedding::Embedder;
use crate::gateway::{bullet_list, Gateway, ModelTask, Payload, TaskKind, NOT_ANSWERABLE};
use crate::intent::{IngestError, IngestSession, IngestionConfig, RewriteMode};
use crate::model::{
    FilterConfig, MemorySnippet, QuestionType, SymbolicOperation, TrajectoryStep,
};
use crate::records::{self, Record, RecordError};
use crate::retrieval::{answer_query, covered_labels, label_density, DensityMode, QueryRequest, RetrievalConfig};
use crate::store::{Backend, InMemoryBackend, Store, StoreView};
use crate::text::{normalize_answer, Tokenizer, WordPunctTokenizer};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("question {0} has no gold answers")]
    EmptyGold(String),
    #[error("question {0} lists no gold turns")]
    EmptyGoldTurns(String),
    #[error("nothing to average")]
    EmptyInput,
    #[error("operation {op_index} has no snippet at its step")]
    AlignmentGap { op_index: u64 },
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Answer-set scoring

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatcherKind {
    #[default]
    Exact,
    ModelJudged,
}

/// How predicted answers are matched against gold answers.
pub enum Matcher<'a> {
    /// Normalized string equality.
    Exact,
    /// One judge call per gold answer.
    ModelJudged { gateway: &'a Gateway, question: &'a str },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub question_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: BTreeSet<String>,
    pub missed: BTreeSet<String>,
    pub spurious: BTreeSet<String>,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Splits a generated answer into a candidate set; the not-answerable
/// marker yields the empty set.
pub fn parse_prediction(answer: &str) -> BTreeSet<String> {
    if normalize_answer(answer) == normalize_answer(NOT_ANSWERABLE) {
        return BTreeSet::new();
    }
    answer
        .split([';', '\n'])
        .map(|s| s.trim().trim_start_matches(['-', '*']).trim())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn dedup_normalized(items: &BTreeSet<String>) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for item in items {
        out.entry(normalize_answer(item)).or_insert_with(|| item.clone());
    }
    out.remove("");
    out
}

/// Precision/recall/F1 of a predicted answer set against gold. Answers are
/// compared after normalization and deduplicated on their normalized form.
/// An empty prediction scores zero throughout.
pub fn score_answer_set(
    question_id: &str,
    predicted: &BTreeSet<String>,
    gold: &BTreeSet<String>,
    matcher: &Matcher,
) -> Result<ScoreRecord, EvalError> {
    let gold_n = dedup_normalized(gold);
    if gold_n.is_empty() {
        return Err(EvalError::EmptyGold(question_id.to_string()));
    }
    let pred_n = dedup_normalized(predicted);
    let (matched_gold, matched_pred): (BTreeSet<String>, BTreeSet<String>) = match matcher {
        Matcher::Exact => {
            let keys: BTreeSet<&String> = gold_n.keys().filter(|k| pred_n.contains_key(*k)).collect();
            (
                keys.iter().map(|k| gold_n[*k].clone()).collect(),
                keys.iter().map(|k| pred_n[*k].clone()).collect(),
            )
        }
        Matcher::ModelJudged { gateway, question } => {
            let response = pred_n.values().cloned().collect::<Vec<_>>().join("; ");
            let mut matched = BTreeSet::new();
            if !pred_n.is_empty() {
                for g in gold_n.values() {
                    let task = ModelTask::with(
                        TaskKind::AnswerJudge,
                        [
                            ("question", question.to_string()),
                            ("gold_answers", bullet_list(std::slice::from_ref(g))),
                            ("response", response.clone()),
                        ],
                    );
                    if let Ok(Payload::Count(n)) = task.and_then(|t| gateway.run_task(&t)).map(|r| r.payload) {
                        if n > 0 {
                            matched.insert(g.clone());
                        }
                    }
                }
            }
            // judged matches are not attributed to specific predictions
            let credited: BTreeSet<String> = pred_n.values().take(matched.len()).cloned().collect();
            (matched, credited)
        }
    };
    let precision = if pred_n.is_empty() {
        0.0
    } else {
        matched_pred.len() as f64 / pred_n.len() as f64
    };
    let recall = matched_gold.len() as f64 / gold_n.len() as f64;
    Ok(ScoreRecord {
        question_id: question_id.to_string(),
        precision,
        recall,
        f1: f1_score(precision, recall),
        missed: gold_n.values().filter(|g| !matched_gold.contains(*g)).cloned().collect(),
        spurious: pred_n.values().filter(|p| !matched_pred.contains(*p)).cloned().collect(),
        matched: matched_gold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Unweighted mean over questions.
pub fn macro_average(records: &[ScoreRecord]) -> Result<MacroScores, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = records.len() as f64;
    Ok(MacroScores {
        count: records.len(),
        precision: records.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: records.iter().map(|r| r.recall).sum::<f64>() / n,
        f1: records.iter().map(|r| r.f1).sum::<f64>() / n,
    })
}

// ---------------------------------------------------------------------------
// Entity resolution recall

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrReport {
    pub err: f64,
    pub referential_ops: usize,
    pub credited_ops: usize,
    pub missed_ops: Vec<u64>,
}

/// Canonical entity name an operation refers to, if it is referential.
/// Evidence ids without a name are mapped through the world registry.
pub fn canonical_entity(op: &SymbolicOperation, world: Option<&ClosedWorld>) -> Option<String> {
    if let Some(e) = op.get("entity") {
        return Some(e.to_string());
    }
    let id = op.get("evidence_id")?;
    world?
        .entities
        .iter()
        .find(|e| e.attr("evidence_id") == Some(id))
        .map(|e| e.name.clone())
}

fn normalize_name(s: &str) -> String {
    s.trim().to_lowercase()
}

fn aligned_steps(op_index: u64, provenance: &[ProvenanceEntry]) -> Vec<u64> {
    provenance.iter().filter(|p| p.op_index == op_index).map(|p| p.step_index).collect()
}

/// Fraction of referential operations whose canonical entity appears in the
/// rewritten text or summary of a snippet aligned to the operation.
pub fn audit_err(
    ops: &[SymbolicOperation],
    snippets: &[MemorySnippet],
    provenance: &[ProvenanceEntry],
    world: Option<&ClosedWorld>,
) -> Result<ErrReport, EvalError> {
    let by_step: BTreeMap<u64, &MemorySnippet> = snippets.iter().map(|s| (s.step_index(), s)).collect();
    let mut referential = 0;
    let mut missed = Vec::new();
    for op in ops {
        let Some(name) = canonical_entity(op, world) else { continue };
        referential += 1;
        let steps = aligned_steps(op.op_index, provenance);
        if steps.is_empty() {
            return Err(EvalError::AlignmentGap { op_index: op.op_index });
        }
        let needle = normalize_name(&name);
        let mut hit = false;
        for step in steps {
            let s = by_step.get(&step).ok_or(EvalError::AlignmentGap { op_index: op.op_index })?;
            if s.rewritten_text.to_lowercase().contains(&needle) || s.summary.to_lowercase().contains(&needle) {
                hit = true;
            }
        }
        if !hit {
            missed.push(op.op_index);
        }
    }
    let credited = referential - missed.len();
    Ok(ErrReport {
        err: if referential == 0 { 1.0 } else { credited as f64 / referential as f64 },
        referential_ops: referential,
        credited_ops: credited,
        missed_ops: missed,
    })
}

/// Fraction of referential operations whose raw surface text already names
/// the canonical entity.
pub fn explicit_mention_fraction(
    ops: &[SymbolicOperation],
    steps: &[TrajectoryStep],
    provenance: &[ProvenanceEntry],
    world: Option<&ClosedWorld>,
) -> f64 {
    let mut referential = 0usize;
    let mut explicit = 0usize;
    for op in ops {
        let Some(name) = canonical_entity(op, world) else { continue };
        referential += 1;
        let needle = normalize_name(&name);
        if aligned_steps(op.op_index, provenance)
            .iter()
            .filter_map(|i| steps.get(*i as usize))
            .any(|s| s.action_text.to_lowercase().contains(&needle))
        {
            explicit += 1;
        }
    }
    if referential == 0 {
        1.0
    } else {
        explicit as f64 / referential as f64
    }
}

// ---------------------------------------------------------------------------
// Label-overlap diagnostics

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub q_gt_at_max: f64,
    pub q_gt_full: f64,
    pub q_zero: f64,
    pub gt_dom: f64,
    pub gt_cov: f64,
    pub gt_best_cov: f64,
}

/// One question's derived filter and gold turns.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapInput {
    pub question_id: String,
    pub filter: FilterConfig,
    pub gold_turns: BTreeSet<u64>,
}

/// Per-instance diagnostics over all snippets as candidates. Questions with
/// an all-zero overlap contribute zero to every metric except `q_zero`; a
/// gold turn's coverage is the fraction of selected labels it carries, and
/// `gt_cov` averages that over gold turns while `gt_best_cov` takes the best.
pub fn overlap_diagnostics(inputs: &[OverlapInput], snippets: &[MemorySnippet]) -> Result<OverlapReport, EvalError> {
    if inputs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let by_step: BTreeMap<u64, &MemorySnippet> = snippets.iter().map(|s| (s.step_index(), s)).collect();
    let mut sum = OverlapReport::default();
    for q in inputs {
        if q.gold_turns.is_empty() {
            return Err(EvalError::EmptyGoldTurns(q.question_id.clone()));
        }
        let density = |s: &MemorySnippet| label_density(&s.intent, &q.filter, DensityMode::PerEntity);
        let max = snippets.iter().map(density).max().unwrap_or(0);
        if max == 0 {
            sum.q_zero += 1.0;
            continue;
        }
        let selected = q.filter.label_count() as f64;
        let gold: Vec<&MemorySnippet> = q.gold_turns.iter().filter_map(|t| by_step.get(t).copied()).collect();
        let coverage: Vec<f64> = q
            .gold_turns
            .iter()
            .map(|t| by_step.get(t).map_or(0.0, |s| covered_labels(&s.intent, &q.filter).len() as f64 / selected))
            .collect();
        let densest = gold.iter().filter(|s| density(s) == max).count();
        if densest > 0 {
            sum.q_gt_at_max += 1.0;
        }
        if coverage.iter().any(|c| *c >= 1.0) {
            sum.q_gt_full += 1.0;
        }
        sum.gt_dom += densest as f64 / q.gold_turns.len() as f64;
        sum.gt_cov += coverage.iter().sum::<f64>() / coverage.len() as f64;
        sum.gt_best_cov += coverage.iter().cloned().fold(0.0, f64::max);
    }
    let n = inputs.len() as f64;
    Ok(OverlapReport {
        q_gt_at_max: sum.q_gt_at_max / n,
        q_gt_full: sum.q_gt_full / n,
        q_zero: sum.q_zero / n,
        gt_dom: sum.gt_dom / n,
        gt_cov: sum.gt_cov / n,
        gt_best_cov: sum.gt_best_cov / n,
    })
}

/// Macro-average of per-instance reports.
pub fn macro_overlap(reports: &[OverlapReport]) -> Result<OverlapReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&OverlapReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(OverlapReport {
        q_gt_at_max: mean(|r| r.q_gt_at_max),
        q_gt_full: mean(|r| r.q_gt_full),
        q_zero: mean(|r| r.q_zero),
        gt_dom: mean(|r| r.gt_dom),
        gt_cov: mean(|r| r.gt_cov),
        gt_best_cov: mean(|r| r.gt_best_cov),
    })
}

// ---------------------------------------------------------------------------
// Runner

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ingestion: IngestionConfig,
    pub retrieval: RetrievalConfig,
    pub matcher: MatcherKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ingestion: IngestionConfig::default(),
            retrieval: RetrievalConfig::default(),
            matcher: MatcherKind::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub instance: String,
    pub question_id: String,
    pub qtype: QuestionType,
    pub question: String,
    pub answer: String,
    pub predicted: BTreeSet<String>,
    pub gold_answers: BTreeSet<String>,
    pub score: ScoreRecord,
    pub filter_config: FilterConfig,
    pub gold_steps: BTreeSet<u64>,
    pub top_steps: Vec<u64>,
    pub gold_hit: bool,
    pub context_tokens: usize,
}

impl Record for QuestionResult {
    const KIND: &'static str = "question_result";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub instance: String,
    pub domain: String,
    pub seed: u64,
    pub steps: usize,
    pub questions: usize,
    pub err: ErrReport,
    pub explicit_mention_fraction: f64,
    pub scores: Option<MacroScores>,
    pub overlap: Option<OverlapReport>,
    pub gold_hit_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub questions: usize,
    pub scores: MacroScores,
    pub by_type: BTreeMap<String, MacroScores>,
    pub err: f64,
    pub overlap: OverlapReport,
    pub gold_hit_rate: f64,
    pub mean_context_tokens: f64,
    pub gateway_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub rewrite_mode: RewriteMode,
    pub view_source: ViewSource,
    pub matcher: MatcherKind,
    pub ablations: Vec<String>,
    pub density_mode: DensityMode,
    pub k_retrieve: usize,
    pub token_budget: usize,
    pub empty_prediction_precision: f64,
    pub overlap_candidates: String,
    pub zero_label_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub instances: Vec<InstanceSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Aggregate>,
    pub warnings: Vec<String>,
    pub timing: Timing,
}

impl EvalReport {
    /// The report without its timing section, for comparisons.
    pub fn without_timing(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timing");
        }
        v
    }
}

/// Ingests an instance trajectory into a fresh in-memory store.
pub fn ingest_instance(
    inst: &BenchInstance,
    name: &str,
    gateway: Arc<Gateway>,
    embedder: Arc<dyn Embedder>,
    cfg: &IngestionConfig,
) -> Result<StoreView, EvalError> {
    let mut session = IngestSession::new(InMemoryBackend::new(name), gateway, embedder, cfg.clone())?;
    if cfg.rewrite_mode == RewriteMode::Oracle {
        session = session.with_oracle(inst.oracle_rewrites());
    }
    session.ingest_all(inst.trajectory.iter().cloned())?;
    Ok(session.backend().view())
}

pub struct InstanceOutcome {
    pub summary: InstanceSummary,
    pub results: Vec<QuestionResult>,
    pub scores: Vec<ScoreRecord>,
}

/// Answers and scores every question of an ingested instance.
pub fn evaluate_instance(
    inst: &BenchInstance,
    name: &str,
    view: &StoreView,
    gateway: &Gateway,
    embedder: &dyn Embedder,
    cfg: &EvalConfig,
) -> Result<InstanceOutcome, EvalError> {
    let snippets: &[MemorySnippet] = &view.snippets;
    let err = audit_err(&inst.storyboard, snippets, &inst.provenance, Some(&inst.world))?;
    let explicit = explicit_mention_fraction(&inst.storyboard, &inst.trajectory, &inst.provenance, Some(&inst.world));
    let mut results = Vec::new();
    let mut scores = Vec::new();
    let mut overlap_inputs = Vec::new();
    for q in &inst.questions {
        let request = QueryRequest {
            query: q.text.clone(),
            trajectory_id: name.to_string(),
            budget: None,
            context_only: None,
            k_retrieve: None,
        };
        let response = answer_query(gateway, embedder, view, &request, &cfg.retrieval);
        let answer = response.answer.clone().unwrap_or_else(|| NOT_ANSWERABLE.to_string());
        let predicted = parse_prediction(&answer);
        let matcher = match cfg.matcher {
            MatcherKind::Exact => Matcher::Exact,
            MatcherKind::ModelJudged => Matcher::ModelJudged {
                gateway,
                question: &q.text,
            },
        };
        let score = score_answer_set(&q.question_id, &predicted, &q.gold_answers, &matcher)?;
        let gold_steps = inst.gold_steps(q);
        let top_steps = response.ranked_steps();
        let gold_hit = top_steps.iter().any(|s| gold_steps.contains(s));
        overlap_inputs.push(OverlapInput {
            question_id: q.question_id.clone(),
            filter: response.filter_config.clone(),
            gold_turns: gold_steps.clone(),
        });
        scores.push(score.clone());
        results.push(QuestionResult {
            instance: name.to_string(),
            question_id: q.question_id.clone(),
            qtype: q.qtype,
            question: q.text.clone(),
            answer,
            predicted,
            gold_answers: q.gold_answers.clone(),
            score,
            filter_config: response.filter_config,
            gold_steps,
            top_steps,
            gold_hit,
            context_tokens: WordPunctTokenizer.count(&response.context),
        });
    }
    let overlap = if overlap_inputs.is_empty() {
        None
    } else {
        Some(overlap_diagnostics(&overlap_inputs, snippets)?)
    };
    let gold_hit_rate =
        (!results.is_empty()).then(|| results.iter().filter(|r| r.gold_hit).count() as f64 / results.len() as f64);
    Ok(InstanceOutcome {
        summary: InstanceSummary {
            instance: name.to_string(),
            domain: inst.meta.domain.as_str().to_string(),
            seed: inst.meta.seed,
            steps: inst.trajectory.len(),
            questions: inst.questions.len(),
            err,
            explicit_mention_fraction: explicit,
            scores: macro_average(&scores).ok(),
            overlap,
            gold_hit_rate,
        },
        results,
        scores,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Where evaluation reads each instance's memory from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSource {
    /// Ingest the trajectory into a fresh in-memory store.
    #[default]
    Ingest,
    /// Load the store previously ingested under the instance directory.
    InstanceStore,
}

/// Loads the on-disk store ingested for an instance directory.
pub fn load_instance_store(dir: &Path) -> Result<StoreView, EvalError> {
    let store = Store::open(dir.join(bench::MEMORY_DIR)).map_err(IngestError::from)?;
    store.load_view(&bench::instance_name(dir)).map_err(|e| IngestError::from(e).into())
}

/// Ingests (or loads) and evaluates every instance directory, returning the
/// report and the per-question records. Writes `report.json` and
/// `questions.jsonl` when `out_dir` is given.
pub fn run_eval(
    instance_dirs: &[PathBuf],
    out_dir: Option<&Path>,
    cfg: &EvalConfig,
    source: ViewSource,
    gateway: Arc<Gateway>,
    embedder: Arc<dyn Embedder>,
) -> Result<(EvalReport, Vec<QuestionResult>), EvalError> {
    let started = Instant::now();
    let calls_before = gateway.calls();
    let mut summaries = Vec::new();
    let mut all_results = Vec::new();
    let mut all_scores = Vec::new();
    let mut warnings = Vec::new();
    for dir in instance_dirs {
        let inst = bench::read_instance(dir)?;
        let name = bench::instance_name(dir);
        let view = match source {
            ViewSource::Ingest => ingest_instance(&inst, &name, gateway.clone(), embedder.clone(), &cfg.ingestion)?,
            ViewSource::InstanceStore => load_instance_store(dir)?,
        };
        let outcome = evaluate_instance(&inst, &name, &view, &gateway, embedder.as_ref(), cfg)?;
        if inst.questions.is_empty() {
            warnings.push(format!("{name}: no questions"));
        }
        summaries.push(outcome.summary);
        all_results.extend(outcome.results);
        all_scores.extend(outcome.scores);
    }
    let aggregate = if all_scores.is_empty() {
        warnings.push("no questions to score; aggregate omitted".into());
        None
    } else {
        let mut by_type = BTreeMap::new();
        for t in QuestionType::ALL {
            let subset: Vec<ScoreRecord> = all_results
                .iter()
                .filter(|r| r.qtype == t)
                .map(|r| r.score.clone())
                .collect();
            if let Ok(m) = macro_average(&subset) {
                by_type.insert(t.as_str().to_string(), m);
            }
        }
        let overlaps: Vec<OverlapReport> = summaries.iter().filter_map(|s| s.overlap).collect();
        let hit_rates: Vec<f64> = summaries.iter().filter_map(|s| s.gold_hit_rate).collect();
        Some(Aggregate {
            questions: all_scores.len(),
            scores: macro_average(&all_scores)?,
            by_type,
            err: summaries.iter().map(|s| s.err.err).sum::<f64>() / summaries.len() as f64,
            overlap: macro_overlap(&overlaps)?,
            gold_hit_rate: hit_rates.iter().sum::<f64>() / hit_rates.len() as f64,
            mean_context_tokens: all_results.iter().map(|r| r.context_tokens as f64).sum::<f64>()
                / all_results.len() as f64,
            gateway_calls: gateway.calls() - calls_before,
        })
    };
    let report = EvalReport {
        meta: ReportMeta {
            rewrite_mode: cfg.ingestion.rewrite_mode,
            view_source: source,
            matcher: cfg.matcher,
            ablations: cfg.retrieval.ablation_tags(),
            density_mode: cfg.retrieval.density_mode,
            k_retrieve: cfg.retrieval.k_retrieve,
            token_budget: cfg.retrieval.token_budget,
            empty_prediction_precision: 0.0,
            overlap_candidates: "all_snippets".into(),
            zero_label_coverage: 0.0,
        },
        instances: summaries,
        aggregate,
        warnings,
        timing: Timing {
            elapsed_ms: started.elapsed().as_millis() as u64,
        },
    };
    if let Some(out) = out_dir {
        fs::create_dir_all(out).map_err(io_err(out))?;
        let path = out.join("report.json");
        let body = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        fs::write(&path, body).map_err(io_err(&path))?;
        records::write_file(&out.join("questions.jsonl"), &all_results)?;
    }
    Ok((report, all_results))
}

/// Two-column table of aggregate scores, one row per report.
pub fn render_score_table(rows: &[(String, &EvalReport)]) -> String {
    let mut out = format!("{:<28} {:>6} {:>6} {:>6} {:>6} {:>8}\n", "run", "P", "R", "F1", "ERR", "hit@k");
    for (name, r) in rows {
        match &r.aggregate {
            Some(a) => out.push_str(&format!(
                "{:<28} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>8.3}\n",
                name, a.scores.precision, a.scores.recall, a.scores.f1, a.err, a.gold_hit_rate
            )),
            None => out.push_str(&format!("{name:<28} (no aggregate)\n")),
        }
    }
    out
}

/// Overlap diagnostics, one row per report.
pub fn render_overlap_table(rows: &[(String, &EvalReport)]) -> String {
    let mut out = format!(
        "{:<28} {:>9} {:>9} {:>7} {:>7} {:>7} {:>11}\n",
        "run", "Q_GT@MAX", "Q_GT_FULL", "Q_ZERO", "GT_DOM", "GT_COV", "GT_BEST_COV"
    );
    for (name, r) in rows {
        if let Some(a) = &r.aggregate {
            let o = &a.overlap;
            out.push_str(&format!(
                "{:<28} {:>9.2} {:>9.2} {:>7.2} {:>7.2} {:>7.2} {:>11.2}\n",
                name, o.q_gt_at_max, o.q_gt_full, o.q_zero, o.gt_dom, o.gt_cov, o.gt_best_cov
            ));
        }
    }
    out
}

/// Questions whose gold turn sits in the top `k` of a ranked list.
pub fn gold_hit_rate(results: &[QuestionResult], k: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results
        .iter()
        .filter(|r| r.top_steps.iter().take(k).any(|s| r.gold_steps.contains(s)))
        .count();
    hits as f64 / results.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ContextualIntent, Timestamp};
    use proptest::prelude::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn worked_partial_credit_case() {
        let r = score_answer_set("q", &set(&["A", "B", "C"]), &set(&["A", "B", "D", "E"]), &Matcher::Exact).unwrap();
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 0.5).abs() < 1e-12);
        assert!((r.f1 - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(r.matched, set(&["A", "B"]));
        assert_eq!(r.missed, set(&["D", "E"]));
        assert_eq!(r.spurious, set(&["C"]));
    }

    #[test]
    fn empty_prediction_and_empty_gold() {
        let r = score_answer_set("q", &BTreeSet::new(), &set(&["A"]), &Matcher::Exact).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert!(matches!(
            score_answer_set("q", &set(&["A"]), &BTreeSet::new(), &Matcher::Exact),
            Err(EvalError::EmptyGold(_))
        ));
        assert!(matches!(macro_average(&[]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn normalization_ignores_case_and_punctuation() {
        let r = score_answer_set("q", &set(&["  daphne laurel hotel. "]), &set(&["Daphne Laurel Hotel"]), &Matcher::Exact)
            .unwrap();
        assert_eq!(r.f1, 1.0);
        assert_eq!(parse_prediction("A; B\nC"), set(&["A", "B", "C"]));
        assert!(parse_prediction(NOT_ANSWERABLE).is_empty());
    }

    #[test]
    fn model_judged_matcher_counts_gold_hits() {
        let gw = Gateway::deterministic();
        let m = Matcher::ModelJudged {
            gateway: &gw,
            question: "which?",
        };
        let r = score_answer_set("q", &set(&["Apollo Inn", "Zeus Grill"]), &set(&["Apollo Inn", "Hera Museum"]), &m).unwrap();
        assert_eq!(r.matched, set(&["Apollo Inn"]));
        assert!((r.precision - 0.5).abs() < 1e-12);
        assert!((r.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn macro_average_is_unweighted() {
        let mk = |f1| ScoreRecord {
            question_id: "q".into(),
            precision: f1,
            recall: f1,
            f1,
            matched: BTreeSet::new(),
            missed: BTreeSet::new(),
            spurious: BTreeSet::new(),
        };
        let m = macro_average(&[mk(1.0), mk(0.0)]).unwrap();
        assert_eq!(m.f1, 0.5);
    }

    fn snippet(step: u64, scope: &str, event: &str, entities: &[&str], text: &str) -> MemorySnippet {
        MemorySnippet {
            step: TrajectoryStep::new(step, "user", text, Timestamp::Tick(step)),
            rewritten_text: text.into(),
            intent: ContextualIntent {
                scope: scope.into(),
                event_type: event.into(),
                entity_types: entities.iter().map(|s| s.to_string()).collect(),
            },
            summary: text.into(),
            summary_embedding_id: format!("snippet:{step}"),
            degraded: false,
        }
    }

    #[test]
    fn overlap_micro_fixture() {
        let snippets = vec![
            snippet(0, "Day 1", "Make Decision", &["Price"], "a"),
            snippet(1, "Day 1", "Propose Option", &[], "b"),
            snippet(2, "Day 2", "Make Decision", &[], "c"),
        ];
        let filter = FilterConfig {
            scopes: set(&["Day 1"]),
            event_types: set(&["Make Decision"]),
            entity_types: set(&["Price"]),
        };
        let q = OverlapInput {
            question_id: "q".into(),
            filter,
            gold_turns: [0].into(),
        };
        let r = overlap_diagnostics(&[q], &snippets).unwrap();
        assert_eq!(
            r,
            OverlapReport {
                q_gt_at_max: 1.0,
                q_gt_full: 1.0,
                q_zero: 0.0,
                gt_dom: 1.0,
                gt_cov: 1.0,
                gt_best_cov: 1.0
            }
        );

        let empty = OverlapInput {
            question_id: "e".into(),
            filter: FilterConfig::default(),
            gold_turns: [1].into(),
        };
        let r = overlap_diagnostics(&[empty.clone()], &snippets).unwrap();
        assert_eq!(r.q_zero, 1.0);
        assert_eq!((r.gt_cov, r.gt_best_cov, r.q_gt_at_max), (0.0, 0.0, 0.0));

        let no_gold = OverlapInput {
            gold_turns: BTreeSet::new(),
            ..empty
        };
        assert!(matches!(overlap_diagnostics(&[no_gold], &snippets), Err(EvalError::EmptyGoldTurns(_))));
    }

    #[test]
    fn err_counts_canonical_mentions_and_flags_gaps() {
        let op = |i: u64, entity: Option<&str>| SymbolicOperation {
            op_index: i,
            role: "user".into(),
            action_kind: crate::model::ActionKind::MakeDecision,
            latent_goal: "g".into(),
            payload: entity.map(|e| [("entity".to_string(), e.to_string())].into()).unwrap_or_default(),
        };
        let ops = vec![op(0, Some("Apollo Inn")), op(1, Some("Hera Museum")), op(2, None)];
        let snippets = vec![
            snippet(0, "s", "e", &[], "We pick the APOLLO INN."),
            snippet(1, "s", "e", &[], "We pick it."),
            snippet(2, "s", "e", &[], "ok"),
        ];
        let prov: Vec<ProvenanceEntry> = (0..3).map(|i| ProvenanceEntry { step_index: i, op_index: i }).collect();
        let r = audit_err(&ops, &snippets, &prov, None).unwrap();
        assert_eq!((r.referential_ops, r.credited_ops), (2, 1));
        assert_eq!(r.err, 0.5);
        assert_eq!(r.missed_ops, vec![1]);
        let gap = audit_err(&ops, &snippets[..1], &prov, None);
        assert!(matches!(gap, Err(EvalError::AlignmentGap { op_index: 1 })));
    }

    fn brute_force(pred: &[String], gold: &[String]) -> (f64, f64, f64) {
        let p: Vec<String> = {
            let mut v: Vec<String> = pred.iter().map(|s| normalize_answer(s)).filter(|s| !s.is_empty()).collect();
            v.sort();
            v.dedup();
            v
        };
        let g: Vec<String> = {
            let mut v: Vec<String> = gold.iter().map(|s| normalize_answer(s)).filter(|s| !s.is_empty()).collect();
            v.sort();
            v.dedup();
            v
        };
        let mut used = vec![false; g.len()];
        let mut hits = 0usize;
        for x in &p {
            for (j, y) in g.iter().enumerate() {
                if !used[j] && x == y {
                    used[j] = true;
                    hits += 1;
                    break;
                }
            }
        }
        let prec = if p.is_empty() { 0.0 } else { hits as f64 / p.len() as f64 };
        let rec = hits as f64 / g.len() as f64;
        let f = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
        (prec, rec, f)
    }

    proptest! {
        #[test]
        fn exact_matcher_equals_brute_force(
            pred in proptest::collection::vec("[a-eA-E]{1,2}", 0..6),
            gold in proptest::collection::vec("[a-eA-E]{1,2}", 1..6),
        ) {
            let ps: BTreeSet<String> = pred.iter().cloned().collect();
            let gs: BTreeSet<String> = gold.iter().cloned().collect();
            let r = score_answer_set("q", &ps, &gs, &Matcher::Exact).unwrap();
            let (p, rc, f) = brute_force(&pred, &gold);
            prop_assert!((r.precision - p).abs() < 1e-12);
            prop_assert!((r.recall - rc).abs() < 1e-12);
            prop_assert!((r.f1 - f).abs() < 1e-12);
            if r.precision > 0.0 && r.recall > 0.0 {
                prop_assert!(r.f1 >= r.precision.min(r.recall) - 1e-12);
                prop_assert!(r.f1 <= r.precision.max(r.recall) + 1e-12);
            } else {
                prop_assert_eq!(r.f1, 0.0);
            }
        }

        #[test]
        fn macro_mean_matches_oracle(values in proptest::collection::vec(0.0f64..=1.0, 1..100)) {
            let recs: Vec<ScoreRecord> = values.iter().map(|v| ScoreRecord {
                question_id: "q".into(), precision: *v, recall: *v, f1: *v,
                matched: BTreeSet::new(), missed: BTreeSet::new(), spurious: BTreeSet::new(),
            }).collect();
            let m = macro_average(&recs).unwrap();
            let mut acc = 0.0;
            for v in &values { acc += v; }
            prop_assert!((m.f1 - acc / values.len() as f64).abs() < 1e-9);
        }
    }
}
