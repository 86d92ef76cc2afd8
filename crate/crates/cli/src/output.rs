//! Record types printed by the CLI and returned by the service.

use std::io::Write;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use stitch_core::bench::InstanceStats;
use stitch_core::eval::{ErrReport, EvalReport, OverlapReport};
use stitch_core::records::{to_line, Record};
use stitch_core::store::StoreManifest;
use stitch_core::{ContextualIntent, StoreView};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// Human-readable lines.
    #[default]
    Text,
    /// One JSON record per line with a `kind` field.
    Records,
}

/// Prints a record, or its text rendering.
pub fn emit<T: Record>(out: &mut dyn Write, format: Format, record: &T, text: impl FnOnce() -> String) -> std::io::Result<()> {
    match format {
        Format::Records => writeln!(out, "{}", to_line(record)),
        Format::Text => {
            let body = text();
            write!(out, "{body}")?;
            if !body.ends_with('\n') {
                writeln!(out)?;
            }
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub trajectory_id: String,
    pub steps_read: usize,
    pub snippet_count: u64,
    pub embedding_count: u64,
    pub event_labels: usize,
    pub entity_labels: usize,
    pub scopes: usize,
    pub gateway_calls: u64,
}

impl Record for IngestSummary {
    const KIND: &'static str = "ingest_summary";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub instance: String,
    pub dir: String,
    #[serde(flatten)]
    pub stats: InstanceStats,
}

impl Record for BenchSummary {
    const KIND: &'static str = "bench_instance";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAck {
    pub trajectory_id: String,
    pub snippet_id: String,
    pub step_index: u64,
    pub intent: ContextualIntent,
}

impl Record for StepAck {
    const KIND: &'static str = "step_ack";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub trajectory_id: String,
    pub snippet_count: u64,
    pub embedding_count: u64,
    pub event_vocab: Vec<String>,
    pub entity_vocab: Vec<String>,
    pub scopes: Vec<String>,
    pub degraded_snippets: usize,
    pub updated_at: String,
}

impl Record for TrajectoryStats {
    const KIND: &'static str = "trajectory_stats";
}

impl TrajectoryStats {
    pub fn new(view: &StoreView, manifest: &StoreManifest) -> Self {
        Self {
            trajectory_id: view.trajectory_id.clone(),
            snippet_count: view.len() as u64,
            embedding_count: view.index.len() as u64,
            event_vocab: view.event_vocab().label_list(),
            entity_vocab: view.entity_vocab().label_list(),
            scopes: view.scope_state().scope_inventory.clone(),
            degraded_snippets: view.snippets.iter().filter(|s| s.degraded).count(),
            updated_at: manifest.updated_at.clone(),
        }
    }

    pub fn render(&self) -> String {
        format!(
            "trajectory {}\n  snippets   {}\n  embeddings {}\n  degraded   {}\n  scopes     {}\n  events     {}\n  entities   {}\n",
            self.trajectory_id,
            self.snippet_count,
            self.embedding_count,
            self.degraded_snippets,
            self.scopes.join(", "),
            self.event_vocab.join(", "),
            self.entity_vocab.join(", "),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrAudit {
    pub instance: String,
    pub rewrite_mode: String,
    pub explicit_mention_fraction: f64,
    #[serde(flatten)]
    pub report: ErrReport,
}

impl Record for ErrAudit {
    const KIND: &'static str = "err_audit";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapAudit {
    pub instance: String,
    pub ablations: Vec<String>,
    pub gold_hit_rate: f64,
    #[serde(flatten)]
    pub report: OverlapReport,
}

impl Record for OverlapAudit {
    const KIND: &'static str = "overlap_diagnostics";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReportRecord(pub EvalReport);

impl Record for ReportRecord {
    const KIND: &'static str = "eval_report";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub status: u16,
    pub error: String,
}

impl Record for ErrorBody {
    const KIND: &'static str = "error";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthBody {
    pub status: String,
    pub provider: String,
    pub provider_reachable: bool,
}

impl Record for HealthBody {
    const KIND: &'static str = "health";
}
