//! Argument parsing and subcommand dispatch.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use stitch_core::bench::{self, BenchConfig, SurfaceMode};
use stitch_core::eval::{self, EvalConfig, EvalReport, MatcherKind, ViewSource};
use stitch_core::intent::RewriteMode;
use stitch_core::model::Domain;
use stitch_core::records;
use stitch_core::retrieval::{answer_query, DensityMode};
use stitch_core::store::StoreWriter;
use stitch_core::text::WordPunctTokenizer;
use stitch_core::{Embedder, IngestSession, QueryRequest, QueryResponse, Store, TrajectoryStep};

use crate::config::{ServiceConfig, StitchConfig};
use crate::error::usage;
use crate::health::GatewayHandle;
use crate::output::{emit, BenchSummary, ErrAudit, Format, IngestSummary, OverlapAudit, ReportRecord, TrajectoryStats};
use crate::service;

#[derive(Debug, Parser)]
#[command(name = "stitch", version, about = "Intent-indexed memory for long agent trajectories")]
pub struct Cli {
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// TOML file with [gateway], [embedder], [ingestion] and [retrieval] tables.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest trajectory steps into an on-disk store.
    Ingest(IngestArgs),
    /// Retrieve context (and an answer) from a stored trajectory.
    Query(QueryArgs),
    /// Generate benchmark instances.
    GenBench(GenBenchArgs),
    /// Score the memory on benchmark instances.
    Eval(EvalArgs),
    /// Entity resolution recall on benchmark instances.
    AuditErr(AuditArgs),
    /// Label-overlap diagnostics on benchmark instances.
    Diagnose(DiagnoseArgs),
    /// Store or benchmark statistics.
    Stats(StatsArgs),
    /// Score and overlap tables from eval reports.
    Tables(TablesArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct StoreArgs {
    /// Store root, trajectory directory, or benchmark instance directory.
    #[arg(long, value_name = "PATH")]
    pub store: PathBuf,
    /// Trajectory id inside the store root.
    #[arg(long, value_name = "ID")]
    pub trajectory: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RewriteArg {
    Model,
    Disabled,
    Oracle,
}

impl From<RewriteArg> for RewriteMode {
    fn from(a: RewriteArg) -> Self {
        match a {
            RewriteArg::Model => RewriteMode::Model,
            RewriteArg::Disabled => RewriteMode::Disabled,
            RewriteArg::Oracle => RewriteMode::Oracle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Travel,
    Debate,
}

impl From<DomainArg> for Domain {
    fn from(a: DomainArg) -> Self {
        match a {
            DomainArg::Travel => Domain::Travel,
            DomainArg::Debate => Domain::Debate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SurfaceArg {
    Template,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MatcherArg {
    Exact,
    ModelJudged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Scope,
    Event,
    Entity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DensityArg {
    PerEntity,
    CappedEntity,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub target: StoreArgs,
    /// Trajectory step records; defaults to the instance trajectory.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub rewrite_mode: Option<RewriteArg>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    pub target: StoreArgs,
    /// Query text.
    #[arg(long = "q", visible_alias = "query", value_name = "TEXT")]
    pub q: String,
    /// Context token budget.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub budget: Option<u64>,
    /// Number of ranked snippets.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: Option<u64>,
    /// Skip answer generation.
    #[arg(long)]
    pub context_only: bool,
}

#[derive(Debug, Args)]
pub struct GenBenchArgs {
    #[arg(long, value_enum)]
    pub domain: DomainArg,
    /// Entities per category (travel) or evidence items (debate).
    #[arg(long, default_value_t = 100)]
    pub scale: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of instances; instance i uses seed + i.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub instances: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SurfaceArg::Template)]
    pub surface: SurfaceArg,
    #[arg(long, default_value_t = 0.5)]
    pub remodel_rate: f64,
    /// Planned days (travel).
    #[arg(long)]
    pub days: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchTarget {
    /// Benchmark root or a single instance directory.
    #[arg(long, value_name = "DIR")]
    pub bench: PathBuf,
    /// Use the store ingested under each instance instead of ingesting afresh.
    #[arg(long)]
    pub from_store: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub target: BenchTarget,
    /// Directory for report.json and questions.jsonl.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub rewrite_mode: Option<RewriteArg>,
    #[arg(long, value_enum)]
    pub matcher: Option<MatcherArg>,
    /// Clear a filter component before ranking (repeatable).
    #[arg(long, value_enum)]
    pub ablate: Vec<AblationArg>,
    #[arg(long, value_enum)]
    pub density: Option<DensityArg>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub budget: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub target: BenchTarget,
    #[arg(long, value_enum)]
    pub rewrite_mode: Option<RewriteArg>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub target: BenchTarget,
    #[arg(long, value_enum)]
    pub ablate: Vec<AblationArg>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["store", "bench"])))]
pub struct StatsArgs {
    /// Store root, trajectory directory, or instance directory.
    #[arg(long, value_name = "PATH")]
    pub store: Option<PathBuf>,
    #[arg(long, value_name = "ID", requires = "store")]
    pub trajectory: Option<String>,
    /// Benchmark root or instance directory.
    #[arg(long, value_name = "DIR")]
    pub bench: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TablesArgs {
    /// Eval report files or directories holding report.json.
    #[arg(required = true, value_name = "REPORT")]
    pub reports: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Store root.
    #[arg(long, value_name = "DIR")]
    pub store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[arg(long, default_value_t = 4096, value_parser = clap::value_parser!(u64).range(1..))]
    pub budget: u64,
    #[arg(long, default_value_t = 40, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    /// Shared bearer token required on trajectory endpoints.
    #[arg(long, env = "STITCH_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    /// Keep serving with fallback labels when the provider is unreachable.
    #[arg(long)]
    pub degraded: bool,
}

/// A resolved trajectory inside a store.
pub struct Target {
    pub store: Store,
    pub id: String,
    pub instance_dir: Option<PathBuf>,
}

/// Resolves `--store`/`--trajectory` to a store root and trajectory id.
pub fn resolve_target(args: &StoreArgs, create: bool) -> anyhow::Result<Target> {
    let path = &args.store;
    if path.join(bench::META_FILE).is_file() {
        let id = args.trajectory.clone().unwrap_or_else(|| bench::instance_name(path));
        let root = path.join(bench::MEMORY_DIR);
        if !create && !root.is_dir() {
            return Err(anyhow!("instance {} has not been ingested", path.display()));
        }
        return Ok(Target {
            store: Store::open(root)?,
            id,
            instance_dir: Some(path.clone()),
        });
    }
    if path.join("manifest.json").is_file() {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .ok_or_else(|| usage("trajectory directory has no name"))?;
        if args.trajectory.as_ref().is_some_and(|t| *t != name) {
            return Err(usage(format!("--trajectory conflicts with directory `{name}`")));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        return Ok(Target {
            store: Store::open(root)?,
            id: name,
            instance_dir: None,
        });
    }
    if !create && !path.is_dir() {
        return Err(anyhow!("store {} not found", path.display()));
    }
    let store = Store::open(path)?;
    let id = match &args.trajectory {
        Some(t) => t.clone(),
        None => {
            let ids = store.list();
            match (create, ids.as_slice()) {
                (false, [only]) => only.clone(),
                _ => return Err(usage("--trajectory is required for this store")),
            }
        }
    };
    stitch_core::store::validate_trajectory_id(&id).map_err(|e| usage(e.to_string()))?;
    Ok(Target {
        store,
        id,
        instance_dir: None,
    })
}

fn bench_dirs(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if path.join(bench::META_FILE).is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(anyhow!("benchmark {} not found", path.display()));
    }
    let dirs = bench::list_instances(path)?;
    if dirs.is_empty() {
        return Err(anyhow!("no benchmark instances under {}", path.display()));
    }
    Ok(dirs)
}

struct Runtime {
    cfg: StitchConfig,
    gateway: GatewayHandle,
    embedder: Arc<dyn Embedder>,
}

impl Runtime {
    fn new(config: Option<&Path>) -> anyhow::Result<Self> {
        let cfg = StitchConfig::load(config)?;
        let gateway = GatewayHandle::from_config(&cfg.gateway).map_err(|e| usage(e.to_string()))?;
        let embedder: Arc<dyn Embedder> = Arc::from(cfg.embedder.build().map_err(|e| usage(e.to_string()))?);
        Ok(Self { cfg, gateway, embedder })
    }
}

/// Runs one parsed invocation, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let rt = Runtime::new(cli.config.as_deref())?;
    let format = cli.format;
    let config_path = cli.config.clone();
    match cli.command {
        Command::Ingest(a) => ingest(&rt, a, format, out),
        Command::Query(a) => query(&rt, a, format, out),
        Command::GenBench(a) => gen_bench(&rt, a, format, out),
        Command::Eval(a) => eval_cmd(&rt, a, format, out),
        Command::AuditErr(a) => audit_err(&rt, a, format, out),
        Command::Diagnose(a) => diagnose(&rt, a, format, out),
        Command::Stats(a) => stats(a, format, out),
        Command::Tables(a) => tables(a, out),
        Command::Serve(a) => serve(rt, a, config_path),
    }
}

fn ingest(rt: &Runtime, a: IngestArgs, format: Format, out: &mut dyn Write) -> anyhow::Result<()> {
    let target = resolve_target(&a.target, true)?;
    let input = match (&a.input, &target.instance_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join(bench::TRAJECTORY_FILE),
        (None, None) => return Err(usage("--input is required unless --store is a benchmark instance")),
    };
    let steps: Vec<TrajectoryStep> = records::read_file(&input)?;
    let mut cfg = rt.cfg.ingestion.clone();
    if let Some(m) = a.rewrite_mode {
        cfg.rewrite_mode = m.into();
    }
    let writer = target.store.writer(&target.id)?;
    let calls_before = rt.gateway.gateway.calls();
    let mut session = IngestSession::new(writer, rt.gateway.gateway.clone(), rt.embedder.clone(), cfg.clone())?;
    if cfg.rewrite_mode == RewriteMode::Oracle {
        let dir = target
            .instance_dir
            .as_ref()
            .ok_or_else(|| usage("oracle rewriting needs a benchmark instance as --store"))?;
        session = session.with_oracle(bench::read_instance(dir)?.oracle_rewrites());
    }
    let steps_read = steps.len();
    session.ingest_all(steps).with_context(|| format!("ingesting {}", input.display()))?;
    let writer: &StoreWriter = session.backend();
    let view = stitch_core::store::Backend::view(writer);
    let summary = IngestSummary {
        trajectory_id: target.id.clone(),
        steps_read,
        snippet_count: writer.manifest().snippet_count,
        embedding_count: writer.manifest().embedding_count,
        event_labels: view.event_vocab().len(),
        entity_labels: view.entity_vocab().len(),
        scopes: view.scope_state().scope_inventory.len(),
        gateway_calls: rt.gateway.gateway.calls() - calls_before,
    };
    emit(out, format, &summary, || {
        format!(
            "ingested {} steps into {} ({} snippets, {} event labels, {} entity types, {} scopes)",
            summary.steps_read,
            writer.dir().display(),
            summary.snippet_count,
            summary.event_labels,
            summary.entity_labels,
            summary.scopes
        )
    })?;
    Ok(())
}

/// Executes a query against a stored trajectory; shared with the service.
pub fn run_query(
    store: &Store,
    id: &str,
    request: &QueryRequest,
    rt_gateway: &GatewayHandle,
    embedder: &dyn Embedder,
    retrieval: &stitch_core::RetrievalConfig,
) -> anyhow::Result<QueryResponse> {
    let view = store.load_view(id)?;
    Ok(answer_query(&rt_gateway.gateway, embedder, &view, request, retrieval))
}

fn render_response(r: &QueryResponse) -> String {
    let mut s = String::new();
    let f = &r.filter_config;
    let join = |set: &std::collections::BTreeSet<String>| set.iter().cloned().collect::<Vec<_>>().join(", ");
    s.push_str(&format!(
        "filter  scopes=[{}] events=[{}] entities=[{}]\n",
        join(&f.scopes),
        join(&f.event_types),
        join(&f.entity_types)
    ));
    for d in &r.dropped_labels {
        s.push_str(&format!("dropped {} `{}`\n", d.field, d.label));
    }
    for x in &r.ranked {
        s.push_str(&format!(
            "{:>3}. {} density={} sim={:.4}\n",
            x.rank, x.snippet_ref, x.density, x.similarity
        ));
    }
    s.push_str("context:\n");
    s.push_str(&r.context);
    if !r.context.ends_with('\n') {
        s.push('\n');
    }
    if let Some(a) = &r.answer {
        s.push_str(&format!("answer: {a}\n"));
    }
    s
}

fn query(rt: &Runtime, a: QueryArgs, format: Format, out: &mut dyn Write) -> anyhow::Result<()> {
    let target = resolve_target(&a.target, false)?;
    if a.q.trim().is_empty() {
        return Err(usage("query text is empty"));
    }
    let request = QueryRequest {
        query: a.q.clone(),
        trajectory_id: target.id.clone(),
        budget: a.budget.map(|b| b as usize),
        context_only: Some(a.context_only),
        k_retrieve: a.k.map(|k| k as usize),
    };
    let response = run_query(
        &target.store,
        &target.id,
        &request,
        &rt.gateway,
        rt.embedder.as_ref(),
        &rt.cfg.retrieval,
    )?;
    emit(out, format, &response, || render_response(&response))?;
    Ok(())
}

fn gen_bench(rt: &Runtime, a: GenBenchArgs, format: Format, out: &mut dyn Write) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&a.remodel_rate) {
        return Err(usage("--remodel-rate must lie in [0, 1]"));
    }
    let mut plan = bench::PlanConfig::default();
    if let Some(d) = a.days {
        plan.days = d;
    }
    let surface = match a.surface {
        SurfaceArg::Template => SurfaceMode::Template,
        SurfaceArg::Model => SurfaceMode::Model,
    };
    for i in 0..a.instances {
        let cfg = BenchConfig {
            domain: a.domain.into(),
            scale: a.scale,
            seed: a.seed + i,
            plan: plan.clone(),
            surface,
            remodel_rate: a.remodel_rate,
            ..BenchConfig::default()
        };
        let gw = (surface == SurfaceMode::Model).then_some(rt.gateway.gateway.as_ref());
        let inst = bench::generate_instance(&cfg, gw).with_context(|| format!("generating seed {}", cfg.seed))?;
        let dir = a.out.join(format!("t{i}"));
        bench::write_instance(&dir, &inst)?;
        let summary = BenchSummary {
            instance: format!("t{i}"),
            dir: dir.display().to_string(),
            stats: inst.stats(&WordPunctTokenizer),
        };
        emit(out, format, &summary, || {
            format!(
                "{} seed={} steps={} ops={} questions={} tokens={} -> {}",
                summary.instance,
                summary.stats.seed,
                summary.stats.steps,
                summary.stats.operations,
                summary.stats.questions,
                summary.stats.context_tokens,
                summary.dir
            )
        })?;
    }
    Ok(())
}

fn eval_config(rt: &Runtime, rewrite: Option<RewriteArg>, ablate: &[AblationArg]) -> EvalConfig {
    let mut cfg = EvalConfig {
        ingestion: rt.cfg.ingestion.clone(),
        retrieval: rt.cfg.retrieval.clone(),
        matcher: MatcherKind::Exact,
    };
    if let Some(m) = rewrite {
        cfg.ingestion.rewrite_mode = m.into();
    }
    for x in ablate {
        match x {
            AblationArg::Scope => cfg.retrieval.ablate_scope = true,
            AblationArg::Event => cfg.retrieval.ablate_event = true,
            AblationArg::Entity => cfg.retrieval.ablate_entity = true,
        }
    }
    cfg
}

fn view_source(t: &BenchTarget) -> ViewSource {
    if t.from_store {
        ViewSource::InstanceStore
    } else {
        ViewSource::Ingest
    }
}

fn eval_cmd(rt: &Runtime, a: EvalArgs, format: Format, out: &mut dyn Write) -> anyhow::Result<()> {
    let dirs = bench_dirs(&a.target.bench)?;
    let mut cfg = eval_config(rt, a.rewrite_mode, &a.ablate);
    if let Some(m) = a.matcher {
        cfg.matcher = match m {
            MatcherArg::Exact => MatcherKind::Exact,
            MatcherArg::ModelJudged => MatcherKind::ModelJudged,
        };
    }
    if let Some(d) = a.density {
        cfg.retrieval.density_mode = match d {
            DensityArg::PerEntity => DensityMode::PerEntity,
            DensityArg::CappedEntity => DensityMode::CappedEntity,
        };
    }
    if let Some(b) = a.budget {
        cfg.retrieval.token_budget = b as usize;
    }
    if let Some(k) = a.k {
        cfg.retrieval.k_retrieve = k as usize;
    }
    let (report, _) = eval::run_eval(
        &dirs,
        a.out.as_deref(),
        &cfg,
        view_source(&a.target),
        rt.gateway.gateway.clone(),
        rt.embedder.clone(),
    )?;
    let record = ReportRecord(report);
    emit(out, format, &record, || render_report(&record.0))?;
    Ok(())
}

fn render_report(r: &EvalReport) -> String {
    let mut s = String::new();
    for i in &r.instances {
        let f1 = i.scores.as_ref().map_or(0.0, |m| m.f1);
        s.push_str(&format!(
            "{:<10} steps={:<5} questions={:<3} F1={:.3} ERR={:.3} explicit={:.3}\n",
            i.instance, i.steps, i.questions, f1, i.err.err, i.explicit_mention_fraction
        ));
    }
    s.push('\n');
    let label = if r.meta.ablations.is_empty() {
        "full".to_string()
    } else {
        r.meta.ablations.join("+")
    };
    s.push_str(&eval::render_score_table(&[(label.clone(), r)]));
    s.push('\n');
    s.push_str(&eval::render_overlap_table(&[(label, r)]));
    for w in &r.warnings {
        s.push_str(&format!("warning: {w}\n"));
    }
    s
}

fn audit_err(rt: &Runtime, a: AuditArgs, format: Format, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = eval_config(rt, a.rewrite_mode, &[]);
    for dir in bench_dirs(&a.target.bench)? {
        let inst = bench::read_instance(&dir)?;
        let name = bench::instance_name(&dir);
        let view = match view_source(&a.target) {
            ViewSource::Ingest => eval::ingest_instance(
                &inst,
                &name,
                rt.gateway.gateway.clone(),
                rt.embedder.clone(),
                &cfg.ingestion,
            )?,
            ViewSource::InstanceStore => eval::load_instance_store(&dir)?,
        };
        let report = eval::audit_err(&inst.storyboard, &view.snippets, &inst.provenance, Some(&inst.world))?;
        let record = ErrAudit {
            instance: name,
            rewrite_mode: serde_json::to_value(cfg.ingestion.rewrite_mode)?
                .as_str()
                .unwrap_or_default()
                .to_string(),
            explicit_mention_fraction: eval::explicit_mention_fraction(
                &inst.storyboard,
                &inst.trajectory,
                &inst.provenance,
                Some(&inst.world),
            ),
            report,
        };
        emit(out, format, &record, || {
            format!(
                "{:<10} ERR={:.3} ({}/{}) explicit={:.3} rewrite={}",
                record.instance,
                record.report.err,
                record.report.credited_ops,
                record.report.referential_ops,
                record.explicit_mention_fraction,
                record.rewrite_mode
            )
        })?;
    }
    Ok(())
}

fn diagnose(rt: &Runtime, a: DiagnoseArgs, format: Format, out: &mut dyn Write) -> anyhow::Result<()> {
    let dirs = bench_dirs(&a.target.bench)?;
    let cfg = eval_config(rt, None, &a.ablate);
    let (report, _) = eval::run_eval(
        &dirs,
        None,
        &cfg,
        view_source(&a.target),
        rt.gateway.gateway.clone(),
        rt.embedder.clone(),
    )?;
    for i in &report.instances {
        let Some(o) = i.overlap else { continue };
        let record = OverlapAudit {
            instance: i.instance.clone(),
            ablations: report.meta.ablations.clone(),
            gold_hit_rate: i.gold_hit_rate.unwrap_or(0.0),
            report: o,
        };
        emit(out, format, &record, || {
            format!(
                "{:<10} Q_GT@MAX={:.2} Q_GT_FULL={:.2} Q_ZERO={:.2} GT_DOM={:.2} GT_COV={:.2} GT_BEST_COV={:.2} hit={:.2}",
                record.instance, o.q_gt_at_max, o.q_gt_full, o.q_zero, o.gt_dom, o.gt_cov, o.gt_best_cov, record.gold_hit_rate
            )
        })?;
    }
    Ok(())
}

fn stats(a: StatsArgs, format: Format, out: &mut dyn Write) -> anyhow::Result<()> {
    if let Some(store) = a.store {
        let target = resolve_target(
            &StoreArgs {
                store,
                trajectory: a.trajectory,
            },
            false,
        )?;
        let view = target.store.load_view(&target.id)?;
        let manifest = target.store.manifest(&target.id)?;
        let record = TrajectoryStats::new(&view, &manifest);
        emit(out, format, &record, || record.render())?;
        return Ok(());
    }
    let root = a.bench.expect("clap enforces one source");
    for dir in bench_dirs(&root)? {
        let inst = bench::read_instance(&dir)?;
        let summary = BenchSummary {
            instance: bench::instance_name(&dir),
            dir: dir.display().to_string(),
            stats: inst.stats(&WordPunctTokenizer),
        };
        emit(out, format, &summary, || {
            let s = &summary.stats;
            let types: Vec<String> = s.questions_by_type.iter().map(|(k, v)| format!("{k}={v}")).collect();
            format!(
                "{:<10} {} seed={} steps={} ops={} tokens={} remodeled={} questions={} ({})",
                summary.instance,
                s.domain.as_str(),
                s.seed,
                s.steps,
                s.operations,
                s.context_tokens,
                s.remodeled_mentions,
                s.questions,
                types.join(", ")
            )
        })?;
    }
    Ok(())
}

fn tables(a: TablesArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut loaded: Vec<(String, EvalReport)> = Vec::new();
    for p in &a.reports {
        let file = if p.is_dir() { p.join("report.json") } else { p.clone() };
        let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
        let report: EvalReport =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
        let label = file
            .parent()
            .and_then(|d| d.file_name())
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| file.display().to_string());
        loaded.push((label, report));
    }
    let rows: Vec<(String, &EvalReport)> = loaded.iter().map(|(l, r)| (l.clone(), r)).collect();
    write!(out, "{}\n{}", eval::render_score_table(&rows), eval::render_overlap_table(&rows))?;
    Ok(())
}

fn serve(rt: Runtime, a: ServeArgs, config_path: Option<PathBuf>) -> anyhow::Result<()> {
    let config = ServiceConfig {
        bind: a.bind,
        store_root: a.store,
        gateway_config: config_path,
        budget: a.budget as usize,
        k_retrieve: a.k as usize,
        auth_token: a.token,
        degraded: a.degraded,
    };
    config.validate()?;
    let state = service::AppState::new(config, rt.gateway, rt.embedder, rt.cfg.ingestion, rt.cfg.retrieval)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(service::serve(Arc::new(state)))
}
