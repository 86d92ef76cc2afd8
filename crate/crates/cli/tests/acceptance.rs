//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Everything runs offline with the deterministic provider.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde_json::Value;
use stitch_core::bench::{build_environment, plan_storyboard, validate_pragmatics, PlanConfig};
use stitch_core::eval::{score_answer_set, Matcher};
use stitch_core::gateway::{CueGroup, Rulebook};
use stitch_core::model::{ActionKind, Domain};
use stitch_core::retrieval::{assemble_context, rank_snippets, DensityMode, RenderField};
use stitch_core::store::{snippet_id, Backend, InMemoryBackend, SessionState};
use stitch_core::text::WordPunctTokenizer;
use stitch_core::{
    ContextualIntent, Embedder, EmbeddingRecord, FilterConfig, Gateway, HashEmbedder, IngestSession,
    IngestionConfig, MemorySnippet, Store, StoreView, SymbolicOperation, Timestamp, TrajectoryStep,
};

type Check = fn() -> Result<String, String>;

fn main() {
    let checks: &[(&str, Check)] = &[
        ("ranking_oracle", ranking_oracle),
        ("budget_safety", budget_safety),
        ("metric_oracle", metric_oracle),
        ("pragmatic_soundness", pragmatic_soundness),
        ("err_extremes", err_extremes),
        ("overlap_sanity", overlap_sanity),
        ("scope_ablation_direction", scope_ablation_direction),
        ("pipeline_determinism", pipeline_determinism),
        ("consolidation_correctness", consolidation_correctness),
    ];
    let started = Instant::now();
    let mut failed = 0;
    for (name, check) in checks {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let ms = t.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{ms} ms]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{ms} ms]");
            }
        }
    }
    println!(
        "{} of {} criteria passed in {:.1} s",
        checks.len() - failed,
        checks.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Ranking

const SCOPES: [&str; 3] = ["Day 1", "Day 2", "Budget"];
const EVENTS: [&str; 4] = ["Propose Option", "Price Inquiry", "Make Decision", "Compare Options"];
const ENTITIES: [&str; 4] = ["Hotel", "Restaurant", "Attraction", "Flight"];
const WORDS: [&str; 12] = [
    "hotel", "price", "night", "museum", "dinner", "flight", "cheap", "rating", "book", "compare", "garden", "river",
];

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

fn subset(rng: &mut ChaCha8Rng, pool: &[&str], p: f64) -> BTreeSet<String> {
    pool.iter().filter(|_| rng.gen_bool(p)).map(|s| s.to_string()).collect()
}

fn view_of(items: &[(ContextualIntent, String)], emb: &HashEmbedder) -> StoreView {
    let mut backend = InMemoryBackend::new("acceptance");
    let mut session = SessionState::default();
    for (i, (it, _)) in items.iter().enumerate() {
        session.event_vocab.insert(&it.event_type, i as u64).unwrap();
        for e in &it.entity_types {
            session.entity_vocab.insert(e, i as u64).unwrap();
        }
        session.scope.register(&it.scope);
    }
    for (i, (it, text)) in items.iter().enumerate() {
        let snippet = MemorySnippet {
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
        backend.append(snippet, vec![rec], session.clone()).unwrap();
    }
    backend.view()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Brute force: every filter label the intent carries scores one.
fn brute_density(it: &ContextualIntent, f: &FilterConfig, capped: bool) -> u64 {
    let mut d = 0;
    if f.scopes.iter().any(|s| *s == it.scope) {
        d += 1;
    }
    if f.event_types.iter().any(|e| *e == it.event_type) {
        d += 1;
    }
    let ents = it.entity_types.iter().filter(|e| f.entity_types.contains(*e)).count() as u64;
    d + if capped { ents.min(1) } else { ents }
}

fn ranking_oracle() -> Result<String, String> {
    let started = Instant::now();
    let emb = HashEmbedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut compared = 0;
    for store_no in 0..200 {
        let n = rng.gen_range(1..=12);
        let items: Vec<(ContextualIntent, String)> = (0..n)
            .map(|_| {
                let intent = ContextualIntent {
                    scope: pick(&mut rng, &SCOPES).into(),
                    event_type: pick(&mut rng, &EVENTS).into(),
                    entity_types: subset(&mut rng, &ENTITIES, 0.4),
                };
                let len = rng.gen_range(1..6);
                let text = (0..len).map(|_| pick(&mut rng, &WORDS)).collect::<Vec<_>>().join(" ");
                (intent, text)
            })
            .collect();
        let view = view_of(&items, &emb);
        let filter = FilterConfig {
            scopes: subset(&mut rng, &SCOPES, 0.4),
            event_types: subset(&mut rng, &EVENTS, 0.4),
            entity_types: subset(&mut rng, &ENTITIES, 0.5),
        };
        let query = (0..3).map(|_| pick(&mut rng, &WORDS)).collect::<Vec<_>>().join(" ");
        let capped = rng.gen_bool(0.5);
        let mode = if capped { DensityMode::CappedEntity } else { DensityMode::PerEntity };
        let k = rng.gen_range(1..=14);
        let got = rank_snippets(&filter, &query, &view, &emb, k, mode);

        let q = emb.embed(&query).unwrap();
        let mut expected: Vec<(u64, f64, u64)> = items
            .iter()
            .enumerate()
            .map(|(i, (it, text))| (brute_density(it, &filter, capped), cosine(&q, &emb.embed(text).unwrap()), i as u64))
            .collect();
        // equal cosines may differ in the last bits; compare at 1e-9
        let key = |s: f64| (s * 1e9).round() as i64;
        expected.sort_by(|a, b| b.0.cmp(&a.0).then(key(b.1).cmp(&key(a.1))).then(a.2.cmp(&b.2)));
        expected.truncate(k);

        ensure(got.len() == expected.len(), || format!("store {store_no}: length {} vs {}", got.len(), expected.len()))?;
        for (pos, (g, e)) in got.iter().zip(&expected).enumerate() {
            ensure(
                g.step_index == e.2 && g.density == e.0 && (g.similarity - e.1).abs() < 1e-9 && g.rank == pos as u64 + 1,
                || format!("store {store_no} position {pos}: got {g:?}, expected {e:?}"),
            )?;
        }
        compared += got.len();
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("200 stores, {compared} ranked positions, 0 mismatches"))
}

// ---------------------------------------------------------------------------
// Budget

const SENTENCE_WORDS: [&str; 16] = [
    "the", "hotel", "costs", "$120", "per", "night", "(breakfast", "included)", "Dr.", "Smith's", "café", "rated",
    "4.5", "e-mail", "\"quiet\"", "near",
];
const ENDINGS: [&str; 6] = [".", "!", "?", "…", ".\"", "?)"];

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(1..12);
    let mut s = (0..len).map(|_| pick(rng, &SENTENCE_WORDS)).collect::<Vec<_>>().join(" ");
    if rng.gen_bool(0.85) {
        s.push_str(pick(rng, &ENDINGS));
    }
    s
}

fn budget_safety() -> Result<String, String> {
    let token = Regex::new(r"[\p{Alphabetic}\p{N}]+|\S").unwrap();
    let count = |s: &str| token.find_iter(s).count();
    let terminated = Regex::new(r#"[.!?…]["')\]”’»]*$"#).unwrap();
    let emb = HashEmbedder::default();
    let tok = WordPunctTokenizer;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut empty, mut truncated) = (0, 0);
    for run in 0..1000 {
        let n = rng.gen_range(1..=8);
        let items: Vec<(ContextualIntent, String)> = (0..n)
            .map(|_| {
                let sentences = rng.gen_range(1..4);
                let text = (0..sentences).map(|_| random_sentence(&mut rng)).collect::<Vec<_>>().join(" ");
                let intent = ContextualIntent {
                    scope: pick(&mut rng, &SCOPES).into(),
                    event_type: pick(&mut rng, &EVENTS).into(),
                    entity_types: BTreeSet::new(),
                };
                (intent, text)
            })
            .collect();
        let view = view_of(&items, &emb);
        let ranked = rank_snippets(&FilterConfig::default(), "hotel price", &view, &emb, 40, DensityMode::PerEntity);
        let full = assemble_context(&ranked, &view, usize::MAX, &tok, RenderField::RewrittenText);
        let budget = rng.gen_range(1..=count(&full) + 5);
        let out = assemble_context(&ranked, &view, budget, &tok, RenderField::RewrittenText);
        ensure(count(&out) <= budget, || format!("run {run}: {} tokens over budget {budget}: {out:?}", count(&out)))?;
        ensure(out.is_empty() || terminated.is_match(&out), || format!("run {run}: unterminated output {out:?}"))?;
        ensure(full.starts_with(&out), || format!("run {run}: output is not a prefix of the full context"))?;
        if out.is_empty() {
            empty += 1;
        } else if out.len() < full.len() {
            truncated += 1;
        }
    }
    Ok(format!("1000 runs, 0 violations ({truncated} truncated, {empty} empty)"))
}

// ---------------------------------------------------------------------------
// Metric

fn oracle_normalize(s: &str) -> String {
    let lowered = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    lowered.trim_end_matches(['.', ',', ';', ':', '!', '?']).trim().to_string()
}

/// Brute force: compare every normalized prediction against every
/// normalized gold answer.
fn oracle_prf(pred: &BTreeSet<String>, gold: &BTreeSet<String>) -> (f64, f64, f64) {
    let uniq = |xs: &BTreeSet<String>| -> Vec<String> {
        let mut v: Vec<String> = xs.iter().map(|x| oracle_normalize(x)).filter(|x| !x.is_empty()).collect();
        v.sort();
        v.dedup();
        v
    };
    let (p, g) = (uniq(pred), uniq(gold));
    let tp_p = p.iter().filter(|x| g.iter().any(|y| y == *x)).count() as f64;
    let tp_g = g.iter().filter(|y| p.iter().any(|x| x == *y)).count() as f64;
    let precision = if p.is_empty() { 0.0 } else { tp_p / p.len() as f64 };
    let recall = tp_g / g.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

const ANSWERS: [&str; 8] = ["Apollo Hotel", "apollo hotel.", "  Apollo   Hotel ", "Blue Fin", "Day 2", "day 2!", "Kimura (2019)", "..."];

fn metric_oracle() -> Result<String, String> {
    let worked = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    let r = score_answer_set("worked", &worked(&["A", "B", "X"]), &worked(&["A", "B", "C", "D"]), &Matcher::Exact)
        .map_err(|e| e.to_string())?;
    ensure(
        (r.precision - 2.0 / 3.0).abs() < 1e-12 && (r.recall - 0.5).abs() < 1e-12 && (r.f1 - 4.0 / 7.0).abs() < 1e-12,
        || format!("worked case gave P={} R={} F1={}", r.precision, r.recall, r.f1),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut pairs = 0;
    while pairs < 500 {
        let draw = |rng: &mut ChaCha8Rng, max: usize| -> BTreeSet<String> {
            let n = rng.gen_range(0..=max);
            (0..n).map(|_| pick(rng, &ANSWERS).to_string()).collect()
        };
        let pred = draw(&mut rng, 5);
        let gold = draw(&mut rng, 4);
        if gold.iter().all(|g| oracle_normalize(g).is_empty()) {
            ensure(score_answer_set("q", &pred, &gold, &Matcher::Exact).is_err(), || {
                format!("empty gold {gold:?} was scored")
            })?;
            continue;
        }
        let got = score_answer_set("q", &pred, &gold, &Matcher::Exact).map_err(|e| e.to_string())?;
        let (p, r, f) = oracle_prf(&pred, &gold);
        ensure(
            (got.precision - p).abs() <= 1e-12 && (got.recall - r).abs() <= 1e-12 && (got.f1 - f).abs() <= 1e-12,
            || format!("pred {pred:?} gold {gold:?}: got ({}, {}, {}), oracle ({p}, {r}, {f})", got.precision, got.recall, got.f1),
        )?;
        pairs += 1;
    }
    Ok("500 pairs exact to 1e-12; worked case P=2/3 R=1/2 F1=4/7".into())
}

// ---------------------------------------------------------------------------
// Pragmatics

fn reindexed(mut ops: Vec<SymbolicOperation>) -> Vec<SymbolicOperation> {
    for (i, o) in ops.iter_mut().enumerate() {
        o.op_index = i as u64;
    }
    ops
}

fn move_op(ops: &[SymbolicOperation], from: usize, to: usize) -> Vec<SymbolicOperation> {
    let mut v = ops.to_vec();
    let op = v.remove(from);
    v.insert(to, op);
    reindexed(v)
}

fn flags(domain: Domain, ops: &[SymbolicOperation], rule: &str) -> bool {
    validate_pragmatics(domain, ops).iter().any(|v| v.rule == rule)
}

/// Moves a concede directly after the proposal of its argument.
fn moved_concede(ops: &[SymbolicOperation]) -> Option<Vec<SymbolicOperation>> {
    let c = ops.iter().position(|o| o.action_kind == ActionKind::Concede)?;
    let arg = ops[c].get("argument")?;
    let p = ops
        .iter()
        .position(|o| o.action_kind == ActionKind::ProposeArgument && o.get("argument") == Some(arg))?;
    Some(move_op(ops, c, p + 1))
}

/// Moves an inquiry before the first proposal of its entity under the same goal.
fn orphaned_inquiry(ops: &[SymbolicOperation]) -> Option<Vec<SymbolicOperation>> {
    let i = ops.iter().position(|o| o.action_kind == ActionKind::InquireDetails)?;
    let (goal, entity) = (&ops[i].latent_goal, ops[i].get("entity")?);
    let p = ops.iter().position(|o| {
        o.action_kind == ActionKind::ProposeOption && &o.latent_goal == goal && o.get("entity") == Some(entity)
    })?;
    Some(move_op(ops, i, p))
}

fn non_terminal_summarize(ops: &[SymbolicOperation]) -> Option<Vec<SymbolicOperation>> {
    let s = ops.iter().position(|o| o.action_kind == ActionKind::Summarize)?;
    Some(move_op(ops, s, ops.len() / 2))
}

fn pragmatic_soundness() -> Result<String, String> {
    let started = Instant::now();
    let plan = PlanConfig::default();
    let mut boards: BTreeMap<Domain, Vec<Vec<SymbolicOperation>>> = BTreeMap::new();
    let mut total_ops = 0;
    for domain in [Domain::Travel, Domain::Debate] {
        for seed in 0..500 {
            let world = build_environment(domain, 20, seed).map_err(|e| e.to_string())?;
            let ops = plan_storyboard(&world, &plan, seed).map_err(|e| format!("{domain:?} seed {seed}: {e}"))?;
            let violations = validate_pragmatics(domain, &ops);
            ensure(violations.is_empty(), || format!("{domain:?} seed {seed}: {violations:?}"))?;
            total_ops += ops.len();
            boards.entry(domain).or_default().push(ops);
        }
    }
    type Mutation = fn(&[SymbolicOperation]) -> Option<Vec<SymbolicOperation>>;
    let mutations: [(&str, Domain, Mutation, &str, usize); 3] = [
        ("moved concede", Domain::Debate, moved_concede, "concede-without-exchange", 17),
        ("orphaned inquiry", Domain::Travel, orphaned_inquiry, "unproposed-entity", 17),
        ("non-terminal summarize", Domain::Debate, non_terminal_summarize, "summarize-not-terminal", 16),
    ];
    let mut flagged = 0;
    for (name, domain, mutate, rule, want) in mutations {
        let mut made = 0;
        for ops in &boards[&domain] {
            if made == want {
                break;
            }
            let Some(mutated) = mutate(ops) else { continue };
            ensure(flags(domain, &mutated, rule), || {
                format!("{name} mutation not flagged as {rule}: {:?}", validate_pragmatics(domain, &mutated))
            })?;
            made += 1;
        }
        ensure(made == want, || format!("only {made} storyboards admitted a {name} mutation"))?;
        flagged += made;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 storyboards ({total_ops} ops) clean; {flagged}/50 mutations flagged"))
}

// ---------------------------------------------------------------------------
// CLI-driven criteria

fn stitch(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_stitch"))
        .args(args)
        .output()
        .map_err(|e| format!("spawning stitch: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "stitch {} exited {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn records(stdout: &str) -> Vec<Value> {
    stdout.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn gen_bench(out: &Path, domain: &str, scale: usize, seed: u64, instances: u64) -> Result<(), String> {
    stitch(&[
        "gen-bench",
        "--domain",
        domain,
        "--scale",
        &scale.to_string(),
        "--seed",
        &seed.to_string(),
        "--instances",
        &instances.to_string(),
        "--out",
        path_str(out),
    ])
    .map(drop)
}

fn audit(bench: &Path, mode: &str) -> Result<Vec<Value>, String> {
    stitch(&["--format", "records", "audit-err", "--bench", path_str(bench), "--rewrite-mode", mode]).map(|s| records(&s))
}

fn err_extremes() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut fixtures = 0;
    let mut model_err = Vec::new();
    for (domain, seed) in [("travel", 100), ("debate", 200)] {
        let bench = tmp.path().join(domain);
        gen_bench(&bench, domain, 20, seed, 10)?;
        for rec in audit(&bench, "oracle")? {
            ensure(rec["err"].as_f64() == Some(1.0), || format!("oracle ERR {} on {domain} {}", rec["err"], rec["instance"]))?;
            fixtures += 1;
        }
        for rec in audit(&bench, "disabled")? {
            ensure(rec["err"] == rec["explicit_mention_fraction"], || {
                format!(
                    "disabled ERR {} != explicit-mention fraction {} on {domain} {}",
                    rec["err"], rec["explicit_mention_fraction"], rec["instance"]
                )
            })?;
        }
        let model = audit(&bench, "model")?;
        let mean = model.iter().filter_map(|r| r["err"].as_f64()).sum::<f64>() / model.len() as f64;
        model_err.push(format!("{domain} {mean:.3}"));
    }
    ensure(fixtures == 20, || format!("{fixtures} fixtures audited"))?;
    Ok(format!(
        "20 fixtures: oracle 1.000, disabled = explicit-mention fraction; deterministic rewriter {} (reference travel 0.974, not asserted)",
        model_err.join(", ")
    ))
}

struct TravelRuns {
    _tmp: tempfile::TempDir,
    full: Value,
    ablated: Value,
    full_k5: Value,
    ablated_k5: Value,
}

fn travel_runs() -> Result<&'static TravelRuns, String> {
    static RUNS: std::sync::OnceLock<Result<TravelRuns, String>> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let bench = tmp.path().join("bench");
        gen_bench(&bench, "travel", 100, 1, 10)?;
        let run = |name: &str, extra: &[&str]| -> Result<Value, String> {
            let out = tmp.path().join(name);
            let mut args = vec!["eval", "--bench", path_str(&bench), "--out", path_str(&out)];
            args.extend_from_slice(extra);
            stitch(&args)?;
            read_json(&out.join("report.json"))
        };
        let full = run("full", &[])?;
        let ablated = run("no_scope", &["--ablate", "scope"])?;
        let full_k5 = run("full_k5", &["--k", "5"])?;
        let ablated_k5 = run("no_scope_k5", &["--k", "5", "--ablate", "scope"])?;
        Ok(TravelRuns {
            _tmp: tmp,
            full,
            ablated,
            full_k5,
            ablated_k5,
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn read_json(path: &Path) -> Result<Value, String> {
    let body = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&body).map_err(|e| format!("{}: {e}", path.display()))
}

fn overlap_sanity() -> Result<String, String> {
    let runs = travel_runs()?;
    let mut rows: Vec<(String, &Value)> = runs.full["instances"]
        .as_array()
        .ok_or("report has no instances")?
        .iter()
        .map(|i| (i["instance"].as_str().unwrap_or("?").to_string(), &i["overlap"]))
        .collect();
    ensure(rows.len() == 10, || format!("{} instances", rows.len()))?;
    rows.push(("aggregate".into(), &runs.full["aggregate"]["overlap"]));
    for (name, o) in &rows {
        let f = |k: &str| o[k].as_f64().ok_or_else(|| format!("{name}: missing {k}"));
        ensure(f("q_zero")? == 0.0, || format!("{name}: q_zero {}", o["q_zero"]))?;
        ensure(f("q_gt_full")? <= f("q_gt_at_max")?, || format!("{name}: q_gt_full > q_gt_at_max: {o}"))?;
        ensure(f("gt_cov")? <= f("gt_best_cov")?, || format!("{name}: gt_cov > gt_best_cov: {o}"))?;
    }
    let agg = &runs.full["aggregate"]["overlap"];
    Ok(format!(
        "10 instances: q_zero 0.00, q_gt_full {:.3} <= q_gt_at_max {:.3}, gt_cov {:.3} <= gt_best_cov {:.3}",
        agg["q_gt_full"].as_f64().unwrap_or(f64::NAN),
        agg["q_gt_at_max"].as_f64().unwrap_or(f64::NAN),
        agg["gt_cov"].as_f64().unwrap_or(f64::NAN),
        agg["gt_best_cov"].as_f64().unwrap_or(f64::NAN)
    ))
}

fn scope_ablation_direction() -> Result<String, String> {
    let runs = travel_runs()?;
    let hit = |r: &Value| r["aggregate"]["gold_hit_rate"].as_f64().ok_or("missing gold_hit_rate");
    let (full, ablated) = (hit(&runs.full)?, hit(&runs.ablated)?);
    ensure(runs.ablated["meta"]["ablations"] == serde_json::json!(["no_scope"]), || {
        format!("ablated run meta: {}", runs.ablated["meta"])
    })?;
    ensure(ablated <= full + 0.02, || format!("hit@40 rose from {full:.3} to {ablated:.3} without scope"))?;
    let (full5, ablated5) = (hit(&runs.full_k5)?, hit(&runs.ablated_k5)?);
    ensure(ablated5 <= full5 + 0.02, || format!("hit@5 rose from {full5:.3} to {ablated5:.3} without scope"))?;
    let f1 = |r: &Value| r["aggregate"]["scores"]["f1"].as_f64().unwrap_or(f64::NAN);
    Ok(format!(
        "gold hit@40 {full:.3} full vs {ablated:.3} without scope, hit@5 {full5:.3} vs {ablated5:.3}; F1 {:.3} vs {:.3}",
        f1(&runs.full),
        f1(&runs.ablated)
    ))
}

fn pipeline(root: &Path) -> Result<PathBuf, String> {
    let bench = root.join("bench");
    gen_bench(&bench, "travel", 30, 5, 2)?;
    for i in 0..2 {
        stitch(&["ingest", "--store", path_str(&bench.join(format!("t{i}")))])?;
    }
    let out = root.join("report");
    stitch(&["eval", "--bench", path_str(&bench), "--from-store", "--out", path_str(&out)])?;
    Ok(out)
}

fn pipeline_determinism() -> Result<String, String> {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let (ra, rb) = (pipeline(a.path())?, pipeline(b.path())?);
    let strip = |mut v: Value| {
        v.as_object_mut().map(|o| o.remove("timing"));
        v
    };
    let (ja, jb) = (strip(read_json(&ra.join("report.json"))?), strip(read_json(&rb.join("report.json"))?));
    ensure(ja == jb, || "reports differ outside timing".into())?;
    ensure(
        serde_json::to_string(&ja).unwrap() == serde_json::to_string(&jb).unwrap(),
        || "report serializations differ".into(),
    )?;
    let qa = std::fs::read(ra.join("questions.jsonl")).map_err(|e| e.to_string())?;
    let qb = std::fs::read(rb.join("questions.jsonl")).map_err(|e| e.to_string())?;
    ensure(!qa.is_empty() && qa == qb, || "questions.jsonl differs".into())?;
    for file in ["trajectory.jsonl", "questions.jsonl"] {
        let fa = std::fs::read(a.path().join("bench/t0").join(file)).map_err(|e| e.to_string())?;
        let fb = std::fs::read(b.path().join("bench/t0").join(file)).map_err(|e| e.to_string())?;
        ensure(fa == fb, || format!("generated {file} differs"))?;
    }
    Ok(format!("2 runs identical modulo timing ({} question records)", qa.split(|b| *b == b'\n').filter(|l| !l.is_empty()).count()))
}

// ---------------------------------------------------------------------------
// Consolidation

fn consolidation_fixture() -> Vec<String> {
    let mut lines = vec![
        "Let's focus on the Day 1 itinerary.".to_string(),
        "How about the Apollo Hotel?".into(),
        "How much does the Apollo Hotel cost per night?".into(),
        "It costs $120 per night.".into(),
    ];
    let hotels = ["Harbor Hotel", "Cedar Inn", "Maple Lodge", "Summit Hotel"];
    for (i, h) in hotels.iter().enumerate() {
        lines.push(format!("How about the {h}?"));
        lines.push(format!("What is the nightly tariff at the {h}?"));
        lines.push(format!("The tariff there is ${} a night.", 90 + 10 * i));
        lines.push(format!("What is the price of the {h} suite?"));
    }
    lines
}

fn consolidation_correctness() -> Result<String, String> {
    let mut rulebook = Rulebook::default();
    rulebook.event_cues.insert(
        0,
        CueGroup {
            label: "Price-Inquiry".into(),
            phrases: vec!["tariff".into()],
        },
    );
    let gateway = Arc::new(Gateway::with_rulebook(rulebook));
    let cfg = IngestionConfig {
        n_start: 4,
        k_update: 8,
        ..IngestionConfig::default()
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = Store::open(tmp.path()).map_err(|e| e.to_string())?;
    let writer = store.writer("fixture").map_err(|e| e.to_string())?;
    let mut session = IngestSession::new(writer, gateway, Arc::new(HashEmbedder::default()), cfg).map_err(|e| e.to_string())?;
    let mut peak = 0;
    let mut absorbed_seen = false;
    for (i, text) in consolidation_fixture().into_iter().enumerate() {
        let role = if i % 2 == 0 { "user" } else { "travel_agent" };
        let snippet = session
            .ingest_step(TrajectoryStep::new(i as u64, role, text, Timestamp::Tick(i as u64)))
            .map_err(|e| e.to_string())?;
        absorbed_seen |= snippet.intent.event_type == "Price-Inquiry";
        peak = peak.max(session.backend().view().session.event_vocab.len());
    }
    session.finish().map_err(|e| e.to_string())?;
    drop(session);

    let view = store.load_view("fixture").map_err(|e| e.to_string())?;
    let vocab = &view.session.event_vocab;
    let absorbed: BTreeSet<&str> = vocab.merge_log.iter().map(|m| m.absorbed_label.as_str()).collect();
    ensure(absorbed_seen, || "fixture never produced the near-duplicate label".into())?;
    ensure(absorbed.contains("Price-Inquiry"), || format!("merge log {:?}", vocab.merge_log))?;
    ensure(vocab.len() < peak, || format!("vocabulary {} not below peak {peak}", vocab.len()))?;
    let stale: Vec<u64> = view
        .snippets
        .iter()
        .filter(|s| absorbed.contains(s.intent.event_type.as_str()))
        .map(|s| s.step_index())
        .collect();
    ensure(stale.is_empty(), || format!("snippets still carry absorbed labels: {stale:?}"))?;
    Ok(format!(
        "event vocabulary {peak} -> {} after merging {:?}; 0 of {} reloaded snippets carry an absorbed label",
        vocab.len(),
        absorbed,
        view.snippets.len()
    ))
}
