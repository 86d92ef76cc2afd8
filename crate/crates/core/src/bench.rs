//! Seedable benchmark generation: closed-world environments, symbolic
//! storyboards checked against pragmatic rules, surface realization, reference
//! remodeling, turn segmentation and question derivation. Every artifact keeps
//! its symbolic ground truth so answers can be scored without a model.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, ModelTask, Payload, TaskKind};
use crate::model::{
    ActionKind, Domain, EvaluationQuestion, QuestionType, SymbolicOperation, Timestamp, TrajectoryStep,
};
use crate::records::{self, Record, RecordError};
use crate::text::{sentence_spans, Tokenizer};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),
    #[error("insufficient material: {0}")]
    InsufficientMaterial(String),
    #[error("storyboard violates pragmatic rules: {0:?}")]
    Pragmatics(Vec<PragmaticViolation>),
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

const STAGE_WORLD: u64 = 1;
const STAGE_PLAN: u64 = 2;
const STAGE_SURFACE: u64 = 3;
const STAGE_REMODEL: u64 = 4;
const STAGE_QUESTIONS: u64 = 5;

// ---------------------------------------------------------------------------
// Closed world

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldEntity {
    pub name: String,
    pub category: String,
    pub attributes: BTreeMap<String, String>,
}

impl WorldEntity {
    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).map(String::as_str)
    }
}

impl Record for WorldEntity {
    const KIND: &'static str = "world_entity";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedWorld {
    pub domain: Domain,
    pub seed: u64,
    pub topic: Option<String>,
    pub entities: Vec<WorldEntity>,
}

impl ClosedWorld {
    pub fn get(&self, name: &str) -> Option<&WorldEntity> {
        self.entities.iter().find(|e| e.name == name)
    }

    pub fn of_category(&self, category: &str) -> Vec<&WorldEntity> {
        self.entities.iter().filter(|e| e.category == category).collect()
    }

    pub fn category_of(&self, name: &str) -> Option<&str> {
        self.get(name).map(|e| e.category.as_str())
    }
}

const MYTH_NAMES: &[&str] = &[
    "Apollo", "Athena", "Artemis", "Hermes", "Hestia", "Demeter", "Daphne", "Persephone", "Dionysus",
    "Poseidon", "Hera", "Ares", "Aphrodite", "Hephaestus", "Eos", "Selene", "Helios", "Nike", "Iris",
    "Hebe", "Thalia", "Clio", "Calliope", "Urania", "Echo", "Gaia", "Rhea", "Phoebe", "Themis", "Nyx",
    "Eris", "Orpheus", "Ariadne", "Penelope", "Cassandra", "Andromeda", "Perseus", "Theseus", "Jason",
    "Medea", "Atlas", "Electra", "Castor", "Pollux", "Leda", "Triton", "Hyperion", "Ismene",
];

const EVOCATIVE: &[&str] = &[
    "Laurel", "Olive", "Marble", "Aegean", "Golden", "Silver", "Cypress", "Harbor", "Meadow", "Summit",
    "Azure", "Ivory", "Crimson", "Amber", "Willow", "Coral", "Lantern", "Orchard", "Vine", "Fig",
    "Myrtle", "Saffron", "Cedar", "Pearl", "Starlit", "Sunset", "Tidal", "Garnet", "Lyre", "Citrus",
];

const CUISINES: &[&str] = &[
    "Greek", "Italian", "seafood", "vegetarian", "Levantine", "Cretan", "Anatolian", "farm-to-table",
];

/// (category, name suffixes, price range in dollars)
const TRAVEL_CATEGORIES: &[(&str, &[&str], (u32, u32))] = &[
    ("hotel", &["Hotel", "Inn", "Lodge", "Suites", "Resort"], (60, 450)),
    ("restaurant", &["Dining", "Grill", "Bistro", "Tavern", "Kitchen"], (12, 95)),
    ("attraction", &["Museum", "Gardens", "Temple", "Gallery", "Observatory"], (5, 60)),
];

const SURNAMES: &[&str] = &[
    "Okafor", "Lindqvist", "Moreau", "Tanaka", "Haddad", "Novak", "Ferreira", "Kowalski", "Mensah",
    "Castillo", "Petrov", "Nakamura", "Osei", "Brennan", "Varga", "Halvorsen", "Quispe", "Adeyemi",
    "Larsen", "Rossi", "Iqbal", "Duarte", "Sorensen", "Abara", "Whitfield", "Kimura", "Oduya",
    "Marchetti", "Sandoval", "Holloway", "Achterberg", "Nwosu", "Valdez", "Lindgren", "Chaudhry",
    "Bergstrom", "Mbeki", "Fontaine", "Ibarra", "Kaplan",
];

const FINDINGS: &[&str] = &[
    "outcomes improved in most pilot districts",
    "spending exceeded initial estimates by a fifth",
    "public support grew after early trials",
    "benefits faded after the first two years",
    "low-income households gained the most",
    "rural regions saw little measurable change",
    "compliance rates stayed above ninety percent",
    "administrative delays doubled during rollout",
    "long-term savings outweighed startup spending",
    "effects varied widely between regions",
    "independent audits found few abuses",
    "participation dropped once incentives ended",
];

const ARGUMENT_TITLES: &[&str] = &[
    "Economic Growth", "Public Health", "Fiscal Responsibility", "Individual Liberty", "Social Equity",
    "National Security", "Environmental Impact", "Community Trust", "Labor Markets", "Regional Fairness",
    "Innovation Incentives", "Consumer Protection", "Administrative Burden", "Long-Term Stability",
    "Democratic Accountability", "Educational Access",
];

const TOPICS: &[&str] = &[
    "the federal government should substantially expand public transit funding",
    "cities should adopt a four-day public sector work week",
    "national service should be required for all adults",
    "governments should ban single-use plastics",
    "public universities should be tuition free",
    "carbon emissions should be taxed at the source",
];

const DEBATE_ARGUMENTS: usize = 8;

fn format_rating(tenths: u32) -> String {
    format!("{}.{}", tenths / 10, tenths % 10)
}

/// Builds a closed world of `scale` entities per category (travel) or
/// `scale` evidence items plus a fixed argument pool (debate).
pub fn build_environment(domain: Domain, scale: usize, seed: u64) -> Result<ClosedWorld, BenchError> {
    let mut rng = stage_rng(seed, STAGE_WORLD);
    match domain {
        Domain::Travel => {
            let cap = MYTH_NAMES.len() * EVOCATIVE.len();
            if scale == 0 || scale > cap {
                return Err(BenchError::InfeasibleConfig(format!(
                    "travel scale must be in 1..={cap}, got {scale}"
                )));
            }
            let mut entities = Vec::new();
            for (category, suffixes, (lo, hi)) in TRAVEL_CATEGORIES {
                let mut seen = HashSet::new();
                while seen.len() < scale {
                    let name = format!(
                        "{} {} {}",
                        MYTH_NAMES.choose(&mut rng).unwrap(),
                        EVOCATIVE.choose(&mut rng).unwrap(),
                        suffixes.choose(&mut rng).unwrap()
                    );
                    let base = name.rsplit_once(' ').map(|(b, _)| b.to_string()).unwrap();
                    if !seen.insert(base) {
                        continue;
                    }
                    let mut attributes = BTreeMap::new();
                    attributes.insert("price".into(), format!("${}", rng.gen_range(*lo..=*hi)));
                    attributes.insert("rating".into(), format_rating(rng.gen_range(10..=50)));
                    if *category == "restaurant" {
                        attributes.insert("cuisine".into(), CUISINES.choose(&mut rng).unwrap().to_string());
                    }
                    entities.push(WorldEntity {
                        name,
                        category: category.to_string(),
                        attributes,
                    });
                }
            }
            Ok(ClosedWorld {
                domain,
                seed,
                topic: None,
                entities,
            })
        }
        Domain::Debate => {
            let cap = SURNAMES.len() * 20;
            if !(2..=cap).contains(&scale) {
                return Err(BenchError::InfeasibleConfig(format!(
                    "debate scale must be in 2..={cap}, got {scale}"
                )));
            }
            let topic = TOPICS.choose(&mut rng).unwrap().to_string();
            let mut entities = Vec::new();
            let mut titles: Vec<&str> = ARGUMENT_TITLES.to_vec();
            titles.shuffle(&mut rng);
            for (i, title) in titles.iter().take(DEBATE_ARGUMENTS).enumerate() {
                let mut attributes = BTreeMap::new();
                let claim = if i % 2 == 0 {
                    format!("the motion strengthens {}", title.to_lowercase())
                } else {
                    format!("the motion weakens {}", title.to_lowercase())
                };
                attributes.insert("claim".into(), claim);
                entities.push(WorldEntity {
                    name: title.to_string(),
                    category: "argument".into(),
                    attributes,
                });
            }
            let mut seen = HashSet::new();
            while seen.len() < scale {
                let year = rng.gen_range(2005..2025);
                let name = format!("{} ({year})", SURNAMES.choose(&mut rng).unwrap());
                if !seen.insert(name.clone()) {
                    continue;
                }
                let mut attributes = BTreeMap::new();
                attributes.insert("evidence_id".into(), format!("ev-{:03}", seen.len()));
                attributes.insert("finding".into(), FINDINGS.choose(&mut rng).unwrap().to_string());
                attributes.insert("stance".into(), if rng.gen_bool(0.5) { "pro" } else { "con" }.into());
                entities.push(WorldEntity {
                    name,
                    category: "source".into(),
                    attributes,
                });
            }
            Ok(ClosedWorld {
                domain,
                seed,
                topic: Some(topic),
                entities,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Storyboard planning

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Hotel,
    Lunch,
    Dinner,
    Attraction,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Hotel, Slot::Lunch, Slot::Dinner, Slot::Attraction];

    pub fn as_str(self) -> &'static str {
        match self {
            Slot::Hotel => "hotel",
            Slot::Lunch => "lunch",
            Slot::Dinner => "dinner",
            Slot::Attraction => "attraction",
        }
    }

    pub fn category(self) -> &'static str {
        match self {
            Slot::Hotel => "hotel",
            Slot::Lunch | Slot::Dinner => "restaurant",
            Slot::Attraction => "attraction",
        }
    }

    fn noun(self) -> &'static str {
        match self {
            Slot::Hotel => "hotel",
            Slot::Lunch => "lunch spot",
            Slot::Dinner => "dinner spot",
            Slot::Attraction => "attraction",
        }
    }

    fn plural(self) -> &'static str {
        match self {
            Slot::Hotel => "hotels",
            Slot::Lunch => "lunch spots",
            Slot::Dinner => "dinner spots",
            Slot::Attraction => "attractions",
        }
    }

    fn parse(s: &str) -> Option<Slot> {
        Slot::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoveWeights {
    pub propose: f64,
    pub attack: f64,
    pub defend: f64,
    pub concede: f64,
    pub background: f64,
}

impl Default for MoveWeights {
    fn default() -> Self {
        Self {
            propose: 1.0,
            attack: 1.0,
            defend: 1.0,
            concede: 1.0,
            background: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub days: usize,
    pub slots: Vec<Slot>,
    pub min_proposals: usize,
    pub max_proposals: usize,
    pub inquiry_prob: f64,
    pub compare_prob: f64,
    pub revision_prob: f64,
    pub revisit_prob: f64,
    pub reuse_prob: f64,
    pub arguments: usize,
    pub debate_moves: usize,
    pub move_weights: MoveWeights,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            days: 3,
            slots: Slot::ALL.to_vec(),
            min_proposals: 2,
            max_proposals: 3,
            inquiry_prob: 0.8,
            compare_prob: 0.6,
            revision_prob: 0.35,
            revisit_prob: 0.5,
            reuse_prob: 0.3,
            arguments: 4,
            debate_moves: 28,
            move_weights: MoveWeights::default(),
        }
    }
}

fn op(
    ops: &mut Vec<SymbolicOperation>,
    role: &str,
    kind: ActionKind,
    goal: &str,
    payload: &[(&str, &str)],
) -> u64 {
    let op_index = ops.len() as u64;
    ops.push(SymbolicOperation {
        op_index,
        role: role.into(),
        action_kind: kind,
        latent_goal: goal.into(),
        payload: payload.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    });
    op_index
}

const USER: &str = "user";
const AGENT: &str = "travel_agent";
const PRO: &str = "pro_debater";
const CON: &str = "con_debater";
const MODERATOR: &str = "moderator";

fn check_probability(name: &str, p: f64) -> Result<(), BenchError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(BenchError::InfeasibleConfig(format!("{name} must be in [0, 1], got {p}")))
    }
}

/// Samples a storyboard over `world`. The result always satisfies
/// [`validate_pragmatics`] and places at least one entity under two goals.
pub fn plan_storyboard(world: &ClosedWorld, cfg: &PlanConfig, seed: u64) -> Result<Vec<SymbolicOperation>, BenchError> {
    for (name, p) in [
        ("inquiry_prob", cfg.inquiry_prob),
        ("compare_prob", cfg.compare_prob),
        ("revision_prob", cfg.revision_prob),
        ("revisit_prob", cfg.revisit_prob),
        ("reuse_prob", cfg.reuse_prob),
    ] {
        check_probability(name, p)?;
    }
    let mut rng = stage_rng(seed, STAGE_PLAN);
    let ops = match world.domain {
        Domain::Travel => plan_travel(world, cfg, &mut rng)?,
        Domain::Debate => plan_debate(world, cfg, &mut rng)?,
    };
    let violations = validate_pragmatics(world.domain, &ops);
    if !violations.is_empty() {
        return Err(BenchError::Pragmatics(violations));
    }
    Ok(ops)
}

fn plan_travel(world: &ClosedWorld, cfg: &PlanConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SymbolicOperation>, BenchError> {
    if cfg.days == 0 || cfg.slots.is_empty() {
        return Err(BenchError::InfeasibleConfig("travel plans need at least one day and one slot".into()));
    }
    if cfg.min_proposals == 0 || cfg.min_proposals > cfg.max_proposals {
        return Err(BenchError::InfeasibleConfig(format!(
            "proposal range {}..={} is empty or zero",
            cfg.min_proposals, cfg.max_proposals
        )));
    }
    for slot in &cfg.slots {
        let available = world.of_category(slot.category()).len();
        if available < cfg.max_proposals {
            return Err(BenchError::InfeasibleConfig(format!(
                "{} {} entities cannot support {} proposals per slot",
                available,
                slot.category(),
                cfg.max_proposals
            )));
        }
    }

    let mut ops = Vec::new();
    let mut proposed: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut goal_proposals: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut finals: BTreeMap<String, String> = BTreeMap::new();
    let mut reused = false;

    for d in 1..=cfg.days {
        let day = format!("Day {d}");
        op(&mut ops, USER, ActionKind::IndicateDate, &format!("{day} itinerary"), &[("day", &day), ("mode", "focus")]);
        for &slot in &cfg.slots {
            let category = slot.category();
            let goal = format!("{day} {}", slot.as_str());
            let n = rng.gen_range(cfg.min_proposals..=cfg.max_proposals);
            let prior = proposed.get(category).cloned().unwrap_or_default();
            let mut chosen: Vec<String> = Vec::new();
            if !prior.is_empty() && (!reused || rng.gen_bool(cfg.reuse_prob)) {
                chosen.push(prior.choose(rng).unwrap().clone());
                reused = true;
            }
            let pool = world.of_category(category);
            while chosen.len() < n {
                let fresh: Vec<&&WorldEntity> = pool
                    .iter()
                    .filter(|e| !chosen.contains(&e.name) && !prior.contains(&e.name))
                    .collect();
                let pick = match fresh.choose(rng) {
                    Some(e) => e.name.clone(),
                    None => pool
                        .iter()
                        .filter(|e| !chosen.contains(&e.name))
                        .collect::<Vec<_>>()
                        .choose(rng)
                        .expect("pool larger than max proposals")
                        .name
                        .clone(),
                };
                chosen.push(pick);
            }
            chosen.shuffle(rng);
            let base = [("day", day.as_str()), ("slot", slot.as_str()), ("category", category)];
            for e in &chosen {
                let mut p = base.to_vec();
                p.push(("entity", e));
                op(&mut ops, AGENT, ActionKind::ProposeOption, &goal, &p);
                let list = proposed.entry(category).or_default();
                if !list.contains(e) {
                    list.push(e.clone());
                }
            }
            goal_proposals.insert(goal.clone(), chosen.clone());

            if rng.gen_bool(cfg.inquiry_prob) {
                let e = chosen.choose(rng).unwrap().clone();
                let attribute = if rng.gen_bool(0.5) { "price" } else { "rating" };
                let value = world.get(&e).and_then(|w| w.attr(attribute)).unwrap_or_default().to_string();
                let mut p = base.to_vec();
                p.extend([("entity", e.as_str()), ("attribute", attribute)]);
                op(&mut ops, USER, ActionKind::InquireDetails, &goal, &p);
                p.push(("value", &value));
                op(&mut ops, AGENT, ActionKind::InquireDetails, &goal, &p);
            }
            if chosen.len() >= 2 && rng.gen_bool(cfg.compare_prob) {
                let pair: Vec<&String> = chosen.choose_multiple(rng, 2).collect();
                let mut p = base.to_vec();
                p.extend([("entity", pair[0].as_str()), ("other", pair[1].as_str())]);
                op(&mut ops, USER, ActionKind::CompareOptions, &goal, &p);
            }
            let mut choice = chosen.choose(rng).unwrap().clone();
            let mut p = base.to_vec();
            p.extend([("entity", choice.as_str()), ("revision", "false")]);
            op(&mut ops, USER, ActionKind::MakeDecision, &goal, &p);
            if chosen.len() >= 2 && rng.gen_bool(cfg.revision_prob) {
                let others: Vec<&String> = chosen.iter().filter(|c| **c != choice).collect();
                choice = (*others.choose(rng).unwrap()).clone();
                let mut p = base.to_vec();
                p.extend([("entity", choice.as_str()), ("revision", "true")]);
                op(&mut ops, USER, ActionKind::MakeDecision, &goal, &p);
            }
            finals.insert(goal, choice);
        }

        if d >= 2 && rng.gen_bool(cfg.revisit_prob) {
            let earlier = rng.gen_range(1..d);
            let slots: Vec<Slot> = cfg
                .slots
                .iter()
                .copied()
                .filter(|s| goal_proposals[&format!("Day {earlier} {}", s.as_str())].len() >= 2)
                .collect();
            if let Some(&slot) = slots.choose(rng) {
                let day = format!("Day {earlier}");
                let goal = format!("{day} {}", slot.as_str());
                op(&mut ops, USER, ActionKind::IndicateDate, &format!("{day} itinerary"), &[("day", &day), ("mode", "revisit")]);
                let current = finals[&goal].clone();
                let others: Vec<&String> = goal_proposals[&goal].iter().filter(|c| **c != current).collect();
                let choice = (*others.choose(rng).unwrap()).clone();
                op(
                    &mut ops,
                    USER,
                    ActionKind::MakeDecision,
                    &goal,
                    &[
                        ("day", &day),
                        ("slot", slot.as_str()),
                        ("category", slot.category()),
                        ("entity", &choice),
                        ("revision", "true"),
                    ],
                );
                finals.insert(goal, choice);
            }
        }
    }
    if !reused {
        return Err(BenchError::InfeasibleConfig(
            "no slot shares a category with an earlier slot, so no entity can recur under a second goal".into(),
        ));
    }
    Ok(ops)
}

#[derive(Default, Clone)]
struct ArgState {
    title: String,
    side: &'static str,
    proposed: bool,
    attacked: bool,
    defended: bool,
    conceded: bool,
}

fn opponent(side: &str) -> &'static str {
    if side == "pro" {
        "con"
    } else {
        "pro"
    }
}

fn debater(side: &str) -> &'static str {
    if side == "pro" {
        PRO
    } else {
        CON
    }
}

fn plan_debate(world: &ClosedWorld, cfg: &PlanConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SymbolicOperation>, BenchError> {
    let titles = world.of_category("argument");
    let sources = world.of_category("source");
    if cfg.arguments < 2 || cfg.arguments > titles.len() {
        return Err(BenchError::InfeasibleConfig(format!(
            "debates need between 2 and {} arguments, got {}",
            titles.len(),
            cfg.arguments
        )));
    }
    if sources.len() < 2 {
        return Err(BenchError::InfeasibleConfig("debates need at least two evidence items".into()));
    }
    if cfg.debate_moves < cfg.arguments + 4 {
        return Err(BenchError::InfeasibleConfig(format!(
            "{} moves cannot cover {} arguments with evidence reuse",
            cfg.debate_moves, cfg.arguments
        )));
    }
    let w = &cfg.move_weights;
    for (name, v) in [
        ("propose", w.propose),
        ("attack", w.attack),
        ("defend", w.defend),
        ("concede", w.concede),
        ("background", w.background),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(BenchError::InfeasibleConfig(format!("move weight {name} must be non-negative")));
        }
    }
    if w.propose <= 0.0 || w.attack + w.background <= 0.0 {
        return Err(BenchError::InfeasibleConfig(
            "propose and at least one evidence-citing move need positive weight".into(),
        ));
    }

    const ATTEMPTS: usize = 32;
    for _ in 0..ATTEMPTS {
        let mut picked: Vec<&&WorldEntity> = titles.iter().collect();
        picked.shuffle(rng);
        let mut args: Vec<ArgState> = picked
            .iter()
            .take(cfg.arguments)
            .enumerate()
            .map(|(i, t)| ArgState {
                title: t.name.clone(),
                side: if i % 2 == 0 { "pro" } else { "con" },
                ..Default::default()
            })
            .collect();
        let mut cited: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut reused = false;
        let mut ops = Vec::new();
        let propose = |ops: &mut Vec<SymbolicOperation>, a: &mut ArgState| {
            let claim = world.get(&a.title).and_then(|e| e.attr("claim")).unwrap_or_default().to_string();
            op(
                ops,
                debater(a.side),
                ActionKind::ProposeArgument,
                &a.title,
                &[("argument", &a.title), ("side", a.side), ("claim", &claim)],
            );
            a.proposed = true;
        };
        propose(&mut ops, &mut args[0]);

        while ops.len() + 1 < cfg.debate_moves {
            let mut legal: Vec<(ActionKind, usize, f64)> = Vec::new();
            if let Some(i) = args.iter().position(|a| !a.proposed) {
                legal.push((ActionKind::ProposeArgument, i, w.propose));
            }
            for (i, a) in args.iter().enumerate().filter(|(_, a)| a.proposed) {
                legal.push((ActionKind::SupplyBackground, i, w.background));
                if a.conceded {
                    continue;
                }
                legal.push((ActionKind::Attack, i, w.attack));
                if a.attacked {
                    legal.push((ActionKind::Defend, i, w.defend));
                }
                if a.attacked && a.defended {
                    legal.push((ActionKind::Concede, i, w.concede));
                }
            }
            let weights: Vec<f64> = legal.iter().map(|l| l.2).collect();
            let Ok(dist) = WeightedIndex::new(&weights) else {
                break;
            };
            let (kind, i, _) = legal[dist.sample(rng)];
            let title = args[i].title.clone();
            let side = args[i].side;
            match kind {
                ActionKind::ProposeArgument => propose(&mut ops, &mut args[i]),
                ActionKind::Concede => {
                    op(&mut ops, debater(side), kind, &title, &[("argument", &title), ("side", side)]);
                    args[i].conceded = true;
                }
                _ => {
                    let elsewhere: Vec<&String> = cited
                        .iter()
                        .filter(|(t, _)| **t != title)
                        .flat_map(|(_, v)| v.iter())
                        .filter(|e| !cited.get(&title).is_some_and(|own| own.contains(e)))
                        .collect();
                    let evidence = if !elsewhere.is_empty() && (!reused || rng.gen_bool(cfg.reuse_prob)) {
                        reused = true;
                        (*elsewhere.choose(rng).unwrap()).clone()
                    } else {
                        sources.choose(rng).unwrap().name.clone()
                    };
                    let src = world.get(&evidence).unwrap();
                    let (role, speaker_side) = match kind {
                        ActionKind::Attack => (debater(opponent(side)), opponent(side)),
                        ActionKind::Defend => (debater(side), side),
                        _ => (MODERATOR, "neutral"),
                    };
                    op(
                        &mut ops,
                        role,
                        kind,
                        &title,
                        &[
                            ("argument", &title),
                            ("side", speaker_side),
                            ("entity", &evidence),
                            ("evidence_id", src.attr("evidence_id").unwrap_or_default()),
                            ("finding", src.attr("finding").unwrap_or_default()),
                        ],
                    );
                    let list = cited.entry(title.clone()).or_default();
                    if !list.contains(&evidence) {
                        list.push(evidence);
                    }
                    match kind {
                        ActionKind::Attack => args[i].attacked = true,
                        ActionKind::Defend => args[i].defended = true,
                        _ => {}
                    }
                }
            }
        }
        let covered: Vec<String> = args.iter().filter(|a| a.proposed).map(|a| a.title.clone()).collect();
        op(&mut ops, MODERATOR, ActionKind::Summarize, "closing", &[("arguments", &covered.join("; "))]);
        if reused {
            return Ok(ops);
        }
    }
    Err(BenchError::InfeasibleConfig(format!(
        "no evidence reuse across arguments after {ATTEMPTS} attempts; raise debate_moves"
    )))
}

// ---------------------------------------------------------------------------
// Pragmatic validation

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PragmaticViolation {
    pub op_index: u64,
    pub rule: String,
}

/// Checks an operation sequence against the domain's ordering rules and
/// returns every violation found.
pub fn validate_pragmatics(domain: Domain, ops: &[SymbolicOperation]) -> Vec<PragmaticViolation> {
    let mut out = Vec::new();
    let mut flag = |op: &SymbolicOperation, rule: &str| {
        out.push(PragmaticViolation {
            op_index: op.op_index,
            rule: rule.into(),
        })
    };
    for (i, o) in ops.iter().enumerate() {
        if o.op_index != i as u64 {
            flag(o, "op-index-sequence");
        }
        if o.action_kind.domain() != domain {
            flag(o, "foreign-action");
        }
    }
    match domain {
        Domain::Travel => {
            let mut proposed: HashSet<(String, String)> = HashSet::new();
            for o in ops {
                let goal = o.latent_goal.clone();
                let key = |name: &str| (goal.clone(), name.to_string());
                match o.action_kind {
                    ActionKind::IndicateDate => {
                        if o.get("day").is_none() {
                            flag(o, "date-without-day");
                        }
                    }
                    ActionKind::ProposeOption => match o.get("entity") {
                        Some(e) => {
                            proposed.insert(key(e));
                        }
                        None => flag(o, "proposal-without-entity"),
                    },
                    ActionKind::InquireDetails | ActionKind::MakeDecision => match o.get("entity") {
                        Some(e) if proposed.contains(&key(e)) => {}
                        _ => flag(o, "unproposed-entity"),
                    },
                    ActionKind::CompareOptions => match (o.get("entity"), o.get("other")) {
                        (Some(a), Some(b)) if a != b && proposed.contains(&key(a)) && proposed.contains(&key(b)) => {}
                        _ => flag(o, "compare-needs-two-proposals"),
                    },
                    _ => {}
                }
            }
        }
        Domain::Debate => {
            let mut proposed = HashSet::new();
            let mut attacked = HashSet::new();
            let mut defended = HashSet::new();
            let mut conceded = HashSet::new();
            for (i, o) in ops.iter().enumerate() {
                let arg = o.get("argument").unwrap_or_default().to_string();
                match o.action_kind {
                    ActionKind::ProposeArgument => {
                        if !proposed.insert(arg) {
                            flag(o, "duplicate-proposal");
                        }
                    }
                    ActionKind::Attack | ActionKind::Defend | ActionKind::Concede => {
                        if !proposed.contains(&arg) {
                            flag(o, "argument-not-proposed");
                        }
                        if conceded.contains(&arg) {
                            flag(o, "move-after-concede");
                        }
                        match o.action_kind {
                            ActionKind::Attack => {
                                attacked.insert(arg);
                            }
                            ActionKind::Defend => {
                                if !attacked.contains(&arg) {
                                    flag(o, "defend-without-attack");
                                }
                                defended.insert(arg);
                            }
                            _ => {
                                if !(attacked.contains(&arg) && defended.contains(&arg)) {
                                    flag(o, "concede-without-exchange");
                                }
                                conceded.insert(arg);
                            }
                        }
                    }
                    ActionKind::SupplyBackground => {
                        if !proposed.contains(&arg) {
                            flag(o, "argument-not-proposed");
                        }
                    }
                    ActionKind::Summarize => {
                        if i + 1 != ops.len() {
                            flag(o, "summarize-not-terminal");
                        }
                    }
                    _ => {}
                }
                if matches!(
                    o.action_kind,
                    ActionKind::Attack | ActionKind::Defend | ActionKind::SupplyBackground
                ) && o.get("entity").is_none()
                {
                    flag(o, "move-without-evidence");
                }
            }
        }
    }
    out
}

/// Payload names that do not exist in the world.
pub fn unknown_payload_entities(world: &ClosedWorld, ops: &[SymbolicOperation]) -> Vec<(u64, String)> {
    let mut out = Vec::new();
    for o in ops {
        for key in ["entity", "other", "argument"] {
            if let Some(name) = o.get(key) {
                if world.get(name).is_none() {
                    out.push((o.op_index, name.to_string()));
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Surface realization

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceMode {
    #[default]
    Template,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceSource {
    Template,
    Model,
    TemplateFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Realization {
    pub op_index: u64,
    pub role: String,
    pub text: String,
    pub source: SurfaceSource,
}

fn join_titles(items: &[&str]) -> String {
    match items {
        [] => "no arguments".into(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Number of template variants available for an operation.
pub fn template_variants(op: &SymbolicOperation) -> usize {
    match op.action_kind {
        ActionKind::Summarize => 1,
        ActionKind::IndicateDate | ActionKind::ProposeArgument => 2,
        ActionKind::ProposeOption => 4,
        _ => 2,
    }
}

/// Deterministic template text for `op`. Templates name every payload
/// entity exactly once and avoid trigger pronouns.
pub fn template_text(op: &SymbolicOperation, world: &ClosedWorld, variant: usize) -> String {
    let g = |k: &str| op.get(k).unwrap_or_default();
    let v = variant % template_variants(op);
    let (day, entity, other, value, arg) = (g("day"), g("entity"), g("other"), g("value"), g("argument"));
    let slot = g("slot");
    match op.action_kind {
        ActionKind::IndicateDate => match (g("mode"), v) {
            ("revisit", _) => format!("Let's go back to the {day} itinerary."),
            (_, 0) => format!("Let's focus on the {day} itinerary."),
            _ => format!("Let's focus on the {day} itinerary now."),
        },
        ActionKind::ProposeOption => {
            let first = match v {
                0 => format!("For the {day} {slot}, how about {entity}?"),
                1 => format!("One option for the {day} {slot} is {entity}."),
                2 => format!("I suggest {entity} for the {day} {slot}."),
                _ => format!("You could consider {entity} for the {day} {slot}."),
            };
            let detail = match g("category") {
                "hotel" => "The rooms are quiet and close to the old quarter.".to_string(),
                "restaurant" => {
                    let cuisine = world.get(entity).and_then(|e| e.attr("cuisine")).unwrap_or("local");
                    format!("The menu leans toward {cuisine} dishes.")
                }
                _ => "The visit fits well into half a day.".to_string(),
            };
            format!("{first} {detail}")
        }
        ActionKind::InquireDetails => match (op.get("value"), g("attribute"), v) {
            (None, "price", 0) => format!("How much does {entity} cost?"),
            (None, "price", _) => format!("What is the price of {entity} for the {day} {slot}?"),
            (None, _, 0) => format!("How is {entity} rated?"),
            (None, _, _) => format!("What rating does {entity} have?"),
            (Some(_), "price", _) => match g("category") {
                "hotel" => format!("{entity} costs {value} per night."),
                "restaurant" => format!("{entity} costs about {value} per person."),
                _ => format!("A ticket for {entity} costs {value}."),
            },
            (Some(_), _, _) => format!("{entity} is rated {value} out of 5 in recent reviews."),
        },
        ActionKind::CompareOptions => match v {
            0 => format!("Could you compare {entity} with {other} for the {day} {slot}?"),
            _ => format!("Which is better for the {day} {slot}, {entity} or {other}?"),
        },
        ActionKind::MakeDecision => match (g("revision"), v) {
            ("true", 0) => format!("Actually, let's switch to {entity} for the {day} {slot} instead."),
            ("true", _) => format!("On second thought, let's book {entity} for the {day} {slot}."),
            (_, 0) => format!("Let's go with {entity} for the {day} {slot}."),
            _ => format!("We'll take {entity} for the {day} {slot}."),
        },
        ActionKind::ProposeArgument => match v {
            0 => format!("Turning to {arg}, I argue that {}.", g("claim")),
            _ => format!("Turning to {arg}, I contend that {}.", g("claim")),
        },
        ActionKind::Attack => match v {
            0 => format!("I disagree on {arg}, since {entity} found that {}.", g("finding")),
            _ => format!("The {arg} case is flawed, because {entity} reports that {}.", g("finding")),
        },
        ActionKind::Defend => match v {
            0 => format!("In defense of {arg}, {entity} shows that {}.", g("finding")),
            _ => format!("The {arg} point still holds, as {entity} found that {}.", g("finding")),
        },
        ActionKind::Concede => match v {
            0 => format!("I concede the point on {arg}."),
            _ => format!("Fair point, I accept the criticism of {arg}."),
        },
        ActionKind::SupplyBackground => match v {
            0 => format!("For background on {arg}, research by {entity} found that {}.", g("finding")),
            _ => format!("According to {entity}, {}, which bears on {arg}.", g("finding")),
        },
        ActionKind::Summarize => {
            let titles: Vec<&str> = g("arguments").split("; ").filter(|s| !s.is_empty()).collect();
            format!("To summarize, the debate covered {}.", join_titles(&titles))
        }
    }
}

fn payload_json(op: &SymbolicOperation) -> String {
    serde_json::to_string(&op.payload).expect("string maps serialize")
}

/// Realizes one operation. Model output is kept only when the gateway
/// confirms it entails the payload; otherwise the template text is used.
pub fn realize_surface(
    op: &SymbolicOperation,
    world: &ClosedWorld,
    mode: SurfaceMode,
    gateway: Option<&Gateway>,
    variant: usize,
) -> Realization {
    let template = template_text(op, world, variant);
    let done = |text: String, source| Realization {
        op_index: op.op_index,
        role: op.role.clone(),
        text,
        source,
    };
    let (SurfaceMode::Model, Some(gw)) = (mode, gateway) else {
        return done(template, SurfaceSource::Template);
    };
    let payload = payload_json(op);
    let drafted = ModelTask::with(
        TaskKind::SurfaceRealize,
        [
            ("role", op.role.as_str()),
            ("action_kind", op.action_kind.as_str()),
            ("payload", payload.as_str()),
            ("template_text", template.as_str()),
        ],
    )
    .and_then(|t| gw.run_task(&t));
    let text = match drafted.map(|r| r.payload) {
        Ok(Payload::Text(t)) if !t.trim().is_empty() => crate::text::collapse_whitespace(&t),
        _ => return done(template, SurfaceSource::TemplateFallback),
    };
    let verdict = ModelTask::with(TaskKind::EntailmentCheck, [("payload", payload.as_str()), ("text", text.as_str())])
        .and_then(|t| gw.run_task(&t));
    match verdict.map(|r| r.payload) {
        Ok(Payload::Verdict(true)) => done(text, SurfaceSource::Model),
        _ => done(template, SurfaceSource::TemplateFallback),
    }
}

/// Realizes a whole storyboard with seeded template variants.
pub fn realize_all(
    ops: &[SymbolicOperation],
    world: &ClosedWorld,
    mode: SurfaceMode,
    gateway: Option<&Gateway>,
    seed: u64,
) -> Vec<Realization> {
    let mut rng = stage_rng(seed, STAGE_SURFACE);
    ops.iter()
        .map(|o| {
            let variant = rng.gen_range(0..template_variants(o));
            realize_surface(o, world, mode, gateway, variant)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reference remodeling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceForm {
    Pronoun,
    Ordinal,
}

/// One remodeled mention, located in the realized text of its operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Remodel {
    pub op_index: u64,
    pub expression: String,
    pub canonical: String,
    pub form: ReferenceForm,
    /// Byte offset of the expression in the remodeled operation text.
    pub offset: usize,
}

/// Ground truth for one remodeled mention, keyed by trajectory step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionEntry {
    pub step_index: u64,
    pub op_index: u64,
    pub expression: String,
    pub canonical: String,
    pub form: ReferenceForm,
}

impl Record for ResolutionEntry {
    const KIND: &'static str = "resolution_entry";
}

fn ordinal_suffix(n: usize) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

fn lower_first(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

fn at_sentence_start(text: &str, pos: usize) -> bool {
    let before = text[..pos].trim_end();
    before.is_empty() || before.ends_with(['.', '!', '?'])
}

fn mentions(op: &SymbolicOperation) -> impl Iterator<Item = &str> {
    ["entity", "other"].into_iter().filter_map(|k| op.get(k))
}

/// Replaces repeat mentions of payload entities with a pronoun or an
/// ordinal description at `rate`. First mentions are never replaced.
pub fn remodel_references(
    ops: &[SymbolicOperation],
    turns: &[Realization],
    world: &ClosedWorld,
    rate: f64,
    seed: u64,
) -> (Vec<Realization>, Vec<Remodel>) {
    let mut rng = stage_rng(seed, STAGE_REMODEL);
    let mut out: Vec<Realization> = turns.to_vec();
    let mut edits = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let rate = rate.clamp(0.0, 1.0);

    for (i, o) in ops.iter().enumerate() {
        let candidate = o.get("entity").map(str::to_string);
        let repeat = candidate.as_ref().is_some_and(|e| seen.contains(e));
        let draw = rng.gen_bool(rate);
        for m in mentions(o) {
            seen.insert(m.to_string());
        }
        let (Some(entity), true, true) = (candidate, repeat, draw) else { continue };
        let text = &turns[i].text;
        let Some(pos) = text.find(&entity) else { continue };

        let prev_explicit = i > 0
            && ops[i - 1].get("entity") == Some(entity.as_str())
            && ops[i - 1].get("other").is_none()
            && out[i - 1].text.contains(&entity);
        let (expression, form) = if world.domain == Domain::Travel && prev_explicit && o.get("other").is_none() {
            ("it".to_string(), ReferenceForm::Pronoun)
        } else {
            let Some(expr) = ordinal_expression(ops, i, &entity, world) else { continue };
            (expr, ReferenceForm::Ordinal)
        };
        let expression = if at_sentence_start(text, pos) {
            crate::text::title_case_first(&expression)
        } else {
            expression
        };
        let mut remodeled = String::with_capacity(text.len());
        remodeled.push_str(&text[..pos]);
        remodeled.push_str(&expression);
        remodeled.push_str(&text[pos + entity.len()..]);
        out[i].text = remodeled;
        edits.push(Remodel {
            op_index: o.op_index,
            expression,
            canonical: entity,
            form,
            offset: pos,
        });
    }
    (out, edits)
}

fn ordinal_expression(ops: &[SymbolicOperation], i: usize, entity: &str, world: &ClosedWorld) -> Option<String> {
    match world.domain {
        Domain::Travel => {
            let category = world.category_of(entity)?;
            let anchor = ops[..i]
                .iter()
                .find(|o| o.action_kind == ActionKind::ProposeOption && o.get("entity") == Some(entity))?
                .get("day")?
                .to_string();
            let mut order: Vec<&str> = Vec::new();
            for o in ops[..i].iter().filter(|o| o.get("day") == Some(anchor.as_str())) {
                for m in mentions(o) {
                    if world.category_of(m) == Some(category) && !order.contains(&m) {
                        order.push(m);
                    }
                }
            }
            let n = order.iter().position(|m| *m == entity)? + 1;
            Some(format!("the {} {category} we raised for {anchor}", ordinal_suffix(n)))
        }
        Domain::Debate => {
            let arg = ops[..i].iter().find(|o| o.get("entity") == Some(entity))?.get("argument")?;
            let mut order: Vec<&str> = Vec::new();
            for o in ops[..i].iter().filter(|o| o.get("argument") == Some(arg)) {
                if let Some(e) = o.get("entity") {
                    if !order.contains(&e) {
                        order.push(e);
                    }
                }
            }
            let n = order.iter().position(|m| *m == entity)? + 1;
            Some(format!("the {} source we cited for {arg}", ordinal_suffix(n)))
        }
    }
}

// ---------------------------------------------------------------------------
// Segmentation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub step_index: u64,
    pub op_index: u64,
}

impl Record for ProvenanceEntry {
    const KIND: &'static str = "provenance_entry";
}

/// Groups of at most `max_sentences` consecutive sentences.
pub fn segment_spans(text: &str, max_sentences: usize) -> Vec<Range<usize>> {
    let spans = sentence_spans(text);
    if spans.is_empty() {
        return vec![0..text.len()];
    }
    spans
        .chunks(max_sentences.max(1))
        .map(|c| c[0].start..c[c.len() - 1].end)
        .collect()
}

fn step_timestamp(step: u64) -> Timestamp {
    let base = NaiveDate::from_ymd_opt(2025, 5, 15)
        .and_then(|d| d.and_hms_opt(8, 0, 0))
        .expect("valid base time");
    Timestamp::Iso((base + Duration::minutes(step as i64)).format("%Y-%m-%dT%H:%M").to_string())
}

/// Splits each realized turn into steps of at most `max_sentences`
/// sentences. Returns the steps, per-step provenance and, per step, the byte
/// range it covers in its operation text.
pub fn segment_turns(
    turns: &[Realization],
    max_sentences: usize,
) -> (Vec<TrajectoryStep>, Vec<ProvenanceEntry>, Vec<Range<usize>>) {
    let mut steps = Vec::new();
    let mut provenance = Vec::new();
    let mut ranges = Vec::new();
    for t in turns {
        for r in segment_spans(&t.text, max_sentences) {
            let step_index = steps.len() as u64;
            steps.push(TrajectoryStep::new(
                step_index,
                t.role.clone(),
                t.text[r.clone()].to_string(),
                step_timestamp(step_index),
            ));
            provenance.push(ProvenanceEntry {
                step_index,
                op_index: t.op_index,
            });
            ranges.push(r);
        }
    }
    (steps, provenance, ranges)
}

// ---------------------------------------------------------------------------
// Questions

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuestionConfig {
    pub state_tracking: usize,
    pub contextual_recall: usize,
    pub multi_hop: usize,
    pub synthesis: usize,
}

impl Default for QuestionConfig {
    fn default() -> Self {
        Self {
            state_tracking: 4,
            contextual_recall: 3,
            multi_hop: 2,
            synthesis: 2,
        }
    }
}

impl QuestionConfig {
    fn count(&self, t: QuestionType) -> usize {
        match t {
            QuestionType::StateTracking => self.state_tracking,
            QuestionType::ContextualRecall => self.contextual_recall,
            QuestionType::MultiHop => self.multi_hop,
            QuestionType::Synthesis => self.synthesis,
        }
    }
}

struct Draft {
    text: String,
    gold: BTreeSet<String>,
    ops: BTreeSet<u64>,
}

fn draft(text: String, gold: impl IntoIterator<Item = String>, ops: impl IntoIterator<Item = u64>) -> Draft {
    Draft {
        text,
        gold: gold.into_iter().collect(),
        ops: ops.into_iter().collect(),
    }
}

/// Derives questions of the four types from the symbolic record. Gold
/// answers and supporting operations come from the storyboard, never from
/// surface text.
pub fn derive_questions(
    ops: &[SymbolicOperation],
    world: &ClosedWorld,
    resolution: &[ResolutionEntry],
    cfg: &QuestionConfig,
    seed: u64,
) -> Result<Vec<EvaluationQuestion>, BenchError> {
    let mut rng = stage_rng(seed, STAGE_QUESTIONS);
    let mut pools: BTreeMap<QuestionType, Vec<Draft>> = match world.domain {
        Domain::Travel => travel_drafts(ops, resolution),
        Domain::Debate => debate_drafts(ops, resolution),
    };
    if cfg.multi_hop > 0 && pools.get(&QuestionType::MultiHop).is_none_or(Vec::is_empty) {
        return Err(BenchError::InsufficientMaterial(
            "multi-hop questions requested but no mention was remodeled".into(),
        ));
    }
    let mut out = Vec::new();
    for t in QuestionType::ALL {
        let Some(pool) = pools.get_mut(&t) else { continue };
        // keep the first candidate (the richest form) and shuffle the rest
        if pool.len() > 1 {
            pool[1..].shuffle(&mut rng);
        }
        for d in pool.drain(..).take(cfg.count(t)) {
            let question_id = format!("{}-s{}-q{:02}", world.domain.as_str(), world.seed, out.len());
            out.push(EvaluationQuestion {
                question_id,
                qtype: t,
                text: d.text,
                gold_answers: d.gold,
                supporting_ops: d.ops,
            });
        }
    }
    Ok(out)
}

fn travel_drafts(ops: &[SymbolicOperation], resolution: &[ResolutionEntry]) -> BTreeMap<QuestionType, Vec<Draft>> {
    let mut pools: BTreeMap<QuestionType, Vec<Draft>> = BTreeMap::new();
    let goal_key = |o: &SymbolicOperation| (o.get("day").unwrap_or_default().to_string(), o.get("slot").unwrap_or_default().to_string());
    let mut decisions: BTreeMap<(String, String), Vec<(u64, String)>> = BTreeMap::new();
    for o in ops.iter().filter(|o| o.action_kind == ActionKind::MakeDecision) {
        decisions
            .entry(goal_key(o))
            .or_default()
            .push((o.op_index, o.get("entity").unwrap_or_default().to_string()));
    }
    let day_num = |d: &str| d.trim_start_matches("Day ").parse::<u64>().unwrap_or(0);
    let mut goals: Vec<&(String, String)> = decisions.keys().collect();
    goals.sort_by_key(|(d, s)| (day_num(d), Slot::parse(s)));

    // state tracking: any-point sets first, then finals
    let mut state = Vec::new();
    for key in &goals {
        let list = &decisions[*key];
        let slot = Slot::parse(&key.1).unwrap_or(Slot::Hotel);
        let distinct: BTreeSet<String> = list.iter().map(|(_, e)| e.clone()).collect();
        if distinct.len() >= 2 {
            state.push(draft(
                format!("Which {} were chosen at any point for {}?", slot.plural(), key.0),
                distinct,
                list.iter().map(|(i, _)| *i),
            ));
        }
    }
    for key in &goals {
        let (last_op, last) = decisions[*key].last().unwrap().clone();
        let slot = Slot::parse(&key.1).unwrap_or(Slot::Hotel);
        state.push(draft(
            format!("What is the final {} chosen for {}?", slot.noun(), key.0),
            [last],
            [last_op],
        ));
    }
    pools.insert(QuestionType::StateTracking, state);

    // contextual recall: values quoted in answers
    let mut recall = Vec::new();
    let mut seen = HashSet::new();
    for o in ops.iter().filter(|o| o.action_kind == ActionKind::InquireDetails && o.get("value").is_some()) {
        let (e, attr, v) = (o.get("entity").unwrap(), o.get("attribute").unwrap_or("price"), o.get("value").unwrap());
        if !seen.insert((e.to_string(), attr.to_string())) {
            continue;
        }
        let slot = Slot::parse(o.get("slot").unwrap_or_default()).unwrap_or(Slot::Hotel);
        let mut support = vec![o.op_index];
        if o.op_index > 0 && ops[o.op_index as usize - 1].action_kind == ActionKind::InquireDetails {
            support.push(o.op_index - 1);
        }
        recall.push(draft(
            format!(
                "What {attr} was quoted for {e} while planning the {} {}?",
                o.get("day").unwrap_or_default(),
                slot.noun()
            ),
            [v.to_string()],
            support,
        ));
    }
    pools.insert(QuestionType::ContextualRecall, recall);

    // multi-hop: resolve a remodeled reference, then look up a value
    let mut hop = Vec::new();
    let mut entries: Vec<&ResolutionEntry> = resolution.iter().filter(|r| r.form == ReferenceForm::Ordinal).collect();
    if entries.is_empty() {
        entries = resolution.iter().collect();
    }
    let mut asked = HashSet::new();
    for r in entries {
        if !asked.insert(r.expression.to_lowercase()) {
            continue;
        }
        let first_proposal = ops
            .iter()
            .find(|o| o.action_kind == ActionKind::ProposeOption && o.get("entity") == Some(r.canonical.as_str()));
        let answer = ops.iter().find(|o| {
            o.action_kind == ActionKind::InquireDetails && o.get("entity") == Some(r.canonical.as_str()) && o.get("value").is_some()
        });
        let cat = first_proposal.and_then(|o| o.get("category")).unwrap_or("place");
        let here = &ops[r.op_index as usize];
        let expr = lower_first(&r.expression);
        let support = [Some(r.op_index), first_proposal.map(|o| o.op_index)];
        match (r.form, answer) {
            (ReferenceForm::Ordinal, Some(a)) => {
                let attr = a.get("attribute").unwrap_or("price");
                hop.push(draft(
                    format!("What {attr} was quoted for {expr}?"),
                    [a.get("value").unwrap().to_string()],
                    support.into_iter().flatten().chain([a.op_index]),
                ));
            }
            (ReferenceForm::Ordinal, None) => hop.push(draft(
                format!("Which {cat} is meant by \"{expr}\"?"),
                [r.canonical.clone()],
                support.into_iter().flatten(),
            )),
            (ReferenceForm::Pronoun, _) => {
                let slot = Slot::parse(here.get("slot").unwrap_or_default()).unwrap_or(Slot::Hotel);
                hop.push(draft(
                    format!(
                        "During the {} {} discussion, which {cat} was called \"{expr}\" in a {} turn?",
                        here.get("day").unwrap_or_default(),
                        slot.noun(),
                        here.action_kind.as_str().replace('_', " ")
                    ),
                    [r.canonical.clone()],
                    support.into_iter().flatten(),
                ));
            }
        }
    }
    pools.insert(QuestionType::MultiHop, hop);

    // synthesis: all finals for a day
    let mut synth = Vec::new();
    let days: BTreeSet<u64> = goals.iter().map(|(d, _)| day_num(d)).collect();
    for d in days {
        let day = format!("Day {d}");
        let finals: Vec<(u64, String)> = goals
            .iter()
            .filter(|(gd, _)| *gd == day)
            .map(|k| decisions[*k].last().unwrap().clone())
            .collect();
        synth.push(draft(
            format!("List all places chosen for the {day} itinerary."),
            finals.iter().map(|(_, e)| e.clone()),
            finals.iter().map(|(i, _)| *i),
        ));
    }
    pools.insert(QuestionType::Synthesis, synth);
    pools
}

fn debate_drafts(ops: &[SymbolicOperation], resolution: &[ResolutionEntry]) -> BTreeMap<QuestionType, Vec<Draft>> {
    let mut pools: BTreeMap<QuestionType, Vec<Draft>> = BTreeMap::new();
    let of_kind = |k: ActionKind| ops.iter().filter(move |o| o.action_kind == k);

    let mut state = Vec::new();
    let conceded: Vec<&SymbolicOperation> = of_kind(ActionKind::Concede).collect();
    if !conceded.is_empty() {
        state.push(draft(
            "Which arguments were conceded by the end of the debate?".into(),
            conceded.iter().map(|o| o.get("argument").unwrap_or_default().to_string()),
            conceded.iter().map(|o| o.op_index),
        ));
    }
    for side in ["pro", "con"] {
        let props: Vec<&SymbolicOperation> = of_kind(ActionKind::ProposeArgument).filter(|o| o.get("side") == Some(side)).collect();
        if !props.is_empty() {
            state.push(draft(
                format!("Which arguments did the {side} side put forward?"),
                props.iter().map(|o| o.get("argument").unwrap_or_default().to_string()),
                props.iter().map(|o| o.op_index),
            ));
        }
    }
    pools.insert(QuestionType::StateTracking, state);

    let mut cited: BTreeMap<(ActionKind, String), Vec<&SymbolicOperation>> = BTreeMap::new();
    for o in ops.iter().filter(|o| o.get("entity").is_some()) {
        cited.entry((o.action_kind, o.get("argument").unwrap_or_default().to_string())).or_default().push(o);
    }
    let mut recall = Vec::new();
    for ((kind, arg), list) in &cited {
        let verb = match kind {
            ActionKind::Attack => "attack",
            ActionKind::Defend => "defend",
            _ => "give background on",
        };
        recall.push(draft(
            format!("Which source was cited to {verb} the {arg} argument?"),
            list.iter().map(|o| o.get("entity").unwrap().to_string()),
            list.iter().map(|o| o.op_index),
        ));
    }
    pools.insert(QuestionType::ContextualRecall, recall);

    let mut hop = Vec::new();
    let mut asked = HashSet::new();
    for r in resolution {
        if !asked.insert(r.expression.to_lowercase()) {
            continue;
        }
        let arg = ops[r.op_index as usize].get("argument").unwrap_or_default();
        let first = ops
            .iter()
            .find(|o| o.get("argument") == Some(arg) && o.get("entity") == Some(r.canonical.as_str()))
            .map(|o| o.op_index);
        hop.push(draft(
            format!("Which source is meant by \"{}\"?", lower_first(&r.expression)),
            [r.canonical.clone()],
            [Some(r.op_index), first].into_iter().flatten(),
        ));
    }
    pools.insert(QuestionType::MultiHop, hop);

    let mut by_arg: BTreeMap<&str, Vec<&SymbolicOperation>> = BTreeMap::new();
    for o in ops.iter().filter(|o| o.get("entity").is_some()) {
        by_arg.entry(o.get("argument").unwrap_or_default()).or_default().push(o);
    }
    let synth = by_arg
        .iter()
        .map(|(arg, list)| {
            draft(
                format!("List all sources cited in the discussion of {arg}."),
                list.iter().map(|o| o.get("entity").unwrap().to_string()),
                list.iter().map(|o| o.op_index),
            )
        })
        .collect();
    pools.insert(QuestionType::Synthesis, synth);
    pools
}

// ---------------------------------------------------------------------------
// Instances

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub domain: Domain,
    pub scale: usize,
    pub seed: u64,
    pub plan: PlanConfig,
    pub surface: SurfaceMode,
    pub remodel_rate: f64,
    pub max_sentences_per_step: usize,
    pub questions: QuestionConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            domain: Domain::Travel,
            scale: 100,
            seed: 0,
            plan: PlanConfig::default(),
            surface: SurfaceMode::Template,
            remodel_rate: 0.5,
            max_sentences_per_step: 1,
            questions: QuestionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub domain: Domain,
    pub seed: u64,
    pub scale: usize,
    pub topic: Option<String>,
    pub config: BenchConfig,
    pub surface_sources: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchInstance {
    pub meta: InstanceMeta,
    pub world: ClosedWorld,
    pub storyboard: Vec<SymbolicOperation>,
    pub trajectory: Vec<TrajectoryStep>,
    pub questions: Vec<EvaluationQuestion>,
    pub resolution: Vec<ResolutionEntry>,
    pub provenance: Vec<ProvenanceEntry>,
}

impl BenchInstance {
    /// Trajectory steps realized from `op_index`.
    pub fn op_steps(&self, op_index: u64) -> Vec<u64> {
        self.provenance.iter().filter(|p| p.op_index == op_index).map(|p| p.step_index).collect()
    }

    /// Steps that carry the evidence for a question.
    pub fn gold_steps(&self, q: &EvaluationQuestion) -> BTreeSet<u64> {
        q.supporting_ops.iter().flat_map(|op| self.op_steps(*op)).collect()
    }

    /// Ground-truth rewrites per step, for oracle ingestion.
    pub fn oracle_rewrites(&self) -> BTreeMap<u64, Vec<(String, String)>> {
        let mut out: BTreeMap<u64, Vec<(String, String)>> = BTreeMap::new();
        for r in &self.resolution {
            out.entry(r.step_index).or_default().push((r.expression.clone(), r.canonical.clone()));
        }
        out
    }

    /// Steps, questions and context size.
    pub fn stats(&self, tokenizer: &dyn Tokenizer) -> InstanceStats {
        let mut by_type = BTreeMap::new();
        for q in &self.questions {
            *by_type.entry(q.qtype.as_str().to_string()).or_insert(0) += 1;
        }
        InstanceStats {
            domain: self.meta.domain,
            seed: self.meta.seed,
            operations: self.storyboard.len(),
            steps: self.trajectory.len(),
            context_tokens: self.trajectory.iter().map(|s| tokenizer.count(&s.action_text)).sum(),
            questions: self.questions.len(),
            questions_by_type: by_type,
            remodeled_mentions: self.resolution.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub domain: Domain,
    pub seed: u64,
    pub operations: usize,
    pub steps: usize,
    pub context_tokens: usize,
    pub questions: usize,
    pub questions_by_type: BTreeMap<String, usize>,
    pub remodeled_mentions: usize,
}

/// Runs the whole pipeline for one seed.
pub fn generate_instance(cfg: &BenchConfig, gateway: Option<&Gateway>) -> Result<BenchInstance, BenchError> {
    if cfg.max_sentences_per_step == 0 {
        return Err(BenchError::InfeasibleConfig("max_sentences_per_step must be positive".into()));
    }
    check_probability("remodel_rate", cfg.remodel_rate)?;
    let world = build_environment(cfg.domain, cfg.scale, cfg.seed)?;
    let storyboard = plan_storyboard(&world, &cfg.plan, cfg.seed)?;
    let realized = realize_all(&storyboard, &world, cfg.surface, gateway, cfg.seed);
    let mut surface_sources = BTreeMap::new();
    for r in &realized {
        let key = serde_json::to_value(r.source).unwrap().as_str().unwrap_or_default().to_string();
        *surface_sources.entry(key).or_insert(0) += 1;
    }
    let (turns, edits) = remodel_references(&storyboard, &realized, &world, cfg.remodel_rate, cfg.seed);
    let (trajectory, provenance, ranges) = segment_turns(&turns, cfg.max_sentences_per_step);
    let resolution: Vec<ResolutionEntry> = edits
        .iter()
        .filter_map(|e| {
            provenance
                .iter()
                .zip(&ranges)
                .find(|(p, r)| p.op_index == e.op_index && r.contains(&e.offset))
                .map(|(p, _)| ResolutionEntry {
                    step_index: p.step_index,
                    op_index: e.op_index,
                    expression: e.expression.clone(),
                    canonical: e.canonical.clone(),
                    form: e.form,
                })
        })
        .collect();
    let questions = derive_questions(&storyboard, &world, &resolution, &cfg.questions, cfg.seed)?;
    Ok(BenchInstance {
        meta: InstanceMeta {
            domain: cfg.domain,
            seed: cfg.seed,
            scale: cfg.scale,
            topic: world.topic.clone(),
            config: cfg.clone(),
            surface_sources,
        },
        world,
        storyboard,
        trajectory,
        questions,
        resolution,
        provenance,
    })
}

pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";
pub const STORYBOARD_FILE: &str = "storyboard.jsonl";
pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const RESOLUTION_FILE: &str = "resolution_map.jsonl";
pub const PROVENANCE_FILE: &str = "provenance.jsonl";
pub const WORLD_FILE: &str = "world.jsonl";
pub const META_FILE: &str = "instance.json";
/// Store root, inside an instance directory, for its ingested trajectory.
pub const MEMORY_DIR: &str = "memory";

/// Trajectory id used for an instance directory's ingested store.
pub fn instance_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().to_string())
        .filter(|n| crate::store::validate_trajectory_id(n).is_ok())
        .unwrap_or_else(|| "instance".into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_instance(dir: &Path, inst: &BenchInstance) -> Result<(), BenchError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    records::write_file(&dir.join(TRAJECTORY_FILE), &inst.trajectory)?;
    records::write_file(&dir.join(STORYBOARD_FILE), &inst.storyboard)?;
    records::write_file(&dir.join(QUESTIONS_FILE), &inst.questions)?;
    records::write_file(&dir.join(RESOLUTION_FILE), &inst.resolution)?;
    records::write_file(&dir.join(PROVENANCE_FILE), &inst.provenance)?;
    records::write_file(&dir.join(WORLD_FILE), &inst.world.entities)?;
    let meta_path = dir.join(META_FILE);
    let meta = serde_json::to_string_pretty(&inst.meta).expect("meta serializes");
    fs::write(&meta_path, meta + "\n").map_err(io_err(&meta_path))
}

pub fn read_instance(dir: &Path) -> Result<BenchInstance, BenchError> {
    let meta_path = dir.join(META_FILE);
    let raw = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: InstanceMeta =
        serde_json::from_str(&raw).map_err(|e| BenchError::Invalid(format!("{}: {e}", meta_path.display())))?;
    let inst = BenchInstance {
        world: ClosedWorld {
            domain: meta.domain,
            seed: meta.seed,
            topic: meta.topic.clone(),
            entities: records::read_file(&dir.join(WORLD_FILE))?,
        },
        storyboard: records::read_file(&dir.join(STORYBOARD_FILE))?,
        trajectory: records::read_file(&dir.join(TRAJECTORY_FILE))?,
        questions: records::read_file(&dir.join(QUESTIONS_FILE))?,
        resolution: records::read_file(&dir.join(RESOLUTION_FILE))?,
        provenance: records::read_file(&dir.join(PROVENANCE_FILE))?,
        meta,
    };
    for q in &inst.questions {
        q.validate(inst.storyboard.len()).map_err(|e| BenchError::Invalid(e.to_string()))?;
    }
    Ok(inst)
}

/// Instance directories (`t<i>`) under a benchmark root, in index order.
pub fn list_instances(root: &Path) -> Result<Vec<PathBuf>, BenchError> {
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(i) = name.strip_prefix('t').and_then(|n| n.parse::<u64>().ok()) {
            if entry.path().join(META_FILE).is_file() {
                found.push((i, entry.path()));
            }
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}
