//! Synthetic failed trajectories with known ground truth, a mechanical
//! validity oracle, an oracle-backed judge, and pipeline scoring.
//!
//! Every task is a small comparison-shopping table (suppliers, hotels or
//! laptops, each with a cost and one other attribute). The original goal asks
//! for an entity meeting two thresholds that no entity meets together; the
//! ground-truth hindsight goal asks for a superlative the trajectory reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{LazyLock, Mutex};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::augment::render_trajectory;
use crate::detector::{detect_rule, FailureType, Lexicon};
use crate::judge::{
    fingerprint, prompt_field, splitmix64, stable_hash, unit_from_bits, Judge, JudgeError, JudgeRequest,
    JudgeResponse, RuleProxyJudge, TemplateId,
};
use crate::outcome::numeric_tokens;
use crate::pipeline::TrajectoryResult;
use crate::trajectory::{Step, Trajectory};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid type mix: {0}")]
    InvalidMix(String),
    #[error("could not plant {0} after {1} tries")]
    Planting(FailureType, u32),
    #[error("id mismatch: {0}")]
    IdMismatch(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTemplate {
    SupplierMoq,
    HotelDistance,
    LaptopWeight,
}

impl TaskTemplate {
    pub const ALL: [TaskTemplate; 3] = [
        TaskTemplate::SupplierMoq,
        TaskTemplate::HotelDistance,
        TaskTemplate::LaptopWeight,
    ];

    /// Attribute keys, cost first.
    pub fn attributes(self) -> [&'static str; 2] {
        match self {
            TaskTemplate::SupplierMoq => ["price", "moq"],
            TaskTemplate::HotelDistance => ["rate", "distance"],
            TaskTemplate::LaptopWeight => ["price", "weight"],
        }
    }

    fn units(self) -> [&'static str; 2] {
        match self {
            TaskTemplate::SupplierMoq => ["$/kg", "kg"],
            TaskTemplate::HotelDistance => ["$/night", "km"],
            TaskTemplate::LaptopWeight => ["$", "kg"],
        }
    }

    fn decimals(self) -> [usize; 2] {
        match self {
            TaskTemplate::SupplierMoq => [2, 0],
            TaskTemplate::HotelDistance => [0, 1],
            TaskTemplate::LaptopWeight => [0, 2],
        }
    }

    /// Value ranges in the smallest printed unit.
    fn ranges(self) -> [(u32, u32); 2] {
        match self {
            TaskTemplate::SupplierMoq => [(300, 900), (5, 800)],
            TaskTemplate::HotelDistance => [(80, 400), (3, 150)],
            TaskTemplate::LaptopWeight => [(600, 2400), (90, 280)],
        }
    }

    fn names(self) -> &'static [&'static str] {
        match self {
            TaskTemplate::SupplierMoq => &[
                "MetalWorks", "WireWorld", "CopperDirect", "MicroMetals", "AlloyHub", "BulkBase",
                "FoundryFirst", "OreOutlet", "MillMart", "SteelSource", "ForgeFront", "IngotIndex",
            ],
            TaskTemplate::HotelDistance => &[
                "HarborInn", "CityLodge", "ParkView", "GrandStay", "UrbanNest", "MetroSuites",
                "RiverHouse", "SkylineHotel", "GardenCourt", "PlazaRooms",
            ],
            TaskTemplate::LaptopWeight => &[
                "ZenBook", "AeroLite", "SwiftPad", "CoreBook", "PixelPro", "NovaBook", "FlexNote",
                "ThinkLite", "VoltBook", "AirFrame",
            ],
        }
    }

    fn subjects(self) -> &'static [&'static str] {
        match self {
            TaskTemplate::SupplierMoq => &[
                "copper wire", "aluminum sheet", "steel rod", "brass fittings", "nickel strip",
                "zinc plate", "titanium bar", "tin solder",
            ],
            TaskTemplate::HotelDistance => &[
                "the convention center", "the stadium", "the university", "the airport",
                "the old town", "the harbor", "the museum district",
            ],
            TaskTemplate::LaptopWeight => &["laptop"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskTemplate::SupplierMoq => "supplier_moq",
            TaskTemplate::HotelDistance => "hotel_distance",
            TaskTemplate::LaptopWeight => "laptop_weight",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub key: String,
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub attributes: Vec<Attribute>,
}

impl Entity {
    pub fn value(&self, key: &str) -> Option<f64> {
        self.attributes.iter().find(|a| a.key == key).map(|a| a.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl Comparison {
    fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparison::Lt => lhs < rhs,
            Comparison::Le => lhs <= rhs,
            Comparison::Gt => lhs > rhs,
            Comparison::Ge => lhs >= rhs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub key: String,
    pub cmp: Comparison,
    pub value: f64,
}

/// One generated task; also the ground-truth sidecar record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub trajectory_id: String,
    pub template_id: TaskTemplate,
    #[serde(rename = "entity_table")]
    pub entities: Vec<Entity>,
    /// Conjunction no entity satisfies.
    pub original_constraint: Vec<Threshold>,
    pub ground_truth_goal: String,
    /// Plausible goals the trajectory does not support.
    pub distractor_goals: Vec<String>,
    pub planted_failure_type: FailureType,
}

impl SyntheticTask {
    /// Whether a correct pipeline should turn this run into training data.
    /// Major failures carry a weight below the default gate.
    pub fn relabelable(&self) -> bool {
        !self.planted_failure_type.is_major()
    }
}

/// Per-type sampling proportions.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeMix(BTreeMap<FailureType, f64>);

impl TypeMix {
    pub fn new(weights: BTreeMap<FailureType, f64>) -> Result<Self, SynthError> {
        if let Some((k, v)) = weights.iter().find(|(_, v)| v.is_nan() || **v < 0.0) {
            return Err(SynthError::InvalidMix(format!("{k} has proportion {v}")));
        }
        let sum: f64 = weights.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SynthError::InvalidMix(format!("proportions sum to {sum}")));
        }
        Ok(TypeMix(weights))
    }

    pub fn uniform() -> Self {
        TypeMix(FailureType::ALL.iter().map(|&t| (t, 1.0 / 6.0)).collect())
    }

    /// Fixed shares for some types; the remainder is split evenly over the rest.
    pub fn with_rest_uniform(fixed: &[(FailureType, f64)]) -> Result<Self, SynthError> {
        let mut m: BTreeMap<FailureType, f64> = fixed.iter().copied().collect();
        let used: f64 = m.values().sum();
        let rest: Vec<FailureType> = FailureType::ALL.into_iter().filter(|t| !m.contains_key(t)).collect();
        if !rest.is_empty() {
            let share = (1.0 - used) / rest.len() as f64;
            for t in rest {
                m.insert(t, share);
            }
        }
        TypeMix::new(m)
    }

    /// Parse `incomplete=0.35,constraint_violation=0.28`; unnamed types share the rest.
    pub fn parse(spec: &str) -> Result<Self, SynthError> {
        let mut fixed = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| SynthError::InvalidMix(format!("expected type=share, got {part:?}")))?;
            let t: FailureType = k.parse().map_err(|_| SynthError::InvalidMix(format!("unknown type {k:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| SynthError::InvalidMix(format!("bad share {v:?}")))?;
            fixed.push((t, v));
        }
        TypeMix::with_rest_uniform(&fixed)
    }

    fn pick(&self, u: f64) -> FailureType {
        let mut acc = 0.0;
        let mut last = FailureType::Incomplete;
        for t in FailureType::ALL {
            let w = self.0.get(&t).copied().unwrap_or(0.0);
            if w <= 0.0 {
                continue;
            }
            acc += w;
            last = t;
            if u < acc {
                return t;
            }
        }
        last
    }
}

impl Default for TypeMix {
    fn default() -> Self {
        TypeMix::uniform()
    }
}

fn fmt_value(v: f64, decimals: usize) -> String {
    format!("{v:.decimals$}")
}

struct Draft {
    traj: Trajectory,
    task: SyntheticTask,
}

fn listing(t: TaskTemplate, entities: &[Entity], subject: &str) -> String {
    let [d0, d1] = t.decimals();
    let [k0, k1] = t.attributes();
    let items: Vec<String> = entities
        .iter()
        .map(|e| {
            let a = fmt_value(e.value(k0).unwrap_or_default(), d0);
            let b = fmt_value(e.value(k1).unwrap_or_default(), d1);
            match t {
                TaskTemplate::SupplierMoq => format!("{} ${a}/kg (MOQ {b} kg)", e.name),
                TaskTemplate::HotelDistance => format!("{} ${a}/night ({b} km)", e.name),
                TaskTemplate::LaptopWeight => format!("{} ${a} ({b} kg)", e.name),
            }
        })
        .collect();
    let noun = match t {
        TaskTemplate::SupplierMoq => format!("{subject} suppliers"),
        TaskTemplate::HotelDistance => format!("hotels near {subject}"),
        TaskTemplate::LaptopWeight => "laptops".to_string(),
    };
    format!("{} {noun} found: {}.", entities.len(), items.join(", "))
}

fn argmin<'a>(entities: &'a [Entity], key: &str) -> &'a Entity {
    entities
        .iter()
        .min_by(|a, b| a.value(key).partial_cmp(&b.value(key)).expect("finite"))
        .expect("non-empty")
}

fn draft(index: usize, attempt: u32, seed: u64, mix: &TypeMix) -> Draft {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index as u64) << 8 | u64::from(attempt));
    let planted = mix.pick(rng.random());
    let t = *TaskTemplate::ALL.choose(&mut rng).expect("templates");
    let subject = *t.subjects().choose(&mut rng).expect("subjects");
    let [k0, k1] = t.attributes();
    let [u0, u1] = t.units();
    let [d0, d1] = t.decimals();
    let [r0, r1] = t.ranges();
    let scale = |d: usize| 10f64.powi(d as i32);

    let names: Vec<&str> = t.names().choose_multiple(&mut rng, 4).copied().collect();
    let mut used0 = HashSet::new();
    let mut used1 = HashSet::new();
    let entities: Vec<Entity> = names
        .iter()
        .map(|name| {
            let mut draw_unique = |range: (u32, u32), used: &mut HashSet<u32>| loop {
                let v = rng.random_range(range.0..=range.1);
                if used.insert(v) {
                    return v;
                }
            };
            let a = draw_unique(r0, &mut used0);
            let b = draw_unique(r1, &mut used1);
            Entity {
                name: name.to_string(),
                attributes: vec![
                    Attribute { key: k0.into(), value: f64::from(a) / scale(d0), unit: u0.into() },
                    Attribute { key: k1.into(), value: f64::from(b) / scale(d1), unit: u1.into() },
                ],
            }
        })
        .collect();

    // Original constraint: cost below the k-th cheapest, secondary below the
    // smallest secondary among the entities that pass the cost bar.
    let mut costs: Vec<f64> = entities.iter().filter_map(|e| e.value(k0)).collect();
    costs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let cost_bar = costs[rng.random_range(1..costs.len())];
    let second_bar = entities
        .iter()
        .filter(|e| e.value(k0).unwrap_or(f64::MAX) < cost_bar)
        .filter_map(|e| e.value(k1))
        .fold(f64::INFINITY, f64::min);
    let cb = fmt_value(cost_bar, d0);
    let sb = fmt_value(second_bar, d1);
    let original_goal = match t {
        TaskTemplate::SupplierMoq => format!("Find {subject} suppliers with price under ${cb}/kg and MOQ below {sb} kg."),
        TaskTemplate::HotelDistance => {
            format!("Book a hotel near {subject} with rate under ${cb} per night and distance under {sb} km.")
        }
        TaskTemplate::LaptopWeight => format!("Find a laptop with price under ${cb} and weight under {sb} kg."),
    };
    let original_constraint = vec![
        Threshold { key: k0.into(), cmp: Comparison::Lt, value: cost_bar },
        Threshold { key: k1.into(), cmp: Comparison::Lt, value: second_bar },
    ];

    // Ground truth: a superlative on one attribute, reported by the last step.
    let by_secondary = rng.random_bool(0.5);
    let cheapest = argmin(&entities, k0);
    let least = argmin(&entities, k1);
    let winner = if by_secondary { least } else { cheapest };
    let wa = fmt_value(winner.value(k0).unwrap_or_default(), d0);
    let wb = fmt_value(winner.value(k1).unwrap_or_default(), d1);
    let (ground_truth_goal, final_obs) = match (t, by_secondary) {
        (TaskTemplate::SupplierMoq, true) => (
            format!("Compare {subject} suppliers by price per kg and MOQ. Identify the option with the lowest MOQ and report its price."),
            format!("Best: {} ${wa}/kg, MOQ {wb} kg.", winner.name),
        ),
        (TaskTemplate::SupplierMoq, false) => (
            format!("Find the cheapest {subject} supplier and report its MOQ."),
            format!("Cheapest: {} ${wa}/kg, MOQ {wb} kg.", winner.name),
        ),
        (TaskTemplate::HotelDistance, true) => (
            format!("Find the closest hotel to {subject} and report its nightly rate."),
            format!("Closest: {} at {wb} km, ${wa}/night.", winner.name),
        ),
        (TaskTemplate::HotelDistance, false) => (
            format!("Find the cheapest hotel near {subject} and report its distance."),
            format!("Cheapest: {} at ${wa}/night, {wb} km away.", winner.name),
        ),
        (TaskTemplate::LaptopWeight, true) => (
            "Find the lightest laptop in the listing and report its price.".to_string(),
            format!("Lightest: {} at {wb} kg, priced ${wa}.", winner.name),
        ),
        (TaskTemplate::LaptopWeight, false) => (
            "Find the cheapest laptop in the listing and report its weight.".to_string(),
            format!("Cheapest: {} at ${wa}, weighing {wb} kg.", winner.name),
        ),
    };

    let loser = entities
        .iter()
        .find(|e| e.name != winner.name)
        .expect("four entities");
    let min_cost = fmt_value(cheapest.value(k0).unwrap_or_default(), d0);
    let superlative = match (t, by_secondary) {
        (TaskTemplate::SupplierMoq, true) => "has the lowest MOQ",
        (TaskTemplate::HotelDistance, true) => "is the closest hotel",
        (TaskTemplate::LaptopWeight, true) => "is the lightest laptop",
        (_, false) => "is the cheapest option",
    };
    let distractor_goals = vec![
        format!("Confirm that {} {superlative} in the listing and report its details.", loser.name),
        match t {
            TaskTemplate::SupplierMoq => format!("Find a {subject} supplier with price under ${min_cost}/kg."),
            TaskTemplate::HotelDistance => format!("Find a hotel near {subject} with rate under ${min_cost} per night."),
            TaskTemplate::LaptopWeight => format!("Find a laptop with price under ${min_cost}."),
        },
    ];

    let noun = match t {
        TaskTemplate::SupplierMoq => format!("{subject} suppliers"),
        TaskTemplate::HotelDistance => format!("hotels near {subject}"),
        TaskTemplate::LaptopWeight => "laptops".to_string(),
    };
    let first = Step::new(
        format!("Search for {noun}."),
        format!("web_search(\"{noun}\")"),
        listing(t, &entities, subject),
    );
    let probe = &loser.name;
    let middle = match planted {
        FailureType::Incomplete => Step::new(
            "Open each listing to confirm details.",
            format!("open_listing(\"{probe}\")"),
            "Reached the max steps budget before every listing was checked.",
        ),
        FailureType::ConstraintViolation => Step::new(
            format!("Check whether {probe} fits the request."),
            format!("open_listing(\"{probe}\")"),
            format!("{probe} exceeds the requested limit on one attribute."),
        ),
        FailureType::WrongResult => Step::new(
            "Double-check the figure I reported.",
            format!("recompute(\"{probe}\")"),
            format!("The reported figure does not match the listing for {probe}."),
        ),
        FailureType::OffTopic => Step::new(
            "Look at accessories first.",
            format!("web_search(\"{subject} accessories\")"),
            format!("Opened unrelated accessory pages instead of {noun}."),
        ),
        FailureType::Hallucination => Step::new(
            "I will assume every listed price includes shipping.",
            format!("note(\"shipping included for {probe}\")"),
            "Recorded a shipping note for the whole listing.",
        ),
        FailureType::ToolError => Step::new(
            "Fetch the detailed sheet.",
            format!("fetch_details(\"{probe}\")"),
            "Error: connection refused by the details service.",
        ),
    };
    let last = Step::new("Report the best available option.", "summarize", final_obs);

    let id = format!("syn-{index:05}");
    let traj = Trajectory::new(id.clone(), original_goal, vec![first, middle, last])
        .with_meta("source", "synthetic")
        .with_meta("template", t.as_str());
    Draft {
        traj,
        task: SyntheticTask {
            trajectory_id: id,
            template_id: t,
            entities,
            original_constraint,
            ground_truth_goal,
            distractor_goals,
            planted_failure_type: planted,
        },
    }
}

const MAX_DRAFTS: u32 = 64;

fn planted_ok(d: &Draft, lex: &Lexicon) -> bool {
    d.traj.steps.first().is_some_and(|s| lex.is_substantive(&s.observation))
        && detect_rule(&d.traj, lex).failure_type == d.task.planted_failure_type
}

/// Deterministic corpus of `n` failed trajectories with ground truth.
/// Original goals and rendered trajectories are unique across the corpus.
pub fn generate_corpus(
    n: usize,
    seed: u64,
    mix: &TypeMix,
) -> Result<(Vec<Trajectory>, Vec<SyntheticTask>), SynthError> {
    let lex = Lexicon::default();
    let make = |i: usize, start: u32| -> Result<(Draft, u32), SynthError> {
        for attempt in start..MAX_DRAFTS {
            let d = draft(i, attempt, seed, mix);
            if planted_ok(&d, &lex) {
                return Ok((d, attempt));
            }
        }
        let planted = draft(i, 0, seed, mix).task.planted_failure_type;
        Err(SynthError::Planting(planted, MAX_DRAFTS))
    };
    let mut drafts: Vec<(Draft, u32)> = (0..n).into_par_iter().map(|i| make(i, 0)).collect::<Result<_, _>>()?;

    let mut goals = HashSet::new();
    let mut rendered = HashSet::new();
    for (i, slot) in drafts.iter_mut().enumerate() {
        loop {
            let g = slot.0.traj.goal.clone();
            let r = render_trajectory(&slot.0.traj);
            if !goals.contains(&g) && !rendered.contains(&r) {
                goals.insert(g);
                rendered.insert(r);
                break;
            }
            let next = slot.1 + 1;
            *slot = make(i, next)?;
        }
    }
    Ok(drafts.into_iter().map(|(d, _)| (d.traj, d.task)).unzip())
}

static THRESHOLD: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\b(price|rate|moq|distance|weight)s?\s+(under|below|less than|at most|over|above|more than|at least)\s+\$?((?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?)")
        .expect("threshold pattern")
});
static SUPERLATIVE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\b(lowest|highest|smallest|largest|cheapest|closest|lightest|heaviest)\b(?:\s+(price|rate|moq|distance|weight)\b)?")
        .expect("superlative pattern")
});
static CAMEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b[A-Z][a-z0-9]+(?:[A-Z][a-z0-9]*)+\b").expect("entity pattern"));

fn parse_number(tok: &str) -> Option<f64> {
    tok.replace(',', "").parse().ok()
}

fn resolve_key(t: TaskTemplate, word: &str) -> Option<&'static str> {
    let [k0, k1] = t.attributes();
    match word {
        w if w == k1 => Some(k1),
        "price" => Some(k0),
        "rate" if t == TaskTemplate::HotelDistance => Some(k0),
        _ => None,
    }
}

/// Check a goal's claims against the task's entity table.
///
/// Recognized claims: threshold comparisons (`price under $5.30`), which must
/// hold together for one entity; superlatives (`lowest MOQ`, `cheapest`),
/// which must be attained by a named entity if any is named; entity names,
/// which must exist; and any other number, which must equal an attribute of a
/// named entity (or of any entity when none is named). A goal with no
/// recognizable claim is rejected.
pub fn oracle_check(goal: &str, task: &SyntheticTask) -> Result<(), String> {
    let t = task.template_id;
    let lower = goal.to_lowercase();
    let mut claims = 0usize;

    let mut named: Vec<&Entity> = Vec::new();
    for m in CAMEL.find_iter(goal) {
        match task.entities.iter().find(|e| e.name == m.as_str()) {
            Some(e) => named.push(e),
            None => return Err(format!("unknown entity {}", m.as_str())),
        }
        claims += 1;
    }
    let scope: Vec<&Entity> = if named.is_empty() {
        task.entities.iter().collect()
    } else {
        named.clone()
    };

    let mut thresholds = Vec::new();
    let mut consumed = Vec::new();
    for c in THRESHOLD.captures_iter(&lower) {
        let key = resolve_key(t, &c[1]).ok_or_else(|| format!("{} is not an attribute here", &c[1]))?;
        let cmp = match &c[2] {
            "under" | "below" | "less than" => Comparison::Lt,
            "at most" => Comparison::Le,
            "over" | "above" | "more than" => Comparison::Gt,
            _ => Comparison::Ge,
        };
        let value = parse_number(&c[3]).ok_or_else(|| format!("unreadable number {}", &c[3]))?;
        thresholds.push((key, cmp, value));
        consumed.push(value);
        claims += 1;
    }
    let meets = |e: &Entity| {
        thresholds
            .iter()
            .all(|&(k, cmp, v)| e.value(k).is_some_and(|x| cmp.holds(x, v)))
    };
    let candidates: Vec<&Entity> = task.entities.iter().filter(|e| meets(e)).collect();
    if !thresholds.is_empty() && !scope.iter().any(|e| meets(e)) {
        return Err("no entity satisfies the stated thresholds".into());
    }

    let [k0, k1] = t.attributes();
    for c in SUPERLATIVE.captures_iter(&lower) {
        let word = &c[1];
        let key = match (word, c.get(2).map(|m| m.as_str())) {
            ("cheapest", _) => k0,
            ("closest", _) if k1 == "distance" => k1,
            ("lightest" | "heaviest", _) if k1 == "weight" => k1,
            ("lowest" | "highest" | "smallest" | "largest", Some(attr)) => {
                resolve_key(t, attr).ok_or_else(|| format!("{attr} is not an attribute here"))?
            }
            _ => return Err(format!("cannot resolve superlative {:?}", c.get(0).map_or("", |m| m.as_str()))),
        };
        let maximize = matches!(word, "highest" | "largest" | "heaviest");
        let pool = if thresholds.is_empty() { task.entities.iter().collect() } else { candidates.clone() };
        let best = pool
            .iter()
            .filter_map(|e| e.value(key))
            .fold(if maximize { f64::NEG_INFINITY } else { f64::INFINITY }, |a, b| {
                if maximize { a.max(b) } else { a.min(b) }
            });
        if !best.is_finite() {
            return Err("superlative over an empty set".into());
        }
        if !named.is_empty() && !named.iter().any(|e| e.value(key) == Some(best)) {
            return Err(format!("named entity does not have the {word} {key}"));
        }
        claims += 1;
    }

    for tok in numeric_tokens(goal) {
        let Some(v) = parse_number(&tok) else {
            return Err(format!("unreadable number {tok}"));
        };
        if let Some(pos) = consumed.iter().position(|&c| (c - v).abs() < 1e-9) {
            consumed.swap_remove(pos);
            continue;
        }
        let known = scope
            .iter()
            .any(|e| e.attributes.iter().any(|a| (a.value - v).abs() < 1e-9));
        if !known {
            return Err(format!("number {tok} matches no attribute"));
        }
        claims += 1;
    }

    if claims == 0 {
        return Err("no checkable claim".into());
    }
    Ok(())
}

pub fn oracle_valid(goal: &str, task: &SyntheticTask) -> bool {
    oracle_check(goal, task).is_ok()
}

/// Judge answering Stage 3 and the second-judge check from the oracle.
///
/// Relabeling proposes the ground-truth goal, or with probability
/// `distractor_rate` one of the task's distractors; both judges report the
/// oracle's verdict, flipped with probability `noise`. Retries of the same
/// request advance a per-request counter, so they draw fresh proposals.
/// Detection and extraction requests go to the rule-based proxy.
pub struct OracleJudge {
    tasks: Vec<SyntheticTask>,
    by_goal: HashMap<String, usize>,
    by_trajectory: HashMap<String, usize>,
    noise: f64,
    distractor_rate: f64,
    seed: u64,
    counters: Mutex<HashMap<String, u64>>,
    proxy: RuleProxyJudge,
}

pub const ORACLE_DISTRACTOR_RATE: f64 = 0.3;
const ORACLE_ACCEPT_CONFIDENCE: f64 = 0.85;
const ORACLE_REJECT_CONFIDENCE: f64 = 0.2;

impl OracleJudge {
    pub fn new(corpus: &[Trajectory], tasks: Vec<SyntheticTask>, noise: f64, seed: u64) -> Result<Self, SynthError> {
        let by_id: HashMap<&str, &Trajectory> = corpus.iter().map(|t| (t.id.as_str(), t)).collect();
        let mut by_goal = HashMap::new();
        let mut by_trajectory = HashMap::new();
        for (i, task) in tasks.iter().enumerate() {
            let traj = by_id
                .get(task.trajectory_id.as_str())
                .ok_or_else(|| SynthError::IdMismatch(format!("no trajectory {}", task.trajectory_id)))?;
            by_goal.insert(traj.goal.clone(), i);
            by_trajectory.insert(render_trajectory(traj), i);
        }
        Ok(OracleJudge {
            tasks,
            by_goal,
            by_trajectory,
            noise: noise.clamp(0.0, 1.0),
            distractor_rate: ORACLE_DISTRACTOR_RATE,
            seed,
            counters: Mutex::new(HashMap::new()),
            proxy: RuleProxyJudge::default(),
        })
    }

    pub fn with_distractor_rate(mut self, rate: f64) -> Self {
        self.distractor_rate = rate.clamp(0.0, 1.0);
        self
    }

    fn next_count(&self, fp: &str) -> u64 {
        let mut c = self.counters.lock().expect("oracle counters poisoned");
        let n = c.entry(fp.to_string()).or_insert(0);
        let out = *n;
        *n += 1;
        out
    }

    fn draw(&self, fp: &str, n: u64, tag: &str) -> f64 {
        let h = stable_hash(&[fp.as_bytes(), &n.to_le_bytes(), tag.as_bytes(), &self.seed.to_le_bytes()]);
        unit_from_bits(splitmix64(h))
    }

    fn miss(req: &JudgeRequest) -> JudgeError {
        JudgeError::TranscriptMiss {
            template: req.template_id,
            fingerprint: req.fingerprint(),
        }
    }
}

impl Judge for OracleJudge {
    fn call(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        let started = Instant::now();
        let prompt = req.filled_prompt.as_str();
        let fp = fingerprint(req.template_id, prompt);
        let reply = match req.template_id {
            TemplateId::Stage1 | TemplateId::Stage2 => return self.proxy.call(req),
            TemplateId::Stage3 => {
                let goal = prompt_field(prompt, "Original prompt (style reference only): ", None)
                    .ok_or_else(|| Self::miss(req))?;
                let task = &self.tasks[*self.by_goal.get(goal.trim()).ok_or_else(|| Self::miss(req))?];
                let n = self.next_count(&fp);
                let proposal = if self.draw(&fp, n, "propose") < self.distractor_rate && !task.distractor_goals.is_empty() {
                    let k = (splitmix64(stable_hash(&[fp.as_bytes(), &n.to_le_bytes()])) as usize)
                        % task.distractor_goals.len();
                    task.distractor_goals[k].clone()
                } else {
                    task.ground_truth_goal.clone()
                };
                let verdict = oracle_valid(&proposal, task) ^ (self.draw(&fp, n, "flip") < self.noise);
                json!({
                    "hindsight_prompt": proposal,
                    "is_valid": verdict,
                    "rationale": "oracle verdict",
                    "confidence": if verdict { ORACLE_ACCEPT_CONFIDENCE } else { ORACLE_REJECT_CONFIDENCE },
                })
            }
            TemplateId::SecondJudge => {
                let proposal = prompt_field(prompt, "Proposed hindsight prompt: ", Some("\nTrajectory: "))
                    .ok_or_else(|| Self::miss(req))?;
                let rendered = prompt
                    .find("\nTrajectory: ")
                    .map(|i| prompt[i + "\nTrajectory: ".len()..].trim_end_matches('\n'))
                    .ok_or_else(|| Self::miss(req))?;
                let task = &self.tasks[*self.by_trajectory.get(rendered).ok_or_else(|| Self::miss(req))?];
                let n = self.next_count(&fp);
                let truth = oracle_check(proposal, task);
                let verdict = truth.is_ok() ^ (self.draw(&fp, n, "flip") < self.noise);
                json!({
                    "is_valid": verdict,
                    "confidence": if verdict { 0.9 } else { 0.1 },
                    "rejection_reason_if_any": truth.err().unwrap_or_default(),
                })
            }
        };
        Ok(JudgeResponse::new(reply.to_string(), started.elapsed(), 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub tasks: u64,
    pub relabelable: u64,
    pub accepted: u64,
    pub valid_accepted: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub accepted: u64,
    pub valid_accepted: u64,
    pub relabelable: u64,
    /// valid accepted / accepted; `None` when nothing was accepted.
    pub precision: Option<f64>,
    /// valid accepted on relabelable tasks / relabelable tasks.
    pub recall: Option<f64>,
    pub per_type: BTreeMap<String, TypeScore>,
}

pub fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Precision and recall of a run against the oracle.
pub fn score_pipeline(results: &[TrajectoryResult], tasks: &[SyntheticTask]) -> Result<Score, SynthError> {
    let by_id: HashMap<&str, &SyntheticTask> = tasks.iter().map(|t| (t.trajectory_id.as_str(), t)).collect();
    if results.len() != tasks.len() {
        return Err(SynthError::IdMismatch(format!(
            "{} results for {} tasks",
            results.len(),
            tasks.len()
        )));
    }
    #[derive(Default)]
    struct Acc {
        tasks: u64,
        relabelable: u64,
        accepted: u64,
        valid: u64,
        valid_relabelable: u64,
    }
    let mut total = Acc::default();
    let mut per: BTreeMap<String, Acc> = BTreeMap::new();
    for r in results {
        let task = by_id
            .get(r.id.as_str())
            .ok_or_else(|| SynthError::IdMismatch(format!("no task for {}", r.id)))?;
        let row = per.entry(task.planted_failure_type.as_str().to_string()).or_default();
        let (accepted, valid) = match r.accepted_parts() {
            Some((_, d)) => (1, u64::from(oracle_valid(&d.hindsight_prompt, task))),
            None => (0, 0),
        };
        let rel = u64::from(task.relabelable());
        for acc in [&mut total, row] {
            acc.tasks += 1;
            acc.relabelable += rel;
            acc.accepted += accepted;
            acc.valid += valid;
            acc.valid_relabelable += valid * rel;
        }
    }
    Ok(Score {
        accepted: total.accepted,
        valid_accepted: total.valid,
        relabelable: total.relabelable,
        precision: ratio(total.valid, total.accepted),
        recall: ratio(total.valid_relabelable, total.relabelable),
        per_type: per
            .into_iter()
            .map(|(k, a)| {
                (
                    k,
                    TypeScore {
                        tasks: a.tasks,
                        relabelable: a.relabelable,
                        accepted: a.accepted,
                        valid_accepted: a.valid,
                        precision: ratio(a.valid, a.accepted),
                        recall: ratio(a.valid_relabelable, a.relabelable),
                    },
                )
            })
            .collect(),
    })
}

pub fn write_truth(tasks: &[SyntheticTask], path: impl AsRef<Path>) -> Result<(), SynthError> {
    let mut out = BufWriter::new(File::create(path)?);
    for t in tasks {
        serde_json::to_writer(&mut out, t).map_err(|e| SynthError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<SyntheticTask>, SynthError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| SynthError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn copper_task() -> SyntheticTask {
        let e = |name: &str, price: f64, moq: f64| Entity {
            name: name.into(),
            attributes: vec![
                Attribute { key: "price".into(), value: price, unit: "$/kg".into() },
                Attribute { key: "moq".into(), value: moq, unit: "kg".into() },
            ],
        };
        SyntheticTask {
            trajectory_id: "wa-001".into(),
            template_id: TaskTemplate::SupplierMoq,
            entities: vec![
                e("MetalWorks", 6.20, 50.0),
                e("WireWorld", 5.80, 200.0),
                e("CopperDirect", 4.90, 500.0),
                e("MicroMetals", 5.30, 10.0),
            ],
            original_constraint: vec![
                Threshold { key: "price".into(), cmp: Comparison::Lt, value: 5.0 },
                Threshold { key: "moq".into(), cmp: Comparison::Lt, value: 100.0 },
            ],
            ground_truth_goal: "Compare copper wire suppliers by price per kg and MOQ. Identify the option with the lowest MOQ and report its price.".into(),
            distractor_goals: vec![],
            planted_failure_type: FailureType::ConstraintViolation,
        }
    }

    #[test]
    fn oracle_on_copper_table() {
        let task = copper_task();
        assert!(oracle_valid(&task.ground_truth_goal, &task));
        assert!(!oracle_valid(
            "Find copper wire suppliers with prices under $5/kg and MOQ below 100 kg.",
            &task
        ));
        assert!(oracle_valid("Identify the option with the lowest MOQ, MicroMetals, and report its price of $5.30.", &task));
        assert!(!oracle_valid("Confirm that WireWorld has the lowest MOQ.", &task));
        assert!(!oracle_valid("Find a supplier with price under $4.90/kg.", &task));
        assert!(oracle_valid("Find a supplier with price at most $4.90/kg.", &task));
        assert!(!oracle_valid("Find a supplier at $7.77/kg.", &task));
        assert!(!oracle_valid("Look this up and report what you find.", &task));
        assert!(!oracle_valid("Ask AcmeCorp for a quote.", &task));
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, ta) = generate_corpus(40, 42, &TypeMix::uniform()).unwrap();
        let (b, tb) = generate_corpus(40, 42, &TypeMix::uniform()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_corpus(40, 43, &TypeMix::uniform()).unwrap();
        assert_ne!(a, c);
        assert!(generate_corpus(0, 1, &TypeMix::uniform()).unwrap().0.is_empty());
    }

    #[test]
    fn planting_is_sound() {
        let lex = Lexicon::default();
        let (corpus, tasks) = generate_corpus(300, 5, &TypeMix::uniform()).unwrap();
        let goals: HashSet<_> = corpus.iter().map(|t| t.goal.as_str()).collect();
        assert_eq!(goals.len(), corpus.len());
        for (traj, task) in corpus.iter().zip(&tasks) {
            traj.validate().unwrap();
            assert_eq!(traj.id, task.trajectory_id);
            assert_eq!(detect_rule(traj, &lex).failure_type, task.planted_failure_type, "{}", traj.id);
            assert!(oracle_check(&task.ground_truth_goal, task).is_ok(), "{}", traj.id);
            assert!(!oracle_valid(&traj.goal, task), "{}: {}", traj.id, traj.goal);
            for d in &task.distractor_goals {
                assert!(!oracle_valid(d, task), "{}: {d}", traj.id);
            }
        }
    }

    #[test]
    fn mix_validation() {
        assert!(TypeMix::parse("incomplete=0.35,constraint_violation=0.28").is_ok());
        assert!(TypeMix::parse("incomplete=0.9,tool_error=0.5").is_err());
        assert!(TypeMix::parse("bogus=1").is_err());
        let mut m = BTreeMap::new();
        m.insert(FailureType::Incomplete, 0.5);
        assert!(TypeMix::new(m).is_err());
    }

    #[test]
    fn precision_arithmetic() {
        assert!((ratio(159, 169).unwrap() - 0.9408).abs() < 5e-5);
        assert!((ratio(127, 130).unwrap() - 0.9769).abs() < 5e-5);
        assert_eq!(ratio(0, 0), None);
    }
}
