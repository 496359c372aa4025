//! Seed tasks, lexicon augmentation, and single-decision training samples.
//!
//! Seed templates name objects through `{slot}` placeholders. Augmentation
//! fills slots with distinct color-noun labels, jitters the scene and
//! rewrites the instruction; each instantiated task is then solved by the
//! reference planner and every accepted turn becomes one sample.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backend::{GoalProgram, ReferenceBackend, ScriptedBackend};
use crate::harness::{episode_seed, jitter_scene, run_task, Category, TaskSpec};
use crate::planner::PlannerConfig;
use crate::simenv::{FaultProfile, Scene};
use crate::skills::SkillRegistry;
use crate::wire::parse_model_turn;

const BUNDLED_SEEDS: &str = include_str!("../data/seeds.json");

pub const MIN_CHAIN: usize = 2;
pub const MAX_CHAIN: usize = 13;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{origin}: line {line}, column {column}: {message}")]
    Syntax {
        origin: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{origin}: seed #{index} (`{id}`), field `{field}`: {message}")]
    Field {
        origin: String,
        index: usize,
        id: String,
        field: &'static str,
        message: String,
    },
    #[error("factor must be at least 1")]
    ZeroFactor,
    #[error("seed `{id}` has only {available} distinct label assignments, factor {factor} requested")]
    LexiconExhausted { id: String, available: u128, factor: usize },
    #[error("no samples to export")]
    NoSamples,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Object,
    Container,
}

/// A task template. Every string field may contain `{slot}` placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedTask {
    pub id: String,
    pub category: Category,
    pub chain_length: usize,
    pub slots: IndexMap<String, SlotKind>,
    pub instruction_template: String,
    pub goal_program_template: GoalProgram,
    pub scene_template: Scene,
}

/// Color and noun vocabularies for label substitution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub colors: Vec<String>,
    pub objects: Vec<String>,
    pub containers: Vec<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            colors: v(&["red", "blue", "green", "yellow", "orange", "purple", "white", "black"]),
            objects: v(&[
                "block", "cube", "cylinder", "ball", "cup", "can", "bottle", "sponge", "marker", "apple", "banana",
                "lemon", "carrot", "battery",
            ]),
            containers: v(&["box", "bowl", "tray", "plate", "basket"]),
        }
    }
}

impl Lexicon {
    pub fn labels(&self, kind: SlotKind) -> Vec<String> {
        let nouns = match kind {
            SlotKind::Object => &self.objects,
            SlotKind::Container => &self.containers,
        };
        self.colors
            .iter()
            .flat_map(|c| nouns.iter().map(move |n| format!("{c} {n}")))
            .collect()
    }

    /// Number of injective slot-to-label assignments for one seed.
    pub fn combinations(&self, slots: &IndexMap<String, SlotKind>) -> u128 {
        let mut total: u128 = 1;
        for kind in [SlotKind::Object, SlotKind::Container] {
            let n = self.labels(kind).len() as u128;
            let m = slots.values().filter(|k| **k == kind).count() as u128;
            if m > n {
                return 0;
            }
            for i in 0..m {
                total = total.saturating_mul(n - i);
            }
        }
        total
    }
}

fn placeholders(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('{') {
        let after = &rest[start + 1..];
        match after.find('}') {
            Some(end) => {
                out.push(after[..end].to_string());
                rest = &after[end + 1..];
            }
            None => break,
        }
    }
    out
}

fn fill(text: &str, labels: &BTreeMap<&str, &str>) -> String {
    let mut out = text.to_string();
    for (slot, label) in labels {
        out = out.replace(&format!("{{{slot}}}"), label);
    }
    out
}

impl SeedTask {
    fn check(&self, origin: &str, index: usize) -> Result<(), DatasetError> {
        let err = |field: &'static str, message: String| DatasetError::Field {
            origin: origin.to_string(),
            index,
            id: self.id.clone(),
            field,
            message,
        };
        if self.id.trim().is_empty() {
            return Err(err("id", "empty id".into()));
        }
        if !(MIN_CHAIN..=MAX_CHAIN).contains(&self.chain_length) {
            return Err(err(
                "chain_length",
                format!("{} is outside {MIN_CHAIN}..={MAX_CHAIN}", self.chain_length),
            ));
        }
        self.goal_program_template
            .validate()
            .map_err(|m| err("goal_program_template", m))?;
        let derived = self.goal_program_template.expected_chain().len();
        if derived != self.chain_length {
            return Err(err(
                "chain_length",
                format!("{} but the goal program expands to {derived} steps", self.chain_length),
            ));
        }
        if self.slots.is_empty() {
            return Err(err("slots", "at least one slot is required".into()));
        }
        let mut used = placeholders(&self.instruction_template);
        for step in &self.goal_program_template.steps {
            used.extend(placeholders(&step.object_label));
            if let Some(d) = &step.destination {
                used.extend(placeholders(&d.object_label));
            }
        }
        for o in &self.scene_template.objects {
            used.extend(placeholders(&o.label));
        }
        for name in used {
            if !self.slots.contains_key(&name) {
                return Err(err("slots", format!("placeholder `{{{name}}}` is not declared")));
            }
        }
        self.scene_template
            .validate()
            .map_err(|e| err("scene_template", e.to_string()))?;
        Ok(())
    }

    fn instantiate(&self, labels: &BTreeMap<&str, &str>, n: usize, jitter_seed: u64) -> TaskSpec {
        let mut goal = self.goal_program_template.clone();
        for step in &mut goal.steps {
            step.object_label = fill(&step.object_label, labels);
            if let Some(d) = step.destination.as_mut() {
                d.object_label = fill(&d.object_label, labels);
            }
        }
        let mut scene = self.scene_template.clone();
        for o in &mut scene.objects {
            o.label = fill(&o.label, labels);
        }
        let expected_chain = goal.expected_chain();
        TaskSpec {
            id: format!("{}-{n:03}", self.id),
            instruction: fill(&self.instruction_template, labels),
            goal_program: goal,
            scene: jitter_scene(&scene, jitter_seed),
            expected_chain,
            category: self.category,
        }
    }
}

fn syntax_error(e: &serde_json::Error, origin: &str) -> DatasetError {
    DatasetError::Syntax {
        origin: origin.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Parses and validates a JSON array of seed tasks, sorted by id.
pub fn parse_seed_tasks(text: &str, origin: &str) -> Result<Vec<SeedTask>, DatasetError> {
    let raw: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| syntax_error(&e, origin))?;
    let mut seeds = Vec::with_capacity(raw.len());
    for (index, value) in raw.into_iter().enumerate() {
        let id = value.get("id").and_then(|v| v.as_str()).unwrap_or("?").to_string();
        let seed: SeedTask = serde_json::from_value(value).map_err(|e| DatasetError::Field {
            origin: origin.to_string(),
            index,
            id: id.clone(),
            field: "*",
            message: e.to_string(),
        })?;
        seed.check(origin, index)?;
        seeds.push(seed);
    }
    let mut ids = HashSet::new();
    for (index, s) in seeds.iter().enumerate() {
        if !ids.insert(s.id.clone()) {
            return Err(DatasetError::Field {
                origin: origin.to_string(),
                index,
                id: s.id.clone(),
                field: "id",
                message: "duplicate id".into(),
            });
        }
    }
    seeds.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(seeds)
}

pub fn load_seed_tasks(path: &Path) -> Result<Vec<SeedTask>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_seed_tasks(&text, &path.display().to_string())
}

/// The 20 seed tasks shipped with the crate.
pub fn bundled_seeds() -> Vec<SeedTask> {
    parse_seed_tasks(BUNDLED_SEEDS, "bundled seeds").expect("bundled seeds are valid")
}

/// Expands every seed into `factor` tasks with distinct label assignments.
/// Output is ordered by seed id then instance number.
pub fn augment(
    seeds: &[SeedTask],
    lexicon: &Lexicon,
    rng_seed: u64,
    factor: usize,
) -> Result<Vec<TaskSpec>, DatasetError> {
    if factor == 0 {
        return Err(DatasetError::ZeroFactor);
    }
    let mut sorted: Vec<&SeedTask> = seeds.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = Vec::with_capacity(seeds.len() * factor);
    for (si, seed) in sorted.into_iter().enumerate() {
        let available = lexicon.combinations(&seed.slots);
        if available < factor as u128 {
            return Err(DatasetError::LexiconExhausted {
                id: seed.id.clone(),
                available,
                factor,
            });
        }
        let pools: Vec<Vec<String>> = seed.slots.values().map(|k| lexicon.labels(*k)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(rng_seed, si, 0));
        let mut seen: HashSet<Vec<String>> = HashSet::new();
        let mut n = 0;
        while n < factor {
            let mut pick: Vec<String> = Vec::with_capacity(pools.len());
            for pool in &pools {
                let free: Vec<&String> = pool.iter().filter(|l| !pick.contains(l)).collect();
                pick.push((*free.choose(&mut rng).expect("combinations checked")).clone());
            }
            if !seen.insert(pick.clone()) {
                continue;
            }
            let labels: BTreeMap<&str, &str> = seed
                .slots
                .keys()
                .map(String::as_str)
                .zip(pick.iter().map(String::as_str))
                .collect();
            let jitter_seed: u64 = rng.gen();
            out.push(seed.instantiate(&labels, n, jitter_seed));
            n += 1;
        }
    }
    Ok(out)
}

/// One isolated planner decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionSample {
    pub task_id: String,
    pub step: usize,
    pub system_prompt: String,
    pub context: String,
    pub target_output: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Generation {
    pub samples: Vec<DecisionSample>,
    /// Executed steps per successfully generated task, in task order.
    pub steps_per_task: Vec<(String, usize)>,
    /// Tasks the reference planner could not finish, with the reason.
    pub aborted: Vec<(String, String)>,
}

/// Solves every task with the reference planner in a fault-free world and
/// isolates each accepted turn as a sample.
pub fn generate_samples(tasks: &[TaskSpec], registry: &SkillRegistry, config: &PlannerConfig) -> Generation {
    let per_task: Vec<Result<Vec<DecisionSample>, String>> = tasks
        .par_iter()
        .map(|task| {
            let mut backend = ReferenceBackend::new(task.goal_program.clone());
            let t = run_task(task, registry, &mut backend, FaultProfile::none(), config, 0).map_err(|e| e.to_string())?;
            let r = &t.result;
            if !r.success {
                return Err(format!(
                    "{:?}{}",
                    r.termination,
                    r.error.as_deref().map(|e| format!(": {e}")).unwrap_or_default()
                ));
            }
            Ok(r.exchanges
                .iter()
                .filter(|x| x.accepted)
                .map(|x| DecisionSample {
                    task_id: task.id.clone(),
                    step: x.step,
                    system_prompt: r.system_prompt.clone(),
                    context: x.prompt.clone(),
                    target_output: x.output.clone().unwrap_or_default(),
                })
                .collect())
        })
        .collect();
    let mut gen = Generation::default();
    for (task, res) in tasks.iter().zip(per_task) {
        match res {
            Ok(samples) => {
                gen.steps_per_task.push((task.id.clone(), samples.len()));
                gen.samples.extend(samples);
            }
            Err(reason) => gen.aborted.push((task.id.clone(), reason)),
        }
    }
    gen
}

/// Plays a task's samples back through the planner; true if the episode
/// succeeds with exactly those turns.
pub fn replay_samples(
    task: &TaskSpec,
    samples: &[DecisionSample],
    registry: &SkillRegistry,
    config: &PlannerConfig,
) -> bool {
    let turns = samples.iter().map(|s| s.target_output.clone()).collect();
    let mut backend = ScriptedBackend::new(turns);
    match run_task(task, registry, &mut backend, FaultProfile::none(), config, 0) {
        Ok(t) => t.result.success && t.result.steps.len() == samples.len() && backend.remaining() == 0,
        Err(_) => false,
    }
}

/// Renders one chat-format line (without newline).
pub fn chat_line(sample: &DecisionSample) -> String {
    json!({
        "messages": [
            {"role": "system", "content": sample.system_prompt},
            {"role": "user", "content": sample.context},
            {"role": "assistant", "content": sample.target_output},
        ]
    })
    .to_string()
}

pub fn render_chat_jsonl(samples: &[DecisionSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&chat_line(s));
        out.push('\n');
    }
    out
}

/// Writes one chat-format JSON object per line.
pub fn export_chat_jsonl(samples: &[DecisionSample], path: &Path) -> Result<(), DatasetError> {
    if samples.is_empty() {
        return Err(DatasetError::NoSamples);
    }
    let io = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(render_chat_jsonl(samples).as_bytes()).map_err(io)?;
    f.flush().map_err(io)
}

/// True if every assistant message of a chat JSONL file parses as a turn.
pub fn check_chat_jsonl(text: &str) -> Result<usize, String> {
    let mut n = 0;
    for (i, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        let content = v
            .pointer("/messages/2/content")
            .and_then(|c| c.as_str())
            .ok_or_else(|| format!("line {}: no assistant message", i + 1))?;
        parse_model_turn(content).map_err(|e| format!("line {}: {e}", i + 1))?;
        n += 1;
    }
    Ok(n)
}
