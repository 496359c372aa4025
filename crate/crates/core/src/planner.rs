//! The plan, verify, act loop.
//!
//! Each step assembles a prompt, asks the backend for one turn, checks it at
//! up to three levels (execution feedback, goal consistency, parameters) and
//! only then invokes the skill. A rejected turn is re-prompted with the
//! rejection reasons attached, up to `max_retries_per_step` times.

use std::fmt;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendRequest};
use crate::geometry::{resolve_qualifier, BBox, Qualifier};
use crate::harness::TaskSpec;
use crate::memory::{HistoryStore, MemoryEntry};
use crate::skills::{
    invoke, validate_bbox_params, validate_call_schema, OutcomeStatus, SkillExecutor, SkillKind, SkillOutcome,
    SkillRegistry,
};
use crate::wire::{assemble_prompt, parse_model_turn, ModelTurn, Prompt};

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationToggles {
    #[serde(default = "yes")]
    pub feedback: bool,
    #[serde(default = "yes")]
    pub goal: bool,
    #[serde(default = "yes")]
    pub params: bool,
}

impl VerificationToggles {
    pub fn all() -> Self {
        Self {
            feedback: true,
            goal: true,
            params: true,
        }
    }

    pub fn none() -> Self {
        Self {
            feedback: false,
            goal: false,
            params: false,
        }
    }
}

impl Default for VerificationToggles {
    fn default() -> Self {
        Self::all()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub max_steps: usize,
    pub max_retries_per_step: usize,
    pub verification: VerificationToggles,
    pub strict_bbox_membership: bool,
    pub max_output_tokens: u32,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            max_steps: 32,
            max_retries_per_step: 2,
            verification: VerificationToggles::all(),
            strict_bbox_membership: true,
            max_output_tokens: 512,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_steps == 0 {
            return Err("max_steps must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationLevel {
    Feedback,
    Goal,
    Params,
}

impl fmt::Display for VerificationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerificationLevel::Feedback => "feedback",
            VerificationLevel::Goal => "goal",
            VerificationLevel::Params => "params",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub level: VerificationLevel,
    pub pass: bool,
    pub reason: String,
}

impl Verdict {
    fn pass(level: VerificationLevel, reason: impl Into<String>) -> Self {
        Self {
            level,
            pass: true,
            reason: reason.into(),
        }
    }

    fn fail(level: VerificationLevel, reason: impl Into<String>) -> Self {
        let mut reason = reason.into();
        if reason.is_empty() {
            reason = format!("{level} check failed");
        }
        Self {
            level,
            pass: false,
            reason,
        }
    }
}

/// A backend reply that was not executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedAttempt {
    pub raw_output: String,
    pub reason: String,
    pub verdicts: Vec<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub turn: ModelTurn,
    pub kind: SkillKind,
    pub verdicts: Vec<Verdict>,
    pub outcome: SkillOutcome,
    pub retries_used: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected: Vec<RejectedAttempt>,
}

impl StepRecord {
    pub fn new(index: usize, turn: ModelTurn, kind: SkillKind, outcome: SkillOutcome) -> Self {
        Self {
            index,
            turn,
            kind,
            verdicts: Vec::new(),
            outcome,
            retries_used: 0,
            rejected: Vec::new(),
        }
    }

    pub fn skill(&self) -> &str {
        &self.turn.call.skill
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    TerminalSkill,
    StepBudget,
    RetryBudget,
    BackendError,
}

/// One backend round trip, kept for transcripts and dataset export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub step: usize,
    pub attempt: usize,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps: Vec<StepRecord>,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pending: Vec<RejectedAttempt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub system_prompt: String,
    pub exchanges: Vec<Exchange>,
}

impl EpisodeResult {
    /// An episode that could not start, e.g. because no backend was built.
    pub fn aborted(error: impl Into<String>) -> Self {
        Self {
            success: false,
            steps: Vec::new(),
            termination: Termination::BackendError,
            pending: Vec::new(),
            error: Some(error.into()),
            system_prompt: String::new(),
            exchanges: Vec::new(),
        }
    }

    pub fn executed_calls(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.turn.call.to_string()).collect()
    }

    pub fn backend_calls(&self) -> usize {
        self.exchanges.len()
    }
}

/// The world the planner acts on.
pub trait Environment: SkillExecutor {
    /// Image width and height used for bbox bounds checks.
    fn bounds(&self) -> (i64, i64);
}

impl Environment for crate::simenv::SimEnv {
    fn bounds(&self) -> (i64, i64) {
        self.scene().bounds()
    }
}

/// Execution-feedback level: after a failed step, the next call must either
/// be a perception skill or differ from the failed call.
pub fn verify_feedback_level(
    last_entry: Option<&MemoryEntry>,
    turn: &ModelTurn,
    registry: &SkillRegistry,
) -> Verdict {
    let level = VerificationLevel::Feedback;
    let Some(last) = last_entry else {
        return Verdict::pass(level, "first step");
    };
    if last.status == OutcomeStatus::Success {
        return Verdict::pass(level, "previous step succeeded");
    }
    if registry.kind_of(&turn.call.skill) == Some(SkillKind::Perception) {
        return Verdict::pass(level, "re-perceives after a failure");
    }
    if turn.call.to_string() == last.call_text {
        return Verdict::fail(
            level,
            format!("repeats failed call unchanged: {}", last.call_text),
        );
    }
    Verdict::pass(level, "changes the failed call")
}

/// Goal-consistency level, restated as phase rules over the history.
pub fn verify_goal_consistency(turn: &ModelTurn, registry: &SkillRegistry, history: &[MemoryEntry]) -> Verdict {
    let level = VerificationLevel::Goal;
    if turn.trace.goal_section.trim().is_empty() {
        return Verdict::fail(level, "goal section is empty");
    }
    let Some(spec) = registry.get(&turn.call.skill) else {
        return Verdict::fail(level, format!("unknown skill `{}`", turn.call.skill));
    };
    let succeeded = |kind: SkillKind| {
        history
            .iter()
            .any(|e| e.kind == kind && e.status == OutcomeStatus::Success)
    };
    match spec.kind {
        SkillKind::Action if spec.takes_bbox() && !succeeded(SkillKind::Perception) => {
            Verdict::fail(level, "action before perception")
        }
        SkillKind::Terminal if !succeeded(SkillKind::Action) => Verdict::fail(level, "terminal before any action"),
        _ => Verdict::pass(level, format!("{} is allowed in this phase", spec.name)),
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Qualifiers that the instruction attaches to `label`, found as
/// `<qualifier> <label>` with word boundaries, case-insensitively.
pub fn qualifiers_for(instruction: &str, label: &str) -> Vec<Qualifier> {
    let text = instruction.to_lowercase();
    let label = label.trim().to_lowercase();
    let mut found = Vec::new();
    if label.is_empty() {
        return found;
    }
    for q in Qualifier::ALL {
        let needle = format!("{} {}", q.keyword().unwrap_or_default(), label);
        let mut from = 0;
        while let Some(off) = text[from..].find(&needle) {
            let start = from + off;
            let end = start + needle.len();
            let before_ok = text[..start].chars().next_back().is_none_or(|c| !is_word_char(c));
            let after_ok = text[end..].chars().next().is_none_or(|c| !is_word_char(c));
            if before_ok && after_ok {
                found.push(q);
                break;
            }
            from = start + 1;
            while !text.is_char_boundary(from) {
                from += 1;
            }
        }
    }
    found
}

fn qualifier_mismatch(q: Qualifier, supplied: &BBox, expected: &BBox) -> String {
    let (got, want) = (q.metric(supplied), q.metric(expected));
    let (adj, bound) = if q.maximizes() {
        ("maximal", "max")
    } else {
        ("minimal", "min")
    };
    if got == want {
        format!(
            "{} {got} ties the {bound} but {expected} comes first in detection order",
            q.metric_name()
        )
    } else {
        format!("{} {got} is not {adj} ({bound} {want})", q.metric_name())
    }
}

/// Parameter level: schema, bounds, optional perception membership, and the
/// qualifier recomputation over the latest perception.
pub fn verify_parameters(
    turn: &ModelTurn,
    instruction: &str,
    registry: &SkillRegistry,
    last_perception: Option<&[BBox]>,
    scene_bounds: (i64, i64),
    strict_bbox_membership: bool,
) -> Verdict {
    let level = VerificationLevel::Params;
    let mut report = validate_call_schema(&turn.call, registry);
    if report.valid {
        report.extend(validate_bbox_params(
            &turn.call,
            scene_bounds,
            last_perception,
            strict_bbox_membership,
        ));
    }
    if let Some(v) = report.violations.first() {
        return Verdict::fail(level, v.to_string());
    }
    let (Some(target), Some(bbox)) = (turn.call.text("target"), turn.call.bbox("bbox")) else {
        return Verdict::pass(level, "no qualified bbox argument");
    };
    let qualifiers = qualifiers_for(instruction, target);
    if qualifiers.is_empty() {
        return Verdict::pass(level, "parameters valid");
    }
    let Some(list) = last_perception.filter(|l| !l.is_empty()) else {
        return Verdict::fail(
            level,
            format!("no perception result to check `{}` against", qualifiers[0]),
        );
    };
    let mut first_reason = None;
    for q in &qualifiers {
        let expected = list[resolve_qualifier(*q, list).expect("nonempty list")];
        if expected == bbox {
            return Verdict::pass(level, format!("{bbox} is the {q} {target}"));
        }
        first_reason.get_or_insert_with(|| qualifier_mismatch(*q, &bbox, &expected));
    }
    Verdict::fail(level, first_reason.unwrap_or_default())
}

/// Runs one episode to completion. Never panics on backend or model
/// misbehavior; those end the episode with the matching [`Termination`].
pub fn run_episode(
    task: &TaskSpec,
    env: &mut dyn Environment,
    registry: &SkillRegistry,
    backend: &mut dyn Backend,
    memory: &mut dyn HistoryStore,
    config: &PlannerConfig,
) -> EpisodeResult {
    let mut result = EpisodeResult {
        success: false,
        steps: Vec::new(),
        termination: Termination::StepBudget,
        pending: Vec::new(),
        error: None,
        system_prompt: String::new(),
        exchanges: Vec::new(),
    };
    let catalog = match registry.render_catalog() {
        Ok(c) => c,
        Err(e) => {
            result.termination = Termination::BackendError;
            result.error = Some(e.to_string());
            return result;
        }
    };
    let bounds = env.bounds();

    for index in 1..=config.max_steps {
        let base = assemble_prompt(&task.instruction, &catalog, &memory.render_context());
        result.system_prompt.clone_from(&base.system);
        let mut rejected: Vec<RejectedAttempt> = Vec::new();
        let (turn, verdicts) = loop {
            let prompt: Prompt = if rejected.is_empty() {
                base.clone()
            } else {
                let reasons: Vec<String> = rejected.iter().map(|r| r.reason.clone()).collect();
                base.with_rejection(&reasons)
            };
            let request = BackendRequest {
                system: prompt.system.clone(),
                prompt: prompt.user.clone(),
                max_output_tokens: config.max_output_tokens,
                temperature: 0.0,
                stop_sequences: Vec::new(),
            };
            let attempt = rejected.len();
            let raw = match backend.complete(&request) {
                Ok(raw) => raw,
                Err(e) => {
                    result.exchanges.push(Exchange {
                        step: index,
                        attempt,
                        prompt: prompt.user,
                        output: None,
                        error: Some(e.to_string()),
                        accepted: false,
                    });
                    result.termination = Termination::BackendError;
                    result.error = Some(e.to_string());
                    result.pending = rejected;
                    return result;
                }
            };
            let (verdicts, checked) = match parse_model_turn(&raw) {
                Err(e) => (Vec::new(), Err(format!("unparseable reply: {e}"))),
                Ok(turn) => {
                    let verdicts = run_levels(task, &turn, registry, memory, bounds, config);
                    match verdicts.iter().find(|v| !v.pass) {
                        Some(v) => {
                            let reason = format!("{} level: {}", v.level, v.reason);
                            (verdicts, Err(reason))
                        }
                        None => (verdicts, Ok(turn)),
                    }
                }
            };
            result.exchanges.push(Exchange {
                step: index,
                attempt,
                prompt: prompt.user,
                output: Some(raw.clone()),
                error: None,
                accepted: checked.is_ok(),
            });
            match checked {
                Ok(turn) => break (turn, verdicts),
                Err(reason) => {
                    debug!("step {index} attempt {attempt} rejected: {reason}");
                    rejected.push(RejectedAttempt {
                        raw_output: raw,
                        reason,
                        verdicts,
                    });
                    if rejected.len() > config.max_retries_per_step {
                        result.termination = Termination::RetryBudget;
                        result.pending = rejected;
                        return result;
                    }
                }
            }
        };
        let (kind, outcome) = match invoke(&turn.call, registry, env) {
            Ok(outcome) => (registry.kind_of(&turn.call.skill).unwrap_or(SkillKind::Action), outcome),
            Err(e) => (SkillKind::Action, SkillOutcome::failed(e.to_string())),
        };
        let record = StepRecord {
            index,
            turn,
            kind,
            verdicts,
            outcome,
            retries_used: rejected.len(),
            rejected,
        };
        let appended = memory.append(&record);
        let done = record.kind == SkillKind::Terminal && record.outcome.is_success();
        result.steps.push(record);
        if let Err(e) = appended {
            result.termination = Termination::BackendError;
            result.error = Some(e.to_string());
            return result;
        }
        if done {
            result.success = true;
            result.termination = Termination::TerminalSkill;
            return result;
        }
    }
    result
}

fn run_levels(
    task: &TaskSpec,
    turn: &ModelTurn,
    registry: &SkillRegistry,
    memory: &dyn HistoryStore,
    bounds: (i64, i64),
    config: &PlannerConfig,
) -> Vec<Verdict> {
    let toggles = config.verification;
    let mut verdicts = Vec::new();
    if toggles.feedback {
        verdicts.push(verify_feedback_level(memory.last_entry(), turn, registry));
        if !verdicts[verdicts.len() - 1].pass {
            return verdicts;
        }
    }
    if toggles.goal {
        verdicts.push(verify_goal_consistency(turn, registry, memory.entries()));
        if !verdicts[verdicts.len() - 1].pass {
            return verdicts;
        }
    }
    if toggles.params {
        verdicts.push(verify_parameters(
            turn,
            &task.instruction,
            registry,
            memory.last_perception().map(|(_, l)| l),
            bounds,
            config.strict_bbox_membership,
        ));
    }
    verdicts
}
