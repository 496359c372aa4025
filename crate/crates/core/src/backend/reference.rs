//! Rule-based planner that solves simulated tasks exactly from a
//! machine-readable goal program. It reads only the memory section of the
//! prompt, so it sees exactly what a model backend would.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{check_request, Backend, BackendError, BackendRequest};
use crate::geometry::{resolve_qualifier, BBox, Qualifier};
use crate::memory::{parse_context, ParsedEntry, ParsedMemory};
use crate::skills::{FunctionCall, OutcomeStatus, Value, DETECT, MOVE_HOME, PICK, PLACE, PUSH, TASK_DONE};
use crate::wire::{prompt_section, render_turn, ModelTurn, SECTION_MEMORY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Pick,
    Place,
    Push,
    MoveHome,
}

impl Verb {
    pub fn skill(&self) -> &'static str {
        match self {
            Verb::Pick => PICK,
            Verb::Place => PLACE,
            Verb::Push => PUSH,
            Verb::MoveHome => MOVE_HOME,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Destination {
    #[serde(alias = "object")]
    pub object_label: String,
    #[serde(default = "no_qualifier")]
    pub qualifier: Qualifier,
}

fn no_qualifier() -> Qualifier {
    Qualifier::None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalStep {
    pub verb: Verb,
    #[serde(default, alias = "object")]
    pub object_label: String,
    #[serde(default = "no_qualifier")]
    pub qualifier: Qualifier,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destination: Option<Destination>,
}

impl GoalStep {
    pub fn pick(label: &str, qualifier: Qualifier) -> Self {
        Self {
            verb: Verb::Pick,
            object_label: label.to_string(),
            qualifier,
            destination: None,
        }
    }

    pub fn push(label: &str, qualifier: Qualifier) -> Self {
        Self {
            verb: Verb::Push,
            ..Self::pick(label, qualifier)
        }
    }

    pub fn place(held: &str, dest: &str, qualifier: Qualifier) -> Self {
        Self {
            verb: Verb::Place,
            object_label: held.to_string(),
            qualifier: Qualifier::None,
            destination: Some(Destination {
                object_label: dest.to_string(),
                qualifier,
            }),
        }
    }

    pub fn move_home() -> Self {
        Self {
            verb: Verb::MoveHome,
            object_label: String::new(),
            qualifier: Qualifier::None,
            destination: None,
        }
    }

    /// Label that must be perceived before acting, with its qualifier.
    fn perceived(&self) -> Option<(&str, Qualifier)> {
        match (self.verb, &self.destination) {
            (Verb::MoveHome, _) => None,
            (Verb::Place, Some(d)) => Some((&d.object_label, d.qualifier)),
            _ => Some((&self.object_label, self.qualifier)),
        }
    }
}

impl fmt::Display for GoalStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = |q: Qualifier| match q.keyword() {
            Some(k) => format!("{k} "),
            None => String::new(),
        };
        match (self.verb, &self.destination) {
            (Verb::MoveHome, _) => f.write_str("return the arm home"),
            (Verb::Place, Some(d)) => write!(
                f,
                "place the held {} on the {}{}",
                self.object_label,
                q(d.qualifier),
                d.object_label
            ),
            (Verb::Place, None) => f.write_str("place the held object"),
            (Verb::Pick, _) => write!(f, "pick up the {}{}", q(self.qualifier), self.object_label),
            (Verb::Push, _) => write!(f, "push the {}{}", q(self.qualifier), self.object_label),
        }
    }
}

/// Machine-readable form of a task instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GoalProgram {
    pub steps: Vec<GoalStep>,
}

impl GoalProgram {
    pub fn new(steps: Vec<GoalStep>) -> Self {
        Self { steps }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.steps.is_empty() {
            return Err("goal program is empty".into());
        }
        for (i, s) in self.steps.iter().enumerate() {
            let n = i + 1;
            match s.verb {
                Verb::MoveHome => {
                    if s.destination.is_some() {
                        return Err(format!("goal step {n}: move_home takes no destination"));
                    }
                }
                Verb::Place => match &s.destination {
                    Some(d) if !d.object_label.trim().is_empty() => {}
                    _ => return Err(format!("goal step {n}: place needs a destination label")),
                },
                Verb::Pick | Verb::Push => {
                    if s.object_label.trim().is_empty() {
                        return Err(format!("goal step {n}: missing object label"));
                    }
                    if s.destination.is_some() {
                        return Err(format!("goal step {n}: only place takes a destination"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Ground-truth skill sequence, excluding the terminal call.
    pub fn expected_chain(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.steps {
            if s.perceived().is_some() {
                out.push(DETECT.to_string());
            }
            out.push(s.verb.skill().to_string());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Detect(usize),
    Act(usize),
    Home(usize),
}

fn phases(goal: &GoalProgram) -> Vec<Phase> {
    let mut out = Vec::new();
    for (i, s) in goal.steps.iter().enumerate() {
        if s.verb == Verb::MoveHome {
            out.push(Phase::Home(i));
        } else {
            out.push(Phase::Detect(i));
            out.push(Phase::Act(i));
        }
    }
    out
}

/// Where the reference plan stands after replaying the history.
struct Progress {
    phase: usize,
    /// Step of the perception that moved the plan into an `Act` phase.
    perceived_at: Option<usize>,
    /// A motion without perception failed; perceive once before retrying.
    recheck: bool,
}

fn replay(goal: &GoalProgram, plan: &[Phase], entries: &[ParsedEntry]) -> Progress {
    let mut p = Progress {
        phase: 0,
        perceived_at: None,
        recheck: false,
    };
    for e in entries {
        let Some(current) = plan.get(p.phase) else { break };
        let ok = e.status == OutcomeStatus::Success;
        let is_detect = e.call.skill == DETECT;
        if is_detect {
            p.recheck = false;
        }
        match *current {
            Phase::Detect(g) => {
                let (label, _) = goal.steps[g].perceived().expect("detect phase has a label");
                if ok && is_detect && e.call.text("target") == Some(label) {
                    p.phase += 1;
                    p.perceived_at = Some(e.step);
                }
            }
            Phase::Act(g) => {
                if e.call.skill == goal.steps[g].verb.skill() {
                    if ok {
                        p.phase += 1;
                    } else {
                        p.phase -= 1;
                    }
                    p.perceived_at = None;
                } else if is_detect {
                    // any other perception invalidates the one we were about to use
                    p.phase -= 1;
                    p.perceived_at = None;
                }
            }
            Phase::Home(_) => {
                if e.call.skill == MOVE_HOME {
                    if ok {
                        p.phase += 1;
                    } else {
                        p.recheck = true;
                    }
                }
            }
        }
    }
    p
}

fn describe_list(list: &[BBox], q: Qualifier) -> String {
    let items: Vec<String> = list
        .iter()
        .map(|b| match q {
            Qualifier::Leftmost | Qualifier::Rightmost => {
                format!("{b} area {} {} {}", b.area(), q.metric_name(), q.metric(b))
            }
            _ => format!("{b} area {}", b.area()),
        })
        .collect();
    items.join("; ")
}

fn feedback_text(last: Option<&ParsedEntry>) -> String {
    let Some(e) = last else {
        return String::new();
    };
    match (e.status, e.call.skill == DETECT) {
        (OutcomeStatus::Success, true) => format!("Step {} perception succeeded: {}.", e.step, e.summary),
        (OutcomeStatus::Success, false) => format!("Step {} {} succeeded.", e.step, e.call.skill),
        (OutcomeStatus::Failed, true) => format!(
            "Step {} perception failed: {} Re-calling the detection skill to obtain the perception data.",
            e.step, e.summary
        ),
        (OutcomeStatus::Failed, false) => format!(
            "Step {} {} failed: {} The scene must be perceived again before retrying.",
            e.step, e.call.skill, e.summary
        ),
    }
}

fn detect_call(label: &str) -> FunctionCall {
    FunctionCall::new(DETECT).arg("target", Value::Text(label.to_string()))
}

/// Next correct turn for `goal` given the history read back from memory.
pub fn reference_next_turn(goal: &GoalProgram, memory: &ParsedMemory) -> Result<ModelTurn, BackendError> {
    goal.validate().map_err(BackendError::Unresolvable)?;
    let plan = phases(goal);
    let progress = replay(goal, &plan, &memory.entries);
    let feedback = feedback_text(memory.entries.last());
    let total = goal.steps.len();

    let Some(&phase) = plan.get(progress.phase) else {
        return Ok(ModelTurn::new(
            &feedback,
            &format!("All {total} task steps are complete. Next: declare the task complete."),
            "taskDone takes no parameters.",
            FunctionCall::new(TASK_DONE),
        ));
    };

    let goal_line = |g: usize, next: &str| format!("Task step {}/{total}: {}. Next: {next}.", g + 1, goal.steps[g]);

    match phase {
        Phase::Home(g) if progress.recheck => {
            let label = goal
                .steps
                .iter()
                .find_map(GoalStep::perceived)
                .map(|(l, _)| l.to_string())
                .ok_or_else(|| BackendError::Unresolvable("no label to re-perceive".into()))?;
            Ok(ModelTurn::new(
                &feedback,
                &goal_line(g, &format!("re-check the scene by detecting every {label}")),
                &format!("target=\"{label}\" re-observes the workspace before moving again."),
                detect_call(&label),
            ))
        }
        Phase::Home(g) => Ok(ModelTurn::new(
            &feedback,
            &goal_line(g, "move the arm to its home pose"),
            "moveHome takes no parameters.",
            FunctionCall::new(MOVE_HOME),
        )),
        Phase::Detect(g) => {
            let (label, _) = goal.steps[g].perceived().expect("detect phase has a label");
            Ok(ModelTurn::new(
                &feedback,
                &goal_line(g, &format!("detect every {label} to get current bounding boxes")),
                &format!("target=\"{label}\" is the object named by this task step."),
                detect_call(label),
            ))
        }
        Phase::Act(g) => {
            let step = &goal.steps[g];
            let (label, qualifier) = step.perceived().expect("act phase has a label");
            let list = match (&memory.perception, progress.perceived_at) {
                (Some((at, list)), Some(want)) if *at == want && !list.is_empty() => list,
                _ => {
                    return Ok(ModelTurn::new(
                        &feedback,
                        &goal_line(g, &format!("perception of {label} is stale, detect it again")),
                        &format!("target=\"{label}\" refreshes the perception result."),
                        detect_call(label),
                    ))
                }
            };
            let idx = resolve_qualifier(qualifier, list)
                .ok_or_else(|| BackendError::Unresolvable("empty perception".into()))?;
            let chosen = list[idx];
            let choice = match qualifier {
                Qualifier::None if list.len() == 1 => format!("single candidate {chosen}"),
                Qualifier::None => format!("first candidate in detection order {chosen}"),
                q => format!(
                    "{q} by {}: {chosen} ({} {})",
                    q.metric_name(),
                    q.metric_name(),
                    q.metric(&chosen)
                ),
            };
            let params = format!(
                "Candidates for {label}: {}. Selected {choice}. target=\"{label}\", bbox={chosen}.",
                describe_list(list, qualifier)
            );
            let call = FunctionCall::new(step.verb.skill())
                .arg("target", Value::Text(label.to_string()))
                .arg("bbox", Value::BBox(chosen));
            Ok(ModelTurn::new(
                &feedback,
                &goal_line(g, &format!("{} the selected {label}", step.verb.skill())),
                &params,
                call,
            ))
        }
    }
}

/// Backend wrapper around [`reference_next_turn`].
#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    goal: GoalProgram,
}

impl ReferenceBackend {
    pub fn new(goal: GoalProgram) -> Self {
        Self { goal }
    }
}

impl Backend for ReferenceBackend {
    fn id(&self) -> String {
        "reference".to_string()
    }

    fn complete(&mut self, request: &BackendRequest) -> Result<String, BackendError> {
        check_request(request)?;
        let context = prompt_section(&request.prompt, SECTION_MEMORY)
            .ok_or_else(|| BackendError::Unresolvable("prompt has no memory section".into()))?;
        let memory = parse_context(context).map_err(|e| BackendError::Unresolvable(e.to_string()))?;
        let turn = reference_next_turn(&self.goal, &memory)?;
        render_turn(&turn).map_err(|e| BackendError::Unresolvable(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(step: usize, call: FunctionCall, ok: bool, summary: &str) -> ParsedEntry {
        ParsedEntry {
            step,
            call,
            status: if ok {
                OutcomeStatus::Success
            } else {
                OutcomeStatus::Failed
            },
            summary: summary.to_string(),
        }
    }

    fn after_detect(list: Vec<BBox>) -> ParsedMemory {
        ParsedMemory {
            entries: vec![entry(1, detect_call("block"), true, "detected 2 objects")],
            perception: Some((1, list)),
        }
    }

    #[test]
    fn empty_memory_detects() {
        let goal = GoalProgram::new(vec![GoalStep::pick("block", Qualifier::None)]);
        let t = reference_next_turn(&goal, &ParsedMemory::default()).unwrap();
        assert_eq!(t.call, detect_call("block"));
        assert_eq!(t.trace.feedback_section, "");
    }

    #[test]
    fn largest_cites_areas() {
        let goal = GoalProgram::new(vec![GoalStep::pick("block", Qualifier::Largest)]);
        let mem = after_detect(vec![BBox::new(0, 0, 5, 5), BBox::new(10, 10, 20, 20)]);
        let t = reference_next_turn(&goal, &mem).unwrap();
        assert_eq!(t.call.to_string(), "pick(target=\"block\", bbox=[10,10,20,20])");
        assert!(t.trace.param_section.contains("area 25"));
        assert!(t.trace.param_section.contains("area 100"));
    }

    #[test]
    fn leftmost_by_x_min() {
        let goal = GoalProgram::new(vec![GoalStep::pick("block", Qualifier::Leftmost)]);
        let mem = after_detect(vec![BBox::new(5, 0, 15, 10), BBox::new(30, 0, 40, 10)]);
        let t = reference_next_turn(&goal, &mem).unwrap();
        assert_eq!(t.call.bbox("bbox"), Some(BBox::new(5, 0, 15, 10)));
    }

    #[test]
    fn failed_detection_is_retried() {
        let goal = GoalProgram::new(vec![GoalStep::pick("block", Qualifier::None)]);
        let mem = ParsedMemory {
            entries: vec![entry(1, detect_call("block"), false, "Detection result is empty.")],
            perception: None,
        };
        let t = reference_next_turn(&goal, &mem).unwrap();
        assert_eq!(t.call, detect_call("block"));
        assert!(t.trace.feedback_section.contains("Re-calling the detection skill"));
    }

    #[test]
    fn failed_action_redetects_then_done() {
        let goal = GoalProgram::new(vec![GoalStep::pick("block", Qualifier::None)]);
        let b = BBox::new(0, 0, 5, 5);
        let pick = FunctionCall::new(PICK)
            .arg("target", Value::Text("block".into()))
            .arg("bbox", Value::BBox(b));
        let mut mem = after_detect(vec![b]);
        mem.entries.push(entry(2, pick.clone(), false, "grasp failed"));
        assert_eq!(reference_next_turn(&goal, &mem).unwrap().call, detect_call("block"));
        mem.entries[1].status = OutcomeStatus::Success;
        assert_eq!(reference_next_turn(&goal, &mem).unwrap().call.skill, TASK_DONE);
    }

    #[test]
    fn home_failure_rechecks() {
        let goal = GoalProgram::new(vec![GoalStep::pick("block", Qualifier::None), GoalStep::move_home()]);
        let b = BBox::new(0, 0, 5, 5);
        let pick = FunctionCall::new(PICK)
            .arg("target", Value::Text("block".into()))
            .arg("bbox", Value::BBox(b));
        let mut mem = after_detect(vec![b]);
        mem.entries.push(entry(2, pick, true, ""));
        mem.entries.push(entry(3, FunctionCall::new(MOVE_HOME), false, "grasp failed"));
        assert_eq!(reference_next_turn(&goal, &mem).unwrap().call.skill, DETECT);
        mem.entries.push(entry(4, detect_call("block"), false, "Detection result is empty."));
        assert_eq!(reference_next_turn(&goal, &mem).unwrap().call.skill, MOVE_HOME);
    }

    #[test]
    fn chains() {
        let goal = GoalProgram::new(vec![
            GoalStep::pick("block", Qualifier::Largest),
            GoalStep::place("block", "box", Qualifier::None),
            GoalStep::move_home(),
        ]);
        assert_eq!(
            goal.expected_chain(),
            vec!["2dDetect", "pick", "2dDetect", "place", "moveHome"]
        );
        assert!(GoalProgram::new(vec![]).validate().is_err());
        let bad = GoalProgram::new(vec![GoalStep {
            destination: None,
            ..GoalStep::place("block", "box", Qualifier::None)
        }]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn goal_program_json() {
        let json = r#"[{"verb":"pick","object":"block","qualifier":"largest"},
                       {"verb":"place","object":"block","destination":{"object":"box"}},
                       {"verb":"move_home"}]"#;
        let g: GoalProgram = serde_json::from_str(json).unwrap();
        assert_eq!(g.steps[0].qualifier, Qualifier::Largest);
        assert_eq!(g.steps[1].destination.as_ref().unwrap().qualifier, Qualifier::None);
        assert!(g.validate().is_ok());
    }
}
