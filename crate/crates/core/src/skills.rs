//! Skill registry: typed skill contracts, call validation, prompt catalog
//! rendering and dispatch to an executor.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::panic::{self, AssertUnwindSafe};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{format_bbox_list, BBox, Position3D};

pub const DETECT: &str = "2dDetect";
pub const PICK: &str = "pick";
pub const PLACE: &str = "place";
pub const PUSH: &str = "push";
pub const MOVE_HOME: &str = "moveHome";
pub const OPEN_GRIPPER: &str = "openGripper";
pub const CLOSE_GRIPPER: &str = "closeGripper";
pub const TASK_DONE: &str = "taskDone";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillKind {
    Perception,
    Action,
    Terminal,
}

impl fmt::Display for SkillKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkillKind::Perception => "perception",
            SkillKind::Action => "action",
            SkillKind::Terminal => "terminal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Text,
    Number,
    Bbox,
    BboxList,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueKind::Text => "text",
            ValueKind::Number => "number",
            ValueKind::Bbox => "bbox",
            ValueKind::BboxList => "bbox_list",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub value_kind: ValueKind,
    #[serde(default = "default_true")]
    pub required: bool,
}

fn default_true() -> bool {
    true
}

impl ParamSpec {
    pub fn required(name: &str, value_kind: ValueKind) -> Self {
        Self {
            name: name.to_string(),
            value_kind,
            required: true,
        }
    }

    pub fn optional(name: &str, value_kind: ValueKind) -> Self {
        Self {
            name: name.to_string(),
            value_kind,
            required: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillSpec {
    pub name: String,
    pub kind: SkillKind,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub description: String,
}

impl SkillSpec {
    pub fn new(name: &str, kind: SkillKind, params: Vec<ParamSpec>, description: &str) -> Self {
        Self {
            name: name.to_string(),
            kind,
            params,
            description: description.to_string(),
        }
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn takes_bbox(&self) -> bool {
        self.params
            .iter()
            .any(|p| matches!(p.value_kind, ValueKind::Bbox | ValueKind::BboxList))
    }
}

/// Skill names: alphanumeric plus `_`, at least one letter. A leading digit is
/// allowed so that `2dDetect` is a valid name.
pub fn is_skill_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !s.starts_with('_')
        && s.chars().any(|c| c.is_ascii_alphabetic())
}

/// Parameter names follow the usual identifier rule.
pub fn is_param_name(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// An argument value carried by a function call.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Text(String),
    Number(f64),
    BBox(BBox),
    BBoxList(Vec<BBox>),
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Text(_) => ValueKind::Text,
            Value::Number(_) => ValueKind::Number,
            Value::BBox(_) => ValueKind::Bbox,
            Value::BBoxList(_) => ValueKind::BboxList,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bbox(&self) -> Option<BBox> {
        match self {
            Value::BBox(b) => Some(*b),
            _ => None,
        }
    }
}

/// One parameterized skill invocation. Argument order is preserved so the
/// canonical rendering reproduces the order the call was written in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct FunctionCall {
    pub skill: String,
    pub args: IndexMap<String, Value>,
}

impl FunctionCall {
    pub fn new(skill: &str) -> Self {
        Self {
            skill: skill.to_string(),
            args: IndexMap::new(),
        }
    }

    pub fn arg(mut self, name: &str, value: Value) -> Self {
        self.args.insert(name.to_string(), value);
        self
    }

    pub fn text(&self, name: &str) -> Option<&str> {
        self.args.get(name).and_then(Value::as_text)
    }

    pub fn bbox(&self, name: &str) -> Option<BBox> {
        self.args.get(name).and_then(Value::as_bbox)
    }

    /// Every bbox carried by the call, with the argument it came from.
    pub fn bbox_args(&self) -> Vec<(&str, BBox)> {
        let mut out = Vec::new();
        for (name, v) in &self.args {
            match v {
                Value::BBox(b) => out.push((name.as_str(), *b)),
                Value::BBoxList(list) => out.extend(list.iter().map(|b| (name.as_str(), *b))),
                _ => {}
            }
        }
        out
    }
}

impl fmt::Display for FunctionCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&crate::wire::render_call(self))
    }
}

impl From<FunctionCall> for String {
    fn from(c: FunctionCall) -> Self {
        c.to_string()
    }
}

impl TryFrom<String> for FunctionCall {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        crate::wire::parse_call(&s).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Success,
    Failed,
}

impl fmt::Display for OutcomeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutcomeStatus::Success => "success",
            OutcomeStatus::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillResult {
    BboxList(Vec<BBox>),
    Position(Position3D),
}

/// Uniform `{status, result, feedback}` return of every skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillOutcome {
    pub status: OutcomeStatus,
    pub result: Option<SkillResult>,
    pub feedback: Option<String>,
}

impl SkillOutcome {
    pub fn success() -> Self {
        Self {
            status: OutcomeStatus::Success,
            result: None,
            feedback: None,
        }
    }

    pub fn detected(list: Vec<BBox>) -> Self {
        Self {
            status: OutcomeStatus::Success,
            result: Some(SkillResult::BboxList(list)),
            feedback: None,
        }
    }

    pub fn failed(feedback: impl Into<String>) -> Self {
        let mut feedback = feedback.into();
        if feedback.is_empty() {
            feedback = "skill failed".to_string();
        }
        Self {
            status: OutcomeStatus::Failed,
            result: None,
            feedback: Some(feedback),
        }
    }

    pub fn is_success(&self) -> bool {
        self.status == OutcomeStatus::Success
    }

    pub fn bbox_list(&self) -> Option<&[BBox]> {
        match &self.result {
            Some(SkillResult::BboxList(l)) => Some(l),
            _ => None,
        }
    }

    /// Checks the outcome against the contract for a skill of `kind`.
    pub fn conforms(&self, kind: SkillKind) -> Result<(), String> {
        let has_feedback = self.feedback.as_deref().is_some_and(|f| !f.is_empty());
        match (kind, self.status) {
            (SkillKind::Perception, OutcomeStatus::Success) => match &self.result {
                Some(SkillResult::BboxList(l)) if !l.is_empty() => Ok(()),
                _ => Err("perception success must carry a nonempty bbox list".into()),
            },
            (_, OutcomeStatus::Failed) => {
                if self.result.is_some() {
                    Err("failed outcome must not carry a result".into())
                } else if !has_feedback {
                    Err("failed outcome must carry feedback".into())
                } else {
                    Ok(())
                }
            }
            (_, OutcomeStatus::Success) => {
                if self.result.is_some() {
                    Err(format!("{kind} skill must not return a result"))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Short one-line description used in memory and feedback sections.
    pub fn summary(&self) -> String {
        match (&self.status, &self.result, &self.feedback) {
            (OutcomeStatus::Success, Some(SkillResult::BboxList(l)), _) => {
                format!("detected {} objects", l.len())
            }
            (OutcomeStatus::Success, Some(SkillResult::Position(p)), _) => {
                format!("at ({}, {}, {})", p.x, p.y, p.z)
            }
            (_, _, Some(f)) => f.clone(),
            _ => String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    MissingRequired,
    UnknownParam,
    WrongKind,
    BboxOutOfBounds,
    BboxNotPerceived,
    UnknownSkill,
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationCode::MissingRequired => "missing_required",
            ViolationCode::UnknownParam => "unknown_param",
            ViolationCode::WrongKind => "wrong_kind",
            ViolationCode::BboxOutOfBounds => "bbox_out_of_bounds",
            ViolationCode::BboxNotPerceived => "bbox_not_perceived",
            ViolationCode::UnknownSkill => "unknown_skill",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub param: String,
    pub code: ViolationCode,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}): {}", self.param, self.code, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn from_violations(violations: Vec<Violation>) -> Self {
        Self {
            valid: violations.is_empty(),
            violations,
        }
    }

    pub fn extend(&mut self, more: impl IntoIterator<Item = Violation>) {
        self.violations.extend(more);
        self.valid = self.violations.is_empty();
    }

    pub fn has(&self, param: &str, code: ViolationCode) -> bool {
        self.violations
            .iter()
            .any(|v| v.param == param && v.code == code)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SkillError {
    #[error("skill `{0}` is already registered")]
    DuplicateName(String),
    #[error("malformed skill spec `{name}`: {reason}")]
    MalformedSpec { name: String, reason: String },
    #[error("registry has no skills")]
    EmptyRegistry,
    #[error("registry has no terminal skill")]
    MissingTerminal,
    #[error("unknown skill `{0}`")]
    UnknownSkill(String),
}

/// Ordered, name-indexed set of skills. Read-only once built; share it
/// behind an `Arc` between concurrent episodes.
#[derive(Debug, Clone, Default)]
pub struct SkillRegistry {
    skills: Vec<SkillSpec>,
    index: HashMap<String, usize>,
}

impl SkillRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: SkillSpec) -> Result<(), SkillError> {
        let malformed = |reason: String| SkillError::MalformedSpec {
            name: spec.name.clone(),
            reason,
        };
        if !is_skill_name(&spec.name) {
            return Err(malformed("name must be alphanumeric/underscore with a letter".into()));
        }
        let mut seen = HashSet::new();
        for p in &spec.params {
            if !is_param_name(&p.name) {
                return Err(malformed(format!("bad parameter name `{}`", p.name)));
            }
            if !seen.insert(p.name.as_str()) {
                return Err(malformed(format!("parameter `{}` declared twice", p.name)));
            }
        }
        if self.index.contains_key(&spec.name) {
            return Err(SkillError::DuplicateName(spec.name));
        }
        if spec.kind == SkillKind::Terminal {
            if let Some(t) = self.terminal() {
                return Err(malformed(format!("terminal skill `{}` already registered", t.name)));
            }
        }
        self.index.insert(spec.name.clone(), self.skills.len());
        self.skills.push(spec);
        Ok(())
    }

    /// Builds a complete registry: nonempty, with a terminal skill.
    pub fn from_specs(specs: impl IntoIterator<Item = SkillSpec>) -> Result<Self, SkillError> {
        let mut reg = Self::new();
        for s in specs {
            reg.register(s)?;
        }
        if reg.is_empty() {
            return Err(SkillError::EmptyRegistry);
        }
        if reg.terminal().is_none() {
            return Err(SkillError::MissingTerminal);
        }
        Ok(reg)
    }

    pub fn get(&self, name: &str) -> Option<&SkillSpec> {
        self.index.get(name).map(|&i| &self.skills[i])
    }

    pub fn skills(&self) -> &[SkillSpec] {
        &self.skills
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn terminal(&self) -> Option<&SkillSpec> {
        self.skills.iter().find(|s| s.kind == SkillKind::Terminal)
    }

    pub fn kind_of(&self, name: &str) -> Option<SkillKind> {
        self.get(name).map(|s| s.kind)
    }

    /// Prompt-ready listing of every skill in registration order.
    pub fn render_catalog(&self) -> Result<String, SkillError> {
        if self.skills.is_empty() {
            return Err(SkillError::EmptyRegistry);
        }
        if self.terminal().is_none() {
            return Err(SkillError::MissingTerminal);
        }
        let mut out = String::from("Available skills (emit exactly one call per turn):\n");
        for (i, s) in self.skills.iter().enumerate() {
            let params: Vec<String> = s
                .params
                .iter()
                .map(|p| {
                    format!(
                        "{}: {}, {}",
                        p.name,
                        p.value_kind,
                        if p.required { "required" } else { "optional" }
                    )
                })
                .collect();
            out.push_str(&format!(
                "{}. {} [{}] ({})\n",
                i + 1,
                s.name,
                s.kind,
                params.join("; ")
            ));
            if !s.description.is_empty() {
                out.push_str("   ");
                out.push_str(&s.description);
                out.push('\n');
            }
        }
        Ok(out)
    }
}

/// Checks a call's arguments against the registered parameter contract.
/// Never fails; every problem ends up in the report.
pub fn validate_call_schema(call: &FunctionCall, registry: &SkillRegistry) -> ValidationReport {
    let Some(spec) = registry.get(&call.skill) else {
        return ValidationReport::from_violations(vec![Violation {
            param: call.skill.clone(),
            code: ViolationCode::UnknownSkill,
            detail: format!("no skill named `{}` is registered", call.skill),
        }]);
    };
    let mut violations = Vec::new();
    for p in &spec.params {
        match call.args.get(&p.name) {
            None if p.required => violations.push(Violation {
                param: p.name.clone(),
                code: ViolationCode::MissingRequired,
                detail: format!("`{}` requires a {} argument `{}`", spec.name, p.value_kind, p.name),
            }),
            None => {}
            Some(v) if v.kind() != p.value_kind => violations.push(Violation {
                param: p.name.clone(),
                code: ViolationCode::WrongKind,
                detail: format!("expected {}, got {}", p.value_kind, v.kind()),
            }),
            Some(_) => {}
        }
    }
    for name in call.args.keys() {
        if spec.param(name).is_none() {
            violations.push(Violation {
                param: name.clone(),
                code: ViolationCode::UnknownParam,
                detail: format!("`{}` has no parameter `{}`", spec.name, name),
            });
        }
    }
    ValidationReport::from_violations(violations)
}

/// Bbox checks that need a perception context: scene bounds, and (when
/// `strict`) membership in the latest successful perception result.
pub fn validate_bbox_params(
    call: &FunctionCall,
    bounds: (i64, i64),
    last_perception: Option<&[BBox]>,
    strict: bool,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for (name, b) in call.bbox_args() {
        if !b.within(bounds.0, bounds.1) {
            out.push(Violation {
                param: name.to_string(),
                code: ViolationCode::BboxOutOfBounds,
                detail: format!("{b} is outside the {}x{} image", bounds.0, bounds.1),
            });
            continue;
        }
        if strict {
            match last_perception {
                Some(list) if list.contains(&b) => {}
                Some(list) => out.push(Violation {
                    param: name.to_string(),
                    code: ViolationCode::BboxNotPerceived,
                    detail: format!("{b} is not in the latest perception {}", format_bbox_list(list)),
                }),
                None => out.push(Violation {
                    param: name.to_string(),
                    code: ViolationCode::BboxNotPerceived,
                    detail: format!("{b} given but nothing has been perceived yet"),
                }),
            }
        }
    }
    out
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct ExecutionError(pub String);

impl From<&str> for ExecutionError {
    fn from(s: &str) -> Self {
        ExecutionError(s.to_string())
    }
}

impl From<String> for ExecutionError {
    fn from(s: String) -> Self {
        ExecutionError(s)
    }
}

/// Something that can carry out perception and action skills.
pub trait SkillExecutor {
    fn execute(&mut self, spec: &SkillSpec, call: &FunctionCall) -> Result<SkillOutcome, ExecutionError>;
}

/// Dispatches a call to `executor`.
///
/// Executor errors, panics and contract-breaking outcomes all come back as a
/// failed outcome carrying the message; only an unknown skill is an error.
/// The terminal skill always succeeds without reaching the executor.
pub fn invoke(
    call: &FunctionCall,
    registry: &SkillRegistry,
    executor: &mut dyn SkillExecutor,
) -> Result<SkillOutcome, SkillError> {
    let spec = registry
        .get(&call.skill)
        .ok_or_else(|| SkillError::UnknownSkill(call.skill.clone()))?;
    if spec.kind == SkillKind::Terminal {
        return Ok(SkillOutcome::success());
    }
    let res = panic::catch_unwind(AssertUnwindSafe(|| executor.execute(spec, call)));
    let outcome = match res {
        Ok(Ok(outcome)) => outcome,
        Ok(Err(e)) => SkillOutcome::failed(e.0),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "executor panicked".to_string());
            SkillOutcome::failed(msg)
        }
    };
    Ok(match outcome.conforms(spec.kind) {
        Ok(()) => outcome,
        Err(why) => SkillOutcome::failed(format!("malformed outcome from executor: {why}")),
    })
}

/// The built-in skill library used by the simulator and the bundled tasks.
pub fn default_library() -> Vec<SkillSpec> {
    use ValueKind::*;
    vec![
        SkillSpec::new(
            DETECT,
            SkillKind::Perception,
            vec![ParamSpec::required("target", Text)],
            "Detect every visible object labeled `target`; returns their bounding boxes ordered left to right.",
        ),
        SkillSpec::new(
            PICK,
            SkillKind::Action,
            vec![ParamSpec::required("target", Text), ParamSpec::required("bbox", Bbox)],
            "Grasp the object inside `bbox`. The gripper must be empty.",
        ),
        SkillSpec::new(
            PLACE,
            SkillKind::Action,
            vec![ParamSpec::required("target", Text), ParamSpec::required("bbox", Bbox)],
            "Put the held object down centered on `bbox` (the destination `target`).",
        ),
        SkillSpec::new(
            PUSH,
            SkillKind::Action,
            vec![ParamSpec::required("target", Text), ParamSpec::required("bbox", Bbox)],
            "Slide the object inside `bbox` to the right without grasping it.",
        ),
        SkillSpec::new(MOVE_HOME, SkillKind::Action, vec![], "Return the arm to its home pose."),
        SkillSpec::new(
            OPEN_GRIPPER,
            SkillKind::Action,
            vec![],
            "Open the gripper, releasing any held object where it is.",
        ),
        SkillSpec::new(CLOSE_GRIPPER, SkillKind::Action, vec![], "Close the gripper."),
        SkillSpec::new(TASK_DONE, SkillKind::Terminal, vec![], "Declare the task complete."),
    ]
}

pub fn default_registry() -> SkillRegistry {
    SkillRegistry::from_specs(default_library()).expect("default library is well-formed")
}
