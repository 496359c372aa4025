//! Text format for one planner decision and the prompt layout around it.
//!
//! A turn is three tagged reasoning sections followed by exactly one call:
//!
//! ```text
//! turn     = ws "<feedback>" text "</feedback>" ws
//!               "<goal>" text "</goal>" ws
//!               "<params>" text "</params>" ws
//!            "call:" ws call ws EOF
//! call     = name ws "(" ws [ arg { ws "," ws arg } ] ws ")"
//! arg      = ident ws "=" ws value
//! value    = string | number | bbox | bbox_list
//! string   = '"' { char | "\\" ( '"' | "\\" | "n" | "r" | "t" ) } '"'
//! number   = [ "-" ] digit { digit } [ "." digit { digit } ]
//! bbox     = "[" ws int ws "," ws int ws "," ws int ws "," ws int ws "]"
//! bbox_list= "[" ws [ bbox { ws "," ws bbox } ] ws "]"
//! ```
//!
//! Section bodies are kept verbatim. `<goal>` and `<params>` must contain
//! something other than whitespace; `<feedback>` may be empty.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::skills::{is_param_name, is_skill_name, FunctionCall, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub feedback_section: String,
    pub goal_section: String,
    pub param_section: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTurn {
    pub trace: ReasoningTrace,
    pub call: FunctionCall,
}

impl ModelTurn {
    pub fn new(feedback: &str, goal: &str, params: &str, call: FunctionCall) -> Self {
        Self {
            trace: ReasoningTrace {
                feedback_section: feedback.to_string(),
                goal_section: goal.to_string(),
                param_section: params.to_string(),
            },
            call,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorCode {
    NoCallFound,
    MultipleCalls,
    MalformedArgs,
    MissingSection,
    TrailingGarbage,
}

impl fmt::Display for ParseErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParseErrorCode::NoCallFound => "no_call_found",
            ParseErrorCode::MultipleCalls => "multiple_calls",
            ParseErrorCode::MalformedArgs => "malformed_args",
            ParseErrorCode::MissingSection => "missing_section",
            ParseErrorCode::TrailingGarbage => "trailing_garbage",
        })
    }
}

/// Parse failure. `span` is a half-open range of character offsets.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{code} at {}..{}: {detail}", span.0, span.1)]
pub struct ParseError {
    pub code: ParseErrorCode,
    pub span: (usize, usize),
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("section `{0}` must not be empty")]
    EmptySection(&'static str),
    #[error("section `{0}` contains its own closing tag")]
    UnclosableSection(&'static str),
    #[error("invalid call: {0}")]
    InvalidCall(String),
}

const CALL_MARKER: &str = "call:";

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn take_while(&mut self, pred: impl Fn(char) -> bool) -> &'a str {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if !pred(c) {
                break;
            }
            self.pos += c.len_utf8();
        }
        &self.src[start..self.pos]
    }

    fn error(&self, code: ParseErrorCode, start: usize, end: usize, detail: impl Into<String>) -> ParseError {
        let to_chars = |b: usize| {
            let mut b = b.min(self.src.len());
            while !self.src.is_char_boundary(b) {
                b -= 1;
            }
            self.src[..b].chars().count()
        };
        ParseError {
            code,
            span: (to_chars(start), to_chars(end.max(start))),
            detail: detail.into(),
        }
    }

    fn malformed(&self, detail: impl Into<String>) -> ParseError {
        let end = (self.pos + self.peek().map_or(0, char::len_utf8)).min(self.src.len());
        self.error(ParseErrorCode::MalformedArgs, self.pos, end, detail)
    }

    fn section(&mut self, tag: &str) -> Result<&'a str, ParseError> {
        let open = format!("<{tag}>");
        let close = format!("</{tag}>");
        let start = self.pos;
        if !self.eat(&open) {
            let end = self.src.len();
            return Err(self.error(
                ParseErrorCode::MissingSection,
                start,
                end,
                format!("expected {open}"),
            ));
        }
        let body_start = self.pos;
        match self.rest().find(&close) {
            Some(off) => {
                let body = &self.src[body_start..body_start + off];
                self.pos = body_start + off + close.len();
                Ok(body)
            }
            None => Err(self.error(
                ParseErrorCode::MissingSection,
                start,
                self.src.len(),
                format!("{open} is never closed by {close}"),
            )),
        }
    }

    fn call(&mut self) -> Result<FunctionCall, ParseError> {
        let name_start = self.pos;
        let name = self.take_while(|c| c.is_ascii_alphanumeric() || c == '_');
        if !is_skill_name(name) {
            return Err(self.error(
                ParseErrorCode::MalformedArgs,
                name_start,
                self.pos + self.peek().map_or(0, char::len_utf8),
                "expected a skill name",
            ));
        }
        self.skip_ws();
        if !self.eat("(") {
            return Err(self.malformed("expected `(` after skill name"));
        }
        let mut args = IndexMap::new();
        self.skip_ws();
        if self.eat(")") {
            return Ok(FunctionCall {
                skill: name.to_string(),
                args,
            });
        }
        loop {
            self.skip_ws();
            let arg_start = self.pos;
            let key = self.take_while(|c| c.is_ascii_alphanumeric() || c == '_');
            if !is_param_name(key) {
                return Err(self.malformed("expected an argument name"));
            }
            self.skip_ws();
            if !self.eat("=") {
                return Err(self.malformed("expected `=` after argument name"));
            }
            self.skip_ws();
            let value = self.value()?;
            if args.insert(key.to_string(), value).is_some() {
                return Err(self.error(
                    ParseErrorCode::MalformedArgs,
                    arg_start,
                    self.pos,
                    format!("argument `{key}` given twice"),
                ));
            }
            self.skip_ws();
            if self.eat(",") {
                continue;
            }
            if self.eat(")") {
                break;
            }
            return Err(self.malformed("expected `,` or `)`"));
        }
        Ok(FunctionCall {
            skill: name.to_string(),
            args,
        })
    }

    fn value(&mut self) -> Result<Value, ParseError> {
        match self.peek() {
            Some('"') => self.string().map(Value::Text),
            Some('[') => self.list(),
            Some(c) if c == '-' || c.is_ascii_digit() => self.number().map(Value::Number),
            _ => Err(self.malformed("expected a string, number or bbox")),
        }
    }

    fn string(&mut self) -> Result<String, ParseError> {
        let start = self.pos;
        self.bump();
        let mut out = String::new();
        loop {
            match self.bump() {
                None => {
                    let end = self.src.len();
                    return Err(self.error(ParseErrorCode::MalformedArgs, start, end, "unterminated string"));
                }
                Some('"') => return Ok(out),
                Some('\\') => match self.bump() {
                    Some('"') => out.push('"'),
                    Some('\\') => out.push('\\'),
                    Some('n') => out.push('\n'),
                    Some('r') => out.push('\r'),
                    Some('t') => out.push('\t'),
                    _ => return Err(self.malformed("unknown escape sequence")),
                },
                Some(c) => out.push(c),
            }
        }
    }

    fn digits(&mut self) -> &'a str {
        self.take_while(|c| c.is_ascii_digit())
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        let start = self.pos;
        self.eat("-");
        if self.digits().is_empty() {
            return Err(self.malformed("expected digits"));
        }
        if self.eat(".") && self.digits().is_empty() {
            return Err(self.malformed("expected digits after `.`"));
        }
        let text = &self.src[start..self.pos];
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.error(ParseErrorCode::MalformedArgs, start, self.pos, "number out of range")),
        }
    }

    fn int(&mut self) -> Result<i64, ParseError> {
        let start = self.pos;
        self.eat("-");
        if self.digits().is_empty() {
            return Err(self.malformed("expected an integer"));
        }
        self.src[start..self.pos]
            .parse::<i64>()
            .map_err(|_| self.error(ParseErrorCode::MalformedArgs, start, self.pos, "integer out of range"))
    }

    fn bbox(&mut self) -> Result<BBox, ParseError> {
        if !self.eat("[") {
            return Err(self.malformed("expected `[`"));
        }
        let mut v = [0i64; 4];
        for (i, slot) in v.iter_mut().enumerate() {
            self.skip_ws();
            *slot = self.int()?;
            self.skip_ws();
            let sep = if i == 3 { "]" } else { "," };
            if !self.eat(sep) {
                return Err(self.malformed(format!("bbox needs four integers; expected `{sep}`")));
            }
        }
        Ok(BBox::from(v))
    }

    fn list(&mut self) -> Result<Value, ParseError> {
        let save = self.pos;
        self.eat("[");
        self.skip_ws();
        if self.eat("]") {
            return Ok(Value::BBoxList(Vec::new()));
        }
        if self.peek() != Some('[') {
            self.pos = save;
            return self.bbox().map(Value::BBox);
        }
        let mut list = Vec::new();
        loop {
            self.skip_ws();
            list.push(self.bbox()?);
            self.skip_ws();
            if self.eat(",") {
                continue;
            }
            if self.eat("]") {
                return Ok(Value::BBoxList(list));
            }
            return Err(self.malformed("expected `,` or `]` in bbox list"));
        }
    }
}

/// Parses one model output into a turn.
pub fn parse_model_turn(text: &str) -> Result<ModelTurn, ParseError> {
    let mut c = Cursor::new(text);
    c.skip_ws();
    let feedback = c.section("feedback")?;
    c.skip_ws();
    let goal_start = c.pos;
    let goal = c.section("goal")?;
    if goal.trim().is_empty() {
        return Err(c.error(ParseErrorCode::MissingSection, goal_start, c.pos, "<goal> is empty"));
    }
    c.skip_ws();
    let params_start = c.pos;
    let params = c.section("params")?;
    if params.trim().is_empty() {
        return Err(c.error(ParseErrorCode::MissingSection, params_start, c.pos, "<params> is empty"));
    }
    c.skip_ws();
    let rest = c.rest();
    if !rest.starts_with(CALL_MARKER) {
        let end = text.len();
        return Err(match rest.find(CALL_MARKER) {
            Some(off) => c.error(
                ParseErrorCode::TrailingGarbage,
                c.pos,
                c.pos + off,
                "unexpected text before `call:`",
            ),
            None => c.error(ParseErrorCode::NoCallFound, c.pos, end, "no `call:` line after <params>"),
        });
    }
    c.eat(CALL_MARKER);
    c.skip_ws();
    let call = c.call()?;
    c.skip_ws();
    let rest = c.rest();
    if !rest.is_empty() {
        let end = text.len();
        let code = if rest.contains(CALL_MARKER) {
            ParseErrorCode::MultipleCalls
        } else {
            ParseErrorCode::TrailingGarbage
        };
        let detail = match code {
            ParseErrorCode::MultipleCalls => "more than one `call:` in a turn",
            _ => "unexpected text after the call",
        };
        return Err(c.error(code, c.pos, end, detail));
    }
    Ok(ModelTurn {
        trace: ReasoningTrace {
            feedback_section: feedback.to_string(),
            goal_section: goal.to_string(),
            param_section: params.to_string(),
        },
        call,
    })
}

/// Parses arbitrary bytes; invalid UTF-8 is replaced before parsing.
pub fn parse_model_turn_bytes(bytes: &[u8]) -> Result<ModelTurn, ParseError> {
    parse_model_turn(&String::from_utf8_lossy(bytes))
}

/// Parses a call at the start of `text`, returning it with the number of
/// bytes consumed.
pub fn parse_call_prefix(text: &str) -> Result<(FunctionCall, usize), ParseError> {
    let mut c = Cursor::new(text);
    c.skip_ws();
    let call = c.call()?;
    Ok((call, c.pos))
}

/// Parses a single argument value such as `[[0,0,5,5],[1,1,9,9]]`.
pub fn parse_value(text: &str) -> Result<Value, ParseError> {
    let mut c = Cursor::new(text);
    c.skip_ws();
    let v = c.value()?;
    c.skip_ws();
    if !c.rest().is_empty() {
        let (start, end) = (c.pos, text.len());
        return Err(c.error(ParseErrorCode::TrailingGarbage, start, end, "unexpected text after the value"));
    }
    Ok(v)
}

/// Parses a bare call such as `pick(target="block", bbox=[1,2,3,4])`.
pub fn parse_call(text: &str) -> Result<FunctionCall, ParseError> {
    let mut c = Cursor::new(text);
    c.skip_ws();
    let call = c.call()?;
    c.skip_ws();
    if !c.rest().is_empty() {
        let (start, end) = (c.pos, text.len());
        return Err(c.error(ParseErrorCode::TrailingGarbage, start, end, "unexpected text after the call"));
    }
    Ok(call)
}

fn escape_into(out: &mut String, s: &str) {
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
}

pub fn render_value(v: &Value) -> String {
    let mut out = String::new();
    match v {
        Value::Text(s) => escape_into(&mut out, s),
        Value::Number(n) => out.push_str(&n.to_string()),
        Value::BBox(b) => out.push_str(&b.to_string()),
        Value::BBoxList(l) => out.push_str(&crate::geometry::format_bbox_list(l)),
    }
    out
}

/// Canonical text of a call. Does not check validity; see [`check_call`].
pub fn render_call(call: &FunctionCall) -> String {
    let args: Vec<String> = call
        .args
        .iter()
        .map(|(k, v)| format!("{k}={}", render_value(v)))
        .collect();
    format!("{}({})", call.skill, args.join(", "))
}

/// Verifies that a call can be rendered and parsed back unchanged.
pub fn check_call(call: &FunctionCall) -> Result<(), RenderError> {
    if !is_skill_name(&call.skill) {
        return Err(RenderError::InvalidCall(format!("bad skill name `{}`", call.skill)));
    }
    for (k, v) in &call.args {
        if !is_param_name(k) {
            return Err(RenderError::InvalidCall(format!("bad argument name `{k}`")));
        }
        if let Value::Number(n) = v {
            if !n.is_finite() {
                return Err(RenderError::InvalidCall(format!("`{k}` is not finite")));
            }
        }
    }
    Ok(())
}

/// Canonical text of a turn; `parse_model_turn` inverts it exactly.
pub fn render_turn(turn: &ModelTurn) -> Result<String, RenderError> {
    let t = &turn.trace;
    if t.goal_section.trim().is_empty() {
        return Err(RenderError::EmptySection("goal"));
    }
    if t.param_section.trim().is_empty() {
        return Err(RenderError::EmptySection("params"));
    }
    for (tag, body) in [
        ("feedback", &t.feedback_section),
        ("goal", &t.goal_section),
        ("params", &t.param_section),
    ] {
        if body.contains(&format!("</{tag}>")) {
            return Err(RenderError::UnclosableSection(tag));
        }
    }
    check_call(&turn.call)?;
    Ok(format!(
        "<feedback>{}</feedback>\n<goal>{}</goal>\n<params>{}</params>\n{CALL_MARKER} {}",
        t.feedback_section,
        t.goal_section,
        t.param_section,
        render_call(&turn.call)
    ))
}

pub const NO_HISTORY: &str = "no history yet";

pub const SYSTEM_PREAMBLE: &str = "You are a robot task planner. Each reply decides exactly one skill call.\n\
Reason in three tagged sections, in this order, then emit the call on its own line:\n\
<feedback>what the previous step's result means (empty on the first step)</feedback>\n\
<goal>which subgoal comes next and why it serves the task</goal>\n\
<params>how each argument was chosen from the latest perception</params>\n\
call: skillName(arg=value, ...)\n\
Values: text in double quotes, decimal numbers, bbox as [x_min,y_min,x_max,y_max].\n\
Detect objects before acting on them. Call taskDone() once the task is finished.";

pub const SECTION_SKILLS: &str = "### SKILLS";
pub const SECTION_MEMORY: &str = "### MEMORY";
pub const SECTION_TASK: &str = "### TASK";
pub const SECTION_REJECTED: &str = "### REJECTED";

/// A prompt split into its system part and the user-visible context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

impl Prompt {
    pub fn full_text(&self) -> String {
        format!("{}\n\n{}", self.system, self.user)
    }

    /// Copy of the prompt with a rejection notice appended for a re-prompt.
    pub fn with_rejection(&self, reasons: &[String]) -> Prompt {
        let mut user = self.user.clone();
        user.push_str("\n\n");
        user.push_str(SECTION_REJECTED);
        for r in reasons {
            user.push_str("\nyour previous reply was rejected: ");
            user.push_str(r);
        }
        Prompt {
            system: self.system.clone(),
            user,
        }
    }
}

/// Lays out preamble, skill catalog, memory and task in that fixed order.
pub fn assemble_prompt(task_instruction: &str, catalog: &str, memory_context: &str) -> Prompt {
    let memory = if memory_context.trim().is_empty() {
        NO_HISTORY
    } else {
        memory_context.trim_end()
    };
    let user = format!(
        "{SECTION_SKILLS}\n{}\n\n{SECTION_MEMORY}\n{}\n\n{SECTION_TASK}\n{}",
        catalog.trim_end(),
        memory,
        task_instruction.trim()
    );
    Prompt {
        system: SYSTEM_PREAMBLE.to_string(),
        user,
    }
}

/// Body of a `### NAME` section of an assembled prompt, if present.
pub fn prompt_section<'a>(user_prompt: &'a str, header: &str) -> Option<&'a str> {
    let mut offset = 0;
    let mut start = None;
    for line in user_prompt.split_inclusive('\n') {
        let next = offset + line.len();
        match start {
            None if line.trim_end_matches(['\n', '\r']) == header => start = Some(next),
            Some(s) if line.starts_with("### ") => return Some(user_prompt[s..offset].trim_end()),
            _ => {}
        }
        offset = next;
    }
    start.map(|s| user_prompt[s..].trim_end())
}
