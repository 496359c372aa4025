//! Per-episode step history and the bounded context rendered from it.
//!
//! Only the most recent successful perception keeps its full bbox list;
//! every other step is one summary line. [`FullHistory`] keeps every payload
//! and exists as the uncompacted baseline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{format_bbox_list, BBox};
use crate::planner::StepRecord;
use crate::skills::{FunctionCall, OutcomeStatus, SkillKind, Value};
use crate::wire::{self, NO_HISTORY};

/// Summary lines are cut to this many characters.
pub const MAX_SUMMARY_CHARS: usize = 160;

const PERCEPTION_PREFIX: &str = "latest perception (step ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub step: usize,
    pub call_text: String,
    pub kind: SkillKind,
    pub status: OutcomeStatus,
    pub result_summary: String,
    pub full_result: Option<Vec<BBox>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("step {got} appended out of order (expected {expected})")]
    OutOfOrder { expected: usize, got: usize },
    #[error("malformed memory context line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

fn sanitize(s: &str) -> String {
    let flat: String = s
        .chars()
        .map(|c| if c.is_control() { ' ' } else { c })
        .collect();
    let flat = flat.trim();
    if flat.chars().count() > MAX_SUMMARY_CHARS {
        let mut cut: String = flat.chars().take(MAX_SUMMARY_CHARS - 3).collect();
        cut.push_str("...");
        cut
    } else {
        flat.to_string()
    }
}

fn entry_from(record: &StepRecord) -> MemoryEntry {
    let full_result = match (record.kind, record.outcome.bbox_list()) {
        (SkillKind::Perception, Some(list)) if record.outcome.is_success() => Some(list.to_vec()),
        _ => None,
    };
    MemoryEntry {
        step: record.index,
        call_text: record.turn.call.to_string(),
        kind: record.kind,
        status: record.outcome.status,
        result_summary: sanitize(&record.outcome.summary()),
        full_result,
    }
}

fn entry_line(e: &MemoryEntry, out: &mut String) {
    let _ = write!(out, "step {}: {} -> {}", e.step, e.call_text, e.status);
    if !e.result_summary.is_empty() {
        let _ = write!(out, ": {}", e.result_summary);
    }
    out.push('\n');
}

fn perception_line(step: usize, list: &[BBox], out: &mut String) {
    let _ = writeln!(out, "{PERCEPTION_PREFIX}{step}): {}", format_bbox_list(list));
}

/// History that feeds the memory section of every prompt.
pub trait HistoryStore {
    fn append(&mut self, record: &StepRecord) -> Result<(), MemoryError>;
    fn entries(&self) -> &[MemoryEntry];
    fn render_context(&self) -> String;

    fn last_entry(&self) -> Option<&MemoryEntry> {
        self.entries().last()
    }

    fn next_step(&self) -> usize {
        self.entries().last().map_or(1, |e| e.step + 1)
    }

    /// Full payload of the latest successful perception, if any.
    fn last_perception(&self) -> Option<(usize, &[BBox])>;
}

fn check_order(entries: &[MemoryEntry], record: &StepRecord) -> Result<(), MemoryError> {
    let expected = entries.last().map_or(1, |e| e.step + 1);
    if record.index != expected {
        return Err(MemoryError::OutOfOrder {
            expected,
            got: record.index,
        });
    }
    Ok(())
}

/// Compacted memory: one line per step plus a single retained perception.
#[derive(Debug, Clone, Default)]
pub struct Memory {
    entries: Vec<MemoryEntry>,
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn full_result_count(&self) -> usize {
        self.entries.iter().filter(|e| e.full_result.is_some()).count()
    }
}

impl HistoryStore for Memory {
    fn append(&mut self, record: &StepRecord) -> Result<(), MemoryError> {
        check_order(&self.entries, record)?;
        let entry = entry_from(record);
        if entry.full_result.is_some() {
            for old in &mut self.entries {
                if let Some(list) = old.full_result.take() {
                    old.result_summary = format!("detected {} objects", list.len());
                }
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    fn render_context(&self) -> String {
        if self.entries.is_empty() {
            return NO_HISTORY.to_string();
        }
        let mut out = String::new();
        for e in &self.entries {
            entry_line(e, &mut out);
        }
        if let Some((step, list)) = self.last_perception() {
            perception_line(step, list, &mut out);
        }
        out.truncate(out.trim_end().len());
        out
    }

    fn last_perception(&self) -> Option<(usize, &[BBox])> {
        self.entries
            .iter()
            .rev()
            .find_map(|e| e.full_result.as_deref().map(|l| (e.step, l)))
    }
}

/// Uncompacted history: every perception payload stays inline.
#[derive(Debug, Clone, Default)]
pub struct FullHistory {
    entries: Vec<MemoryEntry>,
}

impl FullHistory {
    pub fn new() -> Self {
        Self::default()
    }
}

impl HistoryStore for FullHistory {
    fn append(&mut self, record: &StepRecord) -> Result<(), MemoryError> {
        check_order(&self.entries, record)?;
        let mut entry = entry_from(record);
        if let Some(list) = &entry.full_result {
            entry.result_summary = format!("detected {} objects: {}", list.len(), format_bbox_list(list));
        }
        self.entries.push(entry);
        Ok(())
    }

    fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    fn render_context(&self) -> String {
        if self.entries.is_empty() {
            return NO_HISTORY.to_string();
        }
        let mut out = String::new();
        for e in &self.entries {
            entry_line(e, &mut out);
        }
        if let Some((step, list)) = self.last_perception() {
            perception_line(step, list, &mut out);
        }
        out.truncate(out.trim_end().len());
        out
    }

    fn last_perception(&self) -> Option<(usize, &[BBox])> {
        self.entries
            .iter()
            .rev()
            .find_map(|e| e.full_result.as_deref().map(|l| (e.step, l)))
    }
}

/// One step line read back from a rendered context.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedEntry {
    pub step: usize,
    pub call: FunctionCall,
    pub status: OutcomeStatus,
    pub summary: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedMemory {
    pub entries: Vec<ParsedEntry>,
    pub perception: Option<(usize, Vec<BBox>)>,
}

/// Reads a context produced by [`HistoryStore::render_context`].
pub fn parse_context(text: &str) -> Result<ParsedMemory, MemoryError> {
    let mut parsed = ParsedMemory::default();
    let text = text.trim();
    if text.is_empty() || text == NO_HISTORY {
        return Ok(parsed);
    }
    for (i, line) in text.lines().enumerate() {
        let malformed = |reason: &str| MemoryError::Malformed {
            line: i + 1,
            reason: reason.to_string(),
        };
        if let Some(rest) = line.strip_prefix(PERCEPTION_PREFIX) {
            let (step, list) = rest.split_once("): ").ok_or_else(|| malformed("bad perception line"))?;
            let step: usize = step.parse().map_err(|_| malformed("bad perception step"))?;
            let list = match wire::parse_value(list) {
                Ok(Value::BBoxList(l)) => l,
                Ok(Value::BBox(b)) => vec![b],
                _ => return Err(malformed("bad perception payload")),
            };
            parsed.perception = Some((step, list));
            continue;
        }
        let rest = line.strip_prefix("step ").ok_or_else(|| malformed("expected `step`"))?;
        let (step, rest) = rest.split_once(": ").ok_or_else(|| malformed("expected `: `"))?;
        let step: usize = step.parse().map_err(|_| malformed("bad step number"))?;
        let (call, used) = wire::parse_call_prefix(rest).map_err(|e| malformed(&e.to_string()))?;
        let rest = rest[used..].strip_prefix(" -> ").ok_or_else(|| malformed("expected ` -> `"))?;
        let (status, summary) = match rest.split_once(": ") {
            Some((s, summary)) => (s, summary.to_string()),
            None => (rest, String::new()),
        };
        let status = match status {
            "success" => OutcomeStatus::Success,
            "failed" => OutcomeStatus::Failed,
            _ => return Err(malformed("bad status")),
        };
        parsed.entries.push(ParsedEntry {
            step,
            call,
            status,
            summary,
        });
    }
    Ok(parsed)
}
