//! Text-completion backends: a chat-completions HTTP client, scripted
//! playback, and a rule-based reference planner.

mod http;
mod reference;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig};
pub use reference::{reference_next_turn, GoalProgram, GoalStep, Destination, ReferenceBackend, Verb};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub system: String,
    pub prompt: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub stop_sequences: Vec<String>,
}

impl BackendRequest {
    pub fn new(system: &str, prompt: &str) -> Self {
        Self {
            system: system.to_string(),
            prompt: prompt.to_string(),
            max_output_tokens: 512,
            temperature: 0.0,
            stop_sequences: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("server answered {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("script exhausted after {0} turns")]
    ScriptExhausted(usize),
    #[error("reference planner cannot continue: {0}")]
    Unresolvable(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// The planner's completion boundary.
pub trait Backend: Send {
    /// Short identifier recorded in report fingerprints.
    fn id(&self) -> String;

    fn complete(&mut self, request: &BackendRequest) -> Result<String, BackendError>;
}

fn check_request(request: &BackendRequest) -> Result<(), BackendError> {
    if request.prompt.trim().is_empty() {
        return Err(BackendError::InvalidRequest("prompt is empty".into()));
    }
    Ok(())
}

/// Plays back a fixed list of model outputs, one per call.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    turns: Vec<String>,
    next: usize,
}

impl ScriptedBackend {
    pub fn new(turns: Vec<String>) -> Self {
        Self { turns, next: 0 }
    }

    /// Reads a transcript file: one JSON string per line, blank lines ignored.
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))?;
        Self::parse_script(&text)
    }

    pub fn parse_script(text: &str) -> Result<Self, BackendError> {
        let mut turns = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let turn: String = serde_json::from_str(line)
                .map_err(|e| BackendError::InvalidRequest(format!("script line {}: {e}", i + 1)))?;
            turns.push(turn);
        }
        Ok(Self::new(turns))
    }

    /// Inverse of [`ScriptedBackend::parse_script`].
    pub fn render_script(turns: &[String]) -> String {
        let mut out = String::new();
        for t in turns {
            out.push_str(&serde_json::to_string(t).expect("strings serialize"));
            out.push('\n');
        }
        out
    }

    pub fn remaining(&self) -> usize {
        self.turns.len() - self.next
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> String {
        "scripted".to_string()
    }

    fn complete(&mut self, request: &BackendRequest) -> Result<String, BackendError> {
        check_request(request)?;
        let turn = self
            .turns
            .get(self.next)
            .cloned()
            .ok_or(BackendError::ScriptExhausted(self.turns.len()))?;
        self.next += 1;
        Ok(turn)
    }
}
