//! Benchmark tasks, SR/CR metrics, suite execution, transcripts and the
//! declarative run configuration.

mod config;
mod metrics;
mod suite;
mod transcript;

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::GoalProgram;
use crate::simenv::Scene;

pub use config::{BackendSpec, Config, ConfigError, RunSettings};
pub use metrics::{compute_cr, compute_sr, completed_prefix, percent, CellMetrics, Fingerprint, MetricsReport};
pub use suite::{episode_seed, jitter_scene, run_suite, run_task, BackendFactory, EpisodeRun, SuiteOptions, SuiteRun};
pub use transcript::{replay_transcript, ReplayReport, Transcript};

const BUNDLED_SUITE: &str = include_str!("../../data/suite.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    SimpleMapping,
    DynamicReasoning,
}

impl Category {
    pub const ALL: [Category; 2] = [Category::SimpleMapping, Category::DynamicReasoning];
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::SimpleMapping => "simple_mapping",
            Category::DynamicReasoning => "dynamic_reasoning",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthClass {
    Short,
    Medium,
    Long,
}

impl LengthClass {
    pub const ALL: [LengthClass; 3] = [LengthClass::Short, LengthClass::Medium, LengthClass::Long];
}

impl fmt::Display for LengthClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LengthClass::Short => "short",
            LengthClass::Medium => "medium",
            LengthClass::Long => "long",
        })
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("chain length {0} is outside the evaluation range 2..=8")]
    LengthOutOfRange(usize),
    #[error("no episodes to aggregate")]
    NoEpisodes,
    #[error("task `{id}`: {reason}")]
    InvalidTask { id: String, reason: String },
    #[error("suite is empty")]
    EmptySuite,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("replay diverged: {0}")]
    ReplayDiverged(String),
    #[error("{0}")]
    Config(String),
}

/// Maps an action-chain length onto short (2-4), medium (5-6) or long (7-8).
pub fn categorize(chain_length: usize) -> Result<LengthClass, HarnessError> {
    match chain_length {
        2..=4 => Ok(LengthClass::Short),
        5..=6 => Ok(LengthClass::Medium),
        7..=8 => Ok(LengthClass::Long),
        n => Err(HarnessError::LengthOutOfRange(n)),
    }
}

/// One benchmark task: instruction for model backends, goal program for the
/// reference planner, and the ground-truth skill chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub instruction: String,
    pub goal_program: GoalProgram,
    pub scene: Scene,
    pub expected_chain: Vec<String>,
    pub category: Category,
}

impl TaskSpec {
    pub fn length_class(&self) -> Result<LengthClass, HarnessError> {
        categorize(self.expected_chain.len())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |reason: String| HarnessError::InvalidTask {
            id: self.id.clone(),
            reason,
        };
        if self.id.trim().is_empty() {
            return Err(bad("empty id".into()));
        }
        if self.instruction.trim().is_empty() {
            return Err(bad("empty instruction".into()));
        }
        if self.expected_chain.is_empty() {
            return Err(bad("expected_chain is empty".into()));
        }
        self.goal_program.validate().map_err(bad)?;
        let derived = self.goal_program.expected_chain();
        if derived != self.expected_chain {
            return Err(bad(format!(
                "expected_chain {:?} does not match the goal program {:?}",
                self.expected_chain, derived
            )));
        }
        self.scene.validate().map_err(|e| bad(e.to_string()))
    }
}

/// A named list of tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub name: String,
    pub tasks: Vec<TaskSpec>,
}

impl Suite {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, HarnessError> {
        let suite: Suite = serde_json::from_str(text).map_err(|source| HarnessError::Json {
            path: origin.to_string(),
            source,
        })?;
        suite.validate()?;
        Ok(suite)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// The 30-task evaluation suite shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_SUITE, "bundled suite").expect("bundled suite is valid")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.tasks.is_empty() {
            return Err(HarnessError::EmptySuite);
        }
        let mut ids = std::collections::HashSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !ids.insert(t.id.as_str()) {
                return Err(HarnessError::InvalidTask {
                    id: t.id.clone(),
                    reason: "duplicate task id".into(),
                });
            }
        }
        Ok(())
    }

    pub fn task(&self, id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn longest_chain(&self) -> usize {
        self.tasks.iter().map(|t| t.expected_chain.len()).max().unwrap_or(0)
    }
}
