use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::suite::run_task;
use super::{HarnessError, TaskSpec};
use crate::backend::ScriptedBackend;
use crate::planner::{EpisodeResult, PlannerConfig};
use crate::simenv::FaultProfile;
use crate::skills::SkillRegistry;

/// Everything needed to re-run one episode: the (jittered) task, the seeded
/// fault profile, the planner config and every backend exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub task: TaskSpec,
    pub repeat: usize,
    pub faults: FaultProfile,
    pub backend: String,
    pub config: PlannerConfig,
    pub result: EpisodeResult,
}

impl Transcript {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("transcript serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| HarnessError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    /// File name used when a suite run writes its transcripts.
    pub fn file_name(&self) -> String {
        format!("{}-r{}.json", self.task.id, self.repeat)
    }

    /// Raw backend outputs in the order they were produced.
    pub fn outputs(&self) -> Vec<String> {
        self.result.exchanges.iter().filter_map(|x| x.output.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub steps: usize,
    pub success: bool,
    pub result: EpisodeResult,
}

/// Re-runs a recorded episode with its outputs played back and checks that
/// verdicts, calls and outcomes come out identical.
pub fn replay_transcript(transcript: &Transcript, registry: &SkillRegistry) -> Result<ReplayReport, HarnessError> {
    let mut backend = ScriptedBackend::new(transcript.outputs());
    let replayed = run_task(
        &transcript.task,
        registry,
        &mut backend,
        transcript.faults,
        &transcript.config,
        transcript.repeat,
    )?;
    let (a, b) = (&transcript.result, &replayed.result);
    if a.steps.len() != b.steps.len() {
        return Err(HarnessError::ReplayDiverged(format!(
            "recorded {} steps, replay produced {}",
            a.steps.len(),
            b.steps.len()
        )));
    }
    for (x, y) in a.steps.iter().zip(&b.steps) {
        if x != y {
            return Err(HarnessError::ReplayDiverged(format!(
                "step {} differs: recorded `{}` -> {:?}, replayed `{}` -> {:?}",
                x.index, x.turn.call, x.outcome.status, y.turn.call, y.outcome.status
            )));
        }
    }
    if a.success != b.success || a.exchanges.len() != b.exchanges.len() {
        return Err(HarnessError::ReplayDiverged("episode outcome differs".into()));
    }
    Ok(ReplayReport {
        steps: b.steps.len(),
        success: b.success,
        result: replayed.result,
    })
}
