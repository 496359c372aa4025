//! Skill-based task planning for a tabletop manipulator: a typed skill
//! library, a deterministic simulated world, a text wire format for model
//! turns, a plan/verify/act loop with compact memory, pluggable completion
//! backends, a training-data pipeline and a benchmark harness.

pub mod backend;
pub mod dataset;
pub mod geometry;
pub mod harness;
pub mod memory;
pub mod planner;
pub mod simenv;
pub mod skills;
pub mod wire;

pub use backend::{Backend, BackendError, BackendRequest, ReferenceBackend, ScriptedBackend};
pub use geometry::{BBox, Qualifier};
pub use harness::{Suite, TaskSpec};
pub use planner::{run_episode, EpisodeResult, PlannerConfig};
pub use skills::{default_registry, SkillRegistry};
