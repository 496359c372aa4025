use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Suite, TaskSpec};
use crate::backend::{Backend, HttpBackend, HttpConfig, ReferenceBackend, ScriptedBackend};
use crate::planner::PlannerConfig;
use crate::simenv::FaultProfile;
use crate::skills::{default_library, SkillRegistry, SkillSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Which backend answers the planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Rule-based planner driven by each task's goal program.
    Reference,
    /// Plays back a script file (one JSON string per line).
    Scripted { script: PathBuf },
    Http(HttpConfig),
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Reference
    }
}

impl FromStr for BackendSpec {
    type Err = ConfigError;

    /// `reference`, `scripted:<path>` or `http:<base_url>,<model>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "reference" {
            return Ok(BackendSpec::Reference);
        }
        if let Some(path) = s.strip_prefix("scripted:") {
            return Ok(BackendSpec::Scripted { script: path.into() });
        }
        if let Some(rest) = s.strip_prefix("http:") {
            if let Some((url, model)) = rest.rsplit_once(',') {
                return Ok(BackendSpec::Http(HttpConfig::new(url, model)));
            }
        }
        Err(ConfigError::Invalid(format!(
            "unknown backend `{s}` (expected reference, scripted:<path> or http:<url>,<model>)"
        )))
    }
}

impl BackendSpec {
    pub fn build(&self, task: &TaskSpec) -> Result<Box<dyn Backend>, String> {
        Ok(match self {
            BackendSpec::Reference => Box::new(ReferenceBackend::new(task.goal_program.clone())),
            BackendSpec::Scripted { script } => Box::new(ScriptedBackend::from_file(script).map_err(|e| e.to_string())?),
            BackendSpec::Http(cfg) => Box::new(HttpBackend::new(cfg.clone())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    pub seed: u64,
    pub repeats: usize,
    pub workers: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            repeats: 3,
            workers: 1,
        }
    }
}

/// Declarative run configuration, read from TOML.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Task suite file; the bundled suite when absent.
    pub suite: Option<PathBuf>,
    /// Seed-task file; the bundled seeds when absent.
    pub seeds: Option<PathBuf>,
    /// Skill library; the default eight skills when empty.
    pub skills: Vec<SkillSpec>,
    /// Inline tasks, used instead of any suite file when present.
    pub tasks: Vec<TaskSpec>,
    pub planner: PlannerConfig,
    pub backend: BackendSpec,
    pub faults: BTreeMap<String, FaultProfile>,
    pub run: RunSettings,
}

impl Config {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg: Config = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_string(),
            source,
        })?;
        cfg.rebase(origin);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Relative paths are taken relative to the config file.
    fn rebase(&mut self, origin: &str) {
        let Some(dir) = Path::new(origin).parent() else { return };
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(p) = self.suite.as_mut() {
            fix(p);
        }
        if let Some(p) = self.seeds.as_mut() {
            fix(p);
        }
        if let BackendSpec::Scripted { script } = &mut self.backend {
            fix(script);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.planner.validate().map_err(ConfigError::Invalid)?;
        for (name, p) in &self.faults {
            p.validate().map_err(|e| ConfigError::Invalid(format!("fault profile `{name}`: {e}")))?;
        }
        self.registry()?;
        if self.run.repeats == 0 {
            return Err(ConfigError::Invalid("run.repeats must be at least 1".into()));
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<SkillRegistry, ConfigError> {
        let specs = if self.skills.is_empty() {
            default_library()
        } else {
            self.skills.clone()
        };
        SkillRegistry::from_specs(specs).map_err(|e| ConfigError::Invalid(format!("skills: {e}")))
    }

    /// Inline tasks, else the suite file, else the bundled suite.
    pub fn suite(&self) -> Result<Suite, ConfigError> {
        if !self.tasks.is_empty() {
            let suite = Suite {
                name: "config".into(),
                tasks: self.tasks.clone(),
            };
            suite.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            return Ok(suite);
        }
        match &self.suite {
            Some(p) => Suite::load(p).map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(Suite::bundled()),
        }
    }

    /// A named profile, `none`, or an inline `detect=P,action=P` spec.
    pub fn fault_profile(&self, spec: &str) -> Result<FaultProfile, ConfigError> {
        if let Some(p) = self.faults.get(spec) {
            return Ok(*p);
        }
        if spec == "none" {
            return Ok(FaultProfile::none());
        }
        let mut p = FaultProfile::none();
        for part in spec.split(',') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| ConfigError::Invalid(format!("unknown fault profile `{spec}`")))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("bad probability `{value}`")))?;
            match key.trim() {
                "detect" => p.p_detect_empty = v,
                "action" => p.p_action_fail = v,
                other => return Err(ConfigError::Invalid(format!("unknown fault key `{other}`"))),
            }
        }
        p.validate().map_err(ConfigError::Invalid)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = Config::from_toml("", "x.toml").unwrap();
        assert_eq!(cfg.planner, PlannerConfig::default());
        assert_eq!(cfg.backend, BackendSpec::Reference);
        assert_eq!(cfg.registry().unwrap().skills().len(), 8);
        assert_eq!(cfg.suite().unwrap().tasks.len(), 30);
    }

    #[test]
    fn full_config_parses() {
        let text = r#"
suite = "tasks/suite.json"

[planner]
max_steps = 20
max_retries_per_step = 3

[planner.verification]
feedback = false

[backend]
kind = "http"
base_url = "http://localhost:8000/v1"
model = "planner-1.5b"
api_key_env = "PLANNER_KEY"

[faults.flaky]
p_detect_empty = 0.5
p_action_fail = 0.1

[run]
seed = 7
repeats = 3
workers = 4
"#;
        let cfg = Config::from_toml(text, "/etc/sp/run.toml").unwrap();
        assert_eq!(cfg.suite.as_deref(), Some(Path::new("/etc/sp/tasks/suite.json")));
        assert_eq!(cfg.planner.max_steps, 20);
        assert!(!cfg.planner.verification.feedback);
        assert!(cfg.planner.verification.params);
        assert!(matches!(&cfg.backend, BackendSpec::Http(h) if h.model == "planner-1.5b" && h.max_retries == 3));
        assert_eq!(cfg.fault_profile("flaky").unwrap().p_detect_empty, 0.5);
        assert_eq!(cfg.run.workers, 4);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(Config::from_toml("[planner]\nmax_steps = 0", "x").is_err());
        assert!(Config::from_toml("[faults.bad]\np_detect_empty = 2.0", "x").is_err());
        assert!(Config::from_toml("nonsense = 1", "x").is_err());
        assert!(Config::from_toml("[[skills]]\nname = \"a\"\nkind = \"action\"\ndescription = \"x\"", "x").is_err());
    }

    #[test]
    fn fault_specs() {
        let cfg = Config::default();
        let p = cfg.fault_profile("detect=0.5,action=0.25").unwrap();
        assert_eq!((p.p_detect_empty, p.p_action_fail), (0.5, 0.25));
        assert_eq!(cfg.fault_profile("none").unwrap(), FaultProfile::none());
        assert!(cfg.fault_profile("detect=1.5").is_err());
        assert!(cfg.fault_profile("mystery").is_err());
    }

    #[test]
    fn backend_specs() {
        assert_eq!("reference".parse::<BackendSpec>().unwrap(), BackendSpec::Reference);
        assert!(matches!("scripted:a.txt".parse::<BackendSpec>().unwrap(), BackendSpec::Scripted { .. }));
        assert!(matches!(
            "http:http://h:1/v1,m".parse::<BackendSpec>().unwrap(),
            BackendSpec::Http(c) if c.base_url == "http://h:1/v1" && c.model == "m"
        ));
        assert!("gpt".parse::<BackendSpec>().is_err());
    }
}
