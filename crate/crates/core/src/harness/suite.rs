use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::{compute_cr, Fingerprint, MetricsReport};
use super::{HarnessError, Suite, TaskSpec, Transcript};
use crate::backend::Backend;
use crate::memory::Memory;
use crate::planner::{run_episode, EpisodeResult, PlannerConfig};
use crate::simenv::{FaultProfile, Scene, SimEnv};
use crate::skills::SkillRegistry;

/// Builds a fresh backend for one episode.
pub type BackendFactory<'a> = dyn Fn(&TaskSpec) -> Result<Box<dyn Backend>, String> + Sync + 'a;

const JITTER_SHIFT_PX: i64 = 8;
const JITTER_RESIZE_PX: i64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub repeats: usize,
    pub seed: u64,
    pub faults: FaultProfile,
    pub config: PlannerConfig,
    pub workers: usize,
    /// Perturb scene geometry per repeat.
    pub jitter: bool,
    /// Override `config.max_steps` with `2 * chain + 4` per task.
    pub chain_scaled_budget: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            repeats: 1,
            seed: 0,
            faults: FaultProfile::none(),
            config: PlannerConfig::default(),
            workers: 1,
            jitter: true,
            chain_scaled_budget: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRun {
    pub transcript: Transcript,
    pub cr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRun {
    pub report: MetricsReport,
    pub episodes: Vec<EpisodeRun>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one (task, repeat) pair, independent of scheduling.
pub fn episode_seed(seed: u64, task_index: usize, repeat: usize) -> u64 {
    splitmix(splitmix(seed ^ splitmix(task_index as u64)) ^ repeat as u64)
}

/// Shifts every free object by up to 8 px and resizes it by up to 2 px per
/// side, kept inside the image; depths vary by up to 5%.
pub fn jitter_scene(scene: &Scene, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = scene.clone();
    let (w, h) = scene.bounds();
    for obj in out.objects.iter_mut().filter(|o| !o.held) {
        let dx = rng.gen_range(-JITTER_SHIFT_PX..=JITTER_SHIFT_PX);
        let dy = rng.gen_range(-JITTER_SHIFT_PX..=JITTER_SHIFT_PX);
        let dw = rng.gen_range(-JITTER_RESIZE_PX..=JITTER_RESIZE_PX);
        let dh = rng.gen_range(-JITTER_RESIZE_PX..=JITTER_RESIZE_PX);
        let scale: f64 = rng.gen_range(0.95..=1.05);
        let b = &mut obj.bbox;
        let bw = (b.width() + 2 * dw).clamp(2, w);
        let bh = (b.height() + 2 * dh).clamp(2, h);
        let x0 = (b.x_min - dw + dx).clamp(0, w - bw);
        let y0 = (b.y_min - dh + dy).clamp(0, h - bh);
        *b = crate::geometry::BBox::new(x0, y0, x0 + bw, y0 + bh);
        obj.depth_mm = (obj.depth_mm * scale * 10.0).round() / 10.0;
    }
    out
}

/// Runs one task once with its own environment and compact memory.
pub fn run_task(
    task: &TaskSpec,
    registry: &SkillRegistry,
    backend: &mut dyn Backend,
    faults: FaultProfile,
    config: &PlannerConfig,
    repeat: usize,
) -> Result<Transcript, HarnessError> {
    let mut env = SimEnv::new(task.scene.clone(), faults).map_err(|e| HarnessError::InvalidTask {
        id: task.id.clone(),
        reason: e.to_string(),
    })?;
    let mut memory = Memory::new();
    let result = run_episode(task, &mut env, registry, backend, &mut memory, config);
    Ok(Transcript {
        task: task.clone(),
        repeat,
        faults,
        backend: backend.id(),
        config: config.clone(),
        result,
    })
}

/// Runs every task `repeats` times on a bounded worker pool. Results come
/// back in (task, repeat) order whatever the scheduling.
pub fn run_suite(
    suite: &Suite,
    registry: &SkillRegistry,
    factory: &BackendFactory<'_>,
    options: &SuiteOptions,
) -> Result<SuiteRun, HarnessError> {
    suite.validate()?;
    options.faults.validate().map_err(HarnessError::Config)?;
    options.config.validate().map_err(HarnessError::Config)?;
    if options.repeats == 0 {
        return Err(HarnessError::Config("repeats must be at least 1".into()));
    }
    for t in &suite.tasks {
        t.length_class()?;
    }
    let jobs: Vec<(usize, usize)> = (0..suite.tasks.len())
        .flat_map(|t| (0..options.repeats).map(move |r| (t, r)))
        .collect();

    let run_one = |&(ti, r): &(usize, usize)| -> EpisodeRun {
        let base = &suite.tasks[ti];
        let seed = episode_seed(options.seed, ti, r);
        let mut task = base.clone();
        if options.jitter {
            task.scene = jitter_scene(&base.scene, seed);
        }
        let mut config = options.config.clone();
        if options.chain_scaled_budget {
            config.max_steps = 2 * task.expected_chain.len() + 4;
        }
        let faults = options.faults.with_seed(seed);
        let transcript = factory(&task)
            .map_err(HarnessError::Config)
            .and_then(|mut backend| run_task(&task, registry, backend.as_mut(), faults, &config, r))
            .unwrap_or_else(|e| Transcript {
                task: task.clone(),
                repeat: r,
                faults,
                backend: String::new(),
                config: config.clone(),
                result: EpisodeResult::aborted(e.to_string()),
            });
        let cr = compute_cr(&transcript.result, &task);
        EpisodeRun { transcript, cr }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let episodes: Vec<EpisodeRun> = pool.install(|| jobs.par_iter().map(run_one).collect());

    let backend_id = episodes
        .iter()
        .map(|e| e.transcript.backend.clone())
        .find(|b| !b.is_empty())
        .unwrap_or_default();
    let mut rows = Vec::with_capacity(episodes.len());
    for e in &episodes {
        let t = &e.transcript.task;
        rows.push((t.category, t.length_class()?, e.transcript.result.success, e.cr));
    }
    let fingerprint = Fingerprint {
        suite: suite.name.clone(),
        backend: backend_id,
        faults: options.faults,
        seed: options.seed,
        repeats: options.repeats,
        tasks: suite.tasks.len(),
    };
    Ok(SuiteRun {
        report: MetricsReport::aggregate(fingerprint, &rows),
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ReferenceBackend;
    use crate::skills::default_registry;

    fn reference(t: &TaskSpec) -> Result<Box<dyn Backend>, String> {
        Ok(Box::new(ReferenceBackend::new(t.goal_program.clone())))
    }

    #[test]
    fn jitter_stays_in_bounds_and_is_seeded() {
        let suite = Suite::bundled();
        for t in &suite.tasks {
            for s in 0..20 {
                let j = jitter_scene(&t.scene, s);
                j.validate().unwrap();
                assert_eq!(j, jitter_scene(&t.scene, s));
            }
        }
    }

    #[test]
    fn seeds_differ_per_repeat() {
        assert_ne!(episode_seed(1, 0, 0), episode_seed(1, 0, 1));
        assert_ne!(episode_seed(1, 0, 0), episode_seed(1, 1, 0));
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let suite = Suite::bundled();
        let reg = default_registry();
        let mut opts = SuiteOptions {
            repeats: 2,
            seed: 9,
            ..SuiteOptions::default()
        };
        opts.faults.p_detect_empty = 0.2;
        let a = run_suite(&suite, &reg, &reference, &opts).unwrap();
        opts.workers = 4;
        let b = run_suite(&suite, &reg, &reference, &opts).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.episodes, b.episodes);
    }

    #[test]
    fn zero_repeats_rejected() {
        let opts = SuiteOptions {
            repeats: 0,
            ..SuiteOptions::default()
        };
        assert!(run_suite(&Suite::bundled(), &default_registry(), &reference, &opts).is_err());
    }
}
