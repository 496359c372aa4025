use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use skillplan_core::dataset::{
    augment, bundled_seeds, export_chat_jsonl, generate_samples, load_seed_tasks, Lexicon,
};
use skillplan_core::harness::{
    episode_seed, jitter_scene, replay_transcript, run_suite, run_task, BackendSpec, Config, Suite, SuiteOptions,
    Transcript,
};

#[derive(Parser)]
#[command(name = "skillplan", version, about = "Skill-based tabletop task planner")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one task and print its steps.
    Run {
        #[arg(long)]
        task: String,
        /// reference | scripted:<path> | http:<base_url>,<model>
        #[arg(long)]
        backend: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// A named profile from the config, `none`, or `detect=P,action=P`.
        #[arg(long, default_value = "none")]
        faults: String,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        suite: Option<PathBuf>,
        /// Write the episode transcript here.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Run a suite and report SR/CR per category and length class.
    Eval {
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Directory for report.json, report.txt and transcripts/.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long, default_value = "none")]
        faults: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Build chat-format training samples from seed tasks.
    GenDataset {
        #[arg(long)]
        seeds: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        factor: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-execute an episode from its transcript and compare.
    Replay { transcript: PathBuf },
}

/// Failures that map to exit code 2.
#[derive(Debug)]
struct ConfigProblem(anyhow::Error);

fn config_err(e: impl Into<anyhow::Error>) -> ConfigProblem {
    ConfigProblem(e.into())
}

enum Outcome {
    Ok,
    Failed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(Ok(Outcome::Ok)) => ExitCode::SUCCESS,
        Ok(Ok(Outcome::Failed)) => ExitCode::from(1),
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(ConfigProblem(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, ConfigProblem> {
    match path {
        Some(p) => Config::load(p).map_err(config_err),
        None => Ok(Config::default()),
    }
}

fn backend_spec(cfg: &Config, flag: Option<&str>) -> Result<BackendSpec, ConfigProblem> {
    match flag {
        Some(s) => s.parse().map_err(config_err),
        None => Ok(cfg.backend.clone()),
    }
}

fn suite_for(cfg: &Config, flag: Option<&Path>) -> Result<Suite, ConfigProblem> {
    match flag {
        Some(p) => Suite::load(p).map_err(config_err),
        None => cfg.suite().map_err(config_err),
    }
}

fn dispatch(cli: Cli) -> Result<Result<Outcome>, ConfigProblem> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Run {
            task,
            backend,
            seed,
            faults,
            max_steps,
            suite,
            transcript,
        } => {
            let suite = suite_for(&cfg, suite.as_deref())?;
            let index = suite
                .tasks
                .iter()
                .position(|t| t.id == task)
                .ok_or_else(|| config_err(anyhow!("no task `{task}` in suite `{}`", suite.name)))?;
            let spec = backend_spec(&cfg, backend.as_deref())?;
            let mut profile = cfg.fault_profile(&faults).map_err(config_err)?;
            let registry = cfg.registry().map_err(config_err)?;
            let mut planner = cfg.planner.clone();
            if let Some(n) = max_steps {
                planner.max_steps = n;
            }
            planner.validate().map_err(|e| config_err(anyhow!(e)))?;
            // same world as repeat 0 of `eval --seed <seed>`
            let ep_seed = episode_seed(seed, index, 0);
            let mut t = suite.tasks[index].clone();
            t.scene = jitter_scene(&t.scene, ep_seed);
            profile.seed = ep_seed;
            let mut b = spec.build(&t).map_err(|e| config_err(anyhow!(e)))?;
            Ok(run_one(&t, &registry, b.as_mut(), profile, &planner, transcript.as_deref()))
        }
        Command::Eval {
            suite,
            repeats,
            out,
            backend,
            faults,
            seed,
            workers,
            max_steps,
        } => {
            let suite = suite_for(&cfg, suite.as_deref())?;
            let spec = backend_spec(&cfg, backend.as_deref())?;
            let registry = cfg.registry().map_err(config_err)?;
            let mut planner = cfg.planner.clone();
            if let Some(n) = max_steps {
                planner.max_steps = n;
            }
            let options = SuiteOptions {
                repeats: repeats.unwrap_or(cfg.run.repeats),
                seed: seed.unwrap_or(cfg.run.seed),
                faults: cfg.fault_profile(&faults).map_err(config_err)?,
                config: planner,
                workers: workers.unwrap_or(cfg.run.workers),
                ..SuiteOptions::default()
            };
            let factory = |t: &skillplan_core::TaskSpec| spec.build(t);
            let run = match run_suite(&suite, &registry, &factory, &options) {
                Ok(r) => r,
                Err(e) => return Err(config_err(e)),
            };
            Ok(write_eval(&run, out.as_deref()))
        }
        Command::GenDataset {
            seeds,
            factor,
            seed,
            out,
        } => {
            let seed_tasks = match seeds.or_else(|| cfg.seeds.clone()) {
                Some(p) => load_seed_tasks(&p).map_err(config_err)?,
                None => bundled_seeds(),
            };
            let tasks = augment(&seed_tasks, &Lexicon::default(), seed, factor).map_err(config_err)?;
            let registry = cfg.registry().map_err(config_err)?;
            let gen = generate_samples(&tasks, &registry, &cfg.planner);
            for (id, reason) in &gen.aborted {
                eprintln!("aborted {id}: {reason}");
            }
            Ok((|| {
                export_chat_jsonl(&gen.samples, &out)?;
                println!(
                    "{} seeds x {factor} = {} tasks, {} samples ({} aborted) -> {}",
                    seed_tasks.len(),
                    tasks.len(),
                    gen.samples.len(),
                    gen.aborted.len(),
                    out.display()
                );
                Ok(if gen.aborted.is_empty() {
                    Outcome::Ok
                } else {
                    Outcome::Failed
                })
            })())
        }
        Command::Replay { transcript } => {
            let t = Transcript::load(&transcript).map_err(config_err)?;
            let registry = cfg.registry().map_err(config_err)?;
            Ok(match replay_transcript(&t, &registry) {
                Ok(r) => {
                    println!(
                        "replayed {} r{}: {} steps, identical verdicts and outcomes, success={}",
                        t.task.id, t.repeat, r.steps, r.success
                    );
                    Ok(if r.success { Outcome::Ok } else { Outcome::Failed })
                }
                Err(e) => Err(e.into()),
            })
        }
    }
}

fn run_one(
    task: &skillplan_core::TaskSpec,
    registry: &skillplan_core::SkillRegistry,
    backend: &mut dyn skillplan_core::Backend,
    faults: skillplan_core::simenv::FaultProfile,
    planner: &skillplan_core::PlannerConfig,
    transcript: Option<&Path>,
) -> Result<Outcome> {
    let t = run_task(task, registry, backend, faults, planner, 0)?;
    println!("task {}: {}", task.id, task.instruction);
    for s in &t.result.steps {
        let retries = if s.retries_used > 0 {
            format!(" (after {} rejected)", s.retries_used)
        } else {
            String::new()
        };
        let summary = s.outcome.summary();
        let detail = if summary.is_empty() { String::new() } else { format!(": {summary}") };
        println!("  step {}: {} -> {}{detail}{retries}", s.index, s.turn.call, s.outcome.status);
    }
    for p in &t.result.pending {
        println!("  rejected: {}", p.reason);
    }
    if let Some(e) = &t.result.error {
        println!("  error: {e}");
    }
    println!(
        "success={} termination={:?} steps={} backend_calls={}",
        t.result.success,
        t.result.termination,
        t.result.steps.len(),
        t.result.backend_calls()
    );
    if let Some(path) = transcript {
        fs::write(path, t.to_json()).with_context(|| format!("writing {}", path.display()))?;
        info!("transcript written to {}", path.display());
    }
    Ok(if t.result.success {
        Outcome::Ok
    } else {
        Outcome::Failed
    })
}

fn write_eval(run: &skillplan_core::harness::SuiteRun, out: Option<&Path>) -> Result<Outcome> {
    let table = run.report.to_table();
    print!("{table}");
    if let Some(dir) = out {
        let tdir = dir.join("transcripts");
        fs::create_dir_all(&tdir).with_context(|| format!("creating {}", tdir.display()))?;
        fs::write(dir.join("report.json"), run.report.to_json())?;
        fs::write(dir.join("report.txt"), &table)?;
        for e in &run.episodes {
            let path = tdir.join(e.transcript.file_name());
            fs::write(&path, e.transcript.to_json()).with_context(|| format!("writing {}", path.display()))?;
        }
        info!("report and {} transcripts written to {}", run.episodes.len(), dir.display());
    }
    Ok(if run.report.overall().sr == 100.0 {
        Outcome::Ok
    } else {
        Outcome::Failed
    })
}
