use skillplan_core::backend::{Backend, BackendError, BackendRequest, GoalProgram, GoalStep, ReferenceBackend, ScriptedBackend};
use skillplan_core::geometry::{BBox, Qualifier};
use skillplan_core::harness::{Category, TaskSpec};
use skillplan_core::memory::{HistoryStore, Memory};
use skillplan_core::planner::{run_episode, PlannerConfig, Termination, VerificationToggles};
use skillplan_core::simenv::{FaultProfile, Scene, SimEnv};
use skillplan_core::skills::default_registry;

fn block_task() -> TaskSpec {
    let goal = GoalProgram::new(vec![GoalStep::pick("block", Qualifier::None)]);
    TaskSpec {
        id: "pick-block".into(),
        instruction: "pick up the block".into(),
        expected_chain: goal.expected_chain(),
        goal_program: goal,
        scene: Scene::new(640, 480)
            .with_object("b1", "block", BBox::new(100, 100, 150, 140), 380.0)
            .with_object("x1", "box", BBox::new(300, 300, 420, 400), 420.0),
        category: Category::SimpleMapping,
    }
}

fn run(task: &TaskSpec, backend: &mut dyn Backend, config: &PlannerConfig) -> skillplan_core::EpisodeResult {
    let mut env = SimEnv::new(task.scene.clone(), FaultProfile::none()).unwrap();
    run_episode(task, &mut env, &default_registry(), backend, &mut Memory::new(), config)
}

#[test]
fn two_step_task_with_reference() {
    let task = block_task();
    let mut backend = ReferenceBackend::new(task.goal_program.clone());
    let r = run(&task, &mut backend, &PlannerConfig::default());
    assert!(r.success);
    assert_eq!(r.termination, Termination::TerminalSkill);
    let skills: Vec<&str> = r.steps.iter().map(|s| s.skill()).collect();
    assert_eq!(skills, ["2dDetect", "pick", "taskDone"]);
    assert_eq!(r.steps[1].turn.call.bbox("bbox"), Some(BBox::new(100, 100, 150, 140)));
}

#[test]
fn unparseable_output_exhausts_retries() {
    let task = block_task();
    let mut backend = ScriptedBackend::new(vec!["no idea".into(); 10]);
    let config = PlannerConfig {
        max_retries_per_step: 2,
        ..PlannerConfig::default()
    };
    let r = run(&task, &mut backend, &config);
    assert!(!r.success);
    assert_eq!(r.termination, Termination::RetryBudget);
    assert_eq!(r.backend_calls(), 3);
    assert!(r.steps.is_empty());
    assert_eq!(r.pending.len(), 3);
}

#[test]
fn step_budget() {
    let task = block_task();
    let mut backend = ReferenceBackend::new(task.goal_program.clone());
    let config = PlannerConfig {
        max_steps: 1,
        ..PlannerConfig::default()
    };
    let r = run(&task, &mut backend, &config);
    assert_eq!(r.termination, Termination::StepBudget);
    assert_eq!(r.steps.len(), 1);
}

struct Down;

impl Backend for Down {
    fn id(&self) -> String {
        "down".into()
    }

    fn complete(&mut self, _: &BackendRequest) -> Result<String, BackendError> {
        Err(BackendError::Transport("connection refused".into()))
    }
}

#[test]
fn transport_error_ends_episode() {
    let r = run(&block_task(), &mut Down, &PlannerConfig::default());
    assert_eq!(r.termination, Termination::BackendError);
    assert!(r.error.unwrap().contains("connection refused"));
}

#[test]
fn rejected_turn_is_reprompted_with_reason() {
    let task = block_task();
    let wrong = "<feedback></feedback>\n<goal>grab it</goal>\n<params>none</params>\ncall: pick(target=\"block\", bbox=[100,100,150,140])";
    let mut reference = ReferenceBackend::new(task.goal_program.clone());
    let first = reference
        .complete(&BackendRequest::new("s", "### MEMORY\nno history yet\n"))
        .unwrap();
    let mut backend = ScriptedBackend::new(vec![wrong.into(), first]);
    let config = PlannerConfig {
        max_steps: 1,
        ..PlannerConfig::default()
    };
    let r = run(&task, &mut backend, &config);
    assert_eq!(r.steps.len(), 1);
    assert_eq!(r.steps[0].retries_used, 1);
    assert!(r.steps[0].rejected[0].reason.contains("action before perception"));
    let retry_prompt = &r.exchanges[1].prompt;
    assert!(retry_prompt.contains("### REJECTED"));
    assert!(retry_prompt.contains("action before perception"));
}

#[test]
fn pass_through_without_verification() {
    let task = block_task();
    let turns = [
        "call: pick(target=\"block\", bbox=[0,0,10,10])",
        "call: 2dDetect(target=\"nothing\")",
        "call: moveHome()",
        "call: taskDone()",
    ];
    let script: Vec<String> = turns
        .iter()
        .map(|c| format!("<feedback></feedback><goal>g</goal><params>p</params>\n{c}"))
        .collect();
    let mut backend = ScriptedBackend::new(script);
    let config = PlannerConfig {
        verification: VerificationToggles::none(),
        ..PlannerConfig::default()
    };
    let r = run(&task, &mut backend, &config);
    let calls: Vec<String> = r.executed_calls();
    let want: Vec<String> = turns.iter().map(|c| c.trim_start_matches("call: ").to_string()).collect();
    assert_eq!(calls, want);
    assert!(r.success);
    assert!(!r.steps[0].outcome.is_success());
}

#[test]
fn qualifier_task_picks_largest() {
    let goal = GoalProgram::new(vec![GoalStep::pick("block", Qualifier::Largest)]);
    let task = TaskSpec {
        id: "largest".into(),
        instruction: "pick up the largest block".into(),
        expected_chain: goal.expected_chain(),
        goal_program: goal,
        scene: Scene::new(640, 480)
            .with_object("a", "block", BBox::new(0, 0, 5, 5), 380.0)
            .with_object("b", "block", BBox::new(10, 10, 20, 20), 380.0),
        category: Category::DynamicReasoning,
    };
    let mut backend = ReferenceBackend::new(task.goal_program.clone());
    let r = run(&task, &mut backend, &PlannerConfig::default());
    assert!(r.success);
    assert_eq!(r.steps[1].turn.call.bbox("bbox"), Some(BBox::new(10, 10, 20, 20)));
}

#[test]
fn memory_retains_one_perception_across_episode() {
    let task = block_task();
    let mut env = SimEnv::new(task.scene.clone(), FaultProfile::none()).unwrap();
    let mut memory = Memory::new();
    let mut backend = ReferenceBackend::new(task.goal_program.clone());
    let r = run_episode(&task, &mut env, &default_registry(), &mut backend, &mut memory, &PlannerConfig::default());
    assert!(r.success);
    assert_eq!(memory.entries().len(), 3);
    assert_eq!(memory.full_result_count(), 1);
    assert_eq!(memory.render_context(), memory.render_context());
}
