//! Deterministic tabletop simulator backing the perception and action skills.
//!
//! Detection is exact label matching. Every perception invocation draws one
//! number from the fault RNG and every arm motion draws one, so a seed fixes
//! the whole fault sequence.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::geometry::{BBox, Position3D};
use crate::skills::{
    ExecutionError, FunctionCall, SkillExecutor, SkillKind, SkillOutcome, SkillSpec, CLOSE_GRIPPER, DETECT,
    MOVE_HOME, OPEN_GRIPPER, PICK, PLACE, PUSH,
};

pub const EMPTY_DETECTION: &str = "Detection result is empty.";
pub const GRIPPER_OCCUPIED: &str = "gripper already holding an object";
pub const GRIPPER_EMPTY: &str = "gripper is empty";
pub const DEFAULT_EVALUATOR_FEEDBACK: &str = "grasp failed: object not secured";
pub const DEFAULT_TABLE_DEPTH_MM: f64 = 400.0;
/// Horizontal distance a `push` slides an object.
pub const PUSH_DISTANCE_PX: i64 = 40;

fn default_table_depth() -> f64 {
    DEFAULT_TABLE_DEPTH_MM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub label: String,
    pub bbox: BBox,
    pub depth_mm: f64,
    #[serde(default)]
    pub held: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub holding: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_width: i64,
    pub image_height: i64,
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub gripper: Gripper,
    #[serde(default = "default_table_depth")]
    pub table_depth_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SceneError {
    #[error("image dimensions must be positive")]
    BadDimensions,
    #[error("duplicate object id `{0}`")]
    DuplicateId(String),
    #[error("object `{0}` has a bbox outside the image")]
    OutOfBounds(String),
    #[error("object `{0}` must have positive depth")]
    BadDepth(String),
    #[error("object `{0}` has an empty label")]
    EmptyLabel(String),
    #[error("held flags disagree with the gripper")]
    HeldMismatch,
    #[error("bbox {0} is outside the image")]
    BBoxOutOfBounds(BBox),
}

impl Scene {
    pub fn new(image_width: i64, image_height: i64) -> Self {
        Self {
            image_width,
            image_height,
            objects: Vec::new(),
            gripper: Gripper::default(),
            table_depth_mm: DEFAULT_TABLE_DEPTH_MM,
        }
    }

    pub fn with_object(mut self, id: &str, label: &str, bbox: BBox, depth_mm: f64) -> Self {
        self.objects.push(SceneObject {
            id: id.to_string(),
            label: label.to_string(),
            bbox,
            depth_mm,
            held: false,
        });
        self
    }

    pub fn bounds(&self) -> (i64, i64) {
        (self.image_width, self.image_height)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.image_width <= 0 || self.image_height <= 0 {
            return Err(SceneError::BadDimensions);
        }
        let mut ids = HashSet::new();
        for o in &self.objects {
            if !ids.insert(o.id.as_str()) {
                return Err(SceneError::DuplicateId(o.id.clone()));
            }
            if o.label.trim().is_empty() {
                return Err(SceneError::EmptyLabel(o.id.clone()));
            }
            if !o.bbox.within(self.image_width, self.image_height) {
                return Err(SceneError::OutOfBounds(o.id.clone()));
            }
            if !(o.depth_mm > 0.0) {
                return Err(SceneError::BadDepth(o.id.clone()));
            }
        }
        let held: Vec<&str> = self.objects.iter().filter(|o| o.held).map(|o| o.id.as_str()).collect();
        match (&self.gripper.holding, held.as_slice()) {
            (None, []) => Ok(()),
            (Some(id), [h]) if id == h => Ok(()),
            _ => Err(SceneError::HeldMismatch),
        }
    }

    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    fn object_mut(&mut self, id: &str) -> Option<&mut SceneObject> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    /// Bboxes of every visible object labeled `target`, in detection order.
    pub fn visible(&self, target: &str) -> Vec<BBox> {
        let mut out: Vec<BBox> = self
            .objects
            .iter()
            .filter(|o| !o.held && o.label == target)
            .map(|o| o.bbox)
            .collect();
        out.sort_by_key(BBox::detection_key);
        out
    }

    /// Visible object with the highest IoU against `bbox`, if any overlaps.
    /// Ties go to the earlier object in the scene list.
    pub fn best_match(&self, bbox: &BBox) -> Option<&SceneObject> {
        let mut best: Option<(&SceneObject, f64)> = None;
        for o in self.objects.iter().filter(|o| !o.held) {
            let iou = o.bbox.iou(bbox);
            if iou > 0.0 && best.is_none_or(|(_, b)| iou > b) {
                best = Some((o, iou));
            }
        }
        best.map(|(o, _)| o)
    }

    /// Center of `bbox` with the depth of the best-overlapping object,
    /// or the table depth when nothing overlaps.
    pub fn get_pick_pos(&self, bbox: &BBox, _target: &str) -> Result<Position3D, SceneError> {
        if !bbox.within(self.image_width, self.image_height) {
            return Err(SceneError::BBoxOutOfBounds(*bbox));
        }
        let (x, y) = bbox.center();
        let z = self.best_match(bbox).map_or(self.table_depth_mm, |o| o.depth_mm);
        Ok(Position3D { x, y, z })
    }

    /// Moves `size`-shaped box so its center sits on `center_sum / 2`,
    /// clamped into the image.
    fn recentered(&self, size: &BBox, center_sum: (i64, i64)) -> BBox {
        let (w, h) = (size.width(), size.height());
        let x_min = (center_sum.0 - w).div_euclid(2).clamp(0, (self.image_width - w).max(0));
        let y_min = (center_sum.1 - h).div_euclid(2).clamp(0, (self.image_height - h).max(0));
        BBox::new(x_min, y_min, x_min + w, y_min + h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultProfile {
    #[serde(default)]
    pub p_detect_empty: f64,
    #[serde(default)]
    pub p_action_fail: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FaultProfile {
    fn default() -> Self {
        Self::none()
    }
}

impl FaultProfile {
    pub fn none() -> Self {
        Self {
            p_detect_empty: 0.0,
            p_action_fail: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("p_detect_empty", self.p_detect_empty), ("p_action_fail", self.p_action_fail)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Seeded source of injected failures.
#[derive(Debug, Clone)]
pub struct FaultInjector {
    profile: FaultProfile,
    rng: ChaCha8Rng,
}

impl FaultInjector {
    pub fn new(profile: FaultProfile) -> Self {
        Self {
            profile,
            rng: ChaCha8Rng::seed_from_u64(profile.seed),
        }
    }

    pub fn profile(&self) -> &FaultProfile {
        &self.profile
    }

    fn draw(&mut self, p: f64) -> bool {
        let u: f64 = self.rng.gen();
        u < p
    }

    pub fn detection_fault(&mut self) -> bool {
        let p = self.profile.p_detect_empty;
        self.draw(p)
    }

    pub fn action_fault(&mut self) -> bool {
        let p = self.profile.p_action_fail;
        self.draw(p)
    }
}

/// Source of failure explanations after an unsuccessful motion.
pub trait Evaluator: Send {
    fn assess(&self, skill: &str, scene: &Scene) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FixedEvaluator;

impl Evaluator for FixedEvaluator {
    fn assess(&self, _skill: &str, _scene: &Scene) -> String {
        DEFAULT_EVALUATOR_FEEDBACK.to_string()
    }
}

/// One episode's world: scene, fault stream and evaluator.
pub struct SimEnv {
    scene: Scene,
    faults: FaultInjector,
    evaluator: Box<dyn Evaluator>,
    home: Position3D,
}

impl SimEnv {
    pub fn new(scene: Scene, faults: FaultProfile) -> Result<Self, SceneError> {
        scene.validate()?;
        let home = Position3D {
            x: scene.image_width as f64 / 2.0,
            y: 0.0,
            z: 0.0,
        };
        Ok(Self {
            scene,
            faults: FaultInjector::new(faults),
            evaluator: Box::new(FixedEvaluator),
            home,
        })
    }

    pub fn with_evaluator(mut self, evaluator: Box<dyn Evaluator>) -> Self {
        self.evaluator = evaluator;
        self
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn detect_2d(&mut self, target: &str) -> SkillOutcome {
        let faulted = self.faults.detection_fault();
        if target.trim().is_empty() {
            return SkillOutcome::failed("detection target must not be empty");
        }
        let list = self.scene.visible(target);
        if faulted || list.is_empty() {
            SkillOutcome::failed(EMPTY_DETECTION)
        } else {
            SkillOutcome::detected(list)
        }
    }

    /// Simulated linear motion. Reachability is not modeled; only injected
    /// faults make it fail.
    pub fn move_arm_to(&mut self, _pos: Position3D) -> bool {
        !self.faults.action_fault()
    }

    fn motion_failed(&self, skill: &str) -> SkillOutcome {
        SkillOutcome::failed(self.evaluator.assess(skill, &self.scene))
    }

    pub fn pick(&mut self, target: &str, bbox: BBox) -> Result<SkillOutcome, SceneError> {
        if self.scene.gripper.holding.is_some() {
            return Ok(SkillOutcome::failed(GRIPPER_OCCUPIED));
        }
        let pos = self.scene.get_pick_pos(&bbox, target)?;
        if !self.move_arm_to(pos) {
            return Ok(self.motion_failed(PICK));
        }
        let Some(id) = self.scene.best_match(&bbox).map(|o| o.id.clone()) else {
            return Ok(SkillOutcome::failed("nothing to grasp at the target location"));
        };
        if let Some(o) = self.scene.object_mut(&id) {
            o.held = true;
        }
        self.scene.gripper.holding = Some(id);
        Ok(SkillOutcome::success())
    }

    pub fn place(&mut self, target: &str, bbox: BBox) -> Result<SkillOutcome, SceneError> {
        let Some(id) = self.scene.gripper.holding.clone() else {
            return Ok(SkillOutcome::failed(GRIPPER_EMPTY));
        };
        let pos = self.scene.get_pick_pos(&bbox, target)?;
        if !self.move_arm_to(pos) {
            return Ok(self.motion_failed(PLACE));
        }
        let size = self.scene.object(&id).map(|o| o.bbox).expect("held object exists");
        let moved = self
            .scene
            .recentered(&size, (bbox.x_min + bbox.x_max, bbox.y_min + bbox.y_max));
        if let Some(o) = self.scene.object_mut(&id) {
            o.bbox = moved;
            o.held = false;
        }
        self.scene.gripper.holding = None;
        Ok(SkillOutcome::success())
    }

    pub fn push(&mut self, target: &str, bbox: BBox) -> Result<SkillOutcome, SceneError> {
        if self.scene.gripper.holding.is_some() {
            return Ok(SkillOutcome::failed(GRIPPER_OCCUPIED));
        }
        let pos = self.scene.get_pick_pos(&bbox, target)?;
        if !self.move_arm_to(pos) {
            return Ok(self.motion_failed(PUSH));
        }
        let Some(id) = self.scene.best_match(&bbox).map(|o| o.id.clone()) else {
            return Ok(SkillOutcome::failed("nothing to push at the target location"));
        };
        let size = self.scene.object(&id).map(|o| o.bbox).expect("matched object exists");
        let shifted = (size.x_min + size.x_max + 2 * PUSH_DISTANCE_PX, size.y_min + size.y_max);
        let moved = self.scene.recentered(&size, shifted);
        if let Some(o) = self.scene.object_mut(&id) {
            o.bbox = moved;
        }
        Ok(SkillOutcome::success())
    }

    pub fn move_home(&mut self) -> SkillOutcome {
        if self.move_arm_to(self.home) {
            SkillOutcome::success()
        } else {
            self.motion_failed(MOVE_HOME)
        }
    }

    pub fn open_gripper(&mut self) -> SkillOutcome {
        if self.faults.action_fault() {
            return self.motion_failed(OPEN_GRIPPER);
        }
        if let Some(id) = self.scene.gripper.holding.take() {
            if let Some(o) = self.scene.object_mut(&id) {
                o.held = false;
            }
        }
        SkillOutcome::success()
    }

    pub fn close_gripper(&mut self) -> SkillOutcome {
        if self.faults.action_fault() {
            return self.motion_failed(CLOSE_GRIPPER);
        }
        SkillOutcome::success()
    }
}

fn required_text<'a>(call: &'a FunctionCall, name: &str) -> Result<&'a str, ExecutionError> {
    call.text(name)
        .ok_or_else(|| ExecutionError(format!("missing text argument `{name}`")))
}

fn required_bbox(call: &FunctionCall, name: &str) -> Result<BBox, ExecutionError> {
    call.bbox(name)
        .ok_or_else(|| ExecutionError(format!("missing bbox argument `{name}`")))
}

impl SkillExecutor for SimEnv {
    fn execute(&mut self, spec: &SkillSpec, call: &FunctionCall) -> Result<SkillOutcome, ExecutionError> {
        let scene_err = |e: SceneError| ExecutionError(e.to_string());
        match (spec.kind, spec.name.as_str()) {
            (SkillKind::Perception, DETECT) => Ok(self.detect_2d(required_text(call, "target")?)),
            (SkillKind::Action, PICK) => self
                .pick(required_text(call, "target")?, required_bbox(call, "bbox")?)
                .map_err(scene_err),
            (SkillKind::Action, PLACE) => self
                .place(required_text(call, "target")?, required_bbox(call, "bbox")?)
                .map_err(scene_err),
            (SkillKind::Action, PUSH) => self
                .push(required_text(call, "target")?, required_bbox(call, "bbox")?)
                .map_err(scene_err),
            (SkillKind::Action, MOVE_HOME) => Ok(self.move_home()),
            (SkillKind::Action, OPEN_GRIPPER) => Ok(self.open_gripper()),
            (SkillKind::Action, CLOSE_GRIPPER) => Ok(self.close_gripper()),
            (_, other) => Err(ExecutionError(format!("the simulator does not implement `{other}`"))),
        }
    }
}
