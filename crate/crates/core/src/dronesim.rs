//! Simulated drone executor and the closed build loop.
//!
//! Placement error is applied per cell. Every placement attempt draws its
//! random numbers from its own ChaCha stream keyed by the attempt index, so two
//! runs with the same seed see the same error events attempt by attempt even
//! when their plans diverge.

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalharness::iou;
use crate::framesync::{plan_to_world, PadMap, SyncError};
use crate::gridworld::{BuildState, Cell, Footprint, GridWorld};
use crate::planner::{
    build_prompt, build_reprompt, ActionPlan, PlanError, Planner, PlannerBackend, PlannerConfig,
    PromptParts, RunLedger, Target,
};
use crate::vision::{
    change_region, centroid_to_grid, classify_stack, dropoff_verify, frame_diff, pickup_detect,
    BlockTracker, DetectorConfig, FeatureTrack, PadCorners, PixelPoint, PixelRect, RgbFrame,
    StackClass, VisionError,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("probability `{name}` must lie in [0, 1], got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("offset weights must be finite, non-negative and not all zero")]
    Weights,
    #[error("offset ({0}, {1}) does not move the block")]
    ZeroOffset(i64, i64),
}

/// Where a misplaced block goes relative to its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetDist {
    /// Uniform over the four edge neighbours.
    Uniform4,
    /// Uniform over all eight neighbours.
    Uniform8,
    Fixed([i64; 2]),
    Weighted(Vec<([i64; 2], f64)>),
}

impl OffsetDist {
    fn support(&self) -> Vec<([i64; 2], f64)> {
        match self {
            OffsetDist::Uniform4 => [[1, 0], [-1, 0], [0, 1], [0, -1]].map(|o| (o, 1.0)).to_vec(),
            OffsetDist::Uniform8 => (-1..=1)
                .flat_map(|dy| (-1..=1).map(move |dx| [dx, dy]))
                .filter(|o| *o != [0, 0])
                .map(|o| (o, 1.0))
                .collect(),
            OffsetDist::Fixed(o) => vec![(*o, 1.0)],
            OffsetDist::Weighted(w) => w.clone(),
        }
    }

    /// Pick an offset that keeps `cell` on the pad, using `u` in [0, 1).
    /// Offsets leading off the pad are dropped and the rest renormalized.
    pub fn sample(&self, cell: Cell, pad_size: usize, u: f64) -> Option<Cell> {
        let options: Vec<(Cell, f64)> = self
            .support()
            .into_iter()
            .filter(|(_, w)| *w > 0.0)
            .filter_map(|([dx, dy], w)| cell.offset(dx, dy, pad_size).map(|c| (c, w)))
            .collect();
        let total: f64 = options.iter().map(|o| o.1).sum();
        let mut acc = 0.0;
        for (c, w) in &options {
            acc += w / total;
            if u < acc {
                return Some(*c);
            }
        }
        options.last().map(|o| o.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorModel {
    pub misplace_prob: f64,
    pub offset_dist: OffsetDist,
    /// The block is carried to the target but never released.
    pub drop_fail_prob: f64,
    /// The gripper misses the block at the supply.
    pub pickup_fail_prob: f64,
    /// Offsets forced on specific placement attempts (0-based), overriding the draw.
    pub scripted: BTreeMap<usize, [i64; 2]>,
    pub seed: u64,
}

impl Default for ErrorModel {
    fn default() -> Self {
        Self::none(0)
    }
}

impl ErrorModel {
    pub fn none(seed: u64) -> Self {
        Self {
            misplace_prob: 0.0,
            offset_dist: OffsetDist::Uniform4,
            drop_fail_prob: 0.0,
            pickup_fail_prob: 0.0,
            scripted: BTreeMap::new(),
            seed,
        }
    }

    pub fn misplacing(prob: f64, seed: u64) -> Self {
        Self {
            misplace_prob: prob,
            ..Self::none(seed)
        }
    }

    /// Force the given attempt to land `offset` away from its target.
    pub fn with_forced(mut self, attempt: usize, offset: [i64; 2]) -> Self {
        self.scripted.insert(attempt, offset);
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, value) in [
            ("misplace_prob", self.misplace_prob),
            ("drop_fail_prob", self.drop_fail_prob),
            ("pickup_fail_prob", self.pickup_fail_prob),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SimError::Probability { name, value });
            }
        }
        if let OffsetDist::Weighted(w) = &self.offset_dist {
            if w.iter().any(|(_, x)| !x.is_finite() || *x < 0.0) || w.iter().all(|(_, x)| *x == 0.0) {
                return Err(SimError::Weights);
            }
        }
        let zero = self.offset_dist.support().into_iter().map(|(o, _)| o).chain(self.scripted.values().copied()).find(|o| *o == [0, 0]);
        if let Some([dx, dy]) = zero {
            return Err(SimError::ZeroOffset(dx, dy));
        }
        Ok(())
    }

    /// Random source for one placement attempt.
    pub fn attempt_rng(&self, attempt: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(attempt as u64);
        rng
    }
}

/// Derive an independent run seed from a master seed and a run index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index.wrapping_add(1));
    rng.next_u64()
}

/// The error decisions made for one attempt. Depends only on the seed and
/// the attempt index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEvent {
    pub attempt: usize,
    pub pickup_failed: bool,
    pub drop_failed: bool,
    pub misplaced: bool,
}

/// Pixel geometry of the overview camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraParams {
    pub cell_px: usize,
    pub margin_px: usize,
    pub block_px: usize,
    /// Upward image shift of a block resting on another block.
    pub stack_offset_px: usize,
}

impl Default for CameraParams {
    fn default() -> Self {
        Self {
            cell_px: 20,
            margin_px: 10,
            block_px: 12,
            stack_offset_px: 3,
        }
    }
}

pub const BACKGROUND: [u8; 3] = [24, 24, 24];
pub const PAD_COLOR: [u8; 3] = [96, 96, 96];
pub const NOTCH_COLOR: [u8; 3] = [44, 44, 44];

/// Block colors. All share one luma value, so in the grayscale difference a
/// block dropped onto another only shows where it sticks out.
pub const BLOCK_PALETTE: [[u8; 3]; 6] = [
    [203, 142, 51],
    [82, 204, 51],
    [58, 181, 233],
    [215, 98, 244],
    [254, 89, 188],
    [50, 200, 155],
];

impl CameraParams {
    pub fn frame_size(&self, pad_size: usize) -> (usize, usize) {
        let side = 2 * self.margin_px + pad_size * self.cell_px;
        (side, side)
    }

    pub fn pad_corners(&self, pad_size: usize) -> PadCorners {
        let lo = self.margin_px as f64;
        let hi = (self.margin_px + pad_size * self.cell_px) as f64;
        PadCorners::axis_aligned(lo, lo, hi, hi)
    }

    /// Region searched by the block detector: the pad plus headroom for stacked blocks.
    pub fn detection_region(&self, pad_size: usize) -> PixelRect {
        let m = self.margin_px;
        PixelRect {
            x0: m,
            y0: m.saturating_sub(self.stack_offset_px),
            x1: m + pad_size * self.cell_px,
            y1: m + pad_size * self.cell_px,
        }
    }

    /// Pixel center of a ground block on `cell`.
    pub fn cell_center(&self, cell: Cell, pad_size: usize) -> PixelPoint {
        let (x0, y0) = self.block_origin(cell, pad_size);
        let half = (self.block_px as f64 - 1.0) / 2.0;
        PixelPoint::new(x0 as f64 + half, y0 as f64 + half)
    }

    fn block_origin(&self, cell: Cell, pad_size: usize) -> (i64, i64) {
        let inset = (self.cell_px - self.block_px) / 2;
        let row = pad_size - 1 - cell.y;
        (
            (self.margin_px + cell.x * self.cell_px + inset) as i64,
            (self.margin_px + row * self.cell_px + inset) as i64,
        )
    }
}

/// Deterministic overhead view of the pad, notches and blocks.
pub fn render_world(world: &GridWorld, state: &BuildState, cam: &CameraParams) -> RgbFrame {
    let n = world.pad_size();
    let (w, h) = cam.frame_size(n);
    let mut f = RgbFrame::filled(w, h, BACKGROUND);
    let m = cam.margin_px as i64;
    let side = (n * cam.cell_px) as i64;
    f.fill_rect(m, m, m + side, m + side, PAD_COLOR);
    // registration notch at the outer corner of cell (0, 0), ticks under every column
    f.fill_rect(m - 4, m + side, m, m + side + 4, NOTCH_COLOR);
    for x in 0..n as i64 {
        let cx = m + x * cam.cell_px as i64 + cam.cell_px as i64 / 2;
        f.fill_rect(cx - 1, m + side + 2, cx + 1, m + side + 6, NOTCH_COLOR);
    }
    let b = cam.block_px as i64;
    let mut blocks: Vec<_> = state.placed().to_vec();
    blocks.sort_by_key(|p| (p.layer, p.step_index));
    for p in blocks {
        let (x0, y0) = cam.block_origin(p.cell, n);
        let lift = p.layer as i64 * cam.stack_offset_px as i64;
        let color = BLOCK_PALETTE[p.step_index % BLOCK_PALETTE.len()];
        f.fill_rect(x0, y0 - lift, x0 + b, y0 - lift + b, color);
    }
    f
}

/// What physically happened on one attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PlacementResult {
    Landed { cell: Cell, layer: u8, misplaced: bool },
    PickupFailed,
    DropFailed,
    /// The block hit a full stack and fell off the pad.
    Blocked { cell: Cell },
}

pub struct PlacementOutcome {
    pub result: PlacementResult,
    pub event: ErrorEvent,
    pub state_after: BuildState,
    pub frame_before: RgbFrame,
    pub frame_after: RgbFrame,
    pub tracks: Vec<FeatureTrack>,
}

/// Frames covered by a synthesized pickup track.
pub const TRACK_FRAMES: usize = 8;
/// Per-frame upward motion of a feature point on a lifted block.
pub const LIFT_PX_PER_FRAME: f64 = 2.5;

fn pickup_tracks(lifted: bool) -> Vec<FeatureTrack> {
    // four corners of the block at the supply station
    let corners = [(4.0, 4.0), (15.0, 4.0), (4.0, 15.0), (15.0, 15.0)];
    corners
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let positions = (0..TRACK_FRAMES)
                .map(|t| {
                    let rise = if lifted { LIFT_PX_PER_FRAME * t as f64 } else { 0.0 };
                    (t, PixelPoint::new(x, y - rise))
                })
                .collect();
            FeatureTrack::new(i as u32, positions).expect("track times increase")
        })
        .collect()
}

/// Carry one block toward `target`. The attempt draws exactly four uniforms
/// from `rng`: pickup, release, misplacement and offset.
#[allow(clippy::too_many_arguments)]
pub fn execute_placement<R: Rng + ?Sized>(
    world: &GridWorld,
    state: &BuildState,
    target: Cell,
    step_index: usize,
    attempt: usize,
    err: &ErrorModel,
    rng: &mut R,
    cam: &CameraParams,
) -> PlacementOutcome {
    let u: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>());
    let forced = err.scripted.get(&attempt);
    let event = ErrorEvent {
        attempt,
        pickup_failed: u[0] < err.pickup_fail_prob,
        drop_failed: u[1] < err.drop_fail_prob,
        misplaced: forced.is_some() || u[2] < err.misplace_prob,
    };
    let n = world.pad_size();
    let before = render_world(world, state, cam);
    let unchanged = |result| PlacementOutcome {
        result,
        event,
        state_after: state.clone(),
        frame_before: before.clone(),
        frame_after: before.clone(),
        tracks: pickup_tracks(result != PlacementResult::PickupFailed),
    };
    if event.pickup_failed {
        return unchanged(PlacementResult::PickupFailed);
    }
    if event.drop_failed {
        return unchanged(PlacementResult::DropFailed);
    }
    let landing = match (event.misplaced, forced) {
        (false, _) => target,
        (true, Some(&[dx, dy])) => target.offset(dx, dy, n).unwrap_or(target),
        (true, None) => err.offset_dist.sample(target, n, u[3]).unwrap_or(target),
    };
    let misplaced = landing != target;
    match state.landing_layer(landing) {
        None => unchanged(PlacementResult::Blocked { cell: landing }),
        Some(layer) => {
            let after = state
                .apply_placement_at_step(landing, layer == 1, step_index)
                .expect("landing layer checked");
            let frame_after = render_world(world, &after, cam);
            PlacementOutcome {
                result: PlacementResult::Landed {
                    cell: landing,
                    layer,
                    misplaced,
                },
                event,
                state_after: after,
                frame_before: before,
                frame_after,
                tracks: pickup_tracks(true),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub reprompt_enabled: bool,
    pub max_reprompts: usize,
    pub max_steps: usize,
    /// Extra attempts on the same target after a failed pickup or release.
    pub placement_retries: usize,
    pub planner: PlannerConfig,
    pub detector: DetectorConfig,
    pub camera: CameraParams,
    /// Score against this layout instead of the layout the planner committed to.
    pub target: Option<Footprint>,
    #[serde(skip)]
    pub frame_dump_dir: Option<PathBuf>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        let camera = CameraParams::default();
        Self {
            reprompt_enabled: true,
            max_reprompts: 5,
            max_steps: 40,
            placement_retries: 2,
            planner: PlannerConfig::default(),
            detector: DetectorConfig::for_geometry(camera.cell_px as f64, camera.block_px as f64),
            camera,
            target: None,
            frame_dump_dir: None,
        }
    }
}

/// One plan target and everything observed while executing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub planned: Target,
    pub waypoint: [f64; 3],
    pub attempts: usize,
    pub result: PlacementResult,
    /// Where the block really came to rest.
    pub executed: Option<Target>,
    /// Where vision says the block came to rest.
    pub observed: Option<Target>,
    pub pickup_delta_y: f64,
    pub dropoff_verified: bool,
    pub change_area: usize,
    pub classification: Option<StackClass>,
    /// Observation differs from the plan.
    pub mismatch: bool,
    pub reprompt_issued: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub round: usize,
    pub reprompt: bool,
    /// Requests sent in this round, including corrective ones.
    pub requests: usize,
    pub latency_ms: Option<f64>,
    pub tokens: Option<u64>,
    pub targets: usize,
    pub layout: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    MaxSteps,
    MaxReprompts,
    PlannerFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub design_request: String,
    pub backend: String,
    pub seed: u64,
    pub reprompt_enabled: bool,
    pub steps: Vec<StepRecord>,
    pub prompts: Vec<PromptRecord>,
    pub prompts_used: usize,
    pub reprompts: usize,
    pub error_events: Vec<ErrorEvent>,
    pub stop_reason: StopReason,
    pub final_state: BuildState,
    pub final_scene: String,
    pub observed_scene: String,
    /// Layout the final IoU is scored against.
    pub target_layout: String,
    pub final_iou: f64,
    /// IoU against the first plan's layout.
    pub original_plan_iou: f64,
    pub unrecovered_mismatches: usize,
    /// Wall-clock time; the only field that varies between identical runs.
    pub duration_ms: f64,
}

impl BuildReport {
    pub fn succeeded(&self) -> bool {
        self.final_iou == 1.0
    }

    /// JSON with the wall-clock field zeroed, for byte comparisons.
    pub fn to_canonical_json(&self) -> String {
        let mut r = self.clone();
        r.duration_ms = 0.0;
        serde_json::to_string_pretty(&r).expect("report serializes")
    }
}

#[derive(Debug, Error)]
pub enum BuildFailure {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("frame dump failed: {0}")]
    Dump(#[from] VisionError),
}

/// A failed build with everything recorded up to the failure.
#[derive(Debug, Error)]
#[error("{source}")]
pub struct BuildError {
    pub source: BuildFailure,
    pub partial: Box<BuildReport>,
}

struct Observation {
    observed: Option<Target>,
    pickup_delta_y: f64,
    verified: bool,
    change_area: usize,
    classification: Option<StackClass>,
    position: Option<PixelPoint>,
}

/// Run the vision checks in order: pickup, dropoff presence, location, stacking.
fn observe(
    out: &PlacementOutcome,
    observed_state: &BuildState,
    positions: &[(Cell, PixelPoint)],
    cfg: &BuildConfig,
    pad_size: usize,
) -> Observation {
    let (picked, dy) = pickup_detect(&out.tracks, 0, &cfg.detector).unwrap_or((false, 0.0));
    let mut obs = Observation {
        observed: None,
        pickup_delta_y: dy,
        verified: false,
        change_area: 0,
        classification: None,
        position: None,
    };
    if !picked {
        return obs;
    }
    let region_px = cfg.camera.detection_region(pad_size);
    let mut tracker = BlockTracker::new(cfg.camera.cell_px as f64 / 2.0);
    let count_before = tracker.detect(&out.frame_before, &region_px).len();
    let count_after = tracker.detect(&out.frame_after, &region_px).len();
    let diff = frame_diff(&out.frame_before.to_gray(), &out.frame_after.to_gray()).expect("same renderer size");
    let region = change_region(&diff, &cfg.detector);
    let corners = cfg.camera.pad_corners(pad_size);
    obs.verified = dropoff_verify(count_before, count_after, region.as_ref(), &corners);
    let Some(region) = region.filter(|_| obs.verified) else {
        return obs;
    };
    obs.change_area = region.area;
    let existing: Vec<PixelPoint> = positions.iter().map(|p| p.1).collect();
    let class = classify_stack(region.centroid, &existing, region.area as f64, &cfg.detector);
    obs.classification = Some(class);
    obs.observed = match class {
        StackClass::Stacked => positions
            .iter()
            .min_by(|a, b| a.1.distance(region.centroid).total_cmp(&b.1.distance(region.centroid)))
            .map(|p| Target::stacked(p.0)),
        StackClass::NewCell | StackClass::PlacedBehind => centroid_to_grid(region.centroid, &corners, pad_size)
            .ok()
            .and_then(|c| observed_state.landing_layer(c).map(|layer| Target { cell: c, layer })),
    };
    if matches!(obs.observed, Some(t) if t.layer == 0) {
        obs.position = Some(region.centroid);
    }
    obs
}

fn describe_failure(step: &StepRecord) -> String {
    let p = step.planned.cell;
    match (step.result, step.observed) {
        (PlacementResult::PickupFailed, _) => format!("the block for {p} was never picked up"),
        (_, None) => format!("no block was detected after the placement planned for {p}"),
        (_, Some(o)) if o.layer == 1 => format!("the block planned for {p} was observed stacked on {}", o.cell),
        (_, Some(o)) => format!("the block planned for {p} was observed at {}", o.cell),
    }
}

fn round_record(round: usize, reprompt: bool, out: &crate::planner::PlanOutcome, layout: &Footprint) -> PromptRecord {
    PromptRecord {
        round,
        reprompt,
        requests: out.requests,
        latency_ms: out.latency_ms,
        tokens: out.tokens,
        targets: out.plan.coordinates.len(),
        layout: layout.render(),
    }
}

/// Plan, execute and verify a design, reprompting from the observed scene
/// when a placement does not match its plan.
pub fn run_build(
    design_request: &str,
    backend: &dyn PlannerBackend,
    world: &GridWorld,
    pad_map: &PadMap,
    err: &ErrorModel,
    cfg: &BuildConfig,
    ledger: Option<&RunLedger>,
) -> Result<BuildReport, BuildError> {
    let start = Instant::now();
    let n = world.pad_size();
    let mut planner = Planner::new(backend, cfg.planner.clone());
    if let Some(l) = ledger {
        planner = planner.with_ledger(l);
    }
    let mut report = BuildReport {
        design_request: design_request.to_string(),
        backend: backend.label(),
        seed: err.seed,
        reprompt_enabled: cfg.reprompt_enabled,
        steps: Vec::new(),
        prompts: Vec::new(),
        prompts_used: 0,
        reprompts: 0,
        error_events: Vec::new(),
        stop_reason: StopReason::Completed,
        final_state: world.empty_state(),
        final_scene: String::new(),
        observed_scene: String::new(),
        target_layout: String::new(),
        final_iou: 0.0,
        original_plan_iou: 0.0,
        unrecovered_mismatches: 0,
        duration_ms: 0.0,
    };
    let mut truth = world.empty_state();
    let mut seen = world.empty_state();
    let mut positions: Vec<(Cell, PixelPoint)> = Vec::new();
    let mut original_layout = Footprint::empty(n);
    let mut committed = Footprint::empty(n);
    let mut queue: VecDeque<Target> = VecDeque::new();
    let mut attempt = 0usize;

    let result = (|| -> Result<(), BuildFailure> {
        err.validate()?;
        let request_round = |prompt: PromptParts,
                                 state: &BuildState,
                                 report: &mut BuildReport|
         -> Result<ActionPlan, BuildFailure> {
            let round = report.prompts_used;
            report.prompts_used += 1;
            let tag = format!("{design_request}#{round}");
            match planner.plan(&prompt, state, world, &tag) {
                Ok(out) => {
                    let mut layout = out.plan.layout(n);
                    for c in state.occupied_cells() {
                        layout.insert(c).expect("state cells are on the pad");
                    }
                    report.prompts.push(round_record(round, round > 0, &out, &layout));
                    Ok(out.plan)
                }
                Err(e) => {
                    report.stop_reason = StopReason::PlannerFailed;
                    Err(e.into())
                }
            }
        };

        let plan = request_round(build_prompt(design_request, &seen, world), &seen, &mut report)?;
        plan_to_world(&plan, pad_map)?;
        original_layout = plan.layout(n);
        committed = original_layout.clone();
        queue.extend(plan.coordinates.iter().copied());

        while let Some(target) = queue.pop_front() {
            if report.steps.len() >= cfg.max_steps {
                report.stop_reason = StopReason::MaxSteps;
                queue.push_front(target);
                break;
            }
            let index = report.steps.len();
            let waypoint: Vector3<f64> = pad_map.interpolate_pad_point(target.cell, target.layer)?;
            let mut tries = 0;
            let out = loop {
                let mut rng = err.attempt_rng(attempt);
                let out = execute_placement(world, &truth, target.cell, index, attempt, err, &mut rng, &cfg.camera);
                report.error_events.push(out.event);
                attempt += 1;
                tries += 1;
                let landed = matches!(out.result, PlacementResult::Landed { .. });
                if landed || tries > cfg.placement_retries {
                    break out;
                }
            };
            if let Some(dir) = &cfg.frame_dump_dir {
                out.frame_before.save(&dir.join(format!("step_{index:03}_before.ppm")))?;
                out.frame_after.save(&dir.join(format!("step_{index:03}_after.ppm")))?;
            }
            let obs = observe(&out, &seen, &positions, cfg, n);
            truth = out.state_after.clone();
            if let Some(t) = obs.observed {
                if let Ok(next) = seen.apply_placement_at_step(t.cell, t.layer == 1, index) {
                    seen = next;
                }
            }
            if let (Some(t), Some(p)) = (obs.observed, obs.position) {
                positions.push((t.cell, p));
            }
            let executed = match out.result {
                PlacementResult::Landed { cell, layer, .. } => Some(Target { cell, layer }),
                _ => None,
            };
            let mut step = StepRecord {
                index,
                planned: target,
                waypoint: [waypoint.x, waypoint.y, waypoint.z],
                attempts: tries,
                result: out.result,
                executed,
                observed: obs.observed,
                pickup_delta_y: obs.pickup_delta_y,
                dropoff_verified: obs.verified,
                change_area: obs.change_area,
                classification: obs.classification,
                mismatch: obs.observed != Some(target),
                reprompt_issued: false,
            };
            if !step.mismatch {
                report.steps.push(step);
                continue;
            }
            if !cfg.reprompt_enabled {
                report.unrecovered_mismatches += 1;
                report.steps.push(step);
                continue;
            }
            if report.reprompts >= cfg.max_reprompts {
                report.unrecovered_mismatches += 1;
                report.steps.push(step);
                report.stop_reason = StopReason::MaxReprompts;
                break;
            }
            step.reprompt_issued = true;
            let failure = describe_failure(&step);
            report.steps.push(step);
            report.reprompts += 1;
            let plan = request_round(build_reprompt(design_request, &seen, world, &failure), &seen, &mut report)?;
            plan_to_world(&plan, pad_map)?;
            committed = plan.layout(n);
            for c in seen.occupied_cells() {
                committed.insert(c).expect("state cells are on the pad");
            }
            queue.clear();
            queue.extend(plan.coordinates.iter().copied());
        }
        Ok(())
    })();

    let target = cfg.target.clone().unwrap_or(committed);
    let truth_fp = truth.footprint();
    report.final_iou = iou(&target, &truth_fp).unwrap_or(0.0);
    report.original_plan_iou = iou(&original_layout, &truth_fp).unwrap_or(0.0);
    report.target_layout = target.render();
    report.final_scene = truth.render_scene_text();
    report.observed_scene = seen.render_scene_text();
    report.final_state = truth;
    report.duration_ms = start.elapsed().as_secs_f64() * 1000.0;
    match result {
        Ok(()) => Ok(report),
        Err(source) => Err(BuildError {
            source,
            partial: Box::new(report),
        }),
    }
}
