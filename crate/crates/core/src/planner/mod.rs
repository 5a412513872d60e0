//! Prompt construction, planner backends and action-plan parsing.

mod backend;
mod ledger;
mod live;
mod mock;
mod parse;
mod prompt;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{BuildState, Cell, CellStatus, Footprint};

pub use backend::{
    request_plan, BackendError, ChatMessage, ChatRequest, Completion, PlanError, PlanOutcome,
    Planner, PlannerBackend, PlannerConfig, Role,
};
pub use ledger::{LedgerEntry, RunLedger};
pub use live::{LiveBackend, LiveConfig, Provider};
pub use mock::{DesignLibrary, MockBackend, ShapeDesign, Symmetry};
pub use parse::{extract_json, parse_plan, parse_plan_lenient, parse_plan_strict, LenientPlan};
pub use prompt::{build_prompt, build_reprompt, PromptParts};

/// One placement target: a pad cell and the layer the block should rest on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Target {
    pub cell: Cell,
    pub layer: u8,
}

impl Target {
    pub const fn ground(cell: Cell) -> Self {
        Self { cell, layer: 0 }
    }

    pub const fn stacked(cell: Cell) -> Self {
        Self { cell, layer: 1 }
    }

    pub fn is_stacked(&self) -> bool {
        self.layer > 0
    }
}

/// Parsed planner output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionPlan {
    pub title: String,
    /// Placement targets in execution order.
    pub coordinates: Vec<Target>,
    /// Cells already holding blocks when the plan was made.
    pub used_coordinates: Vec<Cell>,
    pub reasoning: String,
}

impl ActionPlan {
    pub fn from_cells(title: &str, cells: impl IntoIterator<Item = Cell>) -> Self {
        Self {
            title: title.to_string(),
            coordinates: cells.into_iter().map(Target::ground).collect(),
            used_coordinates: Vec::new(),
            reasoning: String::new(),
        }
    }

    /// The design this plan commits to: used cells plus target cells.
    pub fn layout(&self, pad_size: usize) -> Footprint {
        let mut f = Footprint::empty(pad_size);
        for c in self
            .used_coordinates
            .iter()
            .copied()
            .chain(self.coordinates.iter().map(|t| t.cell))
        {
            // out-of-bounds cells cannot be part of a layout on this pad
            let _ = f.insert(c);
        }
        f
    }

    /// Serialize in the wire schema accepted by [`parse_plan`].
    pub fn to_json(&self) -> String {
        let coords: Vec<serde_json::Value> = self
            .coordinates
            .iter()
            .map(|t| {
                if t.is_stacked() {
                    serde_json::json!([t.cell.x, t.cell.y, t.layer])
                } else {
                    serde_json::json!([t.cell.x, t.cell.y])
                }
            })
            .collect();
        let used: Vec<serde_json::Value> = self
            .used_coordinates
            .iter()
            .map(|c| serde_json::json!([c.x, c.y]))
            .collect();
        serde_json::json!({
            "title": self.title,
            "coordinates": coords,
            "used_coordinates": used,
            "reasoning": self.reasoning,
        })
        .to_string()
    }
}

/// Parse failures. Each variant is distinct so a corrective reprompt can name it.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanParseError {
    #[error("no JSON object found in the response")]
    NoJsonFound,
    #[error("response does not match the output schema: {0}")]
    SchemaMismatch(String),
    #[error("coordinate {index} has a non-integer component: {value}")]
    NonIntegerCoordinate { index: usize, value: String },
    #[error("coordinate [{x}, {y}] lies outside the {pad_size}x{pad_size} pad")]
    OutOfBounds { x: i64, y: i64, pad_size: usize },
    #[error("coordinate {0:?} appears more than once")]
    DuplicateCoordinate(Target),
}

/// A rule broken by an otherwise well-formed plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    OutOfBounds(Cell),
    /// Ground-layer target on a cell that already holds a block.
    Collision(Cell),
    /// Layer-1 target on a cell with nothing underneath.
    StackOnFree(Cell),
    /// Target on a cell that already holds two blocks.
    StackFull(Cell),
    BadLayer(Cell, u8),
    Duplicate(Cell),
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::OutOfBounds(c) => write!(f, "{c} is outside the pad"),
            Violation::Collision(c) => write!(f, "{c} is already occupied"),
            Violation::StackOnFree(c) => write!(f, "{c} has no block to stack on"),
            Violation::StackFull(c) => write!(f, "{c} is already two blocks high"),
            Violation::BadLayer(c, l) => write!(f, "{c} uses unsupported layer {l}"),
            Violation::Duplicate(c) => write!(f, "{c} is targeted twice"),
        }
    }
}

/// Check a plan against the current state. Returns every violation found.
pub fn validate_plan(plan: &ActionPlan, state: &BuildState) -> Result<(), Vec<Violation>> {
    let n = state.pad_size();
    let mut violations = Vec::new();
    // layers that earlier targets in this same plan will have filled
    let mut planned: BTreeSet<Target> = BTreeSet::new();
    for t in &plan.coordinates {
        let c = t.cell;
        if !c.in_pad(n) {
            violations.push(Violation::OutOfBounds(c));
            continue;
        }
        if !planned.insert(*t) {
            violations.push(Violation::Duplicate(c));
            continue;
        }
        let status = state.status(c).expect("in bounds");
        match t.layer {
            0 => {
                if status != CellStatus::Free {
                    violations.push(Violation::Collision(c));
                }
            }
            1 => match status {
                CellStatus::Stacked => violations.push(Violation::StackFull(c)),
                CellStatus::Free if !planned.contains(&Target::ground(c)) => {
                    violations.push(Violation::StackOnFree(c))
                }
                _ => {}
            },
            l => violations.push(Violation::BadLayer(c, l)),
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collision_reported() {
        let state = BuildState::empty(5).apply_placement(Cell::new(2, 2), false).unwrap();
        let plan = ActionPlan::from_cells("t", [Cell::new(2, 2), Cell::new(0, 0)]);
        assert_eq!(validate_plan(&plan, &state), Err(vec![Violation::Collision(Cell::new(2, 2))]));
    }

    #[test]
    fn empty_board_plan_is_ok() {
        let plan = ActionPlan::from_cells("t", [Cell::new(0, 0), Cell::new(4, 4)]);
        assert_eq!(validate_plan(&plan, &BuildState::empty(5)), Ok(()));
    }

    #[test]
    fn out_of_bounds_reported() {
        let plan = ActionPlan::from_cells("t", [Cell::new(5, 0)]);
        assert_eq!(
            validate_plan(&plan, &BuildState::empty(5)),
            Err(vec![Violation::OutOfBounds(Cell::new(5, 0))])
        );
    }

    #[test]
    fn all_violations_reported() {
        let state = BuildState::empty(3)
            .apply_placement(Cell::new(0, 0), false)
            .unwrap()
            .apply_placement(Cell::new(0, 0), true)
            .unwrap()
            .apply_placement(Cell::new(1, 1), false)
            .unwrap();
        let mut plan = ActionPlan::from_cells("t", [Cell::new(1, 1), Cell::new(9, 9)]);
        plan.coordinates.push(Target::stacked(Cell::new(0, 0)));
        plan.coordinates.push(Target::stacked(Cell::new(2, 2)));
        plan.coordinates.push(Target::ground(Cell::new(2, 0)));
        plan.coordinates.push(Target::ground(Cell::new(2, 0)));
        let v = validate_plan(&plan, &state).unwrap_err();
        assert_eq!(
            v,
            vec![
                Violation::Collision(Cell::new(1, 1)),
                Violation::OutOfBounds(Cell::new(9, 9)),
                Violation::StackFull(Cell::new(0, 0)),
                Violation::StackOnFree(Cell::new(2, 2)),
                Violation::Duplicate(Cell::new(2, 0)),
            ]
        );
    }

    #[test]
    fn stack_on_block_planned_earlier_is_ok() {
        let mut plan = ActionPlan::from_cells("t", [Cell::new(1, 0)]);
        plan.coordinates.push(Target::stacked(Cell::new(1, 0)));
        assert_eq!(validate_plan(&plan, &BuildState::empty(3)), Ok(()));
    }

    #[test]
    fn layout_unions_used_and_targets() {
        let mut plan = ActionPlan::from_cells("t", [Cell::new(0, 0)]);
        plan.used_coordinates = vec![Cell::new(1, 1)];
        let layout = plan.layout(3);
        assert_eq!(layout.cells(), vec![Cell::new(0, 0), Cell::new(1, 1)]);
    }
}
