use serde::{Deserialize, Serialize};

use crate::gridworld::{BuildState, GridWorld};

const TASK: &str = "You are the planner for a drone that builds designs out of identical cubic blocks \
on a flat square build pad. Choose the pad coordinates where the drone should drop blocks so that the \
finished blocks form the requested design. The drone places exactly one block per coordinate, in the \
order you list them.";

const RULES: &str = "1. Only use coordinates inside the pad described in the Current Scene.
2. Coordinates are integers. Never use fractions or decimals.
3. Each coordinate is an [x, y] pair: x is the column counted from the left, y is the row counted from the bottom.
4. Do not list a coordinate that is already marked \"x\" unless you intend to stack on it; mark a stacked block as [x, y, 1].
5. Blocks can be stacked at most two high.
6. Do not repeat a coordinate.
7. List coordinates in the order the drone should place them.
8. Respond with a single JSON object that follows the Output Schema and nothing else.";

const REPLAN_RULES: &str = "9. Some blocks are already on the pad, including blocks that were not placed where they were planned. \
Blocks cannot be removed. Continue the design from the current scene: keep every existing block, \
incorporate misplaced blocks into the design where you can, and list only the coordinates that still need a block.";

const OUTPUT_SCHEMA: &str = r#"{
  "type": "object",
  "required": ["title", "coordinates", "reasoning"],
  "additionalProperties": false,
  "properties": {
    "title": {"type": "string", "description": "A short title for the design."},
    "coordinates": {
      "type": "array",
      "description": "Blocks to place, in execution order. Each item is [x, y] or [x, y, 1] for a stacked block.",
      "items": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 3}
    },
    "used_coordinates": {
      "type": "array",
      "description": "Coordinates already occupied on the pad, as [x, y] pairs.",
      "items": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2}
    },
    "reasoning": {"type": "string", "description": "How the coordinates produce the design."}
  }
}"#;

/// The five prompt sections. Task, rules and output schema are fixed
/// templates; the current scene is regenerated on every call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptParts {
    pub task: String,
    pub design_request: String,
    pub current_scene: String,
    pub rules: String,
    pub output_schema: String,
}

impl PromptParts {
    /// Single-message rendering sent to chat backends.
    pub fn render(&self) -> String {
        format!(
            "## Task\n{}\n\n## Design Request\n{}\n\n## Current Scene\n{}\n\n## Rules\n{}\n\n## Output Schema\n{}\n",
            self.task, self.design_request, self.current_scene, self.rules, self.output_schema
        )
    }

    /// The o/x grid rows embedded in the current scene.
    pub fn scene_grid(&self) -> String {
        self.current_scene
            .lines()
            .filter(|l| {
                let mut toks = l.split(' ').peekable();
                toks.peek().is_some() && toks.all(|t| t == "o" || t == "x")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn scene(state: &BuildState, grid: &GridWorld) -> String {
    let n = grid.pad_size();
    let mut s = format!(
        "The build pad is a {n}x{n} grid. Coordinates run from (0,0) at the bottom-left cell to ({m},{m}) at the top-right cell; \
x increases to the right and y increases upward. The grid below prints the top row (y = {m}) first and the bottom row (y = 0) last. \
\"o\" marks a free cell and \"x\" marks a cell that already holds a block.\n\n{}",
        state.render_scene_text(),
        m = n.saturating_sub(1),
    );
    let used = state.occupied_cells();
    if !used.is_empty() {
        let stacked = state.stacked_cells();
        let list: Vec<String> = used
            .iter()
            .map(|c| {
                if stacked.contains(c) {
                    format!("[{}, {}, 1]", c.x, c.y)
                } else {
                    format!("[{}, {}]", c.x, c.y)
                }
            })
            .collect();
        s.push_str(&format!(
            "\n\nUsed coordinates ([x, y, 1] marks a cell already two blocks high): [{}]",
            list.join(", ")
        ));
    }
    s
}

/// Initial prompt for a design request.
pub fn build_prompt(design_request: &str, state: &BuildState, grid: &GridWorld) -> PromptParts {
    PromptParts {
        task: TASK.to_string(),
        design_request: design_request.trim().to_string(),
        current_scene: scene(state, grid),
        rules: RULES.to_string(),
        output_schema: OUTPUT_SCHEMA.to_string(),
    }
}

/// Reprompt after a placement failure. `state` is the vision-observed state.
pub fn build_reprompt(
    design_request: &str,
    state: &BuildState,
    grid: &GridWorld,
    failed_step: &str,
) -> PromptParts {
    let mut p = build_prompt(design_request, state, grid);
    p.rules = format!(
        "{RULES}\n{REPLAN_RULES}\nLast failure: {}",
        failed_step.trim()
    );
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::Cell;

    fn grid5() -> GridWorld {
        GridWorld::with_pad(5).unwrap()
    }

    #[test]
    fn empty_scene_has_five_free_rows() {
        let p = build_prompt("smiley face", &BuildState::empty(5), &grid5());
        assert_eq!(p.current_scene.matches("o o o o o").count(), 5);
        assert!(p.current_scene.contains("5x5"));
        assert!(p.current_scene.contains("bottom-left"));
        assert_eq!(p.scene_grid(), BuildState::empty(5).render_scene_text());
        for part in [&p.task, &p.design_request, &p.current_scene, &p.rules, &p.output_schema] {
            assert!(!part.is_empty());
        }
    }

    #[test]
    fn prompt_is_deterministic() {
        let s = BuildState::empty(5).apply_placement(Cell::new(3, 1), false).unwrap();
        let a = build_prompt("cross", &s, &grid5()).render();
        let b = build_prompt("cross", &s, &grid5()).render();
        assert_eq!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn origin_block_on_bottom_row() {
        let s = BuildState::empty(5).apply_placement(Cell::new(0, 0), false).unwrap();
        let p = build_prompt("L", &s, &grid5());
        assert!(p.scene_grid().lines().last().unwrap().starts_with('x'));
    }

    #[test]
    fn reprompt_marks_misplaced_block() {
        let s = BuildState::empty(5).apply_placement(Cell::new(1, 2), false).unwrap();
        let p = build_reprompt("cross", &s, &grid5(), "planned (2,2), observed (1,2)");
        // y = 2 is the third printed row
        assert_eq!(p.scene_grid().lines().nth(2), Some("o x o o o"));
        assert!(p.rules.contains("Blocks cannot be removed"));
        assert!(p.rules.contains("observed (1,2)"));
        assert_eq!(p.task, build_prompt("cross", &s, &grid5()).task);
    }

    #[test]
    fn reprompt_scene_matches_prompt_scene() {
        let s = BuildState::empty(5).apply_placement(Cell::new(2, 1), false).unwrap();
        assert_eq!(
            build_reprompt("square", &s, &grid5(), "none").current_scene,
            build_prompt("square", &s, &grid5()).current_scene
        );
    }

    #[test]
    fn used_list_names_every_occupied_cell() {
        let s = BuildState::empty(5)
            .apply_placement(Cell::new(1, 2), false)
            .unwrap()
            .apply_placement(Cell::new(2, 2), false)
            .unwrap()
            .apply_placement(Cell::new(2, 2), true)
            .unwrap();
        let p = build_reprompt("cross", &s, &grid5(), "misplaced");
        assert!(p.current_scene.contains("[1, 2], [2, 2, 1]"));
    }
}
