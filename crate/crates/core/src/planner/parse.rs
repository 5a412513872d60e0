use std::collections::HashSet;

use serde_json::{Map, Value};

use super::{ActionPlan, PlanParseError, Target};
use crate::gridworld::{Cell, GridWorld};

const REQUIRED: [&str; 3] = ["title", "coordinates", "reasoning"];
const KNOWN: [&str; 4] = ["title", "coordinates", "used_coordinates", "reasoning"];

/// Locate the first balanced `{ ... }` span in `raw` that parses as a JSON object.
///
/// Leading prose and code fences are skipped. Braces inside string literals
/// are ignored when matching.
pub fn extract_json(raw: &str) -> Option<&str> {
    let bytes = raw.as_bytes();
    let mut start = 0;
    while let Some(off) = raw[start..].find('{') {
        let open = start + off;
        if let Some(close) = matching_brace(bytes, open) {
            let candidate = &raw[open..=close];
            if matches!(serde_json::from_str::<Value>(candidate), Ok(Value::Object(_))) {
                return Some(candidate);
            }
        }
        start = open + 1;
    }
    None
}

fn matching_brace(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// A plan parsed for scoring, with out-of-bounds and repeated cells dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LenientPlan {
    pub plan: ActionPlan,
    pub dropped_out_of_bounds: usize,
    pub dropped_duplicates: usize,
}

#[derive(Clone, Copy)]
struct Mode {
    strict_json: bool,
    lenient_cells: bool,
}

/// Parse a full backend response into an [`ActionPlan`], tolerating prose and
/// code fences around the JSON object.
pub fn parse_plan(raw: &str, grid: &GridWorld) -> Result<ActionPlan, PlanParseError> {
    parse_inner(
        raw,
        grid.pad_size(),
        Mode {
            strict_json: false,
            lenient_cells: false,
        },
    )
    .map(|l| l.plan)
}

/// Like [`parse_plan`] but the whole response must be the JSON object.
pub fn parse_plan_strict(raw: &str, grid: &GridWorld) -> Result<ActionPlan, PlanParseError> {
    parse_inner(
        raw,
        grid.pad_size(),
        Mode {
            strict_json: true,
            lenient_cells: false,
        },
    )
    .map(|l| l.plan)
}

/// Parse for IoU scoring: out-of-bounds and duplicate cells are discarded and
/// counted instead of failing the parse.
pub fn parse_plan_lenient(raw: &str, pad_size: usize) -> Result<LenientPlan, PlanParseError> {
    parse_inner(
        raw,
        pad_size,
        Mode {
            strict_json: false,
            lenient_cells: true,
        },
    )
}

fn parse_inner(raw: &str, pad_size: usize, mode: Mode) -> Result<LenientPlan, PlanParseError> {
    let json = if mode.strict_json {
        let t = raw.trim();
        if t.starts_with('{') && t.ends_with('}') {
            t
        } else {
            return Err(PlanParseError::NoJsonFound);
        }
    } else {
        extract_json(raw).ok_or(PlanParseError::NoJsonFound)?
    };
    let obj = match serde_json::from_str::<Value>(json) {
        Ok(Value::Object(m)) => m,
        _ => return Err(PlanParseError::NoJsonFound),
    };
    for key in obj.keys() {
        if !KNOWN.contains(&key.as_str()) {
            return Err(PlanParseError::SchemaMismatch(format!("unexpected field `{key}`")));
        }
    }
    for key in REQUIRED {
        if !obj.contains_key(key) {
            return Err(PlanParseError::SchemaMismatch(format!("missing field `{key}`")));
        }
    }
    let title = string_field(&obj, "title")?;
    let reasoning = string_field(&obj, "reasoning")?;

    let mut dropped_oob = 0;
    let mut dropped_dup = 0;

    let mut used = Vec::new();
    if let Some(v) = obj.get("used_coordinates") {
        let mut seen = HashSet::new();
        for (i, item) in array_field(v, "used_coordinates")?.iter().enumerate() {
            let (x, y, _) = coordinate(item, i, "used_coordinates")?;
            match to_cell(x, y, pad_size) {
                Some(c) => {
                    if seen.insert(c) {
                        used.push(c);
                    }
                }
                None if mode.lenient_cells => dropped_oob += 1,
                None => return Err(PlanParseError::OutOfBounds { x, y, pad_size }),
            }
        }
    }

    let mut coords = Vec::new();
    let mut seen = HashSet::new();
    let items = array_field(&obj["coordinates"], "coordinates")?;
    for (i, item) in items.iter().enumerate() {
        let (x, y, layer) = coordinate(item, i, "coordinates")?;
        let Some(cell) = to_cell(x, y, pad_size) else {
            if mode.lenient_cells {
                dropped_oob += 1;
                continue;
            }
            return Err(PlanParseError::OutOfBounds { x, y, pad_size });
        };
        let target = Target { cell, layer };
        if !seen.insert(target) {
            if mode.lenient_cells {
                dropped_dup += 1;
                continue;
            }
            return Err(PlanParseError::DuplicateCoordinate(target));
        }
        coords.push(target);
    }
    // An empty target list is only meaningful as "nothing left to place".
    if items.is_empty() && used.is_empty() {
        return Err(PlanParseError::SchemaMismatch(
            "`coordinates` is empty".to_string(),
        ));
    }

    Ok(LenientPlan {
        plan: ActionPlan {
            title,
            coordinates: coords,
            used_coordinates: used,
            reasoning,
        },
        dropped_out_of_bounds: dropped_oob,
        dropped_duplicates: dropped_dup,
    })
}

fn string_field(obj: &Map<String, Value>, key: &str) -> Result<String, PlanParseError> {
    match &obj[key] {
        Value::String(s) => Ok(s.clone()),
        other => Err(PlanParseError::SchemaMismatch(format!(
            "`{key}` must be a string, got {other}"
        ))),
    }
}

fn array_field<'a>(v: &'a Value, key: &str) -> Result<&'a Vec<Value>, PlanParseError> {
    v.as_array()
        .ok_or_else(|| PlanParseError::SchemaMismatch(format!("`{key}` must be an array")))
}

fn integer(v: &Value, index: usize) -> Result<i64, PlanParseError> {
    let Value::Number(n) = v else {
        return Err(PlanParseError::SchemaMismatch(format!(
            "coordinate {index} has a non-numeric component {v}"
        )));
    };
    if let Some(i) = n.as_i64() {
        return Ok(i);
    }
    match n.as_f64() {
        Some(f) if f.fract() == 0.0 && f.abs() < 1e15 => Ok(f as i64),
        _ => Err(PlanParseError::NonIntegerCoordinate {
            index,
            value: n.to_string(),
        }),
    }
}

/// `[x, y]` or `[x, y, layer]`.
fn coordinate(item: &Value, index: usize, key: &str) -> Result<(i64, i64, u8), PlanParseError> {
    let arr = item.as_array().ok_or_else(|| {
        PlanParseError::SchemaMismatch(format!("`{key}` entry {index} must be an [x, y] array"))
    })?;
    if !(arr.len() == 2 || arr.len() == 3) {
        return Err(PlanParseError::SchemaMismatch(format!(
            "`{key}` entry {index} must have 2 or 3 components, got {}",
            arr.len()
        )));
    }
    let x = integer(&arr[0], index)?;
    let y = integer(&arr[1], index)?;
    let layer = match arr.get(2) {
        None => 0,
        Some(v) => match integer(v, index)? {
            l @ (0 | 1) => l as u8,
            l => {
                return Err(PlanParseError::SchemaMismatch(format!(
                    "`{key}` entry {index} has layer {l}; only 0 and 1 are allowed"
                )))
            }
        },
    };
    Ok((x, y, layer))
}

fn to_cell(x: i64, y: i64, pad_size: usize) -> Option<Cell> {
    let n = pad_size as i64;
    ((0..n).contains(&x) && (0..n).contains(&y)).then(|| Cell::new(x as usize, y as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid5() -> GridWorld {
        GridWorld::with_pad(5).unwrap()
    }

    const APPENDIX_STYLE: &str = r#"Here is a design for a smiley face on the 5x5 grid.

```json
{
  "title": "Smiley Face",
  "coordinates": [[1, 3], [3, 3], [0, 1], [1, 0], [2, 0], [3, 0], [4, 1]],
  "used_coordinates": [],
  "reasoning": "Two eyes on row 3 and a curved mouth along the bottom {like this}."
}
```
Let me know if you want changes."#;

    #[test]
    fn parses_fenced_response() {
        let plan = parse_plan(APPENDIX_STYLE, &grid5()).unwrap();
        assert_eq!(plan.title, "Smiley Face");
        assert_eq!(plan.coordinates.len(), 7);
        assert_eq!(plan.coordinates[0], Target::ground(Cell::new(1, 3)));
        assert_eq!(plan.coordinates[6], Target::ground(Cell::new(4, 1)));
        assert!(plan.reasoning.contains("{like this}"));
    }

    #[test]
    fn used_coordinates_optional() {
        let raw = r#"{"title":"t","coordinates":[[0,0]],"reasoning":"r"}"#;
        let plan = parse_plan(raw, &grid5()).unwrap();
        assert!(plan.used_coordinates.is_empty());
    }

    #[test]
    fn duplicate_rejected() {
        let raw = r#"{"title":"t","coordinates":[[0,0],[0,0]],"reasoning":"r"}"#;
        assert_eq!(
            parse_plan(raw, &grid5()),
            Err(PlanParseError::DuplicateCoordinate(Target::ground(Cell::new(0, 0))))
        );
    }

    #[test]
    fn non_integer_rejected() {
        let raw = r#"{"title":"t","coordinates":[[2.5,1]],"reasoning":"r"}"#;
        assert!(matches!(
            parse_plan(raw, &grid5()),
            Err(PlanParseError::NonIntegerCoordinate { index: 0, .. })
        ));
        let whole = r#"{"title":"t","coordinates":[[2.0,1]],"reasoning":"r"}"#;
        assert_eq!(
            parse_plan(whole, &grid5()).unwrap().coordinates,
            vec![Target::ground(Cell::new(2, 1))]
        );
    }

    #[test]
    fn out_of_bounds_rejected() {
        for raw in [
            r#"{"title":"t","coordinates":[[5,0]],"reasoning":"r"}"#,
            r#"{"title":"t","coordinates":[[-1,0]],"reasoning":"r"}"#,
        ] {
            assert!(matches!(
                parse_plan(raw, &grid5()),
                Err(PlanParseError::OutOfBounds { .. })
            ));
        }
    }

    #[test]
    fn schema_mismatches() {
        let cases = [
            r#"{"coordinates":[[0,0]],"reasoning":"r"}"#,
            r#"{"title":"t","coordinates":[[0,0]],"reasoning":"r","extra":1}"#,
            r#"{"title":"t","coordinates":[[0]],"reasoning":"r"}"#,
            r#"{"title":"t","coordinates":[["0",1]],"reasoning":"r"}"#,
            r#"{"title":"t","coordinates":[],"reasoning":"r"}"#,
            r#"{"title":3,"coordinates":[[0,0]],"reasoning":"r"}"#,
            r#"{"title":"t","coordinates":[[0,0,2]],"reasoning":"r"}"#,
        ];
        for raw in cases {
            assert!(
                matches!(parse_plan(raw, &grid5()), Err(PlanParseError::SchemaMismatch(_))),
                "{raw}"
            );
        }
    }

    #[test]
    fn empty_targets_allowed_when_design_is_complete() {
        let raw = r#"{"title":"t","coordinates":[],"used_coordinates":[[1,1]],"reasoning":"done"}"#;
        let plan = parse_plan(raw, &grid5()).unwrap();
        assert!(plan.coordinates.is_empty());
    }

    #[test]
    fn no_json() {
        assert_eq!(parse_plan("I cannot help", &grid5()), Err(PlanParseError::NoJsonFound));
        assert_eq!(parse_plan("{ not json }", &grid5()), Err(PlanParseError::NoJsonFound));
    }

    #[test]
    fn strict_mode_rejects_prose() {
        assert_eq!(
            parse_plan_strict(APPENDIX_STYLE, &grid5()),
            Err(PlanParseError::NoJsonFound)
        );
        let raw = r#"  {"title":"t","coordinates":[[0,0]],"reasoning":"r"}  "#;
        assert!(parse_plan_strict(raw, &grid5()).is_ok());
    }

    #[test]
    fn skips_brace_in_prose_before_json() {
        let raw = r#"Use {braces} carefully. {"title":"t","coordinates":[[1,2]],"reasoning":"r"}"#;
        assert_eq!(
            parse_plan(raw, &grid5()).unwrap().coordinates,
            vec![Target::ground(Cell::new(1, 2))]
        );
    }

    #[test]
    fn stacked_coordinate() {
        let raw = r#"{"title":"t","coordinates":[[1,2],[1,2,1]],"reasoning":"r"}"#;
        assert_eq!(
            parse_plan(raw, &grid5()).unwrap().coordinates,
            vec![Target::ground(Cell::new(1, 2)), Target::stacked(Cell::new(1, 2))]
        );
    }

    #[test]
    fn lenient_drops_and_counts() {
        let raw = r#"{"title":"t","coordinates":[[0,0],[10,0],[0,0],[1,1]],"reasoning":"r"}"#;
        let l = parse_plan_lenient(raw, 5).unwrap();
        assert_eq!(l.dropped_out_of_bounds, 1);
        assert_eq!(l.dropped_duplicates, 1);
        assert_eq!(l.plan.coordinates.len(), 2);
    }

    fn arb_plan(n: usize) -> impl Strategy<Value = ActionPlan> {
        let cells = proptest::collection::btree_set((0..n, 0..n), 1..(n * n).min(20));
        let used = proptest::collection::btree_set((0..n, 0..n), 0..6);
        (cells, used, "[a-zA-Z {}\"\\\\]{0,20}", "[ -~]{0,40}").prop_map(
            move |(cells, used, title, reasoning)| ActionPlan {
                title,
                coordinates: cells.into_iter().map(|(x, y)| Target::ground(Cell::new(x, y))).collect(),
                used_coordinates: used.into_iter().map(|(x, y)| Cell::new(x, y)).collect(),
                reasoning,
            },
        )
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(plan in arb_plan(7), fence in any::<bool>()) {
            let grid = GridWorld::with_pad(7).unwrap();
            let body = plan.to_json();
            let raw = if fence { format!("Sure!\n```json\n{body}\n```") } else { body };
            prop_assert_eq!(parse_plan(&raw, &grid).unwrap(), plan);
        }

        #[test]
        fn parse_errors_are_reproducible(raw in "[\\[\\]{}\",:a-z0-9. ]{0,60}") {
            let grid = grid5();
            prop_assert_eq!(parse_plan(&raw, &grid), parse_plan(&raw, &grid));
        }
    }
}
