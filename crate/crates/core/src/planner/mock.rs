//! Deterministic planner fixture.
//!
//! Shapes are stored as an ordered base layout plus the symmetry group under
//! which the shape is still "the same design". On a reprompt the mock picks the
//! variant that reuses the most existing blocks, so out-of-order placements
//! are simply completed, a misplaced block can pull the whole design over
//! (translation or rotation), and blocks that fit no variant are kept as part
//! of the new layout.

use std::collections::HashSet;

use super::{ActionPlan, BackendError, ChatRequest, Completion, PlannerBackend, Target};
use crate::gridworld::{Cell, Footprint};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symmetry {
    /// Translations only.
    Translate,
    /// Translations and the four quarter-turn rotations.
    Rotate,
    /// Translations, rotations and mirror images.
    Dihedral,
}

type Transform = fn(i64, i64) -> (i64, i64);

impl Symmetry {
    fn transforms(self) -> &'static [Transform] {
        const ID: Transform = |x, y| (x, y);
        const R90: Transform = |x, y| (-y, x);
        const R180: Transform = |x, y| (-x, -y);
        const R270: Transform = |x, y| (y, -x);
        const MX: Transform = |x, y| (-x, y);
        const MY: Transform = |x, y| (x, -y);
        const MD: Transform = |x, y| (y, x);
        const MA: Transform = |x, y| (-y, -x);
        match self {
            Symmetry::Translate => &[ID],
            Symmetry::Rotate => &[ID, R90, R180, R270],
            Symmetry::Dihedral => &[ID, R90, R180, R270, MX, MY, MD, MA],
        }
    }
}

/// A named shape with its execution order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeDesign {
    pub name: String,
    pub aliases: Vec<String>,
    /// Base layout in placement order.
    pub cells: Vec<Cell>,
    pub symmetry: Symmetry,
}

impl ShapeDesign {
    pub fn new(name: &str, aliases: &[&str], cells: &[(usize, usize)], symmetry: Symmetry) -> Self {
        Self {
            name: name.to_string(),
            aliases: aliases.iter().map(|a| a.to_string()).collect(),
            cells: cells.iter().map(|&(x, y)| Cell::new(x, y)).collect(),
            symmetry,
        }
    }

    /// Every placement of the shape on a `pad_size` pad, base placement first,
    /// then by increasing displacement. Each variant keeps the base placement order.
    pub fn variants(&self, pad_size: usize) -> Vec<Vec<Cell>> {
        let n = pad_size as i64;
        let base_min = (
            self.cells.iter().map(|c| c.x).min().unwrap_or(0) as i64,
            self.cells.iter().map(|c| c.y).min().unwrap_or(0) as i64,
        );
        let mut candidates: Vec<(i64, usize, i64, i64, Vec<Cell>)> = Vec::new();
        for (ti, t) in self.symmetry.transforms().iter().enumerate() {
            let mapped: Vec<(i64, i64)> = self
                .cells
                .iter()
                .map(|c| t(c.x as i64, c.y as i64))
                .collect();
            let minx = mapped.iter().map(|p| p.0).min().unwrap_or(0);
            let miny = mapped.iter().map(|p| p.1).min().unwrap_or(0);
            let w = mapped.iter().map(|p| p.0).max().unwrap_or(0) - minx;
            let h = mapped.iter().map(|p| p.1).max().unwrap_or(0) - miny;
            for oy in 0..(n - h).max(0) {
                for ox in 0..(n - w).max(0) {
                    let cells = mapped
                        .iter()
                        .map(|&(x, y)| Cell::new((x - minx + ox) as usize, (y - miny + oy) as usize))
                        .collect();
                    let dist = (ox - base_min.0).abs() + (oy - base_min.1).abs();
                    candidates.push((dist, ti, oy, ox, cells));
                }
            }
        }
        candidates.sort_by_key(|c| (c.0, c.1, c.2, c.3));
        let mut seen: HashSet<Vec<Cell>> = HashSet::new();
        candidates
            .into_iter()
            .filter_map(|(_, _, _, _, cells)| {
                let mut key = cells.clone();
                key.sort();
                seen.insert(key).then_some(cells)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Entry {
    Shape(ShapeDesign),
    /// A single acceptable answer, matched by exact request text.
    Fixed { request: String, cells: Vec<Cell> },
}

impl Entry {
    fn name(&self) -> &str {
        match self {
            Entry::Shape(s) => &s.name,
            Entry::Fixed { request, .. } => request,
        }
    }
}

/// Registered mock designs, keyed by request keyword.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DesignLibrary {
    entries: Vec<Entry>,
}

fn normalize(s: &str) -> String {
    s.trim()
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

impl DesignLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    /// The six 5x5 test designs: smiley face, cross, diamond, square, letter L
    /// and "two columns on the left and bottom right corner only".
    pub fn standard() -> Self {
        let mut lib = Self::new();
        lib.register_shape(ShapeDesign::new(
            "smiley face",
            &["smiley", "smile", "happy face"],
            &[(1, 3), (3, 3), (0, 1), (1, 0), (2, 0), (3, 0), (4, 1)],
            Symmetry::Translate,
        ));
        lib.register_shape(ShapeDesign::new(
            "cross",
            &["latin cross"],
            &[(2, 0), (2, 1), (2, 2), (2, 3), (2, 4), (1, 3), (3, 3)],
            Symmetry::Rotate,
        ));
        lib.register_shape(ShapeDesign::new(
            "diamond",
            &["rhombus"],
            &[(2, 0), (3, 1), (4, 2), (3, 3), (2, 4), (1, 3), (0, 2), (1, 1)],
            Symmetry::Translate,
        ));
        lib.register_shape(ShapeDesign::new(
            "square",
            &["square outline"],
            &[(1, 1), (2, 1), (3, 1), (3, 2), (3, 3), (2, 3), (1, 3), (1, 2)],
            Symmetry::Translate,
        ));
        lib.register_shape(ShapeDesign::new(
            "letter l",
            &["l", "the letter l"],
            &[(1, 4), (1, 3), (1, 2), (1, 1), (1, 0), (2, 0), (3, 0)],
            Symmetry::Translate,
        ));
        lib.register_shape(ShapeDesign::new(
            "two columns on the left and bottom right corner only",
            &["two columns"],
            &[
                (0, 0),
                (0, 1),
                (0, 2),
                (0, 3),
                (0, 4),
                (1, 0),
                (1, 1),
                (1, 2),
                (1, 3),
                (1, 4),
                (4, 0),
            ],
            Symmetry::Translate,
        ));
        lib
    }

    pub fn register_shape(&mut self, shape: ShapeDesign) {
        self.entries.push(Entry::Shape(shape));
    }

    /// Register a one-answer design matched by its exact request text.
    pub fn register_fixed(&mut self, request: &str, layout: &Footprint) {
        self.entries.push(Entry::Fixed {
            request: request.to_string(),
            cells: layout.cells(),
        });
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name().to_string()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn lookup(&self, request: &str) -> Option<&Entry> {
        let req = normalize(request);
        let exact = self.entries.iter().find(|e| match e {
            Entry::Fixed { request, .. } => normalize(request) == req,
            Entry::Shape(s) => normalize(&s.name) == req || s.aliases.iter().any(|a| normalize(a) == req),
        });
        if exact.is_some() {
            return exact;
        }
        // keyword containment, longest keyword wins; short aliases need an exact match
        let padded = format!(" {req} ");
        self.entries
            .iter()
            .filter_map(|e| match e {
                Entry::Shape(s) => std::iter::once(&s.name)
                    .chain(s.aliases.iter())
                    .map(|k| normalize(k))
                    .filter(|k| k.len() >= 3 && padded.contains(&format!(" {k} ")))
                    .map(|k| k.len())
                    .max()
                    .map(|len| (len, e)),
                Entry::Fixed { .. } => None,
            })
            .max_by_key(|(len, _)| *len)
            .map(|(_, e)| e)
    }

    pub fn contains(&self, request: &str) -> bool {
        self.lookup(request).is_some()
    }

    fn unknown(&self, request: &str) -> BackendError {
        BackendError::UnknownDesign {
            request: request.to_string(),
            available: self.names(),
        }
    }

    /// Every layout the library would accept as this design on a `pad_size` pad.
    pub fn family(&self, request: &str, pad_size: usize) -> Result<Vec<Footprint>, BackendError> {
        let entry = self.lookup(request).ok_or_else(|| self.unknown(request))?;
        let layouts = match entry {
            Entry::Shape(s) => s.variants(pad_size),
            Entry::Fixed { cells, .. } => vec![cells.clone()],
        };
        Ok(layouts
            .into_iter()
            .filter_map(|v| Footprint::from_cells(pad_size, v).ok())
            .collect())
    }

    /// Plan that completes `request` given the cells already occupied.
    pub fn plan_for(&self, request: &str, occupied: &Footprint) -> Result<ActionPlan, BackendError> {
        let entry = self.lookup(request).ok_or_else(|| self.unknown(request))?;
        let n = occupied.size();
        let used = occupied.cells();
        let (title, layout, reasoning) = match entry {
            Entry::Fixed { request, cells } => {
                if cells.iter().any(|c| !c.in_pad(n)) {
                    return Err(BackendError::BadResponse(format!(
                        "fixture `{request}` does not fit a {n}x{n} pad"
                    )));
                }
                (request.clone(), cells.clone(), "Registered answer layout.".to_string())
            }
            Entry::Shape(s) => {
                let variants = s.variants(n);
                if variants.is_empty() {
                    return Err(BackendError::BadResponse(format!(
                        "design `{}` does not fit a {n}x{n} pad",
                        s.name
                    )));
                }
                // most reused blocks wins; ties keep the earliest (least displaced) variant
                let (idx, overlap) = variants
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (i, v.iter().filter(|c| occupied.contains(**c)).count()))
                    .fold((0, 0), |best, cur| if cur.1 > best.1 { cur } else { best });
                let chosen = variants[idx].clone();
                let strays = used.len() - overlap;
                let reasoning = match (used.is_empty(), idx == 0, strays) {
                    (true, _, _) => format!("Base {} layout.", s.name),
                    (false, true, 0) => "Existing blocks already fit the design; placing the cells that are still missing.".to_string(),
                    (false, false, 0) => "Shifted the design so that every existing block is part of it.".to_string(),
                    (false, _, k) => format!(
                        "{k} existing block(s) fit no placement of the design; keeping them as part of a modified layout."
                    ),
                };
                (s.name.clone(), chosen, reasoning)
            }
        };
        let coordinates = layout
            .iter()
            .filter(|c| !occupied.contains(**c))
            .map(|c| Target::ground(*c))
            .collect();
        Ok(ActionPlan {
            title,
            coordinates,
            used_coordinates: used,
            reasoning,
        })
    }
}

/// Planner backend answering from a [`DesignLibrary`].
///
/// Responses are wrapped in prose and a code fence the way chat models
/// usually reply.
#[derive(Debug, Clone)]
pub struct MockBackend {
    library: DesignLibrary,
}

impl MockBackend {
    pub fn new(library: DesignLibrary) -> Self {
        Self { library }
    }

    pub fn standard() -> Self {
        Self::new(DesignLibrary::standard())
    }

    pub fn library(&self) -> &DesignLibrary {
        &self.library
    }
}

impl PlannerBackend for MockBackend {
    fn label(&self) -> String {
        "mock".to_string()
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let scene = Footprint::parse(&request.prompt.scene_grid())
            .map_err(|e| BackendError::BadResponse(format!("unreadable scene grid: {e}")))?;
        let plan = self.library.plan_for(&request.prompt.design_request, &scene)?;
        Ok(Completion {
            text: format!(
                "Here is the plan for \"{}\".\n```json\n{}\n```\n",
                plan.title,
                plan.to_json()
            ),
            latency_ms: None,
            tokens: None,
        })
    }
}
