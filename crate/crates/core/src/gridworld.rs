//! Discretized world model, build-pad occupancy and the text scene encoding.
//!
//! Pad cells are indexed `(x, y)` with `(0, 0)` at the bottom-left corner of
//! the pad. The scene text prints the top row (`y = pad_size - 1`) first so the
//! printed picture reads like the pad seen from above.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default side length of one world cell.
pub const DEFAULT_CELL_SIZE_M: f64 = 0.01;

/// Highest stack a cell can hold (layer 0 and layer 1).
pub const MAX_STACK_HEIGHT: u8 = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("world dimension `{field}` must be at least 1")]
    ZeroDimension { field: &'static str },
    #[error("cell_size_m must be finite and > 0, got {0}")]
    CellSize(f64),
    #[error("pad_size must be at least 1")]
    ZeroPad,
    #[error("pad exceeds world bounds along `{field}`: origin {origin} + pad {pad} > {limit}")]
    PadExceedsBounds {
        field: &'static str,
        origin: usize,
        pad: usize,
        limit: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateError {
    #[error("cell ({x}, {y}) is outside the {pad_size}x{pad_size} pad")]
    OutOfBounds { x: i64, y: i64, pad_size: usize },
    #[error("cannot stack on free cell {0}")]
    StackOnFree(Cell),
    #[error("cell {0} already holds a layer-1 block")]
    StackFull(Cell),
    #[error("cell {0} is already occupied")]
    Occupied(Cell),
    #[error("step index {step} does not follow previous step {previous}")]
    StepOrder { step: usize, previous: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SceneParseError {
    #[error("scene text is empty")]
    Empty,
    #[error("row {row} has {found} symbols, expected {expected}")]
    RaggedRow {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("unknown symbol `{symbol}` in row {row}")]
    UnknownSymbol { row: usize, symbol: String },
}

/// World extent in cells: `h` vertical, `w` along x, `l` along y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldDims {
    pub h: usize,
    pub w: usize,
    pub l: usize,
}

impl WorldDims {
    pub fn new(h: usize, w: usize, l: usize) -> Self {
        Self { h, w, l }
    }
}

/// A pad cell. `(0, 0)` is the bottom-left corner of the pad.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    /// Offset this cell, returning `None` if the result leaves a pad of `pad_size`.
    pub fn offset(self, dx: i64, dy: i64, pad_size: usize) -> Option<Cell> {
        let x = self.x as i64 + dx;
        let y = self.y as i64 + dy;
        let n = pad_size as i64;
        ((0..n).contains(&x) && (0..n).contains(&y)).then(|| Cell::new(x as usize, y as usize))
    }

    pub fn in_pad(self, pad_size: usize) -> bool {
        self.x < pad_size && self.y < pad_size
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Discretized build volume with a square build pad embedded in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridWorld {
    dims_cells: WorldDims,
    cell_size_m: f64,
    pad_size: usize,
    pad_origin_cell: (usize, usize),
}

impl GridWorld {
    pub fn new(
        dims_cells: WorldDims,
        cell_size_m: f64,
        pad_size: usize,
        pad_origin_cell: (usize, usize),
    ) -> Result<Self, WorldError> {
        for (field, v) in [("h", dims_cells.h), ("w", dims_cells.w), ("l", dims_cells.l)] {
            if v == 0 {
                return Err(WorldError::ZeroDimension { field });
            }
        }
        if !(cell_size_m.is_finite() && cell_size_m > 0.0) {
            return Err(WorldError::CellSize(cell_size_m));
        }
        if pad_size == 0 {
            return Err(WorldError::ZeroPad);
        }
        let (ox, oy) = pad_origin_cell;
        if ox + pad_size > dims_cells.w {
            return Err(WorldError::PadExceedsBounds {
                field: "x",
                origin: ox,
                pad: pad_size,
                limit: dims_cells.w,
            });
        }
        if oy + pad_size > dims_cells.l {
            return Err(WorldError::PadExceedsBounds {
                field: "y",
                origin: oy,
                pad: pad_size,
                limit: dims_cells.l,
            });
        }
        Ok(Self {
            dims_cells,
            cell_size_m,
            pad_size,
            pad_origin_cell,
        })
    }

    /// A world just large enough to hold a pad of `pad_size` cells.
    pub fn with_pad(pad_size: usize) -> Result<Self, WorldError> {
        Self::new(
            WorldDims::new(pad_size.max(1), pad_size, pad_size),
            DEFAULT_CELL_SIZE_M,
            pad_size,
            (0, 0),
        )
    }

    pub fn dims_cells(&self) -> WorldDims {
        self.dims_cells
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell_size_m
    }

    pub fn pad_size(&self) -> usize {
        self.pad_size
    }

    pub fn pad_origin_cell(&self) -> (usize, usize) {
        self.pad_origin_cell
    }

    pub fn empty_state(&self) -> BuildState {
        BuildState::empty(self.pad_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellStatus {
    Free,
    Occupied,
    Stacked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedBlock {
    pub cell: Cell,
    pub layer: u8,
    pub step_index: usize,
}

/// Pad occupancy plus the ordered ledger of placed blocks.
///
/// Mutation returns a new value; the receiver is left untouched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildState {
    pad_size: usize,
    occupancy: Vec<CellStatus>,
    placed: Vec<PlacedBlock>,
}

impl BuildState {
    pub fn empty(pad_size: usize) -> Self {
        Self {
            pad_size,
            occupancy: vec![CellStatus::Free; pad_size * pad_size],
            placed: Vec::new(),
        }
    }

    pub fn pad_size(&self) -> usize {
        self.pad_size
    }

    pub fn placed(&self) -> &[PlacedBlock] {
        &self.placed
    }

    fn index(&self, cell: Cell) -> usize {
        cell.y * self.pad_size + cell.x
    }

    fn check_bounds(&self, cell: Cell) -> Result<(), StateError> {
        if cell.in_pad(self.pad_size) {
            Ok(())
        } else {
            Err(StateError::OutOfBounds {
                x: cell.x as i64,
                y: cell.y as i64,
                pad_size: self.pad_size,
            })
        }
    }

    pub fn status(&self, cell: Cell) -> Option<CellStatus> {
        cell.in_pad(self.pad_size)
            .then(|| self.occupancy[self.index(cell)])
    }

    pub fn is_occupied(&self, cell: Cell) -> bool {
        matches!(
            self.status(cell),
            Some(CellStatus::Occupied | CellStatus::Stacked)
        )
    }

    /// Place a block on `cell`, or on top of the block already there when `stacked`.
    pub fn apply_placement(&self, cell: Cell, stacked: bool) -> Result<BuildState, StateError> {
        let step = self.placed.last().map_or(0, |p| p.step_index + 1);
        self.apply_placement_at_step(cell, stacked, step)
    }

    /// Like [`apply_placement`](Self::apply_placement) but records an explicit step index.
    pub fn apply_placement_at_step(
        &self,
        cell: Cell,
        stacked: bool,
        step_index: usize,
    ) -> Result<BuildState, StateError> {
        self.check_bounds(cell)?;
        if let Some(last) = self.placed.last() {
            if step_index <= last.step_index {
                return Err(StateError::StepOrder {
                    step: step_index,
                    previous: last.step_index,
                });
            }
        }
        let idx = self.index(cell);
        let (status, layer) = match (self.occupancy[idx], stacked) {
            (CellStatus::Free, false) => (CellStatus::Occupied, 0),
            (CellStatus::Free, true) => return Err(StateError::StackOnFree(cell)),
            (CellStatus::Occupied, true) => (CellStatus::Stacked, 1),
            (CellStatus::Occupied, false) => return Err(StateError::Occupied(cell)),
            (CellStatus::Stacked, _) => return Err(StateError::StackFull(cell)),
        };
        let mut next = self.clone();
        next.occupancy[idx] = status;
        next.placed.push(PlacedBlock {
            cell,
            layer,
            step_index,
        });
        Ok(next)
    }

    /// The next layer a block dropped on `cell` would land on, if the cell has room.
    pub fn landing_layer(&self, cell: Cell) -> Option<u8> {
        match self.status(cell)? {
            CellStatus::Free => Some(0),
            CellStatus::Occupied => Some(1),
            CellStatus::Stacked => None,
        }
    }

    /// Exactly the non-free cells.
    pub fn occupied_cells(&self) -> BTreeSet<Cell> {
        self.cells_where(|s| s != CellStatus::Free)
    }

    pub fn stacked_cells(&self) -> BTreeSet<Cell> {
        self.cells_where(|s| s == CellStatus::Stacked)
    }

    fn cells_where(&self, pred: impl Fn(CellStatus) -> bool) -> BTreeSet<Cell> {
        self.occupancy
            .iter()
            .enumerate()
            .filter(|(_, s)| pred(**s))
            .map(|(i, _)| Cell::new(i % self.pad_size, i / self.pad_size))
            .collect()
    }

    pub fn footprint(&self) -> Footprint {
        Footprint::from_cells(self.pad_size, self.occupied_cells())
            .expect("occupied cells are always in bounds")
    }

    /// Render the o/x scene grid, top row first.
    pub fn render_scene_text(&self) -> String {
        self.footprint().render()
    }
}

/// A square boolean grid over the pad, used for design layouts and IoU scoring.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Footprint {
    size: usize,
    cells: Vec<bool>,
}

impl Footprint {
    pub fn empty(size: usize) -> Self {
        Self {
            size,
            cells: vec![false; size * size],
        }
    }

    pub fn from_cells(
        size: usize,
        cells: impl IntoIterator<Item = Cell>,
    ) -> Result<Self, StateError> {
        let mut grid = Self::empty(size);
        for c in cells {
            grid.insert(c)?;
        }
        Ok(grid)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn insert(&mut self, cell: Cell) -> Result<(), StateError> {
        if !cell.in_pad(self.size) {
            return Err(StateError::OutOfBounds {
                x: cell.x as i64,
                y: cell.y as i64,
                pad_size: self.size,
            });
        }
        self.cells[cell.y * self.size + cell.x] = true;
        Ok(())
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.in_pad(self.size) && self.cells[cell.y * self.size + cell.x]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Set cells in row-major order from `y = 0`.
    pub fn cells(&self) -> Vec<Cell> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| Cell::new(i % self.size, i / self.size))
            .collect()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.cells
    }

    pub fn render(&self) -> String {
        let n = self.size;
        (0..n)
            .rev()
            .map(|y| {
                (0..n)
                    .map(|x| if self.cells[y * n + x] { "x" } else { "o" })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Parse the o/x grid produced by [`render`](Self::render). Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, SceneParseError> {
        let rows: Vec<Vec<&str>> = text
            .lines()
            .map(str::split_whitespace)
            .map(Iterator::collect)
            .filter(|r: &Vec<&str>| !r.is_empty())
            .collect();
        let n = rows.len();
        if n == 0 {
            return Err(SceneParseError::Empty);
        }
        let mut grid = Self::empty(n);
        for (row, symbols) in rows.iter().enumerate() {
            if symbols.len() != n {
                return Err(SceneParseError::RaggedRow {
                    row,
                    found: symbols.len(),
                    expected: n,
                });
            }
            let y = n - 1 - row;
            for (x, s) in symbols.iter().enumerate() {
                grid.cells[y * n + x] = match *s {
                    "x" | "X" => true,
                    "o" | "O" => false,
                    other => {
                        return Err(SceneParseError::UnknownSymbol {
                            row,
                            symbol: other.to_string(),
                        })
                    }
                };
            }
        }
        Ok(grid)
    }
}
