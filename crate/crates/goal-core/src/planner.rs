//! Fast marching method distance fields, steepest-descent path extraction,
//! and trajectory-based visibility simulation.
//!
//! The eikonal solve `|∇T| = 1` uses the first-order upwind scheme on the
//! 8-neighbor stencil (each update considers an axis neighbor together with
//! an adjacent diagonal neighbor). This keeps the field at or below the
//! 8-neighbor Dijkstra distance everywhere while staying within one cell of
//! Euclidean distance on obstacle-free grids.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

use crate::grid::Cell;
use crate::map::{SemanticMap, VisibilityMask};

pub const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Attempts for sampling a mutually reachable trajectory endpoint pair.
pub const TRAJECTORY_RETRY_BUDGET: usize = 16;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("no sources given")]
    NoSources,
    #[error("source cell {0:?} is not traversable")]
    SourceBlocked(Cell),
    #[error("cell {0:?} is unreachable from the sources")]
    Unreachable(Cell),
    #[error("map has fewer than two free cells")]
    NoFreeSpace,
    #[error("map has no occupancy channels")]
    NoOccupancy,
    #[error("visibility window must be odd, got {0}")]
    EvenWindow(usize),
}

/// Geodesic distance field over a traversability grid.
#[derive(Clone, Debug)]
pub struct DistanceField {
    dist: Array2<f64>,
    sources: Vec<Cell>,
}

impl DistanceField {
    /// Distance in cell units; `+∞` for unreachable or blocked cells.
    pub fn distance(&self, cell: Cell) -> f64 {
        self.dist[[cell.row, cell.col]]
    }

    pub fn is_reachable(&self, cell: Cell) -> bool {
        self.dist[[cell.row, cell.col]].is_finite()
    }

    pub fn sources(&self) -> &[Cell] {
        &self.sources
    }

    pub fn grid(&self) -> &Array2<f64> {
        &self.dist
    }

    pub fn height(&self) -> usize {
        self.dist.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.dist.shape()[1]
    }
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    cell: Cell,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Distances are finite by construction; tie-break row-major for
        // deterministic settle order.
        self.dist
            .total_cmp(&other.dist)
            .then_with(|| self.cell.cmp(&other.cell))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// First-order FMM solve of `|∇T| = 1` with unit speed on traversable cells.
pub fn fmm_distance(
    traversable: &Array2<bool>,
    sources: &[Cell],
) -> Result<DistanceField, PlanError> {
    if sources.is_empty() {
        return Err(PlanError::NoSources);
    }
    let (h, w) = (traversable.shape()[0], traversable.shape()[1]);
    for &s in sources {
        if !traversable[[s.row, s.col]] {
            return Err(PlanError::SourceBlocked(s));
        }
    }

    let mut dist = Array2::from_elem((h, w), f64::INFINITY);
    let mut heap = BinaryHeap::new();
    for &s in sources {
        dist[[s.row, s.col]] = 0.0;
        heap.push(Reverse(HeapEntry { dist: 0.0, cell: s }));
    }

    while let Some(Reverse(entry)) = heap.pop() {
        if entry.dist > dist[[entry.cell.row, entry.cell.col]] {
            continue; // stale
        }
        // The stencil reaches diagonals, so a settled cell can improve all
        // eight neighbors.
        for n in entry.cell.neighbors8(h, w) {
            if !traversable[[n.row, n.col]] {
                continue;
            }
            let cand = solve_cell(&dist, traversable, n);
            if cand < dist[[n.row, n.col]] {
                dist[[n.row, n.col]] = cand;
                heap.push(Reverse(HeapEntry { dist: cand, cell: n }));
            }
        }
    }

    Ok(DistanceField {
        dist,
        sources: sources.to_vec(),
    })
}

/// Upwind update at one cell: the minimum over the eight (axis, diagonal)
/// simplices of the local plane-wave solution
///   T = Ta + sqrt(1 − δ²),  δ = Ta − Td ∈ [0, 1/√2],
/// degenerating to `Ta + 1` (pure axis) or `Td + √2` (pure diagonal).
fn solve_cell(dist: &Array2<f64>, traversable: &Array2<bool>, cell: Cell) -> f64 {
    let (h, w) = (dist.shape()[0], dist.shape()[1]);
    let value = |dr: isize, dc: isize| -> f64 {
        let r = cell.row as isize + dr;
        let c = cell.col as isize + dc;
        if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
            return f64::INFINITY;
        }
        let (r, c) = (r as usize, c as usize);
        if traversable[[r, c]] {
            dist[[r, c]]
        } else {
            f64::INFINITY
        }
    };

    // (axis offset, diagonal offset) pairs covering all eight simplices.
    const SIMPLICES: [((isize, isize), (isize, isize)); 8] = [
        ((-1, 0), (-1, -1)),
        ((-1, 0), (-1, 1)),
        ((1, 0), (1, -1)),
        ((1, 0), (1, 1)),
        ((0, -1), (-1, -1)),
        ((0, -1), (1, -1)),
        ((0, 1), (-1, 1)),
        ((0, 1), (1, 1)),
    ];

    let mut best = f64::INFINITY;
    for ((ar, ac), (dr, dc)) in SIMPLICES {
        let ta = value(ar, ac);
        let td = value(dr, dc);
        let cand = match (ta.is_finite(), td.is_finite()) {
            (false, false) => continue,
            (true, false) => ta + 1.0,
            (false, true) => td + SQRT2,
            (true, true) => {
                if td >= ta {
                    ta + 1.0
                } else {
                    let delta = ta - td;
                    if delta >= 1.0 / SQRT2 {
                        td + SQRT2
                    } else {
                        ta + (1.0 - delta * delta).sqrt()
                    }
                }
            }
        };
        best = best.min(cand);
    }
    best
}

/// Strictly distance-decreasing 8-neighbor walk from `start` to a source
/// cell; each step moves to the neighbor with the smallest distance
/// (row-major tie-break).
pub fn extract_path(field: &DistanceField, start: Cell) -> Result<Vec<Cell>, PlanError> {
    if !field.is_reachable(start) {
        return Err(PlanError::Unreachable(start));
    }
    let (h, w) = (field.height(), field.width());
    let mut path = vec![start];
    let mut cur = start;
    let budget = h * w;
    while field.distance(cur) > 0.0 {
        let here = field.distance(cur);
        let mut best: Option<(f64, Cell)> = None;
        for n in cur.neighbors8(h, w) {
            let d = field.distance(n);
            if d < here {
                // neighbors8 iterates row-major, so `<` keeps the first of
                // any tied pair.
                if best.map(|(bd, _)| d < bd).unwrap_or(true) {
                    best = Some((d, n));
                }
            }
        }
        // Every finite non-source cell received its value from a strictly
        // smaller neighbor, so descent cannot stall.
        let (_, next) = best.ok_or(PlanError::Unreachable(cur))?;
        path.push(next);
        cur = next;
        if path.len() > budget {
            return Err(PlanError::Unreachable(start));
        }
    }
    Ok(path)
}

/// Shape of the simulated instantaneous visibility region.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum VisibilityShape {
    /// `window × window` rectangle centered on the cell; `window` odd.
    Rect { window: usize },
    /// 90° cone of radius `range` opening along the heading.
    Fan { range: usize },
}

impl VisibilityShape {
    pub fn validate(&self) -> Result<(), PlanError> {
        match self {
            VisibilityShape::Rect { window } => {
                if window % 2 == 0 {
                    Err(PlanError::EvenWindow(*window))
                } else {
                    Ok(())
                }
            }
            VisibilityShape::Fan { .. } => Ok(()),
        }
    }
}

/// Reveals a clipped `window × window` rectangle around `center`; returns
/// the newly observed cells.
pub fn reveal_rect(mask: &mut VisibilityMask, center: Cell, window: usize) -> Vec<Cell> {
    let half = (window / 2) as isize;
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let mut delta = Vec::new();
    for dr in -half..=half {
        for dc in -half..=half {
            let r = center.row as isize + dr;
            let c = center.col as isize + dc;
            if r >= 0 && c >= 0 && r < h && c < w {
                let cell = Cell::new(r as usize, c as usize);
                if mask.reveal(cell) {
                    delta.push(cell);
                }
            }
        }
    }
    delta
}

/// Reveals a 90° cone of radius `range` opening along `heading` (a nonzero
/// grid direction); the center cell is always revealed.
pub fn reveal_fan(
    mask: &mut VisibilityMask,
    center: Cell,
    range: usize,
    heading: (isize, isize),
) -> Vec<Cell> {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let mut delta = Vec::new();
    if mask.reveal(center) {
        delta.push(center);
    }
    let hn = ((heading.0 * heading.0 + heading.1 * heading.1) as f32).sqrt();
    if hn == 0.0 {
        return delta;
    }
    let (hr, hc) = (heading.0 as f32 / hn, heading.1 as f32 / hn);
    let range_i = range as isize;
    let cos_half = (std::f32::consts::FRAC_PI_4).cos();
    for dr in -range_i..=range_i {
        for dc in -range_i..=range_i {
            if dr == 0 && dc == 0 {
                continue;
            }
            let len = ((dr * dr + dc * dc) as f32).sqrt();
            if len > range as f32 {
                continue;
            }
            let cosang = (dr as f32 * hr + dc as f32 * hc) / len;
            if cosang < cos_half {
                continue;
            }
            let r = center.row as isize + dr;
            let c = center.col as isize + dc;
            if r >= 0 && c >= 0 && r < h && c < w {
                let cell = Cell::new(r as usize, c as usize);
                if mask.reveal(cell) {
                    delta.push(cell);
                }
            }
        }
    }
    delta
}

/// Collects the traversable cells of a map's free channel.
pub fn free_cells(map: &SemanticMap) -> Result<Vec<Cell>, PlanError> {
    let traversable = map.traversable().ok_or(PlanError::NoOccupancy)?;
    Ok(traversable
        .indexed_iter()
        .filter_map(|((r, c), &free)| free.then_some(Cell::new(r, c)))
        .collect())
}

/// Samples two distinct free cells, plans an FMM path between them and
/// reveals a rectangle around every path cell.
pub fn simulate_trajectory_mask<R: Rng + ?Sized>(
    map: &SemanticMap,
    rng: &mut R,
    window: usize,
) -> Result<VisibilityMask, PlanError> {
    simulate_trajectory_mask_with(map, rng, VisibilityShape::Rect { window })
}

/// As [`simulate_trajectory_mask`], with a configurable visibility shape.
/// Fan mode opens along the direction of motion.
pub fn simulate_trajectory_mask_with<R: Rng + ?Sized>(
    map: &SemanticMap,
    rng: &mut R,
    shape: VisibilityShape,
) -> Result<VisibilityMask, PlanError> {
    shape.validate()?;
    let traversable = map.traversable().ok_or(PlanError::NoOccupancy)?;
    let free = free_cells(map)?;
    if free.len() < 2 {
        return Err(PlanError::NoFreeSpace);
    }

    let mut last_err = PlanError::NoFreeSpace;
    for _ in 0..TRAJECTORY_RETRY_BUDGET {
        let a = free[rng.gen_range(0..free.len())];
        let b = free[rng.gen_range(0..free.len())];
        if a == b {
            continue;
        }
        let field = fmm_distance(&traversable, &[a])?;
        if !field.is_reachable(b) {
            last_err = PlanError::Unreachable(b);
            continue;
        }
        let path = extract_path(&field, b)?;
        let mut mask = VisibilityMask::new_unobserved(map.height(), map.width());
        for (i, &cell) in path.iter().enumerate() {
            match shape {
                VisibilityShape::Rect { window } => {
                    reveal_rect(&mut mask, cell, window);
                }
                VisibilityShape::Fan { range } => {
                    let heading = path_heading(&path, i);
                    reveal_fan(&mut mask, cell, range, heading);
                }
            }
        }
        return Ok(mask);
    }
    Err(last_err)
}

fn path_heading(path: &[Cell], i: usize) -> (isize, isize) {
    let (from, to) = if i + 1 < path.len() {
        (path[i], path[i + 1])
    } else if i > 0 {
        (path[i - 1], path[i])
    } else {
        return (1, 0);
    };
    (
        to.row as isize - from.row as isize,
        to.col as isize - from.col as isize,
    )
}
