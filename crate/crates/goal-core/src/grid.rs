//! Grid coordinates shared across the crate.
//!
//! Cells are addressed `(row, col)` with row 0 at the top; the derived `Ord`
//! on [`Cell`] is row-major order, which every tie-breaking rule in the crate
//! relies on.

use serde::{Deserialize, Serialize};

/// A discrete grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }

    /// Euclidean distance to a continuous point.
    pub fn distance_to_point(&self, p: GridPoint) -> f32 {
        let dr = self.row as f32 - p.row;
        let dc = self.col as f32 - p.col;
        (dr * dr + dc * dc).sqrt()
    }

    /// Euclidean distance between cell centers.
    pub fn distance_to(&self, other: Cell) -> f32 {
        let dr = self.row as f32 - other.row as f32;
        let dc = self.col as f32 - other.col as f32;
        (dr * dr + dc * dc).sqrt()
    }

    /// In-bounds 4-neighbors (up, down, left, right), row-major order.
    pub fn neighbors4(&self, height: usize, width: usize) -> impl Iterator<Item = Cell> {
        let (r, c) = (self.row as isize, self.col as isize);
        [(r - 1, c), (r, c - 1), (r, c + 1), (r + 1, c)]
            .into_iter()
            .filter_map(move |(nr, nc)| in_bounds(nr, nc, height, width))
    }

    /// In-bounds 8-neighbors, row-major order.
    pub fn neighbors8(&self, height: usize, width: usize) -> impl Iterator<Item = Cell> {
        let (r, c) = (self.row as isize, self.col as isize);
        [
            (r - 1, c - 1),
            (r - 1, c),
            (r - 1, c + 1),
            (r, c - 1),
            (r, c + 1),
            (r + 1, c - 1),
            (r + 1, c),
            (r + 1, c + 1),
        ]
        .into_iter()
        .filter_map(move |(nr, nc)| in_bounds(nr, nc, height, width))
    }
}

fn in_bounds(r: isize, c: isize, height: usize, width: usize) -> Option<Cell> {
    if r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width {
        Some(Cell::new(r as usize, c as usize))
    } else {
        None
    }
}

/// A continuous point in cell units, `(row, col)` like [`Cell`].
///
/// Also used for direction vectors (e.g. the unit vector from an object
/// centroid toward its nearest frontier).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub row: f32,
    pub col: f32,
}

impl GridPoint {
    pub fn new(row: f32, col: f32) -> Self {
        GridPoint { row, col }
    }

    pub fn from_cell(cell: Cell) -> Self {
        GridPoint::new(cell.row as f32, cell.col as f32)
    }

    pub fn norm(&self) -> f32 {
        (self.row * self.row + self.col * self.col).sqrt()
    }

    pub fn scaled(&self, s: f32) -> GridPoint {
        GridPoint::new(self.row * s, self.col * s)
    }

    pub fn add(&self, other: GridPoint) -> GridPoint {
        GridPoint::new(self.row + other.row, self.col + other.col)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_order_is_row_major() {
        let mut cells = vec![Cell::new(1, 0), Cell::new(0, 5), Cell::new(0, 2)];
        cells.sort();
        assert_eq!(
            cells,
            vec![Cell::new(0, 2), Cell::new(0, 5), Cell::new(1, 0)]
        );
    }

    #[test]
    fn neighbors_clip_at_borders() {
        let corner = Cell::new(0, 0);
        let n4: Vec<_> = corner.neighbors4(3, 3).collect();
        assert_eq!(n4, vec![Cell::new(0, 1), Cell::new(1, 0)]);
        let n8: Vec<_> = corner.neighbors8(3, 3).collect();
        assert_eq!(
            n8,
            vec![Cell::new(0, 1), Cell::new(1, 0), Cell::new(1, 1)]
        );
    }
}
