//! Semantic grid maps: the data model, object clustering, frontier
//! extraction and crop/resize geometry.
//!
//! A [`SemanticMap`] is an `N_c × h × w` tensor of per-category evidence plus
//! an optional `2 × h × w` occupancy tensor (obstacle, free). Ground-truth
//! maps are nonnegative; model outputs may transiently go negative and are
//! only clamped at rendering time.

use ndarray::{Array2, Array3, Axis};
use thiserror::Error;

use crate::grid::{Cell, GridPoint};

/// Occupancy channel holding obstacle evidence.
pub const OCC_OBSTACLE: usize = 0;
/// Occupancy channel holding free-space evidence.
pub const OCC_FREE: usize = 1;

/// Default evidence threshold for clustering; ground truth is binary so any
/// threshold in (0, 1) is equivalent.
pub const DEFAULT_CLUSTER_THRESHOLD: f32 = 0.5;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("grid contains non-finite values")]
    NonFinite,
    #[error("resolution must be positive, got {0}")]
    BadResolution(f32),
    #[error("occupancy shape {got:?} does not match (2, {h}, {w})")]
    OccupancyShape { got: Vec<usize>, h: usize, w: usize },
    #[error("mask shape {got:?} does not match map shape ({h}, {w})")]
    MaskShape { got: Vec<usize>, h: usize, w: usize },
    #[error("visibility mask has no observed cell")]
    EmptyMask,
    #[error("frontier set is empty")]
    EmptyFrontier,
    #[error("crop expansion factor must be >= 1, got {0}")]
    BadExpansion(f32),
    #[error("target size must be >= 1")]
    BadTargetSize,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Multi-channel 2D semantic map.
#[derive(Clone, Debug)]
pub struct SemanticMap {
    grid: Array3<f32>,
    resolution: f32,
    occupancy: Option<Array3<f32>>,
}

impl SemanticMap {
    /// Builds a map from a channel-major grid; all values must be finite.
    pub fn new(grid: Array3<f32>, resolution: f32) -> Result<Self, MapError> {
        if !grid.iter().all(|v| v.is_finite()) {
            return Err(MapError::NonFinite);
        }
        if !(resolution > 0.0) {
            return Err(MapError::BadResolution(resolution));
        }
        Ok(SemanticMap {
            grid,
            resolution,
            occupancy: None,
        })
    }

    /// Attaches an `(2, h, w)` occupancy tensor (obstacle, free).
    pub fn with_occupancy(mut self, occupancy: Array3<f32>) -> Result<Self, MapError> {
        let (h, w) = (self.height(), self.width());
        if occupancy.shape() != [2, h, w] {
            return Err(MapError::OccupancyShape {
                got: occupancy.shape().to_vec(),
                h,
                w,
            });
        }
        if !occupancy.iter().all(|v| v.is_finite()) {
            return Err(MapError::NonFinite);
        }
        self.occupancy = Some(occupancy);
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn resolution(&self) -> f32 {
        self.resolution
    }

    pub fn grid(&self) -> &Array3<f32> {
        &self.grid
    }

    pub fn occupancy(&self) -> Option<&Array3<f32>> {
        self.occupancy.as_ref()
    }

    /// True when the free-space channel marks this cell traversable.
    pub fn is_free(&self, cell: Cell) -> bool {
        self.occupancy
            .as_ref()
            .map(|occ| occ[[OCC_FREE, cell.row, cell.col]] > 0.5)
            .unwrap_or(false)
    }

    /// Boolean traversability grid derived from the free channel.
    pub fn traversable(&self) -> Option<Array2<bool>> {
        self.occupancy
            .as_ref()
            .map(|occ| occ.index_axis(Axis(0), OCC_FREE).mapv(|v| v > 0.5))
    }
}

/// Binary visibility mask; 1 = observed.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityMask {
    grid: Array2<bool>,
}

impl VisibilityMask {
    pub fn new_unobserved(height: usize, width: usize) -> Self {
        VisibilityMask {
            grid: Array2::from_elem((height, width), false),
        }
    }

    pub fn new_observed(height: usize, width: usize) -> Self {
        VisibilityMask {
            grid: Array2::from_elem((height, width), true),
        }
    }

    pub fn from_bool(grid: Array2<bool>) -> Self {
        VisibilityMask { grid }
    }

    /// Interprets a float grid as a mask; values must be exactly 0 or 1.
    pub fn from_f32(grid: &Array2<f32>) -> Result<Self, MapError> {
        if !grid.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(MapError::ShapeMismatch(
                "mask values must be exactly 0 or 1".into(),
            ));
        }
        Ok(VisibilityMask {
            grid: grid.mapv(|v| v == 1.0),
        })
    }

    pub fn to_f32(&self) -> Array2<f32> {
        self.grid.mapv(|v| if v { 1.0 } else { 0.0 })
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn observed(&self, cell: Cell) -> bool {
        self.grid[[cell.row, cell.col]]
    }

    pub fn reveal(&mut self, cell: Cell) -> bool {
        let seen = &mut self.grid[[cell.row, cell.col]];
        let newly = !*seen;
        *seen = true;
        newly
    }

    pub fn observed_count(&self) -> usize {
        self.grid.iter().filter(|&&v| v).count()
    }

    pub fn any_observed(&self) -> bool {
        self.grid.iter().any(|&v| v)
    }

    /// Inclusive bounding box of observed cells, `(r0, c0, r1, c1)`.
    pub fn observed_bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for ((r, c), &v) in self.grid.indexed_iter() {
            if v {
                any = true;
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
        any.then_some((r0, c0, r1, c1))
    }
}

/// One connected blob of same-category cells.
#[derive(Clone, Debug)]
pub struct ObjectCluster {
    /// Channel index of the category.
    pub category: usize,
    /// Member cells, sorted row-major; nonempty and 4-connected.
    pub cells: Vec<Cell>,
    /// Arithmetic mean of member cells, in cell units.
    pub centroid: GridPoint,
}

/// Returns all maximal 4-connected components, per channel, of cells whose
/// value exceeds `threshold`. Deterministic ordering: by channel, then by
/// the component's row-major first cell.
pub fn cluster_objects(map: &SemanticMap, threshold: f32) -> Vec<ObjectCluster> {
    let (nc, h, w) = (map.channels(), map.height(), map.width());
    let grid = map.grid();
    let mut clusters = Vec::new();
    let mut visited = Array2::from_elem((h, w), false);

    for ch in 0..nc {
        visited.fill(false);
        for r in 0..h {
            for c in 0..w {
                if visited[[r, c]] || grid[[ch, r, c]] <= threshold {
                    continue;
                }
                // BFS flood fill; the scan order makes the seed the
                // row-major minimum of its component.
                let mut cells = Vec::new();
                let mut queue = std::collections::VecDeque::new();
                visited[[r, c]] = true;
                queue.push_back(Cell::new(r, c));
                while let Some(cell) = queue.pop_front() {
                    cells.push(cell);
                    for n in cell.neighbors4(h, w) {
                        if !visited[[n.row, n.col]] && grid[[ch, n.row, n.col]] > threshold {
                            visited[[n.row, n.col]] = true;
                            queue.push_back(n);
                        }
                    }
                }
                cells.sort();
                let inv = 1.0 / cells.len() as f32;
                let centroid = GridPoint::new(
                    cells.iter().map(|c| c.row as f32).sum::<f32>() * inv,
                    cells.iter().map(|c| c.col as f32).sum::<f32>() * inv,
                );
                clusters.push(ObjectCluster {
                    category: ch,
                    cells,
                    centroid,
                });
            }
        }
    }
    clusters
}

/// Cells marked free and observed with at least one unobserved 4-neighbor,
/// sorted row-major.
pub fn compute_frontiers(occupancy: &Array3<f32>, mask: &VisibilityMask) -> Vec<Cell> {
    let h = mask.height();
    let w = mask.width();
    debug_assert_eq!(occupancy.shape()[1], h);
    debug_assert_eq!(occupancy.shape()[2], w);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let cell = Cell::new(r, c);
            if occupancy[[OCC_FREE, r, c]] <= 0.5 || !mask.observed(cell) {
                continue;
            }
            if cell.neighbors4(h, w).any(|n| !mask.observed(n)) {
                out.push(cell);
            }
        }
    }
    out
}

/// Frontier cell nearest to `centroid` (ties broken row-major) and the unit
/// vector from the centroid toward it. A frontier coinciding with the
/// centroid yields `(1, 0)` by convention.
pub fn nearest_frontier_direction(
    centroid: GridPoint,
    frontiers: &[Cell],
) -> Result<(Cell, GridPoint), MapError> {
    let mut best: Option<(f32, Cell)> = None;
    for &f in frontiers {
        let d = f.distance_to_point(centroid);
        let better = match best {
            None => true,
            // Ties resolve to the row-major smaller cell; the iteration
            // order is arbitrary so compare explicitly.
            Some((bd, bc)) => d < bd || (d == bd && f < bc),
        };
        if better {
            best = Some((d, f));
        }
    }
    let (dist, cell) = best.ok_or(MapError::EmptyFrontier)?;
    let v = if dist <= f32::EPSILON {
        GridPoint::new(1.0, 0.0)
    } else {
        GridPoint::new(
            (cell.row as f32 - centroid.row) / dist,
            (cell.col as f32 - centroid.col) / dist,
        )
    };
    Ok((cell, v))
}

/// Source-window geometry of a crop, kept for merging generated content back.
#[derive(Clone, Copy, Debug)]
pub struct CropTransform {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
    /// Side length of the square resize target.
    pub target: usize,
}

impl CropTransform {
    /// Source cells covered per target cell along rows.
    pub fn row_scale(&self) -> f32 {
        self.height as f32 / self.target as f32
    }

    /// Source cells covered per target cell along columns.
    pub fn col_scale(&self) -> f32 {
        self.width as f32 / self.target as f32
    }

    /// Crops one channel to the window and resizes it to `target²`.
    pub fn crop_resize_channel(&self, src: &Array2<f32>) -> Array2<f32> {
        let window = src.slice(ndarray::s![
            self.row0..self.row0 + self.height,
            self.col0..self.col0 + self.width
        ]);
        resize_bilinear(&window.to_owned(), self.target, self.target)
    }

    /// Crops and resizes a binary mask; fractional interpolated values are
    /// re-thresholded at 0.5 to keep the mask binary.
    pub fn crop_resize_mask(&self, mask: &VisibilityMask) -> VisibilityMask {
        let f = self.crop_resize_channel(&mask.to_f32());
        VisibilityMask::from_bool(f.mapv(|v| v > 0.5))
    }
}

/// Bilinear resize with the align-corners convention, so identical input and
/// output sizes reproduce the input exactly.
pub fn resize_bilinear(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (in_h, in_w) = (src.shape()[0], src.shape()[1]);
    let row_step = if out_h > 1 {
        (in_h - 1) as f32 / (out_h - 1) as f32
    } else {
        0.0
    };
    let col_step = if out_w > 1 {
        (in_w - 1) as f32 / (out_w - 1) as f32
    } else {
        0.0
    };
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let sy = oy as f32 * row_step;
        let sx = ox as f32 * col_step;
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let x1 = (x0 + 1).min(in_w - 1);
        let fy = sy - y0 as f32;
        let fx = sx - x0 as f32;
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Expands the observed bounding box by `epsilon` (margin split equally on
/// all four sides, then clipped), squares the window where the map allows,
/// and resizes the windowed map to `target²`.
pub fn crop_region(
    map: &SemanticMap,
    mask: &VisibilityMask,
    epsilon: f32,
    target: usize,
) -> Result<(Array3<f32>, CropTransform), MapError> {
    if epsilon < 1.0 {
        return Err(MapError::BadExpansion(epsilon));
    }
    if target == 0 {
        return Err(MapError::BadTargetSize);
    }
    let (h, w) = (map.height(), map.width());
    if mask.height() != h || mask.width() != w {
        return Err(MapError::MaskShape {
            got: vec![mask.height(), mask.width()],
            h,
            w,
        });
    }
    let (r0, c0, r1, c1) = mask.observed_bbox().ok_or(MapError::EmptyMask)?;

    let (wr0, wr1) = expand_axis(r0, r1, epsilon, h);
    let (wc0, wc1) = expand_axis(c0, c1, epsilon, w);
    // Square the window: isotropic scaling keeps metric distances uniform
    // after the resize. Clipping can still leave it rectangular when the
    // map itself is too small along one axis.
    let side = (wr1 - wr0 + 1).max(wc1 - wc0 + 1);
    let (wr0, wr1) = grow_axis(wr0, wr1, side, h);
    let (wc0, wc1) = grow_axis(wc0, wc1, side, w);

    let tf = CropTransform {
        row0: wr0,
        col0: wc0,
        height: wr1 - wr0 + 1,
        width: wc1 - wc0 + 1,
        target,
    };

    let nc = map.channels();
    let mut out = Array3::zeros((nc, target, target));
    for ch in 0..nc {
        let resized = tf.crop_resize_channel(&map.grid().index_axis(Axis(0), ch).to_owned());
        out.index_axis_mut(Axis(0), ch).assign(&resized);
    }
    Ok((out, tf))
}

fn expand_axis(lo: usize, hi: usize, epsilon: f32, size: usize) -> (usize, usize) {
    let len = (hi - lo + 1) as f32;
    let margin = len * (epsilon - 1.0) / 2.0;
    let flo = (lo as f32 - margin).floor().max(0.0) as usize;
    let fhi = ((hi as f32 + margin).ceil() as usize).min(size - 1);
    (flo, fhi)
}

/// Grows `[lo, hi]` symmetrically to `want` cells, shifting into bounds when
/// one side clips; the result is `min(want, size)` cells long.
fn grow_axis(lo: usize, hi: usize, want: usize, size: usize) -> (usize, usize) {
    let want = want.min(size);
    let len = hi - lo + 1;
    if len >= want {
        return (lo, hi);
    }
    let extra = want - len;
    let before = extra / 2;
    let mut new_lo = lo.saturating_sub(before);
    let mut new_hi = new_lo + want - 1;
    if new_hi >= size {
        new_hi = size - 1;
        new_lo = new_hi + 1 - want;
    }
    (new_lo, new_hi)
}

/// Resizes `generated` back to the crop window and writes it only into
/// unobserved cells; observed cells keep the original values exactly.
pub fn merge_back(
    original: &SemanticMap,
    generated: &Array3<f32>,
    tf: &CropTransform,
    mask: &VisibilityMask,
) -> Result<SemanticMap, MapError> {
    let nc = original.channels();
    if generated.shape() != [nc, tf.target, tf.target] {
        return Err(MapError::ShapeMismatch(format!(
            "generated shape {:?}, expected ({nc}, {t}, {t})",
            generated.shape(),
            t = tf.target
        )));
    }
    let (h, w) = (original.height(), original.width());
    if mask.height() != h || mask.width() != w {
        return Err(MapError::MaskShape {
            got: vec![mask.height(), mask.width()],
            h,
            w,
        });
    }
    if tf.row0 + tf.height > h || tf.col0 + tf.width > w {
        return Err(MapError::ShapeMismatch(
            "crop window exceeds original map bounds".into(),
        ));
    }

    let mut merged = original.clone();
    for ch in 0..nc {
        let back = resize_bilinear(
            &generated.index_axis(Axis(0), ch).to_owned(),
            tf.height,
            tf.width,
        );
        for r in 0..tf.height {
            for c in 0..tf.width {
                let cell = Cell::new(tf.row0 + r, tf.col0 + c);
                if !mask.observed(cell) {
                    merged.grid[[ch, cell.row, cell.col]] = back[[r, c]];
                }
            }
        }
    }
    Ok(merged)
}
