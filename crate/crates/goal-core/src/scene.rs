//! Synthetic indoor scene generation.
//!
//! Scenes are binary-space-partitioned room layouts with door gaps cut into
//! every dividing wall, so free space is one connected component by
//! construction. Objects are rectangular blobs: anchor categories are placed
//! independently inside rooms, then each anchor instance spawns co-occurring
//! satellite objects at a sampled distance and direction, giving scenes the
//! pairwise spatial structure priors can exploit. Objects never block
//! movement; only walls do.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Cell, GridPoint};
use crate::map::{MapError, SemanticMap, OCC_FREE, OCC_OBSTACLE};
use crate::prior::{PriorError, PriorMatrices};

/// Distance assigned to category pairs with no co-occurrence relation; far
/// beyond any candidacy threshold.
pub const NO_RELATION_M: f32 = 8.0;

const SCENE_RETRY_BUDGET: usize = 8;
const PLACEMENT_TRIES: usize = 60;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    BadSpec(String),
    #[error("scene generation failed after {0} attempts")]
    GenerationFailed(usize),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// Declarative description of the scene distribution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Meters per cell.
    pub resolution: f32,
    pub categories: Vec<String>,
    /// Independent instances per category, inclusive range.
    pub instance_range: Vec<(usize, usize)>,
    /// Square blob side per category, inclusive range.
    pub size_range: Vec<(usize, usize)>,
    /// Ground-truth co-occurrence distances in meters; 0 = unrelated.
    pub d_star: Array2<f32>,
    /// Probability that an instance of row category spawns a satellite of
    /// column category.
    pub cooccur: Array2<f32>,
    /// Std of the placement distance noise, meters.
    pub jitter_m: f32,
    /// Smallest room side the BSP may produce.
    pub min_room: usize,
    /// Width of door gaps cut into dividing walls.
    pub door_width: usize,
}

impl SceneSpec {
    pub fn channels(&self) -> usize {
        self.categories.len()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let n = self.categories.len();
        if n == 0 {
            return Err(SceneError::BadSpec("no categories".into()));
        }
        if self.instance_range.len() != n || self.size_range.len() != n {
            return Err(SceneError::BadSpec(
                "instance_range/size_range length mismatch".into(),
            ));
        }
        if self.d_star.shape() != [n, n] || self.cooccur.shape() != [n, n] {
            return Err(SceneError::BadSpec("matrix shape mismatch".into()));
        }
        if self.height < 2 * self.min_room + 3 || self.width < 2 * self.min_room + 3 {
            return Err(SceneError::BadSpec("grid too small for min_room".into()));
        }
        if self.door_width == 0 {
            return Err(SceneError::BadSpec("door_width must be >= 1".into()));
        }
        if !(self.resolution > 0.0) {
            return Err(SceneError::BadSpec("resolution must be positive".into()));
        }
        Ok(())
    }
}

/// One placed object instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlacedObject {
    pub category: usize,
    pub centroid: GridPoint,
    pub cells: Vec<Cell>,
}

/// Sidecar metadata for a generated scene.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneMeta {
    pub categories: Vec<String>,
    pub instances: Vec<PlacedObject>,
    pub resolution: f32,
}

impl SceneMeta {
    pub fn instance_count(&self, category: usize) -> usize {
        self.instances
            .iter()
            .filter(|o| o.category == category)
            .count()
    }
}

struct Layout {
    walls: Array2<bool>,
    rooms: Vec<(usize, usize, usize, usize)>, // inclusive (r0, c0, r1, c1)
}

fn bsp_layout<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Layout {
    let (h, w) = (spec.height, spec.width);
    let mut walls = Array2::from_elem((h, w), false);
    for r in 0..h {
        walls[[r, 0]] = true;
        walls[[r, w - 1]] = true;
    }
    for c in 0..w {
        walls[[0, c]] = true;
        walls[[h - 1, c]] = true;
    }

    let mut rooms = Vec::new();
    let mut stack = vec![(1usize, 1usize, h - 2, w - 2)];
    while let Some((r0, c0, r1, c1)) = stack.pop() {
        let height = r1 - r0 + 1;
        let width = c1 - c0 + 1;
        let can_split_rows = height >= 2 * spec.min_room + 1;
        let can_split_cols = width >= 2 * spec.min_room + 1;
        if !can_split_rows && !can_split_cols {
            rooms.push((r0, c0, r1, c1));
            continue;
        }
        let split_rows = if can_split_rows && can_split_cols {
            height >= width
        } else {
            can_split_rows
        };
        // Two door gaps per dividing wall keep detours short and give the
        // optimistic planner alternate routes.
        if split_rows {
            let line = rng.gen_range(r0 + spec.min_room..=r1 - spec.min_room);
            for c in c0..=c1 {
                walls[[line, c]] = true;
            }
            for _ in 0..2 {
                let door = rng.gen_range(c0..=c1.saturating_sub(spec.door_width - 1).max(c0));
                for c in door..(door + spec.door_width).min(c1 + 1) {
                    walls[[line, c]] = false;
                }
            }
            stack.push((r0, c0, line - 1, c1));
            stack.push((line + 1, c0, r1, c1));
        } else {
            let line = rng.gen_range(c0 + spec.min_room..=c1 - spec.min_room);
            for r in r0..=r1 {
                walls[[r, line]] = true;
            }
            for _ in 0..2 {
                let door = rng.gen_range(r0..=r1.saturating_sub(spec.door_width - 1).max(r0));
                for r in door..(door + spec.door_width).min(r1 + 1) {
                    walls[[r, line]] = false;
                }
            }
            stack.push((r0, c0, r1, line - 1));
            stack.push((r0, line + 1, r1, c1));
        }
    }
    Layout { walls, rooms }
}

fn free_is_connected(walls: &Array2<bool>) -> bool {
    let (h, w) = (walls.shape()[0], walls.shape()[1]);
    let total_free = walls.iter().filter(|&&v| !v).count();
    if total_free == 0 {
        return false;
    }
    let start = walls
        .indexed_iter()
        .find(|(_, &v)| !v)
        .map(|((r, c), _)| Cell::new(r, c))
        .unwrap();
    let mut seen = Array2::from_elem((h, w), false);
    let mut queue = std::collections::VecDeque::from([start]);
    seen[[start.row, start.col]] = true;
    let mut count = 0;
    while let Some(cell) = queue.pop_front() {
        count += 1;
        for n in cell.neighbors4(h, w) {
            if !walls[[n.row, n.col]] && !seen[[n.row, n.col]] {
                seen[[n.row, n.col]] = true;
                queue.push_back(n);
            }
        }
    }
    count == total_free
}

/// True when a `size²` blob with top-left `(r0, c0)` fits on free floor and
/// stays ≥ 1 cell away from same-category blobs (so clusters stay distinct).
fn blob_fits(
    walls: &Array2<bool>,
    channel: &Array2<f32>,
    r0: isize,
    c0: isize,
    size: usize,
) -> bool {
    let (h, w) = (walls.shape()[0] as isize, walls.shape()[1] as isize);
    let s = size as isize;
    if r0 < 1 || c0 < 1 || r0 + s > h - 1 || c0 + s > w - 1 {
        return false;
    }
    for r in (r0 - 1).max(0)..(r0 + s + 1).min(h) {
        for c in (c0 - 1).max(0)..(c0 + s + 1).min(w) {
            let inside = r >= r0 && r < r0 + s && c >= c0 && c < c0 + s;
            if inside && walls[[r as usize, c as usize]] {
                return false;
            }
            if channel[[r as usize, c as usize]] > 0.5 {
                return false; // margin keeps same-category blobs separate
            }
        }
    }
    true
}

fn stamp_blob(
    grid: &mut Array3<f32>,
    category: usize,
    r0: usize,
    c0: usize,
    size: usize,
) -> PlacedObject {
    let mut cells = Vec::new();
    for r in r0..r0 + size {
        for c in c0..c0 + size {
            grid[[category, r, c]] = 1.0;
            cells.push(Cell::new(r, c));
        }
    }
    let half = (size as f32 - 1.0) / 2.0;
    PlacedObject {
        category,
        centroid: GridPoint::new(r0 as f32 + half, c0 as f32 + half),
        cells,
    }
}

/// Generates one scene. Retries the whole layout when connectivity or a
/// required instance count cannot be satisfied.
pub fn generate_scene<R: Rng + ?Sized>(
    spec: &SceneSpec,
    rng: &mut R,
) -> Result<(SemanticMap, SceneMeta), SceneError> {
    spec.validate()?;
    'attempt: for _ in 0..SCENE_RETRY_BUDGET {
        let layout = bsp_layout(spec, rng);
        if !free_is_connected(&layout.walls) {
            continue;
        }
        let n = spec.channels();
        let (h, w) = (spec.height, spec.width);
        let mut grid = Array3::zeros((n, h, w));
        let mut instances: Vec<PlacedObject> = Vec::new();

        // Independent (anchor) placements, room-seeded.
        for cat in 0..n {
            let (lo, hi) = spec.instance_range[cat];
            let count = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            for _ in 0..count {
                let mut placed = false;
                for _ in 0..PLACEMENT_TRIES {
                    let size = sample_size(spec.size_range[cat], rng);
                    let room = layout.rooms[rng.gen_range(0..layout.rooms.len())];
                    let (r0, c0, r1, c1) = room;
                    if r1 - r0 + 1 < size || c1 - c0 + 1 < size {
                        continue;
                    }
                    let rr = rng.gen_range(r0..=r1 + 1 - size) as isize;
                    let cc = rng.gen_range(c0..=c1 + 1 - size) as isize;
                    let channel = grid.index_axis(Axis(0), cat).to_owned();
                    if blob_fits(&layout.walls, &channel, rr, cc, size) {
                        instances.push(stamp_blob(&mut grid, cat, rr as usize, cc as usize, size));
                        placed = true;
                        break;
                    }
                }
                if !placed && lo > 0 {
                    continue 'attempt; // required instance missing
                }
            }
        }

        // Satellites spawned around each placed instance.
        let anchors = instances.clone();
        for anchor in &anchors {
            for sat in 0..n {
                let p = spec.cooccur[[anchor.category, sat]];
                if p <= 0.0 || rng.gen_range(0.0..1.0) >= p {
                    continue;
                }
                let d_m = spec.d_star[[anchor.category, sat]];
                if d_m <= 0.0 {
                    continue;
                }
                let noise = Normal::new(0.0f32, spec.jitter_m).unwrap();
                for _ in 0..PLACEMENT_TRIES {
                    let dist_cells =
                        ((d_m + noise.sample(rng)) / spec.resolution).max(1.0);
                    let theta = rng.gen_range(0.0..std::f32::consts::TAU);
                    let size = sample_size(spec.size_range[sat], rng);
                    let half = (size as f32 - 1.0) / 2.0;
                    let center_r = anchor.centroid.row + dist_cells * theta.sin();
                    let center_c = anchor.centroid.col + dist_cells * theta.cos();
                    let rr = (center_r - half).round() as isize;
                    let cc = (center_c - half).round() as isize;
                    let channel = grid.index_axis(Axis(0), sat).to_owned();
                    if blob_fits(&layout.walls, &channel, rr, cc, size) {
                        instances.push(stamp_blob(&mut grid, sat, rr as usize, cc as usize, size));
                        break;
                    }
                }
            }
        }

        let mut occ = Array3::zeros((2, h, w));
        for ((r, c), &wall) in layout.walls.indexed_iter() {
            occ[[OCC_OBSTACLE, r, c]] = if wall { 1.0 } else { 0.0 };
            occ[[OCC_FREE, r, c]] = if wall { 0.0 } else { 1.0 };
        }

        let map = SemanticMap::new(grid, spec.resolution)?.with_occupancy(occ)?;
        let meta = SceneMeta {
            categories: spec.categories.clone(),
            instances,
            resolution: spec.resolution,
        };
        return Ok((map, meta));
    }
    Err(SceneError::GenerationFailed(SCENE_RETRY_BUDGET))
}

fn sample_size<R: Rng + ?Sized>((lo, hi): (usize, usize), rng: &mut R) -> usize {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// How faithfully exported priors reflect the generator's ground truth.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum FidelityProfile {
    /// `D = D*`, full confidence on every related pair.
    Exact,
    /// Distances perturbed by `N(0, σ²)`.
    Noisy { sigma_m: f32 },
    /// Rows of `D` permuted: an adversarial prior.
    Shuffled,
}

/// Emits prior matrices whose ground truth is the generator's own
/// co-occurrence structure; the offline stand-in for a language model.
pub fn export_ground_truth_priors<R: Rng + ?Sized>(
    spec: &SceneSpec,
    profile: FidelityProfile,
    rng: &mut R,
) -> Result<PriorMatrices, SceneError> {
    spec.validate()?;
    let n = spec.channels();
    let related = |i: usize, j: usize| {
        i != j
            && (spec.d_star[[i, j]] > 0.0
                || spec.d_star[[j, i]] > 0.0
                || spec.cooccur[[i, j]] > 0.0
                || spec.cooccur[[j, i]] > 0.0)
    };
    let mut d = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else if related(i, j) {
            let v = spec.d_star[[i, j]].max(spec.d_star[[j, i]]);
            if v > 0.0 {
                v
            } else {
                NO_RELATION_M
            }
        } else {
            NO_RELATION_M
        }
    });
    let c = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            1.0
        } else if related(i, j) {
            1.0
        } else {
            0.0
        }
    });

    match profile {
        FidelityProfile::Exact => {}
        FidelityProfile::Noisy { sigma_m } => {
            let noise = Normal::new(0.0f32, sigma_m)
                .map_err(|e| SceneError::BadSpec(e.to_string()))?;
            for ((i, j), v) in d.indexed_iter_mut() {
                if i != j {
                    *v = (*v + noise.sample(rng)).max(0.05);
                }
            }
        }
        FidelityProfile::Shuffled => {
            // Random row permutation; symmetrization on construction keeps
            // the matrix valid while the distances stop meaning anything.
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let orig = d.clone();
            for i in 0..n {
                for j in 0..n {
                    d[[i, j]] = orig[[perm[i], j]];
                }
            }
        }
    }

    Ok(PriorMatrices::from_raw(spec.categories.clone(), d, c)?)
}

/// The synthetic navigation benchmark: four large anchor categories, each
/// spawning one small instance of every satellite category nearby.
/// Satellites (odd channels) are the evaluable goal categories.
pub fn benchmark_spec() -> SceneSpec {
    let categories: Vec<String> = [
        "table", "chair", "sofa", "tv", "bed", "plant", "sink", "toilet",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let n = categories.len();
    let anchors = [0usize, 2, 4, 6];
    let satellites = [1usize, 3, 5, 7];

    let mut d_star = Array2::zeros((n, n));
    let mut cooccur = Array2::zeros((n, n));
    for &a in &anchors {
        for &s in &satellites {
            d_star[[a, s]] = 0.35;
            d_star[[s, a]] = 0.35;
            cooccur[[a, s]] = 1.0;
        }
    }

    let mut instance_range = vec![(0, 0); n];
    let mut size_range = vec![(1, 2); n];
    for &a in &anchors {
        instance_range[a] = (1, 1);
        size_range[a] = (3, 4);
    }

    SceneSpec {
        height: 64,
        width: 64,
        resolution: 0.05,
        categories,
        instance_range,
        size_range,
        d_star,
        cooccur,
        jitter_m: 0.1,
        min_room: 13,
        door_width: 2,
    }
}

/// Goal categories of the benchmark (the satellite channels).
pub fn benchmark_goals() -> Vec<usize> {
    vec![1, 3, 5, 7]
}
