//! Contextual spatial priors: pairwise distance/confidence matrices over
//! object categories and their rasterization into per-channel Gaussian
//! fields anchored on observed objects.
//!
//! The matrices come from an LLM (see [`llm`]) or from a file; either way
//! they are symmetrized on load by averaging with their transpose. Fields
//! are built by, per observed object cluster, sampling one co-occurring
//! candidate category, projecting its expected centroid along the ray to the
//! nearest frontier, and accumulating a normalized isotropic Gaussian whose
//! spread shrinks as confidence grows.

pub mod llm;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridPoint;
use crate::map::{
    cluster_objects, compute_frontiers, nearest_frontier_direction, SemanticMap, VisibilityMask,
    DEFAULT_CLUSTER_THRESHOLD,
};

/// Distance recorded for pairs the LLM failed to answer; far beyond any
/// distance threshold and JSON-serializable, unlike an actual infinity.
pub const MISSING_DISTANCE_M: f32 = 1.0e9;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("failed to read prior matrices: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse prior matrices: {0}")]
    Parse(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("confidence {0} outside [0, 1]")]
    Domain(f32),
    #[error("invalid prior parameters: {0}")]
    BadParams(String),
    #[error("category index {0} out of range for {1} categories")]
    BadCategory(usize, usize),
    #[error("llm request failed after retries: {0}")]
    Network(String),
}

/// Thresholds and scales for prior construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorParams {
    /// Distance threshold for co-occurrence candidacy, meters.
    pub tau_d: f32,
    /// Confidence threshold for co-occurrence candidacy.
    pub tau_c: f32,
    /// Standard deviation at confidence 1, in grid cells.
    pub sigma_min: f32,
    /// Standard deviation at confidence 0, in grid cells.
    pub sigma_max: f32,
    /// Prior strength multiplier; 0 disables the prior.
    pub lambda: f32,
    /// Meters per cell of the map the prior is rasterized on.
    pub resolution: f32,
}

impl Default for PriorParams {
    fn default() -> Self {
        PriorParams {
            tau_d: 2.5,
            tau_c: 0.85,
            sigma_min: 20.0,
            sigma_max: 50.0,
            lambda: 1500.0,
            resolution: 0.05,
        }
    }
}

impl PriorParams {
    pub fn validate(&self) -> Result<(), PriorError> {
        if self.sigma_min > self.sigma_max {
            return Err(PriorError::BadParams(format!(
                "sigma_min {} > sigma_max {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(0.0..=1.0).contains(&self.tau_c) {
            return Err(PriorError::BadParams(format!("tau_c {}", self.tau_c)));
        }
        if self.lambda < 0.0 {
            return Err(PriorError::BadParams(format!("lambda {}", self.lambda)));
        }
        if !(self.resolution > 0.0) {
            return Err(PriorError::BadParams(format!(
                "resolution {}",
                self.resolution
            )));
        }
        if !(self.sigma_min > 0.0) {
            return Err(PriorError::BadParams(format!(
                "sigma_min {}",
                self.sigma_min
            )));
        }
        Ok(())
    }

    /// Copy with the rasterization resolution replaced (used after crops
    /// change the effective meters-per-cell).
    pub fn at_resolution(&self, resolution: f32) -> PriorParams {
        PriorParams {
            resolution,
            ..self.clone()
        }
    }
}

/// Symmetric pairwise distance (meters) and confidence matrices over the
/// category list.
#[derive(Clone, Debug)]
pub struct PriorMatrices {
    categories: Vec<String>,
    distance: Array2<f32>,
    confidence: Array2<f32>,
}

#[derive(Serialize, Deserialize)]
struct PriorMatricesFile {
    categories: Vec<String>,
    #[serde(rename = "D")]
    distance: Vec<Vec<f32>>,
    #[serde(rename = "C")]
    confidence: Vec<Vec<f32>>,
}

impl PriorMatrices {
    /// Validates raw (possibly asymmetric) matrices and symmetrizes both via
    /// `(A + Aᵀ)/2`.
    pub fn from_raw(
        categories: Vec<String>,
        distance: Array2<f32>,
        confidence: Array2<f32>,
    ) -> Result<Self, PriorError> {
        let n = categories.len();
        if distance.shape() != [n, n] || confidence.shape() != [n, n] {
            return Err(PriorError::Parse(format!(
                "matrix shapes {:?}/{:?} do not match {n} categories",
                distance.shape(),
                confidence.shape()
            )));
        }
        for &d in distance.iter() {
            if d.is_nan() || d < 0.0 {
                return Err(PriorError::Range(format!("distance entry {d}")));
            }
        }
        for &c in confidence.iter() {
            if !(0.0..=1.0).contains(&c) {
                return Err(PriorError::Range(format!("confidence entry {c}")));
            }
        }
        let distance = symmetrize(&distance);
        let confidence = symmetrize(&confidence);
        Ok(PriorMatrices {
            categories,
            distance,
            confidence,
        })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Pairwise distance in meters.
    pub fn distance(&self, i: usize, j: usize) -> f32 {
        self.distance[[i, j]]
    }

    /// Pairwise confidence in [0, 1].
    pub fn confidence(&self, i: usize, j: usize) -> f32 {
        self.confidence[[i, j]]
    }

    pub fn distance_matrix(&self) -> &Array2<f32> {
        &self.distance
    }

    pub fn confidence_matrix(&self) -> &Array2<f32> {
        &self.confidence
    }
}

fn symmetrize(a: &Array2<f32>) -> Array2<f32> {
    (a + &a.t()) / 2.0
}

/// Loads matrices from the JSON format `{categories, D, C}`, symmetrizing
/// and validating.
pub fn load_prior_matrices<P: AsRef<Path>>(path: P) -> Result<PriorMatrices, PriorError> {
    let file: PriorMatricesFile = serde_json::from_reader(BufReader::new(File::open(path)?))
        .map_err(|e| PriorError::Parse(e.to_string()))?;
    let n = file.categories.len();
    let to_array = |rows: Vec<Vec<f32>>, name: &str| -> Result<Array2<f32>, PriorError> {
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(PriorError::Parse(format!("{name} is not {n}×{n}")));
        }
        Ok(Array2::from_shape_vec((n, n), rows.into_iter().flatten().collect()).unwrap())
    };
    let d = to_array(file.distance, "D")?;
    let c = to_array(file.confidence, "C")?;
    PriorMatrices::from_raw(file.categories, d, c)
}

/// Writes matrices in the JSON format `{categories, D, C}`.
pub fn save_prior_matrices<P: AsRef<Path>>(
    path: P,
    matrices: &PriorMatrices,
) -> Result<(), PriorError> {
    let n = matrices.len();
    let rows = |a: &Array2<f32>| -> Vec<Vec<f32>> {
        (0..n).map(|i| a.row(i).to_vec()).collect()
    };
    let file = PriorMatricesFile {
        categories: matrices.categories.clone(),
        distance: rows(&matrices.distance),
        confidence: rows(&matrices.confidence),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), &file)
        .map_err(|e| PriorError::Parse(e.to_string()))?;
    Ok(())
}

/// Co-occurrence candidates of category `i`:
/// `{ j ≠ i : D[i][j] ≤ τ_d or C[i][j] ≥ τ_c }`.
pub fn candidate_set(
    i: usize,
    matrices: &PriorMatrices,
    params: &PriorParams,
) -> Result<Vec<usize>, PriorError> {
    let n = matrices.len();
    if i >= n {
        return Err(PriorError::BadCategory(i, n));
    }
    Ok((0..n)
        .filter(|&j| {
            j != i
                && (matrices.distance(i, j) <= params.tau_d
                    || matrices.confidence(i, j) >= params.tau_c)
        })
        .collect())
}

/// Linear confidence-to-spread map: `σ = σ_min·c + σ_max·(1 − c)`.
pub fn confidence_to_sigma(c: f32, params: &PriorParams) -> Result<f32, PriorError> {
    if !(0.0..=1.0).contains(&c) {
        return Err(PriorError::Domain(c));
    }
    Ok(params.sigma_min * c + params.sigma_max * (1.0 - c))
}

/// Expected co-occurring centroid `μ_j = μ_i + (d/resolution)·v`, in cell
/// units; may fall outside the grid.
pub fn predicted_centroid(
    mu_i: GridPoint,
    distance_m: f32,
    v: GridPoint,
    resolution: f32,
) -> GridPoint {
    mu_i.add(v.scaled(distance_m / resolution))
}

/// Normalized isotropic Gaussian evaluated at cell centers;
/// `g[x][y] = exp(−((x−μ_r)² + (y−μ_c)²)/(2σ²)) / (2πσ²)`.
pub fn rasterize_gaussian(mu: GridPoint, sigma: f32, height: usize, width: usize) -> Array2<f32> {
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let norm = 1.0 / (2.0 * std::f32::consts::PI * sigma * sigma);
    Array2::from_shape_fn((height, width), |(r, c)| {
        let dr = r as f32 - mu.row;
        let dc = c as f32 - mu.col;
        norm * (-(dr * dr + dc * dc) * inv_two_sigma_sq).exp()
    })
}

/// Per-channel prior density field; nonnegative everywhere.
#[derive(Clone, Debug)]
pub struct PriorField {
    grid: Array3<f32>,
}

impl PriorField {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        PriorField {
            grid: Array3::zeros((channels, height, width)),
        }
    }

    /// Wraps an existing density grid; values must be finite and ≥ 0.
    pub fn from_grid(grid: Array3<f32>) -> Result<Self, PriorError> {
        if !grid.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(PriorError::Range(
                "prior field values must be finite and nonnegative".into(),
            ));
        }
        Ok(PriorField { grid })
    }

    pub fn grid(&self) -> &Array3<f32> {
        &self.grid
    }

    pub fn into_grid(self) -> Array3<f32> {
        self.grid
    }

    /// Total mass summed over all channels.
    pub fn mass(&self) -> f32 {
        self.grid.sum()
    }
}

/// Builds the stacked prior field for a partially observed map.
///
/// Clusters the observed objects; for each cluster with a nonempty
/// candidate set and an existing frontier, samples one candidate category
/// uniformly, places its Gaussian at the predicted centroid along the
/// nearest-frontier ray and accumulates it into that category's channel.
/// Objects with no candidates or no frontier contribute nothing.
pub fn build_prior_field<R: Rng + ?Sized>(
    partial: &SemanticMap,
    mask: &VisibilityMask,
    matrices: &PriorMatrices,
    params: &PriorParams,
    rng: &mut R,
) -> Result<PriorField, PriorError> {
    params.validate()?;
    let (nc, h, w) = (partial.channels(), partial.height(), partial.width());
    let mut field = PriorField::zeros(nc, h, w);

    let frontiers = match partial.occupancy() {
        Some(occ) => compute_frontiers(occ, mask),
        None => Vec::new(),
    };

    let clusters = cluster_objects(partial, DEFAULT_CLUSTER_THRESHOLD);
    for cluster in &clusters {
        let candidates = candidate_set(cluster.category, matrices, params)?;
        if candidates.is_empty() || frontiers.is_empty() {
            continue;
        }
        let j = candidates[rng.gen_range(0..candidates.len())];
        let (_, v) = nearest_frontier_direction(cluster.centroid, &frontiers)
            .expect("frontiers checked nonempty");
        let d_ij = matrices.distance(cluster.category, j);
        let mu_j = predicted_centroid(cluster.centroid, d_ij, v, params.resolution);
        let sigma = confidence_to_sigma(matrices.confidence(cluster.category, j), params)?;
        let gaussian = rasterize_gaussian(mu_j, sigma, h, w);
        let mut channel = field.grid.index_axis_mut(Axis(0), j);
        channel += &gaussian;
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Cell;
    use crate::map::OCC_FREE;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_cat_matrices(d01: f32, c01: f32) -> PriorMatrices {
        PriorMatrices::from_raw(
            vec!["a".into(), "b".into()],
            arr2(&[[0.0, d01], [d01, 0.0]]),
            arr2(&[[1.0, c01], [c01, 1.0]]),
        )
        .unwrap()
    }

    #[test]
    fn candidate_set_distance_clause() {
        let m = two_cat_matrices(0.5, 0.1);
        let p = PriorParams::default();
        assert_eq!(candidate_set(0, &m, &p).unwrap(), vec![1]);
    }

    #[test]
    fn candidate_set_excludes_far_low_confidence_pair() {
        // distance 8.0 m, confidence 0.5: both clauses fail at the defaults.
        let m = two_cat_matrices(8.0, 0.5);
        let p = PriorParams::default();
        assert!(candidate_set(0, &m, &p).unwrap().is_empty());
    }

    #[test]
    fn candidate_set_confidence_clause() {
        let m = two_cat_matrices(8.0, 0.9);
        let p = PriorParams::default();
        assert_eq!(candidate_set(0, &m, &p).unwrap(), vec![1]);
    }

    #[test]
    fn candidate_set_is_symmetric_after_load() {
        let m = PriorMatrices::from_raw(
            vec!["a".into(), "b".into(), "c".into()],
            arr2(&[[0.0, 0.5, 4.0], [3.0, 0.0, 9.0], [4.0, 9.0, 0.0]]),
            arr2(&[[1.0, 0.2, 0.9], [0.4, 1.0, 0.1], [0.9, 0.3, 1.0]]),
        )
        .unwrap();
        let p = PriorParams::default();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let in_i = candidate_set(i, &m, &p).unwrap().contains(&j);
                let in_j = candidate_set(j, &m, &p).unwrap().contains(&i);
                assert_eq!(in_i, in_j, "asymmetry at ({i},{j})");
            }
        }
    }

    #[test]
    fn sigma_endpoints_and_midpoint() {
        let p = PriorParams::default();
        assert_eq!(confidence_to_sigma(1.0, &p).unwrap(), 20.0);
        assert_eq!(confidence_to_sigma(0.0, &p).unwrap(), 50.0);
        assert_eq!(confidence_to_sigma(0.5, &p).unwrap(), 35.0);
    }

    #[test]
    fn sigma_monotone_decreasing_in_confidence() {
        let p = PriorParams::default();
        let mut prev = f32::INFINITY;
        for k in 0..=20 {
            let c = k as f32 / 20.0;
            let s = confidence_to_sigma(c, &p).unwrap();
            assert!(s <= prev);
            assert!((p.sigma_min..=p.sigma_max).contains(&s));
            prev = s;
        }
    }

    #[test]
    fn sigma_rejects_out_of_domain() {
        let p = PriorParams::default();
        assert!(matches!(
            confidence_to_sigma(1.5, &p),
            Err(PriorError::Domain(_))
        ));
        assert!(matches!(
            confidence_to_sigma(-0.1, &p),
            Err(PriorError::Domain(_))
        ));
    }

    #[test]
    fn predicted_centroid_cases() {
        let mu = GridPoint::new(10.0, 10.0);
        let same = predicted_centroid(mu, 0.0, GridPoint::new(0.0, 1.0), 0.05);
        assert_eq!((same.row, same.col), (10.0, 10.0));

        let east = predicted_centroid(mu, 1.0, GridPoint::new(0.0, 1.0), 0.05);
        assert_eq!((east.row, east.col), (10.0, 30.0));

        let south = predicted_centroid(mu, 0.5, GridPoint::new(1.0, 0.0), 0.05);
        assert_eq!((south.row, south.col), (20.0, 10.0));
    }

    #[test]
    fn gaussian_peak_matches_closed_form() {
        let sigma = 20.0f32;
        let g = rasterize_gaussian(GridPoint::new(128.0, 128.0), sigma, 256, 256);
        let peak = 1.0 / (2.0 * std::f32::consts::PI * sigma * sigma);
        assert!((g[[128, 128]] - peak).abs() < 1e-9);
        // Peak is the maximum.
        assert!(g.iter().all(|&v| v <= g[[128, 128]]));
    }

    #[test]
    fn gaussian_mass_near_unity_when_centered() {
        let g = rasterize_gaussian(GridPoint::new(128.0, 128.0), 20.0, 256, 256);
        let mass = g.sum();
        assert!((0.95..=1.0).contains(&mass), "mass {mass}");
    }

    #[test]
    fn gaussian_far_outside_grid_is_near_zero() {
        let g = rasterize_gaussian(GridPoint::new(-500.0, -500.0), 10.0, 64, 64);
        assert!(g.iter().all(|&v| v >= 0.0 && v < 1e-12));
    }

    fn partial_scene() -> (SemanticMap, VisibilityMask) {
        // 32×32, object of category 0 at rows 14..17 × cols 6..9, observed
        // left half, all free.
        let mut grid = ndarray::Array3::zeros((3, 32, 32));
        for r in 14..17 {
            for c in 6..9 {
                grid[[0, r, c]] = 1.0;
            }
        }
        let mut occ = ndarray::Array3::zeros((2, 32, 32));
        occ.index_axis_mut(Axis(0), OCC_FREE).fill(1.0);
        let map = SemanticMap::new(grid, 0.05)
            .unwrap()
            .with_occupancy(occ)
            .unwrap();
        let mut mask = VisibilityMask::new_unobserved(32, 32);
        for r in 0..32 {
            for c in 0..16 {
                mask.reveal(Cell::new(r, c));
            }
        }
        (map, mask)
    }

    fn three_cat_matrices() -> PriorMatrices {
        // Category 1 is the sole candidate of category 0 and vice versa.
        PriorMatrices::from_raw(
            vec!["a".into(), "b".into(), "c".into()],
            arr2(&[[0.0, 0.5, 9.0], [0.5, 0.0, 9.0], [9.0, 9.0, 0.0]]),
            arr2(&[[1.0, 0.9, 0.1], [0.9, 1.0, 0.1], [0.1, 0.1, 1.0]]),
        )
        .unwrap()
    }

    #[test]
    fn empty_map_gives_zero_field() {
        let (map, mask) = partial_scene();
        let empty = SemanticMap::new(ndarray::Array3::zeros((3, 32, 32)), 0.05)
            .unwrap()
            .with_occupancy(map.occupancy().unwrap().clone())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = build_prior_field(
            &empty,
            &mask,
            &three_cat_matrices(),
            &PriorParams::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(f.mass(), 0.0);
    }

    #[test]
    fn single_object_single_candidate_places_one_gaussian() {
        let (map, mask) = partial_scene();
        let m = three_cat_matrices();
        let p = PriorParams {
            sigma_min: 3.0,
            sigma_max: 6.0,
            ..PriorParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = build_prior_field(&map, &mask, &m, &p, &mut rng).unwrap();

        // Hand-computed expectation: centroid (15, 7); nearest frontier is
        // (15, 15) on the observation boundary, so v = (0, 1); offset
        // 0.5 m / 0.05 m/cell = 10 cells → μ_j = (15, 17) in channel 1.
        let ch1 = f.grid().index_axis(Axis(0), 1);
        let mut best = (0, 0);
        let mut best_v = -1.0;
        for ((r, c), &v) in ch1.indexed_iter() {
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
        assert!(
            (best.0 as f32 - 15.0).abs() <= 1.0 && (best.1 as f32 - 17.0).abs() <= 1.0,
            "peak at {best:?}"
        );
        // Other channels untouched.
        assert_eq!(f.grid().index_axis(Axis(0), 0).sum(), 0.0);
        assert_eq!(f.grid().index_axis(Axis(0), 2).sum(), 0.0);
    }

    #[test]
    fn two_objects_superpose_in_shared_channel() {
        let (map, mask) = partial_scene();
        let mut grid = map.grid().clone();
        for r in 4..6 {
            for c in 4..6 {
                grid[[0, r, c]] = 1.0; // second category-0 object
            }
        }
        let map2 = SemanticMap::new(grid, 0.05)
            .unwrap()
            .with_occupancy(map.occupancy().unwrap().clone())
            .unwrap();
        let m = three_cat_matrices();
        let p = PriorParams {
            sigma_min: 3.0,
            sigma_max: 6.0,
            ..PriorParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let both = build_prior_field(&map2, &mask, &m, &p, &mut rng).unwrap();

        // Oracle: rasterize each object's Gaussian separately and add.
        let frontiers = compute_frontiers(map2.occupancy().unwrap(), &mask);
        let clusters = cluster_objects(&map2, 0.5);
        assert_eq!(clusters.len(), 2);
        let mut expect = Array2::<f32>::zeros((32, 32));
        for cl in &clusters {
            let (_, v) = nearest_frontier_direction(cl.centroid, &frontiers).unwrap();
            let mu = predicted_centroid(cl.centroid, 0.5, v, 0.05);
            let sigma = confidence_to_sigma(0.9, &p).unwrap();
            expect += &rasterize_gaussian(mu, sigma, 32, 32);
        }
        let got = both.grid().index_axis(Axis(0), 1);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn field_deterministic_under_fixed_seed() {
        let (map, mask) = partial_scene();
        let m = three_cat_matrices();
        let p = PriorParams::default();
        let f1 = build_prior_field(&map, &mask, &m, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let f2 = build_prior_field(&map, &mask, &m, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(f1.grid(), f2.grid());
    }

    #[test]
    fn field_mass_bounded_by_contributing_objects() {
        let (map, mask) = partial_scene();
        let m = three_cat_matrices();
        let p = PriorParams {
            sigma_min: 3.0,
            sigma_max: 6.0,
            ..PriorParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = build_prior_field(&map, &mask, &m, &p, &mut rng).unwrap();
        let mass = f.mass();
        assert!(mass >= 0.0 && mass <= 1.0 + 0.05, "mass {mass}");
    }

    #[test]
    fn no_frontier_skips_contribution() {
        let (map, _) = partial_scene();
        let mask = VisibilityMask::new_observed(32, 32); // fully observed: no frontier
        let m = three_cat_matrices();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = build_prior_field(&map, &mask, &m, &PriorParams::default(), &mut rng).unwrap();
        assert_eq!(f.mass(), 0.0);
    }

    #[test]
    fn shrinking_sigma_with_higher_confidence_lifts_peak() {
        // Raising all confidences toward 1 never widens any Gaussian.
        let (map, mask) = partial_scene();
        let p = PriorParams {
            sigma_min: 3.0,
            sigma_max: 9.0,
            ..PriorParams::default()
        };
        let low = PriorMatrices::from_raw(
            vec!["a".into(), "b".into(), "c".into()],
            arr2(&[[0.0, 0.5, 9.0], [0.5, 0.0, 9.0], [9.0, 9.0, 0.0]]),
            arr2(&[[1.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.0]]),
        )
        .unwrap();
        let high = PriorMatrices::from_raw(
            low.categories.clone().into(),
            low.distance.clone(),
            arr2(&[[1.0, 0.95, 0.0], [0.95, 1.0, 0.0], [0.0, 0.0, 1.0]]),
        )
        .unwrap();
        let f_low =
            build_prior_field(&map, &mask, &low, &p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let f_high =
            build_prior_field(&map, &mask, &high, &p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let peak = |f: &PriorField| f.grid().iter().cloned().fold(0.0f32, f32::max);
        assert!(peak(&f_high) > peak(&f_low));
    }

    #[test]
    fn load_symmetrizes_and_save_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(
            &path,
            r#"{"categories":["a","b"],"D":[[0.0,0.5],[1.5,0.0]],"C":[[1.0,0.4],[0.6,1.0]]}"#,
        )
        .unwrap();
        let m = load_prior_matrices(&path).unwrap();
        assert_eq!(m.distance(0, 1), 1.0);
        assert_eq!(m.distance(1, 0), 1.0);
        assert_eq!(m.confidence(0, 1), 0.5);

        let out = dir.path().join("out.json");
        save_prior_matrices(&out, &m).unwrap();
        let back = load_prior_matrices(&out).unwrap();
        assert_eq!(back.distance_matrix(), m.distance_matrix());
        assert_eq!(back.confidence_matrix(), m.confidence_matrix());
    }

    #[test]
    fn already_symmetric_input_unchanged() {
        let m = two_cat_matrices(0.5, 0.9);
        assert_eq!(m.distance(0, 1), 0.5);
        assert_eq!(m.confidence(0, 1), 0.9);
    }

    #[test]
    fn out_of_range_confidence_rejected() {
        let err = PriorMatrices::from_raw(
            vec!["a".into(), "b".into()],
            arr2(&[[0.0, 1.0], [1.0, 0.0]]),
            arr2(&[[1.0, 1.2], [0.8, 1.0]]),
        );
        assert!(matches!(err, Err(PriorError::Range(_))));
    }

    #[test]
    fn negative_distance_rejected() {
        let err = PriorMatrices::from_raw(
            vec!["a".into(), "b".into()],
            arr2(&[[0.0, -1.0], [1.0, 0.0]]),
            arr2(&[[1.0, 0.5], [0.5, 1.0]]),
        );
        assert!(matches!(err, Err(PriorError::Range(_))));
    }

    #[test]
    fn malformed_json_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(
            load_prior_matrices(&path),
            Err(PriorError::Parse(_))
        ));
    }
}
