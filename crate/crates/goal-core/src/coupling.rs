//! Data-dependent training couplings.
//!
//! A coupling pairs a noisy partial map `x0 = γ⊙X' + γ̄⊙ε` with a
//! prior-enriched full map `x1 = λ·(γ̄⊙p) + X'` built from the same scene
//! and the same visibility mask, so source and target are strongly
//! correlated rather than independent. The straight-line interpolant
//! `x_t = (1−t)·x0 + t·x1` has the constant velocity `x1 − x0`.

use ndarray::{Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Cell;
use crate::map::{crop_region, MapError, SemanticMap, VisibilityMask, OCC_FREE, OCC_OBSTACLE};
use crate::planner::{simulate_trajectory_mask_with, PlanError, VisibilityShape};
use crate::prior::{build_prior_field, PriorError, PriorField, PriorMatrices, PriorParams};

#[derive(Debug, Error)]
pub enum CouplingError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("interpolation time {0} outside [0, 1]")]
    Domain(f32),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// Knobs for coupling construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CouplingParams {
    /// Std of the Gaussian noise injected into unobserved cells.
    pub delta_sigma: f32,
    /// Visibility simulation shape for training masks.
    pub visibility: VisibilityShape,
    /// Crop expansion factor around the observed bounding box.
    pub epsilon: f32,
    /// Square side the cropped region is resized to (model input size).
    pub target_size: usize,
    /// Prior thresholds and scales; `prior.lambda = 0` disables the prior.
    pub prior: PriorParams,
}

impl Default for CouplingParams {
    fn default() -> Self {
        CouplingParams {
            delta_sigma: 0.01,
            visibility: VisibilityShape::Rect { window: 9 },
            epsilon: 2.0,
            target_size: 256,
            prior: PriorParams::default(),
        }
    }
}

/// One training pair: noisy partial source, prior-enriched target, and the
/// visibility mask both were built with, all at the model input size.
#[derive(Clone, Debug)]
pub struct TrainingCoupling {
    pub x0: Array3<f32>,
    pub x1: Array3<f32>,
    pub mask: VisibilityMask,
}

impl TrainingCoupling {
    pub fn channels(&self) -> usize {
        self.x0.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.x0.shape()[1]
    }
}

fn check_mask_shape(x: &Array3<f32>, mask: &VisibilityMask) -> Result<(), CouplingError> {
    if x.shape()[1] != mask.height() || x.shape()[2] != mask.width() {
        return Err(CouplingError::ShapeMismatch(format!(
            "map {:?} vs mask ({}, {})",
            x.shape(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Source construction: `x0 = γ⊙X' + γ̄⊙ε`, `ε ~ N(0, Δσ²)` i.i.d. per cell
/// per channel.
pub fn build_source<R: Rng + ?Sized>(
    xp: &Array3<f32>,
    mask: &VisibilityMask,
    delta_sigma: f32,
    rng: &mut R,
) -> Result<Array3<f32>, CouplingError> {
    check_mask_shape(xp, mask)?;
    let normal = Normal::new(0.0f32, delta_sigma.max(0.0))
        .map_err(|e| CouplingError::ShapeMismatch(e.to_string()))?;
    let mut x0 = xp.clone();
    for ch in 0..x0.shape()[0] {
        let mut channel = x0.index_axis_mut(Axis(0), ch);
        for ((r, c), v) in channel.indexed_iter_mut() {
            if !mask.observed(Cell::new(r, c)) {
                *v = if delta_sigma > 0.0 {
                    normal.sample(rng)
                } else {
                    0.0
                };
            }
        }
    }
    Ok(x0)
}

/// Target construction: `x1 = λ·(γ̄⊙p) + X'`.
pub fn build_target(
    xp: &Array3<f32>,
    mask: &VisibilityMask,
    prior: &PriorField,
    lambda: f32,
) -> Result<Array3<f32>, CouplingError> {
    check_mask_shape(xp, mask)?;
    if prior.grid().shape() != xp.shape() {
        return Err(CouplingError::ShapeMismatch(format!(
            "prior {:?} vs map {:?}",
            prior.grid().shape(),
            xp.shape()
        )));
    }
    let mut x1 = xp.clone();
    if lambda != 0.0 {
        for ch in 0..x1.shape()[0] {
            let p = prior.grid().index_axis(Axis(0), ch);
            let mut channel = x1.index_axis_mut(Axis(0), ch);
            for ((r, c), v) in channel.indexed_iter_mut() {
                if !mask.observed(Cell::new(r, c)) {
                    *v += lambda * p[[r, c]];
                }
            }
        }
    }
    Ok(x1)
}

/// Straight-line interpolant `x_t = (1−t)·x0 + t·x1`.
pub fn interpolate(
    x0: &Array3<f32>,
    x1: &Array3<f32>,
    t: f32,
) -> Result<Array3<f32>, CouplingError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CouplingError::Domain(t));
    }
    if x0.shape() != x1.shape() {
        return Err(CouplingError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    let a = 1.0 - t;
    let mut out = x0.clone();
    out.zip_mut_with(x1, |o, &b| *o = *o * a + b * t);
    Ok(out)
}

/// Ground-truth velocity of the straight-line path: `u* = x1 − x0`,
/// constant in `t`.
pub fn velocity_target(x0: &Array3<f32>, x1: &Array3<f32>) -> Result<Array3<f32>, CouplingError> {
    if x0.shape() != x1.shape() {
        return Err(CouplingError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    Ok(x1 - x0)
}

/// Full training-sample construction from a ground-truth scene:
/// trajectory mask → crop (scene, mask, occupancy consistently) → prior
/// field → target → source. The prior's resolution is adjusted to the
/// cropped map's effective meters-per-cell.
pub fn make_training_sample<R: Rng + ?Sized>(
    scene: &SemanticMap,
    priors: &PriorMatrices,
    params: &CouplingParams,
    rng: &mut R,
) -> Result<TrainingCoupling, CouplingError> {
    let mask = simulate_trajectory_mask_with(scene, rng, params.visibility)?;
    let (sub, tf) = crop_region(scene, &mask, params.epsilon, params.target_size)?;
    let mask_l = tf.crop_resize_mask(&mask);

    // Occupancy travels through the same transform so frontier geometry
    // matches the cropped frame.
    let occ = scene
        .occupancy()
        .ok_or_else(|| CouplingError::ShapeMismatch("scene has no occupancy".into()))?;
    let l = params.target_size;
    let mut occ_l = Array3::zeros((2, l, l));
    for ch in [OCC_OBSTACLE, OCC_FREE] {
        let resized = tf.crop_resize_channel(&occ.index_axis(Axis(0), ch).to_owned());
        occ_l
            .index_axis_mut(Axis(0), ch)
            .assign(&resized.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 }));
    }

    // Partial map in the cropped frame: observed content only.
    let mask_f = mask_l.to_f32();
    let mut partial = sub.clone();
    for ch in 0..partial.shape()[0] {
        let mut channel = partial.index_axis_mut(Axis(0), ch);
        channel *= &mask_f;
    }
    let res_eff = scene.resolution() * 0.5 * (tf.row_scale() + tf.col_scale());
    let partial_map = SemanticMap::new(partial, res_eff)?.with_occupancy(occ_l)?;

    let prior_params = params.prior.at_resolution(res_eff);
    let prior = build_prior_field(&partial_map, &mask_l, priors, &prior_params, rng)?;

    let x1 = build_target(&sub, &mask_l, &prior, params.prior.lambda)?;
    let x0 = build_source(&sub, &mask_l, params.delta_sigma, rng)?;
    Ok(TrainingCoupling {
        x0,
        x1,
        mask: mask_l,
    })
}
