//! Core library for GOAL-style semantic map completion and object-goal
//! navigation at grid scale.
//!
//! The pipeline, bottom to top:
//!
//! * [`map`] — multi-channel semantic grid maps, visibility masks, object
//!   clustering, frontier extraction and crop/merge geometry.
//! * [`planner`] — fast marching method distance fields, path extraction and
//!   trajectory-based visibility simulation.
//! * [`prior`] — pairwise distance/confidence matrices (from an LLM or a
//!   file) rasterized into Gaussian prior fields.
//! * [`coupling`] — data-dependent training couplings `(X0, X1, mask)` with
//!   the straight-line interpolant and its constant velocity target.
//! * [`flow`] — a time-conditioned convolutional velocity network with a
//!   hand-written backward pass, AdamW/EMA training loop and Euler sampler.
//! * [`scene`] — synthetic indoor scene generation with controllable object
//!   co-occurrence structure.
//! * [`nav`] — the closed-loop episode runner and SR/SPL/DTS metrics.

pub mod coupling;
pub mod flow;
pub mod grid;
pub mod map;
pub mod nav;
pub mod planner;
pub mod prior;
pub mod scene;
pub mod tensor;

pub use grid::{Cell, GridPoint};
pub use map::{SemanticMap, VisibilityMask};
