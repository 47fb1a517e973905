//! Closed-loop object-goal navigation on synthetic scenes.
//!
//! The agent moves cell-to-cell on a 4-neighbor grid. Each step it reveals
//! the observation region around itself, decides whether to pick a new
//! long-term waypoint (always on the first step, afterwards only when it is
//! too close to or too far from the previous one), descends one step along
//! the FMM field toward the waypoint on its known map (unknown space is
//! optimistically free), and stops once an observed goal instance is within
//! the success distance. Waypoint selection is pluggable: completed-map
//! argmax (the generative model), ground-truth argmax (oracle upper bound),
//! or nearest frontier (exploration baseline). Whenever a goal instance has
//! been observed, every policy heads for the nearest observed goal cell, so
//! policies differ only in how they guess unseen goal locations.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::build_source;
use crate::flow::{euler_sample, FlowError, VelocityModel};
use crate::grid::Cell;
use crate::map::{
    compute_frontiers, crop_region, merge_back, MapError, SemanticMap, VisibilityMask,
    OCC_FREE, OCC_OBSTACLE,
};
use crate::planner::{fmm_distance, reveal_fan, reveal_rect, PlanError, VisibilityShape};

#[derive(Debug, Error)]
pub enum NavError {
    #[error("no records to aggregate")]
    EmptySet,
    #[error("episode unsolvable: {0}")]
    UnsolvableEpisode(String),
    #[error("scene has no occupancy channels")]
    NoOccupancy,
    #[error("goal category {0} not present in scene")]
    MissingGoal(usize),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Coupling(#[from] crate::coupling::CouplingError),
}

/// How the stop criterion measures agent–goal distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    /// FMM distance on the known map.
    Geodesic,
    /// Straight-line distance.
    Euclidean,
}

/// Episode-level configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    /// Maximum motion steps before the episode times out.
    pub max_steps: usize,
    /// Success threshold ξ in meters.
    pub success_dist_m: f32,
    /// Observation region revealed around the agent each step.
    pub observation: VisibilityShape,
    /// Replan when the waypoint is nearer than this, in cells.
    pub near_d: f64,
    /// Replan when the waypoint is farther than this, in cells.
    pub far_d: f64,
    /// Crop expansion for imagination.
    pub epsilon: f32,
    /// Model input size for imagination.
    pub imagine_size: usize,
    /// Euler steps for imagination.
    pub euler_steps: usize,
    /// Noise std filled into unobserved cells before sampling.
    pub delta_sigma: f32,
    pub stop_metric: StopMetric,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            max_steps: 200,
            success_dist_m: 0.25,
            observation: VisibilityShape::Rect { window: 9 },
            near_d: 3.0,
            far_d: 60.0,
            epsilon: 2.0,
            imagine_size: 64,
            euler_steps: 96,
            delta_sigma: 0.01,
            stop_metric: StopMetric::Geodesic,
        }
    }
}

/// One finished rollout and the inputs the metrics need.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub trajectory: Vec<Cell>,
    pub success: bool,
    /// Accumulated per-step motion, meters.
    pub path_length_m: f32,
    /// Geodesic distance from start to the nearest goal instance, meters.
    pub shortest_length_m: f32,
    /// Distance to the nearest goal instance at episode end, meters.
    pub final_goal_distance_m: f32,
    pub steps_used: usize,
    pub goal_category: usize,
}

/// Aggregate navigation metrics.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub sr: f64,
    pub spl: f64,
    pub dts: f64,
    pub episodes: usize,
}

/// `SR = mean(S)`, `SPL = mean(S·l*/max(l, l*))`, `DTS = mean(max(L−ξ, 0))`.
pub fn compute_metrics(records: &[EpisodeRecord], xi_m: f32) -> Result<Metrics, NavError> {
    if records.is_empty() {
        return Err(NavError::EmptySet);
    }
    let n = records.len() as f64;
    let mut sr = 0.0;
    let mut spl = 0.0;
    let mut dts = 0.0;
    for r in records {
        let s = if r.success { 1.0 } else { 0.0 };
        sr += s;
        let denom = r.path_length_m.max(r.shortest_length_m) as f64;
        if denom > 0.0 {
            spl += s * r.shortest_length_m as f64 / denom;
        } else {
            spl += s; // degenerate zero-length episode counts fully
        }
        dts += (r.final_goal_distance_m - xi_m).max(0.0) as f64;
    }
    Ok(Metrics {
        sr: sr / n,
        spl: spl / n,
        dts: dts / n,
        episodes: records.len(),
    })
}

/// Argmax of the given channel; ties resolve to the row-major first cell.
pub fn select_waypoint(map: &SemanticMap, channel: usize) -> Cell {
    let plane = map.grid().index_axis(Axis(0), channel);
    let mut best = Cell::new(0, 0);
    let mut best_v = f32::NEG_INFINITY;
    for ((r, c), &v) in plane.indexed_iter() {
        if v > best_v {
            best_v = v;
            best = Cell::new(r, c);
        }
    }
    best
}

/// Replan policy: a new waypoint is due when the previous one is closer
/// than `near_d` or farther than `far_d` (unreachable counts as infinitely
/// far).
pub fn should_replan(distance_to_prev_cells: f64, near_d: f64, far_d: f64) -> bool {
    distance_to_prev_cells < near_d || distance_to_prev_cells > far_d
}

/// [`should_replan`] with the distance computed by an FMM solve from
/// `g_prev` over `traversable`.
pub fn should_replan_at(
    agent: Cell,
    g_prev: Cell,
    traversable: &Array2<bool>,
    near_d: f64,
    far_d: f64,
) -> Result<bool, NavError> {
    let source = snap_to_traversable(g_prev, traversable)
        .ok_or_else(|| NavError::UnsolvableEpisode("no traversable cell".into()))?;
    let field = fmm_distance(traversable, &[source])?;
    Ok(should_replan(field.distance(agent), near_d, far_d))
}

fn snap_to_traversable(cell: Cell, traversable: &Array2<bool>) -> Option<Cell> {
    if traversable[[cell.row, cell.col]] {
        return Some(cell);
    }
    let (h, w) = (traversable.shape()[0], traversable.shape()[1]);
    let mut seen = Array2::from_elem((h, w), false);
    let mut queue = std::collections::VecDeque::from([cell]);
    seen[[cell.row, cell.col]] = true;
    while let Some(c) = queue.pop_front() {
        if traversable[[c.row, c.col]] {
            return Some(c);
        }
        for n in c.neighbors4(h, w) {
            if !seen[[n.row, n.col]] {
                seen[[n.row, n.col]] = true;
                queue.push_back(n);
            }
        }
    }
    None
}

/// Parameters for map completion during navigation.
#[derive(Clone, Copy, Debug)]
pub struct ImagineParams {
    pub epsilon: f32,
    pub size: usize,
    pub euler_steps: usize,
    pub delta_sigma: f32,
}

impl From<&EpisodeConfig> for ImagineParams {
    fn from(cfg: &EpisodeConfig) -> Self {
        ImagineParams {
            epsilon: cfg.epsilon,
            size: cfg.imagine_size,
            euler_steps: cfg.euler_steps,
            delta_sigma: cfg.delta_sigma,
        }
    }
}

/// Completes a partially observed map: crop around the observed region,
/// fill unobserved cells with noise, integrate the learned ODE, and merge
/// the generation back into unobserved cells only.
pub fn imagine<M: VelocityModel<f32> + ?Sized, R: Rng + ?Sized>(
    observed: &SemanticMap,
    mask: &VisibilityMask,
    model: &M,
    params: &ImagineParams,
    rng: &mut R,
) -> Result<SemanticMap, NavError> {
    let (sub, tf) = crop_region(observed, mask, params.epsilon, params.size)?;
    let mask_l = tf.crop_resize_mask(mask);
    // Observed content survives the resize; unobserved cells become noise.
    let mask_f = mask_l.to_f32();
    let mut masked = sub;
    for ch in 0..masked.shape()[0] {
        let mut channel = masked.index_axis_mut(Axis(0), ch);
        channel *= &mask_f;
    }
    let x0 = build_source(&masked, &mask_l, params.delta_sigma, rng)?;
    let x1_hat = euler_sample(model, &x0, params.euler_steps)?;
    Ok(merge_back(observed, &x1_hat, &tf, mask)?)
}

/// What a waypoint policy sees when asked for a new long-term goal.
pub struct PolicyContext<'a> {
    pub observed: &'a SemanticMap,
    pub mask: &'a VisibilityMask,
    pub frontiers: &'a [Cell],
    pub agent: Cell,
    pub goal_channel: usize,
}

/// Long-term waypoint selection strategy.
pub trait WaypointPolicy {
    fn name(&self) -> &'static str;

    /// Proposes a waypoint; `None` means the policy has no opinion (the
    /// agent then holds position for the step).
    fn waypoint(
        &self,
        ctx: &PolicyContext<'_>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Option<Cell>, NavError>;
}

/// Imagination-driven policy: complete the map with the generative model,
/// then head for the highest-valued cell of the goal channel.
pub struct FlowPolicy<'a, M: VelocityModel<f32>> {
    pub model: &'a M,
    pub params: ImagineParams,
}

impl<M: VelocityModel<f32>> WaypointPolicy for FlowPolicy<'_, M> {
    fn name(&self) -> &'static str {
        "flow"
    }

    fn waypoint(
        &self,
        ctx: &PolicyContext<'_>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Option<Cell>, NavError> {
        let imagined = imagine(ctx.observed, ctx.mask, self.model, &self.params, rng)?;
        Ok(Some(select_waypoint(&imagined, ctx.goal_channel)))
    }
}

/// Upper-bound harness: waypoints come from the ground-truth map itself.
pub struct OracleMapPolicy<'a> {
    pub scene: &'a SemanticMap,
}

impl WaypointPolicy for OracleMapPolicy<'_> {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn waypoint(
        &self,
        ctx: &PolicyContext<'_>,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<Option<Cell>, NavError> {
        Ok(Some(select_waypoint(self.scene, ctx.goal_channel)))
    }
}

/// Exploration baseline: always head for the frontier nearest the agent.
pub struct NearestFrontierPolicy;

impl WaypointPolicy for NearestFrontierPolicy {
    fn name(&self) -> &'static str {
        "frontier"
    }

    fn waypoint(
        &self,
        ctx: &PolicyContext<'_>,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<Option<Cell>, NavError> {
        let mut best: Option<(f32, Cell)> = None;
        for &f in ctx.frontiers {
            let d = f.distance_to(ctx.agent);
            let better = match best {
                None => true,
                Some((bd, bc)) => d < bd || (d == bd && f < bc),
            };
            if better {
                best = Some((d, f));
            }
        }
        Ok(best.map(|(_, c)| c))
    }
}

/// One navigation episode to any instance of `goal_channel`.
pub fn run_episode<P: WaypointPolicy + ?Sized, R: Rng>(
    scene: &SemanticMap,
    start: Cell,
    goal_channel: usize,
    policy: &P,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<EpisodeRecord, NavError> {
    let (nc, h, w) = (scene.channels(), scene.height(), scene.width());
    if goal_channel >= nc {
        return Err(NavError::MissingGoal(goal_channel));
    }
    let true_trav = scene.traversable().ok_or(NavError::NoOccupancy)?;
    if !true_trav[[start.row, start.col]] {
        return Err(NavError::UnsolvableEpisode("start on an obstacle".into()));
    }

    let goal_cells: Vec<Cell> = scene
        .grid()
        .index_axis(Axis(0), goal_channel)
        .indexed_iter()
        .filter_map(|((r, c), &v)| (v > 0.5).then_some(Cell::new(r, c)))
        .collect();
    if goal_cells.is_empty() {
        return Err(NavError::MissingGoal(goal_channel));
    }

    // Shortest length and the final-distance oracle both come from one
    // multi-source solve on true traversability.
    let goal_sources: Vec<Cell> = goal_cells
        .iter()
        .filter_map(|&g| snap_to_traversable(g, &true_trav))
        .collect();
    let goal_field = fmm_distance(&true_trav, &goal_sources)?;
    let l_star = goal_field.distance(start);
    if !l_star.is_finite() {
        return Err(NavError::UnsolvableEpisode(
            "goal unreachable from start".into(),
        ));
    }
    let resolution = scene.resolution();
    let shortest_length_m = l_star as f32 * resolution;
    let xi_cells = (cfg.success_dist_m / resolution) as f64;

    // Agent belief: observed mask, observed semantics, known obstacles.
    let mut mask = VisibilityMask::new_unobserved(h, w);
    let mut observed_grid = Array3::<f32>::zeros((nc, h, w));
    let mut observed_occ = Array3::<f32>::zeros((2, h, w));
    let mut known_obstacle = Array2::<bool>::from_elem((h, w), false);
    let mut heading = (1isize, 0isize);

    let observe = |agent: Cell,
                       mask: &mut VisibilityMask,
                       observed_grid: &mut Array3<f32>,
                       observed_occ: &mut Array3<f32>,
                       known_obstacle: &mut Array2<bool>,
                       heading: (isize, isize)| {
        let delta = match cfg.observation {
            VisibilityShape::Rect { window } => reveal_rect(mask, agent, window),
            VisibilityShape::Fan { range } => reveal_fan(mask, agent, range, heading),
        };
        for cell in delta {
            for ch in 0..nc {
                observed_grid[[ch, cell.row, cell.col]] =
                    scene.grid()[[ch, cell.row, cell.col]];
            }
            for ch in [OCC_OBSTACLE, OCC_FREE] {
                observed_occ[[ch, cell.row, cell.col]] =
                    scene.occupancy().unwrap()[[ch, cell.row, cell.col]];
            }
            if !true_trav[[cell.row, cell.col]] {
                known_obstacle[[cell.row, cell.col]] = true;
            }
        }
    };

    let mut agent = start;
    let mut trajectory = vec![start];
    let mut path_cells = 0usize;
    let mut steps_used = 0usize;
    let mut waypoint: Option<Cell> = None;
    let mut stopped = false;

    observe(
        agent,
        &mut mask,
        &mut observed_grid,
        &mut observed_occ,
        &mut known_obstacle,
        heading,
    );

    loop {
        // Known-map traversability: unknown is optimistically free.
        let known_trav = known_obstacle.mapv(|o| !o);

        // Observed goal instances.
        let observed_goals: Vec<Cell> = goal_cells
            .iter()
            .copied()
            .filter(|&g| mask.observed(g))
            .collect();

        // With an observed goal the agent heads for the geodesically
        // nearest instance; the same multi-source field serves the stop
        // check and the motion step.
        let goal_lock_field = if observed_goals.is_empty() {
            None
        } else {
            let sources: Vec<Cell> = observed_goals
                .iter()
                .filter_map(|&g| snap_to_traversable(g, &known_trav))
                .collect();
            if sources.is_empty() {
                None
            } else {
                Some(fmm_distance(&known_trav, &sources)?)
            }
        };

        // Stop decision on the agent's own map knowledge.
        if !observed_goals.is_empty() {
            let dist_cells = match cfg.stop_metric {
                StopMetric::Geodesic => goal_lock_field
                    .as_ref()
                    .map(|f| f.distance(agent))
                    .unwrap_or(f64::INFINITY),
                StopMetric::Euclidean => observed_goals
                    .iter()
                    .map(|&g| g.distance_to(agent) as f64)
                    .fold(f64::INFINITY, f64::min),
            };
            if dist_cells <= xi_cells {
                stopped = true;
                break;
            }
        }

        if steps_used >= cfg.max_steps {
            break;
        }

        // Waypoint maintenance: goal lock-on bypasses the policy; otherwise
        // ask the policy when the replan rule fires.
        let motion_field = if let Some(field) = goal_lock_field {
            waypoint = None; // forget the exploration waypoint
            Some(field)
        } else {
            let need = match waypoint {
                None => true,
                Some(g) => {
                    let source = snap_to_traversable(g, &known_trav);
                    match source {
                        None => true,
                        Some(s) => {
                            let field = fmm_distance(&known_trav, &[s])?;
                            should_replan(field.distance(agent), cfg.near_d, cfg.far_d)
                        }
                    }
                }
            };
            if need {
                let frontiers = compute_frontiers(&observed_occ, &mask);
                let observed_map = SemanticMap::new(observed_grid.clone(), resolution)?
                    .with_occupancy(observed_occ.clone())?;
                let ctx = PolicyContext {
                    observed: &observed_map,
                    mask: &mask,
                    frontiers: &frontiers,
                    agent,
                    goal_channel,
                };
                if let Some(g) = policy.waypoint(&ctx, rng)? {
                    waypoint = Some(g);
                }
            }
            match waypoint {
                Some(g) => snap_to_traversable(g, &known_trav)
                    .map(|s| fmm_distance(&known_trav, &[s]))
                    .transpose()?,
                None => None,
            }
        };

        // One motion step: descend the field toward the target.
        if let Some(field) = motion_field {
            let here = field.distance(agent);
            let mut best: Option<(f64, Cell)> = None;
            for n in agent.neighbors4(h, w) {
                if known_obstacle[[n.row, n.col]] {
                    continue;
                }
                let d = field.distance(n);
                if d < here && best.map(|(bd, _)| d < bd).unwrap_or(true) {
                    best = Some((d, n));
                }
            }
            if let Some((_, next)) = best {
                if true_trav[[next.row, next.col]] {
                    heading = (
                        next.row as isize - agent.row as isize,
                        next.col as isize - agent.col as isize,
                    );
                    agent = next;
                    trajectory.push(agent);
                    path_cells += 1;
                } else {
                    // Bumped an unseen wall (fan-mode blind spot): learn
                    // it, stay put, spend the step.
                    known_obstacle[[next.row, next.col]] = true;
                }
            }
        }
        assert!(
            true_trav[[agent.row, agent.col]],
            "agent on non-traversable cell"
        );

        steps_used += 1;
        observe(
            agent,
            &mut mask,
            &mut observed_grid,
            &mut observed_occ,
            &mut known_obstacle,
            heading,
        );
    }

    // Success requires having stopped, the goal observed, and the agent
    // truly within ξ of a real goal instance.
    let final_dist_cells = goal_field.distance(agent);
    let final_goal_distance_m = final_dist_cells as f32 * resolution;
    let success = stopped
        && goal_cells.iter().any(|&g| mask.observed(g))
        && final_dist_cells <= xi_cells + 1e-9;

    Ok(EpisodeRecord {
        trajectory,
        success,
        path_length_m: path_cells as f32 * resolution,
        shortest_length_m,
        final_goal_distance_m,
        steps_used,
        goal_category: goal_channel,
    })
}

/// A start/goal pair bound to a scene index.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub scene_index: usize,
    pub start: Cell,
    pub goal_channel: usize,
}

/// Samples solvable episodes whose start-to-goal geodesic length lies in
/// `[min_l_m, max_l_m]`; scenes lacking a goal instance in range are
/// skipped.
pub fn sample_episodes<R: Rng + ?Sized>(
    scenes: &[SemanticMap],
    goal_channels: &[usize],
    count: usize,
    min_l_m: f32,
    max_l_m: f32,
    rng: &mut R,
) -> Result<Vec<EpisodeSpec>, NavError> {
    let mut episodes = Vec::with_capacity(count);
    let mut guard = 0usize;
    while episodes.len() < count {
        guard += 1;
        if guard > count * 200 {
            return Err(NavError::UnsolvableEpisode(
                "episode sampling budget exhausted".into(),
            ));
        }
        let scene_index = rng.gen_range(0..scenes.len());
        let scene = &scenes[scene_index];
        let goal_channel = goal_channels[rng.gen_range(0..goal_channels.len())];
        let trav = scene.traversable().ok_or(NavError::NoOccupancy)?;
        let goal_cells: Vec<Cell> = scene
            .grid()
            .index_axis(Axis(0), goal_channel)
            .indexed_iter()
            .filter_map(|((r, c), &v)| (v > 0.5).then_some(Cell::new(r, c)))
            .collect();
        if goal_cells.is_empty() {
            continue;
        }
        let sources: Vec<Cell> = goal_cells
            .iter()
            .filter_map(|&g| snap_to_traversable(g, &trav))
            .collect();
        if sources.is_empty() {
            continue;
        }
        let field = fmm_distance(&trav, &sources)?;
        let res = scene.resolution();
        let candidates: Vec<Cell> = trav
            .indexed_iter()
            .filter_map(|((r, c), &free)| {
                if !free {
                    return None;
                }
                let d = field.distance(Cell::new(r, c)) as f32 * res;
                (d >= min_l_m && d <= max_l_m).then_some(Cell::new(r, c))
            })
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let start = candidates[rng.gen_range(0..candidates.len())];
        episodes.push(EpisodeSpec {
            scene_index,
            start,
            goal_channel,
        });
    }
    Ok(episodes)
}
