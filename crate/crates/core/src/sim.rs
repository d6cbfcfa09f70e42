//! Closed-loop simulation on random worlds and the Monte Carlo α study.
//!
//! The world holds ground-truth risk; every planning cycle perceives it
//! through fresh Gaussian noise, plans on the noisy copy, and executes the
//! first control through the same dynamics the planner uses.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, Median, OrderStatistics};

use crate::config::PlannerConfig;
use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::geom::{edge_cost, plan_on_raster, GeomOutcome, GeomPlanConfig, GeometricPath};
use crate::gridmap::{layers, GridMap, Point2};
use crate::mpc::{AlphaScheduler, PlanOutcome, ReplanResult, Scene};
use crate::polygeom::footprint_at;
use crate::risk::{build_cvar_layer, RiskLevel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    /// Peak-to-peak scale of the smooth elevation, meters.
    pub elevation_amplitude: f64,
    /// Wavelength of the coarsest noise octave, meters.
    pub elevation_scale: f64,
    pub octaves: usize,
    pub risk_scale: f64,
    /// Largest texture risk outside lethal blobs.
    pub risk_amplitude: f64,
    /// Texture quantile below which terrain is risk-free, in `[0, 1)`.
    pub risk_threshold: f64,
    pub lethal_blobs: usize,
    /// Blob radius range, meters.
    pub blob_radius: [f64; 2],
    /// Perception noise scale.
    pub sigma_percep: f64,
    /// Noise std of a risk-free cell relative to `sigma_percep`; the std
    /// grows linearly with the true risk above that.
    pub sigma_floor: f64,
    /// Straight-line start–goal distance, meters.
    pub goal_distance: f64,
    /// No blobs within this distance of the start and goal.
    pub clear_radius: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 64,
            height: 64,
            resolution: 0.25,
            elevation_amplitude: 0.2,
            elevation_scale: 6.0,
            octaves: 3,
            risk_scale: 4.0,
            risk_amplitude: 0.6,
            risk_threshold: 0.4,
            lethal_blobs: 6,
            blob_radius: [0.5, 1.2],
            sigma_percep: 0.3,
            sigma_floor: 0.05,
            goal_distance: 8.0,
            clear_radius: 1.0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Configuration(format!("world: {m}")));
        if self.width < 2 || self.height < 2 || !(self.resolution > 0.0) {
            return bad("needs at least 2x2 cells and a positive resolution");
        }
        if !(self.elevation_scale > 0.0 && self.risk_scale > 0.0) || self.octaves == 0 {
            return bad("noise scales must be > 0 with at least one octave");
        }
        if !(0.0..=1.0).contains(&self.risk_amplitude) || !(0.0..1.0).contains(&self.risk_threshold) {
            return bad("risk_amplitude must lie in [0, 1] and risk_threshold in [0, 1)");
        }
        if !(self.blob_radius[0] > 0.0 && self.blob_radius[0] <= self.blob_radius[1]) {
            return bad("blob_radius must be an increasing positive range");
        }
        if !(self.sigma_percep >= 0.0 && self.sigma_floor >= 0.0) {
            return bad("noise parameters must be >= 0");
        }
        let span = (self.width.min(self.height) - 1) as f64 * self.resolution;
        if !(self.goal_distance > 0.0 && self.goal_distance < span) {
            return bad("goal_distance must be positive and fit inside the map");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub world: WorldSpec,
    pub goal_tolerance: f64,
    pub max_steps: usize,
    /// Entering a cell with true risk at or above this is a failure.
    pub failure_risk: f64,
    /// Declare the robot stuck after this many cycles with less than
    /// `stuck_progress` meters of displacement.
    pub stuck_window: usize,
    pub stuck_progress: f64,
    /// Lower α on infeasible cycles and restore it after feasible streaks.
    pub adaptive_alpha: bool,
    /// A fresh geometric plan replaces the rest of the previous one only
    /// when it is cheaper by this fraction on the current map; damps route
    /// flipping under re-observed noise.
    pub path_hysteresis: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            goal_tolerance: 0.5,
            max_steps: 1000,
            failure_risk: 0.9,
            stuck_window: 60,
            stuck_progress: 0.1,
            adaptive_alpha: false,
            path_hysteresis: 0.15,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if !(self.goal_tolerance > 0.0) || self.max_steps == 0 || !(self.failure_risk > 0.0) {
            return Err(Error::Configuration(
                "sim: goal_tolerance, max_steps and failure_risk must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.path_hysteresis) {
            return Err(Error::Configuration("sim: path_hysteresis must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Ground truth plus what perception needs to corrupt it.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// Elevation, normals, `risk_mu` = true risk and `risk_sigma` = 0.
    pub truth: GridMap,
    /// Per-cell perception noise std.
    pub noise_sigma: Vec<f64>,
    pub start: Point2,
    pub goal: Point2,
}

/// Multi-octave value noise in `[0, 1]` sampled at cell centers.
fn value_noise(rng: &mut ChaCha8Rng, map: &GridMap, scale: f64, octaves: usize) -> Vec<f64> {
    let (lo, hi) = map.extent();
    let mut out = vec![0.0; map.len()];
    let mut amp_sum = 0.0;
    for o in 0..octaves {
        let size = scale / f64::from(1u32 << o.min(20));
        let amp = 0.5f64.powi(o as i32);
        let nx = ((hi[0] - lo[0]) / size).ceil() as usize + 2;
        let ny = ((hi[1] - lo[1]) / size).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..nx * ny).map(|_| rng.random::<f64>()).collect();
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        for (i, v) in out.iter_mut().enumerate() {
            let p = map.world_of(map.cell_at(i));
            let (gx, gy) = ((p[0] - lo[0]) / size, (p[1] - lo[1]) / size);
            let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
            let (tx, ty) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
            let at = |x: usize, y: usize| lattice[y * nx + x];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            *v += amp * (top * (1.0 - ty) + bottom * ty);
        }
        amp_sum += amp;
    }
    out.iter_mut().for_each(|v| *v /= amp_sum);
    out
}

fn dist(a: Point2, b: Point2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Deterministic world from `spec.seed`: smooth elevation, a thresholded
/// risk texture, lethal blobs kept clear of the start and goal.
pub fn generate_random_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut map = GridMap::new(spec.width, spec.height, spec.resolution, [0.0, 0.0])?;
    let elevation = value_noise(&mut rng, &map, spec.elevation_scale, spec.octaves)
        .into_iter()
        .map(|v| spec.elevation_amplitude * v)
        .collect();
    map.insert_layer(layers::ELEVATION, elevation)?;
    map.compute_surface_normals(layers::ELEVATION)?;
    let texture = value_noise(&mut rng, &map, spec.risk_scale, spec.octaves);
    // rank-normalize so the threshold is an area fraction
    let mut order: Vec<usize> = (0..texture.len()).collect();
    order.sort_by(|&a, &b| texture[a].total_cmp(&texture[b]).then(a.cmp(&b)));
    let mut mu = vec![0.0; texture.len()];
    let n = texture.len() as f64;
    for (rank, &i) in order.iter().enumerate() {
        let q = (rank as f64 + 0.5) / n;
        mu[i] = spec.risk_amplitude * ((q - spec.risk_threshold) / (1.0 - spec.risk_threshold)).clamp(0.0, 1.0);
    }

    let (lo, hi) = map.extent();
    let margin = spec.clear_radius.max(2.0 * spec.resolution);
    let inner = |p: Point2| p[0] >= lo[0] + margin && p[0] <= hi[0] - margin && p[1] >= lo[1] + margin && p[1] <= hi[1] - margin;
    let mut endpoints = None;
    for _ in 0..10_000 {
        let s = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
        let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let g = [s[0] + spec.goal_distance * heading.cos(), s[1] + spec.goal_distance * heading.sin()];
        if inner(s) && inner(g) {
            endpoints = Some((s, g));
            break;
        }
    }
    let (start, goal) = endpoints.ok_or_else(|| Error::Configuration("world: no start/goal pair fits the map".into()))?;
    // quiet terrain at the endpoints
    for (i, m) in mu.iter_mut().enumerate() {
        let p = map.world_of(map.cell_at(i));
        if dist(p, start) <= spec.clear_radius || dist(p, goal) <= spec.clear_radius {
            *m = 0.0;
        }
    }
    let mut placed = 0;
    let mut attempts = 0;
    while placed < spec.lethal_blobs && attempts < 100 * (spec.lethal_blobs + 1) {
        attempts += 1;
        let c = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
        let r = rng.random_range(spec.blob_radius[0]..=spec.blob_radius[1]);
        if dist(c, start) < r + spec.clear_radius || dist(c, goal) < r + spec.clear_radius {
            continue;
        }
        for (i, m) in mu.iter_mut().enumerate() {
            if dist(map.world_of(map.cell_at(i)), c) <= r {
                *m = 1.0;
            }
        }
        placed += 1;
    }
    let noise_sigma = mu.iter().map(|m| spec.sigma_percep * (spec.sigma_floor + m)).collect();
    map.insert_layer(layers::RISK_MU, mu)?;
    map.add_layer(layers::RISK_SIGMA, 0.0);
    Ok(World {
        spec: spec.clone(),
        truth: map,
        noise_sigma,
        start,
        goal,
    })
}

impl World {
    /// One noisy perception of the world: `risk_mu` is the true risk plus
    /// Gaussian noise (clamped to `[0, 1]`), `risk_sigma` the noise std.
    pub fn observe<R: Rng>(&self, rng: &mut R) -> GridMap {
        let mut map = self.truth.clone();
        let truth = self.truth.layer(layers::RISK_MU).expect("world has risk");
        let mu = truth
            .iter()
            .zip(&self.noise_sigma)
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(rng);
                (m + s * z).clamp(0.0, 1.0)
            })
            .collect();
        map.insert_layer(layers::RISK_MU, mu).expect("same size");
        map.insert_layer(layers::RISK_SIGMA, self.noise_sigma.clone()).expect("same size");
        map
    }

    /// Truth and one observation drawn from the world seed.
    pub fn maps(&self) -> (GridMap, GridMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x6f62_7365_7276_6564);
        (self.truth.clone(), self.observe(&mut rng))
    }

    pub fn true_risk(&self, p: Point2) -> Option<f64> {
        let cell = self.truth.cell_of(p)?;
        Some(self.truth.layer(layers::RISK_MU).expect("world has risk")[self.truth.index(cell)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    NoGeometricPath,
    LethalCell,
    OffMap,
    Stuck,
    StepCap,
}

impl FailureReason {
    pub fn name(self) -> &'static str {
        match self {
            FailureReason::NoGeometricPath => "no_geometric_path",
            FailureReason::LethalCell => "lethal_cell",
            FailureReason::OffMap => "off_map",
            FailureReason::Stuck => "stuck",
            FailureReason::StepCap => "step_cap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub path_length: f64,
    pub max_risk: f64,
    pub mean_cvar: f64,
    pub steps: usize,
    pub infeasible_cycles: usize,
    pub wall_time_ms: f64,
    pub failure_reason: Option<FailureReason>,
    /// Executed states, starting with the initial one.
    #[serde(skip)]
    pub states: Vec<State>,
}

/// Rest of `path` from the pose nearest `p`, with its search cost on the
/// raster `rho`; `None` once the robot has left the path or the rest crosses
/// a lethal cell.
fn remaining_path(map: &GridMap, rho: &[f64], path: &GeometricPath, p: Point2, cfg: &GeomPlanConfig) -> Option<(GeometricPath, f64)> {
    let (start, d) = path
        .poses
        .iter()
        .enumerate()
        .map(|(i, q)| (i, dist(*q, p)))
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    if d > 2.0 * map.resolution() {
        return None;
    }
    let poses = path.poses[start..].to_vec();
    let (mut cost, mut risk) = (0.0, 0.0);
    for w in poses.windows(2) {
        let r = rho[map.index(map.cell_of(w[1])?)];
        if !(r < cfg.lethal_threshold) {
            return None;
        }
        cost += edge_cost(r, dist(w[0], w[1]), cfg.lambda);
        risk += r;
    }
    let total_length = poses.windows(2).map(|w| dist(w[0], w[1])).sum();
    Some((
        GeometricPath {
            poses,
            total_risk: risk,
            total_length,
            cost,
        },
        cost,
    ))
}

/// Largest true risk over cells touched by the segment `a`–`b`.
fn max_risk_along(world: &World, a: Point2, b: Point2) -> f64 {
    let step = 0.25 * world.truth.resolution();
    let n = (dist(a, b) / step).ceil().max(1.0) as usize;
    (0..=n)
        .filter_map(|i| {
            let t = i as f64 / n as f64;
            world.true_risk([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])])
        })
        .fold(0.0, f64::max)
}

/// Runs one closed-loop episode from `start` (facing the goal, at rest).
pub fn run_episode(world: &World, start: Point2, goal: Point2, cfg: &PlannerConfig, seed: u64) -> Result<EpisodeResult> {
    let started = Instant::now();
    let sim = &cfg.sim;
    let mpc = cfg.mpc()?;
    let model = &mpc.model;
    world.truth.require_cell(start)?;
    world.truth.require_cell(goal)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heading = (goal[1] - start[1]).atan2(goal[0] - start[0]);
    let mut x = State::general(start[0], start[1], heading, 0.0, 0.0, 0.0);
    let mut states = vec![x];
    let mut path_length = 0.0;
    let mut max_risk = world.true_risk(start).unwrap_or(1.0);
    let mut cvar_sum = 0.0;
    let mut infeasible = 0;
    let mut prev: Option<ReplanResult> = None;
    let mut prev_path: Option<GeometricPath> = None;
    let mut scheduler = AlphaScheduler::new(cfg.mpc.alpha, cfg.alpha_policy);
    let mut failure = None;
    let mut steps = 0;
    let mut success = false;
    while steps < sim.max_steps {
        if dist(x.position(), goal) <= sim.goal_tolerance {
            success = true;
            break;
        }
        if steps >= sim.stuck_window && dist(x.position(), states[steps - sim.stuck_window].position()) < sim.stuck_progress {
            failure = Some(FailureReason::Stuck);
            break;
        }
        let level = if sim.adaptive_alpha { scheduler.current } else { cfg.mpc.alpha };
        let observed = world.observe(&mut rng);
        let rho = build_cvar_layer(&observed, level)?;
        let geom_cfg = GeomPlanConfig {
            alpha: level,
            ..cfg.geometric
        };
        let kept = prev_path
            .as_ref()
            .and_then(|old| remaining_path(&observed, &rho, old, x.position(), &geom_cfg));
        match plan_on_raster(&observed, &rho, x.position(), goal, &geom_cfg)? {
            GeomOutcome::Path(p) => {
                prev_path = Some(match kept {
                    Some((old, cost)) if p.cost >= (1.0 - sim.path_hysteresis) * cost => old,
                    _ => p,
                })
            }
            GeomOutcome::NoPath { reason } => {
                log::debug!("step {steps}: no geometric path ({reason})");
            }
        }
        let Some(path) = prev_path.as_ref() else {
            failure = Some(FailureReason::NoGeometricPath);
            break;
        };
        let mut step_mpc = mpc.clone();
        step_mpc.cfg.alpha = level;
        let mut scene = Scene::from_raster(&observed, level, rho, step_mpc.cfg.rho_max, Some(step_mpc.planning_roi(&x)));
        scene.release_footprint(&footprint_at(&step_mpc.footprint, x.pose()));
        let res = step_mpc.replan_in_scene(&x, prev.as_ref(), path, &scene, rng.next_u64())?;
        let planned = &res.trajectory.states[1..];
        cvar_sum += planned.iter().map(|s| scene.risk_at(s.position())).sum::<f64>() / planned.len() as f64;
        if !res.feasible {
            infeasible += 1;
        }
        log::debug!(
            "step {steps}: x=({:.2},{:.2},{:.2}) v={:.2} {:?} cost={:.3} path={}",
            x.p_x(),
            x.p_y(),
            x.p_theta(),
            x.v_x(),
            res.source,
            res.stats.cost,
            path.poses.len()
        );
        if sim.adaptive_alpha {
            scheduler.update(if res.feasible { PlanOutcome::Feasible } else { PlanOutcome::Infeasible });
        }
        let next = model.step(&x, &res.trajectory.controls[0]);
        path_length += dist(x.position(), next.position());
        max_risk = max_risk.max(max_risk_along(world, x.position(), next.position()));
        x = next;
        states.push(x);
        steps += 1;
        prev = Some(res);
        match world.true_risk(x.position()) {
            None => {
                failure = Some(FailureReason::OffMap);
                break;
            }
            Some(r) if r >= sim.failure_risk => {
                failure = Some(FailureReason::LethalCell);
                break;
            }
            _ => {}
        }
    }
    if !success && failure.is_none() {
        if dist(x.position(), goal) <= sim.goal_tolerance {
            success = true;
        } else {
            failure = Some(FailureReason::StepCap);
        }
    }
    Ok(EpisodeResult {
        success,
        path_length,
        max_risk: max_risk.min(1.0),
        mean_cvar: if steps > 0 { cvar_sum / steps as f64 } else { 0.0 },
        steps,
        infeasible_cycles: infeasible,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        failure_reason: failure,
        states,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub run_id: usize,
    pub alpha: f64,
    pub seed: u64,
    pub success: bool,
    pub path_length_m: f64,
    pub max_risk: f64,
    pub mean_cvar: f64,
    pub steps: usize,
    /// Empty unless timing was requested, so tables stay reproducible.
    pub wall_time_ms: Option<f64>,
    #[serde(skip)]
    pub failure_reason: Option<FailureReason>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    /// `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut d = Data::new(values.to_vec());
        Some(Self {
            q1: d.lower_quartile(),
            median: d.median(),
            q3: d.upper_quartile(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaAggregate {
    pub alpha: f64,
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Over successful runs.
    pub path_length_m: Option<Quartiles>,
    /// Over all runs.
    pub max_risk: Option<Quartiles>,
    pub mean_cvar: Option<Quartiles>,
    pub failures: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloReport {
    pub master_seed: u64,
    pub runs: usize,
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<AlphaAggregate>,
    /// Spearman correlation of α against the per-α medians.
    pub spearman_alpha_path_length: Option<f64>,
    pub spearman_alpha_max_risk: Option<f64>,
}

/// Per-run seeds; run `i`'s seed does not depend on how many runs follow.
pub fn run_seeds(master_seed: u64, n_runs: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    (0..n_runs).map(|_| rng.next_u64()).collect()
}

/// Average ranks (ties share the mean rank), 1-based.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant or the
/// lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// `n_runs` worlds per master seed, each driven at every α in `alphas`
/// with the same world and perception noise.
/// Noise/planner seed of the episode played on world `world_seed`, shared by
/// batch runs and single simulations so either reproduces the other.
pub fn episode_seed(world_seed: u64) -> u64 {
    world_seed.rotate_left(17) ^ 0x5eed
}

pub fn monte_carlo(
    n_runs: usize,
    alphas: &[RiskLevel],
    cfg: &PlannerConfig,
    master_seed: u64,
    jobs: usize,
    timing: bool,
) -> Result<MonteCarloReport> {
    if n_runs == 0 || alphas.is_empty() {
        return Err(Error::InvalidArgument("need at least one run and one alpha".into()));
    }
    cfg.validate()?;
    let seeds = run_seeds(master_seed, n_runs);
    let jobs_list: Vec<(usize, usize)> = (0..n_runs).flat_map(|r| (0..alphas.len()).map(move |a| (r, a))).collect();
    let work = |&(run, ai): &(usize, usize)| -> Result<RunRow> {
        let seed = seeds[run];
        let world = generate_random_world(&WorldSpec {
            seed,
            ..cfg.sim.world.clone()
        })?;
        let mut c = cfg.clone();
        c.set_alpha(alphas[ai]);
        let ep = run_episode(&world, world.start, world.goal, &c, episode_seed(seed))?;
        Ok(RunRow {
            run_id: run,
            alpha: alphas[ai].alpha(),
            seed,
            success: ep.success,
            path_length_m: ep.path_length,
            max_risk: ep.max_risk,
            mean_cvar: ep.mean_cvar,
            steps: ep.steps,
            wall_time_ms: timing.then_some(ep.wall_time_ms),
            failure_reason: ep.failure_reason,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Configuration(format!("thread pool: {e}")))?;
    let rows: Vec<RunRow> = pool.install(|| jobs_list.par_iter().map(work).collect::<Result<Vec<_>>>())?;

    let aggregates: Vec<AlphaAggregate> = alphas
        .iter()
        .map(|a| {
            let mine: Vec<&RunRow> = rows.iter().filter(|r| r.alpha == a.alpha()).collect();
            let ok: Vec<f64> = mine.iter().filter(|r| r.success).map(|r| r.path_length_m).collect();
            let mut failures = BTreeMap::new();
            for r in &mine {
                if let Some(f) = r.failure_reason {
                    *failures.entry(f.name().to_string()).or_insert(0) += 1;
                }
            }
            AlphaAggregate {
                alpha: a.alpha(),
                runs: mine.len(),
                successes: ok.len(),
                success_rate: ok.len() as f64 / mine.len() as f64,
                path_length_m: Quartiles::of(&ok),
                max_risk: Quartiles::of(&mine.iter().map(|r| r.max_risk).collect::<Vec<_>>()),
                mean_cvar: Quartiles::of(&mine.iter().map(|r| r.mean_cvar).collect::<Vec<_>>()),
                failures,
            }
        })
        .collect();
    let trend = |f: &dyn Fn(&AlphaAggregate) -> Option<f64>| {
        let pairs: Vec<(f64, f64)> = aggregates.iter().filter_map(|g| f(g).map(|v| (g.alpha, v))).collect();
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        spearman(&x, &y)
    };
    let spearman_alpha_path_length = trend(&|g| g.path_length_m.map(|q| q.median));
    let spearman_alpha_max_risk = trend(&|g| g.max_risk.map(|q| q.median));
    Ok(MonteCarloReport {
        master_seed,
        runs: n_runs,
        rows,
        aggregates,
        spearman_alpha_path_length,
        spearman_alpha_max_risk,
    })
}

impl MonteCarloReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Aggregates and trend statistics, without the per-run rows.
    pub fn summary_json(&self) -> String {
        let v = serde_json::json!({
            "master_seed": self.master_seed,
            "runs": self.runs,
            "aggregates": self.aggregates,
            "spearman_alpha_path_length": self.spearman_alpha_path_length,
            "spearman_alpha_max_risk": self.spearman_alpha_max_risk,
        });
        serde_json::to_string_pretty(&v).expect("serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> WorldSpec {
        WorldSpec {
            seed,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn world_is_deterministic() {
        let a = generate_random_world(&small_spec(3)).unwrap();
        let b = generate_random_world(&small_spec(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.maps(), b.maps());
        let c = generate_random_world(&small_spec(4)).unwrap();
        assert_ne!(a.truth, c.truth);
        assert!((dist(a.start, a.goal) - 8.0).abs() < 1e-9);
        assert!(a.true_risk(a.start).unwrap() < 0.9 && a.true_risk(a.goal).unwrap() < 0.9);
    }

    #[test]
    fn noiseless_perception_is_exact() {
        let w = generate_random_world(&WorldSpec {
            sigma_percep: 0.0,
            ..small_spec(5)
        })
        .unwrap();
        let (truth, observed) = w.maps();
        assert_eq!(truth.layer(layers::RISK_MU).unwrap(), observed.layer(layers::RISK_MU).unwrap());
    }

    #[test]
    fn perception_noise_is_unbiased_away_from_clamps() {
        let w = generate_random_world(&WorldSpec {
            width: 128,
            height: 128,
            sigma_percep: 0.05,
            ..small_spec(6)
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = w.observe(&mut rng);
        let truth = w.truth.layer(layers::RISK_MU).unwrap();
        let seen = obs.layer(layers::RISK_MU).unwrap();
        let mut diffs = Vec::new();
        for i in 0..truth.len() {
            let s = w.noise_sigma[i];
            // cells where clamping is practically impossible
            if truth[i] - 5.0 * s > 0.0 && truth[i] + 5.0 * s < 1.0 {
                diffs.push((seen[i] - truth[i]) / s);
            }
        }
        assert!(diffs.len() > 2000, "{}", diffs.len());
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        assert!(mean.abs() < 3.0 / (diffs.len() as f64).sqrt(), "{mean}");
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[2.0, 5.0, 9.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[9.0, 5.0, 2.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), None);
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        // textbook example with a known coefficient
        let x = [106.0, 86.0, 100.0, 101.0, 99.0, 103.0, 97.0, 113.0, 112.0, 110.0];
        let y = [7.0, 0.0, 27.0, 50.0, 28.0, 29.0, 20.0, 12.0, 6.0, 17.0];
        assert!((spearman(&x, &y).unwrap() + 29.0 / 165.0).abs() < 1e-12);
    }

    #[test]
    fn run_seeds_are_prefix_stable() {
        let a = run_seeds(9, 5);
        let b = run_seeds(9, 12);
        assert_eq!(a[..], b[..5]);
    }
}
