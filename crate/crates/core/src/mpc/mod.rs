//! Risk-aware kinodynamic MPC solved by sequential quadratic programming.
//!
//! One replan: build a reference from the geometric path, score a
//! trajectory library, then repeatedly linearize around the best candidate,
//! solve the QP, and accept a fraction of the correction via linesearch.

mod assembly;
mod library;
mod reference;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, Control, DynamicsModel, ModelKind, State, Trajectory};
use crate::error::{Error, Result};
use crate::geom::GeometricPath;
use crate::gridmap::{layers, CellIndex, GridMap, Point2};
use crate::polygeom::{decompose_lethal_cells, footprint_at, signed_distance, ConvexPolygon, FootprintSpec, Roi};
use crate::qp::{solve_qp, QpSettings, QpStatus, WarmStart};
use crate::risk::{cvar_raster, RiskLevel};

pub use assembly::{
    build_sqp_qp, cvar_cost_derivatives, cvar_cost_derivatives_with_step, orientation, orientation_constraint_rows,
    orientation_constraint_rows_with_step, CvarDerivatives, Layout, OrientationRows, SqpProblem,
};
pub use library::{generate_trajectory_library, Candidate, CandidateKind, CandidateSet};
pub use reference::reference_trajectory;

/// CVaR assumed where the map has no data at all.
pub const MISSING_RISK: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinesearchConfig {
    pub gamma_init: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub max_iteration: usize,
}

impl Default for LinesearchConfig {
    fn default() -> Self {
        Self {
            gamma_init: 1.0,
            gamma_min: 0.125,
            gamma_max: 1.0,
            max_iteration: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LibraryConfig {
    /// Number of Gaussian-perturbed copies of the path follower.
    pub n_random: usize,
    /// Per-component standard deviation of the control perturbations.
    pub perturb_std: [f64; 3],
    /// Constant-yaw-rate arcs, as fractions of the yaw-rate limit.
    pub arc_rates: Vec<f64>,
    /// Include v-turn and u-turn primitives.
    pub turn_primitives: bool,
    /// Pure-pursuit lookahead along the path, meters.
    pub lookahead: f64,
    /// Yaw-rate command per radian of heading error.
    pub yaw_gain: f64,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        Self {
            n_random: 6,
            perturb_std: [0.3, 0.3, 0.3],
            arc_rates: vec![-0.8, -0.4, 0.4, 0.8],
            turn_primitives: true,
            lookahead: 0.75,
            yaw_gain: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Horizon length `T` in steps; the step is the dynamics model's `dt`.
    pub horizon: usize,
    /// Tracking weights per state component.
    pub q: [f64; 6],
    /// Multiplier on the final step's tracking weight.
    pub q_terminal: f64,
    /// Control effort weights.
    pub r: [f64; 3],
    /// Weight of the CVaR path cost.
    pub lambda: f64,
    pub alpha: RiskLevel,
    /// Cells at or above this CVaR become obstacle polygons.
    pub rho_max: f64,
    /// Speed floor, as a fraction of the speed limit, reached at `rho_max`.
    pub gamma_v: f64,
    /// Yaw-rate floor, as a fraction of the yaw-rate limit, reached at `rho_max`.
    pub gamma_theta: f64,
    /// Use the bound `gamma * rho` instead of the decreasing map.
    pub velocity_risk_literal: bool,
    /// `(pitch, roll)` limits in radians.
    pub omega_max: [f64; 2],
    pub eps_x: f64,
    pub eps_u: f64,
    pub lambda_eps: f64,
    pub qp_iterations: usize,
    /// Signed distance the obstacle rows aim to keep, meters.
    pub sd_margin: f64,
    /// Obstacles farther than this from a footprint get no rows.
    pub activation_distance: f64,
    /// Clearance rows per step, nearest obstacles first.
    pub obstacles_per_step: usize,
    /// Largest soft-constraint violation a plan may carry and still count
    /// as feasible.
    pub slack_tol: f64,
    /// Nominal travel speed of the reference, m/s.
    pub cruise_speed: f64,
    pub linesearch: LinesearchConfig,
    pub library: LibraryConfig,
    pub qp: QpSettings,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            q: [10.0, 10.0, 1.0, 1.0, 1.0, 0.1],
            q_terminal: 2.0,
            r: [0.1, 0.1, 0.1],
            lambda: 2.0,
            alpha: RiskLevel::new(0.5).expect("valid default"),
            rho_max: 0.7,
            gamma_v: 0.3,
            gamma_theta: 0.3,
            velocity_risk_literal: false,
            omega_max: [0.5, 0.5],
            eps_x: 0.5,
            eps_u: 1.0,
            lambda_eps: 1e3,
            qp_iterations: 3,
            sd_margin: 0.02,
            activation_distance: 3.0,
            obstacles_per_step: 4,
            slack_tol: 1e-3,
            cruise_speed: 0.8,
            linesearch: LinesearchConfig::default(),
            library: LibraryConfig::default(),
            qp: QpSettings {
                tol_abs: 1e-5,
                tol_rel: 1e-5,
                max_iter: 2000,
                ..QpSettings::default()
            },
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Configuration(format!("mpc: {what}")));
        if self.horizon < 1 {
            return bad("horizon must be >= 1");
        }
        if self.qp_iterations < 1 {
            return bad("qp_iterations must be >= 1");
        }
        if self.q.iter().chain(&self.r).any(|w| !(*w >= 0.0))
            || !(self.lambda >= 0.0)
            || !(self.lambda_eps >= 0.0)
            || !(self.q_terminal >= 0.0)
        {
            return bad("weights must be >= 0");
        }
        if !(self.eps_x > 0.0 && self.eps_u > 0.0) {
            return bad("eps_x and eps_u must be > 0");
        }
        if !(self.rho_max > 0.0) {
            return bad("rho_max must be > 0");
        }
        if !(self.slack_tol >= 0.0) {
            return bad("slack_tol must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.gamma_v) || !(0.0..=1.0).contains(&self.gamma_theta) {
            return bad("gamma_v and gamma_theta must lie in [0, 1]");
        }
        if self.omega_max.iter().any(|w| !(*w > 0.0)) {
            return bad("omega_max must be > 0");
        }
        let ls = &self.linesearch;
        if !(ls.gamma_min > 0.0 && ls.gamma_min <= ls.gamma_init && ls.gamma_init <= ls.gamma_max) || ls.max_iteration < 1 {
            return bad("linesearch needs 0 < gamma_min <= gamma_init <= gamma_max and max_iteration >= 1");
        }
        if !(self.cruise_speed > 0.0) {
            return bad("cruise_speed must be > 0");
        }
        Ok(())
    }
}

/// Everything fixed across replans: robot model, footprint and tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct Mpc {
    pub model: DynamicsModel,
    pub footprint: FootprintSpec,
    pub cfg: MpcConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub polygon: ConvexPolygon,
    lo: Point2,
    hi: Point2,
}

impl Obstacle {
    pub fn new(polygon: ConvexPolygon) -> Self {
        let (lo, hi) = polygon.bounds();
        Self { polygon, lo, hi }
    }

    /// Distance between bounding boxes; a lower bound on the true distance.
    fn box_gap(&self, lo: Point2, hi: Point2) -> f64 {
        let dx = (self.lo[0] - hi[0]).max(lo[0] - self.hi[0]).max(0.0);
        let dy = (self.lo[1] - hi[1]).max(lo[1] - self.hi[1]).max(0.0);
        dx.hypot(dy)
    }
}

/// Map snapshot prepared for one replan: CVaR raster at the planning level
/// and the obstacle polygons around the robot.
#[derive(Debug, Clone)]
pub struct Scene<'a> {
    pub map: &'a GridMap,
    pub level: RiskLevel,
    pub cvar: Vec<f64>,
    pub obstacles: Vec<Obstacle>,
    pub has_normals: bool,
    rho_max: f64,
    roi: Roi,
}

impl<'a> Scene<'a> {
    /// Obstacles are extracted inside `roi` (whole map when `None`).
    pub fn new(map: &'a GridMap, level: RiskLevel, rho_max: f64, roi: Option<Roi>) -> Result<Self> {
        Ok(Self::from_raster(map, level, cvar_raster(map, level)?, rho_max, roi))
    }

    /// Uses a precomputed CVaR raster (`cvar[i]` for cell index `i`).
    pub fn from_raster(map: &'a GridMap, level: RiskLevel, cvar: Vec<f64>, rho_max: f64, roi: Option<Roi>) -> Self {
        let roi = roi.unwrap_or_else(|| Roi::whole(map));
        let obstacles = decompose_lethal_cells(map, &cvar, rho_max, roi).into_iter().map(Obstacle::new).collect();
        let has_normals = [layers::NORMAL_X, layers::NORMAL_Y, layers::NORMAL_Z].iter().all(|l| map.has_layer(l));
        Self {
            map,
            level,
            cvar,
            obstacles,
            has_normals,
            rho_max,
            roi,
        }
    }

    /// Bilinear CVaR at `p`, clamped to the map border.
    pub fn risk_at(&self, p: Point2) -> f64 {
        self.map.sample_in(&self.cvar, p).unwrap_or(MISSING_RISK)
    }

    pub fn on_map(&self, p: Point2) -> bool {
        self.map.contains(p)
    }

    /// Obstacles whose bounding box lies within `radius` of `fp`'s.
    pub fn obstacles_near<'s>(&'s self, fp: &ConvexPolygon, radius: f64) -> impl Iterator<Item = &'s Obstacle> + 's {
        let (lo, hi) = fp.bounds();
        self.obstacles.iter().filter(move |o| o.box_gap(lo, hi) <= radius)
    }

    /// Smallest signed distance to any obstacle (infinite when none is near).
    pub fn min_signed_distance(&self, fp: &ConvexPolygon) -> f64 {
        self.obstacles_near(fp, 0.0)
            .map(|o| signed_distance(fp, &o.polygon))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn in_collision(&self, fp: &ConvexPolygon) -> bool {
        self.min_signed_distance(fp) < 0.0
    }

    /// Rebuilds the obstacles without the lethal cells that `fp` (the
    /// robot's current footprint) already overlaps: nothing can steer out of
    /// them, and keeping them would make every plan, braking included, count
    /// as a collision. The surrounding cells stay. Returns how many cells
    /// were released.
    pub fn release_footprint(&mut self, fp: &ConvexPolygon) -> usize {
        let map = self.map;
        let half = 0.5 * map.resolution();
        let (lo, hi) = fp.bounds();
        let (Some(a), Some(b)) = (map.cell_of([lo[0] - half, lo[1] - half]), map.cell_of([hi[0] + half, hi[1] + half]))
        else {
            return 0;
        };
        let mut masked: Option<Vec<f64>> = None;
        let mut released = 0;
        for r in a.row..=b.row {
            for c in a.col..=b.col {
                let cell = CellIndex::new(r, c);
                let i = map.index(cell);
                let v = self.cvar[i];
                if !(v >= self.rho_max || v.is_nan()) {
                    continue;
                }
                let q = map.world_of(cell);
                let square = ConvexPolygon::rectangle([q[0] - half, q[1] - half], [q[0] + half, q[1] + half])
                    .expect("cell square");
                if signed_distance(fp, &square) < 0.0 {
                    masked.get_or_insert_with(|| self.cvar.clone())[i] = 0.0;
                    released += 1;
                }
            }
        }
        if let Some(cvar) = masked {
            self.obstacles = decompose_lethal_cells(map, &cvar, self.rho_max, self.roi)
                .into_iter()
                .map(Obstacle::new)
                .collect();
        }
        released
    }
}

/// Nonlinear cost and obstacle count of a rolled-out trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub cost: f64,
    pub collisions: usize,
    /// Largest violation of any softened constraint (speed, yaw rate,
    /// orientation, obstacle clearance below zero).
    pub max_violation: f64,
}

impl Mpc {
    pub fn new(model: DynamicsModel, footprint: FootprintSpec, cfg: MpcConfig) -> Result<Self> {
        model.validate()?;
        footprint.validate()?;
        cfg.validate()?;
        Ok(Self { model, footprint, cfg })
    }

    /// Admissible `(speed, yaw rate)` magnitudes in a cell of CVaR `rho`.
    pub fn velocity_bounds(&self, rho: f64) -> (f64, f64) {
        let c = &self.cfg;
        let (v_max, w_max) = (self.model.v_max[0], self.model.v_max[2]);
        if c.velocity_risk_literal {
            let r = rho.max(0.0);
            ((c.gamma_v * r).min(v_max), (c.gamma_theta * r).min(w_max))
        } else {
            let scale = 1.0 - rho / c.rho_max;
            (v_max * scale.clamp(c.gamma_v, 1.0), w_max * scale.clamp(c.gamma_theta, 1.0))
        }
    }

    /// Tracking weight for step `k` of `horizon`.
    fn q_weight(&self, k: usize, horizon: usize, i: usize) -> f64 {
        let w = self.cfg.q[i];
        if k == horizon {
            w * self.cfg.q_terminal
        } else {
            w
        }
    }

    /// Speed-like magnitude bounded by the velocity-risk rows.
    fn speed(&self, x: &State) -> f64 {
        match self.model.kind {
            ModelKind::DiffDrive => x.v_x().abs(),
            ModelKind::General6 => x.v_x().hypot(x.v_y()),
        }
    }

    /// Evaluates the full nonlinear objective, the collision count over
    /// steps `1..=T` and the worst soft-constraint violation.
    pub fn evaluate(&self, scene: &Scene, traj: &Trajectory, reference: &[State]) -> Evaluation {
        let c = &self.cfg;
        let horizon = traj.horizon();
        let nx = self.model.nx();
        let mut cost = 0.0;
        let mut collisions = 0;
        let mut worst: f64 = 0.0;
        let soft = |excess: f64, cost: &mut f64, worst: &mut f64| {
            if excess > 0.0 {
                *cost += c.lambda_eps * excess * excess;
                *worst = worst.max(excess);
            }
        };
        for k in 0..horizon {
            let u = &traj.controls[k];
            for j in 0..self.model.nu() {
                cost += c.r[j] * u.0[j] * u.0[j];
            }
            if self.model.kind == ModelKind::DiffDrive {
                let x = &traj.states[k];
                let (_, w_bound) = self.velocity_bounds(scene.risk_at(x.position()));
                soft(self.model.yaw_rate(x, u).abs() - w_bound, &mut cost, &mut worst);
            }
        }
        for k in 1..=horizon {
            let x = &traj.states[k];
            let r = &reference[k.min(reference.len() - 1)];
            for i in 0..nx {
                let e = if i == 2 { wrap_angle(x.0[i] - r.0[i]) } else { x.0[i] - r.0[i] };
                cost += self.q_weight(k, horizon, i) * e * e;
            }
            let p = x.position();
            let rho = scene.risk_at(p);
            cost += c.lambda * rho;
            let (v_bound, w_bound) = self.velocity_bounds(rho);
            soft(self.speed(x) - v_bound, &mut cost, &mut worst);
            if self.model.kind == ModelKind::General6 {
                soft(x.v_y().abs() - self.model.v_max[1], &mut cost, &mut worst);
                soft(x.v_theta().abs() - w_bound, &mut cost, &mut worst);
            }
            if !scene.on_map(p) {
                collisions += 1;
                continue;
            }
            if scene.has_normals {
                if let Ok(w) = orientation(scene.map, x.pose()) {
                    for i in 0..2 {
                        soft(w[i].abs() - c.omega_max[i], &mut cost, &mut worst);
                    }
                }
            }
            let sd = scene.min_signed_distance(&footprint_at(&self.footprint, x.pose()));
            if sd < 0.0 {
                collisions += 1;
                worst = worst.max(-sd);
            }
        }
        Evaluation {
            cost,
            collisions,
            max_violation: worst,
        }
    }

    /// Emergency braking from `x0`: maximum deceleration toward rest
    /// without reversing, no steering.
    pub fn stopping_trajectory(&self, x0: &State) -> Trajectory {
        stopping_trajectory(&self.model, x0, self.cfg.horizon)
    }
}

/// Maximum deceleration of every velocity component toward zero.
pub fn stopping_trajectory(model: &DynamicsModel, x0: &State, horizon: usize) -> Trajectory {
    let dt = model.dt;
    let brake = |v: f64, a_max: f64| -v.signum() * a_max.min(v.abs() / dt);
    let mut x = *x0;
    let mut controls = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let u = match model.kind {
            ModelKind::DiffDrive => Control::diff_drive(brake(x.v_x(), model.a_max[0]), 0.0),
            ModelKind::General6 => Control::general(
                brake(x.v_x(), model.a_max[0]),
                brake(x.v_y(), model.a_max[1]),
                brake(x.v_theta(), model.a_max[2]),
            ),
        };
        x = model.step(&x, &u);
        controls.push(u);
    }
    model.rollout(*x0, &controls)
}

/// Algorithm-2 style step acceptance.
#[derive(Debug, Clone, PartialEq)]
pub struct LinesearchOutcome {
    pub accepted: bool,
    /// Step applied when accepted (the last one tried otherwise).
    pub gamma: f64,
    /// Step to start from next time.
    pub gamma_next: f64,
    pub trajectory: Trajectory,
    pub evaluation: Evaluation,
    pub trials: usize,
}

/// Tries `u + gamma * delta_u`, accepting the first step whose cost and
/// obstacle count are both no worse than the candidate's. Success doubles
/// `gamma` for the next call (capped), failure halves it (floored).
pub fn linesearch(
    mpc: &Mpc,
    scene: &Scene,
    candidate: &Trajectory,
    baseline: Evaluation,
    delta_u: &[Control],
    reference: &[State],
    gamma_init: f64,
) -> Result<LinesearchOutcome> {
    if delta_u.len() != candidate.controls.len() {
        return Err(Error::InvalidArgument(format!(
            "delta_u has {} steps, candidate has {}",
            delta_u.len(),
            candidate.controls.len()
        )));
    }
    let ls = &mpc.cfg.linesearch;
    let mut gamma = gamma_init.clamp(ls.gamma_min, ls.gamma_max);
    let x0 = candidate.states[0];
    let mut last = None;
    for trial in 1..=ls.max_iteration {
        let controls: Vec<Control> = candidate
            .controls
            .iter()
            .zip(delta_u)
            .map(|(u, d)| {
                let mut v = u.0;
                for j in 0..3 {
                    v[j] += gamma * d.0[j];
                }
                mpc.model.clamp_control(Control(v))
            })
            .collect();
        let traj = mpc.model.rollout(x0, &controls);
        let eval = mpc.evaluate(scene, &traj, reference);
        if eval.cost <= baseline.cost && eval.collisions <= baseline.collisions {
            return Ok(LinesearchOutcome {
                accepted: true,
                gamma,
                gamma_next: (2.0 * gamma).min(ls.gamma_max),
                trajectory: traj,
                evaluation: eval,
                trials: trial,
            });
        }
        last = Some((gamma, traj, eval, trial));
        gamma = (gamma / 2.0).max(ls.gamma_min);
    }
    let (tried, traj, eval, trials) = last.expect("max_iteration >= 1");
    Ok(LinesearchOutcome {
        accepted: false,
        gamma: tried,
        gamma_next: gamma,
        trajectory: traj,
        evaluation: eval,
        trials,
    })
}

/// Which mechanism produced the returned trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    Sqp,
    LibraryFallback,
    Stopping,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplanStats {
    pub sqp_iterations: usize,
    pub accepted_steps: usize,
    pub gamma: f64,
    pub gamma_next: f64,
    pub qp_status: Option<QpStatus>,
    pub qp_iterations: usize,
    pub qp_primal_residual: f64,
    pub qp_dual_residual: f64,
    pub cost: f64,
    pub collisions: usize,
    pub max_violation: f64,
    /// Costs of the accepted candidate after each SQP iteration.
    pub cost_history: Vec<f64>,
    #[serde(skip)]
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplanResult {
    pub trajectory: Trajectory,
    pub feasible: bool,
    pub alpha_used: RiskLevel,
    pub source: PlanSource,
    pub stats: ReplanStats,
    /// QP primal/dual iterate for warm-starting the next replan.
    pub warm_start: Option<WarmStart>,
}

/// Drops the first control and repeats the last one.
pub fn shift_controls(controls: &[Control]) -> Vec<Control> {
    let mut out: Vec<Control> = controls.iter().skip(1).copied().collect();
    if let Some(last) = controls.last() {
        out.push(*last);
    }
    out
}

/// Pads or truncates `controls` to `horizon` steps (padding repeats the last
/// control, or zero).
fn fit_horizon(mut controls: Vec<Control>, horizon: usize) -> Vec<Control> {
    let fill = controls.last().copied().unwrap_or_default();
    controls.resize(horizon, fill);
    controls
}

impl Mpc {
    fn audit_ok(&self, eval: &Evaluation) -> bool {
        eval.collisions == 0 && eval.max_violation <= self.cfg.slack_tol
    }

    /// Region from which obstacles can matter during one horizon.
    pub fn planning_roi(&self, x0: &State) -> Roi {
        let reach = self.model.v_max[0].max(x0.v_x().abs()) * self.model.dt * self.cfg.horizon as f64
            + 0.5 * self.model.a_max[0] * (self.model.dt * self.cfg.horizon as f64).powi(2);
        Roi::around(x0.position(), reach + self.cfg.activation_distance + 2.0 * self.footprint.circumradius())
    }

    /// One planning cycle.
    pub fn replan(
        &self,
        x0: &State,
        prev: Option<&ReplanResult>,
        path: &GeometricPath,
        map: &GridMap,
        seed: u64,
    ) -> Result<ReplanResult> {
        let level = self.cfg.alpha;
        let mut scene = Scene::new(map, level, self.cfg.rho_max, Some(self.planning_roi(x0)))?;
        scene.release_footprint(&footprint_at(&self.footprint, x0.pose()));
        self.replan_in_scene(x0, prev, path, &scene, seed)
    }

    pub fn replan_in_scene(
        &self,
        x0: &State,
        prev: Option<&ReplanResult>,
        path: &GeometricPath,
        scene: &Scene,
        seed: u64,
    ) -> Result<ReplanResult> {
        let started = Instant::now();
        if path.poses.is_empty() {
            return Err(Error::InvalidArgument("reference path is empty".into()));
        }
        scene.map.require_cell(x0.position())?;
        let horizon = self.cfg.horizon;
        let reference = reference_trajectory(self, scene, x0, path);
        let previous = prev.map(|p| fit_horizon(shift_controls(&p.trajectory.controls), horizon));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let library = generate_trajectory_library(self, scene, x0, path, &reference, previous.as_deref(), &mut rng);

        let mut gamma = prev.map_or(self.cfg.linesearch.gamma_init, |p| p.stats.gamma_next);
        let mut warm = prev.and_then(|p| p.warm_start.clone());
        let mut current: Option<Candidate> = None;
        let mut stats = ReplanStats {
            sqp_iterations: 0,
            accepted_steps: 0,
            gamma,
            gamma_next: gamma,
            qp_status: None,
            qp_iterations: 0,
            qp_primal_residual: f64::NAN,
            qp_dual_residual: f64::NAN,
            cost: f64::NAN,
            collisions: 0,
            max_violation: 0.0,
            cost_history: Vec::new(),
            wall_time_ms: 0.0,
        };
        let mut solved = false;
        for _ in 0..self.cfg.qp_iterations {
            stats.sqp_iterations += 1;
            let pick = library.choose(current.as_ref()).clone();
            let built = match build_sqp_qp(self, scene, &pick.trajectory, &reference) {
                Ok(b) => b,
                Err(e) => {
                    log::debug!("qp assembly failed: {e}");
                    current = Some(pick);
                    continue;
                }
            };
            let warm_ok = warm.as_ref().filter(|w| w.x.len() == built.qp.n && w.y.len() == built.qp.m());
            let sol = solve_qp(&built.qp, &self.cfg.qp, warm_ok)?;
            stats.qp_status = Some(sol.status);
            stats.qp_iterations += sol.iterations;
            stats.qp_primal_residual = sol.primal_residual;
            stats.qp_dual_residual = sol.dual_residual;
            if sol.status == QpStatus::PrimalInfeasible {
                current = Some(pick);
                continue;
            }
            let delta_u = built.layout.controls(&sol.x);
            warm = Some(WarmStart {
                x: sol.x.clone(),
                y: sol.y.clone(),
            });
            let base = Evaluation {
                cost: pick.cost,
                collisions: pick.collisions,
                max_violation: pick.max_violation,
            };
            let ls = linesearch(self, scene, &pick.trajectory, base, &delta_u, &reference, gamma)?;
            stats.gamma = ls.gamma;
            gamma = ls.gamma_next;
            stats.gamma_next = gamma;
            if ls.accepted {
                solved = true;
                stats.accepted_steps += 1;
                current = Some(Candidate {
                    kind: CandidateKind::Refined,
                    trajectory: ls.trajectory,
                    cost: ls.evaluation.cost,
                    collisions: ls.evaluation.collisions,
                    max_violation: ls.evaluation.max_violation,
                });
            } else {
                current = Some(pick);
            }
            stats.cost_history.push(current.as_ref().expect("set above").cost);
        }

        let best = library.choose(current.as_ref()).clone();
        let best_eval = Evaluation {
            cost: best.cost,
            collisions: best.collisions,
            max_violation: best.max_violation,
        };
        let eval_of = |c: &Candidate| Evaluation {
            cost: c.cost,
            collisions: c.collisions,
            max_violation: c.max_violation,
        };
        // A converged collision-free SQP plan is executed even when it
        // overshoots a soft limit: braking instead stalls the robot whenever
        // fresh perception tightens a bound it cannot meet within one step.
        // `feasible` still reports the strict audit.
        let (trajectory, feasible, source, eval) = if solved && best.collisions == 0 {
            let ok = self.audit_ok(&best_eval);
            (best.trajectory, ok, PlanSource::Sqp, best_eval)
        } else if let Some(fallback) = library.lowest_cost_where(|c| self.audit_ok(&eval_of(c))) {
            (fallback.trajectory.clone(), true, PlanSource::LibraryFallback, eval_of(fallback))
        } else if let Some(fallback) = library.lowest_cost_where(|c| c.collisions == 0) {
            (fallback.trajectory.clone(), false, PlanSource::LibraryFallback, eval_of(fallback))
        } else {
            let stop = self.stopping_trajectory(x0);
            let e = self.evaluate(scene, &stop, &reference);
            (stop, false, PlanSource::Stopping, e)
        };
        stats.cost = eval.cost;
        stats.collisions = eval.collisions;
        stats.max_violation = eval.max_violation;
        stats.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok(ReplanResult {
            trajectory,
            feasible,
            alpha_used: scene.level,
            source,
            stats,
            warm_start: warm,
        })
    }
}

/// Result of a planning cycle as seen by the risk-level scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanOutcome {
    Feasible,
    Infeasible,
    Stuck,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlphaPolicy {
    pub step: f64,
    pub alpha_min: f64,
    /// Consecutive feasible cycles before one restoration step.
    pub window: usize,
}

impl Default for AlphaPolicy {
    fn default() -> Self {
        Self {
            step: 0.1,
            alpha_min: 0.05,
            window: 10,
        }
    }
}

/// One scheduling decision. `feasible_streak` counts consecutive feasible
/// cycles including this one.
pub fn adjust_alpha(
    current: RiskLevel,
    outcome: PlanOutcome,
    feasible_streak: usize,
    mission: RiskLevel,
    policy: &AlphaPolicy,
) -> RiskLevel {
    let lo = policy.alpha_min.min(mission.alpha());
    let hi = mission.alpha();
    let a = current.alpha();
    let next = match outcome {
        PlanOutcome::Infeasible | PlanOutcome::Stuck => a - policy.step,
        PlanOutcome::Feasible if policy.window > 0 && feasible_streak > 0 && feasible_streak % policy.window == 0 => {
            a + policy.step
        }
        PlanOutcome::Feasible => a,
    };
    RiskLevel::new(next.clamp(lo, hi)).unwrap_or(current)
}

/// Stateful wrapper around [`adjust_alpha`].
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaScheduler {
    pub mission: RiskLevel,
    pub current: RiskLevel,
    pub policy: AlphaPolicy,
    streak: usize,
}

impl AlphaScheduler {
    pub fn new(mission: RiskLevel, policy: AlphaPolicy) -> Self {
        Self {
            mission,
            current: mission,
            policy,
            streak: 0,
        }
    }

    pub fn update(&mut self, outcome: PlanOutcome) -> RiskLevel {
        self.streak = if outcome == PlanOutcome::Feasible { self.streak + 1 } else { 0 };
        self.current = adjust_alpha(self.current, outcome, self.streak, self.mission, &self.policy);
        self.current
    }
}

#[cfg(test)]
mod tests;
