//! Candidate trajectories used to seed and back up the SQP.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::dynamics::{wrap_angle, Control, ModelKind, State, Trajectory};
use crate::geom::GeometricPath;

use super::reference::Polyline;
use super::{stopping_trajectory, Mpc, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    /// Previous solution shifted by one step.
    Previous,
    Braking,
    /// Pure-pursuit tracking of the geometric path.
    Follower,
    Arc(usize),
    VTurn(i8),
    UTurn(i8),
    Perturbed(usize),
    /// Produced by an accepted SQP step.
    Refined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub kind: CandidateKind,
    pub trajectory: Trajectory,
    pub cost: f64,
    pub collisions: usize,
    pub max_violation: f64,
}

/// Candidates sorted by ascending cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
}

fn ranks_before(a: &Candidate, b: &Candidate) -> bool {
    (a.collisions, a.cost) < (b.collisions, b.cost)
}

impl CandidateSet {
    /// Collision-free candidates win on cost; otherwise fewest collisions,
    /// then cost. `current` competes with the library and wins ties.
    pub fn choose<'s>(&'s self, current: Option<&'s Candidate>) -> &'s Candidate {
        let mut best = current.unwrap_or(&self.candidates[0]);
        for c in &self.candidates {
            if ranks_before(c, best) {
                best = c;
            }
        }
        best
    }

    pub fn lowest_cost_where(&self, pred: impl Fn(&Candidate) -> bool) -> Option<&Candidate> {
        self.candidates.iter().find(|c| pred(c))
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Closed-loop rollout: `target(k, x)` gives the desired `(speed, yaw rate)`
/// and the controls chase it within the model limits.
fn drive(mpc: &Mpc, x0: &State, mut target: impl FnMut(usize, &State) -> (f64, f64)) -> Vec<Control> {
    let m = &mpc.model;
    let dt = m.dt;
    let chase = |want: f64, have: f64, a: f64| ((want - have) / dt).clamp(-a, a);
    let mut x = *x0;
    let mut out = Vec::with_capacity(mpc.cfg.horizon);
    for k in 0..mpc.cfg.horizon {
        let (v, w) = target(k, &x);
        let w = w.clamp(-m.v_max[2], m.v_max[2]);
        let u = match m.kind {
            ModelKind::DiffDrive => {
                let v_theta = if m.mix < 1.0 { (w - m.mix * x.v_x()) / (1.0 - m.mix) } else { 0.0 };
                Control::diff_drive(chase(v, x.v_x(), m.a_max[0]), v_theta)
            }
            ModelKind::General6 => {
                let v_theta = if m.mix < 1.0 { (w - m.mix * x.v_x()) / (1.0 - m.mix) } else { x.v_theta() };
                Control::general(
                    chase(v, x.v_x(), m.a_max[0]),
                    chase(0.0, x.v_y(), m.a_max[1]),
                    chase(v_theta, x.v_theta(), m.a_max[2]),
                )
            }
        };
        let u = m.clamp_control(u);
        x = m.step(&x, &u);
        out.push(u);
    }
    out
}

fn follower(mpc: &Mpc, x0: &State, path: &GeometricPath, reference: &[State]) -> Vec<Control> {
    let line = Polyline::new(&path.poses);
    let lib = &mpc.cfg.library;
    drive(mpc, x0, |k, x| {
        let s = line.project(x.position());
        let aim = line.point_at(s + lib.lookahead);
        let p = x.position();
        let d = (aim[0] - p[0]).hypot(aim[1] - p[1]);
        let beta = if d > 1e-6 { wrap_angle((aim[1] - p[1]).atan2(aim[0] - p[0]) - x.p_theta()) } else { 0.0 };
        let v_ref = reference[(k + 1).min(reference.len() - 1)].v_x();
        (v_ref * beta.cos().max(0.0), lib.yaw_gain * beta)
    })
}

/// Builds, rolls out and scores the candidate set for one replan.
pub fn generate_trajectory_library<R: Rng>(
    mpc: &Mpc,
    scene: &Scene,
    x0: &State,
    path: &GeometricPath,
    reference: &[State],
    previous: Option<&[Control]>,
    rng: &mut R,
) -> CandidateSet {
    let m = &mpc.model;
    let lib = &mpc.cfg.library;
    let horizon = mpc.cfg.horizon;
    let (v_top, w_top) = (mpc.cfg.cruise_speed.min(m.v_max[0]), m.v_max[2]);
    let mut raw: Vec<(CandidateKind, Vec<Control>)> = Vec::new();
    if let Some(prev) = previous {
        raw.push((CandidateKind::Previous, prev.iter().map(|u| m.clamp_control(*u)).collect()));
    }
    raw.push((CandidateKind::Braking, stopping_trajectory(m, x0, horizon).controls));
    let follow = follower(mpc, x0, path, reference);
    raw.push((CandidateKind::Follower, follow.clone()));
    for (i, frac) in lib.arc_rates.iter().enumerate() {
        let w = frac * w_top;
        raw.push((CandidateKind::Arc(i), drive(mpc, x0, |_, _| (0.5 * v_top, w))));
    }
    if lib.turn_primitives {
        let half = horizon / 2;
        for sign in [1i8, -1] {
            let sg = f64::from(sign);
            raw.push((
                CandidateKind::UTurn(sign),
                drive(mpc, x0, |k, _| if k < half { (0.0, sg * w_top) } else { (0.5 * v_top, 0.0) }),
            ));
            raw.push((
                CandidateKind::VTurn(sign),
                drive(mpc, x0, |k, _| {
                    if k < half {
                        (-0.3 * v_top, sg * 0.5 * w_top)
                    } else {
                        (0.5 * v_top, -sg * 0.5 * w_top)
                    }
                }),
            ));
        }
    }
    let noise: Vec<Normal<f64>> = lib
        .perturb_std
        .iter()
        .map(|s| Normal::new(0.0, s.max(0.0)).expect("finite std"))
        .collect();
    for i in 0..lib.n_random {
        let controls = follow
            .iter()
            .map(|u| {
                let mut v = u.0;
                for j in 0..m.nu() {
                    v[j] += noise[j].sample(rng);
                }
                m.clamp_control(Control(v))
            })
            .collect();
        raw.push((CandidateKind::Perturbed(i), controls));
    }

    let mut candidates: Vec<Candidate> = raw
        .into_iter()
        .map(|(kind, controls)| {
            let trajectory = m.rollout(*x0, &controls);
            let e = mpc.evaluate(scene, &trajectory, reference);
            Candidate {
                kind,
                trajectory,
                cost: e.cost,
                collisions: e.collisions,
                max_violation: e.max_violation,
            }
        })
        .collect();
    candidates.sort_by(|a, b| a.cost.total_cmp(&b.cost));
    CandidateSet { candidates }
}
