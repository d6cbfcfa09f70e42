//! Linearization of the MPC problem around a candidate into a sparse QP.

use crate::dynamics::{wrap_angle, Control, ModelKind, State, Trajectory};
use crate::error::{Error, Result};
use crate::gridmap::{GridMap, Point2};
use crate::polygeom::{footprint_at, signed_distance, signed_distance_gradient};
use crate::qp::{QpProblem, SparseMatrix};

use super::{Mpc, Obstacle, Scene};

/// CVaR of the cell field and its derivatives with respect to `(x, y, θ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvarDerivatives {
    pub value: f64,
    pub gradient: [f64; 3],
    /// Symmetric, eigenvalue-floored at zero.
    pub hessian: [[f64; 3]; 3],
}

/// Central differences of the bilinear CVaR field with a quarter-cell step.
pub fn cvar_cost_derivatives(scene: &Scene, x: &State) -> Result<CvarDerivatives> {
    cvar_cost_derivatives_with_step(scene, x, 0.25 * scene.map.resolution())
}

pub fn cvar_cost_derivatives_with_step(scene: &Scene, x: &State, h: f64) -> Result<CvarDerivatives> {
    let p = x.position();
    scene.map.require_cell(p)?;
    let f = |dx: f64, dy: f64| scene.risk_at([p[0] + dx, p[1] + dy]);
    let f0 = f(0.0, 0.0);
    let (fxp, fxm, fyp, fym) = (f(h, 0.0), f(-h, 0.0), f(0.0, h), f(0.0, -h));
    let gx = (fxp - fxm) / (2.0 * h);
    let gy = (fyp - fym) / (2.0 * h);
    let hxx = (fxp - 2.0 * f0 + fxm) / (h * h);
    let hyy = (fyp - 2.0 * f0 + fym) / (h * h);
    let hxy = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
    let [a, b, c] = psd_floor_2x2(hxx, hxy, hyy);
    Ok(CvarDerivatives {
        value: f0,
        gradient: [gx, gy, 0.0],
        hessian: [[a, b, 0.0], [b, c, 0.0], [0.0; 3]],
    })
}

/// Projects the symmetric matrix `[[a, b], [b, c]]` onto the PSD cone.
fn psd_floor_2x2(a: f64, b: f64, c: f64) -> [f64; 3] {
    let mean = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (mean + rad, mean - rad);
    if l2 >= 0.0 {
        return [a, b, c];
    }
    if l1 <= 0.0 {
        return [0.0; 3];
    }
    // eigenvector of l1
    let (vx, vy) = if b.abs() > 1e-300 {
        (l1 - c, b)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let n2 = vx * vx + vy * vy;
    [l1 * vx * vx / n2, l1 * vx * vy / n2, l1 * vy * vy / n2]
}

/// Pitch/roll of the robot body and their linearization in `(x, y, θ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationRows {
    /// `(pitch, roll)` in radians.
    pub omega: [f64; 2],
    pub jacobian: [[f64; 3]; 2],
}

fn rotation(theta: f64) -> ([[f64; 3]; 3], [[f64; 3]; 3]) {
    let (s, c) = theta.sin_cos();
    (
        [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]],
        [[-s, c, 0.0], [-c, -s, 0.0], [0.0, 0.0, 0.0]],
    )
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    m.map(|row| row[0] * v[0] + row[1] * v[1] + row[2] * v[2])
}

fn omega_of(nr: [f64; 3]) -> [f64; 2] {
    [nr[0].atan2(nr[2]), -nr[1].atan2(nr[2])]
}

/// Pitch and roll of a robot at `pose` resting on the surface.
pub fn orientation(map: &GridMap, pose: [f64; 3]) -> Result<[f64; 2]> {
    let nw = map.normal_at([pose[0], pose[1]])?;
    Ok(omega_of(mat_vec(&rotation(pose[2]).0, nw)))
}

pub fn orientation_constraint_rows(map: &GridMap, pose: [f64; 3]) -> Result<OrientationRows> {
    orientation_constraint_rows_with_step(map, pose, 0.5 * map.resolution())
}

/// As [`orientation_constraint_rows`], differencing the normal field with
/// `step` for the position block.
pub fn orientation_constraint_rows_with_step(map: &GridMap, pose: [f64; 3], step: f64) -> Result<OrientationRows> {
    let p: Point2 = [pose[0], pose[1]];
    let nw = map.normal_at(p)?;
    let dn = map.normal_jacobian_with_step(p, step)?;
    let (r, dr) = rotation(pose[2]);
    let nr = mat_vec(&r, nw);
    let dxz = nr[0] * nr[0] + nr[2] * nr[2];
    let dyz = nr[1] * nr[1] + nr[2] * nr[2];
    let mut g = [[0.0; 3]; 2];
    if dxz > 0.0 {
        g[0] = [nr[2] / dxz, 0.0, -nr[0] / dxz];
    }
    if dyz > 0.0 {
        g[1] = [0.0, -nr[2] / dyz, nr[1] / dyz];
    }
    let drn = mat_vec(&dr, nw);
    let mut jacobian = [[0.0; 3]; 2];
    for i in 0..2 {
        for axis in 0..2 {
            // (G R dn/dp)_i,axis
            let mut acc = 0.0;
            for a in 0..3 {
                let mut rdn = 0.0;
                for b in 0..3 {
                    rdn += r[a][b] * dn[b][axis];
                }
                acc += g[i][a] * rdn;
            }
            jacobian[i][axis] = acc;
        }
        jacobian[i][2] = (0..3).map(|a| g[i][a] * drn[a]).sum();
    }
    Ok(OrientationRows {
        omega: omega_of(nr),
        jacobian,
    })
}

/// Column layout of the QP decision vector
/// `[δx_0..=δx_T, δu_0..δu_{T-1}, slacks]`, with three slacks per step
/// `k = 1..=T` (state limits, obstacle clearance, orientation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub nx: usize,
    pub nu: usize,
    pub horizon: usize,
}

impl Layout {
    pub fn x(&self, k: usize, i: usize) -> usize {
        k * self.nx + i
    }

    pub fn u(&self, k: usize, j: usize) -> usize {
        (self.horizon + 1) * self.nx + k * self.nu + j
    }

    fn slack_base(&self) -> usize {
        (self.horizon + 1) * self.nx + self.horizon * self.nu
    }

    pub fn slack_state(&self, k: usize) -> usize {
        self.slack_base() + 3 * (k - 1)
    }

    pub fn slack_sd(&self, k: usize) -> usize {
        self.slack_state(k) + 1
    }

    pub fn slack_orientation(&self, k: usize) -> usize {
        self.slack_state(k) + 2
    }

    pub fn n(&self) -> usize {
        self.slack_base() + 3 * self.horizon
    }

    /// Control corrections from a QP solution.
    pub fn controls(&self, sol: &[f64]) -> Vec<Control> {
        (0..self.horizon)
            .map(|k| {
                let mut u = [0.0; 3];
                for (j, v) in u.iter_mut().enumerate().take(self.nu) {
                    *v = sol[self.u(k, j)];
                }
                Control(u)
            })
            .collect()
    }

    pub fn states(&self, sol: &[f64]) -> Vec<State> {
        (0..=self.horizon)
            .map(|k| {
                let mut x = [0.0; 6];
                for (i, v) in x.iter_mut().enumerate().take(self.nx) {
                    *v = sol[self.x(k, i)];
                }
                State(x)
            })
            .collect()
    }
}

/// Assembled QP plus bookkeeping.
#[derive(Debug, Clone)]
pub struct SqpProblem {
    pub qp: QpProblem,
    pub layout: Layout,
    /// Number of signed-distance rows per step `1..=T` (index 0 unused).
    pub sd_rows: Vec<usize>,
    pub orientation_rows: usize,
}

struct Rows {
    a: SparseMatrix,
    l: Vec<f64>,
    u: Vec<f64>,
}

impl Rows {
    fn add(&mut self, entries: &[(usize, f64)], lo: f64, hi: f64) {
        let r = self.l.len();
        self.a.nrows = r + 1;
        for &(c, v) in entries {
            if v != 0.0 {
                self.a.push(r, c, v);
            }
        }
        self.l.push(lo);
        self.u.push(hi);
    }
}

/// Linearizes dynamics and constraints around `candidate` and expands the
/// cost to second order in `(δx, δu, slacks)`.
pub fn build_sqp_qp(mpc: &Mpc, scene: &Scene, candidate: &Trajectory, reference: &[State]) -> Result<SqpProblem> {
    let model = &mpc.model;
    let c = &mpc.cfg;
    let horizon = candidate.horizon();
    if horizon == 0 || reference.is_empty() {
        return Err(Error::InvalidArgument("empty candidate or reference".into()));
    }
    let lay = Layout {
        nx: model.nx(),
        nu: model.nu(),
        horizon,
    };
    let (nx, nu, n) = (lay.nx, lay.nu, lay.n());
    for x in &candidate.states {
        scene.map.require_cell(x.position()).map_err(|e| match e {
            Error::OutOfBounds(m) => Error::OutOfBounds(format!("candidate leaves the map: {m}")),
            other => other,
        })?;
    }

    let mut p = SparseMatrix::new(n, n);
    let mut q = vec![0.0; n];
    let inf = f64::INFINITY;

    for k in 1..=horizon {
        let x = &candidate.states[k];
        let r = &reference[k.min(reference.len() - 1)];
        for i in 0..nx {
            let w = mpc.q_weight(k, horizon, i);
            let e = if i == 2 { wrap_angle(x.0[i] - r.0[i]) } else { x.0[i] - r.0[i] };
            p.push(lay.x(k, i), lay.x(k, i), 2.0 * w);
            q[lay.x(k, i)] += 2.0 * w * e;
        }
        let d = cvar_cost_derivatives(scene, x)?;
        for a in 0..2 {
            q[lay.x(k, a)] += c.lambda * d.gradient[a];
            for b in 0..2 {
                if d.hessian[a][b] != 0.0 {
                    p.push(lay.x(k, a), lay.x(k, b), c.lambda * d.hessian[a][b]);
                }
            }
        }
        for s in [lay.slack_state(k), lay.slack_sd(k), lay.slack_orientation(k)] {
            p.push(s, s, 2.0 * c.lambda_eps);
        }
    }
    for k in 0..horizon {
        let u = &candidate.controls[k];
        for j in 0..nu {
            p.push(lay.u(k, j), lay.u(k, j), 2.0 * c.r[j]);
            q[lay.u(k, j)] += 2.0 * c.r[j] * u.0[j];
        }
    }
    // tiny proximal term keeps every column strictly convex
    for i in 0..n {
        p.push(i, i, 1e-8);
    }

    let mut rows = Rows {
        a: SparseMatrix::new(0, n),
        l: Vec::new(),
        u: Vec::new(),
    };
    for i in 0..nx {
        rows.add(&[(lay.x(0, i), 1.0)], 0.0, 0.0);
    }
    for k in 0..horizon {
        let (ak, bk) = model.linearize(&candidate.states[k], &candidate.controls[k]);
        for i in 0..nx {
            let mut e = vec![(lay.x(k + 1, i), 1.0)];
            for j in 0..nx {
                e.push((lay.x(k, j), -ak[(i, j)]));
            }
            for j in 0..nu {
                e.push((lay.u(k, j), -bk[(i, j)]));
            }
            rows.add(&e, 0.0, 0.0);
        }
    }
    // control limits intersected with the trust region
    let bounds = model.control_bounds();
    for k in 0..horizon {
        let u = &candidate.controls[k];
        for j in 0..nu {
            let lo = (-bounds[j] - u.0[j]).max(-c.eps_u).min(0.0);
            let hi = (bounds[j] - u.0[j]).min(c.eps_u).max(0.0);
            rows.add(&[(lay.u(k, j), 1.0)], lo, hi);
        }
    }
    for k in 1..=horizon {
        for i in 0..nx {
            rows.add(&[(lay.x(k, i), 1.0)], -c.eps_x, c.eps_x);
        }
    }

    // velocity-risk coupling
    for k in 1..=horizon {
        let x = &candidate.states[k];
        let s = lay.slack_state(k);
        let (vb, wb) = mpc.velocity_bounds(scene.risk_at(x.position()));
        match model.kind {
            ModelKind::DiffDrive => {
                rows.add(&[(lay.x(k, 3), 1.0), (s, -1.0)], -inf, vb - x.v_x());
                rows.add(&[(lay.x(k, 3), 1.0), (s, 1.0)], -vb - x.v_x(), inf);
            }
            ModelKind::General6 => {
                let sp = x.v_x().hypot(x.v_y());
                if sp > 1e-6 {
                    rows.add(
                        &[(lay.x(k, 3), x.v_x() / sp), (lay.x(k, 4), x.v_y() / sp), (s, -1.0)],
                        -inf,
                        vb - sp,
                    );
                }
                let vy_max = model.v_max[1];
                rows.add(&[(lay.x(k, 4), 1.0), (s, -1.0)], -inf, vy_max - x.v_y());
                rows.add(&[(lay.x(k, 4), 1.0), (s, 1.0)], -vy_max - x.v_y(), inf);
                rows.add(&[(lay.x(k, 5), 1.0), (s, -1.0)], -inf, wb - x.v_theta());
                rows.add(&[(lay.x(k, 5), 1.0), (s, 1.0)], -wb - x.v_theta(), inf);
            }
        }
    }
    if model.kind == ModelKind::DiffDrive {
        for k in 0..horizon {
            let x = &candidate.states[k];
            let (_, wb) = mpc.velocity_bounds(scene.risk_at(x.position()));
            let rate = model.yaw_rate(x, &candidate.controls[k]);
            let e = [(lay.x(k, 3), model.mix), (lay.u(k, 1), 1.0 - model.mix)];
            let s = lay.slack_state(k + 1);
            rows.add(&[e[0], e[1], (s, -1.0)], -inf, wb - rate);
            rows.add(&[e[0], e[1], (s, 1.0)], -wb - rate, inf);
        }
    }

    // obstacle clearance, nearest obstacles first
    let mut sd_rows = vec![0; horizon + 1];
    for k in 1..=horizon {
        let pose = candidate.states[k].pose();
        let fp = footprint_at(&mpc.footprint, pose);
        let mut near: Vec<(f64, &Obstacle)> = scene
            .obstacles_near(&fp, c.activation_distance)
            .map(|o| (signed_distance(&fp, &o.polygon), o))
            .filter(|(d, _)| *d <= c.activation_distance)
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0));
        near.truncate(c.obstacles_per_step);
        for (d, obstacle) in near {
            let poly = &obstacle.polygon;
            let g = signed_distance_gradient(&mpc.footprint, pose, poly);
            rows.add(
                &[
                    (lay.x(k, 0), g[0]),
                    (lay.x(k, 1), g[1]),
                    (lay.x(k, 2), g[2]),
                    (lay.slack_sd(k), 1.0),
                ],
                c.sd_margin - d,
                inf,
            );
            sd_rows[k] += 1;
        }
    }

    let mut orientation_rows = 0;
    if scene.has_normals {
        for k in 1..=horizon {
            let o = orientation_constraint_rows(scene.map, candidate.states[k].pose())?;
            let s = lay.slack_orientation(k);
            for i in 0..2 {
                let j = o.jacobian[i];
                let e = [(lay.x(k, 0), j[0]), (lay.x(k, 1), j[1]), (lay.x(k, 2), j[2])];
                rows.add(&[e[0], e[1], e[2], (s, -1.0)], -inf, c.omega_max[i] - o.omega[i]);
                rows.add(&[e[0], e[1], e[2], (s, 1.0)], -c.omega_max[i] - o.omega[i], inf);
                orientation_rows += 2;
            }
        }
    }

    for k in 1..=horizon {
        for s in [lay.slack_state(k), lay.slack_sd(k), lay.slack_orientation(k)] {
            rows.add(&[(s, 1.0)], 0.0, inf);
        }
    }

    let qp = QpProblem {
        n,
        p,
        q,
        a: rows.a,
        l: rows.l,
        u: rows.u,
    };
    qp.validate()?;
    Ok(SqpProblem {
        qp,
        layout: lay,
        sd_rows,
        orientation_rows,
    })
}
