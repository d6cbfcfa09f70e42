//! Explicit-Euler robot models.
//!
//! Two variants share one state layout `[p_x, p_y, p_theta, v_x, v_y, v_theta]`:
//! the differential drive uses the first four entries with controls
//! `[a_x, v_theta]`, the general planar model uses all six with controls
//! `[a_x, a_y, a_theta]`.

use std::f64::consts::{PI, TAU};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_CAP: usize = 6;
pub const CONTROL_CAP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State(pub [f64; STATE_CAP]);

impl State {
    pub fn diff_drive(p_x: f64, p_y: f64, p_theta: f64, v_x: f64) -> Self {
        State([p_x, p_y, p_theta, v_x, 0.0, 0.0])
    }

    pub fn general(p_x: f64, p_y: f64, p_theta: f64, v_x: f64, v_y: f64, v_theta: f64) -> Self {
        State([p_x, p_y, p_theta, v_x, v_y, v_theta])
    }

    pub fn p_x(&self) -> f64 {
        self.0[0]
    }
    pub fn p_y(&self) -> f64 {
        self.0[1]
    }
    pub fn p_theta(&self) -> f64 {
        self.0[2]
    }
    pub fn v_x(&self) -> f64 {
        self.0[3]
    }
    pub fn v_y(&self) -> f64 {
        self.0[4]
    }
    pub fn v_theta(&self) -> f64 {
        self.0[5]
    }

    pub fn position(&self) -> [f64; 2] {
        [self.0[0], self.0[1]]
    }

    /// `(p_x, p_y, p_theta)`.
    pub fn pose(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control(pub [f64; CONTROL_CAP]);

impl Control {
    pub fn diff_drive(a_x: f64, v_theta: f64) -> Self {
        Control([a_x, v_theta, 0.0])
    }

    pub fn general(a_x: f64, a_y: f64, a_theta: f64) -> Self {
        Control([a_x, a_y, a_theta])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    DiffDrive,
    General6,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsModel {
    pub kind: ModelKind,
    /// Turn-in-place mixing constant: weight of `v_x` in the yaw rate.
    pub mix: f64,
    pub dt: f64,
    /// Acceleration limits `(a_x, a_y, a_theta)`.
    pub a_max: [f64; 3],
    /// Velocity limits `(v_x, v_y, v_theta)`.
    pub v_max: [f64; 3],
}

impl Default for DynamicsModel {
    fn default() -> Self {
        Self {
            kind: ModelKind::DiffDrive,
            mix: 0.0,
            dt: 0.1,
            a_max: [1.0, 1.0, 2.0],
            v_max: [1.0, 0.5, 1.0],
        }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

impl DynamicsModel {
    pub fn diff_drive(dt: f64) -> Self {
        Self {
            dt,
            ..Self::default()
        }
    }

    pub fn general6(dt: f64, kappa: f64) -> Self {
        Self {
            kind: ModelKind::General6,
            mix: kappa,
            dt,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Configuration(format!("dynamics dt must be > 0, got {}", self.dt)));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(Error::Configuration(format!(
                "dynamics mix must lie in [0, 1], got {}",
                self.mix
            )));
        }
        if self.a_max.iter().chain(&self.v_max).any(|v| !(*v > 0.0)) {
            return Err(Error::Configuration("dynamics limits must be > 0".into()));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        match self.kind {
            ModelKind::DiffDrive => 4,
            ModelKind::General6 => 6,
        }
    }

    pub fn nu(&self) -> usize {
        match self.kind {
            ModelKind::DiffDrive => 2,
            ModelKind::General6 => 3,
        }
    }

    /// Symmetric magnitude bound of each control component.
    pub fn control_bounds(&self) -> [f64; CONTROL_CAP] {
        match self.kind {
            ModelKind::DiffDrive => [self.a_max[0], self.v_max[2], 0.0],
            ModelKind::General6 => self.a_max,
        }
    }

    pub fn clamp_control(&self, u: Control) -> Control {
        let b = self.control_bounds();
        let mut out = [0.0; CONTROL_CAP];
        for i in 0..self.nu() {
            out[i] = u.0[i].clamp(-b[i], b[i]);
        }
        Control(out)
    }

    /// Heading rate produced by `(x, u)`.
    pub fn yaw_rate(&self, x: &State, u: &Control) -> f64 {
        match self.kind {
            ModelKind::DiffDrive => self.mix * x.v_x() + (1.0 - self.mix) * u.0[1],
            ModelKind::General6 => self.mix * x.v_x() + (1.0 - self.mix) * x.v_theta(),
        }
    }

    pub fn step(&self, x: &State, u: &Control) -> State {
        let dt = self.dt;
        let (s, c) = x.p_theta().sin_cos();
        let mut next = x.0;
        match self.kind {
            ModelKind::DiffDrive => {
                let v = x.v_x();
                next[0] += dt * v * c;
                next[1] += dt * v * s;
                next[2] = wrap_angle(x.p_theta() + dt * self.yaw_rate(x, u));
                next[3] += dt * u.0[0];
                next[4] = 0.0;
                next[5] = 0.0;
            }
            ModelKind::General6 => {
                let (vx, vy) = (x.v_x(), x.v_y());
                next[0] += dt * (vx * c - vy * s);
                next[1] += dt * (vx * s + vy * c);
                next[2] = wrap_angle(x.p_theta() + dt * self.yaw_rate(x, u));
                next[3] += dt * u.0[0];
                next[4] += dt * u.0[1];
                next[5] += dt * u.0[2];
            }
        }
        State(next)
    }

    /// Analytic Jacobians `(df/dx, df/du)` of [`DynamicsModel::step`],
    /// sized `nx x nx` and `nx x nu`.
    pub fn linearize(&self, x: &State, _u: &Control) -> (DMatrix<f64>, DMatrix<f64>) {
        let dt = self.dt;
        let (nx, nu) = (self.nx(), self.nu());
        let (s, c) = x.p_theta().sin_cos();
        let mut a = DMatrix::<f64>::identity(nx, nx);
        let mut b = DMatrix::<f64>::zeros(nx, nu);
        match self.kind {
            ModelKind::DiffDrive => {
                let v = x.v_x();
                a[(0, 2)] = -dt * v * s;
                a[(0, 3)] = dt * c;
                a[(1, 2)] = dt * v * c;
                a[(1, 3)] = dt * s;
                a[(2, 3)] = dt * self.mix;
                b[(2, 1)] = dt * (1.0 - self.mix);
                b[(3, 0)] = dt;
            }
            ModelKind::General6 => {
                let (vx, vy) = (x.v_x(), x.v_y());
                a[(0, 2)] = dt * (-vx * s - vy * c);
                a[(0, 3)] = dt * c;
                a[(0, 4)] = -dt * s;
                a[(1, 2)] = dt * (vx * c - vy * s);
                a[(1, 3)] = dt * s;
                a[(1, 4)] = dt * c;
                a[(2, 3)] = dt * self.mix;
                a[(2, 5)] = dt * (1.0 - self.mix);
                b[(3, 0)] = dt;
                b[(4, 1)] = dt;
                b[(5, 2)] = dt;
            }
        }
        (a, b)
    }

    pub fn rollout(&self, x0: State, controls: &[Control]) -> Trajectory {
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0);
        let mut x = x0;
        for u in controls {
            x = self.step(&x, u);
            states.push(x);
        }
        Trajectory {
            states,
            controls: controls.to_vec(),
            dt: self.dt,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub controls: Vec<Control>,
    pub dt: f64,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    dt: f64,
    states: Vec<Vec<f64>>,
    controls: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn final_state(&self) -> &State {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Structured-text export `{dt, states, controls}` trimmed to the
    /// model's state and control dimensions.
    pub fn to_json(&self, model: &DynamicsModel) -> String {
        let file = TrajectoryFile {
            dt: self.dt,
            states: self.states.iter().map(|s| s.0[..model.nx()].to_vec()).collect(),
            controls: self.controls.iter().map(|u| u.0[..model.nu()].to_vec()).collect(),
        };
        serde_json::to_string_pretty(&file).expect("trajectory serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TrajectoryFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            context: format!("trajectory line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        if file.states.len() != file.controls.len() + 1 {
            return Err(Error::Parse {
                context: "trajectory".into(),
                message: "expected one more state than controls".into(),
            });
        }
        let pad = |v: &[f64], cap: usize, what: &str| -> Result<Vec<f64>> {
            if v.len() > cap {
                return Err(Error::Parse {
                    context: "trajectory".into(),
                    message: format!("{what} vector too long ({})", v.len()),
                });
            }
            let mut out = v.to_vec();
            out.resize(cap, 0.0);
            Ok(out)
        };
        let mut states = Vec::new();
        for s in &file.states {
            let v = pad(s, STATE_CAP, "state")?;
            states.push(State(v.try_into().expect("padded")));
        }
        let mut controls = Vec::new();
        for u in &file.controls {
            let v = pad(u, CONTROL_CAP, "control")?;
            controls.push(Control(v.try_into().expect("padded")));
        }
        Ok(Self {
            states,
            controls,
            dt: file.dt,
        })
    }
}
