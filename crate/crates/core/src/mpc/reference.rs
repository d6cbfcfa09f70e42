//! Time-parameterized reference along the geometric path.

use crate::dynamics::{wrap_angle, State};
use crate::geom::GeometricPath;
use crate::gridmap::Point2;

use super::{Mpc, Scene};

/// Arc-length parameterized polyline.
#[derive(Debug, Clone)]
pub(crate) struct Polyline<'a> {
    pts: &'a [Point2],
    s: Vec<f64>,
}

impl<'a> Polyline<'a> {
    pub(crate) fn new(pts: &'a [Point2]) -> Self {
        let mut s = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        for (i, p) in pts.iter().enumerate() {
            if i > 0 {
                acc += dist(pts[i - 1], *p);
            }
            s.push(acc);
        }
        Self { pts, s }
    }

    pub(crate) fn length(&self) -> f64 {
        *self.s.last().unwrap_or(&0.0)
    }

    pub(crate) fn point_at(&self, s: f64) -> Point2 {
        if self.pts.len() == 1 || s <= 0.0 {
            return self.pts[0];
        }
        let i = self.s.partition_point(|&v| v < s).min(self.pts.len() - 1).max(1);
        let seg = self.s[i] - self.s[i - 1];
        let t = if seg > 0.0 { ((s - self.s[i - 1]) / seg).clamp(0.0, 1.0) } else { 1.0 };
        lerp(self.pts[i - 1], self.pts[i], t)
    }

    /// Arc length of the closest point to `p`.
    pub(crate) fn project(&self, p: Point2) -> f64 {
        if self.pts.len() == 1 {
            return 0.0;
        }
        let mut best = (f64::INFINITY, 0.0);
        for i in 1..self.pts.len() {
            let (a, b) = (self.pts[i - 1], self.pts[i]);
            let d = [b[0] - a[0], b[1] - a[1]];
            let len2 = d[0] * d[0] + d[1] * d[1];
            let t = if len2 > 0.0 {
                (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = lerp(a, b, t);
            let e = dist(p, q);
            if e < best.0 {
                best = (e, self.s[i - 1] + t * (self.s[i] - self.s[i - 1]));
            }
        }
        best.1
    }

    /// Direction from the point at `s` toward the point `ahead` further on;
    /// `fallback` when the two coincide.
    pub(crate) fn heading_at(&self, s: f64, ahead: f64, fallback: f64) -> f64 {
        let total = self.length();
        let a = self.point_at(s.min(total));
        let b = self.point_at((s + ahead).min(total));
        if dist(a, b) > 1e-9 {
            return (b[1] - a[1]).atan2(b[0] - a[0]);
        }
        // at the end: keep the last segment's direction
        let n = self.pts.len();
        if n >= 2 {
            let (p, q) = (self.pts[n - 2], self.pts[n - 1]);
            if dist(p, q) > 1e-9 {
                return (q[1] - p[1]).atan2(q[0] - p[0]);
            }
        }
        fallback
    }
}

fn dist(a: Point2, b: Point2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn lerp(a: Point2, b: Point2, t: f64) -> Point2 {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Reference states `r_0..=r_T` advancing along `path` from the projection
/// of `x0`. Speed ramps at the acceleration limit toward the cruise speed,
/// respects the risk-dependent speed bound, and brakes to stop at the end.
pub fn reference_trajectory(mpc: &Mpc, scene: &Scene, x0: &State, path: &GeometricPath) -> Vec<State> {
    let line = Polyline::new(&path.poses);
    let total = line.length();
    let (dt, a) = (mpc.model.dt, mpc.model.a_max[0]);
    let lookahead = mpc.cfg.library.lookahead.max(1e-3);
    let mut s = line.project(x0.position());
    let mut v = x0.v_x().max(0.0);
    let mut heading = x0.p_theta();
    let mut out = Vec::with_capacity(mpc.cfg.horizon + 1);
    for _ in 0..=mpc.cfg.horizon {
        let p = line.point_at(s);
        heading = line.heading_at(s, lookahead, heading);
        let mut r = State::default();
        r.0[0] = p[0];
        r.0[1] = p[1];
        r.0[2] = wrap_angle(heading);
        r.0[3] = v;
        out.push(r);
        s = (s + dt * v).min(total);
        let (v_bound, _) = mpc.velocity_bounds(scene.risk_at(line.point_at(s)));
        let stop = (2.0 * a * (total - s)).max(0.0).sqrt();
        v = (v + a * dt).min(mpc.cfg.cruise_speed).min(v_bound).min(stop);
    }
    out
}
