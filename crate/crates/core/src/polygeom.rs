//! Convex polygons, footprints, signed distance and obstacle extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridmap::{CellIndex, GridMap, Point2};
use crate::risk::{cvar_raster, RiskLevel};

const COLLINEAR_TOL: f64 = 1e-9;
/// Convergence tolerance of the support-mapping iterations, in meters.
pub const SD_TOL: f64 = 1e-9;
pub const SD_MAX_ITER: usize = 64;
/// Finite-difference steps for `(p_x, p_y, p_theta)`.
pub const SD_GRAD_STEP: [f64; 3] = [1e-4, 1e-4, 1e-4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexPolygon {
    vertices: Vec<Point2>,
}

fn sub(a: Point2, b: Point2) -> Point2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: Point2, b: Point2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn cross(a: Point2, b: Point2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn norm(a: Point2) -> f64 {
    a[0].hypot(a[1])
}

impl ConvexPolygon {
    /// Validates a counter-clockwise convex vertex list.
    pub fn new(vertices: Vec<Point2>) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(Error::InvalidArgument(format!("polygon needs >= 3 vertices, got {n}")));
        }
        if vertices.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(Error::InvalidArgument("polygon vertex is not finite".into()));
        }
        let scale = vertices.iter().map(|v| v[0].abs().max(v[1].abs())).fold(1.0, f64::max);
        for i in 0..n {
            let (a, b, c) = (vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
            if norm(sub(b, a)) <= COLLINEAR_TOL * scale {
                return Err(Error::InvalidArgument(format!("repeated polygon vertex at index {}", (i + 1) % n)));
            }
            if cross(sub(b, a), sub(c, b)) < -COLLINEAR_TOL * scale * scale {
                return Err(Error::InvalidArgument(
                    "polygon is not convex or not counter-clockwise".into(),
                ));
            }
        }
        let poly = Self { vertices };
        if poly.area() <= COLLINEAR_TOL * scale * scale {
            return Err(Error::InvalidArgument("degenerate polygon with zero area".into()));
        }
        Ok(poly)
    }

    /// Axis-aligned rectangle `[min, max]`.
    pub fn rectangle(min: Point2, max: Point2) -> Result<Self> {
        Self::new(vec![min, [max[0], min[1]], max, [min[0], max[1]]])
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        0.5 * (0..n)
            .map(|i| cross(self.vertices[i], self.vertices[(i + 1) % n]))
            .sum::<f64>()
    }

    pub fn centroid(&self) -> Point2 {
        let n = self.vertices.len() as f64;
        let s = self
            .vertices
            .iter()
            .fold([0.0, 0.0], |acc, v| [acc[0] + v[0], acc[1] + v[1]]);
        [s[0] / n, s[1] / n]
    }

    pub fn translated(&self, t: Point2) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| [v[0] + t[0], v[1] + t[1]]).collect(),
        }
    }

    /// Closed containment test.
    pub fn contains(&self, p: Point2) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            cross(sub(b, a), sub(p, a)) >= -1e-12
        })
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (Point2, Point2) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    fn support(&self, d: Point2) -> Point2 {
        let mut best = self.vertices[0];
        let mut best_dot = dot(best, d);
        for &v in &self.vertices[1..] {
            let s = dot(v, d);
            if s > best_dot {
                best = v;
                best_dot = s;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FootprintSpec {
    pub half_length: f64,
    pub half_width: f64,
}

impl Default for FootprintSpec {
    fn default() -> Self {
        Self {
            half_length: 0.3,
            half_width: 0.2,
        }
    }
}

impl FootprintSpec {
    pub fn new(half_length: f64, half_width: f64) -> Result<Self> {
        let s = Self {
            half_length,
            half_width,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.half_length > 0.0 && self.half_width > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "footprint half extents must be > 0, got {} x {}",
                self.half_length, self.half_width
            )));
        }
        Ok(())
    }

    /// Radius of the circle enclosing the footprint.
    pub fn circumradius(&self) -> f64 {
        self.half_length.hypot(self.half_width)
    }
}

/// Robot footprint placed at pose `(p_x, p_y, p_theta)`.
pub fn footprint_at(spec: &FootprintSpec, pose: [f64; 3]) -> ConvexPolygon {
    let (s, c) = pose[2].sin_cos();
    let (l, w) = (spec.half_length, spec.half_width);
    // quadrant order (+,+), (-,+), (-,-), (+,-) is counter-clockwise
    let vertices = [[l, w], [-l, w], [-l, -w], [l, -w]]
        .map(|[x, y]| [pose[0] + c * x - s * y, pose[1] + s * x + c * y]);
    ConvexPolygon {
        vertices: vertices.to_vec(),
    }
}

/// Support point of the Minkowski difference `A - B`.
fn support_diff(a: &ConvexPolygon, b: &ConvexPolygon, d: Point2) -> Point2 {
    sub(a.support(d), b.support([-d[0], -d[1]]))
}

/// Closest point to the origin on the segment `[p, q]` and its parameter.
fn closest_on_segment(p: Point2, q: Point2) -> (Point2, f64) {
    let e = sub(q, p);
    let ee = dot(e, e);
    if ee == 0.0 {
        return (p, 0.0);
    }
    let t = (-dot(p, e) / ee).clamp(0.0, 1.0);
    ([p[0] + t * e[0], p[1] + t * e[1]], t)
}

/// Reduces `simplex` to the face nearest the origin and returns the closest
/// point, or `None` when the origin lies inside a full triangle.
fn nearest_on_simplex(simplex: &mut Vec<Point2>) -> Option<Point2> {
    match simplex.len() {
        1 => Some(simplex[0]),
        2 => {
            let (v, t) = closest_on_segment(simplex[0], simplex[1]);
            if t == 0.0 {
                simplex.truncate(1);
            } else if t == 1.0 {
                simplex.swap_remove(0);
            }
            Some(v)
        }
        _ => {
            let (a, b, c) = (simplex[0], simplex[1], simplex[2]);
            let area = cross(sub(b, a), sub(c, a));
            let s = area.signum();
            let inside = s * cross(sub(b, a), [-a[0], -a[1]]) >= 0.0
                && s * cross(sub(c, b), [-b[0], -b[1]]) >= 0.0
                && s * cross(sub(a, c), [-c[0], -c[1]]) >= 0.0;
            if inside && area != 0.0 {
                return None;
            }
            let mut best: Option<(f64, Vec<Point2>, Point2)> = None;
            for (p, q) in [(a, b), (b, c), (c, a)] {
                let mut sub_simplex = vec![p, q];
                let v = nearest_on_simplex(&mut sub_simplex).expect("segment");
                let d = dot(v, v);
                if best.as_ref().is_none_or(|(bd, _, _)| d < *bd) {
                    best = Some((d, sub_simplex, v));
                }
            }
            let (_, reduced, v) = best.expect("three edges");
            *simplex = reduced;
            Some(v)
        }
    }
}

enum Gjk {
    Separated(f64),
    Overlap(Vec<Point2>),
}

fn gjk(a: &ConvexPolygon, b: &ConvexPolygon) -> Gjk {
    let d0 = sub(a.centroid(), b.centroid());
    let d0 = if norm(d0) > 0.0 { d0 } else { [1.0, 0.0] };
    let mut simplex = vec![support_diff(a, b, d0)];
    let mut v = simplex[0];
    for _ in 0..SD_MAX_ITER {
        let vn = norm(v);
        if vn <= 1e-14 {
            return Gjk::Overlap(simplex);
        }
        let w = support_diff(a, b, [-v[0], -v[1]]);
        // |v| - (v.w)/|v| bounds the remaining distance error
        if vn - dot(v, w) / vn <= SD_TOL {
            return Gjk::Separated(vn);
        }
        if simplex.iter().any(|p| norm(sub(*p, w)) <= 1e-15) {
            return Gjk::Separated(vn);
        }
        simplex.push(w);
        match nearest_on_simplex(&mut simplex) {
            Some(next) => v = next,
            None => return Gjk::Overlap(simplex),
        }
    }
    Gjk::Separated(norm(v))
}

/// Grows a simplex that touches or encloses the origin into a CCW polygon
/// that encloses it. Returns `None` when `A - B` has no interior.
fn seed_polytope(a: &ConvexPolygon, b: &ConvexPolygon, mut simplex: Vec<Point2>) -> Option<Vec<Point2>> {
    let dirs: [Point2; 4] = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
    while simplex.len() < 3 {
        let cand: Vec<Point2> = if simplex.len() == 2 {
            let e = sub(simplex[1], simplex[0]);
            vec![[-e[1], e[0]], [e[1], -e[0]]]
        } else {
            dirs.to_vec()
        };
        let base = simplex.clone();
        let mut grown = false;
        for d in cand {
            let w = support_diff(a, b, d);
            let gain = if base.len() == 2 {
                cross(sub(base[1], base[0]), sub(w, base[0])).abs() / norm(sub(base[1], base[0])).max(1e-300)
            } else {
                norm(sub(w, base[0]))
            };
            if gain > SD_TOL {
                simplex.push(w);
                grown = true;
                break;
            }
        }
        if !grown {
            return None;
        }
    }
    if cross(sub(simplex[1], simplex[0]), sub(simplex[2], simplex[0])) < 0.0 {
        simplex.swap(1, 2);
    }
    Some(simplex)
}

/// Penetration depth by expanding the polytope toward the boundary of `A - B`.
fn epa(a: &ConvexPolygon, b: &ConvexPolygon, simplex: Vec<Point2>) -> f64 {
    let Some(mut poly) = seed_polytope(a, b, simplex) else {
        return 0.0;
    };
    let mut best = f64::INFINITY;
    for _ in 0..SD_MAX_ITER {
        let n = poly.len();
        let mut min_i = 0;
        let mut min_d = f64::INFINITY;
        let mut min_n = [0.0, 0.0];
        for i in 0..n {
            let e = sub(poly[(i + 1) % n], poly[i]);
            let len = norm(e);
            if len <= 1e-15 {
                continue;
            }
            let nrm = [e[1] / len, -e[0] / len];
            let d = dot(nrm, poly[i]);
            if d < min_d {
                min_d = d;
                min_i = i;
                min_n = nrm;
            }
        }
        best = min_d;
        let w = support_diff(a, b, min_n);
        if dot(min_n, w) - min_d <= SD_TOL {
            return min_d.max(0.0);
        }
        poly.insert(min_i + 1, w);
    }
    best.max(0.0)
}

/// Signed distance: separation when disjoint, minus the penetration depth
/// when overlapping.
pub fn signed_distance(a: &ConvexPolygon, b: &ConvexPolygon) -> f64 {
    match gjk(a, b) {
        Gjk::Separated(d) => d,
        Gjk::Overlap(simplex) => -epa(a, b, simplex),
    }
}

/// Central-difference gradient of `sd(footprint_at(spec, s), obstacle)` in
/// `(p_x, p_y, p_theta)`.
pub fn signed_distance_gradient(spec: &FootprintSpec, pose: [f64; 3], obstacle: &ConvexPolygon) -> [f64; 3] {
    signed_distance_gradient_with_step(spec, pose, obstacle, SD_GRAD_STEP)
}

pub fn signed_distance_gradient_with_step(
    spec: &FootprintSpec,
    pose: [f64; 3],
    obstacle: &ConvexPolygon,
    step: [f64; 3],
) -> [f64; 3] {
    let mut g = [0.0; 3];
    for k in 0..3 {
        let (mut plus, mut minus) = (pose, pose);
        plus[k] += step[k];
        minus[k] -= step[k];
        let sp = signed_distance(&footprint_at(spec, plus), obstacle);
        let sm = signed_distance(&footprint_at(spec, minus), obstacle);
        g[k] = (sp - sm) / (2.0 * step[k]);
    }
    g
}

/// World-frame rectangle used to limit obstacle extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub min: Point2,
    pub max: Point2,
}

impl Roi {
    pub fn around(center: Point2, half: f64) -> Self {
        Self {
            min: [center[0] - half, center[1] - half],
            max: [center[0] + half, center[1] + half],
        }
    }

    pub fn whole(map: &GridMap) -> Self {
        let (min, max) = map.extent();
        Self { min, max }
    }

    fn contains(&self, p: Point2) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }
}

/// Rectangles covering every cell whose CVaR at `level` reaches `rho_max`
/// and whose center lies in `roi`.
pub fn decompose_risk_obstacles(map: &GridMap, level: RiskLevel, rho_max: f64, roi: Roi) -> Result<Vec<ConvexPolygon>> {
    let cvar = cvar_raster(map, level)?;
    Ok(decompose_lethal_cells(map, &cvar, rho_max, roi))
}

/// Same as [`decompose_risk_obstacles`] on a precomputed CVaR raster.
pub fn decompose_lethal_cells(map: &GridMap, cvar: &[f64], rho_max: f64, roi: Roi) -> Vec<ConvexPolygon> {
    let (w, h) = (map.width(), map.height());
    let res = map.resolution();
    let lethal = |r: usize, c: usize| {
        let cell = CellIndex::new(r, c);
        let v = cvar[map.index(cell)];
        // missing risk counts as untraversable
        (v >= rho_max || v.is_nan()) && roi.contains(map.world_of(cell))
    };
    // (row_start, col_start, col_end_exclusive) of rectangles still open
    let mut open: Vec<(usize, usize, usize)> = Vec::new();
    let mut done: Vec<(usize, usize, usize, usize)> = Vec::new();
    for r in 0..h {
        let mut runs = Vec::new();
        let mut c = 0;
        while c < w {
            if lethal(r, c) {
                let start = c;
                while c < w && lethal(r, c) {
                    c += 1;
                }
                runs.push((start, c));
            } else {
                c += 1;
            }
        }
        let mut next_open = Vec::with_capacity(runs.len());
        for (c0, c1) in runs {
            if let Some(pos) = open.iter().position(|&(_, a, b)| a == c0 && b == c1) {
                next_open.push(open.swap_remove(pos));
            } else {
                next_open.push((r, c0, c1));
            }
        }
        for (r0, c0, c1) in open.drain(..) {
            done.push((r0, r, c0, c1));
        }
        open = next_open;
    }
    for (r0, c0, c1) in open {
        done.push((r0, h, c0, c1));
    }
    done.sort_unstable();
    let o = map.origin();
    done.into_iter()
        .map(|(r0, r1, c0, c1)| {
            let min = [o[0] + (c0 as f64 - 0.5) * res, o[1] + (r0 as f64 - 0.5) * res];
            let max = [o[0] + (c1 as f64 - 0.5) * res, o[1] + (r1 as f64 - 0.5) * res];
            ConvexPolygon::rectangle(min, max).expect("non-empty cell rectangle")
        })
        .collect()
}

/// Debug dump of polygons as `[[[x, y], ...], ...]`.
pub fn polygons_to_json(polys: &[ConvexPolygon]) -> String {
    let raw: Vec<&[Point2]> = polys.iter().map(|p| p.vertices()).collect();
    serde_json::to_string(&raw).expect("polygon serialization")
}
