//! Long-horizon A* over the risk grid.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridmap::{layers, CellIndex, GridMap, Point2};
use crate::risk::{cvar_raster, RiskLevel};

/// Edge costs are rounded up to multiples of this so that path sums are
/// exact and independent of summation order.
const COST_QUANTUM: f64 = 1.0 / (1u64 << 32) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeomPlanConfig {
    /// Cost per meter traveled.
    pub lambda: f64,
    pub alpha: RiskLevel,
    /// Cells whose CVaR reaches this value are untraversable.
    pub lethal_threshold: f64,
}

impl Default for GeomPlanConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: RiskLevel::new(0.5).expect("valid default"),
            lethal_threshold: 0.7,
        }
    }
}

impl GeomPlanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Configuration(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lethal_threshold > 0.0) {
            return Err(Error::Configuration(format!(
                "lethal_threshold must be > 0, got {}",
                self.lethal_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricPath {
    pub poses: Vec<Point2>,
    pub total_risk: f64,
    pub total_length: f64,
    /// Search objective: sum of quantized edge costs.
    #[serde(default)]
    pub cost: f64,
}

impl GeometricPath {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("path serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            context: format!("path file line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeomOutcome {
    Path(GeometricPath),
    NoPath { reason: String },
}

impl GeomOutcome {
    pub fn path(&self) -> Option<&GeometricPath> {
        match self {
            GeomOutcome::Path(p) => Some(p),
            GeomOutcome::NoPath { .. } => None,
        }
    }
}

/// Cost of moving `length` meters into a cell of risk `rho`.
pub fn edge_cost(rho: f64, length: f64, lambda: f64) -> f64 {
    ((rho + lambda * length) / COST_QUANTUM).ceil() * COST_QUANTUM
}

/// Position-only dynamic risk of a waypoint sequence: the first waypoint
/// contributes its mean, every later one its CVaR.
pub fn path_risk(map: &GridMap, poses: &[Point2], level: RiskLevel) -> Result<f64> {
    let mu = map.layer(layers::RISK_MU)?;
    let sigma = map.layer(layers::RISK_SIGMA)?;
    let k = level.tail_factor();
    let mut total = 0.0;
    for (i, p) in poses.iter().enumerate() {
        let idx = map.index(map.require_cell(*p)?);
        total += if i == 0 { mu[idx] } else { mu[idx] + sigma[idx] * k };
    }
    Ok(total)
}

#[derive(PartialEq)]
struct Entry {
    f: f64,
    h: f64,
    idx: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    // reversed so the std max-heap pops the smallest (f, h, idx)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.h.total_cmp(&self.h))
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// 8-connected neighbor offsets `(d_row, d_col)` in a fixed order.
pub const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// A* from `start` to `goal` on the CVaR raster at `cfg.alpha`.
pub fn plan_geometric(map: &GridMap, start: Point2, goal: Point2, cfg: &GeomPlanConfig) -> Result<GeomOutcome> {
    cfg.validate()?;
    let rho = cvar_raster(map, cfg.alpha)?;
    plan_on_raster(map, &rho, start, goal, cfg)
}

/// A* on a precomputed CVaR raster sharing the geometry of `map`.
pub fn plan_on_raster(map: &GridMap, rho: &[f64], start: Point2, goal: Point2, cfg: &GeomPlanConfig) -> Result<GeomOutcome> {
    let s = map.require_cell(start)?;
    let g = map.require_cell(goal)?;
    let lethal = |i: usize| !(rho[i] < cfg.lethal_threshold);
    let (si, gi) = (map.index(s), map.index(g));
    if lethal(si) {
        return Ok(GeomOutcome::NoPath {
            reason: format!("start cell ({}, {}) is lethal", s.row, s.col),
        });
    }
    if lethal(gi) {
        return Ok(GeomOutcome::NoPath {
            reason: format!("goal cell ({}, {}) is lethal", g.row, g.col),
        });
    }
    let res = map.resolution();
    let goal_xy = map.world_of(g);
    // shrunk slightly so it stays consistent under edge-cost rounding
    let heuristic = |i: usize| {
        let p = map.world_of(map.cell_at(i));
        cfg.lambda * (1.0 - 1e-9) * (p[0] - goal_xy[0]).hypot(p[1] - goal_xy[1])
    };
    let n = map.len();
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    best[si] = 0.0;
    let h0 = heuristic(si);
    heap.push(Entry { f: h0, h: h0, idx: si });
    while let Some(Entry { idx, .. }) = heap.pop() {
        if closed[idx] {
            continue;
        }
        closed[idx] = true;
        if idx == gi {
            break;
        }
        let cell = map.cell_at(idx);
        for (dr, dc) in NEIGHBORS {
            let (Some(r), Some(c)) = (cell.row.checked_add_signed(dr), cell.col.checked_add_signed(dc)) else {
                continue;
            };
            if r >= map.height() || c >= map.width() {
                continue;
            }
            let j = map.index(CellIndex::new(r, c));
            if closed[j] || lethal(j) {
                continue;
            }
            let len = if dr != 0 && dc != 0 { std::f64::consts::SQRT_2 * res } else { res };
            let cand = best[idx] + edge_cost(rho[j], len, cfg.lambda);
            if cand < best[j] {
                best[j] = cand;
                parent[j] = idx;
                let h = heuristic(j);
                heap.push(Entry { f: cand + h, h, idx: j });
            }
        }
    }
    if !best[gi].is_finite() {
        return Ok(GeomOutcome::NoPath {
            reason: "goal unreachable without entering lethal cells".into(),
        });
    }
    let mut chain = vec![gi];
    while *chain.last().expect("non-empty") != si {
        chain.push(parent[*chain.last().expect("non-empty")]);
    }
    chain.reverse();
    let poses: Vec<Point2> = chain.iter().map(|&i| map.world_of(map.cell_at(i))).collect();
    let total_length = poses.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum();
    let total_risk = if map.has_layer(layers::RISK_MU) {
        path_risk(map, &poses, cfg.alpha)?
    } else {
        // without the distribution layers only the entered cells' CVaR is known
        chain.iter().skip(1).map(|&i| rho[i]).sum::<f64>()
    };
    Ok(GeomOutcome::Path(GeometricPath {
        poses,
        total_risk,
        total_length,
        cost: best[gi],
    }))
}
