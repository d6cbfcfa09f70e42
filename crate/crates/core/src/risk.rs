//! Per-cell Gaussian traversability risk and its CVaR.
//!
//! Every risk factor yields a mean and standard deviation layer. Factors are
//! treated as independent normals, so a weighted sum stays normal and its
//! CVaR has the closed form `mu + sigma * pdf(quantile(alpha)) / (1 - alpha)`.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gridmap::{layers, CellIndex, GridMap, Point2};

/// Largest admissible risk level; the closed form diverges as alpha -> 1.
pub const MAX_ALPHA: f64 = 0.999;

/// Tolerance on the sum of aggregation weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskDistribution {
    pub mu: f64,
    pub sigma: f64,
}

impl RiskDistribution {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::InvalidArgument(format!("risk mean must be >= 0, got {mu}")));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("risk std must be >= 0, got {sigma}")));
        }
        Ok(Self { mu, sigma })
    }
}

/// CVaR probability level, `0 < alpha <= MAX_ALPHA`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RiskLevel(f64);

impl RiskLevel {
    /// Accepts `0 < alpha < 1`; values above [`MAX_ALPHA`] are capped.
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "risk level must lie in (0, 1), got {alpha}"
            )));
        }
        Ok(Self(alpha.min(MAX_ALPHA)))
    }

    pub fn alpha(self) -> f64 {
        self.0
    }

    /// `pdf(quantile(alpha)) / (1 - alpha)`, the sigma multiplier of the
    /// Gaussian CVaR.
    pub fn tail_factor(self) -> f64 {
        let n = Normal::standard();
        n.pdf(n.inverse_cdf(self.0)) / (1.0 - self.0)
    }
}

impl TryFrom<f64> for RiskLevel {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        RiskLevel::new(v)
    }
}

impl From<RiskLevel> for f64 {
    fn from(l: RiskLevel) -> f64 {
        l.0
    }
}

impl fmt::Display for RiskLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn cvar_gaussian(r: RiskDistribution, level: RiskLevel) -> f64 {
    r.mu + r.sigma * level.tail_factor()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskFactorKind {
    Collision,
    Step,
    Tipover,
    ContactLoss,
    Slippage,
    SensorUncertainty,
}

impl RiskFactorKind {
    pub fn name(self) -> &'static str {
        match self {
            RiskFactorKind::Collision => "collision",
            RiskFactorKind::Step => "step",
            RiskFactorKind::Tipover => "tipover",
            RiskFactorKind::ContactLoss => "contact_loss",
            RiskFactorKind::Slippage => "slippage",
            RiskFactorKind::SensorUncertainty => "sensor_uncertainty",
        }
    }

    /// (benign, lethal) hazard thresholds of the linear transfer ramp.
    fn default_thresholds(self) -> (f64, f64) {
        match self {
            // clearance in meters; risk rises as the clearance shrinks
            RiskFactorKind::Collision => (0.6, 0.2),
            RiskFactorKind::Step => (0.05, 0.2),
            RiskFactorKind::Tipover => (0.0, 45.0),
            RiskFactorKind::ContactLoss => (0.01, 0.05),
            RiskFactorKind::Slippage => (0.0, 1.0),
            RiskFactorKind::SensorUncertainty => (0.0, 1.0),
        }
    }
}

/// Kind-specific factor parameters. Unset fields fall back to per-kind
/// defaults, which are tuning choices rather than measured values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorParams {
    /// Hazard value at which risk starts rising from 0.
    pub benign: Option<f64>,
    /// Hazard value at which risk saturates at `risk_cap`.
    pub lethal: Option<f64>,
    /// Height above the local ground that marks a collision obstacle.
    pub obstacle_height: Option<f64>,
    /// Neighborhood radius in cells (plane fit, obstacle ground search).
    pub window: Option<usize>,
    /// Input layer for the slippage factor.
    pub layer: Option<String>,
    pub sensor_origin: Option<Point2>,
    pub sigma_per_meter: Option<f64>,
    pub sigma_floor: Option<f64>,
    /// Constant std addend on elevation-derived factors.
    pub localization_sigma: Option<f64>,
    pub risk_cap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskFactorSpec {
    pub kind: RiskFactorKind,
    pub weight: f64,
    #[serde(default)]
    pub params: FactorParams,
}

impl RiskFactorSpec {
    pub fn new(kind: RiskFactorKind, weight: f64) -> Self {
        Self {
            kind,
            weight,
            params: FactorParams::default(),
        }
    }

    fn thresholds(&self) -> Result<(f64, f64)> {
        let (b, l) = self.kind.default_thresholds();
        let benign = self.params.benign.unwrap_or(b);
        let lethal = self.params.lethal.unwrap_or(l);
        if benign == lethal || !benign.is_finite() || !lethal.is_finite() {
            return Err(Error::Configuration(format!(
                "{} factor: benign and lethal thresholds must differ",
                self.kind.name()
            )));
        }
        Ok((benign, lethal))
    }

    fn sigma_floor(&self) -> f64 {
        self.params.sigma_floor.unwrap_or(0.01)
    }

    fn risk_cap(&self) -> f64 {
        self.params.risk_cap.unwrap_or(1.0)
    }
}

/// Default factor set used when a configuration does not list any.
pub fn default_factor_specs() -> Vec<RiskFactorSpec> {
    vec![
        RiskFactorSpec::new(RiskFactorKind::Step, 0.35),
        RiskFactorSpec::new(RiskFactorKind::Tipover, 0.25),
        RiskFactorSpec::new(RiskFactorKind::Collision, 0.2),
        RiskFactorSpec::new(RiskFactorKind::ContactLoss, 0.1),
        RiskFactorSpec::new(RiskFactorKind::SensorUncertainty, 0.1),
    ]
}

/// Mean and std rasters of one factor (or of the aggregate).
#[derive(Debug, Clone, PartialEq)]
pub struct RiskLayers {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Clamped linear transfer from a hazard signal to `[0, 1]`. Works for both
/// rising (`lethal > benign`) and falling (`lethal < benign`) hazards.
pub fn hazard_ramp(signal: f64, benign: f64, lethal: f64) -> f64 {
    ((signal - benign) / (lethal - benign)).clamp(0.0, 1.0)
}

pub fn compute_risk_factor(map: &GridMap, spec: &RiskFactorSpec) -> Result<RiskLayers> {
    let (benign, lethal) = spec.thresholds()?;
    let cap = spec.risk_cap();
    let floor = spec.sigma_floor();
    let geometric_sigma = floor + spec.params.localization_sigma.unwrap_or(0.0);
    let n = map.len();
    let (w, h) = (map.width(), map.height());

    let (mu, sigma) = match spec.kind {
        RiskFactorKind::Step => {
            let elev = map.layer(layers::ELEVATION)?;
            let mut mu = vec![0.0; n];
            for (i, m) in mu.iter_mut().enumerate() {
                let c = elev[i];
                if !c.is_finite() {
                    // no returns in the cell: negative obstacle
                    *m = cap;
                    continue;
                }
                let cell = map.cell_at(i);
                let mut gap: f64 = 0.0;
                for_neighbors(cell, w, h, 1, |j| {
                    let v = elev[j];
                    if v.is_finite() {
                        gap = gap.max((v - c).abs());
                    }
                });
                *m = cap * hazard_ramp(gap, benign, lethal);
            }
            (mu, vec![geometric_sigma; n])
        }
        RiskFactorKind::Tipover => {
            let nz = map.layer(layers::NORMAL_Z)?;
            let mu = nz
                .iter()
                .map(|&z| {
                    let slope = if z.is_finite() { z.clamp(-1.0, 1.0).acos().to_degrees() } else { 0.0 };
                    cap * hazard_ramp(slope, benign, lethal)
                })
                .collect();
            (mu, vec![geometric_sigma; n])
        }
        RiskFactorKind::Collision => {
            let elev = map.layer(layers::ELEVATION)?;
            let height = spec.params.obstacle_height.unwrap_or(0.3);
            let ground_window = spec.params.window.unwrap_or(2);
            let mut obstacle = vec![false; n];
            for (i, o) in obstacle.iter_mut().enumerate() {
                let c = elev[i];
                if !c.is_finite() {
                    continue;
                }
                let mut ground = c;
                for_neighbors(map.cell_at(i), w, h, ground_window, |j| {
                    if elev[j].is_finite() {
                        ground = ground.min(elev[j]);
                    }
                });
                *o = c - ground >= height;
            }
            let reach = benign.max(lethal);
            let radius = (reach / map.resolution()).ceil() as usize + 1;
            let res = map.resolution();
            let mut mu = vec![0.0; n];
            for (i, m) in mu.iter_mut().enumerate() {
                let cell = map.cell_at(i);
                let mut best = f64::INFINITY;
                for_neighbors_inclusive(cell, w, h, radius, |j| {
                    if obstacle[j] {
                        let o = map.cell_at(j);
                        let dr = o.row as f64 - cell.row as f64;
                        let dc = o.col as f64 - cell.col as f64;
                        best = best.min(res * (dr * dr + dc * dc).sqrt());
                    }
                });
                *m = if best.is_finite() { cap * hazard_ramp(best, benign, lethal) } else { 0.0 };
            }
            (mu, vec![geometric_sigma; n])
        }
        RiskFactorKind::ContactLoss => {
            let elev = map.layer(layers::ELEVATION)?;
            let window = spec.params.window.unwrap_or(1);
            let res = map.resolution();
            let mu = (0..n)
                .map(|i| {
                    if !elev[i].is_finite() {
                        return 0.0;
                    }
                    let cell = map.cell_at(i);
                    let mut pts = Vec::new();
                    for_neighbors_inclusive(cell, w, h, window, |j| {
                        if elev[j].is_finite() {
                            let o = map.cell_at(j);
                            pts.push([
                                res * (o.col as f64 - cell.col as f64),
                                res * (o.row as f64 - cell.row as f64),
                                elev[j],
                            ]);
                        }
                    });
                    cap * hazard_ramp(plane_fit_rms(&pts), benign, lethal)
                })
                .collect();
            (mu, vec![geometric_sigma; n])
        }
        RiskFactorKind::Slippage => {
            let name = spec.params.layer.as_deref().unwrap_or("slippage");
            let input = map.layer(name)?;
            let mu = input
                .iter()
                .map(|&v| if v.is_finite() { cap * hazard_ramp(v, benign, lethal) } else { 0.0 })
                .collect();
            (mu, vec![floor; n])
        }
        RiskFactorKind::SensorUncertainty => {
            let origin = spec.params.sensor_origin.unwrap_or([0.0, 0.0]);
            let growth = spec.params.sigma_per_meter.unwrap_or(0.01);
            let sigma = (0..n)
                .map(|i| {
                    let p = map.world_of(map.cell_at(i));
                    let d = ((p[0] - origin[0]).powi(2) + (p[1] - origin[1]).powi(2)).sqrt();
                    floor + growth * d
                })
                .collect();
            (vec![0.0; n], sigma)
        }
    };
    Ok(RiskLayers { mu, sigma })
}

/// Weighted sum of independent Gaussian factors:
/// `mu = sum w mu_l`, `sigma^2 = sum w^2 sigma_l^2`.
pub fn aggregate_risk(factors: &[(&RiskLayers, f64)]) -> Result<RiskLayers> {
    let Some(((first, _), _)) = factors.split_first() else {
        return Err(Error::InvalidArgument("at least one risk factor required".into()));
    };
    let n = first.mu.len();
    let mut total = 0.0;
    for (f, w) in factors {
        if f.mu.len() != n || f.sigma.len() != n {
            return Err(Error::InvalidArgument("risk factor layers differ in shape".into()));
        }
        if !(*w >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative factor weight {w}")));
        }
        total += w;
    }
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidArgument(format!(
            "factor weights must sum to 1, got {total}"
        )));
    }
    let mut mu = vec![0.0; n];
    let mut var = vec![0.0; n];
    for (f, w) in factors {
        for i in 0..n {
            mu[i] += w * f.mu[i];
            var[i] += w * w * f.sigma[i] * f.sigma[i];
        }
    }
    Ok(RiskLayers {
        mu,
        sigma: var.into_iter().map(f64::sqrt).collect(),
    })
}

/// Per-cell CVaR from the aggregate `risk_mu` / `risk_sigma` layers.
pub fn build_cvar_layer(map: &GridMap, level: RiskLevel) -> Result<Vec<f64>> {
    let mu = map.layer(layers::RISK_MU)?;
    let sigma = map.layer(layers::RISK_SIGMA)?;
    let k = level.tail_factor();
    Ok(mu.iter().zip(sigma).map(|(m, s)| m + s * k).collect())
}

/// Runs every factor, stores `{kind}_mu` / `{kind}_sigma`, the aggregate and
/// the CVaR layer on `map`.
pub fn build_risk_map(map: &mut GridMap, specs: &[RiskFactorSpec], level: RiskLevel) -> Result<()> {
    let mut computed = Vec::with_capacity(specs.len());
    for spec in specs {
        computed.push((compute_risk_factor(map, spec)?, spec.weight));
    }
    let refs: Vec<(&RiskLayers, f64)> = computed.iter().map(|(l, w)| (l, *w)).collect();
    let agg = aggregate_risk(&refs)?;
    for (spec, (layer, _)) in specs.iter().zip(computed) {
        let name = spec.kind.name();
        map.insert_layer(&format!("{name}_mu"), layer.mu)?;
        map.insert_layer(&format!("{name}_sigma"), layer.sigma)?;
    }
    map.insert_layer(layers::RISK_MU, agg.mu)?;
    map.insert_layer(layers::RISK_SIGMA, agg.sigma)?;
    let cvar = build_cvar_layer(map, level)?;
    map.insert_layer(layers::CVAR, cvar)
}

/// CVaR of a single cell at `level`, preferring the aggregate distribution
/// layers and falling back to a stored `cvar` layer.
pub fn cell_cvar(map: &GridMap, cell: CellIndex, level: RiskLevel) -> Result<f64> {
    if map.has_layer(layers::RISK_MU) {
        let mu = map.get(layers::RISK_MU, cell)?;
        let sigma = map.get(layers::RISK_SIGMA, cell)?;
        Ok(mu + sigma * level.tail_factor())
    } else {
        map.get(layers::CVAR, cell)
    }
}

/// Full CVaR raster at `level` (see [`cell_cvar`] for the layer preference).
pub fn cvar_raster(map: &GridMap, level: RiskLevel) -> Result<Vec<f64>> {
    if map.has_layer(layers::RISK_MU) {
        build_cvar_layer(map, level)
    } else {
        Ok(map.layer(layers::CVAR)?.to_vec())
    }
}

fn for_neighbors(cell: CellIndex, w: usize, h: usize, radius: usize, mut f: impl FnMut(usize)) {
    for_neighbors_inclusive(cell, w, h, radius, |j| {
        if j != cell.row * w + cell.col {
            f(j)
        }
    });
}

fn for_neighbors_inclusive(cell: CellIndex, w: usize, h: usize, radius: usize, mut f: impl FnMut(usize)) {
    let r0 = cell.row.saturating_sub(radius);
    let r1 = (cell.row + radius).min(h - 1);
    let c0 = cell.col.saturating_sub(radius);
    let c1 = (cell.col + radius).min(w - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            f(r * w + c);
        }
    }
}

/// RMS residual of the least-squares plane `z = a + b x + c y`.
fn plane_fit_rms(pts: &[[f64; 3]]) -> f64 {
    if pts.len() < 4 {
        return 0.0;
    }
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = nalgebra::Vector3::<f64>::zeros();
    for p in pts {
        let row = nalgebra::Vector3::new(1.0, p[0], p[1]);
        ata += row * row.transpose();
        atb += row * p[2];
    }
    let Some(coef) = ata.lu().solve(&atb) else {
        return 0.0;
    };
    let sse: f64 = pts
        .iter()
        .map(|p| {
            let r = p[2] - (coef[0] + coef[1] * p[0] + coef[2] * p[1]);
            r * r
        })
        .sum();
    (sse / pts.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn level(a: f64) -> RiskLevel {
        RiskLevel::new(a).unwrap()
    }

    fn flat(w: usize, h: usize, res: f64) -> GridMap {
        let mut m = GridMap::new(w, h, res, [0.0, 0.0]).unwrap();
        m.add_layer(layers::ELEVATION, 0.0);
        m
    }

    #[test]
    fn closed_form_reference_values() {
        let degenerate = RiskDistribution::new(0.5, 0.0).unwrap();
        assert_eq!(cvar_gaussian(degenerate, level(0.7)), 0.5);
        let std = RiskDistribution::new(0.0, 1.0).unwrap();
        assert!((cvar_gaussian(std, level(0.5)) - 0.797_884_560_802_865_4).abs() < 1e-12);
        assert!((cvar_gaussian(std, level(0.9)) - 1.754_983_319_324_868).abs() < 1e-9);
    }

    #[test]
    fn level_validation() {
        assert!(RiskLevel::new(0.0).is_err());
        assert!(RiskLevel::new(1.0).is_err());
        assert!(RiskLevel::new(f64::NAN).is_err());
        assert_eq!(RiskLevel::new(0.9995).unwrap().alpha(), MAX_ALPHA);
        assert!(RiskDistribution::new(-0.1, 0.0).is_err());
        assert!(RiskDistribution::new(0.1, -1.0).is_err());
    }

    #[test]
    fn step_factor_on_flat_and_cliff() {
        let m = flat(6, 6, 0.25);
        let spec = RiskFactorSpec::new(RiskFactorKind::Step, 1.0);
        let f = compute_risk_factor(&m, &spec).unwrap();
        assert!(f.mu.iter().all(|&v| v == 0.0));
        assert!(f.sigma.iter().all(|&v| v == 0.01));

        let mut cliff = flat(6, 6, 0.25);
        for r in 0..6 {
            for c in 3..6 {
                cliff.set(layers::ELEVATION, CellIndex::new(r, c), 0.5).unwrap();
            }
        }
        let mut spec = RiskFactorSpec::new(RiskFactorKind::Step, 1.0);
        spec.params.lethal = Some(0.2);
        let f = compute_risk_factor(&cliff, &spec).unwrap();
        // oracle: direct 8-neighborhood max height difference scan
        let elev = cliff.layer(layers::ELEVATION).unwrap();
        for i in 0..cliff.len() {
            let c = cliff.cell_at(i);
            let mut gap: f64 = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (r, cc) = (c.row as i64 + dr, c.col as i64 + dc);
                    if (0..6).contains(&r) && (0..6).contains(&cc) {
                        gap = gap.max((elev[(r * 6 + cc) as usize] - elev[i]).abs());
                    }
                }
            }
            let expect = if gap >= 0.2 { 1.0 } else { 0.0 };
            assert_eq!(f.mu[i], expect, "cell {c:?}");
        }
    }

    #[test]
    fn missing_cells_are_negative_obstacles() {
        let mut m = flat(4, 4, 0.25);
        m.set(layers::ELEVATION, CellIndex::new(2, 2), f64::NAN).unwrap();
        let f = compute_risk_factor(&m, &RiskFactorSpec::new(RiskFactorKind::Step, 1.0)).unwrap();
        assert_eq!(f.mu[m.index(CellIndex::new(2, 2))], 1.0);
        assert_eq!(f.mu[m.index(CellIndex::new(0, 0))], 0.0);
    }

    #[test]
    fn tipover_on_thirty_degree_ramp() {
        let t = 30f64.to_radians().tan();
        let mut m = GridMap::new(8, 8, 0.25, [0.0, 0.0]).unwrap();
        let data = (0..m.len()).map(|i| m.world_of(m.cell_at(i))[0] * t).collect();
        m.insert_layer(layers::ELEVATION, data).unwrap();
        let spec = RiskFactorSpec::new(RiskFactorKind::Tipover, 1.0);
        assert!(matches!(compute_risk_factor(&m, &spec), Err(Error::Configuration(msg)) if msg.contains("normal_z")));
        m.compute_surface_normals(layers::ELEVATION).unwrap();
        let f = compute_risk_factor(&m, &spec).unwrap();
        // slope oracle from the analytic plane normal
        let n = [-30f64.to_radians().sin(), 0.0, 30f64.to_radians().cos()];
        let slope = n[2].acos().to_degrees();
        let expect = (slope / 45.0).clamp(0.0, 1.0);
        for r in 1..7 {
            for c in 1..7 {
                let v = f.mu[m.index(CellIndex::new(r, c))];
                assert!((v - expect).abs() < 1e-6, "{v} vs {expect}");
            }
        }
    }

    #[test]
    fn collision_and_contact_loss() {
        let mut m = flat(12, 12, 0.1);
        m.set(layers::ELEVATION, CellIndex::new(6, 6), 0.5).unwrap();
        let f = compute_risk_factor(&m, &RiskFactorSpec::new(RiskFactorKind::Collision, 1.0)).unwrap();
        assert_eq!(f.mu[m.index(CellIndex::new(6, 6))], 1.0);
        assert_eq!(f.mu[m.index(CellIndex::new(6, 8))], 1.0);
        let mid = f.mu[m.index(CellIndex::new(6, 10))];
        assert!(mid > 0.0 && mid < 1.0);
        assert_eq!(f.mu[m.index(CellIndex::new(0, 0))], 0.0);

        let c = compute_risk_factor(&m, &RiskFactorSpec::new(RiskFactorKind::ContactLoss, 1.0)).unwrap();
        assert!(c.mu[m.index(CellIndex::new(6, 7))] > 0.0);
        assert_eq!(c.mu[m.index(CellIndex::new(1, 1))], 0.0);
    }

    #[test]
    fn slippage_and_sensor_uncertainty() {
        let mut m = flat(5, 5, 1.0);
        let spec = RiskFactorSpec::new(RiskFactorKind::Slippage, 1.0);
        assert!(matches!(compute_risk_factor(&m, &spec), Err(Error::Configuration(msg)) if msg.contains("slippage")));
        m.add_layer("slippage", 0.25);
        let f = compute_risk_factor(&m, &spec).unwrap();
        assert!(f.mu.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut s = RiskFactorSpec::new(RiskFactorKind::SensorUncertainty, 1.0);
        s.params.sigma_per_meter = Some(0.1);
        let f = compute_risk_factor(&m, &s).unwrap();
        assert!(f.mu.iter().all(|&v| v == 0.0));
        assert!((f.sigma[m.index(CellIndex::new(0, 3))] - (0.01 + 0.3)).abs() < 1e-12);
        assert!((f.sigma[m.index(CellIndex::new(4, 3))] - (0.01 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn aggregation() {
        let a = RiskLayers { mu: vec![0.2; 3], sigma: vec![0.1; 3] };
        let b = RiskLayers { mu: vec![0.4; 3], sigma: vec![0.3; 3] };
        let one = aggregate_risk(&[(&a, 1.0)]).unwrap();
        assert_eq!(one, a);
        let ab = aggregate_risk(&[(&a, 0.5), (&b, 0.5)]).unwrap();
        assert!((ab.mu[0] - 0.3).abs() < 1e-15);
        assert!((ab.sigma[0] - 0.025f64.sqrt()).abs() < 1e-15);
        assert!(matches!(aggregate_risk(&[(&a, 0.7), (&b, 0.4)]), Err(Error::InvalidArgument(_))));
        let short = RiskLayers { mu: vec![0.0; 2], sigma: vec![0.0; 2] };
        assert!(matches!(aggregate_risk(&[(&a, 0.5), (&short, 0.5)]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn cvar_layer() {
        let mut m = flat(3, 3, 1.0);
        assert!(matches!(build_cvar_layer(&m, level(0.5)), Err(Error::Configuration(_))));
        m.add_layer(layers::RISK_MU, 0.1);
        m.add_layer(layers::RISK_SIGMA, 0.0);
        assert_eq!(build_cvar_layer(&m, level(0.9)).unwrap(), vec![0.1; 9]);
        m.add_layer(layers::RISK_SIGMA, 0.05);
        let hi = build_cvar_layer(&m, level(0.9)).unwrap();
        let lo = build_cvar_layer(&m, level(0.1)).unwrap();
        let expect = 0.1 + 0.05 * 1.754_983_319_324_868;
        assert!(hi.iter().all(|v| (v - expect).abs() < 1e-9));
        assert!(hi.iter().zip(&lo).all(|(h, l)| h >= l));
    }

    #[test]
    fn full_pipeline_stores_layers() {
        let mut m = flat(6, 6, 0.25);
        m.compute_surface_normals(layers::ELEVATION).unwrap();
        build_risk_map(&mut m, &default_factor_specs(), level(0.9)).unwrap();
        for name in ["step_mu", "tipover_sigma", "risk_mu", "risk_sigma", "cvar"] {
            assert!(m.has_layer(name), "{name}");
        }
        let mu = m.layer(layers::RISK_MU).unwrap();
        let cvar = m.layer(layers::CVAR).unwrap();
        assert!(mu.iter().zip(cvar).all(|(m, c)| c >= m));
    }

    proptest! {
        #[test]
        fn translation_and_homogeneity(mu in 0.0f64..1.0, sigma in 0.0f64..0.5, a in 0.01f64..0.99, c in 0.0f64..3.0, s in 0.01f64..5.0) {
            let l = level(a);
            let base = cvar_gaussian(RiskDistribution::new(mu, sigma).unwrap(), l);
            let shifted = cvar_gaussian(RiskDistribution::new(mu + c, sigma).unwrap(), l);
            prop_assert!((shifted - base - c).abs() < 1e-12);
            let scaled = cvar_gaussian(RiskDistribution::new(s * mu, s * sigma).unwrap(), l);
            prop_assert!((scaled - s * base).abs() < 1e-10 * (1.0 + s * base));
            prop_assert!(base >= mu);
            prop_assert_eq!(base == mu, sigma == 0.0);
        }

        #[test]
        fn monotone_in_alpha(mu in 0.0f64..1.0, sigma in 0.001f64..0.5, a in 0.01f64..0.98, da in 0.001f64..0.01) {
            let r = RiskDistribution::new(mu, sigma).unwrap();
            prop_assert!(cvar_gaussian(r, level(a)) < cvar_gaussian(r, level(a + da)));
        }

        #[test]
        fn step_risk_monotone_in_height(h in 0.0f64..0.4, extra in 0.0f64..0.3) {
            let mut m = flat(5, 5, 0.25);
            let spec = RiskFactorSpec::new(RiskFactorKind::Step, 1.0);
            let c = CellIndex::new(2, 2);
            m.set(layers::ELEVATION, c, h).unwrap();
            let before = compute_risk_factor(&m, &spec).unwrap().mu[m.index(c)];
            m.set(layers::ELEVATION, c, h + extra).unwrap();
            let after = compute_risk_factor(&m, &spec).unwrap().mu[m.index(c)];
            prop_assert!(after >= before);
        }

        #[test]
        fn tipover_risk_monotone_in_slope(deg in 0.0f64..60.0, extra in 0.0f64..20.0) {
            let spec = RiskFactorSpec::new(RiskFactorKind::Tipover, 1.0);
            let risk = |d: f64| {
                let mut m = GridMap::new(3, 3, 0.25, [0.0, 0.0]).unwrap();
                let t = d.to_radians().tan();
                let data = (0..9).map(|i| m.world_of(m.cell_at(i))[0] * t).collect();
                m.insert_layer(layers::ELEVATION, data).unwrap();
                m.compute_surface_normals(layers::ELEVATION).unwrap();
                compute_risk_factor(&m, &spec).unwrap().mu[4]
            };
            prop_assert!(risk(deg + extra) >= risk(deg) - 1e-12);
        }
    }
}
