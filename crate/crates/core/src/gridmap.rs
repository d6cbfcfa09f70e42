//! Multi-layer 2.5D grid map.
//!
//! Layers are row-major rasters (`row` = y, `col` = x) sharing one geometry.
//! Missing measurements are stored as `NaN`. Cell `(0, 0)` is centered on
//! `origin`, so the center of cell `(row, col)` is
//! `origin + resolution * (col, row)`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// World-frame planar point in meters.
pub type Point2 = [f64; 2];

/// Reserved layer names.
pub mod layers {
    pub const ELEVATION: &str = "elevation";
    pub const NORMAL_X: &str = "normal_x";
    pub const NORMAL_Y: &str = "normal_y";
    pub const NORMAL_Z: &str = "normal_z";
    pub const RISK_MU: &str = "risk_mu";
    pub const RISK_SIGMA: &str = "risk_sigma";
    pub const CVAR: &str = "cvar";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

impl CellIndex {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    resolution: f64,
    origin: Point2,
    width: usize,
    height: usize,
    layers: BTreeMap<String, Vec<f64>>,
}

impl GridMap {
    /// Creates an empty map with no layers.
    pub fn new(width: usize, height: usize, resolution: f64, origin: Point2) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "map dimensions must be positive, got {width}x{height}"
            )));
        }
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "resolution must be positive and finite, got {resolution}"
            )));
        }
        if !origin[0].is_finite() || !origin[1].is_finite() {
            return Err(Error::InvalidArgument("origin must be finite".into()));
        }
        Ok(Self {
            resolution,
            origin,
            width,
            height,
            layers: BTreeMap::new(),
        })
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Point2 {
        self.origin
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index of a cell in the row-major layer storage.
    pub fn index(&self, cell: CellIndex) -> usize {
        debug_assert!(cell.row < self.height && cell.col < self.width);
        cell.row * self.width + cell.col
    }

    pub fn cell_at(&self, index: usize) -> CellIndex {
        CellIndex::new(index / self.width, index % self.width)
    }

    pub fn world_of(&self, cell: CellIndex) -> Point2 {
        [
            self.origin[0] + self.resolution * cell.col as f64,
            self.origin[1] + self.resolution * cell.row as f64,
        ]
    }

    /// World-frame bounding box `[min, max]` covered by the cells.
    pub fn extent(&self) -> (Point2, Point2) {
        let h = 0.5 * self.resolution;
        (
            [self.origin[0] - h, self.origin[1] - h],
            [
                self.origin[0] + self.resolution * (self.width - 1) as f64 + h,
                self.origin[1] + self.resolution * (self.height - 1) as f64 + h,
            ],
        )
    }

    pub fn contains(&self, p: Point2) -> bool {
        let (lo, hi) = self.extent();
        p[0] >= lo[0] && p[0] <= hi[0] && p[1] >= lo[1] && p[1] <= hi[1]
    }

    /// Cell whose footprint contains `p`, if any.
    pub fn cell_of(&self, p: Point2) -> Option<CellIndex> {
        if !self.contains(p) {
            return None;
        }
        let col = ((p[0] - self.origin[0]) / self.resolution).round();
        let row = ((p[1] - self.origin[1]) / self.resolution).round();
        let col = (col.max(0.0) as usize).min(self.width - 1);
        let row = (row.max(0.0) as usize).min(self.height - 1);
        Some(CellIndex::new(row, col))
    }

    pub fn require_cell(&self, p: Point2) -> Result<CellIndex> {
        self.cell_of(p).ok_or_else(|| out_of_extent(p))
    }

    pub fn has_layer(&self, name: &str) -> bool {
        self.layers.contains_key(name)
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn layer(&self, name: &str) -> Result<&[f64]> {
        self.layers
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Configuration(format!("missing layer '{name}'")))
    }

    pub fn layer_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        self.layers
            .get_mut(name)
            .map(Vec::as_mut_slice)
            .ok_or_else(|| Error::Configuration(format!("missing layer '{name}'")))
    }

    /// Adds (or replaces) a layer filled with `value`.
    pub fn add_layer(&mut self, name: &str, value: f64) {
        self.layers.insert(name.to_owned(), vec![value; self.len()]);
    }

    /// Inserts (or replaces) a layer from raw row-major data.
    pub fn insert_layer(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        if data.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "layer '{name}' has {} values, map has {} cells",
                data.len(),
                self.len()
            )));
        }
        self.layers.insert(name.to_owned(), data);
        Ok(())
    }

    pub fn remove_layer(&mut self, name: &str) -> Option<Vec<f64>> {
        self.layers.remove(name)
    }

    pub fn get(&self, name: &str, cell: CellIndex) -> Result<f64> {
        Ok(self.layer(name)?[self.index(cell)])
    }

    pub fn set(&mut self, name: &str, cell: CellIndex, value: f64) -> Result<()> {
        let i = self.index(cell);
        self.layer_mut(name)?[i] = value;
        Ok(())
    }

    /// Bilinear interpolation of `name` at `p`.
    ///
    /// Returns `Ok(None)` when every contributing cell is missing. When only
    /// some are missing the nearest non-missing contributor is returned.
    pub fn sample(&self, name: &str, p: Point2) -> Result<Option<f64>> {
        let data = self.layer(name)?;
        if !self.contains(p) {
            return Err(out_of_extent(p));
        }
        Ok(self.sample_in(data, p))
    }

    /// Bilinear sampling of an arbitrary raster that shares this map's
    /// geometry. Points outside the extent are clamped to the border.
    pub fn sample_in(&self, data: &[f64], p: Point2) -> Option<f64> {
        let (c0, c1, tx) = axis_weights(p[0], self.origin[0], self.resolution, self.width);
        let (r0, r1, ty) = axis_weights(p[1], self.origin[1], self.resolution, self.height);
        let corners = [
            (r0, c0, (1.0 - tx) * (1.0 - ty)),
            (r0, c1, tx * (1.0 - ty)),
            (r1, c0, (1.0 - tx) * ty),
            (r1, c1, tx * ty),
        ];
        let values = corners.map(|(r, c, _)| data[r * self.width + c]);
        if values.iter().all(|v| v.is_finite()) {
            let mut acc = 0.0;
            for ((_, _, w), v) in corners.iter().zip(values) {
                acc += w * v;
            }
            return Some(acc);
        }
        let mut best: Option<(f64, f64)> = None;
        for ((r, c, _), v) in corners.iter().zip(values) {
            if !v.is_finite() {
                continue;
            }
            let center = self.world_of(CellIndex::new(*r, *c));
            let d = (center[0] - p[0]).powi(2) + (center[1] - p[1]).powi(2);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, v));
            }
        }
        best.map(|(_, v)| v)
    }

    /// Computes unit surface normals from central differences of the
    /// elevation layer and stores them in `normal_x/y/z`.
    pub fn compute_surface_normals(&mut self, elevation_layer: &str) -> Result<()> {
        let h = self.layer(elevation_layer)?;
        let (w, ht, res) = (self.width, self.height, self.resolution);
        let mut nx = vec![0.0; self.len()];
        let mut ny = vec![0.0; self.len()];
        let mut nz = vec![1.0; self.len()];
        for row in 0..ht {
            for col in 0..w {
                let i = row * w + col;
                let center = h[i];
                if !center.is_finite() {
                    continue;
                }
                let at = |r: usize, c: usize| {
                    let v = h[r * w + c];
                    if v.is_finite() { v } else { center }
                };
                let dx = if w == 1 {
                    0.0
                } else if col == 0 {
                    (at(row, 1) - center) / res
                } else if col == w - 1 {
                    (center - at(row, col - 1)) / res
                } else {
                    (at(row, col + 1) - at(row, col - 1)) / (2.0 * res)
                };
                let dy = if ht == 1 {
                    0.0
                } else if row == 0 {
                    (at(1, col) - center) / res
                } else if row == ht - 1 {
                    (center - at(row - 1, col)) / res
                } else {
                    (at(row + 1, col) - at(row - 1, col)) / (2.0 * res)
                };
                let norm = (dx * dx + dy * dy + 1.0).sqrt();
                nx[i] = -dx / norm;
                ny[i] = -dy / norm;
                nz[i] = 1.0 / norm;
            }
        }
        self.layers.insert(layers::NORMAL_X.into(), nx);
        self.layers.insert(layers::NORMAL_Y.into(), ny);
        self.layers.insert(layers::NORMAL_Z.into(), nz);
        Ok(())
    }

    /// Interpolated world-frame surface normal at `p`, renormalized.
    pub fn normal_at(&self, p: Point2) -> Result<[f64; 3]> {
        if !self.contains(p) {
            return Err(out_of_extent(p));
        }
        let comps = [
            self.sample_in(self.layer(layers::NORMAL_X)?, p).unwrap_or(0.0),
            self.sample_in(self.layer(layers::NORMAL_Y)?, p).unwrap_or(0.0),
            self.sample_in(self.layer(layers::NORMAL_Z)?, p).unwrap_or(1.0),
        ];
        let norm = (comps[0] * comps[0] + comps[1] * comps[1] + comps[2] * comps[2]).sqrt();
        if norm <= f64::EPSILON {
            return Ok([0.0, 0.0, 1.0]);
        }
        Ok(comps.map(|c| c / norm))
    }

    /// `d n / d p` as a 3x2 matrix (rows: n_x, n_y, n_z; columns: p_x, p_y),
    /// from central differences of [`GridMap::normal_at`] with a half-cell step.
    pub fn elevation_normal_jacobian(&self, p: Point2) -> Result<[[f64; 2]; 3]> {
        self.normal_jacobian_with_step(p, 0.5 * self.resolution)
    }

    pub fn normal_jacobian_with_step(&self, p: Point2, step: f64) -> Result<[[f64; 2]; 3]> {
        if !self.contains(p) {
            return Err(out_of_extent(p));
        }
        let (lo, hi) = self.extent();
        let mut jac = [[0.0; 2]; 3];
        for axis in 0..2 {
            let mut plus = p;
            let mut minus = p;
            plus[axis] = (p[axis] + step).min(hi[axis]);
            minus[axis] = (p[axis] - step).max(lo[axis]);
            let span = plus[axis] - minus[axis];
            if span <= 0.0 {
                continue;
            }
            let np = self.normal_at(plus)?;
            let nm = self.normal_at(minus)?;
            for (row, (a, b)) in jac.iter_mut().zip(np.iter().zip(nm.iter())) {
                row[axis] = (a - b) / span;
            }
        }
        Ok(jac)
    }

    pub fn to_json(&self) -> String {
        let file = MapFile {
            version: 1,
            resolution: self.resolution,
            origin: self.origin,
            width: self.width,
            height: self.height,
            layers: self
                .layers
                .iter()
                .map(|(k, v)| {
                    let vals = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
                    (k.clone(), vals)
                })
                .collect(),
        };
        // Serializing plain numbers and strings cannot fail.
        serde_json::to_string_pretty(&file).expect("map serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MapFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            context: format!("map file line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        if file.version != 1 {
            return Err(Error::Parse {
                context: "map file field 'version'".into(),
                message: format!("unsupported version {}", file.version),
            });
        }
        let mut map = GridMap::new(file.width, file.height, file.resolution, file.origin)
            .map_err(|e| Error::Parse {
                context: "map file header".into(),
                message: e.to_string(),
            })?;
        for (name, values) in file.layers {
            if values.len() != map.len() {
                return Err(Error::Parse {
                    context: format!("map file layer '{name}'"),
                    message: format!("expected {} values, found {}", map.len(), values.len()),
                });
            }
            let data = values.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
            map.layers.insert(name, data);
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    version: u32,
    resolution: f64,
    origin: Point2,
    width: usize,
    height: usize,
    layers: BTreeMap<String, Vec<Option<f64>>>,
}

fn out_of_extent(p: Point2) -> Error {
    Error::OutOfBounds(format!("point ({:.3}, {:.3}) outside map extent", p[0], p[1]))
}

/// Lower/upper cell and interpolation weight along one axis.
fn axis_weights(x: f64, origin: f64, res: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let f = (x - origin) / res;
    let i0 = (f.floor().max(0.0) as usize).min(n - 2);
    let t = (f - i0 as f64).clamp(0.0, 1.0);
    (i0, i0 + 1, t)
}
