//! Binary PPM (P6) rendering of risk maps with path and polygon overlays.

use std::path::Path;

use crate::error::{Error, Result};
use crate::gridmap::{GridMap, Point2};
use crate::polygeom::ConvexPolygon;
use crate::risk::{cvar_raster, RiskLevel};

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct RenderStyle {
    /// CVaR at or below this is drawn white.
    pub safe_max: f64,
    /// Above `safe_max` up to this, yellow fading to red; black above.
    pub moderate_max: f64,
    pub pixels_per_cell: usize,
    pub missing: Rgb,
    pub path: Rgb,
    pub trajectory: Rgb,
    pub polygon: Rgb,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            safe_max: 0.05,
            moderate_max: 0.5,
            pixels_per_cell: 4,
            missing: [128, 128, 128],
            path: [0, 0, 255],
            trajectory: [0, 170, 0],
            polygon: [255, 0, 255],
        }
    }
}

impl RenderStyle {
    pub fn validate(&self) -> Result<()> {
        if !(self.safe_max < self.moderate_max) || self.pixels_per_cell == 0 {
            return Err(Error::Configuration(
                "render: thresholds must increase and pixels_per_cell must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn color(&self, cvar: f64) -> Rgb {
        if cvar.is_nan() {
            self.missing
        } else if cvar <= self.safe_max {
            [255, 255, 255]
        } else if cvar <= self.moderate_max {
            let t = (cvar - self.safe_max) / (self.moderate_max - self.safe_max);
            [255, (255.0 * (1.0 - t)).round() as u8, 0]
        } else {
            [0, 0, 0]
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overlays<'a> {
    pub paths: Vec<&'a [Point2]>,
    pub trajectories: Vec<Vec<Point2>>,
    pub polygons: Vec<&'a ConvexPolygon>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = y as usize * self.width + x as usize;
            self.pixels[i] = c;
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb) {
        let n = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            self.put(
                (a.0 + t * (b.0 - a.0)).floor() as i64,
                (a.1 + t * (b.1 - a.1)).floor() as i64,
                c,
            );
        }
    }
}

/// Draws each cell's CVaR class, then overlays. North (+y) is up.
pub fn render_map(map: &GridMap, level: RiskLevel, overlays: &Overlays, style: &RenderStyle) -> Result<Image> {
    style.validate()?;
    let cvar = cvar_raster(map, level)?;
    let s = style.pixels_per_cell;
    let (w, h) = (map.width() * s, map.height() * s);
    let mut img = Image {
        width: w,
        height: h,
        pixels: vec![[0, 0, 0]; w * h],
    };
    for (i, v) in cvar.iter().enumerate() {
        let cell = map.cell_at(i);
        let c = style.color(*v);
        let top = (map.height() - 1 - cell.row) * s;
        for dy in 0..s {
            for dx in 0..s {
                img.pixels[(top + dy) * w + cell.col * s + dx] = c;
            }
        }
    }
    let (lo, _) = map.extent();
    let res = map.resolution();
    let to_px = |p: Point2| (((p[0] - lo[0]) / res) * s as f64, h as f64 - ((p[1] - lo[1]) / res) * s as f64);
    let polyline = |img: &mut Image, pts: &[Point2], c: Rgb, closed: bool| {
        for pair in pts.windows(2) {
            img.line(to_px(pair[0]), to_px(pair[1]), c);
        }
        if closed && pts.len() > 2 {
            img.line(to_px(pts[pts.len() - 1]), to_px(pts[0]), c);
        }
        if pts.len() == 1 {
            img.line(to_px(pts[0]), to_px(pts[0]), c);
        }
    };
    for poly in &overlays.polygons {
        polyline(&mut img, poly.vertices(), style.polygon, true);
    }
    for path in &overlays.paths {
        polyline(&mut img, path, style.path, false);
    }
    for traj in &overlays.trajectories {
        polyline(&mut img, traj, style.trajectory, false);
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmap::{layers, CellIndex};

    fn map_with(values: Vec<f64>, w: usize, h: usize) -> GridMap {
        let mut m = GridMap::new(w, h, 0.5, [0.0, 0.0]).unwrap();
        m.insert_layer(layers::CVAR, values).unwrap();
        m
    }

    #[test]
    fn risk_classes() {
        let st = RenderStyle::default();
        assert_eq!(st.color(0.0), [255, 255, 255]);
        assert_eq!(st.color(0.05), [255, 255, 255]);
        assert_eq!(st.color(0.5), [255, 0, 0]);
        assert_eq!(st.color(0.6), [0, 0, 0]);
        assert_eq!(st.color(f64::NAN), st.missing);
        let mid = st.color(0.275);
        assert_eq!(mid[0], 255);
        assert!((127..=128).contains(&mid[1]));
    }

    #[test]
    fn zero_map_is_white_and_layout_is_north_up() {
        let level = RiskLevel::new(0.5).unwrap();
        let img = render_map(&map_with(vec![0.0; 12], 4, 3), level, &Overlays::default(), &RenderStyle::default()).unwrap();
        assert_eq!((img.width, img.height), (16, 12));
        assert!(img.pixels.iter().all(|p| *p == [255, 255, 255]));

        let mut m = map_with(vec![0.0; 12], 4, 3);
        m.set(layers::CVAR, CellIndex::new(2, 0), 0.6).unwrap();
        let st = RenderStyle {
            pixels_per_cell: 1,
            ..RenderStyle::default()
        };
        let img = render_map(&m, level, &Overlays::default(), &st).unwrap();
        // top-left pixel is the highest row
        assert_eq!(img.pixels[0], [0, 0, 0]);
        assert_eq!(img.pixels.iter().filter(|p| **p == [0, 0, 0]).count(), 1);
        let ppm = img.to_ppm();
        assert!(ppm.starts_with(b"P6\n4 3\n255\n"));
        assert_eq!(ppm.len(), 11 + 36);
    }

    #[test]
    fn overlays_and_errors() {
        let level = RiskLevel::new(0.5).unwrap();
        let m = map_with(vec![0.0; 100], 10, 10);
        let path = [[0.0, 0.0], [4.5, 4.5]];
        let ov = Overlays {
            paths: vec![&path[..]],
            ..Overlays::default()
        };
        let a = render_map(&m, level, &ov, &RenderStyle::default()).unwrap();
        let b = render_map(&m, level, &ov, &RenderStyle::default()).unwrap();
        assert_eq!(a.to_ppm(), b.to_ppm());
        assert!(a.pixels.iter().filter(|p| **p == [0, 0, 255]).count() > 20);

        let bare = GridMap::new(3, 3, 1.0, [0.0, 0.0]).unwrap();
        assert_eq!(render_map(&bare, level, &ov, &RenderStyle::default()).unwrap_err().kind(), "configuration");
        let bad = RenderStyle {
            safe_max: 0.6,
            ..RenderStyle::default()
        };
        assert!(bad.validate().is_err());
    }
}
