//! Image grid and per-spectrum scan geometries.
//!
//! Pixels are indexed row-major, `i = row * nx + col`, with row 0 at the
//! top of the image (`y_max`) and column 0 at `x_min`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const TWO_PI: f64 = 2.0 * PI;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub nx: usize,
    pub ny: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl ImageGrid {
    pub fn new(nx: usize, ny: usize, x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidGrid(format!("pixel counts must be >= 1, got {nx}x{ny}")));
        }
        if !(x_max > x_min) || !(y_max > y_min) {
            return Err(Error::InvalidGrid(format!(
                "empty extent [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        if ![x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGrid("extent must be finite".into()));
        }
        Ok(Self {
            nx,
            ny,
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    /// Square `n x n` grid on `[-half, half]^2`.
    pub fn square(n: usize, half: f64) -> Result<Self> {
        Self::new(n, n, -half, half, -half, half)
    }

    pub fn n_pixels(&self) -> usize {
        self.nx * self.ny
    }

    pub fn pixel_width(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn pixel_height(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    pub fn pixel_area(&self) -> f64 {
        self.pixel_width() * self.pixel_height()
    }

    pub fn diagonal(&self) -> f64 {
        (self.x_max - self.x_min).hypot(self.y_max - self.y_min)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.nx + col
    }

    /// Physical coordinates of the center of pixel `i`.
    pub fn pixel_center(&self, i: usize) -> (f64, f64) {
        let (row, col) = (i / self.nx, i % self.nx);
        (
            self.x_min + (col as f64 + 0.5) * self.pixel_width(),
            self.y_max - (row as f64 + 0.5) * self.pixel_height(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelGeometry {
    angles: Vec<f64>,
    offsets: Vec<f64>,
    angle_span: f64,
}

impl ParallelGeometry {
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn angle_span(&self) -> f64 {
        self.angle_span
    }

    /// Uniform spacing between detector offsets; the full interval width for a
    /// single detector.
    pub fn detector_spacing(&self) -> f64 {
        match self.offsets.len() {
            1 => 1.0,
            n => (self.offsets[n - 1] - self.offsets[0]) / (n - 1) as f64,
        }
    }
}

/// `n_views` angles `angle_start + i * angle_span / n_views` (half-open) and
/// `n_det` offsets uniformly covering the closed interval `[det_lo, det_hi]`.
pub fn make_parallel_geometry(
    n_views: usize,
    angle_start: f64,
    angle_span: f64,
    n_det: usize,
    det_lo: f64,
    det_hi: f64,
) -> Result<ParallelGeometry> {
    if n_views == 0 || n_det == 0 {
        return Err(Error::InvalidGeometry(format!(
            "view and detector counts must be >= 1, got {n_views} views, {n_det} detectors"
        )));
    }
    if !(det_hi > det_lo) {
        return Err(Error::InvalidGeometry(format!("empty detector interval [{det_lo}, {det_hi}]")));
    }
    if !(angle_span > 0.0) || !angle_span.is_finite() || !angle_start.is_finite() {
        return Err(Error::InvalidGeometry(format!("invalid angular range start {angle_start}, span {angle_span}")));
    }
    let step = angle_span / n_views as f64;
    let angles = (0..n_views)
        .map(|i| wrap_angle(angle_start + i as f64 * step))
        .collect();
    let offsets = if n_det == 1 {
        vec![0.5 * (det_lo + det_hi)]
    } else {
        let spacing = (det_hi - det_lo) / (n_det - 1) as f64;
        (0..n_det).map(|k| det_lo + k as f64 * spacing).collect()
    };
    Ok(ParallelGeometry {
        angles,
        offsets,
        angle_span,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FanGeometry {
    angles: Vec<f64>,
    angle_span: f64,
    source_to_center: f64,
    source_to_detector: f64,
    n_det: usize,
    det_width: f64,
}

impl FanGeometry {
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn angle_span(&self) -> f64 {
        self.angle_span
    }

    pub fn source_to_center(&self) -> f64 {
        self.source_to_center
    }

    pub fn source_to_detector(&self) -> f64 {
        self.source_to_detector
    }

    pub fn n_det(&self) -> usize {
        self.n_det
    }

    pub fn det_width(&self) -> f64 {
        self.det_width
    }

    /// Signed position of detector cell `k` along the flat bank, measured
    /// from the bank center.
    pub fn detector_position(&self, k: usize) -> f64 {
        (k as f64 - 0.5 * (self.n_det as f64 - 1.0)) * self.det_width
    }

    fn source(&self, beta: f64) -> [f64; 2] {
        [-self.source_to_center * beta.cos(), -self.source_to_center * beta.sin()]
    }
}

/// Equidistant flat-detector fan beam. At source angle `beta` the source sits
/// at `-source_to_center * (cos beta, sin beta)`, the central ray points along
/// `(cos beta, sin beta)` and the detector axis is `(-sin beta, cos beta)`.
pub fn make_fan_geometry(
    n_views: usize,
    angle_start: f64,
    angle_span: f64,
    source_to_center: f64,
    source_to_detector: f64,
    n_det: usize,
    det_width: f64,
) -> Result<FanGeometry> {
    if n_views == 0 || n_det == 0 {
        return Err(Error::InvalidGeometry(format!(
            "view and detector counts must be >= 1, got {n_views} views, {n_det} detectors"
        )));
    }
    if !(source_to_center > 0.0) || !(source_to_detector > source_to_center) {
        return Err(Error::InvalidGeometry(format!(
            "need source-to-detector > source-to-center > 0, got {source_to_detector} and {source_to_center}"
        )));
    }
    if !(det_width > 0.0) {
        return Err(Error::InvalidGeometry(format!("detector width must be > 0, got {det_width}")));
    }
    if !(angle_span > 0.0) || !angle_span.is_finite() || !angle_start.is_finite() {
        return Err(Error::InvalidGeometry(format!("invalid angular range start {angle_start}, span {angle_span}")));
    }
    let step = angle_span / n_views as f64;
    Ok(FanGeometry {
        angles: (0..n_views).map(|i| wrap_angle(angle_start + i as f64 * step)).collect(),
        angle_span,
        source_to_center,
        source_to_detector,
        n_det,
        det_width,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScanGeometry {
    Parallel(ParallelGeometry),
    Fan(FanGeometry),
}

impl From<ParallelGeometry> for ScanGeometry {
    fn from(g: ParallelGeometry) -> Self {
        ScanGeometry::Parallel(g)
    }
}

impl From<FanGeometry> for ScanGeometry {
    fn from(g: FanGeometry) -> Self {
        ScanGeometry::Fan(g)
    }
}

impl ScanGeometry {
    pub fn n_views(&self) -> usize {
        match self {
            ScanGeometry::Parallel(g) => g.angles.len(),
            ScanGeometry::Fan(g) => g.angles.len(),
        }
    }

    pub fn n_det(&self) -> usize {
        match self {
            ScanGeometry::Parallel(g) => g.offsets.len(),
            ScanGeometry::Fan(g) => g.n_det,
        }
    }

    pub fn n_rays(&self) -> usize {
        self.n_views() * self.n_det()
    }

    pub fn angles(&self) -> &[f64] {
        match self {
            ScanGeometry::Parallel(g) => &g.angles,
            ScanGeometry::Fan(g) => &g.angles,
        }
    }

    /// Ray for (view, detector).
    pub fn ray(&self, view: usize, det: usize) -> Ray {
        match self {
            ScanGeometry::Parallel(g) => {
                let (s, c) = g.angles[view].sin_cos();
                let x = g.offsets[det];
                Ray {
                    origin: [-x * s, x * c],
                    direction: [c, s],
                    view,
                    detector: det,
                }
            }
            ScanGeometry::Fan(g) => {
                let beta = g.angles[view];
                let (s, c) = beta.sin_cos();
                let src = g.source(beta);
                let u = g.detector_position(det);
                let along = g.source_to_detector - g.source_to_center;
                let target = [along * c - u * s, along * s + u * c];
                let (dx, dy) = (target[0] - src[0], target[1] - src[1]);
                let norm = dx.hypot(dy);
                Ray {
                    origin: src,
                    direction: [dx / norm, dy / norm],
                    view,
                    detector: det,
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 2],
    pub direction: [f64; 2],
    pub view: usize,
    pub detector: usize,
}

/// All rays of a geometry, view-major then detector.
pub fn enumerate_rays(geometry: &ScanGeometry) -> Vec<Ray> {
    let n_det = geometry.n_det();
    (0..geometry.n_views())
        .flat_map(|v| (0..n_det).map(move |k| (v, k)))
        .map(|(v, k)| geometry.ray(v, k))
        .collect()
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TWO_PI);
    // rem_euclid can round up to exactly 2*pi for tiny negative inputs.
    if w >= TWO_PI {
        0.0
    } else {
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_parallel_angles() {
        let g = make_parallel_geometry(384, 0.0, PI, 384, -7.05, 7.05).unwrap();
        assert_eq!(g.angles().len(), 384);
        assert_eq!(g.angles()[0], 0.0);
        assert!((g.angles()[1] - PI / 384.0).abs() < 1e-15);
        assert!((g.offsets()[0] + 7.05).abs() < 1e-15);
        assert!((g.offsets()[383] - 7.05).abs() < 1e-12);

        let shifted = make_parallel_geometry(384, PI / 768.0, PI, 384, -7.05, 7.05).unwrap();
        assert!((shifted.angles()[0] - PI / 768.0).abs() < 1e-15);
        for a in g.angles() {
            for b in shifted.angles() {
                assert!((a - b).abs() > 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_single_ray() {
        let g = ScanGeometry::from(make_parallel_geometry(1, 0.0, PI, 1, -1.0, 1.0).unwrap());
        let rays = enumerate_rays(&g);
        assert_eq!(rays.len(), 1);
        assert_eq!(rays[0].direction, [1.0, 0.0]);
        assert_eq!(rays[0].origin[1], 0.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_parallel_geometry(0, 0.0, PI, 4, -1.0, 1.0).is_err());
        assert!(make_parallel_geometry(4, 0.0, PI, 0, -1.0, 1.0).is_err());
        assert!(make_parallel_geometry(4, 0.0, PI, 4, 1.0, 1.0).is_err());
        assert!(make_parallel_geometry(4, 0.0, 0.0, 4, -1.0, 1.0).is_err());
        assert!(make_fan_geometry(4, 0.0, 2.0 * PI, 30.0, 20.0, 4, 0.1).is_err());
        assert!(make_fan_geometry(4, 0.0, 2.0 * PI, 30.0, 60.0, 4, 0.0).is_err());
        assert!(ImageGrid::new(0, 4, -1.0, 1.0, -1.0, 1.0).is_err());
        assert!(ImageGrid::new(4, 4, 1.0, -1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn view_major_ordering() {
        let g = ScanGeometry::from(make_parallel_geometry(2, 0.0, PI, 3, -1.0, 1.0).unwrap());
        let rays = enumerate_rays(&g);
        let order: Vec<_> = rays.iter().map(|r| (r.view, r.detector)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
    }

    #[test]
    fn parallel_axis_aligned_ray() {
        let g = ScanGeometry::from(make_parallel_geometry(1, 0.0, PI, 3, -1.0, 1.0).unwrap());
        let r = g.ray(0, 1);
        assert_eq!(r.origin, [0.0, 0.0]);
        assert_eq!(r.direction, [1.0, 0.0]);
    }

    #[test]
    fn fan_center_ray_through_origin() {
        // Odd detector count puts a cell exactly at the bank center.
        let fan = make_fan_geometry(8, 0.3, 2.0 * PI, 30.0, 60.0, 5, 0.2).unwrap();
        let g = ScanGeometry::from(fan);
        for view in 0..8 {
            let r = g.ray(view, 2);
            // Independent check: distance from origin to the line through the
            // source along the direction, via the 2D cross product.
            let cross = r.origin[0] * r.direction[1] - r.origin[1] * r.direction[0];
            assert!(cross.abs() < 1e-12, "view {view}: distance {cross}");
            // Points from the source toward the origin.
            let dot = -(r.origin[0] * r.direction[0] + r.origin[1] * r.direction[1]);
            assert!((dot - 30.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_directions_and_determinism() {
        let fan = ScanGeometry::from(make_fan_geometry(16, 0.0, 2.0 * PI, 30.0, 60.0, 33, 0.15).unwrap());
        let par = ScanGeometry::from(make_parallel_geometry(17, 0.1, PI, 9, -3.0, 3.0).unwrap());
        for g in [&fan, &par] {
            let a = enumerate_rays(g);
            let b = enumerate_rays(g);
            assert_eq!(a, b);
            for r in &a {
                let n = r.direction[0].hypot(r.direction[1]);
                assert!((n - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn half_view_offset_geometries_share_no_ray() {
        let n = 24;
        let a = ScanGeometry::from(make_parallel_geometry(n, 0.0, PI, 11, -2.0, 2.0).unwrap());
        let b = ScanGeometry::from(make_parallel_geometry(n, PI / (2.0 * n as f64), PI, 11, -2.0, 2.0).unwrap());
        let ra = enumerate_rays(&a);
        let rb = enumerate_rays(&b);
        for r in &ra {
            for s in &rb {
                let same_dir = (r.direction[0] - s.direction[0]).abs() < 1e-12
                    && (r.direction[1] - s.direction[1]).abs() < 1e-12;
                let same_line = (r.origin[0] - s.origin[0]).abs() < 1e-12
                    && (r.origin[1] - s.origin[1]).abs() < 1e-12;
                assert!(!(same_dir && same_line));
            }
        }
    }

    #[test]
    fn pixel_centers_follow_row_major_top_down() {
        let grid = ImageGrid::new(4, 2, 0.0, 4.0, 0.0, 2.0).unwrap();
        assert_eq!(grid.pixel_center(0), (0.5, 1.5));
        assert_eq!(grid.pixel_center(3), (3.5, 1.5));
        assert_eq!(grid.pixel_center(4), (0.5, 0.5));
    }
}
