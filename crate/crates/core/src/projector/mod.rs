//! Linear tomography substrate: exact ray/pixel intersection lengths (the rows
//! of the projection matrix), forward and adjoint application, filtered
//! backprojection and iterative approximate inverses.

mod cg;
mod fbp;

pub use cg::{approx_inverse, cgls, ApproxInverse, InverseMethod, InverseStatus};
pub use fbp::{fbp, ramp_kernel, FbpOperator};

use rayon::prelude::*;

use crate::error::{check_len, Result};
use crate::geometry::{enumerate_rays, ImageGrid, Ray, ScanGeometry};

/// Rays per parallel work item. Fixed so reductions are independent of the
/// thread count.
const RAY_CHUNK: usize = 2048;

/// Default cap on cached nonzeros (about 12 bytes each).
pub const DEFAULT_CACHE_ENTRIES: usize = 64_000_000;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseRow {
    pub indices: Vec<usize>,
    pub lengths: Vec<f64>,
}

impl SparseRow {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dot(&self, image: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.lengths)
            .map(|(&i, &l)| l * image[i])
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.lengths.iter().map(|l| l * l).sum()
    }

    pub fn total_length(&self) -> f64 {
        self.lengths.iter().sum()
    }
}

/// Per-ray measurements of one scan, view-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub values: Vec<f64>,
    pub n_views: usize,
    pub n_det: usize,
}

impl Sinogram {
    pub fn zeros(geometry: &ScanGeometry) -> Self {
        Self {
            values: vec![0.0; geometry.n_rays()],
            n_views: geometry.n_views(),
            n_det: geometry.n_det(),
        }
    }

    pub fn from_values(geometry: &ScanGeometry, values: Vec<f64>) -> Result<Self> {
        check_len("sinogram", geometry.n_rays(), values.len())?;
        Ok(Self {
            values,
            n_views: geometry.n_views(),
            n_det: geometry.n_det(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn view(&self, v: usize) -> &[f64] {
        &self.values[v * self.n_det..(v + 1) * self.n_det]
    }

    pub(crate) fn check(&self, geometry: &ScanGeometry) -> Result<()> {
        check_len("sinogram views", geometry.n_views(), self.n_views)?;
        check_len("sinogram detectors", geometry.n_det(), self.n_det)?;
        check_len("sinogram", geometry.n_rays(), self.values.len())
    }
}

const AXIS_EPS: f64 = 1e-14;

/// Visit every pixel crossed by the (infinite) line of `ray`, with its exact
/// intersection length. Cells are identified by the midpoint of each segment
/// between consecutive grid-line crossings, so corner crossings and rays lying
/// on grid lines are resolved deterministically and zero-length pieces are
/// dropped.
pub(crate) fn visit_ray<F: FnMut(usize, f64)>(ray: &Ray, grid: &ImageGrid, mut visit: F) {
    let [ox, oy] = ray.origin;
    let [dx, dy] = ray.direction;
    let (w, h) = (grid.pixel_width(), grid.pixel_height());

    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let x_moves = dx.abs() > AXIS_EPS;
    let y_moves = dy.abs() > AXIS_EPS;
    if x_moves {
        let a = (grid.x_min - ox) / dx;
        let b = (grid.x_max - ox) / dx;
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    } else if ox < grid.x_min || ox > grid.x_max {
        return;
    }
    if y_moves {
        let a = (grid.y_min - oy) / dy;
        let b = (grid.y_max - oy) / dy;
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    } else if oy < grid.y_min || oy > grid.y_max {
        return;
    }
    let min_len = 1e-13 * (w + h);
    if !(t1 - t0 > min_len) {
        return;
    }

    // Index of the next vertical (x) and horizontal (y) grid line ahead.
    let x_start = ox + t0 * dx;
    let y_start = oy + t0 * dy;
    let (mut kx, step_x) = next_line(x_start, grid.x_min, w, dx, grid.nx);
    let (mut ky, step_y) = next_line(y_start, grid.y_min, h, dy, grid.ny);
    let inv_dx = if x_moves { 1.0 / dx } else { 0.0 };
    let inv_dy = if y_moves { 1.0 / dy } else { 0.0 };

    let mut t = t0;
    for _ in 0..(grid.nx + grid.ny + 4) {
        let tx = if x_moves && (0..=grid.nx as i64).contains(&kx) {
            (grid.x_min + kx as f64 * w - ox) * inv_dx
        } else {
            f64::INFINITY
        };
        let ty = if y_moves && (0..=grid.ny as i64).contains(&ky) {
            (grid.y_min + ky as f64 * h - oy) * inv_dy
        } else {
            f64::INFINITY
        };
        let t_next = tx.min(ty).min(t1);
        if t_next - t > min_len {
            let tm = 0.5 * (t + t_next);
            let col = cell_index(ox + tm * dx, grid.x_min, w, grid.nx);
            let iy = cell_index(oy + tm * dy, grid.y_min, h, grid.ny);
            let row = grid.ny - 1 - iy;
            visit(row * grid.nx + col, t_next - t);
        }
        if t_next >= t1 {
            break;
        }
        if tx <= t_next {
            kx += step_x;
        }
        if ty <= t_next {
            ky += step_y;
        }
        t = t.max(t_next);
    }
}

fn next_line(start: f64, lo: f64, size: f64, dir: f64, n: usize) -> (i64, i64) {
    let k = ((start - lo) / size).floor() as i64;
    let k = k.clamp(0, n as i64);
    if dir > 0.0 {
        (k + 1, 1)
    } else {
        // Moving toward lower coordinates: the line at `k` may coincide with
        // the entry point, in which case it yields a zero-length segment.
        (k, -1)
    }
}

fn cell_index(coord: f64, lo: f64, size: f64, n: usize) -> usize {
    let k = ((coord - lo) / size).floor();
    if k < 0.0 {
        0
    } else {
        (k as usize).min(n - 1)
    }
}

/// Intersection lengths of `ray` with every crossed pixel of `grid`.
pub fn trace_ray(ray: &Ray, grid: &ImageGrid) -> SparseRow {
    let mut row = SparseRow::default();
    visit_ray(ray, grid, |i, l| {
        row.indices.push(i);
        row.lengths.push(l);
    });
    row
}

/// Compressed sparse rows of one projection matrix.
#[derive(Clone, Debug)]
struct Csr {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

/// Projection matrix of one scan. Rows are traced on demand unless the
/// matrix was assembled with [`Projector::cached`].
#[derive(Clone, Debug)]
pub struct Projector {
    grid: ImageGrid,
    geometry: ScanGeometry,
    rays: Vec<Ray>,
    csr: Option<Csr>,
}

impl Projector {
    pub fn new(grid: &ImageGrid, geometry: &ScanGeometry) -> Self {
        Self {
            grid: grid.clone(),
            geometry: geometry.clone(),
            rays: enumerate_rays(geometry),
            csr: None,
        }
    }

    /// Assemble the sparse matrix when its nonzero count fits in
    /// `max_entries`; otherwise stay matrix-free.
    pub fn cached(grid: &ImageGrid, geometry: &ScanGeometry, max_entries: usize) -> Self {
        let mut p = Self::new(grid, geometry);
        let estimate = p.rays.len() * (grid.nx + grid.ny);
        if estimate <= max_entries.saturating_mul(2) {
            let rows: Vec<SparseRow> = p.rays.par_iter().map(|r| trace_ray(r, grid)).collect();
            let nnz: usize = rows.iter().map(|r| r.indices.len()).sum();
            if nnz <= max_entries {
                let mut row_ptr = Vec::with_capacity(rows.len() + 1);
                let mut cols = Vec::with_capacity(nnz);
                let mut vals = Vec::with_capacity(nnz);
                row_ptr.push(0);
                for r in rows {
                    cols.extend(r.indices.iter().map(|&i| i as u32));
                    vals.extend(r.lengths);
                    row_ptr.push(cols.len());
                }
                p.csr = Some(Csr { row_ptr, cols, vals });
            }
        }
        p
    }

    pub fn is_cached(&self) -> bool {
        self.csr.is_some()
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn n_rays(&self) -> usize {
        self.rays.len()
    }

    pub fn rays(&self) -> &[Ray] {
        &self.rays
    }

    /// Visit the nonzeros of row `j`.
    pub fn visit_row<F: FnMut(usize, f64)>(&self, j: usize, mut visit: F) {
        match &self.csr {
            Some(csr) => {
                for k in csr.row_ptr[j]..csr.row_ptr[j + 1] {
                    visit(csr.cols[k] as usize, csr.vals[k]);
                }
            }
            None => visit_ray(&self.rays[j], &self.grid, visit),
        }
    }

    pub fn row(&self, j: usize) -> SparseRow {
        let mut row = SparseRow::default();
        self.visit_row(j, |i, l| {
            row.indices.push(i);
            row.lengths.push(l);
        });
        row
    }

    /// `P x`.
    pub fn apply(&self, image: &[f64]) -> Result<Vec<f64>> {
        check_len("image", self.grid.n_pixels(), image.len())?;
        let mut out = vec![0.0; self.rays.len()];
        out.par_chunks_mut(RAY_CHUNK).enumerate().for_each(|(c, chunk)| {
            for (k, v) in chunk.iter_mut().enumerate() {
                let mut acc = 0.0;
                self.visit_row(c * RAY_CHUNK + k, |i, l| acc += l * image[i]);
                *v = acc;
            }
        });
        Ok(out)
    }

    /// Line integrals of several images along every ray in a single pass;
    /// result is ray-major, `out[j * n + d]`.
    pub fn apply_many(&self, images: &[&[f64]]) -> Result<Vec<f64>> {
        for img in images {
            check_len("image", self.grid.n_pixels(), img.len())?;
        }
        let n = images.len();
        let mut out = vec![0.0; self.rays.len() * n];
        if n == 0 {
            return Ok(out);
        }
        out.par_chunks_mut(RAY_CHUNK * n).enumerate().for_each(|(c, chunk)| {
            for (k, acc) in chunk.chunks_mut(n).enumerate() {
                self.visit_row(c * RAY_CHUNK + k, |i, l| {
                    for (a, img) in acc.iter_mut().zip(images) {
                        *a += l * img[i];
                    }
                });
            }
        });
        Ok(out)
    }

    /// `P^T y`, reduced in a fixed chunk order so the result does not depend
    /// on scheduling.
    pub fn adjoint(&self, values: &[f64]) -> Result<Vec<f64>> {
        check_len("sinogram", self.rays.len(), values.len())?;
        let n_pix = self.grid.n_pixels();
        let partials: Vec<Vec<f64>> = values
            .par_chunks(RAY_CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut img = vec![0.0; n_pix];
                for (k, &y) in chunk.iter().enumerate() {
                    if y != 0.0 {
                        self.visit_row(c * RAY_CHUNK + k, |i, l| img[i] += l * y);
                    }
                }
                img
            })
            .collect();
        let mut out = vec![0.0; n_pix];
        for p in partials {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        Ok(out)
    }
}

/// Forward projection of one image: value `j` is the sum over the traced
/// pixels of length times pixel value.
pub fn project(grid: &ImageGrid, image: &[f64], geometry: &ScanGeometry) -> Result<Sinogram> {
    let values = Projector::new(grid, geometry).apply(image)?;
    Sinogram::from_values(geometry, values)
}

/// Exact transpose of [`project`].
pub fn backproject(grid: &ImageGrid, sino: &Sinogram, geometry: &ScanGeometry) -> Result<Vec<f64>> {
    sino.check(geometry)?;
    Projector::new(grid, geometry).adjoint(&sino.values)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{PI, SQRT_2};

    use super::*;
    use crate::geometry::make_parallel_geometry;

    fn ray(origin: [f64; 2], direction: [f64; 2]) -> Ray {
        let n = direction[0].hypot(direction[1]);
        Ray {
            origin,
            direction: [direction[0] / n, direction[1] / n],
            view: 0,
            detector: 0,
        }
    }

    #[test]
    fn axis_aligned_row() {
        let grid = ImageGrid::new(8, 4, -4.0, 4.0, -2.0, 2.0).unwrap();
        // y = 0.5 crosses the second row from the top.
        let row = trace_ray(&ray([-10.0, 0.5], [1.0, 0.0]), &grid);
        assert_eq!(row.indices, (8..16).collect::<Vec<_>>());
        assert!(row.lengths.iter().all(|&l| (l - 1.0).abs() < 1e-12));

        // Reversed direction visits the same pixels.
        let mut back = trace_ray(&ray([10.0, 0.5], [-1.0, 0.0]), &grid);
        back.indices.reverse();
        assert_eq!(back.indices, row.indices);

        let vertical = trace_ray(&ray([1.5, 9.0], [0.0, -1.0]), &grid);
        assert_eq!(vertical.indices, vec![5, 13, 21, 29]);
    }

    #[test]
    fn miss_is_empty() {
        let grid = ImageGrid::square(4, 1.0).unwrap();
        assert!(trace_ray(&ray([0.0, 3.0], [1.0, 0.0]), &grid).is_empty());
        assert!(trace_ray(&ray([5.0, 5.0], [1.0, -1.0]), &grid).is_empty());
    }

    #[test]
    fn diagonal_through_unit_pixel() {
        let grid = ImageGrid::new(1, 1, 0.0, 1.0, 0.0, 1.0).unwrap();
        let row = trace_ray(&ray([0.0, 0.0], [1.0, 1.0]), &grid);
        assert_eq!(row.indices, vec![0]);
        assert!((row.lengths[0] - SQRT_2).abs() < 1e-14);

        // Diagonal through interior corners of a 3x3 grid visits only the
        // diagonal cells.
        let grid = ImageGrid::new(3, 3, 0.0, 3.0, 0.0, 3.0).unwrap();
        let row = trace_ray(&ray([-1.0, -1.0], [1.0, 1.0]), &grid);
        assert_eq!(row.indices, vec![6, 4, 2]);
        assert!(row.lengths.iter().all(|&l| (l - SQRT_2).abs() < 1e-12));
    }

    #[test]
    fn rows_are_valid() {
        let grid = ImageGrid::square(17, 3.0).unwrap();
        let g = ScanGeometry::from(make_parallel_geometry(13, 0.05, PI, 21, -4.5, 4.5).unwrap());
        for r in enumerate_rays(&g) {
            let row = trace_ray(&r, &grid);
            let mut seen = row.indices.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), row.indices.len());
            assert!(row.indices.iter().all(|&i| i < grid.n_pixels()));
            assert!(row.lengths.iter().all(|&l| l > 0.0));
            assert!(row.total_length() <= grid.diagonal() + 1e-12);
        }
    }

    #[test]
    fn chord_length_matches_clipped_segment() {
        let grid = ImageGrid::square(10, 2.0).unwrap();
        let r = ray([-0.3, 0.7], [0.8, 0.35]);
        let row = trace_ray(&r, &grid);
        // Liang-Barsky clip against the whole grid box.
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for (o, d) in [(r.origin[0], r.direction[0]), (r.origin[1], r.direction[1])] {
            let (a, b) = ((-2.0 - o) / d, (2.0 - o) / d);
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
        assert!((row.total_length() - (hi - lo)).abs() < 1e-12);
    }

    #[test]
    fn cached_matches_on_demand() {
        let grid = ImageGrid::square(12, 1.0).unwrap();
        let g = ScanGeometry::from(make_parallel_geometry(9, 0.0, PI, 15, -1.5, 1.5).unwrap());
        let a = Projector::new(&grid, &g);
        let b = Projector::cached(&grid, &g, DEFAULT_CACHE_ENTRIES);
        assert!(b.is_cached());
        let img: Vec<f64> = (0..144).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(a.apply(&img).unwrap(), b.apply(&img).unwrap());
        let y: Vec<f64> = (0..a.n_rays()).map(|j| (j as f64 * 0.11).cos()).collect();
        assert_eq!(a.adjoint(&y).unwrap(), b.adjoint(&y).unwrap());
        let tiny = Projector::cached(&grid, &g, 10);
        assert!(!tiny.is_cached());
    }

    #[test]
    fn projection_dimension_checks() {
        let grid = ImageGrid::square(4, 1.0).unwrap();
        let g = ScanGeometry::from(make_parallel_geometry(3, 0.0, PI, 5, -1.5, 1.5).unwrap());
        assert!(project(&grid, &[0.0; 15], &g).is_err());
        let bad = Sinogram {
            values: vec![0.0; 14],
            n_views: 3,
            n_det: 5,
        };
        assert!(backproject(&grid, &bad, &g).is_err());
    }
}
