use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::Sinogram;
use crate::error::{Error, Result};
use crate::geometry::{FanGeometry, ImageGrid, ParallelGeometry, ScanGeometry};

const COVERAGE_SLACK: f64 = 1e-9;

/// Band-limited ramp (Ram-Lak) impulse response sampled at `n * spacing`,
/// with cutoff `bandwidth` times the detector Nyquist frequency:
/// `h(t) = fc^2 (2 sinc(2 fc t) - sinc^2(fc t))`, `fc = bandwidth / (2 spacing)`.
pub fn ramp_kernel(n: i64, spacing: f64, bandwidth: f64) -> f64 {
    let fc = bandwidth / (2.0 * spacing);
    let t = n as f64 * spacing;
    fc * fc * (2.0 * sinc(2.0 * fc * t) - sinc(fc * t).powi(2))
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Filtered backprojection prepared for one grid/geometry pair.
pub struct FbpOperator {
    grid: ImageGrid,
    geometry: ScanGeometry,
    pad: usize,
    kernel_hat: Vec<Complex64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    /// Per-detector pre-weights (fan beam cosine weighting) folded with the
    /// convolution quadrature factor.
    pre_weight: Vec<f64>,
    view_weight: f64,
}

impl std::fmt::Debug for FbpOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FbpOperator")
            .field("grid", &self.grid)
            .field("pad", &self.pad)
            .field("view_weight", &self.view_weight)
            .finish()
    }
}

impl FbpOperator {
    pub fn new(grid: &ImageGrid, geometry: &ScanGeometry, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "filter bandwidth must lie in (0, 1], got {bandwidth}"
            )));
        }
        let n_det = geometry.n_det();
        let n_views = geometry.n_views() as f64;
        // Detector sample spacing in the filtering domain: physical offsets for
        // parallel beams, the virtual detector through the isocenter for fans.
        let (spacing, pre_weight, view_weight) = match geometry {
            ScanGeometry::Parallel(g) => {
                if g.angle_span() < PI - COVERAGE_SLACK {
                    return Err(Error::InsufficientCoverage(format!(
                        "parallel-beam FBP needs an angular span >= pi, got {}",
                        g.angle_span()
                    )));
                }
                let a = g.detector_spacing();
                (a, vec![a; n_det], PI / n_views)
            }
            ScanGeometry::Fan(g) => {
                if g.angle_span() < 2.0 * PI - COVERAGE_SLACK {
                    return Err(Error::InsufficientCoverage(format!(
                        "fan-beam FBP needs a full 2*pi scan, got {}",
                        g.angle_span()
                    )));
                }
                let d = g.source_to_center();
                let mag = d / g.source_to_detector();
                let a = g.det_width() * mag;
                let w = (0..n_det)
                    .map(|k| {
                        let p = g.detector_position(k) * mag;
                        a * d / (d * d + p * p).sqrt()
                    })
                    .collect();
                // Half weight: every line is measured twice over 2*pi.
                (a, w, 0.5 * 2.0 * PI / n_views)
            }
        };

        let pad = (2 * n_det).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(pad);
        let ifft = planner.plan_fft_inverse(pad);
        let half = (pad / 2) as i64;
        let mut kernel_hat: Vec<Complex64> = (0..pad as i64)
            .map(|k| {
                let n = if k < half { k } else { k - pad as i64 };
                Complex64::new(ramp_kernel(n, spacing, bandwidth), 0.0)
            })
            .collect();
        fft.process(&mut kernel_hat);
        let scale = 1.0 / pad as f64;
        for c in &mut kernel_hat {
            *c *= scale;
        }

        Ok(Self {
            grid: grid.clone(),
            geometry: geometry.clone(),
            pad,
            kernel_hat,
            fft,
            ifft,
            pre_weight,
            view_weight,
        })
    }

    pub fn apply(&self, sino: &Sinogram) -> Result<Vec<f64>> {
        sino.check(&self.geometry)?;
        let n_det = sino.n_det;
        let mut filtered = vec![0.0; sino.values.len()];
        filtered
            .par_chunks_mut(n_det)
            .zip(sino.values.par_chunks(n_det))
            .for_each_init(
                || vec![Complex64::new(0.0, 0.0); self.pad],
                |buf, (out, row)| self.filter_row(row, out, buf),
            );
        Ok(match &self.geometry {
            ScanGeometry::Parallel(g) => self.backproject_parallel(g, &filtered),
            ScanGeometry::Fan(g) => self.backproject_fan(g, &filtered),
        })
    }

    fn filter_row(&self, row: &[f64], out: &mut [f64], buf: &mut [Complex64]) {
        for (b, (&v, &w)) in buf.iter_mut().zip(row.iter().zip(&self.pre_weight)) {
            *b = Complex64::new(v * w, 0.0);
        }
        for b in buf[row.len()..].iter_mut() {
            *b = Complex64::new(0.0, 0.0);
        }
        self.fft.process(buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel_hat) {
            *b *= k;
        }
        self.ifft.process(buf);
        for (o, b) in out.iter_mut().zip(buf.iter()) {
            *o = b.re;
        }
    }

    fn backproject_parallel(&self, g: &ParallelGeometry, filtered: &[f64]) -> Vec<f64> {
        let grid = &self.grid;
        let n_det = g.offsets().len();
        let det_lo = g.offsets()[0];
        let inv_a = 1.0 / g.detector_spacing();
        let trig: Vec<(f64, f64)> = g.angles().iter().map(|a| a.sin_cos()).collect();
        let (w, h) = (grid.pixel_width(), grid.pixel_height());
        let mut image = vec![0.0; grid.n_pixels()];
        image.par_chunks_mut(grid.nx).enumerate().for_each(|(row, out)| {
            let y = grid.y_max - (row as f64 + 0.5) * h;
            for (v, &(s, c)) in trig.iter().enumerate() {
                let q = &filtered[v * n_det..(v + 1) * n_det];
                for (col, o) in out.iter_mut().enumerate() {
                    let x = grid.x_min + (col as f64 + 0.5) * w;
                    let u = (-x * s + y * c - det_lo) * inv_a;
                    *o += interp(q, u);
                }
            }
            for o in out.iter_mut() {
                *o *= self.view_weight;
            }
        });
        image
    }

    fn backproject_fan(&self, g: &FanGeometry, filtered: &[f64]) -> Vec<f64> {
        let grid = &self.grid;
        let n_det = g.n_det();
        let d = g.source_to_center();
        let mag = d / g.source_to_detector();
        let a = g.det_width() * mag;
        let center = 0.5 * (n_det as f64 - 1.0);
        let trig: Vec<(f64, f64)> = g.angles().iter().map(|b| b.sin_cos()).collect();
        let (w, h) = (grid.pixel_width(), grid.pixel_height());
        let mut image = vec![0.0; grid.n_pixels()];
        image.par_chunks_mut(grid.nx).enumerate().for_each(|(row, out)| {
            let y = grid.y_max - (row as f64 + 0.5) * h;
            for (v, &(s, c)) in trig.iter().enumerate() {
                let q = &filtered[v * n_det..(v + 1) * n_det];
                for (col, o) in out.iter_mut().enumerate() {
                    let x = grid.x_min + (col as f64 + 0.5) * w;
                    let along = d + x * c + y * s;
                    let across = -x * s + y * c;
                    let p = d * across / along;
                    let weight = (d / along).powi(2);
                    *o += weight * interp(q, p / a + center);
                }
            }
            for o in out.iter_mut() {
                *o *= self.view_weight;
            }
        });
        image
    }
}

/// Linear interpolation of `q` at fractional index `u`; zero outside.
fn interp(q: &[f64], u: f64) -> f64 {
    if !(u >= 0.0) {
        return 0.0;
    }
    let k = u.floor() as usize;
    if k + 1 < q.len() {
        let t = u - k as f64;
        q[k] + t * (q[k + 1] - q[k])
    } else if k + 1 == q.len() && u == k as f64 {
        q[k]
    } else {
        0.0
    }
}

/// Filtered backprojection with a Ram-Lak filter cut at `filter_bandwidth`
/// times the detector Nyquist frequency.
pub fn fbp(sino: &Sinogram, geometry: &ScanGeometry, grid: &ImageGrid, filter_bandwidth: f64) -> Result<Vec<f64>> {
    FbpOperator::new(grid, geometry, filter_bandwidth)?.apply(sino)
}
