//! The polychromatic forward operator `K`, its gradient rows, the per-ray
//! transfer map and measurement noise.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::geometry::{ImageGrid, ScanGeometry};
use crate::projector::{Projector, Sinogram, DEFAULT_CACHE_ENTRIES};
use crate::spectral::SpectralSystem;

const RAY_CHUNK: usize = 1024;

/// D basis images on one grid; `images[d][i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisImageSet {
    pub grid: ImageGrid,
    pub images: Vec<Vec<f64>>,
}

impl BasisImageSet {
    pub fn new(grid: ImageGrid, images: Vec<Vec<f64>>) -> Result<Self> {
        for img in &images {
            check_len("basis image", grid.n_pixels(), img.len())?;
            if img.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("basis image has non-finite values".into()));
            }
        }
        Ok(Self { grid, images })
    }

    pub fn zeros(grid: &ImageGrid, n_materials: usize) -> Self {
        Self {
            grid: grid.clone(),
            images: vec![vec![0.0; grid.n_pixels()]; n_materials],
        }
    }

    pub fn n_materials(&self) -> usize {
        self.images.len()
    }

    pub fn refs(&self) -> Vec<&[f64]> {
        self.images.iter().map(|v| v.as_slice()).collect()
    }

    /// Stacked vector `[f_1; ...; f_D]`.
    pub fn stacked(&self) -> Vec<f64> {
        self.images.concat()
    }

    pub fn from_stacked(grid: &ImageGrid, x: &[f64]) -> Result<Self> {
        let n = grid.n_pixels();
        if n == 0 || x.len() % n != 0 {
            return Err(Error::DimensionMismatch {
                what: "stacked basis images",
                expected: n,
                found: x.len(),
            });
        }
        Self::new(grid.clone(), x.chunks(n).map(|c| c.to_vec()).collect())
    }

    pub fn norm(&self) -> f64 {
        self.images.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.images
            .iter()
            .flatten()
            .zip(other.images.iter().flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.images.iter().flatten().all(|v| v.is_finite())
    }
}

/// One sinogram per spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSinogram {
    pub sinos: Vec<Sinogram>,
}

impl MultiSinogram {
    pub fn n_spectra(&self) -> usize {
        self.sinos.len()
    }

    pub fn total_len(&self) -> usize {
        self.sinos.iter().map(|s| s.len()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sinos
            .iter()
            .flat_map(|s| &s.values)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.sinos
            .iter()
            .flat_map(|s| &s.values)
            .zip(other.sinos.iter().flat_map(|s| &s.values))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.sinos.iter().flat_map(|s| s.values.iter().copied()).collect()
    }

    pub(crate) fn check(&self, geometries: &[Arc<Projector>]) -> Result<()> {
        check_len("sinograms", geometries.len(), self.sinos.len())?;
        for (s, p) in self.sinos.iter().zip(geometries) {
            s.check(p.geometry())?;
        }
        Ok(())
    }
}

/// Gradient of one `K_j^q` with respect to the stacked unknowns `d * I + i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseGradient {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseGradient {
    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] += v;
        }
        out
    }
}

/// A spectral system bound to one projector per spectrum.
#[derive(Clone, Debug)]
pub struct ForwardModel {
    system: Arc<SpectralSystem>,
    grid: ImageGrid,
    projectors: Vec<Arc<Projector>>,
}

impl ForwardModel {
    /// Matrix-free projectors.
    pub fn new(system: &SpectralSystem, grid: &ImageGrid, geometries: &[ScanGeometry]) -> Result<Self> {
        Self::build(system, grid, geometries, 0)
    }

    /// Projectors assembled as sparse matrices when they fit in `max_entries`
    /// nonzeros each.
    pub fn cached(system: &SpectralSystem, grid: &ImageGrid, geometries: &[ScanGeometry], max_entries: usize) -> Result<Self> {
        Self::build(system, grid, geometries, max_entries)
    }

    pub fn with_default_cache(system: &SpectralSystem, grid: &ImageGrid, geometries: &[ScanGeometry]) -> Result<Self> {
        Self::build(system, grid, geometries, DEFAULT_CACHE_ENTRIES)
    }

    fn build(system: &SpectralSystem, grid: &ImageGrid, geometries: &[ScanGeometry], cache: usize) -> Result<Self> {
        check_len("scan geometries", system.n_spectra(), geometries.len())?;
        let projectors = geometries
            .iter()
            .map(|g| {
                Arc::new(if cache > 0 {
                    Projector::cached(grid, g, cache)
                } else {
                    Projector::new(grid, g)
                })
            })
            .collect();
        Ok(Self {
            system: Arc::new(system.clone()),
            grid: grid.clone(),
            projectors,
        })
    }

    pub fn system(&self) -> &SpectralSystem {
        &self.system
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn projectors(&self) -> &[Arc<Projector>] {
        &self.projectors
    }

    pub fn projector(&self, q: usize) -> &Arc<Projector> {
        &self.projectors[q]
    }

    pub fn n_spectra(&self) -> usize {
        self.projectors.len()
    }

    pub fn n_materials(&self) -> usize {
        self.system.n_materials()
    }

    pub fn check_images(&self, f: &BasisImageSet) -> Result<()> {
        check_len("basis images", self.n_materials(), f.n_materials())?;
        check_len("basis image pixels", self.grid.n_pixels(), f.grid.n_pixels())?;
        for img in &f.images {
            check_len("basis image", self.grid.n_pixels(), img.len())?;
        }
        Ok(())
    }

    /// Ray-major line integrals `a[j * D + d] = p_j . f_d` for spectrum `q`.
    pub fn line_integrals(&self, q: usize, f: &BasisImageSet) -> Result<Vec<f64>> {
        self.check_images(f)?;
        self.projectors[q].apply_many(&f.refs())
    }

    /// Applies the transfer map ray by ray to ray-major line integrals.
    pub fn transfer_all(&self, q: usize, a: &[f64]) -> Vec<f64> {
        let d = self.n_materials();
        let sys = &*self.system;
        let mut out = vec![0.0; a.len() / d];
        out.par_chunks_mut(RAY_CHUNK).enumerate().for_each(|(c, chunk)| {
            for (k, v) in chunk.iter_mut().enumerate() {
                let j = c * RAY_CHUNK + k;
                *v = sys.transfer_unchecked(q, &a[j * d..(j + 1) * d]);
            }
        });
        out
    }

    pub fn forward_q(&self, q: usize, f: &BasisImageSet) -> Result<Sinogram> {
        let a = self.line_integrals(q, f)?;
        Sinogram::from_values(self.projectors[q].geometry(), self.transfer_all(q, &a))
    }

    pub fn forward(&self, f: &BasisImageSet) -> Result<MultiSinogram> {
        let sinos = (0..self.n_spectra())
            .map(|q| self.forward_q(q, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiSinogram { sinos })
    }

    /// Per-material scales `-(w_j(f) . b_d)` of ray `j` given its line integrals.
    pub fn gradient_scales(&self, q: usize, a: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; a.len()];
        self.system.transfer_grad_unchecked(q, a, &mut g);
        g
    }

    /// Row `(q, j)` of the Jacobian of `K` at `f`.
    pub fn gradient_row(&self, f: &BasisImageSet, q: usize, j: usize) -> Result<SparseGradient> {
        self.check_images(f)?;
        if q >= self.n_spectra() || j >= self.projectors[q].n_rays() {
            return Err(Error::InvalidParameter(format!("gradient row ({q}, {j}) out of range")));
        }
        let row = self.projectors[q].row(j);
        let nd = self.n_materials();
        let a: Vec<f64> = f.images.iter().map(|img| row.dot(img)).collect();
        let scales = self.gradient_scales(q, &a);
        let n = self.grid.n_pixels();
        let mut out = SparseGradient::default();
        for d in 0..nd {
            for (&i, &l) in row.indices.iter().zip(&row.lengths) {
                out.indices.push(d * n + i);
                out.values.push(scales[d] * l);
            }
        }
        Ok(out)
    }
}

/// `K(f)` for each spectrum geometry.
pub fn forward(system: &SpectralSystem, geometries: &[ScanGeometry], f: &BasisImageSet) -> Result<MultiSinogram> {
    ForwardModel::new(system, &f.grid, geometries)?.forward(f)
}

/// Gradient of `K_j^q` at `f` over the stacked `D * I` unknowns.
pub fn gradient_row(
    system: &SpectralSystem,
    geometry: &ScanGeometry,
    f: &BasisImageSet,
    q: usize,
    j: usize,
) -> Result<SparseGradient> {
    if q >= system.n_spectra() {
        return Err(Error::InvalidParameter(format!("spectrum index {q} out of range")));
    }
    check_len("basis images", system.n_materials(), f.n_materials())?;
    if j >= geometry.n_rays() {
        return Err(Error::InvalidParameter(format!("ray index {j} out of range")));
    }
    let p = Projector::new(&f.grid, geometry);
    let row = p.row(j);
    let a: Vec<f64> = f.images.iter().map(|img| row.dot(img)).collect();
    let mut scales = vec![0.0; a.len()];
    system.transfer_grad_unchecked(q, &a, &mut scales);
    let n = f.grid.n_pixels();
    let mut out = SparseGradient::default();
    for (d, s) in scales.iter().enumerate() {
        for (&i, &l) in row.indices.iter().zip(&row.lengths) {
            out.indices.push(d * n + i);
            out.values.push(s * l);
        }
    }
    Ok(out)
}

/// `h_q(a) = ln sum_m s_m exp(-sum_d b_dm a_d)`.
pub fn ray_transfer(system: &SpectralSystem, q: usize, a: &[f64]) -> Result<f64> {
    system.check_line_integrals(q, a)?;
    Ok(system.transfer_unchecked(q, a))
}

/// `dh_q/da_d = -b_d . w(a)`.
pub fn ray_transfer_jacobian(system: &SpectralSystem, q: usize, a: &[f64]) -> Result<Vec<f64>> {
    system.check_line_integrals(q, a)?;
    let mut g = vec![0.0; a.len()];
    system.transfer_grad_unchecked(q, a, &mut g);
    Ok(g)
}

/// Adds white Gaussian noise to the stacked data, rescaled so that
/// `20 log10(||g|| / ||n||)` equals `snr_db`. An infinite SNR is noiseless.
pub fn add_noise(g: &MultiSinogram, snr_db: f64, seed: u64) -> Result<MultiSinogram> {
    if snr_db == f64::INFINITY {
        return Ok(g.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidParameter(format!("snr_db must be finite or +inf, got {snr_db}")));
    }
    let norm = g.norm();
    if norm == 0.0 {
        return Err(Error::ZeroNorm("noise-free data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..g.total_len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nn = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = norm / nn * 10f64.powf(-snr_db / 20.0);
    let mut out = g.clone();
    let mut it = noise.iter();
    for s in &mut out.sinos {
        for v in &mut s.values {
            *v += scale * it.next().unwrap();
        }
    }
    Ok(out)
}

/// Achieved `20 log10(||clean|| / ||noisy - clean||)`.
pub fn measured_snr_db(clean: &MultiSinogram, noisy: &MultiSinogram) -> f64 {
    20.0 * (clean.norm() / noisy.distance(clean)).log10()
}
