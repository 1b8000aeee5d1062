//! Convergence metrics, virtual monochromatic images, dense Jacobians and the
//! numerical check of the discrete convergence condition.

use std::ops::Range;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::forward::{BasisImageSet, ForwardModel, MultiSinogram};
use crate::geometry::ScanGeometry;
use crate::spectral::{compute_phi, SpectralSystem};

/// Default cap on dense Jacobian entries.
pub const DENSE_CAP: usize = 20_000_000;

/// Metrics of iterate `k`. `None` marks a metric whose denominator vanished
/// or whose inputs were not available.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub re_f: Option<f64>,
    pub re_g: Option<f64>,
    pub delta_f: Option<f64>,
    pub delta_g: Option<f64>,
    /// Wall time since the solver started, at the end of this iteration.
    pub seconds: f64,
}

pub type MetricSeries = Vec<IterationRecord>;

fn ratio(num: f64, den: f64) -> Option<f64> {
    if den > 0.0 {
        Some(num / den)
    } else {
        None
    }
}

/// Relative errors of `f_k` and the step to `f_next`, all over stacked components.
pub fn metrics(
    f_k: &BasisImageSet,
    f_next: Option<&BasisImageSet>,
    truth: Option<&BasisImageSet>,
    k_of_f_k: &MultiSinogram,
    k_of_f_next: Option<&MultiSinogram>,
    g: &MultiSinogram,
) -> IterationRecord {
    let gn = g.norm();
    IterationRecord {
        k: 0,
        re_f: truth.and_then(|t| ratio(f_k.distance(t), t.norm())),
        re_g: ratio(k_of_f_k.distance(g), gn),
        delta_f: f_next.and_then(|n| ratio(n.distance(f_k), f_k.norm())),
        delta_g: k_of_f_next.and_then(|n| ratio(n.distance(k_of_f_k), gn)),
        seconds: 0.0,
    }
}

/// Accumulates one record per iteration with wall time measured from creation.
pub struct MetricRecorder<'a> {
    g: &'a MultiSinogram,
    truth: Option<&'a BasisImageSet>,
    start: Instant,
    records: Vec<IterationRecord>,
}

impl<'a> MetricRecorder<'a> {
    pub fn new(g: &'a MultiSinogram, truth: Option<&'a BasisImageSet>) -> Self {
        Self {
            g,
            truth,
            start: Instant::now(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, f: &BasisImageSet, f_next: &BasisImageSet, k_f: &MultiSinogram, k_next: &MultiSinogram) -> IterationRecord {
        let mut r = metrics(f, Some(f_next), self.truth, k_f, Some(k_next), self.g);
        r.k = self.records.len();
        r.seconds = self.start.elapsed().as_secs_f64();
        self.records.push(r);
        r
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn finish(self) -> Vec<IterationRecord> {
        self.records
    }
}

/// `sum_d b_d(E) f_d`, in 1/cm.
pub fn vmi(system: &SpectralSystem, f: &BasisImageSet, energy: f64) -> Result<Vec<f64>> {
    check_len("basis images", system.n_materials(), f.n_materials())?;
    let b: Vec<f64> = (0..system.n_materials())
        .map(|d| system.mac_at(d, energy))
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; f.grid.n_pixels()];
    for (img, bd) in f.images.iter().zip(&b) {
        for (o, v) in out.iter_mut().zip(img) {
            *o += bd * v;
        }
    }
    Ok(out)
}

fn check_dense(rows: usize, cols: usize, cap: usize) -> Result<()> {
    if rows.saturating_mul(cols) > cap {
        Err(Error::DenseCapExceeded { rows, cols, cap })
    } else {
        Ok(())
    }
}

/// Jacobian of the stacked `K` at `f`: rows `(q, j)` spectrum-major, columns `d * I + i`.
pub fn full_jacobian_with(model: &ForwardModel, f: &BasisImageSet, cap: usize) -> Result<DMatrix<f64>> {
    model.check_images(f)?;
    let rows: usize = model.projectors().iter().map(|p| p.n_rays()).sum();
    let cols = model.n_materials() * model.grid().n_pixels();
    check_dense(rows, cols, cap)?;
    let mut jac = DMatrix::zeros(rows, cols);
    let mut r0 = 0;
    for q in 0..model.n_spectra() {
        for j in 0..model.projector(q).n_rays() {
            let g = model.gradient_row(f, q, j)?;
            for (&c, &v) in g.indices.iter().zip(&g.values) {
                jac[(r0 + j, c)] += v;
            }
        }
        r0 += model.projector(q).n_rays();
    }
    Ok(jac)
}

pub fn full_jacobian(system: &SpectralSystem, geometries: &[ScanGeometry], f: &BasisImageSet) -> Result<DMatrix<f64>> {
    full_jacobian_with(&ForwardModel::new(system, &f.grid, geometries)?, f, DENSE_CAP)
}

/// `P (x) phi`: block `(q, d)` is `phi_qd P_q`.
pub fn kron_p_phi(model: &ForwardModel, phi: &DMatrix<f64>, cap: usize) -> Result<DMatrix<f64>> {
    let rows: usize = model.projectors().iter().map(|p| p.n_rays()).sum();
    let n = model.grid().n_pixels();
    let cols = model.n_materials() * n;
    check_dense(rows, cols, cap)?;
    let mut out = DMatrix::zeros(rows, cols);
    let mut r0 = 0;
    for q in 0..model.n_spectra() {
        let p = model.projector(q);
        for j in 0..p.n_rays() {
            p.visit_row(j, |i, l| {
                for d in 0..model.n_materials() {
                    out[(r0 + j, d * n + i)] += phi[(q, d)] * l;
                }
            });
        }
        r0 += p.n_rays();
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Certificate {
    /// Sampled estimate of the weight-deviation constant.
    pub eta_tilde: f64,
    pub sigma_min: f64,
    pub frobenius: f64,
    /// `||P (x) phi||_F / sigma_min`; infinite when rank deficient.
    pub kappa_f: f64,
    pub gamma: f64,
    pub rank_deficient: bool,
    pub n_samples: usize,
    pub n_directions: usize,
    /// Largest `||(J0 - J(f)) h|| / ||J0 h||` over samples and directions.
    pub max_observed_ratio: f64,
    /// The bound `||(J0 - J(f)) h|| <= gamma ||J0 h||` held for every pair tested.
    pub inequality_holds: bool,
}

/// Estimates the constants of the discrete convergence condition around the
/// special point with line integrals `c` and checks the resulting bound on
/// random directions.
pub fn convergence_certificate(
    system: &SpectralSystem,
    geometries: &[ScanGeometry],
    c: &[Vec<f64>],
    sample_fs: &[BasisImageSet],
    n_directions: usize,
    seed: u64,
) -> Result<Certificate> {
    let grid = match sample_fs.first() {
        Some(f) => f.grid.clone(),
        None => return Err(Error::InvalidParameter("certificate needs at least one sample".into())),
    };
    let model = ForwardModel::new(system, &grid, geometries)?;
    let phi = compute_phi(system, c)?;
    let nd = system.n_materials();

    let mut what = vec![vec![0.0; system.n_bins()]; system.n_spectra()];
    for (q, w) in what.iter_mut().enumerate() {
        system.weights_unchecked(q, &c[q], w);
    }
    let dot = |b: &[f64], w: &[f64]| b.iter().zip(w).map(|(x, y)| x * y).sum::<f64>();

    let mut eta: f64 = 0.0;
    let mut w = vec![0.0; system.n_bins()];
    for f in sample_fs {
        model.check_images(f)?;
        for (q, wh) in what.iter().enumerate() {
            let a = model.line_integrals(q, f)?;
            for j in 0..model.projector(q).n_rays() {
                system.weights_unchecked(q, &a[j * nd..(j + 1) * nd], &mut w);
                for d in 0..nd {
                    let b = system.mac(d);
                    let den = dot(b, wh).abs();
                    let num = (dot(b, wh) - dot(b, &w)).abs();
                    eta = eta.max(num / den);
                }
            }
        }
    }

    let j0 = -kron_p_phi(&model, &phi.entries, DENSE_CAP)?;
    let sv = j0.clone().svd(false, false).singular_values;
    let sigma_min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let frobenius = j0.norm();
    let rank_deficient = j0.nrows() < j0.ncols() || !(sigma_min > 1e-12 * frobenius);
    let sigma_min = if j0.nrows() < j0.ncols() { 0.0 } else { sigma_min };
    let kappa_f = if rank_deficient { f64::INFINITY } else { frobenius / sigma_min };
    let gamma = if eta == 0.0 { 0.0 } else { eta * kappa_f };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = j0.ncols();
    let dirs: Vec<DVector<f64>> = (0..n_directions)
        .map(|_| DVector::from_iterator(cols, (0..cols).map(|_| StandardNormal.sample(&mut rng))))
        .collect();
    let mut holds = true;
    let mut max_ratio: f64 = 0.0;
    for f in sample_fs {
        let diff = &j0 - full_jacobian_with(&model, f, DENSE_CAP)?;
        for h in &dirs {
            let lhs = (&diff * h).norm();
            let rhs = (&j0 * h).norm();
            if lhs > gamma * rhs {
                holds = false;
            }
            if rhs > 0.0 {
                max_ratio = max_ratio.max(lhs / rhs);
            } else if lhs > 0.0 {
                max_ratio = f64::INFINITY;
            }
        }
    }

    Ok(Certificate {
        eta_tilde: eta,
        sigma_min,
        frobenius,
        kappa_f,
        gamma,
        rank_deficient,
        n_samples: sample_fs.len(),
        n_directions,
        max_observed_ratio: max_ratio,
        inequality_holds: holds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateProbe {
    /// `RE_f^{k+1} / RE_f^k` for consecutive records in the window.
    pub ratios: Vec<f64>,
    pub geometric_mean: Option<f64>,
}

/// Contraction ratios of `RE_f` over record indices `window` (the ratio for
/// `k` uses records `k` and `k + 1`).
pub fn rate_probe(records: &[IterationRecord], window: Range<usize>) -> Result<RateProbe> {
    if window.start >= window.end || window.end >= records.len() {
        return Err(Error::InvalidParameter(format!(
            "rate window {window:?} needs records up to {} but only {} exist",
            window.end,
            records.len()
        )));
    }
    let mut ratios = Vec::new();
    for k in window {
        let (a, b) = match (records[k].re_f, records[k + 1].re_f) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::InvalidParameter(format!("record {k} has no RE_f"))),
        };
        if a == 0.0 || b == 0.0 {
            break;
        }
        ratios.push(b / a);
    }
    let geometric_mean = if ratios.is_empty() {
        None
    } else {
        Some((ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp())
    };
    Ok(RateProbe { ratios, geometric_mean })
}
