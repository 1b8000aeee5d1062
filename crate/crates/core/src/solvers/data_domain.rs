//! Baselines that invert the nonlinear model ray by ray in the data domain:
//! INTRPL, IFBP and the two-step DDD method.

use std::f64::consts::PI;

use rayon::prelude::*;

use super::newton::{newton_ray, newton_step, NewtonOptions};
use super::{SolveResult, StopReason};
use crate::diagnostics::MetricRecorder;
use crate::error::{check_len, Error, Result};
use crate::forward::{BasisImageSet, ForwardModel, MultiSinogram};
use crate::geometry::ScanGeometry;
use crate::projector::{FbpOperator, Sinogram};
use crate::spectral::SpectralSystem;

const SNAP: f64 = 1e-9;

/// Resamples `sino` (acquired on `from`) onto the view angles of `to` by
/// linear interpolation between adjacent views. Both scans must be parallel
/// with equal view and detector counts; a half-turn scan is extended
/// periodically with the detector axis mirrored.
pub fn interpolate_views(sino: &Sinogram, from: &ScanGeometry, to: &ScanGeometry) -> Result<Sinogram> {
    sino.check(from)?;
    let (pf, pt) = match (from, to) {
        (ScanGeometry::Parallel(a), ScanGeometry::Parallel(b)) => (a, b),
        _ => return Err(Error::InvalidGeometry("view interpolation needs parallel scans".into())),
    };
    let (nv, nd) = (pf.angles().len(), pf.offsets().len());
    check_len("interpolation views", nv, pt.angles().len())?;
    check_len("interpolation detectors", nd, pt.offsets().len())?;
    if pf.offsets().iter().zip(pt.offsets()).any(|(a, b)| (a - b).abs() > 1e-12) {
        return Err(Error::InvalidGeometry("interpolation needs identical detector offsets".into()));
    }
    let span = pf.angle_span();
    let mirrored = if (span - PI).abs() < 1e-9 {
        let o = pf.offsets();
        if (0..nd).any(|k| (o[k] + o[nd - 1 - k]).abs() > 1e-9) {
            return Err(Error::InvalidGeometry("half-turn interpolation needs symmetric detector offsets".into()));
        }
        true
    } else if (span - 2.0 * PI).abs() < 1e-9 {
        false
    } else {
        return Err(Error::InvalidGeometry(format!(
            "view interpolation needs a half or full turn, got span {span}"
        )));
    };
    let step = span / nv as f64;
    let theta0 = pf.angles()[0];
    let fetch = |vi: i64, k: usize| -> f64 {
        let wraps = vi.div_euclid(nv as i64);
        let v = vi.rem_euclid(nv as i64) as usize;
        let k = if mirrored && wraps % 2 != 0 { nd - 1 - k } else { k };
        sino.values[v * nd + k]
    };
    let mut out = vec![0.0; nv * nd];
    for (v, &theta) in pt.angles().iter().enumerate() {
        let mut u = (theta - theta0) / step;
        if (u - u.round()).abs() < SNAP {
            u = u.round();
        }
        let base = u.floor();
        let t = u - base;
        let base = base as i64;
        for k in 0..nd {
            out[v * nd + k] = if t == 0.0 {
                fetch(base, k)
            } else {
                (1.0 - t) * fetch(base, k) + t * fetch(base + 1, k)
            };
        }
    }
    Sinogram::from_values(to, out)
}

fn require_square(model: &ForwardModel) -> Result<()> {
    if model.n_spectra() != model.n_materials() {
        return Err(Error::InvalidParameter(format!(
            "per-ray inversion needs Q = D (Q = {}, D = {})",
            model.n_spectra(),
            model.n_materials()
        )));
    }
    Ok(())
}

/// Ray-major targets `t[j * Q + q]` from Q sinograms of equal length.
fn stack_targets(sinos: &[&Sinogram]) -> Vec<f64> {
    let nq = sinos.len();
    let nj = sinos[0].len();
    let mut t = vec![0.0; nj * nq];
    for (q, s) in sinos.iter().enumerate() {
        for j in 0..nj {
            t[j * nq + q] = s.values[j];
        }
    }
    t
}

fn step_all(system: &SpectralSystem, targets: &[f64], a: &mut [f64], nd: usize) {
    a.par_chunks_mut(nd).zip(targets.par_chunks(nd)).for_each(|(aj, tj)| {
        let (next, _) = newton_step(system, tj, aj, true);
        aj.copy_from_slice(&next);
    });
}

/// FBP of each material's basis sinogram from ray-major `a`.
fn reconstruct(op: &FbpOperator, geometry: &ScanGeometry, a: &[f64], nd: usize) -> Result<Vec<Vec<f64>>> {
    (0..nd)
        .map(|d| {
            let vals = a.iter().skip(d).step_by(nd).copied().collect();
            op.apply(&Sinogram::from_values(geometry, vals)?)
        })
        .collect()
}

/// Interpolates every other spectrum onto spectrum 0's views, then alternates
/// one per-ray Newton step (from zero) with FBP of the basis sinograms.
pub fn intrpl_solve(model: &ForwardModel, g: &MultiSinogram, n_newton: usize, truth: Option<&BasisImageSet>) -> Result<SolveResult> {
    require_square(model)?;
    g.check(model.projectors())?;
    let nd = model.n_materials();
    let geom0 = model.projector(0).geometry().clone();
    let mut data: Vec<Sinogram> = vec![g.sinos[0].clone()];
    for q in 1..model.n_spectra() {
        data.push(interpolate_views(&g.sinos[q], model.projector(q).geometry(), &geom0)?);
    }
    let targets = stack_targets(&data.iter().collect::<Vec<_>>());
    let op = FbpOperator::new(model.grid(), &geom0, 1.0)?;

    let mut a = vec![0.0; geom0.n_rays() * nd];
    let mut rec = MetricRecorder::new(g, truth);
    let mut f = BasisImageSet::zeros(model.grid(), nd);
    let mut k_f = model.forward(&f)?;
    for _ in 0..n_newton {
        step_all(model.system(), &targets, &mut a, nd);
        let next = BasisImageSet::new(model.grid().clone(), reconstruct(&op, &geom0, &a, nd)?)?;
        let k_next = model.forward(&next)?;
        rec.push(&f, &next, &k_f, &k_next);
        f = next;
        k_f = k_next;
    }
    Ok(SolveResult::new(f, &k_f, rec.finish(), truth, g, StopReason::MaxIters))
}

/// Reprojects the current estimate on spectrum 0's geometry, takes one Newton
/// step per ray against the same-index measurements of every spectrum, and
/// reconstructs the updated basis sinograms by FBP.
pub fn ifbp_solve(model: &ForwardModel, g: &MultiSinogram, max_iters: usize, truth: Option<&BasisImageSet>) -> Result<SolveResult> {
    require_square(model)?;
    g.check(model.projectors())?;
    let nd = model.n_materials();
    let geom0 = model.projector(0).geometry().clone();
    for q in 1..model.n_spectra() {
        let gq = model.projector(q).geometry();
        check_len("paired views", geom0.n_views(), gq.n_views())?;
        check_len("paired detectors", geom0.n_det(), gq.n_det())?;
    }
    let targets = stack_targets(&g.sinos.iter().collect::<Vec<_>>());
    let op = FbpOperator::new(model.grid(), &geom0, 1.0)?;

    let mut rec = MetricRecorder::new(g, truth);
    let mut f = BasisImageSet::zeros(model.grid(), nd);
    let mut k_f = model.forward(&f)?;
    for _ in 0..max_iters {
        let mut a = model.line_integrals(0, &f)?;
        step_all(model.system(), &targets, &mut a, nd);
        let next = BasisImageSet::new(model.grid().clone(), reconstruct(&op, &geom0, &a, nd)?)?;
        let k_next = model.forward(&next)?;
        rec.push(&f, &next, &k_f, &k_next);
        f = next;
        k_f = k_next;
    }
    Ok(SolveResult::new(f, &k_f, rec.finish(), truth, g, StopReason::MaxIters))
}

#[derive(Clone, Debug)]
pub struct DddResult {
    pub f: BasisImageSet,
    /// Ray-major basis line integrals `a[j * D + d]`.
    pub basis_sinograms: Vec<f64>,
    pub max_newton_iterations: usize,
    pub max_residual: f64,
    pub n_unconverged: usize,
    pub n_flagged: usize,
}

/// Two-step decomposition for a scan shared by all spectra: per-ray Newton
/// to the basis sinograms, then FBP of each.
pub fn ddd_solve(model: &ForwardModel, g: &MultiSinogram, n_newton: usize) -> Result<DddResult> {
    require_square(model)?;
    g.check(model.projectors())?;
    let geom0 = model.projector(0).geometry().clone();
    if model.projectors().iter().any(|p| *p.geometry() != geom0) {
        return Err(Error::InvalidGeometry("two-step decomposition needs one scan shared by all spectra".into()));
    }
    let nd = model.n_materials();
    let targets = stack_targets(&g.sinos.iter().collect::<Vec<_>>());
    let opts = NewtonOptions {
        max_iters: n_newton,
        ..NewtonOptions::default()
    };
    let zero = vec![0.0; nd];
    let results: Vec<_> = targets
        .par_chunks(nd)
        .map(|t| newton_ray(model.system(), t, &zero, &opts))
        .collect();
    let mut a = Vec::with_capacity(targets.len());
    let (mut max_it, mut max_res, mut unconv, mut flagged) = (0, 0.0f64, 0, 0);
    for r in &results {
        a.extend_from_slice(&r.a);
        max_it = max_it.max(r.iterations);
        max_res = max_res.max(r.residual);
        unconv += usize::from(!r.converged);
        flagged += usize::from(r.flagged);
    }
    let op = FbpOperator::new(model.grid(), &geom0, 1.0)?;
    let f = BasisImageSet::new(model.grid().clone(), reconstruct(&op, &geom0, &a, nd)?)?;
    Ok(DddResult {
        f,
        basis_sinograms: a,
        max_newton_iterations: max_it,
        max_residual: max_res,
        n_unconverged: unconv,
        n_flagged: flagged,
    })
}
