use std::sync::Arc;

use super::{abort, first_non_finite, stop_reason, SolveResult, SolverConfig, StopReason};
use crate::diagnostics::MetricRecorder;
use crate::error::{check_len, Error, Result};
use crate::forward::{BasisImageSet, ForwardModel, MultiSinogram};
use crate::projector::{ApproxInverse, InverseStatus, Sinogram};
use crate::spectral::{compute_phi, PhiMatrix};

/// The frozen update map `Lambda -> (phi^-1 (x) P^+) Lambda`.
#[derive(Debug)]
pub struct AfireOperator {
    pub phi: PhiMatrix,
    inverses: Vec<ApproxInverse>,
}

impl AfireOperator {
    pub fn new(model: &ForwardModel, cfg: &SolverConfig) -> Result<Self> {
        let (nq, nd) = (model.n_spectra(), model.n_materials());
        if nq != nd {
            return Err(Error::InvalidParameter(format!(
                "the update needs as many spectra as materials (Q = {nq}, D = {nd})"
            )));
        }
        if cfg.inverse.len() != 1 && cfg.inverse.len() != nq {
            return Err(Error::config("inverse", format!("give 1 or {nq} methods")));
        }
        let phi = compute_phi(model.system(), &cfg.constants_or_zero(nq, nd)?)?;
        let inverses = (0..nq)
            .map(|q| ApproxInverse::new(cfg.inverse_for(q), Arc::clone(model.projector(q))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { phi, inverses })
    }

    /// Per-material step `sum_q (phi^-1)_dq P_q^+ Lambda_q`. A non-finite
    /// inverse output is reported with its spectrum index.
    pub fn step(&self, residuals: &[Sinogram]) -> Result<(Vec<Vec<f64>>, Vec<InverseStatus>)> {
        check_len("residual sinograms", self.inverses.len(), residuals.len())?;
        let inv = self.phi.inverse.as_ref().expect("square phi has an inverse");
        let mut ys = Vec::with_capacity(residuals.len());
        let mut statuses = Vec::with_capacity(residuals.len());
        for (q, (op, lam)) in self.inverses.iter().zip(residuals).enumerate() {
            let (y, st) = op.apply(lam)?;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    solver: "afire",
                    iteration: 0,
                    spectrum: q,
                });
            }
            ys.push(y);
            statuses.push(st);
        }
        let nd = inv.nrows();
        let n = ys[0].len();
        let mut out = vec![vec![0.0; n]; nd];
        for (d, o) in out.iter_mut().enumerate() {
            for (q, y) in ys.iter().enumerate() {
                let c = inv[(d, q)];
                for (oi, yi) in o.iter_mut().zip(y) {
                    *oi += c * yi;
                }
            }
        }
        Ok((out, statuses))
    }
}

/// One update from `f` with `k_f = K(f)`.
pub fn afire_step(op: &AfireOperator, f: &BasisImageSet, k_f: &MultiSinogram, g: &MultiSinogram) -> Result<BasisImageSet> {
    let residuals: Vec<Sinogram> = g
        .sinos
        .iter()
        .zip(&k_f.sinos)
        .map(|(gq, kq)| Sinogram {
            values: gq.values.iter().zip(&kq.values).map(|(a, b)| a - b).collect(),
            n_views: gq.n_views,
            n_det: gq.n_det,
        })
        .collect();
    let (step, _) = op.step(&residuals)?;
    let mut next = f.clone();
    for (img, s) in next.images.iter_mut().zip(&step) {
        for (v, d) in img.iter_mut().zip(s) {
            *v -= d;
        }
    }
    Ok(next)
}

/// AFIRE from the zero image.
pub fn afire_solve(model: &ForwardModel, g: &MultiSinogram, cfg: &SolverConfig, truth: Option<&BasisImageSet>) -> Result<SolveResult> {
    let f0 = BasisImageSet::zeros(model.grid(), model.n_materials());
    afire_solve_from(model, g, cfg, truth, f0)
}

pub fn afire_solve_from(
    model: &ForwardModel,
    g: &MultiSinogram,
    cfg: &SolverConfig,
    truth: Option<&BasisImageSet>,
    f0: BasisImageSet,
) -> Result<SolveResult> {
    cfg.validate()?;
    model.check_images(&f0)?;
    g.check(model.projectors())?;
    let op = AfireOperator::new(model, cfg)?;

    let mut rec = MetricRecorder::new(g, truth);
    let mut f = f0;
    let mut k_f = model.forward(&f)?;
    let mut stop = StopReason::MaxIters;
    for it in 0..cfg.max_iters {
        let next = match afire_step(&op, &f, &k_f, g) {
            Ok(n) => n,
            Err(Error::NonFinite { spectrum, .. }) => {
                let err = Error::NonFinite {
                    solver: "afire",
                    iteration: it,
                    spectrum,
                };
                return Err(abort(err, SolveResult::new(f, &k_f, rec.finish(), truth, g, StopReason::MaxIters)));
            }
            Err(e) => return Err(e),
        };
        if let Some(d) = first_non_finite(&next) {
            let err = Error::NonFinite {
                solver: "afire",
                iteration: it,
                spectrum: d,
            };
            return Err(abort(err, SolveResult::new(f, &k_f, rec.finish(), truth, g, StopReason::MaxIters)));
        }
        let k_next = model.forward(&next)?;
        let r = rec.push(&f, &next, &k_f, &k_next);
        let re_g_next = Some(k_next.distance(g) / g.norm()).filter(|v| v.is_finite());
        let re_f_next = truth.map(|t| next.distance(t) / t.norm()).filter(|v| v.is_finite());
        f = next;
        k_f = k_next;
        if let Some(s) = stop_reason(cfg, &r, re_g_next, re_f_next) {
            stop = s;
            break;
        }
    }
    Ok(SolveResult::new(f, &k_f, rec.finish(), truth, g, stop))
}
