use super::{abort, first_non_finite, SolveResult, StopReason};
use crate::diagnostics::MetricRecorder;
use crate::error::{Error, Result};
use crate::forward::{BasisImageSet, ForwardModel, MultiSinogram};

const MIN_GRAD_SQ: f64 = 1e-24;

/// Cyclic nonlinear Kaczmarz from the zero image; one iteration is one sweep
/// over every equation, spectrum-major and ray-ascending.
pub fn nkm_solve(model: &ForwardModel, g: &MultiSinogram, max_sweeps: usize, truth: Option<&BasisImageSet>) -> Result<SolveResult> {
    let f0 = BasisImageSet::zeros(model.grid(), model.n_materials());
    nkm_solve_from(model, g, max_sweeps, truth, f0)
}

pub fn nkm_solve_from(
    model: &ForwardModel,
    g: &MultiSinogram,
    max_sweeps: usize,
    truth: Option<&BasisImageSet>,
    f0: BasisImageSet,
) -> Result<SolveResult> {
    model.check_images(&f0)?;
    g.check(model.projectors())?;
    let sys = model.system();
    let nd = model.n_materials();
    let mut rec = MetricRecorder::new(g, truth);
    let mut f = f0;
    let mut k_f = model.forward(&f)?;
    let mut a = vec![0.0; nd];
    let mut scales = vec![0.0; nd];
    let mut cols: Vec<(usize, f64)> = Vec::new();

    for sweep in 0..max_sweeps {
        let mut next = f.clone();
        for q in 0..model.n_spectra() {
            let p = model.projector(q);
            let gq = &g.sinos[q].values;
            for j in 0..p.n_rays() {
                cols.clear();
                p.visit_row(j, |i, l| cols.push((i, l)));
                if cols.is_empty() {
                    continue;
                }
                for (d, ad) in a.iter_mut().enumerate() {
                    let img = &next.images[d];
                    *ad = cols.iter().map(|&(i, l)| l * img[i]).sum();
                }
                let h = sys.transfer_grad_unchecked(q, &a, &mut scales);
                let len_sq: f64 = cols.iter().map(|&(_, l)| l * l).sum();
                let grad_sq = scales.iter().map(|s| s * s).sum::<f64>() * len_sq;
                if !(grad_sq >= MIN_GRAD_SQ) {
                    continue;
                }
                let t = (h - gq[j]) / grad_sq;
                for (d, img) in next.images.iter_mut().enumerate() {
                    let c = t * scales[d];
                    for &(i, l) in &cols {
                        img[i] -= c * l;
                    }
                }
            }
            if first_non_finite(&next).is_some() {
                let err = Error::NonFinite {
                    solver: "nkm",
                    iteration: sweep,
                    spectrum: q,
                };
                return Err(abort(err, SolveResult::new(f, &k_f, rec.finish(), truth, g, StopReason::MaxIters)));
            }
        }
        let k_next = model.forward(&next)?;
        rec.push(&f, &next, &k_f, &k_next);
        f = next;
        k_f = k_next;
    }
    Ok(SolveResult::new(f, &k_f, rec.finish(), truth, g, StopReason::MaxIters))
}
