//! The simplified-Newton solver and the baselines it is compared with.

mod afire;
mod data_domain;
mod newton;
mod nkm;

pub use afire::{afire_solve, afire_solve_from, afire_step, AfireOperator};
pub use data_domain::{ddd_solve, ifbp_solve, interpolate_views, intrpl_solve, DddResult};
pub use newton::{newton_ray, newton_step, NewtonOptions, NewtonResult};
pub use nkm::{nkm_solve, nkm_solve_from};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{metrics, IterationRecord};
use crate::error::{Error, Result};
use crate::forward::{BasisImageSet, MultiSinogram};
use crate::projector::InverseMethod;

fn default_max_iters() -> usize {
    100
}

fn default_inverse() -> Vec<InverseMethod> {
    vec![InverseMethod::default()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Q x D line-integral constants defining the special point; empty means zero.
    #[serde(default)]
    pub constants: Vec<Vec<f64>>,
    /// One method for every spectrum, or one per spectrum.
    #[serde(default = "default_inverse")]
    pub inverse: Vec<InverseMethod>,
    /// Stop once `Delta_f <= delta_f_tol`; zero disables the test.
    #[serde(default)]
    pub delta_f_tol: f64,
    /// Stop once `RE_g <= residual_tol`; zero disables the test.
    #[serde(default)]
    pub residual_tol: f64,
    /// Stop once `RE_f <= re_f_tol`; needs a truth, zero disables the test.
    #[serde(default)]
    pub re_f_tol: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            constants: Vec::new(),
            inverse: default_inverse(),
            delta_f_tol: 0.0,
            residual_tol: 0.0,
            re_f_tol: 0.0,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::config("max_iters", "must be at least 1"));
        }
        if !(self.delta_f_tol >= 0.0) {
            return Err(Error::config("delta_f_tol", "must be >= 0"));
        }
        if !(self.residual_tol >= 0.0) {
            return Err(Error::config("residual_tol", "must be >= 0"));
        }
        if !(self.re_f_tol >= 0.0) {
            return Err(Error::config("re_f_tol", "must be >= 0"));
        }
        if self.inverse.is_empty() {
            return Err(Error::config("inverse", "needs at least one method"));
        }
        for m in &self.inverse {
            match *m {
                InverseMethod::Fbp { bandwidth } if !(bandwidth > 0.0 && bandwidth <= 1.0) => {
                    return Err(Error::config("inverse.bandwidth", "must lie in (0, 1]"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// The constants as a Q x D table, zero when unset.
    pub fn constants_or_zero(&self, nq: usize, nd: usize) -> Result<Vec<Vec<f64>>> {
        if self.constants.is_empty() {
            return Ok(vec![vec![0.0; nd]; nq]);
        }
        if self.constants.len() != nq || self.constants.iter().any(|r| r.len() != nd) {
            return Err(Error::config("constants", format!("expected a {nq} x {nd} table")));
        }
        Ok(self.constants.clone())
    }

    pub fn inverse_for(&self, q: usize) -> InverseMethod {
        if self.inverse.len() == 1 {
            self.inverse[0]
        } else {
            self.inverse[q]
        }
    }
}

/// A Q x D table of constants drawn uniformly from [0, 1).
pub fn random_constants(nq: usize, nd: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..nq).map(|_| (0..nd).map(|_| rng.gen::<f64>()).collect()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    DeltaF,
    Residual,
    Accuracy,
    NotStarted,
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub f: BasisImageSet,
    /// Record `k` describes iterate `f^k` for `k < records.len()`.
    pub records: Vec<IterationRecord>,
    /// RE_f and RE_g of the returned iterate.
    pub last: IterationRecord,
    pub stop: StopReason,
}

impl SolveResult {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub(crate) fn new(
        f: BasisImageSet,
        k_f: &MultiSinogram,
        records: Vec<IterationRecord>,
        truth: Option<&BasisImageSet>,
        g: &MultiSinogram,
        stop: StopReason,
    ) -> Self {
        let mut last = metrics(&f, None, truth, k_f, None, g);
        last.k = records.len();
        last.seconds = records.last().map_or(0.0, |r| r.seconds);
        SolveResult {
            f,
            records,
            last,
            stop,
        }
    }
}

pub(crate) fn abort(error: Error, partial: SolveResult) -> Error {
    Error::SolverAborted {
        error: Box::new(error),
        partial: Box::new(partial),
    }
}

/// Checked after iteration `k`: `rec` describes `f^k`, the `next` values `f^{k+1}`.
pub(crate) fn stop_reason(cfg: &SolverConfig, rec: &IterationRecord, re_g_next: Option<f64>, re_f_next: Option<f64>) -> Option<StopReason> {
    let (cfg_delta, cfg_res) = (cfg.delta_f_tol, cfg.residual_tol);
    if cfg_delta > 0.0 {
        if let Some(d) = rec.delta_f {
            if d <= cfg_delta {
                return Some(StopReason::DeltaF);
            }
        }
    }
    if cfg_res > 0.0 {
        if let Some(r) = re_g_next {
            if r <= cfg_res {
                return Some(StopReason::Residual);
            }
        }
    }
    if cfg.re_f_tol > 0.0 {
        if let Some(r) = re_f_next {
            if r <= cfg.re_f_tol {
                return Some(StopReason::Accuracy);
            }
        }
    }
    None
}

pub(crate) fn first_non_finite(f: &BasisImageSet) -> Option<usize> {
    f.images.iter().position(|img| img.iter().any(|v| !v.is_finite()))
}
