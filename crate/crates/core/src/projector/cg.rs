use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{FbpOperator, Projector, Sinogram};
use crate::error::{check_len, Result};
use crate::geometry::{ImageGrid, ScanGeometry};

/// How `P_q^+` is realized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InverseMethod {
    Fbp { bandwidth: f64 },
    Cg { n_inner: usize },
}

impl Default for InverseMethod {
    fn default() -> Self {
        InverseMethod::Fbp { bandwidth: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InverseStatus {
    pub iterations: usize,
    /// A search direction with zero curvature ended CG early.
    pub breakdown: bool,
    /// The normal-equation residual vanished exactly.
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct CgReport {
    pub x: Vec<f64>,
    pub status: InverseStatus,
    /// `||b - A x_k||` for k = 0..=iterations.
    pub residual_norms: Vec<f64>,
    /// `||A^T (A x_k - b)||` for k = 0..=iterations.
    pub normal_residual_norms: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients on the normal equations `A^T A x = A^T b` (CGLS form),
/// started from zero and run for at most `n_inner` iterations.
pub fn cgls(projector: &Projector, rhs: &[f64], n_inner: usize) -> Result<CgReport> {
    check_len("cg right-hand side", projector.n_rays(), rhs.len())?;
    let n = projector.grid().n_pixels();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut s = projector.adjoint(&r)?;
    let mut p = s.clone();
    let mut gamma = dot(&s, &s);
    let mut status = InverseStatus::default();
    let mut residual_norms = vec![dot(&r, &r).sqrt()];
    let mut normal_residual_norms = vec![gamma.sqrt()];

    for _ in 0..n_inner {
        if gamma == 0.0 {
            status.converged = true;
            break;
        }
        let q = projector.apply(&p)?;
        let curvature = dot(&q, &q);
        if !(curvature > 0.0) {
            status.breakdown = true;
            break;
        }
        let alpha = gamma / curvature;
        for (xi, pi) in x.iter_mut().zip(&p) {
            *xi += alpha * pi;
        }
        for (ri, qi) in r.iter_mut().zip(&q) {
            *ri -= alpha * qi;
        }
        s = projector.adjoint(&r)?;
        let gamma_next = dot(&s, &s);
        let beta = gamma_next / gamma;
        for (pi, si) in p.iter_mut().zip(&s) {
            *pi = si + beta * *pi;
        }
        gamma = gamma_next;
        status.iterations += 1;
        residual_norms.push(dot(&r, &r).sqrt());
        normal_residual_norms.push(gamma.sqrt());
    }
    if gamma == 0.0 {
        status.converged = true;
    }
    Ok(CgReport {
        x,
        status,
        residual_norms,
        normal_residual_norms,
    })
}

/// A prepared approximate inverse of one projection matrix.
#[derive(Debug)]
pub enum ApproxInverse {
    Fbp(FbpOperator),
    Cg { projector: Arc<Projector>, n_inner: usize },
}

impl ApproxInverse {
    pub fn new(method: InverseMethod, projector: Arc<Projector>) -> Result<Self> {
        Ok(match method {
            InverseMethod::Fbp { bandwidth } => {
                ApproxInverse::Fbp(FbpOperator::new(projector.grid(), projector.geometry(), bandwidth)?)
            }
            InverseMethod::Cg { n_inner } => ApproxInverse::Cg { projector, n_inner },
        })
    }

    pub fn apply(&self, sino: &Sinogram) -> Result<(Vec<f64>, InverseStatus)> {
        match self {
            ApproxInverse::Fbp(op) => Ok((op.apply(sino)?, InverseStatus::default())),
            ApproxInverse::Cg { projector, n_inner } => {
                sino.check(projector.geometry())?;
                let report = cgls(projector, &sino.values, *n_inner)?;
                Ok((report.x, report.status))
            }
        }
    }
}

/// `P^+ sino` by the chosen method.
pub fn approx_inverse(
    sino: &Sinogram,
    geometry: &ScanGeometry,
    grid: &ImageGrid,
    method: InverseMethod,
) -> Result<(Vec<f64>, InverseStatus)> {
    let projector = Arc::new(Projector::new(grid, geometry));
    ApproxInverse::new(method, projector)?.apply(sino)
}
