//! Per-ray Newton iteration on the small system `h_q(a) = t_q`, q = 1..Q.

use nalgebra::{DMatrix, DVector};

use crate::spectral::SpectralSystem;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    pub max_iters: usize,
    /// Converged once the max-norm residual is at or below this value.
    pub tol: f64,
    /// Halve the step (up to 30 times) while the residual would grow.
    pub damping: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iters: 10,
            tol: 1e-12,
            damping: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonResult {
    pub a: Vec<f64>,
    pub iterations: usize,
    /// Max-norm residual at `a`.
    pub residual: f64,
    pub converged: bool,
    /// A singular Jacobian or a non-finite trial point was met.
    pub flagged: bool,
}

const MAX_HALVINGS: usize = 30;

fn residual(system: &SpectralSystem, targets: &[f64], a: &[f64], out: &mut [f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (q, t) in targets.iter().enumerate() {
        out[q] = system.transfer_unchecked(q, a) - t;
        worst = worst.max(out[q].abs());
    }
    if worst.is_finite() {
        worst
    } else {
        f64::INFINITY
    }
}

fn residual_norm(system: &SpectralSystem, targets: &[f64], a: &[f64]) -> f64 {
    let mut r = vec![0.0; targets.len()];
    let mut s = 0.0;
    residual(system, targets, a, &mut r);
    for v in &r {
        s += v * v;
    }
    if s.is_finite() {
        s.sqrt()
    } else {
        f64::INFINITY
    }
}

/// Newton direction `-J(a)^-1 r(a)` with `||r(a)||`, or `None` when the
/// Jacobian is singular.
fn direction(system: &SpectralSystem, targets: &[f64], a: &[f64]) -> Option<(Vec<f64>, f64)> {
    let (nq, nd) = (targets.len(), a.len());
    let mut jac = DMatrix::zeros(nq, nd);
    let mut r = DVector::zeros(nq);
    let mut grad = vec![0.0; nd];
    for q in 0..nq {
        r[q] = system.transfer_grad_unchecked(q, a, &mut grad) - targets[q];
        for d in 0..nd {
            jac[(q, d)] = grad[d];
        }
    }
    let base = r.norm();
    if nq == 2 && nd == 2 {
        let det = jac[(0, 0)] * jac[(1, 1)] - jac[(0, 1)] * jac[(1, 0)];
        let scale = jac.norm().powi(2);
        if !(det.abs() > 1e-14 * scale) {
            return None;
        }
        let d0 = -(jac[(1, 1)] * r[0] - jac[(0, 1)] * r[1]) / det;
        let d1 = -(-jac[(1, 0)] * r[0] + jac[(0, 0)] * r[1]) / det;
        return Some((vec![d0, d1], base));
    }
    let lu = jac.lu();
    let step = lu.solve(&(-r))?;
    if step.iter().all(|v| v.is_finite()) {
        Some((step.iter().copied().collect(), base))
    } else {
        None
    }
}

/// One (optionally damped) Newton step. Returns the new point and whether it
/// had to be flagged.
pub fn newton_step(system: &SpectralSystem, targets: &[f64], a: &[f64], damping: bool) -> (Vec<f64>, bool) {
    let (dir, base) = match direction(system, targets, a) {
        Some(d) => d,
        None => return (a.to_vec(), true),
    };
    let base = if base.is_finite() { base } else { f64::INFINITY };
    let mut t = 1.0;
    let mut flagged = false;
    for _ in 0..=MAX_HALVINGS {
        let trial: Vec<f64> = a.iter().zip(&dir).map(|(x, d)| x + t * d).collect();
        let rn = residual_norm(system, targets, &trial);
        if rn.is_finite() && (!damping || rn <= base) {
            return (trial, flagged);
        }
        if !rn.is_finite() {
            flagged = true;
        }
        t *= 0.5;
    }
    (a.to_vec(), true)
}

/// Newton from `a0` until the residual drops to `opts.tol`, stops improving,
/// or `opts.max_iters` steps were taken.
pub fn newton_ray(system: &SpectralSystem, targets: &[f64], a0: &[f64], opts: &NewtonOptions) -> NewtonResult {
    let mut r = vec![0.0; targets.len()];
    let mut a = a0.to_vec();
    let mut res = residual(system, targets, &a, &mut r);
    let mut flagged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters && res > opts.tol {
        let (next, fl) = newton_step(system, targets, &a, opts.damping);
        flagged |= fl;
        iterations += 1;
        if next == a {
            break;
        }
        a = next;
        res = residual(system, targets, &a, &mut r);
    }
    NewtonResult {
        converged: res <= opts.tol,
        a,
        iterations,
        residual: res,
        flagged,
    }
}
