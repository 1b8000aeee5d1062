//! Criterion checks cheap enough to run both as ordinary tests and inside the
//! acceptance run.

use std::f64::consts::PI;
use std::time::Instant;

use afire::diagnostics::{convergence_certificate, full_jacobian};
use afire::forward::{forward, gradient_row, ray_transfer, BasisImageSet, ForwardModel};
use afire::geometry::{make_parallel_geometry, ImageGrid, ScanGeometry};
use afire::phantoms::random_truth_with;
use afire::projector::{FbpOperator, InverseMethod, Projector, Sinogram};
use afire::solvers::{afire_solve, SolverConfig};
use afire::spectral::SpectralSystem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dd_sum, oracle_line_integrals, oracle_row, oracle_transfer, rel_inf, tiny_instance, Dd};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs()
    }
}

/// forward, gradient_row and ray_transfer against double-double direct sums.
pub fn oracle_equivalence(n_instances: u64) -> Outcome {
    let t0 = Instant::now();
    let (mut fwd, mut grad, mut xfer) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..n_instances {
        let inst = tiny_instance(1000 + seed);
        let sys = &inst.system;
        let k = forward(sys, &inst.geometries, &inst.f).unwrap();
        let n = inst.grid.n_pixels();
        for (q, geom) in inst.geometries.iter().enumerate() {
            for j in 0..geom.n_rays() {
                let row = oracle_row(&inst.grid, geom, j);
                let a = oracle_line_integrals(&row, &inst.f);
                let (kq, wb) = oracle_transfer(sys, q, &a);
                fwd = fwd.max(rel(k.sinos[q].values[j], kq.to_f64()));

                let g = gradient_row(sys, geom, &inst.f, q, j).unwrap().to_dense(sys.n_materials() * n);
                let want: Vec<f64> = (0..sys.n_materials())
                    .flat_map(|d| row.iter().map(move |&l| (l, d)))
                    .map(|(l, d)| wb[d].mul_f(l).neg().to_f64())
                    .collect();
                grad = grad.max(rel_inf(&g, &want));

                let af: Vec<f64> = a.iter().map(|v| v.to_f64()).collect();
                let back: Vec<Dd> = af.iter().map(|&v| Dd::new(v)).collect();
                let h = ray_transfer(sys, q, &af).unwrap();
                xfer = xfer.max(rel(h, oracle_transfer(sys, q, &back).0.to_f64()));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let worst = fwd.max(grad).max(xfer);
    Outcome::new(
        worst <= 1e-12 && secs < 5.0,
        format!("max rel err forward {fwd:.2e}, gradient_row {grad:.2e}, ray_transfer {xfer:.2e}; {secs:.2} s"),
    )
}

/// Analytic gradient rows against central differences with step 1e-5.
pub fn gradient_check(n_instances: u64) -> Outcome {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..n_instances {
        let inst = tiny_instance(2000 + seed);
        let sys = &inst.system;
        let n = inst.grid.n_pixels();
        let nd = sys.n_materials();
        for (q, geom) in inst.geometries.iter().enumerate() {
            let model = ForwardModel::new(sys, &inst.grid, &inst.geometries).unwrap();
            let eval = |f: &BasisImageSet| model.forward(f).unwrap().sinos.swap_remove(q).values;
            let mut fd = vec![vec![0.0; nd * n]; geom.n_rays()];
            for col in 0..nd * n {
                let mut fp = inst.f.clone();
                let mut fm = inst.f.clone();
                fp.images[col / n][col % n] += h;
                fm.images[col / n][col % n] -= h;
                let (kp, km) = (eval(&fp), eval(&fm));
                for j in 0..geom.n_rays() {
                    fd[j][col] = (kp[j] - km[j]) / (2.0 * h);
                }
            }
            for j in 0..geom.n_rays() {
                let g = gradient_row(sys, geom, &inst.f, q, j).unwrap().to_dense(nd * n);
                worst = worst.max(rel_inf(&fd[j], &g));
            }
        }
    }
    Outcome::new(worst <= 1e-6, format!("max rel err {worst:.2e} over {n_instances} instances"))
}

pub fn small_parallel_pair(n_views: usize, n_det: usize, half: f64) -> Vec<ScanGeometry> {
    let w = half * 1.45;
    vec![
        make_parallel_geometry(n_views, 0.0, PI, n_det, -w, w).unwrap().into(),
        make_parallel_geometry(n_views, PI / (2.0 * n_views as f64), PI, n_det, -w, w).unwrap().into(),
    ]
}

/// full_jacobian at f = 0 with C = 0 against `-P (x) phi` assembled from the
/// projector rows and a double-double phi.
pub fn jacobian_structure() -> Outcome {
    let sys = afire::spectral::default_system();
    let grid = ImageGrid::square(5, 5.0).unwrap();
    let geoms = small_parallel_pair(6, 7, 5.0);
    let zero = BasisImageSet::zeros(&grid, 2);
    let j = full_jacobian(&sys, &geoms, &zero).unwrap();
    let n = grid.n_pixels();
    let mut worst = 0.0f64;
    let mut r0 = 0;
    for (q, geom) in geoms.iter().enumerate() {
        let norm = dd_sum(sys.spectrum(q).iter().map(|&v| Dd::new(v)));
        let phi: Vec<f64> = (0..2)
            .map(|d| {
                dd_sum(sys.spectrum(q).iter().zip(sys.mac(d)).map(|(&s, &b)| Dd::new(s).mul_f(b)))
                    .div(norm)
                    .to_f64()
            })
            .collect();
        let p = Projector::new(&grid, geom);
        for jj in 0..geom.n_rays() {
            let row = p.row(jj);
            let mut dense = vec![0.0; n];
            for (&i, &l) in row.indices.iter().zip(&row.lengths) {
                dense[i] = l;
            }
            for d in 0..2 {
                for i in 0..n {
                    let want = -phi[d] * dense[i];
                    let got = j[(r0 + jj, d * n + i)];
                    let e = if want == 0.0 { got.abs() } else { rel(got, want) };
                    worst = worst.max(e);
                }
            }
        }
        r0 += geom.n_rays();
    }
    Outcome::new(worst <= 1e-12, format!("max entrywise rel err {worst:.2e} on a {}x{} Jacobian", j.nrows(), j.ncols()))
}

/// One material, one bin, square invertible P: one iteration suffices.
pub fn monochromatic_one_step() -> Outcome {
    let sys = SpectralSystem::from_tables(60.0, 1.0, vec![vec![1.0]], vec![vec![0.2]]).unwrap();
    let grid = ImageGrid::square(2, 1.0).unwrap();
    let geom: ScanGeometry = make_parallel_geometry(2, 0.5, 3.0, 2, -0.25, 0.35).unwrap().into();
    let model = ForwardModel::new(&sys, &grid, std::slice::from_ref(&geom)).unwrap();
    let p = Projector::new(&grid, &geom);
    let mut dense = nalgebra::DMatrix::zeros(p.n_rays(), grid.n_pixels());
    for j in 0..p.n_rays() {
        p.visit_row(j, |i, l| dense[(j, i)] = l);
    }
    let sv = dense.svd(false, false).singular_values;
    let cond = sv.max() / sv.min();
    let truth = random_truth_with(&grid, 1, 5);
    let g = model.forward(&truth).unwrap();
    let cfg = SolverConfig {
        max_iters: 1,
        inverse: vec![InverseMethod::Cg { n_inner: grid.n_pixels() }],
        ..SolverConfig::default()
    };
    let res = afire_solve(&model, &g, &cfg, Some(&truth)).unwrap();
    let re = res.last.re_f.unwrap();
    Outcome::new(
        res.iterations() == 1 && re <= 1e-10,
        format!("RE_f after 1 iteration {re:.2e} (P is {}x{}, cond {cond:.1})", p.n_rays(), grid.n_pixels()),
    )
}

/// The certificate inequality holds on every tested direction and eta = 0 for one bin.
pub fn certificate_check() -> Outcome {
    let sys = afire::spectral::default_system();
    let grid = ImageGrid::square(4, 5.0).unwrap();
    let geoms = small_parallel_pair(6, 7, 5.0);
    let samples: Vec<BasisImageSet> = (0..5)
        .map(|s| {
            let mut f = random_truth_with(&grid, 2, 40 + s);
            f.images.iter_mut().flatten().for_each(|v| *v *= 0.05);
            f
        })
        .collect();
    let c = vec![vec![0.0; 2]; 2];
    let cert = convergence_certificate(&sys, &geoms, &c, &samples, 20, 9).unwrap();

    let mono = SpectralSystem::from_tables(60.0, 1.0, vec![vec![1.0]], vec![vec![0.2]]).unwrap();
    let mono_samples: Vec<BasisImageSet> = (0..3).map(|s| random_truth_with(&grid, 1, 60 + s)).collect();
    let mono_cert = convergence_certificate(&mono, &geoms[..1], &[vec![0.0]], &mono_samples, 20, 9).unwrap();

    Outcome::new(
        cert.inequality_holds && !cert.rank_deficient && cert.n_directions == 20 && mono_cert.eta_tilde == 0.0 && mono_cert.inequality_holds,
        format!(
            "eta {:.3e}, kappa_F {:.3e}, gamma {:.3e}, max ratio {:.3e}, holds {}; M = 1 eta {}",
            cert.eta_tilde, cert.kappa_f, cert.gamma, cert.max_observed_ratio, cert.inequality_holds, mono_cert.eta_tilde
        ),
    )
}

pub fn disk(grid: &ImageGrid, radius: f64) -> Vec<f64> {
    (0..grid.n_pixels())
        .map(|i| {
            let (x, y) = grid.pixel_center(i);
            if x * x + y * y <= radius * radius {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Worst adjointness gap `|<Pu, w> - <u, P^T w>| / (||Pu|| ||w||)` over random pairs.
pub fn adjoint_gap(grid: &ImageGrid, geom: &ScanGeometry, trials: usize, seed: u64) -> f64 {
    let p = Projector::new(grid, geom);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let u: Vec<f64> = (0..grid.n_pixels()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..p.n_rays()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pu = p.apply(&u).unwrap();
        let ptw = p.adjoint(&w).unwrap();
        let lhs: f64 = pu.iter().zip(&w).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&ptw).map(|(a, b)| a * b).sum();
        let scale = pu.iter().map(|v| v * v).sum::<f64>().sqrt() * w.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    worst
}

/// Disk round trip through projection and FBP, plus adjointness.
pub fn fbp_quality() -> Outcome {
    let grid = ImageGrid::square(128, 5.0).unwrap();
    let geom: ScanGeometry = make_parallel_geometry(384, 0.0, PI, 384, -7.05, 7.05).unwrap().into();
    let truth = disk(&grid, 3.0);
    let p = Projector::new(&grid, &geom);
    let sino = Sinogram::from_values(&geom, p.apply(&truth).unwrap()).unwrap();
    let rec = FbpOperator::new(&grid, &geom, 1.0).unwrap().apply(&sino).unwrap();
    let num: f64 = rec.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    let re = num / den;
    let small = ImageGrid::square(16, 5.0).unwrap();
    let adj = adjoint_gap(&small, &make_parallel_geometry(24, 0.1, PI, 23, -7.05, 7.05).unwrap().into(), 10, 3);
    Outcome::new(re <= 0.05 && adj <= 1e-10, format!("disk round trip RE {re:.3e}, adjointness gap {adj:.2e}"))
}
