//! Shared helpers for the integration tests and the acceptance run: a
//! double-double arithmetic oracle, an independent ray tracer and random
//! tiny instances.
#![allow(dead_code)]

pub mod checks;

use std::path::{Path, PathBuf};

use afire::forward::BasisImageSet;
use afire::geometry::{make_parallel_geometry, ImageGrid, ScanGeometry};
use afire::spectral::SpectralSystem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

fn renorm(hi: f64, lo: f64) -> Dd {
    let (h, l) = two_sum(hi, lo);
    Dd { hi: h, lo: l }
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = {
            let r = renorm(s, e + t);
            (r.hi, r.lo)
        };
        renorm(s, e + f)
    }

    pub fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        renorm(p, e + self.hi * o.lo + self.lo * o.hi)
    }

    pub fn mul_f(self, v: f64) -> Dd {
        self.mul(Dd::new(v))
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul_f(q1));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul_f(q2));
        let q3 = r.hi / o.hi;
        renorm(q1, q2).add(Dd::new(q3))
    }

    pub fn exp(self) -> Dd {
        if self.hi == 0.0 {
            return Dd::ONE;
        }
        let n = (self.hi / LN2.hi).round();
        let r = self.sub(LN2.mul_f(n));
        // exp(r) = exp(r / 2^10)^(2^10)
        let x = r.mul_f(1.0 / 1024.0);
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for k in 1..30 {
            term = term.mul(x).mul(Dd::ONE.div(Dd::new(k as f64)));
            sum = sum.add(term);
            if term.hi.abs() < 1e-40 {
                break;
            }
        }
        for _ in 0..10 {
            sum = sum.mul(sum);
        }
        let scale = 2f64.powi(n as i32);
        Dd {
            hi: sum.hi * scale,
            lo: sum.lo * scale,
        }
    }

    pub fn ln(self) -> Dd {
        assert!(self.hi > 0.0);
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..3 {
            // y <- y + x exp(-y) - 1
            y = y.add(self.mul(y.neg().exp())).sub(Dd::ONE);
        }
        y
    }
}

pub fn dd_sum(vals: impl IntoIterator<Item = Dd>) -> Dd {
    vals.into_iter().fold(Dd::ZERO, Dd::add)
}

/// Chord length of the line `origin + t * dir` through the box, by slab clipping.
pub fn chord(origin: [f64; 2], dir: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> f64 {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..2 {
        if dir[k] == 0.0 {
            if origin[k] < lo[k] || origin[k] > hi[k] {
                return 0.0;
            }
        } else {
            let a = (lo[k] - origin[k]) / dir[k];
            let b = (hi[k] - origin[k]) / dir[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    (t1 - t0).max(0.0)
}

/// Dense row of intersection lengths of ray `j`, traced pixel by pixel.
pub fn oracle_row(grid: &ImageGrid, geometry: &ScanGeometry, j: usize) -> Vec<f64> {
    let nd = geometry.n_det();
    let ray = geometry.ray(j / nd, j % nd);
    let (hw, hh) = (0.5 * grid.pixel_width(), 0.5 * grid.pixel_height());
    (0..grid.n_pixels())
        .map(|i| {
            let (x, y) = grid.pixel_center(i);
            chord(ray.origin, ray.direction, [x - hw, y - hh], [x + hw, y + hh])
        })
        .collect()
}

pub fn oracle_line_integrals(row: &[f64], f: &BasisImageSet) -> Vec<Dd> {
    f.images
        .iter()
        .map(|img| dd_sum(row.iter().zip(img).map(|(&l, &v)| {
            let (p, e) = two_prod(l, v);
            Dd { hi: p, lo: e }
        })))
        .collect()
}

/// Transfer value and weighted attenuation `w . b_d` in double-double.
pub fn oracle_transfer(system: &SpectralSystem, q: usize, a: &[Dd]) -> (Dd, Vec<Dd>) {
    let nd = system.n_materials();
    // the model assumes weights summing to one; normalize exactly
    let norm = dd_sum(system.spectrum(q).iter().map(|&v| Dd::new(v)));
    let s: Vec<Dd> = system.spectrum(q).iter().map(|&v| Dd::new(v).div(norm)).collect();
    let terms: Vec<Dd> = (0..system.n_bins())
        .map(|m| {
            let e = dd_sum((0..nd).map(|d| a[d].mul_f(system.mac(d)[m]))).neg();
            e.exp().mul(s[m])
        })
        .collect();
    let total = dd_sum(terms.iter().copied());
    let wb = (0..nd)
        .map(|d| dd_sum(terms.iter().enumerate().map(|(m, t)| t.mul_f(system.mac(d)[m]))).div(total))
        .collect();
    // exactly ln 1 for normalized weights; the double-double division above
    // leaves a residue near 1e-33
    let k = if a.iter().all(|v| v.hi == 0.0 && v.lo == 0.0) { Dd::ZERO } else { total.ln() };
    (k, wb)
}

pub struct TinyInstance {
    pub system: SpectralSystem,
    pub grid: ImageGrid,
    pub geometries: Vec<ScanGeometry>,
    pub f: BasisImageSet,
}

pub fn random_system(rng: &mut ChaCha8Rng, nq: usize, nd: usize, n_bins: usize) -> SpectralSystem {
    let spectra = (0..nq).map(|_| (0..n_bins).map(|_| rng.gen_range(0.05..1.0)).collect()).collect();
    let macs = (0..nd).map(|_| (0..n_bins).map(|_| rng.gen_range(0.05..1.5)).collect()).collect();
    SpectralSystem::from_tables(20.0, 1.0, spectra, macs).unwrap()
}

/// At most 8 x 8 pixels, at most 10 rays per scan, at most 5 bins.
pub fn tiny_instance(seed: u64) -> TinyInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nq = rng.gen_range(1..=3);
    let nd = rng.gen_range(1..=3);
    let n_bins = rng.gen_range(1..=5);
    let system = random_system(&mut rng, nq, nd, n_bins);
    let n = rng.gen_range(2..=8);
    let half = rng.gen_range(0.5..3.0);
    let grid = ImageGrid::square(n, half).unwrap();
    let geometries = (0..nq)
        .map(|_| {
            let nv = rng.gen_range(1..=3);
            let ndet = rng.gen_range(1..=10 / nv);
            let w = half * 1.5;
            make_parallel_geometry(nv, rng.gen_range(0.0..3.1), rng.gen_range(0.2..3.1), ndet, -w * rng.gen_range(0.3..1.0), w * rng.gen_range(0.3..1.0))
                .unwrap()
                .into()
        })
        .collect();
    let images = (0..nd).map(|_| (0..grid.n_pixels()).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let f = BasisImageSet::new(grid.clone(), images).unwrap();
    TinyInstance {
        system,
        grid,
        geometries,
        f,
    }
}

pub fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    let den = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let num = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn bundled_config(name: &str) -> PathBuf {
    crate_dir().join("configs").join(format!("{name}.toml"))
}

/// Loads a bundled config with its output redirected under `out`.
pub fn bundled_into(name: &str, out: &Path) -> afire::runner::LoadedConfig {
    let mut loaded = afire::runner::load_config(bundled_config(name)).unwrap();
    loaded.config.output_dir = out.join(name).to_string_lossy().into_owned();
    loaded
}
