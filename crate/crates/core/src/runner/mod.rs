//! Experiment runner behind the `afire` command line tool.

pub mod config;
pub mod export;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{load_config, parse_config, ExperimentConfig, LoadedConfig, PhantomSection, SolverName};
pub use export::{export_image, metrics_csv, read_image, read_metrics, stable_metrics_sha256, write_metrics, RawImage};

use crate::diagnostics::{convergence_certificate, metrics, rate_probe, vmi, Certificate, RateProbe};
use crate::error::{Error, Result};
use crate::forward::{add_noise, measured_snr_db, BasisImageSet, ForwardModel};
use crate::geometry::ImageGrid;
use crate::phantoms::{builtin, random_truth_with, rasterize, PhantomSpec};
use crate::solvers::{afire_solve, ddd_solve, ifbp_solve, intrpl_solve, nkm_solve, SolveResult, StopReason};
use crate::spectral::{default_system, SpectralSystem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
    /// Checksum ignoring wall-time fields, for files that carry them.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stable_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub phantom: Option<u64>,
    pub noise: Option<u64>,
    pub solver: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub setup_seconds: f64,
    pub solve_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DddStats {
    pub max_newton_iterations: usize,
    pub max_residual: f64,
    pub n_unconverged: usize,
    pub n_flagged: usize,
}

/// Timing-free outcome of a run, written to `summary.json`. The final
/// metrics describe the returned iterate, one past the last CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub solver: SolverName,
    pub iterations: usize,
    pub stop: StopReason,
    pub final_re_f: Option<f64>,
    pub final_re_g: Option<f64>,
    pub measured_snr_db: Option<f64>,
    pub rate_probe: Option<RateProbe>,
    pub ddd: Option<DddStats>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_path: String,
    pub config: ExperimentConfig,
    pub version: String,
    pub seeds: Seeds,
    pub wall_clock: WallClock,
    pub summary: RunSummary,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    /// Checksums that do not depend on timing, keyed by file.
    pub fn stable_checksums(&self) -> Vec<(String, String)> {
        self.files
            .iter()
            .map(|f| (f.path.clone(), f.stable_sha256.clone().unwrap_or_else(|| f.sha256.clone())))
            .collect()
    }
}

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where the rate probe looks, when the run is long enough.
const RATE_WINDOW: std::ops::Range<usize> = 5..40;

fn truth_for(cfg: &ExperimentConfig, grid: &ImageGrid, n_materials: usize) -> Result<BasisImageSet> {
    let spec = match &cfg.phantom {
        PhantomSection::Random { seed } => return Ok(random_truth_with(grid, n_materials, *seed)),
        PhantomSection::Builtin { name } => {
            builtin(name).ok_or_else(|| Error::config("phantom.name", format!("no bundled phantom `{name}`")))?
        }
        PhantomSection::Ellipses { ellipses } => PhantomSpec {
            name: cfg.name.clone(),
            materials: n_materials,
            ellipses: ellipses.clone(),
        },
    };
    if spec.materials != n_materials {
        return Err(Error::config(
            "phantom",
            format!("phantom has {} materials, the system {}", spec.materials, n_materials),
        ));
    }
    rasterize(&spec, grid)
}

fn vmi_stem(energy: f64) -> String {
    if energy.fract() == 0.0 {
        format!("vmi_{}keV", energy as i64)
    } else {
        format!("vmi_{energy}keV")
    }
}

struct Outputs {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn add(&mut self, path: &Path, stable: Option<String>) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let rel = path.strip_prefix(&self.dir).unwrap_or(path).to_string_lossy().into_owned();
        self.files.push(FileEntry {
            path: rel,
            bytes: bytes.len() as u64,
            sha256: export::sha256_hex(&bytes),
            stable_sha256: stable,
        });
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str, stable: Option<String>) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.add(&path, stable)
    }

    fn images(&mut self, system: &SpectralSystem, f: &BasisImageSet, energies: &[f64]) -> Result<()> {
        for (d, img) in f.images.iter().enumerate() {
            for p in export_image(img, &f.grid, self.dir.join(format!("basis_{d}")))? {
                self.add(&p, None)?;
            }
        }
        for &e in energies {
            let v = vmi(system, f, e)?;
            for p in export_image(&v, &f.grid, self.dir.join(vmi_stem(e)))? {
                self.add(&p, None)?;
            }
        }
        Ok(())
    }
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn finite(v: f64) -> Option<f64> {
    Some(v).filter(|v| v.is_finite())
}

/// Runs the experiment described by the config at `path` and writes its
/// outputs into the configured directory. A solver that aborts still leaves
/// the metrics and images of its last completed iteration, and the abort is
/// returned as the error.
pub fn run(path: impl AsRef<Path>) -> Result<RunManifest> {
    let path = path.as_ref();
    run_loaded(&load_config(path)?, path)
}

/// [`run`] on an already loaded (and possibly edited) config; `path` is only
/// echoed into the manifest.
pub fn run_loaded(loaded: &LoadedConfig, path: &Path) -> Result<RunManifest> {
    let t0 = Instant::now();
    loaded.validate()?;
    let cfg = &loaded.config;
    let grid = loaded.grid()?;
    let geoms = loaded.geometries()?;
    let system = loaded.system()?;
    let nd = system.n_materials();
    for &e in &cfg.vmi_energies {
        let (lo, hi) = system.energy_range();
        if e < lo || e > hi {
            return Err(Error::config("vmi_energies", format!("{e} keV is outside [{lo}, {hi}]")));
        }
    }
    let truth = truth_for(cfg, &grid, nd)?;
    let model = if cfg.projector.cache_entries == 0 {
        ForwardModel::new(&system, &grid, &geoms)?
    } else {
        ForwardModel::cached(&system, &grid, &geoms, cfg.projector.cache_entries)?
    };
    let clean = model.forward(&truth)?;
    let (g, snr) = match &cfg.noise {
        Some(n) if n.snr()?.is_finite() => {
            let noisy = add_noise(&clean, n.snr()?, n.seed)?;
            let snr = finite(measured_snr_db(&clean, &noisy));
            (noisy, snr)
        }
        _ => (clean, None),
    };
    let setup_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let sc = cfg.solver.solver_config();
    let mut ddd = None;
    let outcome: Result<SolveResult> = match cfg.solver.name {
        SolverName::Afire => afire_solve(&model, &g, &sc, Some(&truth)),
        SolverName::Nkm => nkm_solve(&model, &g, sc.max_iters, Some(&truth)),
        SolverName::Ifbp => ifbp_solve(&model, &g, sc.max_iters, Some(&truth)),
        SolverName::Intrpl => intrpl_solve(&model, &g, sc.max_iters, Some(&truth)),
        SolverName::Ddd => ddd_solve(&model, &g, cfg.solver.newton_iters).and_then(|r| {
            ddd = Some(DddStats {
                max_newton_iterations: r.max_newton_iterations,
                max_residual: r.max_residual,
                n_unconverged: r.n_unconverged,
                n_flagged: r.n_flagged,
            });
            let k_f = model.forward(&r.f)?;
            let mut rec = metrics(&r.f, None, Some(&truth), &k_f, None, &g);
            rec.seconds = t1.elapsed().as_secs_f64();
            Ok(SolveResult::new(r.f, &k_f, vec![rec], Some(&truth), &g, StopReason::MaxIters))
        }),
    };
    let solve_seconds = t1.elapsed().as_secs_f64();
    let (result, failure) = match outcome {
        Ok(r) => (r, None),
        Err(Error::SolverAborted { error, partial }) => (*partial, Some(*error)),
        Err(e) => return Err(e),
    };

    let mut out = Outputs::new(loaded.output_dir())?;
    let csv = metrics_csv(&result.records);
    out.text("metrics.csv", &csv, Some(stable_metrics_sha256(&csv)))?;
    out.images(&system, &result.f, &cfg.vmi_energies)?;
    let summary = RunSummary {
        solver: cfg.solver.name,
        iterations: result.iterations(),
        stop: result.stop,
        final_re_f: result.last.re_f,
        final_re_g: result.last.re_g,
        measured_snr_db: snr,
        rate_probe: rate_probe(&result.records, RATE_WINDOW).ok(),
        ddd,
        error: failure.as_ref().map(|e| e.to_string()),
    };
    out.text("summary.json", &json(&summary), None)?;

    let manifest = RunManifest {
        name: cfg.name.clone(),
        config_path: path.to_string_lossy().into_owned(),
        config: cfg.clone(),
        version: VERSION.to_string(),
        seeds: Seeds {
            phantom: match cfg.phantom {
                PhantomSection::Random { seed } => Some(seed),
                _ => None,
            },
            noise: cfg.noise.as_ref().filter(|_| snr.is_some()).map(|n| n.seed),
            solver: sc.seed,
        },
        wall_clock: WallClock {
            setup_seconds,
            solve_seconds,
            total_seconds: t0.elapsed().as_secs_f64(),
        },
        summary,
        files: out.files,
    };
    let mpath = out.dir.join("manifest.json");
    fs::write(&mpath, json(&manifest)).map_err(|e| Error::io(&mpath, e))?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

/// Evaluates the convergence certificate on the (tiny) instance of a config
/// and writes `certificate.json` into its output directory.
pub fn certificate(path: impl AsRef<Path>) -> Result<Certificate> {
    certificate_loaded(&load_config(path)?)
}

pub fn certificate_loaded(loaded: &LoadedConfig) -> Result<Certificate> {
    loaded.validate()?;
    let cfg = &loaded.config;
    let grid = loaded.grid()?;
    let geoms = loaded.geometries()?;
    let system = loaded.system()?;
    let (nq, nd) = (system.n_spectra(), system.n_materials());
    let c = cfg.solver.solver_config().constants_or_zero(nq, nd)?;
    let cs = &cfg.certificate;
    if cs.n_samples == 0 || cs.n_directions == 0 {
        return Err(Error::config("certificate", "needs at least one sample and one direction"));
    }
    if !(cs.sample_scale >= 0.0 && cs.sample_scale.is_finite()) {
        return Err(Error::config("certificate.sample_scale", "must be finite and >= 0"));
    }
    let samples: Vec<BasisImageSet> = (0..cs.n_samples as u64)
        .map(|s| {
            let mut f = random_truth_with(&grid, nd, cs.seed.wrapping_add(s));
            f.images.iter_mut().flatten().for_each(|v| *v *= cs.sample_scale);
            f
        })
        .collect();
    let cert = convergence_certificate(&system, &geoms, &c, &samples, cs.n_directions, cs.seed)?;
    let dir = loaded.output_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let p = dir.join("certificate.json");
    fs::write(&p, json(&cert)).map_err(|e| Error::io(&p, e))?;
    Ok(cert)
}

/// Energies of the exported phantom VMIs.
pub const PHANTOM_VMI_ENERGIES: [f64; 2] = [60.0, 100.0];

/// Exports a bundled truth (`forbild_like` or `random:<seed>`) with its basis
/// images and VMIs under the default spectral system. Returns the files written.
pub fn export_phantom(name: &str, out: impl AsRef<Path>, n: usize, half_width: f64) -> Result<Vec<PathBuf>> {
    let grid = ImageGrid::square(n, half_width)?;
    let system = default_system();
    let truth = match name.strip_prefix("random:") {
        Some(seed) => {
            let seed = seed
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("bad random seed in `{name}`")))?;
            random_truth_with(&grid, system.n_materials(), seed)
        }
        None => rasterize(
            &builtin(name).ok_or_else(|| Error::InvalidParameter(format!("no bundled phantom `{name}`")))?,
            &grid,
        )?,
    };
    let mut out = Outputs::new(out.as_ref().to_path_buf())?;
    out.images(&system, &truth, &PHANTOM_VMI_ENERGIES)?;
    Ok(out.files.iter().map(|f| out.dir.join(&f.path)).collect())
}
