//! Experiment configuration (TOML).

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_fan_geometry, make_parallel_geometry, ImageGrid, ScanGeometry};
use crate::phantoms::EllipseSpec;
use crate::projector::{InverseMethod, DEFAULT_CACHE_ENTRIES};
use crate::solvers::SolverConfig;
use crate::spectral::{build_system, builtin_curve, load_curve, Curve, CurveKind, SpectralSystem};

/// An angle written as a number of radians or as an expression such as
/// `"pi"`, `"2*pi"` or `"pi/768"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Angle {
    Radians(f64),
    Expr(String),
}

impl Default for Angle {
    fn default() -> Self {
        Angle::Radians(0.0)
    }
}

fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() {
        return Some(1.0);
    }
    s.parse().ok()
}

pub fn parse_angle(s: &str) -> Option<f64> {
    let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let s = s.to_ascii_lowercase();
    let (num, den) = match s.split_once('/') {
        Some((n, d)) => (n.to_string(), parse_number(d)?),
        None => (s.clone(), 1.0),
    };
    let value = if let Some(k) = num.strip_suffix("pi") {
        parse_number(k.trim_end_matches('*'))? * PI
    } else {
        num.parse().ok()?
    };
    Some(value / den)
}

impl Angle {
    pub fn radians(&self, field: &str) -> Result<f64> {
        match self {
            Angle::Radians(v) => Ok(*v),
            Angle::Expr(s) => parse_angle(s).ok_or_else(|| Error::config(field, format!("cannot read angle `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n: usize,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
}

fn default_half_width() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GeometrySection {
    Parallel {
        n_views: usize,
        #[serde(default)]
        angle_start: Angle,
        angle_span: Angle,
        n_det: usize,
        det_lo: f64,
        det_hi: f64,
    },
    Fan {
        n_views: usize,
        #[serde(default)]
        angle_start: Angle,
        angle_span: Angle,
        #[serde(default = "default_sc")]
        source_to_center: f64,
        #[serde(default = "default_sd")]
        source_to_detector: f64,
        n_det: usize,
        det_width: f64,
    },
}

fn default_sc() -> f64 {
    30.0
}

fn default_sd() -> f64 {
    60.0
}

impl GeometrySection {
    pub fn build(&self, field: &str) -> Result<ScanGeometry> {
        let wrap = |e: Error| match e {
            Error::InvalidGeometry(m) => Error::config(field, m),
            other => other,
        };
        Ok(match self {
            GeometrySection::Parallel {
                n_views,
                angle_start,
                angle_span,
                n_det,
                det_lo,
                det_hi,
            } => make_parallel_geometry(
                *n_views,
                angle_start.radians(&format!("{field}.angle_start"))?,
                angle_span.radians(&format!("{field}.angle_span"))?,
                *n_det,
                *det_lo,
                *det_hi,
            )
            .map_err(wrap)?
            .into(),
            GeometrySection::Fan {
                n_views,
                angle_start,
                angle_span,
                source_to_center,
                source_to_detector,
                n_det,
                det_width,
            } => make_fan_geometry(
                *n_views,
                angle_start.radians(&format!("{field}.angle_start"))?,
                angle_span.radians(&format!("{field}.angle_span"))?,
                *source_to_center,
                *source_to_detector,
                *n_det,
                *det_width,
            )
            .map_err(wrap)?
            .into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralSection {
    /// Paths relative to the config file, or `builtin:<name>`.
    pub spectra: Vec<String>,
    pub macs: Vec<String>,
    #[serde(default = "default_e_min")]
    pub e_min: f64,
    #[serde(default = "default_e_max")]
    pub e_max: f64,
    #[serde(default = "default_delta_e")]
    pub delta_e: f64,
}

fn default_e_min() -> f64 {
    10.0
}

fn default_e_max() -> f64 {
    140.0
}

fn default_delta_e() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PhantomSection {
    Builtin {
        name: String,
    },
    Random {
        seed: u64,
    },
    Ellipses {
        #[serde(default)]
        ellipses: Vec<EllipseSpec>,
    },
}

/// `"noiseless"` or a finite SNR in dB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Snr {
    Db(f64),
    Label(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub snr_db: Snr,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSection {
    pub fn snr(&self) -> Result<f64> {
        match &self.snr_db {
            Snr::Db(v) if v.is_finite() => Ok(*v),
            Snr::Db(_) => Err(Error::config("noise.snr_db", "must be finite")),
            Snr::Label(s) if s == "noiseless" => Ok(f64::INFINITY),
            Snr::Label(s) => Err(Error::config("noise.snr_db", format!("expected a number or \"noiseless\", got `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverName {
    Afire,
    Nkm,
    Ifbp,
    Intrpl,
    Ddd,
}

fn default_max_iters() -> usize {
    100
}

fn default_newton_iters() -> usize {
    10
}

fn default_inverse() -> Vec<InverseMethod> {
    vec![InverseMethod::default()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub name: SolverName,
    /// Outer iterations, or sweeps for NKM.
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Per-ray Newton iterations for INTRPL and DDD.
    #[serde(default = "default_newton_iters")]
    pub newton_iters: usize,
    #[serde(default)]
    pub constants: Vec<Vec<f64>>,
    #[serde(default = "default_inverse")]
    pub inverse: Vec<InverseMethod>,
    #[serde(default)]
    pub delta_f_tol: f64,
    #[serde(default)]
    pub residual_tol: f64,
    #[serde(default)]
    pub re_f_tol: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SolverSection {
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            max_iters: self.max_iters,
            constants: self.constants.clone(),
            inverse: self.inverse.clone(),
            delta_f_tol: self.delta_f_tol,
            residual_tol: self.residual_tol,
            re_f_tol: self.re_f_tol,
            seed: self.seed,
        }
    }
}

fn default_cache() -> usize {
    DEFAULT_CACHE_ENTRIES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorSection {
    /// Nonzeros allowed per cached projection matrix; 0 keeps rows matrix-free.
    #[serde(default = "default_cache")]
    pub cache_entries: usize,
}

impl Default for ProjectorSection {
    fn default() -> Self {
        Self {
            cache_entries: default_cache(),
        }
    }
}

fn default_samples() -> usize {
    5
}

fn default_directions() -> usize {
    20
}

fn default_sample_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSection {
    /// Random images drawn around the special point.
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_directions")]
    pub n_directions: usize,
    /// Sample images are random truths multiplied by this factor.
    #[serde(default = "default_sample_scale")]
    pub sample_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CertificateSection {
    fn default() -> Self {
        Self {
            n_samples: default_samples(),
            n_directions: default_directions(),
            sample_scale: default_sample_scale(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    /// Relative to the config file.
    pub output_dir: String,
    pub grid: GridSection,
    pub spectral: SpectralSection,
    pub geometry: Vec<GeometrySection>,
    pub phantom: PhantomSection,
    pub noise: Option<NoiseSection>,
    pub solver: SolverSection,
    #[serde(default)]
    pub vmi_energies: Vec<f64>,
    #[serde(default)]
    pub projector: ProjectorSection,
    #[serde(default)]
    pub certificate: CertificateSection,
}

/// A config together with the directory its relative paths refer to.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

pub fn parse_config(text: &str, source: &Path) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| Error::Parse {
        path: source.to_path_buf(),
        line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
        message: e.message().to_string(),
    })
}

pub fn load_config(path: impl AsRef<Path>) -> Result<LoadedConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config = parse_config(&text, path)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedConfig { config, base_dir })
}

impl LoadedConfig {
    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    fn curve(&self, field: &str, spec: &str, kind: CurveKind) -> Result<Curve> {
        if let Some(name) = spec.strip_prefix("builtin:") {
            let c = builtin_curve(name).ok_or_else(|| Error::config(field, format!("no bundled curve `{name}`")))?;
            if c.kind != kind {
                return Err(Error::config(field, format!("bundled curve `{name}` has the wrong kind")));
            }
            return Ok(c);
        }
        load_curve(self.resolve(spec), kind)
    }

    pub fn grid(&self) -> Result<ImageGrid> {
        let g = &self.config.grid;
        if g.n == 0 {
            return Err(Error::config("grid.n", "must be at least 1"));
        }
        if !(g.half_width > 0.0) {
            return Err(Error::config("grid.half_width", "must be positive"));
        }
        ImageGrid::square(g.n, g.half_width)
    }

    pub fn geometries(&self) -> Result<Vec<ScanGeometry>> {
        self.config
            .geometry
            .iter()
            .enumerate()
            .map(|(q, g)| g.build(&format!("geometry[{q}]")))
            .collect()
    }

    pub fn system(&self) -> Result<SpectralSystem> {
        let s = &self.config.spectral;
        let spectra = s
            .spectra
            .iter()
            .enumerate()
            .map(|(q, p)| self.curve(&format!("spectral.spectra[{q}]"), p, CurveKind::Spectrum))
            .collect::<Result<Vec<_>>>()?;
        let macs = s
            .macs
            .iter()
            .enumerate()
            .map(|(d, p)| self.curve(&format!("spectral.macs[{d}]"), p, CurveKind::Mac))
            .collect::<Result<Vec<_>>>()?;
        build_system(&spectra, &macs, s.e_min, s.e_max, s.delta_e)
    }

    /// Field-level checks that do not need the data files.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.output_dir.trim().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        if c.spectral.spectra.len() != c.geometry.len() {
            return Err(Error::config(
                "geometry",
                format!("{} scans for {} spectra", c.geometry.len(), c.spectral.spectra.len()),
            ));
        }
        if c.solver.name == SolverName::Afire && c.spectral.spectra.len() != c.spectral.macs.len() {
            return Err(Error::config("spectral", "afire needs as many spectra as materials"));
        }
        if c.solver.max_iters == 0 {
            return Err(Error::config("solver.max_iters", "must be at least 1"));
        }
        if c.vmi_energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::config("vmi_energies", "must be finite"));
        }
        if let Some(n) = &c.noise {
            n.snr()?;
        }
        c.solver.solver_config().validate()?;
        Ok(())
    }
}
