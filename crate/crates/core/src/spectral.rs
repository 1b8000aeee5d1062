//! Energy spectra, mass-attenuation curves and the constant matrix `phi`.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

// Below this, 1 + delta cancels (the top bin has almost no weight) and the
// sum shifted by the largest log term is the accurate form.
const MIN_DELTA: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    Spectrum,
    Mac,
}

/// A tabulated curve as read from disk, before resampling.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub name: String,
    pub kind: CurveKind,
    pub energies: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curve {
    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.energies[0], self.energies[self.energies.len() - 1])
    }

    /// Piecewise-linear interpolation, extrapolating with the end segments.
    pub fn eval_linear(&self, e: f64) -> f64 {
        let (i, t) = self.locate(e);
        if self.len() == 1 {
            return self.values[0];
        }
        self.values[i] + t * (self.values[i + 1] - self.values[i])
    }

    /// Interpolation that is linear in (ln E, ln value).
    pub fn eval_loglog(&self, e: f64) -> f64 {
        if self.len() == 1 {
            return self.values[0];
        }
        let i = self.segment(e);
        let (e0, e1) = (self.energies[i], self.energies[i + 1]);
        let (v0, v1) = (self.values[i], self.values[i + 1]);
        if e == e0 {
            return v0;
        }
        if e == e1 {
            return v1;
        }
        let t = (e.ln() - e0.ln()) / (e1.ln() - e0.ln());
        (v0.ln() + t * (v1.ln() - v0.ln())).exp()
    }

    fn segment(&self, e: f64) -> usize {
        let n = self.energies.len();
        let k = self.energies.partition_point(|&x| x <= e);
        k.clamp(1, n - 1) - 1
    }

    fn locate(&self, e: f64) -> (usize, f64) {
        if self.len() == 1 {
            return (0, 0.0);
        }
        let i = self.segment(e);
        let (e0, e1) = (self.energies[i], self.energies[i + 1]);
        (i, (e - e0) / (e1 - e0))
    }
}

/// Parses a two-column `energy_keV value` table; `#` starts a comment.
pub fn parse_curve(text: &str, kind: CurveKind, name: &str) -> Result<Curve> {
    let err = |line: usize, message: String| Error::Parse {
        path: name.into(),
        line,
        message,
    };
    let mut energies = Vec::new();
    let mut values = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let cols: Vec<&str> = body.split_whitespace().collect();
        if cols.len() != 2 {
            return Err(err(line_no, format!("expected 2 columns, found {}", cols.len())));
        }
        let e: f64 = cols[0]
            .parse()
            .map_err(|_| err(line_no, format!("bad energy `{}`", cols[0])))?;
        let v: f64 = cols[1]
            .parse()
            .map_err(|_| err(line_no, format!("bad value `{}`", cols[1])))?;
        if !e.is_finite() || !v.is_finite() {
            return Err(err(line_no, "non-finite entry".into()));
        }
        if e <= 0.0 {
            return Err(err(line_no, format!("energy must be positive, got {e}")));
        }
        if let Some(&prev) = energies.last() {
            if e <= prev {
                return Err(err(line_no, format!("energies must increase strictly ({e} after {prev})")));
            }
        }
        let v = match kind {
            CurveKind::Spectrum => v.max(0.0),
            CurveKind::Mac => {
                if v <= 0.0 {
                    return Err(err(line_no, format!("attenuation must be positive, got {v}")));
                }
                v
            }
        };
        energies.push(e);
        values.push(v);
    }
    if energies.is_empty() {
        return Err(err(0, "no data rows".into()));
    }
    Ok(Curve {
        name: name.to_string(),
        kind,
        energies,
        values,
    })
}

pub fn load_curve(path: impl AsRef<Path>, kind: CurveKind) -> Result<Curve> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_curve(&text, kind, &path.display().to_string())
}

/// Curves shipped with the crate: `water`, `bone`, `80kv`, `140kv_cu`.
pub fn builtin_curve(name: &str) -> Option<Curve> {
    let (text, kind) = match name {
        "water" => (include_str!("../fixtures/mac_water.txt"), CurveKind::Mac),
        "bone" => (include_str!("../fixtures/mac_bone.txt"), CurveKind::Mac),
        "80kv" => (include_str!("../fixtures/spectrum_80kv.txt"), CurveKind::Spectrum),
        "140kv_cu" => (include_str!("../fixtures/spectrum_140kv_cu.txt"), CurveKind::Spectrum),
        _ => return None,
    };
    Some(parse_curve(text, kind, name).expect("bundled fixture parses"))
}

/// The water/bone system under the 80 kV and filtered 140 kV spectra,
/// 1 keV bins over [10, 140] keV.
pub fn default_system() -> SpectralSystem {
    let spectra = [builtin_curve("80kv").unwrap(), builtin_curve("140kv_cu").unwrap()];
    let macs = [builtin_curve("water").unwrap(), builtin_curve("bone").unwrap()];
    build_system(&spectra, &macs, 10.0, 140.0, 1.0).expect("bundled fixtures cover the default bins")
}

/// Q spectra and D attenuation curves on one uniform grid of M energy bins.
#[derive(Clone, Debug)]
pub struct SpectralSystem {
    e_min: f64,
    delta_e: f64,
    centers: Vec<f64>,
    /// Q rows of M weights, each summing to one.
    spectra: Vec<Vec<f64>>,
    /// D rows of M values.
    macs: Vec<Vec<f64>>,
    /// Bin-major copy of `macs`: entry `m * D + d`.
    macs_t: Vec<f64>,
    mac_curves: Vec<Curve>,
}

/// Rescales to unit sum and nudges the largest entry until the left-to-right
/// floating-point sum is exactly one.
fn normalize_weights(w: &mut [f64]) -> Result<()> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::InvalidParameter("spectrum has no positive weight".into()));
    }
    for v in w.iter_mut() {
        *v /= total;
    }
    let imax = (0..w.len())
        .max_by(|&a, &b| w[a].total_cmp(&w[b]))
        .unwrap();
    for _ in 0..16 {
        let s: f64 = w.iter().sum();
        if s == 1.0 {
            break;
        }
        w[imax] += 1.0 - s;
    }
    Ok(())
}

impl SpectralSystem {
    /// Builds a system directly from per-bin tables. Bin `m` spans
    /// `[e_min + m*delta_e, e_min + (m+1)*delta_e)`.
    pub fn from_tables(e_min: f64, delta_e: f64, spectra: Vec<Vec<f64>>, macs: Vec<Vec<f64>>) -> Result<Self> {
        if !(delta_e > 0.0) || !e_min.is_finite() || e_min <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "bins need e_min > 0 and delta_e > 0 (got {e_min}, {delta_e})"
            )));
        }
        if spectra.is_empty() || macs.is_empty() {
            return Err(Error::InvalidParameter("need at least one spectrum and one material".into()));
        }
        let m = spectra[0].len();
        if m == 0 {
            return Err(Error::InvalidParameter("no energy bins".into()));
        }
        let mut spectra = spectra;
        for s in spectra.iter_mut() {
            check_len("spectrum bins", m, s.len())?;
            if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidParameter("spectrum weights must be finite and >= 0".into()));
            }
            normalize_weights(s)?;
        }
        for b in &macs {
            check_len("attenuation bins", m, b.len())?;
            if b.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(Error::InvalidParameter("attenuation values must be finite and > 0".into()));
            }
        }
        let centers: Vec<f64> = (0..m).map(|i| e_min + (i as f64 + 0.5) * delta_e).collect();
        let mac_curves = macs
            .iter()
            .enumerate()
            .map(|(d, b)| Curve {
                name: format!("material {d}"),
                kind: CurveKind::Mac,
                energies: centers.clone(),
                values: b.clone(),
            })
            .collect();
        Ok(Self::assemble(e_min, delta_e, centers, spectra, macs, mac_curves))
    }

    fn assemble(
        e_min: f64,
        delta_e: f64,
        centers: Vec<f64>,
        spectra: Vec<Vec<f64>>,
        macs: Vec<Vec<f64>>,
        mac_curves: Vec<Curve>,
    ) -> Self {
        let (m, d) = (centers.len(), macs.len());
        let mut macs_t = vec![0.0; m * d];
        for (di, b) in macs.iter().enumerate() {
            for (mi, &v) in b.iter().enumerate() {
                macs_t[mi * d + di] = v;
            }
        }
        SpectralSystem {
            e_min,
            delta_e,
            centers,
            spectra,
            macs,
            macs_t,
            mac_curves,
        }
    }

    pub fn n_spectra(&self) -> usize {
        self.spectra.len()
    }

    pub fn n_materials(&self) -> usize {
        self.macs.len()
    }

    pub fn n_bins(&self) -> usize {
        self.centers.len()
    }

    pub fn bin_centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn delta_e(&self) -> f64 {
        self.delta_e
    }

    pub fn energy_range(&self) -> (f64, f64) {
        (self.e_min, self.e_min + self.delta_e * self.n_bins() as f64)
    }

    pub fn spectrum(&self, q: usize) -> &[f64] {
        &self.spectra[q]
    }

    pub fn mac(&self, d: usize) -> &[f64] {
        &self.macs[d]
    }

    /// Attenuation of material `d` at an arbitrary energy inside the bin range,
    /// log-log interpolated from the source table.
    pub fn mac_at(&self, d: usize, energy: f64) -> Result<f64> {
        let (lo, hi) = self.energy_range();
        if !(energy >= lo && energy <= hi) {
            return Err(Error::InvalidParameter(format!(
                "energy {energy} keV outside the system range [{lo}, {hi}]"
            )));
        }
        Ok(self.mac_curves[d].eval_loglog(energy))
    }

    fn check_q(&self, q: usize) -> Result<()> {
        if q < self.n_spectra() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "spectrum index {q} out of range ({} spectra)",
                self.n_spectra()
            )))
        }
    }

    #[inline]
    fn exponent(&self, m: usize, a: &[f64]) -> f64 {
        let d = a.len();
        let b = &self.macs_t[m * d..(m + 1) * d];
        let mut acc = 0.0;
        for k in 0..d {
            acc += b[k] * a[k];
        }
        -acc
    }

    #[inline]
    fn max_exponent(&self, q: usize, a: &[f64]) -> f64 {
        let s = &self.spectra[q];
        let mut best = f64::NEG_INFINITY;
        for m in 0..s.len() {
            if s[m] > 0.0 {
                best = best.max(self.exponent(m, a));
            }
        }
        best
    }

    /// `ln sum_m s_m exp(-sum_d b_dm a_d)` without bounds or length checks.
    #[inline]
    pub(crate) fn transfer_unchecked(&self, q: usize, a: &[f64]) -> f64 {
        if a.iter().all(|&v| v == 0.0) {
            // the weights sum to exactly one
            return 0.0;
        }
        let s = &self.spectra[q];
        let top = self.max_exponent(q, a);
        // sum_m s_m exp(y_m) = 1 + sum_m s_m expm1(y_m) since the weights sum
        // to one; ln_1p keeps full relative accuracy for tiny attenuation
        let mut delta = 0.0;
        for m in 0..s.len() {
            if s[m] > 0.0 {
                delta += s[m] * (self.exponent(m, a) - top).exp_m1();
            }
        }
        if delta >= MIN_DELTA {
            return top + delta.ln_1p();
        }
        let lead = self.max_log_term(q, a);
        let mut sum = 0.0;
        for m in 0..s.len() {
            if s[m] > 0.0 {
                sum += (self.exponent(m, a) + s[m].ln() - lead).exp();
            }
        }
        lead + sum.ln()
    }

    /// `max_m (x_m + ln s_m)`: the shift that makes the leading term exactly one.
    fn max_log_term(&self, q: usize, a: &[f64]) -> f64 {
        let s = &self.spectra[q];
        (0..s.len())
            .filter(|&m| s[m] > 0.0)
            .map(|m| self.exponent(m, a) + s[m].ln())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Transfer value plus its gradient `-b_d^T w(a)` written into `grad`.
    #[inline]
    pub(crate) fn transfer_grad_unchecked(&self, q: usize, a: &[f64], grad: &mut [f64]) -> f64 {
        let s = &self.spectra[q];
        let d = a.len();
        let top = self.max_exponent(q, a);
        let pass = |plain: Option<f64>, grad: &mut [f64]| {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut acc = 0.0;
            for m in 0..s.len() {
                if s[m] > 0.0 {
                    let w = if let Some(lead) = plain {
                        let w = (self.exponent(m, a) + s[m].ln() - lead).exp();
                        acc += w;
                        w
                    } else {
                        let e = (self.exponent(m, a) - top).exp_m1();
                        acc += s[m] * e;
                        s[m] + s[m] * e
                    };
                    let b = &self.macs_t[m * d..(m + 1) * d];
                    for k in 0..d {
                        grad[k] += w * b[k];
                    }
                }
            }
            acc
        };
        let delta = pass(None, grad);
        let (value, sum) = if delta >= MIN_DELTA {
            (top + delta.ln_1p(), 1.0 + delta)
        } else {
            let lead = self.max_log_term(q, a);
            let sum = pass(Some(lead), grad);
            (lead + sum.ln(), sum)
        };
        for g in grad.iter_mut() {
            *g = -*g / sum;
        }
        value
    }

    /// Spectral weights `w(a)` into `out`; leaves exact zeros where `s_m = 0`.
    pub(crate) fn weights_unchecked(&self, q: usize, a: &[f64], out: &mut [f64]) {
        let s = &self.spectra[q];
        let top = self.max_exponent(q, a);
        let mut sum = 0.0;
        for m in 0..s.len() {
            out[m] = if s[m] > 0.0 {
                s[m] * (self.exponent(m, a) - top).exp()
            } else {
                0.0
            };
            sum += out[m];
        }
        for w in out.iter_mut() {
            *w /= sum;
        }
    }

    pub(crate) fn check_line_integrals(&self, q: usize, a: &[f64]) -> Result<()> {
        self.check_q(q)?;
        check_len("line integrals", self.n_materials(), a.len())?;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("line integrals must be finite".into()));
        }
        Ok(())
    }
}

/// Resamples raw curves onto the bins between `e_min` and `e_max`.
pub fn build_system(spectra: &[Curve], macs: &[Curve], e_min: f64, e_max: f64, delta_e: f64) -> Result<SpectralSystem> {
    if !(delta_e > 0.0) || !(e_max > e_min) || !(e_min > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "bin range needs 0 < e_min < e_max and delta_e > 0 (got {e_min}, {e_max}, {delta_e})"
        )));
    }
    let ratio = (e_max - e_min) / delta_e;
    let m = ratio.round();
    if m < 1.0 || (ratio - m).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "[{e_min}, {e_max}] is not a whole number of {delta_e} keV bins"
        )));
    }
    if spectra.is_empty() || macs.is_empty() {
        return Err(Error::InvalidParameter("need at least one spectrum and one material".into()));
    }
    let m = m as usize;
    for c in spectra.iter().chain(macs) {
        let (lo, hi) = c.range();
        if lo > e_min || hi < e_max {
            return Err(Error::CurveCoverage {
                name: c.name.clone(),
                lo,
                hi,
                need_lo: e_min,
                need_hi: e_max,
            });
        }
    }
    let centers: Vec<f64> = (0..m).map(|i| e_min + (i as f64 + 0.5) * delta_e).collect();
    let mut s_tab = Vec::with_capacity(spectra.len());
    for c in spectra {
        let mut w: Vec<f64> = centers.iter().map(|&e| c.eval_linear(e).max(0.0)).collect();
        normalize_weights(&mut w).map_err(|_| {
            Error::InvalidParameter(format!("spectrum {} has no weight inside the bin range", c.name))
        })?;
        s_tab.push(w);
    }
    let b_tab: Vec<Vec<f64>> = macs
        .iter()
        .map(|c| centers.iter().map(|&e| c.eval_loglog(e)).collect())
        .collect();
    Ok(SpectralSystem::assemble(e_min, delta_e, centers, s_tab, b_tab, macs.to_vec()))
}

/// Normalized spectral weights `w_m = s_m e^{-b_m.a} / sum_m' s_m' e^{-b_m'.a}`.
pub fn spectral_weights(system: &SpectralSystem, q: usize, line_integrals: &[f64]) -> Result<Vec<f64>> {
    system.check_line_integrals(q, line_integrals)?;
    let mut out = vec![0.0; system.n_bins()];
    system.weights_unchecked(q, line_integrals, &mut out);
    Ok(out)
}

/// The Q x D matrix `phi` at constants `C`, its inverse and scaled condition number.
#[derive(Clone, Debug)]
pub struct PhiMatrix {
    pub entries: DMatrix<f64>,
    /// Present when Q = D.
    pub inverse: Option<DMatrix<f64>>,
    pub sigma_min: f64,
    pub frobenius: f64,
    pub kappa_f: f64,
}

impl PhiMatrix {
    pub fn get(&self, q: usize, d: usize) -> f64 {
        self.entries[(q, d)]
    }
}

pub fn compute_phi(system: &SpectralSystem, c: &[Vec<f64>]) -> Result<PhiMatrix> {
    let (nq, nd) = (system.n_spectra(), system.n_materials());
    check_len("constant rows", nq, c.len())?;
    let mut phi = DMatrix::zeros(nq, nd);
    let mut w = vec![0.0; system.n_bins()];
    for (q, row) in c.iter().enumerate() {
        system.check_line_integrals(q, row)?;
        system.weights_unchecked(q, row, &mut w);
        for d in 0..nd {
            let b = system.mac(d);
            let mut acc = 0.0;
            for m in 0..w.len() {
                acc += b[m] * w[m];
            }
            phi[(q, d)] = acc;
        }
    }
    let frobenius = phi.norm();
    let sv = phi.clone().svd(false, false).singular_values;
    let sigma_min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(sigma_min >= 1e-12 * frobenius) || frobenius == 0.0 {
        return Err(Error::Singular {
            name: "phi",
            sigma_min,
            frobenius,
        });
    }
    let inverse = if nq == nd {
        Some(phi.clone().try_inverse().ok_or(Error::Singular {
            name: "phi",
            sigma_min,
            frobenius,
        })?)
    } else {
        None
    };
    Ok(PhiMatrix {
        entries: phi,
        inverse,
        sigma_min,
        frobenius,
        kappa_f: frobenius / sigma_min,
    })
}
