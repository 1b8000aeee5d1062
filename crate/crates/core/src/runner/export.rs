//! Image and metrics files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::diagnostics::IterationRecord;
use crate::error::{Error, Result};
use crate::geometry::ImageGrid;

pub const METRICS_HEADER: &str = "k,re_f,re_g,delta_f,delta_g,seconds";

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// 17 significant digits, enough to read back the same `f64`.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `<stem>.raw` (f32 little-endian, row-major), `<stem>.txt` (width,
/// height, min, max) and `<stem>.pgm` (8-bit preview windowed to [min, max]).
/// Returns the three paths.
pub fn export_image(values: &[f64], grid: &ImageGrid, stem: impl AsRef<Path>) -> Result<[PathBuf; 3]> {
    let stem = stem.as_ref();
    if values.len() != grid.n_pixels() {
        return Err(Error::DimensionMismatch {
            what: "exported image",
            expected: grid.n_pixels(),
            found: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{}: image has non-finite values", stem.display())));
    }
    let (w, h) = (grid.nx, grid.ny);
    let vals32: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    let lo = vals32.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = vals32.iter().copied().fold(f32::NEG_INFINITY, f32::max);

    let raw: Vec<u8> = vals32.iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = format!("width {w}\nheight {h}\nmin {}\nmax {}\n", fmt17(lo as f64), fmt17(hi as f64));
    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    let width = (hi - lo) as f64;
    pgm.extend(vals32.iter().map(|&v| {
        if width > 0.0 {
            ((v - lo) as f64 / width * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            128
        }
    }));

    let paths = [with_ext(stem, ".raw"), with_ext(stem, ".txt"), with_ext(stem, ".pgm")];
    write(&paths[0], &raw)?;
    write(&paths[1], header.as_bytes())?;
    write(&paths[2], &pgm)?;
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub min: f64,
    pub max: f64,
    pub values: Vec<f32>,
}

/// Reads back what [`export_image`] wrote under `stem`.
pub fn read_image(stem: impl AsRef<Path>) -> Result<RawImage> {
    let stem = stem.as_ref();
    let hpath = with_ext(stem, ".txt");
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let mut fields = std::collections::HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let (k, v) = line.split_once(' ').ok_or_else(|| Error::Parse {
            path: hpath.clone(),
            line: n + 1,
            message: "expected `key value`".into(),
        })?;
        fields.insert(k.to_string(), (v.trim().to_string(), n + 1));
    }
    let get = |k: &str| -> Result<f64> {
        let (v, line) = fields.get(k).ok_or_else(|| Error::Parse {
            path: hpath.clone(),
            line: 0,
            message: format!("missing `{k}`"),
        })?;
        v.parse().map_err(|_| Error::Parse {
            path: hpath.clone(),
            line: *line,
            message: format!("bad value for `{k}`"),
        })
    };
    let (width, height) = (get("width")? as usize, get("height")? as usize);
    let rpath = with_ext(stem, ".raw");
    let bytes = fs::read(&rpath).map_err(|e| Error::io(&rpath, e))?;
    if bytes.len() != 4 * width * height {
        return Err(Error::DimensionMismatch {
            what: "raw image bytes",
            expected: 4 * width * height,
            found: bytes.len(),
        });
    }
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(RawImage {
        width,
        height,
        min: get("min")?,
        max: get("max")?,
        values,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt17).unwrap_or_default()
}

pub fn metrics_csv(records: &[IterationRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.k,
            opt(r.re_f),
            opt(r.re_g),
            opt(r.delta_f),
            opt(r.delta_g),
            fmt17(r.seconds)
        );
    }
    s
}

pub fn write_metrics(records: &[IterationRecord], path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidParameter("no metric records to write".into()));
    }
    write(path.as_ref(), metrics_csv(records).as_bytes())
}

pub fn parse_metrics(text: &str, path: &Path) -> Result<Vec<IterationRecord>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(err(1, format!("expected header `{METRICS_HEADER}`")));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let n = n + 2;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(err(n, format!("expected 6 columns, found {}", cols.len())));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| err(n, format!("bad number `{s}`")))
            }
        };
        out.push(IterationRecord {
            k: cols[0].parse().map_err(|_| err(n, format!("bad index `{}`", cols[0])))?,
            re_f: num(cols[1])?,
            re_g: num(cols[2])?,
            delta_f: num(cols[3])?,
            delta_g: num(cols[4])?,
            seconds: num(cols[5])?.ok_or_else(|| err(n, "missing seconds".into()))?,
        });
    }
    Ok(out)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<IterationRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text, path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Checksum of a metrics CSV with the wall-time column blanked, so that
/// repeated runs can be compared.
pub fn stable_metrics_sha256(csv: &str) -> String {
    let mut s = String::with_capacity(csv.len());
    for line in csv.lines() {
        match line.rfind(',') {
            Some(i) => s.push_str(&line[..=i]),
            None => s.push_str(line),
        }
        s.push('\n');
    }
    sha256_hex(s.as_bytes())
}
