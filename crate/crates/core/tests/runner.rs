mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use afire::runner::{self, load_config, parse_config, read_image, read_metrics, LoadedConfig};

use common::{bundled_config, bundled_into, crate_dir};

const TINY: &str = r#"
name = "tiny"
output_dir = "out"
vmi_energies = [60.0, 100.0]

[grid]
n = 12

[spectral]
spectra = ["builtin:80kv", "builtin:140kv_cu"]
macs = ["builtin:water", "builtin:bone"]

[[geometry]]
kind = "parallel"
n_views = 24
angle_span = "pi"
n_det = 25
det_lo = -7.05
det_hi = 7.05

[[geometry]]
kind = "parallel"
n_views = 24
angle_start = "pi/48"
angle_span = "pi"
n_det = 25
det_lo = -7.05
det_hi = 7.05

[phantom]
kind = "builtin"
name = "forbild_like"

[noise]
snr_db = 40.0
seed = 5

[solver]
name = "afire"
max_iters = 6
"#;

fn tiny_in(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, text).unwrap();
    p
}

fn listing(dir: &Path) -> Vec<String> {
    let mut out: Vec<String> = walk(dir).into_iter().map(|p| p.strip_prefix(dir).unwrap().to_string_lossy().into_owned()).collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn runs_are_reproducible_and_stay_in_the_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_in(tmp.path(), TINY);
    let a = runner::run(&cfg).unwrap();
    let first: Vec<_> = a.stable_checksums();
    let b = runner::run(&cfg).unwrap();
    assert_eq!(first, b.stable_checksums());
    assert!(a.summary.measured_snr_db.is_some());

    let files = listing(tmp.path());
    assert!(files.iter().all(|f| f == "tiny.toml" || f.starts_with("out/")), "{files:?}");
    for entry in &b.files {
        let bytes = fs::read(tmp.path().join("out").join(&entry.path)).unwrap();
        assert_eq!(bytes.len() as u64, entry.bytes);
        assert_eq!(runner::export::sha256_hex(&bytes), entry.sha256);
    }
    let m = read_metrics(tmp.path().join("out/metrics.csv")).unwrap();
    assert_eq!(m.len(), 6);
    assert!(m.iter().all(|r| r.re_f.is_some() && r.re_g.is_some()));
    let img = read_image(tmp.path().join("out/vmi_60keV")).unwrap();
    assert_eq!((img.width, img.height), (12, 12));
    assert!(tmp.path().join("out/manifest.json").exists());
}

#[test]
fn missing_spectrum_file_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_in(tmp.path(), &TINY.replace("builtin:80kv", "nowhere/spectrum.txt"));
    let err = runner::run(&cfg).unwrap_err();
    assert_eq!(err.kind(), "io");
    assert!(err.to_string().contains("nowhere/spectrum.txt"), "{err}");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn config_errors_name_the_field() {
    let bad = TINY.replace("name = \"afire\"", "name = \"simplex\"");
    let err = parse_config(&bad, Path::new("x.toml")).unwrap_err();
    assert_eq!(err.kind(), "parse");
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_in(tmp.path(), &TINY.replace("max_iters = 6", "max_iters = 0"));
    let err = runner::run(&cfg).unwrap_err();
    assert!(err.to_string().contains("solver.max_iters"), "{err}");
}

#[test]
fn every_bundled_config_loads() {
    let mut n = 0;
    for e in fs::read_dir(crate_dir().join("configs")).unwrap() {
        let p = e.unwrap().path();
        let loaded = load_config(&p).unwrap();
        loaded.validate().unwrap();
        loaded.system().unwrap();
        loaded.geometries().unwrap();
        n += 1;
    }
    assert!(n >= 10);
}

#[test]
fn certificate_on_the_bundled_tiny_instance() {
    let tmp = tempfile::tempdir().unwrap();
    let loaded: LoadedConfig = bundled_into("certificate_tiny", tmp.path());
    let cert = runner::certificate_loaded(&loaded).unwrap();
    assert!(cert.inequality_holds);
    assert_eq!(cert.n_directions, 20);
    assert!(tmp.path().join("certificate_tiny/certificate.json").exists());
}

#[test]
fn phantom_export_writes_basis_and_vmis() {
    let tmp = tempfile::tempdir().unwrap();
    let files = runner::export_phantom("forbild_like", tmp.path().join("p"), 64, 5.0).unwrap();
    assert_eq!(files.len(), 12);
    let w = read_image(tmp.path().join("p/basis_0")).unwrap();
    assert!(w.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(runner::export_phantom("no_such", tmp.path().join("q"), 8, 5.0).is_err());
}

#[test]
fn cli_reports_errors_as_json() {
    let exe = env!("CARGO_BIN_EXE_afire");
    let out = Command::new(exe).args(["run", "/nonexistent/config.toml"]).output().unwrap();
    assert!(!out.status.success());
    let line = String::from_utf8(out.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["error"], "io");

    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(exe)
        .env("AFIRE_THREADS", "1")
        .args(["phantom", "random:3"])
        .arg(tmp.path().join("r"))
        .args(["--n", "8"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("r/basis_1.raw").exists());
}

#[test]
fn bundled_forbild_config_produces_full_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let loaded = bundled_into("forbild_noiseless_128", tmp.path());
    let manifest = runner::run_loaded(&loaded, &bundled_config("forbild_noiseless_128")).unwrap();
    let dir = tmp.path().join("forbild_noiseless_128");
    let m = read_metrics(dir.join("metrics.csv")).unwrap();
    assert_eq!(m.len(), 100);
    for stem in ["basis_0", "basis_1", "vmi_60keV", "vmi_100keV"] {
        let img = read_image(dir.join(stem)).unwrap();
        assert_eq!((img.width, img.height), (128, 128));
    }
    assert_eq!(manifest.summary.iterations, 100);
}
