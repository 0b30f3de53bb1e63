//! End-to-end runs of the `aclab` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SIM: &str = r#"
kind = "simulate"
seed = 5
observables = [{ kind = "cosine", mode = 1, amplitude = 2.0 }, { kind = "norm-sq" }]
initial = { kind = "mode", mode = 1, amplitude = 0.5 }
[spatial]
grid = [16]
bc = "dirichlet"
[integrator]
dt = 0.001
horizon = 0.1
nu = 1.0
[ensemble]
trajectories = 8
"#;

fn aclab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aclab"))
        .args(args)
        .env_remove("ACLAB_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn validate_accepts_a_good_config() {
    let d = tempfile::tempdir().unwrap();
    let c = write(d.path(), "ok.toml", SIM);
    assert_eq!(code(&aclab(&["validate", &c])), 0);
}

#[test]
fn missing_nu_is_a_validation_error() {
    let d = tempfile::tempdir().unwrap();
    let c = write(d.path(), "bad.toml", &SIM.replace("nu = 1.0", ""));
    let o = aclab(&["validate", &c]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nu"));
}

#[test]
fn small_alpha_is_rejected_with_both_numbers() {
    let d = tempfile::tempdir().unwrap();
    let text = SIM.replace("kind = \"simulate\"", "kind = \"kolmogorov-residual\"")
        + r#"
[kolmogorov]
alpha = 10.0
observable = { kind = "cosine", mode = 1, amplitude = 1.0 }
smoothing = { lambda = 0.5, n = 16 }
resolvent = { dt = 0.001 }
points = [{ kind = "zero" }]
"#;
    let c = write(d.path(), "k.toml", &text);
    let o = aclab(&["validate", &c]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(code(&o), 1, "{err}");
    assert!(err.contains("alpha = 10") && err.contains("bar_alpha = 134.4"), "{err}");
}

#[test]
fn neumann_mixing_is_gated() {
    let d = tempfile::tempdir().unwrap();
    let text = format!(
        "initial_y = {{ kind = \"zero\" }}\n{}[mixing]\nhorizon = 0.1\npairs = 2\nfit_start = 0.01\n",
        SIM.replace("kind = \"simulate\"", "kind = \"mixing\"").replace("dirichlet", "neumann")
    );
    let c = write(d.path(), "m.toml", &text);
    let out = d.path().join("out");
    let o = aclab(&["run", &c, "--output-dir", out.to_str().unwrap()]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(code(&o), 3, "{err}");
    assert!(err.contains("alpha0"), "{err}");
    assert!(!out.exists());
}

#[test]
fn zero_noise_from_zero_stays_zero() {
    let d = tempfile::tempdir().unwrap();
    let text = SIM.replace("{ kind = \"mode\", mode = 1, amplitude = 0.5 }", "{ kind = \"zero\" }")
        + "[noise]\namplitude_scale = 0.0\n";
    let c = write(d.path(), "z.toml", &text);
    let out = d.path().join("out");
    let o = aclab(&["run", &c, "--output-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let series = fs::read_to_string(out.join("series.csv")).unwrap();
    let header: Vec<&str> = series.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "norm-sq_1").unwrap();
    for line in series.lines().skip(1) {
        let v: f64 = line.split(',').nth(col).unwrap().parse().unwrap();
        assert_eq!(v, 0.0);
    }
}

#[test]
fn same_seed_gives_identical_files_and_manifest_reruns() {
    let d = tempfile::tempdir().unwrap();
    let c = write(d.path(), "s.toml", SIM);
    let a = d.path().join("a");
    let b = d.path().join("b");
    assert_eq!(code(&aclab(&["run", &c, "--output-dir", a.to_str().unwrap()])), 0);
    assert_eq!(code(&aclab(&["run", &c, "--output-dir", b.to_str().unwrap(), "--workers", "2"])), 0);
    // rerun from the manifest of the first run
    let m = a.join("manifest.json");
    let r = d.path().join("r");
    assert_eq!(code(&aclab(&["run", m.to_str().unwrap(), "--output-dir", r.to_str().unwrap()])), 0);
    for f in ["series.csv", "terminal.csv", "summary.json"] {
        let x = fs::read(a.join(f)).unwrap();
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f} differs across worker counts");
        assert_eq!(x, fs::read(r.join(f)).unwrap(), "{f} differs after manifest rerun");
    }
    let man: serde_json::Value = serde_json::from_slice(&fs::read(&m).unwrap()).unwrap();
    let rman: serde_json::Value = serde_json::from_slice(&fs::read(r.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(man["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(man["kind"], "simulate");
    assert!(man["derived"]["alpha0"].as_f64().unwrap() > 0.0);
    // output dir is part of the recorded config, so only the seed-bearing fields are compared
    assert_eq!(man["config"]["seed"], rman["config"]["seed"]);
    assert_eq!(man["summary"], rman["summary"]);
}

#[test]
fn seed_flag_changes_the_output() {
    let d = tempfile::tempdir().unwrap();
    let c = write(d.path(), "s.toml", SIM);
    let a = d.path().join("a");
    let b = d.path().join("b");
    assert_eq!(code(&aclab(&["run", &c, "--output-dir", a.to_str().unwrap()])), 0);
    assert_eq!(code(&aclab(&["run", &c, "--output-dir", b.to_str().unwrap(), "--seed", "6"])), 0);
    assert_ne!(fs::read(a.join("terminal.csv")).unwrap(), fs::read(b.join("terminal.csv")).unwrap());
}

#[test]
fn output_dir_comes_from_the_environment() {
    let d = tempfile::tempdir().unwrap();
    let c = write(d.path(), "s.toml", SIM);
    let env_dir = d.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_aclab"))
        .args(["run", &c])
        .env("ACLAB_OUTPUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(env_dir.join("manifest.json").exists());
    // the flag wins over the environment
    let flag_dir = d.path().join("from-flag");
    let o = Command::new(env!("CARGO_BIN_EXE_aclab"))
        .args(["run", &c, "--output-dir", flag_dir.to_str().unwrap()])
        .env("ACLAB_OUTPUT_DIR", d.path().join("unused"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(flag_dir.join("manifest.json").exists());
    assert!(!d.path().join("unused").exists());
}

#[test]
fn print_constants_matches_closed_forms() {
    let o = aclab(&["print-constants"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    // eight modes with c_k = k^{-2} and shape (1 - r²)²
    let sum_sq: f64 = (1..=8).map(|k| (k as f64).powi(-4)).sum();
    let d1 = 8.0 / (3.0 * 3f64.sqrt());
    let c_b = sum_sq * ((1.0 + d1).powi(2) + 1.0);
    let c_b_prime = sum_sq * 64.0;
    let pi2 = std::f64::consts::PI.powi(2);
    let alpha0 = pi2 - c_b / 2.0 - 1.0;
    let bar = (0.5 * (2.0 + 33.0 * c_b + 1.0)).max(16.0 * c_b);
    let close = |key: &str, want: f64, tol: f64| {
        let got = v[key].as_f64().unwrap();
        assert!((got - want).abs() < tol, "{key}: {got} vs {want}");
    };
    close("c_b", c_b, 1e-5);
    close("c_b_prime", c_b_prime, 1e-5);
    close("k0", (1.0 + pi2).powf(-0.5), 1e-12);
    close("alpha0", alpha0, 1e-5);
    close("bar_alpha", bar, 1e-4);
    assert_eq!(v["k"].as_f64().unwrap(), 1.0);
}

#[test]
fn list_observables_names_the_library() {
    let o = aclab(&["list-observables"]);
    assert_eq!(code(&o), 0);
    let s = String::from_utf8_lossy(&o.stdout);
    for name in ["constant", "cosine", "gauss-radial", "coordinate", "norm-sq"] {
        assert!(s.contains(name), "{s}");
    }
}
