//! Acceptance suite. Each criterion prints one PASS/FAIL line on stderr
//! (written directly so it shows up with captured output) and the test fails
//! if any criterion fails.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use aclab::ergodicity::{
    averages_agree, integrator_alpha0, krylov_bogoliubov, mixing_rate, moment_check, support_moments, KrylovConfig,
    MixingConfig, MOMENT_NAMES,
};
use aclab::harness::potential_rates;
use aclab::integrator::{ensemble, Integrator, IntegratorConfig, PathFunctional};
use aclab::kolmogorov::{
    in_a_str, scaling_sweep, KolmogorovProblem, Observable, ObservableSpec, ResolventConfig, SmoothingParams,
};
use aclab::noise::{NoiseConfig, NoiseFamily};
use aclab::potential::PotentialSpec;
use aclab::rng::stream;
use aclab::spatial::{BoundaryCondition, SpatialConfig, SpatialModel};
use aclab::stats::{ks_two_sample, loglog_slope};

struct Outcome {
    pass: bool,
    detail: String,
}

fn pot() -> PotentialSpec {
    PotentialSpec::new(1.0, 2.0).unwrap()
}

fn noise_with(modes: usize) -> NoiseFamily {
    let mut c = NoiseConfig::default();
    c.num_modes = modes;
    NoiseFamily::new(c, &pot()).unwrap()
}

fn model(n: usize, bc: BoundaryCondition) -> SpatialModel {
    SpatialModel::build(SpatialConfig::one_d(n, bc)).unwrap()
}

fn wave(m: &SpatialModel, amp: f64, k: f64, cosine: bool) -> Vec<f64> {
    m.nodes()
        .iter()
        .map(|p| {
            let a = k * PI * p[0];
            amp * if cosine { a.cos() } else { a.sin() }
        })
        .collect()
}

fn run(id: usize, name: &str, limit_secs: f64, f: impl FnOnce() -> Outcome) -> bool {
    let clock = Instant::now();
    let o = f();
    let secs = clock.elapsed().as_secs_f64();
    let pass = o.pass && secs < limit_secs;
    let line = format!(
        "criterion {id} [{name}]: {} ({secs:.1}s, limit {limit_secs:.0}s) {}\n",
        if pass { "PASS" } else { "FAIL" },
        o.detail
    );
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    pass
}

fn c1_singular_drift() -> Outcome {
    let lambdas = [1e-1, 1e-2, 1e-3, 1e-4];
    let p = pot();
    let rows = potential_rates(&p, &noise_with(8), &lambdas, -5.0, 5.0, 1000).unwrap();
    // |J_λ| < 1 exactly when ln(1 − |J_λ|) is finite
    let mut worst_gap = f64::INFINITY;
    for &l in &lambdas {
        for i in 0..1000 {
            let x = -5.0 + 10.0 * i as f64 / 999.0;
            worst_gap = worst_gap.min(p.resolvent(l, x).unwrap().log_gap());
        }
    }
    let res = rows.iter().map(|r| r.max_residual).fold(0.0, f64::max);
    let lip = rows.iter().map(|r| r.yosida_lipschitz).fold(0.0, f64::max);
    let r2 = rows.iter().map(|r| r.max_second_ratio).fold(0.0, f64::max);
    let r3 = rows.iter().map(|r| r.max_third_ratio).fold(0.0, f64::max);
    let tol = 1.0 + 1e-9;
    Outcome {
        pass: res < 1e-10 && worst_gap.is_finite() && lip <= tol && r2 <= tol && r3 <= tol,
        detail: format!(
            "max residual {res:.2e}, min ln(1-|J|) {worst_gap:.1}, λ·Lip(β_λ) {lip:.6}, |F''|/(K+1/λ) {r2:.4}, |F'''|/(c_ρ/λ³) {r3:.4}"
        ),
    }
}

fn c2_mollification_rates() -> Outcome {
    // the noise gap reaches rounding level below 2^-8; the drift gap is fitted
    // on the same λ decades as the resolvent checks
    let noise_l: Vec<f64> = (3..=8).map(|k| 2f64.powi(-k)).collect();
    let drift_l = [1e-1, 1e-2, 1e-3, 1e-4];
    let nrows = potential_rates(&pot(), &noise_with(8), &noise_l, -1.0, 1.0, 3).unwrap();
    let drows = potential_rates(&pot(), &noise_with(8), &drift_l, -1.0, 1.0, 3).unwrap();
    let noise = loglog_slope(&noise_l, &nrows.iter().map(|r| r.noise_gap_sq).collect::<Vec<_>>()).unwrap();
    let drift = loglog_slope(&drift_l, &drows.iter().map(|r| r.drift_gap).collect::<Vec<_>>()).unwrap();
    let gamma = 4.0;
    Outcome {
        pass: noise.slope >= 2.0 * gamma - 0.2 && drift.slope >= 0.9,
        detail: format!(
            "noise gap slope {:.3} (need >= {:.1}), drift gap slope {:.3} (need >= 0.9)",
            noise.slope,
            2.0 * gamma - 0.2,
            drift.slope
        ),
    }
}

fn c3_bound_preservation() -> Outcome {
    let m = model(128, BoundaryCondition::Dirichlet);
    let x0 = wave(&m, 0.95, 1.0, false);
    let mut ic = IntegratorConfig::new(1e-3, 5.0, 1.0);
    ic.track_norms = false;
    ic.record_every = 1000;
    let it = Integrator::new(m, pot(), noise_with(8), ic).unwrap();
    let paths = ensemble(101, 100, |_, rng| it.simulate(&x0, &[], rng)).unwrap();
    let max_abs = paths.iter().map(|p| p.max_abs).fold(0.0, f64::max);
    Outcome {
        pass: max_abs < 1.0,
        detail: format!("100 trajectories, max |u| over all steps = {max_abs:.17}"),
    }
}

fn c4_moments() -> Outcome {
    // the noise does not vanish on the boundary, so the Z estimate is taken
    // with Neumann conditions where B(u) stays in V
    let m = model(64, BoundaryCondition::Neumann);
    let x0 = wave(&m, 0.5, 1.0, true);
    let mut ic = IntegratorConfig::new(1e-3, 2.0, 1.0);
    ic.record_every = 100;
    let it = Integrator::new(m, pot(), noise_with(8), ic).unwrap();
    let c = moment_check(&it, &x0, 100, 202, 2.0).unwrap();
    let detail = c
        .series
        .iter()
        .map(|s| {
            let ratio = s
                .mean
                .iter()
                .zip(&s.envelope)
                .map(|(a, b)| a / b)
                .fold(0.0, f64::max);
            format!("{}: slope {:.3} vs envelope {:.3}, max mean/envelope {:.3}", s.name, s.slope, s.envelope_slope, ratio)
        })
        .collect::<Vec<_>>()
        .join("; ");
    Outcome {
        pass: c.pass && c.series.len() == 3 && c.max_abs < 1.0,
        detail,
    }
}

fn c5_contraction() -> Outcome {
    let m = model(128, BoundaryCondition::Dirichlet);
    let x0 = wave(&m, 0.9, 1.0, false);
    let y0: Vec<f64> = x0.iter().map(|v| -v).collect();
    let mut ic = IntegratorConfig::new(1e-3, 3.0, 1.0);
    ic.track_norms = false;
    ic.record_every = 50;
    let it = Integrator::new(m, pot(), noise_with(8), ic).unwrap();
    let mut cfg = MixingConfig::new(3.0, 100);
    cfg.seed = 303;
    let e = mixing_rate(&it, &x0, &y0, &cfg).unwrap();
    Outcome {
        pass: e.pass && e.rate >= e.alpha0 - e.ci && e.envelope_ok,
        detail: format!(
            "fitted rate {:.3} ± {:.3} on [{:.1}, {:.1}], alpha0 {:.4}, series <= 4|D| envelope: {}",
            e.rate, e.ci, e.fit_window.0, e.fit_window.1, e.alpha0, e.envelope_ok
        ),
    }
}

fn c6_invariant() -> Outcome {
    let m = model(64, BoundaryCondition::Dirichlet);
    let x0 = wave(&m, 0.5, 1.0, false);
    let y0 = wave(&m, -0.8, 2.0, false);
    let mut ic = IntegratorConfig::new(1e-3, 50.0, 1.0);
    ic.track_norms = false;
    let it = Integrator::new(m, pot(), noise_with(8), ic).unwrap();
    let g = Observable::new(ObservableSpec::Cosine { mode: 1, amplitude: 1.0 }, &it.model).unwrap();
    let obs: Vec<(&str, &dyn PathFunctional)> = vec![("cosine", &g)];
    let kb = KrylovConfig::new(50.0);
    let a = krylov_bogoliubov(&it, &x0, &kb, &obs, &mut stream(404, 0)).unwrap();
    let b = krylov_bogoliubov(&it, &y0, &kb, &obs, &mut stream(404, 1)).unwrap();
    let names: Vec<&str> = MOMENT_NAMES.iter().copied().chain(["cosine"]).collect();
    let agree: Vec<(&str, bool)> = names
        .iter()
        .map(|n| (*n, averages_agree(a.average(n).unwrap(), b.average(n).unwrap(), 3.0)))
        .collect();
    let vol = it.model.volume();
    let ma = support_moments(&a, vol, 5, 0.05).unwrap();
    let mb = support_moments(&b, vol, 5, 0.05).unwrap();
    let disagree: Vec<&str> = agree.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let unstable: Vec<String> = ma
        .rows
        .iter()
        .chain(&mb.rows)
        .filter(|r| !r.stable)
        .map(|r| r.name.clone())
        .collect();
    Outcome {
        pass: integrator_alpha0(&it) > 0.0 && disagree.is_empty() && ma.pass && mb.pass,
        detail: format!(
            "mean |u|_H^2 {:.4} / {:.4} (|D| = {vol}), disagreeing: {disagree:?}, unstable: {unstable:?}",
            ma.h_sq_mean, mb.h_sq_mean
        ),
    }
}

fn c7_kolmogorov() -> Outcome {
    let m = model(16, BoundaryCondition::Dirichlet);
    let points = vec![
        vec![0.0; 16],
        wave(&m, 0.5, 1.0, false),
        wave(&m, -0.5, 1.0, false),
        wave(&m, 0.4, 2.0, false),
        wave(&m, 0.7, 3.0, false),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, x) in points.iter().enumerate() {
        assert!(in_a_str(&m, &pot(), x));
        let mut rc = ResolventConfig::new(1e-3, 10_000);
        rc.seed = 700 + i as u64;
        let p = KolmogorovProblem::new(
            m.clone(),
            pot(),
            noise_with(4),
            1.0,
            None,
            ObservableSpec::Cosine { mode: 1, amplitude: 2.0 },
            SmoothingParams::schedule(16),
            rc,
        )
        .unwrap();
        let r = p.residual_check(x).unwrap();
        let bound = p.g_sup / p.alpha;
        let ok = r.pass() && r.phi.value.abs() <= bound + 3.0 * r.phi.std_error;
        pass &= ok;
        parts.push(format!(
            "x{i}: |φ| {:.4} <= {:.4}, r_direct {:.2e} ± {:.2e}, r_semigroup {:.2e} ± {:.2e}{}",
            r.phi.value.abs(),
            bound,
            r.r_direct,
            r.r_direct_error,
            r.r_semigroup,
            r.r_semigroup_error,
            if ok { "" } else { " (fail)" }
        ));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn c8_friedrichs_scaling() -> Outcome {
    let m = model(32, BoundaryCondition::Dirichlet);
    let samples = vec![wave(&m, 0.5, 1.0, false), wave(&m, 0.9, 1.0, false), wave(&m, 0.6, 2.0, false)];
    let mut tpl = SmoothingParams::new(1.0, None);
    tpl.gamma = 4.0;
    tpl.delta = 2.0;
    let r = scaling_sweep(&m, &pot(), &noise_with(8), &[4, 8, 16, 32, 64], &samples, &tpl).unwrap();
    Outcome {
        pass: r.combined_exponent <= -0.25 + 0.1,
        detail: format!(
            "combined exponent {:.3} ± {:.3} (envelope {:.3}, drift gap {:.3}), gaps monotone: drift {} diffusion {}",
            r.combined_exponent,
            r.combined_exponent_se,
            r.envelope_exponent,
            r.drift_gap_exponent,
            r.drift_monotone,
            r.diffusion_monotone
        ),
    }
}

const REPRO_CONFIG: &str = r#"
kind = "simulate"
seed = 909
observables = [{ kind = "cosine", mode = 1, amplitude = 2.0 }, { kind = "coordinate", mode = 2, amplitude = 1.0 }]
initial = { kind = "mode", mode = 1, amplitude = 0.5 }
[spatial]
grid = [32]
bc = "dirichlet"
[integrator]
dt = 0.001
horizon = 0.5
nu = 1.0
[ensemble]
trajectories = 200
"#;

fn aclab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_aclab")).args(args).output().unwrap()
}

fn column(path: &Path, col: usize) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect()
}

fn c9_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("repro.toml");
    fs::write(&cfg, REPRO_CONFIG).unwrap();
    let c = cfg.to_str().unwrap();
    let outs: Vec<_> = [("a", "1"), ("b", "1"), ("c", "3")]
        .iter()
        .map(|(name, w)| {
            let d = dir.path().join(name);
            let o = aclab(&["run", c, "--workers", w, "--output-dir", d.to_str().unwrap()]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            d
        })
        .collect();
    let files = ["series.csv", "terminal.csv", "summary.json"];
    let identical = files
        .iter()
        .all(|f| fs::read(outs[0].join(f)).unwrap() == fs::read(outs[1].join(f)).unwrap());
    let mut p_min: f64 = 1.0;
    for col in [1, 2] {
        let a = column(&outs[0].join("terminal.csv"), col);
        let b = column(&outs[2].join("terminal.csv"), col);
        p_min = p_min.min(ks_two_sample(&a, &b).unwrap().p_value);
    }
    Outcome {
        pass: identical && p_min > 0.01,
        detail: format!("single-worker reruns byte-identical: {identical}, min KS p across worker counts {p_min:.3}"),
    }
}

#[test]
fn acceptance() {
    let results = [
        run(1, "singular drift", 60.0, c1_singular_drift),
        run(2, "mollification rates", 60.0, c2_mollification_rates),
        run(3, "bound preservation", 300.0, c3_bound_preservation),
        run(4, "moment estimates", 900.0, c4_moments),
        run(5, "exponential contraction", 600.0, c5_contraction),
        run(6, "invariant measure", 1200.0, c6_invariant),
        run(7, "kolmogorov resolvent", 1800.0, c7_kolmogorov),
        run(8, "friedrichs scaling", 900.0, c8_friedrichs_scaling),
        run(9, "reproducibility", 300.0, c9_reproducibility),
    ];
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
