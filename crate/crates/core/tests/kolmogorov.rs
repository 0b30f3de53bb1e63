//! Generator and resolvent checks on cases with known answers.

use std::f64::consts::PI;

use aclab::kolmogorov::{
    apply_l0, KolmogorovProblem, L0Inputs, ObservableSpec, ResolventConfig, SmoothedCoefficients, SmoothingParams,
};
use aclab::noise::{NoiseConfig, NoiseFamily};
use aclab::potential::PotentialSpec;
use aclab::spatial::{BoundaryCondition, SpatialConfig, SpatialModel};

fn pot() -> PotentialSpec {
    PotentialSpec::new(1.0, 2.0).unwrap()
}

fn noise(modes: usize) -> NoiseFamily {
    let mut c = NoiseConfig::default();
    c.num_modes = modes;
    NoiseFamily::new(c, &pot()).unwrap()
}

fn model(n: usize) -> SpatialModel {
    SpatialModel::build(SpatialConfig::one_d(n, BoundaryCondition::Dirichlet)).unwrap()
}

fn sine(m: &SpatialModel, amp: f64, k: f64) -> Vec<f64> {
    m.nodes().iter().map(|p| amp * (k * PI * p[0]).sin()).collect()
}

fn problem(m: &SpatialModel, g: ObservableSpec, trajectories: usize, seed: u64) -> KolmogorovProblem {
    let mut rc = ResolventConfig::new(1e-3, trajectories);
    rc.seed = seed;
    KolmogorovProblem::new(m.clone(), pot(), noise(4), 1.0, None, g, SmoothingParams::schedule(16), rc).unwrap()
}

#[test]
fn generator_kills_constants() {
    let m = model(16);
    let x = sine(&m, 0.5, 1.0);
    let inputs = L0Inputs::exact(&m, &pot(), &noise(8), 1.0, &x).unwrap();
    let v = apply_l0(&m, |_: &[f64]| 3.5, &x, &inputs, 1e-2).unwrap();
    assert_eq!(v.value, 0.0);
}

#[test]
fn generator_on_linear_functional_is_the_drift() {
    let m = model(16);
    let x = sine(&m, 0.5, 1.0);
    let w = sine(&m, 1.3, 3.0);
    let exact = L0Inputs::exact(&m, &pot(), &noise(8), 1.0, &x).unwrap();
    // without noise L₀(x, w) = (d, w)
    let inputs = L0Inputs {
        amplitude_sum_sq: 0.0,
        ..exact.clone()
    };
    let phi = |y: &[f64]| m.inner(y, &w);
    let v = apply_l0(&m, phi, &x, &inputs, 1e-2).unwrap();
    let want = m.inner(&inputs.drift_direction, &w);
    assert!((v.value - want).abs() < 1e-8 * want.abs().max(1.0), "{} vs {want}", v.value);
    // and the trace term does not see a linear functional
    let v2 = apply_l0(&m, phi, &x, &exact, 1e-2).unwrap();
    assert!((v2.value - want).abs() < 1e-8 * want.abs().max(1.0));
}

#[test]
fn generator_on_half_norm_square_gives_minus_half_trace() {
    let m = model(16);
    let nz = noise(8);
    let x = sine(&m, 0.6, 1.0);
    let inputs = L0Inputs::exact(&m, &pot(), &nz, 1.0, &x).unwrap();
    let v = apply_l0(&m, |y: &[f64]| 0.5 * m.h_norm_sq(y), &x, &inputs, 1e-2).unwrap();
    // −½ Tr[B*D²φB] + (d, x) with D²φ = I
    let want = -0.5 * nz.hs_norm_sq(&x, m.cell_volume()) + m.inner(&inputs.drift_direction, &x);
    assert!((v.value - want).abs() < 1e-7 * want.abs().max(1.0), "{} vs {want}", v.value);
}

#[test]
fn constant_observable_gives_value_over_alpha() {
    let m = model(8);
    let p = problem(&m, ObservableSpec::Constant { value: 2.5 }, 4, 1);
    let phi = p.resolvent_phi(&sine(&m, 0.4, 1.0)).unwrap();
    let want = 2.5 / p.alpha;
    assert!((phi.value - want).abs() < 1e-12 * want, "{} vs {want}", phi.value);
    assert_eq!(phi.std_error, 0.0);
}

#[test]
fn resolvent_is_bounded_by_sup_over_alpha() {
    let m = model(8);
    let p = problem(&m, ObservableSpec::Cosine { mode: 1, amplitude: 2.0 }, 200, 2);
    let bound = p.g_sup / p.alpha;
    for x in [vec![0.0; 8], sine(&m, 0.8, 1.0), sine(&m, -0.5, 2.0)] {
        let phi = p.resolvent_phi(&x).unwrap();
        assert!(phi.value.abs() <= bound + 3.0 * phi.std_error, "{} > {bound}", phi.value);
    }
}

#[test]
fn independent_seed_sets_agree() {
    let m = model(8);
    let p = problem(&m, ObservableSpec::GaussRadial { mode: 1, amplitude: 0.3 }, 400, 0);
    let x = sine(&m, 0.3, 1.0);
    let a = p.resolvent_phi_with_seed(&x, 10).unwrap();
    let b = p.resolvent_phi_with_seed(&x, 20).unwrap();
    assert_ne!(a.value, b.value);
    let s = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    assert!((a.value - b.value).abs() < 4.0 * s, "{a:?} vs {b:?}");
}

#[test]
fn alpha_at_or_below_bar_alpha_is_rejected() {
    let m = model(8);
    let nz = noise(4);
    let ba = aclab::kolmogorov::bar_alpha(pot().k, nz.c_b);
    let e = KolmogorovProblem::new(
        m,
        pot(),
        nz,
        1.0,
        Some(ba),
        ObservableSpec::Constant { value: 1.0 },
        SmoothingParams::schedule(4),
        ResolventConfig::new(1e-3, 10),
    )
    .err()
    .expect("alpha = bar_alpha must be rejected");
    let msg = e.to_string();
    assert!(msg.contains(&format!("{ba}")), "{msg}");
}

#[test]
fn unsmoothed_coefficients_are_pointwise() {
    let m = model(16);
    let c = SmoothedCoefficients::new(&m, &pot(), &noise(8), SmoothingParams::new(0.1, None)).unwrap();
    let x = sine(&m, 0.95, 1.0);
    let f = c.smooth_drift(&x).unwrap();
    let s = c.smooth_diffusion_shape(&x).unwrap();
    for i in 0..16 {
        let fd = c.regularized_potential().drift(x[i]).unwrap();
        let sd = c.mollified_noise().shape(x[i]);
        assert!((f[i] - fd).abs() <= 1e-12 * fd.abs().max(1.0), "drift at {i}: {} vs {fd}", f[i]);
        assert!((s[i] - sd).abs() <= 1e-12, "shape at {i}: {} vs {sd}", s[i]);
    }
}

#[test]
fn gauss_hermite_smoothing_matches_monte_carlo() {
    let m = model(16);
    let c = SmoothedCoefficients::new(&m, &pot(), &noise(8), SmoothingParams::schedule(4)).unwrap();
    let x = sine(&m, 0.7, 1.0);
    let exact = c.smooth_drift(&x).unwrap();
    let mc = c.smooth_drift_mc(&x, 20_000, &mut aclab::rng::stream(5, 0)).unwrap();
    for i in 0..16 {
        let tol = 4.0 * mc.std_error[i] + 1e-9;
        assert!((exact[i] - mc.mean[i]).abs() < tol, "node {i}: {} vs {} ± {}", exact[i], mc.mean[i], mc.std_error[i]);
    }
}
