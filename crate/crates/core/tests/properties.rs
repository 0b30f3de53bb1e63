use std::sync::Arc;

use proptest::prelude::*;

use aclab::integrator::{Coefficients, Integrator, IntegratorConfig, Scheme};
use aclab::kolmogorov::{in_a_str, Observable, ObservableSpec, SmoothedCoefficients, SmoothingParams};
use aclab::noise::{NoiseConfig, NoiseFamily};
use aclab::potential::{PotentialSpec, RegularizationParams, RegularizedPotential};
use aclab::rng::stream;
use aclab::spatial::{BoundaryCondition, SpatialConfig, SpatialModel};

fn pot() -> PotentialSpec {
    PotentialSpec::new(1.0, 2.0).unwrap()
}

fn noise() -> NoiseFamily {
    NoiseFamily::new(NoiseConfig::default(), &pot()).unwrap()
}

fn model(n: usize, bc: BoundaryCondition) -> SpatialModel {
    SpatialModel::build(SpatialConfig::one_d(n, bc)).unwrap()
}

fn lambda() -> impl Strategy<Value = f64> {
    (-4.0f64..-1.0).prop_map(|e| 10f64.powf(e))
}

fn field(n: usize, bound: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-bound..=bound, n)
}

proptest! {
    #[test]
    fn resolvent_stays_inside_with_small_residual(x in -5.0f64..5.0, l in lambda()) {
        let p = pot().resolvent(l, x).unwrap();
        // |J| < 1 iff ln(1 − |J|) is finite; tanh itself may round to ±1
        prop_assert!(p.log_gap().is_finite() && p.log_gap() <= 0.0);
        prop_assert!(p.value.abs() <= 1.0);
        prop_assert!(p.residual.abs() < 1e-10, "residual {}", p.residual);
    }

    #[test]
    fn yosida_is_monotone_and_lipschitz(a in -5.0f64..5.0, b in -5.0f64..5.0, l in lambda()) {
        let s = pot();
        let (ya, yb) = (s.yosida(l, a).unwrap(), s.yosida(l, b).unwrap());
        prop_assert!((ya - yb) * (a - b) >= 0.0);
        prop_assert!((ya - yb).abs() <= (a - b).abs() / l * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn beta_coercivity_and_oddness(r in -0.999_999f64..0.999_999) {
        let s = pot();
        let b = s.beta(r).unwrap();
        prop_assert!(b * r >= (s.c0 - s.k) * r * r - s.c1);
        prop_assert_eq!(s.f_prime(r).unwrap(), -s.f_prime(-r).unwrap());
    }

    #[test]
    fn regularized_second_derivative_bound(x in -5.0f64..5.0, l in lambda()) {
        let reg = RegularizedPotential::new(pot(), RegularizationParams::new(l)).unwrap();
        prop_assert!(reg.drift_second(x).unwrap().abs() <= reg.second_bound() * (1.0 + 1e-9));
    }

    #[test]
    fn diffusion_vanishes_where_field_touches_barrier(
        u in field(16, 1.0),
        idx in 0usize..16,
        sign in prop::bool::ANY,
        dw in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let mut u = u;
        u[idx] = if sign { 1.0 } else { -1.0 };
        let b = noise().diffusion_apply(&u, &dw).unwrap();
        prop_assert_eq!(b[idx], 0.0);
    }

    #[test]
    fn hs_norm_bounded_by_c_b(u in field(32, 1.0)) {
        let m = model(32, BoundaryCondition::Dirichlet);
        let nz = noise();
        prop_assert!(nz.hs_norm_sq(&u, m.cell_volume()) <= nz.c_b * m.volume());
    }

    #[test]
    fn diffusion_is_lipschitz(u in field(32, 1.0), v in field(32, 1.0)) {
        let m = model(32, BoundaryCondition::Dirichlet);
        let nz = noise();
        let d: Vec<f64> = u.iter().zip(&v).map(|(a, b)| nz.shape(*a) - nz.shape(*b)).collect();
        let lhs = nz.amplitude_sum_sq() * m.h_norm_sq(&d);
        let sup = u.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(lhs <= nz.c_b * m.volume() * sup * sup * (1.0 + 1e-12));
    }

    #[test]
    fn heat_semigroup_composes_and_contracts(x in field(24, 2.0), s in 0.0f64..0.5, t in 0.0f64..0.5) {
        let m = model(24, BoundaryCondition::Neumann);
        let a = m.heat_semigroup(t, &m.heat_semigroup(s, &x).unwrap()).unwrap();
        let b = m.heat_semigroup(t + s, &x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-12);
        }
        prop_assert!(m.h_norm_sq(&b).sqrt() <= (-(t + s)).exp() * m.h_norm_sq(&x).sqrt() * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn poincare_with_k0(x in field(24, 2.0)) {
        let m = model(24, BoundaryCondition::Dirichlet);
        let n = m.norms(&x).unwrap();
        prop_assert!(n.h <= m.k0() * n.v * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn observables_respect_sup_norm(x in field(16, 5.0), mode in 1usize..16, amp in -4.0f64..4.0) {
        let m = model(16, BoundaryCondition::Dirichlet);
        for spec in [
            ObservableSpec::Cosine { mode, amplitude: amp },
            ObservableSpec::GaussRadial { mode, amplitude: amp },
            ObservableSpec::Coordinate { mode, amplitude: amp },
        ] {
            let g = Observable::new(spec, &m).unwrap();
            prop_assert!(g.eval(&x).abs() <= g.sup_norm().unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn splitting_never_reaches_the_barrier(x0 in field(32, 1.0), seed in any::<u64>()) {
        let m = model(32, BoundaryCondition::Dirichlet);
        let it = Integrator::new(m, pot(), noise(), IntegratorConfig::new(1e-2, 0.2, 1.0)).unwrap();
        let mut r = stream(seed, 0);
        let p = it.simulate(&x0, &[], &mut r).unwrap();
        prop_assert!(p.terminal.iter().all(|v| v.abs() < 1.0));
        prop_assert!(p.max_abs <= 1.0);
        // every recorded state after the first step is strictly inside
        prop_assert!(in_a_str(&it.model, &it.potential, &p.terminal));
    }

    #[test]
    fn smoothed_drift_is_monotone_up_to_k(x in field(16, 1.0), z in field(16, 1.0), n in 2u64..64) {
        let m = model(16, BoundaryCondition::Dirichlet);
        let c = SmoothedCoefficients::new(&m, &pot(), &noise(), SmoothingParams::schedule(n)).unwrap();
        let mut d = vec![0.0; 16];
        c.drift_derivative(&x, &z, &mut d).unwrap();
        prop_assert!(m.inner(&d, &z) >= -pot().k * m.h_norm_sq(&z) * (1.0 + 1e-9) - 1e-12);
    }

    #[test]
    fn smoothed_noise_keeps_hs_bound(x in field(16, 1.5), n in 2u64..64) {
        let m = model(16, BoundaryCondition::Dirichlet);
        let nz = noise();
        let c = SmoothedCoefficients::new(&m, &pot(), &nz, SmoothingParams::schedule(n)).unwrap();
        prop_assert!(c.hs_norm_sq(&x).unwrap() <= nz.c_b * m.volume());
    }

    #[test]
    fn regularized_scheme_runs_with_smoothed_coefficients(x0 in field(16, 1.0), seed in any::<u64>()) {
        let m = model(16, BoundaryCondition::Dirichlet);
        let c = Arc::new(SmoothedCoefficients::new(&m, &pot(), &noise(), SmoothingParams::schedule(8)).unwrap());
        let mut cfg = IntegratorConfig::new(1e-3, 0.02, 1.0);
        cfg.scheme = Scheme::RegularizedExplicit;
        let it = Integrator::new(m, pot(), noise(), cfg).unwrap().with_coefficients(c);
        let mut r = stream(seed, 0);
        let u = it.terminal(&x0, &mut r).unwrap();
        prop_assert!(u.iter().all(|v| v.is_finite()));
    }
}
