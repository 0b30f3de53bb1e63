//! Ornstein-Uhlenbeck smoothing of the regularised coefficients, the
//! operator `L₀^{λ,n}`, Monte-Carlo resolvents
//! `φ(x) = ∫₀^∞ e^{−αt} E g(u_{λ,n}(t; x)) dt` and their residual checks.
//!
//! `F_λ'` and the noise shape act pointwise, so the Gaussian averages over
//! `N_{Q_t}` only see the marginal variance `σ_i² = Σ_j q_j φ_j(x_i)²` at
//! each node. The default path evaluates them by Gauss-Hermite quadrature;
//! the Monte-Carlo versions sample full fields and are kept as a check.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::integrator::{ensemble, Coefficients, Integrator, IntegratorConfig, PathFunctional, Scheme, TrajectoryState};
use crate::noise::{MollifiedNoise, NoiseFamily};
use crate::potential::{PotentialSpec, RegularizationParams, RegularizedPotential};
use crate::quadrature::{gauss_hermite_normal, Rule};
use crate::rng::Stream;
use crate::spatial::SpatialModel;
use crate::stats::{mean_se, Running};
use crate::tabulate::HermiteTable;
use crate::{Error, Result};

const MODULE: &str = "kolmogorov";

/// `½(2K + 33 C_B + 1) ∨ 16 C_B`.
pub fn bar_alpha(k: f64, c_b: f64) -> f64 {
    (0.5 * (2.0 * k + 33.0 * c_b + 1.0)).max(16.0 * c_b)
}

/// `ν(1/K₀² − 1) − C_B/2 − K`.
pub fn alpha0(nu: f64, k0: f64, c_b: f64, k: f64) -> f64 {
    nu * (1.0 / (k0 * k0) - 1.0) - 0.5 * c_b - k
}

/// `(1 + n^{7/4} + n^{3δ/4})(n^{−δ} + n^{−γ/2})`.
pub fn discrepancy_envelope(n: f64, gamma: f64, delta: f64) -> f64 {
    (1.0 + n.powf(1.75) + n.powf(0.75 * delta)) * (n.powf(-delta) + n.powf(-0.5 * gamma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingParams {
    pub lambda: f64,
    /// `None` skips the Gaussian smoothing (`n = ∞`).
    #[serde(default)]
    pub n: Option<u64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_hermite_points")]
    pub hermite_points: usize,
}

fn default_gamma() -> f64 {
    4.0
}
fn default_delta() -> f64 {
    2.0
}
fn default_mc_samples() -> usize {
    256
}
fn default_hermite_points() -> usize {
    24
}

impl SmoothingParams {
    pub fn new(lambda: f64, n: Option<u64>) -> Self {
        Self {
            lambda,
            n,
            gamma: default_gamma(),
            delta: default_delta(),
            mc_samples: default_mc_samples(),
            hermite_points: default_hermite_points(),
        }
    }

    /// `λ_n = n^{−1/4}` with default rates.
    pub fn schedule(n: u64) -> Self {
        Self::new((n as f64).powf(-0.25), Some(n))
    }

    /// `δ > 7/4`, `γ > 7/2`, `γ > 3δ/2`.
    pub fn satisfies_scaling_constraints(&self) -> bool {
        self.delta > 1.75 && self.gamma > 3.5 && self.gamma > 1.5 * self.delta
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("smoothing.lambda", "must be positive"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config("smoothing.gamma", "must be positive"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::config("smoothing.delta", "must be positive"));
        }
        if self.n == Some(0) {
            return Err(Error::config("smoothing.n", "must be at least 1"));
        }
        if self.mc_samples < 2 {
            return Err(Error::config("smoothing.mc_samples", "must be at least 2"));
        }
        if self.hermite_points == 0 {
            return Err(Error::config("smoothing.hermite_points", "must be at least 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- observables

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObservableSpec {
    /// `g ≡ value`.
    Constant { value: f64 },
    /// `cos((x, w)_H)`, `w = amplitude · e_mode`.
    Cosine { mode: usize, amplitude: f64 },
    /// `exp(−‖x − x₀‖²_H)`, `x₀ = amplitude · e_mode`.
    GaussRadial { mode: usize, amplitude: f64 },
    /// `tanh((x, w)_H)`, a smooth clamp of the coordinate `(x, w)_H`.
    Coordinate { mode: usize, amplitude: f64 },
    /// `‖x‖²_H` (bounded by `|D|` on `𝒜` only).
    NormSq,
}

impl ObservableSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ObservableSpec::Constant { .. } => "constant",
            ObservableSpec::Cosine { .. } => "cosine",
            ObservableSpec::GaussRadial { .. } => "gauss-radial",
            ObservableSpec::Coordinate { .. } => "coordinate",
            ObservableSpec::NormSq => "norm-sq",
        }
    }

    /// Built-in library with short descriptions.
    pub fn library() -> Vec<(&'static str, &'static str)> {
        vec![
            ("constant", "g(x) = value"),
            ("cosine", "g(x) = cos((x, amplitude*e_mode)_H)"),
            ("gauss-radial", "g(x) = exp(-|x - amplitude*e_mode|_H^2)"),
            ("coordinate", "g(x) = tanh((x, amplitude*e_mode)_H)"),
            ("norm-sq", "g(x) = |x|_H^2 (bounded on the admissible set only)"),
        ]
    }
}

/// An observable bound to a spatial model.
#[derive(Debug, Clone, PartialEq)]
pub struct Observable {
    pub spec: ObservableSpec,
    w: Vec<f64>,
    cell: f64,
}

impl Observable {
    pub fn new(spec: ObservableSpec, model: &SpatialModel) -> Result<Self> {
        let w = match &spec {
            ObservableSpec::Cosine { mode, amplitude }
            | ObservableSpec::GaussRadial { mode, amplitude }
            | ObservableSpec::Coordinate { mode, amplitude } => {
                if *mode == 0 || *mode > model.len() {
                    return Err(Error::config(
                        "observable.mode",
                        format!("mode {mode} outside 1..={}", model.len()),
                    ));
                }
                if !amplitude.is_finite() {
                    return Err(Error::config("observable.amplitude", "must be finite"));
                }
                model.eigenfunction(mode - 1)?.iter().map(|v| v * amplitude).collect()
            }
            ObservableSpec::Constant { value } => {
                if !value.is_finite() {
                    return Err(Error::config("observable.value", "must be finite"));
                }
                Vec::new()
            }
            ObservableSpec::NormSq => Vec::new(),
        };
        Ok(Self {
            spec,
            w,
            cell: model.cell_volume(),
        })
    }

    fn dot(&self, x: &[f64]) -> f64 {
        self.cell * x.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.spec {
            ObservableSpec::Constant { value } => *value,
            ObservableSpec::Cosine { .. } => self.dot(x).cos(),
            ObservableSpec::GaussRadial { .. } => {
                let d: f64 = x.iter().zip(&self.w).map(|(a, b)| (a - b).powi(2)).sum();
                (-self.cell * d).exp()
            }
            ObservableSpec::Coordinate { .. } => self.dot(x).tanh(),
            ObservableSpec::NormSq => self.cell * x.iter().map(|v| v * v).sum::<f64>(),
        }
    }

    /// `sup_H |g|`, `None` when unbounded on `H`.
    pub fn sup_norm(&self) -> Option<f64> {
        match &self.spec {
            ObservableSpec::Constant { value } => Some(value.abs()),
            ObservableSpec::Cosine { .. }
            | ObservableSpec::GaussRadial { .. }
            | ObservableSpec::Coordinate { .. } => Some(1.0),
            ObservableSpec::NormSq => None,
        }
    }

    /// Lipschitz constant on `H`, `None` when unbounded.
    pub fn lipschitz(&self) -> Option<f64> {
        match &self.spec {
            ObservableSpec::Constant { .. } => Some(0.0),
            ObservableSpec::Cosine { amplitude, .. } | ObservableSpec::Coordinate { amplitude, .. } => {
                Some(amplitude.abs())
            }
            // sup_r 2r e^{−r²}
            ObservableSpec::GaussRadial { .. } => Some((2.0f64).sqrt() * (-0.5f64).exp()),
            ObservableSpec::NormSq => None,
        }
    }

    /// Analytic `Dg(x)[z]`.
    pub fn derivative(&self, x: &[f64], z: &[f64]) -> f64 {
        match &self.spec {
            ObservableSpec::Constant { .. } => 0.0,
            ObservableSpec::Cosine { .. } => -self.dot(x).sin() * self.dot(z),
            ObservableSpec::GaussRadial { .. } => {
                let d: Vec<f64> = x.iter().zip(&self.w).map(|(a, b)| a - b).collect();
                let dz = self.cell * d.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
                -2.0 * self.eval(x) * dz
            }
            ObservableSpec::Coordinate { .. } => {
                let t = self.dot(x).tanh();
                (1.0 - t * t) * self.dot(z)
            }
            ObservableSpec::NormSq => 2.0 * self.cell * x.iter().zip(z).map(|(a, b)| a * b).sum::<f64>(),
        }
    }
}

impl PathFunctional for Observable {
    fn eval(&self, u: &[f64]) -> f64 {
        Observable::eval(self, u)
    }
}

// ---------------------------------------------------------------- smoothing

/// Scalar kernels `F_λ'`, `F_λ''`, `P_λ`, `P_λ'` with Hermite tables on the
/// range where states normally live and direct evaluation elsewhere.
#[derive(Debug, Clone)]
struct ScalarKernels {
    reg: RegularizedPotential,
    noise: MollifiedNoise,
    drift: HermiteTable,
    drift_d: HermiteTable,
    shape: HermiteTable,
    shape_d: HermiteTable,
}

const DRIFT_TABLE_HALF_WIDTH: f64 = 3.0;
const MIN_TABLE_INTERVALS: usize = 4096;
const MAX_TABLE_INTERVALS: usize = 200_000;

fn table_intervals(width: f64, scale: f64) -> usize {
    let n = (width / (scale / 16.0)).ceil();
    (n as usize).clamp(MIN_TABLE_INTERVALS, MAX_TABLE_INTERVALS)
}

impl ScalarKernels {
    fn new(reg: RegularizedPotential, noise: MollifiedNoise) -> Result<Self> {
        let h = DRIFT_TABLE_HALF_WIDTH;
        let eps_d = reg.lambda() * reg.lambda();
        let nd = table_intervals(2.0 * h, eps_d);
        let drift = HermiteTable::build(-h, h, nd, |x| reg.drift(x), |x| reg.drift_second(x))?;
        let drift_d = HermiteTable::build(-h, h, nd, |x| reg.drift_second(x), |x| reg.drift_third(x))?;
        let e = noise.radius();
        let ns = table_intervals(2.0 + 2.0 * e, e);
        let (lo, hi) = (-1.0 - e, 1.0 + e);
        let shape = HermiteTable::build(lo, hi, ns, |r| Ok(noise.shape(r)), |r| Ok(noise.shape_d1(r)))?;
        let shape_d = HermiteTable::build(lo, hi, ns, |r| Ok(noise.shape_d1(r)), |r| Ok(noise.shape_d2(r)))?;
        Ok(Self {
            reg,
            noise,
            drift,
            drift_d,
            shape,
            shape_d,
        })
    }

    fn drift_range(&self) -> (f64, f64, usize) {
        (self.drift.lo(), self.drift.hi(), self.drift.intervals())
    }

    // the smoothed shape has support widened by the Gaussian, so its table
    // covers the drift range
    fn shape_range(&self) -> (f64, f64, usize) {
        (self.drift.lo(), self.drift.hi(), self.drift.intervals())
    }

    #[inline]
    fn drift(&self, x: f64) -> Result<f64> {
        match self.drift.get(x) {
            Some(v) => Ok(v),
            None => self.reg.drift(x),
        }
    }

    #[inline]
    fn drift_d(&self, x: f64) -> Result<f64> {
        match self.drift_d.get(x) {
            Some(v) => Ok(v),
            None => self.reg.drift_second(x),
        }
    }

    #[inline]
    fn shape(&self, r: f64) -> f64 {
        // outside [−1−ε, 1+ε] the mollified shape vanishes identically
        self.shape.get(r).unwrap_or(0.0)
    }

    #[inline]
    fn shape_d(&self, r: f64) -> f64 {
        self.shape_d.get(r).unwrap_or(0.0)
    }
}

/// One OU smoothing layer: `x ↦ e^{−C t} E[f(e^{−C t}x + y)]`, `y ~ N_{Q_t}`.
/// `values[i]` tabulates `m ↦ E f(m + σ_i ξ)` for node `i`.
#[derive(Debug, Clone)]
struct OuLayer {
    t: f64,
    semigroup: Vec<f64>,
    sigma: Vec<f64>,
    values: Vec<Arc<HermiteTable>>,
}

impl OuLayer {
    fn new(model: &SpatialModel, t: f64) -> Result<Self> {
        let cov = model.covariance(t)?;
        let semigroup = model.eigenvalues().iter().map(|mu| (-(1.0 + mu) * t).exp()).collect();
        let sigma = model.pointwise_variance(&cov).iter().map(|v| v.sqrt()).collect();
        Ok(Self {
            t,
            semigroup,
            sigma,
            values: Vec::new(),
        })
    }

    // one table per distinct σ_i (nodes related by symmetry share one)
    fn tabulate<F, D>(&mut self, rule: &Rule, lo: f64, hi: f64, intervals: usize, f: F, df: D) -> Result<()>
    where
        F: Fn(f64) -> Result<f64>,
        D: Fn(f64) -> Result<f64>,
    {
        let avg = |g: &dyn Fn(f64) -> Result<f64>, m: f64, s: f64| -> Result<f64> {
            let mut acc = 0.0;
            for (z, w) in rule.nodes.iter().zip(&rule.weights) {
                acc += w * g(m + s * z)?;
            }
            Ok(acc)
        };
        let mut made: Vec<(f64, Arc<HermiteTable>)> = Vec::new();
        self.values = Vec::with_capacity(self.sigma.len());
        for &s in &self.sigma {
            let hit = made.iter().find(|(t, _)| (t - s).abs() <= 1e-14 * s.max(1e-300));
            let table = match hit {
                Some((_, t)) => t.clone(),
                None => {
                    let t = Arc::new(HermiteTable::build(lo, hi, intervals, |m| avg(&f, m, s), |m| avg(&df, m, s))?);
                    made.push((s, t.clone()));
                    t
                }
            };
            self.values.push(table);
        }
        Ok(())
    }

    fn apply_semigroup(&self, model: &SpatialModel, x: &[f64], out: &mut [f64]) {
        let mut a = vec![0.0; x.len()];
        model.forward_into(x, &mut a);
        for (aj, m) in a.iter_mut().zip(&self.semigroup) {
            *aj *= m;
        }
        model.inverse_into(&a, out);
    }
}

/// Monte-Carlo estimate of a field with pointwise standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloField {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
}

/// `F_{λ,n}` and `B_{λ,n}` (as the common shape `S_{λ,n}`) for one `(λ, n)`.
#[derive(Debug, Clone)]
pub struct SmoothedCoefficients {
    pub params: SmoothingParams,
    model: SpatialModel,
    noise: NoiseFamily,
    kernels: ScalarKernels,
    drift_layer: Option<OuLayer>,
    noise_layer: Option<OuLayer>,
    hermite: Rule,
}

impl SmoothedCoefficients {
    pub fn new(
        model: &SpatialModel,
        potential: &PotentialSpec,
        noise: &NoiseFamily,
        params: SmoothingParams,
    ) -> Result<Self> {
        params.validate()?;
        let reg = RegularizedPotential::new(*potential, RegularizationParams::new(params.lambda))?;
        let mol = MollifiedNoise::new(noise.clone(), reg.mollifier.clone(), params.lambda, params.gamma)?;
        let kernels = ScalarKernels::new(reg, mol)?;
        let hermite = gauss_hermite_normal(params.hermite_points);
        let (drift_layer, noise_layer) = match params.n {
            None => (None, None),
            Some(n) => {
                let n = n as f64;
                let mut dl = OuLayer::new(model, 1.0 / n)?;
                let (lo, hi, iv) = kernels.drift_range();
                dl.tabulate(&hermite, lo, hi, iv, |r| kernels.drift(r), |r| kernels.drift_d(r))?;
                let mut nl = OuLayer::new(model, n.powf(-params.delta))?;
                let (lo, hi, iv) = kernels.shape_range();
                nl.tabulate(&hermite, lo, hi, iv, |r| Ok(kernels.shape(r)), |r| Ok(kernels.shape_d(r)))?;
                (Some(dl), Some(nl))
            }
        };
        Ok(Self {
            hermite,
            params,
            model: model.clone(),
            noise: noise.clone(),
            kernels,
            drift_layer,
            noise_layer,
        })
    }

    pub fn regularized_potential(&self) -> &RegularizedPotential {
        &self.kernels.reg
    }

    pub fn mollified_noise(&self) -> &MollifiedNoise {
        &self.kernels.noise
    }

    /// Smoothing times `1/n` and `1/n^δ` (both `0` for `n = ∞`).
    pub fn smoothing_times(&self) -> (f64, f64) {
        (
            self.drift_layer.as_ref().map_or(0.0, |l| l.t),
            self.noise_layer.as_ref().map_or(0.0, |l| l.t),
        )
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.model.len() {
            return Err(Error::Argument(format!(
                "field has {} values, grid has {}",
                x.len(),
                self.model.len()
            )));
        }
        Ok(())
    }

    // E[f(m_i + σ_i ξ)] for every node
    fn gauss_average<F: FnMut(f64) -> Result<f64>>(&self, m: &[f64], sigma: &[f64], mut f: F) -> Result<Vec<f64>> {
        let rule = &self.hermite;
        m.iter()
            .zip(sigma)
            .map(|(&mi, &si)| {
                if si == 0.0 {
                    return f(mi);
                }
                let mut acc = 0.0;
                for (z, w) in rule.nodes.iter().zip(&rule.weights) {
                    acc += w * f(mi + si * z)?;
                }
                Ok(acc)
            })
            .collect()
    }

    fn smooth_pointwise<F: FnMut(f64) -> Result<f64>>(
        &self,
        layer: Option<&OuLayer>,
        x: &[f64],
        f: F,
    ) -> Result<Vec<f64>> {
        self.check(x)?;
        let Some(layer) = layer else {
            let mut f = f;
            return x.iter().map(|&v| f(v)).collect();
        };
        let mut m = vec![0.0; x.len()];
        layer.apply_semigroup(&self.model, x, &mut m);
        let mut f = f;
        let mut avg = Vec::with_capacity(x.len());
        for (i, &mi) in m.iter().enumerate() {
            avg.push(match layer.values.get(i).and_then(|t| t.get(mi)) {
                Some(v) => v,
                None => self.gauss_average(&[mi], &layer.sigma[i..=i], &mut f)?[0],
            });
        }
        let mut out = vec![0.0; x.len()];
        layer.apply_semigroup(&self.model, &avg, &mut out);
        Ok(out)
    }

    fn smooth_linearised<F: FnMut(f64) -> Result<f64>>(
        &self,
        layer: Option<&OuLayer>,
        x: &[f64],
        v: &[f64],
        f: F,
    ) -> Result<Vec<f64>> {
        self.check(x)?;
        self.check(v)?;
        let Some(layer) = layer else {
            let mut f = f;
            return x.iter().zip(v).map(|(&a, &b)| Ok(f(a)? * b)).collect();
        };
        let n = x.len();
        let mut m = vec![0.0; n];
        layer.apply_semigroup(&self.model, x, &mut m);
        let mut sv = vec![0.0; n];
        layer.apply_semigroup(&self.model, v, &mut sv);
        let avg = self.gauss_average(&m, &layer.sigma, f)?;
        let prod: Vec<f64> = avg.iter().zip(&sv).map(|(a, b)| a * b).collect();
        let mut out = vec![0.0; n];
        layer.apply_semigroup(&self.model, &prod, &mut out);
        Ok(out)
    }

    /// `F_{λ,n}(x)`; for `n = ∞` exactly `F_λ'` applied pointwise.
    pub fn smooth_drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.smooth_pointwise(self.drift_layer.as_ref(), x, |r| self.kernels.drift(r))
    }

    /// `S_{λ,n}(x)` with `B_{λ,n}(x) e_k = c_k S_{λ,n}(x)`.
    pub fn smooth_diffusion_shape(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.smooth_pointwise(self.noise_layer.as_ref(), x, |r| Ok(self.kernels.shape(r)))
    }

    /// Per-mode fields `B_{λ,n}(x) e_k`, `k = 1..=num_modes`.
    pub fn smooth_diffusion(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let s = self.smooth_diffusion_shape(x)?;
        Ok(self
            .noise
            .amplitudes
            .iter()
            .map(|c| s.iter().map(|v| c * v).collect())
            .collect())
    }

    /// `‖B_{λ,n}(x)‖²_HS`.
    pub fn hs_norm_sq(&self, x: &[f64]) -> Result<f64> {
        let s = self.smooth_diffusion_shape(x)?;
        Ok(self.noise.amplitude_sum_sq() * self.model.h_norm_sq(&s))
    }

    fn monte_carlo<F: FnMut(f64) -> Result<f64>>(
        &self,
        layer: Option<&OuLayer>,
        x: &[f64],
        samples: usize,
        rng: &mut Stream,
        mut f: F,
    ) -> Result<MonteCarloField> {
        self.check(x)?;
        let n = x.len();
        let Some(layer) = layer else {
            let mean = x.iter().map(|&v| f(v)).collect::<Result<Vec<_>>>()?;
            return Ok(MonteCarloField {
                mean,
                std_error: vec![0.0; n],
            });
        };
        let cov = self.model.covariance(layer.t)?;
        let mut m = vec![0.0; n];
        layer.apply_semigroup(&self.model, x, &mut m);
        let mut acc = vec![Running::new(); n];
        let mut out = vec![0.0; n];
        for _ in 0..samples {
            let y = self.model.sample_gaussian(&cov, rng)?;
            let fz = m
                .iter()
                .zip(&y)
                .map(|(a, b)| f(a + b))
                .collect::<Result<Vec<_>>>()?;
            layer.apply_semigroup(&self.model, &fz, &mut out);
            for (r, v) in acc.iter_mut().zip(&out) {
                r.push(*v);
            }
        }
        Ok(MonteCarloField {
            mean: acc.iter().map(|r| r.mean()).collect(),
            std_error: acc.iter().map(|r| r.std_error()).collect(),
        })
    }

    /// Plain Monte-Carlo `F_{λ,n}(x)` over `samples` draws of `N_{Q_{1/n}}`.
    pub fn smooth_drift_mc(&self, x: &[f64], samples: usize, rng: &mut Stream) -> Result<MonteCarloField> {
        self.monte_carlo(self.drift_layer.as_ref(), x, samples, rng, |r| self.kernels.reg.drift(r))
    }

    /// Plain Monte-Carlo `S_{λ,n}(x)` over draws of `N_{Q_{1/n^δ}}`.
    pub fn smooth_diffusion_shape_mc(&self, x: &[f64], samples: usize, rng: &mut Stream) -> Result<MonteCarloField> {
        self.monte_carlo(self.noise_layer.as_ref(), x, samples, rng, |r| Ok(self.kernels.noise.shape(r)))
    }

    /// `‖F_{λ,n}(x) − F'(x)‖_H` for `x` strictly inside `(−1, 1)`.
    pub fn drift_gap(&self, potential: &PotentialSpec, x: &[f64]) -> Result<f64> {
        let f = self.smooth_drift(x)?;
        let mut d = Vec::with_capacity(x.len());
        for (fi, &xi) in f.iter().zip(x) {
            d.push(fi - potential.f_prime(xi)?);
        }
        Ok(self.model.h_norm_sq(&d).sqrt())
    }

    /// `‖B_{λ,n}(x) − B(x)‖²_HS` for `|x| ≤ 1`.
    pub fn diffusion_gap(&self, x: &[f64]) -> Result<f64> {
        let s = self.smooth_diffusion_shape(x)?;
        let d: Vec<f64> = s.iter().zip(x).map(|(a, &r)| a - self.noise.shape(r)).collect();
        Ok(self.noise.amplitude_sum_sq() * self.model.h_norm_sq(&d))
    }
}

impl Coefficients for SmoothedCoefficients {
    fn drift(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.smooth_drift(u)?);
        Ok(())
    }

    fn drift_derivative(&self, u: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.smooth_linearised(self.drift_layer.as_ref(), u, v, |r| self.kernels.drift_d(r))?;
        out.copy_from_slice(&d);
        Ok(())
    }

    fn noise_shape(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.smooth_diffusion_shape(u)?);
        Ok(())
    }

    fn noise_shape_derivative(&self, u: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.smooth_linearised(self.noise_layer.as_ref(), u, v, |r| Ok(self.kernels.shape_d(r)))?;
        out.copy_from_slice(&d);
        Ok(())
    }
}

// ---------------------------------------------------------------- L₀

/// `x ∈ 𝒜_str` on the grid: strictly inside `(−1, 1)` with finite discrete
/// Z-norm and finite `‖F'(x)‖_H`.
pub fn in_a_str(model: &SpatialModel, potential: &PotentialSpec, x: &[f64]) -> bool {
    if x.len() != model.len() || x.iter().any(|v| !(v.abs() < 1.0)) {
        return false;
    }
    let Ok(n) = model.norms(x) else {
        return false;
    };
    let mut f2 = 0.0;
    for &v in x {
        match potential.f_prime(v) {
            Ok(f) => f2 += f * f,
            Err(_) => return false,
        }
    }
    n.z.is_finite() && f2.is_finite()
}

/// The directions entering `L₀φ(x)`: `d = −νΔx + F(x)` and the common noise
/// shape `S(x)`, with `Σ_k c_k²` for the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct L0Inputs {
    pub drift_direction: Vec<f64>,
    pub noise_shape: Vec<f64>,
    pub amplitude_sum_sq: f64,
}

impl L0Inputs {
    /// Regularised operator `L₀^{λ,n}`.
    pub fn regularized(model: &SpatialModel, coeffs: &dyn Coefficients, nu: f64, noise: &NoiseFamily, x: &[f64]) -> Result<Self> {
        let lap = model.laplacian(x)?;
        let mut f = vec![0.0; x.len()];
        coeffs.drift(x, &mut f)?;
        let mut s = vec![0.0; x.len()];
        coeffs.noise_shape(x, &mut s)?;
        Ok(Self {
            drift_direction: lap.iter().zip(&f).map(|(l, f)| -nu * l + f).collect(),
            noise_shape: s,
            amplitude_sum_sq: noise.amplitude_sum_sq(),
        })
    }

    /// Unregularised operator `L₀` on `𝒜_str`.
    pub fn exact(model: &SpatialModel, potential: &PotentialSpec, noise: &NoiseFamily, nu: f64, x: &[f64]) -> Result<Self> {
        if !in_a_str(model, potential, x) {
            return Err(Error::Domain("point is not in the strong admissible set".into()));
        }
        let lap = model.laplacian(x)?;
        let mut d = Vec::with_capacity(x.len());
        for (l, &v) in lap.iter().zip(x) {
            d.push(-nu * l + potential.f_prime(v)?);
        }
        Ok(Self {
            drift_direction: d,
            noise_shape: x.iter().map(|&v| noise.shape(v)).collect(),
            amplitude_sum_sq: noise.amplitude_sum_sq(),
        })
    }
}

/// `L₀φ(x)` by central differences with Richardson diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct L0Value {
    pub value: f64,
    /// `|L(ε) − L(2ε)|/3`.
    pub fd_error: f64,
}

fn unit(model: &SpatialModel, v: &[f64]) -> (Vec<f64>, f64) {
    let n = model.h_norm_sq(v).sqrt();
    if n == 0.0 {
        (vec![0.0; v.len()], 0.0)
    } else {
        (v.iter().map(|a| a / n).collect(), n)
    }
}

fn shifted(x: &[f64], dir: &[f64], h: f64) -> Vec<f64> {
    x.iter().zip(dir).map(|(a, b)| a + h * b).collect()
}

/// Applies `L₀` to a deterministic `φ` with finite-difference step `eps`
/// (in H-norm units along normalised directions).
pub fn apply_l0<F: Fn(&[f64]) -> f64>(model: &SpatialModel, phi: F, x: &[f64], inputs: &L0Inputs, eps: f64) -> Result<L0Value> {
    if !(eps > 0.0) {
        return Err(Error::Argument("finite-difference step must be positive".into()));
    }
    let (s_hat, s_norm) = unit(model, &inputs.noise_shape);
    let (d_hat, d_norm) = unit(model, &inputs.drift_direction);
    let p0 = phi(x);
    let est = |h: f64| {
        let d2 = (phi(&shifted(x, &s_hat, h)) - 2.0 * p0 + phi(&shifted(x, &s_hat, -h))) / (h * h);
        let d1 = (phi(&shifted(x, &d_hat, h)) - phi(&shifted(x, &d_hat, -h))) / (2.0 * h);
        -0.5 * inputs.amplitude_sum_sq * s_norm * s_norm * d2 + d_norm * d1
    };
    let a = est(eps);
    let b = est(2.0 * eps);
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::numeric(MODULE, "finite differences of phi are not finite"));
    }
    Ok(L0Value {
        value: a,
        fd_error: (a - b).abs() / 3.0,
    })
}

// ---------------------------------------------------------------- resolvent

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolventConfig {
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    pub dt: f64,
    /// Truncation time; chosen so that the tail is below `1e-10 ‖g‖_∞` when omitted.
    #[serde(default)]
    pub t_max: Option<f64>,
    #[serde(default = "default_fd_eps")]
    pub fd_eps: f64,
    /// `h = semigroup_steps · dt` in the semigroup residual.
    #[serde(default = "default_semigroup_steps")]
    pub semigroup_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Wall-clock budget per point; exceeding it returns a partial result.
    #[serde(default)]
    pub time_budget_secs: Option<f64>,
    /// Richardson extrapolation `2φ_dt − φ_{2dt}` over a coupled coarse path,
    /// removing the first-order weak error of the time stepping.
    #[serde(default = "default_extrapolate")]
    pub extrapolate: bool,
}

fn default_extrapolate() -> bool {
    true
}

fn default_trajectories() -> usize {
    10_000
}
fn default_fd_eps() -> f64 {
    1e-2
}
fn default_semigroup_steps() -> usize {
    1
}

impl ResolventConfig {
    pub fn new(dt: f64, trajectories: usize) -> Self {
        Self {
            trajectories,
            dt,
            t_max: None,
            fd_eps: default_fd_eps(),
            semigroup_steps: default_semigroup_steps(),
            seed: 0,
            time_budget_secs: None,
            extrapolate: default_extrapolate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KolmogorovSpec {
    /// `α`; defaults to `ᾱ + 1`.
    #[serde(default)]
    pub alpha: Option<f64>,
    pub observable: ObservableSpec,
    pub smoothing: SmoothingParams,
    pub resolvent: ResolventConfig,
}

/// `αφ + L₀^{λ,n}φ = g` with its Monte-Carlo machinery.
pub struct KolmogorovProblem {
    pub alpha: f64,
    pub bar_alpha: f64,
    pub g: Observable,
    pub g_sup: f64,
    pub coefficients: Arc<SmoothedCoefficients>,
    pub integrator: Integrator,
    pub config: ResolventConfig,
    // same dynamics on 2dt, for the extrapolation
    coarse: Option<Integrator>,
    t_max: f64,
}

impl std::fmt::Debug for KolmogorovProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KolmogorovProblem")
            .field("alpha", &self.alpha)
            .field("bar_alpha", &self.bar_alpha)
            .field("g", &self.g.spec)
            .field("t_max", &self.t_max)
            .finish()
    }
}

/// Resolvent value `φ(x)` with its error budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhiEstimate {
    pub value: f64,
    pub std_error: f64,
    /// `‖g‖_∞ e^{−α T_max}/α`.
    pub tail_bound: f64,
    pub trajectories: usize,
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub phi: PhiEstimate,
    pub g: f64,
    pub l0: f64,
    pub r_direct: f64,
    /// Combined MC + FD + tail error bar of `r_direct`.
    pub r_direct_error: f64,
    pub r_direct_mc_error: f64,
    pub fd_error: f64,
    pub r_semigroup: f64,
    pub r_semigroup_error: f64,
    pub h: f64,
    /// `|D²φ[Ŝ, Ŝ]|` estimated from the same trajectories.
    pub second_derivative: f64,
    pub pass_direct: bool,
    pub pass_semigroup: bool,
    pub consistent: bool,
    pub partial: bool,
}

impl ResidualReport {
    pub fn pass(&self) -> bool {
        self.pass_direct && self.pass_semigroup && self.consistent && !self.partial
    }
}

// Per-trajectory output of one bundle of coupled starts.
struct BundleSample {
    phi: Vec<f64>,
    // φ at the centre from the fine chain alone, with P_hφ and P_{2h}φ along it
    centre: f64,
    tail: [f64; 2],
}

struct CoarsePaths {
    states: Vec<TrajectoryState>,
    prev: Vec<f64>,
    phi: Vec<f64>,
    dw: Vec<f64>,
}

/// Exact `∫ e^{−αt}` weights for piecewise-linear data on `[t_n, t_n + dt]`:
/// returns `(a, b)` with `∫ = e^{−α t_n}(a m_n + b m_{n+1})`.
fn step_weights(al: f64, dt: f64) -> (f64, f64) {
    let x = al * dt;
    let i0 = -(-x).exp_m1() / al;
    // ∫₀^dt τ e^{−ατ} dτ = (1 − e^{−x}(1 + x))/α², stable for small x
    let i1 = if x < 1e-3 {
        dt * dt * (0.5 - x / 3.0 + x * x / 8.0)
    } else {
        (1.0 - (-x).exp() * (1.0 + x)) / (al * al)
    };
    let b = i1 / dt;
    (i0 - b, b)
}

impl KolmogorovProblem {
    pub fn new(
        model: SpatialModel,
        potential: PotentialSpec,
        noise: NoiseFamily,
        nu: f64,
        alpha: Option<f64>,
        g: ObservableSpec,
        smoothing: SmoothingParams,
        config: ResolventConfig,
    ) -> Result<Self> {
        let ba = bar_alpha(potential.k, noise.c_b);
        let alpha = alpha.unwrap_or(ba + 1.0);
        if !(alpha > ba) {
            return Err(Error::config(
                "kolmogorov.alpha",
                format!("alpha = {alpha} must exceed bar_alpha = {ba}"),
            ));
        }
        let g = Observable::new(g, &model)?;
        let g_sup = g.sup_norm().ok_or_else(|| {
            Error::config("kolmogorov.observable", "observable must be bounded on H")
        })?;
        if config.trajectories < 2 {
            return Err(Error::config("resolvent.trajectories", "must be at least 2"));
        }
        if !(config.fd_eps > 0.0) {
            return Err(Error::config("resolvent.fd_eps", "must be positive"));
        }
        if config.semigroup_steps == 0 {
            return Err(Error::config("resolvent.semigroup_steps", "must be at least 1"));
        }
        let t_max = config.t_max.unwrap_or((1e10f64).ln() / alpha);
        let coefficients = Arc::new(SmoothedCoefficients::new(&model, &potential, &noise, smoothing)?);
        let mut ic = IntegratorConfig::new(config.dt, t_max, nu);
        ic.scheme = Scheme::RegularizedExplicit;
        ic.track_norms = false;
        ic.record_every = 1;
        let coarse = if config.extrapolate {
            let mut cc = ic.clone();
            cc.dt = 2.0 * config.dt;
            Some(Integrator::new(model.clone(), potential, noise.clone(), cc)?.with_coefficients(coefficients.clone()))
        } else {
            None
        };
        let integrator = Integrator::new(model, potential, noise, ic)?.with_coefficients(coefficients.clone());
        if 2.0 * (config.semigroup_steps as f64) * config.dt >= t_max {
            return Err(Error::config("resolvent.semigroup_steps", "h must be below t_max"));
        }
        Ok(Self {
            alpha,
            bar_alpha: ba,
            g,
            g_sup,
            coefficients,
            integrator,
            config,
            coarse,
            t_max,
        })
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn tail_bound(&self) -> f64 {
        self.g_sup * (-self.alpha * self.t_max).exp() / self.alpha
    }

    fn run_bundle(&self, starts: &[Vec<f64>], rng: &mut Stream) -> Result<BundleSample> {
        let it = &self.integrator;
        let steps = it.config.steps();
        let dt = it.config.dt;
        let j = self.config.semigroup_steps;
        let (wa, wb) = step_weights(self.alpha, dt);
        let (ca, cb) = step_weights(self.alpha, 2.0 * dt);
        let mut states: Vec<TrajectoryState> = starts
            .iter()
            .map(|x| it.initial_state(x))
            .collect::<Result<_>>()?;
        let mut prev: Vec<f64> = states.iter().map(|s| self.g.eval(&s.u)).collect();
        let mut coarse = match &self.coarse {
            Some(c) => Some(CoarsePaths {
                states: states.clone(),
                prev: prev.clone(),
                phi: vec![0.0; starts.len()],
                dw: c.new_increments(),
            }),
            None => None,
        };
        let mut phi = vec![0.0; starts.len()];
        let mut tail = [0.0; 2];
        let mut dw = it.new_increments();
        for n in 0..steps {
            it.draw_increments(rng, &mut dw);
            let decay = (-self.alpha * dt * n as f64).exp();
            for (k, s) in states.iter_mut().enumerate() {
                it.step_regularized(s, &dw)?;
                let g1 = self.g.eval(&s.u);
                let inc = decay * (wa * prev[k] + wb * g1);
                phi[k] += inc;
                if k == 0 {
                    if n >= j {
                        tail[0] += inc;
                    }
                    if n >= 2 * j {
                        tail[1] += inc;
                    }
                }
                prev[k] = g1;
            }
            if let (Some(c), Some(ci)) = (coarse.as_mut(), self.coarse.as_ref()) {
                for (a, b) in c.dw.iter_mut().zip(&dw) {
                    *a += b;
                }
                if n % 2 == 1 {
                    let decay = (-self.alpha * dt * (n - 1) as f64).exp();
                    for k in 0..c.states.len() {
                        ci.step_regularized(&mut c.states[k], &c.dw)?;
                        let g1 = self.g.eval(&c.states[k].u);
                        c.phi[k] += decay * (ca * c.prev[k] + cb * g1);
                        c.prev[k] = g1;
                    }
                    c.dw.fill(0.0);
                }
            }
        }
        // tail beyond T_max with the terminal value frozen
        let rest = (-self.alpha * dt * steps as f64).exp() / self.alpha;
        for (p, g1) in phi.iter_mut().zip(&prev) {
            *p += rest * g1;
        }
        for (m, t) in tail.iter_mut().enumerate() {
            *t += rest * prev[0];
            *t *= (self.alpha * dt * ((m + 1) * j) as f64).exp();
        }
        let centre = phi[0];
        if let Some(c) = coarse {
            let rest = (-self.alpha * dt * (2 * (steps / 2)) as f64).exp() / self.alpha;
            for ((p, pc), g1) in phi.iter_mut().zip(&c.phi).zip(&c.prev) {
                *p = 2.0 * *p - (pc + rest * g1);
            }
        }
        Ok(BundleSample { phi, centre, tail })
    }

    fn run_bundles(&self, starts: &[Vec<f64>], seed: u64) -> Result<(Vec<BundleSample>, bool)> {
        let total = self.config.trajectories;
        let chunk = 256.min(total).max(1);
        let clock = Instant::now();
        let mut out = Vec::with_capacity(total);
        let mut partial = false;
        let mut done = 0;
        while done < total {
            let len = chunk.min(total - done);
            let base = done as u64;
            let mut part = ensemble(seed, len, |id, _| {
                let mut s = crate::rng::stream(seed, base + id);
                self.run_bundle(starts, &mut s)
            })?;
            out.append(&mut part);
            done += len;
            if let Some(b) = self.config.time_budget_secs {
                if clock.elapsed().as_secs_f64() > b && done < total {
                    partial = true;
                    break;
                }
            }
        }
        Ok((out, partial))
    }

    /// `φ_{λ,n}(x)` from the configured number of trajectories.
    pub fn resolvent_phi(&self, x: &[f64]) -> Result<PhiEstimate> {
        self.resolvent_phi_with_seed(x, self.config.seed)
    }

    pub fn resolvent_phi_with_seed(&self, x: &[f64], seed: u64) -> Result<PhiEstimate> {
        let (samples, partial) = self.run_bundles(&[x.to_vec()], seed)?;
        let v: Vec<f64> = samples.iter().map(|s| s.phi[0]).collect();
        let (m, se) = mean_se(&v);
        Ok(PhiEstimate {
            value: m,
            std_error: se,
            tail_bound: self.tail_bound(),
            trajectories: v.len(),
            partial,
        })
    }

    /// Both residuals of `αφ + L₀^{λ,n}φ = g` at `x`, from one bundle of
    /// coupled trajectories (centre, `±ε`, `±2ε` along `Ŝ(x)` and `d̂(x)`).
    pub fn residual_check(&self, x: &[f64]) -> Result<ResidualReport> {
        let model = &self.integrator.model;
        let inputs = L0Inputs::regularized(
            model,
            self.coefficients.as_ref(),
            self.integrator.config.nu,
            &self.integrator.noise,
            x,
        )?;
        let (s_hat, s_norm) = unit(model, &inputs.noise_shape);
        let (d_hat, d_norm) = unit(model, &inputs.drift_direction);
        let e = self.config.fd_eps;
        let starts = vec![
            x.to_vec(),
            shifted(x, &s_hat, e),
            shifted(x, &s_hat, -e),
            shifted(x, &s_hat, 2.0 * e),
            shifted(x, &s_hat, -2.0 * e),
            shifted(x, &d_hat, e),
            shifted(x, &d_hat, -e),
            shifted(x, &d_hat, 2.0 * e),
            shifted(x, &d_hat, -2.0 * e),
        ];
        let (samples, partial) = self.run_bundles(&starts, self.config.seed)?;
        let gx = self.g.eval(x);
        let a = self.alpha;
        let h = self.config.semigroup_steps as f64 * self.integrator.config.dt;
        let trace = 0.5 * inputs.amplitude_sum_sq * s_norm * s_norm;
        let l0_at = |p: &[f64], h: f64, o: usize| {
            let d2 = (p[1 + o] - 2.0 * p[0] + p[2 + o]) / (h * h);
            let d1 = (p[5 + o] - p[6 + o]) / (2.0 * h);
            (-trace * d2 + d_norm * d1, d2)
        };
        let mut direct = Running::new();
        let mut direct_coarse = Running::new();
        let mut diff = Running::new();
        let mut semi = Running::new();
        let mut phi0 = Running::new();
        let mut d2s = Running::new();
        for s in &samples {
            let p = &s.phi;
            let (l_fine, d2) = l0_at(p, e, 0);
            let (l_coarse, _) = l0_at(p, 2.0 * e, 2);
            let rd = a * p[0] + l_fine - gx;
            let rc = a * p[0] + l_coarse - gx;
            direct.push(rd);
            direct_coarse.push(rc);
            diff.push(rd - rc);
            // Richardson over h and 2h removes the O(h) bias of the difference quotient
            let c = s.centre;
            let r1 = (s.tail[0] - c) / h - (a * c - gx);
            let r2 = (s.tail[1] - c) / (2.0 * h) - (a * c - gx);
            semi.push(2.0 * r1 - r2);
            phi0.push(p[0]);
            d2s.push(d2);
        }
        let tail = self.tail_bound();
        let fd_error = (diff.mean().abs() / 3.0).max(diff.std_error() / 3.0);
        let r_direct_mc = direct.std_error();
        // α·tail on αφ, plus the derivative terms acting on the tail (bounded
        // by the same quantity times the FD amplification)
        let tail_direct = a * tail + tail * (2.0 * d_norm / e + 4.0 * trace / (e * e));
        let r_direct_error = (r_direct_mc.powi(2) + fd_error.powi(2)).sqrt() + tail_direct;
        let r_semigroup_error = semi.std_error() + 3.0 * tail * ((2.0 * a * h).exp() / h + 1.0 / h + a);
        let r_direct = direct.mean();
        let r_semigroup = semi.mean();
        let consistent = (r_direct - r_semigroup).abs()
            <= 3.0 * (r_direct_error.powi(2) + r_semigroup_error.powi(2)).sqrt();
        let phi = PhiEstimate {
            value: phi0.mean(),
            std_error: phi0.std_error(),
            tail_bound: tail,
            trajectories: samples.len(),
            partial,
        };
        Ok(ResidualReport {
            phi,
            g: gx,
            l0: r_direct - a * phi.value + gx,
            r_direct,
            r_direct_error,
            r_direct_mc_error: r_direct_mc,
            fd_error,
            r_semigroup,
            r_semigroup_error,
            h,
            second_derivative: d2s.mean().abs(),
            pass_direct: r_direct.abs() <= 3.0 * r_direct_error,
            pass_semigroup: r_semigroup.abs() <= 3.0 * r_semigroup_error,
            consistent,
            partial,
        })
    }
}

// ---------------------------------------------------------------- scaling

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub n: u64,
    pub lambda: f64,
    pub envelope: f64,
    /// Largest gaps over the sample fields.
    pub drift_gap: f64,
    pub diffusion_gap: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// Log-log slope of `combined` against `n`.
    pub combined_exponent: f64,
    pub combined_exponent_se: f64,
    pub envelope_exponent: f64,
    pub drift_gap_exponent: f64,
    pub drift_monotone: bool,
    pub diffusion_monotone: bool,
}

/// Gaps of `F_{λ_n,n}` and `B_{λ_n,n}` to the exact coefficients along
/// `λ_n = n^{−1/4}`, together with the discrepancy envelope.
pub fn scaling_sweep(
    model: &SpatialModel,
    potential: &PotentialSpec,
    noise: &NoiseFamily,
    ns: &[u64],
    samples: &[Vec<f64>],
    template: &SmoothingParams,
) -> Result<ScalingReport> {
    if ns.len() < 2 {
        return Err(Error::Argument("scaling sweep needs at least two values of n".into()));
    }
    for x in samples {
        if !in_a_str(model, potential, x) {
            return Err(Error::Domain("sample field is not in the strong admissible set".into()));
        }
    }
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let mut p = template.clone();
        p.n = Some(n);
        p.lambda = (n as f64).powf(-0.25);
        let c = SmoothedCoefficients::new(model, potential, noise, p.clone())?;
        let mut dg: f64 = 0.0;
        let mut bg: f64 = 0.0;
        for x in samples {
            dg = dg.max(c.drift_gap(potential, x)?);
            bg = bg.max(c.diffusion_gap(x)?);
        }
        let env = discrepancy_envelope(n as f64, p.gamma, p.delta);
        rows.push(ScalingRow {
            n,
            lambda: p.lambda,
            envelope: env,
            drift_gap: dg,
            diffusion_gap: bg,
            combined: env + dg + bg,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let fit = |ys: Vec<f64>| crate::stats::loglog_slope(&xs, &ys);
    let comb = fit(rows.iter().map(|r| r.combined).collect())?;
    let env = fit(rows.iter().map(|r| r.envelope).collect())?;
    let drift = fit(rows.iter().map(|r| r.drift_gap.max(1e-300)).collect())?;
    let monotone = |v: Vec<f64>| v.windows(2).all(|w| w[1] <= w[0]);
    Ok(ScalingReport {
        combined_exponent: comb.slope,
        combined_exponent_se: comb.slope_se,
        envelope_exponent: env.slope,
        drift_gap_exponent: drift.slope,
        drift_monotone: monotone(rows.iter().map(|r| r.drift_gap).collect()),
        diffusion_monotone: monotone(rows.iter().map(|r| r.diffusion_gap).collect()),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseConfig;
    use crate::spatial::{BoundaryCondition, SpatialConfig};

    fn setup(n: usize) -> (SpatialModel, PotentialSpec, NoiseFamily) {
        let model = SpatialModel::build(SpatialConfig::one_d(n, BoundaryCondition::Dirichlet)).unwrap();
        let pot = PotentialSpec::new(1.0, 2.0).unwrap();
        let noise = NoiseFamily::new(NoiseConfig::default(), &pot).unwrap();
        (model, pot, noise)
    }

    #[test]
    fn bar_alpha_and_alpha0_formulas() {
        assert_eq!(bar_alpha(0.0, 0.0), 0.5);
        let b = bar_alpha(1.0, 1.080_352);
        assert!((b - 19.325_808).abs() < 1e-6);
        assert!(bar_alpha(1.0, 2.0) >= bar_alpha(1.0, 1.0));
        let k0 = (1.0 + std::f64::consts::PI.powi(2)).powf(-0.5);
        let a = alpha0(1.0, k0, 1.080_352, 1.0);
        assert!((a - (std::f64::consts::PI.powi(2) - 1.540_176)).abs() < 1e-9);
        assert!(alpha0(1.0, 1.0, 1.0, 1.0) < 0.0);
    }

    #[test]
    fn default_rates_satisfy_constraints() {
        let p = SmoothingParams::schedule(16);
        assert!(p.satisfies_scaling_constraints());
        assert!((p.lambda - 0.5).abs() < 1e-15);
    }

    #[test]
    fn infinite_n_is_pointwise() {
        let (m, p, nz) = setup(16);
        let c = SmoothedCoefficients::new(&m, &p, &nz, SmoothingParams::new(0.3, None)).unwrap();
        let x: Vec<f64> = m.nodes().iter().map(|q| 0.6 * (std::f64::consts::PI * q[0]).sin()).collect();
        let f = c.smooth_drift(&x).unwrap();
        for (fi, &xi) in f.iter().zip(&x) {
            let direct = c.regularized_potential().drift(xi).unwrap();
            assert!((fi - direct).abs() < 1e-9, "{fi} vs {direct}");
        }
    }

    #[test]
    fn hermite_smoothing_agrees_with_monte_carlo() {
        let (m, p, nz) = setup(16);
        let c = SmoothedCoefficients::new(&m, &p, &nz, SmoothingParams::schedule(4)).unwrap();
        let x: Vec<f64> = m.nodes().iter().map(|q| 0.5 * (std::f64::consts::PI * q[0]).sin()).collect();
        let gh = c.smooth_drift(&x).unwrap();
        let mut r = crate::rng::stream(4, 0);
        let mc = c.smooth_drift_mc(&x, 4000, &mut r).unwrap();
        for i in 0..x.len() {
            assert!((gh[i] - mc.mean[i]).abs() < 4.0 * mc.std_error[i] + 1e-6, "{i}: {} vs {} ± {}", gh[i], mc.mean[i], mc.std_error[i]);
        }
        let ghs = c.smooth_diffusion_shape(&x).unwrap();
        let mcs = c.smooth_diffusion_shape_mc(&x, 4000, &mut r).unwrap();
        for i in 0..x.len() {
            assert!((ghs[i] - mcs.mean[i]).abs() < 4.0 * mcs.std_error[i] + 1e-6);
        }
    }

    #[test]
    fn observables_are_bounded() {
        let (m, _, _) = setup(16);
        let mut r = crate::rng::stream(8, 0);
        for spec in [
            ObservableSpec::Cosine { mode: 1, amplitude: 2.0 },
            ObservableSpec::GaussRadial { mode: 2, amplitude: 0.5 },
            ObservableSpec::Coordinate { mode: 1, amplitude: 3.0 },
        ] {
            let g = Observable::new(spec, &m).unwrap();
            for _ in 0..50 {
                let x: Vec<f64> = (0..16).map(|_| 3.0 * crate::rng::normal(&mut r)).collect();
                assert!(g.eval(&x).abs() <= g.sup_norm().unwrap());
            }
        }
        assert!(Observable::new(ObservableSpec::Cosine { mode: 0, amplitude: 1.0 }, &m).is_err());
    }
}
