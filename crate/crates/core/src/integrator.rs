//! Time stepping for `du − νΔu dt + F'(u) dt = B(u) dW`.
//!
//! Two schemes share the spectral heat solve:
//! * `ResolventSplitting` treats the singular part `β` of `F'` implicitly by
//!   the pointwise resolvent with `λ = dt`, so every state stays in `(−1, 1)`.
//! * `RegularizedExplicit` is semi-implicit Euler-Maruyama with a Lipschitz
//!   drift and diffusion supplied through [`Coefficients`].
//!
//! Each trajectory draws only its Brownian increments from its own stream,
//! so two runs on the same stream see identical `dW`.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::noise::NoiseFamily;
use crate::potential::PotentialSpec;
use crate::rng::{self, Stream};
use crate::spatial::SpatialModel;
use crate::{Error, Result};

const MODULE: &str = "spde_integrator";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ResolventSplitting,
    RegularizedExplicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt: f64,
    /// Final time `T`.
    pub horizon: f64,
    pub nu: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// Record observables every this many steps.
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// `false` removes `F'` entirely (pure stochastic heat equation).
    #[serde(default = "default_true")]
    pub drift: bool,
    /// Compute H/V/Z norm statistics along the path (one extra transform per step).
    #[serde(default = "default_true")]
    pub track_norms: bool,
}

fn default_scheme() -> Scheme {
    Scheme::ResolventSplitting
}
fn default_record_every() -> usize {
    10
}
fn default_true() -> bool {
    true
}

impl IntegratorConfig {
    pub fn new(dt: f64, horizon: f64, nu: f64) -> Self {
        Self {
            dt,
            horizon,
            nu,
            scheme: Scheme::ResolventSplitting,
            record_every: default_record_every(),
            drift: true,
            track_norms: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("integrator.dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.horizon.is_finite() && self.horizon >= self.dt) {
            return Err(Error::config(
                "integrator.horizon",
                format!("must be at least dt = {}, got {}", self.dt, self.horizon),
            ));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::config("integrator.nu", format!("must be positive, got {}", self.nu)));
        }
        if self.record_every == 0 {
            return Err(Error::config("integrator.record_every", "must be at least 1"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// Lipschitz drift and diffusion for the regularised scheme.
///
/// The noise family has a common shape for all modes, so the diffusion is
/// described by one field `S(u)` with `B(u) dW = (Σ_k c_k dW_k) S(u)`.
pub trait Coefficients: Send + Sync {
    /// Full drift `F(u)` entering `du = (νΔu − F(u)) dt + …`.
    fn drift(&self, u: &[f64], out: &mut [f64]) -> Result<()>;
    /// `DF(u)[v]`.
    fn drift_derivative(&self, u: &[f64], v: &[f64], out: &mut [f64]) -> Result<()>;
    /// `S(u)`.
    fn noise_shape(&self, u: &[f64], out: &mut [f64]) -> Result<()>;
    /// `DS(u)[v]`.
    fn noise_shape_derivative(&self, u: &[f64], v: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Observable evaluated along a path.
pub trait PathFunctional: Sync {
    fn eval(&self, u: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64 + Sync> PathFunctional for F {
    fn eval(&self, u: &[f64]) -> f64 {
        self(u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryState {
    pub t: f64,
    pub steps: u64,
    pub u: Vec<f64>,
    // artanh(u_i) for warm starts; NaN when unknown
    artanh: Vec<f64>,
}

impl TrajectoryState {
    pub fn new(u: Vec<f64>) -> Self {
        let artanh = u
            .iter()
            .map(|&x| if x.abs() < 1.0 { x.atanh() } else { f64::NAN })
            .collect();
        Self {
            t: 0.0,
            steps: 0,
            u,
            artanh,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `artanh(u_i)` as produced by the resolvent step (exact even where
    /// `u_i` rounds to `±1`).
    pub fn artanh(&self) -> &[f64] {
        &self.artanh
    }
}

/// Running norm statistics, recorded alongside observables.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NormSeries {
    pub h_sq: Vec<f64>,
    pub v_sq: Vec<f64>,
    pub z_sq: Vec<f64>,
    /// `sup_{s ≤ t} ‖u(s)‖²_H`.
    pub sup_h_sq: Vec<f64>,
    /// `sup_{s ≤ t} ‖u(s)‖²_V`.
    pub sup_v_sq: Vec<f64>,
    /// `∫_0^t ‖u‖²_V ds`.
    pub int_v_sq: Vec<f64>,
    /// `∫_0^t ‖u‖²_Z ds`.
    pub int_z_sq: Vec<f64>,
    /// `∫_0^t ‖F'(u)‖²_H ds` (splitting scheme only, else empty).
    pub int_fprime_sq: Vec<f64>,
    /// `Σ (u_n, B(u_n) dW_n)_H`.
    pub martingale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSummary {
    pub times: Vec<f64>,
    /// `observables[i][r]` is observable `i` at record `r`.
    pub observables: Vec<Vec<f64>>,
    pub norms: NormSeries,
    pub terminal: Vec<f64>,
    /// `max_{n,i} |u_n(x_i)|` over all steps (including the initial datum).
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPath {
    pub times: Vec<f64>,
    /// `‖u^x(t) − u^y(t)‖²_H`.
    pub diff_sq: Vec<f64>,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirstVariationPath {
    pub times: Vec<f64>,
    /// `‖v(t)‖²_H`.
    pub v_sq: Vec<f64>,
    pub terminal_u: Vec<f64>,
    pub terminal_v: Vec<f64>,
}

pub struct Integrator {
    pub model: SpatialModel,
    pub potential: PotentialSpec,
    pub noise: NoiseFamily,
    pub config: IntegratorConfig,
    heat: Vec<f64>,
    coefficients: Option<Arc<dyn Coefficients>>,
}

impl std::fmt::Debug for Integrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Integrator")
            .field("config", &self.config)
            .field("nodes", &self.model.len())
            .field("regularized", &self.coefficients.is_some())
            .finish()
    }
}

impl Integrator {
    pub fn new(
        model: SpatialModel,
        potential: PotentialSpec,
        noise: NoiseFamily,
        config: IntegratorConfig,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.nu * config.dt;
        let heat = model.eigenvalues().iter().map(|mu| 1.0 / (1.0 + k * mu)).collect();
        Ok(Self {
            model,
            potential,
            noise,
            config,
            heat,
            coefficients: None,
        })
    }

    /// Attach regularised coefficients (required for `RegularizedExplicit`
    /// and the first variation).
    pub fn with_coefficients(mut self, c: Arc<dyn Coefficients>) -> Self {
        self.coefficients = Some(c);
        self
    }

    pub fn coefficients(&self) -> Option<&Arc<dyn Coefficients>> {
        self.coefficients.as_ref()
    }

    fn regularized(&self) -> Result<&dyn Coefficients> {
        self.coefficients
            .as_deref()
            .ok_or_else(|| Error::Argument("regularized scheme needs coefficients".into()))
    }

    /// `num_modes` independent `N(0, dt)` increments.
    pub fn draw_increments<R: Rng + ?Sized>(&self, rng: &mut R, dw: &mut [f64]) {
        rng::fill_normal(rng, self.config.dt, dw);
    }

    pub fn new_increments(&self) -> Vec<f64> {
        vec![0.0; self.noise.num_modes()]
    }

    /// Checks `x0` against the grid and, for the splitting scheme, `|x0| ≤ 1`.
    pub fn initial_state(&self, x0: &[f64]) -> Result<TrajectoryState> {
        if x0.len() != self.model.len() {
            return Err(Error::Argument(format!(
                "initial field has {} values, grid has {}",
                x0.len(),
                self.model.len()
            )));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("initial field is not finite".into()));
        }
        if self.config.scheme == Scheme::ResolventSplitting
            && self.config.drift
            && x0.iter().any(|v| v.abs() > 1.0)
        {
            return Err(Error::Argument("initial field leaves [-1, 1]".into()));
        }
        Ok(TrajectoryState::new(x0.to_vec()))
    }

    fn heat_solve(&self, w: &[f64], out: &mut [f64]) {
        let mut a = vec![0.0; w.len()];
        self.model.forward_into(w, &mut a);
        for (aj, m) in a.iter_mut().zip(&self.heat) {
            *aj *= m;
        }
        self.model.inverse_into(&a, out);
    }

    /// One step of the configured scheme.
    pub fn advance(&self, state: &mut TrajectoryState, dw: &[f64]) -> Result<()> {
        match self.config.scheme {
            Scheme::ResolventSplitting => self.step(state, dw),
            Scheme::RegularizedExplicit => self.step_regularized(state, dw),
        }
    }

    /// Splitting step: explicit `K u` and noise, implicit heat, pointwise
    /// resolvent of `β` with `λ = dt`.
    pub fn step(&self, state: &mut TrajectoryState, dw: &[f64]) -> Result<()> {
        let dt = self.config.dt;
        let a = self.noise.combined_increment(dw)?;
        let grow = if self.config.drift { 1.0 + self.potential.k * dt } else { 1.0 };
        let w: Vec<f64> = state
            .u
            .iter()
            .map(|&u| grow * u + a * self.noise.shape(u))
            .collect();
        let mut v = vec![0.0; w.len()];
        self.heat_solve(&w, &mut v);
        if self.config.drift {
            for ((u, s), &x) in state.u.iter_mut().zip(state.artanh.iter_mut()).zip(&v) {
                let guess = if s.is_finite() { Some(*s) } else { None };
                let p = self.potential.resolvent_from(dt, x, guess)?;
                if !(p.value.abs() < 1.0) {
                    return Err(Error::numeric(
                        MODULE,
                        format!("resolvent value {} at t={} is not inside (-1, 1)", p.value, state.t),
                    ));
                }
                *u = p.value;
                *s = p.artanh;
            }
        } else {
            state.u = v;
            for (s, &u) in state.artanh.iter_mut().zip(&state.u) {
                *s = if u.abs() < 1.0 { u.atanh() } else { f64::NAN };
            }
        }
        state.steps += 1;
        state.t = state.steps as f64 * dt;
        Ok(())
    }

    /// Semi-implicit Euler-Maruyama with the attached Lipschitz coefficients.
    pub fn step_regularized(&self, state: &mut TrajectoryState, dw: &[f64]) -> Result<()> {
        let c = self.regularized()?;
        let dt = self.config.dt;
        let n = state.u.len();
        let a = self.noise.combined_increment(dw)?;
        let mut f = vec![0.0; n];
        if self.config.drift {
            c.drift(&state.u, &mut f)?;
        }
        let mut s = vec![0.0; n];
        c.noise_shape(&state.u, &mut s)?;
        let w: Vec<f64> = (0..n).map(|i| state.u[i] - dt * f[i] + a * s[i]).collect();
        self.heat_solve(&w, &mut state.u);
        if state.u.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(MODULE, format!("regularized state overflow at t={}", state.t)));
        }
        state.artanh.iter_mut().for_each(|s| *s = f64::NAN);
        state.steps += 1;
        state.t = state.steps as f64 * dt;
        Ok(())
    }

    /// Linearised step for `v` along the carrier `u` (before `u` moves).
    fn step_variation(&self, u: &[f64], v: &mut [f64], dw: &[f64]) -> Result<()> {
        let c = self.regularized()?;
        let dt = self.config.dt;
        let n = u.len();
        let a = self.noise.combined_increment(dw)?;
        let mut df = vec![0.0; n];
        if self.config.drift {
            c.drift_derivative(u, v, &mut df)?;
        }
        let mut ds = vec![0.0; n];
        c.noise_shape_derivative(u, v, &mut ds)?;
        let w: Vec<f64> = (0..n).map(|i| v[i] - dt * df[i] + a * ds[i]).collect();
        self.heat_solve(&w, v);
        Ok(())
    }

    /// Run one trajectory from `x0` on `rng`, recording `observables` and
    /// norm statistics.
    pub fn simulate(
        &self,
        x0: &[f64],
        observables: &[&dyn PathFunctional],
        rng: &mut Stream,
    ) -> Result<PathSummary> {
        let mut state = self.initial_state(x0)?;
        let steps = self.config.steps();
        let every = self.config.record_every;
        let dt = self.config.dt;
        let track = self.config.track_norms;
        let exact_f = self.config.scheme == Scheme::ResolventSplitting && self.config.drift;
        let mut dw = self.new_increments();
        let mut times = Vec::new();
        let mut obs: Vec<Vec<f64>> = vec![Vec::new(); observables.len()];
        let mut ns = NormSeries::default();
        let mut max_abs = state.max_abs();

        let mut acc = NormAccumulator::default();
        let mut current = if track { Some(self.norm_sample(&state, exact_f)?) } else { None };
        if let Some(q) = current {
            acc.start(q);
        }
        let mut record = |state: &TrajectoryState, acc: &NormAccumulator, q: Option<NormSample>| {
            times.push(state.t);
            for (o, f) in obs.iter_mut().zip(observables) {
                o.push(f.eval(&state.u));
            }
            if let Some(q) = q {
                ns.h_sq.push(q.h_sq);
                ns.v_sq.push(q.v_sq);
                ns.z_sq.push(q.z_sq);
                ns.sup_h_sq.push(acc.sup_h_sq);
                ns.sup_v_sq.push(acc.sup_v_sq);
                ns.int_v_sq.push(acc.int_v_sq);
                ns.int_z_sq.push(acc.int_z_sq);
                if exact_f {
                    ns.int_fprime_sq.push(acc.int_fprime_sq);
                }
                ns.martingale.push(acc.martingale);
            }
        };
        record(&state, &acc, current);
        for n in 1..=steps {
            self.draw_increments(rng, &mut dw);
            if track {
                let a = self.noise.combined_increment(&dw)?;
                let shape = self.martingale_shape(&state)?;
                acc.martingale += a * self.model.inner(&state.u, &shape);
            }
            self.advance(&mut state, &dw)?;
            max_abs = max_abs.max(state.max_abs());
            if track {
                let q = self.norm_sample(&state, exact_f)?;
                acc.advance(current.expect("tracked"), q, dt);
                current = Some(q);
            }
            if n % every == 0 || n == steps {
                record(&state, &acc, current);
            }
        }
        Ok(PathSummary {
            times,
            observables: obs,
            norms: ns,
            terminal: state.u,
            max_abs,
        })
    }

    fn martingale_shape(&self, state: &TrajectoryState) -> Result<Vec<f64>> {
        match self.config.scheme {
            Scheme::ResolventSplitting => Ok(state.u.iter().map(|&u| self.noise.shape(u)).collect()),
            Scheme::RegularizedExplicit => {
                let mut s = vec![0.0; state.u.len()];
                self.regularized()?.noise_shape(&state.u, &mut s)?;
                Ok(s)
            }
        }
    }

    fn norm_sample(&self, state: &TrajectoryState, exact_f: bool) -> Result<NormSample> {
        let n = self.model.norms(&state.u)?;
        let fp = if exact_f {
            let (th, th0) = (self.potential.theta, self.potential.theta0);
            let sum: f64 = state
                .artanh
                .iter()
                .zip(&state.u)
                .map(|(&s, &u)| {
                    let f = if s.is_finite() { th * s - th0 * u } else { f64::INFINITY };
                    f * f
                })
                .sum();
            sum * self.model.cell_volume()
        } else {
            0.0
        };
        Ok(NormSample {
            h_sq: n.h * n.h,
            v_sq: n.v * n.v,
            z_sq: n.z * n.z,
            fprime_sq: fp,
        })
    }

    /// Two trajectories driven by identical increments.
    pub fn simulate_coupled(&self, x0: &[f64], y0: &[f64], rng: &mut Stream) -> Result<CoupledPath> {
        let mut a = self.initial_state(x0)?;
        let mut b = self.initial_state(y0)?;
        let steps = self.config.steps();
        let every = self.config.record_every;
        let mut dw = self.new_increments();
        let diff = |a: &TrajectoryState, b: &TrajectoryState| {
            let d: Vec<f64> = a.u.iter().zip(&b.u).map(|(x, y)| x - y).collect();
            self.model.h_norm_sq(&d)
        };
        let mut times = vec![0.0];
        let mut diff_sq = vec![diff(&a, &b)];
        let mut max_abs = a.max_abs().max(b.max_abs());
        for n in 1..=steps {
            self.draw_increments(rng, &mut dw);
            self.advance(&mut a, &dw)?;
            self.advance(&mut b, &dw)?;
            max_abs = max_abs.max(a.max_abs()).max(b.max_abs());
            if n % every == 0 || n == steps {
                times.push(a.t);
                diff_sq.push(diff(&a, &b));
            }
        }
        Ok(CoupledPath {
            times,
            diff_sq,
            max_abs,
        })
    }

    /// Carrier `u(t; x0)` under the regularised scheme with the first
    /// variation `v^z` in direction `z`, common noise.
    pub fn first_variation(&self, x0: &[f64], z: &[f64], rng: &mut Stream) -> Result<FirstVariationPath> {
        if self.config.scheme != Scheme::RegularizedExplicit {
            return Err(Error::Argument("first variation needs the regularized scheme".into()));
        }
        let mut state = self.initial_state(x0)?;
        if z.len() != state.u.len() {
            return Err(Error::Argument("direction has the wrong length".into()));
        }
        let mut v = z.to_vec();
        let steps = self.config.steps();
        let every = self.config.record_every;
        let mut dw = self.new_increments();
        let mut times = vec![0.0];
        let mut v_sq = vec![self.model.h_norm_sq(&v)];
        for n in 1..=steps {
            self.draw_increments(rng, &mut dw);
            self.step_variation(&state.u, &mut v, &dw)?;
            self.step_regularized(&mut state, &dw)?;
            if n % every == 0 || n == steps {
                times.push(state.t);
                v_sq.push(self.model.h_norm_sq(&v));
            }
        }
        Ok(FirstVariationPath {
            times,
            v_sq,
            terminal_u: state.u,
            terminal_v: v,
        })
    }

    /// Terminal state only, with no bookkeeping.
    pub fn terminal(&self, x0: &[f64], rng: &mut Stream) -> Result<Vec<f64>> {
        let mut state = self.initial_state(x0)?;
        let mut dw = self.new_increments();
        for _ in 0..self.config.steps() {
            self.draw_increments(rng, &mut dw);
            self.advance(&mut state, &dw)?;
        }
        Ok(state.u)
    }

    /// Discrete energy `∫ (ν/2 |∇u|² + F(u))`.
    pub fn energy(&self, u: &[f64]) -> Result<f64> {
        let n = self.model.norms(u)?;
        let mut pot = 0.0;
        for &x in u {
            pot += self.potential.f(x)?;
        }
        Ok(0.5 * self.config.nu * n.grad_sq + pot * self.model.cell_volume())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct NormSample {
    h_sq: f64,
    v_sq: f64,
    z_sq: f64,
    fprime_sq: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct NormAccumulator {
    sup_h_sq: f64,
    sup_v_sq: f64,
    int_v_sq: f64,
    int_z_sq: f64,
    int_fprime_sq: f64,
    martingale: f64,
}

impl NormAccumulator {
    fn start(&mut self, q: NormSample) {
        self.sup_h_sq = q.h_sq;
        self.sup_v_sq = q.v_sq;
    }

    // trapezoid in time
    fn advance(&mut self, prev: NormSample, q: NormSample, dt: f64) {
        self.sup_h_sq = self.sup_h_sq.max(q.h_sq);
        self.sup_v_sq = self.sup_v_sq.max(q.v_sq);
        self.int_v_sq += 0.5 * dt * (prev.v_sq + q.v_sq);
        self.int_z_sq += 0.5 * dt * (prev.z_sq + q.z_sq);
        self.int_fprime_sq += 0.5 * dt * (prev.fprime_sq + q.fprime_sq);
    }
}

/// Runs `f(id, stream)` for `id = 0..count` in parallel and returns the
/// results in id order. Each unit gets `rng::stream(seed, id)`, so the
/// output does not depend on the number of workers.
pub fn ensemble<T, F>(seed: u64, count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &mut Stream) -> Result<T> + Sync,
{
    (0..count as u64)
        .into_par_iter()
        .map(|id| {
            let mut s = rng::stream(seed, id);
            f(id, &mut s)
        })
        .collect()
}

/// Pointwise mean of equally long series.
pub fn mean_series(series: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = series.first() else {
        return Vec::new();
    };
    let mut m = vec![0.0; first.len()];
    for s in series {
        for (a, b) in m.iter_mut().zip(s) {
            *a += b;
        }
    }
    let n = series.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}
