//! Long-run diagnostics: Krylov-Bogoliubov time averages, moments on the
//! support of the invariant measure, synchronous-coupling contraction rates
//! and moment envelopes for finite-horizon ensembles.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::integrator::{ensemble, Integrator, PathFunctional, TrajectoryState};
use crate::kolmogorov::{alpha0, Observable};
use crate::rng::{stream, substream, Stream};
use crate::stats::{batch_means, linear_fit, loglog_slope, mean_se};
use crate::{Error, Result};

const MODULE: &str = "ergodicity";

/// Names of the moment series recorded by every Krylov-Bogoliubov run.
pub const MOMENT_NAMES: [&str; 4] = ["h_sq", "v_sq", "z_sq", "fprime_sq"];

/// `α₀` for the integrator's model, noise and potential.
pub fn integrator_alpha0(it: &Integrator) -> f64 {
    alpha0(it.config.nu, it.model.k0(), it.noise.c_b, it.potential.k)
}

fn gate(it: &Integrator) -> Result<f64> {
    let a = integrator_alpha0(it);
    if a > 0.0 {
        Ok(a)
    } else {
        Err(Error::Gated(format!(
            "alpha0 = nu(1/K0^2 - 1) - C_B/2 - K = {a:.6} <= 0; contraction needs alpha0 > 0 \
             (Dirichlet boundary and nu large enough)"
        )))
    }
}

// Advance `state` by `steps` steps, calling `each(n, state)` after every step.
fn run_steps<F: FnMut(usize, &TrajectoryState) -> Result<()>>(
    it: &Integrator,
    state: &mut TrajectoryState,
    steps: usize,
    rng: &mut Stream,
    mut each: F,
) -> Result<()> {
    let mut dw = it.new_increments();
    for n in 1..=steps {
        it.draw_increments(rng, &mut dw);
        it.advance(state, &dw)?;
        each(n, state)?;
    }
    Ok(())
}

fn steps_for(it: &Integrator, t: f64) -> usize {
    (t / it.config.dt - 1e-9).ceil().max(0.0) as usize
}

// ---------------------------------------------------------------- Krylov-Bogoliubov

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrylovConfig {
    pub horizon: f64,
    /// Defaults to `horizon / 10`.
    #[serde(default)]
    pub burn_in: Option<f64>,
    #[serde(default = "default_batches")]
    pub batches: usize,
    /// Sample observables every this many steps.
    #[serde(default = "default_sample_every")]
    pub sample_every: usize,
    /// Keep every k-th sampled state as a snapshot.
    #[serde(default)]
    pub snapshot_every: Option<usize>,
}

fn default_batches() -> usize {
    32
}
fn default_sample_every() -> usize {
    10
}

impl KrylovConfig {
    pub fn new(horizon: f64) -> Self {
        Self {
            horizon,
            burn_in: None,
            batches: default_batches(),
            sample_every: default_sample_every(),
            snapshot_every: None,
        }
    }

    pub fn burn_in(&self) -> f64 {
        self.burn_in.unwrap_or(self.horizon / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("krylov.horizon", "must be positive"));
        }
        let b = self.burn_in();
        if !(b >= 0.0) {
            return Err(Error::config("krylov.burn_in", "must be non-negative"));
        }
        if self.horizon <= b {
            return Err(Error::config(
                "krylov.horizon",
                format!("horizon {} does not exceed the burn-in {b}", self.horizon),
            ));
        }
        if self.batches < 2 {
            return Err(Error::config("krylov.batches", "must be at least 2"));
        }
        if self.sample_every == 0 {
            return Err(Error::config("krylov.sample_every", "must be at least 1"));
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::config("krylov.snapshot_every", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeAverage {
    pub name: String,
    pub mean: f64,
    /// Batch-means standard error.
    pub std_error: f64,
    /// Average over `[2b, T]` for the stationarity check.
    pub late_mean: f64,
    pub late_std_error: f64,
    pub samples: usize,
}

impl TimeAverage {
    /// `[b, T]` and `[2b, T]` averages agree within three combined standard errors.
    pub fn shift_invariant(&self) -> bool {
        let s = (self.std_error.powi(2) + self.late_std_error.powi(2)).sqrt();
        (self.mean - self.late_mean).abs() <= 3.0 * s + 1e-12 * self.mean.abs().max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    pub burn_in: f64,
    pub horizon: f64,
    pub sample_dt: f64,
    pub batches: usize,
    /// Moment averages (`MOMENT_NAMES`) followed by the user observables.
    pub averages: Vec<TimeAverage>,
    /// Post-burn-in samples, same order as `averages`.
    pub series: Vec<Vec<f64>>,
    pub snapshot_times: Vec<f64>,
    pub snapshots: Vec<Vec<f64>>,
    /// `max |u|` over every step of the run.
    pub max_abs: f64,
}

impl EmpiricalMeasure {
    pub fn average(&self, name: &str) -> Option<&TimeAverage> {
        self.averages.iter().find(|a| a.name == name)
    }

    pub fn series(&self, name: &str) -> Option<&[f64]> {
        self.averages
            .iter()
            .position(|a| a.name == name)
            .map(|i| self.series[i].as_slice())
    }
}

fn average_of(name: &str, s: &[f64], late_from: usize, batches: usize) -> Result<TimeAverage> {
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let se = batch_means(s, batches)?.std_error;
    let late = &s[late_from..];
    let late_mean = late.iter().sum::<f64>() / late.len() as f64;
    let late_se = batch_means(late, batches.min(late.len() / 2).max(2))?.std_error;
    Ok(TimeAverage {
        name: name.to_string(),
        mean,
        std_error: se,
        late_mean,
        late_std_error: late_se,
        samples: s.len(),
    })
}

/// Time averages `(1/(T − b)) ∫_b^T φ(u(t)) dt` along one trajectory.
pub fn krylov_bogoliubov(
    it: &Integrator,
    x0: &[f64],
    cfg: &KrylovConfig,
    observables: &[(&str, &dyn PathFunctional)],
    rng: &mut Stream,
) -> Result<EmpiricalMeasure> {
    cfg.validate()?;
    let dt = it.config.dt;
    let burn = cfg.burn_in();
    let steps = steps_for(it, cfg.horizon);
    let mut state = it.initial_state(x0)?;
    let mut max_abs = state.max_abs();
    let k = MOMENT_NAMES.len();
    let mut series: Vec<Vec<f64>> = vec![Vec::new(); k + observables.len()];
    let mut snapshots = Vec::new();
    let mut snapshot_times = Vec::new();
    let cell = it.model.cell_volume();
    run_steps(it, &mut state, steps, rng, |n, s| {
        max_abs = max_abs.max(s.max_abs());
        if n % cfg.sample_every != 0 || s.t <= burn {
            return Ok(());
        }
        let norms = it.model.norms(&s.u)?;
        let mut fp = 0.0;
        for &v in &s.u {
            let f = it.potential.f_prime(v)?;
            fp += f * f;
        }
        let m = [norms.h * norms.h, norms.v * norms.v, norms.z * norms.z, fp * cell];
        for (dst, v) in series.iter_mut().zip(m) {
            dst.push(v);
        }
        for (dst, (_, f)) in series[k..].iter_mut().zip(observables) {
            dst.push(f.eval(&s.u));
        }
        if let Some(e) = cfg.snapshot_every {
            if (series[0].len() - 1) % e == 0 {
                snapshots.push(s.u.clone());
                snapshot_times.push(s.t);
            }
        }
        Ok(())
    })?;
    let len = series[0].len();
    if len < 2 * cfg.batches {
        return Err(Error::config(
            "krylov.horizon",
            format!("only {len} samples after burn-in, need at least {}", 2 * cfg.batches),
        ));
    }
    // index of the first sample past 2b
    let sample_dt = dt * cfg.sample_every as f64;
    let late_from = (((2.0 * burn - burn) / sample_dt).floor() as usize).min(len - 2 * cfg.batches);
    let names: Vec<&str> = MOMENT_NAMES.iter().copied().chain(observables.iter().map(|(n, _)| *n)).collect();
    let averages = names
        .iter()
        .zip(&series)
        .map(|(n, s)| average_of(n, s, late_from, cfg.batches))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmpiricalMeasure {
        burn_in: burn,
        horizon: cfg.horizon,
        sample_dt,
        batches: cfg.batches,
        averages,
        series,
        snapshot_times,
        snapshots,
        max_abs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentStability {
    pub name: String,
    /// `(samples, running mean)` over doubling windows starting after burn-in.
    pub windows: Vec<(usize, f64)>,
    pub mean: f64,
    pub std_error: f64,
    pub finite: bool,
    /// Running mean increased across every window by more than the tolerance.
    pub diverging: bool,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentReport {
    pub rows: Vec<MomentStability>,
    pub h_sq_mean: f64,
    pub volume: f64,
    pub pass: bool,
}

/// Cauchy check of the moment running means over doubling windows: the last
/// two windows must agree within `3σ + rtol·|mean|`.
pub fn support_moments(measure: &EmpiricalMeasure, volume: f64, windows: usize, rtol: f64) -> Result<MomentReport> {
    if windows < 2 {
        return Err(Error::Argument("need at least two doubling windows".into()));
    }
    let mut rows = Vec::new();
    for name in MOMENT_NAMES {
        let s = measure
            .series(name)
            .ok_or_else(|| Error::Argument(format!("measure has no `{name}` series")))?;
        let avg = measure.average(name).expect("series present");
        let n = s.len();
        let mut w = Vec::new();
        for j in (0..windows).rev() {
            let len = n >> j;
            if len == 0 {
                continue;
            }
            w.push((len, s[..len].iter().sum::<f64>() / len as f64));
        }
        let tol = |m: f64| 3.0 * avg.std_error + rtol * m.abs();
        let finite = s.iter().all(|v| v.is_finite());
        let diverging = w.windows(2).all(|p| p[1].1 - p[0].1 > tol(p[1].1));
        let last = &w[w.len() - 2..];
        let settled = (last[1].1 - last[0].1).abs() <= tol(last[1].1);
        rows.push(MomentStability {
            name: name.to_string(),
            windows: w,
            mean: avg.mean,
            std_error: avg.std_error,
            finite,
            diverging,
            stable: finite && settled && !diverging,
        });
    }
    let h = measure.average("h_sq").expect("moment series").mean;
    let pass = rows.iter().all(|r| r.stable) && h <= volume;
    Ok(MomentReport {
        rows,
        h_sq_mean: h,
        volume,
        pass,
    })
}

/// Two Krylov-Bogoliubov averages agree within `k` combined standard errors.
pub fn averages_agree(a: &TimeAverage, b: &TimeAverage, k: f64) -> bool {
    let s = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    (a.mean - b.mean).abs() <= k * s + 1e-12
}

// ---------------------------------------------------------------- mixing

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingConfig {
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    pub horizon: f64,
    /// Start of the log-linear fit window.
    #[serde(default = "default_fit_start")]
    pub fit_start: f64,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_pairs() -> usize {
    100
}
fn default_fit_start() -> f64 {
    1.0
}
fn default_bootstrap() -> usize {
    400
}

impl MixingConfig {
    pub fn new(horizon: f64, pairs: usize) -> Self {
        Self {
            pairs,
            horizon,
            fit_start: default_fit_start(),
            bootstrap: default_bootstrap(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs < 2 {
            return Err(Error::config("mixing.pairs", "must be at least 2"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::config("mixing.horizon", "must be positive"));
        }
        if !(self.fit_start >= 0.0 && self.fit_start < self.horizon) {
            return Err(Error::config("mixing.fit_start", "must lie in [0, horizon)"));
        }
        if self.bootstrap < 10 {
            return Err(Error::config("mixing.bootstrap", "must be at least 10"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixingEstimate {
    /// Fitted decay rate of `E‖u^x − u^y‖²_H` (`+∞` for coincident data).
    pub rate: f64,
    /// Half-width of the 95% bootstrap interval over pairs.
    pub ci: f64,
    pub fit_window: (f64, f64),
    pub alpha0: f64,
    pub times: Vec<f64>,
    pub mean_diff_sq: Vec<f64>,
    pub std_error: Vec<f64>,
    /// `4|D|`.
    pub bound: f64,
    /// `E‖δ(t)‖² ≤ 4|D| e^{−α₀ t}` (within three standard errors) at every recorded time.
    pub envelope_ok: bool,
    pub coincident: bool,
    pub max_abs: f64,
    pub pass: bool,
}

fn fit_rate(times: &[f64], mean: &[f64], from: f64) -> Result<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(mean)
        .filter(|(t, m)| **t >= from && **m > 0.0)
        .map(|(t, m)| (*t, m.ln()))
        .unzip();
    if x.len() < 3 {
        return Err(Error::numeric(MODULE, "too few positive points in the mixing fit window"));
    }
    Ok(-linear_fit(&x, &y)?.slope)
}

/// Synchronous-coupling estimate of the contraction rate, gated on `α₀ > 0`.
pub fn mixing_rate(it: &Integrator, x0: &[f64], y0: &[f64], cfg: &MixingConfig) -> Result<MixingEstimate> {
    let a0 = gate(it)?;
    cfg.validate()?;
    let steps = steps_for(it, cfg.horizon);
    let every = it.config.record_every;
    let paths = ensemble(cfg.seed, cfg.pairs, |_, rng| {
        let mut a = it.initial_state(x0)?;
        let mut b = it.initial_state(y0)?;
        let mut dw = it.new_increments();
        let d = |a: &TrajectoryState, b: &TrajectoryState| {
            let v: Vec<f64> = a.u.iter().zip(&b.u).map(|(x, y)| x - y).collect();
            it.model.h_norm_sq(&v)
        };
        let mut times = vec![0.0];
        let mut out = vec![d(&a, &b)];
        let mut m = a.max_abs().max(b.max_abs());
        for n in 1..=steps {
            it.draw_increments(rng, &mut dw);
            it.advance(&mut a, &dw)?;
            it.advance(&mut b, &dw)?;
            m = m.max(a.max_abs()).max(b.max_abs());
            if n % every == 0 || n == steps {
                times.push(a.t);
                out.push(d(&a, &b));
            }
        }
        Ok((times, out, m))
    })?;
    let times = paths[0].0.clone();
    let r = times.len();
    let mut mean = vec![0.0; r];
    let mut se = vec![0.0; r];
    for j in 0..r {
        let col: Vec<f64> = paths.iter().map(|p| p.1[j]).collect();
        let (m, s) = mean_se(&col);
        mean[j] = m;
        se[j] = s;
    }
    let max_abs = paths.iter().map(|p| p.2).fold(0.0, f64::max);
    let bound = 4.0 * it.model.volume();
    let envelope_ok = times
        .iter()
        .zip(mean.iter().zip(&se))
        .all(|(t, (m, s))| *m <= bound * (-a0 * t).exp() + 3.0 * s);
    let fit_window = (cfg.fit_start, cfg.horizon);
    if mean.iter().all(|m| *m == 0.0) {
        return Ok(MixingEstimate {
            rate: f64::INFINITY,
            ci: 0.0,
            fit_window,
            alpha0: a0,
            times,
            mean_diff_sq: mean,
            std_error: se,
            bound,
            envelope_ok,
            coincident: true,
            max_abs,
            pass: true,
        });
    }
    let rate = fit_rate(&times, &mean, cfg.fit_start)?;
    let mut rng = substream(cfg.seed, 0, 1);
    let mut boot = Vec::with_capacity(cfg.bootstrap);
    for _ in 0..cfg.bootstrap {
        let mut m = vec![0.0; r];
        for _ in 0..cfg.pairs {
            let p = &paths[rng.gen_range(0..cfg.pairs)];
            for (acc, v) in m.iter_mut().zip(&p.1) {
                *acc += v;
            }
        }
        boot.push(fit_rate(&times, &m, cfg.fit_start)?);
    }
    let (_, boot_se) = mean_se(&boot);
    // mean_se divides by √B; the spread itself is what the interval needs
    let ci = 1.96 * boot_se * (boot.len() as f64).sqrt();
    Ok(MixingEstimate {
        rate,
        ci,
        fit_window,
        alpha0: a0,
        times,
        mean_diff_sq: mean,
        std_error: se,
        bound,
        envelope_ok,
        coincident: false,
        max_abs,
        pass: rate >= a0 - ci && envelope_ok,
    })
}

// ---------------------------------------------------------------- strong mixing

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongMixingConfig {
    pub times: Vec<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_samples() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrongMixingRow {
    pub t: f64,
    /// `max_x |P_t g(x) − ∫g dμ|`.
    pub max_deviation: f64,
    pub std_error: f64,
    /// `Lip(g)·2√|D|·e^{−α₀t/2}`.
    pub envelope: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrongMixingReport {
    pub rows: Vec<StrongMixingRow>,
    pub reference: f64,
    pub reference_se: f64,
    pub alpha0: f64,
    pub lipschitz: f64,
    /// Initial deviation bounded by the oscillation `2‖g‖_∞`.
    pub initial_ok: bool,
    pub pass: bool,
}

/// `P_t g(x)` at each point against the invariant mean `reference`.
pub fn strong_mixing_check(
    it: &Integrator,
    xs: &[Vec<f64>],
    g: &Observable,
    reference: (f64, f64),
    cfg: &StrongMixingConfig,
) -> Result<StrongMixingReport> {
    let a0 = gate(it)?;
    let lip = g
        .lipschitz()
        .ok_or_else(|| Error::Argument("observable has no global Lipschitz constant".into()))?;
    let osc = 2.0 * g.sup_norm().unwrap_or(f64::INFINITY);
    if cfg.times.is_empty() || cfg.times.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::config("strong_mixing.times", "need non-negative times"));
    }
    if cfg.samples < 2 {
        return Err(Error::config("strong_mixing.samples", "must be at least 2"));
    }
    let marks: Vec<usize> = cfg.times.iter().map(|t| steps_for(it, *t)).collect();
    let last = marks.iter().copied().max().unwrap_or(0);
    let mut dev = vec![(0.0f64, 0.0f64); marks.len()];
    let mut initial_ok = true;
    for (xi, x) in xs.iter().enumerate() {
        initial_ok &= (g.eval(x) - reference.0).abs() <= osc + 3.0 * reference.1;
        let seed = cfg.seed.wrapping_add((xi as u64) << 32);
        let vals = ensemble(seed, cfg.samples, |_, rng| {
            let mut s = it.initial_state(x)?;
            let mut out = vec![0.0; marks.len()];
            for (o, m) in out.iter_mut().zip(&marks) {
                if *m == 0 {
                    *o = g.eval(&s.u);
                }
            }
            run_steps(it, &mut s, last, rng, |n, s| {
                for (o, m) in out.iter_mut().zip(&marks) {
                    if *m == n {
                        *o = g.eval(&s.u);
                    }
                }
                Ok(())
            })?;
            Ok(out)
        })?;
        for (j, d) in dev.iter_mut().enumerate() {
            let col: Vec<f64> = vals.iter().map(|v| v[j]).collect();
            let (m, se) = mean_se(&col);
            let e = (m - reference.0).abs();
            if e >= d.0 {
                *d = (e, se);
            }
        }
    }
    let vol_sqrt = it.model.volume().sqrt();
    let rows: Vec<StrongMixingRow> = cfg
        .times
        .iter()
        .zip(&dev)
        .map(|(&t, &(d, se))| {
            let envelope = lip * 2.0 * vol_sqrt * (-0.5 * a0 * t).exp();
            let s = (se * se + reference.1 * reference.1).sqrt();
            StrongMixingRow {
                t,
                max_deviation: d,
                std_error: se,
                envelope,
                pass: d <= envelope + 3.0 * s + 1e-12,
            }
        })
        .collect();
    let pass = initial_ok && rows.iter().all(|r| r.pass);
    Ok(StrongMixingReport {
        rows,
        reference: reference.0,
        reference_se: reference.1,
        alpha0: a0,
        lipschitz: lip,
        initial_ok,
        pass,
    })
}

// ---------------------------------------------------------------- ergodic average vs ensemble

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleComparison {
    pub time_average: f64,
    pub time_average_se: f64,
    pub ensemble_average: f64,
    pub ensemble_se: f64,
    pub z_score: f64,
    pub agree: bool,
    /// Log-log slope of the batch-mean variance against batch length (≈ −1).
    pub batch_scaling_exponent: f64,
}

/// Log-log slope of `Var(batch means)` against the batch length over
/// `batch counts = 128, 64, 32, 16`.
pub fn batch_variance_exponent(series: &[f64]) -> Result<f64> {
    let mut len = Vec::new();
    let mut var = Vec::new();
    for b in [128usize, 64, 32, 16] {
        let bm = batch_means(series, b)?;
        len.push(bm.batch_len as f64);
        var.push((bm.std_error * bm.std_error * b as f64).max(1e-300));
    }
    Ok(loglog_slope(&len, &var)?.slope)
}

/// Single-trajectory time average of `g` against the average of `g` at time
/// `ensemble_horizon` over trajectories started from snapshots of that run.
pub fn ergodic_average_vs_ensemble(
    it: &Integrator,
    x0: &[f64],
    kb: &KrylovConfig,
    g: &Observable,
    ensemble_size: usize,
    ensemble_horizon: f64,
    seed: u64,
) -> Result<EnsembleComparison> {
    if ensemble_size < 2 {
        return Err(Error::config("ensemble_size", "must be at least 2"));
    }
    let mut cfg = kb.clone();
    if cfg.snapshot_every.is_none() {
        cfg.snapshot_every = Some(10);
    }
    let mut rng = stream(seed, 0);
    let m = krylov_bogoliubov(it, x0, &cfg, &[("g", g as &dyn PathFunctional)], &mut rng)?;
    let ta = m.average("g").expect("observable recorded");
    if m.snapshots.is_empty() {
        return Err(Error::numeric(MODULE, "no snapshots recorded"));
    }
    let steps = steps_for(it, ensemble_horizon);
    let snaps = &m.snapshots;
    let vals = ensemble(seed.wrapping_add(1), ensemble_size, |id, rng| {
        let x = &snaps[(id as usize * snaps.len()) / ensemble_size];
        let mut s = it.initial_state(x)?;
        run_steps(it, &mut s, steps, rng, |_, _| Ok(()))?;
        Ok(g.eval(&s.u))
    })?;
    let (em, ese) = mean_se(&vals);
    let comb = (ta.std_error.powi(2) + ese.powi(2)).sqrt();
    let diff = (ta.mean - em).abs();
    let z = if comb > 0.0 { diff / comb } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(EnsembleComparison {
        time_average: ta.mean,
        time_average_se: ta.std_error,
        ensemble_average: em,
        ensemble_se: ese,
        z_score: z,
        agree: diff <= 3.0 * comb + 1e-12,
        batch_scaling_exponent: batch_variance_exponent(m.series("g").expect("observable recorded"))
            .unwrap_or(f64::NAN),
    })
}

// ---------------------------------------------------------------- moment envelopes

/// Affine-in-`t` upper bounds for the energy-type moments of the solution,
/// with explicit constants (BDG constant 3 for `p = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentEnvelope {
    pub c1: f64,
    pub c_b: f64,
    pub k: f64,
    pub volume: f64,
    pub nu: f64,
    pub sup_f: f64,
}

impl MomentEnvelope {
    pub fn new(it: &Integrator) -> Self {
        Self {
            c1: it.potential.c1,
            c_b: it.noise.c_b,
            k: it.potential.k,
            volume: it.model.volume(),
            nu: it.config.nu,
            sup_f: it.potential.sup_f(),
        }
    }

    /// `c = |D|(C₁ + C_B/2 + 9 C_B)`.
    pub fn energy_rate(&self) -> f64 {
        self.volume * (self.c1 + 9.5 * self.c_b)
    }

    /// Bound on `∫₀^t E‖∇u‖²`.
    pub fn gradient_integral(&self, x_h_sq: f64, t: f64) -> f64 {
        (0.5 * x_h_sq + self.energy_rate() * t) / self.nu
    }

    /// Bound on `E sup_{s≤t} ‖u‖²_H + ∫₀^t E‖u‖²_V`.
    pub fn energy(&self, x_h_sq: f64, t: f64) -> f64 {
        let c = self.energy_rate();
        2.0 * x_h_sq + 4.0 * c * t + self.volume * t + self.gradient_integral(x_h_sq, t)
    }

    fn h2_core(&self, x_h_sq: f64, x_grad_sq: f64, t: f64) -> f64 {
        0.5 * x_grad_sq
            + (self.k + 0.5 * self.c_b) * self.gradient_integral(x_h_sq, t)
            + 4.5 * self.c_b * self.volume * t / self.nu
    }

    /// Bound on `E sup_{s≤t} ‖u‖²_V + ∫₀^t E‖u‖²_Z`.
    pub fn regularity(&self, x_h_sq: f64, x_grad_sq: f64, t: f64) -> f64 {
        let r = self.h2_core(x_h_sq, x_grad_sq, t);
        let c = self.energy_rate();
        2.0 * x_h_sq
            + 4.0 * c * t
            + 4.0 * r
            + self.volume * t
            + 2.0 * self.gradient_integral(x_h_sq, t)
            + 2.0 * r / self.nu
    }

    /// Bound on `∫₀^t E‖F'(u)‖²_H`.
    pub fn fprime(&self, x_h_sq: f64, t: f64) -> f64 {
        self.volume * self.sup_f
            + self.k * self.nu * self.gradient_integral(x_h_sq, t)
            + 0.5 * self.c_b * self.volume * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentSeries {
    pub name: String,
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub envelope: Vec<f64>,
    /// Fitted slope in `t` of the ensemble mean against the envelope slope.
    pub slope: f64,
    pub envelope_slope: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentCheck {
    pub series: Vec<MomentSeries>,
    pub max_abs: f64,
    pub pass: bool,
}

/// Ensemble moments against `tolerance ×` the envelopes, at every recorded time.
pub fn moment_check(it: &Integrator, x0: &[f64], seeds: usize, seed: u64, tolerance: f64) -> Result<MomentCheck> {
    if !it.config.track_norms {
        return Err(Error::config("integrator.track_norms", "moment checks need norm tracking"));
    }
    let env = MomentEnvelope::new(it);
    let n0 = it.model.norms(x0)?;
    let (xh, xg) = (n0.h * n0.h, n0.grad_sq);
    let paths = ensemble(seed, seeds, |_, rng| it.simulate(x0, &[], rng))?;
    let times = paths[0].times.clone();
    let max_abs = paths.iter().map(|p| p.max_abs).fold(0.0, f64::max);
    type Pick = fn(&crate::integrator::NormSeries, usize) -> f64;
    let mut defs: Vec<(&str, Pick, Box<dyn Fn(f64) -> f64>)> = vec![
        (
            "energy",
            |n, j| n.sup_h_sq[j] + n.int_v_sq[j],
            Box::new(move |t| env.energy(xh, t)),
        ),
        (
            "regularity",
            |n, j| n.sup_v_sq[j] + n.int_z_sq[j],
            Box::new(move |t| env.regularity(xh, xg, t)),
        ),
    ];
    if !paths[0].norms.int_fprime_sq.is_empty() {
        defs.push(("fprime", |n, j| n.int_fprime_sq[j], Box::new(move |t| env.fprime(xh, t))));
    }
    let mut series = Vec::new();
    for (name, pick, bound) in defs {
        let mut mean = Vec::with_capacity(times.len());
        let mut se = Vec::with_capacity(times.len());
        for j in 0..times.len() {
            let col: Vec<f64> = paths.iter().map(|p| pick(&p.norms, j)).collect();
            let (m, s) = mean_se(&col);
            mean.push(m);
            se.push(s);
        }
        let envelope: Vec<f64> = times.iter().map(|t| bound(*t)).collect();
        let slope = linear_fit(&times, &mean)?.slope;
        let t_end = *times.last().expect("non-empty");
        let envelope_slope = (bound(t_end) - bound(0.0)) / t_end;
        let within = mean.iter().zip(&envelope).all(|(m, e)| *m <= tolerance * e);
        series.push(MomentSeries {
            name: name.to_string(),
            times: times.clone(),
            pass: within && slope <= tolerance * envelope_slope,
            mean,
            std_error: se,
            envelope,
            slope,
            envelope_slope,
        });
    }
    let pass = series.iter().all(|s| s.pass);
    Ok(MomentCheck { series, max_abs, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::IntegratorConfig;
    use crate::noise::{NoiseConfig, NoiseFamily};
    use crate::potential::PotentialSpec;
    use crate::spatial::{BoundaryCondition, SpatialConfig, SpatialModel};

    fn integrator(n: usize, bc: BoundaryCondition, dt: f64, t: f64) -> Integrator {
        let model = SpatialModel::build(SpatialConfig::one_d(n, bc)).unwrap();
        let pot = PotentialSpec::new(1.0, 2.0).unwrap();
        let noise = NoiseFamily::new(NoiseConfig::default(), &pot).unwrap();
        Integrator::new(model, pot, noise, IntegratorConfig::new(dt, t, 1.0)).unwrap()
    }

    #[test]
    fn constant_average_is_one() {
        let it = integrator(16, BoundaryCondition::Dirichlet, 1e-3, 1.0);
        let one = |_: &[f64]| 1.0;
        let x0 = vec![0.0; 16];
        let mut r = stream(1, 0);
        let m = krylov_bogoliubov(&it, &x0, &KrylovConfig::new(1.0), &[("one", &one)], &mut r).unwrap();
        assert_eq!(m.average("one").unwrap().mean, 1.0);
        assert!(m.average("h_sq").unwrap().mean <= it.model.volume());
        assert!(m.max_abs < 1.0);
    }

    #[test]
    fn horizon_shorter_than_burn_in_rejected() {
        let mut c = KrylovConfig::new(1.0);
        c.burn_in = Some(2.0);
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn neumann_mixing_is_gated() {
        let it = integrator(16, BoundaryCondition::Neumann, 1e-3, 1.0);
        let x = vec![0.1; 16];
        let e = mixing_rate(&it, &x, &x, &MixingConfig::new(1.0, 4)).unwrap_err();
        assert!(matches!(e, Error::Gated(_)));
        assert!(e.to_string().contains("alpha0"));
    }

    #[test]
    fn coincident_pair_is_exact() {
        let it = integrator(16, BoundaryCondition::Dirichlet, 1e-3, 0.5);
        let x = vec![0.2; 16];
        let mut c = MixingConfig::new(0.5, 4);
        c.fit_start = 0.1;
        let e = mixing_rate(&it, &x, &x, &c).unwrap();
        assert!(e.coincident && e.rate.is_infinite() && e.pass);
    }

    #[test]
    fn envelopes_are_affine_and_ordered() {
        let it = integrator(16, BoundaryCondition::Dirichlet, 1e-3, 0.5);
        let e = MomentEnvelope::new(&it);
        for f in [
            Box::new(|t| e.energy(0.3, t)) as Box<dyn Fn(f64) -> f64>,
            Box::new(|t| e.regularity(0.3, 2.0, t)),
            Box::new(|t| e.fprime(0.3, t)),
        ] {
            let (a, b, c) = (f(0.0), f(1.0), f(2.0));
            assert!(((c - b) - (b - a)).abs() < 1e-9 * c.abs());
            assert!(b > a);
        }
    }
}
