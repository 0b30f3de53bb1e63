//! Experiment configuration, orchestration and result emission.
//!
//! A run reads one TOML file (or a manifest written by an earlier run),
//! validates it, executes the experiment on a fixed-size worker pool and
//! writes CSV series, JSON reports and a manifest into the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::ergodicity::{
    averages_agree, integrator_alpha0, krylov_bogoliubov, mixing_rate, support_moments, KrylovConfig, MixingConfig,
};
use crate::integrator::{ensemble, Integrator, IntegratorConfig, PathFunctional};
use crate::kolmogorov::{
    bar_alpha, scaling_sweep, KolmogorovProblem, Observable, ObservableSpec, ResolventConfig, SmoothingParams,
};
use crate::noise::{MollifiedNoise, NoiseConfig, NoiseFamily};
use crate::potential::{Mollifier, PotentialSpec, RegularizationParams, RegularizedPotential};
use crate::spatial::{SpatialConfig, SpatialModel};
use crate::stats::mean_se;
use crate::{Error, Result};

/// Environment variable overriding the output directory.
pub const OUTPUT_DIR_ENV: &str = "ACLAB_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "aclab-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Couple,
    Invariant,
    Mixing,
    KolmogorovResidual,
    RateSweep,
    PotentialRates,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Couple => "couple",
            ExperimentKind::Invariant => "invariant",
            ExperimentKind::Mixing => "mixing",
            ExperimentKind::KolmogorovResidual => "kolmogorov-residual",
            ExperimentKind::RateSweep => "rate-sweep",
            ExperimentKind::PotentialRates => "potential-rates",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    #[serde(default = "one")]
    pub theta: f64,
    #[serde(default = "two")]
    pub theta0: f64,
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}

impl Default for PotentialConfig {
    fn default() -> Self {
        Self { theta: 1.0, theta0: 2.0 }
    }
}

/// Initial field on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialCondition {
    #[default]
    Zero,
    Constant { value: f64 },
    /// `amplitude · e_mode / max|e_mode|` for the model's eigenbasis.
    Mode {
        #[serde(default = "one_usize")]
        mode: usize,
        amplitude: f64,
    },
    Values { values: Vec<f64> },
}

fn one_usize() -> usize {
    1
}

impl InitialCondition {
    pub fn build(&self, model: &SpatialModel) -> Result<Vec<f64>> {
        let n = model.len();
        match self {
            InitialCondition::Zero => Ok(vec![0.0; n]),
            InitialCondition::Constant { value } => Ok(vec![*value; n]),
            InitialCondition::Mode { mode, amplitude } => {
                if *mode == 0 || *mode > n {
                    return Err(Error::config("initial.mode", format!("mode {mode} outside 1..={n}")));
                }
                let e = model.eigenfunction(mode - 1)?;
                let m = e.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                Ok(e.iter().map(|v| amplitude * v / m).collect())
            }
            InitialCondition::Values { values } => {
                if values.len() != n {
                    return Err(Error::config(
                        "initial.values",
                        format!("{} values for a grid of {n} points", values.len()),
                    ));
                }
                Ok(values.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "one_usize")]
    pub trajectories: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { trajectories: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KolmogorovRun {
    #[serde(default)]
    pub alpha: Option<f64>,
    pub observable: ObservableSpec,
    pub smoothing: SmoothingParams,
    pub resolvent: ResolventConfig,
    pub points: Vec<InitialCondition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub ns: Vec<u64>,
    pub samples: Vec<InitialCondition>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_hermite")]
    pub hermite_points: usize,
}

fn default_gamma() -> f64 {
    4.0
}
fn default_delta() -> f64 {
    2.0
}
fn default_hermite() -> usize {
    24
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialRatesConfig {
    pub lambdas: Vec<f64>,
    #[serde(default = "minus_five")]
    pub x_min: f64,
    #[serde(default = "five")]
    pub x_max: f64,
    #[serde(default = "thousand")]
    pub points: usize,
}

fn minus_five() -> f64 {
    -5.0
}
fn five() -> f64 {
    5.0
}
fn thousand() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub potential: PotentialConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub spatial: SpatialConfig,
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub initial: InitialCondition,
    /// Second initial datum for `couple`, `mixing` and `invariant`.
    #[serde(default)]
    pub initial_y: Option<InitialCondition>,
    #[serde(default)]
    pub observables: Vec<ObservableSpec>,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub krylov: Option<KrylovConfig>,
    #[serde(default)]
    pub mixing: Option<MixingConfig>,
    #[serde(default)]
    pub kolmogorov: Option<KolmogorovRun>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub potential_rates: Option<PotentialRatesConfig>,
}

/// Constants recomputed from the configuration on every run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedConstants {
    pub c_b: f64,
    pub c_b_prime: f64,
    pub k: f64,
    pub c1: f64,
    pub k0: f64,
    pub alpha0: f64,
    pub bar_alpha: f64,
    pub volume: f64,
}

/// Model, potential, noise and integrator built from a configuration.
pub struct Setup {
    pub model: SpatialModel,
    pub potential: PotentialSpec,
    pub noise: NoiseFamily,
    pub integrator: Integrator,
    pub derived: DerivedConstants,
}

fn section<'a, T>(s: &'a Option<T>, name: &str, kind: ExperimentKind) -> Result<&'a T> {
    s.as_ref()
        .ok_or_else(|| Error::config(name, format!("section `[{name}]` is required for kind `{}`", kind.name())))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Reads a TOML config, or the `config` member of a JSON manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: Value = serde_json::from_str(&text).map_err(|e| Error::config("manifest", e.to_string()))?;
            let c = v.get("config").cloned().unwrap_or(v);
            return serde_json::from_value(c).map_err(|e| Error::config("manifest.config", e.to_string()));
        }
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let s = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        let d = Sha256::digest(s.as_bytes());
        let mut out = String::with_capacity(64);
        for b in d.iter() {
            write!(out, "{b:02x}").expect("write to string");
        }
        Ok(out)
    }

    pub fn setup(&self) -> Result<Setup> {
        let model = SpatialModel::build(self.spatial.clone())?;
        let potential = PotentialSpec::new(self.potential.theta, self.potential.theta0)
            .map_err(|e| Error::config("potential", e.to_string()))?;
        let noise = NoiseFamily::new(self.noise.clone(), &potential).map_err(|e| match e {
            Error::Config { .. } => e,
            other => Error::config("noise", other.to_string()),
        })?;
        let integrator = Integrator::new(model.clone(), potential, noise.clone(), self.integrator.clone())?;
        let derived = DerivedConstants {
            c_b: noise.c_b,
            c_b_prime: noise.c_b_prime,
            k: potential.k,
            c1: potential.c1,
            k0: model.k0(),
            alpha0: integrator_alpha0(&integrator),
            bar_alpha: bar_alpha(potential.k, noise.c_b),
            volume: model.volume(),
        };
        Ok(Setup {
            model,
            potential,
            noise,
            integrator,
            derived,
        })
    }

    /// Schema and cross-field checks; gated experiments return `Error::Gated`.
    pub fn validate(&self) -> Result<Setup> {
        if self.workers == Some(0) {
            return Err(Error::config("workers", "must be at least 1"));
        }
        let s = self.setup()?;
        let kind = self.kind;
        let x0 = self.initial.build(&s.model)?;
        s.integrator.initial_state(&x0).map_err(|e| Error::config("initial", e.to_string()))?;
        for o in &self.observables {
            Observable::new(o.clone(), &s.model)?;
        }
        if self.ensemble.trajectories == 0 {
            return Err(Error::config("ensemble.trajectories", "must be at least 1"));
        }
        let needs_y = matches!(kind, ExperimentKind::Couple | ExperimentKind::Mixing);
        if needs_y && self.initial_y.is_none() {
            return Err(Error::config(
                "initial_y",
                format!("kind `{}` needs a second initial datum", kind.name()),
            ));
        }
        if let Some(y) = &self.initial_y {
            let y0 = y.build(&s.model)?;
            s.integrator.initial_state(&y0).map_err(|e| Error::config("initial_y", e.to_string()))?;
        }
        match kind {
            ExperimentKind::Simulate | ExperimentKind::Couple => {}
            ExperimentKind::Invariant => section(&self.krylov, "krylov", kind)?.validate()?,
            ExperimentKind::Mixing => {
                let m = section(&self.mixing, "mixing", kind)?;
                if !(s.derived.alpha0 > 0.0) {
                    return Err(Error::Gated(format!(
                        "mixing requires alpha0 = nu(1/K0^2 - 1) - C_B/2 - K > 0, computed alpha0 = {:.6} \
                         (nu = {}, K0 = {:.6}, C_B = {:.6}, K = {})",
                        s.derived.alpha0, self.integrator.nu, s.derived.k0, s.derived.c_b, s.derived.k
                    )));
                }
                m.validate()?;
            }
            ExperimentKind::KolmogorovResidual => {
                let k = section(&self.kolmogorov, "kolmogorov", kind)?;
                k.smoothing.validate()?;
                if let Some(a) = k.alpha {
                    if !(a > s.derived.bar_alpha) {
                        return Err(Error::config(
                            "kolmogorov.alpha",
                            format!("alpha = {a} must exceed bar_alpha = {}", s.derived.bar_alpha),
                        ));
                    }
                }
                let g = Observable::new(k.observable.clone(), &s.model)?;
                if g.sup_norm().is_none() {
                    return Err(Error::config("kolmogorov.observable", "observable must be bounded on H"));
                }
                if k.points.is_empty() {
                    return Err(Error::config("kolmogorov.points", "need at least one test point"));
                }
                for p in &k.points {
                    p.build(&s.model)?;
                }
            }
            ExperimentKind::RateSweep => {
                let w = section(&self.sweep, "sweep", kind)?;
                if w.ns.len() < 2 || w.ns.contains(&0) {
                    return Err(Error::config("sweep.ns", "need at least two positive values"));
                }
                if w.samples.is_empty() {
                    return Err(Error::config("sweep.samples", "need at least one sample field"));
                }
            }
            ExperimentKind::PotentialRates => {
                let p = section(&self.potential_rates, "potential_rates", kind)?;
                if p.lambdas.is_empty() || p.lambdas.iter().any(|l| !(*l > 0.0)) {
                    return Err(Error::config("potential_rates.lambdas", "need positive values"));
                }
                if !(p.x_max > p.x_min) || p.points < 2 {
                    return Err(Error::config("potential_rates", "need x_min < x_max and at least two points"));
                }
            }
        }
        Ok(s)
    }
}

/// Exit status for an error: 1 validation, 2 numeric failure, 3 gated out.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Argument(_) | Error::Serde(_) => 1,
        Error::Gated(_) => 3,
        Error::Domain(_) | Error::Singularity(_) | Error::Numeric { .. } | Error::Io(_) => 2,
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub files: Vec<String>,
    pub manifest: Value,
}

// Collects artifacts in memory; written only after the experiment succeeds.
#[derive(Default)]
struct Artifacts {
    files: Vec<(String, String)>,
}

impl Artifacts {
    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) {
        let mut s = header.join(",");
        s.push('\n');
        for r in rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        self.files.push((name.to_string(), s));
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let s = serde_json::to_string_pretty(v).map_err(|e| Error::Serde(e.to_string()))?;
        self.files.push((name.to_string(), s + "\n"));
        Ok(())
    }
}

fn f(v: f64) -> String {
    format!("{v}")
}

fn observable_names(specs: &[ObservableSpec]) -> Vec<String> {
    specs.iter().enumerate().map(|(i, s)| format!("{}_{i}", s.name())).collect()
}

fn run_simulate(cfg: &ExperimentConfig, s: &Setup, out: &mut Artifacts) -> Result<Value> {
    let it = &s.integrator;
    let x0 = cfg.initial.build(&s.model)?;
    let obs = cfg
        .observables
        .iter()
        .map(|o| Observable::new(o.clone(), &s.model))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn PathFunctional> = obs.iter().map(|o| o as &dyn PathFunctional).collect();
    let n = cfg.ensemble.trajectories;
    let paths = ensemble(cfg.seed, n, |_, rng| it.simulate(&x0, &refs, rng))?;
    let names = observable_names(&cfg.observables);
    let times = &paths[0].times;
    let mut header: Vec<String> = vec!["t".into()];
    header.extend(names.iter().cloned());
    let tracked = it.config.track_norms;
    if tracked {
        header.push("h_sq".into());
        header.push("v_sq".into());
    }
    let mean_at = |pick: &dyn Fn(&crate::integrator::PathSummary) -> f64| {
        paths.iter().map(pick).sum::<f64>() / n as f64
    };
    let rows = (0..times.len()).map(|j| {
        let mut r = vec![f(times[j])];
        for k in 0..obs.len() {
            r.push(f(mean_at(&|p| p.observables[k][j])));
        }
        if tracked {
            r.push(f(mean_at(&|p| p.norms.h_sq[j])));
            r.push(f(mean_at(&|p| p.norms.v_sq[j])));
        }
        r
    });
    let hdr: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    out.csv("series.csv", &hdr, rows.collect::<Vec<_>>());
    let mut th: Vec<&str> = vec!["trajectory"];
    th.extend(names.iter().map(|s| s.as_str()));
    let terminal = paths.iter().enumerate().map(|(i, p)| {
        let mut r = vec![i.to_string()];
        for k in 0..obs.len() {
            r.push(f(*p.observables[k].last().expect("recorded")));
        }
        r
    });
    out.csv("terminal.csv", &th, terminal.collect::<Vec<_>>());
    let max_abs = paths.iter().map(|p| p.max_abs).fold(0.0, f64::max);
    let summary = json!({
        "trajectories": n,
        "max_abs": max_abs,
        "strictly_inside": max_abs < 1.0,
        "terminal_means": names.iter().enumerate().map(|(k, name)| {
            let v: Vec<f64> = paths.iter().map(|p| *p.observables[k].last().expect("recorded")).collect();
            let (m, se) = mean_se(&v);
            json!({"observable": name, "mean": m, "std_error": se})
        }).collect::<Vec<_>>(),
    });
    out.json("summary.json", &summary)?;
    Ok(summary)
}

fn run_couple(cfg: &ExperimentConfig, s: &Setup, out: &mut Artifacts) -> Result<Value> {
    let it = &s.integrator;
    let x0 = cfg.initial.build(&s.model)?;
    let y0 = cfg.initial_y.as_ref().expect("validated").build(&s.model)?;
    let n = cfg.ensemble.trajectories;
    let paths = ensemble(cfg.seed, n, |_, rng| it.simulate_coupled(&x0, &y0, rng))?;
    let times = &paths[0].times;
    let rows: Vec<Vec<String>> = (0..times.len())
        .map(|j| {
            let col: Vec<f64> = paths.iter().map(|p| p.diff_sq[j]).collect();
            let (m, se) = mean_se(&col);
            vec![f(times[j]), f(m), f(se)]
        })
        .collect();
    out.csv("coupled.csv", &["t", "mean_diff_sq", "std_error"], rows);
    let max_abs = paths.iter().map(|p| p.max_abs).fold(0.0, f64::max);
    let summary = json!({
        "pairs": n,
        "max_abs": max_abs,
        "initial_diff_sq": paths[0].diff_sq[0],
        "bound_4_volume": 4.0 * s.model.volume(),
    });
    out.json("summary.json", &summary)?;
    Ok(summary)
}

fn run_invariant(cfg: &ExperimentConfig, s: &Setup, out: &mut Artifacts) -> Result<Value> {
    let it = &s.integrator;
    let kb = cfg.krylov.as_ref().expect("validated");
    let obs = cfg
        .observables
        .iter()
        .map(|o| Observable::new(o.clone(), &s.model))
        .collect::<Result<Vec<_>>>()?;
    let names = observable_names(&cfg.observables);
    let pairs: Vec<(&str, &dyn PathFunctional)> = names
        .iter()
        .zip(&obs)
        .map(|(n, o)| (n.as_str(), o as &dyn PathFunctional))
        .collect();
    let mut starts = vec![("x", cfg.initial.build(&s.model)?)];
    if let Some(y) = &cfg.initial_y {
        starts.push(("y", y.build(&s.model)?));
    }
    let runs = ensemble(cfg.seed, starts.len(), |id, rng| {
        krylov_bogoliubov(it, &starts[id as usize].1, kb, &pairs, rng)
    })?;
    let mut rows = Vec::new();
    for ((label, _), m) in starts.iter().zip(&runs) {
        for a in &m.averages {
            rows.push(vec![
                label.to_string(),
                a.name.clone(),
                f(a.mean),
                f(a.std_error),
                f(m.burn_in),
                f(m.horizon),
            ]);
        }
    }
    out.csv(
        "averages.csv",
        &["run", "observable", "estimate", "error", "window_start", "window_end"],
        rows,
    );
    let moments = support_moments(&runs[0], s.model.volume(), 5, 0.05)?;
    let agreement = if runs.len() == 2 && s.derived.alpha0 > 0.0 {
        Some(
            runs[0]
                .averages
                .iter()
                .zip(&runs[1].averages)
                .map(|(a, b)| json!({"observable": a.name, "agree_3sigma": averages_agree(a, b, 3.0)}))
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    let summary = json!({
        "max_abs": runs.iter().map(|m| m.max_abs).fold(0.0, f64::max),
        "moments": moments,
        "shift_invariant": runs[0].averages.iter().map(|a| json!({"observable": a.name, "ok": a.shift_invariant()})).collect::<Vec<_>>(),
        "agreement": agreement,
        "uniqueness_gate": if s.derived.alpha0 > 0.0 { "alpha0 > 0" } else { "alpha0 <= 0: uniqueness diagnostic skipped" },
    });
    out.json("invariant.json", &summary)?;
    Ok(summary)
}

fn run_mixing(cfg: &ExperimentConfig, s: &Setup, out: &mut Artifacts) -> Result<Value> {
    let m = cfg.mixing.as_ref().expect("validated");
    let x0 = cfg.initial.build(&s.model)?;
    let y0 = cfg.initial_y.as_ref().expect("validated").build(&s.model)?;
    let mut mc = m.clone();
    mc.seed = cfg.seed;
    let e = mixing_rate(&s.integrator, &x0, &y0, &mc)?;
    let rows: Vec<Vec<String>> = e
        .times
        .iter()
        .zip(e.mean_diff_sq.iter().zip(&e.std_error))
        .map(|(t, (m, se))| vec![f(*t), f(*m), f(*se)])
        .collect();
    out.csv("mixing.csv", &["t", "mean_diff_sq", "std_error"], rows);
    let summary = json!({
        "rate": if e.rate.is_finite() { json!(e.rate) } else { json!("coincident") },
        "ci": e.ci,
        "fit_window": [e.fit_window.0, e.fit_window.1],
        "alpha0": e.alpha0,
        "bound": e.bound,
        "envelope_ok": e.envelope_ok,
        "coincident": e.coincident,
        "max_abs": e.max_abs,
        "pass": e.pass,
    });
    out.json("mixing.json", &summary)?;
    Ok(summary)
}

fn run_kolmogorov(cfg: &ExperimentConfig, s: &Setup, out: &mut Artifacts) -> Result<Value> {
    let k = cfg.kolmogorov.as_ref().expect("validated");
    let mut rc = k.resolvent.clone();
    rc.seed = cfg.seed;
    let p = KolmogorovProblem::new(
        s.model.clone(),
        s.potential,
        s.noise.clone(),
        cfg.integrator.nu,
        k.alpha,
        k.observable.clone(),
        k.smoothing.clone(),
        rc,
    )?;
    let bound = p.g_sup / p.alpha;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (i, pt) in k.points.iter().enumerate() {
        let x = pt.build(&s.model)?;
        let r = p.residual_check(&x)?;
        rows.push(vec![
            i.to_string(),
            f(r.phi.value),
            f(r.phi.std_error),
            f(bound),
            f(r.r_direct),
            f(r.r_direct_error),
            f(r.r_semigroup),
            f(r.r_semigroup_error),
            (r.pass()).to_string(),
        ]);
        reports.push(r);
    }
    out.csv(
        "residuals.csv",
        &["point", "phi", "phi_se", "phi_bound", "r_direct", "r_direct_error", "r_semigroup", "r_semigroup_error", "pass"],
        rows,
    );
    let summary = json!({
        "alpha": p.alpha,
        "bar_alpha": p.bar_alpha,
        "t_max": p.t_max(),
        "phi_bound": bound,
        "points": reports,
        "pass": reports.iter().all(|r| r.pass() && r.phi.value.abs() <= bound + 3.0 * r.phi.std_error),
    });
    out.json("kolmogorov.json", &summary)?;
    Ok(summary)
}

fn run_sweep(cfg: &ExperimentConfig, s: &Setup, out: &mut Artifacts) -> Result<Value> {
    let w = cfg.sweep.as_ref().expect("validated");
    let samples = w.samples.iter().map(|c| c.build(&s.model)).collect::<Result<Vec<_>>>()?;
    let mut tpl = SmoothingParams::new(1.0, None);
    tpl.gamma = w.gamma;
    tpl.delta = w.delta;
    tpl.hermite_points = w.hermite_points;
    let r = scaling_sweep(&s.model, &s.potential, &s.noise, &w.ns, &samples, &tpl)?;
    let rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|q| vec![q.n.to_string(), f(q.lambda), f(q.envelope), f(q.drift_gap), f(q.diffusion_gap), f(q.combined)])
        .collect();
    out.csv("sweep.csv", &["n", "lambda", "envelope", "drift_gap", "diffusion_gap", "combined"], rows);
    let v = serde_json::to_value(&r).map_err(|e| Error::Serde(e.to_string()))?;
    out.json("sweep.json", &v)?;
    Ok(v)
}

/// One row of the singular-drift diagnostics at a fixed `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PotentialRateRow {
    pub lambda: f64,
    pub max_residual: f64,
    pub max_abs_resolvent: f64,
    /// `λ · max |β_λ(x) − β_λ(y)|/|x − y|` over neighbouring grid points.
    pub yosida_lipschitz: f64,
    pub max_second_ratio: f64,
    pub max_third_ratio: f64,
    /// `Σ_k sup|h_{k,λ} − h̃_k|²`.
    pub noise_gap_sq: f64,
    /// `max |F_λ'(x) − F'(x)|` over interior points.
    pub drift_gap: f64,
}

/// Resolvent, Yosida and mollification diagnostics on a grid of `x`.
pub fn potential_rates(
    potential: &PotentialSpec,
    noise: &NoiseFamily,
    lambdas: &[f64],
    x_min: f64,
    x_max: f64,
    points: usize,
) -> Result<Vec<PotentialRateRow>> {
    let xs: Vec<f64> = (0..points)
        .map(|i| x_min + (x_max - x_min) * i as f64 / (points - 1) as f64)
        .collect();
    let interior: Vec<f64> = (0..=18).map(|i| -0.9 + 0.1 * i as f64).collect();
    let mol = Mollifier::standard(64)?;
    lambdas
        .iter()
        .map(|&l| {
            let mut res: f64 = 0.0;
            let mut jmax: f64 = 0.0;
            let mut beta = Vec::with_capacity(xs.len());
            for &x in &xs {
                let p = potential.resolvent(l, x)?;
                res = res.max(p.residual.abs());
                jmax = jmax.max(p.value.abs());
                beta.push(potential.yosida(l, x)?);
            }
            let lip = xs
                .windows(2)
                .zip(beta.windows(2))
                .map(|(x, b)| l * (b[1] - b[0]).abs() / (x[1] - x[0]))
                .fold(0.0, f64::max);
            let reg = RegularizedPotential::new(*potential, RegularizationParams::new(l))?;
            let (b2, b3) = (reg.second_bound(), reg.third_bound());
            let mut r2: f64 = 0.0;
            let mut r3: f64 = 0.0;
            for &x in &xs {
                r2 = r2.max(reg.drift_second(x)?.abs() / b2);
                r3 = r3.max(reg.drift_third(x)?.abs() / b3);
            }
            let mn = MollifiedNoise::new(noise.clone(), mol.clone(), l, RegularizationParams::new(l).gamma)?;
            let mut dg: f64 = 0.0;
            for &x in &interior {
                dg = dg.max((reg.drift(x)? - potential.f_prime(x)?).abs());
            }
            Ok(PotentialRateRow {
                lambda: l,
                max_residual: res,
                max_abs_resolvent: jmax,
                yosida_lipschitz: lip,
                max_second_ratio: r2,
                max_third_ratio: r3,
                noise_gap_sq: mn.sup_gap_sq(),
                drift_gap: dg,
            })
        })
        .collect()
}

fn run_potential_rates(cfg: &ExperimentConfig, s: &Setup, out: &mut Artifacts) -> Result<Value> {
    let p = cfg.potential_rates.as_ref().expect("validated");
    let rows = potential_rates(&s.potential, &s.noise, &p.lambdas, p.x_min, p.x_max, p.points)?;
    out.csv(
        "potential_rates.csv",
        &[
            "lambda",
            "max_residual",
            "max_abs_resolvent",
            "yosida_lipschitz",
            "max_second_ratio",
            "max_third_ratio",
            "noise_gap_sq",
            "drift_gap",
        ],
        rows.iter()
            .map(|r| {
                vec![
                    f(r.lambda),
                    f(r.max_residual),
                    f(r.max_abs_resolvent),
                    f(r.yosida_lipschitz),
                    f(r.max_second_ratio),
                    f(r.max_third_ratio),
                    f(r.noise_gap_sq),
                    f(r.drift_gap),
                ]
            })
            .collect::<Vec<_>>(),
    );
    let v = serde_json::to_value(&rows).map_err(|e| Error::Serde(e.to_string()))?;
    out.json("potential_rates.json", &v)?;
    Ok(v)
}

/// Resolve the output directory: flag, then environment, then config, then default.
pub fn output_dir(cfg: &ExperimentConfig, overrides: &RunOverrides) -> PathBuf {
    if let Some(d) = &overrides.output_dir {
        return d.clone();
    }
    if let Ok(d) = std::env::var(OUTPUT_DIR_ENV) {
        if !d.is_empty() {
            return PathBuf::from(d);
        }
    }
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

/// Validate and execute one experiment, writing artifacts and the manifest.
pub fn run(cfg: &ExperimentConfig, overrides: &RunOverrides) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(w) = overrides.workers {
        cfg.workers = Some(w);
    }
    let dir = output_dir(&cfg, overrides);
    cfg.output_dir = Some(dir.clone());
    let setup = cfg.validate()?;
    let workers = cfg.workers.unwrap_or(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::numeric("harness", e.to_string()))?;
    let clock = Instant::now();
    let mut art = Artifacts::default();
    let summary = pool.install(|| match cfg.kind {
        ExperimentKind::Simulate => run_simulate(&cfg, &setup, &mut art),
        ExperimentKind::Couple => run_couple(&cfg, &setup, &mut art),
        ExperimentKind::Invariant => run_invariant(&cfg, &setup, &mut art),
        ExperimentKind::Mixing => run_mixing(&cfg, &setup, &mut art),
        ExperimentKind::KolmogorovResidual => run_kolmogorov(&cfg, &setup, &mut art),
        ExperimentKind::RateSweep => run_sweep(&cfg, &setup, &mut art),
        ExperimentKind::PotentialRates => run_potential_rates(&cfg, &setup, &mut art),
    })?;
    let wall = clock.elapsed().as_secs_f64();
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for (name, body) in &art.files {
        fs::write(dir.join(name), body)?;
        files.push(name.clone());
    }
    let manifest = json!({
        "artifact": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "kind": cfg.kind.name(),
        "config_sha256": cfg.hash()?,
        "config": cfg,
        "derived": setup.derived,
        "workers": workers,
        "wall_clock_secs": wall,
        "outputs": files,
        "summary": summary,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    files.push("manifest.json".into());
    Ok(RunOutcome {
        output_dir: dir,
        files,
        manifest,
    })
}

/// Derived constants for a configuration, or for the defaults on a small
/// 1D Dirichlet grid when none is given.
pub fn print_constants(cfg: Option<&ExperimentConfig>) -> Result<DerivedConstants> {
    match cfg {
        Some(c) => Ok(c.setup()?.derived),
        None => {
            let c = ExperimentConfig::from_toml(DEFAULT_CONSTANTS_CONFIG)?;
            Ok(c.setup()?.derived)
        }
    }
}

const DEFAULT_CONSTANTS_CONFIG: &str = r#"
kind = "simulate"
[spatial]
grid = [128]
bc = "dirichlet"
[integrator]
dt = 0.001
horizon = 1.0
nu = 1.0
"#;
