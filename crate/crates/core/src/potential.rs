//! The Flory-Huggins logarithmic double well and its regularisations.
//!
//! `F(r) = θ/2 [(1+r) ln(1+r) + (1-r) ln(1-r)] - θ₀/2 r²` on `[-1, 1]`.
//!
//! The monotone part `β(r) = F'(r) + K r = θ (artanh r - r)` with
//! `K = θ₀ - θ` is handled in the artanh coordinate `s = artanh(y)`, so that
//! resolvent values arbitrarily close to the barriers stay strictly inside
//! `(-1, 1)` in exact arithmetic and their distance to the barrier is
//! available as a logarithm even when `tanh(s)` rounds to `±1` in `f64`.

use serde::{Deserialize, Serialize};

use crate::quadrature::{gauss_legendre, golden_section_min, grid_sup};
use crate::{Error, Result};

/// Logarithmic potential with its derived constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub theta: f64,
    pub theta0: f64,
    /// Semiconvexity constant `θ₀ - θ`: `F'' ≥ -K`.
    pub k: f64,
    /// Coercivity constants of `F'(r) r ≥ C₀ r² - C₁`.
    pub c0: f64,
    pub c1: f64,
    /// Additive constant making `min F = 0`.
    pub offset: f64,
}

const MODULE: &str = "scalar_potential";

impl PotentialSpec {
    /// Builds the potential and computes `K`, `C₀ = K`, `C₁` and the offset.
    pub fn new(theta: f64, theta0: f64) -> Result<Self> {
        if !(theta > 0.0) || !(theta0 > theta) || !theta0.is_finite() {
            return Err(Error::Argument(format!(
                "potential needs 0 < theta < theta0, got theta={theta}, theta0={theta0}"
            )));
        }
        let k = theta0 - theta;
        let mut spec = Self {
            theta,
            theta0,
            k,
            c0: k,
            c1: 0.0,
            offset: 0.0,
        };
        // F is even: the minimum sits on [0, 1].
        let (_, fmin) = golden_section_min(|r| spec.f_raw(r), 0.0, 1.0, 1e-12);
        spec.offset = -fmin;
        let c0 = spec.c0;
        let sup = grid_sup(
            |r| c0 * r * r - spec.theta * r * r.atanh() + spec.theta0 * r * r,
            0.0,
            1.0 - 1e-12,
            10_000,
        );
        // relative margin so that the inequality holds at every r, not only at the refined maximiser
        spec.c1 = sup.max(0.0) * (1.0 + 1e-9) + 1e-12;
        Ok(spec)
    }

    fn f_raw(&self, r: f64) -> f64 {
        // r in [0, 1]; callers use evenness
        let ent = (1.0 + r) * r.ln_1p() + if r < 1.0 { (1.0 - r) * (-r).ln_1p() } else { 0.0 };
        0.5 * self.theta * ent - 0.5 * self.theta0 * r * r
    }

    /// `F(r) + offset`, with `0·ln 0 := 0` at the endpoints.
    pub fn f(&self, r: f64) -> Result<f64> {
        if !(r.abs() <= 1.0) {
            return Err(Error::Domain(format!("F is defined on [-1, 1], got {r}")));
        }
        Ok(self.f_raw(r.abs()) + self.offset)
    }

    /// `max_{[-1,1]} F` (with offset); attained at `0` or at `±1`.
    pub fn sup_f(&self) -> f64 {
        (self.f_raw(0.0) + self.offset).max(self.f_raw(1.0) + self.offset)
    }

    pub fn f_prime(&self, r: f64) -> Result<f64> {
        self.check_open(r)?;
        let a = r.abs();
        Ok(r.signum() * (self.theta * a.atanh() - self.theta0 * a))
    }

    pub fn f_second(&self, r: f64) -> Result<f64> {
        self.check_open(r)?;
        Ok(self.theta / ((1.0 - r) * (1.0 + r)) - self.theta0)
    }

    pub fn f_third(&self, r: f64) -> Result<f64> {
        self.check_open(r)?;
        let q = (1.0 - r) * (1.0 + r);
        Ok(2.0 * self.theta * r / (q * q))
    }

    /// Monotone part `β(r) = F'(r) + K r`.
    pub fn beta(&self, r: f64) -> Result<f64> {
        self.check_open(r)?;
        Ok(r.signum() * self.beta_of_artanh(r.abs().atanh()))
    }

    /// `β(tanh s) = θ (s - tanh s)`, accurate for small `|s|`.
    pub fn beta_of_artanh(&self, s: f64) -> f64 {
        self.theta * s_minus_tanh(s)
    }

    fn check_open(&self, r: f64) -> Result<()> {
        if r.abs() < 1.0 {
            Ok(())
        } else if r.is_nan() {
            Err(Error::Domain("NaN argument".into()))
        } else {
            Err(Error::Singularity(r))
        }
    }

    /// Resolvent `J_λ(x) = (I + λβ)^{-1}(x)`.
    pub fn resolvent(&self, lambda: f64, x: f64) -> Result<ResolventPoint> {
        self.resolvent_from(lambda, x, None)
    }

    /// Resolvent with a warm-start guess in the artanh coordinate.
    pub fn resolvent_from(&self, lambda: f64, x: f64, guess: Option<f64>) -> Result<ResolventPoint> {
        if !(lambda > 0.0) {
            return Err(Error::Argument(format!("resolvent needs lambda > 0, got {lambda}")));
        }
        if !x.is_finite() {
            return Err(Error::numeric(MODULE, format!("resolvent of non-finite value {x}")));
        }
        // y + λβ(y) = x with y = tanh s  ⇔  g(s) = b tanh s + a s - x = 0,
        // a = λθ, b = 1 - λθ; g' = b sech² s + a ≥ min(1, a) > 0.
        let a = lambda * self.theta;
        let b = 1.0 - a;
        let g = |s: f64| b * s.tanh() + a * s - x;
        let pad = |v: f64| 1e-12 * (1.0 + v.abs());
        let mut lo = (x - b.abs()) / a;
        let mut hi = (x + b.abs()) / a;
        lo -= pad(lo);
        hi += pad(hi);
        let mut s = match guess {
            Some(s) if s > lo && s < hi => s,
            _ => {
                let s0 = if x.abs() < 1.0 { x.atanh() } else { (x - x.signum() * b) / a };
                if s0 > lo && s0 < hi {
                    s0
                } else {
                    0.5 * (lo + hi)
                }
            }
        };
        let tol = 1e-14 * (1.0 + x.abs());
        for _ in 0..300 {
            let gs = g(s);
            if gs.abs() <= tol {
                return Ok(ResolventPoint::new(s, gs));
            }
            if gs > 0.0 {
                hi = s;
            } else {
                lo = s;
            }
            let c = s.cosh();
            let dg = b / (c * c) + a;
            let mut next = s - gs / dg;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (hi - lo) <= 4.0 * f64::EPSILON * (1.0 + s.abs()) || next == s {
                let gn = g(next);
                return Ok(ResolventPoint::new(next, gn));
            }
            s = next;
        }
        Err(Error::numeric(
            MODULE,
            format!("resolvent did not converge for lambda={lambda}, x={x}"),
        ))
    }

    /// Yosida approximation `β_λ(x) = β(J_λ(x))`.
    pub fn yosida(&self, lambda: f64, x: f64) -> Result<f64> {
        Ok(self.beta_of_artanh(self.resolvent(lambda, x)?.artanh))
    }

    /// `β_λ'(x) = β'(J)/(1 + λ β'(J))` with `β'(tanh s) = θ sinh² s`.
    pub fn yosida_derivative(&self, lambda: f64, x: f64) -> Result<f64> {
        let s = self.resolvent(lambda, x)?.artanh;
        Ok(yosida_slope(self.theta, lambda, s))
    }
}

fn yosida_slope(theta: f64, lambda: f64, s: f64) -> f64 {
    let sh = s.sinh();
    let bp = theta * sh * sh;
    if bp == 0.0 {
        0.0
    } else {
        1.0 / (lambda + 1.0 / bp)
    }
}

fn s_minus_tanh(s: f64) -> f64 {
    if s.abs() < 0.1 {
        let s2 = s * s;
        // s - tanh s = s³/3 - 2s⁵/15 + 17s⁷/315 - 62s⁹/2835 + ...
        s * s2 * (1.0 / 3.0 - s2 * (2.0 / 15.0 - s2 * (17.0 / 315.0 - s2 * 62.0 / 2835.0)))
    } else {
        s - s.tanh()
    }
}

/// Solution of the resolvent equation, stored in the artanh coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolventPoint {
    /// `s = artanh(J_λ(x))`, always finite.
    pub artanh: f64,
    /// `tanh(s)`; may round to `±1` when the exact value is within `1e-16` of a barrier.
    pub value: f64,
    /// `J + λβ(J) - x` evaluated in the artanh coordinate.
    pub residual: f64,
}

impl ResolventPoint {
    fn new(artanh: f64, residual: f64) -> Self {
        Self {
            artanh,
            value: artanh.tanh(),
            residual,
        }
    }

    /// `ln(1 - |J|)`; finite and negative iff `|J| < 1` strictly.
    pub fn log_gap(&self) -> f64 {
        let a = self.artanh.abs();
        std::f64::consts::LN_2 - 2.0 * a - (-2.0 * a).exp().ln_1p()
    }
}

/// Smooth unit-mass bump `ρ(t) ∝ exp(-1/(1-t²))` on `(-1, 1)`, discretised
/// with a Gauss-Legendre rule for convolutions.
#[derive(Debug, Clone)]
pub struct Mollifier {
    nodes: Vec<f64>,
    /// `w_i ρ(t_i)`, normalised to unit discrete mass.
    w0: Vec<f64>,
    /// `w_i ρ'(t_i)` with the same normalisation.
    w1: Vec<f64>,
    /// `w_i ρ''(t_i)`.
    w2: Vec<f64>,
    /// Normalising constant `∫ exp(-1/(1-t²)) dt`.
    pub normalizer: f64,
    /// `‖ρ'‖_{L¹} = 2 ρ(0)` (the bump is unimodal).
    pub c_rho: f64,
}

fn bump(t: f64) -> f64 {
    if t.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / ((1.0 - t) * (1.0 + t))).exp()
    }
}

impl Mollifier {
    pub fn standard(points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::Argument("mollifier quadrature needs >= 2 points".into()));
        }
        let fine = gauss_legendre(1000);
        let normalizer = fine.integrate(bump);
        let rule = gauss_legendre(points);
        let mut w0 = Vec::with_capacity(points);
        let mut w1 = Vec::with_capacity(points);
        let mut w2 = Vec::with_capacity(points);
        for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
            let q = (1.0 - t) * (1.0 + t);
            let p = bump(t);
            let d1 = -2.0 * t / (q * q);
            let d2 = 4.0 * t * t / q.powi(4) - 2.0 / (q * q) - 8.0 * t * t / q.powi(3);
            w0.push(w * p);
            w1.push(w * p * d1);
            w2.push(w * p * d2);
        }
        let mass: f64 = w0.iter().sum();
        for v in w0.iter_mut().chain(w1.iter_mut()).chain(w2.iter_mut()) {
            *v /= mass;
        }
        // odd kernel: enforce exact cancellation of symmetric pairs
        let n = points;
        for i in 0..n / 2 {
            let a = 0.5 * (w1[i] - w1[n - 1 - i]);
            w1[i] = a;
            w1[n - 1 - i] = -a;
        }
        if n % 2 == 1 {
            w1[n / 2] = 0.0;
        }
        Ok(Self {
            nodes: rule.nodes,
            w0,
            w1,
            w2,
            normalizer,
            c_rho: 2.0 * (-1.0f64).exp() / normalizer,
        })
    }

    pub fn points(&self) -> usize {
        self.nodes.len()
    }

    /// Profile value `ρ(t)`.
    pub fn profile(&self, t: f64) -> f64 {
        bump(t) / self.normalizer
    }

    /// Discrete mass of the kernel (1 up to rounding).
    pub fn discrete_mass(&self) -> f64 {
        self.w0.iter().sum()
    }

    /// `(ρ_ε ⋆ f)(x) - f(x)` evaluated from increments of `f`.
    pub fn smooth_gap<F: FnMut(f64) -> f64>(&self, eps: f64, x: f64, mut f: F) -> f64 {
        let fx = f(x);
        self.nodes
            .iter()
            .zip(&self.w0)
            .map(|(&t, &w)| w * (f(x - eps * t) - fx))
            .sum()
    }

    /// `(ρ_ε ⋆ f)(x) - f(x)` from a caller-supplied increment
    /// `inc(d) = f(x - d) - f(x)`, for functions whose increments can be
    /// computed without cancellation.
    pub fn smooth_increment<F: FnMut(f64) -> f64>(&self, eps: f64, mut inc: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.w0)
            .map(|(&t, &w)| w * inc(eps * t))
            .sum()
    }

    /// `(ρ_ε' ⋆ f)(x)`.
    pub fn smooth_d1<F: FnMut(f64) -> f64>(&self, eps: f64, x: f64, mut f: F) -> f64 {
        let fx = f(x);
        let acc: f64 = self
            .nodes
            .iter()
            .zip(&self.w1)
            .map(|(&t, &w)| w * (f(x - eps * t) - fx))
            .sum();
        acc / eps
    }

    /// `(ρ_ε'' ⋆ f)(x)`.
    pub fn smooth_d2<F: FnMut(f64) -> f64>(&self, eps: f64, x: f64, mut f: F) -> f64 {
        let fx = f(x);
        let acc: f64 = self
            .nodes
            .iter()
            .zip(&self.w2)
            .map(|(&t, &w)| w * (f(x - eps * t) - fx))
            .sum();
        acc / (eps * eps)
    }
}

/// λ-regularisation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizationParams {
    pub lambda: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_quadrature_points")]
    pub quadrature_points: usize,
}

fn default_gamma() -> f64 {
    4.0
}

fn default_quadrature_points() -> usize {
    64
}

impl RegularizationParams {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            gamma: default_gamma(),
            quadrature_points: default_quadrature_points(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Argument(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Argument(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.quadrature_points < 2 {
            return Err(Error::Argument("quadrature_points must be >= 2".into()));
        }
        Ok(())
    }
}

/// The mollified drift `F_λ'(x) = (ρ_{λ²} ⋆ β_λ)(x) - K x` and its derivatives.
#[derive(Debug, Clone)]
pub struct RegularizedPotential {
    pub spec: PotentialSpec,
    pub mollifier: Mollifier,
    pub params: RegularizationParams,
}

impl RegularizedPotential {
    pub fn new(spec: PotentialSpec, params: RegularizationParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            spec,
            mollifier: Mollifier::standard(params.quadrature_points)?,
            params,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.params.lambda
    }

    fn eps(&self) -> f64 {
        self.params.lambda * self.params.lambda
    }

    /// Runs `body` with a warm-started `β_λ` evaluator centred at `x`.
    fn with_yosida<T>(&self, x: f64, body: impl FnOnce(&mut dyn FnMut(f64) -> f64) -> T) -> Result<T> {
        let lambda = self.params.lambda;
        let centre = self.spec.resolvent(lambda, x)?.artanh;
        let mut failure: Option<Error> = None;
        let mut yosida = |y: f64| match self.spec.resolvent_from(lambda, y, Some(centre)) {
            Ok(p) => self.spec.beta_of_artanh(p.artanh),
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        };
        let out = body(&mut yosida);
        match failure {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    fn finite(&self, v: f64, what: &str, x: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::numeric(MODULE, format!("{what} quadrature produced {v} at x={x}")))
        }
    }

    /// `F_λ'(x)`.
    pub fn drift(&self, x: f64) -> Result<f64> {
        let eps = self.eps();
        let k = self.spec.k;
        let v = self.with_yosida(x, |b| {
            let bx = b(x);
            bx + self.mollifier.smooth_gap(eps, x, |y| b(y))
        })?;
        self.finite(v - k * x, "F_lambda'", x)
    }

    /// `F_λ''(x) = (ρ_{λ²})' ⋆ β_λ - K`.
    pub fn drift_second(&self, x: f64) -> Result<f64> {
        let eps = self.eps();
        let v = self.with_yosida(x, |b| self.mollifier.smooth_d1(eps, x, |y| b(y)))?;
        self.finite(v - self.spec.k, "F_lambda''", x)
    }

    /// `F_λ'''(x) = (ρ_{λ²})'' ⋆ β_λ`.
    pub fn drift_third(&self, x: f64) -> Result<f64> {
        let eps = self.eps();
        let v = self.with_yosida(x, |b| self.mollifier.smooth_d2(eps, x, |y| b(y)))?;
        self.finite(v, "F_lambda'''", x)
    }

    /// `K + 1/λ`, the uniform bound on `|F_λ''|`.
    pub fn second_bound(&self) -> f64 {
        self.spec.k + 1.0 / self.params.lambda
    }

    /// `c_ρ/λ³`, the uniform bound on `|F_λ'''|`.
    pub fn third_bound(&self) -> f64 {
        self.mollifier.c_rho / self.params.lambda.powi(3)
    }
}
