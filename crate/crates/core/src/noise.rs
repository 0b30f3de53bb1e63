//! Degenerate multiplicative noise `B(u) e_k = h_k(u)` with
//! `h_k(r) = c_k (1 - r²)^p`, vanishing together with its derivative at the
//! barriers `±1`, and its mollified extension `h_{k,λ} = ρ_{λ^γ} ⋆ h̃_k`.

use serde::{Deserialize, Serialize};

use crate::potential::{Mollifier, PotentialSpec};
use crate::quadrature::grid_sup;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Truncation of the cylindrical expansion.
    #[serde(default = "default_modes")]
    pub num_modes: usize,
    /// Amplitude law `c_k = scale · k^{-decay}`.
    #[serde(default = "default_scale")]
    pub amplitude_scale: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    /// Shape exponent `p` in `(1 - r²)^p`, at least 2.
    #[serde(default = "default_exponent")]
    pub exponent: u32,
}

fn default_modes() -> usize {
    8
}
fn default_scale() -> f64 {
    1.0
}
fn default_decay() -> f64 {
    2.0
}
fn default_exponent() -> u32 {
    2
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            num_modes: default_modes(),
            amplitude_scale: default_scale(),
            decay: default_decay(),
            exponent: default_exponent(),
        }
    }
}

/// Grid used for the numerical suprema behind `C_B` and `C_B'`.
const CONSTANT_GRID: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseFamily {
    pub config: NoiseConfig,
    /// `c_k`, `k = 1..=num_modes`.
    pub amplitudes: Vec<f64>,
    /// `Σ_k (‖h_k‖²_{C¹} + ‖h_k² F''‖_∞)` with `‖h‖_{C¹} = sup|h| + sup|h'|`.
    pub c_b: f64,
    /// `Σ_k ‖h_k''‖²_∞`.
    pub c_b_prime: f64,
    /// `sup_r |P'(r)|` of the shape `P(r) = (1-r²)^p`.
    pub shape_lipschitz: f64,
}

impl NoiseFamily {
    pub fn new(config: NoiseConfig, potential: &PotentialSpec) -> Result<Self> {
        if config.num_modes == 0 {
            return Err(Error::config("noise.num_modes", "must be at least 1"));
        }
        if config.exponent < 2 {
            return Err(Error::config(
                "noise.exponent",
                "must be >= 2 so that h_k and h_k' vanish at the barriers",
            ));
        }
        if !(config.amplitude_scale >= 0.0) || !config.amplitude_scale.is_finite() {
            return Err(Error::config("noise.amplitude_scale", "must be a finite number >= 0"));
        }
        if !config.decay.is_finite() {
            return Err(Error::config("noise.decay", "must be finite"));
        }
        let amplitudes: Vec<f64> = (1..=config.num_modes)
            .map(|k| config.amplitude_scale * (k as f64).powf(-config.decay))
            .collect();
        let p = config.exponent as i32;
        let sum_sq: f64 = amplitudes.iter().map(|c| c * c).sum();
        let d1 = grid_sup(|r| shape_d1(p, r).abs(), -1.0, 1.0, CONSTANT_GRID);
        let (theta, theta0) = (potential.theta, potential.theta0);
        // h² F'' = c² (θ q^{2p-1} - θ₀ q^{2p}), q = 1 - r², bounded at the barriers
        let h2f = grid_sup(
            |r| {
                let q = (1.0 - r) * (1.0 + r);
                (theta * q.powi(2 * p - 1) - theta0 * q.powi(2 * p)).abs()
            },
            -1.0,
            1.0,
            CONSTANT_GRID,
        );
        let d2 = grid_sup(|r| shape_d2(p, r).abs(), -1.0, 1.0, CONSTANT_GRID);
        let c1_norm = 1.0 + d1;
        Ok(Self {
            config,
            amplitudes,
            c_b: sum_sq * (c1_norm * c1_norm + h2f),
            c_b_prime: sum_sq * d2 * d2,
            shape_lipschitz: d1,
        })
    }

    pub fn num_modes(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn exponent(&self) -> i32 {
        self.config.exponent as i32
    }

    /// `Σ_k c_k²`.
    pub fn amplitude_sum_sq(&self) -> f64 {
        self.amplitudes.iter().map(|c| c * c).sum()
    }

    /// Extended shape `P̃(r)`: `(1-r²)^p` on `[-1, 1]`, zero outside.
    #[inline]
    pub fn shape(&self, r: f64) -> f64 {
        shape(self.exponent(), r)
    }

    #[inline]
    pub fn shape_d1(&self, r: f64) -> f64 {
        shape_d1(self.exponent(), r)
    }

    #[inline]
    pub fn shape_d2(&self, r: f64) -> f64 {
        shape_d2(self.exponent(), r)
    }

    fn check_mode(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.num_modes() {
            Err(Error::Argument(format!(
                "noise mode {k} outside 1..={}",
                self.num_modes()
            )))
        } else {
            Ok(())
        }
    }

    /// `h̃_k(r)` (1-based `k`).
    pub fn eval_h(&self, k: usize, r: f64) -> Result<f64> {
        self.check_mode(k)?;
        Ok(self.amplitudes[k - 1] * self.shape(r))
    }

    /// `Σ_k c_k dW_k`: all modes share one shape, so the increment is a
    /// scalar multiple of `P̃(u)`.
    pub fn combined_increment(&self, dw: &[f64]) -> Result<f64> {
        if dw.len() != self.num_modes() {
            return Err(Error::Argument(format!(
                "noise increment has {} entries, family has {} modes",
                dw.len(),
                self.num_modes()
            )));
        }
        Ok(self.amplitudes.iter().zip(dw).map(|(c, w)| c * w).sum())
    }

    /// `B(u) dW = Σ_k h̃_k(u(·)) dW_k`, pointwise on the grid.
    pub fn diffusion_apply(&self, u: &[f64], dw: &[f64]) -> Result<Vec<f64>> {
        let a = self.combined_increment(dw)?;
        Ok(u.iter().map(|&v| a * self.shape(v)).collect())
    }

    /// `‖B(u)‖²_{L_HS(U,H)} = Σ_k ‖h̃_k(u)‖²_H` with uniform cell volume.
    pub fn hs_norm_sq(&self, u: &[f64], cell_volume: f64) -> f64 {
        let field: f64 = u.iter().map(|&v| self.shape(v).powi(2)).sum();
        self.amplitude_sum_sq() * field * cell_volume
    }
}

#[inline]
fn shape(p: i32, r: f64) -> f64 {
    if r.abs() > 1.0 {
        0.0
    } else {
        ((1.0 - r) * (1.0 + r)).powi(p)
    }
}

#[inline]
fn shape_d1(p: i32, r: f64) -> f64 {
    if r.abs() > 1.0 {
        0.0
    } else {
        let q = (1.0 - r) * (1.0 + r);
        -2.0 * p as f64 * r * q.powi(p - 1)
    }
}

#[inline]
fn shape_d2(p: i32, r: f64) -> f64 {
    if r.abs() > 1.0 {
        0.0
    } else {
        let q = (1.0 - r) * (1.0 + r);
        let pf = p as f64;
        -2.0 * pf * q.powi(p - 1) + 4.0 * pf * (pf - 1.0) * r * r * q.powi(p - 2)
    }
}

/// `P̃(r - d) - P̃(r)` without cancellation when both points lie in `[-1, 1]`.
#[inline]
fn shape_increment(p: i32, r: f64, d: f64) -> f64 {
    let s = r - d;
    if r.abs() <= 1.0 && s.abs() <= 1.0 {
        let a = (1.0 - r) * (1.0 + r);
        let diff = d * (2.0 * r - d); // b - a
        let b = a + diff;
        // b^p - a^p = (b - a) Σ_j b^j a^{p-1-j}
        let mut acc = 0.0;
        for j in 0..p {
            acc += b.powi(j) * a.powi(p - 1 - j);
        }
        diff * acc
    } else {
        shape(p, s) - shape(p, r)
    }
}

/// `h_{k,λ} = ρ_{λ^γ} ⋆ h̃_k`, well defined on all of ℝ.
#[derive(Debug, Clone)]
pub struct MollifiedNoise {
    pub family: NoiseFamily,
    pub mollifier: Mollifier,
    pub lambda: f64,
    pub gamma: f64,
    eps: f64,
}

impl MollifiedNoise {
    pub fn new(family: NoiseFamily, mollifier: Mollifier, lambda: f64, gamma: f64) -> Result<Self> {
        if !(lambda > 0.0) || !(gamma > 0.0) {
            return Err(Error::Argument(format!(
                "mollified noise needs lambda > 0 and gamma > 0, got {lambda}, {gamma}"
            )));
        }
        Ok(Self {
            family,
            mollifier,
            lambda,
            gamma,
            eps: lambda.powf(gamma),
        })
    }

    /// Mollification radius `λ^γ`.
    pub fn radius(&self) -> f64 {
        self.eps
    }

    /// `(ρ_ε ⋆ P̃)(r) - P̃(r)`.
    pub fn shape_gap(&self, r: f64) -> f64 {
        let p = self.family.exponent();
        self.mollifier.smooth_increment(self.eps, |d| shape_increment(p, r, d))
    }

    pub fn shape(&self, r: f64) -> f64 {
        self.family.shape(r) + self.shape_gap(r)
    }

    pub fn shape_d1(&self, r: f64) -> f64 {
        let p = self.family.exponent();
        shape_d1(p, r) + self.mollifier.smooth_gap(self.eps, r, |y| shape_d1(p, y))
    }

    pub fn shape_d2(&self, r: f64) -> f64 {
        let p = self.family.exponent();
        shape_d2(p, r) + self.mollifier.smooth_gap(self.eps, r, |y| shape_d2(p, y))
    }

    /// `h_{k,λ}(r)` (1-based `k`).
    pub fn eval_h(&self, k: usize, r: f64) -> Result<f64> {
        self.family.check_mode(k)?;
        let v = self.family.amplitudes[k - 1] * self.shape(r);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::numeric("noise_family", format!("mollified h_{k} at {r} is {v}")))
        }
    }

    pub fn eval_h_d1(&self, k: usize, r: f64) -> Result<f64> {
        self.family.check_mode(k)?;
        Ok(self.family.amplitudes[k - 1] * self.shape_d1(r))
    }

    pub fn eval_h_d2(&self, k: usize, r: f64) -> Result<f64> {
        self.family.check_mode(k)?;
        Ok(self.family.amplitudes[k - 1] * self.shape_d2(r))
    }

    /// `B_λ(u) dW`, defined for arbitrary real field values.
    pub fn diffusion_apply(&self, u: &[f64], dw: &[f64]) -> Result<Vec<f64>> {
        let a = self.family.combined_increment(dw)?;
        Ok(u.iter().map(|&v| a * self.shape(v)).collect())
    }

    /// `Σ_k sup_r |h_{k,λ}(r) - h̃_k(r)|²`, the sup taken over a grid of
    /// the support refined near the barriers where the kink of `h̃_k''` sits.
    pub fn sup_gap_sq(&self) -> f64 {
        let e = self.eps;
        let f = |r: f64| self.shape_gap(r).abs();
        let mut s = grid_sup(f, -1.0 - e, 1.0 + e, 4001);
        for &c in &[-1.0, 1.0] {
            s = s.max(grid_sup(f, c - 40.0 * e, c + 2.0 * e, 2001));
        }
        self.family.amplitude_sum_sq() * s * s
    }

    /// `Σ_k ‖h_{k,λ}‖²_{C²}` with `‖h‖²_{C²} = ‖h‖²_{C¹} + sup|h''|²`
    /// (the convention under which `C_B + C_B'` dominates it), sampled on a
    /// grid covering the support.
    pub fn c2_norm_sq_sum(&self, points: usize) -> f64 {
        let e = self.eps;
        let (lo, hi) = (-1.0 - e, 1.0 + e);
        let mut m0: f64 = 0.0;
        let mut m1: f64 = 0.0;
        let mut m2: f64 = 0.0;
        for i in 0..points {
            let r = lo + (hi - lo) * i as f64 / (points - 1) as f64;
            m0 = m0.max(self.shape(r).abs());
            m1 = m1.max(self.shape_d1(r).abs());
            m2 = m2.max(self.shape_d2(r).abs());
        }
        self.family.amplitude_sum_sq() * ((m0 + m1).powi(2) + m2 * m2)
    }
}
