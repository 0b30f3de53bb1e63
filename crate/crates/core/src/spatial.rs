//! Rectangular domains in one or two dimensions, represented in the
//! eigenbasis of the Laplacian (sine modes for Dirichlet, cosine modes for
//! Neumann conditions).
//!
//! Fields are stored as nodal values on the grid (row-major in 2D). The
//! discrete transforms are exactly orthonormal for the weighted grid inner
//! product, so Parseval holds to rounding and `C = I − Δ`, its semigroup and
//! the covariances `Q_t` are all diagonal.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryCondition {
    Dirichlet,
    Neumann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialConfig {
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    /// Nodes per axis.
    pub grid: Vec<usize>,
    /// Side lengths; unit interval/square when omitted.
    #[serde(default)]
    pub lengths: Option<Vec<f64>>,
    pub bc: BoundaryCondition,
}

fn default_dimension() -> usize {
    1
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            dimension: 1,
            grid: vec![128],
            lengths: None,
            bc: BoundaryCondition::Dirichlet,
        }
    }
}

impl SpatialConfig {
    pub fn one_d(n: usize, bc: BoundaryCondition) -> Self {
        Self {
            dimension: 1,
            grid: vec![n],
            lengths: None,
            bc,
        }
    }

    pub fn two_d(n1: usize, n2: usize, bc: BoundaryCondition) -> Self {
        Self {
            dimension: 2,
            grid: vec![n1, n2],
            lengths: None,
            bc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension != 1 && self.dimension != 2 {
            return Err(Error::config(
                "spatial.dimension",
                format!("unsupported dimension {} (expected 1 or 2)", self.dimension),
            ));
        }
        if self.grid.len() != self.dimension {
            return Err(Error::config(
                "spatial.grid",
                format!("{} sizes given for dimension {}", self.grid.len(), self.dimension),
            ));
        }
        if let Some(&n) = self.grid.iter().find(|&&n| n < 4) {
            return Err(Error::config("spatial.grid", format!("grid size {n} < 4")));
        }
        if let Some(l) = &self.lengths {
            if l.len() != self.dimension {
                return Err(Error::config(
                    "spatial.lengths",
                    format!("{} lengths given for dimension {}", l.len(), self.dimension),
                ));
            }
            if l.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::config("spatial.lengths", "lengths must be positive"));
            }
        }
        Ok(())
    }
}

/// Header written in front of serialized fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub dimension: usize,
    pub grid: Vec<usize>,
    pub lengths: Vec<f64>,
    pub bc: BoundaryCondition,
}

/// One axis of the tensor grid.
#[derive(Debug, Clone)]
struct Axis {
    n: usize,
    nodes: Vec<f64>,
    weight: f64,
    mu: Vec<f64>,
    // phi[j * n + i] = φ_j(x_i)
    phi: Vec<f64>,
}

impl Axis {
    fn new(n: usize, len: f64, bc: BoundaryCondition) -> Self {
        let (nodes, weight): (Vec<f64>, f64) = match bc {
            BoundaryCondition::Dirichlet => (
                (1..=n).map(|i| len * i as f64 / (n + 1) as f64).collect(),
                len / (n + 1) as f64,
            ),
            BoundaryCondition::Neumann => (
                (0..n).map(|i| len * (i as f64 + 0.5) / n as f64).collect(),
                len / n as f64,
            ),
        };
        let mut mu = Vec::with_capacity(n);
        let mut phi = Vec::with_capacity(n * n);
        let amp = (2.0 / len).sqrt();
        for j in 0..n {
            let k = match bc {
                BoundaryCondition::Dirichlet => (j + 1) as f64,
                BoundaryCondition::Neumann => j as f64,
            };
            let w = k * PI / len;
            mu.push(w * w);
            for &x in &nodes {
                phi.push(match bc {
                    BoundaryCondition::Dirichlet => amp * (w * x).sin(),
                    BoundaryCondition::Neumann if j == 0 => 1.0 / len.sqrt(),
                    BoundaryCondition::Neumann => amp * (w * x).cos(),
                });
            }
        }
        Self {
            n,
            nodes,
            weight,
            mu,
            phi,
        }
    }

    fn forward(&self, u: &[f64], a: &mut [f64]) {
        let n = self.n;
        for (j, aj) in a.iter_mut().enumerate() {
            let row = &self.phi[j * n..(j + 1) * n];
            *aj = self.weight * row.iter().zip(u).map(|(p, v)| p * v).sum::<f64>();
        }
    }

    fn inverse(&self, a: &[f64], u: &mut [f64]) {
        let n = self.n;
        u.iter_mut().for_each(|v| *v = 0.0);
        for (j, &aj) in a.iter().enumerate() {
            if aj == 0.0 {
                continue;
            }
            let row = &self.phi[j * n..(j + 1) * n];
            for (v, p) in u.iter_mut().zip(row) {
                *v += aj * p;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpatialModel {
    pub config: SpatialConfig,
    lengths: Vec<f64>,
    axes: Vec<Axis>,
    /// Eigenvalues of −Δ in coefficient (tensor) order.
    mu: Vec<f64>,
    cell_volume: f64,
    k0: f64,
}

impl SpatialModel {
    pub fn build(config: SpatialConfig) -> Result<Self> {
        config.validate()?;
        let lengths = config
            .lengths
            .clone()
            .unwrap_or_else(|| vec![1.0; config.dimension]);
        let axes: Vec<Axis> = config
            .grid
            .iter()
            .zip(&lengths)
            .map(|(&n, &l)| Axis::new(n, l, config.bc))
            .collect();
        let mu: Vec<f64> = if axes.len() == 1 {
            axes[0].mu.clone()
        } else {
            let (a, b) = (&axes[0], &axes[1]);
            a.mu.iter()
                .flat_map(|m1| b.mu.iter().map(move |m2| m1 + m2))
                .collect()
        };
        let cell_volume = axes.iter().map(|a| a.weight).product();
        let mu_min = mu.iter().copied().fold(f64::INFINITY, f64::min);
        let k0 = (1.0 + mu_min).powf(-0.5);
        Ok(Self {
            config,
            lengths,
            axes,
            mu,
            cell_volume,
            k0,
        })
    }

    pub fn dimension(&self) -> usize {
        self.axes.len()
    }

    pub fn bc(&self) -> BoundaryCondition {
        self.config.bc
    }

    /// Number of grid nodes (= number of modes).
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn grid(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.n).collect()
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    /// `|D|`.
    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    /// Quadrature weight of one grid node.
    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    /// Norm of the embedding `V ↪ H`, `(1 + μ_min)^{-1/2}`.
    pub fn k0(&self) -> f64 {
        self.k0
    }

    /// Eigenvalues of `−Δ` in coefficient order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.mu
    }

    pub fn sorted_eigenvalues(&self) -> Vec<f64> {
        let mut m = self.mu.clone();
        m.sort_by(f64::total_cmp);
        m
    }

    /// Eigenvalues `1 + μ_j` of `C`.
    pub fn c_eigenvalues(&self) -> Vec<f64> {
        self.mu.iter().map(|m| 1.0 + m).collect()
    }

    /// Grid nodes as coordinate tuples (1 or 2 entries), row-major.
    pub fn nodes(&self) -> Vec<Vec<f64>> {
        match self.axes.as_slice() {
            [a] => a.nodes.iter().map(|&x| vec![x]).collect(),
            [a, b] => a
                .nodes
                .iter()
                .flat_map(|&x| b.nodes.iter().map(move |&y| vec![x, y]))
                .collect(),
            _ => unreachable!("dimension checked at build"),
        }
    }

    pub fn header(&self) -> FieldHeader {
        FieldHeader {
            dimension: self.dimension(),
            grid: self.grid(),
            lengths: self.lengths.clone(),
            bc: self.bc(),
        }
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.len() {
            return Err(Error::Argument(format!(
                "field has {} values, grid has {}",
                x.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// Nodal values → mode coefficients.
    pub fn forward(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_len(u)?;
        let mut a = vec![0.0; self.len()];
        self.forward_into(u, &mut a);
        Ok(a)
    }

    /// Mode coefficients → nodal values.
    pub fn inverse(&self, a: &[f64]) -> Result<Vec<f64>> {
        self.check_len(a)?;
        let mut u = vec![0.0; self.len()];
        self.inverse_into(a, &mut u);
        Ok(u)
    }

    /// Unchecked forward transform into a caller buffer of length `len()`.
    pub fn forward_into(&self, u: &[f64], a: &mut [f64]) {
        match self.axes.as_slice() {
            [ax] => ax.forward(u, a),
            [ax, ay] => {
                let (n1, n2) = (ax.n, ay.n);
                let mut tmp = vec![0.0; n1 * n2];
                for i in 0..n1 {
                    ay.forward(&u[i * n2..(i + 1) * n2], &mut tmp[i * n2..(i + 1) * n2]);
                }
                let mut col = vec![0.0; n1];
                let mut out = vec![0.0; n1];
                for j2 in 0..n2 {
                    for i in 0..n1 {
                        col[i] = tmp[i * n2 + j2];
                    }
                    ax.forward(&col, &mut out);
                    for j1 in 0..n1 {
                        a[j1 * n2 + j2] = out[j1];
                    }
                }
            }
            _ => unreachable!("dimension checked at build"),
        }
    }

    /// Unchecked inverse transform into a caller buffer of length `len()`.
    pub fn inverse_into(&self, a: &[f64], u: &mut [f64]) {
        match self.axes.as_slice() {
            [ax] => ax.inverse(a, u),
            [ax, ay] => {
                let (n1, n2) = (ax.n, ay.n);
                let mut tmp = vec![0.0; n1 * n2];
                let mut col = vec![0.0; n1];
                let mut out = vec![0.0; n1];
                for j2 in 0..n2 {
                    for j1 in 0..n1 {
                        col[j1] = a[j1 * n2 + j2];
                    }
                    ax.inverse(&col, &mut out);
                    for i in 0..n1 {
                        tmp[i * n2 + j2] = out[i];
                    }
                }
                for i in 0..n1 {
                    ay.inverse(&tmp[i * n2..(i + 1) * n2], &mut u[i * n2..(i + 1) * n2]);
                }
            }
            _ => unreachable!("dimension checked at build"),
        }
    }

    /// Values of mode `j` (coefficient order) at the grid nodes.
    pub fn eigenfunction(&self, j: usize) -> Result<Vec<f64>> {
        if j >= self.len() {
            return Err(Error::Argument(format!("mode {j} out of range")));
        }
        let mut a = vec![0.0; self.len()];
        a[j] = 1.0;
        self.inverse(&a)
    }

    /// Apply a spectral multiplier `m(μ_j)` to a field.
    pub fn apply_multiplier<M: Fn(f64) -> f64>(&self, x: &[f64], m: M) -> Result<Vec<f64>> {
        let mut a = self.forward(x)?;
        for (aj, &mu) in a.iter_mut().zip(&self.mu) {
            *aj *= m(mu);
        }
        self.inverse(&a)
    }

    /// `e^{−tC} x`.
    pub fn heat_semigroup(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        if !(t >= 0.0) {
            return Err(Error::Argument(format!("heat semigroup at t = {t} < 0")));
        }
        self.apply_multiplier(x, |mu| (-(1.0 + mu) * t).exp())
    }

    /// `Δx` (with the model's boundary conditions).
    pub fn laplacian(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply_multiplier(x, |mu| -mu)
    }

    /// Weighted grid inner product `(x, y)_H`.
    pub fn inner(&self, x: &[f64], y: &[f64]) -> f64 {
        self.cell_volume * x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn h_norm_sq(&self, x: &[f64]) -> f64 {
        self.inner(x, x)
    }

    /// `(‖x‖_H, ‖x‖_V, ‖x‖_Z)` by spectral Parseval sums.
    pub fn norms(&self, x: &[f64]) -> Result<Norms> {
        let a = self.forward(x)?;
        Ok(self.norms_of_coefficients(&a))
    }

    pub fn norms_of_coefficients(&self, a: &[f64]) -> Norms {
        let (mut h, mut v, mut z, mut g) = (0.0, 0.0, 0.0, 0.0);
        for (aj, mu) in a.iter().zip(&self.mu) {
            let a2 = aj * aj;
            let c = 1.0 + mu;
            h += a2;
            v += c * a2;
            z += c * c * a2;
            g += mu * a2;
        }
        Norms {
            h: h.sqrt(),
            v: v.sqrt(),
            z: z.sqrt(),
            grad_sq: g,
        }
    }

    /// `Q_t` for this model.
    pub fn covariance(&self, t: f64) -> Result<GaussianCovariance> {
        GaussianCovariance::new(self, t)
    }

    /// Draw `y ~ N(0, Q_t)`.
    pub fn sample_gaussian<R: Rng + ?Sized>(&self, cov: &GaussianCovariance, rng: &mut R) -> Result<Vec<f64>> {
        if cov.q.len() != self.len() {
            return Err(Error::Argument("covariance built for a different model".into()));
        }
        let a: Vec<f64> = cov.q.iter().map(|q| q.sqrt() * rng::normal(rng)).collect();
        self.inverse(&a)
    }

    /// Pointwise variances `Σ_j q_j φ_j(x_i)²` of `N(0, Q_t)`.
    pub fn pointwise_variance(&self, cov: &GaussianCovariance) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        match self.axes.as_slice() {
            [ax] => {
                for (j, q) in cov.q.iter().enumerate() {
                    for (o, p) in out.iter_mut().zip(&ax.phi[j * ax.n..(j + 1) * ax.n]) {
                        *o += q * p * p;
                    }
                }
            }
            [ax, ay] => {
                let (n1, n2) = (ax.n, ay.n);
                for j1 in 0..n1 {
                    for j2 in 0..n2 {
                        let q = cov.q[j1 * n2 + j2];
                        for i1 in 0..n1 {
                            let p1 = ax.phi[j1 * n1 + i1];
                            for i2 in 0..n2 {
                                let p2 = ay.phi[j2 * n2 + i2];
                                out[i1 * n2 + i2] += q * (p1 * p2).powi(2);
                            }
                        }
                    }
                }
            }
            _ => unreachable!("dimension checked at build"),
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub h: f64,
    pub v: f64,
    pub z: f64,
    /// `‖∇x‖²_H = Σ μ_j a_j²`.
    pub grad_sq: f64,
}

/// `Q_t = ½ C^{-3}(I − e^{−2tC})` in the eigenbasis.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCovariance {
    pub t: f64,
    pub q: Vec<f64>,
}

impl GaussianCovariance {
    pub fn new(model: &SpatialModel, t: f64) -> Result<Self> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::Argument(format!("covariance time {t}")));
        }
        let q = model
            .mu
            .iter()
            .map(|mu| {
                let c = 1.0 + mu;
                -(-2.0 * c * t).exp_m1() / (2.0 * c * c * c)
            })
            .collect();
        Ok(Self { t, q })
    }

    pub fn trace(&self) -> f64 {
        self.q.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir(n: usize) -> SpatialModel {
        SpatialModel::build(SpatialConfig::one_d(n, BoundaryCondition::Dirichlet)).unwrap()
    }

    fn neu(n: usize) -> SpatialModel {
        SpatialModel::build(SpatialConfig::one_d(n, BoundaryCondition::Neumann)).unwrap()
    }

    fn gram_error(m: &SpatialModel) -> f64 {
        let fs: Vec<Vec<f64>> = (0..m.len()).map(|j| m.eigenfunction(j).unwrap()).collect();
        let mut worst: f64 = 0.0;
        for i in 0..fs.len() {
            for j in 0..fs.len() {
                let g = m.inner(&fs[i], &fs[j]);
                let e = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - e).abs());
            }
        }
        worst
    }

    #[test]
    fn eigenfunctions_are_orthonormal() {
        assert!(gram_error(&dir(16)) < 1e-10);
        assert!(gram_error(&neu(16)) < 1e-10);
        let m2 = SpatialModel::build(SpatialConfig::two_d(5, 6, BoundaryCondition::Neumann)).unwrap();
        assert!(gram_error(&m2) < 1e-10);
    }

    #[test]
    fn dirichlet_eigenvalues_and_k0() {
        let m = dir(64);
        for (j, mu) in m.eigenvalues().iter().enumerate().take(5) {
            let k = (j + 1) as f64;
            assert!((mu - k * k * PI * PI).abs() < 1e-9);
        }
        assert!((m.k0() - 0.303_314).abs() < 1e-6);
        assert!((m.k0() - (1.0 + PI * PI).powf(-0.5)).abs() < 1e-15);
        // discrete Laplacian eigenvalues 4(N+1)² sin²(jπ/(2(N+1))) approach j²π²
        let n = 2000.0_f64;
        for j in 1..=3 {
            let fd = 4.0 * (n + 1.0).powi(2) * (j as f64 * PI / (2.0 * (n + 1.0))).sin().powi(2);
            assert!((fd / m.eigenvalues()[j - 1] - 1.0).abs() < 1e-5);
        }
        let s = m.sorted_eigenvalues();
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
        assert!(s[0] > 0.0);
    }

    #[test]
    fn neumann_has_constant_mode() {
        let m = neu(32);
        assert_eq!(m.eigenvalues()[0], 0.0);
        assert_eq!(m.k0(), 1.0);
        let c = vec![-0.7; 32];
        let n = m.norms(&c).unwrap();
        assert!((n.h - 0.7 * m.volume().sqrt()).abs() < 1e-12);
        assert!((n.v - n.h).abs() < 1e-12);
    }

    #[test]
    fn two_d_eigenvalues_are_sums() {
        let m = SpatialModel::build(SpatialConfig::two_d(4, 5, BoundaryCondition::Dirichlet)).unwrap();
        let a = dir(4);
        let b = dir(5);
        for j1 in 0..4 {
            for j2 in 0..5 {
                let mu = m.eigenvalues()[j1 * 5 + j2];
                assert!((mu - a.eigenvalues()[j1] - b.eigenvalues()[j2]).abs() < 1e-12);
            }
        }
        assert!((m.k0() - (1.0 + 2.0 * PI * PI).powf(-0.5)).abs() < 1e-15);
        let u: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.4).collect();
        let back = m.inverse(&m.forward(&u).unwrap()).unwrap();
        for (x, y) in u.iter().zip(&back) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn config_errors() {
        let mut c = SpatialConfig::one_d(3, BoundaryCondition::Dirichlet);
        assert!(matches!(SpatialModel::build(c.clone()), Err(Error::Config { .. })));
        c.grid = vec![8];
        c.dimension = 3;
        assert!(matches!(SpatialModel::build(c), Err(Error::Config { .. })));
    }

    #[test]
    fn first_eigenfunction_v_norm() {
        let m = dir(32);
        let phi = m.eigenfunction(0).unwrap();
        let n = m.norms(&phi).unwrap();
        assert!((n.v * n.v - (1.0 + PI * PI)).abs() < 1e-10);
        assert!((n.h - 1.0).abs() < 1e-12);
        assert!(n.h <= m.k0() * n.v + 1e-14);
    }

    #[test]
    fn semigroup_edge_cases() {
        let m = dir(16);
        let x: Vec<f64> = m.nodes().iter().map(|p| (3.0 * p[0]).sin()).collect();
        assert_eq!(m.heat_semigroup(0.0, &x).unwrap().len(), 16);
        let id = m.heat_semigroup(0.0, &x).unwrap();
        assert!(id.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-13));
        let far = m.heat_semigroup(200.0, &x).unwrap();
        assert!(far.iter().all(|v| v.abs() < 1e-80));
        assert!(m.heat_semigroup(-1.0, &x).is_err());
    }

    #[test]
    fn parseval_matches_quadrature_on_smooth_field() {
        let m = dir(64);
        // x(s) = s(1-s): ‖x‖²_H = 1/30, ‖∇x‖² = 1/3
        let x: Vec<f64> = m.nodes().iter().map(|p| p[0] * (1.0 - p[0])).collect();
        let n = m.norms(&x).unwrap();
        assert!((n.h * n.h - m.h_norm_sq(&x)).abs() < 1e-12);
        assert!((n.h * n.h - 1.0 / 30.0).abs() < 1e-8);
        // spectral gradient of the truncated series converges slowly; loose check
        assert!((n.grad_sq - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn covariance_trace_bound_and_sampler() {
        let m = dir(32);
        let t = 0.3;
        let cov = m.covariance(t).unwrap();
        let bound: f64 = t * m.c_eigenvalues().iter().map(|c| c.powi(-2)).sum::<f64>();
        assert!(cov.trace() <= bound);
        assert!(cov.q.iter().all(|q| *q >= 0.0));
        let zero = m.covariance(0.0).unwrap();
        let mut r = rng::stream(5, 0);
        assert!(m.sample_gaussian(&zero, &mut r).unwrap().iter().all(|v| *v == 0.0));

        let samples = 10_000;
        let mut acc = crate::stats::Running::new();
        for _ in 0..samples {
            let y = m.sample_gaussian(&cov, &mut r).unwrap();
            acc.push(m.h_norm_sq(&y));
        }
        assert!((acc.mean() - cov.trace()).abs() < 3.0 * acc.std_error());

        let pv = m.pointwise_variance(&cov);
        let total: f64 = pv.iter().sum::<f64>() * m.cell_volume();
        assert!((total - cov.trace()).abs() < 1e-12 * cov.trace().max(1.0));
    }
}
