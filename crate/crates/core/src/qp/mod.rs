//! Dual quadratic programs for fairness-constrained outcome weighted learning.
//!
//! The dual variables are ordered `(alpha_1..alpha_n, gamma_1, eta_1, ...,
//! gamma_K, eta_K)` and the program is
//!
//! ```text
//! maximize   e^T z - 1/2 z^T D z
//! subject to lower <= z <= upper,  eq^T z = 0
//! ```
//!
//! with `D = M^T G M`, where `G` is the kernel Gram matrix and `M` maps dual
//! variables to representer coefficients
//! `u_i = alpha_i A_i + sum_k (gamma_k - eta_k) w_ik / n`.

mod admm;
mod oracle;
pub(crate) mod project;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_f64, Dataset};
use crate::error::{Error, Result};
use crate::proxy::ProxyWeights;

pub use admm::{solve_qp, solve_qp_warm, SolverOptions, WarmStart};
pub use oracle::brute_force_qp;

/// Cap on `gamma_k`, `eta_k` when `c_k = 0`.
pub const ZERO_BUDGET_CAP: f64 = 1e8;

/// Block sizes of the dual vector: `n` box-constrained variables followed by
/// `k` `(gamma, eta)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DualLayout {
    pub n: usize,
    pub k: usize,
}

impl DualLayout {
    pub fn len(&self) -> usize {
        self.n + 2 * self.k
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gamma_index(&self, k: usize) -> usize {
        self.n + 2 * k
    }

    pub fn eta_index(&self, k: usize) -> usize {
        self.n + 2 * k + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub d: DMatrix<f64>,
    pub e: DVector<f64>,
    pub lower: DVector<f64>,
    /// May hold `f64::INFINITY`.
    pub upper: DVector<f64>,
    pub eq: DVector<f64>,
    pub layout: DualLayout,
}

impl QpProblem {
    /// A generic instance; the layout treats every variable as an `alpha`.
    pub fn new(d: DMatrix<f64>, e: DVector<f64>, lower: DVector<f64>, upper: DVector<f64>, eq: DVector<f64>) -> Result<Self> {
        let m = e.len();
        let p = QpProblem { d, e, lower, upper, eq, layout: DualLayout { n: m, k: 0 } };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.e.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.e.len();
        if self.d.nrows() != m || self.d.ncols() != m {
            return Err(Error::DimensionMismatch { what: "quadratic term", expected: m, found: self.d.nrows().max(self.d.ncols()) });
        }
        for (what, len) in [("lower bounds", self.lower.len()), ("upper bounds", self.upper.len()), ("equality row", self.eq.len())] {
            if len != m {
                return Err(Error::DimensionMismatch { what, expected: m, found: len });
            }
        }
        if self.layout.len() != m {
            return Err(Error::DimensionMismatch { what: "dual layout", expected: m, found: self.layout.len() });
        }
        for i in 0..m {
            let (l, u) = (self.lower[i], self.upper[i]);
            if !l.is_finite() || u.is_nan() || l > u {
                return Err(Error::InvalidInput(format!("bad bounds [{l}, {u}] for variable {i}")));
            }
        }
        if self.d.iter().chain(self.e.iter()).chain(self.eq.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite entry in QP data".into()));
        }
        asymmetry_check(&self.d)
    }

    /// Replaces the fairness budgets of an assembled dual in place; `D` and
    /// the `alpha` block do not depend on them.
    pub fn set_budgets(&mut self, c: &[f64]) -> Result<()> {
        if c.len() != self.layout.k {
            return Err(Error::DimensionMismatch { what: "fairness budgets", expected: self.layout.k, found: c.len() });
        }
        if let Some(bad) = c.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!("fairness budget must be nonnegative and finite, got {bad}")));
        }
        for (kk, &ck) in c.iter().enumerate() {
            let cap = if ck > 0.0 { f64::INFINITY } else { ZERO_BUDGET_CAP };
            for idx in [self.layout.gamma_index(kk), self.layout.eta_index(kk)] {
                self.e[idx] = -ck;
                self.upper[idx] = cap;
            }
        }
        Ok(())
    }

    /// `e^T z - 1/2 z^T D z`.
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        self.e.dot(z) - 0.5 * z.dot(&(&self.d * z))
    }

    /// Solver-independent optimality residuals of a candidate `z`.
    pub fn residuals(&self, z: &DVector<f64>) -> Result<KktResiduals> {
        let set = project::BoxHyperplane::new(self.lower.clone(), self.upper.clone(), self.eq.clone(), 0.0)?;
        let grad = &self.e - &self.d * z;
        let step = set.project(&(z + &grad));
        let stationarity = (&step - z).amax();
        let primal_eq = self.eq.dot(z).abs();
        let bound_violation = (0..z.len())
            .map(|i| (self.lower[i] - z[i]).max(z[i] - self.upper[i]).max(0.0))
            .fold(0.0, f64::max);
        Ok(KktResiduals { stationarity, primal_eq, bound_violation })
    }

    /// Writes `(D, e, lower, upper, eq)` as plain text: a dimension line,
    /// then `D` row-major, then one line each for `e`, `lower`, `upper`, `eq`.
    /// Values carry 17 significant digits; infinite bounds print as `inf`.
    pub fn write_dump<W: Write>(&self, mut out: W) -> Result<()> {
        let m = self.dim();
        writeln!(out, "{m}")?;
        let line = |v: &mut dyn Iterator<Item = f64>| v.map(|x| if x.is_infinite() { "inf".to_string() } else { fmt_f64(x) }).collect::<Vec<_>>().join(" ");
        for i in 0..m {
            writeln!(out, "{}", line(&mut self.d.row(i).iter().copied()))?;
        }
        for v in [&self.e, &self.lower, &self.upper, &self.eq] {
            writeln!(out, "{}", line(&mut v.iter().copied()))?;
        }
        Ok(())
    }
}

fn asymmetry_check(d: &DMatrix<f64>) -> Result<()> {
    let scale = d.amax();
    let m = d.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..m {
        for j in 0..i {
            worst = worst.max((d[(i, j)] - d[(j, i)]).abs());
        }
    }
    if worst > 1e-8 * scale.max(1e-300) {
        return Err(Error::InvalidInput(format!("matrix is not symmetric (max asymmetry {worst:.3e})")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `|z - P(z + grad)|_inf`: zero exactly at an optimum.
    pub stationarity: f64,
    pub primal_eq: f64,
    pub bound_violation: f64,
}

/// Output of [`solve_qp`] or [`brute_force_qp`].
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub residuals: KktResiduals,
    pub iterations: usize,
    pub converged: bool,
    pub polished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: DVector<f64>,
    pub gamma: DVector<f64>,
    pub eta: DVector<f64>,
    pub objective: f64,
    pub kkt_residuals: KktResiduals,
    pub iterations: usize,
    pub converged: bool,
}

impl DualSolution {
    pub fn from_qp(sol: &QpSolution, layout: DualLayout) -> DualSolution {
        let z = &sol.z;
        DualSolution {
            alpha: z.rows(0, layout.n).into_owned(),
            gamma: DVector::from_fn(layout.k, |k, _| z[layout.gamma_index(k)]),
            eta: DVector::from_fn(layout.k, |k, _| z[layout.eta_index(k)]),
            objective: sol.objective,
            kkt_residuals: sol.residuals,
            iterations: sol.iterations,
            converged: sol.converged,
        }
    }

    /// The stacked dual vector in layout order.
    pub fn stacked(&self) -> DVector<f64> {
        let (n, k) = (self.alpha.len(), self.gamma.len());
        let mut z = DVector::zeros(n + 2 * k);
        z.rows_mut(0, n).copy_from(&self.alpha);
        for j in 0..k {
            z[n + 2 * j] = self.gamma[j];
            z[n + 2 * j + 1] = self.eta[j];
        }
        z
    }
}

fn proxy_k(w: Option<&ProxyWeights>) -> usize {
    w.map_or(0, |w| w.k())
}

/// The `n x (n + 2K)` matrix sending dual variables to representer
/// coefficients.
pub fn dual_coefficient_map(a: &[i8], w: Option<&ProxyWeights>) -> Result<DMatrix<f64>> {
    let n = a.len();
    let k = proxy_k(w);
    let mut m = DMatrix::zeros(n, n + 2 * k);
    for (i, &ai) in a.iter().enumerate() {
        m[(i, i)] = f64::from(ai);
    }
    if let Some(w) = w {
        if w.n() != n {
            return Err(Error::DimensionMismatch { what: "proxy weight rows", expected: n, found: w.n() });
        }
        let nf = n as f64;
        for j in 0..k {
            for i in 0..n {
                m[(i, n + 2 * j)] = w.w[(i, j)] / nf;
                m[(i, n + 2 * j + 1)] = -w.w[(i, j)] / nf;
            }
        }
    }
    Ok(m)
}

/// `u = M z` without materializing `M`.
pub fn representer_coefficients(a: &[i8], w: Option<&ProxyWeights>, z: &DVector<f64>) -> DVector<f64> {
    let n = a.len();
    let mut u = DVector::from_fn(n, |i, _| z[i] * f64::from(a[i]));
    if let Some(w) = w {
        let nf = n as f64;
        for j in 0..w.k() {
            let net = (z[n + 2 * j] - z[n + 2 * j + 1]) / nf;
            if net != 0.0 {
                u.axpy(net, &w.w.column(j), 1.0);
            }
        }
    }
    u
}

/// Assembles the dual program for data `d` (propensities required), proxy
/// weights (`None` for the unconstrained problem), a symmetric PSD Gram
/// matrix, `kappa = 1/(2 lambda)` and per-attribute budgets `c`.
pub fn assemble_dual(d: &Dataset, w: Option<&ProxyWeights>, gram: &DMatrix<f64>, kappa: f64, c: &[f64]) -> Result<QpProblem> {
    let n = d.n();
    let k = proxy_k(w);
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidInput(format!("kappa must be positive, got {kappa}")));
    }
    if c.len() != k {
        return Err(Error::DimensionMismatch { what: "fairness budgets", expected: k, found: c.len() });
    }
    if gram.nrows() != n || gram.ncols() != n {
        return Err(Error::DimensionMismatch { what: "gram matrix", expected: n, found: gram.nrows() });
    }
    if let Some(w) = w {
        if w.n() != n {
            return Err(Error::DimensionMismatch { what: "proxy weight rows", expected: n, found: w.n() });
        }
    }
    let pi = d.require_propensity()?;
    let a = d.treatment();
    let r = d.reward();
    let layout = DualLayout { n, k };
    let m = layout.len();

    let mut dm = DMatrix::zeros(m, m);
    for j in 0..n {
        let aj = f64::from(a[j]);
        for i in 0..n {
            dm[(i, j)] = f64::from(a[i]) * aj * gram[(i, j)];
        }
    }
    if let Some(w) = w {
        let scaled = &w.w / n as f64;
        let v = gram * &scaled; // n x K
        let t = scaled.tr_mul(&v); // K x K
        for kk in 0..k {
            let (g, h) = (layout.gamma_index(kk), layout.eta_index(kk));
            for i in 0..n {
                let val = f64::from(a[i]) * v[(i, kk)];
                dm[(i, g)] = val;
                dm[(g, i)] = val;
                dm[(i, h)] = -val;
                dm[(h, i)] = -val;
            }
            for ll in 0..k {
                let (g2, h2) = (layout.gamma_index(ll), layout.eta_index(ll));
                let val = t[(kk, ll)];
                dm[(g, g2)] = val;
                dm[(h, h2)] = val;
                dm[(g, h2)] = -val;
                dm[(h, g2)] = -val;
            }
        }
    }
    let dm = (&dm + dm.transpose()) * 0.5;

    let e = DVector::from_element(m, 1.0);
    let lower = DVector::zeros(m);
    let mut upper = DVector::zeros(m);
    let mut eq = DVector::zeros(m);
    for i in 0..n {
        upper[i] = kappa * r[i] / pi[i];
        eq[i] = f64::from(a[i]);
    }
    let mut p = QpProblem { d: dm, e, lower, upper, eq, layout };
    p.set_budgets(c)?;
    p.validate()?;
    Ok(p)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn check_psd(d: &DMatrix<f64>) -> Result<f64> {
    if d.nrows() != d.ncols() {
        return Err(Error::InvalidInput("matrix is not square".into()));
    }
    if d.nrows() == 0 {
        return Ok(0.0);
    }
    asymmetry_check(d)?;
    let sym = (d + d.transpose()) * 0.5;
    Ok(sym.symmetric_eigenvalues().min())
}

/// Recovers the intercept from the margin points
/// `{ m : eps_m < alpha_m < U_m - eps_m }`, `eps_m = 1e-6 U_m`, as the mean of
/// `A_m - sum_i u_i K(z_m, z_i)`. Without margin points the weighted hinge
/// loss is minimized over the intercept by golden-section search.
pub fn recover_intercept(alpha: &DVector<f64>, d: &Dataset, gram: &DMatrix<f64>, u: &DVector<f64>, kappa: f64) -> Result<f64> {
    let pi = d.require_propensity()?;
    let a = d.treatment();
    let r = d.reward();
    let g = gram * u;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..d.n() {
        let ub = kappa * r[i] / pi[i];
        let eps = 1e-6 * ub;
        if alpha[i] > eps && alpha[i] < ub - eps {
            sum += f64::from(a[i]) - g[i];
            count += 1;
        }
    }
    if count > 0 {
        return Ok(sum / count as f64);
    }
    let weights: Vec<f64> = r.iter().zip(pi).map(|(r, p)| r / p).collect();
    let hinge = |b: f64| -> f64 {
        (0..d.n())
            .map(|i| weights[i] * (1.0 - f64::from(a[i]) * (g[i] + b)).max(0.0))
            .sum()
    };
    let bound = 1.0 + g.amax();
    Ok(golden_section(hinge, -bound, bound, 1e-10 * bound))
}

fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Weighted hinge primal objective `1/2 u^T G u + kappa sum_i (R_i/pi_i) (1 - A_i f_i)^+`
/// with `f = G u + b0`.
pub fn primal_objective(d: &Dataset, gram: &DMatrix<f64>, u: &DVector<f64>, b0: f64, kappa: f64) -> Result<f64> {
    let pi = d.require_propensity()?;
    let g = gram * u;
    let reg = 0.5 * u.dot(&g);
    let loss: f64 = (0..d.n())
        .map(|i| d.reward()[i] / pi[i] * (1.0 - f64::from(d.treatment()[i]) * (g[i] + b0)).max(0.0))
        .sum();
    Ok(reg + kappa * loss)
}
