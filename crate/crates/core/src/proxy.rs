//! Fairness proxies as linear functionals of decision values.
//!
//! Both proxies reduce to `proxy_k(f) = (1/n) * sum_i w_ik * f_i` for a
//! centered weight matrix `w`:
//!
//! * linear: `w_ik = S_ik - mean(S_k)`, the sample covariance of `S_k` and `f`;
//! * nonlinear: `w_ik = (1/n) * sum_l [ I(S_ik < S_lk) - (1/n) sum_m I(S_mk < S_lk) ]`,
//!   the average over observed thresholds of the centered-indicator covariance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProxyKind {
    Linear,
    Nonlinear,
}

impl std::fmt::Display for ProxyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProxyKind::Linear => f.write_str("linear"),
            ProxyKind::Nonlinear => f.write_str("nonlinear"),
        }
    }
}

impl std::str::FromStr for ProxyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ProxyKind::Linear),
            "nonlinear" => Ok(ProxyKind::Nonlinear),
            other => Err(Error::InvalidInput(format!("unknown proxy `{other}`"))),
        }
    }
}

/// Column `k` of `w` holds the weights `w_ik` for sensitive attribute `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyWeights {
    pub kind: ProxyKind,
    pub w: DMatrix<f64>,
    /// Attributes that are constant in the sample; their constraint is vacuous.
    pub constant_columns: Vec<usize>,
}

impl ProxyWeights {
    pub fn build(kind: ProxyKind, s: &DMatrix<f64>) -> Result<ProxyWeights> {
        match kind {
            ProxyKind::Linear => linear_proxy_weights(s),
            ProxyKind::Nonlinear => nonlinear_proxy_weights(s),
        }
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    /// `(1/n) * sum_i w_ik f_i` for every attribute `k`.
    pub fn estimate(&self, f: &[f64]) -> Result<Vec<f64>> {
        estimate_proxy(self, f)
    }
}

fn check_rows(s: &DMatrix<f64>) -> Result<()> {
    if s.nrows() < 2 {
        return Err(Error::InvalidInput(format!("proxy weights need n >= 2 rows, got {}", s.nrows())));
    }
    Ok(())
}

fn constant_columns(s: &DMatrix<f64>) -> Vec<usize> {
    (0..s.ncols())
        .filter(|&k| {
            let col = s.column(k);
            col.iter().all(|&v| v == col[0])
        })
        .collect()
}

/// Centered sensitive attributes.
pub fn linear_proxy_weights(s: &DMatrix<f64>) -> Result<ProxyWeights> {
    check_rows(s)?;
    let constant = constant_columns(s);
    let mut w = s.clone();
    for (k, mut col) in w.column_iter_mut().enumerate() {
        if constant.contains(&k) {
            col.fill(0.0);
            log::warn!("sensitive attribute {k} is constant; its linear constraint is vacuous");
            continue;
        }
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    Ok(ProxyWeights { kind: ProxyKind::Linear, w, constant_columns: constant })
}

/// Averaged centered-indicator weights with strict `<`, in O(n log n) per
/// column.
///
/// With `G(v) = #{l : S_l > v}` and `L(v) = #{m : S_m < v}`,
/// `w_i = G(S_i)/n - sum_l L(S_l) / n^2`.
pub fn nonlinear_proxy_weights(s: &DMatrix<f64>) -> Result<ProxyWeights> {
    check_rows(s)?;
    let n = s.nrows();
    let nf = n as f64;
    let constant = constant_columns(s);
    let mut w = DMatrix::zeros(n, s.ncols());
    for k in 0..s.ncols() {
        if constant.contains(&k) {
            continue;
        }
        let mut sorted: Vec<f64> = s.column(k).iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let less = |v: f64| sorted.partition_point(|&x| x < v);
        let greater = |v: f64| n - sorted.partition_point(|&x| x <= v);
        let total_less: usize = sorted.iter().map(|&v| less(v)).sum();
        let offset = total_less as f64 / (nf * nf);
        for i in 0..n {
            w[(i, k)] = greater(s[(i, k)]) as f64 / nf - offset;
        }
    }
    Ok(ProxyWeights { kind: ProxyKind::Nonlinear, w, constant_columns: constant })
}

/// Direct O(n^2) evaluation of the nonlinear weights, term by term.
pub fn nonlinear_proxy_weights_direct(s: &DMatrix<f64>) -> Result<ProxyWeights> {
    check_rows(s)?;
    let n = s.nrows();
    let nf = n as f64;
    let ind = |a: f64, b: f64| if a < b { 1.0 } else { 0.0 };
    let mut w = DMatrix::zeros(n, s.ncols());
    for k in 0..s.ncols() {
        let col = s.column(k);
        let mean_ind: Vec<f64> = (0..n)
            .map(|l| (0..n).map(|m| ind(col[m], col[l])).sum::<f64>() / nf)
            .collect();
        for i in 0..n {
            w[(i, k)] = (0..n).map(|l| ind(col[i], col[l]) - mean_ind[l]).sum::<f64>() / nf;
        }
    }
    Ok(ProxyWeights { kind: ProxyKind::Nonlinear, w, constant_columns: constant_columns(s) })
}

pub fn estimate_proxy(w: &ProxyWeights, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != w.n() {
        return Err(Error::DimensionMismatch { what: "decision values", expected: w.n(), found: f.len() });
    }
    let nf = w.n() as f64;
    Ok(w.w
        .column_iter()
        .map(|col| col.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / nf)
        .collect())
}

/// Inequality used for the indicator `I(S < s)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inequality {
    Strict,
    NonStrict,
}

/// Finite joint distribution of a scalar sensitive attribute and decision
/// value: atoms `(s, f, probability)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    atoms: Vec<(f64, f64, f64)>,
}

impl DiscreteJoint {
    pub fn new(atoms: Vec<(f64, f64, f64)>) -> Result<Self> {
        if atoms.iter().any(|&(s, f, p)| !(s.is_finite() && f.is_finite() && p >= 0.0)) {
            return Err(Error::InvalidInput("atoms need finite values and nonnegative mass".into()));
        }
        let total: f64 = atoms.iter().map(|a| a.2).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("probabilities sum to {total}, not 1")));
        }
        Ok(DiscreteJoint { atoms })
    }

    pub fn atoms(&self) -> &[(f64, f64, f64)] {
        &self.atoms
    }
}

/// Population nonlinear proxy `E_{S'}[ E{ f (I(S < S') - P(S < S')) } ]`,
/// evaluated exactly by summation over atoms.
pub fn omega_population_oracle(joint: &DiscreteJoint, ineq: Inequality) -> f64 {
    let ind = |a: f64, b: f64| match ineq {
        Inequality::Strict => (a < b) as u8 as f64,
        Inequality::NonStrict => (a <= b) as u8 as f64,
    };
    let atoms = &joint.atoms;
    atoms
        .iter()
        .map(|&(threshold, _, p_outer)| {
            let prob_below: f64 = atoms.iter().map(|&(s, _, p)| p * ind(s, threshold)).sum();
            let omega: f64 = atoms
                .iter()
                .map(|&(s, f, p)| p * f * (ind(s, threshold) - prob_below))
                .sum();
            p_outer * omega
        })
        .sum()
}

/// Population covariance `E[S f] - E[S] E[f]`.
pub fn cov_population_oracle(joint: &DiscreteJoint) -> f64 {
    let (mut es, mut ef, mut esf) = (0.0, 0.0, 0.0);
    for &(s, f, p) in &joint.atoms {
        es += p * s;
        ef += p * f;
        esf += p * s * f;
    }
    esf - es * ef
}
