//! Fitting fair and unconstrained treatment rules, and evaluating them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{join_features, Dataset};
use crate::error::{Error, Result};
use crate::kernel::{add_jitter, gram, gram_symmetric, KernelKind, KernelSpec, Standardizer};
use crate::proxy::{ProxyKind, ProxyWeights};
use crate::qp::{assemble_dual, recover_intercept, representer_coefficients, solve_qp_warm, KktResiduals, QpProblem, SolverOptions, WarmStart};

pub const MODEL_FORMAT: u32 = 1;

/// Groups with fewer members are reported but flagged.
pub const SMALL_GROUP: usize = 5;

/// More distinct sensitive rows than this are treated as a continuous
/// attribute, for which acceptance-rate gaps are not defined.
pub const MAX_GROUPS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub solver: SolverOptions,
    /// Z-score the joined features before computing kernels.
    pub standardize: bool,
    /// Fit an unpenalized intercept. Without it the dual drops the equality
    /// constraint and `b0 = 0`.
    pub intercept: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { solver: SolverOptions::default(), standardize: false, intercept: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Dual objective at the solution.
    pub objective: f64,
    pub n_support: usize,
    /// Proxy of the training decision values, one entry per attribute.
    pub train_proxy: Vec<f64>,
    pub converged: bool,
    pub polished: bool,
    pub iterations: usize,
    pub kkt: KktResiduals,
    pub reward_shift: f64,
}

mod proxy_choice {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::proxy::ProxyKind;

    pub fn serialize<S: Serializer>(v: &Option<ProxyKind>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => "none".serialize(s),
            Some(k) => k.serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<ProxyKind>, D::Error> {
        let s = String::deserialize(d)?;
        if s == "none" {
            return Ok(None);
        }
        s.parse().map(Some).map_err(serde::de::Error::custom)
    }
}

/// Parses `"none"`, `"linear"` or `"nonlinear"`.
pub fn parse_proxy_choice(s: &str) -> Result<Option<ProxyKind>> {
    if s == "none" {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

/// A fitted rule `f(z) = sum_i u_i K(z, z_i) + b0`, assigning `+1` iff `f > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub format: u32,
    pub kernel: KernelKind,
    pub sigma: f64,
    #[serde(with = "proxy_choice")]
    pub proxy_kind: Option<ProxyKind>,
    pub c: Vec<f64>,
    pub kappa: f64,
    pub b0: f64,
    pub u: Vec<f64>,
    /// Training features `(X, S)`, unstandardized.
    #[serde(rename = "train_Z")]
    pub train_z: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardizer: Option<Standardizer>,
    pub diagnostics: Diagnostics,
}

impl PolicyModel {
    pub fn kernel_spec(&self) -> KernelSpec {
        KernelSpec { kind: self.kernel, sigma: self.sigma }
    }

    pub fn dim(&self) -> usize {
        self.train_z.first().map_or(0, |r| r.len())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<PolicyModel> {
        let m: PolicyModel = serde_json::from_str(s)?;
        if m.format != MODEL_FORMAT {
            return Err(Error::Schema(format!("unsupported model format {}", m.format)));
        }
        if m.u.len() != m.train_z.len() {
            return Err(Error::DimensionMismatch { what: "model coefficients", expected: m.train_z.len(), found: m.u.len() });
        }
        let d = m.dim();
        if m.train_z.iter().any(|r| r.len() != d) {
            return Err(Error::Schema("ragged train_Z rows".into()));
        }
        m.kernel_spec().validate()?;
        Ok(m)
    }

    fn train_matrix(&self) -> DMatrix<f64> {
        let n = self.train_z.len();
        DMatrix::from_fn(n, self.dim(), |i, j| self.train_z[i][j])
    }

    fn prepare(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.standardizer {
            Some(st) => st.apply(z),
            None => Ok(z.clone()),
        }
    }

    /// Decision values on already joined features `(X, S)`.
    pub fn decision_values_z(&self, z: &DMatrix<f64>) -> Result<Vec<f64>> {
        if z.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { what: "feature columns", expected: self.dim(), found: z.ncols() });
        }
        let train = self.prepare(&self.train_matrix())?;
        let znew = self.prepare(z)?;
        let g = gram(&self.kernel_spec(), &znew, &train)?;
        let u = DVector::from_column_slice(&self.u);
        Ok((g * u).iter().map(|v| v + self.b0).collect())
    }
}

/// `f(z) = sum_i u_i K(z, z_i) + b0` for each row of `(x, s)`.
pub fn decision_values(m: &PolicyModel, x: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x.nrows() != s.nrows() {
        return Err(Error::DimensionMismatch { what: "sensitive rows", expected: x.nrows(), found: s.nrows() });
    }
    m.decision_values_z(&join_features(x, s))
}

/// `+1` where `f > 0`, otherwise `-1` (so `f = 0` maps to `-1`).
pub fn sgn(f: f64) -> i8 {
    if f > 0.0 {
        1
    } else {
        -1
    }
}

pub fn assign(m: &PolicyModel, x: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<Vec<i8>> {
    Ok(decision_values(m, x, s)?.into_iter().map(sgn).collect())
}

/// A dual problem prepared once for a dataset, kernel, proxy and `kappa`,
/// solvable for any number of fairness budgets. Consecutive solves start from
/// the previous solution.
pub struct FitProblem {
    data: Dataset,
    kernel: KernelSpec,
    proxy: Option<ProxyKind>,
    kappa: f64,
    opts: FitOptions,
    train_z: DMatrix<f64>,
    standardizer: Option<Standardizer>,
    gram: DMatrix<f64>,
    weights: Option<ProxyWeights>,
    qp: QpProblem,
    warm: Option<WarmStart>,
}

impl FitProblem {
    pub fn new(d: &Dataset, kernel: KernelSpec, proxy: Option<ProxyKind>, kappa: f64, opts: &FitOptions) -> Result<FitProblem> {
        kernel.validate()?;
        d.require_propensity()?;
        if let Some(r) = d.reward().iter().find(|r| !(**r >= 0.0)) {
            return Err(Error::InvalidInput(format!("rewards must be nonnegative (found {r}); shift them first")));
        }
        let train_z = d.features();
        let standardizer = opts.standardize.then(|| Standardizer::fit(&train_z));
        let z = match &standardizer {
            Some(st) => st.apply(&train_z)?,
            None => train_z.clone(),
        };
        let gram = gram_symmetric(&kernel, &z)?;
        let mut jittered = gram.clone();
        add_jitter(&mut jittered);
        let weights = proxy.map(|kind| ProxyWeights::build(kind, d.s())).transpose()?;
        let k = weights.as_ref().map_or(0, |w| w.k());
        let mut qp = assemble_dual(d, weights.as_ref(), &jittered, kappa, &vec![1.0; k])?;
        if !opts.intercept {
            qp.eq.fill(0.0);
        }
        Ok(FitProblem { data: d.clone(), kernel, proxy, kappa, opts: opts.clone(), train_z, standardizer, gram, weights, qp, warm: None })
    }

    pub fn qp(&self) -> &QpProblem {
        &self.qp
    }

    pub fn n_budgets(&self) -> usize {
        self.qp.layout.k
    }

    /// Discards the stored starting point.
    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn fit(&mut self, c: &[f64]) -> Result<PolicyModel> {
        self.qp.set_budgets(c)?;
        let (sol, warm) = solve_qp_warm(&self.qp, &self.opts.solver, self.warm.as_ref())?;
        self.warm = Some(warm);
        let n = self.data.n();
        let a = self.data.treatment();
        let u = representer_coefficients(a, self.weights.as_ref(), &sol.z);
        let alpha = sol.z.rows(0, n).into_owned();
        let b0 = if self.opts.intercept { recover_intercept(&alpha, &self.data, &self.gram, &u, self.kappa)? } else { 0.0 };
        let f_train: Vec<f64> = (&self.gram * &u).iter().map(|v| v + b0).collect();
        let train_proxy = match &self.weights {
            Some(w) => w.estimate(&f_train)?,
            None => Vec::new(),
        };
        let max_bound = (0..n).map(|i| self.qp.upper[i]).fold(0.0, f64::max);
        let n_support = alpha.iter().filter(|&&v| v > 1e-9 * max_bound).count();
        if !sol.converged {
            log::warn!("dual solve did not converge for c = {c:?}; model flagged");
        }
        let diagnostics = Diagnostics {
            objective: sol.objective,
            n_support,
            train_proxy,
            converged: sol.converged,
            polished: sol.polished,
            iterations: sol.iterations,
            kkt: sol.residuals,
            reward_shift: self.data.reward_shift(),
        };
        Ok(PolicyModel {
            format: MODEL_FORMAT,
            kernel: self.kernel.kind,
            sigma: self.kernel.sigma,
            proxy_kind: self.proxy,
            c: c.to_vec(),
            kappa: self.kappa,
            b0,
            u: u.iter().copied().collect(),
            train_z: self.train_z.row_iter().map(|r| r.iter().copied().collect()).collect(),
            standardizer: self.standardizer.clone(),
            diagnostics,
        })
    }
}

/// Fits the fairness-constrained rule with budgets `c` (one per sensitive
/// attribute).
pub fn fit_dpa_itr(d: &Dataset, kernel: KernelSpec, proxy: ProxyKind, kappa: f64, c: &[f64], opts: &FitOptions) -> Result<PolicyModel> {
    FitProblem::new(d, kernel, Some(proxy), kappa, opts)?.fit(c)
}

/// Fits the unconstrained outcome weighted learning rule.
pub fn fit_owl(d: &Dataset, kernel: KernelSpec, kappa: f64, opts: &FitOptions) -> Result<PolicyModel> {
    FitProblem::new(d, kernel, None, kappa, opts)?.fit(&[])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    /// Inverse-propensity weighted mean reward on the original reward scale.
    pub raw: f64,
    /// The same estimate with the stored reward shift applied.
    pub shifted: f64,
}

/// `(1/n) sum_i R_i I(A_i = D_i) / pi_i` for given assignments `D`.
pub fn value_of_assignments(d: &Dataset, assigned: &[i8]) -> Result<ValueEstimate> {
    let pi = d.require_propensity()?;
    if assigned.len() != d.n() {
        return Err(Error::DimensionMismatch { what: "assignments", expected: d.n(), found: assigned.len() });
    }
    let raw = d.raw_rewards();
    let n = d.n() as f64;
    let (mut sr, mut ss) = (0.0, 0.0);
    for i in 0..d.n() {
        if d.treatment()[i] == assigned[i] {
            sr += raw[i] / pi[i];
            ss += d.reward()[i] / pi[i];
        }
    }
    Ok(ValueEstimate { raw: sr / n, shifted: ss / n })
}

pub fn estimate_value(d: &Dataset, m: &PolicyModel) -> Result<ValueEstimate> {
    let assigned = assign(m, d.x(), d.s())?;
    value_of_assignments(d, &assigned)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourFifths {
    pub pass: bool,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    /// Fraction assigned `+1` in each group, keyed by the group's `S` row.
    pub accept_rates: BTreeMap<String, f64>,
    pub group_sizes: BTreeMap<String, usize>,
    pub small_groups: Vec<String>,
    pub ufm: f64,
}

fn group_label(row: &[f64]) -> String {
    row.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

/// Acceptance rates per distinct row of `s` and their range.
pub fn group_rates(s: &DMatrix<f64>, assigned: &[i8]) -> Result<GroupRates> {
    if s.nrows() != assigned.len() {
        return Err(Error::DimensionMismatch { what: "assignments", expected: s.nrows(), found: assigned.len() });
    }
    if s.nrows() == 0 {
        return Err(Error::InvalidInput("no rows to evaluate".into()));
    }
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (i, &a) in assigned.iter().enumerate() {
        let row: Vec<f64> = s.row(i).iter().copied().collect();
        let entry = counts.entry(group_label(&row)).or_default();
        entry.0 += 1;
        if a == 1 {
            entry.1 += 1;
        }
        if counts.len() > MAX_GROUPS {
            return Err(Error::InvalidInput(format!(
                "sensitive attributes take more than {MAX_GROUPS} distinct values; acceptance-rate gaps need discrete groups"
            )));
        }
    }
    let accept_rates: BTreeMap<String, f64> = counts.iter().map(|(k, (n, p))| (k.clone(), *p as f64 / *n as f64)).collect();
    let group_sizes = counts.iter().map(|(k, (n, _))| (k.clone(), *n)).collect();
    let small_groups = counts.iter().filter(|(_, (n, _))| *n < SMALL_GROUP).map(|(k, _)| k.clone()).collect();
    let max = accept_rates.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = accept_rates.values().copied().fold(f64::INFINITY, f64::min);
    Ok(GroupRates { accept_rates, group_sizes, small_groups, ufm: max - min })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub value: f64,
    pub value_shifted: f64,
    pub ufm: f64,
    /// Proxy of the test decision values with weights built on the test `S`.
    pub proxy_test: Vec<f64>,
    pub accept_rates: BTreeMap<String, f64>,
    pub group_sizes: BTreeMap<String, usize>,
    pub small_groups: Vec<String>,
    pub n_test: usize,
    pub four_fifths: FourFifths,
}

pub fn evaluate(d: &Dataset, m: &PolicyModel, proxy: ProxyKind) -> Result<EvalReport> {
    let f = decision_values(m, d.x(), d.s())?;
    let assigned: Vec<i8> = f.iter().copied().map(sgn).collect();
    let value = value_of_assignments(d, &assigned)?;
    let rates = group_rates(d.s(), &assigned)?;
    let proxy_test = ProxyWeights::build(proxy, d.s())?.estimate(&f)?;
    let four_fifths = four_fifths_ratio(&rates.accept_rates);
    Ok(EvalReport {
        value: value.raw,
        value_shifted: value.shifted,
        ufm: rates.ufm,
        proxy_test,
        accept_rates: rates.accept_rates,
        group_sizes: rates.group_sizes,
        small_groups: rates.small_groups,
        n_test: d.n(),
        four_fifths,
    })
}

fn four_fifths_ratio(rates: &BTreeMap<String, f64>) -> FourFifths {
    let max = rates.values().copied().fold(0.0, f64::max);
    let min = rates.values().copied().fold(f64::INFINITY, f64::min);
    let ratio = if max == 0.0 { 1.0 } else { min / max };
    FourFifths { pass: ratio >= 0.8, ratio }
}

/// `min rate / max rate`, passing at `0.8`; vacuous pass when nobody is
/// selected.
pub fn four_fifths_check(report: &EvalReport) -> FourFifths {
    four_fifths_ratio(&report.accept_rates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let s = DMatrix::from_fn(n, 1, |i, _| if x[(i, 0)] + rng.random_range(-0.5..0.5) > 0.0 { 1.0 } else { 0.0 });
        let a: Vec<i8> = (0..n).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
        let r = (0..n).map(|i| 1.0 + f64::from(a[i]) * x[(i, 0)] + rng.random_range(0.0..0.5)).collect();
        Dataset::new(x, s, a, r).unwrap().with_propensity(vec![0.5; n]).unwrap().shift_rewards()
    }

    fn rates(v: &[(&str, f64)]) -> BTreeMap<String, f64> {
        v.iter().map(|(k, r)| (k.to_string(), *r)).collect()
    }

    #[test]
    fn sign_convention() {
        assert_eq!(sgn(0.5), 1);
        assert_eq!(sgn(0.0), -1);
        assert_eq!(sgn(-2.0), -1);
    }

    #[test]
    fn four_fifths_examples() {
        let r = four_fifths_ratio(&rates(&[("0", 0.5), ("1", 0.45)]));
        assert!(r.pass && (r.ratio - 0.9).abs() < 1e-15);
        let r = four_fifths_ratio(&rates(&[("0", 0.5), ("1", 0.3)]));
        assert!(!r.pass && (r.ratio - 0.6).abs() < 1e-15);
        let r = four_fifths_ratio(&rates(&[("0", 0.0), ("1", 0.0)]));
        assert!(r.pass && r.ratio == 1.0);
    }

    #[test]
    fn value_examples() {
        let d = random_data(40, 1);
        let same = value_of_assignments(&d, d.treatment()).unwrap();
        let raw = d.raw_rewards();
        let mean: f64 = raw.iter().sum::<f64>() / 40.0;
        assert!((same.raw - 2.0 * mean).abs() < 1e-12);
        let opposite: Vec<i8> = d.treatment().iter().map(|a| -a).collect();
        assert_eq!(value_of_assignments(&d, &opposite).unwrap().raw, 0.0);
    }

    #[test]
    fn group_rates_and_ufm() {
        let s = DMatrix::from_column_slice(6, 1, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let g = group_rates(&s, &[1, 1, -1, 1, -1, -1]).unwrap();
        assert!((g.ufm - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(g.small_groups.len(), 2);
        let g = group_rates(&s, &[1; 6]).unwrap();
        assert_eq!(g.ufm, 0.0);
        let cont = DMatrix::from_fn(60, 1, |i, _| i as f64 * 0.1);
        assert!(group_rates(&cont, &[1; 60]).is_err());
    }

    #[test]
    fn decision_values_match_representer_sum() {
        let d = random_data(60, 2);
        let m = fit_dpa_itr(&d, KernelSpec::gaussian(1.0).unwrap(), ProxyKind::Nonlinear, 0.5, &[0.05], &FitOptions::default()).unwrap();
        let f = decision_values(&m, d.x(), d.s()).unwrap();
        let z = d.features();
        for i in [0, 17, 59] {
            let row: Vec<f64> = z.row(i).iter().copied().collect();
            let direct: f64 = (0..60).map(|j| m.u[j] * m.kernel_spec().eval(&row, &m.train_z[j])).sum::<f64>() + m.b0;
            assert!((direct - f[i]).abs() < 1e-12);
        }
        assert!(m.diagnostics.converged);
        assert!(m.diagnostics.train_proxy[0].abs() <= 0.05 + 1e-4 * 1.05, "{:?}", m.diagnostics.train_proxy);
    }

    #[test]
    fn linear_model_is_explicit_hyperplane() {
        let d = random_data(50, 3);
        let m = fit_owl(&d, KernelSpec::linear(), 1.0, &FitOptions::default()).unwrap();
        let beta: Vec<f64> = (0..m.dim()).map(|j| (0..50).map(|i| m.u[i] * m.train_z[i][j]).sum()).collect();
        let f = decision_values(&m, d.x(), d.s()).unwrap();
        let z = d.features();
        for i in 0..50 {
            let direct: f64 = (0..m.dim()).map(|j| beta[j] * z[(i, j)]).sum::<f64>() + m.b0;
            assert!((direct - f[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_coefficients_give_constant_intercept() {
        let d = random_data(10, 4);
        let mut m = fit_owl(&d, KernelSpec::linear(), 1.0, &FitOptions::default()).unwrap();
        m.u = vec![0.0; 10];
        m.b0 = 0.25;
        assert!(decision_values(&m, d.x(), d.s()).unwrap().iter().all(|v| *v == 0.25));
        m.b0 = -0.25;
        assert!(assign(&m, d.x(), d.s()).unwrap().iter().all(|v| *v == -1));
    }

    #[test]
    fn model_json_round_trip() {
        let d = random_data(30, 5);
        let opts = FitOptions { standardize: true, ..Default::default() };
        let m = fit_dpa_itr(&d, KernelSpec::gaussian(0.8).unwrap(), ProxyKind::Linear, 1.0, &[0.1], &opts).unwrap();
        let json = m.to_json().unwrap();
        assert!(json.contains("\"format\": 1") && json.contains("\"train_Z\""));
        let back = PolicyModel::from_json(&json).unwrap();
        assert_eq!(back, m);
        let owl = fit_owl(&d, KernelSpec::linear(), 1.0, &FitOptions::default()).unwrap();
        assert!(owl.to_json().unwrap().contains("\"proxy_kind\": \"none\""));
    }

    #[test]
    fn symmetric_pair_gets_equal_duals() {
        let x = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let s = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let d = Dataset::new(x, s, vec![1, -1], vec![1.0, 1.0]).unwrap().with_propensity(vec![0.5; 2]).unwrap();
        let m = fit_owl(&d, KernelSpec::linear(), 1.0, &FitOptions::default()).unwrap();
        assert!((m.u[0] + m.u[1]).abs() < 1e-9, "{:?}", m.u);
    }

    #[test]
    fn separable_data_has_zero_training_loss() {
        let n = 40;
        let x = DMatrix::from_fn(n, 1, |i, _| if i % 2 == 0 { 1.0 + i as f64 * 0.05 } else { -1.0 - i as f64 * 0.05 });
        let s = DMatrix::from_fn(n, 1, |i, _| (i % 3 == 0) as u8 as f64);
        let a: Vec<i8> = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        let d = Dataset::new(x, s, a, vec![1.0; n]).unwrap().with_propensity(vec![0.5; n]).unwrap();
        let m = fit_owl(&d, KernelSpec::linear(), 100.0, &FitOptions::default()).unwrap();
        let assigned = assign(&m, d.x(), d.s()).unwrap();
        assert_eq!(assigned, d.treatment());
    }

    #[test]
    fn rejects_negative_rewards() {
        let x = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let s = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let d = Dataset::new(x, s, vec![1, -1], vec![-1.0, 1.0]).unwrap().with_propensity(vec![0.5; 2]).unwrap();
        assert!(fit_owl(&d, KernelSpec::linear(), 1.0, &FitOptions::default()).is_err());
    }
}
