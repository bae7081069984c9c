//! Observational or simulated data: covariates `X`, sensitive attributes `S`,
//! binary treatments `A` coded as -1/+1, rewards `R` and per-row propensities
//! of the observed treatment.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Lower/upper clipping bound for fitted propensities.
pub const PROPENSITY_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    s: DMatrix<f64>,
    a: Vec<i8>,
    r: Vec<f64>,
    pi: Option<Vec<f64>>,
    reward_shift: f64,
    covariate_names: Vec<String>,
    sensitive_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset without propensities. Treatments must be -1 or +1 and
    /// every value finite.
    pub fn new(x: DMatrix<f64>, s: DMatrix<f64>, a: Vec<i8>, r: Vec<f64>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 || x.ncols() == 0 || s.ncols() == 0 {
            return Err(Error::InvalidInput(
                "dataset needs n >= 1 rows, p >= 1 covariates and K >= 1 sensitive attributes".into(),
            ));
        }
        for (what, len) in [("sensitive rows", s.nrows()), ("treatments", a.len()), ("rewards", r.len())] {
            if len != n {
                return Err(Error::DimensionMismatch { what, expected: n, found: len });
            }
        }
        if let Some(bad) = a.iter().find(|&&v| v != 1 && v != -1) {
            return Err(Error::InvalidInput(format!("treatment value {bad} is not -1 or +1")));
        }
        if x.iter().chain(s.iter()).chain(r.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite value in dataset".into()));
        }
        let covariate_names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        let sensitive_names = (1..=s.ncols()).map(|k| format!("s{k}")).collect();
        Ok(Dataset {
            x,
            s,
            a,
            r,
            pi: None,
            reward_shift: 0.0,
            covariate_names,
            sensitive_names,
        })
    }

    pub fn with_names(mut self, covariates: Vec<String>, sensitive: Vec<String>) -> Result<Self> {
        if covariates.len() != self.p() {
            return Err(Error::DimensionMismatch { what: "covariate names", expected: self.p(), found: covariates.len() });
        }
        if sensitive.len() != self.k() {
            return Err(Error::DimensionMismatch { what: "sensitive names", expected: self.k(), found: sensitive.len() });
        }
        self.covariate_names = covariates;
        self.sensitive_names = sensitive;
        Ok(self)
    }

    /// Attaches per-row propensities of the observed treatment.
    pub fn with_propensity(mut self, pi: Vec<f64>) -> Result<Self> {
        if pi.len() != self.n() {
            return Err(Error::DimensionMismatch { what: "propensities", expected: self.n(), found: pi.len() });
        }
        if let Some(bad) = pi.iter().find(|p| !(p.is_finite() && **p > 0.0 && **p < 1.0)) {
            return Err(Error::InvalidInput(format!("propensity {bad} outside (0, 1)")));
        }
        self.pi = Some(pi);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn k(&self) -> usize {
        self.s.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn treatment(&self) -> &[i8] {
        &self.a
    }

    pub fn reward(&self) -> &[f64] {
        &self.r
    }

    pub fn reward_shift(&self) -> f64 {
        self.reward_shift
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn sensitive_names(&self) -> &[String] {
        &self.sensitive_names
    }

    pub fn propensity(&self) -> Option<&[f64]> {
        self.pi.as_deref()
    }

    /// Propensities, or an error when none were attached.
    pub fn require_propensity(&self) -> Result<&[f64]> {
        self.propensity()
            .ok_or_else(|| Error::InvalidInput("dataset has no propensities; set them before fitting".into()))
    }

    /// Kernel features: the row-wise concatenation `(X, S)`.
    pub fn features(&self) -> DMatrix<f64> {
        join_features(&self.x, &self.s)
    }

    /// Rows selected by `idx`, in that order (duplicates allowed).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            s: self.s.select_rows(idx),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            r: idx.iter().map(|&i| self.r[i]).collect(),
            pi: self.pi.as_ref().map(|pi| idx.iter().map(|&i| pi[i]).collect()),
            reward_shift: self.reward_shift,
            covariate_names: self.covariate_names.clone(),
            sensitive_names: self.sensitive_names.clone(),
        }
    }

    /// Constant propensity design: `pi_i = P(A=+1)` for treated rows and
    /// `1 - P(A=+1)` otherwise, with the probability estimated by counting.
    pub fn set_constant_propensity(&self) -> Result<Dataset> {
        let n = self.n();
        let treated = self.a.iter().filter(|&&a| a == 1).count();
        if treated == 0 || treated == n {
            return Err(Error::DegeneratePropensity);
        }
        let p = treated as f64 / n as f64;
        let pi = self.a.iter().map(|&a| if a == 1 { p } else { 1.0 - p }).collect();
        self.clone().with_propensity(pi)
    }

    /// Fills propensities from a fitted logistic model of `P(A=+1 | X, S)`.
    pub fn apply_propensity(&self, model: &PropensityModel) -> Result<Dataset> {
        let p1 = model.predict(&self.x, &self.s)?;
        let pi = p1
            .iter()
            .zip(&self.a)
            .map(|(&p, &a)| if a == 1 { p } else { 1.0 - p })
            .collect();
        self.clone().with_propensity(pi)
    }

    /// Shifts rewards so the minimum is zero when any reward is negative.
    pub fn shift_rewards(&self) -> Dataset {
        let min = self.r.iter().copied().fold(f64::INFINITY, f64::min);
        let mut out = self.clone();
        if min < 0.0 {
            for r in &mut out.r {
                *r -= min;
            }
            out.reward_shift = self.reward_shift - min;
        }
        out
    }

    /// Rewards on the original scale (before any shift).
    pub fn raw_rewards(&self) -> Vec<f64> {
        self.r.iter().map(|r| r - self.reward_shift).collect()
    }

    /// Writes the dataset as CSV with 17 significant digits; treatments are
    /// written as -1/1 so that [`CsvSchema::for_dataset`] reloads it exactly.
    /// Rewards are written on the stored (possibly shifted) scale.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        self.write_csv_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = self.covariate_names.clone();
        header.extend(self.sensitive_names.iter().cloned());
        header.push("a".into());
        header.push("r".into());
        w.write_record(&header).map_err(csv_write_err)?;
        for i in 0..self.n() {
            let mut row: Vec<String> = Vec::with_capacity(header.len());
            row.extend(self.x.row(i).iter().map(|&v| fmt_f64(v)));
            row.extend(self.s.row(i).iter().map(|&v| fmt_f64(v)));
            row.push(self.a[i].to_string());
            row.push(fmt_f64(self.r[i]));
            w.write_record(&row).map_err(csv_write_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_write_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Shortest decimal form that parses back to the same float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn join_features(x: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let (p, k) = (x.ncols(), s.ncols());
    DMatrix::from_fn(n, p + k, |i, j| if j < p { x[(i, j)] } else { s[(i, j - p)] })
}

/// Covariate selection in a CSV schema: explicit names or every column not
/// otherwise assigned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Covariates {
    Rest,
    Named(Vec<String>),
}

impl Serialize for Covariates {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Covariates::Rest => ser.serialize_str("rest"),
            Covariates::Named(names) => names.serialize(ser),
        }
    }
}

impl<'de> Deserialize<'de> for Covariates {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Keyword(String),
            Names(Vec<String>),
        }
        match Raw::deserialize(de)? {
            Raw::Keyword(k) if k == "rest" => Ok(Covariates::Rest),
            Raw::Keyword(k) => Err(serde::de::Error::custom(format!(
                "covariates must be a list of column names or \"rest\", got \"{k}\""
            ))),
            Raw::Names(names) => Ok(Covariates::Named(names)),
        }
    }
}

/// Column roles for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub treatment: String,
    pub reward: String,
    pub sensitive: Vec<String>,
    pub covariates: Covariates,
    /// Raw treatment level coded as +1. Defaults to the lexicographically
    /// larger of the two levels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treated_level: Option<String>,
}

impl CsvSchema {
    /// The schema matching [`Dataset::write_csv`] output.
    pub fn for_dataset(d: &Dataset) -> CsvSchema {
        CsvSchema {
            treatment: "a".into(),
            reward: "r".into(),
            sensitive: d.sensitive_names.clone(),
            covariates: Covariates::Named(d.covariate_names.clone()),
            treated_level: Some("1".into()),
        }
    }
}

/// Loads a CSV file (header row required). Propensities are left unset.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = File::open(path)?;
    load_csv_from(file, schema)
}

pub fn load_csv_from<R: std::io::Read>(input: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
    };
    let a_col = col(&schema.treatment)?;
    let r_col = col(&schema.reward)?;
    if schema.sensitive.is_empty() {
        return Err(Error::Schema("at least one sensitive column is required".into()));
    }
    let s_cols = schema.sensitive.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;
    let x_cols: Vec<usize> = match &schema.covariates {
        Covariates::Named(names) => names.iter().map(|n| col(n)).collect::<Result<_>>()?,
        Covariates::Rest => (0..header.len())
            .filter(|j| *j != a_col && *j != r_col && !s_cols.contains(j))
            .collect(),
    };
    if x_cols.is_empty() {
        return Err(Error::Schema("at least one covariate column is required".into()));
    }
    let mut used = BTreeSet::new();
    for &j in x_cols.iter().chain(&s_cols).chain([&a_col, &r_col]) {
        if !used.insert(j) {
            return Err(Error::Schema(format!("column `{}` assigned to more than one role", header[j])));
        }
    }

    let mut xs = Vec::new();
    let mut ss = Vec::new();
    let mut raw_a = Vec::new();
    let mut rs = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Csv { row, column: String::new(), message: e.to_string() })?;
        let cell = |j: usize| -> Result<&str> {
            let v = record.get(j).map(str::trim).unwrap_or("");
            if v.is_empty() {
                Err(Error::Csv { row, column: header[j].clone(), message: "missing value".into() })
            } else {
                Ok(v)
            }
        };
        let num = |j: usize| -> Result<f64> {
            let v = cell(j)?;
            match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(Error::Csv { row, column: header[j].clone(), message: format!("cannot parse `{v}` as a finite number") }),
            }
        };
        for &j in &x_cols {
            xs.push(num(j)?);
        }
        for &j in &s_cols {
            ss.push(num(j)?);
        }
        raw_a.push(cell(a_col)?.to_string());
        rs.push(num(r_col)?);
    }

    let n = rs.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 data rows, found {n}")));
    }
    let levels: BTreeSet<&str> = raw_a.iter().map(String::as_str).collect();
    if levels.len() != 2 {
        return Err(Error::Schema(format!(
            "treatment column `{}` must have exactly 2 distinct levels, found {}",
            schema.treatment,
            levels.len()
        )));
    }
    let treated = match &schema.treated_level {
        Some(level) if levels.contains(level.as_str()) => level.clone(),
        Some(level) => {
            return Err(Error::Schema(format!("treated level `{level}` does not occur in column `{}`", schema.treatment)))
        }
        None => levels.iter().next_back().map(|s| s.to_string()).unwrap_or_default(),
    };
    let a = raw_a.iter().map(|v| if *v == treated { 1 } else { -1 }).collect();

    let x = DMatrix::from_row_slice(n, x_cols.len(), &xs);
    let s = DMatrix::from_row_slice(n, s_cols.len(), &ss);
    Dataset::new(x, s, a, rs)?.with_names(
        x_cols.iter().map(|&j| header[j].clone()).collect(),
        s_cols.iter().map(|&j| header[j].clone()).collect(),
    )
}

/// Ridge-penalized logistic model of `P(A=+1 | X, S)`; coefficients are
/// ordered (intercept, X columns, S columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub coefficients: Vec<f64>,
    pub penalty: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl PropensityModel {
    /// Fitted `P(A=+1)`, clipped to `[1e-6, 1 - 1e-6]`.
    pub fn predict(&self, x: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<Vec<f64>> {
        let q = 1 + x.ncols() + s.ncols();
        if q != self.coefficients.len() {
            return Err(Error::DimensionMismatch { what: "propensity features", expected: self.coefficients.len(), found: q });
        }
        let design = logistic_design(x, s);
        let eta = &design * DVector::from_column_slice(&self.coefficients);
        Ok(eta
            .iter()
            .map(|&e| sigmoid(e).clamp(PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP))
            .collect())
    }
}

const LOGISTIC_MAX_ITER: usize = 100;
const LOGISTIC_GRAD_TOL: f64 = 1e-8;

fn logistic_design(x: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, k) = (x.ncols(), s.ncols());
    DMatrix::from_fn(x.nrows(), 1 + p + k, |i, j| match j {
        0 => 1.0,
        j if j <= p => x[(i, j - 1)],
        j => s[(i, j - 1 - p)],
    })
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Fits `P(A=+1 | X, S)` by iteratively reweighted least squares (Newton
/// steps with step halving) on the mean log-likelihood minus
/// `penalty/2 * |slopes|^2`. The intercept is not penalized.
pub fn fit_penalized_logistic(d: &Dataset, penalty: f64) -> Result<PropensityModel> {
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return Err(Error::InvalidInput(format!("penalty must be a nonnegative number, got {penalty}")));
    }
    let treated = d.a.iter().filter(|&&a| a == 1).count();
    if treated == 0 || treated == d.n() {
        return Err(Error::DegeneratePropensity);
    }
    let design = logistic_design(&d.x, &d.s);
    let n = d.n() as f64;
    let q = design.ncols();
    let y = DVector::from_iterator(d.n(), d.a.iter().map(|&a| if a == 1 { 1.0 } else { 0.0 }));

    let objective = |beta: &DVector<f64>| -> f64 {
        let eta = &design * beta;
        let ll: f64 = eta.iter().zip(y.iter()).map(|(&e, &yi)| yi * e - softplus(e)).sum::<f64>() / n;
        ll - 0.5 * penalty * beta.rows(1, q - 1).norm_squared()
    };

    let mut beta = DVector::<f64>::zeros(q);
    let mut obj = objective(&beta);
    let mut grad_norm = f64::INFINITY;
    for iter in 0..LOGISTIC_MAX_ITER {
        let eta = &design * &beta;
        let prob = eta.map(sigmoid);
        let mut grad = design.tr_mul(&(&y - &prob)) / n;
        for j in 1..q {
            grad[j] -= penalty * beta[j];
        }
        grad_norm = grad.norm();
        if grad_norm <= LOGISTIC_GRAD_TOL {
            return Ok(PropensityModel { coefficients: beta.as_slice().to_vec(), penalty, iterations: iter, gradient_norm: grad_norm });
        }
        let weights = prob.map(|p| p * (1.0 - p));
        let mut weighted = design.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= weights[i];
        }
        let mut hess = design.tr_mul(&weighted) / n;
        for j in 1..q {
            hess[(j, j)] += penalty;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                let ridge = 1e-12 * (1.0 + hess.diagonal().amax());
                hess += DMatrix::identity(q, q) * ridge;
                hess.cholesky()
                    .ok_or_else(|| Error::Numerical("singular logistic Hessian".into()))?
                    .solve(&grad)
            }
        };
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let cand_obj = objective(&cand);
            if cand_obj >= obj || t < 1e-10 {
                beta = cand;
                obj = cand_obj;
                break;
            }
            t *= 0.5;
        }
    }
    Err(Error::NonConvergence { what: "penalized logistic regression", iterations: LOGISTIC_MAX_ITER, residual: grad_norm })
}
