//! Hyperparameter selection, fairness-budget sweeps and the choice of `c`.
//!
//! All outer loops go through [`Exec`], and every reduction runs in index
//! order, so results do not depend on the thread count.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_f64, Dataset};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kernel::{median_heuristic_sigma, KernelKind, KernelSpec};
use crate::policy::{evaluate, value_of_assignments, assign, FitOptions, FitProblem, FourFifths, PolicyModel};
use crate::proxy::ProxyKind;

/// Number of equispaced points used to scan the fitted derivatives.
pub const DENSE_POINTS: usize = 10_000;

/// One `(kappa, sigma)` candidate. `sigma` is ignored by the linear kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub kappa: f64,
    pub sigma: f64,
}

impl GridPoint {
    pub fn spec(&self, kind: KernelKind) -> Result<KernelSpec> {
        match kind {
            KernelKind::Linear => Ok(KernelSpec::linear()),
            KernelKind::Gaussian => KernelSpec::gaussian(self.sigma),
        }
    }
}

/// Cartesian grid of `kappas` and bandwidths `factor * median distance` of
/// the joined features of `d`.
pub fn median_grid(d: &Dataset, kappas: &[f64], factors: &[f64]) -> Result<Vec<GridPoint>> {
    let median = median_heuristic_sigma(&d.features())?;
    Ok(kappas.iter().flat_map(|&kappa| factors.iter().map(move |&f| GridPoint { kappa, sigma: f * median })).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvScore {
    pub point: GridPoint,
    /// Mean held-out value over the two folds, `None` when a fold failed.
    pub value: Option<f64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best: GridPoint,
    pub best_value: f64,
    pub scores: Vec<CvScore>,
}

fn fold_value(train: &Dataset, held: &Dataset, point: GridPoint, kind: KernelKind, proxy: Option<ProxyKind>, c: &[f64], opts: &FitOptions) -> Result<f64> {
    let mut problem = FitProblem::new(train, point.spec(kind)?, proxy, point.kappa, opts)?;
    let c = if proxy.is_some() { c } else { &[] };
    let model = problem.fit(c)?;
    if !model.diagnostics.converged {
        return Err(Error::NonConvergence { what: "dual solve", iterations: model.diagnostics.iterations, residual: model.diagnostics.kkt.stationarity });
    }
    Ok(value_of_assignments(held, &assign(&model, held.x(), held.s())?)?.raw)
}

/// Twofold cross-validation of the held-out empirical value over `grid`.
///
/// The split is a seeded permutation; the winner maximizes the mean value,
/// with ties going to the smaller `kappa` and then the smaller `sigma`.
pub fn cross_validate(
    d: &Dataset,
    kind: KernelKind,
    proxy: Option<ProxyKind>,
    c: &[f64],
    grid: &[GridPoint],
    opts: &FitOptions,
    seed: u64,
    exec: &Exec,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("cross-validation grid is empty".into()));
    }
    if d.n() < 4 {
        return Err(Error::InvalidInput("cross-validation needs at least 4 rows".into()));
    }
    let mut idx: Vec<usize> = (0..d.n()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (first, second) = idx.split_at(d.n() / 2);
    let folds = [(d.subset(first), d.subset(second)), (d.subset(second), d.subset(first))];

    let results = exec.map(grid.len() * 2, |job| {
        let (train, held) = &folds[job % 2];
        fold_value(train, held, grid[job / 2], kind, proxy, c, opts)
    });

    let mut scores = Vec::with_capacity(grid.len());
    for (g, point) in grid.iter().enumerate() {
        match (&results[2 * g], &results[2 * g + 1]) {
            (Ok(a), Ok(b)) => scores.push(CvScore { point: *point, value: Some(0.5 * (a + b)), note: String::new() }),
            (a, b) => {
                let note = [a, b].iter().filter_map(|r| r.as_ref().err()).map(|e| e.to_string()).collect::<Vec<_>>().join("; ");
                scores.push(CvScore { point: *point, value: None, note });
            }
        }
    }
    let best = scores
        .iter()
        .filter_map(|s| s.value.map(|v| (v, s.point)))
        .min_by(|(va, pa), (vb, pb)| vb.total_cmp(va).then(pa.kappa.total_cmp(&pb.kappa)).then(pa.sigma.total_cmp(&pb.sigma)));
    match best {
        Some((best_value, best)) => Ok(CvResult { best, best_value, scores }),
        None => {
            let detail = scores.iter().map(|s| format!("(kappa {}, sigma {}): {}", s.point.kappa, s.point.sigma, s.note)).collect::<Vec<_>>().join(" | ");
            Err(Error::AllFitsFailed(detail))
        }
    }
}

/// Data for one replicate of a sweep.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub train: Dataset,
    pub test: Dataset,
    /// Separate data for hyperparameter selection; the training set is used
    /// when absent.
    pub tune: Option<Dataset>,
}

/// Produces the data of replicate `rep`; must be deterministic in `rep`.
pub trait ReplicateSource: Sync {
    fn draw(&self, rep: usize) -> Result<Replicate>;
}

/// Bootstrap resamples of a fixed training set, evaluated on a fixed test
/// set. Replicate 0 is the original training set.
#[derive(Debug, Clone)]
pub struct BootstrapSource {
    pub train: Dataset,
    pub test: Dataset,
    pub seed: u64,
}

impl ReplicateSource for BootstrapSource {
    fn draw(&self, rep: usize) -> Result<Replicate> {
        let train = if rep == 0 {
            self.train.clone()
        } else {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(rep as u64));
            let n = self.train.n();
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            self.train.subset(&idx)
        };
        Ok(Replicate { train, test: self.test.clone(), tune: None })
    }
}

/// How `(kappa, sigma)` are chosen for each replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hyper {
    Fixed(GridPoint),
    /// Twofold CV of the unconstrained rule on the tuning data. Bandwidths
    /// are `factor * median distance`.
    Cv { kappas: Vec<f64>, sigma_factors: Vec<f64>, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepMethod {
    pub kernel: KernelKind,
    pub proxy: ProxyKind,
    pub hyper: Hyper,
    pub fit: FitOptions,
}

/// Outcome of one fit inside a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub c: f64,
    pub value: f64,
    pub ufm: f64,
    pub proxy_test: Vec<f64>,
    pub train_proxy: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub c: f64,
    pub value_mean: f64,
    pub value_sd: f64,
    pub ufm_mean: f64,
    pub ufm_sd: f64,
    /// Mean absolute test proxy per sensitive attribute.
    pub proxy_mean: Vec<f64>,
    pub n_reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn k(&self) -> usize {
        self.points.first().map_or(0, |p| p.proxy_mean.len())
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["c".to_string(), "value_mean".into(), "value_sd".into(), "ufm_mean".into(), "ufm_sd".into()];
        cols.extend((1..=self.k()).map(|k| format!("proxy_mean_{k}")));
        cols.push("n_reps".into());
        cols.join(",")
    }

    pub fn csv_row(&self, p: &SweepPoint) -> String {
        let mut cols = vec![fmt_f64(p.c), fmt_f64(p.value_mean), fmt_f64(p.value_sd), fmt_f64(p.ufm_mean), fmt_f64(p.ufm_sd)];
        cols.extend(p.proxy_mean.iter().map(|v| fmt_f64(*v)));
        cols.push(p.n_reps.to_string());
        cols.join(",")
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", self.csv_header())?;
        for p in &self.points {
            writeln!(out, "{}", self.csv_row(p))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub curve: SweepCurve,
    /// Per replicate: the fits along the grid, or the error that stopped it.
    pub records: Vec<std::result::Result<Vec<FitRecord>, String>>,
    pub hypers: Vec<Option<GridPoint>>,
    pub rep_failures: usize,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

/// Selects the hyperparameters of one replicate.
pub fn choose_hyper(rep: &Replicate, method: &SweepMethod, exec: &Exec) -> Result<GridPoint> {
    match &method.hyper {
        Hyper::Fixed(p) => Ok(*p),
        Hyper::Cv { kappas, sigma_factors, seed } => {
            let data = rep.tune.as_ref().unwrap_or(&rep.train);
            let factors: &[f64] = if method.kernel == KernelKind::Linear { &[1.0] } else { sigma_factors };
            let grid = median_grid(data, kappas, factors)?;
            Ok(cross_validate(data, method.kernel, None, &[], &grid, &method.fit, *seed, exec)?.best)
        }
    }
}

/// Fits every budget of `c_grid` (applied to all attributes) on one
/// replicate, warm-starting along the grid.
pub fn fit_along_grid(rep: &Replicate, method: &SweepMethod, point: GridPoint, c_grid: &[f64]) -> Result<Vec<FitRecord>> {
    let mut problem = FitProblem::new(&rep.train, point.spec(method.kernel)?, Some(method.proxy), point.kappa, &method.fit)?;
    let k = problem.n_budgets();
    c_grid
        .iter()
        .map(|&c| {
            let model: PolicyModel = problem.fit(&vec![c; k])?;
            let report = evaluate(&rep.test, &model, method.proxy)?;
            Ok(FitRecord {
                c,
                value: report.value,
                ufm: report.ufm,
                proxy_test: report.proxy_test,
                train_proxy: model.diagnostics.train_proxy,
                converged: model.diagnostics.converged,
            })
        })
        .collect()
}

fn check_grid(c_grid: &[f64]) -> Result<()> {
    if c_grid.is_empty() {
        return Err(Error::InvalidInput("c grid is empty".into()));
    }
    if c_grid.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::InvalidInput("c grid values must be finite and nonnegative".into()));
    }
    if c_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("c grid must be strictly ascending".into()));
    }
    Ok(())
}

/// Fits and evaluates every budget on `reps` replicates and aggregates the
/// results per budget. Failed replicates are excluded and counted.
pub fn sweep_c(source: &dyn ReplicateSource, method: &SweepMethod, c_grid: &[f64], reps: usize, exec: &Exec) -> Result<SweepOutcome> {
    check_grid(c_grid)?;
    if reps == 0 {
        return Err(Error::InvalidInput("reps must be at least 1".into()));
    }
    let inner = Exec::sequential();
    let per_rep = exec.map(reps, |r| -> (Option<GridPoint>, std::result::Result<Vec<FitRecord>, String>) {
        let rep = match source.draw(r) {
            Ok(rep) => rep,
            Err(e) => return (None, Err(e.to_string())),
        };
        let point = match choose_hyper(&rep, method, &inner) {
            Ok(p) => p,
            Err(e) => return (None, Err(e.to_string())),
        };
        (Some(point), fit_along_grid(&rep, method, point, c_grid).map_err(|e| e.to_string()))
    });
    let (hypers, records): (Vec<_>, Vec<_>) = per_rep.into_iter().unzip();
    let ok: Vec<&Vec<FitRecord>> = records.iter().filter_map(|r| r.as_ref().ok()).collect();
    let rep_failures = reps - ok.len();
    for (r, rec) in records.iter().enumerate() {
        if let Err(e) = rec {
            log::warn!("replicate {r} failed: {e}");
        }
    }
    if ok.is_empty() {
        let first = records.iter().find_map(|r| r.as_ref().err()).cloned().unwrap_or_default();
        return Err(Error::AllFitsFailed(format!("all {reps} replicates failed; first error: {first}")));
    }
    let k = ok[0].first().map_or(0, |f| f.proxy_test.len());
    let points = c_grid
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let values: Vec<f64> = ok.iter().map(|r| r[j].value).collect();
            let ufms: Vec<f64> = ok.iter().map(|r| r[j].ufm).collect();
            let (value_mean, value_sd) = mean_sd(&values);
            let (ufm_mean, ufm_sd) = mean_sd(&ufms);
            let proxy_mean = (0..k).map(|kk| ok.iter().map(|r| r[j].proxy_test[kk].abs()).sum::<f64>() / ok.len() as f64).collect();
            SweepPoint { c, value_mean, value_sd, ufm_mean, ufm_sd, proxy_mean, n_reps: ok.len() }
        })
        .collect();
    Ok(SweepOutcome { curve: SweepCurve { points }, records, hypers, rep_failures })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEffective {
    pub c0: f64,
    /// No grid location had `U'(c) > V'(c)`; `c0` is then the largest `c`.
    pub not_found: bool,
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Least-squares polynomial coefficients (lowest degree first) in `t`.
fn polyfit(t: &[f64], y: &[f64], degree: usize) -> Result<DVector<f64>> {
    let x = DMatrix::from_fn(t.len(), degree + 1, |i, j| t[i].powi(j as i32));
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * DVector::from_column_slice(y);
    let chol = xtx.clone().cholesky().ok_or_else(|| Error::Numerical("singular normal equations in polynomial fit".into()))?;
    let eig = xtx.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 1e-12 * hi) {
        return Err(Error::Numerical(format!("singular normal equations in polynomial fit (condition {:.3e})", hi / lo.max(0.0))));
    }
    Ok(chol.solve(&xty))
}

fn poly_derivative(coef: &DVector<f64>, t: f64) -> f64 {
    coef.iter().enumerate().skip(1).map(|(j, a)| j as f64 * a * t.powi(j as i32 - 1)).sum()
}

/// Smallest `c` where the fitted, normalized unfairness curve rises faster
/// than the fitted, normalized value curve.
pub fn most_cost_effective_c(curve: &SweepCurve, degree: usize) -> Result<CostEffective> {
    let pts = &curve.points;
    if degree == 0 {
        return Err(Error::InvalidInput("polynomial degree must be at least 1".into()));
    }
    if pts.len() < degree + 1 {
        return Err(Error::InvalidInput(format!("need at least {} curve points for degree {degree}, got {}", degree + 1, pts.len())));
    }
    let cs: Vec<f64> = pts.iter().map(|p| p.c).collect();
    check_grid(&cs)?;
    let (lo, hi) = (cs[0], cs[cs.len() - 1]);
    let t: Vec<f64> = cs.iter().map(|c| (c - lo) / (hi - lo)).collect();
    let v = polyfit(&t, &normalize(&pts.iter().map(|p| p.value_mean).collect::<Vec<_>>()), degree)?;
    let u = polyfit(&t, &normalize(&pts.iter().map(|p| p.ufm_mean).collect::<Vec<_>>()), degree)?;
    for i in 0..DENSE_POINTS {
        let ti = i as f64 / (DENSE_POINTS - 1) as f64;
        if poly_derivative(&u, ti) - poly_derivative(&v, ti) > 0.0 {
            return Ok(CostEffective { c0: lo + ti * (hi - lo), not_found: false });
        }
    }
    Ok(CostEffective { c0: hi, not_found: true })
}

/// Largest grid value whose evaluation passes the four-fifths rule.
pub fn select_c_four_fifths<F>(mut eval: F, c_grid: &[f64]) -> Result<f64>
where
    F: FnMut(f64) -> Result<FourFifths>,
{
    check_grid(c_grid)?;
    for &c in c_grid.iter().rev() {
        if eval(c)?.pass {
            return Ok(c);
        }
    }
    Err(Error::NoSelection(format!("no c in {c_grid:?} passes the four-fifths rule; try smaller budgets")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{generate_with, replicate_rng, Stream};

    fn curve(cs: &[f64], v: impl Fn(f64) -> f64, u: impl Fn(f64) -> f64) -> SweepCurve {
        let points = cs
            .iter()
            .map(|&c| SweepPoint { c, value_mean: v(c), value_sd: 0.0, ufm_mean: u(c), ufm_sd: 0.0, proxy_mean: vec![0.0], n_reps: 1 })
            .collect();
        SweepCurve { points }
    }

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| 0.02 * (i + 1) as f64).collect()
    }

    #[test]
    fn falling_unfairness_with_rising_value_has_no_crossing() {
        let cs = grid(8);
        let out = most_cost_effective_c(&curve(&cs, |c| 5.0 + c, |c| 1.0 - 3.0 * c), 3).unwrap();
        assert!(out.not_found);
        assert_eq!(out.c0, 0.16);
    }

    #[test]
    fn planted_crossing_is_recovered() {
        // normalized U' - V' changes sign at t = 0.4
        let cs = grid(8);
        let (lo, hi) = (cs[0], cs[7]);
        let t = |c: f64| (c - lo) / (hi - lo);
        let v = |c: f64| t(c);
        let u = |c: f64| t(c) * t(c) * (t(c) - 0.6) / 0.4 + 0.0;
        let out = most_cost_effective_c(&curve(&cs, v, u), 3).unwrap();
        assert!(!out.not_found);
        let expected = {
            // crossing of the normalized derivatives found by bisection
            let range = {
                let vals: Vec<f64> = cs.iter().map(|&c| u(c)).collect();
                vals.iter().copied().fold(f64::NEG_INFINITY, f64::max) - vals.iter().copied().fold(f64::INFINITY, f64::min)
            };
            let g = |s: f64| (3.0 * s * s - 1.2 * s) / 0.4 / range - 1.0;
            let (mut a, mut b) = (0.0, 1.0);
            for _ in 0..100 {
                let m = 0.5 * (a + b);
                if g(m) > 0.0 { b = m } else { a = m }
            }
            lo + a * (hi - lo)
        };
        assert!((out.c0 - expected).abs() <= 0.02, "{} vs {}", out.c0, expected);
    }

    #[test]
    fn cost_effective_point_is_affine_invariant() {
        let cs = grid(8);
        let v = |c: f64| (c * 20.0).sin();
        let u = |c: f64| c * c * 30.0 - c;
        let a = most_cost_effective_c(&curve(&cs, v, u), 3).unwrap();
        let b = most_cost_effective_c(&curve(&cs, |c| 7.0 * v(c) - 3.0, |c| 0.25 * u(c) + 11.0), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cost_effective_needs_enough_points() {
        let cs = grid(3);
        assert!(most_cost_effective_c(&curve(&cs, |c| c, |c| c), 3).is_err());
        let dup = SweepCurve { points: curve(&[0.1, 0.1, 0.2, 0.3], |c| c, |c| c).points };
        assert!(most_cost_effective_c(&dup, 3).is_err());
    }

    #[test]
    fn four_fifths_selection() {
        let cs = [0.02, 0.04, 0.06];
        let pass = |ok: bool| FourFifths { pass: ok, ratio: if ok { 0.9 } else { 0.5 } };
        assert_eq!(select_c_four_fifths(|_| Ok(pass(true)), &cs).unwrap(), 0.06);
        assert_eq!(select_c_four_fifths(|c| Ok(pass(c < 0.03)), &cs).unwrap(), 0.02);
        assert!(matches!(select_c_four_fifths(|_| Ok(pass(false)), &cs), Err(Error::NoSelection(_))));
    }

    fn small_data(seed: u64, n: usize) -> Dataset {
        generate_with(2, n, 3, &mut replicate_rng(seed, 0, Stream::Train)).unwrap()
    }

    fn opts() -> FitOptions {
        FitOptions { intercept: false, ..Default::default() }
    }

    #[test]
    fn single_point_grid_is_returned() {
        let d = small_data(1, 60);
        let point = GridPoint { kappa: 0.1, sigma: 2.0 };
        let out = cross_validate(&d, KernelKind::Gaussian, None, &[], &[point], &opts(), 3, &Exec::sequential()).unwrap();
        assert_eq!(out.best, point);
    }

    #[test]
    fn cross_validation_ignores_grid_order() {
        let d = small_data(2, 80);
        let mut g = median_grid(&d, &[0.01, 0.1], &[0.5, 1.0]).unwrap();
        let a = cross_validate(&d, KernelKind::Gaussian, Some(ProxyKind::Nonlinear), &[0.05], &g, &opts(), 5, &Exec::sequential()).unwrap();
        g.reverse();
        let b = cross_validate(&d, KernelKind::Gaussian, Some(ProxyKind::Nonlinear), &[0.05], &g, &opts(), 5, &Exec::sequential()).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.best_value, b.best_value);
    }

    #[test]
    fn empty_grid_rejected() {
        let d = small_data(3, 40);
        assert!(cross_validate(&d, KernelKind::Linear, None, &[], &[], &opts(), 0, &Exec::sequential()).is_err());
    }

    #[test]
    fn single_rep_sweep_matches_direct_fit() {
        let train = small_data(4, 80);
        let test = small_data(5, 100);
        let point = GridPoint { kappa: 0.1, sigma: 1.0 };
        let method = SweepMethod { kernel: KernelKind::Linear, proxy: ProxyKind::Nonlinear, hyper: Hyper::Fixed(point), fit: opts() };
        let source = BootstrapSource { train: train.clone(), test: test.clone(), seed: 0 };
        let out = sweep_c(&source, &method, &[0.05], 1, &Exec::sequential()).unwrap();
        let m = crate::policy::fit_dpa_itr(&train, KernelSpec::linear(), ProxyKind::Nonlinear, 0.1, &[0.05], &opts()).unwrap();
        let r = evaluate(&test, &m, ProxyKind::Nonlinear).unwrap();
        let p = &out.curve.points[0];
        assert_eq!(p.value_mean, r.value);
        assert_eq!(p.ufm_mean, r.ufm);
        assert_eq!(p.proxy_mean[0], r.proxy_test[0].abs());
        assert_eq!((p.n_reps, p.value_sd), (1, 0.0));
        let again = sweep_c(&source, &method, &[0.05], 1, &Exec::sequential()).unwrap();
        assert_eq!(out.curve, again.curve);
    }

    #[test]
    fn sweep_is_thread_count_independent_and_exports_csv() {
        let source = BootstrapSource { train: small_data(6, 60), test: small_data(7, 60), seed: 11 };
        let method = SweepMethod { kernel: KernelKind::Linear, proxy: ProxyKind::Nonlinear, hyper: Hyper::Fixed(GridPoint { kappa: 0.1, sigma: 1.0 }), fit: opts() };
        let cs = [0.02, 0.1];
        let seq = sweep_c(&source, &method, &cs, 3, &Exec::sequential()).unwrap();
        let par = sweep_c(&source, &method, &cs, 3, &Exec::parallel(3)).unwrap();
        assert_eq!(seq.curve, par.curve);
        let mut buf = Vec::new();
        seq.curve.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "c,value_mean,value_sd,ufm_mean,ufm_sd,proxy_mean_1,n_reps");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0.02,"));
    }

    #[test]
    fn descending_grid_rejected() {
        let source = BootstrapSource { train: small_data(8, 40), test: small_data(9, 40), seed: 0 };
        let method = SweepMethod { kernel: KernelKind::Linear, proxy: ProxyKind::Linear, hyper: Hyper::Fixed(GridPoint { kappa: 0.1, sigma: 1.0 }), fit: opts() };
        assert!(sweep_c(&source, &method, &[0.1, 0.05], 1, &Exec::sequential()).is_err());
        assert!(sweep_c(&source, &method, &[0.1], 0, &Exec::sequential()).is_err());
    }
}
