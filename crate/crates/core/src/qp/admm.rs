//! Operator-splitting solver with active-set polishing.
//!
//! The program `min 1/2 z^T D z - e^T z` over `C = { l <= z <= u, a^T z = 0 }`
//! is split as `x = y` with the quadratic handled by a regularized linear
//! solve in `x` and the constraint set by the exact projection in `y`.
//! Variables with zero-width boxes are removed first, the remaining problem is
//! diagonally equilibrated, the penalty parameter follows residual balancing,
//! and whenever the iterates are close to optimal the guessed active set is
//! solved exactly and accepted if it passes the optimality check.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::project::BoxHyperplane;
use super::{KktResiduals, QpProblem, QpSolution};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Relative residual tolerance, applied coordinate by coordinate to the
    /// stationarity condition; `None` means `1e-8 * (1 + median |e_i|)`.
    pub tol: Option<f64>,
    pub max_iter: usize,
    /// Initial penalty in equilibrated units.
    pub rho: f64,
    /// Proximal weight keeping the linear solve definite.
    pub sigma: f64,
    /// Over-relaxation factor in `(0, 2)`.
    pub relaxation: f64,
    /// Residuals are evaluated every `check_every` iterations.
    pub check_every: usize,
    pub polish: bool,
    pub equilibrate: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: None,
            max_iter: 200_000,
            rho: 0.1,
            sigma: 1e-6,
            relaxation: 1.6,
            check_every: 25,
            polish: true,
            equilibrate: true,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64, max_iter: usize) -> Self {
        SolverOptions { tol: Some(tol), max_iter, ..Default::default() }
    }

    fn tolerance(&self, p: &QpProblem) -> f64 {
        self.tol.unwrap_or_else(|| 1e-8 * (1.0 + median_abs(&p.e)))
    }
}

/// Primal and dual iterates in the original units, reusable as a starting
/// point for a problem with the same `D` and bounds but a different `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub z: DVector<f64>,
    /// Multiplier of the constraint set: `D z - e + lambda = 0` at optimum.
    pub lambda: DVector<f64>,
    pub rho: f64,
}

/// Solves `p` from a cold start.
pub fn solve_qp(p: &QpProblem, opts: &SolverOptions) -> Result<QpSolution> {
    solve_qp_warm(p, opts, None).map(|(sol, _)| sol)
}

/// The problem after removing fixed variables and equilibrating.
struct Scaled {
    free: Vec<usize>,
    fixed_z: DVector<f64>,
    /// `c * S D_FF S`.
    p: DMatrix<f64>,
    /// `c * S q_F`.
    q: DVector<f64>,
    s: DVector<f64>,
    cost: f64,
    set: BoxHyperplane,
}

impl Scaled {
    fn build(prob: &QpProblem, equilibrate: bool) -> Result<Scaled> {
        let m = prob.dim();
        let mut free = Vec::with_capacity(m);
        let mut fixed_z = DVector::zeros(m);
        for i in 0..m {
            if prob.upper[i] > prob.lower[i] {
                free.push(i);
            } else {
                fixed_z[i] = prob.lower[i];
            }
        }
        let nf = free.len();
        let fixed: Vec<usize> = (0..m).filter(|i| prob.upper[*i] <= prob.lower[*i]).collect();
        let d_ff = DMatrix::from_fn(nf, nf, |i, j| prob.d[(free[i], free[j])]);
        let mut q = DVector::from_fn(nf, |i, _| -prob.e[free[i]]);
        let mut b = 0.0;
        for &j in &fixed {
            let zj = fixed_z[j];
            if zj != 0.0 {
                for (fi, &i) in free.iter().enumerate() {
                    q[fi] += prob.d[(i, j)] * zj;
                }
                b -= prob.eq[j] * zj;
            }
        }

        let max_diag = (0..nf).map(|i| d_ff[(i, i)]).fold(0.0, f64::max);
        let s = DVector::from_fn(nf, |i, _| {
            let dii = d_ff[(i, i)];
            if equilibrate && dii > 1e-12 * max_diag.max(1e-300) {
                (1.0 / dii.sqrt()).clamp(1e-4, 1e4)
            } else {
                1.0
            }
        });
        let mut p = d_ff;
        for j in 0..nf {
            for i in 0..nf {
                p[(i, j)] *= s[i] * s[j];
            }
        }
        let mut q = q.component_mul(&s);
        let cost = if equilibrate && nf > 0 {
            let mean_col = p.column_iter().map(|c| c.amax()).sum::<f64>() / nf as f64;
            (1.0 / mean_col.max(median_abs(&q)).max(1e-300)).clamp(1e-4, 1e4)
        } else {
            1.0
        };
        p *= cost;
        q *= cost;

        let lower = DVector::from_fn(nf, |i, _| prob.lower[free[i]] / s[i]);
        let upper = DVector::from_fn(nf, |i, _| prob.upper[free[i]] / s[i]);
        let a = DVector::from_fn(nf, |i, _| prob.eq[free[i]] * s[i]);
        let set = BoxHyperplane::new(lower, upper, a, b)?;
        Ok(Scaled { free, fixed_z, p, q, s, cost, set })
    }

    fn unscale(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut z = self.fixed_z.clone();
        for (fi, &i) in self.free.iter().enumerate() {
            z[i] = x[fi] * self.s[fi];
        }
        z
    }
}

fn median_abs(v: &DVector<f64>) -> f64 {
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    mags[mags.len() / 2]
}

fn factor(p: &DMatrix<f64>, shift: f64) -> Result<Cholesky<f64, Dyn>> {
    let mut k = p.clone();
    for i in 0..k.nrows() {
        k[(i, i)] += shift;
    }
    Cholesky::new(k).ok_or_else(|| Error::Numerical("regularized quadratic term is not positive definite".into()))
}

fn finite(v: &DVector<f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical("non-finite iterate in QP solver".into()))
    }
}

/// Solves `p`, optionally from `warm`, and returns the final iterates for
/// reuse.
pub fn solve_qp_warm(p: &QpProblem, opts: &SolverOptions, warm: Option<&WarmStart>) -> Result<(QpSolution, WarmStart)> {
    p.validate()?;
    if !(opts.relaxation > 0.0 && opts.relaxation < 2.0) || opts.rho <= 0.0 || opts.sigma <= 0.0 || opts.check_every == 0 {
        return Err(Error::InvalidInput("invalid solver options".into()));
    }
    let tol = opts.tolerance(p);
    let sc = Scaled::build(p, opts.equilibrate)?;
    let nf = sc.free.len();

    if nf == 0 {
        let warm = WarmStart { z: sc.fixed_z.clone(), lambda: DVector::zeros(p.dim()), rho: opts.rho };
        return Ok((finish(p, sc.fixed_z.clone(), 0, true, false)?, warm));
    }

    if let Some(ws) = warm {
        if ws.z.len() == p.dim() && ws.z.iter().all(|v| v.is_finite()) {
            // a starting point that is already optimal is returned unchanged
            let r = p.residuals(&ws.z)?;
            let dz = &p.d * &ws.z;
            let z_scale = ws.z.amax().max(1.0);
            if r.primal_eq <= tol * z_scale && r.bound_violation == 0.0 && stationary(p, &ws.z, &dz, tol)? {
                let sol = finish_with(p, ws.z.clone(), r, 0, true, false);
                let warm = WarmStart { z: ws.z.clone(), lambda: &p.e - &dz, rho: ws.rho };
                return Ok((sol, warm));
            }
        }
    }

    let mut rho = warm.map_or(opts.rho, |w| w.rho).clamp(1e-6, 1e6);
    let mut x = DVector::zeros(nf);
    let mut w = DVector::zeros(nf);
    if let Some(ws) = warm {
        if ws.z.len() == p.dim() && ws.lambda.len() == p.dim() {
            for (fi, &i) in sc.free.iter().enumerate() {
                x[fi] = ws.z[i] / sc.s[fi];
                w[fi] = ws.lambda[i] * sc.cost * sc.s[fi] / rho;
            }
        }
    }
    let mut y = sc.set.project(&x);
    let sigma = opts.sigma;
    let alpha = opts.relaxation;
    let mut chol = factor(&sc.p, sigma + rho)?;
    let mut last_polish_key: Option<Vec<i8>> = None;

    let mut iter = 0;
    while iter < opts.max_iter {
        iter += 1;
        let rhs = &x * sigma + (&y - &w) * rho - &sc.q;
        let x_new = chol.solve(&rhs);
        let px = &rhs - &x_new * (sigma + rho);
        let xt = &x_new * alpha + &y * (1.0 - alpha);
        let v = &xt + &w;
        let tau = sc.set.multiplier(&v);
        let t = &v - &sc.set.a * tau;
        let y_new = DVector::from_fn(nf, |i, _| t[i].max(sc.set.lower[i]).min(sc.set.upper[i]));
        w = &v - &y_new;
        x = x_new;
        y = y_new;

        if iter % opts.check_every != 0 && iter != opts.max_iter {
            continue;
        }
        finite(&x)?;
        finite(&w)?;

        let lam = &w * rho;
        let mut prim = 0.0f64;
        let mut prim_scale = 0.0f64;
        // dual residual relative to each coordinate's own magnitude
        let mut dual = 0.0f64;
        for i in 0..nf {
            let si = sc.s[i];
            prim = prim.max((si * (x[i] - y[i])).abs());
            prim_scale = prim_scale.max((si * x[i]).abs()).max((si * y[i]).abs());
            let scale = px[i].abs().max(sc.q[i].abs()).max(lam[i].abs()).max(si * sc.cost);
            let r = (px[i] + sc.q[i] + lam[i]).abs() / scale;
            dual = dual.max(r);
        }
        let eps_prim = tol * prim_scale.max(1.0);
        let admm_done = prim <= eps_prim && dual <= tol;

        let near = prim <= 1e-3 * prim_scale.max(1.0) && dual <= 1e-3;
        if opts.polish && (near || admm_done) {
            // box part of the multiplier decides the active-set guess
            let key: Vec<i8> = (0..nf)
                .map(|i| {
                    let mu = rho * (t[i] - y[i]);
                    if y[i] - sc.set.lower[i] < -mu {
                        -1
                    } else if sc.set.upper[i] - y[i] < mu {
                        1
                    } else {
                        0
                    }
                })
                .collect();
            if last_polish_key.as_ref() != Some(&key) {
                if let Some(xp) = polish(&sc, &key) {
                    let z = sc.unscale(&xp);
                    let r = p.residuals(&z)?;
                    let dz = &p.d * &z;
                    let z_scale = z.amax().max(1.0);
                    if stationary(p, &z, &dz, tol)? && r.primal_eq <= tol * z_scale && r.bound_violation <= tol * z_scale {
                        let lambda = &p.e - &dz;
                        let sol = finish_with(p, z, r, iter, true, true);
                        log::debug!("qp polished after {iter} iterations (m = {}, free = {nf})", p.dim());
                        let warm = WarmStart { z: sol.z.clone(), lambda, rho };
                        return Ok((sol, warm));
                    }
                }
                last_polish_key = Some(key);
            }
        }

        if admm_done {
            let z = sc.unscale(&y);
            let warm = WarmStart { z: z.clone(), lambda: unscale_lambda(&sc, &lam, p.dim()), rho };
            return Ok((finish(p, z, iter, true, false)?, warm));
        }

        let ratio = ((prim / prim_scale.max(1e-12)) / dual.max(1e-300)).sqrt();
        let rho_new = (rho * ratio).clamp(1e-6, 1e6);
        if rho_new > 5.0 * rho || rho_new < 0.2 * rho {
            w *= rho / rho_new;
            rho = rho_new;
            chol = factor(&sc.p, sigma + rho)?;
        }
    }
    let z = sc.unscale(&y);
    let lam = &w * rho;
    let warm = WarmStart { z: z.clone(), lambda: unscale_lambda(&sc, &lam, p.dim()), rho };
    let sol = finish(p, z, iter, false, false)?;
    log::warn!(
        "qp solver stopped at the iteration limit {} (stationarity {:.3e})",
        opts.max_iter,
        sol.residuals.stationarity
    );
    Ok((sol, warm))
}

/// Projected-gradient step checked coordinate by coordinate against
/// `tol * max(1, |(D z)_i|, |e_i|)`.
fn stationary(p: &QpProblem, z: &DVector<f64>, dz: &DVector<f64>, tol: f64) -> Result<bool> {
    let set = BoxHyperplane::new(p.lower.clone(), p.upper.clone(), p.eq.clone(), 0.0)?;
    let step = set.project(&(z + &p.e - dz)) - z;
    Ok((0..z.len()).all(|i| step[i].abs() <= tol * dz[i].abs().max(p.e[i].abs()).max(1.0)))
}

fn unscale_lambda(sc: &Scaled, lam: &DVector<f64>, m: usize) -> DVector<f64> {
    let mut out = DVector::zeros(m);
    for (fi, &i) in sc.free.iter().enumerate() {
        out[i] = lam[fi] / (sc.s[fi] * sc.cost);
    }
    out
}

fn finish(p: &QpProblem, z: DVector<f64>, iterations: usize, converged: bool, polished: bool) -> Result<QpSolution> {
    finite(&z)?;
    let r = p.residuals(&z)?;
    Ok(finish_with(p, z, r, iterations, converged, polished))
}

fn finish_with(p: &QpProblem, z: DVector<f64>, residuals: KktResiduals, iterations: usize, converged: bool, polished: bool) -> QpSolution {
    let objective = p.objective(&z);
    QpSolution { z, objective, residuals, iterations, converged, polished }
}

/// Solves the equality-constrained program on the guessed free set with the
/// remaining variables pinned to their bounds. `key[i]` is `-1` (lower), `1`
/// (upper) or `0` (free).
fn polish(sc: &Scaled, key: &[i8]) -> Option<DVector<f64>> {
    let nf = key.len();
    let set = &sc.set;
    let mut x = DVector::zeros(nf);
    let mut free = Vec::new();
    for i in 0..nf {
        match key[i] {
            -1 => x[i] = set.lower[i],
            1 => {
                if !set.upper[i].is_finite() {
                    return None;
                }
                x[i] = set.upper[i];
            }
            _ => free.push(i),
        }
    }
    let k = free.len();
    // rhs of the reduced stationarity: -(q_F + P_FA x_A); the pinned entries
    // contribute through the full product since x_F is still zero
    let px = &sc.p * &x;
    let rhs1 = DVector::from_fn(k, |j, _| -(sc.q[free[j]] + px[free[j]]));
    let a_f = DVector::from_fn(k, |j, _| set.a[free[j]]);
    let rhs2 = set.b - set.a.dot(&x);
    let has_eq = a_f.iter().any(|v| *v != 0.0);
    let scale_eq = 1.0 + set.a.amax() * x.amax();
    if !has_eq && rhs2.abs() > 1e-10 * scale_eq {
        return None;
    }
    if k == 0 {
        return Some(x);
    }
    let p_ff = DMatrix::from_fn(k, k, |i, j| sc.p[(free[i], free[j])]);
    let delta = 1e-7 * (1.0 + (0..k).map(|i| p_ff[(i, i)]).fold(0.0, f64::max));
    let chol = factor(&p_ff, delta).ok()?;
    let xa = if has_eq { chol.solve(&a_f) } else { DVector::zeros(k) };
    let denom = a_f.dot(&xa) + delta;
    let solve_reg = |r1: &DVector<f64>, r2: f64| -> (DVector<f64>, f64) {
        let xr = chol.solve(r1);
        if has_eq {
            let nu = (a_f.dot(&xr) - r2) / denom;
            (xr - &xa * nu, nu)
        } else {
            (xr, 0.0)
        }
    };
    let (mut xf, mut nu) = solve_reg(&rhs1, rhs2);
    let rhs_scale = 1.0 + rhs1.amax() + rhs2.abs();
    for _ in 0..30 {
        let r1 = &rhs1 - &p_ff * &xf - &a_f * nu;
        let r2 = if has_eq { rhs2 - a_f.dot(&xf) } else { 0.0 };
        if r1.amax().max(r2.abs()) <= 1e-14 * rhs_scale {
            break;
        }
        let (dx, dn) = solve_reg(&r1, r2);
        xf += dx;
        nu += dn;
    }
    if !xf.iter().all(|v| v.is_finite()) {
        return None;
    }
    for (j, &i) in free.iter().enumerate() {
        let (l, u) = (set.lower[i], set.upper[i]);
        let slack = 1e-9 * (1.0 + l.abs().max(if u.is_finite() { u.abs() } else { 0.0 }));
        if xf[j] < l - slack || xf[j] > u + slack {
            return None;
        }
        x[i] = xf[j].max(l).min(u);
    }
    Some(x)
}
