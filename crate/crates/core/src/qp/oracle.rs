//! Reference solver for small instances: accelerated projected gradient from
//! several deterministic starting points, with its own bisection projection.

use nalgebra::DVector;

use super::{QpProblem, QpSolution};
use crate::error::Result;

const MAX_ITER: usize = 1_000_000;

/// Projection onto `{ l <= z <= u, a^T z = 0 }` by bisection on the
/// multiplier.
fn project(p: &QpProblem, v: &DVector<f64>) -> DVector<f64> {
    let clip = |i: usize, t: f64| t.max(p.lower[i]).min(p.upper[i]);
    let phi = |tau: f64| -> f64 { (0..v.len()).map(|i| p.eq[i] * clip(i, v[i] - tau * p.eq[i])).sum() };
    let at = |tau: f64| DVector::from_fn(v.len(), |i, _| clip(i, v[i] - tau * p.eq[i]));
    if p.eq.iter().all(|a| *a == 0.0) {
        return at(0.0);
    }
    let (mut lo, mut hi) = (-1.0, 1.0);
    while phi(lo) < 0.0 && lo > -1e300 {
        lo *= 2.0;
    }
    while phi(hi) > 0.0 && hi < 1e300 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

fn starting_points(p: &QpProblem) -> Vec<DVector<f64>> {
    let finite_max = p.upper.iter().chain(p.lower.iter()).filter(|v| v.is_finite()).fold(1.0f64, |a, v| a.max(v.abs()));
    let cap = |u: f64| if u.is_finite() { u } else { 10.0 * finite_max };
    let m = p.dim();
    let lower = p.lower.clone();
    let upper = DVector::from_fn(m, |i, _| cap(p.upper[i]));
    let center = (&lower + &upper) * 0.5;
    vec![lower, upper, center]
}

/// Long-horizon projected gradient (step `1/L`, momentum with gradient
/// restart) from
/// the lower corner, the capped upper corner and the center. Returns the best
/// objective found.
pub fn brute_force_qp(p: &QpProblem) -> Result<QpSolution> {
    p.validate()?;
    let m = p.dim();
    let lmax = if m == 0 { 0.0 } else { p.d.symmetric_eigenvalues().max() };
    let step = if lmax > 1e-12 { 1.0 / lmax } else { 1.0 };
    let f = |z: &DVector<f64>| p.objective(z);
    let mut best: Option<QpSolution> = None;
    for start in starting_points(p) {
        let mut z = project(p, &start);
        let mut prev = z.clone();
        let mut momentum = 1.0f64;
        let mut iterations = 0;
        for it in 1..=MAX_ITER {
            iterations = it;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let beta = (momentum - 1.0) / t_next;
            let yv = &z + (&z - &prev) * beta;
            let grad = &p.e - &p.d * &yv;
            let z_new = project(p, &(&yv + grad * step));
            // gradient-based restart of the momentum
            let restart = (&yv - &z_new).dot(&(&z_new - &z)) > 0.0;
            prev = std::mem::replace(&mut z, z_new);
            momentum = if restart { 1.0 } else { t_next };
            if it % 1000 == 0 {
                let r = p.residuals(&z)?;
                if r.stationarity <= 1e-13 * (1.0 + z.amax()) {
                    break;
                }
            }
        }
        let residuals = p.residuals(&z)?;
        let candidate = QpSolution { objective: f(&z), z, residuals, iterations, converged: true, polished: false };
        if best.as_ref().is_none_or(|b| candidate.objective > b.objective) {
            best = Some(candidate);
        }
    }
    Ok(best.expect("at least one starting point"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn vec(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn trivial_instances() {
        let p = QpProblem::new(DMatrix::identity(2, 2), vec(&[1.0, 1.0]), vec(&[0.0, 0.0]), vec(&[10.0, 10.0]), vec(&[0.0, 0.0])).unwrap();
        let s = brute_force_qp(&p).unwrap();
        assert!((s.z - vec(&[1.0, 1.0])).amax() < 1e-12);
        let p = QpProblem::new(DMatrix::zeros(2, 2), vec(&[1.0, -1.0]), vec(&[0.0, 0.0]), vec(&[1.0, 1.0]), vec(&[0.0, 0.0])).unwrap();
        let s = brute_force_qp(&p).unwrap();
        assert_eq!(s.z.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.objective, 1.0);
    }

    #[test]
    fn interior_optimum_matches_closed_form() {
        let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let e = vec(&[1.0, 0.7]);
        let exact = d.clone().lu().solve(&e).unwrap();
        let p = QpProblem::new(d, e, vec(&[-5.0, -5.0]), vec(&[5.0, 5.0]), vec(&[0.0, 0.0])).unwrap();
        let s = brute_force_qp(&p).unwrap();
        assert!((s.z.clone() - &exact).amax() < 1e-10, "{} vs {} after {}", s.z, exact, s.iterations);
    }

    #[test]
    fn bisection_projection_is_feasible() {
        let p = QpProblem::new(
            DMatrix::zeros(3, 3),
            vec(&[0.0; 3]),
            vec(&[0.0; 3]),
            vec(&[1.0, 1.0, f64::INFINITY]),
            vec(&[1.0, 1.0, -1.0]),
        )
        .unwrap();
        let z = project(&p, &vec(&[3.0, -2.0, 0.5]));
        assert!((z[0] + z[1] - z[2]).abs() < 1e-12);
        assert!(z.iter().all(|v| *v >= 0.0));
    }
}
