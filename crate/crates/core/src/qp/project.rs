//! Euclidean projection onto `{ z : lower <= z <= upper, a^T z = b }`.
//!
//! The projection is `clip(v - tau * a)` for the multiplier `tau` solving
//! `phi(tau) = a^T clip(v - tau * a) - b = 0`. `phi` is piecewise linear and
//! nonincreasing, so the root is bracketed between consecutive breakpoints
//! and recovered by linear interpolation.

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct BoxHyperplane {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub a: DVector<f64>,
    pub b: f64,
    breakpoints_active: bool,
}

impl BoxHyperplane {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>, a: DVector<f64>, b: f64) -> Result<Self> {
        let active = a.iter().any(|&v| v != 0.0);
        let set = BoxHyperplane { lower, upper, a, b, breakpoints_active: active };
        set.check_feasible()?;
        Ok(set)
    }

    fn check_feasible(&self) -> Result<()> {
        let scale = 1.0 + self.b.abs() + self.a.amax();
        let tol = 1e-12 * scale;
        if !self.breakpoints_active {
            if self.b.abs() > tol {
                return Err(Error::Infeasible(format!("equality 0 = {} cannot hold", self.b)));
            }
            return Ok(());
        }
        let (mut hi, mut lo) = (0.0, 0.0);
        for i in 0..self.a.len() {
            let ai = self.a[i];
            if ai > 0.0 {
                hi += ai * self.upper[i];
                lo += ai * self.lower[i];
            } else if ai < 0.0 {
                hi += ai * self.lower[i];
                lo += ai * self.upper[i];
            }
        }
        if hi < self.b - tol || lo > self.b + tol {
            return Err(Error::Infeasible(format!(
                "equality target {} outside attainable range [{lo}, {hi}]",
                self.b
            )));
        }
        Ok(())
    }

    fn clip(&self, i: usize, v: f64) -> f64 {
        v.max(self.lower[i]).min(self.upper[i])
    }

    fn phi(&self, v: &DVector<f64>, tau: f64) -> f64 {
        let mut acc = -self.b;
        for i in 0..v.len() {
            let ai = self.a[i];
            if ai != 0.0 {
                acc += ai * self.clip(i, v[i] - tau * ai);
            }
        }
        acc
    }

    fn slope(&self, v: &DVector<f64>, tau: f64) -> f64 {
        let mut s = 0.0;
        for i in 0..v.len() {
            let ai = self.a[i];
            if ai != 0.0 {
                let t = v[i] - tau * ai;
                if t > self.lower[i] && t < self.upper[i] {
                    s -= ai * ai;
                }
            }
        }
        s
    }

    pub fn multiplier(&self, v: &DVector<f64>) -> f64 {
        if !self.breakpoints_active {
            return 0.0;
        }
        let mut bps: Vec<f64> = Vec::with_capacity(2 * v.len());
        for i in 0..v.len() {
            let ai = self.a[i];
            if ai != 0.0 {
                bps.push((v[i] - self.lower[i]) / ai);
                if self.upper[i].is_finite() {
                    bps.push((v[i] - self.upper[i]) / ai);
                }
            }
        }
        bps.sort_by(f64::total_cmp);
        bps.dedup();

        // first breakpoint where phi <= 0
        let idx = bps.partition_point(|&t| self.phi(v, t) > 0.0);
        if idx == bps.len() {
            // phi > 0 at every breakpoint: root lies beyond the last one
            let last = bps[bps.len() - 1];
            let f = self.phi(v, last);
            let s = self.slope(v, last + 1.0);
            return if s < 0.0 { last - f / s } else { last };
        }
        let hi = bps[idx];
        let f_hi = self.phi(v, hi);
        if idx == 0 {
            if f_hi == 0.0 {
                return hi;
            }
            let s = self.slope(v, hi - 1.0);
            return if s < 0.0 { hi - f_hi / s } else { hi };
        }
        let lo = bps[idx - 1];
        let f_lo = self.phi(v, lo);
        if f_lo == f_hi {
            return hi;
        }
        lo + f_lo * (hi - lo) / (f_lo - f_hi)
    }

    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let tau = self.multiplier(v);
        DVector::from_fn(v.len(), |i, _| self.clip(i, v[i] - tau * self.a[i]))
    }
}
