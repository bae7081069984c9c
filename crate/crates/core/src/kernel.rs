//! Kernel specifications and Gram matrices over joined `(X, S)` features.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::map_rows;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Gaussian,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(KernelKind::Linear),
            "gaussian" => Ok(KernelKind::Gaussian),
            other => Err(Error::InvalidInput(format!("unknown kernel `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Gaussian bandwidth; ignored by the linear kernel.
    pub sigma: f64,
}

impl KernelSpec {
    pub fn linear() -> Self {
        KernelSpec { kind: KernelKind::Linear, sigma: 1.0 }
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        let spec = KernelSpec { kind: KernelKind::Gaussian, sigma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == KernelKind::Gaussian && !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("gaussian bandwidth must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            KernelKind::Gaussian => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-d2 / (2.0 * self.sigma * self.sigma)).exp()
            }
        }
    }
}

fn rows_of(z: &DMatrix<f64>) -> Vec<Vec<f64>> {
    z.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `G[i, j] = K(z1_i, z2_j)`. Rows are computed in parallel when the
/// `parallel` feature is on.
pub fn gram(spec: &KernelSpec, z1: &DMatrix<f64>, z2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if z1.ncols() != z2.ncols() {
        return Err(Error::DimensionMismatch { what: "kernel feature columns", expected: z1.ncols(), found: z2.ncols() });
    }
    let a = rows_of(z1);
    let b = rows_of(z2);
    let rows = map_rows(a.len(), |i| b.iter().map(|bj| spec.eval(&a[i], bj)).collect::<Vec<f64>>());
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| rows[i][j]))
}

/// Gram matrix of `z` with itself, symmetrized as `(G + G^T)/2`.
pub fn gram_symmetric(spec: &KernelSpec, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = gram(spec, z, z)?;
    Ok((&g + g.transpose()) * 0.5)
}

/// Adds `1e-10 * trace / m` to the diagonal.
pub fn add_jitter(g: &mut DMatrix<f64>) {
    let m = g.nrows();
    if m == 0 {
        return;
    }
    let jitter = 1e-10 * g.trace().abs() / m as f64;
    for i in 0..m {
        g[(i, i)] += jitter;
    }
}

const MEDIAN_SUBSAMPLE: usize = 1000;
const MEDIAN_SEED: u64 = 0x5eed;

/// Median pairwise Euclidean distance over at most 1000 rows (fixed seed).
pub fn median_heuristic_sigma(z: &DMatrix<f64>) -> Result<f64> {
    let m = z.nrows();
    if m < 2 {
        return Err(Error::InvalidInput("median heuristic needs at least 2 rows".into()));
    }
    let rows = rows_of(z);
    let picked: Vec<usize> = if m > MEDIAN_SUBSAMPLE {
        let mut rng = ChaCha8Rng::seed_from_u64(MEDIAN_SEED);
        let mut idx = sample(&mut rng, m, MEDIAN_SUBSAMPLE).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..m).collect()
    };
    let mut dists = Vec::with_capacity(picked.len() * (picked.len() - 1) / 2);
    for (a, &i) in picked.iter().enumerate() {
        for &j in &picked[a + 1..] {
            let d2: f64 = rows[i].iter().zip(&rows[j]).map(|(x, y)| (x - y) * (x - y)).sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let len = dists.len();
    let median = if len % 2 == 1 { dists[len / 2] } else { 0.5 * (dists[len / 2 - 1] + dists[len / 2]) };
    if median <= 0.0 {
        return Err(Error::InvalidInput("median pairwise distance is zero (rows are identical)".into()));
    }
    Ok(median)
}

/// Column z-scoring fitted on training features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Constant columns get scale 1.
    pub fn fit(z: &DMatrix<f64>) -> Standardizer {
        let n = z.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(z.ncols());
        let mut scale = Vec::with_capacity(z.ncols());
        for col in z.column_iter() {
            let mu = col.sum() / n;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean.push(mu);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Standardizer { mean, scale }
    }

    pub fn apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != self.mean.len() {
            return Err(Error::DimensionMismatch { what: "standardized columns", expected: self.mean.len(), found: z.ncols() });
        }
        Ok(DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| (z[(i, j)] - self.mean[j]) / self.scale[j]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn row(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, v.len(), v)
    }

    #[test]
    fn kernel_examples() {
        let lin = gram(&KernelSpec::linear(), &row(&[1.0, 2.0]), &row(&[1.0, 2.0])).unwrap();
        assert_eq!(lin[(0, 0)], 5.0);
        let g = KernelSpec::gaussian(1.0).unwrap();
        assert_eq!(gram(&g, &row(&[0.3, 4.0]), &row(&[0.3, 4.0])).unwrap()[(0, 0)], 1.0);
        let v = gram(&g, &row(&[0.0]), &row(&[2.0])).unwrap()[(0, 0)];
        assert!((v - (-2.0f64).exp()).abs() < 1e-16);
        assert!((v - 0.13534).abs() < 1e-5);
        assert!(gram(&g, &row(&[0.0]), &row(&[1.0, 2.0])).is_err());
        assert!(KernelSpec::gaussian(0.0).is_err());
    }

    #[test]
    fn linear_gram_is_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DMatrix::from_fn(7, 3, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let g = gram(&KernelSpec::linear(), &a, &b).unwrap();
        assert!((g - &a * b.transpose()).amax() < 1e-15);
    }

    #[test]
    fn gaussian_gram_is_psd_with_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &m in &[10usize, 80, 200] {
            let z = DMatrix::from_fn(m, 4, |_, _| rng.random_range(-2.0..2.0));
            let g = gram_symmetric(&KernelSpec::gaussian(0.7).unwrap(), &z).unwrap();
            assert!(g.iter().all(|&v| v > 0.0 && v <= 1.0));
            assert!((0..m).all(|i| g[(i, i)] == 1.0));
            let min_eig = g.symmetric_eigenvalues().min();
            assert!(min_eig >= -1e-10 * m as f64, "min eig {min_eig}");
        }
    }

    #[test]
    fn median_heuristic_examples() {
        let two = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 3.0, 0.0]);
        assert_eq!(median_heuristic_sigma(&two).unwrap(), 3.0);
        let four = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(median_heuristic_sigma(&four).unwrap(), 1.5);
        let same = DMatrix::from_element(5, 2, 1.0);
        assert!(median_heuristic_sigma(&same).is_err());
    }

    #[test]
    fn median_heuristic_subsamples_deterministically() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = DMatrix::from_fn(1500, 2, |_, _| rng.random_range(0.0..1.0));
        let a = median_heuristic_sigma(&z).unwrap();
        let b = median_heuristic_sigma(&z).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.3 && a < 0.7);
    }

    #[test]
    fn jitter_and_standardizer() {
        let mut g = DMatrix::<f64>::identity(4, 4) * 2.0;
        add_jitter(&mut g);
        assert!((g[(0, 0)] - (2.0 + 2e-10)).abs() < 1e-18);
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let st = Standardizer::fit(&z);
        let t = st.apply(&z).unwrap();
        assert!((t.column(0).sum()).abs() < 1e-15);
        assert_eq!(t[(0, 1)], 0.0);
    }
}
