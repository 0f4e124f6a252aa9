//! Band LU factorization with partial pivoting.
//!
//! Storage follows the LAPACK band layout: a matrix with `kl` sub- and `ku`
//! super-diagonals is stored column-major in `2 kl + ku + 1` band rows, the
//! extra `kl` rows above holding fill generated by row interchanges. Solves
//! are available for both the matrix and its transpose from one
//! factorization, which lets the stationary solve and the adjoint solve share
//! the work.

use crate::error::{Error, Result};
use crate::scalar::{to_f64, Scalar};

use super::sparse::CscMatrix;

/// Band matrix builder.
#[derive(Debug, Clone)]
pub struct BandedMatrix<T> {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<T>,
}

impl<T: Scalar> BandedMatrix<T> {
    pub fn new(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            ldab,
            ab: vec![T::zero(); ldab * n],
        }
    }

    /// Populate from a sparse matrix whose bandwidths fit (kl, ku).
    pub fn from_csc(a: &CscMatrix<T>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "banded factorization needs a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let (kl, ku) = a.bandwidths();
        let mut b = Self::new(a.nrows(), kl, ku);
        a.for_each_entry(|i, j, v| b.add(i, j, v));
        Ok(b)
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n);
        debug_assert!(i + self.kl + self.ku >= j && i <= j + self.kl);
        j * self.ldab + (self.kl + self.ku + i - j)
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let s = self.slot(i, j);
        self.ab[s] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        let s = self.slot(i, j);
        self.ab[s] += v;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.ab[self.slot(i, j)]
    }

    /// Estimated factor storage (in scalars) for an `n` x `n` system with
    /// half-bandwidth `band` on both sides.
    pub fn factor_storage(n: usize, band: usize) -> usize {
        n.saturating_mul(3 * band + 1)
    }

    /// LU factorization with partial pivoting. Consumes the builder.
    pub fn factorize(mut self) -> Result<BandedLu<T>> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let mut ipiv = vec![0usize; n];
        for j in 0..n {
            let pmax = (j + kl).min(n - 1);
            let mut p = j;
            let mut best = self.get(j, j).abs();
            for i in (j + 1)..=pmax {
                let v = self.get(i, j).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            ipiv[j] = p;
            if best == T::zero() || !best.is_finite() {
                return Err(Error::Numerical {
                    what: format!("banded LU: zero or non-finite pivot at column {j}"),
                    residual: to_f64(best),
                });
            }
            let cmax = (j + kl + ku).min(n - 1);
            if p != j {
                for c in j..=cmax {
                    let sj = self.slot(j, c);
                    let sp = self.slot(p, c);
                    self.ab.swap(sj, sp);
                }
            }
            let piv = self.get(j, j);
            for i in (j + 1)..=pmax {
                let m = self.get(i, j) / piv;
                self.set(i, j, m);
                if m == T::zero() {
                    continue;
                }
                for c in (j + 1)..=cmax {
                    let v = self.get(j, c);
                    if v != T::zero() {
                        let s = self.slot(i, c);
                        self.ab[s] -= m * v;
                    }
                }
            }
        }
        Ok(BandedLu {
            n,
            kl,
            ku,
            ldab: self.ldab,
            ab: self.ab,
            ipiv,
        })
    }
}

/// Factored band matrix.
#[derive(Debug, Clone)]
pub struct BandedLu<T> {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<T>,
    ipiv: Vec<usize>,
}

impl<T: Scalar> BandedLu<T> {
    #[inline]
    fn at(&self, i: usize, j: usize) -> T {
        self.ab[j * self.ldab + (self.kl + self.ku + i - j)]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Solve `A x = b` in place.
    pub fn solve(&self, b: &mut [T]) -> Result<()> {
        if b.len() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "rhs length {} != {}",
                b.len(),
                self.n
            )));
        }
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        // Forward: apply interchanges and L.
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                b.swap(p, j);
            }
            let bj = b[j];
            if bj != T::zero() {
                let imax = (j + kl).min(n - 1);
                for i in (j + 1)..=imax {
                    b[i] = b[i] - self.at(i, j) * bj;
                }
            }
        }
        // Back substitution with U (bandwidth kl + ku after pivoting).
        for j in (0..n).rev() {
            b[j] = b[j] / self.at(j, j);
            let bj = b[j];
            if bj != T::zero() {
                let imin = j.saturating_sub(kl + ku);
                for i in imin..j {
                    b[i] = b[i] - self.at(i, j) * bj;
                }
            }
        }
        Ok(())
    }

    /// Solve `A^T x = b` in place.
    pub fn solve_transpose(&self, b: &mut [T]) -> Result<()> {
        if b.len() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "rhs length {} != {}",
                b.len(),
                self.n
            )));
        }
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        // U^T is lower triangular: forward substitution.
        for j in 0..n {
            let imin = j.saturating_sub(kl + ku);
            let mut acc = b[j];
            for i in imin..j {
                acc = acc - self.at(i, j) * b[i];
            }
            b[j] = acc / self.at(j, j);
        }
        // L^T: backward sweep, undoing interchanges as we go.
        for j in (0..n.saturating_sub(1)).rev() {
            let imax = (j + kl).min(n - 1);
            let mut acc = b[j];
            for i in (j + 1)..=imax {
                acc = acc - self.at(i, j) * b[i];
            }
            b[j] = acc;
            let p = self.ipiv[j];
            if p != j {
                b.swap(p, j);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.iter().cloned().collect();
        let mut x = b.to_vec();
        for j in 0..n {
            let p = (j..n)
                .max_by(|&r, &s| m[r][j].abs().partial_cmp(&m[s][j].abs()).unwrap())
                .unwrap();
            m.swap(j, p);
            x.swap(j, p);
            assert!(m[j][j].abs() > 0.0, "dense oracle hit a zero pivot");
            for i in (j + 1)..n {
                let f = m[i][j] / m[j][j];
                for c in j..n {
                    m[i][c] -= f * m[j][c];
                }
                x[i] -= f * x[j];
            }
        }
        for j in (0..n).rev() {
            x[j] /= m[j][j];
            for i in 0..j {
                x[i] -= m[i][j] * x[j];
            }
        }
        x
    }

    fn random_banded(n: usize, kl: usize, ku: usize, seed: u64) -> (BandedMatrix<f64>, Vec<Vec<f64>>) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut banded = BandedMatrix::new(n, kl, ku);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i <= j + kl && j <= i + ku {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    let v = if i == j { v + 4.0 } else { v };
                    banded.set(i, j, v);
                    dense[i][j] = v;
                }
            }
        }
        (banded, dense)
    }

    #[test]
    fn matches_dense_oracle_on_fixed_cases() {
        for (n, kl, ku, seed) in [(1, 0, 0, 1), (5, 1, 1, 2), (9, 3, 2, 3), (20, 4, 7, 4)] {
            let (banded, dense) = random_banded(n, kl, ku, seed);
            let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
            let expected = dense_solve(&dense, &b);
            let lu = banded.factorize().unwrap();
            let mut x = b.clone();
            lu.solve(&mut x).unwrap();
            for (xi, ei) in x.iter().zip(&expected) {
                assert!((xi - ei).abs() < 1e-10, "solve mismatch: {xi} vs {ei}");
            }
            // Transpose solve against the dense transpose.
            let dense_t: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| dense[j][i]).collect())
                .collect();
            let expected_t = dense_solve(&dense_t, &b);
            let mut xt = b.clone();
            lu.solve_transpose(&mut xt).unwrap();
            for (xi, ei) in xt.iter().zip(&expected_t) {
                assert!((xi - ei).abs() < 1e-10, "transpose mismatch: {xi} vs {ei}");
            }
        }
    }

    #[test]
    fn pivoting_handles_zero_diagonal() {
        // [0 1; 1 0] needs the interchange.
        let mut m = BandedMatrix::<f64>::new(2, 1, 1);
        m.set(0, 1, 1.0);
        m.set(1, 0, 1.0);
        let lu = m.factorize().unwrap();
        let mut b = vec![2.0, 3.0];
        lu.solve(&mut b).unwrap();
        assert_eq!(b, vec![3.0, 2.0]);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut m = BandedMatrix::<f64>::new(3, 1, 1);
        m.set(0, 0, 1.0);
        m.set(1, 1, 1.0);
        // Last column/row all zero.
        assert!(m.factorize().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]
        #[test]
        fn random_band_systems_hit_small_residuals(
            n in 2usize..24,
            kl in 0usize..5,
            ku in 0usize..5,
            seed in 0u64..1000,
        ) {
            let kl = kl.min(n - 1);
            let ku = ku.min(n - 1);
            let (banded, dense) = random_banded(n, kl, ku, seed);
            let mut rng = StdRng::seed_from_u64(seed ^ 0xabcd);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lu = banded.factorize().unwrap();
            let mut x = b.clone();
            lu.solve(&mut x).unwrap();
            for i in 0..n {
                let mut r = -b[i];
                for j in 0..n {
                    r += dense[i][j] * x[j];
                }
                prop_assert!(r.abs() < 1e-9, "residual {r} at row {i}");
            }
            let mut xt = b.clone();
            lu.solve_transpose(&mut xt).unwrap();
            for i in 0..n {
                let mut r = -b[i];
                for j in 0..n {
                    r += dense[j][i] * xt[j];
                }
                prop_assert!(r.abs() < 1e-9, "transpose residual {r} at row {i}");
            }
        }
    }
}
