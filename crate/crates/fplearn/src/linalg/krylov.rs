//! Preconditioned BiCGSTAB for systems whose band factor would not fit in
//! memory (large 3-d meshes).

use crate::error::{Error, Result};
use crate::scalar::{real, to_f64, Scalar};

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Solve `A x = b` with BiCGSTAB and a Jacobi preconditioner.
///
/// `apply` computes `y = A x`. `precond_diag`, when given, holds the diagonal
/// of `A`. With `deflate_ones` the iterate is re-centered against the
/// all-ones null direction of singular (but consistent) stationary systems.
pub fn bicgstab<T: Scalar>(
    apply: impl Fn(&[T], &mut [T]),
    b: &[T],
    x0: &[T],
    tol_rel: T,
    max_iter: usize,
    precond_diag: Option<&[T]>,
    deflate_ones: bool,
) -> Result<(Vec<T>, usize, T)> {
    let n = b.len();
    let inv_diag: Vec<T> = match precond_diag {
        Some(d) => d
            .iter()
            .map(|&v| {
                if v.abs() > T::epsilon() {
                    T::one() / v
                } else {
                    T::one()
                }
            })
            .collect(),
        None => vec![T::one(); n],
    };
    let prec = |v: &[T], out: &mut Vec<T>| {
        out.clear();
        out.extend(v.iter().zip(&inv_diag).map(|(&x, &d)| x * d));
    };
    let center = |x: &mut [T]| {
        if deflate_ones {
            let mean = x.iter().copied().sum::<T>() / real::<T>(n as f64);
            for v in x.iter_mut() {
                *v -= mean;
            }
        }
    };

    let bnorm = norm2(b);
    let target = tol_rel * T::max(bnorm, T::min_positive_value());
    let mut x = x0.to_vec();
    center(&mut x);

    let mut r = vec![T::zero(); n];
    apply(&x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut rhat = r.clone();
    let mut rho_prev = T::one();
    let mut alpha = T::one();
    let mut omega = T::one();
    let mut v = vec![T::zero(); n];
    let mut p = vec![T::zero(); n];
    let mut phat = Vec::with_capacity(n);
    let mut shat = Vec::with_capacity(n);
    let mut t = vec![T::zero(); n];
    let mut s = vec![T::zero(); n];

    let mut resid = norm2(&r);
    if resid <= target {
        return Ok((x, 0, resid));
    }
    for iter in 1..=max_iter {
        let rho = dot(&rhat, &r);
        if rho.abs() < T::min_positive_value() {
            rhat.copy_from_slice(&r);
            rho_prev = T::one();
            omega = T::one();
            for z in p.iter_mut() {
                *z = T::zero();
            }
            continue;
        }
        let beta = (rho / rho_prev) * (alpha / omega);
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        prec(&p, &mut phat);
        apply(&phat, &mut v);
        let denom = dot(&rhat, &v);
        if denom.abs() < T::min_positive_value() {
            return Err(Error::Numerical {
                what: "bicgstab breakdown (rhat . v = 0)".to_string(),
                residual: to_f64(resid),
            });
        }
        alpha = rho / denom;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm2(&s) <= target {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            center(&mut x);
            apply(&x, &mut t);
            for i in 0..n {
                t[i] = b[i] - t[i];
            }
            return Ok((x.clone(), iter, norm2(&t)));
        }
        prec(&s, &mut shat);
        apply(&shat, &mut t);
        let tt = dot(&t, &t);
        if tt == T::zero() {
            return Err(Error::Numerical {
                what: "bicgstab breakdown (t = 0)".to_string(),
                residual: to_f64(resid),
            });
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
        }
        center(&mut x);
        for i in 0..n {
            r[i] = s[i] - omega * t[i];
        }
        resid = norm2(&r);
        if resid <= target {
            return Ok((x.clone(), iter, resid));
        }
        rho_prev = rho;
    }
    Err(Error::Numerical {
        what: format!("bicgstab did not converge in {max_iter} iterations"),
        residual: to_f64(resid / T::max(bnorm, T::min_positive_value())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sparse::CscMatrix;

    #[test]
    fn solves_a_diagonally_dominant_system() {
        // Tridiagonal 1-d Laplacian shifted to be nonsingular.
        let n = 40;
        let mut cols = vec![Vec::new(); n];
        for j in 0..n {
            cols[j].push((j, 2.5));
            if j > 0 {
                cols[j].push((j - 1, -1.0));
            }
            if j + 1 < n {
                cols[j].push((j + 1, -1.0));
            }
        }
        let a = CscMatrix::from_columns(n, cols).unwrap();
        let xtrue: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.3).cos()).collect();
        let mut b = vec![0.0; n];
        a.matvec(&xtrue, &mut b);
        let diag = (0..n).map(|j| a.get(j, j)).collect::<Vec<_>>();
        let (x, _iters, resid) = bicgstab(
            |v, out| a.matvec(v, out),
            &b,
            &vec![0.0; n],
            1e-12,
            1000,
            Some(&diag),
            false,
        )
        .unwrap();
        assert!(resid < 1e-10);
        for (xi, ti) in x.iter().zip(&xtrue) {
            assert!((xi - ti).abs() < 1e-8);
        }
    }
}
