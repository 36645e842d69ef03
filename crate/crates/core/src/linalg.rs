//! Minimal dense linear algebra: Cholesky factorization and solves for
//! symmetric positive definite systems (whitening, ridge regression).

use crate::scalar::Real;

/// Lower-triangular Cholesky factor of a row-major symmetric positive
/// definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    n: usize,
    /// Row-major lower triangle (full n*n storage, upper part zero).
    l: Vec<T>,
}

impl<T: Real> Cholesky<T> {
    /// Factor `a` (row-major n x n, assumed symmetric). Returns `None`
    /// when the matrix is not positive definite.
    pub fn factor(a: &[T], n: usize) -> Option<Self> {
        assert_eq!(a.len(), n * n);
        let mut l = vec![T::zero(); n * n];
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d = d - l[j * n + k] * l[j * n + k];
            }
            if d <= T::zero() || !d.is_finite() {
                return None;
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in (j + 1)..n {
                let mut s = a[i * n + j];
                // Contiguous row segments keep this cache friendly.
                let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
                for k in 0..j {
                    s = s - ri[k] * rj[k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Some(Cholesky { n, l })
    }

    /// Solve A x = b for the factored A.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        // Forward: L y = b.
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s = s - self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        // Backward: L^T x = y.
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s = s - self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }
}

/// Multiply a row-major symmetric matrix by a vector (test helper and
/// small utilities).
pub fn matvec<T: Real>(a: &[T], n: usize, x: &[T]) -> Vec<T> {
    assert_eq!(a.len(), n * n);
    assert_eq!(x.len(), n);
    (0..n)
        .map(|i| {
            let row = &a[i * n..(i + 1) * n];
            let mut s = T::zero();
            for k in 0..n {
                s = s + row[k] * x[k];
            }
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        // B^T B + I is positive definite.
        let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = if i == j { 1.0 } else { 0.0 };
                for k in 0..n {
                    s += b[k * n + i] * b[k * n + j];
                }
                a[i * n + j] = s;
            }
        }
        a
    }

    #[test]
    fn solves_planted_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1usize, 2, 5, 17, 40] {
            let a = random_spd(&mut rng, n);
            let x_true: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b = matvec(&a, n, &x_true);
            let chol = Cholesky::factor(&a, n).expect("SPD must factor");
            let x = chol.solve(&b);
            for (xi, ti) in x.iter().zip(&x_true) {
                assert!((xi - ti).abs() < 1e-8, "n={n}: {xi} vs {ti}");
            }
        }
    }

    #[test]
    fn rejects_indefinite_matrix() {
        // [[1, 2], [2, 1]] has a negative eigenvalue.
        let a = vec![1.0, 2.0, 2.0, 1.0];
        assert!(Cholesky::<f64>::factor(&a, 2).is_none());
    }

    #[test]
    fn works_in_f32() {
        let a: Vec<f32> = vec![4.0, 2.0, 2.0, 3.0];
        let chol = Cholesky::factor(&a, 2).unwrap();
        let x = chol.solve(&[8.0, 7.0]);
        // Exact solution (1.25, 1.5).
        assert!((x[0] - 1.25).abs() < 1e-5);
        assert!((x[1] - 1.5).abs() < 1e-5);
    }
}
