//! Linear classifier training for category models.
//!
//! The objective is the usual L2-regularized hinge loss. It is optimized
//! in its box-constrained dual by coordinate descent, the standard
//! technique for linear SVMs: each pass visits the examples in a fresh
//! seeded shuffle, updates one dual variable in closed form, and folds
//! the change straight into the primal weight vector. The bias rides
//! along as an augmented constant feature, so it is regularized like any
//! other weight. Per-example costs are rebalanced so each polarity
//! carries the same total loss weight however lopsided the counts are.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Hyperparameters for [`train_svm`].
#[derive(Debug, Clone, PartialEq)]
pub struct SvmConfig {
    /// Misclassification cost (the SVM "C"); larger means less
    /// regularization relative to the hinge term.
    pub cost: f64,
    /// Stop once the spread of projected gradients over one epoch falls
    /// below this.
    pub tol: f64,
    /// Hard cap on coordinate-descent epochs.
    pub max_epochs: usize,
    /// Seed for the per-epoch visiting order.
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            cost: 1.0,
            tol: 1e-5,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

/// A trained linear decision function `score(x) = w . x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm<T> {
    pub weights: Vec<T>,
    pub bias: T,
}

impl<T: Real> LinearSvm<T> {
    /// Signed margin of a feature vector.
    pub fn score(&self, features: &[T]) -> T {
        assert_eq!(
            features.len(),
            self.weights.len(),
            "feature length must match the trained weight vector"
        );
        dot(&self.weights, features) + self.bias
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Trains a linear SVM on labeled feature vectors.
///
/// Positives get per-example cost `cost * n / (2 * n_pos)` and negatives
/// `cost * n / (2 * n_neg)`, so both polarities contribute the same total
/// hinge weight. Deterministic for a fixed config (the only randomness is
/// the seeded visiting order).
pub fn train_svm<T: Real>(
    positives: &[Vec<T>],
    negatives: &[Vec<T>],
    cfg: &SvmConfig,
) -> Result<LinearSvm<T>> {
    if positives.is_empty() {
        return Err(Error::insufficient("positive training features", 1, 0));
    }
    if negatives.is_empty() {
        return Err(Error::insufficient("negative training features", 1, 0));
    }
    assert!(cfg.cost > 0.0, "SVM cost must be positive");
    let dim = positives[0].len();
    for f in positives.iter().chain(negatives) {
        if f.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: f.len(),
            });
        }
    }
    if positives
        .iter()
        .chain(negatives)
        .all(|f| f[..] == positives[0][..])
    {
        return Err(Error::DegenerateTrainingSet(
            "all feature vectors are identical".into(),
        ));
    }

    let n_pos = positives.len();
    let n_neg = negatives.len();
    let n = n_pos + n_neg;
    let c_pos = T::of(cfg.cost * n as f64 / (2.0 * n_pos as f64));
    let c_neg = T::of(cfg.cost * n as f64 / (2.0 * n_neg as f64));

    let rows: Vec<(&[T], T, T)> = positives
        .iter()
        .map(|f| (f.as_slice(), T::one(), c_pos))
        .chain(negatives.iter().map(|f| (f.as_slice(), -T::one(), c_neg)))
        .collect();
    // Gram diagonal over bias-augmented vectors [x; 1].
    let q_diag: Vec<T> = rows.iter().map(|&(x, _, _)| dot(x, x) + T::one()).collect();

    let mut w = vec![T::zero(); dim];
    let mut b = T::zero();
    let mut alpha = vec![T::zero(); n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut pg_max = f64::NEG_INFINITY;
        let mut pg_min = f64::INFINITY;
        for &i in &order {
            let (x, y, c) = rows[i];
            let g = y * (dot(&w, x) + b) - T::one();
            let a = alpha[i];
            let pg = if a <= T::zero() {
                g.min(T::zero())
            } else if a >= c {
                g.max(T::zero())
            } else {
                g
            };
            pg_max = pg_max.max(pg.as_f64());
            pg_min = pg_min.min(pg.as_f64());
            if pg.as_f64().abs() > 1e-12 {
                let a_new = (a - g / q_diag[i]).max(T::zero()).min(c);
                let delta = (a_new - a) * y;
                if delta != T::zero() {
                    for (wj, &xj) in w.iter_mut().zip(x) {
                        *wj = *wj + delta * xj;
                    }
                    b = b + delta;
                    alpha[i] = a_new;
                }
            }
        }
        if pg_max - pg_min < cfg.tol {
            break;
        }
    }

    Ok(LinearSvm { weights: w, bias: b })
}
