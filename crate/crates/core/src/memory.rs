//! Least-squares linear associative memory.
//!
//! A projection weight `W` (d_out × d_in) is viewed as the minimizer of
//! `Σ ‖W kᵢ − vᵢ‖²` over stored key/value pairs, i.e. the solution of the
//! normal equations `W K Kᵀ = V Kᵀ`. Consecutive batches of new associations
//! are folded in with a closed-form correction that keeps every previously
//! stored pair in the objective:
//!
//! ```text
//! R     = V₂ − W K₂
//! C_new = C_prev + K₂ K₂ᵀ
//! Δ     = R K₂ᵀ (C_new + βI)⁻¹
//! ```
//!
//! `C` starts from the (scaled) uncentered covariance of keys the layer
//! already stores, either exactly (`K₀ K₀ᵀ`) or as `λ E[k kᵀ]` estimated
//! from sampled keys.

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MemoryError {
    #[error(
        "singular system (condition estimate {cond_estimate:.3e}); \
         add a ridge term with reg_beta > 0"
    )]
    SingularSystem { cond_estimate: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sample key set is empty")]
    EmptySampleSet,
    #[error("key matrix has no columns")]
    EmptyKeys,
    #[error("key column {0} is all zeros")]
    ZeroKey(usize),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("lambda must be positive, got {0}")]
    InvalidLambda(f64),
    #[error("reg_beta must be non-negative, got {0}")]
    InvalidBeta(f64),
}

fn check_keys(keys: &Matrix) -> Result<(), MemoryError> {
    if keys.ncols() == 0 {
        return Err(MemoryError::EmptyKeys);
    }
    if keys.iter().any(|v| !v.is_finite()) {
        return Err(MemoryError::NonFinite("keys"));
    }
    for (j, col) in keys.column_iter().enumerate() {
        if col.iter().all(|v| *v == 0.0) {
            return Err(MemoryError::ZeroKey(j));
        }
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<(), MemoryError> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(MemoryError::InvalidBeta(beta));
    }
    Ok(())
}

fn solve(rhs: &Matrix, gram: &Matrix, beta: f64) -> Result<linalg::SpdSolution, MemoryError> {
    linalg::solve_spd_right(gram, rhs, beta).map_err(|s| MemoryError::SingularSystem {
        cond_estimate: s.cond_estimate,
    })
}

/// Solves `W (K₀K₀ᵀ + βI) = V₀K₀ᵀ` for the weight storing `(K₀, V₀)`.
pub fn solve_initial_weight(k0: &Matrix, v0: &Matrix, reg_beta: f64) -> Result<Matrix, MemoryError> {
    check_keys(k0)?;
    check_beta(reg_beta)?;
    if v0.ncols() != k0.ncols() {
        return Err(MemoryError::ShapeMismatch(format!(
            "{} keys but {} values",
            k0.ncols(),
            v0.ncols()
        )));
    }
    let mut gram = k0 * k0.transpose();
    linalg::symmetrize(&mut gram);
    let rhs = v0 * k0.transpose();
    Ok(solve(&rhs, &gram, reg_beta)?.x)
}

/// Running `C_accu`: the pretraining covariance plus every edit key's outer
/// product accumulated so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceAccumulator {
    pub matrix: Matrix,
    pub lambda: f64,
    pub n_pretrain_samples: usize,
    /// Edit keys folded in through [`CovarianceAccumulator::accumulate`].
    pub n_accumulated: usize,
}

impl CovarianceAccumulator {
    /// Exact `K₀K₀ᵀ` from an explicit pretraining key set (λ is recorded as
    /// the sample count, which makes the two bootstrap modes agree).
    pub fn exact(keys: &Matrix) -> Result<Self, MemoryError> {
        if keys.ncols() == 0 {
            return Err(MemoryError::EmptySampleSet);
        }
        check_keys(keys)?;
        let mut matrix = keys * keys.transpose();
        linalg::symmetrize(&mut matrix);
        Ok(Self {
            matrix,
            lambda: keys.ncols() as f64,
            n_pretrain_samples: keys.ncols(),
            n_accumulated: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// `C ← C + K Kᵀ`, then re-symmetrize.
    pub fn accumulate(&mut self, keys: &Matrix) -> Result<(), MemoryError> {
        if keys.nrows() != self.dim() {
            return Err(MemoryError::ShapeMismatch(format!(
                "keys have {} rows, covariance is {}x{}",
                keys.nrows(),
                self.dim(),
                self.dim()
            )));
        }
        self.matrix += keys * keys.transpose();
        linalg::symmetrize(&mut self.matrix);
        self.n_accumulated += keys.ncols();
        Ok(())
    }

    pub fn bytes(&self) -> usize {
        self.matrix.len() * std::mem::size_of::<f64>()
    }
}

/// `λ · (K Kᵀ) / n` from sampled keys: the uncentered covariance scaled by
/// the balance factor.
pub fn bootstrap_covariance(sample_keys: &Matrix, lambda: f64) -> Result<CovarianceAccumulator, MemoryError> {
    if sample_keys.ncols() == 0 {
        return Err(MemoryError::EmptySampleSet);
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(MemoryError::InvalidLambda(lambda));
    }
    if sample_keys.iter().any(|v| !v.is_finite()) {
        return Err(MemoryError::NonFinite("sample keys"));
    }
    let n = sample_keys.ncols();
    if n < sample_keys.nrows() {
        warn!(
            "covariance bootstrap uses {} samples for dimension {}; the estimate is rank deficient",
            n,
            sample_keys.nrows()
        );
    }
    let mut matrix = sample_keys * sample_keys.transpose();
    matrix *= lambda / n as f64;
    linalg::symmetrize(&mut matrix);
    Ok(CovarianceAccumulator {
        matrix,
        lambda,
        n_pretrain_samples: n,
        n_accumulated: 0,
    })
}

/// Output of a consecutive update.
#[derive(Debug, Clone)]
pub struct DeltaSolution {
    pub delta: Matrix,
    pub covariance: CovarianceAccumulator,
    pub cond_estimate: f64,
}

/// Closed-form consecutive update for new associations `(K₂, V₂)` against
/// the current weight.
pub fn compute_delta(
    w_current: &Matrix,
    k2: &Matrix,
    v2: &Matrix,
    c_prev: &CovarianceAccumulator,
    reg_beta: f64,
) -> Result<DeltaSolution, MemoryError> {
    check_shapes(w_current, k2, v2.nrows(), v2.ncols(), c_prev)?;
    let residual = v2 - w_current * k2;
    delta_from_residual(&residual, k2, c_prev, reg_beta)
}

/// Same update as [`compute_delta`] with the residual `R = V₂ − W K₂` given
/// directly, which avoids re-forming `W K₂` when the caller already holds R.
pub fn delta_from_residual(
    residual: &Matrix,
    k2: &Matrix,
    c_prev: &CovarianceAccumulator,
    reg_beta: f64,
) -> Result<DeltaSolution, MemoryError> {
    check_keys(k2)?;
    check_beta(reg_beta)?;
    if residual.ncols() != k2.ncols() {
        return Err(MemoryError::ShapeMismatch(format!(
            "{} residual columns for {} keys",
            residual.ncols(),
            k2.ncols()
        )));
    }
    if k2.nrows() != c_prev.dim() {
        return Err(MemoryError::ShapeMismatch(format!(
            "keys have {} rows, covariance is {}x{}",
            k2.nrows(),
            c_prev.dim(),
            c_prev.dim()
        )));
    }
    if residual.iter().any(|v| !v.is_finite()) {
        return Err(MemoryError::NonFinite("residual"));
    }
    let mut covariance = c_prev.clone();
    covariance.accumulate(k2)?;
    let rhs = residual * k2.transpose();
    let sol = solve(&rhs, &covariance.matrix, reg_beta)?;
    Ok(DeltaSolution {
        delta: sol.x,
        covariance,
        cond_estimate: sol.cond_estimate,
    })
}

fn check_shapes(
    w: &Matrix,
    k2: &Matrix,
    v_rows: usize,
    v_cols: usize,
    c: &CovarianceAccumulator,
) -> Result<(), MemoryError> {
    if w.ncols() != k2.nrows() || w.ncols() != c.dim() {
        return Err(MemoryError::ShapeMismatch(format!(
            "weight is {}x{}, keys have {} rows, covariance is {}x{}",
            w.nrows(),
            w.ncols(),
            k2.nrows(),
            c.dim(),
            c.dim()
        )));
    }
    if v_rows != w.nrows() || v_cols != k2.ncols() {
        return Err(MemoryError::ShapeMismatch(format!(
            "values are {}x{}, expected {}x{}",
            v_rows,
            v_cols,
            w.nrows(),
            k2.ncols()
        )));
    }
    Ok(())
}

/// `W + Δ`.
pub fn apply_update(w: &Matrix, delta: &Matrix) -> Result<Matrix, MemoryError> {
    if w.shape() != delta.shape() {
        return Err(MemoryError::ShapeMismatch(format!(
            "weight is {:?}, delta is {:?}",
            w.shape(),
            delta.shape()
        )));
    }
    Ok(w + delta)
}

/// Explicit pretraining associations, kept only in exact bootstrap mode so
/// that a from-scratch joint solve can be compared against the consecutive
/// result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSet {
    pub keys: Matrix,
    pub values: Matrix,
}

impl PretrainSet {
    pub fn covariance(&self) -> Result<CovarianceAccumulator, MemoryError> {
        CovarianceAccumulator::exact(&self.keys)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::relative_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn orthonormal_keys_store_values_directly() {
        let k0 = Matrix::identity(2, 2);
        let v0 = m(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let w = solve_initial_weight(&k0, &v0, 0.0).unwrap();
        assert!(relative_error(&w, &v0) < 1e-15);
    }

    #[test]
    fn rank_deficient_keys_are_singular() {
        let k0 = m(2, 1, &[1.0, 0.0]);
        let v0 = m(2, 1, &[1.0, 1.0]);
        match solve_initial_weight(&k0, &v0, 0.0) {
            Err(MemoryError::SingularSystem { .. }) => {}
            other => panic!("expected SingularSystem, got {other:?}"),
        }
        let msg = solve_initial_weight(&k0, &v0, 0.0).unwrap_err().to_string();
        assert!(msg.contains("reg_beta"));
    }

    #[test]
    fn recovers_planted_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w_star = gaussian(5, 8, &mut rng);
        let k0 = gaussian(8, 12, &mut rng);
        let v0 = &w_star * &k0;
        let w = solve_initial_weight(&k0, &v0, 0.0).unwrap();
        assert!(relative_error(&w, &w_star) < 1e-8);
        // normal-equation residual post-condition
        let lhs = &w * (&k0 * k0.transpose());
        let rhs = &v0 * k0.transpose();
        assert!(relative_error(&lhs, &rhs) <= 1e-8);
    }

    #[test]
    fn bootstrap_examples() {
        let keys = Matrix::identity(2, 2);
        let c = bootstrap_covariance(&keys, 4.0).unwrap();
        assert_eq!(c.matrix, m(2, 2, &[2.0, 0.0, 0.0, 2.0]));

        let single = m(2, 1, &[3.0, 4.0]);
        let c = bootstrap_covariance(&single, 1.0).unwrap();
        assert_eq!(c.matrix, m(2, 2, &[9.0, 12.0, 12.0, 16.0]));

        assert_eq!(
            bootstrap_covariance(&Matrix::zeros(3, 0), 1.0).unwrap_err(),
            MemoryError::EmptySampleSet
        );
        assert!(matches!(
            bootstrap_covariance(&keys, 0.0),
            Err(MemoryError::InvalidLambda(_))
        ));
    }

    #[test]
    fn bootstrap_trace_scales_with_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let keys = gaussian(64, 256, &mut rng);
        let c = bootstrap_covariance(&keys, 15000.0).unwrap();
        let mean_sq = keys.column_iter().map(|k| k.norm_squared()).sum::<f64>() / 256.0;
        assert!((c.trace() - 15000.0 * mean_sq).abs() <= 1e-9 * c.trace());
    }

    #[test]
    fn zero_residual_gives_exact_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = gaussian(3, 4, &mut rng);
        let k2 = gaussian(4, 2, &mut rng);
        let v2 = &w * &k2;
        let c = CovarianceAccumulator::exact(&gaussian(4, 6, &mut rng)).unwrap();
        let sol = compute_delta(&w, &k2, &v2, &c, 0.0).unwrap();
        assert!(sol.delta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn orthogonal_insertion_hand_example() {
        // One pretraining key e1 -> e1; insert e2 -> 5 e2.
        let w = Matrix::identity(2, 2);
        let c_prev = CovarianceAccumulator::exact(&m(2, 1, &[1.0, 0.0])).unwrap();
        let k2 = m(2, 1, &[0.0, 1.0]);
        let v2 = m(2, 1, &[0.0, 5.0]);
        let sol = compute_delta(&w, &k2, &v2, &c_prev, 0.0).unwrap();
        assert_eq!(sol.covariance.matrix, Matrix::identity(2, 2));
        assert!(relative_error(&sol.delta, &m(2, 2, &[0.0, 0.0, 0.0, 4.0])) < 1e-15);
        let w_new = apply_update(&w, &sol.delta).unwrap();
        assert!(relative_error(&(&w_new * &k2), &v2) < 1e-15);
        assert_eq!(&w_new * m(2, 1, &[1.0, 0.0]), m(2, 1, &[1.0, 0.0]));

        // oracle: joint solve over both associations
        let joint = solve_initial_weight(
            &Matrix::identity(2, 2),
            &m(2, 2, &[1.0, 0.0, 0.0, 5.0]),
            0.0,
        )
        .unwrap();
        assert!(relative_error(&w_new, &joint) < 1e-14);
    }

    #[test]
    fn conflicting_value_is_least_squares_compromise() {
        let w = Matrix::identity(2, 2);
        let c_prev = CovarianceAccumulator::exact(&Matrix::identity(2, 2)).unwrap();
        let k2 = m(2, 1, &[1.0, 0.0]);
        let v2 = m(2, 1, &[3.0, 0.0]);
        let sol = compute_delta(&w, &k2, &v2, &c_prev, 0.0).unwrap();
        assert!(relative_error(&sol.delta, &m(2, 2, &[1.0, 0.0, 0.0, 0.0])) < 1e-15);
        let w_new = apply_update(&w, &sol.delta).unwrap();
        assert!((w_new[(0, 0)] - 2.0).abs() < 1e-15);

        // oracle: normal equations over {(e1,e1), (e2,e2), (e1,3e1)}
        let keys = m(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let vals = m(2, 3, &[1.0, 0.0, 3.0, 0.0, 1.0, 0.0]);
        let joint = solve_initial_weight(&keys, &vals, 0.0).unwrap();
        assert!(relative_error(&w_new, &joint) < 1e-14);
    }

    #[test]
    fn delta_solves_normal_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = gaussian(6, 10, &mut rng);
        let c = bootstrap_covariance(&gaussian(10, 40, &mut rng), 3.0).unwrap();
        let k2 = gaussian(10, 4, &mut rng);
        let v2 = gaussian(6, 4, &mut rng);
        for beta in [0.0, 0.5] {
            let sol = compute_delta(&w, &k2, &v2, &c, beta).unwrap();
            let r = &v2 - &w * &k2;
            let mut lhs_mat = sol.covariance.matrix.clone();
            for i in 0..10 {
                lhs_mat[(i, i)] += beta;
            }
            let lhs = &sol.delta * lhs_mat;
            let rhs = &r * k2.transpose();
            assert!(relative_error(&lhs, &rhs) <= 1e-8);
        }
    }

    #[test]
    fn shape_and_key_errors() {
        let w = Matrix::identity(2, 2);
        let c = CovarianceAccumulator::exact(&Matrix::identity(2, 2)).unwrap();
        let k_bad = Matrix::identity(3, 1);
        let v = Matrix::zeros(2, 1);
        assert!(matches!(
            compute_delta(&w, &k_bad, &v, &c, 0.0),
            Err(MemoryError::ShapeMismatch(_))
        ));
        let k_zero = Matrix::zeros(2, 1);
        assert_eq!(
            compute_delta(&w, &k_zero, &v, &c, 0.0).unwrap_err(),
            MemoryError::ZeroKey(0)
        );
        assert!(matches!(
            apply_update(&w, &Matrix::zeros(3, 2)),
            Err(MemoryError::ShapeMismatch(_))
        ));
        assert!(matches!(
            compute_delta(&w, &Matrix::identity(2, 1), &v, &c, -1.0),
            Err(MemoryError::InvalidBeta(_))
        ));
    }

    #[test]
    fn apply_update_examples() {
        let w = Matrix::identity(2, 2);
        assert_eq!(apply_update(&w, &Matrix::zeros(2, 2)).unwrap(), w);
        let d = m(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(apply_update(&w, &d).unwrap(), m(2, 2, &[2.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn chained_updates_equal_summed_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = gaussian(3, 3, &mut rng);
        let deltas: Vec<Matrix> = (0..3).map(|_| gaussian(3, 3, &mut rng)).collect();
        let chained = deltas
            .iter()
            .fold(w.clone(), |acc, d| apply_update(&acc, d).unwrap());
        let summed = deltas.iter().fold(Matrix::zeros(3, 3), |acc, d| acc + d);
        assert!(relative_error(&chained, &(&w + summed)) < 1e-14);
    }

    #[test]
    fn delta_is_linear_in_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = bootstrap_covariance(&gaussian(5, 20, &mut rng), 2.0).unwrap();
        let k2 = gaussian(5, 3, &mut rng);
        let r = gaussian(4, 3, &mut rng);
        let d1 = delta_from_residual(&r, &k2, &c, 0.0).unwrap().delta;
        let d3 = delta_from_residual(&(&r * 3.0), &k2, &c, 0.0).unwrap().delta;
        assert!(relative_error(&d3, &(&d1 * 3.0)) < 1e-12);
    }
}
