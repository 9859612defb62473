//! Small dense helpers shared by the memory, hook and network modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Gram matrices whose Cholesky diagonal spread implies a condition number
/// above this are treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e14;

/// `w · x`, computed one column at a time.
///
/// Every column of the result depends only on `w` and the matching column of
/// `x`, so the same key always produces the same bits no matter how many other
/// tokens share the input matrix. Routing relies on this.
pub fn project(w: &Matrix, x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(w.nrows(), x.ncols());
    for j in 0..x.ncols() {
        out.column_mut(j).gemv(1.0, w, &x.column(j), 0.0);
    }
    out
}

pub fn frobenius(m: &Matrix) -> f64 {
    m.norm()
}

/// Relative Frobenius distance `‖a − b‖ / max(‖b‖, tiny)`.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Result of a symmetric positive-definite right solve.
#[derive(Debug, Clone)]
pub struct SpdSolution {
    pub x: Matrix,
    pub cond_estimate: f64,
}

/// Failure of [`solve_spd_right`]; carries the condition estimate (infinite
/// when the factorization itself broke down).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Singular {
    pub cond_estimate: f64,
}

/// Solves `X · (A + βI) = B` for symmetric positive-definite `A + βI`.
///
/// Uses a Cholesky factorization followed by one step of iterative
/// refinement. The returned condition estimate is `(max Lᵢᵢ / min Lᵢᵢ)²`, a
/// cheap lower bound on the 2-norm condition number.
pub fn solve_spd_right(a: &Matrix, b: &Matrix, beta: f64) -> Result<SpdSolution, Singular> {
    let n = a.nrows();
    let mut reg = a.clone();
    if beta != 0.0 {
        for i in 0..n {
            reg[(i, i)] += beta;
        }
    }
    let chol: Cholesky<f64, Dyn> = Cholesky::new(reg.clone()).ok_or(Singular {
        cond_estimate: f64::INFINITY,
    })?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d.abs()), hi.max(d.abs())));
    let cond_estimate = if lo > 0.0 { (hi / lo).powi(2) } else { f64::INFINITY };
    if !(cond_estimate <= SINGULAR_CONDITION) {
        return Err(Singular { cond_estimate });
    }

    // A is symmetric, so X A = B  <=>  A Xᵀ = Bᵀ.
    let bt = b.transpose();
    let mut xt = chol.solve(&bt);
    let resid = &bt - &reg * &xt;
    if resid.iter().any(|v| *v != 0.0) {
        xt += chol.solve(&resid);
    }
    Ok(SpdSolution {
        x: xt.transpose(),
        cond_estimate,
    })
}

/// Replaces `m` with `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}
