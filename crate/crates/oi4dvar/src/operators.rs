//! Matrix-free solver kernels.
//!
//! Operators at model-state size only ever appear as closures mapping a
//! vector to a vector ([`LinearOperator`]); the 4D-Var Hessian, for example,
//! costs one tangent plus one (second-order) adjoint model run per product.
//! On top of that handle this module provides conjugate gradients for SPD
//! solves and a fully reorthogonalised Lanczos iteration for extremal
//! eigenpairs. Both are deterministic: fixed iteration order, and Lanczos
//! seeds its start vector from a fixed internal stream.

use crate::dense::{tridiag_eig, Matrix};
use crate::vecmath::{axpy, dot, norm, scale};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("operator is not positive definite: p^T A p = {curvature:.3e} at CG iteration {iteration}")]
    NegativeCurvature {
        iteration: usize,
        curvature: f64,
        /// Best iterate available when the failure was detected.
        iterate: Vec<f64>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Dense(#[from] crate::dense::DenseError),
}

/// A linear map available only through its action on vectors.
pub struct LinearOperator<'a> {
    dim: usize,
    symmetric: bool,
    apply_fn: Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a>,
}

impl<'a> LinearOperator<'a> {
    pub fn new(
        dim: usize,
        symmetric: bool,
        apply_fn: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a,
    ) -> LinearOperator<'a> {
        LinearOperator {
            dim,
            symmetric,
            apply_fn: Box::new(apply_fn),
        }
    }

    /// Wrap a dense matrix (handy for oracles and tests).
    pub fn from_matrix(m: &'a Matrix, symmetric: bool) -> LinearOperator<'a> {
        LinearOperator::new(m.rows(), symmetric, |v: &[f64]| m.matvec(v))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.dim);
        let out = (self.apply_fn)(v);
        debug_assert_eq!(out.len(), self.dim);
        out
    }
}

/// Result of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    /// `||r||` before each iteration, then after the last one.
    pub residual_norms: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Solve `A x = b` for symmetric positive definite `A` by conjugate
/// gradients from a zero start. Stops when `||A x - b|| <= tol * ||b||`;
/// hitting `max_iters` first returns the iterate flagged as unconverged.
/// Negative curvature (an indefinite operator) is an error carrying the
/// current iterate.
pub fn cg_solve(
    op: &LinearOperator,
    b: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<CgOutcome, OperatorError> {
    if b.len() != op.dim() {
        return Err(OperatorError::InvalidArgument(format!(
            "rhs length {} vs operator dimension {}",
            b.len(),
            op.dim()
        )));
    }
    let n = b.len();
    let b_norm = norm(b);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x,
            residual_norms: vec![0.0],
            converged: true,
            iterations: 0,
        });
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut residual_norms = vec![rs.sqrt()];
    let mut iterations = 0;
    while iterations < max_iters {
        if rs.sqrt() <= tol * b_norm {
            return Ok(CgOutcome {
                x,
                residual_norms,
                converged: true,
                iterations,
            });
        }
        let ap = op.apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(OperatorError::NegativeCurvature {
                iteration: iterations,
                curvature: pap,
                iterate: x,
            });
        }
        let alpha = rs / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rs_new = dot(&r, &r);
        residual_norms.push(rs_new.sqrt());
        let beta = rs_new / rs;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rs = rs_new;
        iterations += 1;
    }
    let converged = rs.sqrt() <= tol * b_norm;
    Ok(CgOutcome {
        x,
        residual_norms,
        converged,
        iterations,
    })
}

/// Which end of the spectrum [`lanczos_extremal`] should resolve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumEnd {
    Smallest,
    Largest,
}

/// Converged eigenpairs, eigenvalues ascending, eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

#[derive(Debug, Clone)]
pub struct LanczosResult {
    pub pairs: EigenPairs,
    /// Whether all requested pairs met the residual tolerance.
    pub converged: bool,
    /// Krylov subspace dimension actually built.
    pub steps: usize,
}

/// Estimate `||A||_2` of a symmetric operator with a fixed number of power
/// iterations from a deterministic random start.
pub fn estimate_operator_norm(op: &LinearOperator, iterations: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4E4F524D); // "NORM"
    let mut v: Vec<f64> = (0..op.dim()).map(|_| rng.gen::<f64>() - 0.5).collect();
    let mut estimate = 0.0;
    let nv = norm(&v);
    if nv == 0.0 || op.dim() == 0 {
        return 0.0;
    }
    scale(1.0 / nv, &mut v);
    for _ in 0..iterations {
        let mut av = op.apply(&v);
        estimate = norm(&av);
        if estimate == 0.0 {
            return 0.0;
        }
        scale(1.0 / estimate, &mut av);
        v = av;
    }
    estimate
}

/// Extremal eigenpairs of a symmetric operator by Lanczos iteration with full
/// (two-pass) reorthogonalisation.
///
/// Builds a Krylov subspace of at least `2p + 10` vectors (capped at the
/// operator dimension and `max_iters`), extracts Ritz pairs from the
/// tridiagonal matrix, and keeps extending until the `p` pairs at the
/// requested end of the spectrum have residual estimates below
/// `tol * ||A||_est`. Breakdown restarts with a fresh deterministic random
/// direction, so invariant subspaces (e.g. repeated eigenvalues) do not stall
/// the iteration. Runs out of budget: returns the best pairs flagged
/// unconverged.
pub fn lanczos_extremal(
    op: &LinearOperator,
    p: usize,
    which: SpectrumEnd,
    tol: f64,
    max_iters: usize,
) -> Result<LanczosResult, OperatorError> {
    let n = op.dim();
    if p == 0 || p > n {
        return Err(OperatorError::InvalidArgument(format!(
            "requested {p} eigenpairs from a dimension-{n} operator"
        )));
    }
    if !op.symmetric() {
        return Err(OperatorError::InvalidArgument(
            "Lanczos needs a symmetric operator".into(),
        ));
    }
    let cap = n.min(max_iters.max(p));
    let first_check = n.min(2 * p + 10).min(cap);
    let norm_est = estimate_operator_norm(op, 20).max(f64::MIN_POSITIVE);
    let breakdown_tol = 1e-13 * norm_est;

    let mut rng = ChaCha8Rng::seed_from_u64(0x4C414E43); // "LANC"
    let mut fresh_direction = |basis: &[Vec<f64>]| -> Option<Vec<f64>> {
        for _attempt in 0..5 {
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            for _pass in 0..2 {
                for b in basis {
                    let c = dot(&v, b);
                    axpy(-c, b, &mut v);
                }
            }
            let nv = norm(&v);
            if nv > 1e-8 {
                scale(1.0 / nv, &mut v);
                return Some(v);
            }
        }
        None
    };

    let mut basis: Vec<Vec<f64>> = vec![fresh_direction(&[]).expect("nonzero start vector")];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();

    loop {
        let j = alphas.len();
        let vj = basis[j].clone();
        let mut w = op.apply(&vj);
        if j > 0 {
            axpy(-betas[j - 1], &basis[j - 1], &mut w);
        }
        let alpha = dot(&w, &vj);
        axpy(-alpha, &vj, &mut w);
        for _pass in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                axpy(-c, b, &mut w);
            }
        }
        alphas.push(alpha);
        let m = alphas.len();

        let done_building = m >= cap;
        let check_now = done_building || (m >= first_check && (m - first_check) % 5 == 0);
        if check_now {
            let beta_last = norm(&w);
            let (theta, s) = ritz_decompose(&alphas, &betas)?;
            let picked = pick_end(&theta, p, which);
            let all_ok = picked.iter().all(|&k| {
                let residual = beta_last * s.get(m - 1, k).abs();
                residual <= tol * norm_est
            });
            if all_ok || done_building {
                let pairs = assemble_pairs(&basis, &theta, &s, &picked);
                return Ok(LanczosResult {
                    pairs,
                    converged: all_ok,
                    steps: m,
                });
            }
        }

        let beta = norm(&w);
        if beta <= breakdown_tol {
            // Invariant subspace found; continue in a fresh direction.
            match fresh_direction(&basis) {
                Some(v) => {
                    betas.push(0.0);
                    basis.push(v);
                }
                None => {
                    // No unexplored directions remain.
                    let (theta, s) = ritz_decompose(&alphas, &betas)?;
                    let picked = pick_end(&theta, p.min(alphas.len()), which);
                    let pairs = assemble_pairs(&basis, &theta, &s, &picked);
                    return Ok(LanczosResult {
                        pairs,
                        converged: picked.len() == p,
                        steps: alphas.len(),
                    });
                }
            }
        } else {
            scale(1.0 / beta, &mut w);
            betas.push(beta);
            basis.push(w);
        }
    }
}

fn ritz_decompose(
    alphas: &[f64],
    betas: &[f64],
) -> Result<(Vec<f64>, Matrix), OperatorError> {
    let eig = tridiag_eig(alphas, &betas[..alphas.len() - 1])?;
    Ok((eig.values, eig.vectors))
}

/// Indices of the `p` Ritz values at the requested end, ascending.
fn pick_end(theta: &[f64], p: usize, which: SpectrumEnd) -> Vec<usize> {
    match which {
        SpectrumEnd::Smallest => (0..p).collect(),
        SpectrumEnd::Largest => (theta.len() - p..theta.len()).collect(),
    }
}

fn assemble_pairs(basis: &[Vec<f64>], theta: &[f64], s: &Matrix, picked: &[usize]) -> EigenPairs {
    let n = basis[0].len();
    let m = theta.len();
    let mut vectors = Matrix::zeros(n, picked.len());
    for (out_col, &k) in picked.iter().enumerate() {
        let col = vectors.col_mut(out_col);
        for (i, b) in basis.iter().take(m).enumerate() {
            let w = s.get(i, k);
            axpy(w, b, col);
        }
    }
    EigenPairs {
        values: picked.iter().map(|&k| theta[k]).collect(),
        vectors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{cholesky, solve_cholesky, symeig};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Matrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                b.set(i, j, rng.gen::<f64>() - 0.5);
            }
        }
        let mut a = b.transpose().matmul(&b);
        for i in 0..n {
            a.set(i, i, a.get(i, i) + 0.3);
        }
        a
    }

    #[test]
    fn cg_matches_direct_solve() {
        let a = random_spd(25, 2);
        let b: Vec<f64> = (0..25).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let op = LinearOperator::from_matrix(&a, true);
        let out = cg_solve(&op, &b, 1e-12, 500).unwrap();
        assert!(out.converged);
        let l = cholesky(&a).unwrap();
        let exact = solve_cholesky(&l, &b);
        let rel = crate::vecmath::norm(&crate::vecmath::sub(&out.x, &exact))
            / crate::vecmath::norm(&exact);
        assert!(rel < 1e-10, "CG vs Cholesky rel err {rel:.3e}");
    }

    #[test]
    fn cg_error_decreases_monotonically_in_the_a_norm() {
        let a = random_spd(15, 3);
        let b: Vec<f64> = (0..15).map(|i| (i as f64 * 0.7).cos()).collect();
        let l = cholesky(&a).unwrap();
        let exact = solve_cholesky(&l, &b);
        let op = LinearOperator::from_matrix(&a, true);

        // Re-run CG capped at k iterations to recover the k-th iterate.
        let a_norm_err = |k: usize| -> f64 {
            let out = cg_solve(&op, &b, 0.0, k).unwrap();
            let e = crate::vecmath::sub(&out.x, &exact);
            crate::vecmath::dot(&e, &a.matvec(&e)).sqrt()
        };
        let e0 = a_norm_err(0);
        let mut prev = e0;
        for k in 1..=15 {
            let cur = a_norm_err(k);
            // Strictly non-increasing in exact arithmetic; allow rounding
            // noise once the error reaches the floating-point floor.
            assert!(
                cur <= prev * (1.0 + 1e-9) + 1e-13 * e0,
                "A-norm error rose at iteration {k}: {prev:.3e} -> {cur:.3e}"
            );
            prev = cur;
        }
    }

    #[test]
    fn cg_reports_negative_curvature() {
        let mut a = Matrix::identity(4);
        a.set(3, 3, -2.0);
        let op = LinearOperator::from_matrix(&a, true);
        let b = vec![1.0, 1.0, 1.0, 1.0];
        match cg_solve(&op, &b, 1e-10, 50) {
            Err(OperatorError::NegativeCurvature { curvature, .. }) => assert!(curvature <= 0.0),
            other => panic!("expected negative curvature, got {other:?}"),
        }
    }

    #[test]
    fn cg_zero_rhs_returns_zero() {
        let a = Matrix::identity(5);
        let op = LinearOperator::from_matrix(&a, true);
        let out = cg_solve(&op, &[0.0; 5], 1e-10, 10).unwrap();
        assert!(out.converged);
        assert_eq!(out.x, vec![0.0; 5]);
    }

    #[test]
    fn cg_flags_max_iteration_exit() {
        let a = random_spd(30, 4);
        let op = LinearOperator::from_matrix(&a, true);
        let b = vec![1.0; 30];
        let out = cg_solve(&op, &b, 1e-14, 2).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 2);
    }

    #[test]
    fn lanczos_full_subspace_matches_dense_eigensolver() {
        let a = random_spd(20, 6);
        let dense = symeig(&a).unwrap();
        let op = LinearOperator::from_matrix(&a, true);
        let out = lanczos_extremal(&op, 20, SpectrumEnd::Smallest, 1e-10, 20).unwrap();
        for k in 0..20 {
            assert!(
                (out.pairs.values[k] - dense.values[k]).abs() < 1e-8,
                "eigenvalue {k}: {} vs {}",
                out.pairs.values[k],
                dense.values[k]
            );
        }
        // Residual check against the operator itself.
        for k in 0..20 {
            let v = out.pairs.vectors.col(k);
            let av = a.matvec(v);
            let mut res = 0.0;
            for i in 0..20 {
                let d = av[i] - out.pairs.values[k] * v[i];
                res += d * d;
            }
            assert!(res.sqrt() < 1e-8 * a.frobenius_norm());
        }
    }

    #[test]
    fn lanczos_finds_the_requested_end_of_a_diagonal_spectrum() {
        let n = 50;
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            a.set(i, i, (i + 1) as f64);
        }
        let op = LinearOperator::from_matrix(&a, true);
        let small = lanczos_extremal(&op, 3, SpectrumEnd::Smallest, 1e-10, n).unwrap();
        assert!(small.converged);
        for (k, expected) in [1.0, 2.0, 3.0].iter().enumerate() {
            assert!(
                (small.pairs.values[k] - expected).abs() < 1e-8,
                "smallest eigenvalues wrong: {:?}",
                small.pairs.values
            );
        }
        let large = lanczos_extremal(&op, 2, SpectrumEnd::Largest, 1e-10, n).unwrap();
        assert!(large.converged);
        assert!((large.pairs.values[0] - 49.0).abs() < 1e-8);
        assert!((large.pairs.values[1] - 50.0).abs() < 1e-8);
    }

    #[test]
    fn lanczos_handles_repeated_eigenvalues_via_restart() {
        // Identity blocks force immediate invariant subspaces; the restart
        // must still recover a full orthonormal eigenbasis.
        let n = 12;
        let mut a = Matrix::identity(n);
        for i in 6..n {
            a.set(i, i, 3.0);
        }
        let op = LinearOperator::from_matrix(&a, true);
        let out = lanczos_extremal(&op, n, SpectrumEnd::Smallest, 1e-10, n).unwrap();
        for k in 0..6 {
            assert!((out.pairs.values[k] - 1.0).abs() < 1e-9);
        }
        for k in 6..n {
            assert!((out.pairs.values[k] - 3.0).abs() < 1e-9);
        }
        let vtv = out.pairs.vectors.transpose().matmul(&out.pairs.vectors);
        assert!(
            vtv.sub(&Matrix::identity(n)).frobenius_norm() < 1e-8,
            "recovered eigenbasis must be orthonormal"
        );
    }

    #[test]
    fn lanczos_is_deterministic() {
        let a = random_spd(18, 10);
        let op = LinearOperator::from_matrix(&a, true);
        let r1 = lanczos_extremal(&op, 4, SpectrumEnd::Smallest, 1e-9, 18).unwrap();
        let r2 = lanczos_extremal(&op, 4, SpectrumEnd::Smallest, 1e-9, 18).unwrap();
        assert_eq!(r1.pairs.values, r2.pairs.values);
        for k in 0..4 {
            assert_eq!(r1.pairs.vectors.col(k), r2.pairs.vectors.col(k));
        }
    }

    #[test]
    fn operator_norm_estimate_is_close_for_spd() {
        let a = random_spd(16, 11);
        let dense = symeig(&a).unwrap();
        let op = LinearOperator::from_matrix(&a, true);
        let est = estimate_operator_norm(&op, 20);
        let top = dense.values[15];
        assert!(
            est <= top * (1.0 + 1e-10) && est > 0.5 * top,
            "norm estimate {est} vs top eigenvalue {top}"
        );
    }
}
