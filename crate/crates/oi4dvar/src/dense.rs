//! Small dense matrices and the factorisations the low-rank algorithms
//! reduce to.
//!
//! Nothing here ever sees a full model-sized operator: these routines handle
//! the p-by-p reduced problems, covariance blocks, and oracle-scale checks.
//! All are classic dense algorithms — Cholesky, cyclic Jacobi for symmetric
//! eigenproblems, implicit-shift QL for tridiagonal ones, one-sided Jacobi
//! for the SVD, and modified Gram-Schmidt with reorthogonalisation for QR —
//! written against the same flat `Vec<f64>` storage the rest of the crate
//! uses. Column-major layout keeps the column operations contiguous.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DenseError {
    #[error("matrix is not positive definite (pivot {pivot:.3e} at column {col})")]
    NotPositiveDefinite { col: usize, pivot: f64 },
    #[error("iteration failed to converge: {0}")]
    NonConvergence(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Dense column-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Matrix {
        let mut m = Matrix::zeros(rows, columns.len());
        for (j, col) in columns.iter().enumerate() {
            assert_eq!(col.len(), rows, "column {j} has wrong length");
            m.col_mut(j).copy_from_slice(col);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.rows + i] = v;
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for j in 0..self.cols {
            for i in 0..self.rows {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for j in 0..self.cols {
            let col = self.col(j);
            let vj = v[j];
            for i in 0..self.rows {
                out[i] += col[i] * vj;
            }
        }
        out
    }

    pub fn matvec_transpose(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        (0..self.cols)
            .map(|j| crate::vecmath::dot(self.col(j), v))
            .collect()
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for j in 0..other.cols {
            let prod = self.matvec(other.col(j));
            out.col_mut(j).copy_from_slice(&prod);
        }
        out
    }

    /// Scale column `j` by `s`.
    pub fn scale_col(&mut self, j: usize, s: f64) {
        for v in self.col_mut(j) {
            *v *= s;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        crate::vecmath::norm(&self.data)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: crate::vecmath::sub(&self.data, &other.data),
        }
    }

    /// Keep only the listed columns, in the given order.
    pub fn select_columns(&self, keep: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, keep.len());
        for (newj, &j) in keep.iter().enumerate() {
            out.col_mut(newj).copy_from_slice(self.col(j));
        }
        out
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix, DenseError> {
    if a.rows() != a.cols() {
        return Err(DenseError::Shape("cholesky needs a square matrix".into()));
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            let ljk = l.get(j, k);
            diag -= ljk * ljk;
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(DenseError::NotPositiveDefinite {
                col: j,
                pivot: diag,
            });
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Solve `L y = b` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l.get(i, k) * y[k];
        }
        y[i] /= l.get(i, i);
    }
    y
}

/// Solve `L^T x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            x[i] -= l.get(k, i) * x[k];
        }
        x[i] /= l.get(i, i);
    }
    x
}

/// Solve `L L^T x = b` given the Cholesky factor `L`.
pub fn solve_cholesky(l: &Matrix, b: &[f64]) -> Vec<f64> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// Symmetric eigendecomposition, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct EigFactors {
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors, column `k` pairing with `values[k]`.
    pub vectors: Matrix,
}

/// Full eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
pub fn symeig(a: &Matrix) -> Result<EigFactors, DenseError> {
    if a.rows() != a.cols() {
        return Err(DenseError::Shape("symeig needs a square matrix".into()));
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let fro = a.frobenius_norm();
    if n <= 1 || fro == 0.0 {
        return Ok(sorted_eig(
            (0..n).map(|i| m.get(i, i)).collect(),
            v,
        ));
    }
    let tol = 1e-15 * fro;
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for j in 0..n {
            for i in 0..j {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if (2.0 * off).sqrt() <= tol {
            return Ok(sorted_eig((0..n).map(|i| m.get(i, i)).collect(), v));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                // Update the symmetric matrix: rows/cols p and q.
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(p, k, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                    m.set(q, k, s * akp + c * akq);
                }
                m.set(p, p, app - t * apq);
                m.set(q, q, aqq + t * apq);
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    Err(DenseError::NonConvergence(
        "Jacobi eigendecomposition did not converge in 100 sweeps".into(),
    ))
}

fn sorted_eig(values: Vec<f64>, vectors: Matrix) -> EigFactors {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    EigFactors {
        values: order.iter().map(|&k| values[k]).collect(),
        vectors: vectors.select_columns(&order),
    }
}

/// Eigendecomposition of a symmetric tridiagonal matrix (diagonal `diag`,
/// off-diagonal `off`) by the implicit-shift QL iteration. This is the
/// workhorse behind the Lanczos Ritz extraction, where the matrices can be a
/// few thousand on a side and cyclic Jacobi would be too slow.
pub fn tridiag_eig(diag: &[f64], off: &[f64]) -> Result<EigFactors, DenseError> {
    let n = diag.len();
    if n == 0 {
        return Ok(EigFactors {
            values: vec![],
            vectors: Matrix::zeros(0, 0),
        });
    }
    if off.len() + 1 != n {
        return Err(DenseError::Shape(format!(
            "tridiagonal sizes: {} diagonal, {} off-diagonal",
            n,
            off.len()
        )));
    }
    let mut d = diag.to_vec();
    let mut e = off.to_vec();
    e.push(0.0);
    let mut z = Matrix::identity(n);

    for l in 0..n {
        let mut iterations = 0;
        loop {
            // Look for a negligible off-diagonal element to split at.
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iterations += 1;
            if iterations > 50 {
                return Err(DenseError::NonConvergence(
                    "tridiagonal QL exceeded 50 iterations for one eigenvalue".into(),
                ));
            }
            // Implicit shift from the 2x2 block at l.
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..n {
                    f = z.get(k, i + 1);
                    z.set(k, i + 1, s * z.get(k, i) + c * f);
                    z.set(k, i, c * z.get(k, i) - s * f);
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(sorted_eig(d, z))
}

/// Thin singular value decomposition `A = U diag(S) V^T`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    /// Singular values, descending.
    pub singulars: Vec<f64>,
    pub v: Matrix,
}

/// Thin SVD by one-sided Jacobi: rotate column pairs until all columns are
/// mutually orthogonal, then read off norms. Wide inputs are factored through
/// their transpose.
pub fn svd(a: &Matrix) -> Result<SvdFactors, DenseError> {
    if a.rows() < a.cols() {
        let t = svd(&a.transpose())?;
        return Ok(SvdFactors {
            u: t.v,
            singulars: t.singulars,
            v: t.u,
        });
    }
    let rows = a.rows();
    let cols = a.cols();
    let mut w = a.clone();
    let mut v = Matrix::identity(cols);

    let mut converged = false;
    for _sweep in 0..100 {
        let mut rotations = 0;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = crate::vecmath::dot(w.col(p), w.col(p));
                let beta = crate::vecmath::dot(w.col(q), w.col(q));
                let gamma = crate::vecmath::dot(w.col(p), w.col(q));
                // The cosine between two columns computed in f64 carries
                // roundoff of order eps; demanding orthogonality much below
                // that keeps rotating on noise forever.
                if gamma.abs() <= 1e-14 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotations += 1;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    w.set(i, p, c * wp - s * wq);
                    w.set(i, q, s * wp + c * wq);
                }
                for i in 0..cols {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if rotations == 0 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(DenseError::NonConvergence(
            "one-sided Jacobi SVD did not converge in 100 sweeps".into(),
        ));
    }

    let mut singulars: Vec<f64> = (0..cols).map(|j| crate::vecmath::norm(w.col(j))).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&x, &y| singulars[y].total_cmp(&singulars[x]));
    let w = w.select_columns(&order);
    let v = v.select_columns(&order);
    singulars = order.iter().map(|&k| singulars[k]).collect();

    let mut u = w;
    for j in 0..cols {
        if singulars[j] > 0.0 {
            u.scale_col(j, 1.0 / singulars[j]);
        }
    }
    Ok(SvdFactors { u, singulars, v })
}

/// Orthonormal basis of a matrix's column span.
#[derive(Debug, Clone)]
pub struct QrBasis {
    pub q: Matrix,
    /// Indices of the input columns that survived (dependent columns drop).
    pub retained: Vec<usize>,
}

/// Modified Gram-Schmidt with a second reorthogonalisation pass. A column
/// whose remainder falls below `1e-12` of its original norm is treated as
/// linearly dependent and dropped.
pub fn qr_orthonormalize(a: &Matrix) -> QrBasis {
    let rows = a.rows();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut retained = Vec::new();
    for j in 0..a.cols() {
        let mut v = a.col(j).to_vec();
        let original = crate::vecmath::norm(&v);
        if original == 0.0 {
            continue;
        }
        for _pass in 0..2 {
            for b in &basis {
                let c = crate::vecmath::dot(&v, b);
                crate::vecmath::axpy(-c, b, &mut v);
            }
        }
        let remaining = crate::vecmath::norm(&v);
        if remaining <= 1e-12 * original {
            continue;
        }
        crate::vecmath::scale(1.0 / remaining, &mut v);
        basis.push(v);
        retained.push(j);
    }
    QrBasis {
        q: Matrix::from_columns(rows, &basis),
        retained,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m.set(i, j, rng.gen::<f64>() - 0.5);
            }
        }
        m
    }

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let b = random_matrix(n, n, seed);
        let mut a = b.transpose().matmul(&b);
        for i in 0..n {
            a.set(i, i, a.get(i, i) + 0.5);
        }
        a
    }

    #[test]
    fn cholesky_round_trip() {
        let a = random_spd(12, 5);
        let l = cholesky(&a).unwrap();
        let rebuilt = l.matmul(&l.transpose());
        assert!(rebuilt.sub(&a).frobenius_norm() / a.frobenius_norm() < 1e-13);

        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let x = solve_cholesky(&l, &b);
        let r = crate::vecmath::sub(&a.matvec(&x), &b);
        assert!(crate::vecmath::norm(&r) < 1e-10);
    }

    #[test]
    fn cholesky_rejects_indefinite_matrices() {
        let mut a = Matrix::identity(3);
        a.set(2, 2, -1.0);
        assert!(matches!(
            cholesky(&a),
            Err(DenseError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn jacobi_eigendecomposition_reconstructs() {
        let a = random_spd(20, 9);
        let eig = symeig(&a).unwrap();
        let n = 20;
        // Ascending order.
        for k in 1..n {
            assert!(eig.values[k] >= eig.values[k - 1]);
        }
        // A v = lambda v for each pair.
        for k in 0..n {
            let av = a.matvec(eig.vectors.col(k));
            let mut res = 0.0;
            for i in 0..n {
                let d = av[i] - eig.values[k] * eig.vectors.get(i, k);
                res += d * d;
            }
            assert!(
                res.sqrt() <= 1e-10 * a.frobenius_norm(),
                "eigenpair {k} residual {res:.3e}"
            );
        }
        // Orthonormal vectors.
        let vtv = eig.vectors.transpose().matmul(&eig.vectors);
        assert!(vtv.sub(&Matrix::identity(n)).frobenius_norm() < 1e-12);
    }

    #[test]
    fn tridiagonal_ql_matches_jacobi() {
        let n = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let diag: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let off: Vec<f64> = (0..n - 1).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut full = Matrix::zeros(n, n);
        for i in 0..n {
            full.set(i, i, diag[i]);
        }
        for i in 0..n - 1 {
            full.set(i, i + 1, off[i]);
            full.set(i + 1, i, off[i]);
        }
        let a = tridiag_eig(&diag, &off).unwrap();
        let b = symeig(&full).unwrap();
        for k in 0..n {
            assert!(
                (a.values[k] - b.values[k]).abs() < 1e-10,
                "eigenvalue {k}: QL {} vs Jacobi {}",
                a.values[k],
                b.values[k]
            );
        }
        // Eigenvectors must actually diagonalise the matrix.
        for k in 0..n {
            let av = full.matvec(a.vectors.col(k));
            let mut res = 0.0;
            for i in 0..n {
                let d = av[i] - a.values[k] * a.vectors.get(i, k);
                res += d * d;
            }
            assert!(res.sqrt() < 1e-10 * full.frobenius_norm());
        }
    }

    #[test]
    fn svd_reconstructs_tall_and_wide() {
        for (r, c, seed) in [(15, 8, 3), (8, 15, 4)] {
            let a = random_matrix(r, c, seed);
            let f = svd(&a).unwrap();
            let k = r.min(c);
            assert_eq!(f.u.cols(), k);
            assert_eq!(f.v.cols(), k);
            for i in 1..k {
                assert!(f.singulars[i] <= f.singulars[i - 1], "descending order");
            }
            let mut us = f.u.clone();
            for j in 0..k {
                us.scale_col(j, f.singulars[j]);
            }
            let rebuilt = us.matmul(&f.v.transpose());
            assert!(
                rebuilt.sub(&a).frobenius_norm() / a.frobenius_norm() < 1e-12,
                "{r}x{c} reconstruction failed"
            );
            let utu = f.u.transpose().matmul(&f.u);
            assert!(utu.sub(&Matrix::identity(k)).frobenius_norm() < 1e-12);
        }
    }

    #[test]
    fn svd_handles_rank_deficiency() {
        let mut a = random_matrix(10, 4, 8);
        let dup = a.col(1).to_vec();
        a.col_mut(3).copy_from_slice(&dup);
        let f = svd(&a).unwrap();
        assert!(f.singulars[3] < 1e-12 * f.singulars[0]);
        let mut us = f.u.clone();
        for j in 0..4 {
            us.scale_col(j, f.singulars[j]);
        }
        assert!(us.matmul(&f.v.transpose()).sub(&a).frobenius_norm() < 1e-12);
    }

    #[test]
    fn qr_drops_dependent_columns() {
        let mut a = random_matrix(10, 5, 12);
        let dup = a.col(0).to_vec();
        a.col_mut(2).copy_from_slice(&dup);
        let basis = qr_orthonormalize(&a);
        assert_eq!(basis.retained, vec![0, 1, 3, 4]);
        let q = &basis.q;
        let qtq = q.transpose().matmul(q);
        assert!(qtq.sub(&Matrix::identity(4)).frobenius_norm() < 1e-13);
        // The span is preserved: A = Q (Q^T A).
        let proj = q.matmul(&q.transpose().matmul(&a));
        assert!(proj.sub(&a).frobenius_norm() < 1e-12 * a.frobenius_norm());
    }
}
