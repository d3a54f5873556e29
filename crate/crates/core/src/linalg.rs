//! Linear algebra helpers: sparse Cholesky wrapper, Kronecker-structured
//! products and a Jacobi-preconditioned conjugate gradient solver.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CscMatrix, CsrMatrix};

use crate::error::{invalid, Error, Result};

/// Sparse Cholesky factorization of a symmetric positive definite matrix.
pub struct SparseCholesky {
    factor: CscCholesky<f64>,
    n: usize,
}

impl SparseCholesky {
    pub fn new(mat: &CsrMatrix<f64>) -> Result<Self> {
        let csc = CscMatrix::from(mat);
        let factor = CscCholesky::factor(&csc).map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(Self { factor, n: mat.nrows() })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let x = self.factor.solve(b);
        x.column(0).into_owned()
    }

    /// Solves for every column of `b` in place.
    pub fn solve_columns(&self, b: &mut DMatrix<f64>) {
        self.factor.solve_mut(b);
    }
}

impl std::fmt::Debug for SparseCholesky {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseCholesky").field("n", &self.n).finish()
    }
}

/// `(S ⊗ A) v` for a field stored as an `M × N` matrix whose column `j`
/// holds node `j`; equals `A V Sᵀ`.
pub fn kron_apply(s: &DMatrix<f64>, a: &CsrMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let av: DMatrix<f64> = a * v;
    av * s.transpose()
}

/// Vectorized form of [`kron_apply`] with shape checks; `v` is the
/// column-major stacking of node blocks.
pub fn apply_kron(s: &DMatrix<f64>, a: &CsrMatrix<f64>, v: &[f64]) -> Result<Vec<f64>> {
    let (n, m) = (s.nrows(), a.nrows());
    if s.ncols() != n || a.ncols() != m {
        return Err(invalid("Kronecker factors must be square"));
    }
    if v.len() != m * n {
        return Err(invalid(format!(
            "vector of length {} does not match {m} x {n} Kronecker operator",
            v.len()
        )));
    }
    let vm = DMatrix::from_column_slice(m, n, v);
    Ok(kron_apply(s, a, &vm).as_slice().to_vec())
}

/// Column-wise sparse product `A V`.
pub fn spmm(a: &CsrMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    a * v
}

/// Dense copy of a sparse matrix.
pub fn to_dense(a: &CsrMatrix<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(a.nrows(), a.ncols());
    for (r, c, v) in a.triplet_iter() {
        d[(r, c)] += *v;
    }
    d
}

/// Diagonal of a sparse matrix.
pub fn diagonal(a: &CsrMatrix<f64>) -> Vec<f64> {
    (0..a.nrows())
        .map(|r| {
            let row = a.row(r);
            row.col_indices()
                .iter()
                .zip(row.values())
                .find(|(c, _)| **c == r)
                .map_or(0.0, |(_, v)| *v)
        })
        .collect()
}

/// Result of a conjugate gradient solve.
#[derive(Clone, Debug)]
pub struct PcgOutcome {
    pub solution: DMatrix<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Preconditioned conjugate gradients for `H x = b` with diagonal
/// preconditioner `diag`, started from `x0`. Stops once
/// `‖b − H x‖ ≤ tol ‖b‖`.
pub fn pcg<F>(
    mut apply: F,
    diag: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x0: DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<PcgOutcome>
where
    F: FnMut(&DMatrix<f64>) -> DMatrix<f64>,
{
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok(PcgOutcome {
            solution: DMatrix::zeros(b.nrows(), b.ncols()),
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut x = x0;
    let mut r = b - apply(&x);
    let mut rel = r.norm() / b_norm;
    if rel <= tol {
        return Ok(PcgOutcome {
            solution: x,
            iterations: 0,
            relative_residual: rel,
        });
    }
    let precondition = |r: &DMatrix<f64>| r.component_div(diag);
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for it in 1..=max_iter {
        let hp = apply(&p);
        let curvature = p.dot(&hp);
        if curvature <= 0.0 {
            return Err(invalid("operator is not positive definite"));
        }
        let alpha = rz / curvature;
        x += &p * alpha;
        r -= &hp * alpha;
        rel = r.norm() / b_norm;
        if rel <= tol {
            return Ok(PcgOutcome {
                solution: x,
                iterations: it,
                relative_residual: rel,
            });
        }
        z = precondition(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p *= beta;
        p += &z;
    }
    Err(Error::IterationLimit {
        iterations: max_iter,
        residual: rel,
    })
}
