//! Karhunen-Loève reduction of sampled random fields and marginal
//! uniformization of the resulting coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Sample paths of a random field, one column per path.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleData {
    pub values: DMatrix<f64>,
}

impl SampleData {
    pub fn new(values: DMatrix<f64>) -> Self {
        Self { values }
    }

    pub fn n_dofs(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.values.ncols()
    }

    /// Reads a headerless comma-separated matrix with one row per dof and
    /// one column per sample path.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<f64>().map_err(|_| {
                        invalid(format!(
                            "line {}: cannot parse `{}` as a number",
                            lineno + 1,
                            tok.trim()
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(invalid(format!(
                        "line {}: expected {} columns, found {}",
                        lineno + 1,
                        first.len(),
                        row.len()
                    )));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::InsufficientData("sample matrix is empty".into()));
        }
        let (m, n) = (rows.len(), rows[0].len());
        Ok(Self::new(DMatrix::from_fn(m, n, |i, j| rows[i][j])))
    }

    pub fn to_csv(&self) -> String {
        matrix_to_csv(&self.values)
    }
}

/// Comma-separated rows of a matrix.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Sample mean and covariance (normalized by the sample count).
pub fn sample_stats(data: &SampleData) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let ns = data.n_samples();
    if ns < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 samples, got {ns}")));
    }
    let mean = data.values.column_mean();
    let mut centered = data.values.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let cov = &centered * centered.transpose() / ns as f64;
    Ok((mean, cov))
}

/// Generalized eigenpairs of `Σ A b = ν b` normalized so `Bᵀ A B = I`.
#[derive(Clone, Debug)]
pub struct KlEigen {
    /// Eigenvalues in descending order, round-off values clamped to zero.
    pub values: Vec<f64>,
    /// Eigenvectors as columns.
    pub vectors: DMatrix<f64>,
}

/// Solves the generalized eigenproblem of a covariance matrix against a
/// symmetric positive definite Gram matrix.
pub fn kl_decompose(cov: &DMatrix<f64>, gram: &DMatrix<f64>) -> Result<KlEigen> {
    let m = cov.nrows();
    if cov.ncols() != m || gram.nrows() != m || gram.ncols() != m {
        return Err(invalid("covariance and Gram matrix must be square and of equal size"));
    }
    let scale = cov.amax().max(f64::MIN_POSITIVE);
    if (cov - cov.transpose()).amax() > 1e-10 * scale {
        return Err(invalid("covariance matrix is not symmetric"));
    }
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| invalid("Gram matrix is not positive definite"))?;
    let l = chol.l();
    // A = L Lᵀ; with c = Lᵀ b the problem becomes Lᵀ Σ L c = ν c
    let mut reduced = l.transpose() * cov * &l;
    reduced = (&reduced + reduced.transpose()) * 0.5;
    let eig = reduced.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let lt = l.transpose();
    let mut values = Vec::with_capacity(m);
    let mut vectors = DMatrix::zeros(m, m);
    for (k, &idx) in order.iter().enumerate() {
        let mut nu = eig.eigenvalues[idx];
        if nu.abs() <= 1e-12 * top {
            nu = 0.0;
        }
        values.push(nu.max(0.0));
        let c = eig.eigenvectors.column(idx).into_owned();
        let mut b = lt
            .solve_upper_triangular(&c)
            .ok_or_else(|| invalid("singular Gram factor"))?;
        let (imax, _) = b
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        if b[imax] < 0.0 {
            b = -b;
        }
        vectors.set_column(k, &b);
    }
    Ok(KlEigen { values, vectors })
}

/// Smallest rank whose discarded eigenvalue mass is at most `tol` times the
/// total.
pub fn truncation_rank(values: &[f64], tol: f64) -> usize {
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut tail: f64 = total;
    for (k, v) in values.iter().enumerate() {
        if tail <= tol * total {
            return k;
        }
        tail -= v;
    }
    values.len()
}

/// Uncorrelated coordinates `Y = D^{-1/2} Bᵀ A (U − m)` of the samples.
pub fn project_samples(
    data: &SampleData,
    mean: &DVector<f64>,
    eigen: &KlEigen,
    gram: &DMatrix<f64>,
    rank: usize,
) -> Result<DMatrix<f64>> {
    if rank > eigen.values.len() {
        return Err(invalid("rank exceeds the number of eigenpairs"));
    }
    for (k, &nu) in eigen.values.iter().take(rank).enumerate() {
        if nu <= 0.0 {
            return Err(Error::DegenerateMode { mode: k });
        }
    }
    let b = eigen.vectors.columns(0, rank);
    let mut centered = data.values.clone();
    for mut col in centered.column_iter_mut() {
        col -= mean;
    }
    let mut y = b.transpose() * gram * centered;
    for k in 0..rank {
        let s = eigen.values[k].sqrt();
        y.row_mut(k).scale_mut(1.0 / s);
    }
    Ok(y)
}

/// Empirical distribution function of one coordinate with midpoint ranks,
/// linear interpolation between order statistics and constant
/// extrapolation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InsufficientData("empty sample".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(invalid("samples must be finite"));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    fn level(&self, rank: usize) -> f64 {
        (rank as f64 + 0.5) / self.sorted.len() as f64
    }

    pub fn cdf(&self, y: f64) -> f64 {
        let s = &self.sorted;
        let n = s.len();
        if y <= s[0] {
            return self.level(0);
        }
        if y >= s[n - 1] {
            return self.level(n - 1);
        }
        let hi = s.partition_point(|v| *v <= y);
        let lo = hi - 1;
        // ties share the averaged midpoint rank
        let first = s.partition_point(|v| *v < s[lo]);
        let lo_level = 0.5 * (self.level(first) + self.level(lo));
        let hi_last = s.partition_point(|v| *v <= s[hi]) - 1;
        let hi_level = 0.5 * (self.level(hi) + self.level(hi_last));
        if y == s[lo] {
            return lo_level;
        }
        let t = (y - s[lo]) / (s[hi] - s[lo]);
        lo_level + t * (hi_level - lo_level)
    }

    pub fn inverse(&self, u: f64) -> f64 {
        let s = &self.sorted;
        let n = s.len();
        let pos = u * n as f64 - 0.5;
        if pos <= 0.0 {
            return s[0];
        }
        if pos >= (n - 1) as f64 {
            return s[n - 1];
        }
        let r = pos.floor() as usize;
        let t = pos - r as f64;
        s[r] + t * (s[r + 1] - s[r])
    }
}

/// Fitted reduced model of a sampled random field.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KlModel {
    pub mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Retained eigenvectors, one inner vector per mode.
    pub modes: Vec<Vec<f64>>,
    pub rank: usize,
    /// Projected coordinates, one inner vector per mode.
    pub y_samples: Vec<Vec<f64>>,
    pub marginals: Vec<EmpiricalCdf>,
}

impl KlModel {
    /// Runs the full reduction: statistics, eigenproblem, truncation at
    /// `tol` (capped by `max_rank`), projection and marginal fits.
    pub fn fit(data: &SampleData, gram: &DMatrix<f64>, tol: f64, max_rank: Option<usize>) -> Result<Self> {
        if data.n_dofs() != gram.nrows() {
            return Err(invalid(format!(
                "sample matrix has {} rows, Gram matrix has {}",
                data.n_dofs(),
                gram.nrows()
            )));
        }
        let (mean, cov) = sample_stats(data)?;
        let eigen = kl_decompose(&cov, gram)?;
        let mut rank = truncation_rank(&eigen.values, tol);
        if let Some(cap) = max_rank {
            rank = rank.min(cap);
        }
        if rank == 0 {
            return Err(Error::InsufficientData("samples carry no variance".into()));
        }
        let y = project_samples(data, &mean, &eigen, gram, rank)?;
        let marginals = (0..rank)
            .map(|k| EmpiricalCdf::new(y.row(k).transpose().as_slice()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mean: mean.as_slice().to_vec(),
            eigenvalues: eigen.values.clone(),
            modes: (0..rank).map(|k| eigen.vectors.column(k).as_slice().to_vec()).collect(),
            rank,
            y_samples: (0..rank).map(|k| y.row(k).iter().copied().collect()).collect(),
            marginals,
        })
    }

    /// Uniformized coordinates of the projected samples (rank × samples).
    pub fn uniformized_samples(&self) -> DMatrix<f64> {
        let ns = self.y_samples.first().map_or(0, Vec::len);
        DMatrix::from_fn(self.rank, ns, |k, s| self.marginals[k].cdf(self.y_samples[k][s]))
    }

    /// Field value for unit-cube coordinates `u`:
    /// `m + Σ_k sqrt(ν_k) b_k F_k^{-1}(u_k)`.
    pub fn reconstruct(&self, u: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for k in 0..self.rank {
            let y = self.marginals[k].inverse(u[k]) * self.eigenvalues[k].sqrt();
            for (o, b) in out.iter_mut().zip(&self.modes[k]) {
                *o += y * b;
            }
        }
        out
    }
}
