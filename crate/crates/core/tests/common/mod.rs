//! Shared builders and dense reference implementations for the tests.
#![allow(dead_code)]

mod oracles;
pub use oracles::*;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stochident::forward::{ConstraintModel, Problem};
use stochident::linalg::to_dense;
use stochident::mesh::{build_interval_mesh, build_unit_square_mesh, refine_uniform, FeSpace};
use stochident::sparse_grid::build_sparse_grid;
use stochident::stochastic::DensityModel;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// 1D problem with `elems` coarse elements on a level-`level` grid in `dim`
/// stochastic dimensions.
pub fn interval_problem(elems: usize, dim: usize, level: u32, model: ConstraintModel) -> Problem {
    let coarse = build_interval_mesh(elems).unwrap();
    let fine = refine_uniform(&coarse);
    let grid = build_sparse_grid(dim, level).unwrap();
    let density = DensityModel::uniform_box(vec![-1.0; dim], vec![1.0; dim]).unwrap();
    Problem::new(
        FeSpace::new(coarse, false),
        FeSpace::new(fine, true),
        grid,
        density,
        |x| 1.0 + x[0],
        model,
    )
    .unwrap()
}

pub fn square_problem(per_side: usize, dim: usize, level: u32, model: ConstraintModel) -> Problem {
    let coarse = build_unit_square_mesh(per_side).unwrap();
    let fine = refine_uniform(&coarse);
    let grid = build_sparse_grid(dim, level).unwrap();
    let density = DensityModel::uniform_box(vec![0.0; dim], vec![1.0; dim]).unwrap();
    Problem::new(
        FeSpace::new(coarse, false),
        FeSpace::new(fine, true),
        grid,
        density,
        |x| 1.0 + x[0] * x[1],
        model,
    )
    .unwrap()
}

/// Random state field with zero Dirichlet rows.
pub fn random_state(problem: &Problem, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut u = random_matrix(rng, problem.n_u(), problem.n_nodes());
    problem.mask_state(&mut u);
    u
}

/// Random parameter field that stays positive at all grid nodes.
pub fn random_parameter(problem: &Problem, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let nodal = DMatrix::from_fn(problem.n_q(), problem.n_nodes(), |_, _| rng.random_range(1.0..3.0));
    problem.grid.hierarchize(&nodal).unwrap()
}

/// Dense Kronecker product `S ⊗ A` acting on column-major stacked fields.
pub fn kron(s: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (s.nrows(), a.nrows());
    DMatrix::from_fn(m * n, m * n, |r, c| s[(r / m, c / m)] * a[(r % m, c % m)])
}

pub fn vec_of(x: &DMatrix<f64>) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_column_slice(x.as_slice())
}

/// Dense Dirichlet stiffness of the state space.
pub fn dense_laplacian(problem: &Problem) -> DMatrix<f64> {
    to_dense(&problem.spatial.stiffness_u)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}
