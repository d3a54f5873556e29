//! Independent reference computations shared by the module tests and the
//! acceptance suite.

use std::f64::consts::PI;
use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use stochident::experiments::{exact_moments, exact_parameter, make_example, MomentField};
use stochident::fem::{assemble_stiffness, assemble_trilinear, Trilinear};
use stochident::forward::{solve_state, ConstraintModel, Problem};
use stochident::kl::SampleData;
use stochident::linalg::to_dense;
use stochident::mesh::{build_interval_mesh, build_unit_square_mesh, refine_uniform, FeSpace, Mesh};
use stochident::optimizer::{auglag_value, grad_q, grad_u, AugLagState};
use stochident::sparse_grid::{build_sparse_grid, SparseGrid};
use stochident::stochastic::{assemble_stochastic, DensityModel, StochasticOperators};

use super::*;

pub const MODELS: [ConstraintModel; 2] = [ConstraintModel::Collocation, ConstraintModel::Galerkin];

pub fn random_auglag_state(problem: &Problem, seed: u64) -> (AugLagState, DMatrix<f64>) {
    let mut r = rng(seed);
    let state = AugLagState {
        q: random_parameter(problem, &mut r),
        u: random_state(problem, &mut r),
        lambda: random_state(problem, &mut r),
        penalty: 3.0,
        beta: 0.1,
        iteration: 0,
        history: Vec::new(),
    };
    let u_hat = random_state(problem, &mut r);
    (state, u_hat)
}

/// Worst relative errors of the `q` and `u` gradients against central
/// differences of the augmented Lagrangian.
pub fn gradient_fd_errors(model: ConstraintModel) -> (f64, f64) {
    let mut worst = (0.0f64, 0.0f64);
    let problem = interval_problem(3, 1, 3, model);
    assert_eq!((problem.n_q(), problem.n_u(), problem.n_nodes()), (4, 7, 5));
    for s in 0..5u64 {
        let (state, u_hat) = random_auglag_state(&problem, 100 + s);
        let gq = grad_q(&state, &problem).unwrap();
        let gu = grad_u(&state, &u_hat, &problem).unwrap();
        let mut r = rng(200 + s);
        for _ in 0..10 {
            let dq = random_matrix(&mut r, problem.n_q(), problem.n_nodes());
            let h = 1e-3;
            let mut plus = state.clone();
            plus.q += &dq * h;
            let mut minus = state.clone();
            minus.q -= &dq * h;
            let fd = (auglag_value(&plus, &u_hat, &problem).unwrap() - auglag_value(&minus, &u_hat, &problem).unwrap())
                / (2.0 * h);
            let an = gq.dot(&dq);
            worst.0 = worst.0.max(rel_err(fd, an));

            let du = random_state(&problem, &mut r);
            let mut plus = state.clone();
            plus.u += &du * h;
            let mut minus = state.clone();
            minus.u -= &du * h;
            let fd = (auglag_value(&plus, &u_hat, &problem).unwrap() - auglag_value(&minus, &u_hat, &problem).unwrap())
                / (2.0 * h);
            let an = gu.dot(&du);
            worst.1 = worst.1.max(rel_err(fd, an));
        }
    }
    worst
}

// symmetric 6-point rule, exact for degree 4
pub const TRI6: [(f64, f64); 2] = [
    (0.109_951_743_655_322, 0.816_847_572_980_459),
    (0.223_381_589_678_011, 0.108_103_018_168_070),
];

pub fn l2_error_2d(mesh: &Mesh, uh: &[f64], exact: impl Fn(f64, f64) -> f64) -> f64 {
    let mut total = 0.0;
    for (e, el) in mesh.elements().iter().enumerate() {
        let area = mesh.signed_measure(e);
        let p: Vec<&Vec<f64>> = el.iter().map(|&v| &mesh.vertices()[v]).collect();
        for &(w, a) in &TRI6 {
            let b = (1.0 - a) / 2.0;
            for perm in 0..3 {
                let mut lam = [b; 3];
                lam[perm] = a;
                let x = lam[0] * p[0][0] + lam[1] * p[1][0] + lam[2] * p[2][0];
                let y = lam[0] * p[0][1] + lam[1] * p[1][1] + lam[2] * p[2][1];
                let val = lam[0] * uh[el[0]] + lam[1] * uh[el[1]] + lam[2] * uh[el[2]];
                total += w * area * (val - exact(x, y)).powi(2);
            }
        }
    }
    total.sqrt()
}

pub fn manufactured_l2_errors() -> Vec<f64> {
    let exact = |x: f64, y: f64| (PI * x).sin() * (PI * y).sin();
    [4usize, 8, 16, 32]
        .iter()
        .map(|&n| {
            let coarse = build_unit_square_mesh(n).unwrap();
            let fine = refine_uniform(&coarse);
            let problem = Problem::new(
                FeSpace::new(coarse, false),
                FeSpace::new(fine, true),
                build_sparse_grid(1, 1).unwrap(),
                DensityModel::uniform_box(vec![0.0], vec![1.0]).unwrap(),
                |x| 2.0 * PI * PI * exact(x[0], x[1]),
                ConstraintModel::Collocation,
            )
            .unwrap();
            let q = DMatrix::from_element(problem.n_q(), 1, 1.0);
            let u = solve_state(&problem, &q).unwrap();
            l2_error_2d(problem.space_u.mesh(), u.as_slice(), exact)
        })
        .collect()
}

/// Needs the full tensor level-2 nodes, present once `level ≥ dim + 1`.
pub fn multilinear(y: &[f64], c: &[f64]) -> f64 {
    // c indexes subsets of coordinates; f = Σ_S c_S Π_{i∈S} y_i
    (0..c.len())
        .map(|mask| {
            c[mask]
                * (0..y.len())
                    .filter(|i| mask >> i & 1 == 1)
                    .map(|i| y[i])
                    .product::<f64>()
        })
        .sum()
}

pub fn max_multilinear_error(dim: usize, level: u32, seed: u64) -> f64 {
    let g = build_sparse_grid(dim, level).unwrap();
    let mut r = rng(seed);
    let c: Vec<f64> = (0..1 << dim).map(|_| r.random_range(-1.0..1.0)).collect();
    let nodal = DMatrix::from_fn(1, g.num_nodes(), |_, j| multilinear(&g.nodes()[j].coords, &c));
    let s = g.hierarchize(&nodal).unwrap();
    (0..20)
        .map(|_| {
            let y: Vec<f64> = (0..dim).map(|_| r.random::<f64>()).collect();
            (g.interpolate(s.as_slice(), &y).unwrap() - multilinear(&y, &c)).abs()
        })
        .fold(0.0, f64::max)
}

pub fn max_exp_error(g: &SparseGrid, probes: &[Vec<f64>]) -> f64 {
    let f = |y: &[f64]| (y[0] + y[1]).exp();
    let nodal = DMatrix::from_fn(1, g.num_nodes(), |_, j| f(&g.nodes()[j].coords));
    let s = g.hierarchize(&nodal).unwrap();
    probes
        .iter()
        .map(|y| (g.interpolate(s.as_slice(), y).unwrap() - f(y)).abs())
        .fold(0.0, f64::max)
}

/// Gram matrix of the state space on a refined interval and its vertices.
pub fn interval_gram(elems: usize) -> (DMatrix<f64>, Vec<f64>) {
    let fine = refine_uniform(&build_interval_mesh(elems).unwrap());
    let xs = fine.vertices().iter().map(|v| v[0]).collect();
    (to_dense(&assemble_stiffness(&FeSpace::new(fine, true), true)), xs)
}

/// Modes `sin(kπx)` made orthonormal in the Gram inner product.
pub fn planted_modes(gram: &DMatrix<f64>, xs: &[f64], k: usize) -> Vec<DVector<f64>> {
    let mut modes: Vec<DVector<f64>> = Vec::new();
    for m in 1..=k {
        let mut v = DVector::from_iterator(xs.len(), xs.iter().map(|x| (m as f64 * PI * x).sin()));
        for b in &modes {
            let c = (b.transpose() * gram * &v)[(0, 0)];
            v -= b * c;
        }
        let n = (v.transpose() * gram * &v)[(0, 0)].sqrt();
        modes.push(v / n);
    }
    modes
}

pub const PLANTED: [f64; 3] = [1.0, 0.3, 0.05];

/// Samples `m + Σ sqrt(ν_k) b_k ξ_k` with unit-variance uniform `ξ`.
pub fn planted_samples(gram: &DMatrix<f64>, xs: &[f64], n_sample: usize, seed: u64) -> SampleData {
    let modes = planted_modes(gram, xs, 3);
    let mut r = rng(seed);
    let a = 3f64.sqrt();
    let mean = DVector::from_iterator(xs.len(), xs.iter().map(|x| x * (1.0 - x)));
    let cols: Vec<DVector<f64>> = (0..n_sample)
        .map(|_| {
            let mut c = mean.clone();
            for (b, nu) in modes.iter().zip(PLANTED) {
                c += b * (nu.sqrt() * r.random_range(-a..a));
            }
            c
        })
        .collect();
    SampleData::new(DMatrix::from_columns(&cols))
}

/// Mean and variance of the first example's coefficient for `Y ~ U(0, 1)^4`.
pub fn example1_closed_form(x: f64) -> (f64, f64) {
    let mean = 2.0 + x * x + 0.25 * (1..=4).map(|i| (i as f64 * PI * x).cos()).sum::<f64>();
    let var = (1..=4).map(|i| (i as f64 * PI * x).cos().powi(2)).sum::<f64>() / 48.0;
    (mean, var)
}

pub fn example1_moment_deviations(n_mc: usize, seed: u64) -> (f64, f64) {
    let spec = make_example(1).unwrap();
    let (coarse, _) = spec.meshes().unwrap();
    let m = exact_moments(
        coarse.vertices(),
        |x, y| exact_parameter(1, x, y),
        4,
        (0.0, 1.0),
        2,
        n_mc,
        seed,
    )
    .unwrap();
    let worst = |f: &MomentField, pick: fn((f64, f64)) -> f64| {
        coarse
            .vertices()
            .iter()
            .enumerate()
            .map(|(i, x)| (f.values[i] - pick(example1_closed_form(x[0]))).abs() / f.std_errors[i])
            .fold(0.0, f64::max)
    };
    (worst(&m[0], |p| p.0), worst(&m[1], |p| p.1))
}

/// Dense pieces of a problem built without the library's fast paths.
pub struct Dense {
    pub m_u: usize,
    pub n: usize,
    /// `G[i]` as dense `M_u × M_u` matrices.
    pub g: Vec<DMatrix<f64>>,
    pub d: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub lap: DMatrix<f64>,
    pub mask: Vec<bool>,
}

impl Dense {
    pub fn new(p: &Problem) -> Self {
        let t = &p.spatial.trilinear;
        let g = (0..p.n_q())
            .map(|i| DMatrix::from_fn(p.n_u(), p.n_u(), |a, b| t.get(i, a, b)))
            .collect();
        let d = p.dehierarchization().clone();
        let h = d.clone().try_inverse().unwrap();
        Self {
            m_u: p.n_u(),
            n: p.n_nodes(),
            g,
            d,
            h,
            lap: dense_laplacian(p),
            mask: p.dirichlet_mask().to_vec(),
        }
    }

    pub fn nodal(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * self.d.transpose()
    }

    pub fn surpluses(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * self.h.transpose()
    }

    pub fn masked(&self, mut x: DMatrix<f64>) -> DMatrix<f64> {
        for (i, &m) in self.mask.iter().enumerate() {
            if m {
                x.row_mut(i).fill(0.0);
            }
        }
        x
    }

    /// `P A_x^{-1} P` column by column.
    pub fn lap_solve(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.lap.clone().lu().solve(&self.masked(x.clone())).unwrap();
        self.masked(y)
    }

    pub fn weighted(&self, q: &[f64]) -> DMatrix<f64> {
        self.g
            .iter()
            .zip(q)
            .fold(DMatrix::zeros(self.m_u, self.m_u), |acc, (g, c)| acc + g * *c)
    }

    /// Collocation residual node by node.
    pub fn collocation_residual(&self, p: &Problem, q: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
        let qn = self.nodal(q);
        let un = self.nodal(u);
        let load = DMatrix::from_column_slice(self.m_u, 1, p.load.as_slice());
        let cols: Vec<_> = (0..self.n)
            .map(|j| {
                let kj = self.weighted(qn.column(j).as_slice());
                let ku = &kj * un.column(j);
                let x = DMatrix::from_column_slice(self.m_u, 1, ku.as_slice()) - &load;
                self.lap_solve(&x).column(0).into_owned()
            })
            .collect();
        self.surpluses(&DMatrix::from_columns(&cols))
    }

    /// Dense stochastic Galerkin operator on vec(v) with index `i + M_u j`.
    pub fn galerkin_matrix(&self, p: &Problem, q: &DMatrix<f64>) -> DMatrix<f64> {
        let mut big = DMatrix::zeros(self.m_u * self.n, self.m_u * self.n);
        for &(j, j1, j2, t) in p.stochastic.triple.entries() {
            let w = self.weighted(q.column(j).as_slice()) * t;
            big.view_mut((j1 * self.m_u, j2 * self.m_u), (self.m_u, self.m_u))
                .add_assign(&w);
        }
        big
    }

    pub fn galerkin_residual(&self, p: &Problem, q: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
        let su = self.galerkin_matrix(p, q) * vec_of(u);
        let mut x = DMatrix::from_column_slice(self.m_u, self.n, su.as_slice());
        let root = p.grid.root();
        for j in 0..self.n {
            let c = p.stochastic.s_rho[(root, j)];
            x.column_mut(j).axpy(-c, &p.load, 1.0);
        }
        let y = self.lap_solve(&x);
        let s_inv = p.stochastic.s_rho.clone().try_inverse().unwrap();
        y * s_inv
    }
}

pub fn problems() -> Vec<Problem> {
    let mut v = Vec::new();
    for model in MODELS {
        v.push(interval_problem(3, 2, 2, model));
        v.push(square_problem(2, 2, 2, model));
    }
    v
}

pub struct Fixture {
    pub grid: SparseGrid,
    pub ops: StochasticOperators,
    pub tri: Trilinear,
}

pub fn fixture() -> Fixture {
    let coarse = build_interval_mesh(3).unwrap();
    let fine = refine_uniform(&coarse);
    let tri = assemble_trilinear(&FeSpace::new(coarse, false), &FeSpace::new(fine, false)).unwrap();
    let grid = build_sparse_grid(2, 2).unwrap();
    let ops = assemble_stochastic(&grid, &DensityModel::uniform_box(vec![0.0; 2], vec![1.0; 2]).unwrap()).unwrap();
    Fixture { grid, ops, tri }
}

pub fn dense_triple(f: &Fixture) -> Vec<f64> {
    let n = f.grid.num_nodes();
    let mut t = vec![0.0; n * n * n];
    for &(a, b, c, v) in f.ops.triple.entries() {
        t[(a * n + b) * n + c] = v;
    }
    t
}

/// `Σ T[j,j1,j2] G[i,i1,i2] q[i,j] v[i2,j2]` indexed by `(i1, j1)`.
pub fn brute_parameter_form(f: &Fixture, q: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, mq, mu) = (f.grid.num_nodes(), f.tri.n_q(), f.tri.n_u());
    let t = dense_triple(f);
    DMatrix::from_fn(mu, n, |i1, j1| {
        let mut s = 0.0;
        for j in 0..n {
            for j2 in 0..n {
                let tv = t[(j * n + j1) * n + j2];
                if tv == 0.0 {
                    continue;
                }
                for i in 0..mq {
                    for i2 in 0..mu {
                        s += tv * f.tri.get(i, i1, i2) * q[(i, j)] * v[(i2, j2)];
                    }
                }
            }
        }
        s
    })
}

/// `Σ T[j,j1,j2] G[i1,i,i2] u[i,j] v[i2,j2]` indexed by `(i1, j1)` over the
/// parameter space.
pub fn brute_state_form(f: &Fixture, u: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, mq, mu) = (f.grid.num_nodes(), f.tri.n_q(), f.tri.n_u());
    let t = dense_triple(f);
    DMatrix::from_fn(mq, n, |i1, j1| {
        let mut s = 0.0;
        for j in 0..n {
            for j2 in 0..n {
                let tv = t[(j * n + j1) * n + j2];
                if tv == 0.0 {
                    continue;
                }
                for i in 0..mu {
                    for i2 in 0..mu {
                        s += tv * f.tri.get(i1, i, i2) * u[(i, j)] * v[(i2, j2)];
                    }
                }
            }
        }
        s
    })
}
