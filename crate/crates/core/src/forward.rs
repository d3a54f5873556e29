//! The discrete identification problem: spatial and stochastic operators,
//! forward solves, the equality constraint and its linearizations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fem::{
    apply_dirichlet_identity, assemble_mass, assemble_stiffness, assemble_trilinear, zero_masked, Trilinear,
};
use crate::linalg::{pcg, SparseCholesky};
use crate::mesh::FeSpace;
use crate::sparse_grid::SparseGrid;
use crate::stochastic::{
    assemble_coupled_form, assemble_stochastic, CoupledForm, DensityModel, StochasticOperators, WeightSlot,
};

/// How the weak state equation is discretized in the stochastic variables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintModel {
    /// Deterministic solves at every grid node; the residual is
    /// preconditioned by the Laplacian node by node and hierarchized.
    #[default]
    Collocation,
    /// Stochastic Galerkin projection with the triple-product tensor,
    /// preconditioned by `S_ρ ⊗ A_x`.
    Galerkin,
}

/// Deterministic finite element operators for the parameter space `V_q`
/// and the state space `V_u`.
#[derive(Clone, Debug)]
pub struct SpatialOperators {
    pub mass_q: CsrMatrix<f64>,
    pub stiffness_q: CsrMatrix<f64>,
    pub mass_u: CsrMatrix<f64>,
    /// State stiffness with Dirichlet rows and columns eliminated.
    pub stiffness_u: CsrMatrix<f64>,
    pub trilinear: Trilinear,
}

impl SpatialOperators {
    pub fn assemble(space_q: &FeSpace, space_u: &FeSpace) -> Result<Self> {
        Ok(Self {
            mass_q: assemble_mass(space_q),
            stiffness_q: assemble_stiffness(space_q, false),
            mass_u: assemble_mass(space_u),
            stiffness_u: assemble_stiffness(space_u, true),
            trilinear: assemble_trilinear(space_q, space_u)?,
        })
    }
}

/// Fully assembled discrete problem.
pub struct Problem {
    pub space_q: FeSpace,
    pub space_u: FeSpace,
    pub spatial: SpatialOperators,
    pub grid: SparseGrid,
    pub density: DensityModel,
    pub stochastic: StochasticOperators,
    /// Load vector on `V_u` with Dirichlet entries zeroed.
    pub load: DVector<f64>,
    pub model: ConstraintModel,
    stiffness_factor: SparseCholesky,
    s_rho_factor: Cholesky<f64, Dyn>,
    dehier: DMatrix<f64>,
    nodal_gram: DMatrix<f64>,
}

impl Problem {
    /// Assembles everything for a forcing given pointwise; the load vector
    /// is the state mass matrix applied to the nodal interpolant of `f`.
    pub fn new(
        space_q: FeSpace,
        space_u: FeSpace,
        grid: SparseGrid,
        density: DensityModel,
        forcing: impl Fn(&[f64]) -> f64,
        model: ConstraintModel,
    ) -> Result<Self> {
        let nodal: Vec<f64> = space_u.mesh().vertices().iter().map(|x| forcing(x)).collect();
        Self::with_nodal_forcing(space_q, space_u, grid, density, &nodal, model)
    }

    /// Like [`Problem::new`] with the forcing given by its values at the
    /// state mesh vertices.
    pub fn with_nodal_forcing(
        space_q: FeSpace,
        space_u: FeSpace,
        grid: SparseGrid,
        density: DensityModel,
        forcing: &[f64],
        model: ConstraintModel,
    ) -> Result<Self> {
        if forcing.len() != space_u.n_dofs() {
            return Err(invalid(format!(
                "forcing has {} values, state space has {} vertices",
                forcing.len(),
                space_u.n_dofs()
            )));
        }
        if space_q.dirichlet_mask().iter().any(|&b| b) {
            return Err(invalid("parameter space must not carry boundary conditions"));
        }
        let spatial = SpatialOperators::assemble(&space_q, &space_u)?;
        let stochastic = assemble_stochastic(&grid, &density)?;
        let mut load: DVector<f64> = {
            let x: DMatrix<f64> = &spatial.mass_u * &DMatrix::from_column_slice(forcing.len(), 1, forcing);
            x.column(0).into_owned()
        };
        zero_masked(load.as_mut_slice(), space_u.dirichlet_mask());
        let stiffness_factor = SparseCholesky::new(&spatial.stiffness_u)?;
        let s_rho_factor = stochastic
            .s_rho
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InsufficientData("stochastic Gram matrix is not positive definite".into()))?;
        let dehier = grid.dehierarchization_matrix();
        // Gram matrix of nodal values: Hᵀ S_ρ H with H the inverse of D
        let h = dehier
            .clone()
            .try_inverse()
            .ok_or_else(|| invalid("singular dehierarchization matrix"))?;
        let nodal_gram = h.transpose() * &stochastic.s_rho * &h;
        Ok(Self {
            space_q,
            space_u,
            spatial,
            grid,
            density,
            stochastic,
            load,
            model,
            stiffness_factor,
            s_rho_factor,
            dehier,
            nodal_gram,
        })
    }

    pub fn n_q(&self) -> usize {
        self.space_q.n_dofs()
    }

    pub fn n_u(&self) -> usize {
        self.space_u.n_dofs()
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.num_nodes()
    }

    pub fn dirichlet_mask(&self) -> &[bool] {
        self.space_u.dirichlet_mask()
    }

    /// Dense dehierarchization matrix `D` (nodal values = `D` · surpluses).
    pub fn dehierarchization(&self) -> &DMatrix<f64> {
        &self.dehier
    }

    /// `Hᵀ S_ρ H`, the Gram matrix of nodal values.
    pub fn nodal_gram(&self) -> &DMatrix<f64> {
        &self.nodal_gram
    }

    pub(crate) fn check_q(&self, q: &DMatrix<f64>) -> Result<()> {
        check_shape(q, self.n_q(), self.n_nodes(), "parameter")
    }

    pub(crate) fn check_u(&self, u: &DMatrix<f64>) -> Result<()> {
        check_shape(u, self.n_u(), self.n_nodes(), "state")
    }

    /// Zeroes the Dirichlet rows of a state field.
    pub fn mask_state(&self, u: &mut DMatrix<f64>) {
        let mask = self.dirichlet_mask();
        for mut col in u.column_iter_mut() {
            for (v, &m) in col.iter_mut().zip(mask) {
                if m {
                    *v = 0.0;
                }
            }
        }
    }

    /// `(S_ρ ⊗ A_x) w` for a state field.
    pub fn s_hat(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let aw: DMatrix<f64> = &self.spatial.stiffness_u * w;
        aw * &self.stochastic.s_rho
    }

    /// `(S_ρ ⊗ A_x)^{-1} P x`.
    pub fn s_hat_inv_masked(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.laplace_solve(x);
        let yt = y.transpose();
        self.s_rho_factor.solve(&yt).transpose()
    }

    /// `P A_x^{-1} P y` column by column.
    pub fn laplace_solve(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = y.clone();
        self.mask_state(&mut z);
        self.stiffness_factor.solve_columns(&mut z);
        self.mask_state(&mut z);
        z
    }

    /// `aᵀ (S_ρ ⊗ A_x) b`.
    pub fn inner_s(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        self.s_hat(a).dot(b)
    }

    /// `(S_mix ⊗ (A^q + A_x^q)) q`, the regularization Gram applied to `q`.
    pub fn regularization(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        let a: DMatrix<f64> = &self.spatial.mass_q * q + &self.spatial.stiffness_q * q;
        a * &self.stochastic.s_mix
    }

    /// Discrete `L²(D × Γ)` norm of a parameter field.
    pub fn l2_norm_q(&self, q: &DMatrix<f64>) -> f64 {
        let aq: DMatrix<f64> = &self.spatial.mass_q * q;
        (aq * &self.stochastic.s_rho).dot(q).max(0.0).sqrt()
    }

    /// Nodal coefficient values, checking positivity at every vertex.
    pub fn nodal_coefficients(&self, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_q(q)?;
        let nodal = self.grid.dehierarchize(q)?;
        for j in 0..nodal.ncols() {
            for i in 0..nodal.nrows() {
                let v = nodal[(i, j)];
                if !(v > 0.0) {
                    return Err(Error::CoercivityViolation {
                        vertex: i,
                        node: j,
                        value: v,
                    });
                }
            }
        }
        Ok(nodal)
    }

    /// Weighted stiffness with Dirichlet elimination.
    fn dirichlet_stiffness(&self, q_nodal: &[f64]) -> CsrMatrix<f64> {
        let mut k = self.spatial.trilinear.contract(q_nodal);
        apply_dirichlet_identity(&mut k, self.dirichlet_mask());
        k
    }

    /// Surpluses of the constraint forcing term, `e_root ⊗ A_x^{-1} P f`.
    pub fn forcing_term(&self) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.n_u(), self.n_nodes());
        let f = DMatrix::from_column_slice(self.n_u(), 1, self.load.as_slice());
        e.set_column(self.grid.root(), &self.laplace_solve(&f).column(0));
        e
    }
}

fn check_shape(x: &DMatrix<f64>, rows: usize, cols: usize, what: &str) -> Result<()> {
    if x.nrows() != rows || x.ncols() != cols {
        return Err(invalid(format!(
            "{what} field has shape {}x{}, expected {rows}x{cols}",
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(())
}

/// Solves the state equation independently at every grid node and
/// returns the state surpluses.
pub fn solve_state(problem: &Problem, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q_nodal = problem.nodal_coefficients(q)?;
    let columns: Vec<DVector<f64>> = (0..problem.n_nodes())
        .into_par_iter()
        .map(|j| {
            let k = problem.dirichlet_stiffness(q_nodal.column(j).as_slice());
            let factor = SparseCholesky::new(&k)?;
            Ok(factor.solve(&problem.load))
        })
        .collect::<Result<_>>()?;
    let nodal = DMatrix::from_columns(&columns);
    problem.grid.hierarchize(&nodal)
}

/// Solves the stochastic Galerkin state equation `P S_{ρ,q} P u = P F` by
/// conjugate gradients; returns the state and the iteration count.
pub fn solve_state_galerkin(
    problem: &Problem,
    q: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DMatrix<f64>, usize)> {
    problem.nodal_coefficients(q)?;
    let form = assemble_coupled_form(
        &problem.stochastic,
        &problem.spatial.trilinear,
        q,
        WeightSlot::Parameter,
    )?;
    let mut rhs = DMatrix::zeros(problem.n_u(), problem.n_nodes());
    let col = &problem.stochastic.s_rho.column(problem.grid.root());
    for j in 0..problem.n_nodes() {
        rhs.column_mut(j).axpy(col[j], &problem.load, 0.0);
    }
    let op = masked_operator(problem, &form);
    let diag = probe_diagonal(problem.n_u(), problem.n_nodes(), &op);
    let out = pcg(
        &op,
        &diag,
        &rhs,
        DMatrix::zeros(rhs.nrows(), rhs.ncols()),
        tol,
        max_iter,
    )?;
    Ok((out.solution, out.iterations))
}

fn masked_operator<'a>(problem: &'a Problem, form: &'a CoupledForm<'a>) -> impl Fn(&DMatrix<f64>) -> DMatrix<f64> + 'a {
    move |v: &DMatrix<f64>| {
        let mut x = v.clone();
        problem.mask_state(&mut x);
        let mut y = form.apply(&x).expect("shapes checked at assembly");
        problem.mask_state(&mut y);
        let mask = problem.dirichlet_mask();
        for j in 0..y.ncols() {
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    y[(i, j)] = v[(i, j)];
                }
            }
        }
        y
    }
}

/// Diagonal of a linear operator by probing with unit vectors.
pub fn probe_diagonal(rows: usize, cols: usize, op: &(impl Fn(&DMatrix<f64>) -> DMatrix<f64> + Sync)) -> DMatrix<f64> {
    let entries: Vec<f64> = (0..rows * cols)
        .into_par_iter()
        .map(|k| {
            let mut e = DMatrix::zeros(rows, cols);
            e[k] = 1.0;
            op(&e)[k]
        })
        .collect();
    DMatrix::from_vec(rows, cols, entries)
}

/// The equality constraint evaluated at a pair `(q, u)`.
#[derive(Clone, Debug)]
pub struct ConstraintEval {
    /// Surpluses of the preconditioned residual.
    pub residual: DMatrix<f64>,
    /// The same residual at the grid nodes.
    pub raw_paths: DMatrix<f64>,
}

/// Evaluates the preconditioned weak residual of the state equation.
pub fn eval_constraint(problem: &Problem, q: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<ConstraintEval> {
    problem.check_q(q)?;
    problem.check_u(u)?;
    let lin = StateLinearization::new(problem, q)?;
    let residual = lin.apply(u)? - problem.forcing_term();
    let raw_paths = problem.grid.dehierarchize(&residual)?;
    Ok(ConstraintEval { residual, raw_paths })
}

/// Linearization of the constraint in `u` at a fixed parameter; the
/// constraint is affine in `u`, so `e(q, u) = J_u u − e_f`.
pub struct StateLinearization<'a> {
    problem: &'a Problem,
    kind: StateKind<'a>,
}

enum StateKind<'a> {
    Collocation { stiffness: Vec<CsrMatrix<f64>> },
    Galerkin { form: CoupledForm<'a> },
}

impl<'a> StateLinearization<'a> {
    pub fn new(problem: &'a Problem, q: &DMatrix<f64>) -> Result<Self> {
        problem.check_q(q)?;
        let kind = match problem.model {
            ConstraintModel::Collocation => {
                let nodal = problem.grid.dehierarchize(q)?;
                let stiffness = (0..problem.n_nodes())
                    .into_par_iter()
                    .map(|j| problem.spatial.trilinear.contract(nodal.column(j).as_slice()))
                    .collect();
                StateKind::Collocation { stiffness }
            }
            ConstraintModel::Galerkin => StateKind::Galerkin {
                form: assemble_coupled_form(
                    &problem.stochastic,
                    &problem.spatial.trilinear,
                    q,
                    WeightSlot::Parameter,
                )?,
            },
        };
        Ok(Self { problem, kind })
    }

    /// Unpreconditioned per-node operators (collocation model only).
    pub fn node_stiffness(&self) -> Option<&[CsrMatrix<f64>]> {
        match &self.kind {
            StateKind::Collocation { stiffness } => Some(stiffness),
            StateKind::Galerkin { .. } => None,
        }
    }

    /// `J_u v`.
    pub fn apply(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.problem.check_u(v)?;
        let p = self.problem;
        match &self.kind {
            StateKind::Collocation { stiffness } => {
                let nodal = p.grid.dehierarchize(v)?;
                let cols: Vec<DVector<f64>> = stiffness
                    .par_iter()
                    .enumerate()
                    .map(|(j, k)| {
                        let x: DVector<f64> = k * &nodal.column(j);
                        x
                    })
                    .collect();
                let mut e = p.laplace_solve(&DMatrix::from_columns(&cols));
                p.grid.hierarchize_in_place(&mut e);
                Ok(e)
            }
            StateKind::Galerkin { form } => Ok(p.s_hat_inv_masked(&form.apply(v)?)),
        }
    }

    /// `J_uᵀ y`.
    pub fn apply_adjoint(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.problem.check_u(y)?;
        let p = self.problem;
        match &self.kind {
            StateKind::Collocation { stiffness } => {
                let mut yt = y.clone();
                p.grid.hierarchize_transpose_in_place(&mut yt);
                let z = p.laplace_solve(&yt);
                let cols: Vec<DVector<f64>> = stiffness
                    .par_iter()
                    .enumerate()
                    .map(|(j, k)| {
                        let x: DVector<f64> = k * &z.column(j);
                        x
                    })
                    .collect();
                let mut out = DMatrix::from_columns(&cols);
                p.grid.dehierarchize_transpose_in_place(&mut out);
                Ok(out)
            }
            StateKind::Galerkin { form } => {
                let z = p.laplace_solve(y);
                let zt = z.transpose();
                let w = p.s_rho_factor.solve(&zt).transpose();
                form.apply(&w)
            }
        }
    }
}

/// Linearization of the constraint in `q` at a fixed state; the
/// constraint is affine in `q`, so `e(q, u) = J_q q − e_f`.
pub struct ParameterLinearization<'a> {
    problem: &'a Problem,
    kind: ParameterKind<'a>,
}

enum ParameterKind<'a> {
    /// Per node, the matrix `[G[i] u_j]_i` mapping nodal parameters to
    /// state covectors, and its transpose.
    Collocation {
        maps: Vec<(CsrMatrix<f64>, CsrMatrix<f64>)>,
    },
    Galerkin {
        form: CoupledForm<'a>,
    },
}

impl<'a> ParameterLinearization<'a> {
    pub fn new(problem: &'a Problem, u: &DMatrix<f64>) -> Result<Self> {
        problem.check_u(u)?;
        let kind = match problem.model {
            ConstraintModel::Collocation => {
                let nodal = problem.grid.dehierarchize(u)?;
                let maps = (0..problem.n_nodes())
                    .into_par_iter()
                    .map(|j| {
                        let m = coefficient_map(&problem.spatial.trilinear, nodal.column(j).as_slice());
                        let mt = m.transpose();
                        (m, mt)
                    })
                    .collect();
                ParameterKind::Collocation { maps }
            }
            ConstraintModel::Galerkin => ParameterKind::Galerkin {
                form: assemble_coupled_form(&problem.stochastic, &problem.spatial.trilinear, u, WeightSlot::State)?,
            },
        };
        Ok(Self { problem, kind })
    }

    /// Per-node coefficient maps (collocation model only).
    pub fn node_maps(&self) -> Option<Vec<&CsrMatrix<f64>>> {
        match &self.kind {
            ParameterKind::Collocation { maps } => Some(maps.iter().map(|m| &m.0).collect()),
            ParameterKind::Galerkin { .. } => None,
        }
    }

    /// `J_q h`.
    pub fn apply(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.problem.check_q(h)?;
        let p = self.problem;
        match &self.kind {
            ParameterKind::Collocation { maps } => {
                let nodal = p.grid.dehierarchize(h)?;
                let cols: Vec<DVector<f64>> = maps
                    .par_iter()
                    .enumerate()
                    .map(|(j, (m, _))| {
                        let x: DVector<f64> = m * &nodal.column(j);
                        x
                    })
                    .collect();
                let mut e = p.laplace_solve(&DMatrix::from_columns(&cols));
                p.grid.hierarchize_in_place(&mut e);
                Ok(e)
            }
            ParameterKind::Galerkin { form } => Ok(p.s_hat_inv_masked(&form.apply_transpose(h)?)),
        }
    }

    /// `J_qᵀ y`.
    pub fn apply_adjoint(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.problem.check_u(y)?;
        let p = self.problem;
        match &self.kind {
            ParameterKind::Collocation { maps } => {
                let mut yt = y.clone();
                p.grid.hierarchize_transpose_in_place(&mut yt);
                let z = p.laplace_solve(&yt);
                let cols: Vec<DVector<f64>> = maps
                    .par_iter()
                    .enumerate()
                    .map(|(j, (_, mt))| {
                        let x: DVector<f64> = mt * &z.column(j);
                        x
                    })
                    .collect();
                let mut out = DMatrix::from_columns(&cols);
                p.grid.dehierarchize_transpose_in_place(&mut out);
                Ok(out)
            }
            ParameterKind::Galerkin { form } => {
                let z = p.laplace_solve(y);
                let zt = z.transpose();
                let w = p.s_rho_factor.solve(&zt).transpose();
                form.apply(&w)
            }
        }
    }
}

/// Sparse `M_u × M_q` matrix with columns `Σ_i2 G[i, ·, i2] u[i2]`.
pub fn coefficient_map(trilinear: &Trilinear, u: &[f64]) -> CsrMatrix<f64> {
    let mut coo = CooMatrix::new(trilinear.n_u(), trilinear.n_q());
    for i in 0..trilinear.n_q() {
        for &(i1, i2, v) in trilinear.slice(i) {
            if u[i2] != 0.0 {
                coo.push(i1, i, v * u[i2]);
            }
        }
    }
    CsrMatrix::from(&coo)
}

/// Solves the adjoint equation `J_uᵀ Ŝ λ = −P Ŝ (u − û)` for the
/// multiplier at a given `(q, u)`.
pub fn solve_adjoint(
    problem: &Problem,
    q: &DMatrix<f64>,
    u: &DMatrix<f64>,
    u_hat: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    problem.check_u(u_hat)?;
    let q_nodal = problem.nodal_coefficients(q)?;
    let mut r = u - u_hat;
    problem.mask_state(&mut r);
    let mut rhs = problem.s_hat(&r);
    problem.mask_state(&mut rhs);
    match problem.model {
        ConstraintModel::Collocation => {
            // λ = −Ŝ^{-1} Dᵀ blockdiag(A_x K_j^{-1}) Hᵀ P Ŝ r
            let mut y = rhs;
            problem.grid.hierarchize_transpose_in_place(&mut y);
            let cols: Vec<DVector<f64>> = (0..problem.n_nodes())
                .into_par_iter()
                .map(|j| {
                    let k = problem.dirichlet_stiffness(q_nodal.column(j).as_slice());
                    let factor = SparseCholesky::new(&k)?;
                    let mut z = factor.solve(&y.column(j).into_owned());
                    zero_masked(z.as_mut_slice(), problem.dirichlet_mask());
                    let az: DVector<f64> = &problem.spatial.stiffness_u * &z;
                    Ok(az)
                })
                .collect::<Result<_>>()?;
            let mut x = DMatrix::from_columns(&cols);
            problem.grid.dehierarchize_transpose_in_place(&mut x);
            Ok(-problem.s_hat_inv_masked(&x))
        }
        ConstraintModel::Galerkin => {
            let form = assemble_coupled_form(
                &problem.stochastic,
                &problem.spatial.trilinear,
                q,
                WeightSlot::Parameter,
            )?;
            let op = masked_operator(problem, &form);
            let diag = probe_diagonal(problem.n_u(), problem.n_nodes(), &op);
            let out = pcg(&op, &diag, &(-rhs), DMatrix::zeros(u.nrows(), u.ncols()), tol, max_iter)?;
            Ok(out.solution)
        }
    }
}
