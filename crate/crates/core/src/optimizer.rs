//! Augmented Lagrangian identification with sequential splitting between
//! the parameter and the state.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::forward::{
    eval_constraint, probe_diagonal, ConstraintModel, ParameterLinearization, Problem, StateLinearization,
};
use crate::linalg::{diagonal, pcg};

/// Solver settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Regularization weight.
    pub beta: f64,
    /// Initial penalty.
    pub c0: f64,
    /// Penalty growth factor per outer iteration.
    pub c_growth: f64,
    /// Penalty cap.
    pub c_max: f64,
    /// Stop once the `L²` increment of `q` drops below this.
    pub outer_tol: f64,
    /// Relative residual tolerance of the inner conjugate gradient solves.
    pub pcg_tol: f64,
    pub pcg_max_iter: usize,
    pub max_outer: usize,
    /// Constant initial coefficient.
    pub q_init: f64,
    /// Clamp nodal coefficient values after each parameter update.
    pub enforce_bounds: bool,
    pub q_min: f64,
    pub q_max: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            beta: 5e-5,
            c0: 10.0,
            c_growth: 2.0,
            c_max: 1e4,
            outer_tol: 1e-5,
            pcg_tol: 1e-5,
            pcg_max_iter: 5000,
            max_outer: 30,
            q_init: 1.0,
            enforce_bounds: false,
            q_min: 1e-3,
            q_max: 1e3,
        }
    }
}

impl RunConfig {
    /// Checks value ranges, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Error::Config {
            key: key.into(),
            message: message.into(),
        };
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(bad("beta", "must be a finite non-negative number"));
        }
        for (key, v) in [
            ("c0", self.c0),
            ("c_max", self.c_max),
            ("outer_tol", self.outer_tol),
            ("pcg_tol", self.pcg_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(key, "must be positive"));
            }
        }
        if !(self.c_growth >= 1.0 && self.c_growth.is_finite()) {
            return Err(bad("c_growth", "must be at least 1"));
        }
        if self.c_max < self.c0 {
            return Err(bad("c_max", "must not be smaller than c0"));
        }
        if self.pcg_max_iter == 0 {
            return Err(bad("pcg_max_iter", "must be positive"));
        }
        if self.max_outer == 0 {
            return Err(bad("max_outer", "must be positive"));
        }
        if !self.q_init.is_finite() {
            return Err(bad("q_init", "must be finite"));
        }
        if !(self.q_min < self.q_max) {
            return Err(bad("q_max", "must exceed q_min"));
        }
        Ok(())
    }
}

/// One row of the convergence table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub step: usize,
    pub pcg_iters_q: usize,
    pub pcg_iters_u: usize,
    /// `‖q − q̂_k‖` when the exact parameter is known.
    pub l2_error: Option<f64>,
    /// `‖q̂_k − q̂_{k−1}‖`; absent for the initial state.
    pub increment: Option<f64>,
    /// Misfit plus regularization at `(q_k, u_k)`.
    pub cost_functional: f64,
    /// Augmented Lagrangian at `(q_k, u_k)` with the updated multiplier
    /// and the penalty used in step `k`.
    pub auglag_functional: f64,
    /// `‖e(q_k, u_k)‖` in the `S_ρ ⊗ A_x` norm.
    pub constraint_norm: f64,
    pub penalty: f64,
}

/// Iterate of the method.
#[derive(Clone, Debug)]
pub struct AugLagState {
    pub q: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub penalty: f64,
    pub beta: f64,
    pub iteration: usize,
    pub history: Vec<IterationRecord>,
}

impl AugLagState {
    /// Constant coefficient, state equal to the data, zero multiplier.
    pub fn initial(problem: &Problem, cfg: &RunConfig, u_hat: &DMatrix<f64>) -> Result<Self> {
        problem.check_u(u_hat)?;
        let mut q = DMatrix::zeros(problem.n_q(), problem.n_nodes());
        q.column_mut(problem.grid.root()).fill(cfg.q_init);
        let mut u = u_hat.clone();
        problem.mask_state(&mut u);
        Ok(Self {
            q,
            u,
            lambda: DMatrix::zeros(problem.n_u(), problem.n_nodes()),
            penalty: cfg.c0,
            beta: cfg.beta,
            iteration: 0,
            history: Vec::new(),
        })
    }
}

fn residual(problem: &Problem, u: &DMatrix<f64>, u_hat: &DMatrix<f64>) -> DMatrix<f64> {
    let mut r = u - u_hat;
    problem.mask_state(&mut r);
    r
}

/// `½ ‖u − û‖² + β/2 ‖q‖²_reg`.
pub fn cost_functional(
    problem: &Problem,
    q: &DMatrix<f64>,
    u: &DMatrix<f64>,
    u_hat: &DMatrix<f64>,
    beta: f64,
) -> Result<f64> {
    problem.check_q(q)?;
    problem.check_u(u)?;
    problem.check_u(u_hat)?;
    let r = residual(problem, u, u_hat);
    Ok(0.5 * problem.inner_s(&r, &r) + 0.5 * beta * problem.regularization(q).dot(q))
}

/// Value of the augmented Lagrangian at the state.
pub fn auglag_value(state: &AugLagState, u_hat: &DMatrix<f64>, problem: &Problem) -> Result<f64> {
    let j = cost_functional(problem, &state.q, &state.u, u_hat, state.beta)?;
    problem.check_u(&state.lambda)?;
    let e = eval_constraint(problem, &state.q, &state.u)?.residual;
    Ok(j + problem.inner_s(&state.lambda, &e) + 0.5 * state.penalty * problem.inner_s(&e, &e))
}

/// `λ + c e(q, u)`, the multiplier estimate driving both gradients.
fn shifted_multiplier(state: &AugLagState, problem: &Problem) -> Result<DMatrix<f64>> {
    let e = eval_constraint(problem, &state.q, &state.u)?.residual;
    Ok(&state.lambda + e * state.penalty)
}

/// Gradient of the augmented Lagrangian with respect to `q`.
pub fn grad_q(state: &AugLagState, problem: &Problem) -> Result<DMatrix<f64>> {
    let lin = ParameterLinearization::new(problem, &state.u)?;
    let mu = shifted_multiplier(state, problem)?;
    let g = lin.apply_adjoint(&problem.s_hat(&mu))?;
    Ok(problem.regularization(&state.q) * state.beta + g)
}

/// Gradient of the augmented Lagrangian with respect to `u`; Dirichlet
/// rows are zero.
pub fn grad_u(state: &AugLagState, u_hat: &DMatrix<f64>, problem: &Problem) -> Result<DMatrix<f64>> {
    problem.check_u(u_hat)?;
    let lin = StateLinearization::new(problem, &state.q)?;
    let mu = shifted_multiplier(state, problem)?;
    let r = residual(problem, &state.u, u_hat);
    let mut g = problem.s_hat(&r) + lin.apply_adjoint(&problem.s_hat(&mu))?;
    problem.mask_state(&mut g);
    Ok(g)
}

/// Outcome of one subproblem solve.
#[derive(Clone, Debug)]
pub struct SubproblemOutcome {
    pub solution: DMatrix<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Minimizes the augmented Lagrangian over `q` with `u` and `λ` fixed.
pub fn solve_subproblem_q(state: &AugLagState, problem: &Problem, cfg: &RunConfig) -> Result<SubproblemOutcome> {
    let lin = ParameterLinearization::new(problem, &state.u)?;
    let (beta, c) = (state.beta, state.penalty);
    let hess = |h: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = problem.regularization(h) * beta;
        if c != 0.0 {
            let jh = lin.apply(h).expect("shape");
            out += lin.apply_adjoint(&problem.s_hat(&jh)).expect("shape") * c;
        }
        out
    };
    let grad = grad_q(state, problem)?;
    let rhs = hess(&state.q) - grad;
    let diag = match problem.model {
        ConstraintModel::Collocation => collocation_q_diagonal(problem, &lin, beta, c),
        ConstraintModel::Galerkin => probe_diagonal(problem.n_q(), problem.n_nodes(), &hess),
    };
    let out = pcg(&hess, &diag, &rhs, state.q.clone(), cfg.pcg_tol, cfg.pcg_max_iter)?;
    let mut solution = out.solution;
    if cfg.enforce_bounds {
        let mut nodal = problem.grid.dehierarchize(&solution)?;
        nodal.apply(|v| *v = v.clamp(cfg.q_min, cfg.q_max));
        solution = problem.grid.hierarchize(&nodal)?;
    }
    Ok(SubproblemOutcome {
        solution,
        iterations: out.iterations,
        relative_residual: out.relative_residual,
    })
}

/// Minimizes the augmented Lagrangian over `u` with `q` and `λ` fixed.
pub fn solve_subproblem_u(
    state: &AugLagState,
    u_hat: &DMatrix<f64>,
    problem: &Problem,
    cfg: &RunConfig,
) -> Result<SubproblemOutcome> {
    let lin = StateLinearization::new(problem, &state.q)?;
    let c = state.penalty;
    let mask = problem.dirichlet_mask();
    let hess = |v: &DMatrix<f64>| -> DMatrix<f64> {
        let mut x = v.clone();
        problem.mask_state(&mut x);
        let mut out = problem.s_hat(&x);
        if c != 0.0 {
            let jv = lin.apply(&x).expect("shape");
            out += lin.apply_adjoint(&problem.s_hat(&jv)).expect("shape") * c;
        }
        problem.mask_state(&mut out);
        for j in 0..out.ncols() {
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    out[(i, j)] = v[(i, j)];
                }
            }
        }
        out
    };
    let grad = grad_u(state, u_hat, problem)?;
    let mut x0 = state.u.clone();
    problem.mask_state(&mut x0);
    let rhs = hess(&x0) - grad;
    let diag = match problem.model {
        ConstraintModel::Collocation => collocation_u_diagonal(problem, &lin, c),
        ConstraintModel::Galerkin => probe_diagonal(problem.n_u(), problem.n_nodes(), &hess),
    };
    let out = pcg(&hess, &diag, &rhs, x0, cfg.pcg_tol, cfg.pcg_max_iter)?;
    Ok(SubproblemOutcome {
        solution: out.solution,
        iterations: out.iterations,
        relative_residual: out.relative_residual,
    })
}

/// Diagonal of `Dᵀ blockdiag(Bᵀ) (S̃ ⊗ A_x) blockdiag(B) D` for per-node
/// maps `B_k = A_x^{-1} P a_k(·)`, where column `i` of node `k` is `cols(k, i)`.
fn penalty_diagonal(
    problem: &Problem,
    n_rows: usize,
    skip: &[bool],
    cols: impl Fn(usize, usize) -> Vec<(usize, f64)> + Sync,
) -> DMatrix<f64> {
    let n = problem.n_nodes();
    let m = problem.n_u();
    let d = problem.dehierarchization();
    let gram = problem.nodal_gram();
    let rows: Vec<Vec<f64>> = (0..n_rows)
        .into_par_iter()
        .map(|i| {
            if skip[i] {
                return vec![0.0; n];
            }
            let sparse: Vec<Vec<(usize, f64)>> = (0..n).map(|k| cols(k, i)).collect();
            let mut dense = DMatrix::zeros(m, n);
            for (k, col) in sparse.iter().enumerate() {
                for &(r, v) in col {
                    dense[(r, k)] = v;
                }
            }
            let z = problem.laplace_solve(&dense);
            let mut weighted = DMatrix::zeros(n, n);
            for k in 0..n {
                for l in 0..n {
                    let c: f64 = sparse[k].iter().map(|&(r, v)| v * z[(r, l)]).sum();
                    weighted[(k, l)] = gram[(k, l)] * c;
                }
            }
            let dw = d.transpose() * weighted * d;
            (0..n).map(|j| dw[(j, j)]).collect()
        })
        .collect();
    DMatrix::from_fn(n_rows, n, |i, j| rows[i][j])
}

fn collocation_q_diagonal(problem: &Problem, lin: &ParameterLinearization, beta: f64, c: f64) -> DMatrix<f64> {
    let n = problem.n_nodes();
    let reg_space: Vec<f64> = diagonal(&problem.spatial.mass_q)
        .iter()
        .zip(diagonal(&problem.spatial.stiffness_q))
        .map(|(a, b)| a + b)
        .collect();
    let mut diag = DMatrix::from_fn(problem.n_q(), n, |i, j| {
        beta * reg_space[i] * problem.stochastic.s_mix[(j, j)]
    });
    if c != 0.0 {
        let maps = lin.node_maps().expect("collocation linearization");
        let transposed: Vec<_> = maps.iter().map(|m| m.transpose()).collect();
        let skip = vec![false; problem.n_q()];
        let pen = penalty_diagonal(problem, problem.n_q(), &skip, |k, i| {
            let row = transposed[k].row(i);
            row.col_indices()
                .iter()
                .copied()
                .zip(row.values().iter().copied())
                .collect()
        });
        diag += pen * c;
    }
    guard_diagonal(diag)
}

fn collocation_u_diagonal(problem: &Problem, lin: &StateLinearization, c: f64) -> DMatrix<f64> {
    let n = problem.n_nodes();
    let mask = problem.dirichlet_mask();
    let a = diagonal(&problem.spatial.stiffness_u);
    let mut diag = DMatrix::from_fn(problem.n_u(), n, |i, j| {
        if mask[i] {
            0.0
        } else {
            a[i] * problem.stochastic.s_rho[(j, j)]
        }
    });
    if c != 0.0 {
        let stiffness = lin.node_stiffness().expect("collocation linearization");
        let pen = penalty_diagonal(problem, problem.n_u(), mask, |k, i| {
            // stiffness is symmetric, so row i doubles as column i
            let row = stiffness[k].row(i);
            row.col_indices()
                .iter()
                .copied()
                .zip(row.values().iter().copied())
                .collect()
        });
        diag += pen * c;
    }
    for (i, &m) in mask.iter().enumerate() {
        if m {
            diag.row_mut(i).fill(1.0);
        }
    }
    guard_diagonal(diag)
}

fn guard_diagonal(mut diag: DMatrix<f64>) -> DMatrix<f64> {
    let floor = diag.amax() * 1e-14;
    diag.apply(|v| {
        if !(*v > floor) {
            *v = floor.max(f64::MIN_POSITIVE);
        }
    });
    diag
}

/// What the observer sees after each outer iteration.
pub struct IterationView<'a> {
    pub record: &'a IterationRecord,
    pub state: &'a AugLagState,
    pub lambda_prev: &'a DMatrix<f64>,
    pub constraint: &'a DMatrix<f64>,
    /// Penalty used for the multiplier update of this iteration.
    pub penalty_used: f64,
}

/// Result of a run.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub state: AugLagState,
    pub converged: bool,
}

/// Runs the method from the default initial state.
pub fn run<F>(
    cfg: &RunConfig,
    u_hat: &DMatrix<f64>,
    problem: &Problem,
    exact_q: Option<&DMatrix<f64>>,
    observer: F,
) -> Result<RunReport>
where
    F: FnMut(&IterationView) -> Result<()>,
{
    let state = AugLagState::initial(problem, cfg, u_hat)?;
    run_from(state, cfg, u_hat, problem, exact_q, observer)
}

/// Runs the method from a given initial state.
pub fn run_from<F>(
    mut state: AugLagState,
    cfg: &RunConfig,
    u_hat: &DMatrix<f64>,
    problem: &Problem,
    exact_q: Option<&DMatrix<f64>>,
    mut observer: F,
) -> Result<RunReport>
where
    F: FnMut(&IterationView) -> Result<()>,
{
    cfg.validate()?;
    if let Some(exact) = exact_q {
        problem.check_q(exact)?;
    }
    let mut u_hat = u_hat.clone();
    problem.mask_state(&mut u_hat);
    let l2_error = |q: &DMatrix<f64>| exact_q.map(|ex| problem.l2_norm_q(&(q - ex)));

    if state.history.is_empty() {
        let e = eval_constraint(problem, &state.q, &state.u)?.residual;
        let record = IterationRecord {
            step: 0,
            pcg_iters_q: 0,
            pcg_iters_u: 0,
            l2_error: l2_error(&state.q),
            increment: None,
            cost_functional: cost_functional(problem, &state.q, &state.u, &u_hat, state.beta)?,
            auglag_functional: auglag_value(&state, &u_hat, problem)?,
            constraint_norm: problem.inner_s(&e, &e).max(0.0).sqrt(),
            penalty: state.penalty,
        };
        state.history.push(record.clone());
        let lambda = state.lambda.clone();
        observer(&IterationView {
            record: &record,
            state: &state,
            lambda_prev: &lambda,
            constraint: &e,
            penalty_used: 0.0,
        })?;
    }

    let mut converged = false;
    for _ in 0..cfg.max_outer {
        let q_prev = state.q.clone();
        let q_out = solve_subproblem_q(&state, problem, cfg)?;
        state.q = q_out.solution;
        let u_out = solve_subproblem_u(&state, &u_hat, problem, cfg)?;
        state.u = u_out.solution;
        let e = eval_constraint(problem, &state.q, &state.u)?.residual;
        let c = state.penalty;
        let lambda_prev = state.lambda.clone();
        state.lambda = &lambda_prev + &e * c;
        state.iteration += 1;
        let increment = problem.l2_norm_q(&(&state.q - &q_prev));
        let record = IterationRecord {
            step: state.iteration,
            pcg_iters_q: q_out.iterations,
            pcg_iters_u: u_out.iterations,
            l2_error: l2_error(&state.q),
            increment: Some(increment),
            cost_functional: cost_functional(problem, &state.q, &state.u, &u_hat, state.beta)?,
            auglag_functional: auglag_value(&state, &u_hat, problem)?,
            constraint_norm: problem.inner_s(&e, &e).max(0.0).sqrt(),
            penalty: c,
        };
        log::info!(
            "step {}: increment {:.3e}, constraint {:.3e}, pcg {}/{}",
            record.step,
            increment,
            record.constraint_norm,
            record.pcg_iters_q,
            record.pcg_iters_u
        );
        state.history.push(record.clone());
        observer(&IterationView {
            record: &record,
            state: &state,
            lambda_prev: &lambda_prev,
            constraint: &e,
            penalty_used: c,
        })?;
        state.penalty = (c * cfg.c_growth).min(cfg.c_max);
        if increment < cfg.outer_tol {
            converged = true;
            break;
        }
    }
    Ok(RunReport { state, converged })
}

/// Rejects states whose shapes do not fit the problem.
pub fn check_state(state: &AugLagState, problem: &Problem) -> Result<()> {
    problem.check_q(&state.q)?;
    problem.check_u(&state.u)?;
    problem.check_u(&state.lambda)?;
    if !(state.penalty >= 0.0) {
        return Err(invalid("penalty must be non-negative"));
    }
    Ok(())
}
