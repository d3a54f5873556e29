mod common;

use common::*;

use nalgebra::DMatrix;
use stochident::forward::{
    eval_constraint, solve_adjoint, solve_state, solve_state_galerkin, ConstraintModel, ParameterLinearization,
    StateLinearization,
};
use stochident::linalg::to_dense;
use stochident::optimizer::{auglag_value, cost_functional, grad_u, AugLagState, RunConfig};

#[test]
fn constraint_matches_dense_oracle() {
    let mut r = rng(11);
    for p in problems() {
        let dense = Dense::new(&p);
        let q = random_parameter(&p, &mut r);
        let u = random_state(&p, &mut r);
        let got = eval_constraint(&p, &q, &u).unwrap();
        let want = match p.model {
            ConstraintModel::Collocation => dense.collocation_residual(&p, &q, &u),
            ConstraintModel::Galerkin => dense.galerkin_residual(&p, &q, &u),
        };
        assert!(rel_err_mat(&got.residual, &want) <= 1e-10, "{:?}", p.model);
        assert!(rel_err_mat(&got.raw_paths, &dense.nodal(&want)) <= 1e-10);
    }
}

#[test]
fn forward_solves_satisfy_the_constraint() {
    let mut r = rng(12);
    for p in problems() {
        let q = random_parameter(&p, &mut r);
        let u = match p.model {
            ConstraintModel::Collocation => solve_state(&p, &q).unwrap(),
            ConstraintModel::Galerkin => solve_state_galerkin(&p, &q, 1e-13, 2000).unwrap().0,
        };
        let e = eval_constraint(&p, &q, &u).unwrap().residual;
        let scale = p.forcing_term().amax();
        assert!(e.amax() <= 1e-9 * scale, "{:?}: {}", p.model, e.amax());
    }
}

#[test]
fn constant_coefficient_state_is_deterministic() {
    let p = interval_problem(4, 2, 3, ConstraintModel::Collocation);
    let mut q = DMatrix::zeros(p.n_q(), p.n_nodes());
    q.column_mut(p.grid.root()).fill(2.0);
    let u = solve_state(&p, &q).unwrap();
    for j in 0..p.n_nodes() {
        if j != p.grid.root() {
            assert!(u.column(j).amax() < 1e-13);
        }
    }
    // -2u'' = 1 + x on (0, 1) with zero ends
    let exact = |x: f64| (x * x * (-3.0 - x) + 4.0 * x) / 12.0;
    for (v, x) in p.space_u.mesh().vertices().iter().enumerate() {
        let got = u[(v, p.grid.root())];
        assert!((got - exact(x[0])).abs() < 1e-3, "{got} vs {}", exact(x[0]));
    }
}

#[test]
fn linearizations_are_adjoint_and_consistent() {
    let mut r = rng(13);
    for p in problems() {
        let q = random_parameter(&p, &mut r);
        let u = random_state(&p, &mut r);
        let ju = StateLinearization::new(&p, &q).unwrap();
        let jq = ParameterLinearization::new(&p, &u).unwrap();
        let v = random_state(&p, &mut r);
        let y = random_state(&p, &mut r);
        let h = random_matrix(&mut r, p.n_q(), p.n_nodes());
        let lhs = ju.apply(&v).unwrap().dot(&y);
        let rhs = v.dot(&ju.apply_adjoint(&y).unwrap());
        assert!(rel_err(lhs, rhs) <= 1e-10, "J_u {:?}", p.model);
        let lhs = jq.apply(&h).unwrap().dot(&y);
        let rhs = h.dot(&jq.apply_adjoint(&y).unwrap());
        assert!(rel_err(lhs, rhs) <= 1e-10, "J_q {:?}", p.model);
        // the bilinear coupling read from either side
        assert!(rel_err_mat(&ju.apply(&u).unwrap(), &jq.apply(&q).unwrap()) <= 1e-10);
    }
}

#[test]
fn adjoint_solution_zeroes_state_gradient() {
    let mut r = rng(14);
    for p in problems() {
        let q = random_parameter(&p, &mut r);
        let u = random_state(&p, &mut r);
        let u_hat = random_state(&p, &mut r);
        let lambda = solve_adjoint(&p, &q, &u, &u_hat, 1e-13, 2000).unwrap();
        // with zero penalty the state gradient is P Ŝ (u − û) + J_uᵀ Ŝ λ
        let e = eval_constraint(&p, &q, &u).unwrap().residual;
        let state = AugLagState {
            q: q.clone(),
            u: u.clone(),
            lambda,
            penalty: 0.0,
            beta: 0.0,
            iteration: 0,
            history: Vec::new(),
        };
        let g = grad_u(&state, &u_hat, &p).unwrap();
        let scale = p.s_hat(&(&u - &u_hat)).amax();
        assert!(g.amax() <= 1e-8 * scale, "{:?}: {}", p.model, g.amax());
        assert!(e.amax() > 0.0);
    }
}

#[test]
fn auglag_value_matches_dense_formula() {
    let mut r = rng(15);
    for p in problems() {
        let dense = Dense::new(&p);
        let u_hat = random_state(&p, &mut r);
        let state = AugLagState {
            q: random_parameter(&p, &mut r),
            u: random_state(&p, &mut r),
            lambda: random_state(&p, &mut r),
            penalty: 7.5,
            beta: 0.3,
            iteration: 0,
            history: Vec::new(),
        };
        let s_hat = kron(&p.stochastic.s_rho, &dense.lap);
        let reg_gram = to_dense(&p.spatial.mass_q) + to_dense(&p.spatial.stiffness_q);
        let reg = kron(&p.stochastic.s_mix, &reg_gram);
        let res = vec_of(&dense.masked(&state.u - &u_hat));
        let q = vec_of(&state.q);
        let e = vec_of(&match p.model {
            ConstraintModel::Collocation => dense.collocation_residual(&p, &state.q, &state.u),
            ConstraintModel::Galerkin => dense.galerkin_residual(&p, &state.q, &state.u),
        });
        let lam = vec_of(&state.lambda);
        let j = 0.5 * res.dot(&(&s_hat * &res)) + 0.5 * state.beta * q.dot(&(&reg * &q));
        let want = j + lam.dot(&(&s_hat * &e)) + 0.5 * state.penalty * e.dot(&(&s_hat * &e));
        let got = auglag_value(&state, &u_hat, &p).unwrap();
        assert!(rel_err(got, want) <= 1e-10, "{:?}: {got} vs {want}", p.model);
        let cost = cost_functional(&p, &state.q, &state.u, &u_hat, state.beta).unwrap();
        assert!(rel_err(cost, j) <= 1e-10);
    }
}

#[test]
fn shape_and_positivity_errors() {
    let p = interval_problem(3, 2, 2, ConstraintModel::Collocation);
    let bad = DMatrix::zeros(p.n_q() + 1, p.n_nodes());
    assert!(solve_state(&p, &bad).is_err());
    let mut q = DMatrix::zeros(p.n_q(), p.n_nodes());
    q.column_mut(p.grid.root()).fill(-1.0);
    assert!(matches!(
        solve_state(&p, &q),
        Err(stochident::Error::CoercivityViolation { .. })
    ));
    let cfg = RunConfig::default();
    assert!(AugLagState::initial(&p, &cfg, &DMatrix::zeros(1, 1)).is_err());
}
