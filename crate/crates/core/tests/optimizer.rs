mod common;

use common::*;
use nalgebra::DMatrix;
use stochident::forward::{eval_constraint, solve_state, ConstraintModel};
use stochident::optimizer::{
    auglag_value, cost_functional, grad_q, grad_u, run, solve_subproblem_q, solve_subproblem_u, RunConfig,
};

#[test]
fn gradients_match_finite_differences_collocation() {
    let (q, u) = gradient_fd_errors(ConstraintModel::Collocation);
    assert!(q <= 1e-6 && u <= 1e-6, "{q} {u}");
}

#[test]
fn gradients_match_finite_differences_galerkin() {
    let (q, u) = gradient_fd_errors(ConstraintModel::Galerkin);
    assert!(q <= 1e-6 && u <= 1e-6, "{q} {u}");
}

#[test]
fn auglag_is_quadratic_along_parameter_lines() {
    let problem = interval_problem(3, 2, 2, ConstraintModel::Collocation);
    let (state, u_hat) = random_auglag_state(&problem, 5);
    let mut r = rng(6);
    let dq = random_matrix(&mut r, problem.n_q(), problem.n_nodes());
    let value_at = |t: f64| {
        let mut s = state.clone();
        s.q += &dq * t;
        auglag_value(&s, &u_hat, &problem).unwrap()
    };
    let second = |t: f64| value_at(t + 1.0) - 2.0 * value_at(t) + value_at(t - 1.0);
    let (a, b) = (second(0.0), second(2.5));
    assert!(rel_err(a, b) <= 1e-10, "{a} vs {b}");
}

#[test]
fn auglag_trivial_values() {
    let problem = interval_problem(3, 1, 3, ConstraintModel::Collocation);
    let (mut state, u_hat) = random_auglag_state(&problem, 9);
    // zero penalty and multiplier reduce to the cost functional
    state.penalty = 0.0;
    state.lambda.fill(0.0);
    let v = auglag_value(&state, &u_hat, &problem).unwrap();
    let j = cost_functional(&problem, &state.q, &state.u, &u_hat, state.beta).unwrap();
    assert_eq!(v, j);

    // u = û with β = 0 and zero multiplier has zero gradient in u and q
    state.u = u_hat.clone();
    state.beta = 0.0;
    let gu = grad_u(&state, &u_hat, &problem).unwrap();
    assert!(gu.amax() == 0.0);
    let gq = grad_q(&state, &problem).unwrap();
    assert!(gq.amax() == 0.0);
}

#[test]
fn grad_u_is_affine() {
    let problem = interval_problem(3, 1, 3, ConstraintModel::Collocation);
    let (state, u_hat) = random_auglag_state(&problem, 12);
    let mut r = rng(13);
    let u1 = random_state(&problem, &mut r);
    let u2 = random_state(&problem, &mut r);
    let g = |u: DMatrix<f64>| {
        let mut s = state.clone();
        s.u = u;
        grad_u(&s, &u_hat, &problem).unwrap()
    };
    let zero = DMatrix::zeros(u1.nrows(), u1.ncols());
    let combo = g(&u1 + &u2) - g(u1.clone()) - g(u2.clone()) + g(zero);
    assert!(combo.amax() <= 1e-10 * g(u1).amax());
}

fn dense_subproblem_check(model: ConstraintModel) {
    let problem = interval_problem(3, 1, 3, model);
    let (state, u_hat) = random_auglag_state(&problem, 21);
    let cfg = RunConfig {
        pcg_tol: 1e-12,
        ..RunConfig::default()
    };

    // parameter subproblem: assemble the Hessian column by column from
    // gradient differences and solve densely
    let mq = problem.n_q() * problem.n_nodes();
    let g0 = {
        let mut s = state.clone();
        s.q.fill(0.0);
        grad_q(&s, &problem).unwrap()
    };
    let mut hess = DMatrix::zeros(mq, mq);
    for k in 0..mq {
        let mut s = state.clone();
        s.q.fill(0.0);
        s.q[k] = 1.0;
        let col = grad_q(&s, &problem).unwrap() - &g0;
        hess.set_column(k, &vec_of(&col));
    }
    let dense = hess.lu().solve(&(-vec_of(&g0))).unwrap();
    let out = solve_subproblem_q(&state, &problem, &cfg).unwrap();
    assert!((vec_of(&out.solution) - &dense).norm() <= 1e-8 * dense.norm());

    let mask = problem.dirichlet_mask().to_vec();
    let interior: Vec<usize> = (0..problem.n_u() * problem.n_nodes())
        .filter(|k| !mask[k % problem.n_u()])
        .collect();
    let g0 = {
        let mut s = state.clone();
        s.u.fill(0.0);
        grad_u(&s, &u_hat, &problem).unwrap()
    };
    let mut hess = DMatrix::zeros(interior.len(), interior.len());
    for (c, &k) in interior.iter().enumerate() {
        let mut s = state.clone();
        s.u.fill(0.0);
        s.u[k] = 1.0;
        let col = grad_u(&s, &u_hat, &problem).unwrap() - &g0;
        for (r, &kk) in interior.iter().enumerate() {
            hess[(r, c)] = col[kk];
        }
    }
    let rhs = nalgebra::DVector::from_iterator(interior.len(), interior.iter().map(|&k| -g0[k]));
    let dense = hess.lu().solve(&rhs).unwrap();
    let out = solve_subproblem_u(&state, &u_hat, &problem, &cfg).unwrap();
    let got = nalgebra::DVector::from_iterator(interior.len(), interior.iter().map(|&k| out.solution[k]));
    assert!((got - &dense).norm() <= 1e-8 * dense.norm());
}

#[test]
fn subproblems_match_dense_solves_collocation() {
    dense_subproblem_check(ConstraintModel::Collocation);
}

#[test]
fn subproblems_match_dense_solves_galerkin() {
    dense_subproblem_check(ConstraintModel::Galerkin);
}

#[test]
fn subproblem_limits() {
    let problem = interval_problem(3, 1, 3, ConstraintModel::Collocation);
    let (mut state, u_hat) = random_auglag_state(&problem, 31);
    state.penalty = 0.0;
    state.lambda.fill(0.0);
    let cfg = RunConfig {
        pcg_tol: 1e-12,
        ..RunConfig::default()
    };
    let u = solve_subproblem_u(&state, &u_hat, &problem, &cfg).unwrap().solution;
    assert!((u - &u_hat).amax() <= 1e-10);

    state.beta = 1e6;
    let q = solve_subproblem_q(&state, &problem, &cfg).unwrap().solution;
    assert!(q.amax() <= 1e-12);
}

#[test]
fn exact_data_is_a_fixed_point() {
    let problem = interval_problem(4, 1, 3, ConstraintModel::Collocation);
    let mut q = DMatrix::zeros(problem.n_q(), problem.n_nodes());
    q.column_mut(0).fill(2.0);
    let u = solve_state(&problem, &q).unwrap();
    let e = eval_constraint(&problem, &q, &u).unwrap();
    assert!(e.residual.amax() <= 1e-12);
    let cfg = RunConfig {
        beta: 0.0,
        q_init: 2.0,
        ..RunConfig::default()
    };
    let report = run(&cfg, &u, &problem, Some(&q), |_| Ok(())).unwrap();
    assert!(report.converged);
    assert_eq!(report.state.iteration, 1);
    assert!(report.state.history[1].increment.unwrap() <= 1e-12);
}

#[test]
fn penalty_schedule_is_monotone_and_capped() {
    let problem = interval_problem(4, 1, 2, ConstraintModel::Collocation);
    let mut q = DMatrix::zeros(problem.n_q(), problem.n_nodes());
    q.column_mut(0).fill(2.0);
    q.column_mut(1).fill(0.3);
    let u = solve_state(&problem, &q).unwrap();
    let cfg = RunConfig {
        c0: 100.0,
        c_max: 500.0,
        max_outer: 6,
        ..RunConfig::default()
    };
    let mut u = u;
    u *= 1.01;
    let report = run(&cfg, &u, &problem, None, |_| Ok(())).unwrap();
    let pens: Vec<f64> = report.state.history[1..].iter().map(|r| r.penalty).collect();
    let expected = [100.0, 200.0, 400.0, 500.0, 500.0, 500.0];
    assert_eq!(pens[..], expected[..pens.len()]);
    assert!(report.converged || pens.len() == 6);
}
