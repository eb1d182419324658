import numpy as np
import numpy.testing as npt
import pytest

from learnsketch.constraints import ConstraintSpec, prox_l1
from learnsketch.estimate import exact_z
from learnsketch.ihs import (SolverNotConverged, Task, build_svm_dual, hessian_sketch_select, reference_solution,
                             run_ihs, sketched_quadratic_solve, solve_gram)
from learnsketch.sketch import identity_sketch, make_countsketch, make_gaussian

ETA = 0.1


def random_task(gen, n=60, d=4, constraint=None):
    A = gen.standard_normal((n, d))
    b = gen.standard_normal(n)
    return Task(A, b, constraint or ConstraintSpec())


def test_identity_sketch_solves_least_squares():
    gen = np.random.default_rng(0)
    task = random_task(gen)
    x = sketched_quadratic_solve(identity_sketch(task.n), task, np.zeros(task.d))
    npt.assert_allclose(x, np.linalg.solve(task.A.T @ task.A, task.A.T @ task.b), rtol=1e-8)


def test_orthonormal_columns_give_projection():
    gen = np.random.default_rng(1)
    Q = np.linalg.qr(gen.standard_normal((30, 3)))[0]
    task = Task(Q, gen.standard_normal(30))
    x = sketched_quadratic_solve(identity_sketch(30), task, np.zeros(3))
    npt.assert_allclose(x, Q.T @ task.b, atol=1e-12)


def proximal_gradient_oracle(task, iters=200_000):
    A, b, lam = task.A, task.b, task.constraint.lam
    L = np.linalg.norm(A, 2) ** 2
    x = np.zeros(task.d)
    for _ in range(iters):
        x = prox_l1(x - A.T @ (A @ x - b) / L, lam / L)
    return x


def test_small_lasso_matches_plain_proximal_gradient():
    gen = np.random.default_rng(2)
    task = random_task(gen, n=20, d=3, constraint=ConstraintSpec("l1", lam=1.0))
    x = sketched_quadratic_solve(identity_sketch(20), task, np.zeros(3))
    assert abs(task.objective(x) - task.objective(proximal_gradient_oracle(task))) < 1e-6


def test_scale_equivariance():
    gen = np.random.default_rng(3)
    task = random_task(gen)
    S = make_countsketch(20, task.n, gen)
    x1 = sketched_quadratic_solve(S, task, np.zeros(task.d))
    x2 = sketched_quadratic_solve(S, Task(task.A, 3.0 * task.b), np.zeros(task.d))
    npt.assert_allclose(x2, 3.0 * x1, rtol=1e-10)


def test_run_ihs_identity_reaches_optimum():
    gen = np.random.default_rng(4)
    for constraint in (ConstraintSpec(), ConstraintSpec("l1", lam=0.5)):
        task = random_task(gen, constraint=constraint)
        x_star = reference_solution(task)
        state = run_ihs(task, identity_sketch(task.n), 3, x_star=x_star)
        assert all(abs(e) <= 1e-8 * abs(task.objective(x_star)) + 1e-10 for e in state.errors)


def test_run_ihs_zero_rounds():
    task = random_task(np.random.default_rng(5))
    x0 = np.arange(4.0)
    state = run_ihs(task, identity_sketch(task.n), 0, x0=x0)
    npt.assert_array_equal(state.x, x0)
    assert state.errors == [] and state.times_ms == []


def test_run_ihs_gaussian_contraction():
    gen = np.random.default_rng(6)
    hits = 0
    for _ in range(30):
        task = random_task(gen, n=300, d=9)
        state = run_ihs(task, lambda t: make_gaussian(90, 300, gen), 5)
        hits += all(a > b for a, b in zip(state.errors, state.errors[1:]))
    assert hits >= 27


def test_simplex_iterates_stay_feasible():
    gen = np.random.default_rng(7)
    task = build_svm_dual(gen.standard_normal((40, 6)), gen.choice([-1.0, 1.0], 6), 1.0)
    x_star = reference_solution(task)
    x = task.initial_point()
    for _ in range(4):
        x = sketched_quadratic_solve(make_countsketch(36, task.n, gen), task, x)
        assert abs(x.sum() - 1) < 1e-9 and x.min() >= 0
    assert task.error(x, x_star) >= -1e-9


def test_nuclear_iterates_stay_feasible():
    gen = np.random.default_rng(8)
    A = gen.standard_normal((80, 4))
    task = Task(A, A @ gen.standard_normal((4, 3)), ConstraintSpec("nuclear", rho=2.0))
    x = task.initial_point()
    for _ in range(4):
        x = sketched_quadratic_solve(make_countsketch(20, 80, gen), task, x)
        assert np.linalg.svd(x, compute_uv=False).sum() <= 2.0 + 1e-6


def test_svm_dual_assembly():
    task = build_svm_dual(np.array([[2.0]]), np.array([1.0]), 1.0)
    npt.assert_array_equal(task.A, [[2.0], [1.0]])
    big = build_svm_dual(np.array([[2.0]]), np.array([1.0]), 1e16)
    assert big.A[1, 0] < 1e-7


def test_svm_dual_norm_identity():
    gen = np.random.default_rng(9)
    A, z, C = gen.standard_normal((5, 2)), np.array([1.0, -1.0]), 2.5
    task = build_svm_dual(A, z, C)
    x = gen.standard_normal(2)
    lhs = np.sum((task.A @ x) ** 2)
    rhs = np.sum((A @ (z * x)) ** 2) + np.sum(x**2) / C
    assert abs(lhs - rhs) < 1e-12


def test_svm_dual_validation():
    with pytest.raises(ValueError):
        build_svm_dual(np.eye(2), np.array([1.0, 0.0]), 1.0)
    with pytest.raises(ValueError):
        build_svm_dual(np.eye(2), np.array([1.0, -1.0]), 0.0)


def test_selection_prefers_identity():
    gen = np.random.default_rng(10)
    hits = 0
    for _ in range(100):
        task = random_task(gen, n=100, d=3)
        sel = hessian_sketch_select(identity_sketch(100), make_countsketch(9, 100, gen), task, ETA, gen)
        hits += sel.chosen == "learned"
    assert hits >= 95


def test_selection_rejects_zero_sketch():
    gen = np.random.default_rng(11)
    task = random_task(gen)
    zero = make_countsketch(16, task.n, gen).with_values(np.zeros(task.n))
    sel = hessian_sketch_select(zero, make_countsketch(16, task.n, gen), task, ETA, gen)
    assert sel.chosen == "random" and sel.learned.ratio == np.inf


def test_selection_bound_with_exact_z():
    gen = np.random.default_rng(12)
    hits = 0
    for _ in range(100):
        task = random_task(gen, n=200, d=5)
        S_l, S_r = make_countsketch(25, 200, gen), make_countsketch(25, 200, gen)
        sel = hessian_sketch_select(S_l, S_r, task, ETA, gen)
        z1, z2 = exact_z(S_l if sel.chosen == "learned" else S_r, task.A)
        x_star = reference_solution(task)
        lhs = np.linalg.norm(task.A @ (sel.x - x_star))
        hits += lhs <= (1 + ETA) ** 4 * (z2 / z1 + 4 * ETA) * np.linalg.norm(task.A @ x_star)
    assert hits >= 95


def test_adversarial_learned_sketch_no_worse_than_random():
    gen = np.random.default_rng(13)
    for _ in range(30):
        task = random_task(gen, n=200, d=5)
        S_r = make_countsketch(25, 200, gen)
        big = make_countsketch(25, 200, gen)
        v = big.v.copy()
        v[0] = 1e6
        for bad in (big.with_values(np.zeros(200)), big.with_values(v)):
            sel = hessian_sketch_select(bad, S_r, task, ETA, gen)
            x_star = reference_solution(task)
            z1, z2 = exact_z(S_r, task.A)
            bound = (1 + ETA) ** 4 * (z2 / z1**2 + 4 * ETA) * np.linalg.norm(task.A @ x_star)
            assert sel.chosen == "random" or np.linalg.norm(task.A @ (sel.x - x_star)) <= bound


def test_solve_gram_reports_nonconvergence():
    gen = np.random.default_rng(14)
    A = gen.standard_normal((50, 6)) @ np.diag([1, 1, 1, 1, 1, 1e-3])
    H = A.T @ A
    g = gen.standard_normal(6)
    with pytest.raises(SolverNotConverged) as info:
        solve_gram(H, g, np.zeros(6), ConstraintSpec("l1", lam=1e-3), max_iter=5, tol=1e-15)
    assert info.value.best.shape == (6,)


def test_task_validation():
    with pytest.raises(ValueError):
        Task(np.ones((3, 4)), np.ones(3))
    with pytest.raises(ValueError):
        Task(np.ones((4, 2)), np.ones((4, 2)))
