import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from conftest import random_lp, random_qp
from lpgd import sudoku
from lpgd.errors import (
    DimensionMismatch,
    Infeasible,
    InfeasibleProblem,
    InvalidProblem,
    MaxIterationsExceeded,
    TooLarge,
)
from lpgd.solver import (
    PrimalDualSolution,
    ProblemParameters,
    enumerate_vertices,
    residuals,
    solve,
    solve_exact_lp,
)


# --- ProblemParameters -----------------------------------------------------


def test_scalar_bounds_broadcast():
    p = ProblemParameters(c=[1, 2, 3], lo=0, hi=1)
    assert p.n == 3 and p.m == 0 and p.is_lp
    assert np.array_equal(p.lo, np.zeros(3)) and np.array_equal(p.hi, np.ones(3))


@pytest.mark.parametrize(
    "kwargs, err",
    [
        (dict(c=[1, 2], lo=[0, 0, 0], hi=1), DimensionMismatch),
        (dict(c=[1, 2], lo=0, hi=1, A=[[1, 1, 1]], b=[0]), DimensionMismatch),
        (dict(c=[1, 2], lo=0, hi=1, A=[[1, 1]], b=[0, 1]), DimensionMismatch),
        (dict(c=[1, 2], lo=1, hi=0), InvalidProblem),
        (dict(c=[1, np.nan], lo=0, hi=1), InvalidProblem),
        (dict(c=[1, 2], lo=np.nan, hi=1), InvalidProblem),
        (dict(c=[1, 2], lo=0, hi=1, H=[[1, 2], [0, 1]]), InvalidProblem),
        (dict(c=[1, 2], lo=0, hi=1, H=[[1, 0], [0, -1]]), InvalidProblem),
        (dict(c=[1, 2], lo=0, hi=1, H=np.eye(3)), DimensionMismatch),
    ],
)
def test_invalid_parameters(kwargs, err):
    with pytest.raises(err):
        ProblemParameters(**kwargs)


def test_psd_check_tolerance():
    # min eigenvalue -1e-10 relative to norm 1 is accepted
    H = np.diag([1.0, -1e-10])
    assert ProblemParameters(c=[0, 0], lo=0, hi=1, H=H).H is not None


def test_arrays_are_read_only():
    p = ProblemParameters(c=[1.0, 2.0], lo=0, hi=1)
    with pytest.raises(ValueError):
        p.c[0] = 5.0


def test_json_roundtrip_with_infinite_bounds():
    p = ProblemParameters(
        c=[1.0, -0.1 + 1e-17], lo=[-np.inf, 0.0], hi=[np.inf, 1.0], A=[[1.0, 2.0]], b=[0.3], H=np.eye(2)
    )
    q = ProblemParameters.from_json(p.to_json())
    for name in ("c", "lo", "hi", "A", "b", "H"):
        assert np.array_equal(getattr(p, name), getattr(q, name))
    d = json.loads(p.to_json())
    assert set(d) == {"c", "H", "A", "b", "lo", "hi"}


# --- solve: worked examples --------------------------------------------------


def test_box_lp_example(box_lp):
    r = solve(box_lp)
    assert np.allclose(r.x, [0, 1], atol=1e-6)
    assert r.objective == pytest.approx(-1.0, abs=1e-6)
    assert not r.warm_started


def test_strongly_convex_interior_example():
    r = solve(ProblemParameters(c=[0, 0], lo=-1, hi=1, H=np.eye(2)))
    assert np.allclose(r.x, 0, atol=1e-6)
    assert r.objective == pytest.approx(0.0, abs=1e-6)


def test_degenerate_feasibility_only_example():
    p = ProblemParameters(c=[0, 0], lo=0, hi=1, A=[[1, 1]], b=[-1])
    r = solve(p)
    assert r.primal_residual <= 1e-6
    assert r.x.sum() == pytest.approx(1.0, abs=1e-6)
    assert np.all(r.x >= -1e-6) and np.all(r.x <= 1 + 1e-6)
    assert r.objective == pytest.approx(0.0, abs=1e-6)


def test_zero_dimensional_constraints_and_pure_box():
    p = ProblemParameters(c=[-1.0, 2.0, 0.5], lo=[-1, -2, -3], hi=[1, 2, 3])
    assert np.allclose(solve(p).x, [1, -2, -3], atol=1e-6)


# --- solve: properties -----------------------------------------------------


def test_oracle_agreement_random_lps():
    rng = np.random.default_rng(0)
    tol = 1e-7
    for _ in range(100):
        n, m = int(rng.integers(2, 7)), int(rng.integers(0, 3))
        p = random_lp(rng, n, m)
        r = solve(p, tol=tol)
        exact = solve_exact_lp(p)
        assert np.abs(r.x - exact.x).max() <= 10 * tol


def test_residual_contract_recomputed_externally():
    rng = np.random.default_rng(1)
    for k in range(30):
        p = random_qp(rng, 5, 2) if k % 2 else random_lp(rng, 6, 2)
        r = solve(p, tol=1e-6)
        x, y = r.x, r.y
        # independent residuals: primal feasibility and projected-gradient stationarity
        g = p.hessian() @ x + p.c + p.A.T @ y
        s = max(1.0, np.abs(p.c).max(), np.abs(p.hessian()).max())
        dual = np.abs(x - np.clip(x - g / s, p.lo, p.hi)).max()
        assert np.abs(p.A @ x + p.b).max() <= 1e-6
        assert dual <= 1e-6
        assert np.all(x >= p.lo - 1e-6) and np.all(x <= p.hi + 1e-6)
        assert residuals(p, x, y) == pytest.approx((r.primal_residual, r.dual_residual))


def test_warm_start_consistency():
    rng = np.random.default_rng(2)
    for k in range(20):
        p = random_qp(rng, 6, 2) if k % 2 else random_lp(rng, 8, 3)
        r = solve(p, tol=1e-6)
        r2 = solve(p, tol=1e-6, warm_start=r.solution)
        assert r2.warm_started
        assert r2.iterations <= 2
        assert np.abs(r2.x - r.x).max() <= 1e-6


def test_monotone_accuracy_strongly_convex():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = random_qp(rng, 6, 2, mu=0.1)
        a = solve(p, tol=1e-4).x
        b = solve(p, tol=1e-8).x
        assert np.abs(a - b).max() <= 1e-3


def test_qp_against_highs_free_solution():
    # strongly convex QP without active bounds: closed-form KKT solve
    rng = np.random.default_rng(4)
    n, m = 5, 2
    M = rng.normal(size=(n, n))
    H = M @ M.T + np.eye(n)
    A = rng.normal(size=(m, n))
    c, b = rng.normal(size=n), rng.normal(size=m)
    K = np.block([[H, A.T], [A, np.zeros((m, m))]])
    sol = np.linalg.solve(K, np.concatenate([-c, -b]))
    p = ProblemParameters(c=c, lo=-100, hi=100, A=A, b=b, H=H)
    r = solve(p, tol=1e-9)
    assert np.allclose(r.x, sol[:n], atol=1e-7)
    assert np.allclose(r.y, sol[n:], atol=1e-6)


def test_sudoku_scale_degenerate_lp_matches_highs():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(40, 64))
    b = -A @ np.full(64, 0.25)
    inst = sudoku.generate_sudoku_dataset(5, 8, seed=0)
    for i in inst:
        p = ProblemParameters(c=-i.x_inc, lo=0, hi=1, A=A, b=b)
        r = solve(p, tol=1e-6)
        ref = linprog(p.c, A_eq=A, b_eq=-b, bounds=(0, 1), method="highs")
        assert r.objective == pytest.approx(ref.fun, abs=1e-5)
        assert max(r.primal_residual, r.dual_residual) <= 1e-6


def test_true_sudoku_constraints_recover_solution():
    A, b = sudoku.constraint_matrix()
    for inst in sudoku.generate_sudoku_dataset(5, 8, seed=1):
        p = ProblemParameters(c=-inst.x_inc, lo=0, hi=1, A=A, b=b)
        r = solve(p)
        assert r.primal_residual <= 1e-6
        # the givens are rewarded; the solution attains the best possible cost
        assert r.objective == pytest.approx(-inst.x_inc.sum(), abs=1e-5)


def test_infeasible_problem_detected():
    p = ProblemParameters(c=[1, 1], lo=0, hi=1, A=[[1, 1]], b=[-3])
    with pytest.raises(InfeasibleProblem) as info:
        solve(p)
    assert info.value.report is not None
    assert info.value.report.primal_residual > 0.5


def test_max_iterations_reports_best_iterate():
    rng = np.random.default_rng(0)
    p = random_lp(rng, 30, 10)
    with pytest.raises(MaxIterationsExceeded) as info:
        solve(p, max_iters=3)
    rep = info.value.report
    assert rep.iterations == 3
    assert rep.solution.x.shape == (30,)


def test_warm_start_dimension_check(box_lp):
    with pytest.raises(DimensionMismatch):
        solve(box_lp, warm_start=PrimalDualSolution(np.zeros(3), np.zeros(0)))


def test_tol_must_be_positive(box_lp):
    with pytest.raises(ValueError):
        solve(box_lp, tol=0.0)


@settings(max_examples=40, deadline=None)
@given(
    c=st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=5),
    width=st.floats(0.1, 3.0),
)
def test_pure_box_lp_is_sign_rule(c, width):
    c = np.array(c)
    p = ProblemParameters(c=c, lo=-width, hi=width)
    x = solve(p, tol=1e-8).x
    strict = np.abs(c) > 1e-6
    assert np.allclose(x[strict], np.where(c[strict] > 0, -width, width), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_solution_in_box_and_feasible(seed):
    rng = np.random.default_rng(seed)
    p = random_lp(rng, int(rng.integers(2, 8)), int(rng.integers(0, 3)))
    r = solve(p, tol=1e-6)
    assert np.all(r.x >= p.lo - 1e-6) and np.all(r.x <= p.hi + 1e-6)
    assert r.primal_residual <= 1e-6 and r.dual_residual <= 1e-6


# --- exact oracle ------------------------------------------------------------


def test_exact_lp_examples(box_lp):
    assert np.array_equal(solve_exact_lp(box_lp).x, [0, 1])
    tie = ProblemParameters(c=[0, 0], lo=0, hi=1)
    assert np.array_equal(solve_exact_lp(tie).x, [0, 0])
    simplex = ProblemParameters(c=[-1, -1, -1], lo=0, hi=1, A=[[1, 1, 1]], b=[-1])
    assert np.allclose(solve_exact_lp(simplex).x, [0, 0, 1])


def test_exact_lp_duals_satisfy_kkt():
    rng = np.random.default_rng(7)
    for _ in range(20):
        p = random_lp(rng, 5, 2)
        z = solve_exact_lp(p)
        pr, du = residuals(p, z.x, z.y)
        assert pr <= 1e-9 and du <= 1e-9


def test_vertex_enumeration_counts():
    p = ProblemParameters(c=[0, 0, 0], lo=0, hi=1)
    assert len(enumerate_vertices(p)) == 8
    cut = ProblemParameters(c=[0, 0, 0], lo=0, hi=1, A=[[1, 1, 1]], b=[-1])
    V = enumerate_vertices(cut)
    assert len(V) == 3 and np.allclose(V.sum(axis=1), 1)


def test_exact_lp_errors():
    with pytest.raises(TooLarge):
        solve_exact_lp(ProblemParameters(c=np.zeros(17), lo=0, hi=1))
    with pytest.raises(TooLarge):
        solve_exact_lp(ProblemParameters(c=np.zeros(6), lo=0, hi=1, A=np.ones((5, 6)), b=-np.ones(5)))
    with pytest.raises(Infeasible):
        solve_exact_lp(ProblemParameters(c=[1, 1], lo=0, hi=1, A=[[1, 1]], b=[-3]))
    with pytest.raises(ValueError):
        solve_exact_lp(ProblemParameters(c=[1, 1], lo=0, hi=1, H=np.eye(2)))
