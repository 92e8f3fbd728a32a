"""Forward oracle for box-constrained quadratic saddle-point programs.

The embedded problem is

    min_{lo <= x <= hi} max_y  1/2 x'Hx + <x, c> + <y, Ax + b>

i.e. a convex QP (or LP when ``H`` is absent) with equality constraints
``Ax + b = 0`` and a box.  Only the equality duals ``y`` are materialized;
the box is part of the primal domain.

:func:`solve` is an OSQP-style ADMM with adaptive step size, warm starting
and active-set polishing.  :func:`solve_exact_lp` enumerates vertices and is
meant as a test oracle on tiny instances.
"""
from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .errors import (
    DimensionMismatch,
    Infeasible,
    InfeasibleProblem,
    InvalidProblem,
    MaxIterationsExceeded,
    TooLarge,
)

__all__ = [
    "ProblemParameters",
    "PrimalDualSolution",
    "SolverReport",
    "SolverSettings",
    "solve",
    "solve_exact_lp",
    "enumerate_vertices",
    "residuals",
    "cost_scale",
    "DEFAULT_TOL",
]

DEFAULT_TOL = 1e-6

# exact-oracle limits
MAX_EXACT_N = 16
MAX_EXACT_M = 4


def _vec(v, name: str) -> np.ndarray:
    a = np.atleast_1d(np.asarray(v, dtype=float))
    if a.ndim != 1:
        raise DimensionMismatch(f"{name} must be a vector, got shape {a.shape}")
    return a


@dataclass(frozen=True, kw_only=True, eq=False)
class ProblemParameters:
    """Parameters ``w = (c, v)`` with ``v = (H, A, b, lo, hi)``.

    ``A``/``b`` may be omitted for a problem without equality constraints and
    ``H`` may be omitted for an LP.  Bounds may be infinite (the dual
    reduction produces free variables) but never NaN.
    """

    c: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    H: np.ndarray | None = None

    def __post_init__(self):
        c = _vec(self.c, "c")
        n = c.size
        lo, hi = _vec(self.lo, "lo"), _vec(self.hi, "hi")
        if lo.size == 1:
            lo = np.full(n, lo[0])
        if hi.size == 1:
            hi = np.full(n, hi[0])
        if lo.size != n or hi.size != n:
            raise DimensionMismatch("lo/hi must have length n")
        if self.A is None:
            A = np.zeros((0, n))
        else:
            A = np.asarray(self.A, dtype=float)
            if A.ndim == 1 and A.size == 0:
                A = A.reshape(0, n)
            if A.ndim != 2 or A.shape[1] != n:
                raise DimensionMismatch(f"A must be m x {n}, got {A.shape}")
        m = A.shape[0]
        b = np.zeros(0) if self.b is None or np.size(self.b) == 0 else _vec(self.b, "b")
        if b.size != m:
            raise DimensionMismatch(f"b must have length {m}, got {b.size}")
        H = None
        if self.H is not None:
            H = np.asarray(self.H, dtype=float)
            if H.shape != (n, n):
                raise DimensionMismatch(f"H must be {n} x {n}, got {H.shape}")

        for name, arr in (("c", c), ("A", A), ("b", b)):
            if not np.all(np.isfinite(arr)):
                raise InvalidProblem(f"{name} has non-finite entries")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise InvalidProblem("bounds contain NaN")
        if np.any(lo > hi):
            raise InvalidProblem("lo > hi for some coordinate")
        if H is not None:
            if not np.all(np.isfinite(H)):
                raise InvalidProblem("H has non-finite entries")
            if not np.allclose(H, H.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(H).max(initial=0.0))):
                raise InvalidProblem("H is not symmetric")
            H = 0.5 * (H + H.T)
            if n:
                eig = np.linalg.eigvalsh(H)
                scale = max(np.abs(eig).max(), 0.0)
                if eig[0] < -1e-8 * scale:
                    raise InvalidProblem(f"H is not positive semi-definite (min eigenvalue {eig[0]:.3e})")

        for name, arr in (("c", c), ("lo", lo), ("hi", hi), ("A", A), ("b", b), ("H", H)):
            if arr is not None:
                arr = np.array(arr, dtype=float)
                arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def m(self) -> int:
        return self.b.size

    @property
    def is_lp(self) -> bool:
        return self.H is None

    def replace(self, **changes) -> "ProblemParameters":
        return dataclasses.replace(self, **changes)

    def hessian(self) -> np.ndarray:
        return np.zeros((self.n, self.n)) if self.H is None else self.H

    def objective(self, x: np.ndarray) -> float:
        """Primal objective ``1/2 x'Hx + <x, c>``."""
        val = float(self.c @ x)
        if self.H is not None:
            val += 0.5 * float(x @ self.H @ x)
        return val

    def to_dict(self) -> dict[str, Any]:
        def lst(a):
            return [_jsonable(v) for v in np.asarray(a).ravel()]

        d: dict[str, Any] = {"c": lst(self.c)}
        if self.H is not None:
            d["H"] = [lst(row) for row in self.H]
        d["A"] = [lst(row) for row in self.A]
        d["b"] = lst(self.b)
        d["lo"] = lst(self.lo)
        d["hi"] = lst(self.hi)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ProblemParameters":
        c = np.asarray(d["c"], dtype=float)
        n = c.size
        A = np.asarray(d.get("A", []), dtype=float).reshape(-1, n)
        H = d.get("H")
        return cls(
            c=c,
            H=None if H is None else np.asarray(H, dtype=float).reshape(n, n),
            A=A,
            b=np.asarray(d.get("b", []), dtype=float),
            lo=np.asarray(d["lo"], dtype=float),
            hi=np.asarray(d["hi"], dtype=float),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ProblemParameters":
        return cls.from_dict(json.loads(text))


def _jsonable(v: float):
    v = float(v)
    if np.isfinite(v):
        return v
    # JSON has no infinity literal; encode as string
    return "inf" if v > 0 else "-inf"


@dataclass(frozen=True, eq=False)
class PrimalDualSolution:
    x: np.ndarray
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "x", _vec(self.x, "x").copy())
        y = np.asarray(self.y, dtype=float).ravel().copy()
        object.__setattr__(self, "y", y)


@dataclass(frozen=True, eq=False)
class SolverReport:
    """Outcome of :func:`solve`.

    ``iterations`` counts ADMM steps; ``pivots`` counts simplex pivots spent
    in LP polishing (zero for QPs).
    """

    solution: PrimalDualSolution
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int
    warm_started: bool
    polished: bool = False
    pivots: int = 0

    @property
    def x(self) -> np.ndarray:
        return self.solution.x

    @property
    def y(self) -> np.ndarray:
        return self.solution.y


@dataclass(frozen=True)
class SolverSettings:
    """Tuning knobs of the ADMM iteration (OSQP defaults except ``rho``)."""

    sigma: float = 1e-6
    alpha: float = 1.6
    rho: float = 1.0
    eq_rho_scale: float = 1e3
    adaptive_rho_interval: int = 25
    adaptive_rho_tolerance: float = 5.0
    polish: bool = True
    polish_interval: int = 10
    polish_delta: float = 1e-7
    polish_refine_iter: int = 10
    infeasibility_window: int = 100
    infeasibility_dual_growth: float = 1e6


def cost_scale(params: ProblemParameters) -> float:
    """Normalization used for the stationarity residual and internal scaling."""
    s = max(1.0, float(np.abs(params.c).max(initial=0.0)))
    if params.H is not None:
        s = max(s, float(np.abs(params.H).max(initial=0.0)))
    return s


def residuals(params: ProblemParameters, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Return ``(primal_residual, dual_residual)`` of a candidate saddle point.

    The primal residual is ``||Ax + b||_inf``.  The dual residual is the
    natural (projected-gradient) residual ``||x - P_box(x - g / s)||_inf`` of
    the stationarity condition, with ``g = Hx + c + A'y`` and ``s`` the
    problem's :func:`cost_scale`.  It vanishes exactly when ``-g`` lies in the
    normal cone of the box at ``x``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    prim = float(np.abs(params.A @ x + params.b).max(initial=0.0))
    g = params.c + params.A.T @ y
    if params.H is not None:
        g = g + params.H @ x
    step = x - np.clip(x - g / cost_scale(params), params.lo, params.hi)
    dual = float(np.abs(step).max(initial=0.0))
    return prim, dual


def lagrangian(params: ProblemParameters, x: np.ndarray, y: np.ndarray) -> float:
    val = params.objective(x)
    if params.m:
        val += float(y @ (params.A @ x + params.b))
    return val


class _Workspace:
    """Scaled ADMM data for one problem; kept private to :func:`solve`."""

    def __init__(self, params: ProblemParameters, settings: SolverSettings):
        self.params = params
        self.settings = settings
        n, m = params.n, params.m
        self.n, self.m = n, m
        self.s = cost_scale(params)
        # row equilibration of A
        if m:
            rn = np.abs(params.A).max(axis=1)
            rn[rn == 0.0] = 1.0
            self.D = 1.0 / rn
        else:
            self.D = np.zeros(0)
        self.A = self.D[:, None] * params.A
        self.b = self.D * params.b
        self.P = params.hessian() / self.s
        self.q = params.c / self.s
        self.lo, self.hi = params.lo, params.hi
        self.rho = settings.rho
        self.pivots = 0
        self.chol = None  # factored on first ADMM step; warm starts often finish before

    def _factor(self):
        st = self.settings
        rho_eq = self.rho * st.eq_rho_scale
        K = self.P + (st.sigma + self.rho) * np.eye(self.n)
        if self.m:
            K = K + rho_eq * (self.A.T @ self.A)
        self.chol = sla.cho_factor(K)

    # conversions between scaled ADMM duals and problem duals
    def y_true(self, y_eq: np.ndarray) -> np.ndarray:
        return self.s * self.D * y_eq

    def y_scaled(self, y: np.ndarray) -> np.ndarray:
        return y / (self.s * self.D) if self.m else np.zeros(0)


def _crossover(ws: _Workspace, z_box: np.ndarray):
    """Basis guess: the columns of ``A`` farthest from their bounds that are
    linearly independent stay free, everything else goes to its nearest bound.
    Returns ``(basis, lower, upper)`` masks."""
    fin_lo, fin_hi = np.isfinite(ws.lo), np.isfinite(ws.hi)
    d_lo = np.where(fin_lo, z_box - ws.lo, np.inf)
    d_hi = np.where(fin_hi, ws.hi - z_box, np.inf)
    dist = np.minimum(np.minimum(d_lo, d_hi), 1e3)
    _, R, piv = sla.qr(ws.A * np.maximum(dist, 1e-14), mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > 1e-9 * diag[0])) if diag.size and diag[0] > 0 else 0
    basis = np.zeros(ws.n, dtype=bool)
    basis[piv[:rank]] = True
    basis |= ~(fin_lo | fin_hi)
    lower = ~basis & (d_lo <= d_hi)
    upper = ~basis & ~lower
    return basis, lower, upper


def _simplex(ws: _Workspace, basis: np.ndarray, upper: np.ndarray, max_pivots: int):
    """Bounded-variable primal simplex on the scaled LP from a given basis.

    Used as the LP polishing step: started from the crossover basis of an
    ADMM iterate it only needs a few pivots, even when the iterate is too
    inaccurate to read off the active set (near-degenerate vertices).  A
    basis that violates bounds first minimizes the sum of infeasibilities.
    Needs finite bounds and a full-row-rank basis; returns ``None`` otherwise
    or when the pivot budget runs out.
    """
    n, m = ws.n, ws.m
    lo, hi, A, q = ws.lo, ws.hi, ws.A, ws.q
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))) or int(basis.sum()) != m:
        return None
    B = np.flatnonzero(basis)
    at_upper = upper & ~basis
    feas_tol, opt_tol = 1e-9, 1e-12 * max(1.0, float(np.abs(q).max(initial=0.0)))
    degenerate = 0
    for _ in range(max_pivots):
        ws.pivots += 1
        nb = np.ones(n, dtype=bool)
        nb[B] = False
        x = np.where(at_upper, hi, lo)
        try:
            lu = sla.lu_factor(A[:, B], check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            return None
        x[B] = sla.lu_solve(lu, -ws.b - A[:, nb] @ x[nb])
        if not np.all(np.isfinite(x)):
            return None
        xb, lb, hb = x[B], lo[B], hi[B]
        below, above = xb < lb - feas_tol, xb > hb + feas_tol
        phase1 = bool(below.any() or above.any())
        cost_b = np.where(below, -1.0, np.where(above, 1.0, 0.0)) if phase1 else q[B]
        y = -sla.lu_solve(lu, cost_b, trans=1)
        d = A.T @ y + (0.0 if phase1 else q)
        gain = np.where(at_upper, d, -d)
        gain[~nb] = 0.0
        gain[lo == hi] = 0.0
        if gain.max() <= opt_tol:
            return None if phase1 else (x, y)
        # Dantzig pricing, Bland's rule after repeated degenerate pivots
        j = int(np.flatnonzero(gain > opt_tol)[0]) if degenerate > 10 else int(np.argmax(gain))
        step_dir = -1.0 if at_upper[j] else 1.0
        dx = -step_dir * sla.lu_solve(lu, A[:, j])
        # ratio test; infeasible basics may only travel to their violated bound
        with np.errstate(divide="ignore", invalid="ignore"):
            up_move, down_move = dx > 1e-11, dx < -1e-11
            t_up = np.where(below, lb - xb, hb - xb) / dx
            t_down = np.where(above, hb - xb, lb - xb) / dx
        t = np.full(m, np.inf)
        t[up_move & ~above] = t_up[up_move & ~above]
        t[down_move & ~below] = t_down[down_move & ~below]
        to_upper = up_move & ~below | down_move & above
        t_best, leave, leave_upper = hi[j] - lo[j], -1, False
        if m:
            i = int(np.argmin(t))
            if t[i] < t_best - 1e-15:
                t_best, leave, leave_upper = max(float(t[i]), 0.0), i, bool(to_upper[i])
        degenerate = degenerate + 1 if t_best <= 1e-14 else 0
        if leave < 0:
            at_upper[j] = not at_upper[j]
            continue
        at_upper[B[leave]] = leave_upper
        at_upper[j] = False
        B[leave] = j
    return None


def _active_set_guesses(ws: _Workspace, z_box: np.ndarray, y_eq: np.ndarray, y_box: np.ndarray):
    """Candidate (lower, upper) active masks, most trusted first."""
    fin_lo, fin_hi = np.isfinite(ws.lo), np.isfinite(ws.hi)
    fixed = ws.lo == ws.hi
    lower = (z_box - ws.lo < -y_box) & fin_lo
    upper = (ws.hi - z_box < y_box) & fin_hi & ~lower
    yield lower | (fixed & ~upper), upper
    width = np.where(fin_lo & fin_hi, ws.hi - ws.lo, 1.0)
    d_lo = np.where(fin_lo, z_box - ws.lo, np.inf)
    d_hi = np.where(fin_hi, ws.hi - z_box, np.inf)
    if ws.m:
        yield _crossover(ws, z_box)[1:]
    for kappa in (1e-6, 1e-4, 1e-2):
        lower = (d_lo <= kappa * width) & (d_lo <= d_hi)
        upper = (d_hi <= kappa * width) & ~lower
        yield lower | (fixed & ~upper), upper
    # reduced-cost signs: robust when a basic variable sits close to a bound
    rc = ws.P @ z_box + ws.q + ws.A.T @ y_eq
    for kappa in (1e-3, 1e-2):
        lower = (rc > kappa) & fin_lo
        upper = (rc < -kappa) & fin_hi
        yield lower | (fixed & ~upper), upper


def _polish_with(ws: _Workspace, lower, upper, x, y_eq):
    """Solve the reduced KKT system for a fixed active box set."""
    st = ws.settings
    n, m = ws.n, ws.m
    active = lower | upper
    free = ~active
    xa = np.where(lower, ws.lo, ws.hi)[active]
    nf = int(free.sum())
    P = ws.P
    Af = ws.A[:, free]
    Aa = ws.A[:, active]
    K0 = np.zeros((nf + m, nf + m))
    K0[:nf, :nf] = P[np.ix_(free, free)]
    K0[:nf, nf:] = Af.T
    K0[nf:, :nf] = Af
    rhs = np.concatenate([-ws.q[free] - P[np.ix_(free, active)] @ xa, -ws.b - Aa @ xa])
    # proximal iterative refinement anchored at the ADMM iterate: a singular
    # reduced system (non-unique LP optimum) then converges to a nearby
    # solution instead of blowing up
    delta = st.polish_delta
    reg = np.concatenate([np.full(nf, delta), np.full(m, -delta)])
    try:
        lu = sla.lu_factor(K0 + np.diag(reg), check_finite=False)
    except (ValueError, np.linalg.LinAlgError):
        return None
    sol = np.concatenate([x[free], y_eq])
    for _ in range(st.polish_refine_iter):
        sol = sol + sla.lu_solve(lu, rhs - K0 @ sol)
    if not np.all(np.isfinite(sol)):
        return None
    xp = np.empty(n)
    xp[free] = sol[:nf]
    xp[active] = xa
    return np.clip(xp, ws.lo, ws.hi), ws.y_true(sol[nf:])


def _polish(ws: _Workspace, x, z_box, y_eq, y_box, tol):
    """Try a simplex crossover (LPs) and active-set guesses until one yields
    a ``tol``-accurate point; returns the best candidate found."""
    best = None

    def consider(out):
        nonlocal best
        err = max(residuals(ws.params, *out))
        if best is None or err < best[0]:
            best = (err, out)
        return err <= tol

    if ws.m and not np.any(ws.P):
        basis, _, upper = _crossover(ws, z_box)
        out = _simplex(ws, basis, upper, max_pivots=4 * ws.n)
        if out is not None and consider((np.clip(out[0], ws.lo, ws.hi), ws.y_true(out[1]))):
            return best[1]
    seen = set()
    for lower, upper in _active_set_guesses(ws, z_box, y_eq, y_box):
        key = (lower.tobytes(), upper.tobytes())
        if key in seen:
            continue
        seen.add(key)
        out = _polish_with(ws, lower, upper, x, y_eq)
        if out is not None and consider(out):
            break
    return None if best is None else best[1]


def solve(
    params: ProblemParameters,
    tol: float = DEFAULT_TOL,
    warm_start: PrimalDualSolution | None = None,
    max_iters: int = 20000,
    settings: SolverSettings | None = None,
) -> SolverReport:
    """Solve the saddle-point program to residual accuracy ``tol``.

    Raises
    ------
    MaxIterationsExceeded
        If ``max_iters`` ADMM steps do not meet ``tol``; the best iterate is
        attached as ``err.report``.
    InfeasibleProblem
        If the iterates certify (or stagnate towards) primal infeasibility.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    settings = settings or SolverSettings()
    ws = _Workspace(params, settings)
    n, m = ws.n, ws.m
    rho_eq_scale = settings.eq_rho_scale
    alpha = settings.alpha

    if warm_start is not None:
        if warm_start.x.size != n or warm_start.y.size != m:
            raise DimensionMismatch("warm start has wrong dimensions")
        x = np.clip(warm_start.x, ws.lo, ws.hi)
        y_eq = ws.y_scaled(warm_start.y)
        y_box = -(ws.P @ x + ws.q + ws.A.T @ y_eq)
    else:
        x = np.clip(np.zeros(n), ws.lo, ws.hi)
        y_eq = np.zeros(m)
        y_box = np.zeros(n)
    z_box = x.copy()
    z_eq = -ws.b

    best: tuple[float, np.ndarray, np.ndarray, bool] | None = None

    def finish(xc, yc, it, polished):
        pr, du = residuals(params, xc, yc)
        return SolverReport(
            solution=PrimalDualSolution(xc, yc),
            objective=lagrangian(params, xc, yc),
            primal_residual=pr,
            dual_residual=du,
            iterations=it,
            warm_started=warm_start is not None,
            polished=polished,
            pivots=ws.pivots,
        )

    def try_polish(it):
        out = _polish(ws, x, z_box, y_eq, y_box, tol)
        if out is None:
            return None
        xp, yp = out
        pr, du = residuals(params, xp, yp)
        if max(pr, du) <= tol:
            return finish(xp, yp, it, True)
        return None

    def candidate():
        return np.clip(x, ws.lo, ws.hi), ws.y_true(y_eq)

    def check(it):
        nonlocal best
        xc, yc = candidate()
        pr, du = residuals(params, xc, yc)
        err = max(pr, du)
        if best is None or err < best[0]:
            best = (err, xc, yc)
        last_err[0] = err
        if err <= tol:
            if settings.polish:
                polished = try_polish(it)
                if polished is not None and max(polished.primal_residual, polished.dual_residual) <= err:
                    return polished
            return finish(xc, yc, it, False)
        return None

    # polishing is retried once the residual halved since the last try (or
    # after a long stall)
    last_err = [np.inf]
    polish_err, polish_it = np.inf, 0
    if warm_start is not None:
        done = check(0)
        if done is not None:
            return done
        if settings.polish:
            done = try_polish(0)
            if done is not None:
                return done

    if ws.chol is None:
        ws._factor()
    prim_hist: list[float] = []
    ynorm_hist: list[float] = []
    y_prev = np.concatenate([y_eq, y_box])
    for it in range(1, max_iters + 1):
        rho = ws.rho
        rho_eq = rho * rho_eq_scale
        rhs = settings.sigma * x - ws.q + (rho * z_box - y_box)
        if m:
            rhs += ws.A.T @ (rho_eq * z_eq - y_eq)
        xt = sla.cho_solve(ws.chol, rhs)
        zt_box = xt
        x = alpha * xt + (1 - alpha) * x
        zr_box = alpha * zt_box + (1 - alpha) * z_box
        z_box_new = np.clip(zr_box + y_box / rho, ws.lo, ws.hi)
        y_box = y_box + rho * (zr_box - z_box_new)
        z_box = z_box_new
        if m:
            zt_eq = ws.A @ xt
            zr_eq = alpha * zt_eq + (1 - alpha) * z_eq
            # z_eq stays at -b (projection onto a point)
            y_eq = y_eq + rho_eq * (zr_eq - z_eq)

        done = check(it)
        if done is not None:
            return done
        if (
            settings.polish
            and it % settings.polish_interval == 0
            and (last_err[0] <= 0.5 * polish_err or it - polish_it >= 20 * settings.polish_interval)
        ):
            polish_err, polish_it = last_err[0], it
            done = try_polish(it)
            if done is not None:
                return done

        if it % settings.adaptive_rho_interval == 0:
            _adapt_rho(ws, x, z_box, y_eq, y_box)
            y_cur = np.concatenate([y_eq, y_box])
            _check_infeasible(ws, y_cur - y_prev, best, it, finish)
            y_prev = y_cur
            prim_hist.append(float(np.abs(params.A @ np.clip(x, ws.lo, ws.hi) + params.b).max(initial=0.0)))
            ynorm_hist.append(float(np.abs(y_eq).max(initial=0.0)) * ws.s)
            _check_stagnation(settings, prim_hist, ynorm_hist, tol, best, it, finish)

    err, xc, yc = best
    report = finish(xc, yc, max_iters, False)
    raise MaxIterationsExceeded(
        f"residual {err:.3e} above tol {tol:.1e} after {max_iters} iterations", report
    )


def _adapt_rho(ws: _Workspace, x, z_box, y_eq, y_box):
    st = ws.settings
    Ax = ws.A @ x
    r_prim = max(np.abs(x - z_box).max(initial=0.0), np.abs(Ax + ws.b).max(initial=0.0))
    Aty = ws.A.T @ y_eq + y_box
    Px = ws.P @ x
    r_dual = np.abs(Px + ws.q + Aty).max(initial=0.0)
    norm_p = max(np.abs(Ax).max(initial=0.0), np.abs(x).max(initial=0.0), np.abs(ws.b).max(initial=0.0), 1e-10)
    norm_d = max(np.abs(Px).max(initial=0.0), np.abs(Aty).max(initial=0.0), np.abs(ws.q).max(initial=0.0), 1e-10)
    ratio = (r_prim / norm_p) / max(r_dual / norm_d, 1e-30)
    new_rho = float(np.clip(ws.rho * np.sqrt(ratio), 1e-6, 1e6))
    if new_rho > ws.rho * st.adaptive_rho_tolerance or new_rho < ws.rho / st.adaptive_rho_tolerance:
        ws.rho = new_rho
        ws._factor()


def _check_infeasible(ws: _Workspace, dy: np.ndarray, best, it, finish):
    """OSQP primal infeasibility certificate on the dual increment."""
    m = ws.m
    norm = np.abs(dy).max(initial=0.0)
    if norm < 1e-12:
        return
    dy_eq, dy_box = dy[:m], dy[m:]
    eps = 1e-7
    if np.abs(ws.A.T @ dy_eq + dy_box).max(initial=0.0) > eps * norm:
        return
    pos, neg = np.maximum(dy_box, 0.0), np.minimum(dy_box, 0.0)
    if np.any((pos > 0) & ~np.isfinite(ws.hi)) or np.any((neg < 0) & ~np.isfinite(ws.lo)):
        return
    hi = np.where(np.isfinite(ws.hi), ws.hi, 0.0)
    lo = np.where(np.isfinite(ws.lo), ws.lo, 0.0)
    support = float(-ws.b @ dy_eq + hi @ pos + lo @ neg)
    if support < -eps * norm:
        err, xc, yc = best
        raise InfeasibleProblem(
            f"primal infeasibility certificate found at iteration {it}", finish(xc, yc, it, False)
        )


def _check_stagnation(settings, prim_hist, ynorm_hist, tol, best, it, finish):
    window = max(1, settings.infeasibility_window // settings.adaptive_rho_interval)
    if len(prim_hist) <= window:
        return
    old, new = prim_hist[-window - 1], prim_hist[-1]
    stagnant = new > tol and new > 0.99 * old
    growth = ynorm_hist[-1] > settings.infeasibility_dual_growth * max(1.0, ynorm_hist[-window - 1] if ynorm_hist[-window - 1] > 0 else 1.0)
    if stagnant and growth:
        err, xc, yc = best
        raise InfeasibleProblem(
            f"primal residual stagnated at {new:.3e} while duals grew to {ynorm_hist[-1]:.3e}",
            finish(xc, yc, it, False),
        )


# ---------------------------------------------------------------------------
# exact vertex-enumeration oracle


def _row_basis(A: np.ndarray) -> np.ndarray:
    """Indices of a maximal set of linearly independent rows of ``A``."""
    if A.shape[0] == 0:
        return np.zeros(0, dtype=int)
    _, r, piv = sla.qr(A.T, pivoting=True, mode="economic")
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > 1e-10 * max(diag.max(initial=0.0), 1.0)))
    return np.sort(piv[:rank])


def enumerate_vertices(params: ProblemParameters) -> np.ndarray:
    """All vertices of ``{lo <= x <= hi, Ax + b = 0}`` as rows of an array.

    Raises TooLarge beyond ``n = 16`` / ``m = 4`` or for unbounded boxes, and
    Infeasible when the polytope is empty.
    """
    n, m = params.n, params.m
    if n > MAX_EXACT_N or m > MAX_EXACT_M:
        raise TooLarge(f"enumeration limited to n <= {MAX_EXACT_N}, m <= {MAX_EXACT_M}")
    lo, hi = params.lo, params.hi
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise TooLarge("enumeration requires a bounded box")
    rows = _row_basis(params.A)
    Ar, br = params.A[rows], params.b[rows]
    k = rows.size
    feas_tol = 1e-12 * (1.0 + np.abs(params.A).sum(axis=1).max(initial=0.0) * max(np.abs(lo).max(initial=0.0), np.abs(hi).max(initial=0.0), 1.0) + np.abs(params.b).max(initial=0.0))
    box_tol = 1e-12 * (1.0 + max(np.abs(lo).max(initial=0.0), np.abs(hi).max(initial=0.0)))

    found = []
    for S in itertools.combinations(range(n), k):
        S = list(S)
        N = [j for j in range(n) if j not in S]
        AS = Ar[:, S]
        if k and np.linalg.cond(AS) > 1e12:
            continue
        bits = ((np.arange(2 ** len(N))[:, None] >> np.arange(len(N))[None, ::-1]) & 1).astype(float)
        XN = lo[N] + bits * (hi[N] - lo[N])
        X = np.empty((XN.shape[0], n))
        X[:, N] = XN
        if k:
            rhs = -br[:, None] - Ar[:, N] @ XN.T
            X[:, S] = np.linalg.solve(AS, rhs).T
        ok = np.all((X >= lo - box_tol) & (X <= hi + box_tol), axis=1)
        if m:
            ok &= np.abs(X @ params.A.T + params.b).max(axis=1) <= feas_tol
        if np.any(ok):
            found.append(np.clip(X[ok], lo, hi))
    if not found:
        raise Infeasible("no box point satisfies the equality constraints")
    V = np.concatenate(found)
    _, idx = np.unique(np.round(V, 12), axis=0, return_index=True)
    return V[np.sort(idx)]


def lexicographic_argmin(V: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Row of ``V`` minimizing ``values``; ties go to the lexicographically smallest row."""
    best = values.min()
    ties = np.abs(values - best) <= 1e-12 * max(1.0, abs(best))
    W = np.round(V[ties], 12)
    order = np.lexsort(W.T[::-1])
    return V[ties][order[0]]


def vertex_duals(params: ProblemParameters, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Equality duals certifying stationarity of ``grad`` at box point ``x``.

    Finds ``y`` with ``grad + A'y`` in minus the normal cone of the box at
    ``x``; falls back to least squares on the free coordinates when no exact
    certificate exists.
    """
    m = params.m
    if m == 0:
        return np.zeros(0)
    tol = 1e-9 * (1.0 + np.abs(x).max(initial=0.0))
    at_lo = np.abs(x - params.lo) <= tol
    at_hi = np.abs(x - params.hi) <= tol
    A_ub, b_ub, A_eq, b_eq = [], [], [], []
    for i in range(params.n):
        col = params.A[:, i]
        if at_lo[i] and at_hi[i]:
            continue
        if at_lo[i]:  # grad_i + (A'y)_i >= 0
            A_ub.append(-col)
            b_ub.append(grad[i])
        elif at_hi[i]:
            A_ub.append(col)
            b_ub.append(-grad[i])
        else:
            A_eq.append(col)
            b_eq.append(-grad[i])
    res = linprog(
        np.zeros(m),
        A_ub=np.array(A_ub) if A_ub else None,
        b_ub=np.array(b_ub) if b_ub else None,
        A_eq=np.array(A_eq) if A_eq else None,
        b_eq=np.array(b_eq) if b_eq else None,
        bounds=[(None, None)] * m,
        method="highs",
    )
    if res.status == 0:
        return np.asarray(res.x, dtype=float)
    if A_eq:
        y, *_ = np.linalg.lstsq(np.array(A_eq), np.array(b_eq), rcond=None)
        return y
    return np.zeros(m)


def solve_exact_lp(params: ProblemParameters) -> PrimalDualSolution:
    """Exact LP optimum by vertex enumeration.

    Ties between optimal vertices are broken towards the lexicographically
    smallest ``x``; since the lexicographic minimum over a polytope face is a
    vertex, this is also the lexicographically smallest optimal point.
    """
    if params.H is not None:
        raise ValueError("solve_exact_lp requires an LP (H absent)")
    V = enumerate_vertices(params)
    x = lexicographic_argmin(V, V @ params.c)
    return PrimalDualSolution(x, vertex_duals(params, x, params.c))
