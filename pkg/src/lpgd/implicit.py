"""True gradients of QP layers by implicit differentiation of the KKT system.

Active box coordinates (within ``tol`` of a bound) are held fixed, which
turns them into equalities; the remaining stationarity rows plus the
equality constraints form a symmetric linear system in ``(x_free, y)``.
A positive ``rho`` adds ``I / rho`` to the Hessian block, the same
regularization the augmented Lagrangian induces.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import scipy.linalg as sla

from .errors import SingularSystem, StrictComplementarityViolated
from .solver import DEFAULT_TOL, PrimalDualSolution, ProblemParameters, cost_scale
from .updates import UpdateVector, _resolve_blocks

__all__ = ["KktSystem", "build_kkt_system", "implicit_gradient_qp"]

COND_LIMIT = 1e12


@dataclass(eq=False)
class KktSystem:
    jacobian: np.ndarray
    free: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    condition: float


def build_kkt_system(
    params: ProblemParameters,
    z_star: PrimalDualSolution,
    rho: float = 0.0,
    tol: float = DEFAULT_TOL,
    check_complementarity: bool = True,
) -> KktSystem:
    x, y = z_star.x, z_star.y
    lower = x - params.lo <= tol
    upper = (params.hi - x <= tol) & ~lower
    free = ~(lower | upper)
    if check_complementarity:
        g = params.hessian() @ x + params.c + params.A.T @ y
        weak = (lower | upper) & (np.abs(g) <= tol * cost_scale(params)) & (params.lo < params.hi)
        if np.any(weak):
            raise StrictComplementarityViolated(
                f"{int(weak.sum())} active coordinate(s) have zero reduced cost"
            )
    H = params.hessian()
    Af = params.A[:, free]
    nf, m = int(free.sum()), params.m
    K = np.zeros((nf + m, nf + m))
    K[:nf, :nf] = H[np.ix_(free, free)]
    if rho > 0:
        K[:nf, :nf] += np.eye(nf) / rho
    K[:nf, nf:] = Af.T
    K[nf:, :nf] = Af
    cond = float(np.linalg.cond(K)) if K.size else 1.0
    return KktSystem(K, free, lower, upper, cond)


def implicit_gradient_qp(
    params: ProblemParameters,
    z_star: PrimalDualSolution,
    grad_loss: np.ndarray,
    rho: float = 0.0,
    tol: float = DEFAULT_TOL,
    blocks: Iterable[str] | None = None,
    check_complementarity: bool = True,
) -> UpdateVector:
    """Vector-Jacobian product ``(dz*/dw)' grad_loss`` via the adjoint KKT system.

    Raises :class:`SingularSystem` when the reduced KKT matrix is singular and
    ``rho == 0``.  With ``rho > 0`` a singular system (dependent active
    constraints) falls back to the minimum-norm least-squares adjoint, a
    heuristic gradient.
    """
    grad_loss = np.asarray(grad_loss, dtype=float)
    kkt = build_kkt_system(params, z_star, rho, tol, check_complementarity)
    x, y = z_star.x, z_star.y
    free = kkt.free
    nf = int(free.sum())
    rhs = np.concatenate([grad_loss[free], np.zeros(params.m)])
    K = kkt.jacobian
    if K.size == 0:
        sol = np.zeros(0)
    elif kkt.condition > COND_LIMIT:
        if rho <= 0:
            raise SingularSystem(
                f"KKT system is singular (condition {kkt.condition:.2e}); "
                "the active set is degenerate, consider rho > 0"
            )
        warnings.warn("singular regularized KKT system, using least-squares adjoint", RuntimeWarning, stacklevel=2)
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    else:
        lu = sla.lu_factor(K)
        sol = sla.lu_solve(lu, rhs)
        sol = sol + sla.lu_solve(lu, rhs - K @ sol)

    u = np.zeros(params.n)
    u[free] = sol[:nf]
    v = sol[nf:]
    blocks = _resolve_blocks(params, blocks)
    return UpdateVector(
        d_c=-u if "c" in blocks else None,
        d_H=-0.5 * (np.outer(u, x) + np.outer(x, u)) if "H" in blocks else None,
        d_A=-(np.outer(y, u) + np.outer(v, x)) if "A" in blocks else None,
        d_b=-v if "b" in blocks else None,
    )
