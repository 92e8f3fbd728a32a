"""Lagrangian divergence, Lagrange-Moreau envelopes and their proximal maps.

For a loss ``l`` on the primal solution, the lower envelope is

    l_tau(w) = min_x  l(x) + D(x | w) / tau  [+ |x - x*|^2 / (2 rho)]

with ``D`` the Lagrangian divergence; the upper envelope maximizes
``l(x) - D(x | w) / tau`` instead.  Multiplying through by ``tau`` shows the
minimizer solves the forward problem with the loss folded into the cost, so
everything here reduces to calls of :func:`lpgd.solver.solve`.

Linearized losses are reported relative to an anchor value (``0`` unless
given) since the constant offset cancels in every update.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, InfiniteDivergence, NoDuals, UnsupportedLoss
from .solver import (
    DEFAULT_TOL,
    PrimalDualSolution,
    ProblemParameters,
    SolverReport,
    enumerate_vertices,
    lagrangian,
    lexicographic_argmin,
    solve,
    vertex_duals,
)

__all__ = [
    "Variant",
    "EnvelopeConfig",
    "LossKind",
    "LossSpec",
    "lagrangian_value",
    "lagrangian_divergence",
    "perturbed_problem",
    "proximal_map",
    "envelope_value",
    "envelope_sweep",
    "SweepTable",
    "dual_loss_reduction",
]


class Variant(str, enum.Enum):
    LOWER = "lower"
    UPPER = "upper"
    AVERAGE = "average"


@dataclass(frozen=True)
class EnvelopeConfig:
    """Envelope variant, temperature ``tau`` and augmentation ``rho``.

    ``rho = 0`` switches the augmentation off (rather than meaning an
    infinitely strong regularizer).
    """

    variant: Variant = Variant.LOWER
    tau: float = 1.0
    rho: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.rho >= 0:
            raise ValueError(f"rho must be nonnegative, got {self.rho}")

    @property
    def config_id(self) -> str:
        return f"{self.variant.value}_tau{self.tau:g}_rho{self.rho:g}"


class LossKind(str, enum.Enum):
    LINEARIZED = "linearized"
    QUADRATIC = "quadratic"


@dataclass(frozen=True, eq=False)
class LossSpec:
    """A loss the forward solver can absorb into its cost.

    ``LINEARIZED``: ``l(x) = anchor + <x - x*, payload>`` with ``payload`` the
    loss gradient at the current solution.
    ``QUADRATIC``: ``l(x) = 1/2 |x - payload|^2`` with ``payload`` the target.
    """

    kind: LossKind
    payload: np.ndarray
    anchor: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        p = np.atleast_1d(np.asarray(self.payload, dtype=float))
        if p.ndim != 1:
            raise DimensionMismatch("loss payload must be a vector")
        object.__setattr__(self, "payload", p)

    @classmethod
    def linearized(cls, grad, anchor: float = 0.0) -> "LossSpec":
        return cls(LossKind.LINEARIZED, grad, anchor)

    @classmethod
    def quadratic(cls, target) -> "LossSpec":
        return cls(LossKind.QUADRATIC, target)

    def value(self, x: np.ndarray, x_star: np.ndarray | None = None) -> float:
        if self.kind is LossKind.QUADRATIC:
            d = np.asarray(x) - self.payload
            return 0.5 * float(d @ d)
        if x_star is None:
            raise ValueError("linearized loss needs the anchor point x*")
        return self.anchor + float((np.asarray(x) - x_star) @ self.payload)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        if self.kind is LossKind.QUADRATIC:
            return np.asarray(x, dtype=float) - self.payload
        return self.payload.copy()


def lagrangian_value(z: PrimalDualSolution, params: ProblemParameters) -> float:
    if z.x.size != params.n or z.y.size != params.m:
        raise DimensionMismatch(
            f"solution dims ({z.x.size}, {z.y.size}) do not match problem ({params.n}, {params.m})"
        )
    return lagrangian(params, z.x, z.y)


def lagrangian_divergence(
    x: np.ndarray,
    params: ProblemParameters,
    oracle_tol: float = DEFAULT_TOL,
    optimum: SolverReport | None = None,
) -> float:
    """``sup_y L(x, y, w) - L*(w)``.

    Raises :class:`InfiniteDivergence` when ``x`` violates the equality
    constraints by more than ``oracle_tol`` (or leaves the box): the supremum
    over the unbounded duals is then infinite.  ``optimum`` may be passed to
    reuse a forward solve.
    """
    x = np.asarray(x, dtype=float)
    if x.size != params.n:
        raise DimensionMismatch("x has wrong length")
    if np.any(x < params.lo - oracle_tol) or np.any(x > params.hi + oracle_tol):
        raise InfiniteDivergence("x lies outside the box")
    if params.m and np.abs(params.A @ x + params.b).max() > oracle_tol:
        raise InfiniteDivergence("x violates the equality constraints")
    if optimum is None:
        optimum = solve(params, tol=oracle_tol)
    return max(params.objective(x) - optimum.objective, 0.0)


def _sign(variant: Variant) -> float:
    if variant is Variant.LOWER:
        return 1.0
    if variant is Variant.UPPER:
        return -1.0
    raise ValueError("a proximal map is either lower or upper; use both for the average")


def perturbed_problem(
    params: ProblemParameters,
    loss: LossSpec,
    variant: Variant,
    tau: float,
    rho: float,
    x_star: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic and linear cost ``(H', c')`` of the proximal-map problem.

    The lower map minimizes ``L + tau * l``, the upper one ``L - tau * l``.
    With augmentation the envelope objective gains ``|x - x*|^2 / (2 rho)``,
    i.e. ``tau / rho`` after the rescaling by ``tau``.  ``H'`` may be
    indefinite for an upper map of a quadratic loss.
    """
    if loss.payload.size != params.n:
        raise DimensionMismatch("loss payload length differs from the primal dimension")
    sign = _sign(Variant(variant))
    H = params.hessian().copy()
    c = params.c.copy()
    if loss.kind is LossKind.LINEARIZED:
        c = c + sign * tau * loss.payload
    else:
        H = H + sign * tau * np.eye(params.n)
        c = c - sign * tau * loss.payload
    if rho > 0:
        k = tau / rho
        H = H + k * np.eye(params.n)
        c = c - k * np.asarray(x_star, dtype=float)
    return H, c


def _is_psd(H: np.ndarray) -> bool:
    if H.size == 0:
        return True
    eig = np.linalg.eigvalsh(H)
    return eig[0] >= -1e-10 * max(1.0, np.abs(eig).max())


def _concave_vertex_min(params: ProblemParameters, H: np.ndarray, c: np.ndarray) -> SolverReport:
    """Minimize a concave quadratic over the polytope: optimum sits at a vertex."""
    V = enumerate_vertices(params)
    vals = 0.5 * np.einsum("ij,jk,ik->i", V, H, V) + V @ c
    x = lexicographic_argmin(V, vals)
    y = vertex_duals(params, x, H @ x + c)
    prim = float(np.abs(params.A @ x + params.b).max(initial=0.0))
    obj = 0.5 * float(x @ H @ x) + float(c @ x)
    if params.m:
        obj += float(y @ (params.A @ x + params.b))
    return SolverReport(PrimalDualSolution(x, y), obj, prim, 0.0, 0, False)


def proximal_map(
    params: ProblemParameters,
    loss: LossSpec,
    config: EnvelopeConfig,
    z_star: PrimalDualSolution,
    tol: float = DEFAULT_TOL,
    variant: Variant | None = None,
) -> SolverReport:
    """Lower or upper L-proximal point, warm-started at ``z_star``.

    ``variant`` overrides ``config.variant`` (needed for the average, which
    has one map per side).  An upper map of a quadratic loss whose cost turns
    concave is solved by vertex enumeration on small bounded problems;
    indefinite costs raise :class:`UnsupportedLoss`.
    """
    variant = Variant(variant or config.variant)
    H, c = perturbed_problem(params, loss, variant, config.tau, config.rho, z_star.x)
    if loss.kind is LossKind.LINEARIZED and config.rho == 0:
        # same H as the forward problem; keep LP structure intact
        perturbed = params.replace(c=c)
    elif _is_psd(H):
        perturbed = params.replace(c=c, H=H)
    elif _is_psd(-H):
        try:
            return _concave_vertex_min(params, H, c)
        except Exception as err:  # TooLarge, Infeasible
            raise UnsupportedLoss(f"concave proximal problem not enumerable: {err}") from err
    else:
        raise UnsupportedLoss("proximal problem is indefinite; loss not representable in the QP class")
    return solve(perturbed, tol=tol, warm_start=z_star)


def _one_sided(params, loss, config, z_star, tol, variant) -> float:
    z = proximal_map(params, loss, config, z_star, tol, variant=variant)
    div = lagrangian(params, z.x, z.y) - lagrangian(params, z_star.x, z_star.y)
    val = loss.value(z.x, z_star.x)
    aug = 0.0
    if config.rho > 0:
        d = z.x - z_star.x
        aug = 0.5 * float(d @ d) / config.rho
    if variant is Variant.LOWER:
        return val + div / config.tau + aug
    return val - div / config.tau - aug


def envelope_value(
    params: ProblemParameters,
    loss: LossSpec,
    config: EnvelopeConfig,
    oracle_tol: float = DEFAULT_TOL,
    z_star: PrimalDualSolution | None = None,
) -> float:
    """Value of the lower, upper or average Lagrange-Moreau envelope."""
    if z_star is None:
        z_star = solve(params, tol=oracle_tol).solution
    if config.variant is Variant.AVERAGE:
        lo = _one_sided(params, loss, config, z_star, oracle_tol, Variant.LOWER)
        up = _one_sided(params, loss, config, z_star, oracle_tol, Variant.UPPER)
        return 0.5 * (lo + up)
    return _one_sided(params, loss, config, z_star, oracle_tol, config.variant)


@dataclass
class SweepTable:
    """Envelope values along a line ``c + t * direction`` in cost space."""

    t: np.ndarray
    true_loss: np.ndarray
    columns: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def header(self) -> list[str]:
        return ["t", "true_loss", *self.columns]

    def rows(self):
        for i, t in enumerate(self.t):
            yield [t, self.true_loss[i], *(col[i] for col in self.columns.values())]

    def to_csv(self) -> str:
        from .io import format_row

        lines = [",".join(self.header)]
        lines.extend(format_row(r) for r in self.rows())
        return "\n".join(lines) + "\n"


def envelope_sweep(
    base_params: ProblemParameters,
    direction: np.ndarray,
    t_range: tuple[float, float],
    steps: int,
    loss: LossSpec,
    configs: Sequence[EnvelopeConfig],
    tol: float = DEFAULT_TOL,
    linearize: bool = True,
) -> SweepTable:
    """Tabulate the true loss and each envelope along a cut through cost space.

    ``loss`` is the exact (quadratic) loss.  With ``linearize`` the envelopes
    are those of its linearization at each new ``x*(c)``, anchored at the true
    loss value so columns are directly comparable.
    """
    direction = np.asarray(direction, dtype=float)
    if direction.size != base_params.n:
        raise DimensionMismatch("direction must have length n")
    if steps < 2:
        raise ValueError("steps must be at least 2")
    if loss.kind is not LossKind.QUADRATIC:
        raise UnsupportedLoss("the sweep needs an exact loss to tabulate")
    ts = np.linspace(t_range[0], t_range[1], steps)
    true_loss = np.empty(steps)
    cols = {cfg.config_id: np.empty(steps) for cfg in configs}
    for i, t in enumerate(ts):
        params = base_params.replace(c=base_params.c + t * direction)
        z = solve(params, tol=tol).solution
        true_loss[i] = loss.value(z.x)
        local = LossSpec.linearized(loss.gradient(z.x), anchor=true_loss[i]) if linearize else loss
        for cfg in configs:
            cols[cfg.config_id][i] = envelope_value(params, local, cfg, tol, z_star=z)
    return SweepTable(ts, true_loss, cols)


def dual_loss_reduction(params: ProblemParameters) -> ProblemParameters:
    """Problem whose primal optimum carries the duals ``y*`` of ``params``.

    Builds the (Wolfe) dual as a problem of the same class, with variables
    ordered ``(y, u, s_lo, s_hi)``: ``y`` free, ``u`` free copies of ``x``
    (only when ``H`` is present), and nonnegative multipliers of the finite
    lower and upper bounds.  The first ``m`` coordinates of its solution are
    ``y*`` and its equality duals are ``x*``, so losses on the duals can use
    the primal envelope machinery unchanged.
    """
    n, m = params.n, params.m
    if m == 0:
        raise NoDuals("problem has no equality constraints, hence no duals")
    has_lo = np.isfinite(params.lo)
    has_hi = np.isfinite(params.hi)
    n_lo, n_hi = int(has_lo.sum()), int(has_hi.sum())
    eye = np.eye(n)
    blocks = [params.A.T]
    costs = [-params.b]
    if params.H is not None:
        blocks.append(params.H)
        costs.append(np.zeros(n))
    blocks += [-eye[:, has_lo], eye[:, has_hi]]
    costs += [-params.lo[has_lo], params.hi[has_hi]]
    n_u = n if params.H is not None else 0
    size = m + n_u + n_lo + n_hi
    lo = np.concatenate([np.full(m + n_u, -np.inf), np.zeros(n_lo + n_hi)])
    hi = np.full(size, np.inf)
    H = None
    if params.H is not None:
        H = np.zeros((size, size))
        H[m : m + n, m : m + n] = params.H
    return ProblemParameters(
        c=np.concatenate(costs),
        H=H,
        A=-np.hstack(blocks),
        b=-params.c,
        lo=lo,
        hi=hi,
    )
