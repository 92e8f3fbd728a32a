"""Backward-pass updates for optimization layers.

Every update here is a finite difference of the parameter gradient of the
Lagrangian,

    grad_w L(x, y; w) = (d_c, d_H, d_A, d_b) = (x, x x'/2, y x', y),

evaluated at the forward solution and at a proximal point obtained by
re-solving a perturbed forward problem (warm-started at the forward
solution).  Dividing by ``tau`` gives the gradient form; the raw difference
is the finite-difference form (``form="difference"``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .envelope import EnvelopeConfig, LossKind, LossSpec, Variant, proximal_map
from .errors import DimensionMismatch, UnsupportedLoss
from .solver import DEFAULT_TOL, PrimalDualSolution, ProblemParameters, SolverReport, solve

__all__ = [
    "UpdateVector",
    "BLOCKS",
    "lagrangian_gradient",
    "finite_difference_update",
    "lpgd_update",
    "lpgd_update_detailed",
    "lppm_update",
    "lppm_update_detailed",
    "bb_update",
    "central_difference_update",
    "projection_limit_update",
    "spo_plus_gradient",
    "fenchel_young_gradient",
]

BLOCKS = ("c", "H", "A", "b")


@dataclass(eq=False)
class UpdateVector:
    """Gradient replacement with one block per learnable parameter.

    Blocks that are not learnable are ``None``.
    """

    d_c: np.ndarray | None = None
    d_H: np.ndarray | None = None
    d_A: np.ndarray | None = None
    d_b: np.ndarray | None = None

    def items(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                yield f.name, v

    def _combine(self, other: "UpdateVector", op) -> "UpdateVector":
        out = {}
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if (a is None) != (b is None):
                raise DimensionMismatch(f"block {f.name} present in only one update")
            out[f.name] = None if a is None else op(a, b)
        return UpdateVector(**out)

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def scale(self, s: float) -> "UpdateVector":
        return UpdateVector(**{f.name: None if getattr(self, f.name) is None else getattr(self, f.name) * s for f in fields(self)})

    def divide(self, s: float) -> "UpdateVector":
        return UpdateVector(**{f.name: None if getattr(self, f.name) is None else getattr(self, f.name) / s for f in fields(self)})

    def max_abs(self) -> float:
        return max((float(np.abs(v).max(initial=0.0)) for _, v in self.items()), default=0.0)

    def max_abs_diff(self, other: "UpdateVector") -> float:
        return (self - other).max_abs()

    def flat(self) -> np.ndarray:
        parts = [np.ravel(v) for _, v in self.items()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for _, v in self.items())

    def to_dict(self) -> dict:
        """Same keys as the problem JSON (``c``, ``H``, ``A``, ``b``)."""
        return {name[2:]: np.asarray(v).tolist() for name, v in self.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "UpdateVector":
        return cls(**{f"d_{k}": np.asarray(v, dtype=float) for k, v in d.items()})


def _resolve_blocks(params: ProblemParameters, blocks: Iterable[str] | None) -> tuple[str, ...]:
    if blocks is None:
        blocks = BLOCKS
    blocks = tuple(blocks)
    unknown = set(blocks) - set(BLOCKS)
    if unknown:
        raise ValueError(f"unknown parameter blocks {sorted(unknown)}")
    return tuple(b for b in blocks if not (b == "H" and params.H is None))


def lagrangian_gradient(
    params: ProblemParameters, z: PrimalDualSolution, blocks: Iterable[str] | None = None
) -> UpdateVector:
    """``grad_w L(z, w)`` restricted to ``blocks`` (H only when present)."""
    blocks = _resolve_blocks(params, blocks)
    x, y = z.x, z.y
    return UpdateVector(
        d_c=x.copy() if "c" in blocks else None,
        d_H=0.5 * np.outer(x, x) if "H" in blocks else None,
        d_A=np.outer(y, x) if "A" in blocks else None,
        d_b=y.copy() if "b" in blocks else None,
    )


def finite_difference_update(
    params: ProblemParameters,
    z_star: PrimalDualSolution,
    z_tilde: PrimalDualSolution,
    tau: float,
    variant: Variant = Variant.LOWER,
    blocks: Iterable[str] | None = None,
    form: str = "gradient",
) -> UpdateVector:
    """Last step of the backward pass given both solutions.

    Lower: ``[grad L(z~) - grad L(z*)] / tau``; upper: the negated difference.
    """
    g_star = lagrangian_gradient(params, z_star, blocks)
    g_tilde = lagrangian_gradient(params, z_tilde, blocks)
    diff = g_tilde - g_star if Variant(variant) is Variant.LOWER else g_star - g_tilde
    return diff if form == "difference" else diff.divide(tau)


def _check_form(form: str):
    if form not in ("gradient", "difference"):
        raise ValueError("form must be 'gradient' or 'difference'")


def _envelope_update(params, z_star, loss, config, tol, blocks, form):
    _check_form(form)
    sides = (Variant.LOWER, Variant.UPPER) if config.variant is Variant.AVERAGE else (config.variant,)
    updates, reports = [], []
    for side in sides:
        rep = proximal_map(params, loss, config, z_star, tol, variant=side)
        reports.append(rep)
        updates.append(finite_difference_update(params, z_star, rep.solution, config.tau, side, blocks, form))
    if len(updates) == 1:
        return updates[0], reports
    return (updates[0] + updates[1]).scale(0.5), reports


def lpgd_update_detailed(
    params: ProblemParameters,
    z_star: PrimalDualSolution,
    grad_loss: np.ndarray,
    config: EnvelopeConfig,
    tol: float = DEFAULT_TOL,
    blocks: Iterable[str] | None = None,
    form: str = "gradient",
) -> tuple[UpdateVector, list[SolverReport]]:
    """Like :func:`lpgd_update` but also returns the proximal-map solver reports."""
    loss = LossSpec.linearized(grad_loss)
    return _envelope_update(params, z_star, loss, config, tol, blocks, form)


def lpgd_update(
    params: ProblemParameters,
    z_star: PrimalDualSolution,
    grad_loss: np.ndarray,
    config: EnvelopeConfig,
    tol: float = DEFAULT_TOL,
    blocks: Iterable[str] | None = None,
    form: str = "gradient",
) -> UpdateVector:
    """LPGD update for the loss linearized at ``x*`` with gradient ``grad_loss``.

    The lower variant re-solves at cost ``c + tau * grad_loss``, the upper one
    at ``c - tau * grad_loss``; the average runs both (each warm-started at
    ``z_star``) and takes the mean.
    """
    return lpgd_update_detailed(params, z_star, grad_loss, config, tol, blocks, form)[0]


def lppm_update_detailed(
    params: ProblemParameters,
    z_star: PrimalDualSolution,
    loss: LossSpec,
    config: EnvelopeConfig,
    tol: float = DEFAULT_TOL,
    blocks: Iterable[str] | None = None,
    form: str = "gradient",
) -> tuple[UpdateVector, list[SolverReport]]:
    """Like :func:`lppm_update` but also returns the proximal-map solver reports."""
    if loss.kind is not LossKind.QUADRATIC:
        raise UnsupportedLoss("LPPM needs an exact loss the solver can represent (quadratic)")
    return _envelope_update(params, z_star, loss, config, tol, blocks, form)


def lppm_update(
    params: ProblemParameters,
    z_star: PrimalDualSolution,
    loss: LossSpec,
    config: EnvelopeConfig,
    tol: float = DEFAULT_TOL,
    blocks: Iterable[str] | None = None,
    form: str = "gradient",
) -> UpdateVector:
    """LPPM update: as LPGD but with the exact quadratic loss in the proximal map."""
    return lppm_update_detailed(params, z_star, loss, config, tol, blocks, form)[0]


def bb_update(
    params: ProblemParameters,
    z_star: PrimalDualSolution,
    grad_loss: np.ndarray,
    tau: float,
    tol: float = DEFAULT_TOL,
    blocks: Iterable[str] | None = None,
) -> UpdateVector:
    """Blackbox-backpropagation update ``[x*(c + tau g) - x*(c)] / tau`` for LPs."""
    if params.H is not None:
        raise ValueError("bb_update is defined for LPs (H absent)")
    grad_loss = np.asarray(grad_loss, dtype=float)
    z = solve(params.replace(c=params.c + tau * grad_loss), tol=tol, warm_start=z_star).solution
    blocks = _resolve_blocks(params, blocks)
    return UpdateVector(
        d_c=(z.x - z_star.x) / tau if "c" in blocks else None,
        d_A=(np.outer(z.y, z.x) - np.outer(z_star.y, z_star.x)) / tau if "A" in blocks else None,
        d_b=(z.y - z_star.y) / tau if "b" in blocks else None,
    )


def central_difference_update(
    params: ProblemParameters,
    z_star: PrimalDualSolution,
    grad_loss: np.ndarray,
    tau: float,
    tol: float = DEFAULT_TOL,
    blocks: Iterable[str] | None = None,
) -> UpdateVector:
    """Two-sided difference ``[grad L(z(c + tau g)) - grad L(z(c - tau g))] / (2 tau)``.

    Meant for regularized problems (``H`` present), where the solution map is
    differentiable and this converges to the true gradient at rate tau^2.
    """
    if params.H is None:
        raise ValueError("central_difference_update expects a regularized problem (H present)")
    grad_loss = np.asarray(grad_loss, dtype=float)
    plus = solve(params.replace(c=params.c + tau * grad_loss), tol=tol, warm_start=z_star).solution
    minus = solve(params.replace(c=params.c - tau * grad_loss), tol=tol, warm_start=z_star).solution
    return (lagrangian_gradient(params, plus, blocks) - lagrangian_gradient(params, minus, blocks)).divide(2 * tau)


def projection_limit_update(x_star, grad_loss, rho: float, lo, hi) -> np.ndarray:
    """Large-temperature limit of augmented LPGD: ``P_box(x* - rho g) - x*``."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    x_star = np.asarray(x_star, dtype=float)
    return np.clip(x_star - rho * np.asarray(grad_loss, dtype=float), lo, hi) - x_star


def spo_plus_gradient(
    params: ProblemParameters, c_pred: np.ndarray, c_true: np.ndarray, tol: float = DEFAULT_TOL
) -> np.ndarray:
    """Gradient of the SPO+ loss w.r.t. the predicted cost.

    Obtained from the lower and upper proximal maps at ``tau = 1/2``:
    ``2 [x*(c_true) - x*(2 c_pred - c_true)]``.
    """
    if params.H is not None:
        raise ValueError("SPO+ is defined for LPs (H absent)")
    c_pred = np.asarray(c_pred, dtype=float)
    c_true = np.asarray(c_true, dtype=float)
    if c_pred.size != params.n or c_true.size != params.n:
        raise DimensionMismatch("costs must have length n")
    x_true = solve(params.replace(c=c_true), tol=tol).x
    x_half = solve(params.replace(c=2 * c_pred - c_true), tol=tol).x
    return 2.0 * (x_true - x_half)


def fenchel_young_gradient(x_star_regularized, x_true) -> np.ndarray:
    """Fenchel-Young loss gradient ``x_true - x*`` (minimization convention)."""
    a = np.asarray(x_star_regularized, dtype=float)
    b = np.asarray(x_true, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch("x_star and x_true must have the same shape")
    return b - a
