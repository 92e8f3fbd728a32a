"""Minimal training loop around an optimization layer.

The layer's parameters are held in :class:`LearnableParams` (optionally with
an affine backbone that maps input features to the cost ``c``).  Every step
solves the forward problem, evaluates a mean-squared-error head on the
primal solution and pulls a gradient replacement back through the layer with
the chosen method: an LPGD variant, LPPM, or implicit differentiation.

Forward solutions are cached per dataset index and reused as warm starts in
the next epoch; backward solves are warm-started at the forward solution.
"""
from __future__ import annotations

import enum
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import sudoku
from .envelope import EnvelopeConfig, LossSpec, Variant
from .errors import ConfigError, DimensionMismatch, InvalidProblem, SolverFailure
from .implicit import implicit_gradient_qp
from .io import write_csv, write_json
from .solver import PrimalDualSolution, ProblemParameters, solve
from .updates import UpdateVector, lpgd_update_detailed, lppm_update_detailed

__all__ = [
    "Method",
    "OptimizerKind",
    "OptimizerConfig",
    "TrainConfig",
    "AffineBackbone",
    "LearnableParams",
    "Sample",
    "EpochRecord",
    "TrainTrace",
    "TRACE_HEADER",
    "mse_loss",
    "evaluate",
    "evaluate_predictions",
    "train",
]

TRACE_HEADER = ("epoch", "train_mse", "test_mse", "exact_err", "constraint_err", "t_forward_s", "t_backward_s")
SUDOKU_METRICS = frozenset({"exact_err", "constraint_err"})


class Method(str, enum.Enum):
    LPGD_LOWER = "LPGD_Lower"
    LPGD_UPPER = "LPGD_Upper"
    LPGD_AVERAGE = "LPGD_Average"
    LPPM = "LPPM"
    IMPLICIT = "Implicit"

    @property
    def variant(self) -> Variant | None:
        return {
            Method.LPGD_LOWER: Variant.LOWER,
            Method.LPGD_UPPER: Variant.UPPER,
            Method.LPGD_AVERAGE: Variant.AVERAGE,
        }.get(self)


class OptimizerKind(str, enum.Enum):
    SGD = "SGD"
    ADAM = "Adam"


@dataclass(frozen=True)
class OptimizerConfig:
    kind: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "kind", OptimizerKind(self.kind))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must be two numbers in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    For ``Implicit`` the envelope's ``rho`` is the KKT regularization
    (``rho = 0`` for the unregularized system); for LPPM the envelope's
    variant picks the side(s) of the proximal map.
    """

    method: Method = Method.LPGD_AVERAGE
    envelope: EnvelopeConfig = field(default_factory=EnvelopeConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 10
    batch_size: int = 1
    solver_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.method.variant is not None and self.envelope.variant is not self.method.variant:
            object.__setattr__(self, "envelope", replace(self.envelope, variant=self.method.variant))
        if not (isinstance(self.epochs, (int, np.integer)) and self.epochs >= 1):
            raise ConfigError(f"epochs must be a positive integer, got {self.epochs}")
        if not (isinstance(self.batch_size, (int, np.integer)) and self.batch_size >= 1):
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size}")
        if not self.solver_tol > 0:
            raise ConfigError("solver_tol must be positive")


@dataclass(eq=False)
class AffineBackbone:
    """``c = W @ features + u``."""

    W: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.W = np.array(self.W, dtype=float, ndmin=2)
        self.u = np.array(self.u, dtype=float).ravel()
        if self.W.shape[0] != self.u.size:
            raise DimensionMismatch("backbone W rows must match the length of u")

    def __call__(self, features: np.ndarray) -> np.ndarray:
        return self.W @ np.asarray(features, dtype=float) + self.u


@dataclass(eq=False)
class LearnableParams:
    """Current layer parameters plus flags for which blocks are trained.

    With a ``backbone`` the flag ``"c"`` trains the backbone weights.  With a
    ``feasible_point`` the offset is tied to ``b = -A @ feasible_point`` so
    the equality constraints always admit that point; ``"b"`` then cannot be
    trained on its own.
    """

    params: ProblemParameters
    learn: frozenset[str] = frozenset({"c"})
    backbone: AffineBackbone | None = None
    feasible_point: np.ndarray | None = None

    def __post_init__(self):
        self.learn = frozenset(self.learn)
        unknown = self.learn - {"c", "H", "A", "b"}
        if unknown:
            raise ConfigError(f"unknown learnable blocks {sorted(unknown)}")
        if not self.learn:
            raise ConfigError("at least one block must be learnable")
        if "H" in self.learn and self.params.H is None:
            raise ConfigError("H is learnable but the problem has no H")
        if self.backbone is not None and self.backbone.u.size != self.params.n:
            raise DimensionMismatch(f"backbone output dimension {self.backbone.u.size} != n = {self.params.n}")
        if self.feasible_point is not None:
            self.feasible_point = np.asarray(self.feasible_point, dtype=float)
            if self.feasible_point.size != self.params.n:
                raise DimensionMismatch("feasible point must have length n")
            if "b" in self.learn:
                raise ConfigError("b is tied to the feasible point and cannot be learned separately")
            self.params = self.params.replace(b=-self.params.A @ self.feasible_point)

    def copy(self) -> "LearnableParams":
        bb = None if self.backbone is None else AffineBackbone(self.backbone.W.copy(), self.backbone.u.copy())
        fp = None if self.feasible_point is None else self.feasible_point.copy()
        return LearnableParams(self.params, self.learn, bb, fp)

    def problem(self, features: np.ndarray | None = None) -> ProblemParameters:
        if self.backbone is None:
            return self.params
        if features is None:
            raise DimensionMismatch("a backbone needs input features")
        return self.params.replace(c=self.backbone(features))

    def blocks(self) -> tuple[str, ...]:
        """Update blocks the backward pass has to produce."""
        out = [b for b in ("c", "H", "A", "b") if b in self.learn]
        if self.feasible_point is not None and "A" in self.learn:
            out.append("b")
        return tuple(out)

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable tensors by name (copies)."""
        out = {}
        if "c" in self.learn:
            if self.backbone is None:
                out["c"] = self.params.c.copy()
            else:
                out["W"] = self.backbone.W.copy()
                out["u"] = self.backbone.u.copy()
        for name in ("H", "A", "b"):
            if name in self.learn:
                out[name] = np.array(getattr(self.params, name))
        return out

    def gradients(self, update: UpdateVector, features: np.ndarray | None) -> dict[str, np.ndarray]:
        """Chain the layer update through the backbone and the tied offset."""
        out = {}
        if "c" in self.learn:
            if self.backbone is None:
                out["c"] = update.d_c
            else:
                out["W"] = np.outer(update.d_c, features)
                out["u"] = update.d_c
        if "H" in self.learn:
            out["H"] = update.d_H
        if "A" in self.learn:
            d_A = update.d_A
            if self.feasible_point is not None:
                d_A = d_A - np.outer(update.d_b, self.feasible_point)
            out["A"] = d_A
        if "b" in self.learn:
            out["b"] = update.d_b
        return out

    def assign(self, arrays: dict[str, np.ndarray]) -> None:
        changes = {}
        if "W" in arrays:
            self.backbone = AffineBackbone(arrays["W"], arrays["u"])
        if "c" in arrays:
            changes["c"] = arrays["c"]
        if "H" in arrays:
            H = 0.5 * (arrays["H"] + arrays["H"].T)
            eig, vec = np.linalg.eigh(H)
            if eig[0] < 0:  # project back onto the PSD cone
                H = (vec * np.maximum(eig, 0.0)) @ vec.T
                H = 0.5 * (H + H.T)
            changes["H"] = H
        if "A" in arrays:
            changes["A"] = arrays["A"]
            if self.feasible_point is not None:
                changes["b"] = -arrays["A"] @ self.feasible_point
        if "b" in arrays:
            changes["b"] = arrays["b"]
        if changes:
            self.params = self.params.replace(**changes)

    def to_dict(self) -> dict:
        d = {"params": self.params.to_dict(), "learn": sorted(self.learn)}
        if self.backbone is not None:
            d["backbone"] = {"W": self.backbone.W.tolist(), "u": self.backbone.u.tolist()}
        if self.feasible_point is not None:
            d["feasible_point"] = self.feasible_point.tolist()
        return d


@dataclass(frozen=True, eq=False)
class Sample:
    """One training example: backbone input (``None`` without backbone) and target solution."""

    target: np.ndarray
    features: np.ndarray | None = None


class _Optimizer:
    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        cfg = self.config
        lr = cfg.learning_rate
        if cfg.kind is OptimizerKind.SGD:
            return {k: arrays[k] - lr * grads[k] for k in arrays}
        self.t += 1
        b1, b2 = cfg.betas
        out = {}
        for k, p in arrays.items():
            g = grads[k]
            self.m[k] = b1 * self.m.get(k, 0.0) + (1 - b1) * g
            self.v[k] = b2 * self.v.get(k, 0.0) + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            out[k] = p - lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        return out


def mse_loss(x: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient in ``x``."""
    r = np.asarray(x, dtype=float) - np.asarray(target, dtype=float)
    return float(np.mean(r * r)), 2.0 * r / r.size


def evaluate_predictions(
    predictions: Sequence[np.ndarray], dataset: Sequence[Sample], metrics: Iterable[str] = ("mse",)
) -> dict[str, float]:
    """Metrics of raw solutions against the dataset targets.

    ``exact_err`` is the fraction of boards whose argmax rounding differs from
    the target board, ``constraint_err`` the mean fraction of violated Sudoku
    rules (both only meaningful for one-hot Sudoku encodings).
    """
    metrics = set(metrics)
    unknown = metrics - {"mse"} - SUDOKU_METRICS
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}")
    if len(predictions) != len(dataset):
        raise DimensionMismatch("one prediction per sample required")
    out: dict[str, float] = {}
    if "mse" in metrics:
        out["mse"] = float(np.mean([mse_loss(x, s.target)[0] for x, s in zip(predictions, dataset)]))
    if metrics & SUDOKU_METRICS:
        exact, rules = [], []
        for x, s in zip(predictions, dataset):
            board = sudoku.decode(x)
            exact.append(not np.array_equal(board, sudoku.decode(s.target)))
            rules.append(sudoku.rule_violations(board).mean())
        if "exact_err" in metrics:
            out["exact_err"] = float(np.mean(exact))
        if "constraint_err" in metrics:
            out["constraint_err"] = float(np.mean(rules))
    return out


def _forward(learnable, sample, tol, cache, index):
    params = learnable.problem(sample.features)
    report = solve(params, tol=tol, warm_start=None if cache is None else cache.get(index))
    if cache is not None:
        cache[index] = report.solution
    return params, report


def evaluate(
    learnable: LearnableParams,
    dataset: Sequence[Sample],
    metrics: Iterable[str] = ("mse",),
    tol: float = 1e-6,
    cache: dict[int, PrimalDualSolution] | None = None,
) -> dict[str, float]:
    """Solve every sample (warm-started from ``cache`` when given) and score it."""
    xs = [_forward(learnable, s, tol, cache, i)[1].x for i, s in enumerate(dataset)]
    return evaluate_predictions(xs, dataset, metrics)


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    test_mse: float = math.nan
    exact_err: float = math.nan
    constraint_err: float = math.nan
    t_forward_s: float = math.nan
    t_backward_s: float = math.nan
    forward_iterations: float = math.nan
    backward_iterations: float = math.nan
    forward_pivots: float = math.nan
    backward_pivots: float = math.nan

    def row(self, timing: bool = True) -> list:
        times = [self.t_forward_s, self.t_backward_s] if timing else [math.nan, math.nan]
        return [self.epoch, self.train_mse, self.test_mse, self.exact_err, self.constraint_err, *times]


@dataclass(eq=False)
class TrainTrace:
    """Per-epoch metrics; epoch 0 is the evaluation at initialization.

    ``t_forward_s``/``t_backward_s`` are summed wall-clock seconds of the
    training forward solves and backward passes in that epoch; iterations
    (ADMM steps) and pivots (LP polishing) are means per solve.
    """

    config: TrainConfig
    records: list[EpochRecord] = field(default_factory=list)
    learnable: LearnableParams | None = None
    diverged: bool = False
    message: str = ""
    backward_fallbacks: int = 0

    def rows(self, timing: bool = True) -> list[list]:
        return [r.row(timing) for r in self.records]

    def write_csv(self, path: str | Path, timing: bool = True) -> Path:
        """Write the trace; ``timing=False`` blanks the clock columns to ``nan``."""
        return write_csv(path, TRACE_HEADER, self.rows(timing))

    def mean_times(self) -> tuple[float, float]:
        trained = [r for r in self.records if r.epoch > 0]
        if not trained:
            return math.nan, math.nan
        return (
            float(np.mean([r.t_forward_s for r in trained])),
            float(np.mean([r.t_backward_s for r in trained])),
        )

    def mean_iterations(self, pivots: bool = False) -> tuple[float, float]:
        """Mean forward/backward ADMM iterations (or simplex pivots) per solve."""
        trained = [r for r in self.records if r.epoch > 0]
        if not trained:
            return math.nan, math.nan
        if pivots:
            return (
                float(np.mean([r.forward_pivots for r in trained])),
                float(np.mean([r.backward_pivots for r in trained])),
            )
        return (
            float(np.mean([r.forward_iterations for r in trained])),
            float(np.mean([r.backward_iterations for r in trained])),
        )

    def summary(self, timing: bool = True) -> dict:
        first, last = self.records[0], self.records[-1]
        fwd_it, bwd_it = self.mean_iterations()
        fwd_piv, bwd_piv = self.mean_iterations(pivots=True)
        out = {
            "method": self.config.method.value,
            "envelope": self.config.envelope.config_id,
            "optimizer": self.config.optimizer.kind.value,
            "learning_rate": self.config.optimizer.learning_rate,
            "epochs_completed": last.epoch,
            "initial_train_mse": first.train_mse,
            "final_train_mse": last.train_mse,
            "final_test_mse": last.test_mse,
            "mean_forward_iterations": fwd_it,
            "mean_backward_iterations": bwd_it,
            "mean_forward_pivots": fwd_piv,
            "mean_backward_pivots": bwd_piv,
            "backward_fallbacks": self.backward_fallbacks,
            "diverged": self.diverged,
            "message": self.message,
        }
        if timing:
            out["mean_t_forward_s"], out["mean_t_backward_s"] = self.mean_times()
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in out.items()}

    def write_summary(self, path: str | Path, timing: bool = True) -> Path:
        return write_json(path, self.summary(timing))


def _backward(method, config, params, report, sample, grad, tol, blocks):
    """Returns ``(update, solver reports, fallback used)``."""
    z = report.solution
    if method is Method.IMPLICIT:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RuntimeWarning)
            upd = implicit_gradient_qp(
                params, z, grad, rho=config.envelope.rho, tol=10 * tol,
                blocks=blocks, check_complementarity=False,
            )
        return upd, [], any(issubclass(w.category, RuntimeWarning) for w in caught)
    if method is Method.LPPM:
        # MSE = (2 / n) * |x - t|^2 / 2; fold the factor into tau and rho
        k = 2.0 / params.n
        env = config.envelope
        scaled = EnvelopeConfig(env.variant, env.tau * k, env.rho * k)
        upd, reps = lppm_update_detailed(params, z, LossSpec.quadratic(sample.target), scaled, tol, blocks)
        upd = upd.scale(k)
    else:
        upd, reps = lpgd_update_detailed(params, z, grad, config.envelope, tol, blocks)
    return upd, reps, False


def _solver_stats(phase: str, reports) -> dict[str, float]:
    if not reports:
        return {f"{phase}_iterations": math.nan, f"{phase}_pivots": math.nan}
    return {
        f"{phase}_iterations": float(np.mean([r.iterations for r in reports])),
        f"{phase}_pivots": float(np.mean([r.pivots for r in reports])),
    }


def train(
    dataset: Sequence[Sample],
    learnable: LearnableParams,
    config: TrainConfig,
    test: Sequence[Sample] | None = None,
    metrics: Iterable[str] = ("mse",),
) -> TrainTrace:
    """Fit ``learnable`` to the dataset targets by minimizing the MSE of the layer output.

    Each epoch visits the dataset in a seeded random order, in batches of
    ``config.batch_size``; the optimizer steps on the batch-mean update.
    After every epoch the whole training set (and ``test``, when given) is
    re-evaluated with the current parameters.  ``learnable`` is not modified;
    the trained copy is returned on the trace.

    A solver failure (e.g. infeasible constraints), a non-finite update or
    parameters that no longer define a valid problem (e.g. a cost that
    overflowed) stop the run and mark the trace as diverged.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    n = learnable.params.n
    for s in list(dataset) + list(test or []):
        if np.size(s.target) != n:
            raise DimensionMismatch(f"targets must have length n = {n}")
    metrics = set(metrics) | {"mse"}
    rng = np.random.default_rng(config.seed)
    model = learnable.copy()
    opt = _Optimizer(config.optimizer)
    tol = config.solver_tol
    blocks = model.blocks()
    trace = TrainTrace(config=config, learnable=model)
    train_cache: dict[int, PrimalDualSolution] = {}
    test_cache: dict[int, PrimalDualSolution] = {}

    def record(epoch, **timing):
        tr = evaluate(model, dataset, {"mse"} | (metrics if not test else set()), tol, train_cache)
        rec = EpochRecord(epoch, tr["mse"], **timing)
        scored = tr
        if test:
            scored = evaluate(model, test, metrics, tol, test_cache)
            rec.test_mse = scored["mse"]
        rec.exact_err = scored.get("exact_err", math.nan)
        rec.constraint_err = scored.get("constraint_err", math.nan)
        trace.records.append(rec)

    try:
        record(0)
    except SolverFailure as err:
        trace.diverged, trace.message = True, f"epoch 0: {err}"
        return trace

    for epoch in range(1, config.epochs + 1):
        t_fwd = t_bwd = 0.0
        fwd_reports, bwd_reports = [], []
        order = rng.permutation(len(dataset))
        try:
            for start in range(0, len(order), config.batch_size):
                batch = order[start : start + config.batch_size]
                arrays = model.arrays()
                grads = {k: np.zeros_like(v) for k, v in arrays.items()}
                for idx in batch:
                    idx = int(idx)
                    sample = dataset[idx]
                    t0 = time.perf_counter()
                    params, report = _forward(model, sample, tol, train_cache, idx)
                    t_fwd += time.perf_counter() - t0
                    fwd_reports.append(report)
                    _, grad = mse_loss(report.x, sample.target)
                    t0 = time.perf_counter()
                    upd, reps, fallback = _backward(
                        config.method, config, params, report, sample, grad, tol, blocks
                    )
                    t_bwd += time.perf_counter() - t0
                    bwd_reports.extend(reps)
                    trace.backward_fallbacks += int(fallback)
                    if not upd.is_finite():
                        raise FloatingPointError(f"non-finite update at epoch {epoch}, sample {idx}")
                    for k, g in model.gradients(upd, sample.features).items():
                        grads[k] += g
                grads = {k: g / len(batch) for k, g in grads.items()}
                new = opt.step(arrays, grads)
                if not all(np.all(np.isfinite(v)) for v in new.values()):
                    raise FloatingPointError(f"non-finite parameters at epoch {epoch}")
                model.assign(new)
            record(
                epoch,
                t_forward_s=t_fwd,
                t_backward_s=t_bwd,
                **_solver_stats("forward", fwd_reports),
                **_solver_stats("backward", bwd_reports),
            )
        except (SolverFailure, InvalidProblem, FloatingPointError) as err:
            trace.diverged = True
            trace.message = f"epoch {epoch}: {type(err).__name__}: {err}"
            break
    return trace
