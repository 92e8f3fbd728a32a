"""Experiment drivers: envelope sweeps, mini-Sudoku rule learning,
hyperparameter grids on synthetic cost regression, and a QP gradient bench.

Every experiment is described by an :class:`ExperimentConfig` (JSON on disk)
and writes CSV tables plus a ``summary.json`` into its output directory.
"""
from __future__ import annotations

import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import sudoku
from .envelope import EnvelopeConfig, LossSpec, Variant, envelope_sweep
from .errors import ConfigError
from .implicit import implicit_gradient_qp
from .io import write_csv, write_json
from .pipeline import (
    AffineBackbone,
    LearnableParams,
    Method,
    OptimizerConfig,
    Sample,
    TrainConfig,
    TrainTrace,
    train,
)
from .solver import ProblemParameters, solve
from .updates import lpgd_update

__all__ = [
    "KINDS",
    "ExperimentConfig",
    "load_config",
    "run_experiment",
    "run_id",
    "sudoku_task",
    "regression_task",
    "random_strongly_convex_qp",
    "random_box_lp",
    "qp_bench_table",
    "loglog_slope",
]

KINDS = ("envelope", "sudoku", "sweep", "qp-bench")

# Reference settings for 9x9 Sudoku: LPGD tau=1e4, rho=0.1, lr=0.1; GD
# rho=1e-3, lr=0.1.  The 4x4 defaults below were re-tuned (MSE is averaged
# over 64 instead of 729 entries, so the gradient scale and useful tau differ).
DEFAULT_TRAIN = {
    "method": "LPGD_Average",
    "tau": 10.0,
    "rho": 0.0,
    "optimizer": "Adam",
    "learning_rate": 0.01,
    "betas": [0.9, 0.999],
    "epsilon": 1e-8,
    "epochs": 30,
    "batch_size": 1,
}
DEFAULT_BASELINE = {"method": "Implicit", "rho": 1e-3}
DEFAULT_SECTIONS: dict[str, dict[str, Any]] = {
    "sudoku": {"train": 200, "test": 50, "givens": 8, "constraints": 40, "init_scale": 1.0},
    "sweep": {"train": 40, "test": 10, "n": 6, "m": 1, "features": 4, "problem": "lp"},
    # axes left out of the grid take their single value from ``train``
    "grid": {"tau": [0.1, 1.0, 100.0]},
    "envelope": {
        "problem": {"c": [1.0, -0.5], "lo": [0.0, 0.0], "hi": [1.0, 1.0], "A": [[1.0, 1.0]], "b": [-1.0]},
        "direction": [-1.0, 1.0],
        "t_range": [-1.0, 3.0],
        "steps": 81,
        "target": [0.5, 0.5],
        "taus": [0.1, 1.0],
        "rhos": [0.0],
        "variants": ["lower", "upper", "average"],
        "linearize": True,
    },
    "qp_bench": {"instances": 50, "n_max": 8, "m_max": 2, "taus": [0.1, 0.01, 0.001], "noise_floor": 1e-9},
}


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    ``train`` holds the run settings (method, tau, rho, optimizer, learning
    rate, betas, epsilon, epochs, batch size); ``baseline`` is a second run
    for the Sudoku comparison given as overrides of ``train`` (``None``
    skips it).  The remaining sections configure the individual kinds.
    """

    kind: str
    seed: int = 0
    tol: float = 1e-6
    out: str = "results"
    workers: int = 1
    timing: bool = True
    train: dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_TRAIN))
    baseline: dict[str, Any] | None = field(default_factory=lambda: dict(DEFAULT_BASELINE))
    sudoku: dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_SECTIONS["sudoku"]))
    sweep: dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_SECTIONS["sweep"]))
    grid: dict[str, list] = field(default_factory=lambda: dict(DEFAULT_SECTIONS["grid"]))
    envelope: dict[str, Any] = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_SECTIONS["envelope"])))
    qp_bench: dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_SECTIONS["qp_bench"]))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        try:
            self.seed = int(self.seed)
            self.tol = float(self.tol)
            self.workers = int(self.workers)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad scalar setting: {err}") from None
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if isinstance(self.timing, str):
            self.timing = self.timing.strip().lower() in ("1", "true", "yes", "on")
        self.timing = bool(self.timing)
        for name in ("train", "sudoku", "sweep", "grid", "envelope", "qp_bench"):
            if not isinstance(getattr(self, name), dict):
                raise ConfigError(f"section {name!r} must be an object")
        if self.kind == "sweep":
            for key, values in self.grid.items():
                if key not in ("tau", "rho", "learning_rate", "epsilon"):
                    raise ConfigError(f"unknown grid axis {key!r}")
                if not isinstance(values, list) or not values:
                    raise ConfigError(f"grid axis {key!r} must be a nonempty list")
        # surface bad run settings before any work starts
        self.train_config()
        if self.baseline is not None:
            self.train_config(self.baseline)

    def train_config(self, overrides: dict[str, Any] | None = None) -> TrainConfig:
        return make_train_config({**self.train, **(overrides or {})}, self.seed, self.tol)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind, "seed": self.seed, "tol": self.tol, "out": self.out,
            "workers": self.workers, "timing": self.timing, "train": self.train,
            "baseline": self.baseline, "sudoku": self.sudoku, "sweep": self.sweep,
            "grid": self.grid, "envelope": self.envelope, "qp_bench": self.qp_bench,
        }


def make_train_config(d: dict[str, Any], seed: int, tol: float) -> TrainConfig:
    known = set(DEFAULT_TRAIN) | {"variant"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown train settings {sorted(unknown)}")
    d = {**DEFAULT_TRAIN, **d}
    try:
        method = Method(d["method"])
        variant = method.variant or Variant(d.get("variant", "average"))
        return TrainConfig(
            method=method,
            envelope=EnvelopeConfig(variant, float(d["tau"]), float(d["rho"])),
            optimizer=OptimizerConfig(d["optimizer"], float(d["learning_rate"]), tuple(d["betas"]), float(d["epsilon"])),
            epochs=int(d["epochs"]),
            batch_size=int(d["batch_size"]),
            solver_tol=tol,
            seed=seed,
        )
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as err:
        raise ConfigError(f"invalid train settings: {err}") from None


def load_config(path: str | os.PathLike | None, kind: str | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read a JSON config, then apply ``overrides`` (top-level keys).

    ``kind`` (the CLI subcommand) must agree with the file's ``kind`` when
    both are given.
    """
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a JSON object")
    if kind is not None:
        if data.get("kind", kind) != kind:
            raise ConfigError(f"config kind {data['kind']!r} does not match subcommand {kind!r}")
        data["kind"] = kind
    if "kind" not in data:
        raise ConfigError("experiment kind missing")
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    # sections given in the file are merged over the defaults
    for name, default in DEFAULT_SECTIONS.items():
        if name in data and isinstance(data[name], dict):
            data[name] = {**json.loads(json.dumps(default)), **data[name]}
    allowed = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return ExperimentConfig(**data)


def run_id(config: TrainConfig) -> str:
    """File-name stem encoding the swept hyperparameters of a run."""
    env, opt = config.envelope, config.optimizer
    return f"{config.method.value}_tau{env.tau:g}_rho{env.rho:g}_lr{opt.learning_rate:g}_eps{opt.epsilon:g}"


# ---------------------------------------------------------------------------
# tasks


def sudoku_task(section: dict[str, Any], seed: int):
    """Train/test samples and the initial learnable constraints for 4x4 Sudoku.

    The cost is fixed to ``c = -x_inc`` through a frozen backbone; ``A`` is
    learned with ``b = -A @ (1/4)`` so the uniform point stays feasible.
    """
    n_train, n_test = int(section["train"]), int(section["test"])
    inst = sudoku.generate_sudoku_dataset(n_train + n_test, int(section["givens"]), seed)
    samples = [Sample(i.x_true, i.x_inc) for i in inst]
    rng = np.random.default_rng(seed + 1)
    m, n = int(section["constraints"]), sudoku.N_VARS
    A = rng.normal(scale=float(section["init_scale"]), size=(m, n))
    params = ProblemParameters(c=np.zeros(n), lo=0.0, hi=1.0, A=A, b=np.zeros(m))
    learnable = LearnableParams(
        params, {"A"}, AffineBackbone(-np.eye(n), np.zeros(n)), np.full(n, 0.25)
    )
    return samples[:n_train], samples[n_train:], learnable


def regression_task(section: dict[str, Any], seed: int):
    """Synthetic cost regression: ``c = W mu + u`` with a hidden true ``W``.

    Targets are solutions of the box problem (with ``m`` random equalities
    through an interior point) at the true cost; the learner starts from a
    random backbone.  ``problem="qp"`` adds ``H = I / 2``.
    """
    rng = np.random.default_rng(seed)
    n, m, p = int(section["n"]), int(section["m"]), int(section["features"])
    kind = section.get("problem", "lp")
    if kind not in ("lp", "qp"):
        raise ConfigError("sweep problem must be 'lp' or 'qp'")
    A = rng.normal(size=(m, n))
    b = -A @ rng.uniform(0.3, 0.7, n)
    H = 0.5 * np.eye(n) if kind == "qp" else None
    base = ProblemParameters(c=np.zeros(n), lo=0.0, hi=1.0, A=A, b=b, H=H)
    W_true = rng.normal(size=(n, p))
    total = int(section["train"]) + int(section["test"])
    samples = []
    for _ in range(total):
        mu = rng.normal(size=p)
        x = solve(base.replace(c=W_true @ mu), tol=1e-9).x
        samples.append(Sample(x, mu))
    learnable = LearnableParams(base, {"c"}, AffineBackbone(rng.normal(size=(n, p)), np.zeros(n)))
    return samples[: int(section["train"])], samples[int(section["train"]) :], learnable


def _run_job(job: tuple) -> dict[str, Any]:
    """One training run; top-level so process pools can pickle it."""
    task, section, seed, config, out_dir, timing = job
    if task == "sudoku":
        train_set, test_set, learnable = sudoku_task(section, seed)
        metrics = {"mse", "exact_err", "constraint_err"}
    else:
        train_set, test_set, learnable = regression_task(section, seed)
        metrics = {"mse"}
    trace = train(train_set, learnable, config, test_set or None, metrics)
    stem = run_id(config)
    csv_path = trace.write_csv(Path(out_dir) / f"{stem}.csv", timing=timing)
    summary = trace.summary(timing)
    summary["id"] = stem
    summary["csv"] = csv_path.name
    return summary


def _run_jobs(jobs: list[tuple], workers: int) -> list[dict[str, Any]]:
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_job, jobs))


# ---------------------------------------------------------------------------
# QP bench


def random_strongly_convex_qp(rng: np.random.Generator, n: int, m: int) -> ProblemParameters:
    """``H = M M'/n + I/2`` (so ``H >= I/2``), box ``[-3, 3]``, equalities through an interior point."""
    M = rng.normal(size=(n, n))
    H = M @ M.T / n + 0.5 * np.eye(n)
    A = rng.normal(size=(m, n))
    b = -A @ rng.uniform(-1.0, 1.0, n)
    return ProblemParameters(c=rng.normal(size=n), lo=-3.0, hi=3.0, A=A, b=b, H=H)


def random_box_lp(rng: np.random.Generator, n: int, m: int = 0) -> ProblemParameters:
    """LP on ``[0, 1]^n`` with random cost and ``m`` equalities through an interior point."""
    A = rng.normal(size=(m, n))
    b = -A @ rng.uniform(0.2, 0.8, n)
    return ProblemParameters(c=rng.normal(size=n), lo=0.0, hi=1.0, A=A, b=b)


def loglog_slope(taus, errors, noise_floor: float = 0.0) -> float:
    """Least-squares slope of ``log(error)`` against ``log(tau)``.

    Errors are clipped at ``noise_floor``; when every error is at the floor
    the difference is exact to solver precision and ``inf`` is returned.
    """
    e = np.maximum(np.asarray(errors, dtype=float), noise_floor)
    if noise_floor > 0 and np.all(e <= noise_floor):
        return math.inf
    return float(np.polyfit(np.log(taus), np.log(e), 1)[0])


def qp_bench_table(section: dict[str, Any], seed: int, tol: float = 1e-11):
    """Distance of LPGD updates to the implicit gradient on random QPs.

    Returns rows ``(instance, n, m, tau, err_lower, err_upper, err_average)``
    with max-abs errors over all parameter blocks.
    """
    rng = np.random.default_rng(seed)
    taus = [float(t) for t in section["taus"]]
    rows = []
    for k in range(int(section["instances"])):
        n = int(rng.integers(2, int(section["n_max"]) + 1))
        m = int(rng.integers(1, int(section["m_max"]) + 1))
        params = random_strongly_convex_qp(rng, n, m)
        grad = rng.normal(size=n)
        z = solve(params, tol=tol).solution
        true = implicit_gradient_qp(params, z, grad, tol=1e-8)
        for tau in taus:
            errs = [
                lpgd_update(params, z, grad, EnvelopeConfig(v, tau), tol=tol).max_abs_diff(true)
                for v in (Variant.LOWER, Variant.UPPER, Variant.AVERAGE)
            ]
            rows.append([k, n, m, tau, *errs])
    return rows


QP_BENCH_HEADER = ("instance", "n", "m", "tau", "err_lower", "err_upper", "err_average")


def _qp_bench_summary(rows, taus, noise_floor):
    out = {}
    by_inst: dict[int, list] = {}
    for r in rows:
        by_inst.setdefault(r[0], []).append(r)
    for col, name in ((4, "lower"), (5, "upper"), (6, "average")):
        slopes = [loglog_slope(taus, [r[col] for r in rs], noise_floor) for rs in by_inst.values()]
        finite = [s for s in slopes if math.isfinite(s)]
        out[name] = {
            "min_slope": min(finite) if finite else None,
            "median_slope": float(np.median(finite)) if finite else None,
            "exact_instances": len(slopes) - len(finite),
        }
    return out


# ---------------------------------------------------------------------------
# drivers


def _envelope(config: ExperimentConfig, out: Path) -> tuple[int, dict]:
    sec = config.envelope
    try:
        params = ProblemParameters.from_dict(sec["problem"])
        configs = [
            EnvelopeConfig(Variant(v), float(t), float(r))
            for v, t, r in itertools.product(sec["variants"], sec["taus"], sec["rhos"])
        ]
        loss = LossSpec.quadratic(sec["target"])
        t_range = tuple(float(t) for t in sec["t_range"])
        steps = int(sec["steps"])
    except (KeyError, ValueError, TypeError) as err:
        raise ConfigError(f"invalid envelope section: {err}") from None
    table = envelope_sweep(params, sec["direction"], t_range, steps, loss, configs, config.tol, bool(sec["linearize"]))
    write_csv(out / "envelope.csv", table.header, table.rows())
    return 0, {"csv": "envelope.csv", "columns": table.header}


def _sudoku(config: ExperimentConfig, out: Path) -> tuple[int, dict]:
    runs = [config.train_config()]
    if config.baseline is not None:
        runs.append(config.train_config(config.baseline))
    jobs = [("sudoku", config.sudoku, config.seed, r, str(out), config.timing) for r in runs]
    results = _run_jobs(jobs, config.workers)
    code = 1 if any(r["diverged"] for r in results) else 0
    return code, {"runs": results}


def _sweep(config: ExperimentConfig, out: Path) -> tuple[int, dict]:
    train = {**DEFAULT_TRAIN, **config.train}
    axes = ("tau", "rho", "learning_rate", "epsilon")
    grid = {a: config.grid.get(a, [train[a]]) for a in axes}
    runs = []
    for tau, rho, lr, eps in itertools.product(*(grid[a] for a in axes)):
        runs.append(config.train_config({"tau": tau, "rho": rho, "learning_rate": lr, "epsilon": eps}))
    ids = [run_id(r) for r in runs]
    if len(set(ids)) != len(ids):
        raise ConfigError("grid contains duplicate points")
    regression_task(config.sweep, config.seed)  # validate the section before forking
    jobs = [("sweep", config.sweep, config.seed, r, str(out), config.timing) for r in runs]
    results = _run_jobs(jobs, config.workers)
    code = 1 if any(r["diverged"] for r in results) else 0
    return code, {"runs": results}


def _qp_bench(config: ExperimentConfig, out: Path) -> tuple[int, dict]:
    sec = config.qp_bench
    try:
        rows = qp_bench_table(sec, config.seed)
        taus = [float(t) for t in sec["taus"]]
        floor = float(sec["noise_floor"])
    except (KeyError, ValueError, TypeError) as err:
        raise ConfigError(f"invalid qp_bench section: {err}") from None
    write_csv(out / "qp_bench.csv", QP_BENCH_HEADER, rows)
    return 0, {"csv": "qp_bench.csv", "slopes": _qp_bench_summary(rows, taus, floor)}


_DRIVERS = {"envelope": _envelope, "sudoku": _sudoku, "sweep": _sweep, "qp-bench": _qp_bench}


def run_experiment(config: ExperimentConfig) -> int:
    """Run the experiment, write its files and return the exit code.

    Exit code 0 on success and 1 if any training run diverged; the reason is
    recorded in ``summary.json``.
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    code, summary = _DRIVERS[config.kind](config, out)
    summary = {"kind": config.kind, "exit_code": code, "config": config.to_dict(), **summary}
    write_json(out / "summary.json", summary)
    return code
