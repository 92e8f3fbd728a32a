"""Acceptance suite: one PASS/FAIL line per primary criterion.

Run with ``pytest -v tests/test_acceptance.py`` (lines are printed to the
terminal even with output capture on) or directly as a script.
"""
import json
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import box_vertices  # noqa: E402
from lpgd.cli import main as cli_main  # noqa: E402
from lpgd.envelope import EnvelopeConfig, LossSpec, envelope_value  # noqa: E402
from lpgd.experiments import (  # noqa: E402
    ExperimentConfig,
    loglog_slope,
    qp_bench_table,
    random_box_lp,
    random_strongly_convex_qp,
    sudoku_task,
)
from lpgd.implicit import implicit_gradient_qp  # noqa: E402
from lpgd.io import read_csv  # noqa: E402
from lpgd.pipeline import TRACE_HEADER, train  # noqa: E402
from lpgd.solver import PrimalDualSolution, ProblemParameters, solve, solve_exact_lp  # noqa: E402
from lpgd.updates import (  # noqa: E402
    bb_update,
    fenchel_young_gradient,
    finite_difference_update,
    lpgd_update,
    projection_limit_update,
    spo_plus_gradient,
)


def _timed(budget_s):
    def wrap(fn):
        def run():
            t0 = time.perf_counter()
            ok, detail = fn()
            elapsed = time.perf_counter() - t0
            in_budget = elapsed < budget_s
            return ok and in_budget, f"{detail}; {elapsed:.1f}s (budget {budget_s:g}s)"

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run

    return wrap


# --- 1 -----------------------------------------------------------------------


@_timed(60)
def criterion_1():
    """Small-tau convergence of LPGD to the implicit gradient on strongly convex QPs."""
    taus = [1e-1, 1e-2, 1e-3]
    floor = 1e-9
    rows = qp_bench_table({"instances": 50, "n_max": 8, "m_max": 2, "taus": taus}, seed=0)
    by_inst = {}
    for r in rows:
        by_inst.setdefault(r[0], []).append(r)
    slopes = {}
    for col, name in ((4, "lower"), (6, "average")):
        slopes[name] = [loglog_slope(taus, [r[col] for r in rs], floor) for rs in by_inst.values()]
    lo, av = min(slopes["lower"]), min(slopes["average"])
    exact = sum(math.isinf(s) for s in slopes["average"])
    ok = lo >= 0.9 and av >= 1.8 and len(by_inst) == 50
    return ok, f"min slope lower {lo:.3f} (>=0.9), average {av:.3f} (>=1.8, {exact} exact to noise floor {floor:g})"


# --- 2 -----------------------------------------------------------------------


@_timed(30)
def criterion_2():
    """Sandwich and tau-monotonicity of the envelopes of an exact quadratic loss."""
    tol = 1e-8
    slack = 4 * tol
    taus = [0.01, 0.1, 1.0, 10.0]
    rng = np.random.default_rng(2)
    worst = -math.inf
    for _ in range(20):
        n = int(rng.integers(2, 6))
        p = random_box_lp(rng, n)
        loss = LossSpec.quadratic(rng.uniform(0, 1, n))
        z = solve(p, tol=tol).solution
        true = loss.value(z.x)
        lows = [envelope_value(p, loss, EnvelopeConfig("lower", t), tol, z) for t in taus]
        ups = [envelope_value(p, loss, EnvelopeConfig("upper", t), tol, z) for t in taus]
        viol = [lo - true for lo in lows] + [true - up for up in ups]
        viol += [b - a for a, b in zip(lows, lows[1:])] + [a - b for a, b in zip(ups, ups[1:])]
        worst = max(worst, max(viol))
    return worst <= slack, f"worst violation {worst:.2e} (slack {slack:.0e}) on 20 LPs x 4 taus"


# --- 3 -----------------------------------------------------------------------


@_timed(30)
def criterion_3():
    """Lower LPGD equals the blackbox-backpropagation formula bit for bit."""
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(100):
        n, m = int(rng.integers(2, 8)), int(rng.integers(0, 3))
        p = random_box_lp(rng, n, m)
        z = solve(p).solution
        g = rng.normal(size=n)
        tau = float(10 ** rng.uniform(-2, 1))
        a = bb_update(p, z, g, tau)
        b = lpgd_update(p, z, g, EnvelopeConfig("lower", tau))
        mismatches += any(not np.array_equal(v, getattr(b, k)) for k, v in a.items())
    return mismatches == 0, f"{mismatches}/100 LPs differ"


# --- 4 -----------------------------------------------------------------------


@_timed(60)
def criterion_4():
    """Large-tau limits: Frank-Wolfe vertex and projected gradient step."""
    rng = np.random.default_rng(4)
    fw_err = proj_err = 0.0
    for _ in range(50):
        n, m = int(rng.integers(2, 7)), int(rng.integers(0, 3))
        p = random_box_lp(rng, n, m)
        z = solve(p).solution
        g = rng.normal(size=n)
        d = lpgd_update(p, z, g, EnvelopeConfig("lower", 1e6), tol=1e-9, form="difference")
        fw = solve_exact_lp(p.replace(c=g)).x
        fw_err = max(fw_err, np.abs(z.x + d.d_c - fw).max())
    for _ in range(50):
        n = int(rng.integers(2, 7))
        p = random_box_lp(rng, n)
        z = solve(p).solution
        g = rng.normal(size=n)
        rho = float(rng.uniform(0.05, 2.0))
        d = lpgd_update(p, z, g, EnvelopeConfig("lower", 1e6, rho), tol=1e-10, form="difference")
        proj_err = max(proj_err, np.abs(d.d_c - projection_limit_update(z.x, g, rho, p.lo, p.hi)).max())
    ok = fw_err <= 1e-5 and proj_err <= 1e-5
    return ok, f"Frank-Wolfe max err {fw_err:.2e}, projection max err {proj_err:.2e} (<=1e-5)"


# --- 5 -----------------------------------------------------------------------


def _spo_plus(c_pred, c_true, V):
    x_true = V[np.argmin(V @ c_true)]
    return np.max(V @ (c_true - 2 * c_pred)) + 2 * c_pred @ x_true - c_true @ x_true


@_timed(30)
def criterion_5():
    """SPO+ against numerical subgradients; Fenchel-Young against the closed form."""
    rng = np.random.default_rng(5)
    V = box_vertices(np.zeros(2), np.ones(2))
    h = 1e-6
    spo_err = 0.0
    for _ in range(20):
        c_pred, c_true = rng.normal(size=2), rng.normal(size=2)
        g = spo_plus_gradient(ProblemParameters(c=c_true, lo=0, hi=1), c_pred, c_true)
        num = np.array([
            (_spo_plus(c_pred + h * e, c_true, V) - _spo_plus(c_pred - h * e, c_true, V)) / (2 * h)
            for e in np.eye(2)
        ])
        spo_err = max(spo_err, np.abs(g - num).max())
    fy_err = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 6))
        c, x_true = rng.normal(size=n), rng.normal(size=n)
        # Omega = |x|^2 / 2 without constraints: x*(c) = -c and grad l_FY = x_true + c
        x = solve(ProblemParameters(c=c, lo=-1e3, hi=1e3, H=np.eye(n)), tol=1e-12).x
        fy_err = max(fy_err, np.abs(fenchel_young_gradient(x, x_true) - (x_true + c)).max())
    ok = spo_err <= 1e-4 and fy_err <= 1e-8
    return ok, f"SPO+ max err {spo_err:.2e} (<=1e-4), Fenchel-Young max err {fy_err:.2e} (<=1e-8)"


# --- 6 -----------------------------------------------------------------------


@_timed(30)
def criterion_6():
    """Update deviation under injected solution noise stays within 2 L eps / tau."""
    rng = np.random.default_rng(6)
    L = 1.0  # grad_c L(x, y) = x is 1-Lipschitz in x
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 7))
        p = random_box_lp(rng, n)
        z = solve(p).solution
        g = rng.normal(size=n)
        for tau in (0.1, 1.0):
            zt = solve(p.replace(c=p.c + tau * g), warm_start=z).solution
            exact = finite_difference_update(p, z, zt, tau, blocks=["c"])
            for eps in (1e-6, 1e-4):
                nz = PrimalDualSolution(z.x + rng.uniform(-eps, eps, n), z.y)
                nt = PrimalDualSolution(zt.x + rng.uniform(-eps, eps, n), zt.y)
                dev = finite_difference_update(p, nz, nt, tau, blocks=["c"]).max_abs_diff(exact)
                worst = max(worst, dev / (2 * L * eps / tau))
    return worst <= 1.1, f"max deviation / (2 L eps / tau) = {worst:.3f} (<=1.1)"


# --- 7 -----------------------------------------------------------------------


@_timed(15 * 60)
def criterion_7():
    """Mini-Sudoku rule learning: LPGD_Average vs the implicit-gradient baseline."""
    cfg = ExperimentConfig("sudoku")
    runs = {}
    for name, overrides in (("LPGD", None), ("GD", cfg.baseline)):
        train_set, test_set, learnable = sudoku_task(cfg.sudoku, cfg.seed)
        tc = cfg.train_config(overrides)
        runs[name] = train(train_set, learnable, tc, test_set, {"mse", "exact_err", "constraint_err"})
    red = {k: 1 - t.records[-1].train_mse / t.records[0].train_mse for k, t in runs.items()}
    final = {k: t.records[-1].train_mse for k, t in runs.items()}
    fwd, bwd = runs["LPGD"].mean_times()
    fwd_piv, bwd_piv = runs["LPGD"].mean_iterations(pivots=True)
    epochs = {k: t.records[-1].epoch for k, t in runs.items()}
    ok = (
        not any(t.diverged for t in runs.values())
        and all(e <= 30 for e in epochs.values())
        and red["LPGD"] >= 0.5
        and red["GD"] >= 0.5
        and final["LPGD"] <= 1.1 * final["GD"]
        and bwd < fwd
    )
    return ok, (
        f"train-MSE reduction LPGD {red['LPGD']:.1%}, GD {red['GD']:.1%} (>=50%); "
        f"final LPGD {final['LPGD']:.4f} vs 1.1 x GD {1.1 * final['GD']:.4f}; "
        f"LPGD backward {bwd:.2f}s < forward {fwd:.2f}s per epoch "
        f"(pivots per solve {bwd_piv:.1f} vs {fwd_piv:.1f})"
    )


# --- 8 -----------------------------------------------------------------------


def _fd_gradient(p, target, h=1e-6):
    def loss(q):
        x = solve(q, tol=1e-13).x
        return 0.5 * float((x - target) @ (x - target))

    out = {}
    for name in ("c", "H", "A", "b"):
        base = getattr(p, name)
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            if name == "H" and idx[0] > idx[1]:
                continue
            e = np.zeros_like(base)
            e[idx] = h
            sym = name == "H" and idx[0] != idx[1]
            if sym:
                e[idx[::-1]] = h
            grad[idx] = (loss(p.replace(**{name: base + e})) - loss(p.replace(**{name: base - e}))) / (2 * h)
            if sym:
                grad[idx] /= 2
                grad[idx[::-1]] = grad[idx]
        out[name] = grad
    return out


@_timed(60)
def criterion_8():
    """Implicit gradients against central finite differences of the full loss."""
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(50):
        n, m = int(rng.integers(2, 9)), int(rng.integers(1, 3))
        p = random_strongly_convex_qp(rng, n, m)
        target = rng.normal(size=n)
        z = solve(p, tol=1e-13).solution
        u = implicit_gradient_qp(p, z, z.x - target, tol=1e-8)
        fd = _fd_gradient(p, target)
        g = np.concatenate([v.ravel() for _, v in u.items()])
        ref = np.concatenate([fd[k[2:]].ravel() for k, _ in u.items()])
        worst = max(worst, np.abs(g - ref).max() / np.abs(ref).max())
    return worst <= 1e-4, f"max relative error {worst:.2e} (<=1e-4) over all blocks of 50 QPs"


# --- 9 -----------------------------------------------------------------------


_DETERMINISM_CONFIGS = {
    "envelope": {"kind": "envelope"},
    "qp-bench": {"kind": "qp-bench", "qp_bench": {"instances": 5}},
    "sweep": {
        "kind": "sweep",
        "train": {"epochs": 3},
        "sweep": {"train": 10, "test": 5},
        "grid": {"tau": [0.1, 1, 100]},
    },
    "sudoku": {"kind": "sudoku", "train": {"epochs": 2}, "sudoku": {"train": 10, "test": 5}},
}


def _csvs(directory):
    return {p.name: p.read_bytes() for p in sorted(Path(directory).glob("*.csv"))}


@_timed(300)
def criterion_9():
    """Two runs of each experiment config write byte-identical CSVs."""
    issues = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for kind, cfg in _DETERMINISM_CONFIGS.items():
            path = tmp / f"{kind}.json"
            path.write_text(json.dumps(cfg))
            outs = []
            for rep in ("a", "b"):
                out = tmp / f"{kind}_{rep}"
                code = cli_main([kind, "--config", str(path), "--out", str(out), "--no-timing"])
                if code != 0:
                    issues.append(f"{kind} exit {code}")
                outs.append(_csvs(out))
            if not outs[0] or outs[0] != outs[1]:
                issues.append(f"{kind} CSVs differ")
        # with timing on, every column except the two clock columns still matches
        path = tmp / "sweep.json"
        timed = []
        for rep in ("a", "b"):
            out = tmp / f"timed_{rep}"
            cli_main(["sweep", "--config", str(path), "--out", str(out)])
            timed.append({p.name: read_csv(p)[1] for p in sorted(out.glob("*.csv"))})
        keep = [i for i, h in enumerate(TRACE_HEADER) if not h.startswith("t_")]
        for name, rows in timed[0].items():
            a = np.array(rows)[:, keep]
            b = np.array(timed[1][name])[:, keep]
            if not np.array_equal(a, b, equal_nan=True):
                issues.append(f"timed {name} metric columns differ")
    n = len(_DETERMINISM_CONFIGS)
    return not issues, f"{n} experiment kinds rerun: " + ("identical" if not issues else "; ".join(issues))


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8, criterion_9]


def _line(k, ok, detail):
    return f"CRITERION {k}: {'PASS' if ok else 'FAIL'} - {detail}"


@pytest.mark.parametrize("k", range(1, len(CRITERIA) + 1))
def test_criterion(k, capsys):
    ok, detail = CRITERIA[k - 1]()
    with capsys.disabled():
        print("\n" + _line(k, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    results = []
    for k, fn in enumerate(CRITERIA, 1):
        ok, detail = fn()
        results.append(ok)
        print(_line(k, ok, detail), flush=True)
    sys.exit(0 if all(results) else 1)
