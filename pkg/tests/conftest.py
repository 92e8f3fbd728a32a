import itertools

import numpy as np
import pytest

from lpgd.solver import ProblemParameters


def box_vertices(lo, hi):
    """All corners of an axis-aligned box (brute-force oracle helper)."""
    return np.array(list(itertools.product(*zip(lo, hi))), dtype=float)


def random_lp(rng, n, m=0, lo=0.0, hi=1.0):
    A = rng.normal(size=(m, n))
    b = -A @ rng.uniform(0.2, 0.8, n) if m else np.zeros(0)
    return ProblemParameters(c=rng.normal(size=n), lo=lo, hi=hi, A=A, b=b)


def random_qp(rng, n, m=1, mu=0.5):
    M = rng.normal(size=(n, n))
    H = M @ M.T / n + mu * np.eye(n)
    A = rng.normal(size=(m, n))
    b = -A @ rng.uniform(-1, 1, n)
    return ProblemParameters(c=rng.normal(size=n), lo=-3.0, hi=3.0, A=A, b=b, H=H)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def box_lp():
    """lo=(0,0), hi=(1,1), c=(1,-1): the running 2-D example, x* = (0, 1)."""
    return ProblemParameters(c=[1.0, -1.0], lo=[0.0, 0.0], hi=[1.0, 1.0])
