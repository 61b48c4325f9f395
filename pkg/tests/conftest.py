import numpy as np
import pytest

from ccim_caer.ccim import CcimDims, init_params
from ccim_caer.confounder_dictionary import ConfounderDictionary

SMALL_DIMS = CcimDims(d=8, d_h=6, d_m=4, d_n=5, n=3)


def random_dictionary_instance(rng, n, d):
    priors = rng.random(n) + 0.1
    priors /= priors.sum()
    return ConfounderDictionary(prototypes=rng.normal(size=(n, d)), priors=priors)


def ccim_instance(seed, dims=SMALL_DIMS, scale=0.5):
    rng = np.random.default_rng(seed + 1000)
    params = init_params(dims, seed, scale)
    dictionary = random_dictionary_instance(rng, dims.n, dims.d)
    h = rng.normal(size=dims.d_h)
    return h, dictionary, params


def central_difference(f, x, step=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` (modified in place, then restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * step)
    return grad


def max_rel_error(analytic, numeric, floor=1e-5):
    """Largest |a - n| / max(|a| + |n|, floor) over all entries.

    The floor keeps entries near zero, where a 1e-5 central difference is
    only accurate to ~1e-11 absolute, from dominating the ratio.
    """
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    denom = np.maximum(np.abs(a) + np.abs(n), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


@pytest.fixture
def small_instance():
    return ccim_instance(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
