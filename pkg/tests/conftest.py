import numpy as np
import pytest

from pcagan.netcore import ParamVector, grad_of
from pcagan.rng import stream


def central_diff_check(loss, p: ParamVector, rel_tol: float = 1e-5,
                       h0: float = 1e-5) -> float:
    """Worst per-coordinate relative error of the analytic gradient against
    central finite differences of the loss's frozen (stop-gradient
    respecting) scalar function.

    Central differences of an O(1) function carry ~eps*|f|/h cancellation
    noise, so coordinates whose true gradient sits below that floor are
    compared against 10x the noise estimate instead of blowing up the
    relative error.
    """
    fn = loss.frozen_fn(p)
    v0, g = grad_of(loss, p)
    noise = 10.0 * 2.3e-16 * max(1.0, abs(v0)) / h0
    worst = 0.0
    for i in range(p.size):
        h = h0 * (1.0 + abs(p.values[i]))
        up = p.values.copy()
        up[i] += h
        dn = p.values.copy()
        dn[i] -= h
        fd = (fn(p.with_values(up)) - fn(p.with_values(dn))) / (2.0 * h)
        err = abs(fd - g[i]) / max(max(abs(fd), abs(g[i])), noise / rel_tol)
        worst = max(worst, err)
    return worst


def random_psd(d: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((d, d + 2))
    m = a @ a.T / (d + 2) * scale
    return 0.5 * (m + m.T)


@pytest.fixture
def rng():
    return stream(1234, "tests")
