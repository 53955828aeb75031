import numpy as np
import pytest


def central_diff(f, x0, h=1e-5, indices=None):
    """Central finite-difference gradient of a scalar function of a vector."""
    x0 = np.asarray(x0, float)
    if indices is None:
        indices = range(x0.size)
    g = np.zeros(x0.size)
    for i in indices:
        e = np.zeros_like(x0)
        e[i] = h
        g[i] = (f(x0 + e) - f(x0 - e)) / (2.0 * h)
    return g


def assert_grad_matches(f, x0, grad, rel_tol=1e-5, h=1e-5, min_mag=1e-8,
                        indices=None):
    """Every coordinate with |g| > min_mag must match central differences."""
    fd = central_diff(f, x0, h=h, indices=indices)
    idx = list(indices) if indices is not None else range(x0.size)
    worst = 0.0
    for i in idx:
        if abs(grad[i]) > min_mag:
            rel = abs(fd[i] - grad[i]) / max(abs(grad[i]), min_mag)
            worst = max(worst, rel)
    assert worst < rel_tol, f"worst relative gradient error {worst:.3g}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
