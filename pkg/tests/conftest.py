import numpy as np
import pytest

from bouncelab.core import rng_stream


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    xf = x.ravel()
    for i in range(xf.size):
        old = xf[i]
        xf[i] = old + h
        fp = f(x)
        xf[i] = old - h
        fm = f(x)
        xf[i] = old
        flat[i] = (fp - fm) / (2 * h)
    return grad


def central_diff_masked(f, x, h=1e-5, consistency=1e-3, one_sided_tol=0.05):
    """Central differences with kink detection for piecewise-smooth losses.

    Coordinates where the two step sizes disagree, or where the one-sided
    slopes differ materially (a relu kink inside or exactly at the stencil
    center, where only a subgradient exists), are masked out rather than
    compared. Returns (gradient from the half-step estimate, validity mask).
    """
    x = np.asarray(x, dtype=np.float64)
    f0 = f(x)
    grad = np.zeros_like(x)
    mask = np.ones(x.shape, dtype=bool)
    gf, mf = grad.ravel(), mask.ravel()
    xf = x.ravel()
    for i in range(xf.size):
        old = xf[i]
        estimates = []
        sides = None
        for step in (h, h / 2):
            xf[i] = old + step
            fp = f(x)
            xf[i] = old - step
            fm = f(x)
            estimates.append((fp - fm) / (2 * step))
            if sides is None:
                sides = ((fp - f0) / step, (f0 - fm) / step)
        xf[i] = old
        d1, d2 = estimates
        gf[i] = d2
        scale = max(1.0, abs(d1), abs(d2))
        if abs(d1 - d2) > consistency * scale:
            mf[i] = False
        elif abs(sides[0] - sides[1]) > one_sided_tol * max(1.0, abs(sides[0]), abs(sides[1])):
            mf[i] = False
    return grad, mask


def rel_error(analytic, numeric):
    num = np.max(np.abs(analytic - numeric))
    den = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return num / den


@pytest.fixture
def rng():
    return rng_stream(1234, "tests")
