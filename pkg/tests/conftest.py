"""Shared fixtures and independent oracles used across the test suite."""

import numpy as np
import pytest

from wire4d.spline import DEFAULT_WIDTH_CLAMP, Wire4D, make_clamped_knots


# ---------------------------------------------------------------------------
# Independent oracles (deliberately naive; no shared code with the package)
# ---------------------------------------------------------------------------

def naive_basis(knots, i, degree, t):
    """Textbook Cox-de Boor recursion, including the closed right endpoint."""
    if degree == 0:
        if knots[i] <= t < knots[i + 1]:
            return 1.0
        if t == knots[-1] and knots[i + 1] == knots[-1] and knots[i] < knots[i + 1]:
            return 1.0
        return 0.0
    total = 0.0
    d1 = knots[i + degree] - knots[i]
    if d1 > 0:
        total += (t - knots[i]) / d1 * naive_basis(knots, i, degree - 1, t)
    d2 = knots[i + degree + 1] - knots[i + 1]
    if d2 > 0:
        total += (knots[i + degree + 1] - t) / d2 * naive_basis(knots, i + 1, degree - 1, t)
    return total


def naive_point(wire, t):
    """Brute-force spline evaluation via the naive basis recursion."""
    acc = np.zeros(4)
    for i in range(wire.n_controls):
        acc += naive_basis(wire.knots, i, 3, t) * wire.controls[i]
    return acc


def bezier_point(ctrl, u):
    """De Casteljau evaluation of one cubic Bezier segment."""
    pts = [np.asarray(p, dtype=float) for p in ctrl]
    for _ in range(3):
        pts = [(1 - u) * a + u * b for a, b in zip(pts[:-1], pts[1:])]
    return pts[0]


def central_diff(f, x, step=1e-5):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        hi = f(x)
        xf[i] = orig - step
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2 * step)
    return grad


# ---------------------------------------------------------------------------
# Wire factories
# ---------------------------------------------------------------------------

def random_wire(rng, n_controls=10, width_clamp=DEFAULT_WIDTH_CLAMP, scale=1.0):
    controls = rng.uniform(-scale, scale, size=(n_controls, 4))
    return Wire4D(controls, make_clamped_knots(n_controls), width_clamp)


def collinear_wire_1d(values=(0.0, 1.0, 2.0, 3.0)):
    """Single-span wire whose x channel runs through the given values."""
    controls = np.zeros((len(values), 4))
    controls[:, 0] = values
    return Wire4D(controls, make_clamped_knots(len(values)))


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
