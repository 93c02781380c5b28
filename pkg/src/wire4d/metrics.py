"""Structural metrics for optimized wires and the projection convergence report.

Metrics follow the conservative evaluation convention: stretches of the curve
whose clamped width falls below a threshold count as structural breaks, the
remaining visible stretches are the components, and the minimum-spanning-tree
weight over component endpoints quantifies how much material a fabricator
would need to reconnect them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .projection import (
    Camera,
    StrokeBatch2D,
    project_wire,
    reference_projection,
    screen_space_error,
)
from .spline import Wire4D, evaluate_many, to_bezier_segments, width_profile

COMPONENT_SAMPLES = 4096


@dataclass(frozen=True)
class ComponentSet:
    """Visible stretches [t_a, t_b] of the curve plus their 3D endpoints."""

    intervals: np.ndarray      # (k, 2) parameter intervals, disjoint, ordered
    endpoints_3d: np.ndarray   # (k, 2, 3) world-space endpoints per interval

    @property
    def count(self) -> int:
        return len(self.intervals)


# ---------------------------------------------------------------------------
# Arc length
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def _span_length(wire: Wire4D, a: float, b: float, pieces: int) -> float:
    edges = np.linspace(a, b, pieces + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1] - edges[0])
    ts = (mids[:, None] + half * _GL_NODES[None, :]).reshape(-1)
    speed = np.linalg.norm(evaluate_many(wire, ts, order=1)[:, :3], axis=1)
    return float(half * np.sum(speed.reshape(pieces, -1) @ _GL_WEIGHTS))


def total_length(wire: Wire4D, rel_tol: float = 1e-6) -> float:
    """Spatial arc length, adaptive composite Gauss-Legendre per knot span."""
    total = 0.0
    idx = wire.span_knot_indices()
    for k in idx:
        a, b = float(wire.knots[k]), float(wire.knots[k + 1])
        pieces = 1
        est = _span_length(wire, a, b, pieces)
        while pieces < 256:
            finer = _span_length(wire, a, b, 2 * pieces)
            if abs(finer - est) <= rel_tol * max(abs(finer), 1e-12):
                est = finer
                break
            est = finer
            pieces *= 2
        total += est
    return total


# ---------------------------------------------------------------------------
# Components under a width threshold
# ---------------------------------------------------------------------------

def component_count(wire: Wire4D, width_threshold: float,
                    samples: int = COMPONENT_SAMPLES) -> ComponentSet:
    """Maximal runs with clamped width >= threshold, sampled uniformly.

    Runs spanning less than one sample step of parameter are discarded.
    """
    if width_threshold <= 0:
        raise ValueError("width threshold must be positive")
    ts = np.linspace(*wire.domain, samples)
    visible = width_profile(wire, ts) >= width_threshold
    edges = np.diff(visible.astype(int))
    starts = list(np.flatnonzero(edges == 1) + 1)
    ends = list(np.flatnonzero(edges == -1))
    if visible[0]:
        starts.insert(0, 0)
    if visible[-1]:
        ends.append(samples - 1)
    min_extent = (wire.domain[1] - wire.domain[0]) / samples
    intervals = []
    for s, e in zip(starts, ends):
        if ts[e] - ts[s] >= min_extent:
            intervals.append((ts[s], ts[e]))
    if not intervals:
        return ComponentSet(np.zeros((0, 2)), np.zeros((0, 2, 3)))
    intervals = np.array(intervals)
    ends_3d = np.stack([
        evaluate_many(wire, intervals[:, 0])[:, :3],
        evaluate_many(wire, intervals[:, 1])[:, :3],
    ], axis=1)
    return ComponentSet(intervals, ends_3d)


def mst_connectivity_cost(components: ComponentSet) -> float:
    """Minimum spanning tree weight bridging all components.

    Edge weight is the smallest endpoint-to-endpoint 3D distance between two
    components; a single component costs 0.
    """
    k = components.count
    if k == 0:
        raise ValueError("no components to bridge")
    if k == 1:
        return 0.0
    pts = components.endpoints_3d  # (k, 2, 3)
    diff = pts[:, None, :, None, :] - pts[None, :, None, :, :]
    pair = np.linalg.norm(diff, axis=-1).min(axis=(2, 3))  # (k, k)
    # Prim's algorithm on the complete component graph
    in_tree = np.zeros(k, dtype=bool)
    in_tree[0] = True
    best = pair[0].copy()
    total = 0.0
    for _ in range(k - 1):
        best_masked = np.where(in_tree, np.inf, best)
        j = int(np.argmin(best_masked))
        total += float(best_masked[j])
        in_tree[j] = True
        best = np.minimum(best, pair[j])
    return total


# ---------------------------------------------------------------------------
# Convergence report (error vs segment length)
# ---------------------------------------------------------------------------

def normalized_to_unit_diagonal(wire: Wire4D) -> Wire4D:
    """Center the wire and scale its xyz bounding-box diagonal to 1."""
    xyz = wire.controls[:, :3]
    lo, hi = xyz.min(axis=0), xyz.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if diag <= 0:
        raise ValueError("degenerate wire: zero bounding box")
    controls = wire.controls.copy()
    controls[:, :3] = (xyz - 0.5 * (lo + hi)) / diag
    return wire.with_controls(controls)


def convergence_report(wire: Wire4D, camera: Camera, levels: int = 5,
                       reference_samples: int = 16384,
                       ) -> list[tuple[float, float, int]]:
    """Rows (mean 3D segment length h, normalized screen error, subdivision).

    The wire is pre-normalized to unit bounding-box diagonal; the camera
    should therefore frame a unit object at the origin.
    """
    if levels < 3:
        raise ValueError("need at least 3 subdivision levels")
    unit = normalized_to_unit_diagonal(wire)
    ref = reference_projection(unit, camera, samples=reference_samples)
    rows = []
    for level in range(levels):
        s = 1 << level
        counts = np.full(unit.n_spans, s, dtype=int)
        batch = project_wire(unit, camera, counts=counts)
        segments = to_bezier_segments(unit, s)
        h = float(np.mean(np.linalg.norm(
            np.diff(segments[:, :, :3], axis=1), axis=2).sum(axis=1)))
        err = screen_space_error(batch, ref)
        rows.append((h, err, s))
    return rows


def metrics_summary(wire: Wire4D, width_threshold: float) -> dict:
    """The JSON payload of the `metrics` CLI command."""
    components = component_count(wire, width_threshold)
    cost = mst_connectivity_cost(components) if components.count else 0.0
    return {
        "length": total_length(wire),
        "components": components.count,
        "mst_cost": cost,
    }
