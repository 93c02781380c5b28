"""Export paths: SVG projections and watertight tube meshes.

The SVG export writes one cubic path element per projected dense segment
with the mean of its endpoint widths as the stroke width. The mesh export
sweeps a circular cross-section of radius w(t)/2 along the curve using
rotation-minimizing frames (double-reflection transport) and closes both
ends with triangle fans, producing an edge-manifold, watertight tube.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np

from .projection import Camera, StrokeBatch2D, project_wire
from .spline import Wire4D, evaluate_many, width_profile

MIN_TUBE_RADIUS = 1e-4
_ZERO_WIDTH_PX = 1e-9


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

def svg_document(batch: StrokeBatch2D, width: int, height: int) -> str:
    """SVG with one path per stroke; zero-width segments are omitted."""
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}">',
    ]
    for i in range(len(batch)):
        w = 0.5 * (batch.widths[i, 0] + batch.widths[i, 1])
        if w <= _ZERO_WIDTH_PX:
            continue
        q = batch.points[i]
        d = (f"M {q[0, 0]:.4f} {q[0, 1]:.4f} "
             f"C {q[1, 0]:.4f} {q[1, 1]:.4f}, {q[2, 0]:.4f} {q[2, 1]:.4f}, "
             f"{q[3, 0]:.4f} {q[3, 1]:.4f}")
        lines.append(f'  <path d="{d}" fill="none" stroke="black" '
                     f'stroke-width="{w:.4f}" stroke-linecap="round"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def export_svg(wire: Wire4D, camera: Camera, path, epsilon_px: float = 0.5) -> int:
    """Project and write the SVG; returns the number of path elements."""
    batch = project_wire(wire, camera, epsilon_px)
    doc = svg_document(batch, camera.width, camera.height)
    Path(path).write_text(doc)
    return doc.count("<path")


# ---------------------------------------------------------------------------
# Tube mesh
# ---------------------------------------------------------------------------

def _initial_normal(tangent: np.ndarray) -> np.ndarray:
    pick = np.array([1.0, 0.0, 0.0])
    if abs(tangent @ pick) > 0.9:
        pick = np.array([0.0, 1.0, 0.0])
    n = np.cross(tangent, pick)
    return n / np.linalg.norm(n)


def rotation_minimizing_frames(points: np.ndarray, tangents: np.ndarray) -> np.ndarray:
    """Double-reflection frame transport; returns (n, 3) reference normals."""
    n = len(points)
    normals = np.empty((n, 3))
    normals[0] = _initial_normal(tangents[0])
    for i in range(n - 1):
        v1 = points[i + 1] - points[i]
        c1 = v1 @ v1
        if c1 < 1e-18:
            normals[i + 1] = normals[i]
            continue
        r_l = normals[i] - (2.0 / c1) * (v1 @ normals[i]) * v1
        t_l = tangents[i] - (2.0 / c1) * (v1 @ tangents[i]) * v1
        v2 = tangents[i + 1] - t_l
        c2 = v2 @ v2
        if c2 < 1e-18:
            normals[i + 1] = r_l
        else:
            normals[i + 1] = r_l - (2.0 / c2) * (v2 @ r_l) * v2
        normals[i + 1] /= np.linalg.norm(normals[i + 1])
    return normals


def wire_to_tube_mesh(wire: Wire4D, sides: int = 12, samples: int = 100,
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Sweep a circular cross-section of radius w(t)/2 along the wire.

    Returns (vertices, faces) of a closed, edge-manifold tube; zero-width
    stretches are clamped to MIN_TUBE_RADIUS with a warning.
    """
    if sides < 3:
        raise ValueError("tube needs at least 3 sides")
    if samples < 2:
        raise ValueError("tube needs at least 2 samples")
    ts = np.linspace(*wire.domain, samples)
    pts = evaluate_many(wire, ts)[:, :3]
    if np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)) < 1e-9:
        raise ValueError("degenerate zero-length wire")
    deriv = evaluate_many(wire, ts, order=1)[:, :3]
    tangents = np.empty_like(deriv)
    prev = None
    for i, d in enumerate(deriv):
        norm = np.linalg.norm(d)
        if norm < 1e-12:
            tangents[i] = prev if prev is not None else np.array([1.0, 0.0, 0.0])
        else:
            tangents[i] = d / norm
            if prev is None:
                tangents[:i] = tangents[i]
        prev = tangents[i]
    radii = 0.5 * width_profile(wire, ts)
    clamped = radii < MIN_TUBE_RADIUS
    if np.any(clamped):
        warnings.warn(
            f"{int(np.sum(clamped))} of {samples} tube samples have near-zero "
            f"width; radius clamped to {MIN_TUBE_RADIUS}", RuntimeWarning)
        radii = np.maximum(radii, MIN_TUBE_RADIUS)

    normals = rotation_minimizing_frames(pts, tangents)
    binormals = np.cross(tangents, normals)
    theta = 2.0 * np.pi * np.arange(sides) / sides
    rings = (pts[:, None, :]
             + radii[:, None, None] * (np.cos(theta)[None, :, None] * normals[:, None, :]
                                       + np.sin(theta)[None, :, None] * binormals[:, None, :]))
    vertices = np.vstack([rings.reshape(-1, 3), pts[0][None, :], pts[-1][None, :]])
    start_center = samples * sides
    end_center = start_center + 1

    faces = []
    for i in range(samples - 1):
        for k in range(sides):
            a = i * sides + k
            b = i * sides + (k + 1) % sides
            c = (i + 1) * sides + (k + 1) % sides
            d = (i + 1) * sides + k
            faces.append([a, b, c])
            faces.append([a, c, d])
    for k in range(sides):
        faces.append([start_center, (k + 1) % sides, k])
        base = (samples - 1) * sides
        faces.append([end_center, base + k, base + (k + 1) % sides])
    return vertices, np.array(faces, dtype=np.int64)


def edge_manifold_ok(faces: np.ndarray) -> bool:
    """True when every undirected edge is shared by exactly two faces."""
    counts: dict[tuple[int, int], int] = {}
    for tri in faces:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    return all(c == 2 for c in counts.values())


def save_obj(vertices: np.ndarray, faces: np.ndarray, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    Path(path).write_text("\n".join(lines) + "\n")
