"""Initial wire construction: volume sampling, TSP ordering, polyline import.

A new wire starts as a single continuous path through a sampled point set
(inside a sphere, or inside the silhouette cone back-projected from a mask),
ordered by a nearest-neighbor + 2-opt traveling-salesperson heuristic and
fitted with a clamped cubic spline of uniform initial width.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .projection import Camera
from .spline import (
    DEFAULT_INITIAL_WIDTH,
    DEFAULT_WIDTH_CLAMP,
    Wire4D,
    fit_to_polyline,
)

_MAX_TRIALS = 10_000_000
_MIN_ACCEPT_RATE = 1e-4


@dataclass(frozen=True)
class InitVolume:
    """Sampling volume: a ball, or a single-view silhouette cone.

    The silhouette cone is the set of points whose projection lands on a
    foreground mask pixel and whose camera depth lies in depth_range.
    """

    kind: str
    radius: float = 1.0
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mask: np.ndarray | None = None
    camera: Camera | None = None
    depth_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind == "sphere":
            if self.radius <= 0:
                raise ValueError("sphere volume needs a positive radius")
        elif self.kind == "silhouette_cone":
            if self.mask is None or self.camera is None:
                raise ValueError("silhouette_cone volume needs a mask and a camera")
            if self.depth_range is None or self.depth_range[0] >= self.depth_range[1]:
                raise ValueError("silhouette_cone volume needs depth_range (near, far)")
            if self.depth_range[0] <= self.camera.near:
                raise ValueError("depth_range must start in front of the near plane")
        else:
            raise ValueError(f"unknown volume kind: {self.kind!r}")


def sample_init_volume(volume: InitVolume, count: int, rng_seed: int = 0) -> np.ndarray:
    """Rejection-sample `count` points inside the volume, deterministically."""
    if count < 4:
        raise ValueError("need at least 4 sample points")
    rng = np.random.default_rng(rng_seed)
    if volume.kind == "sphere":
        return _sample_sphere(volume, count, rng)
    return _sample_silhouette_cone(volume, count, rng)


def _sample_sphere(volume: InitVolume, count: int, rng) -> np.ndarray:
    center = np.asarray(volume.center, dtype=float)
    out = []
    while len(out) < count:
        cand = rng.uniform(-1.0, 1.0, size=(4 * count, 3))
        cand = cand[np.linalg.norm(cand, axis=1) <= 1.0]
        out.extend(cand[:count - len(out)])
    return center + volume.radius * np.array(out)


def _sample_silhouette_cone(volume: InitVolume, count: int, rng) -> np.ndarray:
    mask = np.asarray(volume.mask, dtype=float)
    cam = volume.camera
    if mask.shape != (cam.height, cam.width):
        raise ValueError("mask dimensions do not match the camera")
    if not np.any(mask > 0.5):
        raise ValueError("silhouette mask has no foreground pixels")
    z0, z1 = volume.depth_range
    accepted: list[np.ndarray] = []
    trials = 0
    batch = max(4 * count, 1024)
    while len(accepted) < count:
        if trials >= _MAX_TRIALS:
            rate = len(accepted) / trials
            if rate < _MIN_ACCEPT_RATE:
                raise ValueError(
                    f"degenerate silhouette mask: acceptance rate {rate:.2e} "
                    f"after {trials} trials")
        u = rng.uniform(0.0, cam.width, size=batch)
        v = rng.uniform(0.0, cam.height, size=batch)
        z = rng.uniform(z0, z1, size=batch)
        trials += batch
        fg = mask[np.minimum(v.astype(int), cam.height - 1),
                  np.minimum(u.astype(int), cam.width - 1)] > 0.5
        if not np.any(fg):
            continue
        u, v, z = u[fg], v[fg], z[fg]
        x_c = (u - cam.cx) * z / cam.fx
        y_c = (v - cam.cy) * z / cam.fy
        pts_cam = np.stack([x_c, y_c, z], axis=1)
        pts_world = (pts_cam - cam.translation) @ cam.rotation
        accepted.extend(pts_world[:count - len(accepted)])
    return np.array(accepted)


# ---------------------------------------------------------------------------
# TSP ordering (nearest neighbor + 2-opt)
# ---------------------------------------------------------------------------

def tsp_order(points: np.ndarray, move_cap_factor: int = 100) -> np.ndarray:
    """Open-path tour: nearest-neighbor from index 0, improved by 2-opt.

    Deterministic for a given input order; duplicate points are fine.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n < 2:
        raise ValueError("need at least 2 points")
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))

    order = [0]
    visited = np.zeros(n, dtype=bool)
    visited[0] = True
    for _ in range(n - 1):
        row = dist[order[-1]].copy()
        row[visited] = np.inf
        nxt = int(np.argmin(row))
        order.append(nxt)
        visited[nxt] = True
    order = np.array(order)

    # 2-opt: reverse order[i..j] while an improving move exists
    cap = move_cap_factor * n
    moves = 0
    improved = True
    while improved and moves < cap:
        improved = False
        for i in range(1, n - 1):
            a = order[i - 1]
            b = order[i]
            d_ab = dist[a, b]
            for j in range(i + 1, n):
                c = order[j]
                if j < n - 1:
                    d2 = order[j + 1]
                    gain = d_ab + dist[c, d2] - dist[a, c] - dist[b, d2]
                else:
                    gain = d_ab - dist[a, c]
                if gain > 1e-12:
                    order[i:j + 1] = order[i:j + 1][::-1]
                    improved = True
                    moves += 1
                    if moves >= cap:
                        break
                    b = order[i]
                    d_ab = dist[a, b]
            if moves >= cap:
                break
    return order


def path_length(points: np.ndarray, order=None) -> float:
    pts = np.asarray(points, dtype=float)
    if order is not None:
        pts = pts[np.asarray(order)]
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


# ---------------------------------------------------------------------------
# Wire construction and polyline import
# ---------------------------------------------------------------------------

def wire_from_path(points: np.ndarray, control_count: int,
                   initial_width: float = DEFAULT_INITIAL_WIDTH,
                   width_clamp: tuple[float, float] = DEFAULT_WIDTH_CLAMP) -> Wire4D:
    """Fit a wire through an ordered path with uniform initial width."""
    wire, _ = fit_to_polyline(points, control_count,
                              initial_width=initial_width, width_clamp=width_clamp)
    return wire


def import_polyline(path) -> np.ndarray:
    """Whitespace-separated `x y z` rows, in file order; blank lines skipped."""
    points = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
        try:
            points.append([float(x) for x in parts])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric token in {stripped!r}") from None
    if len(points) < 2:
        raise ValueError(f"{path}: need at least 2 polyline points")
    return np.array(points)
