"""Triangle meshes, camera-space depth buffers, and soft width visibility.

Depth buffers are (height, width) float arrays of camera-space depth with
+inf marking background pixels. For gradient purposes the background is
treated as a large finite depth so the visibility sigmoid stays defined.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEPTH_BACKGROUND = np.inf
_BACKGROUND_FINITE = 1e6
_DEGENERATE_AREA = 1e-12


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float, order="C").reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64, order="C").reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


@dataclass(frozen=True)
class VisibilityParams:
    """Sigmoid sharpness k (1/scene unit) and shift bias b (scene units)."""

    k: float = 100.0
    b: float = 0.05

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("sharpness k must be positive")


# ---------------------------------------------------------------------------
# OBJ loading
# ---------------------------------------------------------------------------

def _face_area(v0, v1, v2) -> float:
    return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0))


def load_mesh(path, normalize: bool = False) -> TriangleMesh:
    """ASCII OBJ (v/f records, 1-based indices); polygons are fan-triangulated.

    With normalize=True the mesh is centered and scaled so the farthest
    vertex sits on the unit sphere.
    """
    vertices = []
    faces = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise ValueError(f"{path}:{lineno}: vertex needs 3 coordinates")
            try:
                vertices.append([float(x) for x in parts[1:4]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad vertex: {exc}") from None
        elif parts[0] == "f":
            try:
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad face index") from None
            if len(idx) < 3:
                raise ValueError(f"{path}:{lineno}: face needs at least 3 vertices")
            if any(i < 1 for i in idx):
                raise ValueError(f"{path}:{lineno}: face indices must be positive")
            for a, b in zip(idx[1:-1], idx[2:]):
                faces.append([idx[0] - 1, a - 1, b - 1])
    if not vertices or not faces:
        raise ValueError(f"{path}: empty mesh")
    v = np.array(vertices)
    f = np.array(faces, dtype=np.int64)
    if f.max() >= len(v):
        raise ValueError(f"{path}: face index out of range")
    keep = [i for i, tri in enumerate(f)
            if _face_area(v[tri[0]], v[tri[1]], v[tri[2]]) > _DEGENERATE_AREA]
    f = f[keep]
    if not len(f):
        raise ValueError(f"{path}: all faces degenerate")
    if normalize:
        center = 0.5 * (v.min(axis=0) + v.max(axis=0))
        v = v - center
        v /= np.max(np.linalg.norm(v, axis=1))
    return TriangleMesh(v, f)


# ---------------------------------------------------------------------------
# Depth rendering
# ---------------------------------------------------------------------------

def render_depth(mesh: TriangleMesh, camera) -> np.ndarray:
    """Nearest-surface camera depth per pixel, +inf where nothing is hit.

    Scanline z-buffer with perspective-correct interpolation (1/z is linear
    in screen space). Triangles with any vertex at or behind the near plane
    are skipped rather than clipped.
    """
    h, w = camera.height, camera.width
    depth = np.full((h, w), DEPTH_BACKGROUND)
    if mesh.n_faces == 0:
        return depth
    cam = camera.to_camera(mesh.vertices)
    z = cam[:, 2]
    u = camera.fx * cam[:, 0] / np.where(z > 0, z, 1.0) + camera.cx
    v = camera.fy * cam[:, 1] / np.where(z > 0, z, 1.0) + camera.cy
    inv_z = 1.0 / np.where(z > 0, z, 1.0)

    for tri in mesh.faces:
        if np.any(z[tri] <= camera.near):
            continue
        ux, vy, iz = u[tri], v[tri], inv_z[tri]
        area = (ux[1] - ux[0]) * (vy[2] - vy[0]) - (vy[1] - vy[0]) * (ux[2] - ux[0])
        if abs(area) < _DEGENERATE_AREA:
            continue
        x0 = max(int(np.floor(ux.min())), 0)
        x1 = min(int(np.ceil(ux.max())) + 1, w)
        y0 = max(int(np.floor(vy.min())), 0)
        y1 = min(int(np.ceil(vy.max())) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
        l0 = ((ux[2] - ux[1]) * (gy - vy[1]) - (vy[2] - vy[1]) * (gx - ux[1])) / area
        l1 = ((ux[0] - ux[2]) * (gy - vy[2]) - (vy[0] - vy[2]) * (gx - ux[2])) / area
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not np.any(inside):
            continue
        zi = 1.0 / (l0 * iz[0] + l1 * iz[1] + l2 * iz[2])
        tile = depth[y0:y1, x0:x1]
        better = inside & (zi < tile)
        tile[better] = zi[better]
    return depth


def sample_depth(depth: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear depth lookup at continuous pixel coordinates (N, 2).

    Background pixels enter the interpolation as a large finite depth so the
    result (and anything differentiated against it) stays finite.
    """
    h, w = depth.shape
    finite = np.where(np.isfinite(depth), depth, _BACKGROUND_FINITE)
    x = np.clip(np.asarray(uv, dtype=float)[:, 0] - 0.5, 0.0, w - 1.0)
    y = np.clip(np.asarray(uv, dtype=float)[:, 1] - 0.5, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2) if w > 1 else np.zeros(len(x), int)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2) if h > 1 else np.zeros(len(y), int)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = finite[y0, x0] * (1 - fx) + finite[y0, x1] * fx
    bot = finite[y1, x0] * (1 - fx) + finite[y1, x1] * fx
    return top * (1 - fy) + bot * fy


# ---------------------------------------------------------------------------
# Soft visibility
# ---------------------------------------------------------------------------

def soft_visibility(z_mesh, z_curve, params: VisibilityParams = VisibilityParams(),
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Occlusion attenuation V = sigmoid(k * (z_mesh - z_curve + b)).

    Returns (V, dV/dz_curve). A curve resting exactly on the surface sees
    V = sigmoid(k*b), near full visibility at the defaults. Background depth
    (inf) is treated as a large finite distance, giving V ~= 1.
    """
    z_mesh = np.where(np.isfinite(z_mesh), z_mesh, _BACKGROUND_FINITE)
    arg = params.k * (z_mesh - np.asarray(z_curve, dtype=float) + params.b)
    v = np.empty_like(np.asarray(arg, dtype=float))
    pos = arg >= 0
    v[pos] = 1.0 / (1.0 + np.exp(-arg[pos]))
    ex = np.exp(arg[~pos])
    v[~pos] = ex / (1.0 + ex)
    return v, -params.k * v * (1.0 - v)


# ---------------------------------------------------------------------------
# Depth buffer file format
# ---------------------------------------------------------------------------

def save_depth(depth: np.ndarray, path) -> None:
    """Binary float32 buffer with an 8-byte (width, height) LE int32 header."""
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def load_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated depth buffer")
    w, h = struct.unpack("<ii", raw[:8])
    data = np.frombuffer(raw[8:], dtype="<f4")
    if data.size != w * h:
        raise ValueError(f"{path}: depth payload size mismatch")
    return data.reshape(h, w).astype(float)
