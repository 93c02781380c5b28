"""Differentiable anti-aliased rasterization of variable-width Bezier strokes.

Images are plain (height, width) float64 arrays in row-major order; forward
renders lie in [0, 1] with background 0 and ink 1. Each stroke is adaptively
flattened into capsules (segments with linearly interpolated width), and each
capsule contributes a smooth-step coverage of its signed distance field, so
the forward model is differentiable and the backward pass is analytic; no
edge sampling is involved.

Pixel (i, j) has its center at continuous coordinates (j + 0.5, i + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .projection import StrokeBatch2D, StrokeBatchGrad

_POINT_CAPSULE_EPS = 1e-12


@dataclass(frozen=True)
class RasterSettings:
    """aa_radius and flatten_tolerance are in pixels."""

    aa_radius: float = 1.0
    flatten_tolerance: float = 0.25
    composite_mode: str = "max"

    def __post_init__(self):
        if self.aa_radius <= 0:
            raise ValueError("aa_radius must be positive")
        if self.flatten_tolerance <= 0:
            raise ValueError("flatten_tolerance must be positive")
        if self.composite_mode not in ("max", "over"):
            raise ValueError("composite_mode must be 'max' or 'over'")


def capsule_coverage(pixel_center, a, b, w_a: float, w_b: float,
                     aa_radius: float = 1.0) -> float:
    """Smooth coverage of one capsule at a single pixel center.

    Distance to the segment with linearly interpolated half-width, pushed
    through a cubic smooth step of half-width aa_radius around the rim.
    """
    p = np.asarray(pixel_center, dtype=float).reshape(1, 2)
    cov, *_ = _capsule_forward(p, np.asarray(a, float), np.asarray(b, float),
                               float(w_a), float(w_b), aa_radius)
    return float(cov[0])


def _capsule_forward(p, a, b, w_a, w_b, aa):
    """Vectorized capsule coverage over pixel centers p (N, 2).

    Returns (coverage, s, s_interior, delta, dist, halfwidth, x) so the
    backward pass can reuse them.
    """
    e = b - a
    ee = float(e @ e)
    rel = p - a
    if ee < _POINT_CAPSULE_EPS:
        s = np.full(len(p), 0.5)
        interior = np.zeros(len(p), dtype=bool)
    else:
        s_raw = (rel @ e) / ee
        s = np.clip(s_raw, 0.0, 1.0)
        interior = (s_raw > 0.0) & (s_raw < 1.0)
    delta = rel - s[:, None] * e[None, :]
    dist = np.sqrt(np.sum(delta * delta, axis=1))
    hw = 0.5 * (w_a + s * (w_b - w_a))
    x = np.clip((hw + aa - dist) / (2.0 * aa), 0.0, 1.0)
    cov = x * x * (3.0 - 2.0 * x)
    return cov, s, interior, delta, dist, hw, x


def _capsule_backward(g_cov, p, a, b, w_a, w_b, aa, cache):
    """Gradients of sum(g_cov * coverage) w.r.t. (a, b, w_a, w_b)."""
    cov, s, interior, delta, dist, hw, x = cache
    dx = g_cov * 6.0 * x * (1.0 - x)
    dd = dx * (-1.0 / (2.0 * aa))
    dhw = dx * (1.0 / (2.0 * aa))

    safe = dist > 1e-12
    dir_ = np.zeros_like(delta)
    dir_[safe] = delta[safe] / dist[safe, None]

    da = ((dd * (s - 1.0))[:, None] * dir_).sum(axis=0)
    db = ((-dd * s)[:, None] * dir_).sum(axis=0)
    dw_a = float(np.sum(dhw * 0.5 * (1.0 - s)))
    dw_b = float(np.sum(dhw * 0.5 * s))

    # the half-width also varies with the foot parameter s where it is interior
    e = b - a
    ee = float(e @ e)
    if ee >= _POINT_CAPSULE_EPS and np.any(interior):
        ds = dhw * 0.5 * (w_b - w_a)
        ds = np.where(interior, ds, 0.0)
        rel = p - a
        ds_da = (-e[None, :] - rel + 2.0 * s[:, None] * e[None, :]) / ee
        ds_db = (rel - 2.0 * s[:, None] * e[None, :]) / ee
        da = da + (ds[:, None] * ds_da).sum(axis=0)
        db = db + (ds[:, None] * ds_db).sum(axis=0)
    return da, db, dw_a, dw_b


# ---------------------------------------------------------------------------
# Stroke flattening
# ---------------------------------------------------------------------------

def _bezier_at(q, t):
    u = 1.0 - t
    return (u**3 * q[0] + 3 * u * u * t * q[1] + 3 * u * t * t * q[2] + t**3 * q[3])


def _flatten_intervals(q, tol, t0=0.0, t1=1.0, depth=0):
    """Parameter intervals whose control polygon deviates < tol from the chord."""
    p0, p3 = _bezier_at(q, t0), _bezier_at(q, t1)
    p1 = _bezier_at(q, t0 + (t1 - t0) / 3.0)
    p2 = _bezier_at(q, t0 + 2.0 * (t1 - t0) / 3.0)
    chord = p3 - p0
    cl = np.linalg.norm(chord)
    if cl < 1e-12:
        dev = max(np.linalg.norm(p1 - p0), np.linalg.norm(p2 - p0))
    else:
        n = np.array([-chord[1], chord[0]]) / cl
        dev = max(abs((p1 - p0) @ n), abs((p2 - p0) @ n))
    if dev < tol or depth >= 10:
        return [(t0, t1)]
    mid = 0.5 * (t0 + t1)
    return (_flatten_intervals(q, tol, t0, mid, depth + 1)
            + _flatten_intervals(q, tol, mid, t1, depth + 1))


def _capsules_of_batch(batch: StrokeBatch2D, settings: RasterSettings):
    """Flatten all strokes; yields (stroke index, t0, t1, a, b, w_a, w_b)."""
    out = []
    for k in range(len(batch)):
        q = batch.points[k]
        w0, w1 = batch.widths[k]
        for t0, t1 in _flatten_intervals(q, settings.flatten_tolerance):
            a = _bezier_at(q, t0)
            b = _bezier_at(q, t1)
            w_a = w0 + t0 * (w1 - w0)
            w_b = w0 + t1 * (w1 - w0)
            out.append((k, t0, t1, a, b, w_a, w_b))
    return out


def _capsule_window(a, b, w_a, w_b, aa, width, height):
    """Integer pixel window touched by a capsule, or None if off-screen."""
    r = 0.5 * max(w_a, w_b) + aa + 1.0
    x0 = int(np.floor(min(a[0], b[0]) - r))
    x1 = int(np.ceil(max(a[0], b[0]) + r))
    y0 = int(np.floor(min(a[1], b[1]) - r))
    y1 = int(np.ceil(max(a[1], b[1]) + r))
    x0, x1 = max(x0, 0), min(x1, width)
    y0, y1 = max(y0, 0), min(y1, height)
    if x0 >= x1 or y0 >= y1:
        return None
    return x0, x1, y0, y1


def _window_centers(x0, x1, y0, y1):
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


# ---------------------------------------------------------------------------
# Forward and backward rasterization
# ---------------------------------------------------------------------------

def rasterize(batch: StrokeBatch2D, width: int, height: int,
              settings: RasterSettings = RasterSettings()) -> np.ndarray:
    """Render strokes into a (height, width) ink image in [0, 1]."""
    image = np.zeros((height, width))
    if len(batch) == 0:
        return image
    capsules = _capsules_of_batch(batch, settings)
    if settings.composite_mode == "over":
        transparency = np.ones((height, width))
    for _, _, _, a, b, w_a, w_b in capsules:
        win = _capsule_window(a, b, w_a, w_b, settings.aa_radius, width, height)
        if win is None:
            continue
        x0, x1, y0, y1 = win
        p = _window_centers(*win)
        cov = _capsule_forward(p, a, b, w_a, w_b, settings.aa_radius)[0]
        tile = cov.reshape(y1 - y0, x1 - x0)
        if settings.composite_mode == "max":
            region = image[y0:y1, x0:x1]
            np.maximum(region, tile, out=region)
        else:
            transparency[y0:y1, x0:x1] *= 1.0 - tile
    if settings.composite_mode == "over":
        image = 1.0 - transparency
    return image


def _winner_map(batch, width, height, settings, capsules):
    """Per-pixel argmax capsule id (-1 for background), lowest index wins ties."""
    best = np.zeros((height, width))
    winner = np.full((height, width), -1, dtype=np.int64)
    for idx, (_, _, _, a, b, w_a, w_b) in enumerate(capsules):
        win = _capsule_window(a, b, w_a, w_b, settings.aa_radius, width, height)
        if win is None:
            continue
        x0, x1, y0, y1 = win
        p = _window_centers(*win)
        cov = _capsule_forward(p, a, b, w_a, w_b, settings.aa_radius)[0]
        tile = cov.reshape(y1 - y0, x1 - x0)
        region = best[y0:y1, x0:x1]
        improved = tile > region
        winner[y0:y1, x0:x1][improved] = idx
        np.maximum(region, tile, out=region)
    return best, winner


def _bernstein_row(t: float) -> np.ndarray:
    u = 1.0 - t
    return np.array([u**3, 3 * u * u * t, 3 * u * t * t, t**3])


def rasterize_backward(batch: StrokeBatch2D, width: int, height: int,
                       settings: RasterSettings, pixel_grad: np.ndarray,
                       ) -> StrokeBatchGrad:
    """Exact gradients of sum(pixel_grad * rasterize(batch)) per stroke.

    Under max compositing each pixel's gradient is routed to the argmax
    capsule (ties to the lowest index). Under over compositing, gradients use
    the product rule; pixels fully saturated by a capsule contribute zero.
    """
    pixel_grad = np.asarray(pixel_grad, dtype=float)
    if pixel_grad.shape != (height, width):
        raise ValueError(f"pixel_grad must have shape ({height}, {width})")
    d_points = np.zeros_like(batch.points)
    d_widths = np.zeros_like(batch.widths)
    if len(batch) == 0:
        return StrokeBatchGrad(batch, d_points, d_widths)
    capsules = _capsules_of_batch(batch, settings)

    if settings.composite_mode == "max":
        _, winner = _winner_map(batch, width, height, settings, capsules)
    else:
        transparency = np.ones((height, width))
        for _, _, _, a, b, w_a, w_b in capsules:
            win = _capsule_window(a, b, w_a, w_b, settings.aa_radius, width, height)
            if win is None:
                continue
            x0, x1, y0, y1 = win
            p = _window_centers(*win)
            cov = _capsule_forward(p, a, b, w_a, w_b, settings.aa_radius)[0]
            transparency[y0:y1, x0:x1] *= 1.0 - cov.reshape(y1 - y0, x1 - x0)

    for idx, (k, t0, t1, a, b, w_a, w_b) in enumerate(capsules):
        win = _capsule_window(a, b, w_a, w_b, settings.aa_radius, width, height)
        if win is None:
            continue
        x0, x1, y0, y1 = win
        g_tile = pixel_grad[y0:y1, x0:x1].reshape(-1)
        if settings.composite_mode == "max":
            sel = (winner[y0:y1, x0:x1].reshape(-1) == idx) & (g_tile != 0.0)
        else:
            sel = g_tile != 0.0
        if not np.any(sel):
            continue
        p = _window_centers(*win)[sel]
        cache = _capsule_forward(p, a, b, w_a, w_b, settings.aa_radius)
        g = g_tile[sel]
        if settings.composite_mode == "over":
            cov = cache[0]
            trans = transparency[y0:y1, x0:x1].reshape(-1)[sel]
            rest = np.zeros_like(cov)
            open_ = 1.0 - cov > 1e-12
            rest[open_] = trans[open_] / (1.0 - cov[open_])
            g = g * rest
        da, db, dw_a, dw_b = _capsule_backward(
            g, p, a, b, w_a, w_b, settings.aa_radius, cache)
        bern0 = _bernstein_row(t0)
        bern1 = _bernstein_row(t1)
        d_points[k] += bern0[:, None] * da[None, :] + bern1[:, None] * db[None, :]
        d_widths[k, 0] += (1.0 - t0) * dw_a + (1.0 - t1) * dw_b
        d_widths[k, 1] += t0 * dw_a + t1 * dw_b
    return StrokeBatchGrad(batch, d_points, d_widths)


# ---------------------------------------------------------------------------
# Image export
# ---------------------------------------------------------------------------

def save_render_png(image: np.ndarray, path) -> None:
    """8-bit grayscale PNG, ink mapped to black on white."""
    display = np.round(255.0 * (1.0 - np.clip(image, 0.0, 1.0))).astype(np.uint8)
    Image.fromarray(display, mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    """Grayscale PNG to a float mask in [0, 1]; dark pixels are foreground."""
    img = np.asarray(Image.open(path).convert("L"), dtype=float) / 255.0
    return 1.0 - img
