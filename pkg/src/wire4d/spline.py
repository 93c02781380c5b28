"""Clamped cubic B-spline algebra for the 4D wire primitive.

A wire is a single cubic B-spline whose control points carry spatial
coordinates (x, y, z) plus a raw width parameter. Raw widths are mapped into
the configured [w_min, w_max] interval through a smooth sigmoid clamp whenever
a scene-space width is needed; this keeps width gradients nonzero as widths
approach zero, which the pruning logic relies on.

Knot vectors are clamped (end knots repeated 4 times) and normalized to the
domain [0, 1]. Interior knots are uniform at construction but may lose
uniformity through knot insertion; all routines here handle that case.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

DEGREE = 3
DEFAULT_WIDTH_CLAMP = (0.0, 0.05)
DEFAULT_INITIAL_WIDTH = 0.01

WIRE_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Width clamping
# ---------------------------------------------------------------------------

def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clamp_width(raw, w_min: float, w_max: float):
    """Map raw width parameters smoothly into [w_min, w_max]."""
    return w_min + (w_max - w_min) * _sigmoid(raw)


def clamp_width_grad(raw, w_min: float, w_max: float):
    """Derivative of clamp_width with respect to the raw parameter."""
    s = _sigmoid(raw)
    return (w_max - w_min) * s * (1.0 - s)


def unclamp_width(w, w_min: float, w_max: float):
    """Inverse of clamp_width; widths are nudged inside the open interval."""
    span = w_max - w_min
    p = (np.asarray(w, dtype=float) - w_min) / span
    p = np.clip(p, 1e-9, 1.0 - 1e-9)
    return np.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# Knot vectors and the wire type
# ---------------------------------------------------------------------------

def make_clamped_knots(n_controls: int) -> np.ndarray:
    """Clamped knot vector on [0, 1] with uniform interior spacing."""
    if n_controls < DEGREE + 1:
        raise ValueError(f"need at least {DEGREE + 1} control points, got {n_controls}")
    inner = np.linspace(0.0, 1.0, n_controls - DEGREE + 1)
    return np.concatenate([np.zeros(DEGREE), inner, np.ones(DEGREE)])


def _validate_knots(knots: np.ndarray, n_controls: int) -> None:
    if len(knots) != n_controls + DEGREE + 1:
        raise ValueError("knot count inconsistent with control count")
    if np.any(np.diff(knots) < 0):
        raise ValueError("knots must be non-decreasing")
    rep = DEGREE + 1
    if np.any(knots[:rep] != knots[0]) or np.any(knots[-rep:] != knots[-1]):
        raise ValueError("knot vector must be clamped (end multiplicity 4)")


@dataclass(frozen=True)
class Wire4D:
    """A single cubic B-spline in R^4 with a raw width channel.

    controls: (n+1, 4) array of [x, y, z, w_raw] rows.
    knots: clamped knot vector of length n + 5.
    width_clamp: (w_min, w_max) interval the raw widths are mapped into.
    """

    controls: np.ndarray
    knots: np.ndarray
    width_clamp: tuple[float, float] = DEFAULT_WIDTH_CLAMP

    def __post_init__(self):
        controls = np.array(self.controls, dtype=float, order="C")
        knots = np.array(self.knots, dtype=float, order="C")
        if controls.ndim != 2 or controls.shape[1] != 4:
            raise ValueError("controls must have shape (n+1, 4)")
        if controls.shape[0] < DEGREE + 1:
            raise ValueError("need at least 4 control points")
        if not np.all(np.isfinite(controls)):
            raise ValueError("control points must be finite")
        _validate_knots(knots, controls.shape[0])
        w_min, w_max = self.width_clamp
        if not (0.0 <= w_min < w_max):
            raise ValueError("width clamp must satisfy 0 <= w_min < w_max")
        controls.flags.writeable = False
        knots.flags.writeable = False
        object.__setattr__(self, "controls", controls)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "width_clamp", (float(w_min), float(w_max)))

    @property
    def n_controls(self) -> int:
        return self.controls.shape[0]

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots[DEGREE]), float(self.knots[-DEGREE - 1])

    def span_knot_indices(self) -> np.ndarray:
        """Knot indices k of the non-degenerate spans [knots[k], knots[k+1])."""
        lo, hi = DEGREE, self.n_controls
        idx = np.arange(lo, hi)
        return idx[self.knots[idx + 1] > self.knots[idx]]

    @property
    def n_spans(self) -> int:
        return len(self.span_knot_indices())

    def clamped_widths(self) -> np.ndarray:
        """Per-control widths after the smooth clamp, in scene units."""
        return clamp_width(self.controls[:, 3], *self.width_clamp)

    def with_controls(self, controls: np.ndarray) -> "Wire4D":
        return Wire4D(controls, self.knots, self.width_clamp)


def greville_abscissae(knots: np.ndarray) -> np.ndarray:
    """Parameter values at which controls reproduce linear functions."""
    n_ctrl = len(knots) - DEGREE - 1
    return np.array([knots[i + 1: i + DEGREE + 1].mean() for i in range(n_ctrl)])


def straight_wire(start, end, n_controls: int = 4,
                  width: float = DEFAULT_INITIAL_WIDTH,
                  width_clamp: tuple[float, float] = DEFAULT_WIDTH_CLAMP) -> Wire4D:
    """Exact straight line from start to end, constant clamped width."""
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    knots = make_clamped_knots(n_controls)
    g = greville_abscissae(knots)
    controls = np.empty((n_controls, 4))
    controls[:, :3] = start[None, :] + g[:, None] * (end - start)[None, :]
    controls[:, 3] = unclamp_width(width, *width_clamp)
    return Wire4D(controls, knots, width_clamp)


# ---------------------------------------------------------------------------
# Evaluation (Cox-de Boor basis, vectorized over parameters)
# ---------------------------------------------------------------------------

def find_spans(knots: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Knot-span index for each parameter; right-continuous, clamped at 1."""
    n_ctrl = len(knots) - DEGREE - 1
    spans = np.searchsorted(knots, ts, side="right") - 1
    return np.clip(spans, DEGREE, n_ctrl - 1)


def basis_derivatives(knots: np.ndarray, spans: np.ndarray, ts: np.ndarray,
                      order: int) -> np.ndarray:
    """Nonzero cubic basis functions and derivatives, batched over parameters.

    Returns shape (order+1, B, 4): entry [k, b, j] is the k-th derivative of
    basis function (spans[b] - 3 + j) evaluated at ts[b]. Evaluation is
    one-sided with respect to the given span, so passing the left span index
    at an interior knot yields the limit from below.
    """
    p = DEGREE
    nb = len(ts)
    ndu = np.empty((nb, p + 1, p + 1))
    ndu[:, 0, 0] = 1.0
    left = np.empty((nb, p + 1))
    right = np.empty((nb, p + 1))
    for j in range(1, p + 1):
        left[:, j] = ts - knots[spans + 1 - j]
        right[:, j] = knots[spans + j] - ts
        saved = np.zeros(nb)
        for r in range(j):
            ndu[:, j, r] = right[:, r + 1] + left[:, j - r]
            temp = ndu[:, r, j - 1] / ndu[:, j, r]
            ndu[:, r, j] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        ndu[:, j, j] = saved
    ders = np.zeros((order + 1, nb, p + 1))
    ders[0] = ndu[:, :, p]
    if order == 0:
        return ders
    a = np.empty((nb, 2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[:, 0, 0] = 1.0
        for k in range(1, order + 1):
            d = np.zeros(nb)
            rk = r - k
            pk = p - k
            if r >= k:
                a[:, s2, 0] = a[:, s1, 0] / ndu[:, pk + 1, rk]
                d = a[:, s2, 0] * ndu[:, rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[:, s2, j] = (a[:, s1, j] - a[:, s1, j - 1]) / ndu[:, pk + 1, rk + j]
                d = d + a[:, s2, j] * ndu[:, rk + j, pk]
            if r <= pk:
                a[:, s2, k] = -a[:, s1, k - 1] / ndu[:, pk + 1, r]
                d = d + a[:, s2, k] * ndu[:, r, pk]
            ders[k, :, r] = d
            s1, s2 = s2, s1
    fac = float(p)
    for k in range(1, order + 1):
        ders[k] *= fac
        fac *= p - k
    return ders


def evaluate_many(wire: Wire4D, ts, order: int = 0) -> np.ndarray:
    """Evaluate the curve (or a derivative) at many parameters; shape (B, 4)."""
    if not 0 <= order <= DEGREE:
        raise ValueError("derivative order must be in 0..3")
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    t0, t1 = wire.domain
    if np.any(ts < t0) or np.any(ts > t1):
        raise ValueError(f"parameter outside domain [{t0}, {t1}]")
    spans = find_spans(wire.knots, ts)
    ders = basis_derivatives(wire.knots, spans, ts, order)
    local = wire.controls[spans[:, None] - DEGREE + np.arange(DEGREE + 1)[None, :]]
    return np.einsum("bj,bjc->bc", ders[order], local)


def evaluate(wire: Wire4D, t: float, order: int = 0) -> np.ndarray:
    """Evaluate the curve (order 0) or its derivative at a single parameter."""
    return evaluate_many(wire, [t], order)[0]


def width_profile(wire: Wire4D, ts) -> np.ndarray:
    """Clamped scene-space width along the curve."""
    return clamp_width(evaluate_many(wire, ts)[:, 3], *wire.width_clamp)


# ---------------------------------------------------------------------------
# Jerk energy (integral of squared third derivative)
# ---------------------------------------------------------------------------

@lru_cache(maxsize=128)
def _third_derivative_operator(knots_key: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Linear map controls -> per-span third-derivative value (constant per span)."""
    knots = np.array(knots_key)
    n_ctrl = len(knots) - DEGREE - 1
    op = np.eye(n_ctrl)
    kn = knots
    for deg in (3, 2, 1):
        c = op.shape[0]
        denom = kn[deg + 1: deg + c] - kn[1:c]
        new = np.zeros((c - 1, n_ctrl))
        nz = denom > 0
        new[nz] = deg * (op[1:][nz] - op[:-1][nz]) / denom[nz, None]
        op = new
        kn = kn[1:-1]
    return op, kn


def jerk_energy(wire: Wire4D) -> tuple[float, np.ndarray]:
    """Integral of ||C'''(t)||^2 over the domain, all four channels.

    The third derivative of a cubic spline is constant per knot span, so the
    integral has the closed form sum_j len_j * ||C'''_j||^2. Returns the
    energy and its exact gradient with respect to the raw controls.
    """
    op, kn = _third_derivative_operator(tuple(wire.knots))
    vals = op @ wire.controls
    lengths = np.diff(kn)
    energy = float(np.sum(lengths[:, None] * vals * vals))
    grad = 2.0 * (op.T @ (lengths[:, None] * vals))
    return energy, grad


# ---------------------------------------------------------------------------
# Bezier conversion and dyadic subdivision
# ---------------------------------------------------------------------------

# De Casteljau halves of a cubic segment.
_SPLIT_LEFT = np.array([
    [1.0, 0.0, 0.0, 0.0],
    [0.5, 0.5, 0.0, 0.0],
    [0.25, 0.5, 0.25, 0.0],
    [0.125, 0.375, 0.375, 0.125],
])
_SPLIT_RIGHT = np.array([
    [0.125, 0.375, 0.375, 0.125],
    [0.0, 0.25, 0.5, 0.25],
    [0.0, 0.0, 0.5, 0.5],
    [0.0, 0.0, 0.0, 1.0],
])


def _check_power_of_two(s: int) -> None:
    if s < 1 or (s & (s - 1)) != 0:
        raise ValueError(f"segments per span must be a power of two, got {s}")


@lru_cache(maxsize=32)
def split_matrix(s: int) -> np.ndarray:
    """(4s, 4) operator splitting one cubic Bezier into s equal dyadic pieces."""
    _check_power_of_two(s)
    if s == 1:
        return np.eye(4)
    half = split_matrix(s // 2)
    out = np.vstack([half @ _SPLIT_LEFT, half @ _SPLIT_RIGHT])
    out.flags.writeable = False
    return out


@lru_cache(maxsize=128)
def _span_conversion_blocks(knots_key: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Per-span 4x4 blocks mapping the 4 supporting controls to Bezier points.

    Built from endpoint values and endpoint derivatives of the cubic piece:
    b0 = C(a), b1 = C(a) + h/3 C'(a), b2 = C(b) - h/3 C'(b), b3 = C(b).
    Exact for any clamped cubic knot vector, uniform or not.
    """
    knots = np.array(knots_key)
    n_ctrl = len(knots) - DEGREE - 1
    idx = np.arange(DEGREE, n_ctrl)
    idx = idx[knots[idx + 1] > knots[idx]]
    blocks = np.empty((len(idx), 4, 4))
    for row, k in enumerate(idx):
        a, b = knots[k], knots[k + 1]
        h = b - a
        span_arr = np.array([k, k])
        ders = basis_derivatives(knots, span_arr, np.array([a, b]), 1)
        n0a, n0b = ders[0, 0], ders[0, 1]
        n1a, n1b = ders[1, 0], ders[1, 1]
        blocks[row, 0] = n0a
        blocks[row, 1] = n0a + (h / 3.0) * n1a
        blocks[row, 2] = n0b - (h / 3.0) * n1b
        blocks[row, 3] = n0b
    blocks.flags.writeable = False
    idx.flags.writeable = False
    return idx, blocks


def span_conversion_blocks(wire: Wire4D) -> tuple[np.ndarray, np.ndarray]:
    """(span knot indices, (n_spans, 4, 4) local conversion blocks)."""
    return _span_conversion_blocks(tuple(wire.knots))


@lru_cache(maxsize=64)
def dense_conversion_matrix(control_count: int, segments_per_span: int) -> np.ndarray:
    """Global (4*s*n_spans, control_count) matrix: controls -> dense Bezier points.

    Composition of the per-span basis conversion with the dyadic subdivision
    stack; assumes the default clamped uniform knot vector for control_count.
    """
    if control_count < DEGREE + 1:
        raise ValueError("need at least 4 control points")
    _check_power_of_two(segments_per_span)
    knots = make_clamped_knots(control_count)
    idx, blocks = _span_conversion_blocks(tuple(knots))
    sub = split_matrix(segments_per_span)
    rows_per_span = 4 * segments_per_span
    out = np.zeros((rows_per_span * len(idx), control_count))
    for row, k in enumerate(idx):
        local = sub @ blocks[row]
        out[row * rows_per_span:(row + 1) * rows_per_span, k - DEGREE:k + 1] = local
    out.flags.writeable = False
    return out


def local_controls(wire: Wire4D) -> tuple[np.ndarray, np.ndarray]:
    """(span knot indices, (n_spans, 4, 4) supporting controls per span)."""
    idx, _ = span_conversion_blocks(wire)
    gather = idx[:, None] - DEGREE + np.arange(DEGREE + 1)[None, :]
    return idx, wire.controls[gather]


def dense_bezier(wire: Wire4D, counts) -> tuple[np.ndarray, np.ndarray]:
    """Dense 4D Bezier segments with per-span subdivision counts.

    counts: one power-of-two count per non-degenerate span.
    Returns (segments, provenance): segments has shape (S, 4, 4) with axis 1
    the Bezier points and axis 2 the (x, y, z, w_raw) channels; provenance has
    shape (S, 2) rows (span index, subdivision index).
    """
    idx, blocks = span_conversion_blocks(wire)
    counts = np.asarray(counts, dtype=int)
    if len(counts) != len(idx):
        raise ValueError(f"expected {len(idx)} per-span counts, got {len(counts)}")
    _, local = local_controls(wire)
    bez = np.einsum("sij,sjc->sic", blocks, local)
    total = int(counts.sum())
    segments = np.empty((total, 4, 4))
    provenance = np.empty((total, 2), dtype=int)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    for s in np.unique(counts):
        s = int(s)
        _check_power_of_two(s)
        rows = np.flatnonzero(counts == s)
        dense = np.einsum("ij,sjc->sic", split_matrix(s), bez[rows])
        dense = dense.reshape(len(rows), s, 4, 4)
        for pos, row in enumerate(rows):
            o = offsets[row]
            segments[o:o + s] = dense[pos]
            provenance[o:o + s, 0] = row
            provenance[o:o + s, 1] = np.arange(s)
    return segments, provenance


def to_bezier_segments(wire: Wire4D, segments_per_span: int = 1) -> np.ndarray:
    """Convert the wire to dense 4D Bezier segments, uniform count per span."""
    counts = np.full(wire.n_spans, segments_per_span, dtype=int)
    segments, _ = dense_bezier(wire, counts)
    return segments


# ---------------------------------------------------------------------------
# Knot insertion (Boehm)
# ---------------------------------------------------------------------------

def insert_knot(wire: Wire4D, u_hat: float) -> Wire4D:
    """Insert one knot; the curve is geometrically unchanged.

    Rejects insertions at the domain ends and at knots that already have (or
    would exceed) full interior multiplicity 3.
    """
    t0, t1 = wire.domain
    if not (t0 < u_hat < t1):
        raise ValueError(f"knot {u_hat} not strictly inside domain ({t0}, {t1})")
    knots = wire.knots
    mult = int(np.count_nonzero(knots == u_hat))
    if mult >= DEGREE:
        raise ValueError(f"knot {u_hat} already has full multiplicity {mult}")
    k = int(find_spans(knots, np.array([u_hat]))[0])
    old = wire.controls
    n_new = wire.n_controls + 1
    new = np.empty((n_new, 4))
    new[:k - DEGREE + 1] = old[:k - DEGREE + 1]
    for i in range(k - DEGREE + 1, k + 1):
        alpha = (u_hat - knots[i]) / (knots[i + DEGREE] - knots[i])
        new[i] = (1.0 - alpha) * old[i - 1] + alpha * old[i]
    new[k + 1:] = old[k:]
    new_knots = np.insert(knots, k + 1, u_hat)
    return Wire4D(new, new_knots, wire.width_clamp)


# ---------------------------------------------------------------------------
# Polyline fitting
# ---------------------------------------------------------------------------

def _resample_polyline(pts: np.ndarray, m: int) -> np.ndarray:
    """Arc-length-uniform linear resampling of a polyline (all channels)."""
    seg = np.linalg.norm(np.diff(pts[:, :3], axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, cum[-1], m)
    out = np.empty((m, pts.shape[1]))
    for c in range(pts.shape[1]):
        out[:, c] = np.interp(targets, cum, pts[:, c])
    return out


def fit_to_polyline(points, control_count: int,
                    initial_width: float = DEFAULT_INITIAL_WIDTH,
                    width_clamp: tuple[float, float] = DEFAULT_WIDTH_CLAMP,
                    smoothing: float = 1e-2) -> tuple[Wire4D, float]:
    """Least-squares wire through an ordered point sequence.

    Chord-length parameterization with both endpoints interpolated exactly.
    R^3 input gets a uniform clamped width of initial_width; R^4 input has its
    width column fitted in clamped space and stored via the inverse clamp.
    Returns (wire, rms) where rms is the spatial fit residual.

    `smoothing` weights a tiny jerk penalty relative to the data term. It
    keeps the solve well posed when chord parameters cluster (more than four
    points in one knot span, or empty spans); configurations with zero jerk
    (straight lines) and well-sampled smooth curves are fitted unbiased.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] not in (3, 4):
        raise ValueError("points must be an (n, 3) or (n, 4) array")
    if len(pts) < 2:
        raise ValueError("need at least 2 points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    if control_count < DEGREE + 1:
        raise ValueError("need at least 4 control points")
    total = np.linalg.norm(np.diff(pts[:, :3], axis=0), axis=1).sum()
    if total <= 0.0:
        raise ValueError("degenerate polyline: all points identical")
    if len(pts) < control_count:
        pts = _resample_polyline(pts, 4 * control_count)

    has_width = pts.shape[1] == 4
    xyz = pts[:, :3]
    chord = np.linalg.norm(np.diff(xyz, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(chord)])
    s /= s[-1]

    knots = make_clamped_knots(control_count)
    spans = find_spans(knots, s)
    ders = basis_derivatives(knots, spans, s, 0)
    basis = np.zeros((len(s), control_count))
    cols = spans[:, None] - DEGREE + np.arange(DEGREE + 1)[None, :]
    np.put_along_axis(basis, cols, ders[0], axis=1)

    jerk_op, jerk_knots = _third_derivative_operator(tuple(knots))
    jerk_op = np.sqrt(np.diff(jerk_knots))[:, None] * jerk_op
    lam = smoothing / max(np.linalg.norm(jerk_op, 2), 1e-12)

    data = pts if has_width else xyz
    system = np.vstack([basis[:, 1:-1], lam * jerk_op[:, 1:-1]])
    target_data = (data
                   - basis[:, [0]] * data[0][None, :]
                   - basis[:, [-1]] * data[-1][None, :])
    target_reg = -lam * (jerk_op[:, [0]] * data[0][None, :]
                         + jerk_op[:, [-1]] * data[-1][None, :])
    interior, *_ = np.linalg.lstsq(system, np.vstack([target_data, target_reg]),
                                   rcond=None)
    fitted = np.vstack([data[0], interior, data[-1]])

    controls = np.empty((control_count, 4))
    controls[:, :3] = fitted[:, :3]
    if has_width:
        controls[:, 3] = unclamp_width(fitted[:, 3], *width_clamp)
    else:
        controls[:, 3] = unclamp_width(initial_width, *width_clamp)

    residual = basis @ fitted[:, :3] - xyz
    rms = float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))
    return Wire4D(controls, knots, width_clamp), rms


# ---------------------------------------------------------------------------
# Wire file format (versioned JSON)
# ---------------------------------------------------------------------------

def wire_to_dict(wire: Wire4D) -> dict:
    return {
        "version": WIRE_FORMAT_VERSION,
        "degree": DEGREE,
        "knots": wire.knots.tolist(),
        "controls": wire.controls.tolist(),
        "width_clamp": list(wire.width_clamp),
    }


def wire_from_dict(doc: dict) -> Wire4D:
    if doc.get("version") != WIRE_FORMAT_VERSION:
        raise ValueError(f"unsupported wire file version: {doc.get('version')!r}")
    if doc.get("degree") != DEGREE:
        raise ValueError(f"unsupported degree: {doc.get('degree')!r}")
    return Wire4D(
        np.array(doc["controls"], dtype=float),
        np.array(doc["knots"], dtype=float),
        tuple(doc["width_clamp"]),
    )


def save_wire(wire: Wire4D, path) -> None:
    Path(path).write_text(json.dumps(wire_to_dict(wire)) + "\n")


def load_wire(path) -> Wire4D:
    return wire_from_dict(json.loads(Path(path).read_text()))
