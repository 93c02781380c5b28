"""Dynamic topology management for an optimizing wire.

Two mechanisms, both run between optimizer steps on the single authoritative
wire: width-guided reinitialization recycles control points whose clamped
width has collapsed (relocating them inside the initialization volume without
touching the knot vector, so the curve stays one connected spline), and
gradient-driven knot insertion adds capacity to the spans whose supporting
controls accumulated the largest gradients, leaving the sampled geometry
unchanged at the moment of insertion.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .initialize import InitVolume, sample_init_volume
from .spline import (
    DEFAULT_INITIAL_WIDTH,
    DEGREE,
    Wire4D,
    insert_knot,
    unclamp_width,
)


@dataclass(frozen=True)
class PruneReport:
    pruned_indices: tuple[int, ...]
    new_positions: np.ndarray
    reset_width: float


class GradientHistory:
    """Trailing-window accumulator of per-control gradient magnitudes."""

    def __init__(self, window: int = 50):
        if window < 1:
            raise ValueError("window length must be >= 1")
        self.window = window
        self._records: deque[np.ndarray] = deque(maxlen=window)

    def push(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=float)
        if self._records and len(grad) != len(self._records[-1]):
            self._records.clear()
        self._records.append(np.linalg.norm(grad.reshape(len(grad), -1), axis=1))

    def reset(self) -> None:
        self._records.clear()

    def accumulated(self, n_controls: int) -> np.ndarray:
        if not self._records or len(self._records[-1]) != n_controls:
            return np.zeros(n_controls)
        return np.sum(self._records, axis=0)


def detect_prune_set(wire: Wire4D, width_epsilon: float) -> np.ndarray:
    """Indices of controls whose clamped width fell below width_epsilon."""
    if width_epsilon <= 0:
        raise ValueError("width_epsilon must be positive")
    return np.flatnonzero(wire.clamped_widths() < width_epsilon)


def default_width_epsilon(width_clamp: tuple[float, float]) -> float:
    """2% of the clamp range; exact zero never occurs under the smooth clamp."""
    return 0.02 * (width_clamp[1] - width_clamp[0])


def width_guided_reinit(wire: Wire4D, prune, volume: InitVolume, rng_seed: int = 0,
                        reset_width: float = DEFAULT_INITIAL_WIDTH,
                        ) -> tuple[Wire4D, PruneReport]:
    """Re-randomize the spatial coordinates of pruned controls, reset widths.

    Control count and knot vector are untouched, so the wire remains a single
    connected curve. An empty prune set returns the wire unchanged.
    """
    prune = np.asarray(prune, dtype=int)
    if prune.size == 0:
        return wire, PruneReport((), np.zeros((0, 3)), reset_width)
    if prune.min() < 0 or prune.max() >= wire.n_controls or len(set(prune.tolist())) != len(prune):
        raise ValueError("prune indices must be unique and in range")
    positions = sample_init_volume(volume, max(4, len(prune)), rng_seed)[:len(prune)]
    controls = wire.controls.copy()
    controls[prune, :3] = positions
    controls[prune, 3] = unclamp_width(reset_width, *wire.width_clamp)
    report = PruneReport(tuple(int(i) for i in prune), positions, reset_width)
    return wire.with_controls(controls), report


def gradient_knot_refine(wire: Wire4D, history: GradientHistory, insert_count: int,
                         ) -> tuple[Wire4D, list[tuple[int, float]]]:
    """Insert knots at the midpoints of the most gradient-salient spans.

    Span saliency is the maximum accumulated gradient magnitude over its four
    supporting controls; ties break toward the lower span index. Returns the
    refined wire (control count + insert_count, geometry unchanged) and the
    chosen (span index, knot value) pairs.
    """
    if insert_count < 1:
        raise ValueError("insert_count must be >= 1")
    acc = history.accumulated(wire.n_controls)
    idx = wire.span_knot_indices()
    insertable = []
    for row, k in enumerate(idx):
        a, b = wire.knots[k], wire.knots[k + 1]
        mid = 0.5 * (a + b)
        if a < mid < b:
            insertable.append((row, mid, float(np.max(acc[k - DEGREE:k + 1]))))
    if len(insertable) < insert_count:
        raise ValueError(
            f"only {len(insertable)} insertable spans for {insert_count} insertions")
    ranked = sorted(insertable, key=lambda item: (-item[2], item[0]))
    chosen = sorted(ranked[:insert_count], key=lambda item: item[1])
    refined = wire
    for _, mid, _ in chosen:
        refined = insert_knot(refined, mid)
    return refined, [(row, mid) for row, mid, _ in chosen]
