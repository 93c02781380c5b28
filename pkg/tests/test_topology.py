import numpy as np
import pytest

from wire4d.initialize import InitVolume
from wire4d.spline import evaluate_many, unclamp_width
from wire4d.topology import (
    GradientHistory,
    PruneReport,
    default_width_epsilon,
    detect_prune_set,
    gradient_knot_refine,
    width_guided_reinit,
)

from conftest import random_wire


SPHERE = InitVolume("sphere", radius=1.0)


def wire_with_widths(widths_scene, clamp=(0.0, 1.0)):
    rng = np.random.default_rng(0)
    wire = random_wire(rng, n_controls=len(widths_scene), width_clamp=clamp)
    controls = wire.controls.copy()
    controls[:, 3] = unclamp_width(np.asarray(widths_scene), *clamp)
    return wire.with_controls(controls)


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------

def test_detect_prune_threshold():
    wire = wire_with_widths([0.5, 0.0001, 0.3, 0.2])
    assert list(detect_prune_set(wire, 0.01)) == [1]


def test_detect_prune_empty_and_full():
    wire = wire_with_widths([0.5, 0.4, 0.3, 0.2])
    assert len(detect_prune_set(wire, 0.01)) == 0
    assert list(detect_prune_set(wire, 0.9)) == [0, 1, 2, 3]


def test_detect_prune_monotone_in_epsilon():
    rng = np.random.default_rng(4)
    wire = random_wire(rng, n_controls=12)
    sets = [set(detect_prune_set(wire, eps).tolist())
            for eps in (0.001, 0.005, 0.01, 0.02, 0.04)]
    for small, big in zip(sets[:-1], sets[1:]):
        assert small.issubset(big)


def test_default_width_epsilon():
    assert default_width_epsilon((0.0, 0.05)) == pytest.approx(0.001)


# ---------------------------------------------------------------------------
# Reinitialization
# ---------------------------------------------------------------------------

def test_reinit_empty_prune_is_identity():
    wire = wire_with_widths([0.5, 0.4, 0.3, 0.2])
    out, report = width_guided_reinit(wire, np.array([], dtype=int), SPHERE, rng_seed=1)
    assert out is wire
    assert report.pruned_indices == ()


def test_reinit_local_and_preserves_structure():
    wire = wire_with_widths([0.5, 0.0001, 0.3, 0.2, 0.4, 0.6])
    out, report = width_guided_reinit(wire, [1], SPHERE, rng_seed=7, reset_width=0.25)
    assert out.n_controls == wire.n_controls
    assert np.array_equal(out.knots, wire.knots)
    assert report.pruned_indices == (1,)
    # untouched controls identical
    untouched = [0, 2, 3, 4, 5]
    assert np.array_equal(out.controls[untouched], wire.controls[untouched])
    assert np.linalg.norm(out.controls[1, :3]) <= 1.0
    assert out.clamped_widths()[1] == pytest.approx(0.25, abs=1e-12)


def test_reinit_deterministic_under_seed():
    wire = wire_with_widths([0.5, 0.0001, 0.3, 0.0002, 0.4, 0.6])
    a, _ = width_guided_reinit(wire, [1, 3], SPHERE, rng_seed=42)
    b, _ = width_guided_reinit(wire, [1, 3], SPHERE, rng_seed=42)
    assert np.array_equal(a.controls, b.controls)


def test_reinit_rejects_bad_indices():
    wire = wire_with_widths([0.5, 0.4, 0.3, 0.2])
    with pytest.raises(ValueError):
        width_guided_reinit(wire, [9], SPHERE)
    with pytest.raises(ValueError):
        width_guided_reinit(wire, [1, 1], SPHERE)


# ---------------------------------------------------------------------------
# Gradient history
# ---------------------------------------------------------------------------

def test_history_accumulates_norms():
    h = GradientHistory(window=3)
    g = np.zeros((5, 4))
    g[2] = [3.0, 4.0, 0.0, 0.0]
    h.push(g)
    h.push(g)
    acc = h.accumulated(5)
    assert acc[2] == pytest.approx(10.0)
    assert acc[0] == 0.0


def test_history_window_drops_old_records():
    h = GradientHistory(window=2)
    for scale in (1.0, 2.0, 4.0):
        g = np.ones((4, 4)) * scale
        h.push(g)
    acc = h.accumulated(4)
    assert acc[0] == pytest.approx((2.0 + 4.0) * 2.0)  # norm of ones(4)*s is 2s


def test_history_resets_on_size_change():
    h = GradientHistory(window=4)
    h.push(np.ones((4, 4)))
    h.push(np.ones((5, 4)))
    assert h.accumulated(5)[0] == pytest.approx(2.0)
    assert np.all(h.accumulated(4) == 0.0)


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------

def test_refine_uniform_history_uses_lowest_span():
    rng = np.random.default_rng(8)
    wire = random_wire(rng, n_controls=9)
    h = GradientHistory()
    h.push(np.ones((9, 4)))
    refined, inserted = gradient_knot_refine(wire, h, 1)
    assert refined.n_controls == 10
    assert inserted[0][0] == 0  # tie-break toward the lowest span index


def test_refine_targets_peak_gradient_span():
    rng = np.random.default_rng(8)
    wire = random_wire(rng, n_controls=9)  # spans 0..5
    h = GradientHistory()
    g = np.zeros((9, 4))
    g[6] = 10.0  # supports spans 3..6 -> span 3 is the lowest-index max
    h.push(g)
    refined, inserted = gradient_knot_refine(wire, h, 1)
    assert inserted[0][0] == 3


def test_refine_preserves_geometry_and_count():
    rng = np.random.default_rng(12)
    wire = random_wire(rng, n_controls=10)
    h = GradientHistory()
    h.push(np.abs(rng.normal(size=(10, 4))))
    refined, inserted = gradient_knot_refine(wire, h, 3)
    assert refined.n_controls == wire.n_controls + 3
    assert len(inserted) == 3
    assert len({row for row, _ in inserted}) == 3  # distinct spans
    ts = np.linspace(0, 1, 200)
    dev = np.linalg.norm(
        evaluate_many(wire, ts) - evaluate_many(refined, ts), axis=1)
    assert np.max(dev) < 1e-9


def test_refine_rejects_when_not_enough_spans():
    rng = np.random.default_rng(1)
    wire = random_wire(rng, n_controls=5)  # 2 spans
    h = GradientHistory()
    h.push(np.ones((5, 4)))
    with pytest.raises(ValueError):
        gradient_knot_refine(wire, h, 5)


def test_refined_wire_keeps_c2(rng):
    from wire4d.spline import to_bezier_segments
    wire = random_wire(rng, n_controls=9)
    h = GradientHistory()
    h.push(np.abs(rng.normal(size=(9, 4))))
    refined, _ = gradient_knot_refine(wire, h, 2)
    segments = to_bezier_segments(refined, 1)
    idx = refined.span_knot_indices()
    spans = [(refined.knots[k], refined.knots[k + 1]) for k in idx]
    for j in range(len(segments) - 1):
        ha = spans[j][1] - spans[j][0]
        hb = spans[j + 1][1] - spans[j + 1][0]
        a, b = segments[j], segments[j + 1]
        d1a = 3 * (a[3] - a[2]) / ha
        d1b = 3 * (b[1] - b[0]) / hb
        d2a = 6 * (a[3] - 2 * a[2] + a[1]) / ha**2
        d2b = 6 * (b[2] - 2 * b[1] + b[0]) / hb**2
        for da, db in ((a[3], b[0]), (d1a, d1b), (d2a, d2b)):
            scale = max(np.linalg.norm(da), np.linalg.norm(db), 1e-9)
            assert np.linalg.norm(da - db) / scale < 1e-6
