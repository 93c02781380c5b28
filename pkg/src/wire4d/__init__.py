"""Differentiable 4D wire kernel: a single (x, y, z, width) B-spline optimized
against multi-view image losses."""

__version__ = "0.1.0"

from .spline import (  # noqa: F401
    DEGREE,
    Wire4D,
    evaluate,
    evaluate_many,
    fit_to_polyline,
    insert_knot,
    jerk_energy,
    load_wire,
    make_clamped_knots,
    save_wire,
    straight_wire,
    to_bezier_segments,
)
