"""Approximation of piecewise-smooth functions by min/max/sign compositions of cubic splines."""

from .blending import PatchApprox, blend_a, blend_b, c1_weight, match_pairs, scale_level_set
from .geometry import Polyline, Segmentation, extract_zero_set, signed_distance_samples
from .objectives import Kind, ObjectiveValue, ProblemSpec, evaluate
from .optimizer import DEConfig, FitOutcome, FitResult, de_minimize, fit_problem
from .spline_core import (
    DomainError,
    IllPosedError,
    KnotGrid1D,
    KnotGrid2D,
    SampleSet,
    Spline1D,
    Spline2D,
    fit_spline_lsq,
    make_knot_grid_1d,
    make_knot_grid_2d,
)

__version__ = "0.1.0"

__all__ = [
    "DEConfig", "DomainError", "FitOutcome", "FitResult", "IllPosedError", "Kind", "KnotGrid1D",
    "KnotGrid2D", "ObjectiveValue", "PatchApprox", "Polyline", "ProblemSpec", "SampleSet",
    "Segmentation", "Spline1D", "Spline2D", "blend_a", "blend_b", "c1_weight", "de_minimize",
    "evaluate", "extract_zero_set", "fit_problem", "fit_spline_lsq", "make_knot_grid_1d",
    "make_knot_grid_2d", "match_pairs", "scale_level_set", "signed_distance_samples",
]
