"""Differential evolution and the end-to-end fitting pipeline."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import geometry, objectives
from .geometry import Polyline
from .objectives import Kind, ObjectiveValue, ProblemSpec
from .spline_core import Spline2D, fit_spline_lsq, make_spline

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DEConfig:
    """Settings of DE/rand/1/bin.

    ``population`` defaults to ``10 * dim`` capped at 200.  ``bounds`` is a
    pair ``(lo, hi)`` of scalars or per-dimension arrays; when it is unset,
    :func:`fit_problem` uses the box of half-width ``guess_radius`` around
    the starting guess if that is given, else :func:`default_bounds`.
    ``init_spread`` is the half-width of the initial perturbations relative
    to the half-width of the bounds box.
    """

    population: int | None = None
    weight: float = 0.7
    crossover: float = 0.9
    max_generations: int = 400
    target_value: float = 0.0
    seed: int = 0
    bounds: tuple | None = None
    init_spread: float = 0.1
    guess_radius: float | None = None

    def __post_init__(self):
        if self.population is not None and self.population < 4:
            raise ValueError("population must be at least 4")
        if not 0 < self.weight < 2:
            raise ValueError("weight must lie in (0, 2)")
        if not 0 <= self.crossover <= 1:
            raise ValueError("crossover must lie in [0, 1]")
        if self.max_generations < 0:
            raise ValueError("max_generations must be non-negative")
        if self.guess_radius is not None and not self.guess_radius > 0:
            raise ValueError("guess_radius must be positive")

    def population_size(self, dim: int) -> int:
        return self.population if self.population is not None else min(10 * dim, 200)

    def bounds_arrays(self, dim: int):
        if self.bounds is None:
            raise ValueError("DE needs a bounds box")
        lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (dim,)).copy() for b in self.bounds)
        if np.any(lo >= hi):
            raise ValueError("bounds need lo < hi in every dimension")
        return lo, hi


@dataclass(frozen=True, eq=False)
class FitResult:
    best_params: np.ndarray
    best_value: float
    trace: tuple
    evaluations: int
    converged: bool

    def write_trace_csv(self, path, evaluations_per_generation=None) -> None:
        write_trace_csv(path, self.trace, evaluations_per_generation)


def write_trace_csv(path, trace, evaluations=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generation", "best_value", "evaluations"])
        for g, v in enumerate(trace):
            w.writerow([g, repr(float(v)), "" if evaluations is None else evaluations[g]])


def seed_population(initial_guess, config: DEConfig, rng=None) -> np.ndarray:
    """Member 0 is the (clamped) guess; the others are uniform perturbations of it."""
    guess = np.asarray(initial_guess, dtype=float).reshape(-1)
    dim = guess.size
    lo, hi = config.bounds_arrays(dim)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    n = config.population_size(dim)
    guess = np.clip(guess, lo, hi)
    half = 0.5 * (hi - lo) * config.init_spread
    pop = guess + rng.uniform(-1.0, 1.0, size=(n, dim)) * half
    pop[0] = guess
    return np.clip(pop, lo, hi)


def _safe(value) -> float:
    value = float(value)
    return value if math.isfinite(value) else math.inf


def de_minimize(objective: Callable, dim: int, guess, config: DEConfig, map_fn=map) -> FitResult:
    """Minimise ``objective`` over the bounds box by DE/rand/1/bin.

    All random draws of a generation happen before its evaluations, so
    passing a parallel ``map_fn`` (e.g. ``executor.map``) does not change
    the result.
    """
    rng = np.random.default_rng(config.seed)
    lo, hi = config.bounds_arrays(dim)
    pop = seed_population(guess, config, rng)
    n = len(pop)
    fit = np.array([_safe(v) for v in map_fn(objective, list(pop))])
    evaluations = n
    best = int(np.argmin(fit))
    trace = [float(fit[best])]
    others = np.arange(n - 1)
    for _ in range(config.max_generations):
        if fit[best] <= config.target_value:
            break
        picks = np.array([rng.choice(others, 3, replace=False) for _ in range(n)])
        picks += picks >= np.arange(n)[:, None]
        cross = rng.random((n, dim)) < config.crossover
        cross[np.arange(n), rng.integers(dim, size=n)] = True
        a, b, c = pop[picks[:, 0]], pop[picks[:, 1]], pop[picks[:, 2]]
        mutant = np.clip(a + config.weight * (b - c), lo, hi)
        trials = np.where(cross, mutant, pop)
        trial_fit = np.array([_safe(v) for v in map_fn(objective, list(trials))])
        evaluations += n
        better = trial_fit <= fit
        pop[better] = trials[better]
        fit[better] = trial_fit[better]
        best = int(np.argmin(fit))
        trace.append(float(fit[best]))
    return FitResult(pop[best].copy(), float(fit[best]), tuple(trace), evaluations,
                     bool(fit[best] <= config.target_value))


def default_bounds(values, dim: int):
    """Box ``[m - 3R, m + 3R]`` from the data mean ``m`` and range ``R``."""
    m = float(np.mean(values))
    r = float(np.ptp(values)) or 1.0
    return (np.full(dim, m - 3 * r), np.full(dim, m + 3 * r))


def initial_guess(spec: ProblemSpec, guess_curve: Polyline | None = None, side_probe=None) -> np.ndarray:
    """Starting parameters built from a global least-squares spline fit."""
    base = fit_spline_lsq(spec.samples, spec.grid, strict=False).spline.coeffs.ravel()
    if spec.kind is Kind.UNIV_PLUSPART:
        return np.concatenate([base, np.zeros_like(base)])
    if spec.kind is Kind.B_JUMP:
        if guess_curve is not None:
            if side_probe is None:
                raise ValueError("a guess curve needs a side probe")
            sd = geometry.signed_distance_samples(guess_curve, side_probe, spec.samples)
            return fit_spline_lsq(sd, spec.grid, strict=False).spline.coeffs.ravel()
        level = np.median(spec.design @ base)
        return base - level
    return np.tile(base, spec.kind.n_splines)


@dataclass(frozen=True, eq=False)
class FitOutcome:
    """Optimiser result plus the fitted splines and derived geometry."""

    spec: ProblemSpec
    result: FitResult
    objective: ObjectiveValue
    splines: dict
    curves: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def segmentation(self):
        return self.objective.segmentation

    def evaluate(self, points) -> np.ndarray:
        """The composed approximation at ``points``."""
        kind = self.spec.kind
        s = self.splines
        if kind is Kind.B_JUMP:
            pts = np.atleast_2d(points)
            return np.where(s["g_gamma"](pts) > 0, s["g_plus"](pts), s["g_minus"](pts))
        if kind is Kind.C_THREE_CORNER:
            pts = np.atleast_2d(points)
            h = np.column_stack([s[f"h{i}"](pts) for i in (1, 2, 3)])
            g = np.column_stack([s[f"g{i}"](pts) for i in (1, 2, 3)])
            return g[np.arange(len(pts)), np.argmax(h, axis=1)]
        names = [n for n in s]
        vals = np.stack([s[n](points) for n in names])
        return objectives.compose(kind, vals)


def spline_names(kind: Kind) -> list[str]:
    return {
        Kind.UNIV_MIN: ["g_r", "g_l"],
        Kind.UNIV_MAX: ["g_r", "g_l"],
        Kind.UNIV_PLUSPART: ["g1", "g2"],
        Kind.UNIV_MINMAX: ["g1", "g2", "g3"],
        Kind.A_MAX3: ["g1", "g2", "g3"],
        Kind.B_JUMP: ["g_gamma"],
        Kind.C_THREE_CORNER: ["h1", "h2", "h3"],
    }[Kind(kind)]


def outcome_from_params(spec: ProblemSpec, params, result: FitResult | None = None) -> FitOutcome:
    """Assemble the splines, inner fits and zero set belonging to ``params``."""
    params = np.asarray(params, dtype=float)
    obj = objectives.evaluate(params, spec)
    blocks = params.reshape(spec.kind.n_splines, spec.block)
    splines = {n: make_spline(spec.grid, b) for n, b in zip(spline_names(spec.kind), blocks)}
    splines.update(obj.inner_fits)
    curves = []
    if spec.kind is Kind.B_JUMP:
        res = min(spec.samples.mesh_h / 2, spec.grid.gx.delta / 4, spec.grid.gy.delta / 4)
        curves = geometry.extract_zero_set(splines["g_gamma"], spec.samples.bounds, res)
    if result is None:
        result = FitResult(params, obj.value, (obj.value,), 1, True)
    return FitOutcome(spec, result, obj, splines, curves)


def fit_problem(spec: ProblemSpec, config: DEConfig = DEConfig(), guess=None,
                guess_curve=None, side_probe=None, map_fn=map) -> FitOutcome:
    """Run the whole pipeline: starting guess, DE on the matching objective, final fits."""
    if guess is None:
        guess = initial_guess(spec, guess_curve, side_probe)
    guess = np.asarray(guess, dtype=float)
    if guess.size != spec.dim:
        raise ValueError(f"guess has {guess.size} entries, problem needs {spec.dim}")
    if config.bounds is None:
        if config.guess_radius is not None:
            config = replace(config, bounds=local_bounds(guess, config.guess_radius))
        else:
            config = replace(config, bounds=default_bounds(spec.samples.values, spec.dim))
    log.info("fitting %s: %d parameters, %d samples", spec.kind.value, spec.dim, len(spec.samples))
    result = de_minimize(objectives.objective_function(spec), spec.dim, guess, config, map_fn)
    outcome = outcome_from_params(spec, result.best_params, result)
    if not outcome.objective.well_posed:
        log.warning("best parameters give an ill-posed inner fit")
    return outcome


def continuation_guess(spec: ProblemSpec, previous: FitOutcome) -> np.ndarray:
    """Starting ``g_gamma`` for ``spec`` from a B fit on other (usually coarser) data.

    The longest component of the previous zero set is turned into a signed
    distance on the new sites and fitted in ``spec.grid``, oriented to agree
    with the previous ``g_gamma`` at the majority of sites.  Other components
    are dropped, so spurious islands do not propagate.
    """
    if spec.kind is not Kind.B_JUMP or previous.spec.kind is not Kind.B_JUMP:
        raise ValueError("continuation needs B_Jump problems")
    if not previous.curves:
        raise ValueError("previous fit has an empty zero set")
    curve = max(previous.curves, key=lambda c: c.length)
    v = curve.vertices
    i = len(v) // 2
    tangent = v[min(i + 1, len(v) - 1)] - v[max(i - 1, 0)]
    normal = np.array([-tangent[1], tangent[0]]) / np.hypot(*tangent)
    scale = max(np.ptp(spec.samples.sites, axis=0))
    sd = geometry.signed_distance_samples(curve, v[i] + 1e-3 * scale * normal, spec.samples)
    old = previous.splines["g_gamma"](spec.samples.sites)
    if np.mean(np.sign(sd.values) == np.sign(old)) < 0.5:
        sd = sd.with_values(-sd.values)
    return fit_spline_lsq(sd, spec.grid, strict=False).spline.coeffs.ravel()


def local_bounds(guess, radius: float):
    """Box of half-width ``radius`` around ``guess``."""
    guess = np.asarray(guess, dtype=float)
    return (guess - radius, guess + radius)


def refit_pieces(outcome: FitOutcome, inner_grid) -> FitOutcome:
    """Recompute the linearly solved pieces of a B or C fit in another spline space."""
    spec = outcome.spec.replace(inner_grid=inner_grid)
    return outcome_from_params(spec, outcome.result.best_params, outcome.result)
