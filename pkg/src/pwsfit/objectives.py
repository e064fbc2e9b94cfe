"""Cost functionals for min/max/sign compositions of splines.

Each functional takes the free parameter vector and a :class:`ProblemSpec`.
The univariate and max-of-three functionals are plain sums of squares; the
jump functionals (:func:`fb`, :func:`fc`) solve inner linear least-squares
problems for the smooth pieces and return an :class:`ObjectiveValue`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import geometry
from .geometry import EXCLUDED, MINUS, PLUS, Segmentation
from .spline_core import (
    KnotGrid1D,
    KnotGrid2D,
    SampleSet,
    Spline2D,
    design_matrix,
    make_spline,
    solve_lsq,
)

PENALTY_FACTOR = 10.0


class Kind(str, enum.Enum):
    UNIV_MIN = "Univ_Min"
    UNIV_MAX = "Univ_Max"
    UNIV_PLUSPART = "Univ_PlusPart"
    UNIV_MINMAX = "Univ_MinMax"
    A_MAX3 = "A_Max3"
    B_JUMP = "B_Jump"
    C_THREE_CORNER = "C_ThreeCorner"

    @property
    def univariate(self) -> bool:
        return self.value.startswith("Univ")

    @property
    def n_splines(self) -> int:
        return {"Univ_MinMax": 3, "A_Max3": 3, "B_Jump": 1, "C_ThreeCorner": 3}.get(self.value, 2)


VARIANTS = ("full", "restricted", "extended")


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """A fitting problem: data, spline spaces and segmentation options.

    ``grid`` carries the splines entering non-linearly.  ``inner_grid`` is
    the space of the linearly solved pieces of kinds B and C (defaults to
    ``grid``).  ``band_multiplier`` scales the distance threshold
    ``samples.mesh_h`` of the restricted sets; ``band`` and
    ``neighbor_exclusion`` control the boundary exclusion of kind C.
    ``outer`` selects the value reported for the extended variant: ``"sign"``
    (sign-only sums) or ``"inner"`` (the extended inner functional).

    ``ill_posed`` decides what a rank-deficient inner fit costs: ``"penalty"``
    replaces the value by a large data-scaled constant; ``"min_norm"`` keeps
    the minimum-norm solution (its values on the fitted points are still
    unique) and penalises only fitting sets smaller than the number of
    coefficients.
    """

    kind: Kind
    samples: SampleSet
    grid: KnotGrid1D | KnotGrid2D
    variant: str | None = None
    inner_grid: KnotGrid1D | KnotGrid2D | None = None
    band_multiplier: float = 1.0
    band: float = 0.0
    neighbor_exclusion: bool = True
    outer: str = "sign"
    extension_neighbors: int = 16
    ill_posed: str = "penalty"

    def __post_init__(self):
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is Kind.B_JUMP:
            if self.variant is None:
                object.__setattr__(self, "variant", "restricted")
            if self.variant not in VARIANTS:
                raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        elif self.variant is not None:
            raise ValueError("variant applies to B_Jump problems only")
        if self.outer not in ("sign", "inner"):
            raise ValueError("outer must be 'sign' or 'inner'")
        if self.ill_posed not in ("penalty", "min_norm"):
            raise ValueError("ill_posed must be 'penalty' or 'min_norm'")
        want_1d = kind.univariate
        for g in (self.grid, self.inner_grid):
            if g is not None and isinstance(g, KnotGrid1D) != want_1d:
                raise ValueError(f"{kind.value} needs {'1-D' if want_1d else '2-D'} knot grids")
        if self.samples.dim != (1 if want_1d else 2):
            raise ValueError(f"{kind.value} needs {1 if want_1d else 2}-D samples")
        self._check_cover(self.grid)
        if self.inner_grid is not None:
            self._check_cover(self.inner_grid)

    def _check_cover(self, grid):
        rect = (grid.a, grid.b) if isinstance(grid, KnotGrid1D) else grid.rect
        inside = grid.contains(self.samples.sites[:, 0]) if isinstance(grid, KnotGrid1D) else (
            grid.gx.contains(self.samples.sites[:, 0]) & grid.gy.contains(self.samples.sites[:, 1])
        )
        if not np.all(inside):
            raise ValueError(f"knot grid {rect} does not cover the samples")

    @property
    def block(self) -> int:
        return self.grid.k if isinstance(self.grid, KnotGrid1D) else self.grid.size

    @property
    def dim(self) -> int:
        return self.kind.n_splines * self.block

    @property
    def pieces_grid(self):
        return self.inner_grid if self.inner_grid is not None else self.grid

    @property
    def distance_threshold(self) -> float:
        return self.band_multiplier * self.samples.mesh_h

    @cached_property
    def design(self) -> np.ndarray:
        return design_matrix(self.grid, self.samples.sites)

    @cached_property
    def inner_design(self) -> np.ndarray:
        if self.inner_grid is None:
            return self.design
        return design_matrix(self.inner_grid, self.samples.sites)

    @cached_property
    def gradient_designs(self):
        g, sites = self.grid, self.samples.sites
        bx, by = g.gx.basis(sites[:, 0]), g.gy.basis(sites[:, 1])
        dbx, dby = g.gx.basis(sites[:, 0], 1), g.gy.basis(sites[:, 1], 1)
        n = len(sites)
        return ((dbx[:, :, None] * by[:, None, :]).reshape(n, -1),
                (bx[:, :, None] * dby[:, None, :]).reshape(n, -1))

    @cached_property
    def neighbor_pairs(self) -> np.ndarray:
        return geometry.grid_neighbor_pairs(self.samples)

    @cached_property
    def penalty(self) -> float:
        return PENALTY_FACTOR * float(np.sum(self.samples.values**2)) + PENALTY_FACTOR

    def replace(self, **changes) -> "ProblemSpec":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class ObjectiveValue:
    value: float
    inner_fits: dict = field(default_factory=dict)
    segmentation: Segmentation | None = None
    well_posed: bool = True
    penalized: bool = False  # value replaced by the ill-posedness penalty


def plus_part(t):
    """``max(t, 0)``, elementwise."""
    return np.maximum(t, 0.0) if np.ndim(t) else max(float(t), 0.0)


def spline_values(params, spec: ProblemSpec) -> np.ndarray:
    """Values of the parameter blocks at the sample sites; shape (n_splines, n)."""
    params = np.asarray(params, dtype=float)
    if params.size != spec.dim:
        raise ValueError(f"{spec.kind.value} expects {spec.dim} parameters, got {params.size}")
    return (spec.design @ params.reshape(spec.kind.n_splines, spec.block).T).T


def compose(kind: Kind, vals: np.ndarray) -> np.ndarray:
    """Combine spline values (n_splines, n) by the composition of ``kind``."""
    kind = Kind(kind)
    if kind is Kind.UNIV_MIN:
        return np.minimum(vals[0], vals[1])
    if kind is Kind.UNIV_MAX:
        return np.maximum(vals[0], vals[1])
    if kind is Kind.UNIV_PLUSPART:
        return vals[0] - plus_part(vals[1])
    if kind is Kind.UNIV_MINMAX:
        return np.minimum(vals[0], np.maximum(vals[1], vals[2]))
    if kind is Kind.A_MAX3:
        return np.max(vals, axis=0)
    raise ValueError(f"{kind.value} is not a closed-form composition")


def _sse(params, spec, kinds):
    if spec.kind not in kinds:
        raise ValueError(f"objective not defined for {spec.kind.value}")
    r = spec.samples.values - compose(spec.kind, spline_values(params, spec))
    return float(r @ r)


def f1_min(params, spec: ProblemSpec) -> float:
    """Sum of squared residuals of ``min`` (or ``max``) of two splines."""
    return _sse(params, spec, (Kind.UNIV_MIN, Kind.UNIV_MAX, Kind.UNIV_MINMAX))


def f2_pluspart(params, spec: ProblemSpec) -> float:
    """Sum of squared residuals of ``g1 - (g2)_+``."""
    return _sse(params, spec, (Kind.UNIV_PLUSPART,))


def fa_max3(params, spec: ProblemSpec) -> float:
    return _sse(params, spec, (Kind.A_MAX3,))


def extend_data(side_samples: SampleSet, targets, neighborhood: int = 16):
    """Extend one-sided data to ``targets`` by local cubic polynomials.

    Each target gets the value at the target of the least-squares total
    degree 3 polynomial through its ``neighborhood`` nearest side samples.
    Where those samples cannot carry a cubic (on lattices the nearest ones
    often lie on three lines) the neighbourhood is doubled, up to four
    times its size; only then is the degree lowered.

    Returns ``(values, degraded)`` where ``degraded`` flags targets that did
    not get a full cubic fit.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    n_t = len(targets)
    values = np.empty(n_t)
    degraded = np.zeros(n_t, dtype=bool)
    if n_t == 0:
        return values, degraded
    if len(side_samples) == 0:
        raise ValueError("no side samples to extend from")
    pending = np.ones(n_t, dtype=bool)
    sizes = sorted({min(m * neighborhood, len(side_samples)) for m in (1, 2, 4)})
    attempts = [(3, k) for k in sizes] + [(d, sizes[-1]) for d in (2, 1, 0)]
    for degree, k in attempts:
        n_terms = (degree + 1) * (degree + 2) // 2
        sel = np.nonzero(pending)[0]
        if sel.size == 0:
            break
        if n_terms > k:
            continue
        dist, idx = side_samples.tree.query(targets[sel], k=k)
        dist, idx = dist.reshape(sel.size, k), idx.reshape(sel.size, k)
        rel = side_samples.sites[idx] - targets[sel, None, :]
        scale = np.maximum(dist.max(axis=1), 1e-300)[:, None]
        cols = _monomials(rel[..., 0] / scale, rel[..., 1] / scale, degree)
        vals, ok = _batched_local_fit(cols, side_samples.values[idx])
        values[sel[ok]] = vals[ok]
        degraded[sel[ok]] = degree < 3
        pending[sel[ok]] = False
    return values, degraded


def _monomials(u, v, degree):
    terms = [np.ones_like(u)]
    for d in range(1, degree + 1):
        for j in range(d + 1):
            terms.append(u ** (d - j) * v**j)
    return np.stack(terms, axis=-1)


def _batched_local_fit(cols, f, rtol=1e-10):
    uu, s, vt = np.linalg.svd(cols, full_matrices=False)
    ok = s[:, -1] > rtol * s[:, 0]
    inv = np.where(s > rtol * s[:, :1], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    proj = np.einsum("tkm,tk->tm", uu, f) * inv
    coef = np.einsum("tmj,tm->tj", vt, proj)
    return coef[:, 0], ok


def _fit_rows(spec, mask, values):
    """Inner least-squares solve; returns ``(coeffs, well_posed, acceptable)``."""
    design = spec.inner_design[mask]
    coeffs, _, well_posed = solve_lsq(design, values)
    if spec.ill_posed == "min_norm":
        return coeffs, well_posed, design.shape[0] >= design.shape[1]
    return coeffs, well_posed, well_posed


def restricted_segmentation(spec: ProblemSpec, g_gamma: Spline2D, values) -> np.ndarray:
    if spec.variant == "full":
        return np.where(values > 0, PLUS, np.where(values < 0, MINUS, EXCLUDED))
    seg = geometry.classify_restricted(spec.samples, g_gamma, spec.distance_threshold, values=values)
    return seg.labels


def fb(params, spec: ProblemSpec) -> ObjectiveValue:
    """Jump functional: segmentation by the sign of ``g_gamma``, pieces solved linearly.

    The returned value is the sign-only sum of squared residuals, with the
    pieces fitted on the full, restricted or extended point sets according
    to ``spec.variant``.
    """
    if spec.kind is not Kind.B_JUMP:
        raise ValueError("fb needs a B_Jump problem")
    params = np.asarray(params, dtype=float)
    if params.size != spec.dim:
        raise ValueError(f"B_Jump expects {spec.dim} parameters, got {params.size}")
    samples = spec.samples
    f = samples.values
    g_gamma = Spline2D(spec.grid, params)
    gv = spec.design @ params
    labels = restricted_segmentation(spec, g_gamma, gv)

    fits, coeffs, well_posed, acceptable = {}, {}, True, True
    inner_value = 0.0
    for name, side, other in (("g_plus", PLUS, MINUS), ("g_minus", MINUS, PLUS)):
        if spec.variant == "extended":
            mask = labels != other
            target = f[mask].copy()
            fill = mask & (labels != side)
            if fill.any():
                core = labels == side
                if not core.any():
                    well_posed = acceptable = False
                    break
                ext, _ = extend_data(samples.subset(core), samples.sites[fill], spec.extension_neighbors)
                target[fill[mask]] = ext
        else:
            mask = labels == side
            target = f[mask]
        c, ok, fine = _fit_rows(spec, mask, target)
        well_posed &= ok
        acceptable &= fine
        coeffs[name] = c
        fits[name] = make_spline(spec.pieces_grid, c)
        r = target - spec.inner_design[mask] @ c
        inner_value += float(r @ r)
    seg = Segmentation(labels)
    if not acceptable:
        return ObjectiveValue(spec.penalty, fits, seg, False, penalized=True)
    if spec.variant == "extended" and spec.outer == "inner":
        return ObjectiveValue(inner_value, fits, seg, well_posed)
    value = 0.0
    for name, m in (("g_plus", gv > 0), ("g_minus", gv < 0)):
        r = f[m] - spec.inner_design[m] @ coeffs[name]
        value += float(r @ r)
    return ObjectiveValue(value, fits, seg, well_posed)


def three_corner_labels(params, spec: ProblemSpec) -> np.ndarray:
    vals = spline_values(params, spec).T
    tau = 0.0
    if spec.band > 0:
        p = np.asarray(params, dtype=float).reshape(3, spec.block).T
        dx, dy = spec.gradient_designs
        gx, gy = dx @ p, dy @ p
        order = np.argsort(-vals, axis=1, kind="stable")
        rows = np.arange(len(vals))
        ddx = gx[rows, order[:, 0]] - gx[rows, order[:, 1]]
        ddy = gy[rows, order[:, 0]] - gy[rows, order[:, 1]]
        tau = spec.band * np.hypot(ddx, ddy)
    pairs = spec.neighbor_pairs if spec.neighbor_exclusion else None
    return geometry.max_labels(vals, tau, pairs)


def fc(params, spec: ProblemSpec) -> ObjectiveValue:
    """Three-region functional: regions from the argmax of three label splines."""
    if spec.kind is not Kind.C_THREE_CORNER:
        raise ValueError("fc needs a C_ThreeCorner problem")
    labels = three_corner_labels(params, spec)
    f = spec.samples.values
    fits, value, well_posed, acceptable = {}, 0.0, True, True
    for i in (1, 2, 3):
        mask = labels == i
        c, ok, fine = _fit_rows(spec, mask, f[mask])
        well_posed &= ok
        acceptable &= fine
        fits[f"g{i}"] = make_spline(spec.pieces_grid, c)
        r = f[mask] - spec.inner_design[mask] @ c
        value += float(r @ r)
    seg = Segmentation(labels)
    if not acceptable:
        return ObjectiveValue(spec.penalty, fits, seg, False, penalized=True)
    return ObjectiveValue(value, fits, seg, well_posed)


def evaluate(params, spec: ProblemSpec) -> ObjectiveValue:
    """Objective of any problem kind as an :class:`ObjectiveValue`."""
    if spec.kind is Kind.B_JUMP:
        return fb(params, spec)
    if spec.kind is Kind.C_THREE_CORNER:
        return fc(params, spec)
    if spec.kind is Kind.UNIV_PLUSPART:
        return ObjectiveValue(f2_pluspart(params, spec))
    if spec.kind is Kind.A_MAX3:
        return ObjectiveValue(fa_max3(params, spec))
    return ObjectiveValue(f1_min(params, spec))


def objective_function(spec: ProblemSpec):
    """Scalar objective ``params -> float`` for the optimiser."""
    if spec.kind is Kind.B_JUMP:
        return lambda p: fb(p, spec).value
    if spec.kind is Kind.C_THREE_CORNER:
        return lambda p: fc(p, spec).value
    if spec.kind is Kind.UNIV_PLUSPART:
        return lambda p: f2_pluspart(p, spec)
    if spec.kind is Kind.A_MAX3:
        return lambda p: fa_max3(p, spec)
    return lambda p: f1_min(p, spec)
