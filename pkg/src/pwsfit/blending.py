"""Merging approximations fitted on two overlapping rectangular patches.

Blending acts on the generating splines, not on the composed values: for
max-type (A) patches the three splines are paired across the patches and
each pair is blended before taking the max; for jump (B) patches the
level-set functions are first brought to a common scale, then ``g_gamma``,
``g_plus`` and ``g_minus`` are blended separately.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .spline_core import Spline2D, spline_from_dict, spline_to_dict

AXES = {"x": 0, "y": 1}
A_NAMES = ("g1", "g2", "g3")
B_NAMES = ("g_gamma", "g_plus", "g_minus")


@dataclass(frozen=True, eq=False)
class PatchApprox:
    """An approximation on one rectangular patch.

    ``kind`` is ``"A"`` (splines ``g1, g2, g3``, value = max) or ``"B"``
    (splines ``g_gamma, g_plus, g_minus``, value picked by the sign of
    ``g_gamma``).  ``mesh_h`` is the data spacing the patch was fitted to.
    """

    domain: tuple
    kind: str
    splines: dict
    mesh_h: float = 0.125

    def __post_init__(self):
        if self.kind not in ("A", "B"):
            raise ValueError(f"patch kind must be 'A' or 'B', got {self.kind!r}")
        names = A_NAMES if self.kind == "A" else B_NAMES
        missing = [n for n in names if n not in self.splines]
        if missing:
            raise ValueError(f"kind {self.kind} patch lacks splines {missing}")
        x0, x1, y0, y1 = self.domain
        for n in names:
            gx0, gx1, gy0, gy1 = self.splines[n].grid.rect
            if gx0 > x0 or gx1 < x1 or gy0 > y0 or gy1 < y1:
                raise ValueError(f"spline {n} does not cover the patch domain {self.domain}")
        object.__setattr__(self, "domain", tuple(float(v) for v in self.domain))

    @property
    def names(self) -> tuple:
        return A_NAMES if self.kind == "A" else B_NAMES

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        s = self.splines
        if self.kind == "A":
            return np.max([s[n](pts) for n in A_NAMES], axis=0)
        return np.where(s["g_gamma"](pts) > 0, s["g_plus"](pts), s["g_minus"](pts))

    def to_dict(self) -> dict:
        return {"domain": list(self.domain), "kind": self.kind, "mesh_h": self.mesh_h,
                "splines": {n: spline_to_dict(self.splines[n]) for n in self.names}}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchApprox":
        return cls(tuple(d["domain"]), d["kind"],
                   {n: spline_from_dict(v) for n, v in d["splines"].items()}, float(d["mesh_h"]))

    @classmethod
    def from_outcome(cls, outcome, domain=None) -> "PatchApprox":
        """Patch from a fitted A_Max3 or B_Jump problem."""
        kind = {"A_Max3": "A", "B_Jump": "B"}.get(outcome.spec.kind.value)
        if kind is None:
            raise ValueError(f"cannot blend {outcome.spec.kind.value} fits")
        samples = outcome.spec.samples
        names = A_NAMES if kind == "A" else B_NAMES
        return cls(tuple(domain or samples.bounds), kind,
                   {n: outcome.splines[n] for n in names}, float(samples.mesh_h))


def c1_weight(t):
    """Cubic smoothstep: 0 below 0, ``3t^2 - 2t^3`` on (0, 1), 1 above 1."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    out = t * t * (3.0 - 2.0 * t)
    return float(out) if out.ndim == 0 else out


def overlap_rect(r1, r2):
    """Intersection of two rectangles ``(x0, x1, y0, y1)``; ``None`` when it has no area."""
    x0, x1 = max(r1[0], r2[0]), min(r1[1], r2[1])
    y0, y1 = max(r1[2], r2[2]), min(r1[3], r2[3])
    if x0 >= x1 or y0 >= y1:
        return None
    return (x0, x1, y0, y1)


def _probe_lattice(rect, count: int) -> np.ndarray:
    n = max(2, math.ceil(math.sqrt(count)))
    xs = np.linspace(rect[0], rect[1], n)
    ys = np.linspace(rect[2], rect[3], n)
    return np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)


def match_pairs(t1, t2, overlap, probe_count: int = 400) -> tuple:
    """Permutation ``pi`` pairing ``t1[i]`` with ``t2[pi[i]]`` by least squared distance on the overlap.

    All six permutations are scored; ties go to the first in lexicographic
    order, so identical triplets give the identity.
    """
    probes = _probe_lattice(overlap, probe_count)
    v1 = np.array([f(probes) for f in t1])
    v2 = np.array([f(probes) for f in t2])
    cost = ((v1[:, None, :] - v2[None, :, :]) ** 2).sum(axis=2)
    best = min(itertools.permutations(range(3)), key=lambda p: sum(cost[i, p[i]] for i in range(3)))
    return tuple(best)


def scale_level_set(p1: PatchApprox, p2: PatchApprox, overlap=None, resolution=None):
    """Least-squares factor ``alpha`` with ``alpha * g_gamma_1 ~ g_gamma_2`` near the zero curves.

    Probes are lattice points of the overlap within ``2 * mesh_h`` of either
    patch's zero curve.  Returns ``(alpha, reversed)``; ``reversed`` is true
    when ``alpha < 0``, i.e. the two level-set functions are oppositely
    oriented.
    """
    if p1.kind != "B" or p2.kind != "B":
        raise ValueError("scale_level_set needs two B patches")
    overlap = overlap or overlap_rect(p1.domain, p2.domain)
    if overlap is None:
        raise ValueError("patches do not overlap")
    h = max(p1.mesh_h, p2.mesh_h)
    if resolution is None:
        resolution = h / 4
    g1, g2 = p1.splines["g_gamma"], p2.splines["g_gamma"]
    xs, ys = geometry.lattice_axes(overlap, resolution)
    probes = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    curves = (geometry.extract_zero_set(g1, overlap, _zero_set_resolution(g1, resolution))
              + geometry.extract_zero_set(g2, overlap, _zero_set_resolution(g2, resolution)))
    near = geometry.dist_to_polylines(probes, curves) <= 2 * h
    if not near.any():
        raise ValueError("no probe points near the zero curves inside the overlap")
    a, b = g1(probes[near]), g2(probes[near])
    denom = float(a @ a)
    if denom == 0.0:
        raise ValueError("g_gamma of patch 1 vanishes on all near-curve probes")
    alpha = float(a @ b) / denom
    return alpha, alpha < 0


def _zero_set_resolution(g: Spline2D, resolution: float) -> float:
    return min(resolution, g.grid.gx.delta / 4, g.grid.gy.delta / 4)


def _scaled(s: Spline2D, alpha: float) -> Spline2D:
    return Spline2D(s.grid, alpha * s.coeffs)


@dataclass(frozen=True, eq=False)
class Blended:
    """Blend of two patches along one axis; callable on points of shape (n, 2).

    ``p1`` is the patch lying lower along ``axis``.  ``pairs[i]`` are the two
    functions blended into the i-th generating function.  Outside the
    overlap the result is the corresponding patch's own output.
    """

    p1: PatchApprox
    p2: PatchApprox
    axis: int
    overlap: tuple
    pairs: tuple
    permutation: tuple = (0, 1, 2)
    alpha: float = 1.0
    reversed: bool = False
    info: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.p1.kind

    def tau(self, points) -> np.ndarray:
        lo, hi = self.overlap[2 * self.axis], self.overlap[2 * self.axis + 1]
        return (np.asarray(points, dtype=float)[:, self.axis] - lo) / (hi - lo)

    def generating(self, i: int, points) -> np.ndarray:
        """The i-th blended generating function (C^1 across the overlap edges)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        f1, f2 = self.pairs[i]
        t = self.tau(pts)
        out = np.empty(len(pts))
        lo, hi, mid = t <= 0, t >= 1, (t > 0) & (t < 1)
        out[lo] = f1(pts[lo]) if lo.any() else out[lo]
        out[hi] = f2(pts[hi]) if hi.any() else out[hi]
        if mid.any():
            w = c1_weight(t[mid])
            out[mid] = (1.0 - w) * f1(pts[mid]) + w * f2(pts[mid])
        return out

    def _compose(self, pts) -> np.ndarray:
        vals = [self.generating(i, pts) for i in range(3)]
        if self.kind == "A":
            return np.max(vals, axis=0)
        return np.where(vals[0] > 0, vals[1], vals[2])

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        t = self.tau(pts)
        out = np.empty(len(pts))
        lo, hi, mid = t <= 0, t >= 1, (t > 0) & (t < 1)
        # outside the overlap return each patch's own output, bit for bit
        if lo.any():
            out[lo] = self.p1(pts[lo])
        if hi.any():
            out[hi] = self.p2(pts[hi])
        if mid.any():
            out[mid] = self._compose(pts[mid])
        return out

    @property
    def domain(self) -> tuple:
        r1, r2 = self.p1.domain, self.p2.domain
        return (min(r1[0], r2[0]), max(r1[1], r2[1]), min(r1[2], r2[2]), max(r1[3], r2[3]))


def _order(p1: PatchApprox, p2: PatchApprox, axis: str):
    if axis not in AXES:
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    ax = AXES[axis]
    if p1.kind != p2.kind:
        raise ValueError("cannot blend patches of different kinds")
    overlap = overlap_rect(p1.domain, p2.domain)
    if overlap is None:
        raise ValueError("patches do not overlap")
    if p2.domain[2 * ax] < p1.domain[2 * ax]:
        p1, p2 = p2, p1
    return p1, p2, ax, overlap


def blend_a(p1: PatchApprox, p2: PatchApprox, axis: str = "y", probe_count: int = 400) -> Blended:
    """Blend two max-of-three patches; pairs are matched by proximity on the overlap."""
    p1, p2, ax, overlap = _order(p1, p2, axis)
    if p1.kind != "A":
        raise ValueError("blend_a needs two A patches")
    t1 = [p1.splines[n] for n in A_NAMES]
    t2 = [p2.splines[n] for n in A_NAMES]
    perm = match_pairs(t1, t2, overlap, probe_count)
    pairs = tuple((t1[i], t2[perm[i]]) for i in range(3))
    return Blended(p1, p2, ax, overlap, pairs, permutation=perm)


def blend_b(p1: PatchApprox, p2: PatchApprox, axis: str = "y", resolution=None) -> Blended:
    """Blend two jump patches after scaling the lower patch's level-set function.

    When the level-set functions are oppositely oriented (``alpha < 0``) the
    lower patch's ``g_plus`` and ``g_minus`` trade places, so each blended
    piece still pairs approximations of the same side.
    """
    p1, p2, ax, overlap = _order(p1, p2, axis)
    if p1.kind != "B":
        raise ValueError("blend_b needs two B patches")
    alpha, rev = scale_level_set(p1, p2, overlap, resolution)
    s1, s2 = p1.splines, p2.splines
    plus1, minus1 = (s1["g_minus"], s1["g_plus"]) if rev else (s1["g_plus"], s1["g_minus"])
    pairs = ((_scaled(s1["g_gamma"], alpha), s2["g_gamma"]), (plus1, s2["g_plus"]), (minus1, s2["g_minus"]))
    return Blended(p1, p2, ax, overlap, pairs, alpha=alpha, reversed=rev)


def dense_grid(fn, rect, step: float):
    """Evaluate ``fn`` on the lattice of ``rect`` with spacing ``step``; returns ``(points, values)``."""
    xs, ys = geometry.lattice_axes(rect, step)
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    return pts, np.asarray(fn(pts), dtype=float)
