"""Synthetic piecewise-smooth test functions and their sample sets.

Pieces are callables on sites of shape (n, dim).  They may be built from
numbers, expression strings in ``x`` and ``y`` (parsed with sympy) or
spline knot values, see :func:`make_piece`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .geometry import MINUS, PLUS, Polyline
from .spline_core import SampleSet, Spline1D, Spline2D, make_knot_grid_1d, make_knot_grid_2d

DEFAULT_SINUSOID = {"amplitude": 0.7, "frequency": 1.2, "phase": 0.0, "offset": 0.0}
DEFAULT_CIRCLE = {"center": (0.0, 0.0), "radius": 1.5}
DEFAULT_LINE = {"point": (0.0, 0.0), "angle": 0.0}
DEFAULT_JUMP_PIECES = ("1.5 + 0.1*x - 0.05*y + 0.02*x*y", "-0.5 + 0.02*x**2 + 0.05*y")
DEFAULT_SHEETS = ((0.0, 0.8, -0.4), (-0.9, -0.3, 0.0), (0.6, -0.5, 0.1))
DEFAULT_CORNER_PIECES = (0.0, 5.0, 10.0)
DEFAULT_RAY_ANGLES = (90.0, 210.0, 330.0)
_CURVE_NODES = 8
_CURVE_POINTS = 4001


@dataclass(frozen=True)
class NoiseSpec:
    value_sigma: float = 0.0
    curve_amplitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.value_sigma < 0 or self.curve_amplitude < 0:
            raise ValueError("noise magnitudes must be non-negative")

    def streams(self):
        """Independent (curve, value) seed sequences."""
        curve, value = np.random.SeedSequence(self.seed).spawn(2)
        return curve, value


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Exact function, its region map and the singular curves or points."""

    function: Callable
    region: Callable
    pieces: dict
    curves: list = field(default_factory=list)
    breaks: tuple = ()
    smooth: bool = False


def make_piece(spec, dim: int = 2) -> Callable:
    """Build a vectorised piece from a number, an expression string or a dict.

    Dict form: ``{"knot_values": [...], "delta": d, "domain": [a, b, ...]}``
    for a spline with the given values at uniform knots.
    """
    if callable(spec):
        return spec
    if isinstance(spec, (int, float)):
        c = float(spec)
        return lambda p: np.full(len(np.atleast_2d(p)) if dim == 2 else np.size(p), c)
    if isinstance(spec, str):
        import sympy

        x, y = sympy.symbols("x y")
        expr = sympy.sympify(spec, locals={"x": x, "y": y})
        extra = expr.free_symbols - {x, y}
        if extra:
            raise ValueError(f"unknown symbols in piece {spec!r}: {sorted(map(str, extra))}")
        fn = sympy.lambdify((x, y), expr, "numpy")
        if dim == 1:
            def piece(p):
                p = np.asarray(p, dtype=float).reshape(-1)
                return np.broadcast_to(fn(p, 0.0), p.shape).astype(float)
        else:
            def piece(p):
                p = np.atleast_2d(np.asarray(p, dtype=float))
                return np.broadcast_to(fn(p[:, 0], p[:, 1]), (len(p),)).astype(float)
        piece.expression = spec
        return piece
    if isinstance(spec, dict) and "knot_values" in spec:
        vals = np.asarray(spec["knot_values"], dtype=float)
        dom = spec["domain"]
        if dim == 1:
            s = Spline1D(make_knot_grid_1d(dom[0], dom[1], spec["delta"]), vals)
            return lambda p: s(np.asarray(p, dtype=float).reshape(-1))
        s2 = Spline2D(make_knot_grid_2d(dom, spec["delta"]), vals)
        return lambda p: s2(np.atleast_2d(p))
    raise TypeError(f"cannot build a piece from {spec!r}")


def grid_sites(rect, mesh_h) -> np.ndarray:
    """Sites of the uniform grid of spacing ``mesh_h`` on ``rect``, x-major order."""
    x0, x1, y0, y1 = rect
    nx = int(round((x1 - x0) / mesh_h)) + 1
    ny = int(round((y1 - y0) / mesh_h)) + 1
    xs = x0 + mesh_h * np.arange(nx)
    ys = y0 + mesh_h * np.arange(ny)
    if xs[-1] > x1 + 1e-9 * mesh_h:
        xs = xs[:-1]
    if ys[-1] > y1 + 1e-9 * mesh_h:
        ys = ys[:-1]
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])


def add_value_noise(samples: SampleSet, sigma: float, seed) -> SampleSet:
    """Add i.i.d. Gaussian noise of standard deviation ``sigma`` to the values."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return samples
    rng = np.random.default_rng(seed)
    return samples.with_values(samples.values + rng.normal(0.0, sigma, len(samples)))


def gen_univariate(domain=(-3.0, 3.0), step=0.02, mode="min", pieces=None, noise=NoiseSpec()):
    """Samples of ``min`` (or ``max``) of two univariate pieces on a uniform grid."""
    a, b = map(float, domain)
    if mode not in ("min", "max"):
        raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
    if pieces is None:
        pieces = ("1 - 0.5*(x + 1)**2", "0.3 - 0.8*x")
    f1, f2 = (make_piece(p, dim=1) for p in pieces)
    n = int(round((b - a) / step)) + 1
    x = a + step * np.arange(n)
    x[-1] = min(x[-1], b)
    op = np.minimum if mode == "min" else np.maximum

    def function(p):
        p = np.asarray(p, dtype=float).reshape(-1)
        return op(f1(p), f2(p))

    def region(p):
        p = np.asarray(p, dtype=float).reshape(-1)
        first = f1(p) <= f2(p) if mode == "min" else f1(p) >= f2(p)
        return np.where(first, 1, 2)

    breaks = _crossings(lambda t: f1(t) - f2(t), a, b)
    smooth = len(breaks) == 0
    if smooth:
        warnings.warn("pieces never cross inside the domain; the function is smooth", stacklevel=2)
    samples = SampleSet(x, function(x), mesh_h=step)
    samples = add_value_noise(samples, noise.value_sigma, noise.streams()[1])
    truth = GroundTruth(function, region, {1: f1, 2: f2}, [], tuple(breaks), smooth)
    return samples, truth


def _crossings(diff, a, b, n=20001):
    t = np.linspace(a, b, n)
    d = diff(t)
    roots = []
    for i in np.nonzero(np.sign(d[:-1]) * np.sign(d[1:]) < 0)[0]:
        roots.append(brentq(lambda s: float(diff(np.array([s]))[0]), t[i], t[i + 1], xtol=1e-14))
    roots.extend(float(t[i]) for i in np.nonzero(d == 0)[0] if 0 < i < n - 1)
    return sorted(roots)


def _affine(sheet):
    a, b, c = map(float, sheet)
    return lambda p: a * np.atleast_2d(p)[:, 0] + b * np.atleast_2d(p)[:, 1] + c


def gen_three_corner_continuous(domain=(-2.0, 2.0, -2.0, 5.0), mesh_h=0.125, sheets=DEFAULT_SHEETS, noise=NoiseSpec()):
    """Maximum of three affine sheets: a convex crease along three rays."""
    sheets = np.asarray(sheets, dtype=float)
    if sheets.shape != (3, 3):
        raise ValueError("need three sheets (a, b, c) for a*x + b*y + c")
    normals, offsets = sheets[:, :2], sheets[:, 2]
    triple = _triple_point(normals, offsets)
    x0, x1, y0, y1 = domain
    if not (x0 < triple[0] < x1 and y0 < triple[1] < y1):
        raise ValueError(f"sheets meet at {tuple(triple)}, outside the domain")
    funcs = {i + 1: _affine(s) for i, s in enumerate(sheets)}

    def function(p):
        p = np.atleast_2d(p)
        return (np.atleast_2d(p) @ normals.T + offsets).max(axis=1)

    def region(p):
        return np.argmax(np.atleast_2d(p) @ normals.T + offsets, axis=1) + 1

    curves = []
    for i, j in ((0, 1), (1, 2), (0, 2)):
        k = 3 - i - j
        dn = normals[i] - normals[j]
        d = np.array([-dn[1], dn[0]])
        along = (normals[i] - normals[k]) @ d
        if abs(along) < 1e-14:
            continue
        d = d if along > 0 else -d
        curves.append(_ray(triple, d, domain))
    sites = grid_sites(domain, mesh_h)
    samples = SampleSet(sites, function(sites), mesh_h=mesh_h)
    samples = add_value_noise(samples, noise.value_sigma, noise.streams()[1])
    return samples, GroundTruth(function, region, funcs, curves)


def _triple_point(normals, offsets):
    m = np.array([normals[0] - normals[1], normals[0] - normals[2]])
    rhs = np.array([offsets[1] - offsets[0], offsets[2] - offsets[0]])
    try:
        return np.linalg.solve(m, rhs)
    except np.linalg.LinAlgError:
        raise ValueError("sheets have no common point") from None


def _ray(origin, direction, rect) -> Polyline:
    x0, x1, y0, y1 = rect
    d = direction / np.linalg.norm(direction)
    ts = []
    for lo, hi, o, di in ((x0, x1, origin[0], d[0]), (y0, y1, origin[1], d[1])):
        if di > 0:
            ts.append((hi - o) / di)
        elif di < 0:
            ts.append((lo - o) / di)
    t = min(ts)
    return Polyline(np.array([origin, origin + t * d]))


def _displacement(seed, amplitude, periodic):
    """Smooth random displacement on [0, 1] with maximum modulus ``amplitude``.

    A cubic spline through seeded Gaussian values at uniform nodes
    (periodic for closed curves), rescaled to the requested amplitude.
    """
    if amplitude == 0:
        return lambda u: np.zeros_like(np.asarray(u, dtype=float))
    from scipy.interpolate import CubicSpline

    rng = np.random.default_rng(seed)
    nodes = np.linspace(0.0, 1.0, _CURVE_NODES + 1)
    vals = rng.normal(size=nodes.size)
    if periodic:
        vals[-1] = vals[0]
    raw = CubicSpline(nodes, vals, bc_type="periodic" if periodic else "not-a-knot")
    scale = amplitude / np.abs(raw(np.linspace(0, 1, 2001))).max()
    return lambda u: scale * raw(np.asarray(u, dtype=float))


def _curve_side(curve, params, rect, disp):
    """Side function (positive on the plus side) and the truth polyline."""
    x0, x1, y0, y1 = rect
    scale = max(x1 - x0, y1 - y0)
    if curve == "sinusoid":
        q = {**DEFAULT_SINUSOID, **params}

        def height(x):
            u = (x - x0) / (x1 - x0)
            return q["offset"] + q["amplitude"] * np.sin(q["frequency"] * x + q["phase"]) + disp(u)

        side = lambda p: p[:, 1] - height(p[:, 0])
        xs = np.linspace(x0, x1, _CURVE_POINTS)
        verts = np.column_stack([xs, height(xs)])
        if verts[:, 1].min() <= y0 or verts[:, 1].max() >= y1:
            raise ValueError("sinusoid leaves the domain or exits through a corner")
        return side, Polyline(verts)
    if curve == "circle":
        q = {**DEFAULT_CIRCLE, **params}
        c = np.asarray(q["center"], dtype=float)

        def radius(theta):
            return q["radius"] + disp((theta + np.pi) / (2 * np.pi))

        def side(p):
            rel = p - c
            return radius(np.arctan2(rel[:, 1], rel[:, 0])) - np.hypot(rel[:, 0], rel[:, 1])

        th = np.linspace(-np.pi, np.pi, _CURVE_POINTS)[:-1]
        verts = c + radius(th)[:, None] * np.column_stack([np.cos(th), np.sin(th)])
        if (verts[:, 0].min() <= x0 or verts[:, 0].max() >= x1
                or verts[:, 1].min() <= y0 or verts[:, 1].max() >= y1):
            raise ValueError("circle does not fit inside the domain")
        return side, Polyline(verts, closed=True)
    if curve == "line":
        q = {**DEFAULT_LINE, **params}
        p0 = np.asarray(q["point"], dtype=float)
        ang = math.radians(q["angle"])
        d = np.array([math.cos(ang), math.sin(ang)])
        n = np.array([-d[1], d[0]])
        corners = np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]])
        along = (corners - p0) @ d
        t0, t1 = along.min(), along.max()

        def side(p):
            t = (p - p0) @ d
            return (p - p0) @ n - disp((t - t0) / (t1 - t0))

        ts = np.linspace(t0, t1, _CURVE_POINTS)
        verts = p0 + ts[:, None] * d + disp((ts - t0) / (t1 - t0))[:, None] * n
        inside = ((verts[:, 0] >= x0) & (verts[:, 0] <= x1) & (verts[:, 1] >= y0) & (verts[:, 1] <= y1))
        if inside.sum() < 2:
            raise ValueError("line misses the domain")
        verts = _clip_to_rect(verts, inside, side, rect)
        for end in (verts[0], verts[-1]):
            if np.min(np.linalg.norm(corners - end, axis=1)) < 1e-9 * scale:
                raise ValueError("line exits the domain through a corner")
        return side, Polyline(verts)
    raise ValueError(f"unknown curve kind {curve!r}")


def _clip_to_rect(verts, inside, side, rect):
    idx = np.nonzero(inside)[0]
    if np.any(np.diff(idx) != 1):
        raise ValueError("curve enters the domain more than once")
    lo, hi = idx[0], idx[-1]
    out = verts[lo : hi + 1]
    x0, x1, y0, y1 = rect

    def boundary_hit(a, b):
        # point on segment a->b (a inside, b outside) lying on the rectangle
        ts = []
        for k, lim in ((0, x0), (0, x1), (1, y0), (1, y1)):
            if b[k] != a[k]:
                t = (lim - a[k]) / (b[k] - a[k])
                if 0 <= t <= 1:
                    q = a + t * (b - a)
                    if x0 - 1e-12 <= q[0] <= x1 + 1e-12 and y0 - 1e-12 <= q[1] <= y1 + 1e-12:
                        ts.append(t)
        return a + min(ts) * (b - a)

    if lo > 0:
        out = np.vstack([boundary_hit(verts[lo], verts[lo - 1]), out])
    if hi < len(verts) - 1:
        out = np.vstack([out, boundary_hit(verts[hi], verts[hi + 1])])
    return out


def gen_jump(domain=(-3.0, 3.0, -3.0, 3.0), mesh_h=0.125, curve="sinusoid", curve_params=None,
             plus_piece=DEFAULT_JUMP_PIECES[0], minus_piece=DEFAULT_JUMP_PIECES[1], noise=NoiseSpec()):
    """Function with a jump across a sinusoid, circle or line.

    The plus piece lives above the sinusoid, inside the circle, and to the
    left of the line direction.  Curve-location noise displaces the curve by
    a smooth random field before sides are assigned.
    """
    curve_seed, value_seed = noise.streams()
    disp = _displacement(curve_seed, noise.curve_amplitude, periodic=curve == "circle")
    side, polyline = _curve_side(curve, dict(curve_params or {}), domain, disp)
    fp, fm = make_piece(plus_piece), make_piece(minus_piece)

    def region(p):
        return np.where(side(np.atleast_2d(p)) > 0, PLUS, MINUS)

    def function(p):
        p = np.atleast_2d(p)
        return np.where(region(p) == PLUS, fp(p), fm(p))

    sites = grid_sites(domain, mesh_h)
    samples = SampleSet(sites, function(sites), mesh_h=mesh_h)
    samples = add_value_noise(samples, noise.value_sigma, value_seed)
    return samples, GroundTruth(function, region, {PLUS: fp, MINUS: fm}, [polyline])


def gen_three_corner_jump(domain=(-2.0, 2.0, -2.0, 2.0), mesh_h=0.125, pieces=DEFAULT_CORNER_PIECES,
                          center=(0.0, 0.0), angles=DEFAULT_RAY_ANGLES, noise=NoiseSpec()):
    """Three smooth pieces on the sectors cut out by three rays from ``center``.

    Sector ``i`` runs counter-clockwise from the ``i``-th ray (after sorting
    the angles) to the next one.
    """
    ang = np.sort(np.mod(np.asarray(angles, dtype=float), 360.0))
    if len(ang) != 3:
        raise ValueError("need exactly three rays")
    gaps = np.diff(np.append(ang, ang[0] + 360.0))
    if np.any(gaps < 1e-9):
        raise ValueError("rays overlap")
    c = np.asarray(center, dtype=float)
    x0, x1, y0, y1 = domain
    if not (x0 < c[0] < x1 and y0 < c[1] < y1):
        raise ValueError("center outside the domain")
    funcs = {i + 1: make_piece(p) for i, p in enumerate(pieces)}

    def region(p):
        rel = np.atleast_2d(p) - c
        phi = np.mod(np.degrees(np.arctan2(rel[:, 1], rel[:, 0])), 360.0)
        lab = np.searchsorted(ang, phi, side="right")
        # angles before the first ray belong to the last sector
        return np.where(lab == 0, 3, lab)

    def function(p):
        p = np.atleast_2d(p)
        lab = region(p)
        out = np.empty(len(p))
        for i, f in funcs.items():
            m = lab == i
            if m.any():
                out[m] = f(p[m])
        return out

    rads = np.radians(ang)
    curves = [_ray(c, np.array([np.cos(t), np.sin(t)]), domain) for t in rads]
    sites = grid_sites(domain, mesh_h)
    samples = SampleSet(sites, function(sites), mesh_h=mesh_h)
    samples = add_value_noise(samples, noise.value_sigma, noise.streams()[1])
    return samples, GroundTruth(function, region, funcs, curves)
