"""Uniform-knot cardinal cubic splines in one and two variables.

The basis functions ``B_j`` interpolate the unit vectors at the knots
(``B_j(t_i) = delta_ij``) with not-a-knot end conditions, so spline
coefficients are simply the spline values at the knots.  Bivariate splines
are tensor products of the univariate bases.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "DomainError",
    "IllPosedError",
    "KnotGrid1D",
    "KnotGrid2D",
    "Spline1D",
    "Spline2D",
    "SampleSet",
    "LsqFit",
    "make_knot_grid_1d",
    "make_knot_grid_2d",
    "eval_cardinal_1d",
    "eval_spline_1d",
    "eval_spline_2d",
    "fit_spline_lsq",
    "solve_lsq",
    "WELL_POSED_RTOL",
]

WELL_POSED_RTOL = 1e-8
_DOMAIN_RTOL = 1e-12


class DomainError(ValueError):
    """Evaluation point outside the knot interval or rectangle."""


class IllPosedError(ValueError):
    """Least-squares design matrix is rank deficient."""

    def __init__(self, message, condition=np.inf):
        super().__init__(message)
        self.condition = condition


@dataclass(frozen=True, eq=False)
class KnotGrid1D:
    a: float
    b: float
    delta: float
    k: int

    @cached_property
    def knots(self) -> np.ndarray:
        return self.a + self.delta * np.arange(self.k)

    @cached_property
    def _pieces(self) -> np.ndarray:
        # (k-1, 4, k): local power coefficients of every B_j on every interval
        return _cardinal_pieces(self.k, self.delta)

    def contains(self, x) -> np.ndarray:
        tol = _DOMAIN_RTOL * max(1.0, abs(self.a), abs(self.b))
        x = np.asarray(x, dtype=float)
        return (x >= self.a - tol) & (x <= self.b + tol)

    def basis(self, x, deriv: int = 0) -> np.ndarray:
        """Values of all basis functions at ``x``; shape ``x.shape + (k,)``."""
        x = np.asarray(x, dtype=float)
        if not np.all(self.contains(x)):
            bad = x[~self.contains(x)].ravel()[0]
            raise DomainError(f"x={bad!r} outside [{self.a}, {self.b}]")
        m = np.clip(np.floor((x - self.a) / self.delta).astype(int), 0, self.k - 2)
        u = x - self.knots[m]
        powers = _power_rows(u, deriv)
        return np.einsum("...p,...pj->...j", powers, self._pieces[m])

    def __repr__(self):
        return f"KnotGrid1D(a={self.a}, b={self.b}, delta={self.delta}, k={self.k})"


@dataclass(frozen=True, eq=False)
class KnotGrid2D:
    gx: KnotGrid1D
    gy: KnotGrid1D

    @property
    def shape(self) -> tuple[int, int]:
        return (self.gx.k, self.gy.k)

    @property
    def size(self) -> int:
        return self.gx.k * self.gy.k

    @property
    def rect(self) -> tuple[float, float, float, float]:
        return (self.gx.a, self.gx.b, self.gy.a, self.gy.b)

    def basis(self, points) -> np.ndarray:
        """Tensor-product design rows for ``points`` of shape (n, 2); (n, kx*ky)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        bx = self.gx.basis(points[:, 0])
        by = self.gy.basis(points[:, 1])
        return (bx[:, :, None] * by[:, None, :]).reshape(len(points), -1)

    def lattice_values(self, coeffs, xs, ys) -> np.ndarray:
        """Evaluate a coefficient matrix on the lattice ``xs x ys``; shape (len(xs), len(ys))."""
        return self.gx.basis(xs) @ np.asarray(coeffs, dtype=float) @ self.gy.basis(ys).T


def _power_rows(u, deriv):
    one = np.ones_like(u)
    zero = np.zeros_like(u)
    if deriv == 0:
        rows = (one, u, u * u, u * u * u)
    elif deriv == 1:
        rows = (zero, one, 2 * u, 3 * u * u)
    elif deriv == 2:
        rows = (zero, zero, 2 * one, 6 * u)
    elif deriv == 3:
        rows = (zero, zero, zero, 6 * one)
    else:
        raise ValueError("deriv must be 0..3")
    return np.stack(rows, axis=-1)


def _cardinal_pieces(k: int, delta: float) -> np.ndarray:
    """Piecewise power coefficients of the cardinal basis.

    Interval ``m`` holds ``sum_p c[m, p, j] * (x - t_m)**p`` for basis ``j``.
    """
    eye = np.eye(k)
    pieces = np.zeros((k - 1, 4, k))
    if k <= 3:
        # too few knots for not-a-knot; Lagrange interpolation of degree k-1
        t = delta * np.arange(k)
        for j in range(k):
            poly = np.polynomial.Polynomial.fit(t, eye[j], k - 1, domain=[0, 1], window=[0, 1])
            for m in range(k - 1):
                for p in range(4):
                    dp = poly.deriv(p) if p else poly
                    pieces[m, p, j] = dp(t[m]) / _factorial(p)
        return pieces

    # second-derivative (moment) formulation
    system = np.zeros((k, k))
    rhs_op = np.zeros((k, k))
    system[0, :3] = (1.0, -2.0, 1.0)
    system[-1, -3:] = (1.0, -2.0, 1.0)
    for i in range(1, k - 1):
        system[i, i - 1 : i + 2] = (1.0, 4.0, 1.0)
        rhs_op[i, i - 1 : i + 2] = np.array((1.0, -2.0, 1.0)) * 6.0 / delta**2
    moments = np.linalg.solve(system, rhs_op @ eye)
    y0, y1 = eye[:-1], eye[1:]
    m0, m1 = moments[:-1], moments[1:]
    pieces[:, 0, :] = y0
    pieces[:, 1, :] = (y1 - y0) / delta - delta * (2.0 * m0 + m1) / 6.0
    pieces[:, 2, :] = m0 / 2.0
    pieces[:, 3, :] = (m1 - m0) / (6.0 * delta)
    return pieces


def _factorial(p):
    return (1, 1, 2, 6)[p]


@dataclass(frozen=True, eq=False)
class Spline1D:
    grid: KnotGrid1D
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float).reshape(-1)
        if coeffs.size != self.grid.k:
            raise ValueError(f"expected {self.grid.k} coefficients, got {coeffs.size}")
        object.__setattr__(self, "coeffs", coeffs)

    def __call__(self, x, deriv: int = 0):
        return self.grid.basis(x, deriv) @ self.coeffs


@dataclass(frozen=True, eq=False)
class Spline2D:
    grid: KnotGrid2D
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.size != self.grid.size:
            raise ValueError(f"expected {self.grid.shape} coefficients, got {coeffs.shape}")
        object.__setattr__(self, "coeffs", coeffs.reshape(self.grid.shape))

    def __call__(self, points):
        """Evaluate at points of shape (n, 2) or a single (x, y)."""
        points = np.asarray(points, dtype=float)
        single = points.ndim == 1
        pts = np.atleast_2d(points)
        bx = self.grid.gx.basis(pts[:, 0])
        by = self.grid.gy.basis(pts[:, 1])
        out = np.einsum("ni,ij,nj->n", bx, self.coeffs, by)
        return out[0] if single else out

    def gradient(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        bx, dbx = self.grid.gx.basis(pts[:, 0]), self.grid.gx.basis(pts[:, 0], 1)
        by, dby = self.grid.gy.basis(pts[:, 1]), self.grid.gy.basis(pts[:, 1], 1)
        gx = np.einsum("ni,ij,nj->n", dbx, self.coeffs, by)
        gy = np.einsum("ni,ij,nj->n", bx, self.coeffs, dby)
        return np.stack([gx, gy], axis=1)

    def lattice(self, xs, ys) -> np.ndarray:
        return self.grid.lattice_values(self.coeffs, xs, ys)


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Sample sites with function values.

    ``sites`` is always 2-D with shape (n, dim).  ``mesh_h`` is estimated as
    the median nearest-neighbour distance when not given.
    """

    sites: np.ndarray
    values: np.ndarray
    mesh_h: float = None

    def __post_init__(self):
        sites = np.asarray(self.sites, dtype=float)
        if sites.ndim == 1:
            sites = sites[:, None]
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if sites.shape[1] not in (1, 2):
            raise ValueError("sites must be 1-D or 2-D points")
        if len(sites) != len(values):
            raise ValueError(f"{len(sites)} sites but {len(values)} values")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "values", values)
        if self.mesh_h is None:
            object.__setattr__(self, "mesh_h", _median_nn_distance(sites))
        if not self.mesh_h > 0:
            raise ValueError("mesh_h must be positive")

    @property
    def dim(self) -> int:
        return self.sites.shape[1]

    def __len__(self):
        return len(self.values)

    def subset(self, mask) -> "SampleSet":
        return SampleSet(self.sites[mask], self.values[mask], self.mesh_h)

    def with_values(self, values) -> "SampleSet":
        return SampleSet(self.sites, values, self.mesh_h)

    @cached_property
    def tree(self):
        from scipy.spatial import cKDTree

        return cKDTree(self.sites)

    @cached_property
    def bounds(self):
        lo, hi = self.sites.min(axis=0), self.sites.max(axis=0)
        return tuple(float(v) for v in np.ravel(np.column_stack([lo, hi])))


def _median_nn_distance(sites):
    if len(sites) < 2:
        return 1.0
    from scipy.spatial import cKDTree

    dist, _ = cKDTree(sites).query(sites, k=2)
    return float(np.median(dist[:, 1]))


def make_knot_grid_1d(a: float, b: float, delta: float) -> KnotGrid1D:
    """Uniform knots ``a, a + delta, ..., b``.

    Raises ``ValueError`` when ``b - a`` is not an integer multiple of
    ``delta`` (to 1e-9 relative).
    """
    a, b, delta = float(a), float(b), float(delta)
    if not a < b:
        raise ValueError(f"need a < b, got a={a}, b={b}")
    if not delta > 0:
        raise ValueError(f"knot spacing must be positive, got {delta}")
    ratio = (b - a) / delta
    n = round(ratio)
    residual = ratio - n
    if abs(residual) > 1e-9 * max(1.0, abs(ratio)) or n < 1:
        raise ValueError(
            f"span {b - a} is not a multiple of delta={delta} (residual {residual:.3g} steps)"
        )
    return KnotGrid1D(a, b, (b - a) / n, n + 1)


def make_knot_grid_2d(rect, delta, delta_y=None) -> KnotGrid2D:
    x0, x1, y0, y1 = rect
    return KnotGrid2D(
        make_knot_grid_1d(x0, x1, delta),
        make_knot_grid_1d(y0, y1, delta if delta_y is None else delta_y),
    )


def eval_cardinal_1d(grid: KnotGrid1D, j: int, x):
    """Value of the ``j``-th cardinal basis function (1-based) at ``x``."""
    if not 1 <= j <= grid.k:
        raise IndexError(f"basis index {j} outside 1..{grid.k}")
    return grid.basis(x)[..., j - 1]


def eval_spline_1d(s: Spline1D, x):
    return s(x)


def eval_spline_2d(s: Spline2D, p):
    return s(p)


@dataclass(frozen=True)
class LsqFit:
    spline: Spline1D | Spline2D
    rms: float
    well_posed: bool
    condition: float


def solve_lsq(design: np.ndarray, values: np.ndarray, rtol: float = WELL_POSED_RTOL):
    """Least-squares solve through QR followed by an SVD of the triangular factor.

    Returns ``(coeffs, condition, well_posed)``; ``condition`` is the ratio of
    the largest to the smallest singular value of ``design``.
    """
    n, k = design.shape
    if n < k:
        return np.zeros(k), np.inf, False
    # Triangularising [design | values] yields R and Q^T values without forming Q.
    r_aug = np.linalg.qr(np.column_stack([design, values]), mode="r")
    r, qty = r_aug[:k, :k], r_aug[:k, k]
    u, s, vt = np.linalg.svd(r)
    if s[0] == 0.0:
        return np.zeros(k), np.inf, False
    condition = s[0] / s[-1] if s[-1] > 0 else np.inf
    well_posed = s[-1] > rtol * s[0]
    keep = s > rtol * s[0]
    proj = u.T @ qty
    coeffs = vt[keep].T @ (proj[keep] / s[keep])
    return coeffs, condition, bool(well_posed)


def design_matrix(grid, sites) -> np.ndarray:
    sites = np.asarray(sites, dtype=float)
    if isinstance(grid, KnotGrid1D):
        return grid.basis(sites.reshape(-1))
    return grid.basis(sites)


def make_spline(grid, coeffs):
    if isinstance(grid, KnotGrid1D):
        return Spline1D(grid, coeffs)
    return Spline2D(grid, coeffs)


def fit_spline_lsq(samples: SampleSet, grid, strict: bool = True) -> LsqFit:
    """Least-squares spline fit of ``samples`` in the space spanned by ``grid``.

    With ``strict`` (the default) a rank-deficient design raises
    :class:`IllPosedError`; otherwise the minimum-norm truncated solution is
    returned with ``well_posed=False``.
    """
    design = design_matrix(grid, samples.sites)
    coeffs, condition, well_posed = solve_lsq(design, samples.values)
    if strict and not well_posed:
        raise IllPosedError(
            f"ill-posed least-squares fit: {len(samples)} samples, "
            f"{design.shape[1]} coefficients, condition estimate {condition:.3g}",
            condition,
        )
    resid = samples.values - design @ coeffs
    rms = float(np.sqrt(np.mean(resid**2))) if len(resid) else 0.0
    return LsqFit(make_spline(grid, coeffs), rms, well_posed, float(condition))


def spline_to_dict(s: Spline1D | Spline2D) -> dict:
    """JSON-ready description of a spline: its knot grid(s) and coefficients."""
    if isinstance(s, Spline1D):
        g = s.grid
        return {"dim": 1, "a": g.a, "b": g.b, "delta": g.delta, "coeffs": s.coeffs.tolist()}
    gx, gy = s.grid.gx, s.grid.gy
    return {"dim": 2, "rect": [gx.a, gx.b, gy.a, gy.b], "delta": [gx.delta, gy.delta],
            "coeffs": s.coeffs.tolist()}


def spline_from_dict(d: dict) -> Spline1D | Spline2D:
    if d["dim"] == 1:
        return Spline1D(make_knot_grid_1d(d["a"], d["b"], d["delta"]), d["coeffs"])
    dx, dy = d["delta"]
    return Spline2D(make_knot_grid_2d(tuple(d["rect"]), dx, dy), d["coeffs"])
