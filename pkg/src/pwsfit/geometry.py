"""Zero level sets, point-to-curve distances and sample segmentations."""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass

import numpy as np

from .spline_core import SampleSet, Spline2D

EXCLUDED = 0
PLUS = 1
MINUS = -1

# marching-squares edges: 0 bottom, 1 right, 2 top, 3 left
_CASE_SEGMENTS = {
    1: ((0, 3),),
    2: ((0, 1),),
    3: ((1, 3),),
    4: ((1, 2),),
    6: ((0, 2),),
    7: ((2, 3),),
    8: ((2, 3),),
    9: ((0, 2),),
    11: ((1, 2),),
    12: ((1, 3),),
    13: ((0, 1),),
    14: ((0, 3),),
}
# saddles, keyed by (case, centre positive)
_SADDLE_SEGMENTS = {
    (5, True): ((0, 1), (2, 3)),
    (5, False): ((0, 3), (1, 2)),
    (10, True): ((0, 3), (1, 2)),
    (10, False): ((0, 1), (2, 3)),
}


@dataclass(frozen=True, eq=False)
class Polyline:
    vertices: np.ndarray
    closed: bool = False

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        if len(v) < 2:
            raise ValueError("a polyline needs at least two vertices")
        object.__setattr__(self, "vertices", v)

    def segments(self) -> np.ndarray:
        v = self.vertices
        if self.closed and not np.array_equal(v[0], v[-1]):
            v = np.vstack([v, v[:1]])
        return np.stack([v[:-1], v[1:]], axis=1)

    def reversed(self) -> "Polyline":
        return Polyline(self.vertices[::-1].copy(), self.closed)

    @property
    def length(self) -> float:
        seg = self.segments()
        return float(np.linalg.norm(seg[:, 1] - seg[:, 0], axis=1).sum())


@dataclass(frozen=True, eq=False)
class Segmentation:
    """Per-sample labels.

    Two-sided (jump) segmentations use ``PLUS``/``MINUS``; three-region ones
    use 1, 2, 3.  ``EXCLUDED`` (0) marks samples left out of the inner fits.
    """

    labels: np.ndarray

    def mask(self, label) -> np.ndarray:
        return self.labels == label

    @property
    def excluded(self) -> np.ndarray:
        return self.labels == EXCLUDED

    def counts(self) -> dict:
        vals, cnt = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, cnt)}


def lattice_axes(rect, resolution):
    x0, x1, y0, y1 = rect
    nx = max(2, int(math.ceil((x1 - x0) / resolution - 1e-9)) + 1)
    ny = max(2, int(math.ceil((y1 - y0) / resolution - 1e-9)) + 1)
    return np.linspace(x0, x1, nx), np.linspace(y0, y1, ny)


def zero_segments(xs, ys, values, centre=None):
    """Marching-squares segments of ``values = 0`` on the lattice ``xs x ys``.

    ``values[i, j]`` is the function at ``(xs[i], ys[j])``.  ``centre`` maps
    an (m, 2) array of cell centres to function values and resolves saddle
    cells; the mean of the corners is used when it is ``None``.

    Returns ``(points, edge_ids)``: crossing coordinates of shape (m, 2, 2)
    and the lattice-edge id of each endpoint, shape (m, 2).
    """
    v = np.asarray(values, dtype=float)
    nx, ny = v.shape
    pos = v > 0
    case = (
        pos[:-1, :-1].astype(np.int8)
        | pos[1:, :-1] << 1
        | pos[1:, 1:] << 2
        | pos[:-1, 1:] << 3
    )
    ci, cj = np.nonzero((case != 0) & (case != 15))
    if ci.size == 0:
        return np.zeros((0, 2, 2)), np.zeros((0, 2), dtype=np.int64)
    cases = case[ci, cj]

    saddle = (cases == 5) | (cases == 10)
    centre_pos = np.zeros(ci.size, dtype=bool)
    if saddle.any():
        cx = 0.5 * (xs[ci[saddle]] + xs[ci[saddle] + 1])
        cy = 0.5 * (ys[cj[saddle]] + ys[cj[saddle] + 1])
        if centre is None:
            cval = 0.25 * (
                v[ci[saddle], cj[saddle]]
                + v[ci[saddle] + 1, cj[saddle]]
                + v[ci[saddle] + 1, cj[saddle] + 1]
                + v[ci[saddle], cj[saddle] + 1]
            )
        else:
            cval = np.asarray(centre(np.column_stack([cx, cy])))
        centre_pos[saddle] = cval > 0

    n_h = (nx - 1) * ny

    def edge_id(i, j, e):
        # horizontal edges (i,j)-(i+1,j); vertical edges (i,j)-(i,j+1)
        if e == 0:
            return i * ny + j
        if e == 2:
            return i * ny + j + 1
        if e == 3:
            return n_h + i * (ny - 1) + j
        return n_h + (i + 1) * (ny - 1) + j

    ends = []
    for idx in range(ci.size):
        c = int(cases[idx])
        pairs = _SADDLE_SEGMENTS[(c, bool(centre_pos[idx]))] if c in (5, 10) else _CASE_SEGMENTS[c]
        i, j = int(ci[idx]), int(cj[idx])
        for e0, e1 in pairs:
            ends.append((edge_id(i, j, e0), edge_id(i, j, e1)))
    ids = np.asarray(ends, dtype=np.int64)
    points = _edge_crossings(ids.ravel(), xs, ys, v, n_h).reshape(-1, 2, 2)
    return points, ids


def _edge_crossings(ids, xs, ys, v, n_h):
    ny = v.shape[1]
    out = np.empty((ids.size, 2))
    horiz = ids < n_h
    hid = ids[horiz]
    i, j = hid // ny, hid % ny
    v0, v1 = v[i, j], v[i + 1, j]
    t = v0 / (v0 - v1)
    out[horiz, 0] = xs[i] + t * (xs[i + 1] - xs[i])
    out[horiz, 1] = ys[j]
    vid = ids[~horiz] - n_h
    i, j = vid // (ny - 1), vid % (ny - 1)
    v0, v1 = v[i, j], v[i, j + 1]
    t = v0 / (v0 - v1)
    out[~horiz, 0] = xs[i]
    out[~horiz, 1] = ys[j] + t * (ys[j + 1] - ys[j])
    return out


def chain_segments(points, ids) -> list[Polyline]:
    """Join marching-squares segments that share lattice edges into polylines."""
    if len(ids) == 0:
        return []
    coord = {}
    adj: dict[int, list[int]] = {}
    for s, (a, b) in enumerate(ids.tolist()):
        coord[a] = points[s, 0]
        coord[b] = points[s, 1]
        adj.setdefault(a, []).append(s)
        adj.setdefault(b, []).append(s)
    used = np.zeros(len(ids), dtype=bool)

    def walk(start_edge, seg):
        path = [start_edge]
        edge = start_edge
        while seg is not None:
            used[seg] = True
            a, b = ids[seg]
            edge = int(b) if int(a) == edge else int(a)
            path.append(edge)
            nxt = [s for s in adj[edge] if not used[s]]
            seg = nxt[0] if nxt else None
        return path

    curves = []
    # open chains start at edges with a single incident segment
    for edge, segs in adj.items():
        if len(segs) == 1 and not used[segs[0]]:
            path = walk(edge, segs[0])
            verts = _dedupe(np.array([coord[e] for e in path]))
            if len(verts) >= 2:
                curves.append(Polyline(verts, closed=False))
    for s in range(len(ids)):
        if not used[s]:
            path = walk(int(ids[s, 0]), s)
            closed = path[0] == path[-1]
            if closed:
                path = path[:-1]
            verts = _dedupe(np.array([coord[e] for e in path]))
            if len(verts) >= 2:
                curves.append(Polyline(verts, closed=closed))
    return curves


@functools.lru_cache(maxsize=64)
def _lattice_basis(grid, rect, resolution):
    xs, ys = lattice_axes(rect, resolution)
    return xs, ys, grid.gx.basis(xs), grid.gy.basis(ys)


def _dedupe(verts):
    keep = np.ones(len(verts), dtype=bool)
    keep[1:] = np.any(verts[1:] != verts[:-1], axis=1)
    return verts[keep]


def extract_zero_set(g: Spline2D, rect=None, resolution: float = None) -> list[Polyline]:
    """Polylines approximating ``{g = 0}`` inside ``rect``.

    The lattice spacing is at most ``resolution``, which must not exceed a
    quarter of the knot spacing.
    """
    if rect is None:
        rect = g.grid.rect
    delta = min(g.grid.gx.delta, g.grid.gy.delta)
    if resolution is None:
        resolution = delta / 4
    if not 0 < resolution <= delta / 4 * (1 + 1e-12):
        raise ValueError(f"resolution must be in (0, {delta / 4}], got {resolution}")
    xs, ys = lattice_axes(rect, resolution)
    points, ids = zero_segments(xs, ys, g.lattice(xs, ys), centre=g)
    return chain_segments(points, ids)


def _canonical(segments):
    # orientation-independent segment form so that distances are exactly
    # invariant under polyline reversal
    a, b = segments[:, 0], segments[:, 1]
    swap = (a[:, 0] > b[:, 0]) | ((a[:, 0] == b[:, 0]) & (a[:, 1] > b[:, 1]))
    lo = np.where(swap[:, None], b, a)
    hi = np.where(swap[:, None], a, b)
    return lo, hi


def point_segment_distance(p, a, b):
    """Distances between points ``p`` and segments ``a``-``b`` (broadcasting)."""
    ab = b - a
    ap = p - a
    denom = np.einsum("...i,...i->...", ab, ab)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.einsum("...i,...i->...", ap, ab) / denom
    t = np.where(denom > 0, np.clip(t, 0.0, 1.0), 0.0)
    d = ap - t[..., None] * ab
    return np.sqrt(np.einsum("...i,...i->...", d, d))


def _all_segments(curves):
    segs = [c.segments() for c in curves]
    if not segs:
        return np.zeros((0, 2, 2))
    return np.concatenate(segs)


def distance_to_segments(points, segments, chunk=2048) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if len(segments) == 0:
        return np.full(len(points), np.inf)
    lo, hi = _canonical(segments)
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk, None, :]
        out[s : s + chunk] = point_segment_distance(p, lo[None], hi[None]).min(axis=1)
    return out


def dist_to_polylines(p, curves: list[Polyline]):
    """Euclidean distance from ``p`` (a point or an (n, 2) array) to the curves.

    An empty curve list gives ``inf``.
    """
    p = np.asarray(p, dtype=float)
    d = distance_to_segments(p, _all_segments(curves))
    return float(d[0]) if p.ndim == 1 else d


def near_segments(tree, sites, segments, radius) -> np.ndarray:
    """Mask of ``sites`` within ``radius`` of any segment, via a KD-tree prefilter."""
    mask = np.zeros(len(sites), dtype=bool)
    if len(segments) == 0:
        return mask
    lo, hi = _canonical(segments)
    mid = 0.5 * (lo + hi)
    half = 0.5 * np.linalg.norm(hi - lo, axis=1)
    cand = tree.query_ball_point(mid, radius + half + 1e-12, return_sorted=False)
    counts = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(cand))
    if counts.sum() == 0:
        return mask
    pts = np.fromiter((i for c in cand for i in c), dtype=np.int64, count=int(counts.sum()))
    seg = np.repeat(np.arange(len(segments)), counts)
    d = point_segment_distance(sites[pts], lo[seg], hi[seg])
    mask[pts[d <= radius]] = True
    return mask


def restricted_labels(values, band_mask) -> np.ndarray:
    labels = np.where(values > 0, PLUS, np.where(values < 0, MINUS, EXCLUDED))
    labels[band_mask] = EXCLUDED
    return labels


def classify_restricted(samples: SampleSet, g_gamma: Spline2D, h: float, resolution=None, values=None) -> Segmentation:
    """Split samples by the sign of ``g_gamma``, excluding those within ``h`` of its zero set.

    The zero set is traced on a lattice of spacing ``resolution`` (default
    half the sample mesh size) over the samples' bounding box.  ``values``
    may carry precomputed ``g_gamma`` values at the sites.
    """
    if resolution is None:
        resolution = min(samples.mesh_h / 2, g_gamma.grid.gx.delta / 4, g_gamma.grid.gy.delta / 4)
    if values is None:
        values = g_gamma(samples.sites)
    if h > 0:
        xs, ys, bx, by = _lattice_basis(g_gamma.grid, samples.bounds, resolution)
        segs, _ = zero_segments(xs, ys, bx @ g_gamma.coeffs @ by.T, centre=g_gamma)
        band = near_segments(samples.tree, samples.sites, segs, h)
    else:
        band = np.zeros(len(samples), dtype=bool)
    return Segmentation(restricted_labels(values, band))


def grid_neighbor_pairs(samples: SampleSet, factor: float = 1.01) -> np.ndarray:
    """Index pairs of samples no farther apart than ``factor * mesh_h`` (4-neighbours on grids)."""
    pairs = samples.tree.query_pairs(factor * samples.mesh_h, output_type="ndarray")
    return pairs.reshape(-1, 2)


def max_labels(values, tau=0.0, pairs=None) -> np.ndarray:
    """Labels 1..3 from the argmax of ``values`` (n, 3); ties and margins below ``tau`` excluded."""
    order = np.argsort(-values, axis=1, kind="stable")
    rows = np.arange(len(values))
    top = values[rows, order[:, 0]]
    second = values[rows, order[:, 1]]
    gap = top - second
    labels = order[:, 0] + 1
    excluded = (gap <= 0) | (gap < tau)
    if pairs is not None and len(pairs):
        differ = labels[pairs[:, 0]] != labels[pairs[:, 1]]
        excluded[pairs[differ].ravel()] = True
    return np.where(excluded, EXCLUDED, labels)


def segment_by_max(samples: SampleSet, h1, h2, h3, band: float = 0.0, neighbor_exclusion: bool = False) -> Segmentation:
    """Three-region segmentation ``E_i = {h_i > max of the other two}``.

    A sample is excluded when the top two label functions differ by less than
    ``band`` times the gradient norm of their difference (a first-order
    distance-to-boundary test), on ties, and, with ``neighbor_exclusion``,
    when a grid neighbour carries a different argmax label.
    """
    funcs = (h1, h2, h3)
    values = np.column_stack([f(samples.sites) for f in funcs])
    tau = 0.0
    if band > 0:
        order = np.argsort(-values, axis=1, kind="stable")
        grads = np.stack([f.gradient(samples.sites) for f in funcs], axis=1)
        rows = np.arange(len(values))
        diff = grads[rows, order[:, 0]] - grads[rows, order[:, 1]]
        tau = band * np.linalg.norm(diff, axis=1)
    pairs = grid_neighbor_pairs(samples) if neighbor_exclusion else None
    return Segmentation(max_labels(values, tau, pairs))


def signed_distance_samples(gamma: Polyline, side_probe, samples: SampleSet, rect=None) -> SampleSet:
    """Signed distance from every sample site to ``gamma``, positive on the probe's side.

    ``gamma`` must be closed or run between two points of the boundary of
    ``rect`` (default: bounding box of the samples and the curve).
    """
    import shapely
    from shapely.geometry import LineString, Polygon, box
    from shapely.ops import split

    sites = samples.sites
    probe = np.asarray(side_probe, dtype=float)
    verts = gamma.vertices
    if rect is None:
        lo = np.minimum(sites.min(axis=0), verts.min(axis=0))
        hi = np.maximum(sites.max(axis=0), verts.max(axis=0))
        rect = (lo[0], hi[0], lo[1], hi[1])
    x0, x1, y0, y1 = rect
    scale = max(x1 - x0, y1 - y0)
    segs = gamma.segments()
    if distance_to_segments(probe[None], segs)[0] <= 1e-12 * scale:
        raise ValueError("side probe lies on the curve; side is ambiguous")

    if gamma.closed:
        region = Polygon(verts)
    else:
        tol = 1e-7 * scale
        for end in (verts[0], verts[-1]):
            on_edge = min(abs(end[0] - x0), abs(end[0] - x1), abs(end[1] - y0), abs(end[1] - y1))
            if on_edge > tol:
                raise ValueError("open curve must end on the domain boundary")
        # push the ends slightly outward so the split is clean
        pad = 1e-6 * scale
        first = verts[0] + pad * _unit(verts[0] - verts[1])
        last = verts[-1] + pad * _unit(verts[-1] - verts[-2])
        line = LineString(np.vstack([first, verts, last]))
        parts = list(split(box(x0, y0, x1, y1), line).geoms)
        if len(parts) != 2:
            raise ValueError(f"curve splits the domain into {len(parts)} parts, expected 2")
        region = parts[0]
    # boundary points of the box belong to the part they bound
    inside = shapely.intersects_xy(region, sites[:, 0], sites[:, 1])
    probe_inside = bool(shapely.intersects_xy(region, probe[0], probe[1]))
    dist = distance_to_segments(sites, segs)
    sign = np.where(inside == probe_inside, 1.0, -1.0)
    return samples.with_values(sign * dist)


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def curve_deviation(approx: list[Polyline], truth: list[Polyline]) -> float:
    """Discrete symmetric Hausdorff distance between two curve sets."""
    if not approx or not truth:
        raise ValueError("curve_deviation needs two non-empty curve sets")
    va = np.concatenate([c.vertices for c in approx])
    vb = np.concatenate([c.vertices for c in truth])
    d_ab = distance_to_segments(va, _all_segments(truth)).max()
    d_ba = distance_to_segments(vb, _all_segments(approx)).max()
    return float(max(d_ab, d_ba))


def write_polylines_csv(path, curves: list[Polyline]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("x,y\n")
        for n, c in enumerate(curves):
            if n:
                fh.write("\n")
            verts = c.vertices
            if c.closed:
                verts = np.vstack([verts, verts[:1]])
            for x, y in verts:
                fh.write(f"{float(x)!r},{float(y)!r}\n")


def read_polylines_csv(path) -> list[Polyline]:
    curves, current = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["x", "y"]:
            raise ValueError(f"{path}: expected header x,y")
        for row in reader:
            if not row or not "".join(row).strip():
                if current:
                    curves.append(current)
                current = []
                continue
            current.append((float(row[0]), float(row[1])))
    if current:
        curves.append(current)
    out = []
    for pts in curves:
        arr = np.array(pts)
        closed = len(arr) > 2 and np.array_equal(arr[0], arr[-1])
        out.append(Polyline(arr[:-1] if closed else arr, closed=closed))
    return out
