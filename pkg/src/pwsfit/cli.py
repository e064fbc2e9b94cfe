"""Command-line front end: ``pws synth|fit|blend|study``.

Every run is described by one JSON document (see :class:`RunConfig`);
``--set key.sub=value`` overrides single entries.  Outputs are written to
``--out``; they are staged in a scratch directory and only moved into place
once the command has finished, so a failing run leaves no partial files.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import inspect
import json
import logging
import math
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blending, geometry, synth
from .geometry import MINUS, PLUS
from .objectives import Kind, ProblemSpec
from .optimizer import (
    DEConfig,
    FitOutcome,
    continuation_guess,
    fit_problem,
    initial_guess,
    local_bounds,
    outcome_from_params,
)
from .spline_core import SampleSet, make_knot_grid_1d, make_knot_grid_2d, spline_to_dict

log = logging.getLogger("pwsfit")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_QUALITY, EXIT_USAGE = 0, 1, 2

GENERATORS = {
    "univariate": synth.gen_univariate,
    "three_corner_continuous": synth.gen_three_corner_continuous,
    "jump": synth.gen_jump,
    "three_corner_jump": synth.gen_three_corner_jump,
}


class UsageError(Exception):
    """Bad configuration or unreadable input (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _from_dict(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise UsageError(f"{where} must be a JSON object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise UsageError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        sub = _SECTIONS.get((cls, k))
        kwargs[k] = _from_dict(sub, v, f"{where}.{k}") if sub else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{where}: {exc}") from None


@dataclass
class NoiseConfig:
    value_sigma: float = 0.0
    curve_amplitude: float = 0.0
    seed: int = 0


@dataclass
class SynthConfig:
    """Data generator name, its keyword parameters and the noise model."""

    generator: str = "jump"
    params: dict = field(default_factory=dict)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {sorted(GENERATORS)}")
        accepted = set(inspect.signature(GENERATORS[self.generator]).parameters) - {"noise"}
        unknown = sorted(set(self.params) - accepted)
        if unknown:
            raise ValueError(f"generator {self.generator!r} has no parameter(s) {unknown}")


@dataclass
class ProblemConfig:
    """Problem kind and spline spaces; ``rect`` defaults to the data bounds."""

    kind: str = "B_Jump"
    delta: float = 1.0
    delta_y: float | None = None
    rect: list | None = None
    variant: str | None = None
    inner_delta: float | None = None
    band_multiplier: float = 1.0
    band: float = 0.0
    neighbor_exclusion: bool = True
    outer: str = "sign"
    extension_neighbors: int = 16
    ill_posed: str = "penalty"
    guess_curve: str | None = None
    side_probe: list | None = None

    def __post_init__(self):
        try:
            Kind(self.kind)
        except ValueError:
            raise ValueError(f"kind must be one of {[k.value for k in Kind]}") from None


@dataclass
class DESection:
    population: int | None = None
    weight: float = 0.7
    crossover: float = 0.9
    max_generations: int = 400
    target_value: float = 0.0
    seed: int = 0
    bounds: list | None = None
    init_spread: float = 0.1
    guess_radius: float | None = None

    def to_de_config(self, **changes) -> DEConfig:
        d = dataclasses.asdict(self)
        d.update(changes)
        if d["bounds"] is not None and not isinstance(d["bounds"], tuple):
            d["bounds"] = tuple(d["bounds"])
        return DEConfig(**d)


@dataclass
class IOConfig:
    """``samples``: CSV to fit (synthesised from ``synth`` when null)."""

    samples: str | None = None


@dataclass
class ReportConfig:
    oversampling: int = 4
    band_multiple: float = 2.0
    max_sup_error: float | None = None
    max_objective: float | None = None


@dataclass
class BlendConfig:
    patches: list = field(default_factory=list)
    axis: str = "y"
    probe_count: int = 400


@dataclass
class StudyConfig:
    """Mesh-refinement study.

    ``generations`` optionally gives DE generations per level.  With
    ``continuation`` every level after the first starts from the signed
    distance of the previous level's zero set and searches a box of
    half-width ``local_radius * h`` around it; ``coarse_radius`` (if set)
    confines the first level to such a box around the default guess.
    With ``inner_multiple`` the linearly solved pieces (kinds B and C) are refitted on a grid of knot size
    ``inner_multiple * h`` before measuring; ``refit_band_multiplier``
    (if set) widens the excluded band of that refit to that many mesh
    sizes around the fitted curve.
    """

    h_list: list = field(default_factory=lambda: [0.25, 0.125, 0.0625])
    seeds: list = field(default_factory=lambda: [0])
    inner_multiple: float | None = 4.0
    refit_band_multiplier: float | None = None
    generations: list | None = None
    continuation: bool = True
    local_radius: float = 2.0
    local_spread: float = 0.2
    coarse_radius: float | None = None
    min_slope: float | None = None


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    de: DESection = field(default_factory=DESection)
    io: IOConfig = field(default_factory=IOConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    blend: BlendConfig = field(default_factory=BlendConfig)
    study: StudyConfig = field(default_factory=StudyConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _from_dict(cls, data, "config")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    (RunConfig, "synth"): SynthConfig,
    (RunConfig, "problem"): ProblemConfig,
    (RunConfig, "de"): DESection,
    (RunConfig, "io"): IOConfig,
    (RunConfig, "report"): ReportConfig,
    (RunConfig, "blend"): BlendConfig,
    (RunConfig, "study"): StudyConfig,
    (SynthConfig, "noise"): NoiseConfig,
}


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``key.sub=value`` strings; values are parsed as JSON, else kept as text."""
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set {key}: {p} is not a section")
        node[parts[-1]] = value
    return data


def load_config(path, overrides=()) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    return RunConfig.from_dict(apply_overrides(data, overrides))


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_samples_csv(path, samples: SampleSet) -> None:
    header = ["x", "f"] if samples.dim == 1 else ["x", "y", "f"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for site, v in zip(samples.sites, samples.values):
            w.writerow([repr(float(c)) for c in site] + [repr(float(v))])


def read_samples_csv(path, mesh_h=None) -> SampleSet:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise UsageError(f"cannot read samples: {exc}") from None
    if not rows or [c.strip() for c in rows[0]] not in (["x", "f"], ["x", "y", "f"]):
        raise UsageError(f"{path}: header must be 'x,f' or 'x,y,f'")
    width = len(rows[0])
    body = [r for r in rows[1:] if r]
    try:
        data = np.array([[float(c) for c in r] for r in body], dtype=float)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if data.ndim != 2 or data.shape[1] != width or len(data) == 0:
        raise UsageError(f"{path}: expected {width} columns in every row")
    sites = data[:, 0] if width == 2 else data[:, :2]
    return SampleSet(sites, data[:, -1], mesh_h)


def write_grid_csv(path, points, values) -> None:
    points = np.asarray(points, dtype=float)
    header = ["x", "value"] if points.ndim == 1 or points.shape[1] == 1 else ["x", "y", "value"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for p, v in zip(points.reshape(len(values), -1), values):
            w.writerow([repr(float(c)) for c in p] + [repr(float(v))])


def write_labels_csv(path, sites, labels) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "label"])
        for p, lab in zip(sites, labels):
            w.writerow([repr(float(p[0])), repr(float(p[1])), int(lab)])


def _clean(obj):
    """Make ``obj`` JSON-ready: numpy scalars to Python, non-finite floats to ``None``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


class Staging:
    """Scratch directory whose files are moved to ``out`` on success only."""

    def __init__(self, out):
        self.out = Path(out)

    def __enter__(self) -> Path:
        parent = self.out.parent if self.out.parent.exists() else Path(tempfile.gettempdir())
        self.dir = Path(tempfile.mkdtemp(prefix=".pws-", dir=parent))
        return self.dir

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self.out.mkdir(parents=True, exist_ok=True)
                for f in sorted(self.dir.iterdir()):
                    shutil.move(str(f), self.out / f.name)
        finally:
            shutil.rmtree(self.dir, ignore_errors=True)
        return False


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def generate(cfg: SynthConfig, **overrides):
    """Samples and ground truth from the synth section (``overrides`` replace params)."""
    params = {k: _tuplify(v) for k, v in {**cfg.params, **overrides}.items()}
    noise = synth.NoiseSpec(**dataclasses.asdict(cfg.noise))
    try:
        return GENERATORS[cfg.generator](noise=noise, **params)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"synth: {exc}") from None


def build_spec(cfg: ProblemConfig, samples: SampleSet, inner_delta=None) -> ProblemSpec:
    kind = Kind(cfg.kind)
    inner_delta = cfg.inner_delta if inner_delta is None else inner_delta
    try:
        if kind.univariate:
            a, b = cfg.rect if cfg.rect is not None else samples.bounds[:2]
            grid = make_knot_grid_1d(a, b, cfg.delta)
            inner = make_knot_grid_1d(a, b, inner_delta) if inner_delta else None
        else:
            rect = tuple(cfg.rect) if cfg.rect is not None else samples.bounds
            grid = make_knot_grid_2d(rect, cfg.delta, cfg.delta_y)
            inner = make_knot_grid_2d(rect, inner_delta) if inner_delta else None
        return ProblemSpec(kind, samples, grid, variant=cfg.variant, inner_grid=inner,
                           band_multiplier=cfg.band_multiplier, band=cfg.band,
                           neighbor_exclusion=cfg.neighbor_exclusion, outer=cfg.outer,
                           extension_neighbors=cfg.extension_neighbors, ill_posed=cfg.ill_posed)
    except ValueError as exc:
        raise UsageError(f"problem: {exc}") from None


def _dense_points(samples: SampleSet, oversampling: int) -> np.ndarray:
    step = samples.mesh_h / oversampling
    if samples.dim == 1:
        a, b = samples.bounds[:2]
        n = int(round((b - a) / step)) + 1
        return np.linspace(a, b, n)
    pts = np.stack(np.meshgrid(*geometry.lattice_axes(samples.bounds, step), indexing="ij"), axis=-1)
    return pts.reshape(-1, 2)


def orientation_reversed(outcome: FitOutcome, truth) -> bool:
    """Whether the positive side of ``g_gamma`` mostly covers the truth's minus region."""
    sites = outcome.spec.samples.sites
    sign = np.sign(outcome.splines["g_gamma"](sites))
    return bool(np.mean(sign == truth.region(sites)) < 0.5)


def _band_mask(points, truth, width):
    if truth.curves:
        return geometry.dist_to_polylines(points, truth.curves) <= width
    if truth.breaks:
        x = np.asarray(points).reshape(-1)
        return np.min(np.abs(x[:, None] - np.asarray(truth.breaks)[None, :]), axis=1) <= width
    return np.zeros(len(points), dtype=bool)


def _stats(err):
    if err.size == 0:
        return {"sup": None, "rms": None, "points": 0}
    return {"sup": float(np.max(err)), "rms": float(np.sqrt(np.mean(err**2))), "points": int(err.size)}


def region_errors(outcome: FitOutcome, truth, oversampling=4, band_multiple=2.0) -> dict:
    """Sup and RMS errors per truth region on a dense grid, outside a band around the singularities.

    For jump problems each region is measured against its own piece
    (``g_plus`` on the plus region, ``g_minus`` on the minus region);
    otherwise the composed approximation is used.
    """
    samples = outcome.spec.samples
    pts = _dense_points(samples, oversampling)
    keep = ~_band_mask(pts, truth, band_multiple * samples.mesh_h)
    pts = pts[keep]
    labels = np.asarray(truth.region(pts))
    exact = np.asarray(truth.function(pts))
    out = {}
    if outcome.spec.kind is Kind.B_JUMP:
        names = {PLUS: "g_plus", MINUS: "g_minus"}
        if orientation_reversed(outcome, truth):
            names = {PLUS: "g_minus", MINUS: "g_plus"}
        for lab, tag in ((PLUS, "plus"), (MINUS, "minus")):
            m = labels == lab
            approx = outcome.splines[names[lab]](pts[m]) if m.any() else np.empty(0)
            out[tag] = _stats(np.abs(approx - exact[m]))
        out["composed"] = _stats(np.abs(outcome.evaluate(pts) - exact))
        return out
    err = np.abs(outcome.evaluate(pts) - exact)
    for lab in sorted(set(labels.tolist())):
        out[f"region_{lab}"] = _stats(err[labels == lab])
    out["composed"] = _stats(err)
    return out


def _best_sector_permutation(pred, truth_labels):
    import itertools

    best, best_hits = None, -1
    for perm in itertools.permutations((1, 2, 3)):
        mapped = np.zeros_like(pred)
        for i, p in enumerate(perm, start=1):
            mapped[pred == i] = p
        hits = int(np.sum(mapped == truth_labels))
        if hits > best_hits:
            best, best_hits = perm, hits
    return best


def misclassification(outcome: FitOutcome, truth, band_multiple=2.0) -> dict:
    """Census of samples put on the wrong side, with their distances to the true curves."""
    spec = outcome.spec
    sites, h = spec.samples.sites, spec.samples.mesh_h
    true = np.asarray(truth.region(sites))
    if spec.kind is Kind.B_JUMP:
        pred = np.where(outcome.splines["g_gamma"](sites) > 0, PLUS, MINUS)
        if orientation_reversed(outcome, truth):
            pred = -pred
        extra = {"orientation_reversed": orientation_reversed(outcome, truth)}
    elif spec.kind is Kind.C_THREE_CORNER:
        hv = np.column_stack([outcome.splines[f"h{i}"](sites) for i in (1, 2, 3)])
        raw = np.argmax(hv, axis=1) + 1
        perm = _best_sector_permutation(raw, true)
        pred = np.array(perm)[raw - 1]
        labels = np.asarray(outcome.segmentation.labels)
        outside = geometry.dist_to_polylines(sites, truth.curves) > band_multiple * h
        # excluded samples count as wrong
        seg = np.where(labels > 0, np.array((0,) + perm)[labels], 0)
        correct = (seg == true) & outside
        extra = {"label_permutation": list(perm),
                 "fraction_correct_outside_band": float(correct.sum() / max(outside.sum(), 1))}
    else:
        return {}
    wrong = pred != true
    dist = geometry.dist_to_polylines(sites[wrong], truth.curves) if wrong.any() else np.zeros(0)
    max_d = float(dist.max()) if dist.size else 0.0
    return {"count": int(wrong.sum()), "max_distance": max_d, "max_distance_over_h": max_d / h,
            "all_within_2h": bool(max_d <= 2 * h), **extra}


def fit_report(cfg: RunConfig, outcome: FitOutcome, truth, warnings_) -> dict:
    res = outcome.result
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "fit",
        "kind": outcome.spec.kind.value,
        "optimizer_dimension": outcome.dim,
        "samples": len(outcome.spec.samples),
        "mesh_h": outcome.spec.samples.mesh_h,
        "objective": {
            "best": res.best_value,
            "initial": res.trace[0],
            "generations": len(res.trace) - 1,
            "evaluations": res.evaluations,
            "converged": res.converged,
            "well_posed": outcome.objective.well_posed,
            "penalized": outcome.objective.penalized,
        },
        "seeds": {"de": cfg.de.seed, "noise": cfg.synth.noise.seed},
        "warnings": list(warnings_),
        "config": cfg.to_dict(),
    }
    if truth is not None:
        rc = cfg.report
        report["errors"] = region_errors(outcome, truth, rc.oversampling, rc.band_multiple)
        census = misclassification(outcome, truth, rc.band_multiple)
        if census:
            report["misclassification"] = census
        if outcome.spec.kind is Kind.B_JUMP and outcome.curves and truth.curves:
            report["curve_deviation"] = geometry.curve_deviation(outcome.curves, truth.curves)
    return report


def quality_failures(cfg: ReportConfig, report: dict) -> list[str]:
    failures = []
    if cfg.max_objective is not None and not report["objective"]["best"] <= cfg.max_objective:
        failures.append(f"objective {report['objective']['best']:.4g} > {cfg.max_objective}")
    if cfg.max_sup_error is not None and "errors" in report:
        worst = max((e["sup"] for e in report["errors"].values() if e["sup"] is not None), default=0.0)
        if not worst <= cfg.max_sup_error:
            failures.append(f"sup error {worst:.4g} > {cfg.max_sup_error}")
    return failures


def _fit_warnings(spec: ProblemSpec) -> list[str]:
    out = []
    if spec.kind is Kind.B_JUMP:
        m = min(spec.grid.gx.delta, spec.grid.gy.delta) / spec.samples.mesh_h
        if m <= 3:
            out.append(f"knot spacing is only {m:.3g} data spacings; m > 3 is recommended")
    return out


def _sidecar_path(samples_path) -> Path:
    return Path(samples_path).with_suffix(".json")


def load_data(cfg: RunConfig):
    """Samples to fit and, when known, the ground truth behind them."""
    if cfg.io.samples is None:
        return generate(cfg.synth)
    path = Path(cfg.io.samples)
    if not path.is_file():
        raise UsageError(f"samples file not found: {path}")
    sidecar = _sidecar_path(path)
    truth, mesh_h = None, None
    if sidecar.is_file():
        try:
            meta = json.loads(sidecar.read_text(encoding="utf-8"))
            synth_cfg = _from_dict(SynthConfig, meta["synth"], "sidecar.synth")
            mesh_h = meta.get("mesh_h")
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"unreadable sidecar {sidecar}: {exc}") from None
        _, truth = generate(synth_cfg)
    return read_samples_csv(path, mesh_h), truth


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out: Path) -> int:
    samples, truth = generate(cfg.synth)
    with Staging(out) as tmp:
        write_samples_csv(tmp / "samples.csv", samples)
        dump_json(tmp / "samples.json", {
            "schema_version": SCHEMA_VERSION,
            "synth": dataclasses.asdict(cfg.synth),
            "samples": len(samples),
            "mesh_h": samples.mesh_h,
            "breaks": list(truth.breaks),
        })
        if truth.curves:
            geometry.write_polylines_csv(tmp / "truth_curves.csv", truth.curves)
    log.info("wrote %d samples to %s", len(samples), out)
    return EXIT_OK


def _guess_curve(cfg: ProblemConfig):
    if cfg.guess_curve is None:
        return None, None
    try:
        curves = geometry.read_polylines_csv(cfg.guess_curve)
    except OSError as exc:
        raise UsageError(f"cannot read guess curve: {exc}") from None
    if len(curves) != 1 or cfg.side_probe is None:
        raise UsageError("guess_curve needs exactly one polyline and a side_probe")
    return curves[0], np.asarray(cfg.side_probe, dtype=float)


def patch_payload(outcome: FitOutcome) -> dict:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": outcome.spec.kind.value,
        "params": outcome.result.best_params,
        "splines": {n: spline_to_dict(s) for n, s in outcome.splines.items()},
        "mesh_h": outcome.spec.samples.mesh_h,
        "domain": list(outcome.spec.samples.bounds),
    }
    if outcome.spec.kind in (Kind.A_MAX3, Kind.B_JUMP):
        payload["patch"] = blending.PatchApprox.from_outcome(outcome).to_dict()
    return payload


def cmd_fit(cfg: RunConfig, out: Path) -> int:
    samples, truth = load_data(cfg)
    spec = build_spec(cfg.problem, samples)
    curve, probe = _guess_curve(cfg.problem)
    warnings_ = _fit_warnings(spec)
    for w in warnings_:
        log.warning(w)
    started = time.perf_counter()
    try:
        outcome = fit_problem(spec, cfg.de.to_de_config(), guess_curve=curve, side_probe=probe)
    except ValueError as exc:
        raise UsageError(f"fit: {exc}") from None
    seconds = time.perf_counter() - started
    if not outcome.objective.well_posed:
        warnings_.append("best parameters give an ill-posed inner least-squares fit")
    if not outcome.result.converged and cfg.de.target_value > 0:
        warnings_.append("target value not reached")
    report = fit_report(cfg, outcome, truth, warnings_)
    failures = quality_failures(cfg.report, report)
    report["quality_failures"] = failures
    with Staging(out) as tmp:
        dump_json(tmp / "report.json", report)
        dump_json(tmp / "timing.json", {"fit_seconds": seconds})
        dump_json(tmp / "coeffs.json", patch_payload(outcome))
        pts = _dense_points(samples, cfg.report.oversampling)
        write_grid_csv(tmp / "grid.csv", pts, outcome.evaluate(pts))
        res = outcome.result
        pop = cfg.de.to_de_config().population_size(outcome.dim)
        res.write_trace_csv(tmp / "trace.csv", [pop * (g + 1) for g in range(len(res.trace))])
        if spec.kind is Kind.B_JUMP:
            geometry.write_polylines_csv(tmp / "zero_set.csv", outcome.curves)
        if spec.kind in (Kind.B_JUMP, Kind.C_THREE_CORNER):
            write_labels_csv(tmp / "segmentation.csv", samples.sites, outcome.segmentation.labels)
    for f in failures:
        log.error("quality check failed: %s", f)
    return EXIT_QUALITY if failures else EXIT_OK


def _load_patch(path) -> blending.PatchApprox:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read patch {path}: {exc}") from None
    if "patch" not in payload:
        raise UsageError(f"{path} is not an A_Max3 or B_Jump fit")
    return blending.PatchApprox.from_dict(payload["patch"])


def cmd_blend(cfg: RunConfig, out: Path) -> int:
    bc = cfg.blend
    if len(bc.patches) != 2:
        raise UsageError("blend.patches must list exactly two coeffs.json files")
    p1, p2 = (_load_patch(p) for p in bc.patches)
    try:
        if p1.kind == "A":
            blended = blending.blend_a(p1, p2, bc.axis, bc.probe_count)
        else:
            blended = blending.blend_b(p1, p2, bc.axis)
    except ValueError as exc:
        raise UsageError(f"blend: {exc}") from None
    step = min(p1.mesh_h, p2.mesh_h) / cfg.report.oversampling
    xs, ys = geometry.lattice_axes(blended.domain, step)
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    inside = np.zeros(len(pts), dtype=bool)
    for p in (p1, p2):
        x0, x1, y0, y1 = p.domain
        inside |= (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
    pts = pts[inside]
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "blend",
        "kind": p1.kind,
        "axis": bc.axis,
        "overlap": list(blended.overlap),
        "lower_patch_domain": list(blended.p1.domain),
        "config": cfg.to_dict(),
    }
    if p1.kind == "A":
        report["permutation"] = [i + 1 for i in blended.permutation]
    else:
        report["alpha"] = blended.alpha
        report["orientation_reversed"] = blended.reversed
    with Staging(out) as tmp:
        dump_json(tmp / "report.json", report)
        write_grid_csv(tmp / "blend_grid.csv", pts, blended(pts))
    return EXIT_OK


def _check_geometric(h_list):
    h = np.asarray(h_list, dtype=float)
    if h.size < 3:
        raise UsageError("study needs at least three mesh sizes")
    if np.any(h <= 0):
        raise UsageError("mesh sizes must be positive")
    ratios = h[1:] / h[:-1]
    if not np.allclose(ratios, ratios[0], rtol=1e-9):
        raise UsageError(f"mesh sizes must form a geometric progression, ratios {ratios.tolist()}")


def fit_slope(hs, errors, floor=1e-11):
    """Least-squares slope of log2(error) against log2(h), with its standard error.

    Returns ``"floor"`` when every error is at the rounding floor, and
    ``None`` with fewer than two usable points.
    """
    from scipy import stats

    hs, errors = np.asarray(hs, dtype=float), np.asarray(errors, dtype=float)
    ok = np.isfinite(errors)
    if ok.any() and np.all(errors[ok] <= floor):
        return {"slope": "floor", "stderr": None, "points": int(ok.sum())}
    ok &= errors > 0
    if ok.sum() < 2:
        return {"slope": None, "stderr": None, "points": int(ok.sum())}
    fit = stats.linregress(np.log2(hs[ok]), np.log2(errors[ok]))
    stderr = float(fit.stderr) if ok.sum() > 2 else None
    return {"slope": float(fit.slope), "stderr": stderr, "points": int(ok.sum())}


def _level_seed(base: int, seed: int, level: int) -> int:
    return int(np.random.SeedSequence([base, seed, level]).generate_state(1)[0])


def run_study(cfg: RunConfig):
    """Fit noiseless data at every mesh size; returns ``(rows, summary, seconds)``."""
    sc = cfg.study
    _check_geometric(sc.h_list)
    h_list = [float(h) for h in sc.h_list]
    if sc.generations is not None and len(sc.generations) != len(h_list):
        raise UsageError("study.generations needs one entry per mesh size")
    quiet = dataclasses.replace(cfg.synth, noise=NoiseConfig(seed=cfg.synth.noise.seed))
    spacing = "step" if cfg.synth.generator == "univariate" else "mesh_h"
    rows, seconds = [], {}
    for seed in sc.seeds:
        previous = None
        for level, h in enumerate(h_list):
            started = time.perf_counter()
            samples, truth = generate(quiet, **{spacing: h})
            spec = build_spec(cfg.problem, samples, inner_delta=None)
            gens = sc.generations[level] if sc.generations is not None else cfg.de.max_generations
            de = cfg.de.to_de_config(seed=_level_seed(cfg.de.seed, seed, level), max_generations=gens)
            guess = None
            if spec.kind is Kind.B_JUMP and sc.continuation and previous is not None:
                guess = continuation_guess(spec, previous)
                de = dataclasses.replace(de, bounds=local_bounds(guess, sc.local_radius * h),
                                         init_spread=sc.local_spread)
            elif spec.kind is Kind.B_JUMP and sc.coarse_radius is not None:
                guess = initial_guess(spec)
                de = dataclasses.replace(de, bounds=local_bounds(guess, sc.coarse_radius),
                                         init_spread=sc.local_spread)
            outcome = fit_problem(spec, de, guess=guess)
            previous = outcome
            measured = outcome
            if sc.inner_multiple and spec.kind in (Kind.B_JUMP, Kind.C_THREE_CORNER):
                inner = build_spec(cfg.problem, samples, inner_delta=sc.inner_multiple * h)
                if sc.refit_band_multiplier is not None:
                    inner = inner.replace(band_multiplier=sc.refit_band_multiplier)
                measured = outcome_from_params(inner, outcome.result.best_params, outcome.result)
            errs = region_errors(measured, truth, cfg.report.oversampling, cfg.report.band_multiple)
            census = misclassification(outcome, truth, cfg.report.band_multiple)
            row = {"seed": seed, "h": h, "samples": len(samples), "objective": outcome.result.best_value,
                   "valid": not measured.objective.penalized,
                   "well_posed": measured.objective.well_posed}
            for region, e in errs.items():
                row[f"sup_{region}"] = e["sup"]
                row[f"rms_{region}"] = e["rms"]
            if census:
                row["misclassified"] = census["count"]
                row["max_mis_distance_over_h"] = census["max_distance_over_h"]
            if spec.kind is Kind.B_JUMP:
                row["curve_deviation"] = geometry.curve_deviation(outcome.curves, truth.curves)
            rows.append(row)
            seconds[f"seed{seed}_h{h}"] = time.perf_counter() - started
            log.info("study seed %s h=%g: %s", seed, h, {k: v for k, v in row.items() if k.startswith("sup")})
    return rows, _study_summary(rows, h_list), seconds


def _study_summary(rows, h_list) -> dict:
    regions = sorted({k[4:] for r in rows for k in r if k.startswith("sup_")})
    slopes = {}
    for region in regions:
        med = []
        for h in h_list:
            vals = [r[f"sup_{region}"] for r in rows if r["h"] == h and r["valid"] and r[f"sup_{region}"] is not None]
            med.append(float(np.median(vals)) if vals else math.nan)
        slopes[region] = {"median_sup": med, **fit_slope(h_list, med)}
    summary = {"h_list": h_list, "slopes": slopes, "flagged_rows": sum(not r["valid"] for r in rows)}
    if rows and "max_mis_distance_over_h" in rows[0]:
        summary["all_misclassified_within_2h"] = all(r["max_mis_distance_over_h"] <= 2 for r in rows)
    return summary


def cmd_study(cfg: RunConfig, out: Path) -> int:
    rows, summary, seconds = run_study(cfg)
    failures = []
    if cfg.study.min_slope is not None:
        for region, s in summary["slopes"].items():
            if region == "composed":
                continue
            if s["slope"] != "floor" and not (s["slope"] is not None and s["slope"] >= cfg.study.min_slope):
                failures.append(f"{region} slope {s['slope']} < {cfg.study.min_slope}")
    report = {"schema_version": SCHEMA_VERSION, "command": "study", "summary": summary,
              "rows": rows, "quality_failures": failures, "config": cfg.to_dict()}
    with Staging(out) as tmp:
        dump_json(tmp / "report.json", report)
        dump_json(tmp / "timing.json", seconds)
        columns = list(dict.fromkeys(k for r in rows for k in r))
        with open(tmp / "study.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, columns, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                            for k, v in r.items()})
    for f in failures:
        log.error("quality check failed: %s", f)
    return EXIT_QUALITY if failures else EXIT_OK


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "blend": cmd_blend, "study": cmd_study}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pws", description="Piecewise-smooth spline fitting.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config entry, e.g. de.seed=3 (repeatable)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, Path(args.out))
    except UsageError as exc:
        print(f"pws {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
