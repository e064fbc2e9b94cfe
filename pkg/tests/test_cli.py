import json

import numpy as np
import pytest

from pwsfit import blending, cli
from pwsfit.cli import RunConfig, UsageError, main
from pwsfit.spline_core import SampleSet, Spline2D, make_knot_grid_2d

UNIVARIATE = {
    "synth": {"generator": "univariate"},
    "problem": {"kind": "Univ_Min", "delta": 1.5},
    "de": {"population": 40, "max_generations": 1000, "seed": 0},
}


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def test_config_round_trips_and_rejects_unknown_keys():
    cfg = RunConfig.from_dict(UNIVARIATE)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.de.population == 40 and cfg.problem.delta == 1.5
    with pytest.raises(UsageError, match="unknown key"):
        RunConfig.from_dict({"de": {"populaton": 3}})
    with pytest.raises(UsageError, match="no parameter"):
        RunConfig.from_dict({"synth": {"generator": "jump", "params": {"radius": 1}}})
    with pytest.raises(UsageError):
        RunConfig.from_dict({"problem": {"kind": "Nope"}})


def test_overrides_are_parsed_as_json_with_text_fallback():
    data = cli.apply_overrides({}, ["de.seed=3", "problem.variant=full", "study.h_list=[0.5, 0.25]"])
    assert data == {"de": {"seed": 3}, "problem": {"variant": "full"}, "study": {"h_list": [0.5, 0.25]}}
    with pytest.raises(UsageError):
        cli.apply_overrides({}, ["novalue"])
    with pytest.raises(UsageError):
        cli.apply_overrides({"de": 3}, ["de.seed=1"])


def test_synth_is_deterministic_and_noiseless_data_matches_truth(tmp_path):
    cfg = write_config(tmp_path, {"synth": {"generator": "jump", "params": {"mesh_h": 0.25},
                                            "noise": {"value_sigma": 0.1, "seed": 3}}})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    for f in ("samples.csv", "samples.json", "truth_curves.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert main(["synth", "--config", cfg, "--set", "synth.noise.value_sigma=0",
                 "--out", str(tmp_path / "c")]) == 0
    s = cli.read_samples_csv(tmp_path / "c" / "samples.csv")
    _, truth = cli.generate(RunConfig.from_dict(json.loads(open(cfg).read())).synth)
    np.testing.assert_array_equal(s.values, truth.function(s.sites))
    assert len(s) == 25 * 25


def test_missing_samples_file_is_a_usage_error_without_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["fit", "--set", "io.samples=nowhere.csv", "--out", str(out)])
    assert code == 2 and not out.exists()
    assert "not found" in capsys.readouterr().err


def test_bad_arguments_exit_with_usage_code(tmp_path):
    assert main(["frobnicate"]) == 2
    assert main(["fit", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["fit", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_univariate_fit_end_to_end_is_accurate_and_reproducible(tmp_path):
    cfg = write_config(tmp_path, {**UNIVARIATE, "report": {"max_sup_error": 1e-3}})
    assert main(["fit", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["fit", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["optimizer_dimension"] == 10
    assert report["errors"]["composed"]["sup"] < 1e-3
    for f in ("report.json", "coeffs.json", "grid.csv", "trace.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    trace = np.loadtxt(tmp_path / "a" / "trace.csv", delimiter=",", skiprows=1)
    assert np.all(np.diff(trace[:, 1]) <= 0)
    assert "fit_seconds" in json.loads((tmp_path / "a" / "timing.json").read_text())


def test_quality_gate_gives_exit_code_one(tmp_path):
    cfg = write_config(tmp_path, {**UNIVARIATE, "de": {"max_generations": 0},
                                  "report": {"max_sup_error": 1e-9}})
    out = tmp_path / "q"
    assert main(["fit", "--config", cfg, "--out", str(out)]) == 1
    assert json.loads((out / "report.json").read_text())["quality_failures"]


def test_fit_from_csv_uses_the_sidecar_truth(tmp_path):
    cfg = write_config(tmp_path, UNIVARIATE)
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    out = tmp_path / "f"
    assert main(["fit", "--config", cfg, "--set", f"io.samples={tmp_path / 's' / 'samples.csv'}",
                 "--set", "de.max_generations=5", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert "errors" in report and report["samples"] == 301


def test_three_region_problem_has_27_unknowns(tmp_path):
    cfg = write_config(tmp_path, {"synth": {"generator": "three_corner_jump", "params": {"mesh_h": 0.25}},
                                  "problem": {"kind": "C_ThreeCorner", "delta": 2.0},
                                  "de": {"max_generations": 0}})
    out = tmp_path / "c"
    assert main(["fit", "--config", cfg, "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["optimizer_dimension"] == 27
    assert (out / "segmentation.csv").read_text().startswith("x,y,label\n")


def knot_spline(rect, fn, delta=0.5):
    g = make_knot_grid_2d(rect, delta)
    kx, ky = np.meshgrid(g.gx.knots, g.gy.knots, indexing="ij")
    return Spline2D(g, fn(np.column_stack([kx.ravel(), ky.ravel()])))


def write_patch(path, rect, kind, fns, mesh_h=0.125):
    names = blending.A_NAMES if kind == "A" else blending.B_NAMES
    patch = blending.PatchApprox(rect, kind, {n: knot_spline(rect, f) for n, f in zip(names, fns)}, mesh_h)
    path.write_text(json.dumps({"patch": patch.to_dict()}))
    return str(path)


def test_blend_command_reports_pairing_and_scale(tmp_path):
    sheets = [lambda p: 0.8 * p[:, 1] - 0.4, lambda p: -0.9 * p[:, 0] - 0.3 * p[:, 1],
              lambda p: 0.6 * p[:, 0] - 0.5 * p[:, 1] + 0.1]
    a1 = write_patch(tmp_path / "a1.json", (-2, 2, -2, 0.5), "A", sheets)
    a2 = write_patch(tmp_path / "a2.json", (-2, 2, -0.5, 2), "A", [sheets[2], sheets[0], sheets[1]])
    cfg = write_config(tmp_path, {"blend": {"patches": [a1, a2]}})
    assert main(["blend", "--config", cfg, "--out", str(tmp_path / "ba")]) == 0
    report = json.loads((tmp_path / "ba" / "report.json").read_text())
    assert report["permutation"] == [2, 3, 1] and report["overlap"] == [-2, 2, -0.5, 0.5]

    gamma = lambda p: p[:, 1] - 0.3 * p[:, 0]
    b1 = write_patch(tmp_path / "b1.json", (-2, 2, -2, 0.5), "B", [gamma, lambda p: 1 + 0 * p[:, 0], lambda p: 0 * p[:, 0]])
    b2 = write_patch(tmp_path / "b2.json", (-2, 2, -0.5, 2), "B",
                     [lambda p: 5 * gamma(p), lambda p: 1 + 0 * p[:, 0], lambda p: 0 * p[:, 0]])
    cfg = write_config(tmp_path, {"blend": {"patches": [b1, b2]}}, "b.json")
    assert main(["blend", "--config", cfg, "--out", str(tmp_path / "bb")]) == 0
    report = json.loads((tmp_path / "bb" / "report.json").read_text())
    assert report["alpha"] == pytest.approx(5.0, abs=1e-10) and not report["orientation_reversed"]
    grid = np.loadtxt(tmp_path / "bb" / "blend_grid.csv", delimiter=",", skiprows=1)
    side = grid[:, 1] - 0.3 * grid[:, 0]
    off = np.abs(side) > 1e-9
    np.testing.assert_allclose(grid[off, 2], (side[off] > 0).astype(float), atol=1e-12)

    cfg = write_config(tmp_path, {"blend": {"patches": [a1]}}, "c.json")
    assert main(["blend", "--config", cfg, "--out", str(tmp_path / "bc")]) == 2


def test_study_rejects_non_geometric_mesh_sizes(tmp_path):
    out = tmp_path / "s"
    assert main(["study", "--set", "study.h_list=[0.25, 0.2, 0.1]", "--out", str(out)]) == 2
    assert not out.exists()


def test_slope_fit():
    hs = [0.25, 0.125, 0.0625]
    s = cli.fit_slope(hs, [3 * h**4 for h in hs])
    assert s["slope"] == pytest.approx(4.0) and s["points"] == 3
    assert cli.fit_slope(hs, [1e-13, 1e-12, 1e-14])["slope"] == "floor"


def test_univariate_study_runs_and_summarises(tmp_path):
    cfg = write_config(tmp_path, {**UNIVARIATE, "de": {"population": 40, "seed": 0},
                                  "study": {"h_list": [0.04, 0.02, 0.01], "generations": [200, 200, 200]}})
    out = tmp_path / "st"
    assert main(["study", "--config", cfg, "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert [r["h"] for r in report["rows"]] == [0.04, 0.02, 0.01]
    assert set(report["summary"]["slopes"]) >= {"composed"}
    header = (out / "study.csv").read_text().splitlines()[0]
    assert header.startswith("seed,h,samples,objective,valid")


def test_samples_csv_round_trip_and_validation(tmp_path):
    s = SampleSet(np.array([[0.0, 1.0], [0.5, 1.0]]), np.array([1.0 / 3, -2.0]))
    cli.write_samples_csv(tmp_path / "s.csv", s)
    back = cli.read_samples_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.sites, s.sites)
    np.testing.assert_array_equal(back.values, s.values)
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(UsageError):
        cli.read_samples_csv(tmp_path / "bad.csv")


def test_staging_discards_partial_output_on_failure(tmp_path):
    out = tmp_path / "o"
    with pytest.raises(RuntimeError):
        with cli.Staging(out) as tmp:
            (tmp / "x.txt").write_text("partial")
            raise RuntimeError
    assert not out.exists()


def test_json_output_replaces_non_finite_numbers(tmp_path):
    cli.dump_json(tmp_path / "j.json", {"b": float("nan"), "a": np.float64(1.5), "c": [np.inf]})
    assert json.loads((tmp_path / "j.json").read_text()) == {"a": 1.5, "b": None, "c": [None]}
