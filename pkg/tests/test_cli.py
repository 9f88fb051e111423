import csv
import json

import numpy as np
import pytest

from helmfci.cli import (DEFAULTS, EXIT_DIVERGED, EXIT_IO, EXIT_OK, EXIT_SCHEMA, ConfigError,
                         export_slice, main, read_slice, resolve_config, run)
from helmfci.operators import Grid3, write_wavespeed

SMALL = {"subcommand": "solve", "grid": {"dims": [8, 8, 8]}, "sponge": {"width": 2},
         "slices": [{"axis": 2, "index": 4}, {"axis": 0, "index": 1, "format": "raw"}]}


def test_defaults_and_frequency_resolution():
    cfg = resolve_config({"subcommand": "tune"})
    assert cfg["grid"]["l_min"] == 2.25 and cfg["frequency"] == pytest.approx(16 / 2.25)
    cfg = resolve_config({"subcommand": "solve", "frequency": 4.0})
    assert cfg["grid"]["l_min"] == pytest.approx(4.0)
    assert set(DEFAULTS) <= set(cfg)


@pytest.mark.parametrize("raw, path", [
    ({"subcommand": "solve", "grid": {"dims": [8, 8]}}, "grid/dims"),
    ({"subcommand": "solve", "bogus": 1}, "<root>"),
    ({"subcommand": "fly"}, "subcommand"),
    ({"subcommand": "solve", "frequency": 3.0, "grid": {"dims": [8, 8, 8], "l_min": 2.25}}, "frequency"),
    ({"subcommand": "solve", "model": {"kind": "file"}}, "paths/model_in"),
    ({"subcommand": "solve", "grid": {"l_min": 1.5}}, "grid/l_min"),
])
def test_schema_errors_name_the_key(raw, path):
    with pytest.raises(ConfigError) as exc:
        resolve_config(raw)
    assert exc.value.path == path


def test_schema_error_exit_code_leaves_no_output(tmp_path, capsys):
    out = tmp_path / "out"
    assert run({"subcommand": "solve", "grid": {"dims": "big"}}, str(out)) == EXIT_SCHEMA
    assert not out.exists()
    assert "grid/dims" in capsys.readouterr().err


def test_missing_model_is_an_io_error(tmp_path):
    out = tmp_path / "out"
    cfg = {**SMALL, "model": {"kind": "file"}, "paths": {"model_in": str(tmp_path / "none.raw")}}
    assert run(cfg, str(out)) == EXIT_IO
    assert not out.exists()


def test_unreached_tolerance_reports_divergence(tmp_path):
    out = tmp_path / "out"
    cfg = {**SMALL, "slices": [], "tolerances": {"outer_tol": 1e-12}, "outer": {"max_its": 1}}
    assert run(cfg, str(out)) == EXIT_DIVERGED
    fail = json.loads((out / "failure.json").read_text())
    assert "outer iteration" in fail["error"]
    assert not (out / "residuals.csv").exists()


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    out = tmp_path_factory.mktemp("solve")
    assert run(SMALL, str(out)) == EXIT_OK
    return out


def test_solve_outputs(solved):
    names = {p.name for p in solved.iterdir()}
    assert {"residuals.csv", "timings.csv", "diagnostics.json", "summary.json",
            "manifest.json"} <= names
    rows = list(csv.DictReader(open(solved / "residuals.csv")))
    res = [float(r["resnorm"]) for r in rows]
    assert res[0] == 1.0 and res[-1] <= 1e-6
    assert all(b <= a for a, b in zip(res, res[1:]))
    summary = json.loads((solved / "summary.json").read_text())
    assert summary["its"] == len(rows) - 1
    manifest = json.loads((solved / "manifest.json").read_text())
    assert manifest["manifest_version"] == 1 and manifest["config"]["grid"]["dims"] == [8, 8, 8]


def test_slice_files(solved):
    csvs = [p for p in solved.iterdir() if p.suffix == ".csv" and p.name.startswith("slice")]
    raws = [p for p in solved.iterdir() if p.suffix == ".raw"]
    assert len(csvs) == 1 and len(raws) == 1
    assert len(list(csv.reader(open(csvs[0])))) == 1 + 64
    assert read_slice(raws[0]).shape == (8, 8)


def test_replay_from_manifest_is_byte_identical(solved, tmp_path):
    again = tmp_path / "again"
    assert main(["--config", str(solved / "manifest.json"), "--output", str(again)]) == EXIT_OK
    assert (again / "residuals.csv").read_bytes() == (solved / "residuals.csv").read_bytes()


def test_file_model_round_trip(tmp_path):
    c = np.full(512, 2000.0)
    c[:100] = 4000.0
    write_wavespeed(tmp_path / "c.raw", c, (8, 8, 8))
    cfg = {**SMALL, "slices": [], "model": {"kind": "file"},
           "paths": {"model_in": str(tmp_path / "c.raw")}}
    assert run(cfg, str(tmp_path / "out")) == EXIT_OK


@pytest.mark.parametrize("sub, name", [("tune", "tune.csv"), ("spectrum", "spectrum.csv")])
def test_light_subcommands(sub, name, tmp_path):
    cfg = {"subcommand": sub, "grid": {"dims": [8, 8, 8]}, "tune": {"box": [-1, 2.8, 0.65]}}
    assert run(cfg, str(tmp_path)) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / name)))
    assert rows
    if sub == "tune":
        assert [int(r["q"]) for r in rows] == [1, 2, 3, 4, 5]
        assert float(rows[0]["nu"]) == pytest.approx(0.866, abs=0.01)


def test_bench_subcommand(tmp_path):
    cfg = {"subcommand": "bench-shifted",
           "bench_shifted": {"intervals": [[-1, 8]], "shifts": [[0, 1]], "size": 200}}
    assert run(cfg, str(tmp_path)) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "bench_shifted.csv")))
    assert [r["formulation"] for r in rows] == ["single", "doubled"]
    assert sum(int(r["cheaper"]) for r in rows) == 1


@pytest.mark.parametrize("axis, shape", [(0, (4, 3)), (1, (4, 5)), (2, (3, 5))])
def test_export_slice_orientation(axis, shape, tmp_path):
    g = Grid3(5, 3, 4, 2.25)
    field = np.arange(g.size) * (1 + 1j)
    export_slice(field, g, axis, 1, tmp_path / "s.raw", "raw")
    plane = read_slice(tmp_path / "s.raw")
    assert plane.shape == shape
    arr = field.reshape(g.shape)
    ref = np.take(arr, 1, axis=2 - axis)
    np.testing.assert_allclose(plane, ref.astype(np.complex64))


def test_export_slice_zero_field_and_bad_index(tmp_path):
    g = Grid3(4, 4, 4, 2.25)
    export_slice(np.zeros(g.size), g, 2, 0, tmp_path / "z.csv")
    rows = list(csv.DictReader(open(tmp_path / "z.csv")))
    assert all(float(r["abs"]) == 0 for r in rows)
    with pytest.raises(IndexError):
        export_slice(np.zeros(g.size), g, 2, 9, tmp_path / "bad.csv")
