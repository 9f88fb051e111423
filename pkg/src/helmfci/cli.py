"""Command-line front end: JSON-configured runs with manifests and CSV/JSON reports.

Usage::

    helmfci --config run.json --output out/

The configuration names the subcommand. Every defaulted field is written back
into ``manifest.json``, which is itself a valid configuration for a replay.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import shutil
import subprocess
import sys
import tempfile
import time
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import __version__
from .core import ConvergenceError, DimensionError
from .fci import (FORMULATIONS, SolverConfig, bench_shifted, build_problem, interval_test_operator,
                  outer_solve, prepare)
from .operators import Grid3, ModelError, WavespeedModel, read_wavespeed
from .polysolve import NoConvergentSchemeError, scan_orders, tune_scheme
from .spectrum import SpectralBox, box_from_operator, doubled_box, make_contour, default_eps

EXIT_OK, EXIT_SCHEMA, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
SUBCOMMANDS = ("solve", "tune", "spectrum", "bench-shifted", "scale")
MANIFEST_VERSION = 1


def _obj(props: dict, **extra) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, **extra}


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = _obj({
    "subcommand": {"enum": list(SUBCOMMANDS)},
    "discretization": {"enum": ["spectral", "fd7"]},
    "formulation": {"enum": list(FORMULATIONS)},
    "grid": _obj({"dims": {"type": "array", "items": _INT1, "minItems": 3, "maxItems": 3},
                  "l_min": {"type": ["number", "null"], "exclusiveMinimum": 2}}),
    "frequency": {"type": ["number", "null"], "exclusiveMinimum": 0},
    "model": _obj({"kind": {"enum": ["eight-anomaly", "constant", "file"]},
                   "contrast": {"type": "number", "minimum": 1}}),
    "sponge": _obj({"width": {"type": ["integer", "null"], "minimum": 0},
                    "strength": {"type": "number", "minimum": 0}}),
    "contour": _obj({"J": {"type": "integer", "minimum": 2},
                     "t": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                     "eps": {"type": ["number", "null"], "exclusiveMinimum": 0},
                     "eps_coefficient": {"type": ["number", "null"], "exclusiveMinimum": 0}}),
    "tolerances": _obj({"outer_tol": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "node_reduction": {"type": "number", "exclusiveMinimum": 1},
                        "inner_its": {"type": "integer", "minimum": 0}}),
    "outer": _obj({"restart": _INT1, "max_its": _INT1, "refinement": {"type": "boolean"},
                   "warm_start": {"type": "boolean"}, "q_max": _INT1}),
    "source": _obj({"kind": {"enum": ["point", "random"]}}),
    "seeds": _obj({"rhs": {"type": "integer", "minimum": 0},
                   "rho": {"type": "integer", "minimum": 0}}),
    "threads": _INT1,
    "paths": _obj({"model_in": {"type": ["string", "null"]},
                   "model_sidecar": {"type": ["string", "null"]},
                   "output_dir": {"type": ["string", "null"]}}),
    "tune": _obj({"box": {"type": ["array", "null"], "items": _NUM, "minItems": 3, "maxItems": 3},
                  "z": _PAIR, "q_max": _INT1,
                  "target": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                  "delta_bits": {"type": ["integer", "null"], "minimum": 0}}),
    "spectrum": _obj({"dense_max_dim": {"type": "integer", "minimum": 0}}),
    "bench_shifted": _obj({"intervals": {"type": "array", "items": _PAIR, "minItems": 1},
                           "shifts": {"type": "array", "items": _PAIR, "minItems": 1},
                           "size": {"type": "integer", "minimum": 2},
                           "reduction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                           "q_max": _INT1}),
    "scale": _obj({"sizes": {"type": "array", "items": _INT1, "minItems": 1}}),
    "slices": {"type": "array", "items": _obj({
        "axis": {"type": "integer", "minimum": 0, "maximum": 2},
        "index": {"type": ["integer", "null"], "minimum": 0},
        "format": {"enum": ["csv", "raw"]}}, required=["axis"])},
}, required=["subcommand"])

DEFAULTS = {
    "discretization": "spectral",
    "formulation": "single",
    "grid": {"dims": [16, 16, 16], "l_min": None},
    "frequency": None,
    "model": {"kind": "eight-anomaly", "contrast": 2.0},
    "sponge": {"width": None, "strength": 0.9},
    "contour": {"J": 6, "t": 0.1, "eps": None, "eps_coefficient": None},
    "tolerances": {"outer_tol": 1e-6, "node_reduction": 5.0, "inner_its": 10},
    "outer": {"restart": 20, "max_its": 200, "refinement": False, "warm_start": False, "q_max": 5},
    "source": {"kind": "point"},
    "seeds": {"rhs": 0, "rho": 0},
    "threads": 1,
    "paths": {"model_in": None, "model_sidecar": None, "output_dir": None},
    "tune": {"box": None, "z": [0.0, 1.0], "q_max": 5, "target": 1e-2, "delta_bits": 3},
    "spectrum": {"dense_max_dim": 2000},
    "bench_shifted": {"intervals": [[-1, 8], [-1, 16], [-1, 32], [-1, 64]],
                      "shifts": [[0, 1], [0, 0.5], [0, 0.25], [0, 0.125]],
                      "size": 2000, "reduction": 1e-2, "q_max": 5},
    "scale": {"sizes": [16, 32, 48]},
    "slices": [],
}


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = ""):
        super().__init__(message)
        self.path = path


class InputError(OSError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(raw: dict) -> dict:
    """Validate ``raw`` against the schema and fill every default.

    A manifest (with ``manifest_version``) is accepted and its ``config`` used.
    Raises ConfigError naming the offending key path.
    """
    if isinstance(raw, dict) and "manifest_version" in raw:
        raw = raw.get("config", {})
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(err.message, path)
    cfg = _merge(DEFAULTS, raw)
    cfg["slices"] = [{"index": None, "format": "csv", **sl} for sl in cfg["slices"]]
    dims = cfg["grid"]["dims"]
    l_min, freq = cfg["grid"]["l_min"], cfg["frequency"]
    if l_min is None and freq is None:
        l_min = 2.25
    if l_min is None:
        l_min = max(dims) / freq
    elif freq is not None and not math.isclose(max(dims) / l_min, freq, rel_tol=1e-9):
        raise ConfigError("frequency disagrees with grid.dims and grid.l_min", "frequency")
    if l_min <= 2:
        raise ConfigError("grid.l_min must exceed 2", "grid/l_min")
    cfg["grid"]["l_min"] = float(l_min)
    cfg["frequency"] = max(dims) / l_min
    if cfg["model"]["kind"] == "file" and not cfg["paths"]["model_in"]:
        raise ConfigError("model kind 'file' needs paths.model_in", "paths/model_in")
    return cfg


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# Slices --------------------------------------------------------------------------------------

def _plane(field, grid: Grid3, axis: int, index: int) -> np.ndarray:
    if axis not in (0, 1, 2):
        raise ValueError("axis must be 0, 1 or 2")
    n = grid.dims[axis]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} outside [0, {n})")
    arr = np.asarray(field).reshape(grid.shape)
    return np.take(arr, index, axis=2 - axis)


def export_slice(field, grid: Grid3, axis: int, index: int, path, fmt: str = "csv") -> list:
    """Write one grid plane as Re, Im, |.|; returns the written paths.

    ``csv`` gives rows (row, col, re, im, abs). ``raw`` gives little-endian
    float32 planes [re, im, abs] plus a JSON sidecar.
    """
    plane = _plane(field, grid, axis, index)
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "re", "im", "abs"])
            for (i, j), v in np.ndenumerate(plane):
                w.writerow([i, j, repr(float(v.real)), repr(float(v.imag)), repr(float(abs(v)))])
        return [path]
    if fmt == "raw":
        data = np.stack([plane.real, plane.imag, np.abs(plane)]).astype("<f4")
        data.tofile(path)
        side = path.with_suffix(path.suffix + ".json")
        side.write_text(json.dumps({"shape": list(plane.shape), "dtype": "<f4",
                                    "components": ["re", "im", "abs"], "axis": axis,
                                    "index": index}, indent=2))
        return [path, side]
    raise ValueError(f"unknown slice format {fmt!r}")


def read_slice(path) -> np.ndarray:
    """Complex64 plane back from a raw slice and its sidecar."""
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.fromfile(path, dtype=meta["dtype"]).reshape([3] + meta["shape"])
    out = np.empty(meta["shape"], dtype=np.complex64)
    out.real, out.imag = data[0], data[1]
    return out


# Runners --------------------------------------------------------------------------------------

def _load_model(cfg: dict, grid: Grid3):
    kind = cfg["model"]["kind"]
    if kind != "file":
        return kind
    raw = Path(cfg["paths"]["model_in"])
    side = cfg["paths"]["model_sidecar"]
    if not raw.is_file():
        raise InputError(f"model file not found: {raw}")
    if side is not None and not Path(side).is_file():
        raise InputError(f"model sidecar not found: {side}")
    try:
        model = read_wavespeed(raw, side, l_min=grid.l_min)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read model {raw}: {exc}") from exc
    if model.grid.dims != grid.dims:
        raise InputError(f"model dims {model.grid.dims} differ from grid.dims {grid.dims}")
    return model


def _check_inputs(cfg: dict) -> None:
    if cfg["model"]["kind"] == "file":
        for key in ("model_in", "model_sidecar"):
            p = cfg["paths"][key]
            if p is not None and not Path(p).is_file():
                raise InputError(f"{key} not found: {p}")


def _solver_config(cfg: dict, tol: Optional[float] = None) -> SolverConfig:
    c, t, o = cfg["contour"], cfg["tolerances"], cfg["outer"]
    return SolverConfig(tol=tol if tol is not None else t["outer_tol"], restart=o["restart"],
                        max_outer=o["max_its"], formulation=cfg["formulation"], J=c["J"], t=c["t"],
                        eps=c["eps"], eps_coefficient=c["eps_coefficient"],
                        node_reduction=t["node_reduction"], inner_its=t["inner_its"],
                        q_max=o["q_max"], warm_start=o["warm_start"], threads=cfg["threads"],
                        refinement=o["refinement"], rho_seed=cfg["seeds"]["rho"])


def _problem(cfg: dict, dims=None):
    dims = list(dims or cfg["grid"]["dims"])
    grid = Grid3(*dims, cfg["grid"]["l_min"])
    model = _load_model(cfg, grid)
    P = build_problem(max(dims), l_min=grid.l_min, discretization=cfg["discretization"],
                      model=model, contrast=cfg["model"]["contrast"],
                      sponge_width=cfg["sponge"]["width"], sponge_strength=cfg["sponge"]["strength"],
                      threads=cfg["threads"], dims=dims)
    if cfg["source"]["kind"] == "random":
        rng = np.random.default_rng(cfg["seeds"]["rhs"])
        P.f = rng.standard_normal(grid.size) + 1j * rng.standard_normal(grid.size)
    return P


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    if isinstance(x, float):
        return "inf" if math.isinf(x) else repr(x)
    return str(x)


def run_solve(cfg: dict, files: dict, timings: dict) -> dict:
    t0 = time.perf_counter()
    P = _problem(cfg)
    timings["setup"] = time.perf_counter() - t0
    scfg = _solver_config(cfg)
    t0 = time.perf_counter()
    try:
        u, st = outer_solve(P.A, P.f, scfg)
    finally:
        timings["solve"] = time.perf_counter() - t0
    # wall-clock seconds go to timings.csv so residuals.csv stays byte-reproducible
    files["residuals.csv"] = _csv_text(
        ["iter", "resnorm", "mvs", "seconds"],
        [[e["its"], repr(e["relres"]), e["mvs"], ""] for e in st.info["trace"]])
    files["timings.csv"] = _csv_text(["iter", "seconds"],
                                     [[e["its"], repr(e["seconds"])] for e in st.info["trace"]])
    files["diagnostics.json"] = json.dumps(st.info["fci"], indent=1)
    for k, sl in enumerate(cfg["slices"]):
        axis = sl["axis"]
        index = sl["index"] if sl["index"] is not None else P.grid.dims[axis] // 2
        fmt = sl["format"]
        files[f"slice_{k}_axis{axis}_{index}.{fmt}"] = ("slice", u, P.grid, axis, index, fmt)
    return {"n": list(P.grid.dims), "omega_over_2pi": cfg["frequency"], "its": st.its,
            "mvs": st.mvs, "i-t": st.seconds, "converged": st.converged,
            "final_residual": st.final_residual, "node_mvs": st.info["node_mvs"],
            "inner_mvs": st.info["inner_mvs"], "outer_mvs": st.info["arnoldi_mvs"],
            "quad_mvs": st.info["quad_mvs"], "eps": st.info["eps"], "box": st.info["box"],
            "schemes": st.info["schemes"]}


def _box_for(cfg: dict) -> SpectralBox:
    if cfg["tune"]["box"] is not None:
        b1, b2, depth = cfg["tune"]["box"]
        return SpectralBox(b1, b2, depth)
    P = _problem(cfg)
    box = box_from_operator(P.A, seed=cfg["seeds"]["rho"])
    return doubled_box(box) if cfg["formulation"] == "doubled" else box


def run_tune(cfg: dict, files: dict, timings: dict) -> dict:
    t0 = time.perf_counter()
    box = _box_for(cfg)
    tc = cfg["tune"]
    z = complex(*tc["z"])
    rows = scan_orders(box, z, tc["q_max"], tc["target"], tc["delta_bits"])
    best = tune_scheme(box, z, tc["q_max"], tc["target"], tc["delta_bits"])
    timings["tune"] = time.perf_counter() - t0
    files["tune.csv"] = _csv_text(
        ["q", "delta_star", "nu", "nu_pow_inv_q", "predicted_mvs"],
        [[s.q, repr(float(s.delta)), repr(s.nu), repr(s.rate_per_matvec), _fmt(s.predicted_mvs)]
         for s in rows])
    return {"box": [box.b1, box.b2, box.depth], "z": [z.real, z.imag], "target": tc["target"],
            "best": {"q": best.q, "delta": best.delta, "nu": best.nu,
                     "predicted_mvs": best.predicted_mvs}}


def run_spectrum(cfg: dict, files: dict, timings: dict) -> dict:
    t0 = time.perf_counter()
    P = _problem(cfg)
    box = box_from_operator(P.A, seed=cfg["seeds"]["rho"])
    eps = cfg["contour"]["eps"] or default_eps(P.grid.omega, cfg["contour"]["eps_coefficient"])
    rows = [[repr(float(v.real)), repr(float(v.imag)), "box-vertex"] for v in box.vertices]
    dbox = doubled_box(box)
    rows += [[repr(float(v.real)), repr(float(v.imag)), "doubled-box-vertex"] for v in dbox.vertices]
    active = dbox if cfg["formulation"] == "doubled" else box
    contour = make_contour(active, cfg["contour"]["J"], cfg["contour"]["t"], eps)
    rows += [[repr(float(z.real)), repr(float(z.imag)), "node"] for z in contour.nodes]
    dense = P.grid.size <= cfg["spectrum"]["dense_max_dim"]
    if dense:
        from .core import materialize
        lam = np.linalg.eigvals(materialize(P.A, max_dim=cfg["spectrum"]["dense_max_dim"]))
        lam = lam[np.lexsort((lam.imag, lam.real))]
        rows += [[repr(float(v.real)), repr(float(v.imag)), "eigenvalue"] for v in lam]
    timings["spectrum"] = time.perf_counter() - t0
    files["spectrum.csv"] = _csv_text(["re", "im", "kind"], rows)
    return {"box": [box.b1, box.b2, box.depth], "doubled_box": [dbox.b1, dbox.b2, dbox.depth],
            "eps": eps, "dense_eigenvalues": bool(dense)}


def run_bench(cfg: dict, files: dict, timings: dict) -> dict:
    t0 = time.perf_counter()
    bc = cfg["bench_shifted"]
    ops = [interval_test_operator(lo, hi, bc["size"]) for lo, hi in bc["intervals"]]
    shifts = [complex(*s) for s in bc["shifts"]]
    rep = bench_shifted(ops, shifts, reduction=bc["reduction"], q_max=bc["q_max"],
                        seed=cfg["seeds"]["rhs"])
    timings["bench"] = time.perf_counter() - t0
    rows = []
    for c in rep.cells:
        for form in FORMULATIONS:
            sch = c.schemes.get(form)
            rows.append([c.interval[0], c.interval[1], repr(c.z.real), repr(c.z.imag), form,
                         _fmt(c.mvs.get(form, math.inf)), sch[0] if sch else "",
                         repr(float(sch[1])) if sch else "", int(c.winner == form)])
    files["bench_shifted.csv"] = _csv_text(
        ["lo", "hi", "z_re", "z_im", "formulation", "mvs", "q", "delta", "cheaper"], rows)
    return {"single_wins": sum(c.winner == "single" for c in rep.cells),
            "doubled_wins": sum(c.winner == "doubled" for c in rep.cells)}


def run_scale(cfg: dict, files: dict, timings: dict) -> dict:
    rows, mvs, omegas = [], [], []
    for n in cfg["scale"]["sizes"]:
        t0 = time.perf_counter()
        P = _problem(cfg, dims=[n, n, n])
        _, st = outer_solve(P.A, P.f, _solver_config(cfg))
        timings[f"n{n}"] = time.perf_counter() - t0
        rows.append([n, repr(n / cfg["grid"]["l_min"]), st.its, st.mvs])
        mvs.append(st.mvs)
        omegas.append(P.grid.omega)
    growth = [(mvs[i + 1] / mvs[i]) ** (1 / math.log2(omegas[i + 1] / omegas[i]))
              for i in range(len(mvs) - 1)]
    files["scale.csv"] = _csv_text(["n", "omega_over_2pi", "its", "mvs"], rows)
    fitted = None
    if len(mvs) > 1:
        fitted = 2 ** float(np.polyfit(np.log(omegas), np.log(mvs), 1)[0])
    return {"sizes": cfg["scale"]["sizes"], "mvs": mvs, "growth_per_doubling": growth,
            "fitted_growth_per_doubling": fitted}


RUNNERS = {"solve": run_solve, "tune": run_tune, "spectrum": run_spectrum,
           "bench-shifted": run_bench, "scale": run_scale}


def _write_outputs(out_dir: Path, files: dict) -> None:
    """Stage every file in a sibling temp dir, then move it into place."""
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".stage-", dir=out_dir.parent))
    try:
        for name, content in files.items():
            target = stage / name
            if isinstance(content, tuple) and content[0] == "slice":
                export_slice(content[1], content[2], content[3], content[4], target, content[5])
            else:
                target.write_text(content)
        out_dir.mkdir(parents=True, exist_ok=True)
        for item in stage.iterdir():
            item.replace(out_dir / item.name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def run(config: dict, output: Optional[str] = None, stderr=None) -> int:
    """Run one configured experiment; returns the process exit code."""
    stderr = stderr or sys.stderr
    try:
        cfg = resolve_config(config)
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc}", file=stderr)
        return EXIT_SCHEMA
    out_dir = output or cfg["paths"]["output_dir"]
    if out_dir is None:
        print("config error at paths/output_dir: no output directory given", file=stderr)
        return EXIT_SCHEMA
    out_dir = Path(out_dir)
    cfg["paths"]["output_dir"] = str(out_dir)
    files: dict = {}
    timings: dict = {}
    code = EXIT_OK
    t0 = time.perf_counter()
    try:
        _check_inputs(cfg)
        summary = RUNNERS[cfg["subcommand"]](cfg, files, timings)
    except (InputError, OSError) as exc:
        print(f"I/O error: {exc}", file=stderr)
        return EXIT_IO
    except (ConvergenceError, NoConvergentSchemeError) as exc:
        diag = getattr(exc, "diagnostics", {})
        print(f"solver failed: {exc}", file=stderr)
        files = {"failure.json": json.dumps({"error": str(exc), "diagnostics": diag},
                                            indent=1, default=_json_default)}
        summary = {"error": str(exc)}
        code = EXIT_DIVERGED
    except (ModelError, DimensionError, ValueError) as exc:
        print(f"config error: {exc}", file=stderr)
        return EXIT_SCHEMA
    timings["total"] = time.perf_counter() - t0
    files["summary.json"] = json.dumps(summary, indent=2, default=_json_default)
    files["manifest.json"] = json.dumps({
        "manifest_version": MANIFEST_VERSION, "version": __version__,
        "git_describe": git_describe(), "config": cfg, "timings": timings,
    }, indent=2, default=_json_default)
    try:
        _write_outputs(out_dir, files)
    except OSError as exc:
        print(f"I/O error: {exc}", file=stderr)
        return EXIT_IO
    return code


def _json_default(obj):
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="helmfci", description=__doc__.splitlines()[0])
    parser.add_argument("--config", required=True, help="JSON run configuration or manifest")
    parser.add_argument("--output", help="output directory (overrides paths.output_dir)")
    args = parser.parse_args(argv)
    try:
        raw = json.loads(Path(args.config).read_text())
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"config error at <root>: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    return run(raw, args.output)


if __name__ == "__main__":
    sys.exit(main())
