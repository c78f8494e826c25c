"""
Scenario Service Module - configuration, presets, sweeps and output files
Turns TOML config files (or named presets) into validated scenarios, runs
them and writes CSV solutions, JSON reports and the run registry.
"""
import copy
import csv
import json
import logging
import math
import sqlite3
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import database
from services import grid_service, kernel_service
from services import velocity_service as vel
from services.diagnostics_service import RunReport, eoc, summarize
from services.grid_service import GridError, PiecewiseConstantDatum, SmoothDatum
from services.kernel_service import KernelError
from services.solver_service import (
    DEFAULT_COMPARE_TOL, LambdaPolicy, NonlocalPath, SolverConfig, SolverError, prepare, run,
)
from services.velocity_service import ModelKind, VelocityError, VelocityModel

logger = logging.getLogger(__name__)

DEFAULT_DOMAIN = {"x_min": -2.0, "x_max": 3.0}
REGISTRY_FILE = "runs.db"
SWEEP_KEYS = ("eps", "alpha", "dx")

TOP_LEVEL_KEYS = {
    "name", "preset", "eps", "alpha", "dx", "final_time", "snapshot_times", "lambda",
    "path", "compare_tol", "diagnostics", "domain", "kernel", "V1", "V2", "initial",
    "sweep", "workers",
}
NESTED_KEYS = {
    "lambda": {"policy", "value"},
    "domain": {"x_min", "x_max"},
    "kernel": {"kind", "eta", "pieces"},
    "sweep": {"key", "values"},
}
MODEL_KEYS = {"kind", "eps", "alpha", "q_max", "v_max", "inner"}
INITIAL_KEYS = {
    "piecewise": {"kind", "breaks", "values"},
    "constant": {"kind", "value"},
    "smooth_bump": {"kind", "base", "amplitude", "center", "width"},
    "sigmoid": {"kind", "left", "right", "center", "width"},
}

_PRESET_COMMON = {
    "domain": dict(DEFAULT_DOMAIN),
    "kernel": {"kind": "linear_decreasing", "eta": 0.5},
    "initial": {"kind": "piecewise", "breaks": [-0.5, 0.5], "values": [0.25, 0.75, 0.25]},
    "final_time": 0.5,
    "snapshot_times": [0.5],
    "lambda": {"policy": "preset"},
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "paper-fig1": {
        **_PRESET_COMMON,
        "name": "paper-fig1",
        "dx": 1e-3,
        "V1": {"kind": "greenshields_squared"},
        "V2": {"kind": "estimation", "eps": 0.0},
        "sweep": {"key": "eps", "values": [-0.5, 0.0, 0.5]},
    },
    "paper-fig2": {
        **_PRESET_COMMON,
        "name": "paper-fig2",
        "dx": 1e-3,
        "V1": {"kind": "quadratic_free"},
        "V2": {"kind": "preference", "alpha": 0.5, "q_max": 1.0, "v_max": 1.0,
               "inner": {"kind": "greenshields_squared"}},
        "sweep": {"key": "alpha", "values": [0.0, 0.25, 0.5, 0.75, 1.0]},
    },
}
# CI-scale variants
PRESETS["paper-fig1-coarse"] = {**PRESETS["paper-fig1"], "name": "paper-fig1-coarse", "dx": 4e-3}
PRESETS["paper-fig2-coarse"] = {**PRESETS["paper-fig2"], "name": "paper-fig2-coarse", "dx": 4e-3}


class ConfigError(ValueError):
    """Raised for unreadable, unknown or invalid configuration."""


@dataclass(frozen=True)
class Scenario:
    name: str
    config: SolverConfig
    sweep_key: Optional[str] = None
    sweep_values: Tuple[float, ...] = ()
    workers: int = 1


# ---------------------------------------------------------------- parsing

def load_raw(path) -> Dict[str, Any]:
    """Read a TOML config file into a plain dict."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"Config file {path} does not exist.")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"Config file {path} is not valid TOML: {exc}")


def parse_config(path, overrides: Optional[Dict[str, Any]] = None) -> Scenario:
    """
    Parse and fully validate a config file.

    Args:
        path: TOML file, or None when overrides name a preset
        overrides: keys that win over the file (command-line flags)

    Raises:
        ConfigError: unknown keys, or a failed validation naming the invariant.
    """
    raw = load_raw(path) if path is not None else {}
    raw.update(overrides or {})
    return load_scenario(raw)


def load_scenario(raw: Dict[str, Any]) -> Scenario:
    """Expand a preset, apply overrides and validate every sweep member."""
    unknown = sorted(set(raw) - TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}.")

    data = _expand_preset(raw)
    for key in (*NESTED_KEYS, "V1", "V2", "initial"):
        if key in data and not isinstance(data[key], dict):
            raise ConfigError(f"[{key}] must be a table, got {data[key]!r}.")
    for key, allowed in NESTED_KEYS.items():
        if key in data:
            extra = sorted(set(data[key]) - allowed)
            if extra:
                raise ConfigError(f"Unknown keys in [{key}]: {', '.join(extra)}.")

    try:
        config = _build_config(data)
    except KeyError as exc:
        raise ConfigError(f"Missing config key {exc}.")
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        # model, kernel, grid and solver errors all derive from ValueError
        raise ConfigError(str(exc))

    sweep = data.get("sweep") or {}
    sweep_key = sweep.get("key")
    raw_values = sweep.get("values", ())
    if not isinstance(raw_values, (list, tuple)):
        raise ConfigError(f"[sweep] values must be a list, got {raw_values!r}.")
    values = tuple(_number(v, "sweep value") for v in raw_values)
    if sweep_key is not None and sweep_key not in SWEEP_KEYS:
        raise ConfigError(f"Cannot sweep over '{sweep_key}'; choose one of {', '.join(SWEEP_KEYS)}.")
    if not values:
        sweep_key = None

    workers = data.get("workers", 1)
    if isinstance(workers, bool) or not isinstance(workers, int) or workers < 1:
        raise ConfigError(f"workers must be an integer of at least 1, got {workers!r}.")
    scenario = Scenario(str(data.get("name", "scenario")), config, sweep_key, values, workers)

    for value in (scenario.sweep_values if scenario.sweep_key else (None,)):
        try:
            member = scenario.config
            if value is not None:
                member = apply_sweep_value(member, scenario.sweep_key, value)
            prepare(member)
        except (VelocityError, KernelError, GridError, SolverError) as exc:
            label = f" ({scenario.sweep_key}={value:g})" if value is not None else ""
            raise ConfigError(f"{exc}{label}")
    return scenario


def _number(value, what: str) -> float:
    if isinstance(value, bool):
        raise ConfigError(f"{what} must be a number, got {value!r}.")
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a number, got {value!r}.")


def _expand_preset(raw: Dict[str, Any]) -> Dict[str, Any]:
    name = raw.get("preset")
    if name is None:
        return dict(raw)
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset '{name}'; available: {', '.join(sorted(PRESETS))}.")
    data = copy.deepcopy(PRESETS[name])
    data.update({k: v for k, v in raw.items() if k != "preset"})
    # an explicit parameter replaces the preset sweep over it
    if "sweep" not in raw:
        for key in ("eps", "alpha"):
            if key in raw and data.get("sweep", {}).get("key") == key:
                data.pop("sweep")
    return data


def _build_config(data: Dict[str, Any]) -> SolverConfig:
    for required in ("kernel", "V1", "V2", "initial", "dx", "final_time"):
        if required not in data:
            raise ConfigError(f"Missing required config key '{required}'.")

    kernel = kernel_from_config(data["kernel"])
    dx = float(data["dx"])
    # resolve the kernel before the mesh so N_eta = 0 is reported as such
    kernel_service.weights(kernel, dx)

    domain = data.get("domain", DEFAULT_DOMAIN)
    grid = grid_service.make_grid(float(domain["x_min"]), float(domain["x_max"]), dx)

    v1 = model_from_config(data["V1"])
    v2 = model_from_config(data["V2"])
    if "eps" in data:
        v2 = _with_param(v2, "eps", float(data["eps"]))
    if "alpha" in data:
        v2 = _with_param(v2, "alpha", float(data["alpha"]))

    lam = data.get("lambda", {"policy": "cfl"})
    try:
        policy = LambdaPolicy(lam.get("policy", "cfl"))
        path = NonlocalPath(data.get("path", "naive"))
    except ValueError as exc:
        raise ConfigError(str(exc))

    return SolverConfig(
        grid=grid,
        kernel=kernel,
        v1=v1,
        v2=v2,
        initial=datum_from_config(data["initial"]),
        final_time=float(data["final_time"]),
        lambda_policy=policy,
        fixed_lambda=float(lam["value"]) if "value" in lam else None,
        snapshot_times=tuple(float(t) for t in data.get("snapshot_times", ())),
        nonlocal_path=path,
        compare_tol=float(data.get("compare_tol", DEFAULT_COMPARE_TOL)),
        diagnostics=bool(data.get("diagnostics", True)),
    )


def model_from_config(spec: Dict[str, Any]) -> VelocityModel:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("Velocity models need a table with a 'kind'.")
    extra = sorted(set(spec) - MODEL_KEYS)
    if extra:
        raise ConfigError(f"Unknown velocity model keys: {', '.join(extra)}.")
    kind = spec["kind"]
    if kind == "identity":
        return vel.identity()
    if kind == "greenshields_squared":
        return vel.greenshields_squared()
    if kind == "quadratic_free":
        return vel.quadratic_free()
    if kind == "estimation":
        return vel.estimation(float(spec.get("eps", 0.0)))
    if kind == "preference":
        inner = model_from_config(spec["inner"]) if "inner" in spec else None
        return vel.preference(float(spec["alpha"]), float(spec.get("q_max", 1.0)),
                              float(spec.get("v_max", 1.0)), inner)
    raise ConfigError(f"Unknown velocity model kind '{kind}'.")


def model_to_config(model: VelocityModel) -> Dict[str, Any]:
    if model.kind == ModelKind.ESTIMATION:
        return {"kind": "estimation", "eps": model.params[0]}
    if model.kind == ModelKind.PREFERENCE:
        alpha, q_max, v_max = model.params
        return {"kind": "preference", "alpha": alpha, "q_max": q_max, "v_max": v_max,
                "inner": model_to_config(model.inner)}
    if model.kind == ModelKind.CUSTOM:
        raise ConfigError(f"Custom model {model.name} cannot be written to a config file.")
    return {"kind": model.kind.value}


def kernel_from_config(spec: Dict[str, Any]) -> kernel_service.Kernel:
    kind = spec.get("kind")
    if kind == "linear_decreasing":
        return kernel_service.linear_decreasing(float(spec["eta"]))
    if kind == "constant":
        return kernel_service.constant(float(spec["eta"]))
    if kind == "piecewise":
        return kernel_service.piecewise(spec["pieces"])
    raise ConfigError(f"Unknown kernel kind '{kind}'.")


def datum_from_config(spec: Dict[str, Any]):
    kind = spec.get("kind")
    if kind not in INITIAL_KEYS:
        raise ConfigError(f"Unknown initial datum kind '{kind}'.")
    extra = sorted(set(spec) - INITIAL_KEYS[kind])
    if extra:
        raise ConfigError(f"Unknown keys in [initial]: {', '.join(extra)}.")
    params = {k: float(v) for k, v in spec.items() if k not in ("kind", "breaks", "values")}
    if kind == "piecewise":
        return grid_service.piecewise_constant(spec["breaks"], spec["values"])
    if kind == "constant":
        return grid_service.constant_datum(params["value"])
    if kind == "smooth_bump":
        return grid_service.smooth_bump(**params)
    return grid_service.sigmoid(**params)


def datum_to_config(datum) -> Dict[str, Any]:
    if isinstance(datum, PiecewiseConstantDatum):
        if not datum.breakpoints:
            return {"kind": "constant", "value": datum.values[0]}
        return {"kind": "piecewise", "breaks": list(datum.breakpoints), "values": list(datum.values)}
    if isinstance(datum, SmoothDatum):
        return {"kind": datum.profile, **dict(datum.params)}
    raise ConfigError("Callable initial data cannot be written to a config file.")


def _with_param(model: VelocityModel, key: str, value: float) -> VelocityModel:
    if key == "eps":
        if model.kind != ModelKind.ESTIMATION:
            raise ConfigError("'eps' applies only to an estimation V2.")
        return vel.estimation(value)
    if model.kind != ModelKind.PREFERENCE:
        raise ConfigError("'alpha' applies only to a preference V2.")
    _, q_max, v_max = model.params
    return vel.preference(value, q_max, v_max, model.inner)


# ---------------------------------------------------------------- echo

def scenario_to_dict(scenario: Scenario) -> Dict[str, Any]:
    cfg = scenario.config
    lam: Dict[str, Any] = {"policy": cfg.lambda_policy.value}
    if cfg.fixed_lambda is not None:
        lam["value"] = cfg.fixed_lambda
    data: Dict[str, Any] = {
        "name": scenario.name,
        "dx": cfg.grid.dx,
        "final_time": cfg.final_time,
        "snapshot_times": list(cfg.snapshot_times),
        "path": cfg.nonlocal_path.value,
        "compare_tol": cfg.compare_tol,
        "diagnostics": cfg.diagnostics,
        "workers": scenario.workers,
        "lambda": lam,
        "domain": {"x_min": cfg.grid.x_min, "x_max": cfg.grid.x_max},
        "kernel": kernel_service.to_config(cfg.kernel),
        "V1": model_to_config(cfg.v1),
        "V2": model_to_config(cfg.v2),
        "initial": datum_to_config(cfg.initial),
    }
    if scenario.sweep_key is not None:
        data["sweep"] = {"key": scenario.sweep_key, "values": list(scenario.sweep_values)}
    return data


def dump_config(scenario: Scenario) -> str:
    """TOML text that parse_config turns back into the same scenario."""
    lines = [f"{key} = {_toml_value(value)}" for key, value in scenario_to_dict(scenario).items()]
    return "\n".join(lines) + "\n"


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{" + ", ".join(f"{k} = {_toml_value(v)}" for k, v in value.items()) + "}"
    raise ConfigError(f"Cannot write {type(value).__name__} to a config file.")


# ---------------------------------------------------------------- running

def expand(scenario: Scenario) -> List[Tuple[Optional[float], SolverConfig]]:
    """One solver config per sweep value, or the base config alone."""
    if scenario.sweep_key is None:
        return [(None, scenario.config)]
    return [(value, apply_sweep_value(scenario.config, scenario.sweep_key, value))
            for value in scenario.sweep_values]


def apply_sweep_value(config: SolverConfig, key: str, value: float) -> SolverConfig:
    if key == "dx":
        kernel_service.weights(config.kernel, value)
        grid = grid_service.make_grid(config.grid.x_min, config.grid.x_max, value)
        return replace(config, grid=grid)
    return replace(config, v2=_with_param(config.v2, key, value))


def run_tag(scenario: Scenario, value: Optional[float]) -> str:
    if value is None:
        return scenario.name
    return f"{scenario.sweep_key}{value:g}"


def run_scenario(scenario: Scenario, workers: Optional[int] = None) -> List[RunReport]:
    """
    Run every sweep member; runs share nothing and may execute concurrently.

    Raises:
        SolverError: a member failed; the message names the sweep value.
    """
    members = expand(scenario)
    workers = workers or scenario.workers
    try:
        echo = scenario_to_dict(scenario)
    except ConfigError:
        # custom models and callable data have no config form
        echo = {"name": scenario.name}

    def _one(item):
        value, config = item
        tag = run_tag(scenario, value)
        try:
            report = run(config, tag=tag)
        except SolverError as exc:
            raise SolverError(f"[{tag}] {exc}", step=exc.step, cell=exc.cell) from exc
        report.sweep_value = value
        report.config_echo = echo
        return report

    if workers > 1 and len(members) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_one, members))
    return [_one(item) for item in members]


def run_eoc(scenario: Scenario, levels: int = 3) -> List[float]:
    """
    Refinement study at dx, dx/2, ..., t* = final_time.

    Returns:
        List[float]: one order per consecutive triple of levels.

    Raises:
        ConfigError: fewer than 3 levels, or the scenario is a sweep.
    """
    if levels < 3:
        raise ConfigError("An EOC study needs at least 3 levels.")
    if scenario.sweep_key is not None:
        raise ConfigError(f"An EOC study refines a single run; {scenario.name} sweeps over "
                          f"{scenario.sweep_key}. Set {scenario.sweep_key} explicitly or drop the sweep.")
    base = scenario.config
    reports = []
    for level in range(levels):
        dx = base.grid.dx / 2 ** level
        config = replace(base, grid=grid_service.make_grid(base.grid.x_min, base.grid.x_max, dx),
                         snapshot_times=(base.final_time,))
        reports.append(run(config, tag=f"{scenario.name}_dx{dx:g}"))
    return [eoc(reports[i:i + 3], base.final_time) for i in range(levels - 2)]


# ---------------------------------------------------------------- outputs

def write_outputs(reports: Sequence[RunReport], out_dir, scenario: Optional[Scenario] = None) -> List[Path]:
    """
    Write per-run solution CSVs and JSON reports, a comparison CSV per
    snapshot time when there are several runs, and register every run.

    Raises:
        OSError: any file could not be written; the message carries the path.
    """
    out = Path(out_dir)
    written: List[Path] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"Cannot create output directory {out}: {exc}") from exc

    for report in reports:
        x = report.grid.centers
        for snap in report.snapshots:
            path = out / f"solution_{report.tag}_{snap.requested_time:g}.csv"
            _write_csv(path, ["x", "q"], zip(x, snap.density))
            written.append(path)
        path = out / f"report_{report.tag}.json"
        _write_text(path, json.dumps(summarize(report), indent=2, default=str))
        written.append(path)

    if len(reports) > 1:
        times = [s.requested_time for s in reports[0].snapshots]
        for t in times:
            columns = [_density_at(r, t) for r in reports]
            if any(c is None or c.size != columns[0].size for c in columns):
                continue
            path = out / f"comparison_{t:g}.csv"
            header = ["x"] + [f"q_{r.tag}" for r in reports]
            _write_csv(path, header, zip(reports[0].grid.centers, *columns))
            written.append(path)

    if scenario is not None:
        path = out / "scenario.toml"
        _write_text(path, dump_config(scenario))
        written.append(path)

    db_path = registry_path(out)
    database.init_database(db_path)
    for report in reports:
        saved = database.insert_run(
            report.tag, scenario.name if scenario else report.tag,
            scenario.sweep_key if scenario else None, report.sweep_value,
            report.lam, report.gamma_0, report.n_eta, report.steps, report.final_time,
            report.passed, report.warnings, [vars(c) for c in report.checks],
            db_path=db_path,
        )
        if not saved:
            logger.warning("could not register run %s in %s", report.tag, db_path)
    written.append(Path(db_path))
    return written


def registry_path(out_dir) -> str:
    """Run registry kept next to the other outputs of a directory."""
    return str(Path(out_dir) / REGISTRY_FILE)


def read_registry(out_dir) -> Tuple[List[Dict[str, Any]], List[Dict[str, Any]]]:
    """
    Registered runs and their failing applicable checks.

    Raises:
        ConfigError: the directory holds no run registry.
    """
    path = registry_path(out_dir)
    if not Path(path).is_file():
        raise ConfigError(f"No run registry at {path}; run simulate with --out {out_dir} first.")
    try:
        return database.get_all_runs(path), database.get_failed_runs(path)
    except sqlite3.DatabaseError as exc:
        raise ConfigError(f"{path} is not a run registry: {exc}")


def _density_at(report: RunReport, t: float):
    for snap in report.snapshots:
        if snap.requested_time == t:
            return snap.density
    return None


def _write_csv(path: Path, header: List[str], rows) -> None:
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([f"{v:.17g}" for v in row])
    except OSError as exc:
        raise OSError(f"Cannot write {path}: {exc}") from exc


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"Cannot write {path}: {exc}") from exc
