"""TOML configuration for pipelines and synthetic scenes.

Errors name the offending key path, e.g. ``branches[1]: beta must be in (0, 1), got 1.5``.
See docs/CONFIG.md for the key reference.
"""
from __future__ import annotations

import sys
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .clustering import DbscanParams
from .events import SensorGeometry, TimeBase
from .lif import DEFAULT_KERNEL, LifParams
from .pipeline import ConfigError, PipelineConfig, SpeedBranchConfig
from .synthetic import SceneSpec, scene_from_dict

_TOP_KEYS = {"geometry", "time_base", "branches", "dbscan", "windows"}
_BRANCH_KEYS = {"band_index", "threshold_speed", "beta", "u_thr", "kernel", "recovery_radius",
                "recovery_lookback", "binary_input"}
_SECTION_KEYS = {
    "geometry": {"width", "height"},
    "time_base": {"t0_us", "dt_us"},
    "dbscan": {"eps", "min_pts", "min_cluster_size"},
    "windows": {"window_us", "eval_timestamps", "eval_interval_us", "eval_start_us", "eval_end_us",
                "include_residual_band", "parallel"},
}


def load_toml(path: Path | str) -> Dict[str, Any]:
    """Parse a TOML file.  Syntax errors become :class:`ConfigError`; OS errors propagate."""
    with open(path, "rb") as fh:
        data = fh.read()
    return loads_toml(data.decode("utf-8", errors="strict"))


def loads_toml(text: str) -> Dict[str, Any]:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None


def _check_keys(d: Mapping[str, Any], allowed: Iterable[str], where: str) -> None:
    for k in d:
        if k not in allowed:
            path = f"{where}.{k}" if where else k
            raise ConfigError(f"{path}: unknown key")


def _table(d: Mapping[str, Any], key: str, where: str = "") -> Mapping[str, Any]:
    v = d.get(key, {})
    if not isinstance(v, Mapping):
        raise ConfigError(f"{where + '.' if where else ''}{key}: expected a table")
    return v


def _num(d: Mapping[str, Any], key: str, where: str, kind: type, default: Any = None, required: bool = False):
    path = f"{where}.{key}" if where else key
    if key not in d:
        if required:
            raise ConfigError(f"{path}: missing")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and not isinstance(v, int)):
        raise ConfigError(f"{path}: expected {'an integer' if kind is int else 'a number'}, got {v!r}")
    return kind(v)


def _bool(d: Mapping[str, Any], key: str, where: str, default: bool) -> bool:
    v = d.get(key, default)
    if not isinstance(v, bool):
        raise ConfigError(f"{where}.{key}: expected true or false, got {v!r}")
    return v


def _wrap(path: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _branch(d: Any, i: int) -> SpeedBranchConfig:
    where = f"branches[{i}]"
    if not isinstance(d, Mapping):
        raise ConfigError(f"{where}: expected a table")
    _check_keys(d, _BRANCH_KEYS, where)
    kernel = d.get("kernel", DEFAULT_KERNEL)
    lif = _wrap(
        where, LifParams,
        beta=_num(d, "beta", where, float, required=True),
        u_thr=_num(d, "u_thr", where, float, 1.0),
        kernel=kernel,
        recovery_radius=_num(d, "recovery_radius", where, int, 1),
        recovery_lookback=_num(d, "recovery_lookback", where, int, 1),
        binary_input=_bool(d, "binary_input", where, False),
    )
    return SpeedBranchConfig(
        band_index=_num(d, "band_index", where, int, i),
        threshold_speed=_num(d, "threshold_speed", where, float, required=True),
        lif=lif,
    )


def pipeline_from_dict(d: Mapping[str, Any]) -> PipelineConfig:
    _check_keys(d, _TOP_KEYS, "")
    for sec, keys in _SECTION_KEYS.items():
        _check_keys(_table(d, sec), keys, sec)

    g = _table(d, "geometry")
    geometry = _wrap("geometry", SensorGeometry,
                     _num(g, "width", "geometry", int, required=True),
                     _num(g, "height", "geometry", int, required=True))
    t = _table(d, "time_base")
    tb = _wrap("time_base", TimeBase, _num(t, "t0_us", "time_base", int, 0), _num(t, "dt_us", "time_base", int, 1000))
    c = _table(d, "dbscan")
    db = _wrap("dbscan", DbscanParams, _num(c, "eps", "dbscan", float, 5.0), _num(c, "min_pts", "dbscan", int, 10))

    raw = d.get("branches")
    if not isinstance(raw, list) or not raw:
        raise ConfigError("branches: at least one [[branches]] table is required")
    branches = [_branch(b, i) for i, b in enumerate(raw)]

    w = _table(d, "windows")
    stamps = w.get("eval_timestamps")
    if stamps is not None:
        if not isinstance(stamps, list) or any(isinstance(s, bool) or not isinstance(s, int) for s in stamps):
            raise ConfigError("windows.eval_timestamps: expected a list of integers")
        stamps = tuple(stamps)
    interval = _num(w, "eval_interval_us", "windows", int)
    if stamps is None and interval is None:
        raise ConfigError("windows: set eval_timestamps or eval_interval_us")
    if stamps is not None and interval is not None:
        raise ConfigError("windows: eval_timestamps and eval_interval_us are mutually exclusive")

    return _wrap(
        "config", PipelineConfig,
        geometry=geometry,
        branches=tuple(branches),
        time_base=tb,
        dbscan=db,
        min_cluster_size=_num(c, "min_cluster_size", "dbscan", int),
        window_us=_num(w, "window_us", "windows", int, 33_000),
        eval_timestamps=stamps,
        eval_interval_us=interval,
        eval_start_us=_num(w, "eval_start_us", "windows", int),
        eval_end_us=_num(w, "eval_end_us", "windows", int),
        include_residual_band=_bool(w, "include_residual_band", "windows", False),
        parallel=_bool(w, "parallel", "windows", True),
    )


def load_pipeline_config(path: Path | str) -> PipelineConfig:
    return pipeline_from_dict(load_toml(path))


_SCENE_KEYS = {"geometry", "duration_us", "gen_dt_us", "objects", "static", "noise_rate_hz_per_pixel",
               "static_rate_hz_per_pixel", "seed", "frame_interval_us"}
_OBJECT_KEYS = {"id", "x0", "y0", "w", "h", "vx", "vy", "fill", "motion"}


def scene_config_from_dict(d: Mapping[str, Any]) -> SceneSpec:
    _check_keys(d, _SCENE_KEYS, "")
    for k in ("geometry", "duration_us"):
        if k not in d:
            raise ConfigError(f"{k}: missing")
    for i, o in enumerate(d.get("objects", [])):
        if not isinstance(o, Mapping):
            raise ConfigError(f"objects[{i}]: expected a table")
        _check_keys(o, _OBJECT_KEYS, f"objects[{i}]")
        for k in ("id", "x0", "y0", "w", "h"):
            if k not in o:
                raise ConfigError(f"objects[{i}].{k}: missing")
    for i, s in enumerate(d.get("static", [])):
        if not isinstance(s, Mapping) or set(s) != {"box"}:
            raise ConfigError(f"static[{i}]: expected a table with a single 'box' key")
    return _wrap("scene", scene_from_dict, d)


def load_scene_config(path: Path | str) -> SceneSpec:
    return scene_config_from_dict(load_toml(path))


# --------------------------------------------------------------------------
# writing


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    raise TypeError(f"cannot write {type(v).__name__} as TOML")


def branch_fragment(branch: SpeedBranchConfig, comment: Optional[str] = None) -> str:
    """A ``[[branches]]`` table that :func:`pipeline_from_dict` reads back unchanged."""
    p = branch.lif
    lines: List[str] = []
    if comment:
        lines += [f"# {c}" for c in comment.splitlines()]
    lines.append("[[branches]]")
    fields = [
        ("band_index", branch.band_index),
        ("threshold_speed", float(branch.threshold_speed)),
        ("beta", p.beta),
        ("u_thr", p.u_thr),
        ("kernel", [list(r) for r in p.kernel]),
        ("recovery_radius", p.recovery_radius),
        ("recovery_lookback", p.recovery_lookback),
        ("binary_input", p.binary_input),
    ]
    lines += [f"{k} = {_toml_value(v)}" for k, v in fields]
    return "\n".join(lines) + "\n"


def pipeline_to_toml(cfg: PipelineConfig) -> str:
    out = [
        "[geometry]",
        f"width = {cfg.geometry.width}",
        f"height = {cfg.geometry.height}",
        "",
        "[time_base]",
        f"t0_us = {cfg.time_base.t0_us}",
        f"dt_us = {cfg.time_base.dt_us}",
        "",
        "[dbscan]",
        f"eps = {_toml_value(float(cfg.dbscan.eps))}",
        f"min_pts = {cfg.dbscan.min_pts}",
    ]
    if cfg.min_cluster_size is not None:
        out.append(f"min_cluster_size = {cfg.min_cluster_size}")
    out += ["", "[windows]", f"window_us = {cfg.window_us}"]
    if cfg.eval_timestamps is not None:
        out.append(f"eval_timestamps = {_toml_value(list(cfg.eval_timestamps))}")
    else:
        out.append(f"eval_interval_us = {cfg.eval_interval_us}")
        if cfg.eval_start_us is not None:
            out.append(f"eval_start_us = {cfg.eval_start_us}")
        if cfg.eval_end_us is not None:
            out.append(f"eval_end_us = {cfg.eval_end_us}")
    out.append(f"include_residual_band = {_toml_value(cfg.include_residual_band)}")
    out.append(f"parallel = {_toml_value(cfg.parallel)}")
    text = "\n".join(out) + "\n"
    for b in cfg.branches:
        text += "\n" + branch_fragment(b)
    return text

