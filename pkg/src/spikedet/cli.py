"""Command-line entry point: ``spikedet {gen,run,eval,calibrate,energy}``.

Exit codes: 0 success, 1 I/O error, 2 config error, 3 data error.
"""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import branch_fragment, load_pipeline_config, load_scene_config
from .energy import ops_report, reproduce_reference
from .evaluation import evaluate
from .events import SensorGeometry, TimeBase
from .io import (
    DetectionRecord,
    FormatError,
    atomic_write_bytes,
    iter_events_csv,
    read_detections,
    read_events_csv,
    read_ground_truth,
    write_detections,
    write_events_csv,
    write_ground_truth,
    write_labels_csv,
    write_metrics,
)
from .pipeline import CalibrationError, ConfigError, SpeedBranchConfig, calibrate_branch, detect_chunks
from .synthetic import generate, labels_to_strings

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_sha256: Optional[str] = None
    inputs: Dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: List[str] = field(default_factory=list)
    tool_version: str = __version__
    wall_seconds: float = 0.0

    def to_json(self) -> bytes:
        d = {
            "command": self.command,
            "config_sha256": self.config_sha256,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "tool_version": self.tool_version,
            "wall_seconds": round(self.wall_seconds, 6),
        }
        return (json.dumps(d, indent=2, sort_keys=True) + "\n").encode()


def _write(path: Path, writer, *args) -> None:
    buf = io.BytesIO()
    writer(*args, buf)
    atomic_write_bytes(path, buf.getvalue())


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


# --------------------------------------------------------------------------


def cmd_gen(args) -> int:
    start = time.perf_counter()
    cfg_path = Path(args.config)
    spec = load_scene_config(cfg_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labeled, frames = generate(spec)
    paths = [out / "events.csv", out / "labels.csv", out / "gt.jsonl"]
    _write(paths[0], write_events_csv, labeled.events)
    buf = io.BytesIO()
    write_labels_csv(labeled.events, labels_to_strings(labeled.source), buf)
    atomic_write_bytes(paths[1], buf.getvalue())
    _write(paths[2], write_ground_truth, frames)
    man = RunManifest("gen", _sha256(cfg_path), {}, [str(p) for p in paths],
                      wall_seconds=time.perf_counter() - start)
    atomic_write_bytes(out / "manifest.json", man.to_json())
    print(f"wrote {len(labeled.events)} events and {len(frames)} ground-truth frames to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------


class _Overlay:
    """Collects clustered window events and renders one PGM per record."""

    def __init__(self, geometry: SensorGeometry, out_dir: Path, gt=None) -> None:
        self.geometry = geometry
        self.out_dir = out_dir
        self.gt = {f.t_us: f for f in gt} if gt else {}
        self.pending: Dict[int, np.ndarray] = {}
        out_dir.mkdir(parents=True, exist_ok=True)

    def hook(self, t_f: int, band: int, events) -> None:
        img = self.pending.setdefault(t_f, np.zeros((self.geometry.height, self.geometry.width), np.uint8))
        level = 96 if band < 0 else 160
        img[events.y, events.x] = np.maximum(img[events.y, events.x], level)

    def render(self, rec: DetectionRecord) -> Path:
        img = self.pending.pop(rec.t_us, None)
        if img is None:
            img = np.zeros((self.geometry.height, self.geometry.width), np.uint8)
        if rec.t_us in self.gt:
            for g in self.gt[rec.t_us].boxes:
                _draw_box(img, g.box, 200)
        for b in rec.boxes:
            _draw_box(img, b.box, 255)
        path = self.out_dir / f"frame_{rec.t_us:012d}.pgm"
        header = f"P5\n{self.geometry.width} {self.geometry.height}\n255\n".encode()
        atomic_write_bytes(path, header + img.tobytes())
        return path


def _draw_box(img: np.ndarray, box, level: int) -> None:
    h, w = img.shape
    c = box.clipped(w, h)
    if c is None:
        return
    img[c.y_min, c.x_min:c.x_max + 1] = level
    img[c.y_max, c.x_min:c.x_max + 1] = level
    img[c.y_min:c.y_max + 1, c.x_min] = level
    img[c.y_min:c.y_max + 1, c.x_max] = level


def cmd_run(args) -> int:
    start = time.perf_counter()
    cfg_path, events_path, out = Path(args.config), Path(args.events), Path(args.out)
    cfg = load_pipeline_config(cfg_path)
    gt = None
    inputs = {}
    if args.gt:
        gt = read_ground_truth(args.gt)
        inputs[str(args.gt)] = _sha256(Path(args.gt))
        cfg = replace(cfg, eval_timestamps=tuple(f.t_us for f in gt), eval_interval_us=None)
    if not events_path.is_file():
        raise CliError(EXIT_IO, f"cannot read events file {events_path}")
    inputs[str(events_path)] = _sha256(events_path)

    overlay = _Overlay(cfg.geometry, Path(args.overlay), gt) if args.overlay else None
    records = []
    outputs = [str(out)]
    for rec in detect_chunks(iter_events_csv(events_path), cfg, overlay.hook if overlay else None):
        records.append(rec)
        if overlay:
            outputs.append(str(overlay.render(rec)))
    _write(out, write_detections, records)
    man = RunManifest("run", _sha256(cfg_path), inputs, outputs, wall_seconds=time.perf_counter() - start)
    atomic_write_bytes(_manifest_path(out), man.to_json())
    n = sum(len(r.boxes) for r in records)
    print(f"wrote {len(records)} records with {n} boxes to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    start = time.perf_counter()
    pred, gt = read_detections(args.pred), read_ground_truth(args.gt)
    m = evaluate(pred, gt, strict_paper_fp=args.strict_paper_fp)
    buf = io.BytesIO()
    write_metrics(m, buf)
    if args.out:
        out = Path(args.out)
        atomic_write_bytes(out, buf.getvalue())
        man = RunManifest("eval", None, {args.pred: _sha256(Path(args.pred)), args.gt: _sha256(Path(args.gt))},
                          [str(out)], wall_seconds=time.perf_counter() - start)
        atomic_write_bytes(_manifest_path(out), man.to_json())
    sys.stdout.write(buf.getvalue().decode())
    return EXIT_OK


def cmd_calibrate(args) -> int:
    if not args.speed > 0:
        raise ConfigError("--speed must be > 0")
    try:
        tb = TimeBase(dt_us=args.dt_us)
        geometry = SensorGeometry.parse(args.geometry)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        lif = calibrate_branch(args.speed, tb, geometry, args.u_thr)
    except CalibrationError as exc:
        raise CliError(EXIT_CONFIG, f"calibration failed: {exc}") from None
    note = f"calibrated for {args.speed:g} px/s at dt_us={args.dt_us} on a {geometry.width}x{geometry.height} sensor"
    sys.stdout.write(branch_fragment(SpeedBranchConfig(args.band_index, float(args.speed), lif), note))
    return EXIT_OK


def cmd_energy(args) -> int:
    if args.paper:
        out = reproduce_reference().to_dict()
    else:
        if not (args.events and args.geometry):
            raise ConfigError("energy needs --paper or both --events and --geometry")
        try:
            geometry = SensorGeometry.parse(args.geometry)
            tb = TimeBase(dt_us=args.dt_us)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        stream = read_events_csv(args.events)
        out = ops_report(stream, geometry, tb).to_dict()
    sys.stdout.write(json.dumps(out, indent=2) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spikedet", description="Multi-speed spiking event-camera object detection.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="render a synthetic scene")
    g.add_argument("--config", required=True, help="scene TOML file")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="detect objects in an event stream")
    r.add_argument("--config", required=True, help="pipeline TOML file")
    r.add_argument("--events", required=True, help="events CSV")
    r.add_argument("--out", required=True, help="detections JSON Lines")
    r.add_argument("--gt", help="ground-truth JSON Lines; its timestamps replace the configured ones")
    r.add_argument("--overlay", help="directory for per-record PGM images")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score detections against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", help="metrics JSON (also printed)")
    e.add_argument("--strict-paper-fp", action="store_true",
                   help="count false positives only at frames without ground truth")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("calibrate", help="print a calibrated [[branches]] table")
    c.add_argument("--speed", type=float, required=True, help="threshold speed in px/s")
    c.add_argument("--dt-us", type=int, default=1000)
    c.add_argument("--geometry", default="346x260")
    c.add_argument("--u-thr", type=float, default=1.0)
    c.add_argument("--band-index", type=int, default=0)
    c.set_defaults(func=cmd_calibrate)

    n = sub.add_parser("energy", help="synaptic-operation energy estimate")
    n.add_argument("--paper", action="store_true", help="reproduce the reference energy figures")
    n.add_argument("--events")
    n.add_argument("--geometry")
    n.add_argument("--dt-us", type=int, default=1000)
    n.set_defaults(func=cmd_energy)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
