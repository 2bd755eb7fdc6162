"""Labeled synthetic event scenes.

Moving rectangles emit one event per pixel whose occupancy changes between
simulation ticks (ON when newly covered, OFF when uncovered).  Uniform
Poisson noise and fixed-pixel static texture are superimposed.  This is an
occupancy-change model, not a photometric simulator: it gives event rates
proportional to object speed and nothing more.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .clustering import BoundingBox
from .events import EventStream, SensorGeometry
from .io import GroundTruthBox, GroundTruthFrame

NOISE_LABEL = -1
STATIC_LABEL = -2
DEFAULT_FRAME_INTERVAL_US = 33_000

FILLS = ("solid", "outline")
MOTIONS = ("linear", "bounce")


@dataclass(frozen=True)
class MovingObjectSpec:
    object_id: int
    x0: float
    y0: float
    w: int
    h: int
    vx: float = 0.0  # px/s
    vy: float = 0.0  # px/s
    fill: str = "solid"
    motion: str = "linear"  # "bounce" reflects off the sensor walls

    def __post_init__(self) -> None:
        if self.object_id < 0:
            raise ValueError("object_id must be >= 0")
        if self.w < 2 or self.h < 2:
            raise ValueError(f"object {self.object_id}: w and h must be >= 2")
        if self.fill not in FILLS:
            raise ValueError(f"object {self.object_id}: fill must be one of {FILLS}")
        if self.motion not in MOTIONS:
            raise ValueError(f"object {self.object_id}: motion must be one of {MOTIONS}")

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


@dataclass(frozen=True)
class SceneSpec:
    geometry: SensorGeometry
    duration_us: int
    gen_dt_us: int = 1_000
    objects: Tuple[MovingObjectSpec, ...] = ()
    noise_rate_hz_per_pixel: float = 0.0
    static_objects: Tuple[BoundingBox, ...] = ()
    static_rate_hz_per_pixel: float = 0.0
    rng_seed: int = 0
    frame_interval_us: int = DEFAULT_FRAME_INTERVAL_US

    def __post_init__(self) -> None:
        if self.duration_us <= 0:
            raise ValueError("duration_us must be > 0")
        if self.gen_dt_us <= 0:
            raise ValueError("gen_dt_us must be > 0")
        if self.frame_interval_us <= 0:
            raise ValueError("frame_interval_us must be > 0")
        if self.noise_rate_hz_per_pixel < 0 or self.static_rate_hz_per_pixel < 0:
            raise ValueError("rates must be >= 0")
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        # tuples keep the spec hashable and immutable
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "static_objects", tuple(self.static_objects))


@dataclass(frozen=True)
class LabeledStream:
    """Events plus a per-event source label (object id, NOISE_LABEL or STATIC_LABEL)."""

    events: EventStream
    source: np.ndarray

    def __len__(self) -> int:
        return len(self.events)

    def of_source(self, label: int) -> EventStream:
        return self.events[self.source == label]


def _round(v: float) -> int:
    # half-up, so rounding does not depend on the parity of the integer part
    return math.floor(v + 0.5)


def _reflect(u: float, span: int) -> float:
    """Triangle wave folding ``u`` into ``[0, span]``."""
    if span <= 0:
        return 0.0
    m = u % (2 * span)
    return m if m <= span else 2 * span - m


def _origin(obj: MovingObjectSpec, t_us: float, geometry: SensorGeometry) -> Tuple[int, int]:
    s = t_us / 1e6
    x, y = obj.x0 + obj.vx * s, obj.y0 + obj.vy * s
    if obj.motion == "bounce":
        x = _reflect(x, geometry.width - obj.w)
        y = _reflect(y, geometry.height - obj.h)
    return _round(x), _round(y)


def true_box(obj: MovingObjectSpec, t_us: float, geometry: SensorGeometry) -> Optional[BoundingBox]:
    """Object box at ``t_us`` rounded to pixels and clipped; None when off-sensor."""
    x, y = _origin(obj, t_us, geometry)
    return BoundingBox(x, y, x + obj.w - 1, y + obj.h - 1).clipped(geometry.width, geometry.height)


def _mask(obj: MovingObjectSpec, ox: int, oy: int, x_lo: int, y_lo: int, shape: Tuple[int, int]) -> np.ndarray:
    """Occupancy of ``obj`` at origin (ox, oy) in a local window at (x_lo, y_lo)."""
    m = np.zeros(shape, dtype=bool)
    r0, c0 = oy - y_lo, ox - x_lo
    m[r0:r0 + obj.h, c0:c0 + obj.w] = True
    if obj.fill == "outline" and obj.w > 2 and obj.h > 2:
        m[r0 + 1:r0 + obj.h - 1, c0 + 1:c0 + obj.w - 1] = False
    return m


def _object_events(obj: MovingObjectSpec, spec: SceneSpec) -> Tuple[List[np.ndarray], ...]:
    W, H = spec.geometry.width, spec.geometry.height
    ts, xs, ys, ps = [], [], [], []
    prev = _origin(obj, 0, spec.geometry)
    n_ticks = spec.duration_us // spec.gen_dt_us
    for k in range(1, n_ticks + 1):
        t = k * spec.gen_dt_us
        cur = _origin(obj, t, spec.geometry)
        if cur == prev:
            continue
        x_lo, y_lo = min(prev[0], cur[0]), min(prev[1], cur[1])
        shape = (max(prev[1], cur[1]) - y_lo + obj.h, max(prev[0], cur[0]) - x_lo + obj.w)
        before = _mask(obj, prev[0], prev[1], x_lo, y_lo, shape)
        after = _mask(obj, cur[0], cur[1], x_lo, y_lo, shape)
        changed = before != after
        rows, cols = np.nonzero(changed)
        gx, gy = cols + x_lo, rows + y_lo
        inside = (gx >= 0) & (gx < W) & (gy >= 0) & (gy < H)
        rows, cols, gx, gy = rows[inside], cols[inside], gx[inside], gy[inside]
        if len(gx):
            ts.append(np.full(len(gx), t, dtype=np.int64))
            xs.append(gx)
            ys.append(gy)
            ps.append(after[rows, cols].astype(np.int8))
        prev = cur
    return ts, xs, ys, ps


def _poisson_events(rng: np.random.Generator, box: BoundingBox, rate: float, duration_us: int):
    area = box.area
    n = int(rng.poisson(area * rate * duration_us / 1e6))
    t = rng.integers(0, duration_us, size=n, endpoint=True, dtype=np.int64)
    x = rng.integers(box.x_min, box.x_max, size=n, endpoint=True)
    y = rng.integers(box.y_min, box.y_max, size=n, endpoint=True)
    p = rng.integers(0, 1, size=n, endpoint=True).astype(np.int8)
    return t, x, y, p


def generate(spec: SceneSpec) -> Tuple[LabeledStream, List[GroundTruthFrame]]:
    """Render a scene into a timestamp-sorted labeled stream plus ground-truth frames."""
    W, H = spec.geometry.width, spec.geometry.height
    rng = np.random.default_rng(spec.rng_seed)
    ts, xs, ys, ps, src = [], [], [], [], []

    for obj in spec.objects:
        t, x, y, p = _object_events(obj, spec)
        ts += t
        xs += x
        ys += y
        ps += p
        src += [np.full(len(a), obj.object_id, dtype=np.int64) for a in t]

    sources = [(BoundingBox(0, 0, W - 1, H - 1), spec.noise_rate_hz_per_pixel, NOISE_LABEL)]
    for box in spec.static_objects:
        clipped = box.clipped(W, H)
        if clipped is not None:
            sources.append((clipped, spec.static_rate_hz_per_pixel, STATIC_LABEL))
    for box, rate, label in sources:
        if rate <= 0:
            continue
        t, x, y, p = _poisson_events(rng, box, rate, spec.duration_us)
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(p)
        src.append(np.full(len(t), label, dtype=np.int64))

    if ts:
        t = np.concatenate(ts)
        order = np.argsort(t, kind="stable")
        events = EventStream(t[order], np.concatenate(xs)[order], np.concatenate(ys)[order], np.concatenate(ps)[order])
        labels = np.concatenate(src)[order]
    else:
        events = EventStream.empty()
        labels = np.empty(0, dtype=np.int64)

    frames = ground_truth_frames(spec)
    return LabeledStream(events, labels), frames


def frame_timestamps(spec: SceneSpec) -> List[int]:
    """Ground-truth frame times: every ``frame_interval_us`` after the start, up to the duration."""
    return list(range(spec.frame_interval_us, spec.duration_us + 1, spec.frame_interval_us))


def ground_truth_frames(spec: SceneSpec) -> List[GroundTruthFrame]:
    frames = []
    for t in frame_timestamps(spec):
        boxes = []
        for obj in spec.objects:
            if obj.speed == 0:
                continue
            box = true_box(obj, t, spec.geometry)
            if box is not None:
                boxes.append(GroundTruthBox(box, obj.object_id))
        frames.append(GroundTruthFrame(t, tuple(boxes)))
    return frames


def sweep_scene(
    speed: float,
    geometry: SensorGeometry,
    *,
    height: int = 16,
    width: int = 8,
    gen_dt_us: int = 100,
    margin: int = 4,
    fill: str = "outline",
) -> Tuple[SceneSpec, MovingObjectSpec]:
    """A single bar sweeping left to right across ``geometry`` at ``speed`` px/s.

    Used by branch calibration.  The bar starts just off the left edge and
    the scene ends when it has left the right edge.
    """
    h = min(height, geometry.height - 2 * margin) if geometry.height > 2 * margin + 2 else height
    obj = MovingObjectSpec(0, x0=-width, y0=(geometry.height - h) // 2, w=width, h=h, vx=speed, fill=fill)
    travel = geometry.width + 2 * width
    duration = int(math.ceil(travel / speed * 1e6))
    duration = max(gen_dt_us, duration - duration % gen_dt_us)
    return SceneSpec(geometry, duration, gen_dt_us, (obj,)), obj


def expected_noise_count(spec: SceneSpec) -> float:
    return spec.geometry.num_pixels * spec.noise_rate_hz_per_pixel * spec.duration_us / 1e6


def scene_from_dict(d: dict) -> SceneSpec:
    """Build a :class:`SceneSpec` from a parsed config mapping (see docs/CONFIG.md)."""
    geo = d["geometry"]
    geometry = SensorGeometry.parse(geo) if isinstance(geo, str) else SensorGeometry(int(geo["width"]), int(geo["height"]))
    objects = tuple(
        MovingObjectSpec(
            object_id=int(o["id"]),
            x0=float(o["x0"]),
            y0=float(o["y0"]),
            w=int(o["w"]),
            h=int(o["h"]),
            vx=float(o.get("vx", 0.0)),
            vy=float(o.get("vy", 0.0)),
            fill=str(o.get("fill", "solid")),
            motion=str(o.get("motion", "linear")),
        )
        for o in d.get("objects", [])
    )
    statics = tuple(BoundingBox(*map(int, s["box"])) for s in d.get("static", []))
    return SceneSpec(
        geometry=geometry,
        duration_us=int(d["duration_us"]),
        gen_dt_us=int(d.get("gen_dt_us", 1_000)),
        objects=objects,
        noise_rate_hz_per_pixel=float(d.get("noise_rate_hz_per_pixel", 0.0)),
        static_objects=statics,
        static_rate_hz_per_pixel=float(d.get("static_rate_hz_per_pixel", 0.0)),
        rng_seed=int(d.get("seed", 0)),
        frame_interval_us=int(d.get("frame_interval_us", DEFAULT_FRAME_INTERVAL_US)),
    )


def labels_to_strings(source: Sequence[int]) -> List[str]:
    names = {NOISE_LABEL: "NOISE", STATIC_LABEL: "STATIC"}
    return [names.get(int(s), str(int(s))) for s in source]
