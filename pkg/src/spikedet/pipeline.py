"""Multi-speed detection: branch fan-out, band differencing, windowed clustering, calibration."""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .clustering import DbscanParams, cluster_boxes, dbscan
from .events import EventStream, SensorGeometry, TimeBase, quantize_array
from .io import DetectedBox, DetectionRecord
from .lif import BranchChunk, BranchFilter, BranchOutput, LifParams, run_branch
from .synthetic import generate, sweep_scene

RESIDUAL_BAND = -1
DEFAULT_WINDOW_US = 33_000

# spike-step fractions that define a calibrated branch
CAL_PASS_FRACTION = 0.5
CAL_REJECT_FRACTION = 0.05
CAL_SLOW_FACTOR = 0.5


class ConfigError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpeedBranchConfig:
    band_index: int
    threshold_speed: float  # px/s, informational
    lif: LifParams = field(default_factory=LifParams)


@dataclass(frozen=True)
class PipelineConfig:
    geometry: SensorGeometry
    branches: Tuple[SpeedBranchConfig, ...]
    time_base: TimeBase = field(default_factory=TimeBase)
    dbscan: DbscanParams = field(default_factory=DbscanParams)
    min_cluster_size: Optional[int] = None  # None -> dbscan.min_pts
    window_us: int = DEFAULT_WINDOW_US
    eval_timestamps: Optional[Tuple[int, ...]] = None
    eval_interval_us: Optional[int] = None
    eval_start_us: Optional[int] = None  # first interval timestamp, default one interval after t0
    eval_end_us: Optional[int] = None  # default: end of the last event's step
    include_residual_band: bool = False
    parallel: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "branches", tuple(self.branches))
        if self.eval_timestamps is not None:
            object.__setattr__(self, "eval_timestamps", tuple(int(t) for t in self.eval_timestamps))
        if not self.branches:
            raise ConfigError("at least one branch is required")
        speeds = [b.threshold_speed for b in self.branches]
        if any(b <= a for a, b in zip(speeds, speeds[1:])):
            raise ConfigError("branches must be strictly increasing in threshold_speed")
        if self.window_us <= 0:
            raise ConfigError("window_us must be > 0")
        if self.eval_interval_us is not None and self.eval_interval_us <= 0:
            raise ConfigError("eval_interval_us must be > 0")
        if self.eval_timestamps is not None and list(self.eval_timestamps) != sorted(self.eval_timestamps):
            raise ConfigError("eval_timestamps must be sorted")
        if self.min_cluster_size is not None and self.min_cluster_size < 1:
            raise ConfigError("min_cluster_size must be >= 1")
        for problem in nesting_problems(self.branches):
            warnings.warn(problem, stacklevel=3)

    @property
    def cluster_floor(self) -> int:
        return self.dbscan.min_pts if self.min_cluster_size is None else self.min_cluster_size


def nesting_problems(branches: Sequence[SpeedBranchConfig]) -> List[str]:
    """Reasons the faster branches might pass events the slower ones reject."""
    out = []
    for lo, hi in zip(branches, branches[1:]):
        a, b = lo.lif, hi.lif
        if b.beta > a.beta:
            out.append(f"branch {hi.band_index}: beta {b.beta} exceeds slower branch beta {a.beta}")
        if b.u_thr != a.u_thr:
            out.append(f"branch {hi.band_index}: u_thr differs from branch {lo.band_index}")
        if (b.kernel, b.recovery_radius, b.recovery_lookback, b.binary_input) != (
            a.kernel, a.recovery_radius, a.recovery_lookback, a.binary_input
        ):
            out.append(f"branch {hi.band_index}: kernel/recovery settings differ from branch {lo.band_index}")
    return out


# --------------------------------------------------------------------------
# multiset operations on event streams


def _occurrence(keys: np.ndarray) -> np.ndarray:
    """For each row, how many identical rows precede it (in row order)."""
    if len(keys) == 0:
        return np.empty(0, dtype=np.int64)
    # lexsort is stable, so equal rows keep their original relative order
    order = np.lexsort(tuple(keys[:, c] for c in range(keys.shape[1] - 1, -1, -1)))
    s = keys[order]
    new = np.r_[True, np.any(s[1:] != s[:-1], axis=1)]
    start = np.maximum.accumulate(np.where(new, np.arange(len(s)), 0))
    occ = np.empty(len(keys), dtype=np.int64)
    occ[order] = np.arange(len(s)) - start
    return occ


def _matched(a: EventStream, b: EventStream) -> np.ndarray:
    """Mask over ``a``: rows that pair with a row of ``b`` under multiset matching."""
    if not len(a) or not len(b):
        return np.zeros(len(a), dtype=bool)
    ka, kb = a.keys(), b.keys()
    ra = np.column_stack([ka, _occurrence(ka), np.zeros(len(a), np.int64)])
    rb = np.column_stack([kb, _occurrence(kb), np.ones(len(b), np.int64)])
    rows = np.vstack([ra, rb])
    idx = np.r_[np.arange(len(a)), np.full(len(b), -1)]
    order = np.lexsort(tuple(rows[:, c] for c in range(rows.shape[1] - 1, -1, -1)))
    s = rows[order]
    same = np.all(s[1:, :5] == s[:-1, :5], axis=1) & (s[:-1, 5] == 0) & (s[1:, 5] == 1)
    hit = np.zeros(len(a), dtype=bool)
    hit[idx[order[:-1][same]]] = True
    return hit


def band_difference(passed_lo: EventStream, passed_hi: EventStream) -> EventStream:
    """Multiset difference ``passed_lo - passed_hi`` keyed by ``(t_us, x, y, polarity)``."""
    return passed_lo[~_matched(passed_lo, passed_hi)].sorted()


def multiset_intersection(a: EventStream, b: EventStream) -> EventStream:
    return a[_matched(a, b)].sorted()


# --------------------------------------------------------------------------
# whole-stream separation


@dataclass(frozen=True)
class BandOutput:
    band_index: int
    speed_range: Tuple[float, float]  # [s_lo, s_hi)
    passed: EventStream


@dataclass(frozen=True)
class Separation:
    branches: Tuple[BranchOutput, ...]  # raw per-branch outputs
    passed: Tuple[EventStream, ...]  # nested passed sets, see nest_passed
    bands: Tuple[BandOutput, ...]  # slowest first; the last one is the top branch's passed set
    residual: EventStream  # bottom branch's residual


def nest_passed(passed: Sequence[EventStream]) -> List[EventStream]:
    """Restrict each branch's passed set to what every slower branch also passed.

    Reset timing differs between leak factors, so a faster branch can
    occasionally recover an event the slower one did not.  Intersecting
    keeps the bands a partition of the input.
    """
    out: List[EventStream] = []
    for p in passed:
        out.append(p if not out else multiset_intersection(p, out[-1]))
    return out


def _bands_from_passed(cfg: PipelineConfig, passed: Sequence[EventStream]) -> List[BandOutput]:
    out = []
    speeds = [b.threshold_speed for b in cfg.branches]
    for k, br in enumerate(cfg.branches):
        hi = passed[k + 1] if k + 1 < len(passed) else EventStream.empty()
        s_hi = speeds[k + 1] if k + 1 < len(speeds) else math.inf
        out.append(BandOutput(br.band_index, (speeds[k], s_hi), band_difference(passed[k], hi)))
    return out


def separate(stream: EventStream, cfg: PipelineConfig) -> Separation:
    """Run every branch over ``stream`` and split the result into speed bands."""
    def one(br: SpeedBranchConfig) -> BranchOutput:
        return run_branch(stream, cfg.time_base, br.lif, cfg.geometry)

    if cfg.parallel and len(cfg.branches) > 1:
        with ThreadPoolExecutor(max_workers=len(cfg.branches)) as pool:
            outs = list(pool.map(one, cfg.branches))
    else:
        outs = [one(b) for b in cfg.branches]
    nested = nest_passed([o.passed for o in outs])
    bands = _bands_from_passed(cfg, nested)
    return Separation(tuple(outs), tuple(nested), tuple(bands), outs[0].residual)


# --------------------------------------------------------------------------
# streaming detection


class _EvalSchedule:
    def __init__(self, cfg: PipelineConfig) -> None:
        self.explicit = list(cfg.eval_timestamps) if cfg.eval_timestamps is not None else None
        self.interval = cfg.eval_interval_us
        t0 = cfg.time_base.t0_us
        if self.interval is not None:
            self.next_t = cfg.eval_start_us if cfg.eval_start_us is not None else t0 + self.interval
        self.end = cfg.eval_end_us
        self.pos = 0
        if self.explicit is None and self.interval is None:
            raise ConfigError("either eval_timestamps or eval_interval_us is required")

    def peek(self) -> Optional[int]:
        if self.explicit is not None:
            return self.explicit[self.pos] if self.pos < len(self.explicit) else None
        if self.end is not None and self.next_t > self.end:
            return None
        return self.next_t

    def pop(self) -> None:
        if self.explicit is not None:
            self.pos += 1
        else:
            self.next_t += self.interval


class Detector:
    """Streaming form of :func:`detect`.

    Memory is bounded by the branch filters' two-step buffers plus one
    clustering window of passed events per band.
    """

    def __init__(self, cfg: PipelineConfig, window_hook=None) -> None:
        self.cfg = cfg
        # called as window_hook(t_f, band, events) for every clustered window
        self.window_hook = window_hook
        self.filters = [BranchFilter(b.lif, cfg.geometry, cfg.time_base) for b in cfg.branches]
        self._bands: Dict[int, List[EventStream]] = {b.band_index: [] for b in cfg.branches}
        if cfg.include_residual_band:
            self._bands[RESIDUAL_BAND] = []
        self._schedule = _EvalSchedule(cfg)
        self._pool = ThreadPoolExecutor(max_workers=len(self.filters)) if cfg.parallel and len(self.filters) > 1 else None
        self._last_t: Optional[int] = None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def push(self, chunk: EventStream) -> List[DetectionRecord]:
        if not len(chunk):
            return []
        self._last_t = int(chunk.t[-1])
        results = self._map(lambda f: f.push(chunk))
        self._absorb(results)
        final_step = self.filters[0].final_step
        return self._emit_ready(final_step)

    def finish(self) -> List[DetectionRecord]:
        results = self._map(lambda f: f.flush())
        self._absorb(results)
        if self._schedule.explicit is None and self._schedule.end is None:
            # interval mode without an explicit end runs to the close of the last event's step
            tb = self.cfg.time_base
            if self._last_t is None:
                self._schedule.end = tb.t0_us - 1
            else:
                last_step = (self._last_t - tb.t0_us) // tb.dt_us
                self._schedule.end = tb.t0_us + (last_step + 1) * tb.dt_us - 1
        out = self._emit_ready(None)
        self.close()
        return out

    def _map(self, fn) -> List[BranchChunk]:
        if self._pool is None:
            return [fn(f) for f in self.filters]
        return list(self._pool.map(fn, self.filters))

    def _absorb(self, results: List[BranchChunk]) -> None:
        # every filter finalises the same input events per call, so nesting
        # chunk by chunk equals nesting the whole streams
        for band in _bands_from_passed(self.cfg, nest_passed([r.passed for r in results])):
            if len(band.passed):
                self._bands[band.band_index].append(band.passed)
        if self.cfg.include_residual_band and len(results[0].residual):
            self._bands[RESIDUAL_BAND].append(results[0].residual)

    def _emit_ready(self, final_step: Optional[int]) -> List[DetectionRecord]:
        out = []
        tb = self.cfg.time_base
        while True:
            t_f = self._schedule.peek()
            if t_f is None:
                break
            if final_step is not None and (t_f >= tb.t0_us and (t_f - tb.t0_us) // tb.dt_us > final_step):
                break
            out.append(self._cluster_at(t_f))
            self._schedule.pop()
            nxt = self._schedule.peek()
            if nxt is not None:
                self._prune(nxt - self.cfg.window_us)
        return out

    def _prune(self, t_cut: int) -> None:
        for band, parts in self._bands.items():
            kept = [p[p.t > t_cut] if int(p.t[0]) <= t_cut else p for p in parts if int(p.t[-1]) > t_cut]
            self._bands[band] = kept

    def _cluster_at(self, t_f: int) -> DetectionRecord:
        boxes = []
        lo = t_f - self.cfg.window_us
        for band in sorted(self._bands):
            ev = EventStream.concat(self._bands[band])
            sel = ev[(ev.t > lo) & (ev.t <= t_f)]
            if self.window_hook is not None:
                self.window_hook(t_f, band, sel)
            if len(sel) < self.cfg.cluster_floor:
                continue
            pts = np.column_stack([sel.x, sel.y])
            labeling = dbscan(pts, self.cfg.dbscan)
            for box, n in cluster_boxes(pts, labeling, self.cfg.cluster_floor):
                boxes.append(DetectedBox(box, band, n))
        return DetectionRecord(t_f, tuple(boxes))


def detect(stream: EventStream, cfg: PipelineConfig) -> List[DetectionRecord]:
    det = Detector(cfg)
    try:
        return det.push(stream) + det.finish()
    finally:
        det.close()


def detect_chunks(chunks: Iterable[EventStream], cfg: PipelineConfig,
                  window_hook=None) -> Iterable[DetectionRecord]:
    """Detection over an iterable of timestamp-ordered chunks, yielding records as they are ready."""
    det = Detector(cfg, window_hook)
    try:
        for chunk in chunks:
            yield from det.push(chunk)
        yield from det.finish()
    finally:
        det.close()


# --------------------------------------------------------------------------
# calibration


def _probe_geometry(geometry: SensorGeometry) -> SensorGeometry:
    return SensorGeometry(min(geometry.width, 64), min(geometry.height, 32))


def spike_step_fraction(events: EventStream, params: LifParams, tb: TimeBase, geometry: SensorGeometry) -> float:
    """Fraction of the steps carrying input in which at least one neuron spikes."""
    if not len(events):
        return 0.0
    active = np.unique(quantize_array(events.t, tb))
    spikes = run_branch(events, tb, params, geometry).spikes
    return len(np.intersect1d(active, spikes.step)) / len(active)


def calibrate_branch(
    target_speed: float,
    tb: TimeBase,
    geometry: SensorGeometry,
    u_thr: float = 1.0,
    *,
    pass_fraction: float = CAL_PASS_FRACTION,
    reject_fraction: float = CAL_REJECT_FRACTION,
    slow_factor: float = CAL_SLOW_FACTOR,
    iterations: int = 40,
) -> LifParams:
    """Pick ``beta`` so a bar at ``target_speed`` spikes and one at half that speed does not.

    The probe is an outline bar sweeping across a small strip of the sensor.
    ``beta`` is bisected twice: for the lowest value at which the target
    bar spikes in at least ``pass_fraction`` of its input steps, and for the
    highest at which the slow bar spikes in at most ``reject_fraction``.
    The midpoint of that interval is returned.
    """
    if not target_speed > 0:
        raise ValueError("target_speed must be > 0")
    probe = _probe_geometry(geometry)
    gen_dt = max(1, tb.dt_us // 10)
    fast = generate(sweep_scene(target_speed, probe, gen_dt_us=gen_dt)[0])[0].events
    slow = generate(sweep_scene(target_speed * slow_factor, probe, gen_dt_us=gen_dt)[0])[0].events
    base = LifParams(u_thr=u_thr)

    def frac(events: EventStream, beta: float) -> float:
        return spike_step_fraction(events, replace(base, beta=beta), tb, probe)

    lo_b, hi_b = 1e-6, 1.0 - 1e-9
    f_top = frac(fast, hi_b)
    s_bot = frac(slow, lo_b)
    if f_top < pass_fraction or s_bot > reject_fraction:
        raise CalibrationError(
            f"no beta separates {target_speed} px/s from {target_speed * slow_factor} px/s at dt_us={tb.dt_us}: "
            f"target spike fraction at beta->1 is {f_top:.3f}, slow spike fraction at beta->0 is {s_bot:.3f}"
        )

    # lowest beta where the target bar passes
    a, b = lo_b, hi_b
    for _ in range(iterations):
        m = 0.5 * (a + b)
        if frac(fast, m) >= pass_fraction:
            b = m
        else:
            a = m
    beta_min = b

    # highest beta where the slow bar is still rejected
    a, b = lo_b, hi_b
    for _ in range(iterations):
        m = 0.5 * (a + b)
        if frac(slow, m) <= reject_fraction:
            a = m
        else:
            b = m
    beta_max = a

    if beta_min > beta_max:
        mid = 0.5 * (beta_min + beta_max)
        raise CalibrationError(
            f"no beta separates {target_speed} px/s from {target_speed * slow_factor} px/s at dt_us={tb.dt_us}: "
            f"pass needs beta >= {beta_min:.6f}, rejection needs beta <= {beta_max:.6f}; "
            f"at beta={mid:.6f} spike fractions are {frac(fast, mid):.3f} (target) and {frac(slow, mid):.3f} (slow)"
        )
    return replace(base, beta=0.5 * (beta_min + beta_max))


def calibrated_branches(speeds: Sequence[float], tb: TimeBase, geometry: SensorGeometry,
                        u_thr: float = 1.0) -> Tuple[SpeedBranchConfig, ...]:
    """Calibrate one branch per threshold speed (slowest first)."""
    return tuple(
        SpeedBranchConfig(i, float(s), calibrate_branch(s, tb, geometry, u_thr))
        for i, s in enumerate(sorted(speeds))
    )
