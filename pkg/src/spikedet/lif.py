"""Single-layer LIF speed gate.

One neuron per pixel, each fed by a 3x3 weighted neighbourhood of event
counts.  Per step ``n`` a neuron that receives input is updated as::

    U <- beta**(n - last) * U          # leak, caught up lazily
    U <- U + sum(kernel * counts)      # weighted input of this step
    spike if U > u_thr, then U <- 0

Neurons outside every event footprint are never visited; their leak is
applied when they are next touched.  The catch-up multiplies by ``beta``
one step at a time (so results match a dense per-step simulation bit for
bit) and stops early once the potential drops below a floor where it can
no longer change any future sum (see ``_decay_floor``).

Spiking neurons recover the raw input events within Chebyshev radius
``recovery_radius`` from the current and previous step.  An event is final
once the step after its own has been processed, so both passed and residual
events leave the filter exactly one step after they arrived.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np
from numba import njit

from .events import EventStream, SensorGeometry, TimeBase, quantize_array

DEFAULT_KERNEL: Tuple[Tuple[float, ...], ...] = (
    (0.1, 0.1, 0.1),
    (0.1, 0.2, 0.1),
    (0.1, 0.1, 0.1),
)
DEFAULT_BETA = 0.86  # close to the 200 px/s calibration at dt = 1 ms
DEFAULT_U_THR = 1.0


@dataclass(frozen=True)
class LifParams:
    beta: float = DEFAULT_BETA
    u_thr: float = DEFAULT_U_THR
    kernel: Tuple[Tuple[float, ...], ...] = DEFAULT_KERNEL
    recovery_radius: int = 1
    recovery_lookback: int = 1  # extra past steps searched on a spike (0 or 1)
    binary_input: bool = False  # clip per-pixel counts to 1 within a step

    def __post_init__(self) -> None:
        kernel = tuple(tuple(float(v) for v in row) for row in self.kernel)
        object.__setattr__(self, "kernel", kernel)
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")
        if not self.u_thr > 0.0:
            raise ValueError(f"u_thr must be > 0, got {self.u_thr}")
        if len(kernel) != 3 or any(len(row) != 3 for row in kernel):
            raise ValueError("kernel must be 3x3")
        k = np.asarray(kernel)
        if np.any(k < 0) or not np.all(np.isfinite(k)):
            raise ValueError("kernel weights must be finite and non-negative")
        if abs(k.sum() - 1.0) > 1e-9:
            raise ValueError(f"kernel must sum to 1, sums to {k.sum()!r}")
        if self.recovery_radius < 1:
            raise ValueError("recovery_radius must be >= 1")
        if self.recovery_lookback not in (0, 1):
            raise ValueError("recovery_lookback must be 0 or 1")

    @property
    def kernel_array(self) -> np.ndarray:
        return np.asarray(self.kernel, dtype=np.float64)


def _decay_floor(params: LifParams) -> float:
    """Potentials below this value are indistinguishable from zero.

    Any non-zero step input is at least the smallest positive kernel weight
    ``w``.  For ``U < w * 2**-54`` the sum ``U + input`` rounds to ``input``
    exactly, and ``U`` alone stays far below ``u_thr``, so replacing ``U``
    by 0 cannot change any later potential or spike.
    """
    k = params.kernel_array
    w = float(k[k > 0].min())
    return min(w, params.u_thr) * 2.0**-54


def lazy_decay_equivalence(u: float, k_steps: int, beta: float) -> float:
    """Closed-form leak ``beta**k * u`` (the quantity the lazy catch-up computes)."""
    if k_steps < 0:
        raise ValueError("k_steps must be >= 0")
    return beta**k_steps * u


@njit(cache=True, nogil=True)
def _decay(u, k, beta, floor):
    if u == 0.0:
        return 0.0
    # well below the floor: skip the loop (pow and the product differ by a few ulp)
    if k > 16 and u * beta**k < 0.5 * floor:
        return 0.0
    for _ in range(k):
        u *= beta
        if u < floor:
            return 0.0
    return u


@njit(cache=True, nogil=True)
def _integrate_step(xs, ys, lo, hi, n, U, last, cnt, kernel, beta, thr, binary, floor, tx, ty, sx, sy):
    H, W = U.shape
    for i in range(lo, hi):
        cnt[ys[i] + 1, xs[i] + 1] += 1
    nt = 0
    for i in range(lo, hi):
        x = xs[i]
        y = ys[i]
        for dy in range(-1, 2):
            qy = y - dy
            if qy < 0 or qy >= H:
                continue
            for dx in range(-1, 2):
                qx = x - dx
                if qx < 0 or qx >= W:
                    continue
                if last[qy, qx] != n:
                    U[qy, qx] = _decay(U[qy, qx], n - last[qy, qx], beta, floor)
                    last[qy, qx] = n
                    tx[nt] = qx
                    ty[nt] = qy
                    nt += 1
    ns = 0
    for j in range(nt):
        qx = tx[j]
        qy = ty[j]
        inp = 0.0
        # fixed row-major tap order; the dense reference sums in the same order
        for r in range(3):
            for c in range(3):
                v = cnt[qy + r, qx + c]
                if binary and v > 1:
                    v = 1
                inp += kernel[r, c] * v
        u = U[qy, qx] + inp
        if u > thr:
            sx[ns] = qx
            sy[ns] = qy
            ns += 1
            u = 0.0
        U[qy, qx] = u
    for i in range(lo, hi):
        cnt[ys[i] + 1, xs[i] + 1] = 0
    return ns


@njit(cache=True, nogil=True)
def _run(steps, xs, ys, n_carry, U, last, cnt, stamp, kernel, beta, thr, binary, floor, radius, lookback,
         recovered, sp_step, sp_x, sp_y, tx, ty, sx, sy):
    H, W = U.shape
    N = len(steps)
    total = 0
    prev_lo = 0
    prev_hi = 0
    prev_step = -2
    g0 = 0
    while g0 < N:
        n = steps[g0]
        g1 = g0
        while g1 < N and steps[g1] == n:
            g1 += 1
        if g0 >= n_carry:
            ns = _integrate_step(xs, ys, g0, g1, n, U, last, cnt, kernel, beta, thr, binary, floor, tx, ty, sx, sy)
            for s in range(ns):
                cx = sx[s]
                cy = sy[s]
                sp_step[total] = n
                sp_x[total] = cx
                sp_y[total] = cy
                total += 1
                for yy in range(max(0, cy - radius), min(H, cy + radius + 1)):
                    for xx in range(max(0, cx - radius), min(W, cx + radius + 1)):
                        stamp[yy, xx] = n
            if ns > 0:
                for i in range(g0, g1):
                    if stamp[ys[i], xs[i]] == n:
                        recovered[i] = True
                if lookback > 0 and prev_step == n - 1:
                    for i in range(prev_lo, prev_hi):
                        if stamp[ys[i], xs[i]] == n:
                            recovered[i] = True
        prev_lo = g0
        prev_hi = g1
        prev_step = n
        g0 = g1
    return total


@dataclass
class MembraneGrid:
    """Per-pixel potential and the step at which it was last brought up to date."""

    potential: np.ndarray
    last_step: np.ndarray

    @classmethod
    def zeros(cls, geometry: SensorGeometry) -> "MembraneGrid":
        shape = (geometry.height, geometry.width)
        return cls(np.zeros(shape, dtype=np.float64), np.full(shape, -1, dtype=np.int64))

    @property
    def geometry(self) -> SensorGeometry:
        h, w = self.potential.shape
        return SensorGeometry(w, h)

    def potential_at(self, x: int, y: int, step: int, beta: float) -> float:
        """Potential of neuron (x, y) as of ``step``, with pending leak applied."""
        k = step - int(self.last_step[y, x])
        return lazy_decay_equivalence(float(self.potential[y, x]), max(k, 0), beta)


class SpikeTrain(NamedTuple):
    step: np.ndarray
    x: np.ndarray
    y: np.ndarray

    @classmethod
    def empty(cls) -> "SpikeTrain":
        return cls(np.empty(0, np.int64), np.empty(0, np.int32), np.empty(0, np.int32))

    @classmethod
    def concat(cls, trains: Sequence["SpikeTrain"]) -> "SpikeTrain":
        trains = [t for t in trains if len(t.step)]
        if not trains:
            return cls.empty()
        return cls(*(np.concatenate(cols) for cols in zip(*trains)))

    def __len__(self) -> int:  # type: ignore[override]
        return len(self.step)

    def as_set(self) -> Set[Tuple[int, int, int]]:
        return set(zip(self.step.tolist(), self.x.tolist(), self.y.tolist()))


def _check_bounds(xs: np.ndarray, ys: np.ndarray, geometry: SensorGeometry) -> None:
    bad = (xs < 0) | (xs >= geometry.width) | (ys < 0) | (ys >= geometry.height)
    if bad.any():
        i = int(np.argmax(bad))
        raise ValueError(f"event out of bounds at index {i}: ({int(xs[i])}, {int(ys[i])})")


def step(grid: MembraneGrid, events: EventStream, params: LifParams, n: int) -> Set[Tuple[int, int]]:
    """Integrate the events of step ``n`` into ``grid``; return spiking pixels."""
    if not len(events):
        return set()
    if np.any(grid.last_step > n):
        raise ValueError(f"grid has been advanced past step {n}")
    geometry = grid.geometry
    xs = np.ascontiguousarray(events.x)
    ys = np.ascontiguousarray(events.y)
    _check_bounds(xs, ys, geometry)
    cnt = np.zeros((geometry.height + 2, geometry.width + 2), dtype=np.int32)
    cap = 9 * len(events)
    tx, ty = np.empty(cap, np.int32), np.empty(cap, np.int32)
    sx, sy = np.empty(cap, np.int32), np.empty(cap, np.int32)
    ns = _integrate_step(xs, ys, 0, len(events), n, grid.potential, grid.last_step, cnt, params.kernel_array,
                         params.beta, params.u_thr, params.binary_input, _decay_floor(params), tx, ty, sx, sy)
    return set(zip(sx[:ns].tolist(), sy[:ns].tolist()))


def recover(spikes: Sequence[Tuple[int, int]], previous: EventStream, current: EventStream,
            recovery_radius: int = 1) -> EventStream:
    """Events of the previous and current step within ``recovery_radius`` of a spike.

    Each event is returned at most once, previous step first, in input order.
    """
    both = EventStream.concat([previous, current])
    if not len(both) or not len(spikes):
        return EventStream.empty()
    s = np.asarray(list(spikes), dtype=np.int64).reshape(-1, 2)
    dx = np.abs(both.x.astype(np.int64)[:, None] - s[None, :, 0])
    dy = np.abs(both.y.astype(np.int64)[:, None] - s[None, :, 1])
    hit = (np.maximum(dx, dy) <= recovery_radius).any(axis=1)
    return both[hit]


class BranchChunk(NamedTuple):
    """Events finalised by one :meth:`BranchFilter.push` or :meth:`BranchFilter.flush`."""

    passed: EventStream
    residual: EventStream
    spikes: SpikeTrain


class BranchFilter:
    """Streaming LIF gate for one speed branch.

    Feed timestamp-ordered chunks with :meth:`push` and finish with
    :meth:`flush`.  Memory is the membrane grid plus the events of at most
    two steps (the newest, still incomplete step and the one before it,
    which waits for the next step's spikes).
    """

    def __init__(self, params: LifParams, geometry: SensorGeometry, tb: TimeBase) -> None:
        self.params = params
        self.geometry = geometry
        self.tb = tb
        self.grid = MembraneGrid.zeros(geometry)
        H, W = geometry.height, geometry.width
        self._cnt = np.zeros((H + 2, W + 2), dtype=np.int32)
        self._stamp = np.full((H, W), -1, dtype=np.int64)
        self._kernel = params.kernel_array
        self._floor = _decay_floor(params)
        self._carry = EventStream.empty()
        self._carry_steps = np.empty(0, np.int64)
        self._carry_rec = np.empty(0, bool)
        self._held: List[EventStream] = []
        self._last_t: Optional[int] = None
        self._complete = -1

    def push(self, chunk: EventStream) -> BranchChunk:
        """Add events; returns whatever became final.  The newest step is held back."""
        if not len(chunk):
            return _empty_chunk()
        if not chunk.is_sorted() or (self._last_t is not None and int(chunk.t[0]) < self._last_t):
            raise ValueError("timestamp inversion: events must arrive in non-decreasing time order")
        _check_bounds(chunk.x, chunk.y, self.geometry)
        self._last_t = int(chunk.t[-1])
        self._held.append(chunk)
        newest = int(quantize_array(chunk.t[-1:], self.tb)[0])
        return self.advance(newest - 1)

    def advance(self, complete_step: int) -> BranchChunk:
        """Declare every step up to ``complete_step`` complete and process it.

        Events of step ``s`` become final once step ``s + 1`` is complete.
        Calls with a step at or below an earlier one are no-ops.
        """
        if complete_step <= self._complete:
            return _empty_chunk()
        self._complete = complete_step
        buf = EventStream.concat(self._held)
        steps = quantize_array(buf.t, self.tb)
        cut = int(np.searchsorted(steps, complete_step, side="right"))
        self._held = [buf[cut:]] if cut < len(buf) else []
        return self._process(buf[:cut], steps[:cut], complete_step)

    @property
    def final_step(self) -> int:
        """Highest step whose events have all been emitted."""
        return self._complete - 1

    def flush(self) -> BranchChunk:
        """Process and finalise everything still buffered."""
        return self.advance(np.iinfo(np.int64).max - 1)

    def _process(self, events: EventStream, steps: np.ndarray, complete_step: int) -> BranchChunk:
        n_carry = len(self._carry)
        ev = EventStream.concat([self._carry, events])
        if not len(ev):
            return _empty_chunk()
        all_steps = np.concatenate([self._carry_steps, steps])
        recovered = np.concatenate([self._carry_rec, np.zeros(len(events), dtype=bool)])
        spikes = SpikeTrain.empty()
        if len(events):
            cap = 9 * len(events)
            bounds = np.flatnonzero(np.r_[True, np.diff(steps) != 0, True])
            group_max = 9 * int(np.diff(bounds).max())
            sp_step = np.empty(cap, np.int64)
            sp_x, sp_y = np.empty(cap, np.int32), np.empty(cap, np.int32)
            tx, ty = np.empty(group_max, np.int32), np.empty(group_max, np.int32)
            sx, sy = np.empty(group_max, np.int32), np.empty(group_max, np.int32)
            p = self.params
            total = _run(all_steps, np.ascontiguousarray(ev.x), np.ascontiguousarray(ev.y), n_carry,
                         self.grid.potential, self.grid.last_step, self._cnt, self._stamp, self._kernel,
                         p.beta, p.u_thr, p.binary_input, self._floor, p.recovery_radius, p.recovery_lookback,
                         recovered, sp_step, sp_x, sp_y, tx, ty, sx, sy)
            spikes = SpikeTrain(sp_step[:total].copy(), sp_x[:total].copy(), sp_y[:total].copy())
        done = int(np.searchsorted(all_steps, complete_step, side="left"))
        self._carry = ev[done:]
        self._carry_steps = all_steps[done:]
        self._carry_rec = recovered[done:]
        fin = ev[:done]
        rec = recovered[:done]
        return BranchChunk(fin[rec], fin[~rec], spikes)


def _empty_chunk() -> BranchChunk:
    return BranchChunk(EventStream.empty(), EventStream.empty(), SpikeTrain.empty())


class BranchOutput(NamedTuple):
    passed: EventStream
    residual: EventStream
    spikes: SpikeTrain


def run_branch(stream: EventStream, tb: TimeBase, params: LifParams, geometry: SensorGeometry) -> BranchOutput:
    """Filter a whole stream through one branch; ``passed`` and ``residual`` partition it."""
    f = BranchFilter(params, geometry, tb)
    parts = [f.push(stream), f.flush()]
    return BranchOutput(
        EventStream.concat([c.passed for c in parts]),
        EventStream.concat([c.residual for c in parts]),
        SpikeTrain.concat([c.spikes for c in parts]),
    )


@dataclass
class StepOutput:
    """What the filter emits at ``step``: spikes of that step and the now-final events of ``step - 1``."""

    step: int
    spikes: Set[Tuple[int, int]] = field(default_factory=set)
    passed: EventStream = field(default_factory=EventStream.empty)
    residual: EventStream = field(default_factory=EventStream.empty)


def iter_steps(stream: EventStream, tb: TimeBase, params: LifParams, geometry: SensorGeometry) -> Iterator[StepOutput]:
    """Drive the filter one step at a time and report what each step emits.

    Yields a :class:`StepOutput` for every step that receives input and for
    the step right after it; idle stretches in between are skipped.
    """
    f = BranchFilter(params, geometry, tb)
    steps = quantize_array(stream.t, tb)
    bounds = np.flatnonzero(np.r_[True, np.diff(steps) != 0, True]) if len(steps) else np.empty(0, np.int64)
    by_step = {int(steps[a]): (int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])}
    clock = sorted(set(by_step) | {s + 1 for s in by_step})
    for k in clock:
        if k in by_step:
            a, b = by_step[k]
            f.push(stream[a:b])
        out = f.advance(k)
        yield StepOutput(
            step=k,
            spikes=set(zip(out.spikes.x.tolist(), out.spikes.y.tolist())),
            passed=out.passed,
            residual=out.residual,
        )
