"""Event, sensor and time-base types shared by every stage of the detector."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Sequence, Union

import numpy as np

DEFAULT_DT_US = 1_000


class Polarity(enum.IntEnum):
    OFF = 0
    ON = 1


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t_us: int
    polarity: Polarity = Polarity.ON

    def key(self) -> tuple[int, int, int, int]:
        """Identity used for multiset operations: ``(t_us, x, y, polarity)``."""
        return (self.t_us, self.x, self.y, int(self.polarity))


@dataclass(frozen=True)
class SensorGeometry:
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"sensor geometry must be positive, got {self.width}x{self.height}")

    @property
    def num_pixels(self) -> int:
        return self.width * self.height

    @classmethod
    def parse(cls, text: str) -> "SensorGeometry":
        """Parse ``"WxH"`` (e.g. ``"346x260"``)."""
        try:
            w, h = text.lower().split("x")
            return cls(int(w), int(h))
        except ValueError as exc:
            raise ValueError(f"bad geometry {text!r}, expected WxH") from exc


@dataclass(frozen=True)
class TimeBase:
    t0_us: int = 0
    dt_us: int = DEFAULT_DT_US

    def __post_init__(self) -> None:
        if self.dt_us <= 0:
            raise ValueError(f"dt_us must be > 0, got {self.dt_us}")


def quantize(t_us: int, tb: TimeBase) -> int:
    """Map a timestamp to its step index ``floor((t_us - t0_us) / dt_us)``."""
    if t_us < tb.t0_us:
        raise ValueError(f"pre-epoch event: t_us={t_us} < t0_us={tb.t0_us}")
    return (t_us - tb.t0_us) // tb.dt_us


def quantize_array(t_us: np.ndarray, tb: TimeBase) -> np.ndarray:
    t = np.asarray(t_us, dtype=np.int64)
    if t.size and int(t.min()) < tb.t0_us:
        bad = int(np.argmax(t < tb.t0_us))
        raise ValueError(f"pre-epoch event at index {bad}: t_us={int(t[bad])} < t0_us={tb.t0_us}")
    return (t - tb.t0_us) // tb.dt_us


Index = Union[int, slice, np.ndarray, Sequence[int]]


class EventStream:
    """An ordered, immutable batch of events held as parallel numpy columns.

    ``t`` is int64 microseconds, ``x``/``y`` are int32 pixel coordinates and
    ``p`` is int8 polarity (1 = ON, 0 = OFF).  Indexing with an integer gives
    an :class:`Event`; slices, masks and index arrays give a new stream.
    """

    __slots__ = ("t", "x", "y", "p")

    def __init__(self, t, x, y, p) -> None:
        t = np.array(t, dtype=np.int64)
        x = np.array(x, dtype=np.int32)
        y = np.array(y, dtype=np.int32)
        p = np.array(p, dtype=np.int8)
        if not (t.ndim == x.ndim == y.ndim == p.ndim == 1):
            raise ValueError("event columns must be one-dimensional")
        if not (len(t) == len(x) == len(y) == len(p)):
            raise ValueError("event columns must have equal length")
        for arr in (t, x, y, p):
            arr.flags.writeable = False
        self.t, self.x, self.y, self.p = t, x, y, p

    @classmethod
    def empty(cls) -> "EventStream":
        return cls([], [], [], [])

    @classmethod
    def from_events(cls, events: Iterable[Event]) -> "EventStream":
        rows = [(e.t_us, e.x, e.y, int(e.polarity)) for e in events]
        if not rows:
            return cls.empty()
        t, x, y, p = zip(*rows)
        return cls(t, x, y, p)

    @classmethod
    def concat(cls, streams: Sequence["EventStream"]) -> "EventStream":
        streams = [s for s in streams if len(s)]
        if not streams:
            return cls.empty()
        if len(streams) == 1:
            return streams[0]
        return cls(
            np.concatenate([s.t for s in streams]),
            np.concatenate([s.x for s in streams]),
            np.concatenate([s.y for s in streams]),
            np.concatenate([s.p for s in streams]),
        )

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for t, x, y, p in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(x, y, t, Polarity(p))

    def __getitem__(self, idx: Index):
        if isinstance(idx, (int, np.integer)):
            return Event(int(self.x[idx]), int(self.y[idx]), int(self.t[idx]), Polarity(int(self.p[idx])))
        return EventStream(self.t[idx], self.x[idx], self.y[idx], self.p[idx])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    def __repr__(self) -> str:
        if not len(self):
            return "EventStream(empty)"
        return f"EventStream(n={len(self)}, t=[{self.t[0]}..{self.t[-1]}])"

    def is_sorted(self) -> bool:
        return bool(np.all(self.t[1:] >= self.t[:-1]))

    def sorted(self) -> "EventStream":
        """Stable sort by timestamp (file order kept among equal timestamps)."""
        if self.is_sorted():
            return self
        return self[np.argsort(self.t, kind="stable")]

    def keys(self) -> np.ndarray:
        """``(len, 4)`` int64 array of ``(t_us, x, y, p)`` rows."""
        return np.stack([self.t, self.x.astype(np.int64), self.y.astype(np.int64), self.p.astype(np.int64)], axis=1)

    def to_list(self) -> List[Event]:
        return list(self)


@dataclass(frozen=True)
class Violation:
    index: int
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def messages(self) -> List[str]:
        return [v.message for v in self.violations]


def validate_stream(stream: EventStream, geometry: SensorGeometry) -> ValidationReport:
    """Report every out-of-bounds coordinate and every timestamp inversion."""
    found: list[tuple[int, int, str]] = []
    checks = (
        (0, (stream.x < 0) | (stream.x >= geometry.width), "x out of bounds at index {}"),
        (1, (stream.y < 0) | (stream.y >= geometry.height), "y out of bounds at index {}"),
        (2, stream.t < 0, "negative timestamp at index {}"),
    )
    for order, mask, fmt in checks:
        for i in np.flatnonzero(mask).tolist():
            found.append((i, order, fmt.format(i)))
    if len(stream) > 1:
        for i in (np.flatnonzero(stream.t[1:] < stream.t[:-1]) + 1).tolist():
            found.append((i, 3, f"timestamp inversion at index {i}"))
    found.sort()
    return ValidationReport(tuple(Violation(i, msg) for i, _, msg in found))
