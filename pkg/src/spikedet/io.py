"""On-disk formats: event CSV, label CSV, detection / ground-truth JSON Lines, metrics JSON.

All timestamps on disk are integer microseconds.  Parsers raise
:class:`FormatError` (a ``ValueError``) carrying the 1-based line number for
anything they cannot accept; they never raise anything else on bad input.
"""
from __future__ import annotations

import io
import itertools
import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, List, Optional, Sequence, Union

import numpy as np

from .clustering import BoundingBox
from .events import EventStream

Source = Union[str, os.PathLike, bytes, IO[bytes], IO[str]]
Sink = Union[str, os.PathLike, IO[str]]

EVENT_HEADERS = ("t,x,y,p", "t_us,x,y,p")
CHUNK_LINES = 1 << 16

# at most 18 digits keeps every accepted value inside int64
_CLEAN_CHUNK = re.compile(rb"(?:\d{1,18},\d{1,18},\d{1,18},[01][ \t]*\r?\n)*")
_INT_FIELD = re.compile(r"\s*(-?)(\d+)\s*")


class FormatError(ValueError):
    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.reason = message


@dataclass(frozen=True)
class GroundTruthBox:
    box: BoundingBox
    object_id: int


@dataclass(frozen=True)
class GroundTruthFrame:
    t_us: int
    boxes: tuple[GroundTruthBox, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "boxes", tuple(self.boxes))
        ids = [b.object_id for b in self.boxes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate object_id in frame t_us={self.t_us}")


@dataclass(frozen=True)
class DetectedBox:
    box: BoundingBox
    band: int
    n: int


@dataclass(frozen=True)
class DetectionRecord:
    t_us: int
    boxes: tuple[DetectedBox, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "boxes", tuple(self.boxes))


# --------------------------------------------------------------------------
# event CSV


def _open_binary(source: Source):
    if isinstance(source, (bytes, bytearray)):
        return io.BytesIO(bytes(source)), True
    if isinstance(source, (str, os.PathLike)):
        return open(source, "rb"), True
    if isinstance(source, io.TextIOBase):
        return io.BytesIO(source.read().encode("utf-8")), True
    return source, False


def _parse_line(raw: bytes, lineno: int) -> tuple[int, int, int, int]:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(lineno, f"not valid UTF-8 ({exc.reason})") from None
    fields = text.strip().split(",")
    if len(fields) != 4:
        raise FormatError(lineno, f"expected 4 columns t_us,x,y,p, got {len(fields)}")
    values = []
    for name, field in zip(("t_us", "x", "y", "p"), fields):
        m = _INT_FIELD.fullmatch(field)
        if m is None:
            raise FormatError(lineno, f"unparsable {name} value {field.strip()!r}")
        if m.group(1):
            raise FormatError(lineno, f"negative {name} value {field.strip()}")
        if len(m.group(2)) > 18:
            raise FormatError(lineno, f"{name} value out of range")
        values.append(int(m.group(2)))
    if values[3] not in (0, 1):
        raise FormatError(lineno, "polarity must be 0 or 1")
    return values[0], values[1], values[2], values[3]


def _parse_chunk(lines: List[bytes], first_lineno: int) -> EventStream:
    blob = b"".join(lines)
    if not blob.endswith(b"\n"):
        blob += b"\n"
    if _CLEAN_CHUNK.fullmatch(blob):
        text = blob.decode("ascii").replace("\r", "").replace(" ", "").replace("\t", "")
        flat = np.fromstring(text.replace("\n", ","), dtype=np.int64, sep=",")
        cols = flat.reshape(-1, 4)
        return EventStream(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3])
    # slow path: blank lines, or something to report with its line number
    rows = [_parse_line(raw, first_lineno + i) for i, raw in enumerate(lines) if raw.strip()]
    if not rows:
        return EventStream.empty()
    t, x, y, p = zip(*rows)
    return EventStream(t, x, y, p)


def iter_events_csv(source: Source, chunk_lines: int = CHUNK_LINES) -> Iterator[EventStream]:
    """Yield the events of a ``t_us,x,y,p`` CSV in file-order chunks.

    An optional header line ``t,x,y,p`` is skipped.  Blank lines are ignored.
    """
    fh, owned = _open_binary(source)
    try:
        first = fh.readline()
        if not first:
            return
        try:
            is_header = first.decode("utf-8").strip().replace(" ", "") in EVENT_HEADERS
        except UnicodeDecodeError:
            is_header = False
        pending = [] if is_header else [first]
        lineno = 2 if is_header else 1
        while True:
            lines = pending + list(itertools.islice(fh, chunk_lines - len(pending)))
            pending = []
            if not lines:
                break
            chunk = _parse_chunk(lines, lineno)
            lineno += len(lines)
            if len(chunk):
                yield chunk
    finally:
        if owned:
            fh.close()


def read_events_csv(source: Source) -> EventStream:
    return EventStream.concat(list(iter_events_csv(source)))


def format_events_csv(stream: EventStream, header: bool = True, labels: Optional[Sequence[str]] = None) -> str:
    cols = [stream.t, stream.x, stream.y, stream.p]
    head = "t,x,y,p" if labels is None else "t_us,x,y,p,source"
    body_rows = np.stack([c.astype(np.int64) for c in cols], axis=1).tolist() if len(stream) else []
    if labels is None:
        lines = [f"{t},{x},{y},{p}" for t, x, y, p in body_rows]
    else:
        lines = [f"{t},{x},{y},{p},{s}" for (t, x, y, p), s in zip(body_rows, labels)]
    text = "\n".join(lines)
    if lines:
        text += "\n"
    return (head + "\n" + text) if header else text


def write_events_csv(stream: EventStream, sink: Sink, header: bool = True) -> int:
    return _write_text(format_events_csv(stream, header), sink)


def write_labels_csv(stream: EventStream, labels: Sequence[str], sink: Sink) -> int:
    """Events with a trailing ``source`` column (object id, NOISE or STATIC)."""
    if len(labels) != len(stream):
        raise ValueError("one label per event required")
    return _write_text(format_events_csv(stream, True, labels), sink)


def _write_text(text: str, sink: Sink) -> int:
    data = text.encode("utf-8")
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            fh.write(data)
    elif isinstance(sink, io.TextIOBase):
        sink.write(text)
    else:
        sink.write(data)
    return len(data)


# --------------------------------------------------------------------------
# JSON Lines records


def _box_dict(box: BoundingBox) -> dict:
    return {"x_min": box.x_min, "y_min": box.y_min, "x_max": box.x_max, "y_max": box.y_max}


def detection_to_json(rec: DetectionRecord) -> str:
    boxes = [dict(_box_dict(b.box), band=b.band, n=b.n) for b in rec.boxes]
    return json.dumps({"t_us": rec.t_us, "boxes": boxes}, separators=(",", ":"))


def ground_truth_to_json(frame: GroundTruthFrame) -> str:
    boxes = [dict(_box_dict(b.box), object_id=b.object_id) for b in frame.boxes]
    return json.dumps({"t_us": frame.t_us, "boxes": boxes}, separators=(",", ":"))


def write_detections(records: Iterable[DetectionRecord], sink: Sink) -> int:
    records = list(records)
    if any(b.t_us < a.t_us for a, b in zip(records, records[1:])):
        raise ValueError("detection records must be sorted by t_us")
    return _write_text("".join(detection_to_json(r) + "\n" for r in records), sink)


def write_ground_truth(frames: Iterable[GroundTruthFrame], sink: Sink) -> int:
    return _write_text("".join(ground_truth_to_json(f) + "\n" for f in frames), sink)


def _read_lines(source: Source) -> Iterator[tuple[int, str]]:
    fh, owned = _open_binary(source)
    try:
        for lineno, raw in enumerate(fh, start=1):
            try:
                text = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError(lineno, f"not valid UTF-8 ({exc.reason})") from None
            if text.strip():
                yield lineno, text
    finally:
        if owned:
            fh.close()


def _int(obj: dict, key: str, lineno: int, minimum: Optional[int] = None) -> int:
    if key not in obj:
        raise FormatError(lineno, f"missing key {key!r}")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise FormatError(lineno, f"{key!r} must be an integer")
    if minimum is not None and v < minimum:
        raise FormatError(lineno, f"{key!r} must be >= {minimum}")
    return v


def _parse_record(lineno: int, text: str) -> tuple[int, list]:
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, RecursionError) as exc:
        raise FormatError(lineno, f"invalid JSON ({exc.__class__.__name__})") from None
    if not isinstance(obj, dict):
        raise FormatError(lineno, "record must be a JSON object")
    t = _int(obj, "t_us", lineno, 0)
    boxes = obj.get("boxes")
    if not isinstance(boxes, list):
        raise FormatError(lineno, "'boxes' must be a list")
    return t, boxes


def _parse_box(b: Any, lineno: int) -> BoundingBox:
    if not isinstance(b, dict):
        raise FormatError(lineno, "box must be a JSON object")
    x0, y0 = _int(b, "x_min", lineno), _int(b, "y_min", lineno)
    x1, y1 = _int(b, "x_max", lineno), _int(b, "y_max", lineno)
    if x0 > x1 or y0 > y1:
        raise FormatError(lineno, "box requires x_min <= x_max and y_min <= y_max")
    return BoundingBox(x0, y0, x1, y1)


def read_detections(source: Source) -> List[DetectionRecord]:
    out = []
    for lineno, text in _read_lines(source):
        t, boxes = _parse_record(lineno, text)
        parsed = []
        for b in boxes:
            box = _parse_box(b, lineno)
            parsed.append(DetectedBox(box, _int(b, "band", lineno), _int(b, "n", lineno, 0)))
        out.append(DetectionRecord(t, tuple(parsed)))
    return out


def read_ground_truth(source: Source) -> List[GroundTruthFrame]:
    out = []
    for lineno, text in _read_lines(source):
        t, boxes = _parse_record(lineno, text)
        parsed = []
        for b in boxes:
            box = _parse_box(b, lineno)
            parsed.append(GroundTruthBox(box, _int(b, "object_id", lineno)))
        ids = [g.object_id for g in parsed]
        if len(set(ids)) != len(ids):
            raise FormatError(lineno, "object_id must be unique within a frame")
        out.append(GroundTruthFrame(t, tuple(parsed)))
    return out


# --------------------------------------------------------------------------
# metrics

METRIC_KEYS = ("mean_iou", "precision", "recall", "tp", "fp", "fn")


def metrics_to_json(m) -> str:
    d = {
        "mean_iou": float(m.mean_iou),
        "precision": float(m.precision),
        "recall": float(m.recall),
        "tp": int(m.tp),
        "fp": int(m.fp),
        "fn": int(m.fn),
    }
    return json.dumps(d)


def write_metrics(m, sink: Sink) -> int:
    return _write_text(metrics_to_json(m) + "\n", sink)


def read_metrics(source: Source):
    from .evaluation import Metrics

    lines = list(_read_lines(source))
    if len(lines) != 1:
        raise FormatError(lines[1][0] if len(lines) > 1 else 1, "metrics file must hold exactly one JSON object")
    lineno, text = lines[0]
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, RecursionError):
        raise FormatError(lineno, "invalid JSON") from None
    if not isinstance(obj, dict):
        raise FormatError(lineno, "metrics must be a JSON object")
    missing = [k for k in METRIC_KEYS if k not in obj]
    if missing:
        raise FormatError(lineno, f"missing key {missing[0]!r}")
    floats = {}
    for k in ("mean_iou", "precision", "recall"):
        v = obj[k]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise FormatError(lineno, f"{k!r} must be a number")
        floats[k] = float(v)
    return Metrics(
        mean_iou=floats["mean_iou"],
        precision=floats["precision"],
        recall=floats["recall"],
        tp=_int(obj, "tp", lineno, 0),
        fp=_int(obj, "fp", lineno, 0),
        fn=_int(obj, "fn", lineno, 0),
    )


def atomic_write_bytes(path: Union[str, os.PathLike], data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see partial output."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
