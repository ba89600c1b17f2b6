"""Traffic traces: loading, block aggregation, moments and dyadic measures.

A trace is a sequence of nonnegative intensities sampled on equal time
slots. Values are unitless as far as the toolkit is concerned; the caller's
unit is kept as a label only.

Moments are population moments (divide by n, not n - 1). The cascade moment
algebra is written for the population variance and mixing the two
conventions would bias every downstream fit.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidScale, NonDyadicLength, ParseError, ZeroMass

_DECIMAL = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Trace:
    """Equally spaced traffic intensity series."""

    values: np.ndarray
    slot_duration: float = 1.0
    label: str = ""
    unit: str = ""

    def __post_init__(self):
        arr = _frozen(np.ravel(self.values))
        if arr.size < 1:
            raise ParseError("empty trace")
        if not np.all(np.isfinite(arr)):
            raise ValueError("trace values must be finite")
        if np.any(arr < 0):
            raise ValueError("trace values must be nonnegative")
        if not (self.slot_duration > 0 and math.isfinite(self.slot_duration)):
            raise ValueError(f"slot_duration must be positive, got {self.slot_duration}")
        object.__setattr__(self, "values", arr)

    def __len__(self):
        return self.values.size

    @property
    def duration(self) -> float:
        return len(self) * self.slot_duration

    def scaled(self, factor: float) -> "Trace":
        return Trace(self.values * factor, self.slot_duration, self.label, self.unit)


@dataclass(frozen=True)
class Stats:
    mean: float
    variance: float
    cv2: float


@dataclass(frozen=True)
class Measure:
    """Normalized masses over the 2**depth dyadic cells of [0, 1]."""

    masses: np.ndarray
    depth: int
    truncated: int = 0
    padded: int = 0

    def __post_init__(self):
        object.__setattr__(self, "masses", _frozen(self.masses))

    def level(self, j: int) -> np.ndarray:
        """Masses of the 2**j cells at dyadic level ``j``."""
        if not 0 <= j <= self.depth:
            raise InvalidScale(f"level {j} outside 0..{self.depth}")
        return self.masses.reshape(2**j, -1).sum(axis=1)


def _parse_value(text: str, line: int) -> float:
    if not _DECIMAL.match(text):
        raise ParseError(f"not a decimal number: {text!r}", line)
    value = float(text)
    if value < 0:
        raise ParseError(f"negative value {text}", line)
    return value


def parse_plain(text: str) -> list[float]:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    values = []
    for lineno, raw in enumerate(lines, start=1):
        values.append(_parse_value(raw.rstrip("\r").strip(), lineno))
    return values


def parse_csv_column(text: str, column: str) -> list[float]:
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty trace") from None
    header = [h.strip() for h in header]
    if column not in header:
        raise ParseError(f"column {column!r} not in header {header}", 1)
    idx = header.index(column)
    values = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if idx >= len(row):
            raise ParseError(f"row has no field {column!r}", lineno)
        values.append(_parse_value(row[idx].strip(), lineno))
    return values


def load_trace(
    path,
    format: str = "plain",
    slot_duration: float = 1.0,
    column: str | None = None,
    label: str | None = None,
    unit: str = "",
) -> Trace:
    """Read a trace file.

    ``format`` is ``"plain"`` (one value per line) or ``"csv_column"``
    (header row, ``column`` selects the field). Raises :class:`ParseError`
    with the offending line number on malformed or negative input; I/O
    failures propagate as ``OSError``.
    """
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8 text: {exc}") from None
    if format == "plain":
        values = parse_plain(text)
    elif format == "csv_column":
        if column is None:
            raise ParseError("csv_column format needs a column name")
        values = parse_csv_column(text, column)
    else:
        raise ValueError(f"unknown trace format {format!r}")
    if not values:
        raise ParseError("empty trace")
    return Trace(values, slot_duration, label if label is not None else path.stem, unit)


def format_value(v: float) -> str:
    if v == int(v) and abs(v) < 2**53:
        return str(int(v))
    return repr(float(v))


def write_trace(trace: Trace, path) -> None:
    """Write ``trace`` in plain format (LF line endings, round-trippable)."""
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        for v in trace.values:
            fh.write(format_value(v))
            fh.write("\n")


def aggregate(trace: Trace, T: int) -> Trace:
    """Means over consecutive non-overlapping blocks of ``T`` slots.

    The trailing partial block is dropped so every output value averages
    exactly ``T`` inputs.
    """
    n = len(trace)
    if int(T) != T or T < 1 or T > n:
        raise InvalidScale(f"aggregation scale {T} outside 1..{n}")
    T = int(T)
    if T == 1:
        return trace
    blocks = n // T
    vals = trace.values[: blocks * T].reshape(blocks, T).mean(axis=1)
    return Trace(vals, trace.slot_duration * T, trace.label, trace.unit)


def _stats(values: np.ndarray) -> Stats:
    mean = float(values.mean())
    variance = float(np.mean((values - mean) ** 2))
    cv2 = variance / mean / mean if mean > 0 else 0.0
    return Stats(mean, variance, cv2)


def basic_stats(trace: Trace) -> Stats:
    """Population mean, variance and squared coefficient of variation."""
    return _stats(trace.values)


def to_measure(trace: Trace, pad: bool = False, allow_truncate: bool = True) -> Measure:
    """Normalize a trace into a measure on the dyadic cells of [0, 1].

    Lengths that are not a power of two are cut to the largest power-of-two
    prefix, or zero-padded up to the next power of two when ``pad`` is set.
    With ``allow_truncate=False`` and ``pad=False`` such lengths raise
    :class:`NonDyadicLength`.
    """
    values = trace.values
    n = values.size
    truncated = padded = 0
    if n & (n - 1):
        if pad:
            target = 1 << n.bit_length()
            padded = target - n
            values = np.concatenate([values, np.zeros(padded)])
        elif allow_truncate:
            target = 1 << (n.bit_length() - 1)
            truncated = n - target
            values = values[:target]
        else:
            raise NonDyadicLength(f"trace length {n} is not a power of two")
    total = values.sum()
    if not total > 0:
        raise ZeroMass("trace has zero total mass")
    depth = values.size.bit_length() - 1
    return Measure(values / total, depth, truncated, padded)
