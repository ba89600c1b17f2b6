"""Discrete-time Markov modulated Poisson baselines.

The modulating chain jumps once per slot with row-stochastic matrix ``P``
and the slot emission is Poisson with the rate of the current state. Two
empirical fits are provided:

* histogram: states are equal-probability quantile bins of the slot values;
* scene: a moving-window change-point detector splits the trace into scenes,
  scenes are grouped by level, and each group is split into quantile bins.

Transition counts get an add-``smoothing`` pseudo-count (1 by default) in
every cell, so fitted chains are strictly positive and therefore
irreducible and aperiodic. The scene detector is a parameterized heuristic.
"""

from __future__ import annotations

import bisect
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NonConvergence, TooFewSamples
from .trace import Trace

SCHEMA_VERSION = 1


class DegenerateTraceWarning(UserWarning):
    """Fewer distinct values than requested states; states were merged."""


class NoScenesDetectedWarning(UserWarning):
    """Scene fit found no change points and fell back to the histogram fit."""


@dataclass(frozen=True)
class MmppModel:
    rates: np.ndarray
    transitions: np.ndarray
    initial: np.ndarray
    slot_duration: float = 1.0
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        rates = np.array(self.rates, dtype=np.float64).ravel()
        P = np.array(self.transitions, dtype=np.float64)
        init = np.array(self.initial, dtype=np.float64).ravel()
        n = rates.size
        if n < 1 or P.shape != (n, n) or init.size != n:
            raise ValueError(f"inconsistent MMPP shapes: rates {rates.shape}, P {P.shape}, initial {init.shape}")
        if np.any(rates < 0) or not np.all(np.isfinite(rates)):
            raise ValueError("rates must be finite and nonnegative")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("transition matrix must be row-stochastic")
        if np.any(init < 0) or abs(init.sum() - 1.0) > 1e-12:
            raise ValueError("initial distribution must sum to 1")
        for name, arr in (("rates", rates), ("transitions", P), ("initial", init)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_states(self) -> int:
        return self.rates.size

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "mmpp",
            "n_states": self.n_states,
            "rates": self.rates.tolist(),
            "transitions": self.transitions.tolist(),
            "initial": self.initial.tolist(),
            "slot_duration": self.slot_duration,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MmppModel":
        if d.get("kind") != "mmpp":
            raise ValueError(f"not an MMPP model: kind={d.get('kind')!r}")
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {d.get('schema_version')!r}")
        return cls(d["rates"], d["transitions"], d["initial"], float(d.get("slot_duration", 1.0)), d.get("metadata", {}))

    def save(self, path) -> None:
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "MmppModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class StationaryDistribution:
    pi: np.ndarray
    iterations: int
    residual: float


def stationary_distribution(model: MmppModel, tol: float = 1e-12, max_iter: int = 1_000_000) -> StationaryDistribution:
    """Stationary vector by power iteration on the lazy chain ``(P + I) / 2``.

    The lazy chain has the same stationary vector and cannot oscillate on
    periodic inputs.
    """
    P = model.transitions
    lazy = 0.5 * (P + np.eye(model.n_states))
    pi = np.full(model.n_states, 1.0 / model.n_states)
    for it in range(1, max_iter + 1):
        nxt = pi @ lazy
        nxt /= nxt.sum()
        pi = nxt
        if it % 8 == 0 or it < 8:
            residual = float(np.abs(pi @ P - pi).sum())
            if residual < tol:
                return StationaryDistribution(pi, it, residual)
    raise NonConvergence(f"power iteration did not reach {tol:g} in {max_iter} iterations")


def mean_rate(model: MmppModel) -> float:
    """Long-run mean emission per slot, sum of pi_s * lambda_s."""
    return float(stationary_distribution(model).pi @ model.rates)


def _quantile_labels(values: np.ndarray, n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    edges = np.quantile(values, np.arange(1, n_bins) / n_bins)
    return np.searchsorted(edges, values, side="right"), edges


def _fit_from_labels(values, labels, smoothing, slot_duration, metadata, requested) -> MmppModel:
    used, labels = np.unique(labels, return_inverse=True)
    n = used.size
    if n < requested:
        warnings.warn(
            f"only {n} distinct states could be formed (requested {requested}); states collapsed",
            DegenerateTraceWarning,
            stacklevel=3,
        )
    counts = np.bincount(labels, minlength=n).astype(np.float64)
    rates = np.bincount(labels, weights=values, minlength=n) / counts
    trans = np.zeros((n, n))
    np.add.at(trans, (labels[:-1], labels[1:]), 1.0)
    trans += smoothing
    trans /= trans.sum(axis=1, keepdims=True)
    initial = counts / counts.sum()
    metadata = dict(metadata, requested_states=requested, n_states=n, smoothing=smoothing, samples=int(values.size))
    return MmppModel(rates, trans, initial, slot_duration, metadata)


def _check_length(trace: Trace, n_states: int):
    if n_states < 1:
        raise ValueError(f"n_states must be >= 1, got {n_states}")
    if len(trace) < 10 * n_states:
        raise TooFewSamples(f"need at least {10 * n_states} samples for {n_states} states, got {len(trace)}")


def fit_mmpp_histogram(trace: Trace, n_states: int = 30, smoothing: float = 1.0) -> MmppModel:
    """Histogram MMPP: equal-probability value bins as states."""
    _check_length(trace, n_states)
    x = trace.values
    labels, edges = _quantile_labels(x, n_states)
    meta = {"method": "histogram", "bin_edges": edges.tolist()}
    return _fit_from_labels(x, labels, smoothing, trace.slot_duration, meta, n_states)


def detect_scene_changes(values, window: int, threshold: float) -> list[int]:
    """Indices where the mean of the next ``window`` slots jumps relative to the previous ``window``.

    The jump is ``|right - left| / ((left + right) / 2)``. Candidates above
    ``threshold`` are accepted strongest first, at least ``window`` apart.
    """
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    window = int(window)
    if window < 1:
        raise ValueError("scene window must be >= 1")
    if n < 2 * window or not math.isfinite(threshold):
        return []
    csum = np.concatenate([[0.0], np.cumsum(x)])
    t = np.arange(window, n - window + 1)
    left = (csum[t] - csum[t - window]) / window
    right = (csum[t + window] - csum[t]) / window
    level = 0.5 * (left + right)
    with np.errstate(divide="ignore", invalid="ignore"):
        jump = np.where(level > 0, np.abs(right - left) / level, 0.0)
    cand = np.flatnonzero(jump > threshold)
    order = cand[np.lexsort((cand, -jump[cand]))]
    taken: list[int] = []
    for idx in order:
        pos = int(t[idx])
        k = bisect.bisect_left(taken, pos)
        if k > 0 and pos - taken[k - 1] < window:
            continue
        if k < len(taken) and taken[k] - pos < window:
            continue
        taken.insert(k, pos)
    return taken


def _group_scene_levels(means: np.ndarray, threshold: float, max_classes: int) -> np.ndarray:
    """Class label per scene: sorted levels split at relative gaps above ``threshold``."""
    order = np.argsort(means, kind="stable")
    cls = np.zeros(means.size, dtype=np.int64)
    current, anchor = 0, means[order[0]]
    for s in order[1:]:
        m = means[s]
        ref = 0.5 * (anchor + m)
        if ref > 0 and (m - anchor) / ref > threshold:
            current += 1
            anchor = m
        cls[s] = current
    n_cls = current + 1
    if n_cls > max_classes:
        # merge adjacent level groups into max_classes equal-count bands
        cls = np.floor(cls * max_classes / n_cls).astype(np.int64)
    return cls


def fit_mmpp_scene(
    trace: Trace,
    n_states: int = 300,
    scene_window: int = 24,
    scene_threshold: float = 0.5,
    n_classes: int | None = None,
    smoothing: float = 1.0,
) -> MmppModel:
    """Scene-oriented MMPP.

    Scenes come from :func:`detect_scene_changes`. Scenes are grouped into at
    most ``n_classes`` level classes (default ``round(sqrt(n_states))``) and
    each class is split into ``n_states // classes`` quantile bins of its own
    slot values. Without change points this falls back to the histogram fit
    with a :class:`NoScenesDetectedWarning`.
    """
    _check_length(trace, n_states)
    x = trace.values
    changes = detect_scene_changes(x, scene_window, scene_threshold)
    if not changes:
        warnings.warn("no scene changes detected; using the histogram fit", NoScenesDetectedWarning, stacklevel=2)
        model = fit_mmpp_histogram(trace, n_states, smoothing)
        meta = dict(model.metadata, scene_fallback=True)
        return MmppModel(model.rates, model.transitions, model.initial, model.slot_duration, meta)

    bounds = [0, *changes, x.size]
    scene_id = np.repeat(np.arange(len(bounds) - 1), np.diff(bounds))
    scene_means = np.array([x[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])])
    max_classes = n_classes if n_classes is not None else max(1, round(math.sqrt(n_states)))
    scene_class = _group_scene_levels(scene_means, scene_threshold, min(max_classes, n_states))
    classes, scene_class = np.unique(scene_class, return_inverse=True)
    n_cls = classes.size
    per_class = max(1, n_states // n_cls)

    slot_class = scene_class[scene_id]
    labels = np.empty(x.size, dtype=np.int64)
    for k in range(n_cls):
        mask = slot_class == k
        sub, _ = _quantile_labels(x[mask], per_class)
        labels[mask] = k * per_class + sub
    meta = {
        "method": "scene",
        "scene_window": int(scene_window),
        "scene_threshold": float(scene_threshold),
        "change_points": [int(c) for c in changes],
        "scene_classes": int(n_cls),
        "states_per_class": int(per_class),
    }
    return _fit_from_labels(x, labels, smoothing, trace.slot_duration, meta, n_states)


def mmpp_rng(seed: int) -> np.random.Generator:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0x4D4D5050,))))


def simulate_states(model: MmppModel, length: int, rng: np.random.Generator) -> np.ndarray:
    """Modulating-chain path: first state from ``initial``, then one jump per slot."""
    n = model.n_states
    u = rng.random(length + 1)
    last = n - 1
    cum_init = np.cumsum(model.initial).tolist()
    cum_rows = [np.cumsum(row).tolist() for row in model.transitions]
    states = np.empty(length, dtype=np.int64)
    s = min(bisect.bisect_right(cum_init, u[0]), last)
    ul = u.tolist()
    for t in range(length):
        states[t] = s
        s = min(bisect.bisect_right(cum_rows[s], ul[t + 1]), last)
    return states


def generate_mmpp(model: MmppModel, length: int, seed: int) -> Trace:
    """Slot emissions of ``model``: Poisson(rate of current state) per slot."""
    length = int(length)
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    rng = mmpp_rng(seed)
    states = simulate_states(model, length, rng)
    counts = rng.poisson(model.rates[states]).astype(np.float64)
    return Trace(counts, model.slot_duration, label="mmpp")
