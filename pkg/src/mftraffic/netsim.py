"""Event-driven model of an MPEG stream crossing a Gigabit Ethernet switch.

Topology (single port pair)::

    frame source -> shaper (drop-tail) -> switch input (drop-tail)
                 -> switch output (drop-tail, shared with cross traffic) -> sink

The shaper and the switch output transmit at ``link_rate`` with
store-and-forward service ``wire_bytes * 8 / link_rate``. The switch fabric
is non-blocking with zero switching delay unless ``fabric_rate`` is set, in
which case the input queue is served at that rate. Queue lengths count the
packet in service. Simultaneous events run in order of (time, owner id,
sequence number); queue servers own ids 0..2 and sources follow, so a
departure frees its slot before a same-instant arrival looks for one.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
import warnings
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .cascade import CascadeModel, generate
from .errors import ConfigError, NoFramesDelivered, SimulationError
from .mmpp import MmppModel, generate_mmpp
from .trace import Trace

QUEUE_NAMES = ("shaper", "sw_in", "sw_out")
FRAME_KINDS = ("trace_replay", "cascade", "mmpp")
SOURCE_KINDS = FRAME_KINDS + ("poisson_cross",)

CSV_COLUMNS = (
    "load",
    "mean_q_shaper",
    "mean_q_sw_in",
    "mean_q_sw_out",
    "loss_shaper",
    "loss_sw_in",
    "loss_sw_out",
    "interarrival_var_s2",
    "frames_delivered",
    "frames_excluded",
    "seed",
)


@dataclass(frozen=True)
class NetworkConfig:
    link_rate: float = 1e9
    shaper_capacity: float = 10000
    switch_in_capacity: float = 5000
    switch_out_capacity: float = 5000
    mtu_payload: int = 1500
    per_packet_overhead: int = 38  # preamble 8 + MAC header/FCS 18 + interframe gap 12
    min_payload: int = 46  # pads a frame to the 64 B Ethernet minimum
    frame_rate: float = 24.0
    fabric_rate: float | None = None
    service: str = "deterministic"
    cross_payload: int = 1500

    def __post_init__(self):
        for name in ("shaper_capacity", "switch_in_capacity", "switch_out_capacity"):
            v = getattr(self, name)
            if v is None:
                object.__setattr__(self, name, math.inf)
            elif not v >= 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if not self.link_rate > 0:
            raise ConfigError(f"link_rate must be positive, got {self.link_rate}")
        if self.fabric_rate is not None and not self.fabric_rate > 0:
            raise ConfigError(f"fabric_rate must be positive or null, got {self.fabric_rate}")
        if self.mtu_payload < 1 or self.per_packet_overhead < 0 or self.min_payload < 0:
            raise ConfigError("mtu_payload must be >= 1 and overheads nonnegative")
        if not self.frame_rate > 0:
            raise ConfigError(f"frame_rate must be positive, got {self.frame_rate}")
        if self.service not in ("deterministic", "exponential"):
            raise ConfigError(f"service must be 'deterministic' or 'exponential', got {self.service!r}")

    def capacity(self, queue: str) -> float:
        return {"shaper": self.shaper_capacity, "sw_in": self.switch_in_capacity, "sw_out": self.switch_out_capacity}[
            queue
        ]

    def wire_bytes(self, payload: int) -> int:
        return max(payload, self.min_payload) + self.per_packet_overhead

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and math.isinf(v):
                d[k] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class SourceSpec:
    """One traffic source.

    For frame sources (``trace_replay``, ``cascade``, ``mmpp``) the payload is
    a :class:`Trace` of frame sizes in bytes or a model producing them, and
    ``rate_scale`` multiplies every frame size. For ``poisson_cross`` the
    payload is an optional packet payload size in bytes and ``rate_scale`` is
    the packet rate in packets per second.
    """

    kind: str
    payload: object = None
    rate_scale: float = 1.0
    attach: str | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ConfigError(f"unknown source kind {self.kind!r}")
        if not self.rate_scale >= 0:
            raise ConfigError(f"rate_scale must be nonnegative, got {self.rate_scale}")
        attach = self.attach or ("sw_out" if self.kind == "poisson_cross" else "shaper")
        if attach not in QUEUE_NAMES:
            raise ConfigError(f"unknown attach point {attach!r}")
        object.__setattr__(self, "attach", attach)
        expected = {"trace_replay": Trace, "cascade": CascadeModel, "mmpp": MmppModel}.get(self.kind)
        if expected is not None and not isinstance(self.payload, expected):
            raise ConfigError(f"{self.kind} source needs a {expected.__name__} payload")

    @property
    def is_primary(self) -> bool:
        return self.kind in FRAME_KINDS


@dataclass
class SimMetrics:
    mean_queue_len: dict
    loss_prob: dict
    interarrival_variance: float
    interarrival_mean: float
    frames_delivered: int
    frames_excluded: int
    sim_time: float
    seed: int
    throughput: dict = field(default_factory=dict)  # packets/s leaving each queue after warmup
    mean_sojourn: dict = field(default_factory=dict)  # seconds, packets leaving after warmup
    counters: dict = field(default_factory=dict)  # arrivals, departures, drops, final occupancy
    offered_bps: float = 0.0

    def require_interarrival(self) -> float:
        if not self.frames_delivered or math.isnan(self.interarrival_variance):
            raise NoFramesDelivered("fewer than two consecutive frames were delivered intact")
        return self.interarrival_variance


def frame_to_packets(frame_bytes: int, config: NetworkConfig) -> list[int]:
    """Wire sizes of the Ethernet packets carrying one frame."""
    frame_bytes = int(frame_bytes)
    if frame_bytes < 1:
        raise ValueError(f"frame size must be >= 1 byte, got {frame_bytes}")
    full, rest = divmod(frame_bytes, config.mtu_payload)
    sizes = [config.wire_bytes(config.mtu_payload)] * full
    if rest:
        sizes.append(config.wire_bytes(rest))
    return sizes


def derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=tuple(key)).generate_state(1, np.uint64)[0])


def frame_sizes(source: SourceSpec, n_frames: int, seed: int) -> np.ndarray:
    """Integer frame sizes (bytes) emitted by a frame source; zeros mean no frame."""
    if n_frames <= 0:
        return np.zeros(0, dtype=np.int64)
    if source.kind == "trace_replay":
        vals = source.payload.values
        raw = np.resize(vals, n_frames)
    elif source.kind == "cascade":
        raw = generate(source.payload, n_frames, seed).values
    elif source.kind == "mmpp":
        raw = generate_mmpp(source.payload, n_frames, seed).values
    else:
        raise ConfigError(f"{source.kind} is not a frame source")
    return np.rint(raw * source.rate_scale).astype(np.int64)


def wire_bits(sizes: np.ndarray, config: NetworkConfig) -> float:
    """Total bits on the wire for a sequence of frame sizes."""
    sizes = sizes[sizes > 0]
    full, rest = np.divmod(sizes, config.mtu_payload)
    bits = full.sum() * config.wire_bytes(config.mtu_payload)
    tail = rest[rest > 0]
    bits += np.maximum(tail, config.min_payload).sum() + tail.size * config.per_packet_overhead
    return float(bits) * 8.0


class _Queue:
    """FIFO drop-tail queue with one server; ``rate=None`` forwards instantly."""

    def __init__(self, qid, name, capacity, rate, warmup, exp_rng=None):
        self.qid = qid
        self.name = name
        self.capacity = capacity
        self.rate = rate
        self.warmup = warmup
        self.exp_rng = exp_rng
        self.buf = deque()
        self.busy = False
        self.next = None
        self.arrivals = self.departures = self.drops = 0
        self.offered_w = self.dropped_w = 0
        self.departed_w = 0
        self.sojourn_w = 0.0
        self.area = 0.0
        self.last_t = 0.0

    @property
    def occupancy(self):
        return len(self.buf)

    def advance(self, t):
        start = self.last_t if self.last_t > self.warmup else self.warmup
        if t > start:
            self.area += len(self.buf) * (t - start)
        self.last_t = t

    def arrive(self, sim, t, pkt):
        self.arrivals += 1
        measured = t >= self.warmup
        if measured:
            self.offered_w += 1
        if len(self.buf) >= self.capacity:
            self.drops += 1
            if measured:
                self.dropped_w += 1
            sim.on_drop(pkt)
            return
        if self.rate is None:
            self.departures += 1
            if measured:
                self.departed_w += 1
            self.next(sim, t, pkt)
            return
        self.advance(t)
        self.buf.append((pkt, t))
        if not self.busy:
            self._start(sim, t)

    def _start(self, sim, t):
        self.busy = True
        service = self.buf[0][0][0] * 8.0 / self.rate
        if self.exp_rng is not None:
            service = self.exp_rng.exponential(service)
        sim.schedule(t + service, self.qid, self.depart)

    def depart(self, sim, t):
        self.advance(t)
        pkt, t_in = self.buf.popleft()
        self.departures += 1
        if t >= self.warmup:
            self.departed_w += 1
            self.sojourn_w += t - t_in
        if self.buf:
            self._start(sim, t)
        else:
            self.busy = False
        self.next(sim, t, pkt)


class _Simulator:
    def __init__(self, config: NetworkConfig, duration: float, warmup: float, seed: int):
        self.config = config
        self.duration = duration
        self.warmup = warmup
        self.heap = []
        self.seq = 0
        exp = config.service == "exponential"
        self.queues = {}
        for qid, name in enumerate(QUEUE_NAMES):
            rate = config.link_rate
            if name == "sw_in":
                rate = config.fabric_rate
            rng = np.random.Generator(np.random.Philox(derive_seed(seed, 2, qid))) if exp and rate else None
            self.queues[name] = _Queue(qid, name, config.capacity(name), rate, warmup, rng)
        self.queues["shaper"].next = self.queues["sw_in"].arrive
        self.queues["sw_in"].next = self.queues["sw_out"].arrive
        self.queues["sw_out"].next = self.deliver
        # frame bookkeeping, indexed by frame number
        self.frame_remaining = None
        self.frame_dropped = None
        self.frame_end = None

    def schedule(self, t, owner, action):
        self.seq += 1
        heapq.heappush(self.heap, (t, owner, self.seq, action))

    def on_drop(self, pkt):
        f = pkt[1]
        if f >= 0:
            self.frame_dropped[f] = True

    def deliver(self, sim, t, pkt):
        f = pkt[1]
        if f >= 0:
            self.frame_remaining[f] -= 1
            if self.frame_remaining[f] == 0 and not self.frame_dropped[f]:
                self.frame_end[f] = t

    def run(self):
        heap = self.heap
        pop = heapq.heappop
        end = self.duration
        while heap and heap[0][0] < end:
            t, _, _, action = pop(heap)
            action(self, t)
        for q in self.queues.values():
            q.advance(end)


def _validate_sources(sources):
    primaries = [s for s in sources if s.is_primary]
    if len(primaries) > 1:
        raise ConfigError(f"at most one frame (MPEG) source per simulation, got {len(primaries)}")
    return primaries[0] if primaries else None


def run_simulation(
    config: NetworkConfig,
    sources,
    duration: float,
    warmup: float | None = None,
    seed: int = 0,
    strict: bool = False,
) -> SimMetrics:
    """Simulate ``duration`` seconds and collect post-warmup metrics.

    Warmup defaults to 10% of ``duration``. Frames are emitted every
    ``1 / frame_rate`` seconds; a frame's end is the departure of its last
    packet from the switch output, and frames that lost any packet are left
    out of the inter-arrival statistics. Inter-arrival times are taken
    between consecutive frames (post-warmup emissions) that both arrived
    intact. With ``strict`` a run without two such frames raises
    :class:`NoFramesDelivered`; otherwise the variance is NaN.
    """
    if warmup is None:
        warmup = 0.1 * duration
    if not (duration > warmup >= 0):
        raise ConfigError(f"need duration > warmup >= 0, got duration={duration}, warmup={warmup}")
    sources = list(sources)
    _validate_sources(sources)
    sim = _Simulator(config, duration, warmup, seed)
    offered_bits = 0.0

    n_sources = len(QUEUE_NAMES)
    frame_emit = np.zeros(0)
    for idx, src in enumerate(sources):
        owner = n_sources + idx
        src_seed = derive_seed(seed, 1, idx)
        queue = sim.queues[src.attach]
        if src.is_primary:
            n_frames = max(0, math.ceil(duration * config.frame_rate))
            sizes = frame_sizes(src, n_frames, src_seed)
            emit = np.arange(n_frames) / config.frame_rate
            keep = (sizes > 0) & (emit < duration)
            sizes, emit = sizes[keep], emit[keep]
            offered_bits += wire_bits(sizes[emit >= warmup], config)
            packets = [frame_to_packets(int(b), config) for b in sizes]
            sim.frame_remaining = np.array([len(p) for p in packets], dtype=np.int64)
            sim.frame_dropped = np.zeros(len(packets), dtype=bool)
            sim.frame_end = np.full(len(packets), np.nan)
            frame_emit = emit
            _schedule_frames(sim, queue, owner, emit.tolist(), packets)
        else:
            payload = int(src.payload) if src.payload is not None else config.cross_payload
            wire = config.wire_bytes(payload)
            rate = float(src.rate_scale)
            offered_bits += rate * wire * 8.0 * (duration - warmup)
            if rate > 0:
                rng = np.random.Generator(np.random.Philox(src_seed))
                _schedule_poisson(sim, queue, owner, rate, wire, rng)

    sim.run()
    return _collect(sim, config, frame_emit, offered_bits, seed, strict)


def _schedule_frames(sim, queue, owner, times, packets):
    state = {"k": 0}

    def emit(s, t):
        k = state["k"]
        for wire in packets[k]:
            queue.arrive(s, t, (wire, k, owner))
        state["k"] = k + 1
        if k + 1 < len(times):
            s.schedule(times[k + 1], owner, emit)

    if times:
        sim.schedule(times[0], owner, emit)


def _schedule_poisson(sim, queue, owner, rate, wire, rng):
    # gaps are drawn in blocks to keep the per-event cost low
    block = 4096
    gaps = iter(())
    pkt = (wire, -1, owner)

    def next_gap():
        nonlocal gaps
        try:
            return next(gaps)
        except StopIteration:
            gaps = iter(rng.exponential(1.0 / rate, block).tolist())
            return next(gaps)

    def emit(s, t):
        queue.arrive(s, t, pkt)
        s.schedule(t + next_gap(), owner, emit)

    sim.schedule(next_gap(), owner, emit)


def _collect(sim, config, frame_emit, offered_bits, seed, strict) -> SimMetrics:
    span = sim.duration - sim.warmup
    mean_q, loss, thr, soj, counters = {}, {}, {}, {}, {}
    for name, q in sim.queues.items():
        final = q.occupancy
        if q.arrivals != q.departures + q.drops + final:
            raise SimulationError(
                f"{name}: conservation violated ({q.arrivals} != {q.departures} + {q.drops} + {final})"
            )
        mean_q[name] = q.area / span
        loss[name] = q.dropped_w / q.offered_w if q.offered_w else 0.0
        thr[name] = q.departed_w / span
        soj[name] = q.sojourn_w / q.departed_w if q.departed_w else 0.0
        counters[name] = {"arrivals": q.arrivals, "departures": q.departures, "drops": q.drops, "final": final}
        if mean_q[name] > q.capacity:
            raise SimulationError(f"{name}: mean occupancy above capacity")

    var = mean = math.nan
    delivered = excluded = 0
    if sim.frame_end is not None and sim.frame_end.size:
        measured = frame_emit >= sim.warmup
        done = ~np.isnan(sim.frame_end)
        delivered = int(np.count_nonzero(done & measured))
        excluded = int(np.count_nonzero(sim.frame_dropped & measured))
        ends = sim.frame_end
        pair = done[:-1] & done[1:] & measured[:-1]
        gaps = (ends[1:] - ends[:-1])[pair]
        if gaps.size >= 2:
            mean = float(gaps.mean())
            var = float(np.mean((gaps - mean) ** 2))
    metrics = SimMetrics(
        mean_q, loss, var, mean, delivered, excluded, sim.duration, int(seed), thr, soj, counters, offered_bits / span
    )
    if strict:
        metrics.require_interarrival()
    return metrics


class LossMonotonicityWarning(UserWarning):
    pass


@dataclass
class LoadSweep:
    rows: list  # (load, SimMetrics)
    violations: list = field(default_factory=list)

    @property
    def loads(self) -> list[float]:
        return [r[0] for r in self.rows]

    def csv_rows(self) -> list[list[str]]:
        return [metrics_row(load, m) for load, m in self.rows]

    def write_csv(self, path, model: str | None = None) -> None:
        write_metrics_csv(path, [(model, load, m) for load, m in self.rows], with_model=model is not None)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_row(load, m: SimMetrics) -> list[str]:
    return [
        _fmt(load),
        _fmt(m.mean_queue_len["shaper"]),
        _fmt(m.mean_queue_len["sw_in"]),
        _fmt(m.mean_queue_len["sw_out"]),
        _fmt(m.loss_prob["shaper"]),
        _fmt(m.loss_prob["sw_in"]),
        _fmt(m.loss_prob["sw_out"]),
        _fmt(m.interarrival_variance),
        _fmt(m.frames_delivered),
        _fmt(m.frames_excluded),
        _fmt(m.seed),
    ]


def write_metrics_csv(path, rows, with_model: bool = False) -> None:
    """CSV with a header row, comma separated, LF line endings.

    ``rows`` holds ``(model, load, SimMetrics)`` triples; the model column is
    written only when ``with_model`` is set.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((("model",) if with_model else ()) + CSV_COLUMNS)
        for model, load, m in rows:
            w.writerow(([model] if with_model else []) + metrics_row(load, m))


def primary_offered_bps(config: NetworkConfig, primary: SourceSpec, duration: float, warmup: float, seed: int) -> float:
    """Post-warmup wire bit rate of the frames the primary source emits in a run with ``seed``."""
    n_frames = max(0, math.ceil(duration * config.frame_rate))
    sizes = frame_sizes(primary, n_frames, derive_seed(seed, 1, 0))
    emit = np.arange(n_frames) / config.frame_rate
    sizes = sizes[(emit >= warmup) & (emit < duration)]
    return wire_bits(sizes, config) / (duration - warmup)


def _sweep_row(args):
    config, primary, cross, load, duration, warmup, row_seed = args
    prim_bps = primary_offered_bps(config, primary, duration, warmup, row_seed)
    payload = int(cross.payload) if cross.payload is not None else config.cross_payload
    wire = config.wire_bytes(payload)
    cross_bps = load * config.link_rate - prim_bps
    if cross_bps < 0:
        raise ConfigError(
            f"primary source alone offers {prim_bps / config.link_rate:.4f} of the link, above load {load}"
        )
    cross_src = replace(cross, rate_scale=cross_bps / (wire * 8.0))
    return load, run_simulation(config, [primary, cross_src], duration, warmup, row_seed)


def sweep_load(
    config: NetworkConfig,
    primary: SourceSpec,
    cross: SourceSpec | None,
    loads,
    duration: float,
    warmup: float | None = None,
    seed: int = 0,
    workers: int = 1,
    loss_tolerance: float = 0.0,
    strict_loss: bool = False,
) -> LoadSweep:
    """Run one simulation per link load coefficient.

    The cross-traffic packet rate of each row is set so the primary plus
    cross offered wire bit rate equals ``load * link_rate``. Row ``r`` runs
    with seed ``seed ^ r``, so rows are independent and may run in worker
    processes without changing the result.

    Loss that falls as load rises, beyond binomial noise, is a warning by
    default and a :class:`SimulationError` with ``strict_loss``. The
    binomial bound ignores loss bursts, so bursty primaries trip it easily.
    """
    loads = [float(x) for x in loads]
    if not loads:
        raise ConfigError("load list is empty")
    if any(not 0 < x < 1 for x in loads):
        raise ConfigError(f"loads must lie in (0, 1), got {loads}")
    if any(b <= a for a, b in zip(loads, loads[1:])):
        raise ConfigError("loads must be strictly increasing")
    if not primary.is_primary:
        raise ConfigError("primary source must be a frame source")
    if cross is None:
        cross = SourceSpec("poisson_cross")
    if cross.kind != "poisson_cross":
        raise ConfigError("cross traffic must be a poisson_cross source")
    if warmup is None:
        warmup = 0.1 * duration
    jobs = [(config, primary, cross, load, duration, warmup, int(seed) ^ r) for r, load in enumerate(loads)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_row, jobs))
    else:
        rows = [_sweep_row(j) for j in jobs]
    sweep = LoadSweep(rows)
    sweep.violations = loss_violations(sweep, loss_tolerance)
    if sweep.violations and strict_loss:
        raise SimulationError("loss not monotone in load: " + "; ".join(sweep.violations))
    if sweep.violations:
        warnings.warn("; ".join(sweep.violations), LossMonotonicityWarning, stacklevel=2)
    return sweep


def loss_violations(sweep: LoadSweep, tolerance: float = 0.0, n_se: float = 3.0) -> list[str]:
    """Drop points whose loss falls as load rises by more than ``n_se`` binomial standard errors plus ``tolerance``."""
    out = []
    for (l0, m0), (l1, m1) in zip(sweep.rows, sweep.rows[1:]):
        for q in QUEUE_NAMES:
            p0, p1 = m0.loss_prob[q], m1.loss_prob[q]
            n0 = max(m0.counters[q]["arrivals"], 1)
            n1 = max(m1.counters[q]["arrivals"], 1)
            se = math.sqrt(p0 * (1 - p0) / n0 + p1 * (1 - p1) / n1)
            if p0 - p1 > n_se * se + tolerance:
                out.append(f"{q}: loss {p0:.4g} at load {l0:g} > {p1:.4g} at load {l1:g}")
    return out
