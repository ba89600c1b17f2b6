"""Hurst and Hölder exponent estimation plus the model identification rule.

Hurst exponents come from the variance-time method: the variance of the
block-aggregated series decays like ``T**beta`` with ``beta = 2 (H - 1)``.

Hölder exponents are coarse (dyadic) exponents: the neighbourhood of a point
is the dyadic cell that contains it, and the small-scale limit is replaced by
an ordinary least squares slope across a range of dyadic levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AllZeroCells,
    DegenerateDenominator,
    InsufficientDepth,
    InvalidScale,
    TooFewScales,
    ZeroMass,
    ZeroVariancePoint,
)
from .trace import Measure, Stats, Trace, aggregate, basic_stats, to_measure

# The process-count bound is evaluated on the trace's native scale; means outside this band
# get a note in the report because the bound is not scale invariant.
_UNIT_SCALE_BAND = (0.1, 10.0)


@dataclass(frozen=True)
class CurvePoint:
    scale: int
    variance: float
    cv2: float


@dataclass(frozen=True)
class VarianceTimeCurve:
    points: tuple[CurvePoint, ...]

    @property
    def scales(self) -> np.ndarray:
        return np.array([p.scale for p in self.points], dtype=np.int64)

    @property
    def variances(self) -> np.ndarray:
        return np.array([p.variance for p in self.points])

    @classmethod
    def from_arrays(cls, scales, variances, cv2=None):
        if cv2 is None:
            cv2 = [0.0] * len(scales)
        return cls(tuple(CurvePoint(int(s), float(v), float(c)) for s, v, c in zip(scales, variances, cv2)))


@dataclass(frozen=True)
class HurstEstimate:
    H: float
    r2: float
    intercept: float = 0.0

    @property
    def beta(self) -> float:
        return 2.0 * (self.H - 1.0)


@dataclass(frozen=True)
class HolderSummary:
    alphas: np.ndarray  # NaN where the cell has zero mass at some used level
    alpha_min: float
    alpha_max: float
    levels_used: tuple[int, int]
    excluded: int = 0
    detail: str = ""


@dataclass(frozen=True)
class IdentifiabilityReport:
    n_min: int
    ergodic: bool
    warning: bool
    bound: float
    detail: str


def dyadic_scales(length: int, max_scale: int | None = None, min_blocks: int = 64) -> list[int]:
    """Powers of two from 1 up to ``length // min_blocks`` (and ``max_scale``)."""
    top = max(length // min_blocks, 1)
    if max_scale is not None:
        top = min(top, max_scale)
    scales = [1]
    while scales[-1] * 2 <= top:
        scales.append(scales[-1] * 2)
    return scales


def variance_time_curve(trace: Trace, scales) -> VarianceTimeCurve:
    """Variance and cv2 of the aggregated trace at each scale.

    Each scale must leave at least four blocks. Scales are returned in
    increasing order.
    """
    scales = [int(s) for s in scales]
    if len(set(scales)) != len(scales):
        raise InvalidScale("scales must be distinct")
    if len(scales) < 3:
        raise TooFewScales(f"need at least 3 scales, got {len(scales)}")
    n = len(trace)
    points = []
    for T in sorted(scales):
        if T < 1 or 4 * T > n:
            raise InvalidScale(f"scale {T} needs at least 4 blocks (trace length {n})")
        st = basic_stats(aggregate(trace, T))
        points.append(CurvePoint(T, st.variance, st.cv2))
    return VarianceTimeCurve(tuple(points))


def estimate_hurst(curve: VarianceTimeCurve) -> HurstEstimate:
    """OLS slope of log variance against log scale, mapped to H = 1 + beta/2."""
    if len(curve.points) < 3:
        raise TooFewScales(f"need at least 3 points, got {len(curve.points)}")
    v = curve.variances
    if np.any(v <= 0):
        bad = [p.scale for p in curve.points if p.variance <= 0]
        raise ZeroVariancePoint(f"zero variance at scales {bad}")
    x = np.log(curve.scales.astype(np.float64))
    y = np.log(v)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    slope = float(np.dot(xc, yc)) / sxx
    intercept = float(y.mean() - slope * x.mean())
    ss_tot = float(np.dot(yc, yc))
    resid = yc - slope * xc
    ss_res = float(np.dot(resid, resid))
    r2 = 1.0 if ss_tot == 0.0 else min(max(1.0 - ss_res / ss_tot, 0.0), 1.0)
    return HurstEstimate(1.0 + slope / 2.0, r2, intercept)


def estimate_holder(measure: Measure, level_range: tuple[int, int] | None = None) -> HolderSummary:
    """Coarse Hölder exponent of every finest cell.

    For each cell the exponent is the least squares slope of
    ``log2(mass of the enclosing level-j cell)`` against ``-j`` for
    ``j`` in ``level_range`` (inclusive). Cells that lose all mass at any
    used level get NaN and are left out of the extremes.
    """
    depth = measure.depth
    j_lo, j_hi = level_range if level_range is not None else (2, depth)
    if not (1 <= j_lo < j_hi <= depth) or j_hi - j_lo < 2:
        raise InsufficientDepth(
            f"level range ({j_lo}, {j_hi}) invalid for measure depth {depth}; need 1 <= lo, hi - lo >= 2"
        )
    levels = np.arange(j_lo, j_hi + 1)
    x = -levels.astype(np.float64)
    xc = x - x.mean()
    sxx = float(np.dot(xc, xc))

    acc = np.zeros(2**j_hi)
    valid = np.ones(2**j_hi, dtype=bool)
    with np.errstate(divide="ignore"):
        for j, w in zip(levels, xc):
            m = measure.level(int(j))
            valid &= np.repeat(m > 0, 2 ** (j_hi - j))
            logm = np.log2(np.where(m > 0, m, 1.0))
            acc += w * np.repeat(logm, 2 ** (j_hi - j))
    coarse = np.where(valid, acc / sxx, np.nan)
    if not valid.any():
        raise AllZeroCells("every cell has zero mass at some level")

    alphas = np.repeat(coarse, 2 ** (depth - j_hi))
    excluded = int(np.count_nonzero(np.isnan(alphas)))
    good = alphas[~np.isnan(alphas)]
    detail = f"{excluded} of {alphas.size} cells excluded (zero mass)" if excluded else ""
    return HolderSummary(alphas, float(good.min()), float(good.max()), (int(j_lo), int(j_hi)), excluded, detail)


def min_process_count(
    stats: Stats,
    holder: HolderSummary,
    trace_length: int,
    margin_factor: float = 1.0,
    warn_factor: float = 8.0,
) -> IdentifiabilityReport:
    """Smallest process count N allowed by the Hölder-range bound.

    ``N`` must exceed ``[log(E + var) - log E] / log(a_max + a_min - a_max a_min)``.
    The trace counts as non-ergodic once ``2**N >= trace_length / margin_factor``
    and gets a warning once ``2**N >= trace_length / warn_factor``.
    """
    if not stats.mean > 0:
        raise ZeroMass("identification needs a positive mean")
    a_min, a_max = holder.alpha_min, holder.alpha_max
    if not (math.isfinite(a_min) and math.isfinite(a_max)):
        raise DegenerateDenominator("Hölder extremes must be finite")
    arg = a_max + a_min - a_max * a_min
    if arg <= 0 or arg == 1:
        raise DegenerateDenominator(
            f"a_max + a_min - a_max*a_min = {arg:.6g}; logarithm is undefined or zero"
        )
    numerator = math.log(stats.mean + stats.variance) - math.log(stats.mean)
    bound = numerator / math.log(arg)
    n_min = max(1, math.floor(bound) + 1)

    power = 2.0**n_min
    ergodic = power < trace_length / margin_factor
    warning = power >= trace_length / warn_factor
    notes = []
    if not ergodic:
        notes.append(f"non-ergodic: 2^{n_min} >= {trace_length}/{margin_factor:g}")
    elif warning:
        notes.append(f"2^{n_min} is within a factor {warn_factor:g} of the trace length")
    lo, hi = _UNIT_SCALE_BAND
    if not lo <= stats.mean <= hi:
        notes.append(f"mean {stats.mean:.6g} is far from 1; the bound depends on the trace scale")
    return IdentifiabilityReport(n_min, ergodic, warning, bound, "; ".join(notes))


@dataclass
class AnalysisReport:
    length: int
    stats: Stats
    curve: VarianceTimeCurve
    hurst: HurstEstimate | None
    holder: HolderSummary
    identification: IdentifiabilityReport | None
    notes: list[str] = field(default_factory=list)

    def as_items(self) -> list[tuple[str, str]]:
        def g(v):
            return "" if v is None else f"{v:.12g}" if isinstance(v, float) else str(v)

        ident = self.identification
        hurst = self.hurst
        items = [
            ("length", g(self.length)),
            ("mean", g(self.stats.mean)),
            ("variance", g(self.stats.variance)),
            ("cv2", g(self.stats.cv2)),
            ("scales", ",".join(str(p.scale) for p in self.curve.points)),
            ("hurst", g(hurst.H if hurst else None)),
            ("beta", g(hurst.beta if hurst else None)),
            ("r2", g(hurst.r2 if hurst else None)),
            ("alpha_min", g(self.holder.alpha_min)),
            ("alpha_max", g(self.holder.alpha_max)),
            ("level_lo", g(self.holder.levels_used[0])),
            ("level_hi", g(self.holder.levels_used[1])),
            ("excluded_cells", g(self.holder.excluded)),
            ("n_bound", g(ident.bound if ident else None)),
            ("n_min", g(ident.n_min if ident else None)),
            ("ergodic", g(ident.ergodic if ident else None)),
            ("ergodic_warning", g(ident.warning if ident else None)),
            ("notes", " | ".join(self.notes + ([ident.detail] if ident and ident.detail else []))),
        ]
        return items

    def write(self, path) -> None:
        """Flat ``key=value`` text, one pair per line."""
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            for k, v in self.as_items():
                fh.write(f"{k}={v}\n")

    def write_alphas(self, path) -> None:
        """CSV with columns ``cell_index,alpha``; excluded cells have an empty alpha."""
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            fh.write("cell_index,alpha\n")
            for i, a in enumerate(self.holder.alphas):
                fh.write(f"{i},{'' if np.isnan(a) else repr(float(a))}\n")


def analyze(
    trace: Trace,
    scales=None,
    level_range=None,
    margin_factor: float = 1.0,
    warn_factor: float = 8.0,
) -> AnalysisReport:
    """Run the whole analysis chain, recording failures as notes instead of raising."""
    st = basic_stats(trace)
    notes = []
    if scales is None:
        scales = dyadic_scales(len(trace))
        if len(scales) < 3:
            scales = dyadic_scales(len(trace), min_blocks=4)
    curve = variance_time_curve(trace, scales)
    try:
        hurst = estimate_hurst(curve)
    except ZeroVariancePoint as exc:
        hurst = None
        notes.append(f"hurst: {exc}")
    measure = to_measure(trace)
    if measure.truncated:
        notes.append(f"measure truncated by {measure.truncated} trailing samples")
    holder = estimate_holder(measure, level_range)
    if holder.detail:
        notes.append(holder.detail)
    try:
        ident = min_process_count(st, holder, len(trace), margin_factor, warn_factor)
    except DegenerateDenominator as exc:
        ident = None
        notes.append(f"identification: {exc}")
    return AnalysisReport(len(trace), st, curve, hurst, holder, ident, notes)
