"""Multiplicative multifractal cascade: fitting and synthesis.

A cascade model is a product of N independent positive factor processes.
Process ``i`` (1-based) holds each of its samples for ``2**(i-1)`` slots, so
output sample ``k`` (0-based) is::

    s_k = prod_i p[i, k // 2**(i-1)]

Fitting picks the factor squared coefficients of variation ``c_1..c_N`` so
that the cv2 of the model aggregated over ``2**i`` slots equals
``sigma_i * cv2`` with ``sigma_i = 2**(-2 i (1 - H))``. Row ``i`` of that
system reads::

    sigma_i cv2 + 1 = prod_{k<=i} (2**(k-i-1) c_k + 1) * prod_{k>i} (c_k + 1)

Row 0 is the exact moment identity ``C^2 + 1 = prod (C_k^2 + 1)`` for a
product of independent factors. Every factor has mean ``target_mean**(1/N)``.

Randomness comes from numpy's Philox4x64-10 counter generator. Process ``i``
draws from its own substream keyed by ``SeedSequence(seed, spawn_key=(i,))``
so streams never overlap and the output depends on nothing but the seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    BoundsTooTight,
    Infeasible,
    InvalidHurst,
    NonConvergence,
    NonErgodicTrace,
    RecurrenceBreakdown,
    ZeroMass,
)
from .fractal import (
    dyadic_scales,
    estimate_holder,
    estimate_hurst,
    min_process_count,
    variance_time_curve,
)
from .trace import Trace, basic_stats, to_measure

SCHEMA_VERSION = 1
RESIDUAL_TOL = 1e-9
MAX_ITER = 200
MIN_ACCEPTANCE = 0.01


def _check_hurst(H):
    if not (0 < H <= 1) or not math.isfinite(H):
        raise InvalidHurst(f"Hurst exponent must lie in (0, 1], got {H}")


def sigma_decay(i: int, H: float) -> float:
    """Relative cv2 at aggregation scale ``2**i``: ``2**(-2 i (1 - H))``."""
    _check_hurst(H)
    return 2.0 ** (-2.0 * i * (1.0 - H))


def sigma_schedule(N: int, H: float) -> np.ndarray:
    return np.array([sigma_decay(i, H) for i in range(N)])


def _scale_weights(N: int) -> np.ndarray:
    # W[i, k-1] = 2**(k-i-1) for k <= i, else 1
    i = np.arange(N)[:, None]
    k = np.arange(1, N + 1)[None, :]
    return np.where(k <= i, 2.0 ** (k - i - 1), 1.0)


def system_rows(c) -> np.ndarray:
    """Right-hand sides of the variance system: ``C^2 + 1`` at scales ``2**0..2**(N-1)``."""
    c = np.asarray(c, dtype=np.float64)
    return np.prod(_scale_weights(c.size) * c + 1.0, axis=1)


def system_residuals(c, cv2: float, H: float) -> np.ndarray:
    """Relative residual of every row (model over target, minus one)."""
    c = np.asarray(c, dtype=np.float64)
    target = sigma_schedule(c.size, H) * cv2 + 1.0
    return system_rows(c) / target - 1.0


@dataclass(frozen=True)
class SolveResult:
    c: np.ndarray
    residuals: np.ndarray
    iterations: int

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residuals))) if self.residuals.size else 0.0


def _numerical_jacobian(f, x, fx):
    n = x.size
    J = np.empty((fx.size, n))
    for k in range(n):
        h = 1e-7 * max(1.0, abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        J[:, k] = (f(xp) - f(xm)) / (2 * h)
    return J


def newton_solve(cv2: float, H: float, N: int, tol: float = 1e-14, max_iter: int = MAX_ITER) -> SolveResult:
    """Damped Newton iteration on the variance system.

    Starts from the uniform split ``c_k = (cv2 + 1)**(1/N) - 1``, uses a
    central-difference Jacobian and halves the step until the residual norm
    decreases and every ``c_k`` stays above -1. The returned vector is the
    unconstrained root; sign checks are up to the caller.
    """
    if N < 1 or int(N) != N:
        raise ValueError(f"process count must be a positive integer, got {N}")
    _check_hurst(H)
    if not (cv2 >= 0 and math.isfinite(cv2)):
        raise ValueError(f"cv2 must be finite and nonnegative, got {cv2}")
    N = int(N)
    target = sigma_schedule(N, H) * cv2 + 1.0
    W = _scale_weights(N)

    def f(x):
        return np.prod(W * x + 1.0, axis=1) / target - 1.0

    x = np.full(N, (cv2 + 1.0) ** (1.0 / N) - 1.0)
    r = f(x)
    norm = float(np.max(np.abs(r)))
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise NonConvergence(f"variance system: no convergence in {max_iter} iterations (residual {norm:.3e})")
        it += 1
        J = _numerical_jacobian(f, x, r)
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(J, -r, rcond=None)[0]
        t = 1.0
        for _ in range(60):
            xn = x + t * dx
            if np.all(xn > -1.0):
                rn = f(xn)
                nn = float(np.max(np.abs(rn)))
                if nn < (1.0 - 1e-4 * t) * norm:
                    break
            t *= 0.5
        else:
            # No descent available: the current iterate is as good as the
            # floating point evaluation of the rows allows.
            if norm < RESIDUAL_TOL * 1e-2:
                break
            raise NonConvergence(f"variance system: line search stalled at residual {norm:.3e}")
        x, r, norm = xn, rn, nn
    return SolveResult(x, r, it)


def solve_variance_system_result(cv2: float, H: float, N: int) -> SolveResult:
    """Solve and enforce the nonnegativity and residual contracts."""
    res = newton_solve(cv2, H, N)
    c = res.c.copy()
    # rounding noise around an exact zero is not infeasibility
    c[(c < 0) & (c > -1e-12)] = 0.0
    if np.any(c < 0):
        clipped = np.clip(c, 0.0, None)
        r = system_residuals(clipped, cv2, H)
        row = int(np.argmax(np.abs(r)))
        k = int(np.argmin(c))
        raise Infeasible(
            f"no nonnegative solution for cv2={cv2}, H={H}, N={N}: c_{k + 1} = {c[k]:.6g}; "
            f"clipping leaves relative residual {r[row]:.3e} in row {row}",
            worst_residual=float(abs(r[row])),
            row=row,
            solution=res.c,
        )
    r = system_residuals(c, cv2, H)
    worst = float(np.max(np.abs(r)))
    if worst >= RESIDUAL_TOL:
        row = int(np.argmax(np.abs(r)))
        raise Infeasible(
            f"residual {worst:.3e} in row {row} exceeds {RESIDUAL_TOL:g}", worst_residual=worst, row=row, solution=c
        )
    return SolveResult(c, r, res.iterations)


def solve_variance_system(cv2: float, H: float, N: int) -> np.ndarray:
    """Factor cv2 values ``c_1..c_N`` for a cascade with overall cv2 and Hurst ``H``."""
    return solve_variance_system_result(cv2, H, N).c


@dataclass(frozen=True)
class RecurrenceReport:
    c: np.ndarray
    L: np.ndarray  # L_1..L_{N+1}
    residuals: np.ndarray

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residuals)))


def solve_variance_system_recurrence(cv2: float, H: float, N: int) -> RecurrenceReport:
    """Evaluate the published elimination recurrence literally and report its residuals.

    L_1 = sigma_0 cv2 + 1, L_2 = 2 sigma_1 cv2 + 2 - L_1, L_{N+1} = 1,
    L_i = (2 sigma_{i-1} cv2 + 2) / prod_{k=1}^{i-2} (2**(k-i) c_k + 1) - L_{i-1},
    c_i + 1 = L_i / L_{i+1}.

    The index bookkeeping is read as: ``c_i`` is settled once ``L_{i+1}`` is
    known, and ``L_{N+1} = 1`` overrides the ``L_2`` line when N = 1. Read
    that way it reproduces the Newton solution to rounding error on every
    case tried, but it stays a diagnostic; the fit path uses
    :func:`solve_variance_system`.
    """
    _check_hurst(H)
    sig = sigma_schedule(N, H)
    L = np.zeros(N + 2)  # 1-based, L[N+1] = 1
    c = np.zeros(N + 1)  # 1-based
    L[N + 1] = 1.0
    L[1] = sig[0] * cv2 + 1.0

    def settle(k):
        # c_k needs L_{k+1}
        if L[k + 1] == 0:
            raise RecurrenceBreakdown(f"division by zero: L_{k + 1} = 0", index=k, partial=c[1:k].copy())
        c[k] = L[k] / L[k + 1] - 1.0
        if c[k] < -1e-12:
            raise RecurrenceBreakdown(f"negative c_{k} = {c[k]:.6g}", index=k, partial=c[1 : k + 1].copy())
        c[k] = max(c[k], 0.0)

    for i in range(2, N + 1):
        if i == 2:
            L[2] = 2 * sig[1] * cv2 + 2 - L[1]
        else:
            settle(i - 2)
            den = np.prod([2.0 ** (k - i) * c[k] + 1.0 for k in range(1, i - 1)])
            if den == 0:
                raise RecurrenceBreakdown(f"division by zero computing L_{i}", index=i, partial=c[1 : i - 1].copy())
            L[i] = (2 * sig[i - 1] * cv2 + 2) / den - L[i - 1]
    for k in range(max(1, N - 1), N + 1):
        settle(k)
    cvec = c[1:].copy()
    return RecurrenceReport(cvec, L[1:].copy(), system_residuals(cvec, cv2, H))


@dataclass(frozen=True)
class LogNormalParams:
    mu: float
    s2: float

    @property
    def mean(self) -> float:
        return math.exp(self.mu + self.s2 / 2)

    @property
    def cv2(self) -> float:
        return math.expm1(self.s2)


def lognormal_from_moments(mean: float, cv2: float) -> LogNormalParams:
    """Log-scale location and variance giving the requested mean and cv2."""
    if not mean > 0:
        raise ValueError(f"log-normal mean must be positive, got {mean}")
    if not cv2 >= 0:
        raise ValueError(f"cv2 must be nonnegative, got {cv2}")
    s2 = math.log1p(cv2)
    return LogNormalParams(math.log(mean) - s2 / 2, s2)


def _phi(z):
    if z == math.inf:
        return 1.0
    if z == -math.inf:
        return 0.0
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def truncated_lognormal_moments(p: LogNormalParams, lo: float, hi: float) -> tuple[float, float, float]:
    """(acceptance probability, mean, cv2) of a log-normal restricted to [lo, hi]."""
    if p.s2 == 0:
        inside = lo <= p.mean <= hi
        return (1.0 if inside else 0.0), p.mean, 0.0
    s = math.sqrt(p.s2)
    a = math.log(lo) if lo > 0 else -math.inf
    b = math.log(hi) if math.isfinite(hi) else math.inf

    def mass(shift):
        za = (a - p.mu - shift) / s if math.isfinite(a) else -math.inf
        zb = (b - p.mu - shift) / s if math.isfinite(b) else math.inf
        return _phi(zb) - _phi(za)

    acc = mass(0.0)
    if acc <= 0:
        return 0.0, math.nan, math.nan
    m1 = math.exp(p.mu + p.s2 / 2) * mass(p.s2) / acc
    m2 = math.exp(2 * p.mu + 2 * p.s2) * mass(2 * p.s2) / acc
    return acc, m1, max(m2 / m1**2 - 1.0, 0.0)


@dataclass(frozen=True)
class Factor:
    mean: float
    cv2: float


@dataclass(frozen=True)
class CascadeModel:
    n: int
    target_mean: float
    target_cv2: float
    hurst: float
    factors: tuple[Factor, ...]
    bounds: tuple[float, float] | None = None
    dist_family: str = "lognormal"
    slot_duration: float = 1.0
    unit: str = ""
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.n < 1 or len(self.factors) != self.n:
            raise ValueError(f"model has n={self.n} but {len(self.factors)} factors")
        if not self.target_mean > 0:
            raise ValueError("target mean must be positive")
        if any(f.cv2 < 0 for f in self.factors):
            raise ValueError("factor cv2 values must be nonnegative")
        if self.dist_family not in ("lognormal", "deterministic"):
            raise ValueError(f"unknown distribution family {self.dist_family!r}")
        if self.bounds is not None:
            lo, hi = self.bounds
            if not (0 <= lo < hi):
                raise ValueError(f"bounds must satisfy 0 <= lo < hi, got {self.bounds}")

    @classmethod
    def from_factor_cv2(cls, c, target_mean, target_cv2, hurst, **kw):
        c = [float(v) for v in c]
        n = len(c)
        fm = target_mean ** (1.0 / n)
        family = "deterministic" if all(v == 0 for v in c) else "lognormal"
        kw.setdefault("dist_family", family)
        return cls(n, float(target_mean), float(target_cv2), float(hurst), tuple(Factor(fm, v) for v in c), **kw)

    @property
    def factor_cv2(self) -> np.ndarray:
        return np.array([f.cv2 for f in self.factors])

    def factor_bounds(self) -> tuple[float, float] | None:
        """Per-factor interval whose N-fold product spans the model bounds."""
        if self.bounds is None:
            return None
        lo, hi = self.bounds
        return lo ** (1.0 / self.n), hi ** (1.0 / self.n)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "cascade",
            "n": self.n,
            "target_mean": self.target_mean,
            "target_cv2": self.target_cv2,
            "hurst": self.hurst,
            "factors": [asdict(f) for f in self.factors],
            "bounds": list(self.bounds) if self.bounds is not None else None,
            "dist_family": self.dist_family,
            "slot_duration": self.slot_duration,
            "unit": self.unit,
            "prng": "numpy Philox4x64-10, SeedSequence(seed, spawn_key=(i,)) per process",
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeModel":
        if d.get("kind", "cascade") != "cascade":
            raise ValueError(f"not a cascade model: kind={d.get('kind')!r}")
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {d.get('schema_version')!r}")
        return cls(
            n=int(d["n"]),
            target_mean=float(d["target_mean"]),
            target_cv2=float(d["target_cv2"]),
            hurst=float(d["hurst"]),
            factors=tuple(Factor(float(f["mean"]), float(f["cv2"])) for f in d["factors"]),
            bounds=tuple(d["bounds"]) if d.get("bounds") is not None else None,
            dist_family=d.get("dist_family", "lognormal"),
            slot_duration=float(d.get("slot_duration", 1.0)),
            unit=d.get("unit", ""),
            provenance=d.get("provenance", {}),
        )

    def save(self, path) -> None:
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CascadeModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def predicted_cv2_at_scale(model: CascadeModel, i: int) -> float:
    """Model cv2 after aggregating over ``2**i`` slots (row ``i`` of the system)."""
    if not 0 <= i < model.n:
        raise ValueError(f"scale index {i} outside 0..{model.n - 1}")
    c = model.factor_cv2
    k = np.arange(1, model.n + 1)
    w = np.where(k <= i, 2.0 ** (k - i - 1), 1.0)
    return float(np.prod(w * c + 1.0) - 1.0)


def fit_cascade(
    trace: Trace,
    n: int | None = None,
    hurst: float | None = None,
    bounds: tuple[float, float] | None = None,
    level_range: tuple[int, int] | None = None,
    margin_factor: float = 1.0,
    warn_factor: float = 8.0,
) -> CascadeModel:
    """Fit a cascade to ``trace``.

    N comes from the Hölder-range identification rule unless ``n`` is given;
    H comes from a variance-time regression over dyadic scales up to
    ``2**N`` unless ``hurst`` is given. Forcing ``n`` skips the ergodicity
    refusal but the outcome is still recorded in the provenance.
    """
    st = basic_stats(trace)
    if not st.mean > 0:
        raise ZeroMass("cannot fit a cascade to an all-zero trace")
    length = len(trace)
    prov: dict = {
        "length": length,
        "mean": st.mean,
        "variance": st.variance,
        "cv2": st.cv2,
        "n_override": n,
        "hurst_override": hurst,
    }

    if st.cv2 == 0:
        N = int(n) if n is not None else 1
        H = float(hurst) if hurst is not None else 1.0
        _check_hurst(H)
        prov.update(note="zero-variance trace: all factors deterministic", residuals=[0.0] * N, iterations=0)
        return CascadeModel.from_factor_cv2(
            [0.0] * N, st.mean, 0.0, H, bounds=bounds, slot_duration=trace.slot_duration, unit=trace.unit,
            provenance=prov,
        )

    if n is None:
        holder = estimate_holder(to_measure(trace), level_range)
        ident = min_process_count(st, holder, length, margin_factor, warn_factor)
        prov.update(
            alpha_min=holder.alpha_min,
            alpha_max=holder.alpha_max,
            holder_levels=list(holder.levels_used),
            n_bound=ident.bound,
            n_min=ident.n_min,
            ergodic=ident.ergodic,
            ergodic_warning=ident.warning,
            identification_detail=ident.detail,
        )
        if not ident.ergodic:
            raise NonErgodicTrace(
                f"identification needs N={ident.n_min} processes but 2^{ident.n_min} >= "
                f"trace length {length}/{margin_factor:g}; the trace is non-ergodic"
            )
        N = ident.n_min
    else:
        N = int(n)
        if N < 1:
            raise ValueError(f"process count must be >= 1, got {n}")
        prov["ergodic"] = 2.0**N < length / margin_factor

    if hurst is None:
        scales = dyadic_scales(length, max_scale=2**N)
        if len(scales) < 3:
            scales = dyadic_scales(length, max_scale=max(2**N, 4), min_blocks=4)
        est = estimate_hurst(variance_time_curve(trace, scales))
        prov.update(hurst_estimate=est.H, hurst_r2=est.r2, hurst_scales=scales)
        if not (0.5 < est.H <= 1.0):
            raise InvalidHurst(f"estimated H = {est.H:.4f} lies outside (0.5, 1]; pass an override to fit anyway")
        H = est.H
    else:
        H = float(hurst)
        _check_hurst(H)

    res = solve_variance_system_result(st.cv2, H, N)
    prov.update(residuals=[float(r) for r in res.residuals], iterations=res.iterations)
    return CascadeModel.from_factor_cv2(
        res.c, st.mean, st.cv2, H, bounds=bounds, slot_duration=trace.slot_duration, unit=trace.unit,
        provenance=prov,
    )


@dataclass(frozen=True)
class GenerationReport:
    redraws: tuple[int, ...]
    acceptance: tuple[float, ...]
    expected_mean: float
    expected_cv2: float
    target_mean: float
    target_cv2: float
    sample_mean: float
    sample_cv2: float

    @property
    def expected_mean_shift(self) -> float:
        return self.expected_mean / self.target_mean - 1.0

    @property
    def expected_cv2_shift(self) -> float:
        return self.expected_cv2 / self.target_cv2 - 1.0 if self.target_cv2 > 0 else 0.0

    @property
    def sample_mean_shift(self) -> float:
        return self.sample_mean / self.target_mean - 1.0

    @property
    def sample_cv2_shift(self) -> float:
        return self.sample_cv2 / self.target_cv2 - 1.0 if self.target_cv2 > 0 else 0.0


def process_rng(seed: int, i: int) -> np.random.Generator:
    """Independent Philox substream for process ``i`` (1-based) under ``seed``."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(i,))))


def _draw_factor(rng, params: LogNormalParams, count: int, fbounds):
    if params.s2 == 0:
        return np.full(count, params.mean), 0
    sd = math.sqrt(params.s2)
    x = rng.lognormal(params.mu, sd, count)
    if fbounds is None:
        return x, 0
    lo, hi = fbounds
    redraws = 0
    bad = np.flatnonzero((x < lo) | (x > hi))
    while bad.size:
        redraws += bad.size
        x[bad] = rng.lognormal(params.mu, sd, bad.size)
        bad = bad[(x[bad] < lo) | (x[bad] > hi)]
    return x, redraws


def synthesize(model: CascadeModel, length: int, seed: int) -> tuple[Trace, GenerationReport]:
    """Generate ``length`` samples and report rejection counts and moment shifts.

    Beyond ``2**N`` samples every process simply continues its stream; the
    output is self-similar only up to that scale.
    """
    length = int(length)
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    fb = model.factor_bounds()
    params = [lognormal_from_moments(f.mean, f.cv2) for f in model.factors]

    acceptance = []
    exp_mean, exp_c2p1 = 1.0, 1.0
    for i, p in enumerate(params, start=1):
        if fb is None:
            acc, m, c2 = 1.0, p.mean, p.cv2
        else:
            acc, m, c2 = truncated_lognormal_moments(p, *fb)
            if acc < MIN_ACCEPTANCE:
                raise BoundsTooTight(
                    f"process {i}: acceptance rate {acc:.3g} below {MIN_ACCEPTANCE:g} for factor bounds "
                    f"({fb[0]:.6g}, {fb[1]:.6g})"
                )
        acceptance.append(acc)
        exp_mean *= m
        exp_c2p1 *= c2 + 1.0

    out = np.ones(length)
    redraws = []
    for i, p in enumerate(params, start=1):
        hold = 2 ** (i - 1)
        count = -(-length // hold)
        x, r = _draw_factor(process_rng(seed, i), p, count, fb)
        redraws.append(r)
        out *= np.repeat(x, hold)[:length]
    if not np.all(out > 0):
        raise AssertionError("cascade produced a nonpositive sample")

    trace = Trace(out, model.slot_duration, label="cascade", unit=model.unit)
    st = basic_stats(trace)
    report = GenerationReport(
        tuple(redraws), tuple(acceptance), exp_mean, exp_c2p1 - 1.0, model.target_mean, model.target_cv2,
        st.mean, st.cv2,
    )
    return trace, report


def generate(model: CascadeModel, length: int, seed: int) -> Trace:
    """Synthesize a trace of ``length`` slots from ``model``; see :func:`synthesize`."""
    return synthesize(model, length, seed)[0]
