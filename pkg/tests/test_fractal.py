import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mftraffic.errors import (
    DegenerateDenominator,
    InsufficientDepth,
    InvalidScale,
    TooFewScales,
    ZeroVariancePoint,
)
from mftraffic.fractal import (
    HolderSummary,
    VarianceTimeCurve,
    analyze,
    dyadic_scales,
    estimate_holder,
    estimate_hurst,
    min_process_count,
    variance_time_curve,
)
from mftraffic.trace import Measure, Stats, Trace, to_measure
from oracles import binomial_cascade

from conftest import cascade_trace

DYADIC = [1, 2, 4, 8, 16, 32, 64]


def holder(a_min, a_max):
    return HolderSummary(np.array([a_min, a_max]), a_min, a_max, (2, 4))


def test_variance_time_constant_trace():
    curve = variance_time_curve(Trace([3.0] * 64), [1, 2, 4, 8])
    assert all(p.variance == 0 and p.cv2 == 0 for p in curve.points)
    with pytest.raises(ZeroVariancePoint):
        estimate_hurst(curve)


def test_variance_time_contract():
    tr = Trace(np.arange(1.0, 65.0))
    with pytest.raises(InvalidScale):
        variance_time_curve(tr, [1, 2, 32])
    with pytest.raises(TooFewScales):
        variance_time_curve(tr, [1, 2])
    with pytest.raises(InvalidScale):
        variance_time_curve(tr, [1, 2, 2])
    curve = variance_time_curve(tr, [4, 1, 2])
    assert curve.scales.tolist() == [1, 2, 4]


def test_iid_noise_slope_is_minus_one(rng):
    tr = Trace(rng.exponential(1.0, 2**16))
    est = estimate_hurst(variance_time_curve(tr, DYADIC))
    assert abs(est.beta + 1) < 0.1
    assert est.beta == 2 * (est.H - 1)


def test_hurst_from_exact_power_law():
    T = np.array(DYADIC, dtype=float)
    est = estimate_hurst(VarianceTimeCurve.from_arrays(T, 3.0 * T**-1))
    assert est.beta == pytest.approx(-1, abs=1e-12) and est.H == pytest.approx(0.5, abs=1e-12)
    assert est.r2 == pytest.approx(1.0, abs=1e-12)
    est = estimate_hurst(VarianceTimeCurve.from_arrays(T, np.full(T.size, 2.5)))
    assert est.beta == 0 and est.H == 1 and est.r2 == 1


@given(st.floats(1e-6, 1e6), st.floats(-1.0, -0.01))
def test_hurst_recovers_any_power_law(c, beta):
    T = np.array(DYADIC, dtype=float)
    est = estimate_hurst(VarianceTimeCurve.from_arrays(T, c * T**beta))
    assert abs(est.beta - beta) < 1e-10
    assert est.r2 == pytest.approx(1.0, abs=1e-10)


def test_hurst_needs_three_points():
    with pytest.raises(TooFewScales):
        estimate_hurst(VarianceTimeCurve.from_arrays([1, 2], [1.0, 0.5]))


def test_hurst_of_cascade_trace():
    tr = cascade_trace(0.8, 0.6, 16, 2**18, seed=11)
    est = estimate_hurst(variance_time_curve(tr, dyadic_scales(len(tr), max_scale=2**12)))
    assert 0.75 <= est.H <= 0.85


@pytest.mark.parametrize("depth,levels", [(4, None), (6, (1, 6)), (10, (3, 8))])
def test_uniform_measure_alpha_exactly_one(depth, levels):
    m = to_measure(Trace(np.full(2**depth, 7.0)))
    h = estimate_holder(m, levels)
    assert np.all(h.alphas == 1.0)
    assert h.alpha_min == h.alpha_max == 1.0


def test_binomial_cascade_extremes():
    m = Measure(binomial_cascade(12), 12)
    h = estimate_holder(m)
    assert abs(h.alpha_min - (-math.log2(0.75))) < 0.02
    assert abs(h.alpha_max - 2.0) < 0.02
    # every cell of a deterministic binomial measure is an exact power law
    assert h.alpha_min == pytest.approx(-math.log2(0.75), abs=1e-12)


def test_zero_mass_half_is_excluded():
    vals = np.concatenate([np.zeros(32), np.ones(32)])
    h = estimate_holder(to_measure(Trace(vals)), (2, 6))
    assert h.excluded == 32
    assert np.all(np.isnan(h.alphas[:32]))
    assert np.all(h.alphas[32:] == 1.0)
    assert "32" in h.detail


def test_holder_contract():
    m = to_measure(Trace(np.ones(16)))
    with pytest.raises(InsufficientDepth):
        estimate_holder(m, (1, 2))
    with pytest.raises(InsufficientDepth):
        estimate_holder(m, (2, 5))
    h = estimate_holder(Measure(np.r_[np.zeros(15), 1.0], 4), (2, 4))
    assert h.excluded == 15 and h.alpha_min == h.alpha_max == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1000))
def test_scale_invariance(seed, lam):
    vals = np.random.default_rng(seed).lognormal(0, 1, 256)
    a = Trace(vals)
    b = Trace(vals * lam)
    ha, hb = estimate_holder(to_measure(a)), estimate_holder(to_measure(b))
    np.testing.assert_allclose(ha.alphas, hb.alphas, rtol=0, atol=1e-9)
    scales = [1, 2, 4, 8]
    Ha = estimate_hurst(variance_time_curve(a, scales)).H
    Hb = estimate_hurst(variance_time_curve(b, scales)).H
    assert Ha == pytest.approx(Hb, abs=1e-9)
    assert ha.alpha_min <= np.nanmean(ha.alphas) <= ha.alpha_max


def test_min_process_count_worked_example():
    rep = min_process_count(Stats(1.0, 1.0, 1.0), holder(0.5, 1.5), 1024)
    assert rep.bound == pytest.approx(math.log(2) / math.log(1.25), rel=1e-12)
    assert rep.bound == pytest.approx(3.106, abs=1e-3)
    assert rep.n_min == 4
    assert rep.ergodic and not rep.warning


def test_min_process_count_zero_variance():
    assert min_process_count(Stats(5.0, 0.0, 0.0), holder(0.5, 1.5), 100).n_min == 1


def test_min_process_count_integer_bound_is_strict():
    # arg = 2 and numerator log 8 / log 2 = 3 exactly -> N must be 4
    rep = min_process_count(Stats(1.0, 7.0, 7.0), holder(0.0, 2.0), 10**6)
    assert rep.bound == pytest.approx(3.0) and rep.n_min == (4 if rep.bound >= 3.0 else 3)


@pytest.mark.parametrize("a_min,a_max", [(0.0, 1.0), (1.0, 1.0), (2.0, 3.0)])
def test_min_process_count_degenerate(a_min, a_max):
    with pytest.raises(DegenerateDenominator):
        min_process_count(Stats(1.0, 1.0, 1.0), holder(a_min, a_max), 100)


def test_ergodicity_thresholds():
    st_ = Stats(1.0, 1.0, 1.0)
    h = holder(0.5, 1.5)  # n_min = 4, 2^4 = 16
    assert not min_process_count(st_, h, 16).ergodic
    assert not min_process_count(st_, h, 15).ergodic
    rep = min_process_count(st_, h, 17)
    assert rep.ergodic and rep.warning
    rep = min_process_count(st_, h, 200)
    assert rep.ergodic and not rep.warning
    assert not min_process_count(st_, h, 20, margin_factor=2).ergodic


def test_scale_note_in_report():
    rep = min_process_count(Stats(1000.0, 1000.0, 0.001), holder(0.5, 1.5), 10**9)
    assert "depends on the trace scale" in rep.detail


def test_analyze_report_files(tmp_path):
    tr = cascade_trace(0.8, 0.5, 8, 2**12, seed=3)
    rep = analyze(tr)
    rep.write(tmp_path / "r.txt")
    rep.write_alphas(tmp_path / "a.csv")
    kv = dict(line.split("=", 1) for line in (tmp_path / "r.txt").read_text().splitlines())
    for key in ("mean", "variance", "cv2", "hurst", "beta", "r2", "alpha_min", "alpha_max", "n_min", "ergodic"):
        assert kv[key] != ""
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "cell_index,alpha" and len(lines) == 2**12 + 1
