import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mftraffic.errors import InvalidScale, NonDyadicLength, ParseError, ZeroMass
from mftraffic.trace import Trace, aggregate, basic_stats, load_trace, to_measure, write_trace
from oracles import block_means, two_pass_stats

from conftest import cascade_model
from mftraffic.cascade import generate

values_st = arrays(np.float64, st.integers(1, 200), elements=st.floats(0, 1e6, allow_nan=False))


def test_load_plain(tmp_path):
    p = tmp_path / "t.txt"
    p.write_bytes(b"2\n3\n5\n")
    tr = load_trace(p, "plain", 0.04)
    assert tr.values.tolist() == [2, 3, 5]
    assert tr.slot_duration == 0.04


def test_load_plain_crlf_no_trailing_newline(tmp_path):
    p = tmp_path / "t.txt"
    p.write_bytes(b"1.5\r\n2e3\r\n.25")
    assert load_trace(p).values.tolist() == [1.5, 2000.0, 0.25]


def test_negative_value_reports_line(tmp_path):
    p = tmp_path / "t.txt"
    p.write_bytes(b"1\n-1\n3\n")
    with pytest.raises(ParseError) as exc:
        load_trace(p)
    assert exc.value.line == 2


@pytest.mark.parametrize("bad", [b"1\nabc\n", b"1\nnan\n", b"1\ninf\n", b"1\n1_000\n", b"1\n\n2\n"])
def test_non_numeric_rejected(tmp_path, bad):
    p = tmp_path / "t.txt"
    p.write_bytes(bad)
    with pytest.raises(ParseError) as exc:
        load_trace(p)
    assert exc.value.line == 2


def test_empty_file(tmp_path):
    p = tmp_path / "t.txt"
    p.write_bytes(b"")
    with pytest.raises(ParseError, match="empty"):
        load_trace(p)


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_trace(tmp_path / "nope.txt")


def test_csv_column(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("time,bytes\n0,100\n1,250\n")
    tr = load_trace(p, "csv_column", 1 / 24, column="bytes")
    assert tr.values.tolist() == [100, 250]
    with pytest.raises(ParseError):
        load_trace(p, "csv_column", column="frames")


def test_write_roundtrip(tmp_path):
    tr = Trace([1, 2.5, 1e-7, 2**52 + 1, 0.1])
    p = tmp_path / "o.txt"
    write_trace(tr, p)
    assert load_trace(p).values.tolist() == tr.values.tolist()


def test_trace_is_immutable():
    tr = Trace([1.0, 2.0])
    with pytest.raises(ValueError):
        tr.values[0] = 5


def test_aggregate_examples():
    assert aggregate(Trace([1, 3, 2, 4]), 2).values.tolist() == [2, 3]
    tr = Trace([1, 3, 2, 4, 9])
    assert aggregate(tr, 1) is tr
    agg = aggregate(tr, 2)
    assert agg.values.tolist() == [2, 3]
    assert agg.slot_duration == 2.0
    assert np.all(aggregate(Trace([7.5] * 12), 3).values == 7.5)


@pytest.mark.parametrize("T", [0, -1, 5, 2.5])
def test_aggregate_invalid_scale(T):
    with pytest.raises(InvalidScale):
        aggregate(Trace([1, 2, 3, 4]), T)


@given(values_st, st.integers(1, 50))
def test_aggregate_matches_brute_force_and_preserves_mean(vals, T):
    tr = Trace(vals)
    if T > len(tr):
        return
    agg = aggregate(tr, T)
    np.testing.assert_allclose(agg.values, block_means(list(vals), T), rtol=1e-12, atol=1e-9)
    used = vals[: (len(vals) // T) * T]
    assert abs(agg.values.mean() - used.mean()) < 1e-12 * max(1.0, used.mean()) * 10


@given(arrays(np.float64, st.integers(1, 8).map(lambda k: 12 * k), elements=st.integers(0, 1000).map(lambda v: 12.0 * v)),
       st.sampled_from([(2, 3), (3, 2), (2, 6), (4, 3), (1, 12)]))
def test_aggregate_composes(vals, ab):
    a, b = ab
    tr = Trace(vals)
    two = aggregate(aggregate(tr, a), b).values
    one = aggregate(tr, a * b).values
    # multiples of 12 keep every block mean an integer, so both routes are exact
    np.testing.assert_array_equal(two, one)


def test_basic_stats_examples():
    s = basic_stats(Trace([2, 2, 2, 2]))
    assert (s.mean, s.variance, s.cv2) == (2, 0, 0)
    s = basic_stats(Trace([0, 2]))
    assert (s.mean, s.variance, s.cv2) == (1, 1, 1)
    s = basic_stats(Trace([0, 0]))
    assert (s.mean, s.variance, s.cv2) == (0, 0, 0)


@given(arrays(np.float64, st.integers(1, 300), elements=st.floats(0, 1e6, allow_nan=False)))
def test_basic_stats_matches_two_pass(vals):
    s = basic_stats(Trace(vals))
    m, v = two_pass_stats(list(vals))
    assert s.mean == pytest.approx(m, rel=1e-10, abs=1e-300)
    assert abs(s.variance - v) <= 1e-10 * v + 1e-12 * m * m
    if s.mean > 0:
        assert s.cv2 == pytest.approx(s.variance / s.mean / s.mean, rel=1e-12)


def test_basic_stats_monte_carlo_mean():
    model = cascade_model(0.8, 0.5, 8, mean=3.0)
    s = basic_stats(generate(model, 2**16, 7))
    assert abs(s.mean / 3.0 - 1) < 0.02


def test_to_measure_examples():
    m = to_measure(Trace([1, 1, 1, 1]))
    assert m.masses.tolist() == [0.25] * 4 and m.depth == 2
    m = to_measure(Trace([3, 1]))
    assert m.masses.tolist() == [0.75, 0.25] and m.depth == 1
    with pytest.raises(ZeroMass):
        to_measure(Trace([0, 0, 0]))


def test_to_measure_non_dyadic_policies():
    tr = Trace([1, 2, 3, 4, 5, 6])
    m = to_measure(tr)
    assert m.depth == 2 and m.truncated == 2
    np.testing.assert_allclose(m.masses, np.array([1, 2, 3, 4]) / 10)
    m = to_measure(tr, pad=True)
    assert m.depth == 3 and m.padded == 2 and m.masses[-1] == 0
    with pytest.raises(NonDyadicLength):
        to_measure(tr, allow_truncate=False)


@settings(max_examples=50)
@given(arrays(np.float64, st.sampled_from([1, 2, 8, 64]), elements=st.floats(0.001, 1e6)))
def test_measure_normalized_and_order_preserving(vals):
    m = to_measure(Trace(vals))
    assert abs(m.masses.sum() - 1) < 1e-12
    order = np.argsort(vals, kind="stable")
    assert np.all(np.diff(m.masses[order]) >= 0)
    assert (m.masses.size & (m.masses.size - 1)) == 0
