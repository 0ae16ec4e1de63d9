import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npuvlm.errors import CompletenessError, FormatError, InvalidRangeError
from npuvlm.ranges import RangeBook, SiteStats, parse_method

values = st.lists(st.floats(-1e6, 1e6, allow_nan=False, width=32), min_size=1, max_size=50)


def book_of(chunks):
    b = RangeBook()
    for i, c in enumerate(chunks):
        b.observe(f"s{i % 3}", np.array(c, np.float32))
    return b


@given(st.lists(values, min_size=1, max_size=6), st.lists(values, min_size=1, max_size=6),
       st.lists(values, min_size=1, max_size=6))
def test_merge_associative_commutative(a, b, c):
    A, B, C = book_of(a), book_of(b), book_of(c)
    assert A.merge(B) == B.merge(A)
    assert A.merge(B).merge(C) == A.merge(B.merge(C))


@settings(deadline=None)
@given(values, st.randoms(use_true_random=False))
def test_merge_over_random_partitions(xs, r):
    x = np.array(xs, np.float32)
    whole = RangeBook()
    whole.observe("s", x)
    cut = sorted(r.sample(range(len(x) + 1), 2))
    parts = [x[: cut[0]], x[cut[0]: cut[1]], x[cut[1]:]]
    merged = RangeBook()
    for p in parts:
        b = RangeBook()
        b.observe("s", p)
        merged = merged.merge(b)
    assert merged == whole
    assert merged["s"].count == len(x)


@given(values, st.floats(0.01, 100))
def test_percentile_within_minmax(xs, p):
    b = RangeBook()
    b.observe("s", np.array(xs, np.float32))
    lo, hi = b.ranges(f"percentile:{p}")["s"]
    mlo, mhi = b.ranges("minmax")["s"]
    assert mlo <= lo <= hi <= mhi


@given(values)
def test_percentile_100_is_minmax(xs):
    b = RangeBook()
    b.observe("s", np.array(xs, np.float32))
    assert b.ranges("percentile:100") == b.ranges("minmax")


def test_percentile_upper_bound_is_tight():
    x = np.random.default_rng(0).standard_normal(100_000)
    st_ = SiteStats()
    st_.observe(x)
    est = st_.abs_percentile(99.0)
    true = np.percentile(np.abs(x), 99.0)
    assert true <= est <= true * 2 ** (1 / 32) * 1.0001


def test_zero_observations():
    b = RangeBook()
    b.observe("z", np.zeros(10))
    assert b.ranges() == {"z": (0.0, 0.0)}
    assert b.ranges("percentile:99.99") == {"z": (0.0, 0.0)}
    b.observe("empty", np.zeros(0))
    assert "empty" not in b


def test_errors():
    b = RangeBook()
    with pytest.raises(InvalidRangeError):
        b.observe("s", np.array([np.nan]))
    with pytest.raises(CompletenessError, match="missing_site"):
        b.ranges(sites=["missing_site"])
    for bad in ("percentile:0", "percentile:abc", "median"):
        with pytest.raises(ValueError):
            parse_method(bad)
    assert parse_method("percentile:99.99") == ("percentile", 99.99)
    with pytest.raises(ValueError, match="cannot merge"):
        RangeBook(method="minmax").merge(RangeBook(method="percentile:99.9"))


def test_serialization_roundtrip():
    b = RangeBook(method="percentile:99.9")
    rng = np.random.default_rng(1)
    b.observe("a", rng.standard_normal(1000))
    b.observe("b", np.zeros(4))
    d = b.to_dict()
    assert RangeBook.from_dict(d) == b and RangeBook.from_dict(d).method == "percentile:99.9"
    with pytest.raises(FormatError):
        RangeBook.from_dict({**d, "schema_version": 2})


def test_summary_table():
    b = RangeBook()
    b.observe("a", np.arange(-5, 6, dtype=np.float32))
    s = b.summary()["a"]
    assert s["min"] == -5 and s["max"] == 5 and s["count"] == 11
    assert s["abs_percentiles"]["100.0"] == 5
