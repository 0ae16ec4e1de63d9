"""Per-site activation statistics with an exactly mergeable sketch.

Each site keeps its min, max, sample count and a histogram of ``|x|`` over
fixed log-spaced bins (32 per octave). Because the bin edges never depend on
the data, merging two books is plain integer addition: associative,
commutative and independent of how the calibration set was sharded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CompletenessError, FormatError, InvalidRangeError

BINS_PER_OCTAVE = 32
_K_LO = -150 * BINS_PER_OCTAVE
_K_HI = 130 * BINS_PER_OCTAVE
_NBINS = _K_HI - _K_LO + 1

PERCENTILE_TABLE = (50.0, 90.0, 99.0, 99.9, 99.99, 100.0)


def _bin_upper(k: int) -> float:
    return 2.0 ** (k / BINS_PER_OCTAVE)


@dataclass
class SiteStats:
    min: float = math.inf
    max: float = -math.inf
    count: int = 0
    zeros: int = 0
    hist: np.ndarray = field(default_factory=lambda: np.zeros(_NBINS, dtype=np.int64))

    def observe(self, x: np.ndarray) -> None:
        x = np.asarray(x)
        if x.size == 0:
            return
        if not np.all(np.isfinite(x)):
            raise InvalidRangeError("non-finite activation observed")
        self.min = min(self.min, float(x.min()))
        self.max = max(self.max, float(x.max()))
        self.count += int(x.size)
        a = np.abs(x.astype(np.float64, copy=False)).ravel()
        nz = a[a > 0]
        self.zeros += int(a.size - nz.size)
        if nz.size:
            k = np.ceil(np.log2(nz) * BINS_PER_OCTAVE).astype(np.int64)
            np.clip(k, _K_LO, _K_HI, out=k)
            self.hist += np.bincount(k - _K_LO, minlength=_NBINS)

    def merged(self, other: "SiteStats") -> "SiteStats":
        return SiteStats(
            min(self.min, other.min),
            max(self.max, other.max),
            self.count + other.count,
            self.zeros + other.zeros,
            self.hist + other.hist,
        )

    def abs_percentile(self, p: float) -> float:
        """Upper bound on the ``p``-th percentile of ``|x|`` (exact at p=100)."""
        if not 0 < p <= 100:
            raise ValueError("percentile must be in (0, 100]")
        amax = max(abs(self.min), abs(self.max))
        if p == 100 or self.count == 0:
            return amax
        need = math.ceil(p / 100.0 * self.count)
        if need <= self.zeros:
            return 0.0
        cum = np.cumsum(self.hist) + self.zeros
        k = int(np.searchsorted(cum, need)) + _K_LO
        return min(_bin_upper(k), amax)

    def range(self, method: str = "minmax") -> tuple[float, float]:
        if self.count == 0:
            raise InvalidRangeError("site observed no values")
        kind, p = parse_method(method)
        if kind == "minmax":
            return self.min, self.max
        a = self.abs_percentile(p)
        return max(self.min, -a), min(self.max, a)

    def to_dict(self) -> dict:
        nz = np.nonzero(self.hist)[0]
        return {
            "min": self.min,
            "max": self.max,
            "count": self.count,
            "zeros": self.zeros,
            "hist": [[int(i + _K_LO), int(self.hist[i])] for i in nz],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SiteStats":
        s = cls(float(d["min"]), float(d["max"]), int(d["count"]), int(d["zeros"]))
        for k, c in d["hist"]:
            s.hist[int(k) - _K_LO] = int(c)
        return s

    def __eq__(self, other):
        if not isinstance(other, SiteStats):
            return NotImplemented
        return (self.min, self.max, self.count, self.zeros) == (other.min, other.max, other.count, other.zeros) and np.array_equal(self.hist, other.hist)


def parse_method(method: str) -> tuple[str, float]:
    """``"minmax"`` or ``"percentile:P"`` / ``"percentile(P)"`` with 0 < P <= 100."""
    m = method.strip().lower()
    if m == "minmax":
        return "minmax", 100.0
    if m.startswith("percentile"):
        arg = m[len("percentile"):].strip(":()")
        try:
            p = float(arg)
        except ValueError:
            raise ValueError(f"bad percentile method {method!r}") from None
        if not 0 < p <= 100:
            raise ValueError(f"percentile must be in (0, 100], got {p}")
        return "percentile", p
    raise ValueError(f"unknown calibration method {method!r}")


class RangeBook:
    """Mapping of site id to :class:`SiteStats`; doubles as a runtime recorder."""

    def __init__(self, sites: dict[str, SiteStats] | None = None, method: str = "minmax"):
        parse_method(method)
        self.sites: dict[str, SiteStats] = dict(sites or {})
        self.method = method

    def observe(self, site: str, x: np.ndarray) -> None:
        if np.size(x):
            self.sites.setdefault(site, SiteStats()).observe(x)

    def merge(self, other: "RangeBook") -> "RangeBook":
        if parse_method(self.method) != parse_method(other.method):
            raise ValueError(f"cannot merge books calibrated with {self.method!r} and {other.method!r}")
        out = {k: v for k, v in self.sites.items()}
        for k, v in other.sites.items():
            out[k] = out[k].merged(v) if k in out else v
        return RangeBook(out, self.method)

    def __contains__(self, site):
        return site in self.sites

    def __getitem__(self, site) -> SiteStats:
        return self.sites[site]

    def __len__(self):
        return len(self.sites)

    def __eq__(self, other):
        if not isinstance(other, RangeBook):
            return NotImplemented
        return self.sites == other.sites and parse_method(self.method) == parse_method(other.method)

    def ranges(self, method: str | None = None, sites=None) -> dict[str, tuple[float, float]]:
        """Per-site ``(lo, hi)`` under ``method`` (default: the book's own)."""
        method = method or self.method
        names = sorted(self.sites) if sites is None else list(sites)
        missing = [s for s in names if s not in self.sites]
        if missing:
            raise CompletenessError(missing)
        return {s: self.sites[s].range(method) for s in names}

    def summary(self) -> dict[str, dict]:
        """Per-site min/max plus the standard |x| percentile table."""
        return {
            s: {
                "min": st.min,
                "max": st.max,
                "count": st.count,
                "abs_percentiles": {str(p): st.abs_percentile(p) for p in PERCENTILE_TABLE},
            }
            for s, st in sorted(self.sites.items())
        }

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "bins_per_octave": BINS_PER_OCTAVE,
            "method": self.method,
            "sites": {k: self.sites[k].to_dict() for k in sorted(self.sites)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RangeBook":
        if d.get("schema_version") != 1 or d.get("bins_per_octave") != BINS_PER_OCTAVE:
            raise FormatError("unsupported range book schema")
        return cls({k: SiteStats.from_dict(v) for k, v in d["sites"].items()}, d.get("method", "minmax"))
