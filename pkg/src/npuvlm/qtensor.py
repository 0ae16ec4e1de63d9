"""Per-tensor affine quantization, INT4 nibble packing and error metrics.

Float tensors are plain ``numpy.float32`` arrays. The quantized domain is a
:class:`QTensor`: an integer payload plus the :class:`QuantParams` that map it
back to reals via ``x = (q - zero_point) * scale``.

Rounding is round-half-to-even everywhere (``numpy.rint``). Symmetric grids
drop the most negative code, so an 8-bit symmetric tensor spans [-127, 127].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidRangeError, ShapeError, UndefinedSignalError

SUPPORTED_BITS = (4, 8, 16)


def qrange(bits: int, symmetric: bool) -> tuple[int, int]:
    """Return the inclusive integer range ``(qmin, qmax)`` for a grid."""
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    if symmetric:
        hi = 2 ** (bits - 1) - 1
        return -hi, hi
    return 0, 2**bits - 1


def storage_dtype(bits: int, symmetric: bool) -> np.dtype:
    """Smallest numpy integer dtype holding every code of the grid."""
    if bits <= 8:
        return np.dtype(np.int8 if symmetric else np.uint8)
    return np.dtype(np.int16 if symmetric else np.uint16)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int
    symmetric: bool

    def __post_init__(self):
        qmin, qmax = qrange(self.bits, self.symmetric)
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise InvalidRangeError(f"scale must be positive and finite, got {self.scale}")
        if self.symmetric and self.zero_point != 0:
            raise InvalidRangeError("symmetric params require zero_point == 0")
        if not qmin <= self.zero_point <= qmax:
            raise InvalidRangeError(
                f"zero_point {self.zero_point} outside [{qmin}, {qmax}]"
            )

    @property
    def qmin(self) -> int:
        return qrange(self.bits, self.symmetric)[0]

    @property
    def qmax(self) -> int:
        return qrange(self.bits, self.symmetric)[1]

    def to_dict(self) -> dict:
        return {
            "scale": float(self.scale),
            "zero_point": int(self.zero_point),
            "bits": int(self.bits),
            "symmetric": bool(self.symmetric),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(float(d["scale"]), int(d["zero_point"]), int(d["bits"]), bool(d["symmetric"]))


@dataclass(frozen=True, eq=False)
class QTensor:
    """Integer payload with its affine parameters.

    4-bit payloads are held one code per ``int8``/``uint8`` element in memory;
    :meth:`packed` produces the two-per-byte storage form.
    """

    qdata: np.ndarray
    params: QuantParams

    def __post_init__(self):
        raw = np.asarray(self.qdata)
        if raw.size and (int(raw.min()) < self.params.qmin or int(raw.max()) > self.params.qmax):
            raise InvalidRangeError("stored integer outside the grid of its params")
        q = raw.astype(storage_dtype(self.params.bits, self.params.symmetric))
        q.setflags(write=False)
        object.__setattr__(self, "qdata", q)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.qdata.shape

    def packed(self) -> bytes:
        """Storage bytes: nibble-packed for 4 bits, little-endian otherwise."""
        if self.params.bits == 4:
            return pack_int4(self.qdata.ravel(), signed=self.params.symmetric)
        return self.qdata.astype(self.qdata.dtype.newbyteorder("<"), copy=False).tobytes()

    @classmethod
    def from_packed(cls, data: bytes, shape, params: QuantParams) -> "QTensor":
        count = int(np.prod(shape, dtype=np.int64))
        dtype = storage_dtype(params.bits, params.symmetric)
        if params.bits == 4:
            vals = unpack_int4(data, count, signed=params.symmetric).astype(dtype)
        else:
            vals = np.frombuffer(data, dtype=dtype.newbyteorder("<"), count=count).astype(dtype)
        return cls(vals.reshape(shape), params)

    def __eq__(self, other):
        if not isinstance(other, QTensor):
            return NotImplemented
        return self.params == other.params and np.array_equal(self.qdata, other.qdata)

    __hash__ = None


def compute_quant_params(min_val: float, max_val: float, bits: int, symmetric: bool) -> QuantParams:
    """Per-tensor params covering ``[min_val, max_val]``.

    A range that is exactly ``(0, 0)`` yields ``scale=1, zero_point=0`` so that
    dead tensors still have usable params.
    """
    min_val, max_val = float(min_val), float(max_val)
    if not (math.isfinite(min_val) and math.isfinite(max_val)):
        raise InvalidRangeError("calibration range must be finite")
    if min_val > max_val:
        raise InvalidRangeError(f"min {min_val} > max {max_val}")
    qmin, qmax = qrange(bits, symmetric)
    if symmetric:
        amax = max(abs(min_val), abs(max_val))
        if amax == 0.0:
            return QuantParams(1.0, 0, bits, True)
        return QuantParams(amax / qmax, 0, bits, True)
    span = max_val - min_val
    if span == 0.0:
        if min_val == 0.0:
            return QuantParams(1.0, 0, bits, False)
        # constant non-zero tensor: keep the value representable with zero included
        span = abs(min_val)
        min_val, max_val = min(min_val, 0.0), max(max_val, 0.0)
    scale = span / (2**bits - 1)
    zp = int(np.clip(np.rint(-min_val / scale), qmin, qmax))
    return QuantParams(scale, zp, bits, False)


def quantize(t: np.ndarray, p: QuantParams) -> QTensor:
    x = np.asarray(t, dtype=np.float64)
    q = np.rint(x / p.scale) + p.zero_point
    q = np.clip(q, p.qmin, p.qmax)
    return QTensor(q.astype(storage_dtype(p.bits, p.symmetric)), p)


def dequantize(q: QTensor) -> np.ndarray:
    p = q.params
    return ((q.qdata.astype(np.float64) - p.zero_point) * p.scale).astype(np.float32)


def fake_quant(t: np.ndarray, p: QuantParams) -> np.ndarray:
    """Quantize then dequantize: the float tensor an integer kernel would see."""
    return dequantize(quantize(t, p))


def pack_int4(values, signed: bool = True) -> bytes:
    """Pack 4-bit codes two per byte, even index in the low nibble.

    Signed codes use two's-complement nibbles over [-8, 7]; unsigned codes span
    [0, 15]. An odd count pads the final high nibble with zero.
    """
    v = np.asarray(values, dtype=np.int64).ravel()
    lo, hi = (-8, 7) if signed else (0, 15)
    if v.size and (v.min() < lo or v.max() > hi):
        raise InvalidRangeError(f"int4 value outside [{lo}, {hi}]")
    nib = (v & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_int4(data: bytes, count: int, signed: bool = True) -> np.ndarray:
    b = np.frombuffer(bytes(data), dtype=np.uint8)
    if 2 * b.size < count or 2 * b.size > count + 1:
        raise ShapeError(f"{b.size} bytes cannot hold exactly {count} nibbles")
    nib = np.empty(2 * b.size, dtype=np.int16)
    nib[0::2] = b & 0xF
    nib[1::2] = b >> 4
    nib = nib[:count]
    if signed:
        nib = np.where(nib >= 8, nib - 16, nib)
    return nib.astype(np.int8 if signed else np.uint8)


def _check_pair(ref, test):
    r = np.asarray(ref, dtype=np.float64)
    t = np.asarray(test, dtype=np.float64)
    if r.shape != t.shape:
        raise ShapeError(f"shape mismatch: {r.shape} vs {t.shape}")
    return r, t


def sqnr_db(ref: np.ndarray, test: np.ndarray) -> float:
    r, t = _check_pair(ref, test)
    signal = float(np.sum(r * r))
    if signal == 0.0:
        raise UndefinedSignalError("reference is all zero")
    noise = float(np.sum((r - t) ** 2))
    if noise == 0.0:
        return math.inf
    return 10.0 * math.log10(signal / noise)


def rms_error_percent(ref: np.ndarray, test: np.ndarray) -> float:
    r, t = _check_pair(ref, test)
    rms_ref = math.sqrt(float(np.mean(r * r))) if r.size else 0.0
    if rms_ref == 0.0:
        raise UndefinedSignalError("reference has zero RMS")
    return 100.0 * math.sqrt(float(np.mean((r - t) ** 2))) / rms_ref


@dataclass(frozen=True)
class ErrorReport:
    sqnr_db: float
    rms_error_percent: float
    max_abs_error: float

    def to_dict(self) -> dict:
        # JSON has no infinity; a perfect match serialises as null
        return {
            "sqnr_db": None if math.isinf(self.sqnr_db) else self.sqnr_db,
            "rms_error_percent": self.rms_error_percent,
            "max_abs_error": self.max_abs_error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorReport":
        s = d["sqnr_db"]
        return cls(math.inf if s is None else float(s), float(d["rms_error_percent"]), float(d["max_abs_error"]))


def error_report(ref: np.ndarray, test: np.ndarray) -> ErrorReport:
    r, t = _check_pair(ref, test)
    return ErrorReport(
        sqnr_db=sqnr_db(r, t),
        rms_error_percent=rms_error_percent(r, t),
        max_abs_error=float(np.max(np.abs(r - t))) if r.size else 0.0,
    )
