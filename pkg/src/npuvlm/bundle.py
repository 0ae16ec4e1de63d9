"""Model bundle and raw-tensor file formats.

Bundle layout (all integers little-endian)::

    offset 0   4 bytes   magic b"ANRL"
    offset 4   u32       format version (1)
    offset 8   u64       header length H in bytes
    offset 16  H bytes   header: UTF-8 JSON, sorted keys, no whitespace
    offset 16+H          payload

The header holds the model kind and config, the seed, the tensor table, the
frozen activation params and precision plan of a quantized model, and the
CRC32 of the payload. Each tensor-table entry gives ``name``, ``dtype``,
``shape``, ``offset`` (from the payload start), ``nbytes`` and, for integer
tensors, ``quant`` params. Tensors are stored in name order, each starting
on a 16-byte boundary, padding bytes zero.

Tensor dtypes:

* ``f32``: IEEE float32, little-endian, C order;
* ``i8`` / ``i16``: two's complement, little-endian, C order;
* ``i4``: two's-complement nibbles in C order, two per byte, element ``2j``
  in the low nibble of byte ``j`` and ``2j+1`` in the high nibble; an odd
  count leaves the final high nibble zero.

Raw-tensor input files are ``u32 rank``, ``rank`` x ``u32`` dims, then the
float32 payload, all little-endian.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .qtensor import QTensor, QuantParams, dequantize

MAGIC = b"ANRL"
VERSION = 1
ALIGN = 16
_PREFIX = struct.Struct("<4sIQ")
_BITS_DTYPE = {4: "i4", 8: "i8", 16: "i16"}
_DTYPE_BITS = {v: k for k, v in _BITS_DTYPE.items()}


@dataclass
class Bundle:
    """In-memory bundle contents.

    ``tensors`` maps names to float32 arrays or :class:`QTensor`. A bundle is
    quantized when ``act_params`` is not ``None``.
    """

    kind: str
    config: dict
    seed: int | None
    tensors: dict
    act_params: dict[str, QuantParams] | None = None
    plan: dict | None = None
    method: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def quantized(self) -> bool:
        return self.act_params is not None

    def float_weights(self) -> dict[str, np.ndarray]:
        return {k: dequantize(v) if isinstance(v, QTensor) else v for k, v in self.tensors.items()}


def _encode_tensor(t) -> tuple[str, bytes, dict | None]:
    if isinstance(t, QTensor):
        p = t.params
        if not p.symmetric or p.bits not in _BITS_DTYPE:
            raise FormatError(f"unsupported stored tensor params {p}")
        return _BITS_DTYPE[p.bits], t.packed(), p.to_dict()
    a = np.asarray(t)
    if a.dtype != np.float32:
        raise FormatError(f"float tensors must be float32, got {a.dtype}")
    return "f32", np.ascontiguousarray(a).astype("<f4").tobytes(), None


def dumps(b: Bundle) -> bytes:
    table = []
    chunks = []
    off = 0
    for name in sorted(b.tensors):
        t = b.tensors[name]
        dtype, data, quant = _encode_tensor(t)
        pad = (-off) % ALIGN
        chunks.append(b"\0" * pad)
        off += pad
        entry = {"name": name, "dtype": dtype, "shape": list(np.shape(t) if not isinstance(t, QTensor) else t.shape),
                 "offset": off, "nbytes": len(data)}
        if quant is not None:
            entry["quant"] = quant
        table.append(entry)
        chunks.append(data)
        off += len(data)
    payload = b"".join(chunks)
    header = {
        "kind": b.kind,
        "config": b.config,
        "seed": b.seed,
        "tensors": table,
        "activation_params": None if b.act_params is None else {k: v.to_dict() for k, v in sorted(b.act_params.items())},
        "plan": b.plan,
        "calibration_method": b.method,
        "extra": b.extra,
        "payload_nbytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(hjson)) + hjson + payload


def loads(data: bytes) -> Bundle:
    if len(data) < _PREFIX.size:
        raise FormatError("file too short for a bundle")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("not a bundle (bad magic)")
    if version != VERSION:
        raise FormatError(f"unsupported bundle version {version}")
    start = _PREFIX.size + hlen
    if start > len(data):
        raise FormatError("truncated bundle header")
    try:
        header = json.loads(data[_PREFIX.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt bundle header: {e}") from None
    payload = data[start:]
    if len(payload) != header["payload_nbytes"]:
        raise FormatError("payload size does not match header")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise FormatError("payload checksum mismatch")
    tensors = {}
    end = 0
    for e in sorted(header["tensors"], key=lambda e: e["offset"]):
        off, nb, shape = e["offset"], e["nbytes"], tuple(e["shape"])
        if off < end or off + nb > len(payload):
            raise FormatError(f"tensor {e['name']} overlaps or exceeds the payload")
        end = off + nb
        raw = payload[off:off + nb]
        count = int(np.prod(shape, dtype=np.int64))
        if e["dtype"] == "f32":
            if nb != 4 * count:
                raise FormatError(f"tensor {e['name']}: size mismatch")
            tensors[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        elif e["dtype"] in _DTYPE_BITS:
            p = QuantParams.from_dict(e["quant"])
            if p.bits != _DTYPE_BITS[e["dtype"]]:
                raise FormatError(f"tensor {e['name']}: dtype and params disagree")
            if nb != -(-count * p.bits // 8):
                raise FormatError(f"tensor {e['name']}: size mismatch")
            tensors[e["name"]] = QTensor.from_packed(raw, shape, p)
        else:
            raise FormatError(f"tensor {e['name']}: unknown dtype {e['dtype']!r}")
    ap = header.get("activation_params")
    return Bundle(
        header["kind"], header["config"], header.get("seed"), tensors,
        None if ap is None else {k: QuantParams.from_dict(v) for k, v in ap.items()},
        header.get("plan"), header.get("calibration_method"), header.get("extra") or {},
    )


def save(b: Bundle, path) -> bytes:
    data = dumps(b)
    Path(path).write_bytes(data)
    return data


def load(path) -> Bundle:
    return loads(Path(path).read_bytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: too short")
    (rank,) = struct.unpack_from("<I", data)
    head = 4 + 4 * rank
    if rank > 8 or len(data) < head:
        raise FormatError(f"{path}: bad rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", data, 4)
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) != head + 4 * count:
        raise FormatError(f"{path}: payload holds {len(data) - head} bytes, expected {4 * count}")
    return np.frombuffer(data, dtype="<f4", offset=head).reshape(dims).astype(np.float32)


def write_tensor(path, a: np.ndarray) -> None:
    a = np.ascontiguousarray(a, dtype="<f4")
    Path(path).write_bytes(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape) + a.tobytes())
