"""Byte-traffic and MAC accounting with a roofline latency model.

A :class:`TrafficLedger` attached to a :class:`~npuvlm.runtime.Runtime`
receives counts from the model code as it runs. Counters are integers keyed
by ``(phase, layer, op)`` and only ever grow.

Accounting rules:

* a weight tensor is read from DRAM each time an op uses it, unless weights
  are declared resident on chip;
* KV-cache and rolling-state reads and writes always go to DRAM;
* an activation produced between ops stays on chip when it fits in the
  on-chip buffer, otherwise it is written out and read back once.
"""

from __future__ import annotations

import csv
import io
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from typing import Callable, Mapping

import numpy as np

from .backbone import BackboneConfig, DecodeSession, decode_step, embed_tokens, layer_prefix, new_session, prefill
from .runtime import Runtime, tensor_bytes

PHASES = ("vision", "prefill", "decode")


@dataclass
class OpCounts:
    bytes_read: int = 0
    bytes_written: int = 0
    macs: int = 0
    onchip_bytes: int = 0

    def add(self, other: "OpCounts") -> None:
        self.bytes_read += other.bytes_read
        self.bytes_written += other.bytes_written
        self.macs += other.macs
        self.onchip_bytes += other.onchip_bytes

    @property
    def dram_bytes(self) -> int:
        return self.bytes_read + self.bytes_written


@dataclass(frozen=True)
class HardwareProfile:
    peak_macs_per_s: float = 4.0e12
    dram_bytes_per_s: float = 16.0e9
    onchip_buffer_bytes: int = 4 * 1024 * 1024

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name}: must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HardwareProfile":
        return cls(float(d["peak_macs_per_s"]), float(d["dram_bytes_per_s"]), int(d["onchip_buffer_bytes"]))


def _bits_lookup(weight_bits) -> Callable[[str], int]:
    if callable(weight_bits):
        return weight_bits
    if isinstance(weight_bits, Mapping):
        return weight_bits.__getitem__
    b = int(weight_bits)
    return lambda name: b


class TrafficLedger:
    """Monotone per-(phase, layer, op) counters.

    Args:
        weight_bits: bits per weight element; an int, a ``name -> bits``
            mapping or a callable.
        act_bytes: bytes per activation and cache element.
        weights_resident: weights live on chip and cost no DRAM reads.
        onchip_buffer_bytes: activations larger than this spill to DRAM;
            ``None`` keeps every activation on chip.
    """

    def __init__(self, weight_bits=16, act_bytes: int = 2, weights_resident: bool = False,
                 onchip_buffer_bytes: int | None = None):
        self._bits = _bits_lookup(weight_bits)
        self.act_bytes = int(act_bytes)
        self.weights_resident = bool(weights_resident)
        self.onchip_buffer_bytes = onchip_buffer_bytes
        self.current_phase = "prefill"
        self.entries: dict[tuple[str, str, str], OpCounts] = {}
        self.decode_steps = 0

    @contextmanager
    def phase(self, name: str):
        prev, self.current_phase = self.current_phase, name
        try:
            yield self
        finally:
            self.current_phase = prev

    def _entry(self, layer: str, op: str) -> OpCounts:
        return self.entries.setdefault((self.current_phase, layer, op), OpCounts())

    def add(self, layer: str, op: str, *, bytes_read: int = 0, bytes_written: int = 0, macs: int = 0,
            onchip_bytes: int = 0) -> None:
        if min(bytes_read, bytes_written, macs, onchip_bytes) < 0:
            raise ValueError("ledger counters only increase")
        self._entry(layer, op).add(OpCounts(int(bytes_read), int(bytes_written), int(macs), int(onchip_bytes)))

    def weight_op(self, layer: str, op: str, name: str, numel: int, macs: int) -> None:
        nbytes = tensor_bytes(int(numel), self._bits(name))
        if self.weights_resident:
            self.add(layer, op, macs=macs, onchip_bytes=nbytes)
        else:
            self.add(layer, op, bytes_read=nbytes, macs=macs)

    def cache_io(self, layer: str, op: str, read_elems: int, write_elems: int) -> None:
        self.add(layer, op, bytes_read=read_elems * self.act_bytes, bytes_written=write_elems * self.act_bytes)

    def activation(self, layer: str, op: str, numel: int) -> None:
        nbytes = int(numel) * self.act_bytes
        if self.onchip_buffer_bytes is not None and nbytes > self.onchip_buffer_bytes:
            self.add(layer, op, bytes_read=nbytes, bytes_written=nbytes)
        else:
            self.add(layer, op, onchip_bytes=nbytes)

    def totals(self, phase: str | None = None, layer_prefix_: str | None = None, op: str | None = None) -> OpCounts:
        out = OpCounts()
        for (ph, layer, o), c in self.entries.items():
            if phase is not None and ph != phase:
                continue
            if layer_prefix_ is not None and not (layer == layer_prefix_ or layer.startswith(layer_prefix_ + ".")):
                continue
            if op is not None and o != op:
                continue
            out.add(c)
        return out

    def by_layer(self, phase: str | None = None) -> dict[str, OpCounts]:
        out: dict[str, OpCounts] = {}
        for (ph, layer, _), c in sorted(self.entries.items()):
            if phase is None or ph == phase:
                out.setdefault(layer, OpCounts()).add(c)
        return out

    def phases(self) -> list[str]:
        return sorted({k[0] for k in self.entries})

    def merge(self, other: "TrafficLedger") -> "TrafficLedger":
        out = TrafficLedger(self._bits, self.act_bytes, self.weights_resident, self.onchip_buffer_bytes)
        for src in (self, other):
            for k, c in src.entries.items():
                out.entries.setdefault(k, OpCounts()).add(c)
        out.decode_steps = self.decode_steps + other.decode_steps
        return out

    def to_dict(self) -> dict:
        return {
            "decode_steps": self.decode_steps,
            "entries": [
                {"phase": ph, "layer": layer, "op": op, **asdict(c)}
                for (ph, layer, op), c in sorted(self.entries.items())
            ],
            "totals": {ph: asdict(self.totals(ph)) for ph in self.phases()},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phase", "layer", "op", "bytes_read", "bytes_written", "macs", "onchip_bytes"])
        for (ph, layer, op), c in sorted(self.entries.items()):
            w.writerow([ph, layer, op, c.bytes_read, c.bytes_written, c.macs, c.onchip_bytes])
        return buf.getvalue()


def roofline_seconds(macs: int, dram_bytes: int, hw: HardwareProfile) -> float:
    return max(macs / hw.peak_macs_per_s, dram_bytes / hw.dram_bytes_per_s)


def roofline_latency(ledger: TrafficLedger, hw: HardwareProfile) -> dict[str, float]:
    """Latency lower bound per phase; decode is reported per step."""
    out = {}
    for ph in ledger.phases():
        t = ledger.totals(ph)
        s = roofline_seconds(t.macs, t.dram_bytes, hw)
        if ph == "decode":
            out["decode_per_step"] = s / ledger.decode_steps if ledger.decode_steps else 0.0
        else:
            out[ph] = s
    return out


# analytic decode accounting


def _weight_bytes(name: str, numel: int, bits) -> int:
    return tensor_bytes(numel, _bits_lookup(bits)(name))


def decode_step_traffic(cfg: BackboneConfig, position: int, act_bytes: int = 2, weight_bits=16,
                        weights_resident: bool = False, prefix: str = "lm") -> dict[str, OpCounts]:
    """Closed-form DRAM traffic and MACs of one decode step at ``position``.

    ``position`` is the number of tokens already cached. Keys are layer ids as
    used by the instrumented model (``lm.embed``, ``lm.layers.{i}``,
    ``lm.head``).
    """
    if position < 0:
        raise ValueError("position must be >= 0")
    d, f, k = cfg.d_model, cfg.ffn_inner, cfg.conv_kernel
    hq = cfg.n_heads * cfg.head_dim
    out: dict[str, OpCounts] = {}

    def weights(layer: str, tensors: list[tuple[str, int, int]]) -> OpCounts:
        c = OpCounts()
        for name, numel, macs in tensors:
            nb = _weight_bytes(name, numel, weight_bits)
            if weights_resident:
                c.onchip_bytes += nb
            else:
                c.bytes_read += nb
            c.macs += macs
        out[layer] = c
        return c

    weights(f"{prefix}.embed", [(f"{prefix}.embed", d, 0)])
    for i, kind in enumerate(cfg.layer_pattern):
        p = layer_prefix(i, prefix)
        ts = [(f"{p}.norm1", d, 0)]
        if kind == "C":
            ts += [(f"{p}.conv.in_proj.w", 2 * d * d, 2 * d * d), (f"{p}.conv.kernel", d * k, d * k),
                   (f"{p}.conv.out_proj.w", d * d, d * d)]
        else:
            ts += [(f"{p}.attn.q.w", hq * d, hq * d), (f"{p}.attn.k.w", cfg.kv_dim * d, cfg.kv_dim * d),
                   (f"{p}.attn.v.w", cfg.kv_dim * d, cfg.kv_dim * d), (f"{p}.attn.o.w", d * hq, d * hq)]
        ts += [(f"{p}.norm2", d, 0)] + [(f"{p}.ffn.{o}.w", f * d, f * d) for o in ("gate", "up", "down")]
        c = weights(p, ts)
        if kind == "C":
            state = (k - 1) * d * act_bytes
            c.bytes_read += state
            c.bytes_written += state
        else:
            c.bytes_read += 2 * position * cfg.kv_dim * act_bytes
            c.bytes_written += 2 * cfg.kv_dim * act_bytes
            c.macs += 2 * hq * (position + 1)
    head_w = f"{prefix}.embed" if cfg.tie_embeddings else f"{prefix}.head.w"
    weights(f"{prefix}.head", [(f"{prefix}.final_norm", d, 0), (head_w, cfg.vocab_size * d, cfg.vocab_size * d)])
    return out


def kv_read_bytes(cfg: BackboneConfig, position: int, act_bytes: int = 2) -> int:
    """KV-cache bytes read by one decode step at ``position``."""
    return cfg.n_attn * 2 * position * cfg.kv_dim * act_bytes


def pure_attention_config(cfg: BackboneConfig) -> BackboneConfig:
    """The all-attention stack at the same depth and dimensions."""
    return cfg.with_(layer_pattern="A" * cfg.n_layers)


def decode_reduction(cfg: BackboneConfig, position: int, act_bytes: int = 2, weight_bits=16,
                     weights_resident: bool = False) -> dict[str, float]:
    """Decode-step traffic of ``cfg`` relative to its pure-attention twin.

    ``kv_only`` compares KV-cache reads alone; ``cache`` adds conv state
    traffic; ``total`` is all DRAM bytes including weights.
    """
    pure = pure_attention_config(cfg)
    hy = decode_step_traffic(cfg, position, act_bytes, weight_bits, weights_resident)
    pu = decode_step_traffic(pure, position, act_bytes, weight_bits, weights_resident)
    kv_h, kv_p = kv_read_bytes(cfg, position, act_bytes), kv_read_bytes(pure, position, act_bytes)
    state = cfg.n_conv * 2 * (cfg.conv_kernel - 1) * cfg.d_model * act_bytes
    kv_w = 2 * cfg.kv_dim * act_bytes
    cache_h = kv_h + cfg.n_attn * kv_w + state
    cache_p = kv_p + pure.n_attn * kv_w
    tot_h = sum(c.dram_bytes for c in hy.values())
    tot_p = sum(c.dram_bytes for c in pu.values())

    def red(a, b):
        return 1.0 - a / b if b else 0.0

    return {
        "position": position,
        "kv_read_bytes": kv_h,
        "kv_read_bytes_pure": kv_p,
        "kv_only": red(kv_h, kv_p),
        "cache": red(cache_h, cache_p),
        "total": red(tot_h, tot_p),
    }


# instrumented runs


def instrumented_decode(cfg: BackboneConfig, weights, prompt_len: int, steps: int, ledger: TrafficLedger,
                        act_params=None, seed: int = 0) -> DecodeSession:
    """Prefill ``prompt_len`` random embeddings, then ``steps`` decode steps
    feeding greedy tokens back, counting into ``ledger``."""
    rng = np.random.default_rng(seed)
    sess = new_session(cfg, weights, Runtime(ledger=ledger, act_params=act_params))
    tok = 0
    if prompt_len:
        with ledger.phase("prefill"):
            logits, _ = prefill(rng.standard_normal((prompt_len, cfg.d_model)).astype(np.float32), sess)
        tok = int(np.argmax(logits[-1]))
    with ledger.phase("decode"):
        for _ in range(steps):
            logits, _ = decode_step(embed_tokens([tok], sess)[0], sess)
            tok = int(np.argmax(logits))
            ledger.decode_steps += 1
    return sess


def instrumented_run(model, inputs, ledger: TrafficLedger, decode_steps: int = 0, rt_kwargs=None) -> TrafficLedger:
    """Run ``model`` over ``inputs`` with ``ledger`` attached.

    Encoders count under phase ``vision``. A VLM counts its encoder and
    connector under ``vision``, the prompt under ``prefill`` and each of
    ``decode_steps`` greedy steps under ``decode``.
    """
    rt = Runtime(ledger=ledger, **(rt_kwargs or {}))
    for x in inputs:
        if model.kind != "vlm":
            with ledger.phase("vision"):
                model.stages(x, rt)
            continue
        with ledger.phase("vision"):
            tokens = model.encode(np.asarray(x.image)[None], rt)[0]
            vis = model.connect(tokens, rt)
        sess = model.new_session(rt)
        with ledger.phase("prefill"):
            text = embed_tokens(list(x.text_ids), sess) if x.text_ids else np.zeros((0, vis.shape[1]), np.float32)
            logits, _ = prefill(np.concatenate([vis, text]), sess)
        tok = int(np.argmax(logits[-1]))
        with ledger.phase("decode"):
            for _ in range(decode_steps):
                logits, _ = decode_step(embed_tokens([tok], sess)[0], sess)
                tok = int(np.argmax(logits))
                ledger.decode_steps += 1
    return ledger
