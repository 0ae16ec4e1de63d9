"""Execution hooks threaded through every forward pass.

Model code never decides *how* it is being run. It calls ``rt.act(site, x)``
at every activation quantization site, ``rt.linear`` for every dense
projection and the ``rt.count_*`` methods for traffic accounting. A plain
:class:`Runtime` is the float reference path. Attaching a range recorder,
frozen activation params or a traffic ledger turns the same code into
calibration, simulated-quantization or instrumented execution.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import CompletenessError
from .qtensor import QuantParams, fake_quant


def tensor_bytes(numel: int, bits: int) -> int:
    """Storage bytes of ``numel`` codes at ``bits`` each, rounded up to a byte."""
    return -(-numel * bits // 8)


class Runtime:
    """Float reference runtime with optional hooks.

    Args:
        act_params: frozen per-site params; every ``act`` call fake-quantizes
            through them and a missing site raises :class:`CompletenessError`.
        recorder: object with ``observe(site, x)``, fed the float value at
            every site (before any fake-quant).
        ledger: a :class:`~npuvlm.perf.TrafficLedger`-like object receiving
            counts.
        exact: compute dense projections one row at a time so every output
            row is bitwise independent of how many rows were batched together.
    """

    def __init__(
        self,
        *,
        act_params: Mapping[str, QuantParams] | None = None,
        recorder=None,
        ledger=None,
        exact: bool = False,
    ):
        self.act_params = act_params
        self.recorder = recorder
        self.ledger = ledger
        self.exact = exact

    def act(self, site: str, x: np.ndarray) -> np.ndarray:
        if self.recorder is not None:
            self.recorder.observe(site, x)
        if self.act_params is not None:
            try:
                p = self.act_params[site]
            except KeyError:
                raise CompletenessError([site]) from None
            return fake_quant(x, p)
        return x

    def linear(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """``x @ w.T`` over the last axis of ``x``; ``w`` is ``(out, in)``."""
        if not self.exact:
            return x @ w.T
        lead = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1])
        out = np.empty((flat.shape[0], w.shape[0]), dtype=np.result_type(x, w))
        for i in range(flat.shape[0]):
            out[i] = w @ flat[i]
        return out.reshape(*lead, w.shape[0])

    # traffic hooks; no-ops unless a ledger is attached

    def count_weight_op(self, layer: str, op: str, name: str, numel: int, macs: int) -> None:
        if self.ledger is not None:
            self.ledger.weight_op(layer, op, name, numel, macs)

    def count_macs(self, layer: str, op: str, macs: int) -> None:
        if self.ledger is not None:
            self.ledger.add(layer, op, macs=macs)

    def count_cache(self, layer: str, op: str, read_elems: int, write_elems: int) -> None:
        if self.ledger is not None:
            self.ledger.cache_io(layer, op, read_elems, write_elems)

    def count_activation(self, layer: str, op: str, numel: int) -> None:
        if self.ledger is not None:
            self.ledger.activation(layer, op, numel)


FLOAT = Runtime()
