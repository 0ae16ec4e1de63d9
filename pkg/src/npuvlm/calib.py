"""Static post-training quantization: calibration, precision plans,
quantized models and quality evaluation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from .errors import CompletenessError, ConfigMismatchError
from .qtensor import ErrorReport, QTensor, QuantParams, compute_quant_params, dequantize, error_report, quantize
from .ranges import RangeBook, parse_method
from .runtime import Runtime

WEIGHT_BITS = (4, 8, 16)
ACT_BITS = (8, 16)


def collect_ranges(model, calib_inputs: Iterable, method: str = "minmax", generate_tokens: int = 0) -> RangeBook:
    """Run the float model over ``calib_inputs`` and record every site.

    ``generate_tokens > 0`` also records a greedy continuation of that many
    tokens per input, so decode-phase activations are covered as well.
    """
    parse_method(method)
    book = RangeBook(method=method)
    rt = Runtime(recorder=book)
    n = 0
    for x in calib_inputs:
        model.stages(x, rt)
        if generate_tokens:
            model.generate(x, generate_tokens, rt)
        n += 1
    if n == 0:
        raise ValueError("calibration set is empty")
    return book


@dataclass(frozen=True)
class ScopePrecision:
    weight_bits: int
    activation_bits: int

    def __post_init__(self):
        if self.weight_bits not in WEIGHT_BITS:
            raise ValueError(f"weight_bits: must be one of {WEIGHT_BITS}, got {self.weight_bits}")
        if self.activation_bits not in ACT_BITS:
            raise ValueError(f"activation_bits: must be one of {ACT_BITS}, got {self.activation_bits}")


def _in_scope(name: str, scope: str) -> bool:
    return name == scope or name.startswith(scope + ".")


@dataclass(frozen=True)
class PrecisionPlan:
    """Bit-width assignment by module scope (name prefix) with per-item overrides.

    Scopes must be disjoint so that every weight and site resolves to exactly
    one assignment. One-dimensional weights (norm gains, biases) are kept at
    ``vector_bits`` because they are negligible in size and feed additions
    rather than integer MACs.
    """

    name: str
    scopes: Mapping[str, ScopePrecision] = field(default_factory=dict)
    weight_overrides: Mapping[str, int] = field(default_factory=dict)
    site_overrides: Mapping[str, int] = field(default_factory=dict)
    vector_bits: int = 16

    def __post_init__(self):
        names = sorted(self.scopes)
        for a in names:
            for b in names:
                if a != b and _in_scope(b, a):
                    raise ValueError(f"scopes overlap: {a!r} contains {b!r}")
        for k, v in self.weight_overrides.items():
            if v not in WEIGHT_BITS:
                raise ValueError(f"weight override {k}: bits must be one of {WEIGHT_BITS}")
        for k, v in self.site_overrides.items():
            if v not in ACT_BITS:
                raise ValueError(f"site override {k}: bits must be one of {ACT_BITS}")
        if self.vector_bits not in WEIGHT_BITS:
            raise ValueError("vector_bits: must be one of (4, 8, 16)")

    def _scope(self, name: str) -> ScopePrecision | None:
        for s, p in self.scopes.items():
            if _in_scope(name, s):
                return p
        return None

    def weight_bits(self, name: str, ndim: int = 2) -> int | None:
        if name in self.weight_overrides:
            return self.weight_overrides[name]
        p = self._scope(name)
        if p is None:
            return None
        return self.vector_bits if ndim <= 1 else p.weight_bits

    def activation_bits(self, site: str) -> int | None:
        if site in self.site_overrides:
            return self.site_overrides[site]
        p = self._scope(site)
        return None if p is None else p.activation_bits

    def resolve(self, weights: Mapping[str, np.ndarray], sites: Iterable[str]) -> tuple[dict[str, int], dict[str, int]]:
        """Bits for every weight and site; raises naming anything uncovered."""
        wb = {k: self.weight_bits(k, np.ndim(v)) for k, v in weights.items()}
        ab = {s: self.activation_bits(s) for s in sites}
        missing = [k for k, v in wb.items() if v is None] + [s for s, v in ab.items() if v is None]
        if missing:
            raise CompletenessError(missing)
        return wb, ab

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "scopes": {k: {"weight_bits": v.weight_bits, "activation_bits": v.activation_bits}
                       for k, v in sorted(self.scopes.items())},
            "weight_overrides": dict(sorted(self.weight_overrides.items())),
            "site_overrides": dict(sorted(self.site_overrides.items())),
            "vector_bits": self.vector_bits,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrecisionPlan":
        return cls(
            d.get("name", "custom"),
            {k: ScopePrecision(int(v["weight_bits"]), int(v["activation_bits"])) for k, v in d.get("scopes", {}).items()},
            {k: int(v) for k, v in d.get("weight_overrides", {}).items()},
            {k: int(v) for k, v in d.get("site_overrides", {}).items()},
            int(d.get("vector_bits", 16)),
        )


PRESETS = {
    "paper": ((8, 16), (4, 16)),
    "fp-ref": ((16, 16), (16, 16)),
    "w8a16": ((8, 16), (8, 16)),
    "w4a16": ((4, 16), (4, 16)),
}


def build_precision_plan(scheme: str = "paper", vision_scope=("vision", "connector", "vit"), lm_scope=("lm",),
                         custom: dict | None = None) -> PrecisionPlan:
    """Preset plans assign one precision to the vision scopes and one to the LM scopes.

    ``"paper"`` is W8A16 for vision and connector and W4A16 for the language
    model. ``"custom"`` takes ``custom`` in :meth:`PrecisionPlan.from_dict`
    form; explicit ``weight_overrides`` / ``site_overrides`` maps may stand
    alone without scopes.
    """
    if scheme == "custom":
        if custom is None:
            raise ValueError("custom plan requires a plan mapping")
        return PrecisionPlan.from_dict({"name": "custom", **custom})
    if scheme not in PRESETS:
        raise ValueError(f"unknown plan preset {scheme!r}; expected one of {sorted(PRESETS)} or 'custom'")
    (vw, va), (lw, la) = PRESETS[scheme]
    scopes = {s: ScopePrecision(vw, va) for s in vision_scope}
    scopes.update({s: ScopePrecision(lw, la) for s in lm_scope})
    return PrecisionPlan(scheme, scopes)


def weight_params(w: np.ndarray, bits: int) -> QuantParams:
    """Symmetric per-tensor params from the tensor's own range."""
    return compute_quant_params(float(w.min()), float(w.max()), bits, True)


def activation_params(lo: float, hi: float, bits: int) -> QuantParams:
    """Asymmetric (affine) params spanning exactly the calibrated range."""
    return compute_quant_params(lo, hi, bits, symmetric=False)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


class QuantizedModel:
    """A model executed through simulated quantization.

    The executed weights are ``dequantize(q)`` of the stored codes and every
    activation site is fake-quantized through frozen params.
    """

    def __init__(self, model, plan: PrecisionPlan, qweights: Mapping[str, QTensor],
                 act_params: Mapping[str, QuantParams], method: str = "minmax"):
        self.model = model
        self.plan = plan
        self.method = method
        self.qweights = MappingProxyType(dict(qweights))
        self.act_params = MappingProxyType(dict(act_params))
        self.executed = model.with_weights({k: dequantize(q) for k, q in self.qweights.items()})
        self.runtime = Runtime(act_params=self.act_params)

    @property
    def config(self):
        return self.model.config

    @property
    def kind(self):
        return self.model.kind

    def make_runtime(self, ledger=None, exact: bool = False, recorder=None) -> Runtime:
        return Runtime(act_params=self.act_params, ledger=ledger, exact=exact, recorder=recorder)

    def stages(self, sample, rt: Runtime | None = None):
        return self.executed.stages(sample, rt or self.runtime)

    def generate(self, sample, n_steps: int, rt: Runtime | None = None):
        return self.executed.generate(sample, n_steps, rt or self.runtime)

    def forced_argmax(self, sample, continuation, rt: Runtime | None = None):
        return self.executed.forced_argmax(sample, continuation, rt or self.runtime)

    def params_digest(self) -> str:
        """Hash of all activation params; constant for the model's lifetime."""
        return _digest({k: v.to_dict() for k, v in self.act_params.items()})


def quantize_model(model, plan: PrecisionPlan, book: RangeBook, method: str | None = None) -> QuantizedModel:
    """Quantize weights from their own ranges and freeze activation params from ``book``."""
    sites = model.site_ids()
    wbits, abits = plan.resolve(model.weights, sites)
    method = method or book.method
    ranges = book.ranges(method, sites)
    qw = {k: quantize(w, weight_params(w, wbits[k])) for k, w in sorted(model.weights.items())}
    ap = {s: activation_params(*ranges[s], abits[s]) for s in sites}
    return QuantizedModel(model, plan, qw, ap, method)


@dataclass
class QuantEvalReport:
    n_inputs: int
    stages: dict[str, ErrorReport]
    argmax_agreement: float | None = None
    generation: dict | None = None

    def to_dict(self) -> dict:
        return {
            "n_inputs": self.n_inputs,
            "stages": {k: v.to_dict() for k, v in sorted(self.stages.items())},
            "argmax_agreement": self.argmax_agreement,
            "generation": self.generation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantEvalReport":
        return cls(int(d["n_inputs"]), {k: ErrorReport.from_dict(v) for k, v in d["stages"].items()},
                   d.get("argmax_agreement"), d.get("generation"))


def generation_agreement(float_model, qmodel, inputs, n_tokens: int) -> dict:
    """Compare greedy decoding of ``qmodel`` against ``float_model``.

    ``teacher_forced`` feeds both models the float model's greedy
    continuation and counts positions where the quantized argmax agrees.
    ``free_run_prefix`` is the mean length of the identical prefix when the
    quantized model decodes on its own.
    """
    agree = total = 0
    prefix = []
    for x in inputs:
        ref = float_model.generate(x, n_tokens)
        got = qmodel.forced_argmax(x, ref)
        agree += int(np.sum(np.asarray(ref) == got))
        total += len(ref)
        free = qmodel.generate(x, n_tokens)
        same = 0
        for a, b in zip(ref, free):
            if a != b:
                break
            same += 1
        prefix.append(same)
    return {
        "tokens": total,
        "teacher_forced_agreement": agree / total if total else 1.0,
        "free_run_prefix_mean": float(np.mean(prefix)) if prefix else 0.0,
        "free_run_exact_fraction": float(np.mean([p == n_tokens for p in prefix])) if prefix else 1.0,
    }


def evaluate_quantization(float_model, qmodel, eval_inputs, generate_tokens: int = 0) -> QuantEvalReport:
    """Per-stage error of ``qmodel`` against ``float_model`` over ``eval_inputs``.

    Errors are pooled over all inputs before the metric is taken. For models
    with a ``logits`` stage, ``argmax_agreement`` is the fraction of prompt
    positions whose argmax token matches.
    """
    if float_model.config != qmodel.config or getattr(float_model, "kind", None) != getattr(qmodel, "kind", None):
        raise ConfigMismatchError("float and quantized models have different architectures")
    eval_inputs = list(eval_inputs)
    if not eval_inputs:
        raise ValueError("evaluation set is empty")
    refs: dict[str, list] = {}
    tests: dict[str, list] = {}
    for x in eval_inputs:
        f, q = float_model.stages(x), qmodel.stages(x)
        for k in f:
            refs.setdefault(k, []).append(np.ravel(f[k]))
            tests.setdefault(k, []).append(np.ravel(q[k]))
        if "logits" in f:
            tests.setdefault("_argmax", []).append(np.argmax(f["logits"], -1) == np.argmax(q["logits"], -1))
    stages = {k: error_report(np.concatenate(refs[k]), np.concatenate(tests[k])) for k in refs}
    agreement = float(np.mean(np.concatenate(tests["_argmax"]))) if "_argmax" in tests else None
    gen = generation_agreement(float_model, qmodel, eval_inputs, generate_tokens) if generate_tokens else None
    return QuantEvalReport(len(eval_inputs), stages, agreement, gen)
