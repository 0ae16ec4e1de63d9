"""Run reports: deterministic JSON with a published schema."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import lru_cache
from importlib import resources

import jsonschema
import numpy as np

from .errors import FormatError

SCHEMA_VERSION = 1
PACKAGE_VERSION = "0.1.0"


def clean(obj):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to ``None``."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(clean(obj), sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def timestamp() -> str | None:
    """UTC time from ``SOURCE_DATE_EPOCH`` if set, else ``None`` so reports diff clean."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is None:
        return None
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@lru_cache(maxsize=None)
def schema(name: str) -> dict:
    return json.loads(resources.files("npuvlm.schemas").joinpath(f"{name}.schema.json").read_text())


def validate(obj: dict, name: str) -> None:
    try:
        jsonschema.validate(obj, schema(name))
    except jsonschema.ValidationError as e:
        raise FormatError(f"{name}: {e.message}") from None


@dataclass
class RunReport:
    command: str
    config_digest: str
    metrics: dict
    seed: int | None = None
    timestamp: str | None = field(default_factory=timestamp)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return clean({
            "schema_version": self.schema_version,
            "command": self.command,
            "config_digest": self.config_digest,
            "metrics": self.metrics,
            "provenance": {"seed": self.seed, "timestamp": self.timestamp, "version": PACKAGE_VERSION},
        })

    def to_json(self) -> str:
        d = self.to_dict()
        validate(d, "run_report")
        return canonical_json(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise FormatError(f"unsupported report schema_version {d.get('schema_version')!r}")
        validate(d, "run_report")
        p = d["provenance"]
        return cls(d["command"], d["config_digest"], d["metrics"], p["seed"], p["timestamp"], d["schema_version"])

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise FormatError(f"report is not JSON: {e}") from None

    def __eq__(self, other):
        return isinstance(other, RunReport) and self.to_dict() == other.to_dict()
