import pytest

from npuvlm.calib import QuantEvalReport
from npuvlm.errors import FormatError
from npuvlm.qtensor import error_report
from npuvlm.reports import RunReport, canonical_json, digest, timestamp, validate
import numpy as np


def test_run_report_roundtrip():
    rep = RunReport("eval", digest({"a": 1}), {"x": 1.5, "nested": {"b": [1, 2]}}, seed=3, timestamp=None)
    text = rep.to_json()
    assert RunReport.from_json(text) == rep
    assert text == RunReport.from_json(text).to_json()


def test_canonical_json_sorted_and_deterministic():
    assert canonical_json({"b": 1, "a": 2}).index('"a"') < canonical_json({"b": 1, "a": 2}).index('"b"')
    assert digest({"b": 1, "a": 2}) == digest({"a": 2, "b": 1})


def test_schema_violations():
    rep = RunReport("eval", "0" * 64, {}, timestamp=None).to_dict()
    with pytest.raises(FormatError, match="schema_version"):
        RunReport.from_dict({**rep, "schema_version": 99})
    bad = dict(rep)
    del bad["command"]
    with pytest.raises(FormatError):
        validate(bad, "run_report")
    with pytest.raises(FormatError):
        RunReport.from_json("{not json")


def test_timestamp_from_source_date_epoch(monkeypatch):
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    assert timestamp() is None
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    assert timestamp() == "1970-01-01T00:00:00Z"


def test_eval_report_through_run_report():
    r = np.linspace(1, 2, 10)
    ev = QuantEvalReport(2, {"encoder": error_report(r, r), "logits": error_report(r, r * 1.01)}, 0.5, None)
    rep = RunReport("eval", "0" * 64, ev.to_dict(), timestamp=None)
    back = RunReport.from_json(rep.to_json())
    assert QuantEvalReport.from_dict(back.metrics) == ev
