import json

import numpy as np
import pytest

from bellquasi import verify_harness as vh


def _samples(mean, stderr, n=100):
    # exact mean and sample stderr
    z = np.resize([1.0, -1.0], n)
    sd = stderr * np.sqrt(n) / np.sqrt(n / (n - 1))
    return mean + sd * z


def test_one_sided_examples():
    r = vh.one_sided_bound_test(_samples(0.5, 0.01), 1.0)
    assert r.passed and r.kind == vh.STATISTICAL and r.n == 100
    assert r.stderr == pytest.approx(0.01)
    r = vh.one_sided_bound_test(_samples(1.2, 0.01), 1.0, slack=0.05)
    assert not r.passed


def test_one_sided_tie_passes():
    r = vh.bound_from_stats(1.03, 0.01, 1.0, 0.0, 100)
    assert r.threshold == pytest.approx(1.03)
    r = vh.bound_from_stats(0.25, 0.125, 0.0 - 0.125, 0.0, 100)  # mean == bound + 3 se exactly
    assert r.statistic == r.threshold and r.passed


def test_one_sided_underpowered():
    with pytest.raises(ValueError, match="underpowered"):
        vh.one_sided_bound_test(np.zeros(29), 1.0)
    with pytest.raises(ValueError):
        vh.bound_from_stats(0.0, 0.1, 1.0, n=10)


def test_trend_examples():
    assert vh.trend_test([0.3, 0.2, 0.1]).passed
    assert not vh.trend_test([0.3, 0.35, 0.1], tolerance_inversions=0, stderr=0.01).passed
    assert vh.trend_test([0.3, 0.301, 0.1], stderr=0.005).passed
    assert vh.trend_test([0.3, 0.35, 0.1], tolerance_inversions=1, stderr=0.01).passed
    with pytest.raises(ValueError):
        vh.trend_test([0.3, 0.2])


def test_check_result_json_and_criterion():
    r = vh.CheckResult("c07_girsanov", vh.STATISTICAL, 0.01, 0.02, True, 5, "change of measure", 0.003, 1000,
                       detail={"x": np.float64(1.5), "v": np.arange(2)}, runtime=3.0)
    assert r.criterion == 7
    doc = r.to_json()
    assert doc["stderr"] == 0.003 and doc["n"] == 1000 and "tol" not in doc
    assert doc["detail"] == {"x": 1.5, "v": [0, 1]}
    assert "runtime" not in doc
    json.dumps(doc)
    d = vh._det("c06_x", float("nan"), 0.0, False, 0, "p", 0.0)
    assert d.to_json()["statistic"] == "nan"


def test_empty_suite_is_no_checks():
    res = vh.run_suite(None, vh.SuiteConfig(checks=[]))
    assert res == []
    assert vh.summary_line(res) == "NO CHECKS"


def test_unknown_check_rejected():
    with pytest.raises(KeyError):
        vh.run_suite(None, vh.SuiteConfig(checks=["c99"]))


def test_small_suite_is_deterministic():
    cfg = vh.SuiteConfig(checks=["c06", "c10", "c16"], cert_samples=50, eta_paths=100)
    res = vh.run_suite(None, cfg)
    ids = [r.check_id for r in res]
    assert ids == sorted(ids)
    assert any(i.startswith("c16") for i in ids)
    det = [r for r in res if r.check_id.startswith("c16")][0]
    assert det.passed
    again = vh.run_suite(None, cfg)
    assert vh.report_json(res) == vh.report_json(again)
    assert vh.summary_line(res) == f"PASS {sum(r.passed for r in res)}/{len(res)}"
    assert set(vh.by_criterion(res)) == {6, 10, 16}


def test_provenance_strings_present():
    res = vh.run_suite(None, vh.SuiteConfig(checks=["c06", "c10"], cert_samples=50, eta_paths=100))
    assert all(r.provenance for r in res)
