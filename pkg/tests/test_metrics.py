import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stereo_aec.dataset import DOUBLE_TALK, FAR_SINGLE_TALK
from stereo_aec.metrics import (ERLE_CAP, EvalReport, eval_sdr, erle, evaluate, passthrough,
                                ser_bucket)
from stereo_aec.training import sdr_db

from conftest import small_model

SEGS = [(0, 500, FAR_SINGLE_TALK), (500, 1000, DOUBLE_TALK)]


def test_erle_examples(rng):
    y = rng.standard_normal(1000)
    assert erle(y, y, SEGS) == pytest.approx(0.0, abs=1e-9)
    assert erle(y, y / 10, SEGS) == pytest.approx(20.0, abs=1e-6)
    assert erle(y, np.zeros_like(y), SEGS) == ERLE_CAP


def test_erle_ignores_double_talk(rng):
    y = rng.standard_normal(1000)
    est = y / 10
    est[500:] = 100.0
    assert erle(y, est, SEGS) == pytest.approx(20.0, abs=1e-6)


@given(st.floats(1e-2, 1e3))
def test_erle_scale_invariant(scale):
    r = np.random.default_rng(0)
    y, s = r.standard_normal(1000), 0.1 * r.standard_normal(1000)
    assert erle(scale * y, scale * s, SEGS) == pytest.approx(erle(y, s, SEGS), abs=1e-4)


def test_erle_errors(rng):
    y = rng.standard_normal(100)
    with pytest.raises(ValueError):
        erle(y, y, [(0, 100, DOUBLE_TALK)])
    with pytest.raises(ValueError):
        erle(np.zeros(100), y, [(0, 100, FAR_SINGLE_TALK)])
    with pytest.raises(ValueError):
        erle(y, y[:50], SEGS)


def test_eval_sdr_examples(rng):
    s = rng.standard_normal(1000)
    e = rng.standard_normal(1000)
    assert eval_sdr(s, s, SEGS) == 100.0
    # equal-energy interference at SER 0 gives roughly 0 dB
    e_dt = e * np.sqrt(np.sum(s[500:] ** 2) / np.sum(e[500:] ** 2))
    assert eval_sdr(s, s + e_dt, SEGS) == pytest.approx(0.0, abs=1e-9)
    # only double-talk samples count
    est = s.copy()
    est[:500] = 0
    assert eval_sdr(s, est, SEGS) == 100.0
    assert eval_sdr(s, 0.9 * s, SEGS) == pytest.approx(sdr_db(s[500:], 0.9 * s[500:]))


def test_eval_sdr_monotone_in_noise(rng):
    s, n = rng.standard_normal(1000), rng.standard_normal(1000)
    vals = [eval_sdr(s, s + a * n, SEGS) for a in (0.01, 0.1, 0.5, 1.0, 3.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ser_bucket():
    assert ser_bucket(-5.2) == "-5"
    assert ser_bucket(0.4) == "0"
    assert ser_bucket(5.0) == "5"
    assert ser_bucket(2.5) == "other"


def test_passthrough_report(small_manifest):
    rep = evaluate(None, small_manifest, estimator=passthrough)
    assert len(rep.rows) == 3 and not rep.failures
    for row, ex in zip(rep.rows, small_manifest):
        e = np.sum(ex.mic_signals[0].samples[ex.mask(FAR_SINGLE_TALK)] ** 2)
        # identical signals: only the 1e-10 regularizer separates this from 0 dB
        assert row["erle_db"] == pytest.approx(-10 * np.log10(1 + 1e-10 / e), abs=1e-9)
        assert row["sdr_db"] == pytest.approx(
            eval_sdr(ex.targets[0], ex.mic_signals[0], ex.segments))
    overall = rep.overall()
    assert overall["sdr_db"] == pytest.approx(np.mean([r["sdr_db"] for r in rep.rows]))


def test_zero_model_report(small_manifest):
    m = small_model("dcsm")
    m.zero_()
    rep = evaluate(m, small_manifest)
    for row, ex in zip(rep.rows, small_manifest):
        e = np.sum(ex.mic_signals[0].samples[ex.mask(FAR_SINGLE_TALK)] ** 2)
        assert row["erle_db"] == pytest.approx(min(10 * np.log10(e / 1e-10), ERLE_CAP))
        t = np.sum(ex.targets[0].samples[ex.mask(DOUBLE_TALK)] ** 2)
        assert row["sdr_db"] == pytest.approx(10 * np.log10(t / (t + 1e-10)), abs=1e-9)


def test_checkpoint_path_and_workers(tmp_path, small_manifest):
    m = small_model("dcdm")
    path = tmp_path / "m.lcsm"
    m.save(path)
    a = evaluate(path, small_manifest)
    b = evaluate(path, small_manifest, workers=2)
    assert [r["sdr_db"] for r in a.rows] == [r["sdr_db"] for r in b.rows]


def test_report_formats(tmp_path, small_manifest):
    rep = evaluate(None, small_manifest, estimator=passthrough)
    doc = json.loads(rep.to_json())
    assert set(doc) == {"meta", "examples", "groups", "overall", "failures"}
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert len(rows) == 3 and "erle_db" in rows[0]
    table = rep.to_table().splitlines()
    assert table[0].split()[0] == "condition" and table[-1].startswith("all")
    rep.save(tmp_path)
    assert {p.name for p in tmp_path.iterdir()} == {"report.json", "report.txt", "report.csv"}


def test_conditions_filter_and_failures(small_manifest):
    rep = evaluate(None, small_manifest, conditions=["real"], estimator=passthrough)
    assert rep.rows == []

    def broken(example):
        return np.zeros(10)

    rep = evaluate(None, small_manifest, estimator=broken)
    assert len(rep.failures) == 3 and rep.rows == []
    assert "failed" in rep.to_table()


def test_group_means():
    rows = [{"id": str(i), "condition": "simulated", "ser_db": s, "ser_bucket": ser_bucket(s),
             "erle_db": e, "sdr_db": d, "far_single_talk_s": 1.0, "double_talk_s": 1.0}
            for i, (s, e, d) in enumerate([(0.1, 10, 1), (-0.2, 20, 3), (5.0, 30, 5)])]
    rep = EvalReport(rows)
    g = rep.groups()
    assert g[("simulated", "0")]["erle_db"] == 15 and g[("simulated", "0")]["n"] == 2
    assert g[("simulated", "5")]["sdr_db"] == 5
    assert rep.overall()["erle_db"] == 20
