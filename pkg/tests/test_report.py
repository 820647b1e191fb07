import csv
import io
import json
from fractions import Fraction

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tradecausal.causal import AteResult, SweepEntry
from tradecausal.errors import EmptyMatrix, LengthMismatch
from tradecausal.report import (
    ARTIFACT_FILES,
    ConfusionMatrix,
    ate_table,
    confusion,
    emit_report,
    manifest_schema,
    mean_metrics,
    metrics,
    metrics_table,
    round_half_up,
    significance_stars,
)


def count_oracle(labels, probs, threshold):
    tp = fn = fp = tn = 0
    for y, p in zip(labels, probs):
        if y == 1 and p >= threshold:
            tp += 1
        elif y == 1:
            fn += 1
        elif p >= threshold:
            fp += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fn, fp, tn)


def test_perfect_and_degenerate_classifiers():
    y = np.array([1, 0, 1, 0])
    cm = confusion(y, y.astype(float))
    assert cm.fp == cm.fn == 0
    m = metrics(confusion(y, np.ones(4)))
    assert m.tpr == 100 and m.tnr == 0


def test_direct_ratios():
    m = metrics(ConfusionMatrix(tp=99, fn=1, fp=1, tn=99))
    assert (m.acc, m.tpr, m.tnr) == (99, 99, 99)
    assert m.rounded()["acc"] == "99.00"


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.floats(0, 1)), max_size=40), st.floats(0.01, 0.99))
def test_confusion_matches_counting(rows, thr):
    y = np.array([r[0] for r in rows], dtype=int)
    p = np.array([r[1] for r in rows], dtype=float)
    assert confusion(y, p, thr) == count_oracle(y, p, thr)


def test_confusion_errors():
    with pytest.raises(LengthMismatch):
        confusion([0, 1], [0.5])
    with pytest.raises(EmptyMatrix):
        metrics(ConfusionMatrix(0, 0, 0, 0))


def test_undefined_metrics_are_absent():
    m = metrics(ConfusionMatrix(tp=0, fn=0, fp=3, tn=2))
    assert m.tpr is None and m.fnr is None and m.pre == 0
    text = metrics_table([("fold1", m)])
    assert "TPR,\n" in text


def test_complement_identities_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        cm = ConfusionMatrix(*(int(v) for v in rng.integers(0, 50, 4)))
        if cm.n == 0:
            continue
        m = metrics(cm)
        if cm.tp + cm.fn:
            assert m.tpr + m.fnr == 100
        if cm.tn + cm.fp:
            assert m.tnr + m.fpr == 100
        assert m.acc == Fraction(100 * (cm.tp + cm.tn), cm.n)


def test_target_row_shape_renders():
    # the headline row layout: two-decimal percentages
    m = metrics(ConfusionMatrix(tp=9907, fn=93, fp=94, tn=9906))
    r = m.rounded()
    assert r["tpr"] == "99.07" and r["fnr"] == "0.93" and r["tnr"] == "99.06"


@pytest.mark.parametrize("v, want", [(Fraction(1, 8), "0.13"), (Fraction(-1, 8), "-0.13"), (2.675, "2.68"),
                                     (Fraction(200, 3), "66.67"), (None, None)])
def test_round_half_up(v, want):
    assert round_half_up(v) == want


def test_mean_metrics_skips_undefined():
    a = metrics(ConfusionMatrix(1, 1, 0, 0))
    b = metrics(ConfusionMatrix(1, 0, 1, 2))
    mean = mean_metrics([a, b])
    assert mean.tnr == Fraction(200, 3)  # only b defines it
    assert mean.tpr == Fraction(75)


def test_stars():
    assert significance_stars(0.05) == "***"
    assert significance_stars(0.0381) == "***"
    assert significance_stars(0.0501) == ""


def test_ate_table_layout():
    entries = [
        SweepEntry("Return", AteResult(-0.864, 0.4, -1.648, -0.08, 0.0381, 100, 90)),
        SweepEntry("Noise01", AteResult(0.01, 0.2, -0.38, 0.40, 0.96, 95, 95)),
        SweepEntry("Broken", None, "DegenerateArm: empty"),
    ]
    rows = list(csv.DictReader(io.StringIO(ate_table(entries))))
    assert list(rows[0]) == ["treatment", "ate", "se", "ci_low", "ci_high", "p_value", "stars",
                             "n_treated", "n_control", "error"]
    assert rows[0]["ate"] == "-8.640000e-01" and rows[0]["stars"] == "***" and rows[0]["p_value"] == "0.0381"
    assert rows[1]["stars"] == ""
    assert rows[2]["ate"] == "" and rows[2]["error"].startswith("DegenerateArm")


def test_emit_report_manifest(tmp_path):
    arts = {name: f"{name}\n" for name in ARTIFACT_FILES}
    (tmp_path / "stages").mkdir()
    (tmp_path / "stages" / "x.json").write_text("{}\n")
    path = emit_report(tmp_path, arts, {"vif_threshold": 10.0}, {"master": 1}, ["classify"])
    manifest = json.loads(path.read_text())
    jsonschema.validate(manifest, manifest_schema())
    assert [a["file"] for a in manifest["artifacts"]] == list(ARTIFACT_FILES)
    assert manifest["intermediates"][0]["file"] == "stages/x.json"
    assert manifest["config"]["vif_threshold"] == 10.0
    again = emit_report(tmp_path, arts, {"vif_threshold": 10.0}, {"master": 1}, ["classify"])
    assert again.read_bytes() == path.read_bytes()


def test_emit_report_needs_an_artifact(tmp_path):
    with pytest.raises(ValueError):
        emit_report(tmp_path / "empty", {}, {}, {"master": 0})
    with pytest.raises(ValueError):
        emit_report(tmp_path, {"other.txt": ""}, {}, {"master": 0})


def test_failed_manifest_validates(tmp_path):
    path = emit_report(tmp_path, {}, {}, {"master": 0}, [], status="failed", failed_stage="shap",
                       error="MissingInput: model")
    manifest = json.loads(path.read_text())
    jsonschema.validate(manifest, manifest_schema())
    bad = dict(manifest, status="maybe")
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, manifest_schema())
