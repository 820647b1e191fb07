"""Confusion-matrix metrics and report-bundle emission.

Metrics are kept as exact fractions (percentages) and only rounded, half
up to two decimals, when written out. Ratios with a zero denominator are
``None`` and serialise as empty/``null``, never as 0.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyMatrix, LengthMismatch

METRIC_ORDER = ("acc", "tnr", "pre", "fpr", "fnr", "tpr")

# the seven report files of a run, in manifest order
ARTIFACT_FILES = (
    "metrics.csv",
    "shap_ranking.csv",
    "beeswarm.csv",
    "heatmap.csv",
    "dendrogram.json",
    "vif.json",
    "ate.csv",
)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with lawful (label 1) as the positive class."""

    tp: int
    fn: int
    fp: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.fp, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return self.tp + self.fn + self.fp + self.tn


@dataclass(frozen=True)
class MetricSet:
    acc: Fraction | None
    tpr: Fraction | None
    tnr: Fraction | None
    fpr: Fraction | None
    fnr: Fraction | None
    pre: Fraction | None

    def as_floats(self) -> dict:
        return {k: (None if getattr(self, k) is None else float(getattr(self, k))) for k in METRIC_ORDER}

    def rounded(self) -> dict:
        return {k: round_half_up(getattr(self, k)) for k in METRIC_ORDER}


def round_half_up(v, places: int = 2) -> str | None:
    if v is None:
        return None
    if isinstance(v, Fraction):
        d = Decimal(v.numerator) / Decimal(v.denominator)
    else:
        d = Decimal(repr(float(v)))
    q = Decimal(1).scaleb(-places)
    return str(d.quantize(q, rounding=ROUND_HALF_UP))


def confusion(labels, probabilities, threshold: float = 0.5) -> ConfusionMatrix:
    """Tabulate actual vs predicted; a row is predicted lawful iff p >= threshold."""
    y = np.asarray(labels)
    p = np.asarray(probabilities, dtype=np.float64)
    if y.shape != p.shape:
        raise LengthMismatch(f"{y.shape} labels vs {p.shape} predictions")
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    pred = p >= threshold
    actual = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(actual & pred)),
        fn=int(np.sum(actual & ~pred)),
        fp=int(np.sum(~actual & pred)),
        tn=int(np.sum(~actual & ~pred)),
    )


def _pct(num: int, den: int) -> Fraction | None:
    return None if den == 0 else Fraction(100 * num, den)


def metrics(cm: ConfusionMatrix) -> MetricSet:
    if cm.n == 0:
        raise EmptyMatrix("confusion matrix has no observations")
    return MetricSet(
        acc=_pct(cm.tp + cm.tn, cm.n),
        tpr=_pct(cm.tp, cm.tp + cm.fn),
        tnr=_pct(cm.tn, cm.tn + cm.fp),
        fpr=_pct(cm.fp, cm.tn + cm.fp),
        fnr=_pct(cm.fn, cm.tp + cm.fn),
        pre=_pct(cm.tp, cm.tp + cm.fp),
    )


def mean_metrics(sets: Sequence[MetricSet]) -> MetricSet:
    """Per-metric mean over the sets where that metric is defined."""
    out = {}
    for k in METRIC_ORDER:
        vals = [getattr(s, k) for s in sets if getattr(s, k) is not None]
        out[k] = sum(vals, Fraction(0)) / len(vals) if vals else None
    return MetricSet(**out)


# ---------------------------------------------------------------------------
# table writers; each returns the text it writes

def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    return buf.getvalue()


def _write(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8", newline="")


def metrics_table(rows: Sequence[tuple[str, MetricSet]]) -> str:
    """Metric-per-row layout: one column per evaluated setting (e.g. each fold and the mean)."""
    header = ["metric"] + [name for name, _ in rows]
    body = [[k.upper()] + [round_half_up(getattr(ms, k)) for _, ms in rows] for k in METRIC_ORDER]
    return _csv_text(header, body)


def ranking_table(rankings: Sequence[tuple[str, object]]) -> str:
    """``rankings`` pairs a stage label with a FeatureRanking."""
    body = []
    for stage, ranking in rankings:
        for rank, (name, score) in enumerate(ranking.entries):
            body.append([stage, rank, name, repr(float(score)), int(name in ranking.retained)])
    return _csv_text(["stage", "rank", "feature", "mean_abs_shap", "retained"], body)


def beeswarm_table(records_by_stage: Sequence[tuple[str, list]]) -> str:
    body = []
    for stage, records in records_by_stage:
        for r in records:
            body.append([stage, r.rank, r.feature, r.row, repr(float(r.shap)), repr(float(r.value))])
    return _csv_text(["stage", "rank", "feature", "row", "shap", "value"], body)


def heatmap_table(corr) -> str:
    names = list(corr.feature_names)
    body = [[n] + [repr(float(v)) for v in row] for n, row in zip(names, corr.rho)]
    return _csv_text([""] + names, body)


def significance_stars(p: float, alpha: float = 0.05) -> str:
    return "***" if p <= alpha else ""


def ate_table(entries: Sequence) -> str:
    """Treatment effects in SHAP order: ate, se, 95% CI bounds, p-value, stars.

    Failed treatments keep their row with empty numbers and the error text.
    """
    body = []
    for e in entries:
        r = e.result
        if r is None:
            body.append([e.treatment, None, None, None, None, None, "", e.n_treated, e.n_control, e.error])
        else:
            body.append([e.treatment, f"{r.ate:.6e}", f"{r.se:.6e}", f"{r.ci_low:.6e}", f"{r.ci_high:.6e}",
                         f"{r.p_value:.6g}", r.stars, r.n_treated, r.n_control, ""])
    return _csv_text(["treatment", "ate", "se", "ci_low", "ci_high", "p_value", "stars",
                      "n_treated", "n_control", "error"], body)


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest_schema() -> dict:
    text = resources.files("tradecausal").joinpath("schemas/manifest.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def emit_report(out_dir, artifacts: dict, config: dict, seeds: dict, stages: Sequence[str] = (),
                status: str = "ok", failed_stage: str | None = None, error: str | None = None) -> Path:
    """Write the report files and the run manifest.

    ``artifacts`` maps report file names (see ``ARTIFACT_FILES``) to their
    text; any present are written first. Files already in ``out_dir`` with
    those names (written by the stage commands) are picked up as well.
    Returns the manifest path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not artifacts and status == "ok" and not any((out / f).exists() for f in ARTIFACT_FILES):
        raise ValueError("emit_report needs at least one artifact")
    for name, text in artifacts.items():
        if name not in ARTIFACT_FILES:
            raise ValueError(f"unknown artifact {name!r}")
        _write(out / name, text)

    listed = []
    for name in ARTIFACT_FILES:
        p = out / name
        if p.exists():
            listed.append({"file": name, "sha256": sha256_file(p), "bytes": p.stat().st_size})
    intermediates = []
    stage_dir = out / "stages"
    if stage_dir.is_dir():
        for p in sorted(stage_dir.iterdir()):
            intermediates.append({"file": f"stages/{p.name}", "sha256": sha256_file(p), "bytes": p.stat().st_size})

    manifest = {
        "schema_version": 1,
        "status": status,
        "failed_stage": failed_stage,
        "error": error,
        "stages_completed": list(stages),
        "config": config,
        "seeds": seeds,
        "artifacts": listed,
        "intermediates": intermediates,
    }
    path = out / "manifest.json"
    _write(path, dumps_json(manifest))
    return path
