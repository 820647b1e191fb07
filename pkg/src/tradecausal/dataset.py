"""Dataset model, CSV ingestion, preprocessing and resampling.

Label convention throughout the package: ``1`` is a lawful transaction (the
positive class of the confusion matrix) and ``0`` an unlawful one.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    IngestError,
    KTooLarge,
    MissingColumn,
    OneClassOnly,
    UnknownCategory,
    UnparseableValue,
    ZeroVariance,
)

NUMERIC = "numeric"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class FeatureSpec:
    """One column of a Dataset.

    ``source`` is set on the indicator columns produced by :func:`one_hot`
    and names the categorical column they were expanded from. Such columns
    are numeric 0/1 and are left untouched by :func:`normalize`.
    """

    name: str
    kind: str = NUMERIC
    categories: tuple[str, ...] = ()
    source: str | None = None

    def __post_init__(self):
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        object.__setattr__(self, "categories", tuple(self.categories))
        if self.kind == CATEGORICAL and not self.categories:
            raise ValueError(f"categorical feature {self.name!r} needs categories")

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "categories": list(self.categories)}
        if self.source is not None:
            d["source"] = self.source
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(d["name"], d.get("kind", NUMERIC), tuple(d.get("categories", ())), d.get("source"))


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable feature matrix with binary labels and row identifiers.

    Categorical columns hold integer category codes (as floats) until they
    are expanded with :func:`one_hot`.
    """

    columns: tuple[FeatureSpec, ...]
    X: np.ndarray
    labels: np.ndarray
    ids: tuple[str, ...] = None
    id_column: str | None = None

    def __post_init__(self):
        cols = tuple(self.columns)
        X = _frozen(self.X, np.float64)
        if X.ndim != 2:
            X = _frozen(X.reshape(len(self.labels), len(cols)), np.float64)
        labels = _frozen(self.labels, np.int8)
        names = [c.name for c in cols]
        if len(set(names)) != len(names):
            raise ValueError("column names must be unique")
        if X.shape != (labels.shape[0], len(cols)):
            raise ValueError(f"X shape {X.shape} does not match {labels.shape[0]} rows x {len(cols)} columns")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        if np.isnan(X).any():
            raise ValueError("missing values are not allowed")
        ids = tuple(str(i) for i in range(len(labels))) if self.ids is None else tuple(map(str, self.ids))
        if len(ids) != len(labels):
            raise ValueError("ids must have one entry per row")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def feature_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.index(name)]

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.intp)
        return Dataset(self.columns, self.X[rows], self.labels[rows],
                       tuple(self.ids[i] for i in rows), self.id_column)

    def select(self, names: Sequence[str]) -> "Dataset":
        idx = [self.index(n) for n in names]
        return Dataset(tuple(self.columns[i] for i in idx), self.X[:, idx], self.labels,
                       self.ids, self.id_column)

    def drop(self, names: Iterable[str]) -> "Dataset":
        names = set(names)
        return self.select([n for n in self.feature_names if n not in names])

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.columns, self.X, labels, self.ids, self.id_column)

    def equals(self, other: "Dataset") -> bool:
        return (self.columns == other.columns and self.ids == other.ids
                and self.id_column == other.id_column
                and np.array_equal(self.X, other.X) and np.array_equal(self.labels, other.labels))


# ---------------------------------------------------------------------------
# schema and CSV I/O

def load_schema(path) -> list[FeatureSpec]:
    with open(path, encoding="utf-8") as fh:
        return [FeatureSpec.from_dict(d) for d in json.load(fh)]


def dump_schema(columns: Sequence[FeatureSpec], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in columns], indent=2) + "\n", encoding="utf-8")


def format_number(v: float) -> str:
    """Canonical numeric text: the shortest repr that round-trips exactly."""
    return repr(float(v))


def ingest_csv(path, schema: Sequence[FeatureSpec], label_column: str,
               id_column: str | None = None) -> Dataset:
    """Read a UTF-8 CSV into a Dataset.

    The header must contain every schema column plus ``label_column`` (and
    ``id_column`` if given), in any order. Rows are kept in file order.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        pos = {name: i for i, name in enumerate(header)}
        wanted = [c.name for c in schema] + [label_column] + ([id_column] if id_column else [])
        for name in wanted:
            if name not in pos:
                raise MissingColumn(name)

        rows, labels, ids = [], [], []
        for lineno, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(header):
                raise UnparseableValue(lineno, "<row>", ",".join(rec))
            vals = []
            for spec in schema:
                raw = rec[pos[spec.name]].strip()
                if spec.kind == CATEGORICAL:
                    try:
                        vals.append(float(spec.categories.index(raw)))
                    except ValueError:
                        raise UnknownCategory(lineno, spec.name, raw) from None
                else:
                    try:
                        v = float(raw)
                    except ValueError:
                        raise UnparseableValue(lineno, spec.name, raw) from None
                    if not np.isfinite(v):
                        raise UnparseableValue(lineno, spec.name, raw)
                    vals.append(v)
            raw = rec[pos[label_column]].strip()
            if raw not in ("0", "1"):
                raise UnparseableValue(lineno, label_column, raw)
            rows.append(vals)
            labels.append(int(raw))
            ids.append(rec[pos[id_column]] if id_column else str(lineno - 1))

    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(schema))
    return Dataset(tuple(schema), X, np.array(labels, dtype=np.int8), tuple(ids), id_column)


def emit_csv(ds: Dataset, path=None, label_column: str = "label") -> str:
    """Write ``ds`` in canonical form and return the text.

    Canonical form: optional id column first, features in schema order,
    label last, numbers via :func:`format_number`, ``\\n`` line endings.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ([ds.id_column] if ds.id_column else []) + ds.feature_names + [label_column]
    w.writerow(head)
    for i in range(ds.n_rows):
        rec = [ds.ids[i]] if ds.id_column else []
        for j, spec in enumerate(ds.columns):
            v = ds.X[i, j]
            rec.append(spec.categories[int(v)] if spec.kind == CATEGORICAL else format_number(v))
        rec.append(str(int(ds.labels[i])))
        w.writerow(rec)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8", newline="")
    return text


# ---------------------------------------------------------------------------
# preprocessing

def one_hot(ds: Dataset) -> Dataset:
    """Expand every categorical column into one 0/1 indicator per category."""
    cols, blocks = [], []
    for j, spec in enumerate(ds.columns):
        if spec.kind == CATEGORICAL:
            codes = ds.X[:, j].astype(int)
            for k, cat in enumerate(spec.categories):
                cols.append(FeatureSpec(f"{spec.name}_{cat}", NUMERIC, source=spec.name))
                blocks.append((codes == k).astype(np.float64))
        else:
            cols.append(spec)
            blocks.append(ds.X[:, j])
    X = np.column_stack(blocks) if blocks else np.empty((ds.n_rows, 0))
    return Dataset(tuple(cols), X, ds.labels, ds.ids, ds.id_column)


@dataclass(frozen=True)
class NormalizationParams:
    names: tuple[str, ...]
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"names": list(self.names), "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationParams":
        return cls(tuple(d["names"]), tuple(d["mean"]), tuple(d["std"]))


def _scaled_columns(ds: Dataset) -> list[str]:
    return [c.name for c in ds.columns if c.kind == NUMERIC and c.source is None]


def constant_columns(ds: Dataset) -> list[str]:
    out = []
    for name in _scaled_columns(ds):
        col = ds.column(name)
        if col.std() <= 1e-12 * max(1.0, abs(col.mean())):
            out.append(name)
    return out


def normalize(ds: Dataset) -> tuple[Dataset, NormalizationParams]:
    """z-score every plain numeric column using the population std.

    Indicator columns from :func:`one_hot` are left as they are.
    """
    names = _scaled_columns(ds)
    means, stds = [], []
    for name in names:
        col = ds.column(name)
        mu, sd = col.mean(), col.std()
        if sd <= 1e-12 * max(1.0, abs(mu)):
            raise ZeroVariance(name)
        means.append(float(mu))
        stds.append(float(sd))
    params = NormalizationParams(tuple(names), tuple(means), tuple(stds))
    return apply_normalization(ds, params), params


def apply_normalization(ds: Dataset, params: NormalizationParams) -> Dataset:
    X = ds.X.copy()
    for name, mu, sd in zip(params.names, params.mean, params.std):
        j = ds.index(name)
        X[:, j] = (X[:, j] - mu) / sd
    return Dataset(ds.columns, X, ds.labels, ds.ids, ds.id_column)


# ---------------------------------------------------------------------------
# label matching

def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def name_similarity(a: str, b: str, normalization: str = "max") -> float:
    """Levenshtein similarity of two names, compared case-insensitively.

    ``normalization="max"`` gives ``1 - d / max(len)``; ``"sum"`` gives
    ``1 - d / (len(a) + len(b))``.
    """
    a, b = a.strip().upper(), b.strip().upper()
    if normalization == "max":
        denom = max(len(a), len(b))
    elif normalization == "sum":
        denom = len(a) + len(b)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    if denom == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / denom


def match_labels(owners: Sequence[str], defendants: Sequence[str], threshold: float = 0.85,
                 normalization: str = "max") -> set[int]:
    """Indices of owners whose best similarity to any defendant exceeds ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    matched = set()
    for i, owner in enumerate(owners):
        if any(name_similarity(owner, d, normalization) > threshold for d in defendants):
            matched.add(i)
    return matched


# ---------------------------------------------------------------------------
# resampling

def balanced_subsample(ds: Dataset, seed: int) -> Dataset:
    """Keep the minority class whole and draw as many majority rows without replacement.

    Rows keep their original relative order.
    """
    idx0 = np.flatnonzero(ds.labels == 0)
    idx1 = np.flatnonzero(ds.labels == 1)
    if len(idx0) == 0 or len(idx1) == 0:
        raise OneClassOnly("balanced_subsample needs both classes")
    if len(idx0) == len(idx1):
        return ds
    minority, majority = (idx0, idx1) if len(idx0) < len(idx1) else (idx1, idx0)
    rng = np.random.default_rng(seed)
    kept = rng.choice(majority, size=len(minority), replace=False)
    return ds.take(np.sort(np.concatenate([minority, kept])))


@dataclass(frozen=True, eq=False)
class FoldPlan:
    k: int
    assignments: np.ndarray
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "assignments", _frozen(self.assignments, np.int64))

    def test_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)

    def sizes(self) -> list[int]:
        return np.bincount(self.assignments, minlength=self.k).tolist()


def _labels_of(data) -> np.ndarray:
    return data.labels if isinstance(data, Dataset) else np.asarray(data)


def make_folds(data, k: int, seed: int) -> FoldPlan:
    """Stratified k-fold assignment with fold sizes balanced to within one row.

    ``data`` is a Dataset or a 1-d array of labels to stratify on. Rows of
    each class are shuffled, laid end to end, and dealt round-robin.
    """
    labels = _labels_of(data)
    n = len(labels)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise KTooLarge(f"k={k} exceeds {n} rows")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)])
    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = np.arange(n) % k
    return FoldPlan(k, assignments, seed)


def stratified_split(labels, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split row indices into (train, test), stratified by label.

    Each class contributes ``round(test_fraction * count)`` rows to the test
    side, but never all of its rows and at least one row overall.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    test = []
    for c in np.unique(labels):
        rows = rng.permutation(np.flatnonzero(labels == c))
        m = min(int(round(test_fraction * len(rows))), len(rows) - 1)
        test.append(rows[:max(m, 0)])
    test = np.concatenate(test) if test else np.empty(0, dtype=np.intp)
    if len(test) == 0 and len(labels) > 1:
        test = rng.permutation(len(labels))[:1]
    mask = np.zeros(len(labels), dtype=bool)
    mask[test] = True
    return np.flatnonzero(~mask), np.flatnonzero(mask)
