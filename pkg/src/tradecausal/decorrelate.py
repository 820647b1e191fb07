"""Feature redundancy removal: Spearman clustering and iterative VIF filtering."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from scipy.stats import rankdata

from .dataset import Dataset
from .errors import TooFewRows, UnrankedFeature, ZeroVariance
from .shapley import FeatureRanking

LINKAGES = ("single", "complete", "average")
DEFAULT_DISTANCE_THRESHOLD = 0.3
DEFAULT_VIF_THRESHOLD = 10.0
COLLINEAR_R2 = 1.0 - 1e-12


@dataclass(eq=False)
class CorrelationMatrix:
    rho: np.ndarray
    feature_names: list[str]

    def distance(self) -> np.ndarray:
        """Dissimilarity ``1 - |rho|`` with an exact zero diagonal."""
        dist = 1.0 - np.abs(self.rho)
        dist[dist < 1e-12] = 0.0
        np.fill_diagonal(dist, 0.0)
        return dist


@dataclass(frozen=True)
class Merge:
    a: int
    b: int
    height: float
    id: int
    size: int


@dataclass(eq=False)
class Dendrogram:
    """Merge steps in the usual convention: leaves are 0..d-1, merge i creates d+i."""

    feature_names: list[str]
    merges: list[Merge]
    linkage: str = "average"

    def to_dict(self) -> dict:
        return {
            "linkage": self.linkage,
            "features": list(self.feature_names),
            "merges": [{"a": m.a, "b": m.b, "height": m.height, "id": m.id, "size": m.size} for m in self.merges],
        }


@dataclass(eq=False)
class VifReport:
    iterations: list[tuple[str, float]]
    final: dict[str, float]
    threshold: float = DEFAULT_VIF_THRESHOLD

    def to_dict(self) -> dict:
        enc = lambda v: "inf" if np.isinf(v) else float(v)  # noqa: E731
        return {
            "threshold": self.threshold,
            "removed": [{"iteration": i, "feature": n, "vif": enc(v)} for i, (n, v) in enumerate(self.iterations)],
            "final": {n: enc(v) for n, v in self.final.items()},
        }


def _matrix(data) -> tuple[np.ndarray, list[str]]:
    if isinstance(data, Dataset):
        return data.X, data.feature_names
    X = np.asarray(data, dtype=np.float64)
    return X, [f"f{j}" for j in range(X.shape[1])]


def spearman(data) -> CorrelationMatrix:
    """Pearson correlation of average-ranked columns."""
    X, names = _matrix(data)
    if X.shape[0] < 2:
        raise ValueError("spearman needs at least two rows")
    R = rankdata(X, axis=0, method="average")
    R = R - R.mean(axis=0)
    norms = np.sqrt((R ** 2).sum(axis=0))
    for j, nrm in enumerate(norms):
        if nrm == 0:
            raise ZeroVariance(names[j])
    rho = (R.T @ R) / np.outer(norms, norms)
    rho = np.clip((rho + rho.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    return CorrelationMatrix(rho, list(names))


def cluster_features(corr: CorrelationMatrix, distance_threshold: float = DEFAULT_DISTANCE_THRESHOLD,
                     method: str = "average") -> tuple[Dendrogram, dict[str, int]]:
    """Agglomerative clustering on ``1 - |rho|``, cut at ``distance_threshold``.

    Flat cluster ids are numbered 0.. in order of first appearance along
    the feature list.
    """
    if distance_threshold < 0:
        raise ValueError("distance_threshold must be non-negative")
    if method not in LINKAGES:
        raise ValueError(f"linkage must be one of {LINKAGES}")
    names = list(corr.feature_names)
    d = len(names)
    if d == 0:
        return Dendrogram([], [], method), {}
    if d == 1:
        return Dendrogram(names, [], method), {names[0]: 0}
    Z = linkage(squareform(corr.distance(), checks=False), method=method)
    merges = [Merge(int(a), int(b), float(h), d + i, int(s)) for i, (a, b, h, s) in enumerate(Z)]
    raw = fcluster(Z, t=distance_threshold, criterion="distance")
    relabel = {}
    for lab in raw:
        relabel.setdefault(int(lab), len(relabel))
    assignment = {n: relabel[int(lab)] for n, lab in zip(names, raw)}
    return Dendrogram(names, merges, method), assignment


def select_representatives(assignment: Mapping[str, int], ranking: FeatureRanking) -> list[str]:
    """Keep the highest mean-|SHAP| member of each cluster (ties: smallest name).

    Returned in ranking order.
    """
    scores = dict(ranking.entries)
    best: dict[int, str] = {}
    for name, cl in assignment.items():
        if name not in scores:
            raise UnrankedFeature(name)
        cur = best.get(cl)
        if cur is None or (scores[name], cur) > (scores[cur], name):
            best[cl] = name
    keep = set(best.values())
    return [n for n in ranking.names if n in keep]


def vif_values(X: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
    """VIF of every column from a least-squares fit on the others plus an intercept.

    Columns are z-scored first. R^2 at or above ``1 - 1e-12`` gives ``inf``.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    names = list(names) if names is not None else [f"f{j}" for j in range(d)]
    sd = X.std(axis=0)
    for j in range(d):
        if sd[j] <= 1e-12 * max(1.0, abs(X[:, j].mean())):
            raise ZeroVariance(names[j])
    Zs = (X - X.mean(axis=0)) / sd
    out = np.empty(d)
    for j in range(d):
        if d == 1:
            out[j] = 1.0
            continue
        A = np.column_stack([np.ones(n), np.delete(Zs, j, axis=1)])
        y = Zs[:, j]
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        resid = y - A @ coef
        r2 = 1.0 - (resid @ resid) / (y @ y)
        out[j] = np.inf if r2 >= COLLINEAR_R2 else 1.0 / (1.0 - r2)
    return out


def vif_filter(ds: Dataset, threshold: float = DEFAULT_VIF_THRESHOLD) -> tuple[Dataset, VifReport]:
    """Drop the highest-VIF feature until every remaining VIF is below ``threshold``.

    Ties go to the lowest column index.
    """
    if threshold <= 1:
        raise ValueError("VIF threshold must exceed 1")
    if ds.n_rows <= ds.X.shape[1] + 1:
        raise TooFewRows(f"{ds.n_rows} rows for {ds.X.shape[1]} features")
    names = ds.feature_names
    X = ds.X
    removed = []
    while True:
        vifs = vif_values(X, names)
        if len(vifs) == 0 or vifs.max() < threshold:
            break
        j = int(np.argmax(vifs))
        removed.append((names[j], float(vifs[j])))
        names = names[:j] + names[j + 1:]
        X = np.delete(X, j, axis=1)
    report = VifReport(removed, {n: float(v) for n, v in zip(names, vifs)}, float(threshold))
    return ds.select(names), report
