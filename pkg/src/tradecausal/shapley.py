"""Exact Shapley attribution for boosted tree ensembles.

The value of a coalition S for an observation x is the interventional
expectation

    v(S) = mean_z f(x_S, z_rest)

over background rows z, on the margin (log-odds) scale. Two routes compute
the same numbers: :func:`shap_exact_oracle` enumerates every subset and
applies the Shapley weights |S|!(d-|S|-1)!/d! directly, and
:func:`shap_tree` walks each tree once per (x, z) pair.

For a fixed pair, a leaf is reachable under S iff every feature the path
needs from x (set A: x satisfies the split, z does not) is in S and every
feature it needs from z (set B) is not. The Shapley value of that 0/1 game
is ``(|A|-1)! |B|! / (|A|+|B|)!`` for members of A and
``-|A|! (|B|-1)! / (|A|+|B|)!`` for members of B, scaled by the leaf value.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from itertools import combinations
from math import factorial
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .dataset import Dataset
from .errors import LengthMismatch, SchemaMismatch, TooManyFeatures
from .gbtree import TreeEnsemble

ORACLE_MAX_FEATURES = 20
DEFAULT_BACKGROUND_CAP = 256
DEFAULT_THRESHOLD = 0.022


@dataclass(eq=False)
class ShapMatrix:
    values: np.ndarray  # (n_rows, n_features), margin scale
    base_value: float
    feature_names: list[str]

    def mean_abs(self) -> np.ndarray:
        return np.abs(self.values).mean(axis=0)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.feature_names)
        for row in self.values:
            w.writerow([repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8", newline="")
        return text

    def sidecar(self) -> dict:
        return {"base_value": float(self.base_value), "feature_names": list(self.feature_names)}

    def save(self, csv_path, json_path) -> None:
        self.to_csv(csv_path)
        Path(json_path).write_text(json.dumps(self.sidecar(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, csv_path, json_path) -> "ShapMatrix":
        meta = json.loads(Path(json_path).read_text(encoding="utf-8"))
        with open(csv_path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if rows[0] != meta["feature_names"]:
            raise SchemaMismatch("SHAP CSV header does not match its sidecar")
        vals = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
        return cls(vals.reshape(len(rows) - 1, len(rows[0])), float(meta["base_value"]), list(meta["feature_names"]))


@dataclass(frozen=True)
class FeatureRanking:
    entries: tuple[tuple[str, float], ...]
    threshold: float

    @property
    def retained(self) -> tuple[str, ...]:
        return tuple(name for name, score in self.entries if score > self.threshold)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def score(self, name: str) -> float:
        for n, s in self.entries:
            if n == name:
                return s
        raise KeyError(name)


# ---------------------------------------------------------------------------
# brute-force route

def _weights(d: int) -> np.ndarray:
    return np.array([factorial(s) * factorial(d - s - 1) / factorial(d) for s in range(d)])


def shap_exact_oracle(model: TreeEnsemble, x, background) -> np.ndarray:
    """Shapley values of one observation by enumerating all 2^d coalitions.

    ``background`` is a Dataset or (n, d) array; the value of a coalition
    is the mean model margin with coalition features taken from ``x`` and
    the rest from each background row.
    """
    Z = background.X if isinstance(background, Dataset) else np.asarray(background, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).ravel()
    d = len(model.feature_names)
    if d > ORACLE_MAX_FEATURES:
        raise TooManyFeatures(d, ORACLE_MAX_FEATURES)
    if Z.shape[0] == 0:
        raise ValueError("background must be non-empty")
    if Z.shape[1] != d or x.shape[0] != d:
        raise SchemaMismatch("observation/background width does not match the model")

    value = {}
    for mask in range(1 << d):
        H = Z.copy()
        for j in range(d):
            if mask >> j & 1:
                H[:, j] = x[j]
        value[mask] = float(np.mean(model.predict_margin(H)))

    w = _weights(d)
    phi = np.zeros(d)
    for j in range(d):
        others = [k for k in range(d) if k != j]
        for size in range(d):
            for S in combinations(others, size):
                mask = sum(1 << k for k in S)
                phi[j] += w[size] * (value[mask | (1 << j)] - value[mask])
    return phi


# ---------------------------------------------------------------------------
# tree route

@njit(cache=True)
def _tree_shap_kernel(Xf, Z, feature, threshold, left, right, value, roots, scale, W, max_depth):
    n, d = Xf.shape
    nz = Z.shape[0]
    phi = np.zeros((n, d))
    # stack frames: node, path length before this frame's decision, decision feature, state, |A|, |B|
    cap = 2 * (max_depth + 2) + 4
    st_node = np.empty(cap, dtype=np.int64)
    st_plen = np.empty(cap, dtype=np.int64)
    st_feat = np.empty(cap, dtype=np.int64)
    st_state = np.empty(cap, dtype=np.int64)
    st_a = np.empty(cap, dtype=np.int64)
    st_b = np.empty(cap, dtype=np.int64)
    path_feat = np.empty(max_depth + 1, dtype=np.int64)
    path_state = np.empty(max_depth + 1, dtype=np.int64)
    for i in range(n):
        x = Xf[i]
        for r in range(nz):
            z = Z[r]
            for t in range(roots.shape[0]):
                sp = 0
                st_node[0] = roots[t]
                st_plen[0] = 0
                st_feat[0] = -1
                st_state[0] = 0
                st_a[0] = 0
                st_b[0] = 0
                sp = 1
                while sp > 0:
                    sp -= 1
                    node = st_node[sp]
                    plen = st_plen[sp]
                    na = st_a[sp]
                    nb = st_b[sp]
                    if st_feat[sp] >= 0:
                        path_feat[plen] = st_feat[sp]
                        path_state[plen] = st_state[sp]
                        plen += 1
                    f = feature[node]
                    if f < 0:
                        v = value[node] * scale
                        if na + nb == 0 or v == 0.0:
                            continue
                        for q in range(plen):
                            if path_state[q] == 1:
                                phi[i, path_feat[q]] += v * W[na - 1, nb]
                            else:
                                phi[i, path_feat[q]] -= v * W[na, nb - 1]
                        continue
                    state = 0
                    for q in range(plen):
                        if path_feat[q] == f:
                            state = path_state[q]
                            break
                    x_child = left[node] if x[f] < threshold[node] else right[node]
                    z_child = left[node] if z[f] < threshold[node] else right[node]
                    if state == 1:
                        nxt = x_child
                    elif state == 2:
                        nxt = z_child
                    elif x_child == z_child:
                        nxt = x_child
                    else:
                        st_node[sp] = x_child
                        st_plen[sp] = plen
                        st_feat[sp] = f
                        st_state[sp] = 1
                        st_a[sp] = na + 1
                        st_b[sp] = nb
                        sp += 1
                        st_node[sp] = z_child
                        st_plen[sp] = plen
                        st_feat[sp] = f
                        st_state[sp] = 2
                        st_a[sp] = na
                        st_b[sp] = nb + 1
                        sp += 1
                        continue
                    st_node[sp] = nxt
                    st_plen[sp] = plen
                    st_feat[sp] = -1
                    st_state[sp] = 0
                    st_a[sp] = na
                    st_b[sp] = nb
                    sp += 1
    return phi / nz


def _pair_weights(d: int) -> np.ndarray:
    # W[a, b] = a! b! / (a + b + 1)!
    W = np.zeros((d + 1, d + 1))
    for a in range(d + 1):
        for b in range(d + 1 - a):
            W[a, b] = factorial(a) * factorial(b) / factorial(a + b + 1)
    return W


def _flatten(model: TreeEnsemble):
    feats, thrs, lefts, rights, vals, roots = [], [], [], [], [], []
    offset = 0
    depth = 0
    for t in model.trees:
        roots.append(offset)
        feats.append(t.feature)
        thrs.append(t.threshold)
        lefts.append(np.where(t.left >= 0, t.left + offset, -1))
        rights.append(np.where(t.right >= 0, t.right + offset, -1))
        vals.append(t.value)
        offset += t.n_nodes
        depth = max(depth, t.depth())
    if not roots:
        empty_i, empty_f = np.zeros(0, dtype=np.int64), np.zeros(0)
        return empty_i, empty_f, empty_i, empty_i, empty_f, np.zeros(0, dtype=np.int64), 0
    return (np.concatenate(feats).astype(np.int64), np.concatenate(thrs), np.concatenate(lefts).astype(np.int64),
            np.concatenate(rights).astype(np.int64), np.concatenate(vals), np.asarray(roots, dtype=np.int64), depth)


def subsample_background(background: Dataset | np.ndarray, cap: int | None, seed: int) -> np.ndarray:
    Z = background.X if isinstance(background, Dataset) else np.asarray(background, dtype=np.float64)
    if cap is not None and Z.shape[0] > cap:
        rows = np.sort(np.random.default_rng(seed).choice(Z.shape[0], size=cap, replace=False))
        Z = Z[rows]
    return np.ascontiguousarray(Z)


def shap_tree(model: TreeEnsemble, ds, background, max_background: int | None = DEFAULT_BACKGROUND_CAP,
              seed: int = 0) -> ShapMatrix:
    """Exact interventional Shapley values for every row of ``ds``.

    Background rows beyond ``max_background`` are dropped by a seeded
    uniform subsample. The result satisfies, per row,
    ``base_value + values.sum() == margin`` up to rounding.
    """
    if isinstance(ds, Dataset):
        if ds.feature_names != list(model.feature_names):
            raise SchemaMismatch(f"dataset columns {ds.feature_names} != model features {model.feature_names}")
        X = ds.X
    else:
        X = np.asarray(ds, dtype=np.float64)
    if isinstance(background, Dataset) and background.feature_names != list(model.feature_names):
        raise SchemaMismatch("background columns do not match the model")
    d = len(model.feature_names)
    if X.ndim != 2 or X.shape[1] != d:
        raise SchemaMismatch(f"expected {d} columns")
    Z = subsample_background(background, max_background, seed)
    if Z.shape[0] == 0:
        raise ValueError("background must be non-empty")
    if Z.shape[1] != d:
        raise SchemaMismatch("background width does not match the model")

    base_value = float(np.mean(model.predict_margin(Z)))
    feature, threshold, left, right, value, roots, depth = _flatten(model)
    if len(roots) == 0 or X.shape[0] == 0:
        return ShapMatrix(np.zeros((X.shape[0], d)), base_value, list(model.feature_names))
    W = _pair_weights(max(depth, 1) + 1)
    phi = _tree_shap_kernel(np.ascontiguousarray(X), Z, feature, threshold, left, right, value, roots,
                            float(model.learning_rate), W, depth)
    return ShapMatrix(phi, base_value, list(model.feature_names))


# ---------------------------------------------------------------------------
# ranking and plot data

def rank_features(shap: ShapMatrix, threshold: float = DEFAULT_THRESHOLD) -> FeatureRanking:
    """Order features by mean |phi|, descending; ties by name."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    scores = shap.mean_abs()
    entries = sorted(zip(shap.feature_names, (float(s) for s in scores)), key=lambda e: (-e[1], e[0]))
    return FeatureRanking(tuple(entries), float(threshold))


@dataclass(frozen=True)
class BeeswarmRecord:
    feature: str
    row: int
    shap: float
    value: float
    rank: int


def beeswarm_export(shap: ShapMatrix, raw, ranking: FeatureRanking | None = None) -> list[BeeswarmRecord]:
    """Long-format (feature, phi, raw value, rank) records, best-ranked feature first.

    ``raw`` holds the feature values the colour scale is drawn from; it
    must be row-aligned with ``shap``.
    """
    R = raw.X if isinstance(raw, Dataset) else np.asarray(raw, dtype=np.float64)
    if isinstance(raw, Dataset):
        cols = [raw.index(n) for n in shap.feature_names]
        R = R[:, cols]
    if R.shape != shap.values.shape:
        raise LengthMismatch(f"raw values {R.shape} vs SHAP matrix {shap.values.shape}")
    ranking = ranking or rank_features(shap, 0.0)
    pos = {n: j for j, n in enumerate(shap.feature_names)}
    out = []
    for rank, name in enumerate(ranking.names):
        j = pos[name]
        for i in range(R.shape[0]):
            out.append(BeeswarmRecord(name, i, float(shap.values[i, j]), float(R[i, j]), rank))
    return out


def aggregate_beeswarm(records: Sequence[BeeswarmRecord]) -> dict[str, float]:
    """Mean |phi| per feature recomputed from exported records."""
    sums, counts = {}, {}
    for r in records:
        sums[r.feature] = sums.get(r.feature, 0.0) + abs(r.shap)
        counts[r.feature] = counts.get(r.feature, 0) + 1
    return {k: sums[k] / counts[k] for k in sums}
