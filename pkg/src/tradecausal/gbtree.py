"""Second-order gradient-boosted decision trees.

Trees are grown level by level with an exact greedy search over every
distinct feature value, using the regularised Newton gain

    gain = 1/2 * [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)]

and leaf weights ``-G/(H+lambda)``. The split search for all nodes of a
level is a single sweep per feature over a presorted index matrix.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.special import expit

from ._tree import NodeArrays, TreeBuilder
from .dataset import Dataset, FoldPlan, stratified_split
from .errors import OneClassOnly, SchemaMismatch

LOGISTIC = "binary:logistic"
SQUARED = "reg:squarederror"


@dataclass(frozen=True)
class BoostConfig:
    max_trees: int = 500
    max_depth: int = 6
    learning_rate: float = 0.1
    min_child_weight: float = 1.0
    l2_lambda: float = 1.0
    early_stopping_rounds: int = 50
    seed: int = 0
    objective: str = LOGISTIC

    def __post_init__(self):
        if self.max_trees < 0 or self.max_depth < 1:
            raise ValueError("max_trees must be >= 0 and max_depth >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.min_child_weight < 0 or self.l2_lambda < 0 or self.early_stopping_rounds < 1:
            raise ValueError("min_child_weight, l2_lambda must be >= 0 and early_stopping_rounds >= 1")
        if self.objective not in (LOGISTIC, SQUARED):
            raise ValueError(f"unknown objective {self.objective!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BoostConfig":
        return cls(**d)


@dataclass(eq=False)
class TreeEnsemble:
    trees: list[NodeArrays]
    base_score: float
    learning_rate: float
    feature_names: list[str]
    objective: str = LOGISTIC
    history: dict = field(default_factory=dict)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def truncated(self, n: int) -> "TreeEnsemble":
        return TreeEnsemble(self.trees[:n], self.base_score, self.learning_rate,
                            list(self.feature_names), self.objective)

    def predict_margin(self, X) -> np.ndarray:
        """Raw additive output: ``base_score + eta * sum(tree outputs)``.

        Accumulated tree by tree so that an n-tree margin equals the
        (n-1)-tree margin plus ``eta * tree_n`` exactly.
        """
        X = self._matrix(X)
        m = np.full(X.shape[0], self.base_score, dtype=np.float64)
        for t in self.trees:
            m = m + self.learning_rate * t.predict(X)
        return m

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.predict_margin(X))

    def predict(self, X) -> np.ndarray:
        m = self.predict_margin(X)
        return expit(m) if self.objective == LOGISTIC else m

    def _matrix(self, X) -> np.ndarray:
        if isinstance(X, Dataset):
            if X.feature_names != list(self.feature_names):
                raise SchemaMismatch(f"dataset columns {X.feature_names} != model features {self.feature_names}")
            return X.X
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise SchemaMismatch(f"expected {len(self.feature_names)} columns, got shape {X.shape}")
        return X

    def used_features(self) -> set[int]:
        return {int(f) for t in self.trees for f in t.feature if f >= 0}

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "feature_names": list(self.feature_names),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsemble":
        return cls([NodeArrays.from_dict(t) for t in d["trees"]], float(d["base_score"]),
                   float(d["learning_rate"]), list(d["feature_names"]), d.get("objective", LOGISTIC))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TreeEnsemble":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def sigmoid(z):
    return expit(z)


def log_loss(y: np.ndarray, margin: np.ndarray) -> float:
    # log(1 + exp(m)) - y*m, written stably
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


def _loss(objective, y, margin):
    if objective == LOGISTIC:
        return log_loss(y, margin)
    return float(np.mean((margin - y) ** 2))


def _grad_hess(objective, y, margin):
    if objective == LOGISTIC:
        p = expit(margin)
        return p - y, p * (1.0 - p)
    return margin - y, np.ones_like(margin)


@njit(cache=True)
def _level_splits(X, order, g, h, slot, G, H, lam, mcw):
    """Best split per frontier node from one sweep over each presorted feature.

    Strict improvement keeps the first candidate met, i.e. the lowest
    feature index and then the lowest threshold.
    """
    n, d = X.shape
    m = G.shape[0]
    best_gain = np.full(m, 1e-12)
    best_f = np.full(m, -1, dtype=np.int64)
    best_thr = np.zeros(m)
    GL = np.zeros(m)
    HL = np.zeros(m)
    last = np.zeros(m)
    seen = np.zeros(m, dtype=np.bool_)
    for f in range(d):
        GL[:] = 0.0
        HL[:] = 0.0
        seen[:] = False
        for k in range(n):
            i = order[k, f]
            s = slot[i]
            if s < 0:
                continue
            v = X[i, f]
            if seen[s] and v > last[s]:
                hl = HL[s]
                hr = H[s] - hl
                if hl >= mcw and hr >= mcw:
                    gl = GL[s]
                    gr = G[s] - gl
                    gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - G[s] * G[s] / (H[s] + lam))
                    if gain > best_gain[s]:
                        best_gain[s] = gain
                        best_f[s] = f
                        mid = last[s] + (v - last[s]) / 2.0
                        best_thr[s] = mid if mid > last[s] else v
            GL[s] += g[i]
            HL[s] += h[i]
            last[s] = v
            seen[s] = True
    return best_f, best_thr, best_gain


def grow_tree(X: np.ndarray, order: np.ndarray, g: np.ndarray, h: np.ndarray,
              cfg: BoostConfig) -> NodeArrays:
    """Grow one regression tree on gradients ``g`` and hessians ``h``.

    ``order`` is ``np.argsort(X, axis=0, kind="stable")``, computed once
    per fit. Among equal gains the lowest feature index wins, then the
    lowest threshold.
    """
    n, d = X.shape
    lam, mcw = float(cfg.l2_lambda), float(cfg.min_child_weight)
    b = TreeBuilder()
    slot = np.zeros(n, dtype=np.int64)  # index into `frontier`; -1 once the row sits in a finished leaf
    frontier = [b.add()]

    for depth in range(cfg.max_depth + 1):
        m = len(frontier)
        live = slot >= 0
        G = np.bincount(slot[live], weights=g[live], minlength=m)
        H = np.bincount(slot[live], weights=h[live], minlength=m)
        for s, node in enumerate(frontier):
            b.value[node] = -G[s] / (H[s] + lam) if H[s] + lam > 0 else 0.0
        if depth == cfg.max_depth or d == 0:
            break
        best_f, best_thr, _ = _level_splits(X, order, g, h, slot, G, H, lam, mcw)

        child_slot = np.full(m, -1, dtype=np.int64)
        new_frontier = []
        for s, node in enumerate(frontier):
            if best_f[s] < 0:
                continue
            left, right = b.split(node, int(best_f[s]), float(best_thr[s]))
            child_slot[s] = len(new_frontier)
            new_frontier += [left, right]
        if not new_frontier:
            break
        f_row = best_f[np.maximum(slot, 0)]
        split_row = live & (f_row >= 0)
        rows = np.flatnonzero(split_row)
        goes_right = X[rows, f_row[rows]] >= best_thr[slot[rows]]
        new_slot = np.full(n, -1, dtype=np.int64)
        new_slot[rows] = child_slot[slot[rows]] + goes_right
        slot, frontier = new_slot, new_frontier

    return b.arrays()


def _base_score(objective, y):
    if objective == LOGISTIC:
        p = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        return float(np.log(p / (1 - p)))
    return float(y.mean())


def fit_arrays(X, y, X_valid, y_valid, cfg: BoostConfig, feature_names=None,
               offset=None, offset_valid=None) -> TreeEnsemble:
    """Boost on plain arrays; see :func:`fit`.

    ``offset``/``offset_valid`` are optional fixed per-row margins (for
    instance from a linear model) that the trees boost on top of. With an
    offset the ensemble's base score is 0 and its margin excludes the offset.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    X_valid = np.asarray(X_valid, dtype=np.float64)
    y_valid = np.asarray(y_valid, dtype=np.float64)
    if X.shape[0] == 0 or X_valid.shape[0] == 0:
        raise ValueError("training and validation sets must be non-empty")
    if cfg.objective == LOGISTIC and len(np.unique(y)) < 2:
        raise OneClassOnly("training labels contain a single class")
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(X.shape[1])]

    if (offset is None) != (offset_valid is None):
        raise ValueError("offset and offset_valid must be given together")
    base = _base_score(cfg.objective, y) if offset is None else 0.0
    order = np.argsort(X, axis=0, kind="stable")
    m_train = np.full(len(y), base)
    m_valid = np.full(len(y_valid), base)
    if offset is not None:
        m_train = m_train + np.asarray(offset, dtype=np.float64)
        m_valid = m_valid + np.asarray(offset_valid, dtype=np.float64)
    trees = []
    train_loss = [_loss(cfg.objective, y, m_train)]
    valid_loss = [_loss(cfg.objective, y_valid, m_valid)]
    best_n, best = 0, valid_loss[0]

    for t in range(cfg.max_trees):
        g, h = _grad_hess(cfg.objective, y, m_train)
        tree = grow_tree(X, order, g, h, cfg)
        trees.append(tree)
        m_train = m_train + cfg.learning_rate * tree.predict(X)
        m_valid = m_valid + cfg.learning_rate * tree.predict(X_valid)
        train_loss.append(_loss(cfg.objective, y, m_train))
        valid_loss.append(_loss(cfg.objective, y_valid, m_valid))
        if valid_loss[-1] < best:
            best, best_n = valid_loss[-1], t + 1
        elif t + 1 - best_n >= cfg.early_stopping_rounds:
            break

    model = TreeEnsemble(trees[:best_n], base, cfg.learning_rate, names, cfg.objective)
    model.history = {"train_loss": train_loss, "valid_loss": valid_loss, "best_n_trees": best_n}
    return model


def fit(train: Dataset, valid: Dataset, cfg: BoostConfig = BoostConfig()) -> TreeEnsemble:
    """Fit a boosted classifier on ``train`` with early stopping on ``valid``.

    Trees are added until the validation loss has not improved for
    ``cfg.early_stopping_rounds`` rounds; the returned ensemble is cut back
    to the round with the lowest validation loss (possibly zero trees).
    """
    if valid.feature_names != train.feature_names:
        raise SchemaMismatch("train and valid columns differ")
    return fit_arrays(train.X, train.labels, valid.X, valid.labels, cfg, train.feature_names)


def predict_proba(model: TreeEnsemble, ds) -> np.ndarray:
    return model.predict_proba(ds)


def fit_with_holdout(X, y, cfg: BoostConfig, seed: int, validation_fraction: float = 0.2,
                     feature_names=None, offset=None) -> TreeEnsemble:
    """Fit with an internal stratified validation slice for early stopping."""
    y = np.asarray(y)
    strat = y if cfg.objective == LOGISTIC else np.zeros(len(y), dtype=int)
    tr, va = stratified_split(strat, validation_fraction, seed)
    if offset is None:
        return fit_arrays(X[tr], y[tr], X[va], y[va], cfg, feature_names)
    offset = np.asarray(offset, dtype=np.float64)
    return fit_arrays(X[tr], y[tr], X[va], y[va], cfg, feature_names, offset[tr], offset[va])


@dataclass
class CVResult:
    folds: list  # MetricSet per fold
    confusions: list
    mean: object  # MetricSet of fold means

    @property
    def k(self) -> int:
        return len(self.folds)


def cross_validate(ds: Dataset, folds: FoldPlan, cfg: BoostConfig = BoostConfig(),
                   threshold: float = 0.5, validation_fraction: float = 0.2) -> CVResult:
    """k-fold evaluation; each training part holds out its own early-stopping slice."""
    from .report import confusion, mean_metrics, metrics

    if len(folds.assignments) != ds.n_rows:
        raise ValueError("fold plan does not match dataset")
    per_fold, cms = [], []
    for k in range(folds.k):
        tr, te = folds.train_rows(k), folds.test_rows(k)
        model = fit_with_holdout(ds.X[tr], ds.labels[tr], cfg, seed=cfg.seed + k,
                                 validation_fraction=validation_fraction,
                                 feature_names=ds.feature_names)
        cm = confusion(ds.labels[te], model.predict_proba(ds.X[te]), threshold)
        cms.append(cm)
        per_fold.append(metrics(cm))
    return CVResult(per_fold, cms, mean_metrics(per_fold))
