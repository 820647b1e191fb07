"""Honest causal forests on doubly-robust (AIPW) scores.

Each row gets the score

    Gamma_i = mu1(X_i) - mu0(X_i) + W_i (Y_i - mu1(X_i)) / e(X_i)
              - (1 - W_i) (Y_i - mu0(X_i)) / (1 - e(X_i))

from cross-fitted nuisance models, so ``mean(Gamma)`` estimates the average
treatment effect. A causal tree splits its structure sample where the
squared difference of mean scores between the children, ``(tau_L - tau_R)^2``,
is largest, subject to every child holding at least ``min_leaf`` treated and
``min_leaf`` control rows of the estimation sample; leaves store the mean
score of their estimation rows only. Forest CATE is the mean over trees.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit
from scipy.stats import norm

from ._tree import NodeArrays, TreeBuilder
from .dataset import Dataset, FoldPlan, make_folds
from .errors import (
    ArmTooSmall,
    DegenerateArm,
    PropensityOutOfRange,
    SchemaMismatch,
    TradeCausalError,
)
from .gbtree import LOGISTIC, SQUARED, BoostConfig, fit_with_holdout

Z95 = 1.959963984540054
DEFAULT_CLIP = 0.05
# shallow, patient boosting: the nuisances are smooth functions and cross-fitting
# multiplies the number of fits by 3 * n_folds per treatment
NUISANCE_BOOST = BoostConfig(max_trees=200, max_depth=2, learning_rate=0.1, early_stopping_rounds=20)


@dataclass(frozen=True)
class CausalConfig:
    n_trees: int = 1000
    max_depth: int = 10
    subsample_fraction: float = 0.5
    honest_fraction: float = 0.8  # share of each subsample used to choose splits
    min_leaf: int = 5
    max_candidates: int | None = 64  # thresholds per feature per node; None searches all
    n_folds: int = 5
    clip: float = DEFAULT_CLIP
    min_arm: int = 10
    alpha: float = 0.05
    seed: int = 0
    nuisance: BoostConfig = NUISANCE_BOOST
    linear_baseline: bool = True  # boost nuisances on top of a ridge / L2-logistic fit

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if not 0 < self.honest_fraction < 1:
            raise ValueError("honest_fraction must lie in (0, 1)")
        if not 0 < self.subsample_fraction <= 1:
            raise ValueError("subsample_fraction must lie in (0, 1]")
        if not 0 < self.clip < 0.5:
            raise ValueError("clip must lie in (0, 0.5)")
        if isinstance(self.nuisance, dict):
            object.__setattr__(self, "nuisance", BoostConfig.from_dict(self.nuisance))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nuisance"] = self.nuisance.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CausalConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class TreatmentAssignment:
    W: np.ndarray
    source_feature: str
    binarization: str  # "native" or "median"
    cutoff: float | None = None

    @property
    def n_treated(self) -> int:
        return int(self.W.sum())

    @property
    def n_control(self) -> int:
        return int(len(self.W) - self.W.sum())


def binarize_treatment(ds: Dataset, feature: str) -> TreatmentAssignment:
    """Turn a column into a 0/1 treatment.

    A column with exactly two distinct values is taken as a native flag
    (its larger value is "treated"; this also covers z-scored 0/1 columns).
    Anything else is split at the median: treated iff value > median.
    """
    x = ds.column(feature)
    vals = np.unique(x)
    if len(vals) == 2:
        W = (x == vals[1]).astype(np.int8)
        out = TreatmentAssignment(W, feature, "native")
    else:
        c = float(np.median(x))
        out = TreatmentAssignment((x > c).astype(np.int8), feature, "median", c)
    if out.n_treated == 0 or out.n_control == 0:
        raise DegenerateArm(f"treatment {feature!r} leaves an arm empty")
    return out


@dataclass(eq=False)
class NuisanceModels:
    e_hat: np.ndarray
    mu1_hat: np.ndarray
    mu0_hat: np.ndarray
    e_raw: np.ndarray
    clip: float = DEFAULT_CLIP


def clip_propensity(e, clip: float = DEFAULT_CLIP) -> np.ndarray:
    return np.clip(np.asarray(e, dtype=np.float64), clip, 1.0 - clip)


def _is_binary(y) -> bool:
    return bool(np.isin(np.unique(y), (0.0, 1.0)).all())


def linear_margin(X_tr, y_tr, X_te, objective: str, l2: float = 1.0):
    """Ridge (squared error) or L2-penalised logistic fit; margins on train and test rows.

    Columns are standardised on the training rows and the intercept is not
    penalised. Constant columns get a zero coefficient.
    """
    X_tr = np.asarray(X_tr, dtype=np.float64)
    X_te = np.asarray(X_te, dtype=np.float64)
    y = np.asarray(y_tr, dtype=np.float64)
    mu, sd = X_tr.mean(axis=0), X_tr.std(axis=0)
    sd = np.where(sd > 0, sd, np.inf)
    Z, Zt = (X_tr - mu) / sd, (X_te - mu) / sd
    n, d = Z.shape
    if objective == SQUARED:
        ybar = y.mean()
        beta = np.linalg.solve(Z.T @ Z + l2 * np.eye(d), Z.T @ (y - ybar))
        return ybar + Z @ beta, ybar + Zt @ beta

    def loss(theta):
        m = theta[0] + Z @ theta[1:]
        p = expit(m)
        val = np.sum(np.logaddexp(0.0, m) - y * m) + 0.5 * l2 * theta[1:] @ theta[1:]
        r = p - y
        return val, np.concatenate(([r.sum()], Z.T @ r + l2 * theta[1:]))

    p0 = np.clip(y.mean(), 1e-6, 1 - 1e-6)
    theta0 = np.zeros(d + 1)
    theta0[0] = np.log(p0 / (1 - p0))
    theta = minimize(loss, theta0, jac=True, method="L-BFGS-B").x
    return theta[0] + Z @ theta[1:], theta[0] + Zt @ theta[1:]


def _fit_predict(X_tr, y_tr, X_te, cfg: BoostConfig, objective: str, seed: int,
                 linear: bool = False) -> np.ndarray:
    """Out-of-sample predictions; constant targets short-circuit to the constant.

    With ``linear`` the trees boost on top of :func:`linear_margin`.
    Predictions are on the response scale (probabilities for the logistic
    objective).
    """
    y_tr = np.asarray(y_tr, dtype=np.float64)
    if len(y_tr) == 0:
        raise ArmTooSmall("a training fold has no rows in this arm")
    if np.all(y_tr == y_tr[0]) or len(y_tr) < 4:
        return np.full(len(X_te), float(np.mean(y_tr)))
    cfg = replace(cfg, objective=objective)
    if not linear:
        return fit_with_holdout(X_tr, y_tr, cfg, seed=seed).predict(X_te)
    off_tr, off_te = linear_margin(X_tr, y_tr, X_te, objective)
    model = fit_with_holdout(X_tr, y_tr, cfg, seed=seed, offset=off_tr)
    margin = off_te + model.predict_margin(X_te)
    return expit(margin) if objective == LOGISTIC else margin


def _arrays(W, Y):
    W = np.asarray(W.W if isinstance(W, TreatmentAssignment) else W, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    return W, Y


def fit_nuisance(ds: Dataset, W, Y, folds: FoldPlan, cfg: BoostConfig = NUISANCE_BOOST,
                 clip: float = DEFAULT_CLIP, min_arm: int = 10,
                 linear_baseline: bool = True) -> NuisanceModels:
    """Cross-fitted propensity and arm-wise outcome models.

    Every prediction for a row comes from models fit on the other folds.
    The propensity model never sees the treatment's source column. With
    ``linear_baseline`` each boosted model starts from a penalised linear
    fit, which trees alone approximate poorly at small n; the resulting
    nuisance errors would otherwise bias the doubly robust mean.
    """
    source = W.source_feature if isinstance(W, TreatmentAssignment) else None
    W, Y = _arrays(W, Y)
    n = ds.n_rows
    if len(W) != n or len(Y) != n or len(folds.assignments) != n:
        raise ValueError("W, Y and folds must have one entry per row")
    if W.sum() < min_arm or n - W.sum() < min_arm:
        raise ArmTooSmall(f"need at least {min_arm} rows per arm, got {int(W.sum())}/{int(n - W.sum())}")
    X = (ds.drop([source]) if source in ds.feature_names else ds).X
    outcome_obj = LOGISTIC if _is_binary(Y) else SQUARED

    e_raw = np.empty(n)
    mu1 = np.empty(n)
    mu0 = np.empty(n)
    for k in range(folds.k):
        tr, te = folds.train_rows(k), folds.test_rows(k)
        seed = cfg.seed + 7919 * k
        e_raw[te] = _fit_predict(X[tr], W[tr], X[te], cfg, LOGISTIC, seed, linear_baseline)
        t1, t0 = tr[W[tr] == 1], tr[W[tr] == 0]
        mu1[te] = _fit_predict(X[t1], Y[t1], X[te], cfg, outcome_obj, seed + 1, linear_baseline)
        mu0[te] = _fit_predict(X[t0], Y[t0], X[te], cfg, outcome_obj, seed + 2, linear_baseline)
    return NuisanceModels(clip_propensity(e_raw, clip), mu1, mu0, e_raw, clip)


def aipw_scores(Y, W, nuisance: NuisanceModels) -> np.ndarray:
    W, Y = _arrays(W, Y)
    e, m1, m0 = nuisance.e_hat, nuisance.mu1_hat, nuisance.mu0_hat
    if not (len(Y) == len(W) == len(e) == len(m1) == len(m0)):
        raise ValueError("Y, W and nuisance predictions must have equal length")
    if np.any(e <= 0) or np.any(e >= 1):
        raise PropensityOutOfRange("propensity scores must lie strictly inside (0, 1)")
    return (m1 - m0) + W * (Y - m1) / e - (1.0 - W) * (Y - m0) / (1.0 - e)


# ---------------------------------------------------------------------------
# trees

@dataclass(eq=False)
class CausalTree(NodeArrays):
    """Node arrays plus, per node, estimation-sample arm counts and the split's delta-tau^2."""

    n_treated: np.ndarray = None
    n_control: np.ndarray = None
    gain: np.ndarray = None

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)


@dataclass(frozen=True, eq=False)
class TreeSample:
    structure: np.ndarray  # row indices (with bootstrap multiplicity)
    estimation: np.ndarray


def split_score(tau_left: float, tau_right: float) -> float:
    return (tau_left - tau_right) ** 2


def _candidates(sorted_unique: np.ndarray, max_candidates: int | None) -> np.ndarray:
    k = len(sorted_unique) - 1
    if k < 1:
        return np.empty(0)
    if max_candidates is None or k <= max_candidates:
        pos = np.arange(k)
    else:
        pos = np.unique(np.round(np.linspace(0, k - 1, max_candidates)).astype(np.int64))
    lo, hi = sorted_unique[pos], sorted_unique[pos + 1]
    mid = lo + (hi - lo) / 2.0
    return np.where(mid > lo, mid, hi)


def _best_split(Xs, Gs, Xe, We, min_leaf, max_candidates):
    """Return (feature, threshold, score) of the best admissible split or None."""
    best = None
    n_t_tot = int(We.sum())
    n_c_tot = len(We) - n_t_tot
    if n_t_tot < 2 * min_leaf or n_c_tot < 2 * min_leaf or len(Gs) < 2:
        return None
    g_tot = Gs.sum()
    for j in range(Xs.shape[1]):
        order = np.argsort(Xs[:, j], kind="stable")
        vs = Xs[order, j]
        thr = _candidates(np.unique(vs), max_candidates)
        if len(thr) == 0:
            continue
        cg = np.concatenate([[0.0], np.cumsum(Gs[order])])
        nl = np.searchsorted(vs, thr, side="left")
        nr = len(vs) - nl
        et = np.sort(Xe[We == 1, j])
        ec = np.sort(Xe[We == 0, j])
        tl = np.searchsorted(et, thr, side="left")
        cl = np.searchsorted(ec, thr, side="left")
        ok = ((nl >= 1) & (nr >= 1) & (tl >= min_leaf) & (n_t_tot - tl >= min_leaf)
              & (cl >= min_leaf) & (n_c_tot - cl >= min_leaf))
        if not ok.any():
            continue
        sl = cg[nl]
        with np.errstate(divide="ignore", invalid="ignore"):
            score = (sl / nl - (g_tot - sl) / nr) ** 2
        score = np.where(ok, score, -np.inf)
        k = int(np.argmax(score))
        if best is None or score[k] > best[2]:
            best = (j, float(thr[k]), float(score[k]))
    return best


def grow_causal_tree(X: np.ndarray, gamma: np.ndarray, W: np.ndarray, sample: TreeSample,
                     max_depth: int, min_leaf: int, max_candidates: int | None) -> CausalTree:
    """Grow one honest tree: splits from ``sample.structure``, leaf values from ``sample.estimation``."""
    b = TreeBuilder()
    counts_t, counts_c, gains = [], [], []

    def new_node():
        node = b.add()
        counts_t.append(0)
        counts_c.append(0)
        gains.append(0.0)
        return node

    root = new_node()
    stack = [(root, sample.structure, sample.estimation, 0)]
    while stack:
        node, s_idx, e_idx, depth = stack.pop()
        We = W[e_idx]
        counts_t[node] = int(We.sum())
        counts_c[node] = len(e_idx) - counts_t[node]
        b.value[node] = float(gamma[e_idx].mean()) if len(e_idx) else float("nan")
        if depth >= max_depth:
            continue
        best = _best_split(X[s_idx], gamma[s_idx], X[e_idx], We, min_leaf, max_candidates)
        if best is None:
            continue
        f, thr, score = best
        left, right = b.split(node, f, thr)
        for _ in (left, right):
            counts_t.append(0)
            counts_c.append(0)
            gains.append(0.0)
        gains[node] = score
        s_left = X[s_idx, f] < thr
        e_left = X[e_idx, f] < thr
        # right child pushed first so the left subtree is numbered first
        stack.append((right, s_idx[~s_left], e_idx[~e_left], depth + 1))
        stack.append((left, s_idx[s_left], e_idx[e_left], depth + 1))
    return b.arrays(CausalTree, n_treated=np.asarray(counts_t, dtype=np.int64),
                    n_control=np.asarray(counts_c, dtype=np.int64), gain=np.asarray(gains))


def draw_tree_sample(n: int, rng: np.random.Generator, subsample_fraction: float,
                     honest_fraction: float) -> TreeSample:
    """Bootstrap, keep a fraction of the draws, then split by row id into structure/estimation.

    Splitting by id keeps the two halves disjoint even when the bootstrap
    repeats a row.
    """
    boot = rng.integers(0, n, size=n)
    m = max(2, int(round(subsample_fraction * n)))
    sub = boot[rng.permutation(n)[:m]]
    ids = rng.permutation(np.unique(sub))
    k = int(round(honest_fraction * len(ids)))
    k = min(max(k, 1), len(ids) - 1)
    in_structure = np.zeros(n, dtype=bool)
    in_structure[ids[:k]] = True
    mask = in_structure[sub]
    return TreeSample(np.sort(sub[mask]), np.sort(sub[~mask]))


@dataclass(eq=False)
class CausalForestModel:
    trees: list[CausalTree]
    feature_names: list[str]
    config: CausalConfig
    samples: list[TreeSample] = field(default_factory=list)
    seed: int = 0

    @property
    def subsample_fraction(self) -> float:
        return self.config.subsample_fraction

    @property
    def honest_fraction(self) -> float:
        return self.config.honest_fraction

    def tree_predictions(self, X) -> np.ndarray:
        """(n_trees, n_rows) matrix of per-tree CATE estimates."""
        X = self._matrix(X)
        return np.stack([t.predict(X) for t in self.trees])

    def _matrix(self, X) -> np.ndarray:
        if isinstance(X, Dataset):
            if X.feature_names != list(self.feature_names):
                raise SchemaMismatch(f"dataset columns {X.feature_names} != forest features {self.feature_names}")
            return X.X
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise SchemaMismatch(f"expected {len(self.feature_names)} columns")
        return X


def fit_causal_forest(ds: Dataset, W, Y, nuisance: NuisanceModels, cfg: CausalConfig = CausalConfig()
                      ) -> CausalForestModel:
    """Grow ``cfg.n_trees`` honest causal trees on the AIPW scores.

    Per-tree generators are spawned from ``cfg.seed`` so tree b depends
    only on the seed, b, the data and the scores.
    """
    W_arr, Y_arr = _arrays(W, Y)
    gamma = aipw_scores(Y_arr, W_arr, nuisance)
    X = np.ascontiguousarray(ds.X)
    n = ds.n_rows
    if n < 4:
        raise ValueError("too few rows to grow a causal forest")
    trees, samples = [], []
    for child in np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees):
        rng = np.random.default_rng(child)
        sample = draw_tree_sample(n, rng, cfg.subsample_fraction, cfg.honest_fraction)
        samples.append(sample)
        trees.append(grow_causal_tree(X, gamma, W_arr, sample, cfg.max_depth, cfg.min_leaf, cfg.max_candidates))
    return CausalForestModel(trees, ds.feature_names, cfg, samples, cfg.seed)


def estimate_cate(model: CausalForestModel, ds) -> np.ndarray:
    """Forest CATE per row: the arithmetic mean of the per-tree leaf estimates."""
    return np.mean(model.tree_predictions(ds), axis=0)


# ---------------------------------------------------------------------------
# inference

@dataclass(frozen=True)
class AteResult:
    ate: float
    se: float
    ci_low: float
    ci_high: float
    p_value: float
    n_treated: int = 0
    n_control: int = 0
    alpha: float = 0.05

    @property
    def significant(self) -> bool:
        return self.p_value <= self.alpha

    @property
    def stars(self) -> str:
        return "***" if self.significant else ""

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stars"] = self.stars
        return d


def _normal_result(est: float, se: float, n_t: int, n_c: int, alpha: float) -> AteResult:
    if se > 0:
        p = float(2.0 * norm.sf(abs(est) / se))
    else:
        p = 0.0 if est != 0 else 1.0
    return AteResult(float(est), float(se), float(est - Z95 * se), float(est + Z95 * se), p, n_t, n_c, alpha)


def estimate_ate(scores, W=None, alpha: float = 0.05) -> AteResult:
    """Mean score with a normal-approximation 95% CI and two-sided p-value.

    ``se = std(scores, ddof=1) / sqrt(n)``. ``W`` is only used for the
    arm counts in the result.
    """
    g = np.asarray(scores, dtype=np.float64)
    n = len(g)
    if n < 2:
        raise ValueError("need at least two scores")
    if np.all(g == g[0]):
        est, se = float(g[0]), 0.0
    else:
        est, se = float(np.mean(g)), float(np.std(g, ddof=1) / np.sqrt(n))
    if W is not None:
        W = np.asarray(W.W if isinstance(W, TreatmentAssignment) else W)
        n_t = int(W.sum())
        n_c = len(W) - n_t
    else:
        n_t = n_c = 0
    return _normal_result(est, se, n_t, n_c, alpha)


def naive_ate(Y, W, alpha: float = 0.05) -> AteResult:
    """Unadjusted difference in means with the unpooled standard error."""
    W, Y = _arrays(W, Y)
    y1, y0 = Y[W == 1], Y[W == 0]
    se = float(np.sqrt(y1.var(ddof=1) / len(y1) + y0.var(ddof=1) / len(y0)))
    return _normal_result(float(y1.mean() - y0.mean()), se, len(y1), len(y0), alpha)


# ---------------------------------------------------------------------------
# sweep over treatments

@dataclass(eq=False)
class SweepEntry:
    treatment: str
    result: AteResult | None
    error: str | None = None
    binarization: str | None = None
    n_treated: int = 0
    n_control: int = 0
    cate_mean: float | None = None
    cate_sd: float | None = None
    n_trees: int = 0

    def to_dict(self) -> dict:
        return {
            "treatment": self.treatment,
            "result": None if self.result is None else self.result.to_dict(),
            "error": self.error,
            "binarization": self.binarization,
            "n_treated": self.n_treated,
            "n_control": self.n_control,
            "cate_mean": self.cate_mean,
            "cate_sd": self.cate_sd,
            "n_trees": self.n_trees,
        }


def treatment_seed(master: int, treatment: str) -> int:
    """Seed for one treatment, independent of its position in the sweep."""
    return int(np.random.SeedSequence([master, zlib.crc32(treatment.encode("utf-8"))]).generate_state(1)[0])


def estimate_treatment(ds: Dataset, Y, treatment: str, cfg: CausalConfig = CausalConfig(),
                       forest: bool = True) -> tuple[SweepEntry, CausalForestModel | None, np.ndarray]:
    """Binarize, cross-fit nuisances, grow the forest and estimate the ATE for one treatment.

    The other columns of ``ds`` act as controls. Returns the summary entry,
    the forest (None if ``forest`` is False) and the AIPW scores.
    """
    seed = treatment_seed(cfg.seed, treatment)
    ta = binarize_treatment(ds, treatment)
    controls = ds.drop([treatment])
    folds = make_folds(ta.W, min(cfg.n_folds, ds.n_rows), seed)
    nuis_cfg = replace(cfg.nuisance, seed=seed % (2 ** 31))
    nuis = fit_nuisance(ds, ta, Y, folds, nuis_cfg, cfg.clip, cfg.min_arm, cfg.linear_baseline)
    gamma = aipw_scores(Y, ta, nuis)
    result = estimate_ate(gamma, ta, cfg.alpha)
    entry = SweepEntry(treatment, result, None, ta.binarization, ta.n_treated, ta.n_control)
    model = None
    if forest:
        model = fit_causal_forest(controls, ta, Y, nuis, replace(cfg, seed=seed))
        cate = estimate_cate(model, controls)
        entry.cate_mean, entry.cate_sd, entry.n_trees = float(cate.mean()), float(cate.std()), len(model.trees)
    return entry, model, gamma


def treatment_sweep(ds: Dataset, Y, treatments: Sequence[str], cfg: CausalConfig = CausalConfig(),
                    forest: bool = True) -> list[SweepEntry]:
    """Run :func:`estimate_treatment` for each treatment, in the given order.

    A treatment that fails (empty arm, too-small arm, ...) is recorded with
    its error and the sweep moves on.
    """
    out = []
    for t in treatments:
        try:
            entry, _, _ = estimate_treatment(ds, Y, t, cfg, forest)
        except (TradeCausalError, KeyError, ValueError) as exc:
            entry = SweepEntry(t, None, f"{type(exc).__name__}: {exc}")
        out.append(entry)
    return out
