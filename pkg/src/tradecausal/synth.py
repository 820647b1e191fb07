"""Synthetic transaction data with planted causal structure.

Generative model
----------------
* ``MarketBeta`` and ``PriceBook`` are independent standard normals and
  form the confounder ``u = (MarketBeta + PriceBook) / sqrt(2)``.
* Each correlation block ``(size, rho)`` adds equicorrelated standard
  normal features; ``n_noise_features`` adds independent ones.
* Each entry of ``effect_map`` is a 0/1 governance-style flag ``W`` with
  ``P(W = 1 | u) = sigmoid(confounding_strength * u)``.
* The outcome uses ``s = confounding_strength * u``:

  - ``continuous``: ``Y = s + sum_t tau_t(x) W_t + noise_sd * eps``
  - ``binary``: ``P(Y = 1) = sigmoid(s + sum_t tau_t(x) (W_t - 1/2))``, so
    ``tau`` is a log-odds effect and the true per-row effect recorded in the
    ground truth is the implied risk difference
  - ``threshold``: ``Y = 1[s + sum_t tau_t(x) (W_t - 1/2) > 0]``

With ``confounding_strength = 0`` the flags are randomised and the outcome
depends on nothing but the planted effects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .dataset import Dataset, FeatureSpec
from .errors import InvalidSpec, UnknownTreatment

CONFOUNDERS = ("MarketBeta", "PriceBook")
BLOCK_NAMES = (
    "Return", "ExcessReturn", "SpreadReturn", "TotalVolatility", "SMBBeta", "HMLBeta",
    "PriceSales", "PriceOpEarnings", "CurrentRatio", "DebtEquity", "ReturnOnAssets", "ReturnOnEquity",
)
OUTCOMES = ("continuous", "binary", "threshold")


@dataclass(frozen=True)
class Effect:
    """Planted effect of one flag.

    ``kind="constant"`` uses ``tau`` for every row. ``kind="split"`` uses
    ``tau_low`` where ``modifier <= cutoff`` and ``tau_high`` elsewhere; a
    ``cutoff`` of None means the sample median of the modifier, which puts
    exactly half of an even-sized sample in each group.
    """

    feature: str
    tau: float = 0.0
    kind: str = "constant"
    modifier: str | None = None
    cutoff: float | None = 0.0
    tau_low: float = 0.0
    tau_high: float = 0.0

    def row_effects(self, columns: dict[str, np.ndarray], n: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n, float(self.tau))
        m = columns[self.modifier]
        c = np.median(m) if self.cutoff is None else self.cutoff
        return np.where(m <= c, self.tau_low, self.tau_high).astype(np.float64)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class SynthSpec:
    n_rows: int
    effect_map: tuple[Effect, ...] = ()
    n_noise_features: int = 0
    confounding_strength: float = 0.0
    feature_correlation_blocks: tuple[tuple[int, float], ...] = ()
    seed: int = 0
    outcome: str = "binary"
    noise_sd: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "effect_map", tuple(
            e if isinstance(e, Effect) else Effect(**e) for e in self.effect_map))
        object.__setattr__(self, "feature_correlation_blocks", tuple(
            (int(s), float(r)) for s, r in self.feature_correlation_blocks))

    def to_dict(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "effect_map": [e.to_dict() for e in self.effect_map],
            "n_noise_features": self.n_noise_features,
            "confounding_strength": self.confounding_strength,
            "feature_correlation_blocks": [list(b) for b in self.feature_correlation_blocks],
            "seed": self.seed,
            "outcome": self.outcome,
            "noise_sd": self.noise_sd,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(eq=False)
class GroundTruth:
    """Per-row truth behind a generated dataset.

    ``mu1[t]``/``mu0[t]`` are the expected outcomes of every row with flag
    ``t`` set to 1/0 and everything else as observed; ``tau[t]`` is the
    per-row effect on the outcome scale (their difference).
    """

    outcome: np.ndarray
    treatment: dict[str, np.ndarray]
    propensity: dict[str, np.ndarray]
    mu1: dict[str, np.ndarray]
    mu0: dict[str, np.ndarray]
    tau: dict[str, np.ndarray]
    planted: dict[str, Effect]
    outcome_kind: str = "binary"

    def to_dict(self) -> dict:
        return {
            "outcome_kind": self.outcome_kind,
            "planted": {t: e.to_dict() for t, e in self.planted.items()},
            "true_ate": {t: true_ate(self, t) for t in self.planted},
            "outcome": self.outcome.tolist(),
            "tau": {t: v.tolist() for t, v in self.tau.items()},
            "propensity": {t: v.tolist() for t, v in self.propensity.items()},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")


def feature_names(spec: SynthSpec) -> list[str]:
    names = list(CONFOUNDERS)
    k = 0
    for b, (size, _) in enumerate(spec.feature_correlation_blocks):
        for i in range(size):
            names.append(BLOCK_NAMES[k] if k < len(BLOCK_NAMES) else f"Block{b}_{i}")
            k += 1
    names += [f"Noise{i + 1:02d}" for i in range(spec.n_noise_features)]
    return names + [e.feature for e in spec.effect_map]


def _validate(spec: SynthSpec) -> None:
    if spec.n_rows < 100:
        raise InvalidSpec("n_rows must be at least 100")
    if spec.outcome not in OUTCOMES:
        raise InvalidSpec(f"outcome must be one of {OUTCOMES}")
    if spec.confounding_strength < 0 or spec.noise_sd < 0 or spec.n_noise_features < 0:
        raise InvalidSpec("confounding_strength, noise_sd and n_noise_features must be non-negative")
    for size, rho in spec.feature_correlation_blocks:
        if size < 1 or not 0 <= rho < 1:
            raise InvalidSpec(f"bad correlation block ({size}, {rho})")
    names = feature_names(spec)
    if len(set(names)) != len(names):
        raise InvalidSpec("effect features collide with generated feature names")
    continuous = set(names) - {e.feature for e in spec.effect_map}
    for e in spec.effect_map:
        if e.kind not in ("constant", "split"):
            raise InvalidSpec(f"unknown heterogeneity kind {e.kind!r}")
        if e.kind == "split" and e.modifier not in continuous:
            raise InvalidSpec(f"effect modifier {e.modifier!r} is not a generated continuous feature")


def _outcome_mean(kind, s, flags, effects, planted_names):
    """Expected outcome given flag values (dict name -> 0/1 array)."""
    if kind == "continuous":
        return s + sum(effects[t] * flags[t] for t in planted_names)
    logit = s + sum(effects[t] * (flags[t] - 0.5) for t in planted_names)
    if kind == "binary":
        return expit(logit)
    return (logit > 0).astype(np.float64)


def generate(spec: SynthSpec) -> tuple[Dataset, GroundTruth]:
    """Draw a dataset from ``spec``; identical specs give identical output.

    For ``binary`` and ``threshold`` outcomes the labels are the outcome.
    For ``continuous`` outcomes the labels mark rows above the outcome
    median and the real-valued outcome is in ``truth.outcome``.
    """
    _validate(spec)
    rng = np.random.default_rng(spec.seed)
    n = spec.n_rows
    cols: dict[str, np.ndarray] = {}
    names = feature_names(spec)

    base = rng.standard_normal((n, len(CONFOUNDERS)))
    for j, name in enumerate(CONFOUNDERS):
        cols[name] = base[:, j]
    pos = len(CONFOUNDERS)
    for size, rho in spec.feature_correlation_blocks:
        shared = rng.standard_normal(n)
        own = rng.standard_normal((n, size))
        block = np.sqrt(rho) * shared[:, None] + np.sqrt(1 - rho) * own
        for i in range(size):
            cols[names[pos]] = block[:, i]
            pos += 1
    noise = rng.standard_normal((n, spec.n_noise_features))
    for i in range(spec.n_noise_features):
        cols[names[pos]] = noise[:, i]
        pos += 1

    u = (cols["MarketBeta"] + cols["PriceBook"]) / np.sqrt(2.0)
    s = spec.confounding_strength * u
    planted = {e.feature: e for e in spec.effect_map}
    propensity, flags = {}, {}
    for e in spec.effect_map:
        p = expit(s)
        propensity[e.feature] = p
        flags[e.feature] = (rng.random(n) < p).astype(np.float64)
        cols[e.feature] = flags[e.feature]
    effects = {t: e.row_effects(cols, n) for t, e in planted.items()}

    mean = _outcome_mean(spec.outcome, s, flags, effects, planted)
    if spec.outcome == "continuous":
        y = mean + spec.noise_sd * rng.standard_normal(n)
        labels = (y > np.median(y)).astype(np.int8)
    elif spec.outcome == "binary":
        y = (rng.random(n) < mean).astype(np.float64)
        labels = y.astype(np.int8)
    else:
        y = mean
        labels = y.astype(np.int8)

    mu1, mu0, tau = {}, {}, {}
    for t in planted:
        mu1[t] = _outcome_mean(spec.outcome, s, {**flags, t: np.ones(n)}, effects, planted)
        mu0[t] = _outcome_mean(spec.outcome, s, {**flags, t: np.zeros(n)}, effects, planted)
        tau[t] = effects[t] if spec.outcome == "continuous" else mu1[t] - mu0[t]

    X = np.column_stack([cols[nm] for nm in names])
    ds = Dataset(tuple(FeatureSpec(nm) for nm in names), X, labels, tuple(f"T{i:06d}" for i in range(n)), "id")
    truth = GroundTruth(y, flags, propensity, mu1, mu0, tau, planted, spec.outcome)
    return ds, truth


def true_ate(truth: GroundTruth, feature: str) -> float:
    """Mean of the per-row true effects of ``feature``."""
    if feature not in truth.tau:
        raise UnknownTreatment(feature)
    return float(np.mean(truth.tau[feature]))
