import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit
from scipy.stats import norm

from tradecausal.causal import (
    NUISANCE_BOOST,
    CausalConfig,
    CausalForestModel,
    NuisanceModels,
    TreeSample,
    aipw_scores,
    binarize_treatment,
    clip_propensity,
    draw_tree_sample,
    estimate_ate,
    estimate_cate,
    estimate_treatment,
    fit_causal_forest,
    fit_nuisance,
    grow_causal_tree,
    linear_margin,
    naive_ate,
    split_score,
    treatment_sweep,
)
from tradecausal.dataset import Dataset, FeatureSpec, make_folds
from tradecausal.errors import ArmTooSmall, DegenerateArm, PropensityOutOfRange, SchemaMismatch
from tradecausal.gbtree import LOGISTIC, SQUARED
from tradecausal.synth import Effect, SynthSpec, generate, true_ate

FAST = CausalConfig(n_trees=20, seed=1)


def make_ds(X, names=None):
    X = np.asarray(X, dtype=float)
    names = names or [f"x{j}" for j in range(X.shape[1])]
    return Dataset(tuple(FeatureSpec(n) for n in names), X, np.zeros(X.shape[0], dtype=int))


def synth(n=1000, tau=2.0, strength=0.5, seed=0, noise=3, **kw):
    effect = kw.pop("effect", None) or Effect("IsDirector", tau)
    return generate(SynthSpec(n, (effect,), n_noise_features=noise, confounding_strength=strength,
                              seed=seed, outcome="continuous", **kw))


def oracle_nuisance(truth, t, e=None):
    n = len(truth.outcome)
    e = truth.propensity[t] if e is None else np.full(n, e)
    return NuisanceModels(e, truth.mu1[t], truth.mu0[t], e)


# ---------------------------------------------------------------------------
# treatment binarization

def test_native_binary_column():
    ds = make_ds([[0.0], [1.0], [1.0], [0.0]], ["IsDirector"])
    ta = binarize_treatment(ds, "IsDirector")
    assert ta.W.tolist() == [0, 1, 1, 0] and ta.binarization == "native"


def test_standardized_flag_is_still_native():
    ds = make_ds([[-0.8], [1.2], [1.2], [-0.8]], ["IsDirector"])
    assert binarize_treatment(ds, "IsDirector").W.tolist() == [0, 1, 1, 0]


def test_median_split():
    ta = binarize_treatment(make_ds([[1.0], [2.0], [3.0], [4.0]]), "x0")
    assert ta.W.tolist() == [0, 0, 1, 1] and ta.cutoff == 2.5 and ta.binarization == "median"


def test_constant_column_is_degenerate():
    with pytest.raises(DegenerateArm):
        binarize_treatment(make_ds([[3.0], [3.0], [3.0]]), "x0")


# ---------------------------------------------------------------------------
# nuisances

def test_randomized_propensity_near_half():
    ds, truth = synth(n=1000, strength=0.0, seed=1)
    ta = binarize_treatment(ds, "IsDirector")
    nu = fit_nuisance(ds, ta, truth.outcome, make_folds(ta.W, 5, 0))
    assert abs(nu.e_hat.mean() - 0.5) < 0.05
    assert nu.e_hat.min() >= 0.05 and nu.e_hat.max() <= 0.95


def test_clip_contract():
    assert clip_propensity([0.999, 0.001, 0.4]).tolist() == [0.95, 0.05, 0.4]


def test_degenerate_outcome_model():
    ds, truth = synth(n=400, strength=0.0, seed=2)
    ta = binarize_treatment(ds, "IsDirector")
    Y = np.where(ta.W == 1, 1.0, truth.outcome)
    nu = fit_nuisance(ds, ta, Y, make_folds(ta.W, 5, 0))
    assert np.all(np.abs(nu.mu1_hat - 1.0) < 0.05)


def test_nuisances_are_out_of_fold():
    ds, truth = synth(n=400, strength=1.0, seed=3)
    ta = binarize_treatment(ds, "IsDirector")
    folds = make_folds(ta.W, 5, 0)
    base = fit_nuisance(ds, ta, truth.outcome, folds)
    # changing the outcomes of fold 0 must not move fold 0's own predictions
    rows = folds.test_rows(0)
    Y = truth.outcome.copy()
    Y[rows] += 100.0
    moved = fit_nuisance(ds, ta, Y, folds)
    assert np.array_equal(moved.mu1_hat[rows], base.mu1_hat[rows])
    assert np.array_equal(moved.mu0_hat[rows], base.mu0_hat[rows])
    assert np.array_equal(moved.e_hat, base.e_hat)
    assert not np.array_equal(moved.mu1_hat, base.mu1_hat)


def test_propensity_ignores_treatment_column():
    ds, truth = synth(n=400, strength=0.0, seed=4)
    ta = binarize_treatment(ds, "IsDirector")
    nu = fit_nuisance(ds, ta, truth.outcome, make_folds(ta.W, 5, 0))
    # with the flag visible the propensity model would separate the arms perfectly
    assert nu.e_hat[ta.W == 1].mean() - nu.e_hat[ta.W == 0].mean() < 0.2


@settings(max_examples=30, deadline=None)
@given(st.integers(8, 60), st.integers(1, 4), st.floats(0.01, 10.0), st.integers(0, 2 ** 31))
def test_ridge_margin_matches_augmented_least_squares(n, d, l2, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d)) * rng.uniform(0.5, 3, size=d) + rng.normal(size=d)
    y = rng.normal(size=n)
    X_te = rng.normal(size=(5, d))
    tr, te = linear_margin(X, y, X_te, SQUARED, l2)
    # oracle: penalised least squares as an augmented ordinary least squares problem
    mu, sd = X.mean(axis=0), X.std(axis=0)
    Z = np.c_[np.ones(n), (X - mu) / sd]
    A = np.r_[Z, np.c_[np.zeros((d, 1)), np.sqrt(l2) * np.eye(d)]]
    theta = np.linalg.lstsq(A, np.r_[y, np.zeros(d)], rcond=None)[0]
    assert np.allclose(tr, Z @ theta, atol=1e-8)
    assert np.allclose(te, np.c_[np.ones(5), (X_te - mu) / sd] @ theta, atol=1e-8)


def test_logistic_margin_recovers_coefficients():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(20_000, 2))
    y = (rng.random(20_000) < expit(0.5 + 1.5 * X[:, 0] - X[:, 1])).astype(float)
    tr, _ = linear_margin(X, y, X[:1], LOGISTIC, l2=1e-6)
    coef = np.linalg.lstsq(np.c_[np.ones(20_000), X], tr, rcond=None)[0]
    assert np.allclose(coef, [0.5, 1.5, -1.0], atol=0.1)
    # a constant column gets no weight
    tr2, _ = linear_margin(np.c_[X, np.ones(20_000)], y, np.zeros((1, 3)), LOGISTIC, l2=1e-6)
    assert np.allclose(tr, tr2, atol=1e-4)


def test_linear_baseline_reduces_nuisance_error():
    ds, truth = synth(n=2000, strength=0.5, seed=8)
    ta = binarize_treatment(ds, "IsDirector")
    folds = make_folds(ta.W, 5, 0)
    err = {}
    for linear in (False, True):
        nu = fit_nuisance(ds, ta, truth.outcome, folds, linear_baseline=linear)
        err[linear] = (np.mean((nu.e_hat - truth.propensity["IsDirector"]) ** 2),
                       np.mean((nu.mu0_hat - truth.mu0["IsDirector"]) ** 2))
    assert err[True][0] < err[False][0] and err[True][1] < err[False][1]


def test_arm_too_small():
    ds = make_ds(np.random.default_rng(0).normal(size=(30, 2)))
    W = np.r_[np.ones(3), np.zeros(27)]
    with pytest.raises(ArmTooSmall):
        fit_nuisance(ds, W, np.zeros(30), make_folds(W, 5, 0))


# ---------------------------------------------------------------------------
# scores

@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2 ** 31))
def test_aipw_matches_formula(n, seed):
    rng = np.random.default_rng(seed)
    Y, W = rng.normal(size=n), rng.integers(0, 2, n)
    e = rng.uniform(0.05, 0.95, n)
    m1, m0 = rng.normal(size=n), rng.normal(size=n)
    g = aipw_scores(Y, W, NuisanceModels(e, m1, m0, e))
    for i in range(n):
        if W[i] == 1:
            want = m1[i] - m0[i] + (Y[i] - m1[i]) / e[i]
        else:
            want = m1[i] - m0[i] - (Y[i] - m0[i]) / (1 - e[i])
        assert g[i] == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_zero_residuals_give_mu_difference():
    m1, m0 = np.array([2.0, 3.0, 1.0]), np.array([1.0, 1.0, 1.0])
    W = np.array([1, 0, 1])
    Y = np.where(W == 1, m1, m0)
    e = np.full(3, 0.5)
    assert aipw_scores(Y, W, NuisanceModels(e, m1, m0, e)).tolist() == (m1 - m0).tolist()


def test_treated_rows_ignore_control_residual():
    e = np.array([0.5])
    a = aipw_scores([1.0], [1], NuisanceModels(e, np.array([0.2]), np.array([0.0]), e))
    b = aipw_scores([1.0], [1], NuisanceModels(e, np.array([0.2]), np.array([7.0]), e))
    assert a[0] - b[0] == pytest.approx(7.0)  # mu0 only enters through the plug-in term


def test_propensity_out_of_range():
    e = np.array([0.0, 0.5])
    with pytest.raises(PropensityOutOfRange):
        aipw_scores([0.0, 1.0], [0, 1], NuisanceModels(e, np.zeros(2), np.zeros(2), e))


def test_planted_effect_recovered():
    ds, truth = synth(n=2000, tau=2.0, strength=0.5, seed=5)
    entry, _, gamma = estimate_treatment(ds, truth.outcome, "IsDirector", FAST, forest=False)
    assert entry.result.covers(2.0)
    assert entry.result.ate == pytest.approx(gamma.mean())


# ---------------------------------------------------------------------------
# trees

def test_split_score():
    assert split_score(1.0, 3.0) == 4.0


def exhaustive_root(X, gamma, W, sample, min_leaf):
    best = None
    S, E = sample.structure, sample.estimation
    for j in range(X.shape[1]):
        vals = np.unique(X[S, j])
        for lo, hi in zip(vals[:-1], vals[1:]):
            thr = lo + (hi - lo) / 2
            thr = thr if thr > lo else hi
            ls, le = X[S, j] < thr, X[E, j] < thr
            counts = [(W[E][m] == a).sum() for m in (le, ~le) for a in (0, 1)]
            if min(counts) < min_leaf:
                continue
            score = (gamma[S][ls].mean() - gamma[S][~ls].mean()) ** 2
            if best is None or score > best[0]:
                best = (score, j, thr)
    return best


@settings(max_examples=30, deadline=None)
@given(st.integers(40, 120), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_root_split_is_exhaustive_argmax(n, d, min_leaf, seed):
    rng = np.random.default_rng(seed)
    X = np.round(rng.normal(size=(n, d)), 2)
    W = rng.integers(0, 2, n).astype(float)
    gamma = rng.normal(size=n) + 2 * (X[:, 0] > 0)
    sample = draw_tree_sample(n, rng, 0.8, 0.8)
    tree = grow_causal_tree(X, gamma, W, sample, 1, min_leaf, None)
    best = exhaustive_root(X, gamma, W, sample, min_leaf)
    if best is None:
        assert tree.n_nodes == 1
    else:
        assert tree.gain[0] == pytest.approx(best[0], rel=1e-9)


def test_tree_leaves_valid_and_honest_values():
    ds, truth = synth(n=1500, seed=6)
    t = "IsDirector"
    W = truth.treatment[t]
    gamma = aipw_scores(truth.outcome, W, oracle_nuisance(truth, t))
    X = ds.drop([t]).X
    rng = np.random.default_rng(0)
    for _ in range(5):
        sample = draw_tree_sample(len(W), rng, 0.5, 0.8)
        assert len(np.intersect1d(sample.structure, sample.estimation)) == 0
        tree = grow_causal_tree(X, gamma, W, sample, 10, 5, 64)
        leaf_e = tree.apply(X[sample.estimation])
        for leaf in tree.leaves():
            rows = sample.estimation[leaf_e == leaf]
            assert (W[rows] == 1).sum() >= 5 and (W[rows] == 0).sum() >= 5
            assert tree.n_treated[leaf] == (W[rows] == 1).sum()
            assert tree.value[leaf] == pytest.approx(gamma[rows].mean(), abs=1e-12)


def test_honesty_under_estimation_perturbation_and_deletion():
    ds, truth = synth(n=1000, seed=7)
    t = "IsDirector"
    W = truth.treatment[t]
    gamma = aipw_scores(truth.outcome, W, oracle_nuisance(truth, t))
    X = ds.drop([t]).X
    rng = np.random.default_rng(1)
    for _ in range(10):
        sample = draw_tree_sample(len(W), rng, 0.5, 0.8)
        tree = grow_causal_tree(X, gamma, W, sample, 10, 5, 64)
        i = int(rng.choice(sample.estimation))
        g2 = gamma.copy()
        g2[i] += rng.normal(0, 50)
        assert grow_causal_tree(X, g2, W, sample, 10, 5, 64).structure() == tree.structure()
        # deleting an estimation row whose leaf has spare rows in its arm
        leaf_e = tree.apply(X[sample.estimation])
        arm_count = np.where(W[sample.estimation] == 1, tree.n_treated[leaf_e], tree.n_control[leaf_e])
        spare = np.flatnonzero(arm_count > 5)
        if len(spare):
            k = int(rng.choice(spare))
            cut = TreeSample(sample.structure, np.delete(sample.estimation, k))
            assert grow_causal_tree(X, gamma, W, cut, 10, 5, 64).structure() == tree.structure()


def test_no_valid_root_split_gives_single_leaf():
    X = np.arange(20.0)[:, None]
    W = np.r_[np.ones(3), np.zeros(17)]
    sample = TreeSample(np.arange(0, 20, 2), np.arange(1, 20, 2))
    tree = grow_causal_tree(X, np.arange(20.0), W, sample, 10, 5, None)
    assert tree.n_nodes == 1 and tree.value[0] == np.arange(1, 20, 2).mean()


# ---------------------------------------------------------------------------
# forests

@pytest.fixture(scope="module")
def forest_setup():
    ds, truth = synth(n=800, seed=8)
    t = "IsDirector"
    nu = oracle_nuisance(truth, t)
    X = ds.drop([t])
    model = fit_causal_forest(X, truth.treatment[t], truth.outcome, nu, CausalConfig(n_trees=15, seed=3))
    return ds, truth, X, nu, model


def test_cate_is_mean_of_trees(forest_setup):
    _, _, X, _, model = forest_setup
    per_tree = model.tree_predictions(X)
    assert np.array_equal(estimate_cate(model, X), np.mean(per_tree, axis=0))
    loop = np.zeros(X.n_rows)
    for tree in model.trees:
        for i in range(X.n_rows):
            node = 0
            while tree.feature[node] >= 0:
                node = tree.left[node] if X.X[i, tree.feature[node]] < tree.threshold[node] else tree.right[node]
            loop[i] += tree.value[node]
    np.testing.assert_allclose(estimate_cate(model, X), loop / len(model.trees), atol=1e-12)


def test_single_tree_and_duplicated_forest(forest_setup):
    _, _, X, _, model = forest_setup
    one = CausalForestModel(model.trees[:1], model.feature_names, model.config)
    assert np.array_equal(estimate_cate(one, X), model.trees[0].predict(X.X))
    doubled = CausalForestModel(model.trees * 2, model.feature_names, model.config)
    np.testing.assert_allclose(estimate_cate(doubled, X), estimate_cate(model, X), atol=1e-12)


def test_forest_determinism(forest_setup):
    _, truth, X, nu, model = forest_setup
    t = "IsDirector"
    again = fit_causal_forest(X, truth.treatment[t], truth.outcome, nu, CausalConfig(n_trees=15, seed=3))
    assert [a.structure() for a in again.trees] == [b.structure() for b in model.trees]
    assert np.array_equal(estimate_cate(again, X), estimate_cate(model, X))
    other = fit_causal_forest(X, truth.treatment[t], truth.outcome, nu, CausalConfig(n_trees=15, seed=4))
    assert [a.structure() for a in other.trees] != [b.structure() for b in model.trees]


def test_forest_schema_check(forest_setup):
    ds, _, _, _, model = forest_setup
    with pytest.raises(SchemaMismatch):
        estimate_cate(model, ds)


def test_homogeneous_effect_gives_flat_cate(forest_setup):
    _, truth, X, _, model = forest_setup
    cate = estimate_cate(model, X)
    assert cate.std() < 0.25 * 2.0
    assert abs(cate.mean() - 2.0) < 0.3
    assert all(t.depth() <= model.config.max_depth for t in model.trees)


def test_two_subgroups_are_separated():
    eff = Effect("IsDirector", kind="split", modifier="Noise01", cutoff=None, tau_low=0.0, tau_high=4.0)
    ds, truth = synth(n=1500, seed=9, effect=eff)
    t = "IsDirector"
    X = ds.drop([t])
    model = fit_causal_forest(X, truth.treatment[t], truth.outcome, oracle_nuisance(truth, t),
                              CausalConfig(n_trees=50, seed=1))
    cate = estimate_cate(model, X)
    hi = truth.tau[t] == 4.0
    assert abs((cate[hi].mean() - cate[~hi].mean()) - 4.0) < 1.0


# ---------------------------------------------------------------------------
# inference

def test_constant_scores():
    r = estimate_ate(np.full(50, 0.1))
    assert r.ate == 0.1 and r.se == 0.0 and r.p_value == 0.0 and r.stars == "***"
    assert estimate_ate(np.zeros(5)).p_value == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2 ** 31))
def test_normal_approximation(n, seed):
    g = np.random.default_rng(seed).normal(0.3, 1, n)
    r = estimate_ate(g)
    se = np.std(g, ddof=1) / np.sqrt(n)
    assert r.se == pytest.approx(se, rel=1e-12)
    assert r.ci_low == pytest.approx(r.ate - 1.959963984540054 * se, rel=1e-12, abs=1e-15)
    assert r.ci_high == pytest.approx(r.ate + 1.959963984540054 * se, rel=1e-12, abs=1e-15)
    assert r.p_value == pytest.approx(2 * norm.sf(abs(r.ate) / se), rel=1e-9, abs=1e-300)
    assert (r.stars == "***") == (r.p_value <= 0.05)


def test_naive_difference_in_means():
    Y = np.array([1.0, 2.0, 3.0, 10.0, 12.0])
    W = np.array([0, 0, 0, 1, 1])
    r = naive_ate(Y, W)
    assert r.ate == 9.0
    assert r.se == pytest.approx(np.sqrt(1.0 / 3 + 2.0 / 2))


def test_doubly_robust_with_wrong_propensity():
    covered = 0
    for rep in range(100):
        ds, truth = synth(n=500, tau=2.0, strength=0.0, seed=1000 + rep)
        g = aipw_scores(truth.outcome, truth.treatment["IsDirector"], oracle_nuisance(truth, "IsDirector", e=0.5))
        covered += estimate_ate(g).covers(2.0)
    assert covered >= 90


def test_naive_biased_under_confounding_while_aipw_is_not():
    ds, truth = synth(n=4000, tau=1.0, strength=2.0, seed=11)
    W = truth.treatment["IsDirector"]
    naive = naive_ate(truth.outcome, W)
    assert not naive.covers(true_ate(truth, "IsDirector"))
    g = aipw_scores(truth.outcome, W, oracle_nuisance(truth, "IsDirector"))
    assert estimate_ate(g).covers(true_ate(truth, "IsDirector"))


@pytest.mark.slow
def test_ci_coverage_monte_carlo():
    covered = 0
    for rep in range(200):
        ds, truth = synth(n=1000, tau=1.0, strength=0.5, seed=2000 + rep)
        entry, _, _ = estimate_treatment(ds, truth.outcome, "IsDirector", CausalConfig(seed=rep), forest=False)
        covered += entry.result.covers(1.0)
    assert 176 <= covered <= 198


@pytest.mark.slow
def test_noise_treatment_rarely_significant():
    significant = 0
    for rep in range(50):
        ds, truth = synth(n=1000, tau=1.0, strength=0.5, seed=3000 + rep)
        entry, _, _ = estimate_treatment(ds, truth.outcome, "Noise01", CausalConfig(seed=rep), forest=False)
        significant += entry.result.significant
    assert significant <= 5


# ---------------------------------------------------------------------------
# sweep

def test_sweep_order_errors_and_planted_cause():
    ds, truth = synth(n=1000, tau=1.5, strength=0.5, seed=12, noise=6)
    const = make_ds(np.ones((ds.n_rows, 1)), ["Flat"])
    full = Dataset(ds.columns + const.columns, np.column_stack([ds.X, const.X]), ds.labels)
    names = ["IsDirector", "Noise01", "Noise02", "Noise03", "Noise04", "Noise05", "Flat", "MarketBeta"]
    entries = treatment_sweep(full, truth.outcome, names, FAST)
    assert [e.treatment for e in entries] == names
    assert entries[6].result is None and entries[6].error.startswith("DegenerateArm")
    top = entries[0]
    assert top.result.significant and top.result.ate > 0
    assert top.n_trees == FAST.n_trees and top.cate_mean is not None


def test_sweep_is_deterministic_and_order_free():
    ds, truth = synth(n=600, seed=13)
    a = treatment_sweep(ds, truth.outcome, ["IsDirector", "Noise01"], FAST)
    b = treatment_sweep(ds, truth.outcome, ["Noise01", "IsDirector"], FAST)
    assert a[0].to_dict() == b[1].to_dict() and a[1].to_dict() == b[0].to_dict()


def test_config_round_trip():
    cfg = CausalConfig(n_trees=7, min_leaf=3)
    assert CausalConfig.from_dict(cfg.to_dict()) == cfg
    assert CausalConfig().nuisance == NUISANCE_BOOST
    with pytest.raises(ValueError):
        CausalConfig(honest_fraction=1.0)
