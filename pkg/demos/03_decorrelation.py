"""
Removing redundant features
===========================

Cluster features on Spearman correlation, keep the best-ranked member of
each cluster, then drop high-VIF features one at a time.
"""

from tradecausal.dataset import normalize
from tradecausal.decorrelate import cluster_features, select_representatives, spearman, vif_filter
from tradecausal.gbtree import BoostConfig, fit_with_holdout
from tradecausal.shapley import rank_features, shap_tree
from tradecausal.synth import Effect, SynthSpec, generate

ds, _ = generate(SynthSpec(2000, (Effect("IsDirector", 2.0),), n_noise_features=2,
                           feature_correlation_blocks=((3, 0.95), (3, 0.6)), confounding_strength=1.0, seed=3))
ds, _ = normalize(ds)

corr = spearman(ds)
dendro, clusters = cluster_features(corr, distance_threshold=0.3)
print("merges (a, b, height):")
for m in dendro.merges:
    print(f"  {m.a:2d} {m.b:2d} {m.height:.3f}")
print("clusters:", clusters)

model = fit_with_holdout(ds.X, ds.labels, BoostConfig(max_depth=4), seed=0, feature_names=ds.feature_names)
ranking = rank_features(shap_tree(model, ds, ds))
reps = select_representatives(clusters, ranking)
print("representatives:", reps)

kept, report = vif_filter(ds.select(reps), threshold=10.0)
print("removed by VIF:", report.iterations)
print("final VIFs:", {k: round(v, 2) for k, v in report.final.items()})

# VIF alone, on every feature, also thins the rho=0.95 block but keeps two of its members
_, tight = vif_filter(ds, threshold=2.0)
print("with threshold 2 on all features, removed:", [n for n, _ in tight.iterations])
