"""Command-line pipeline: classify -> SHAP rank -> decorrelate -> re-rank -> causal sweep.

Run directory layout::

    <out>/metrics.csv, shap_ranking.csv, beeswarm.csv, heatmap.csv,
          dendrogram.json, vif.json, ate.csv, manifest.json
    <out>/stages/   intermediate files that let the stage commands compose

Every stage reads its inputs from the run directory and writes its outputs
back, and ``run`` is nothing more than the four stages in order, so running
the stages one by one gives byte-identical files.

Seeds: stage ``s`` uses the first word of
``numpy.random.SeedSequence([master, crc32(s)])``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .causal import CausalConfig, treatment_sweep
from .dataset import (
    Dataset,
    balanced_subsample,
    constant_columns,
    dump_schema,
    emit_csv,
    ingest_csv,
    load_schema,
    make_folds,
    normalize,
    one_hot,
    stratified_split,
)
from .decorrelate import cluster_features, select_representatives, spearman, vif_filter
from .errors import InvalidSpec, MissingInput, StageFailure, TradeCausalError
from .gbtree import BoostConfig, TreeEnsemble, cross_validate, fit_with_holdout
from .report import (
    ARTIFACT_FILES,
    ate_table,
    beeswarm_table,
    dumps_json,
    emit_report,
    heatmap_table,
    metrics_table,
    ranking_table,
)
from .shapley import (
    DEFAULT_BACKGROUND_CAP,
    DEFAULT_THRESHOLD,
    FeatureRanking,
    ShapMatrix,
    beeswarm_export,
    rank_features,
    shap_tree,
)
from .synth import SynthSpec, generate

log = logging.getLogger("tradecausal")

STAGES = ("classify", "shap", "decorrelate", "causal")
SEED_NAMES = ("balance", "folds", "boost", "split", "shap", "causal")
LOG_ENV = "TRADECAUSAL_LOG"


def stage_seed(master: int, name: str) -> int:
    return int(np.random.SeedSequence([master, zlib.crc32(name.encode("utf-8"))]).generate_state(1)[0])


def derive_seeds(master: int) -> dict[str, int]:
    out = {"master": int(master)}
    out.update({name: stage_seed(master, name) for name in SEED_NAMES})
    return out


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs. Paths in ``data`` are relative to ``base_dir``.

    ``data`` is either ``{"csv": ..., "schema": ..., "label_column": ...,
    "id_column": ...}`` or ``{"synth": <SynthSpec fields>}``.
    """

    data: dict
    boost: BoostConfig = BoostConfig()
    k_folds: int = 5
    test_fraction: float = 0.2
    balance: bool = True
    shap_threshold: float = DEFAULT_THRESHOLD
    shap_background: int = DEFAULT_BACKGROUND_CAP
    cluster_threshold: float = 0.3
    linkage: str = "average"
    vif_threshold: float = 10.0
    causal: CausalConfig = CausalConfig()
    max_treatments: int | None = None
    seed: int = 0
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if isinstance(self.boost, dict):
            object.__setattr__(self, "boost", BoostConfig.from_dict(self.boost))
        if isinstance(self.causal, dict):
            object.__setattr__(self, "causal", CausalConfig.from_dict(self.causal))
        if ("synth" in self.data) == ("csv" in self.data):
            raise InvalidSpec("data must name exactly one of 'csv' or 'synth'")
        if "csv" in self.data and "schema" not in self.data:
            raise InvalidSpec("csv data needs a 'schema' file")
        if self.k_folds < 2:
            raise InvalidSpec("k_folds must be at least 2")
        if not 0 < self.test_fraction < 1:
            raise InvalidSpec("test_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        """Resolved configuration as echoed in the manifest (without ``base_dir``)."""
        return {
            "data": self.data,
            "boost": self.boost.to_dict(),
            "k_folds": self.k_folds,
            "test_fraction": self.test_fraction,
            "balance": self.balance,
            "shap_threshold": self.shap_threshold,
            "shap_background": self.shap_background,
            "cluster_threshold": self.cluster_threshold,
            "linkage": self.linkage,
            "vif_threshold": float(self.vif_threshold),
            "causal": self.causal.to_dict(),
            "max_treatments": self.max_treatments,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "PipelineConfig":
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown config keys: {sorted(unknown)}")
        return cls(**d, base_dir=str(base_dir))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise MissingInput("config", str(path)) from None
        return cls.from_dict(d, base_dir=path.parent)

    def path(self, key: str) -> Path:
        p = Path(self.data[key])
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def seeds(self) -> dict[str, int]:
        return derive_seeds(self.seed)


# ---------------------------------------------------------------------------
# run directory helpers

class RunDir:
    def __init__(self, out):
        self.root = Path(out)
        self.stages = self.root / "stages"

    def prepare(self) -> None:
        self.stages.mkdir(parents=True, exist_ok=True)

    def need(self, stage: str, *names: str) -> list[Path]:
        paths = [self.stages / n for n in names]
        for p in paths:
            if not p.exists():
                raise MissingInput(stage, str(p))
        return paths

    def write(self, name: str, text: str) -> None:
        (self.stages / name).write_text(text, encoding="utf-8", newline="")

    def write_json(self, name: str, obj) -> None:
        self.write(name, dumps_json(obj))

    def read_json(self, stage: str, name: str):
        (p,) = self.need(stage, name)
        return json.loads(p.read_text(encoding="utf-8"))

    def artifact(self, name: str, text: str) -> None:
        assert name in ARTIFACT_FILES
        (self.root / name).write_text(text, encoding="utf-8", newline="")

    def load_data(self, stage: str) -> Dataset:
        data, schema, meta = self.need(stage, "data.csv", "schema.json", "data.json")
        id_column = json.loads(meta.read_text(encoding="utf-8"))["id_column"]
        return ingest_csv(data, load_schema(schema), "label", id_column)

    def load_model(self, stage: str, name: str) -> TreeEnsemble:
        (p,) = self.need(stage, name)
        return TreeEnsemble.load(p)

    def load_ranking(self, stage: str, name: str) -> FeatureRanking:
        d = self.read_json(stage, name)
        return FeatureRanking(tuple((e["feature"], e["score"]) for e in d["entries"]), d["threshold"])

    def load_split(self, stage: str) -> tuple[np.ndarray, np.ndarray]:
        d = self.read_json(stage, "split.json")
        return np.asarray(d["train"], dtype=np.int64), np.asarray(d["test"], dtype=np.int64)

    def completed(self) -> list[str]:
        p = self.root / "manifest.json"
        if not p.exists():
            return []
        try:
            return list(json.loads(p.read_text(encoding="utf-8")).get("stages_completed", []))
        except json.JSONDecodeError:
            return []


def _ranking_json(r: FeatureRanking) -> dict:
    return {"threshold": r.threshold, "entries": [{"feature": n, "score": s} for n, s in r.entries],
            "retained": list(r.retained)}


def load_input(cfg: PipelineConfig) -> Dataset:
    if "synth" in cfg.data:
        ds, _ = generate(SynthSpec.from_dict(cfg.data["synth"]))
        return ds
    for key in ("csv", "schema"):
        if not cfg.path(key).exists():
            raise MissingInput("classify", str(cfg.path(key)))
    return ingest_csv(cfg.path("csv"), load_schema(cfg.path("schema")),
                      cfg.data.get("label_column", "label"), cfg.data.get("id_column"))


def prepare(ds: Dataset, cfg: PipelineConfig) -> Dataset:
    """One-hot, balance, drop constant columns, z-score."""
    seeds = cfg.seeds
    ds = one_hot(ds)
    if cfg.balance:
        ds = balanced_subsample(ds, seeds["balance"])
    const = constant_columns(ds)
    if const:
        log.info("dropping constant columns %s", const)
        ds = ds.drop(const)
    ds, _ = normalize(ds)
    return ds


def _fit(ds: Dataset, rows: np.ndarray, cfg: PipelineConfig) -> TreeEnsemble:
    seed = cfg.seeds["boost"]
    boost = replace(cfg.boost, seed=seed % (2 ** 31))
    return fit_with_holdout(ds.X[rows], ds.labels[rows], boost, seed=seed, feature_names=ds.feature_names)


def _shap(model: TreeEnsemble, ds: Dataset, test: np.ndarray, cfg: PipelineConfig) -> ShapMatrix:
    part = ds.take(test)
    return shap_tree(model, part, part, max_background=cfg.shap_background, seed=cfg.seeds["shap"])


# ---------------------------------------------------------------------------
# stages

def stage_classify(cfg: PipelineConfig, run: RunDir) -> None:
    """Prepare the data, report k-fold metrics, fit the model used for SHAP."""
    seeds = cfg.seeds
    ds = prepare(load_input(cfg), cfg)
    run.write("data.csv", emit_csv(ds))
    dump_schema(ds.columns, run.stages / "schema.json")
    run.write_json("data.json", {"id_column": ds.id_column, "n_rows": ds.n_rows})

    folds = make_folds(ds, cfg.k_folds, seeds["folds"])
    cv = cross_validate(ds, folds, replace(cfg.boost, seed=seeds["boost"] % (2 ** 31)))
    rows = [(f"fold{k + 1}", m) for k, m in enumerate(cv.folds)] + [("mean", cv.mean)]
    run.artifact("metrics.csv", metrics_table(rows))

    train, test = stratified_split(ds.labels, cfg.test_fraction, seeds["split"])
    run.write_json("split.json", {"train": train.tolist(), "test": test.tolist()})
    _fit(ds, train, cfg).save(run.stages / "model.json")


def stage_shap(cfg: PipelineConfig, run: RunDir) -> None:
    """SHAP values of the held-out split and the first ranking."""
    ds = run.load_data("shap")
    model = run.load_model("shap", "model.json")
    _, test = run.load_split("shap")
    sm = _shap(model, ds, test, cfg)
    sm.save(run.stages / "shap_before.csv", run.stages / "shap_before.json")
    run.write_json("ranking_before.json", _ranking_json(rank_features(sm, cfg.shap_threshold)))


def stage_decorrelate(cfg: PipelineConfig, run: RunDir) -> None:
    """Cluster, keep one representative per cluster, VIF-filter, refit and re-rank."""
    ds = run.load_data("decorrelate")
    before = run.load_ranking("decorrelate", "ranking_before.json")
    sm_before = ShapMatrix.load(*run.need("decorrelate", "shap_before.csv", "shap_before.json"))
    train, test = run.load_split("decorrelate")

    corr = spearman(ds)
    dendro, assignment = cluster_features(corr, cfg.cluster_threshold, cfg.linkage)
    reps = select_representatives(assignment, before)
    kept, vif = vif_filter(ds.select(reps), cfg.vif_threshold)
    run.artifact("heatmap.csv", heatmap_table(corr))
    d = dendro.to_dict()
    d["threshold"] = cfg.cluster_threshold
    d["clusters"] = assignment
    d["representatives"] = reps
    run.artifact("dendrogram.json", dumps_json(d))
    run.artifact("vif.json", dumps_json(vif.to_dict()))

    reduced = ds.select(kept.feature_names)
    model = _fit(reduced, train, cfg)
    model.save(run.stages / "model_after.json")
    sm_after = _shap(model, reduced, test, cfg)
    sm_after.save(run.stages / "shap_after.csv", run.stages / "shap_after.json")
    after = rank_features(sm_after, cfg.shap_threshold)
    run.write_json("ranking_after.json", _ranking_json(after))

    run.artifact("shap_ranking.csv", ranking_table([("before", before), ("after", after)]))
    test_ds = ds.take(test)
    run.artifact("beeswarm.csv", beeswarm_table([
        ("before", beeswarm_export(sm_before, test_ds, before)),
        ("after", beeswarm_export(sm_after, test_ds, after)),
    ]))
    treatments = list(after.retained)
    if cfg.max_treatments is not None:
        treatments = treatments[:cfg.max_treatments]
    run.write_json("treatments.json", {"treatments": treatments, "features": kept.feature_names})


def stage_causal(cfg: PipelineConfig, run: RunDir) -> None:
    """AIPW ATE and causal-forest CATE summary for each retained treatment.

    The outcome is the class label; the other retained features are the
    controls.
    """
    ds = run.load_data("causal")
    spec = run.read_json("causal", "treatments.json")
    sub = ds.select(spec["features"])
    causal = replace(cfg.causal, seed=cfg.seeds["causal"])
    entries = treatment_sweep(sub, ds.labels.astype(np.float64), spec["treatments"], causal)
    run.artifact("ate.csv", ate_table(entries))
    run.write_json("cate.json", [e.to_dict() for e in entries])


STAGE_FUNCS = {
    "classify": stage_classify,
    "shap": stage_shap,
    "decorrelate": stage_decorrelate,
    "causal": stage_causal,
}


def run_stages(cfg: PipelineConfig, out, stages=STAGES) -> Path:
    """Run ``stages`` in order into ``out`` and write the manifest.

    The manifest is written even when a stage fails; the failure is then
    re-raised as :class:`StageFailure`.
    """
    run = RunDir(out)
    run.prepare()
    done = [s for s in run.completed() if s in STAGES and s not in stages]
    for stage in stages:
        log.info("stage %s", stage)
        try:
            STAGE_FUNCS[stage](cfg, run)
        except Exception as exc:
            done = [s for s in STAGES if s in done]
            emit_report(run.root, {}, cfg.to_dict(), cfg.seeds, done, status="failed",
                        failed_stage=stage, error=f"{type(exc).__name__}: {exc}")
            raise StageFailure(stage, exc) from exc
        done.append(stage)
    done = [s for s in STAGES if s in done]
    return emit_report(run.root, {}, cfg.to_dict(), cfg.seeds, done)


def run_pipeline(cfg: PipelineConfig, out) -> Path:
    """All four stages; returns the manifest path."""
    return run_stages(cfg, out, STAGES)


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="pipeline config JSON file")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--k-folds", type=int, dest="k_folds")
    p.add_argument("--shap-threshold", type=float, dest="shap_threshold")
    p.add_argument("--cluster-threshold", type=float, dest="cluster_threshold")
    p.add_argument("--linkage", choices=("single", "complete", "average"))
    p.add_argument("--vif-threshold", type=float, dest="vif_threshold")
    p.add_argument("--n-trees", type=int, dest="n_trees", help="causal forest size")
    p.add_argument("--max-treatments", type=int, dest="max_treatments")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tradecausal", description="Insider-trade classification and causal analysis pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add_common(sub.add_parser("run", help="run every stage"))
    for stage in STAGES:
        _add_common(sub.add_parser(stage, help=(STAGE_FUNCS[stage].__doc__ or "").splitlines()[0]))
    return parser


def config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    over = {k: getattr(args, k) for k in ("k_folds", "shap_threshold", "cluster_threshold", "linkage",
                                          "vif_threshold", "max_treatments") if getattr(args, k) is not None}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.n_trees is not None:
        over["causal"] = replace(cfg.causal, n_trees=args.n_trees)
    return replace(cfg, **over)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except (TradeCausalError, TypeError, ValueError, json.JSONDecodeError) as exc:
        print(f"tradecausal: bad config: {exc}", file=sys.stderr)
        return 1
    stages = STAGES if args.command == "run" else (args.command,)
    try:
        manifest = run_stages(cfg, args.out, stages)
    except StageFailure as exc:
        print(f"tradecausal: stage {exc.stage} failed: {exc.cause}", file=sys.stderr)
        return 2
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
