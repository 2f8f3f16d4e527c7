"""Cross-validated two-stage experiment.

Per fold, every statistic is fitted on the training split only:

1. site harmonization of ROI patches and ROI time series;
2. ViT training on the training patches (stage 1);
3. ROI embeddings for all subjects -> structural graphs; harmonized time
   series -> functional graphs;
4. one fusion classifier per variant on the training graphs (stage 2),
   evaluated on the test graphs.

The ViT is trained once per fold and shared by all variants, so variants
see identical upstream embeddings.
"""

import json
import os
import time
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from sklearn.preprocessing import StandardScaler

from ..dataio import GeneratorConfig, extract_roi_patches, load_cohort, simulate_cohort
from ..encoders import ViTClassifier, params_digest, save_checkpoint
from ..fusion import VARIANT_DEFAULTS, VARIANTS, GraphFusionClassifier
from ..graphs import build_functional_graph, build_structural_graph
from ..harmonize import FeatureHarmonizer, TimeSeriesHarmonizer
from .folds import stratified_kfold
from .metrics import ConfusionMatrix, aggregate_folds, compute_metrics

REPORT_SCHEMA_VERSION = 1


class StageError(RuntimeError):
    """A pipeline stage failed; the message starts with ``[stage]``."""

    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


class _stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


# -- configuration ---------------------------------------------------------------------

def _from_dict(cls, d, where):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ValueError(f"{where}: unknown key(s) {unknown}")
    return cls(**d)


@dataclass
class ViTConfig:
    d_model: int = 128
    depth: int = 6
    heads: int = 8
    mlp_ratio: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 50


@dataclass
class FusionConfig:
    learning_rate: float = 1e-2
    weight_decay: float = 1e-4
    dropout: float = 0.5
    batch_size: int = 16
    heads: int = 8
    hidden_dim: int = 64
    epochs: int = 100

    @classmethod
    def for_variant(cls, variant, **overrides):
        return cls(**{**VARIANT_DEFAULTS[variant], **overrides})


def _default_fusion():
    return {v: FusionConfig.for_variant(v) for v in VARIANTS}


@dataclass
class ExperimentConfig:
    """Everything a run depends on. ``manifest`` (a saved cohort) wins over ``cohort``."""

    cohort: dict = field(default_factory=lambda: GeneratorConfig().to_dict())
    manifest: str = None
    folds: int = 10
    seed: int = 0
    k: int = 10
    harmonize: bool = True
    stratify_sites: bool = False
    variants: tuple = ("concat", "dual")
    vit: ViTConfig = field(default_factory=ViTConfig)
    fusion: dict = field(default_factory=_default_fusion)

    def __post_init__(self):
        self.variants = tuple(self.variants)
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variant(s) {bad}; choose from {VARIANTS}")
        if self.folds < 2:
            raise ValueError("folds must be at least 2")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        vit = _from_dict(ViTConfig, d.pop("vit", {}), "vit")
        fusion = _default_fusion()
        for variant, sub in d.pop("fusion", {}).items():
            if variant not in VARIANTS:
                raise ValueError(f"fusion: unknown variant {variant!r}")
            base = asdict(fusion[variant])
            fusion[variant] = _from_dict(FusionConfig, {**base, **sub}, f"fusion.{variant}")
        cohort = d.pop("cohort", None)
        cfg = _from_dict(cls, d, "config")
        cfg.vit, cfg.fusion = vit, fusion
        if cohort is not None:
            cfg.cohort = GeneratorConfig.from_dict(cohort).to_dict()
        return cfg

    def to_dict(self):
        return {
            "cohort": self.cohort,
            "manifest": self.manifest,
            "folds": self.folds,
            "seed": self.seed,
            "k": self.k,
            "harmonize": self.harmonize,
            "stratify_sites": self.stratify_sites,
            "variants": list(self.variants),
            "vit": asdict(self.vit),
            "fusion": {v: asdict(self.fusion[v]) for v in self.variants},
        }


def load_config(path):
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def fold_seed(seed, fold, purpose):
    """Independent integer seed for ``purpose`` in ``fold``."""
    tag = zlib.crc32(purpose.encode())
    return int(np.random.SeedSequence([seed, fold, tag]).generate_state(1)[0])


# -- per-fold feature preparation --------------------------------------------------

class PatchPreprocessor:
    """ROI patches -> site-harmonized, per-voxel standardised patches.

    Harmonization treats every voxel of every ROI patch as one ComBat feature.
    """

    def __init__(self, patch_side, harmonize=True):
        self.patch_side = patch_side
        self.harmonize = harmonize

    def _flat(self, cohort, idx):
        return np.stack([extract_roi_patches(cohort.volumes[i], cohort.atlas, self.patch_side)
                         for i in idx]).reshape(len(idx), -1).astype(np.float64)

    def fit(self, cohort, idx):
        x = self._flat(cohort, idx)
        self.n_rois_ = len(cohort.atlas.boxes)
        self.harmonizer_ = None
        if self.harmonize:
            cov = cohort.covariates()[idx]
            self.harmonizer_ = FeatureHarmonizer().fit(x, cohort.sites[idx], cov)
            x = self.harmonizer_.transform(x, cohort.sites[idx], cov)
        self.scaler_ = StandardScaler().fit(x)
        return self

    def transform(self, cohort, idx):
        x = self._flat(cohort, idx)
        if self.harmonizer_ is not None:
            x = self.harmonizer_.transform(x, cohort.sites[idx], cohort.covariates()[idx])
        x = self.scaler_.transform(x)
        p = self.patch_side
        return x.reshape(len(idx), self.n_rois_, p, p, p).astype(np.float32)


class SeriesPreprocessor:
    def __init__(self, harmonize=True):
        self.harmonize = harmonize

    def fit(self, cohort, idx):
        self.harmonizer_ = None
        if self.harmonize:
            self.harmonizer_ = TimeSeriesHarmonizer().fit(
                [cohort.timeseries[i] for i in idx], cohort.sites[idx], cohort.covariates()[idx])
        return self

    def transform(self, cohort, idx):
        series = [cohort.timeseries[i] for i in idx]
        if self.harmonizer_ is None:
            return series
        return self.harmonizer_.transform(series, cohort.sites[idx], cohort.covariates()[idx])


def _patch_side(cohort):
    lo, hi = cohort.atlas.boxes[0]
    return int(hi[0] - lo[0])


# -- fold training ---------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    train_ids: list
    test_ids: list
    predictions: dict      # variant -> predicted labels for test_ids
    confusion: dict        # variant -> ConfusionMatrix
    digests: dict          # checkpoint name -> sha256
    vit_loss: list
    fusion_loss: dict


def train_fold(cohort, plan, fold, config, checkpoint_dir=None):
    """Train and evaluate every configured variant on one fold."""
    train_ids, test_ids = plan.train[fold], plan.test[fold]
    if not train_ids or not test_ids:
        raise StageError("split", ValueError(f"fold {fold} has an empty split"))
    tr, te = cohort.index_of(train_ids), cohort.index_of(test_ids)
    y = cohort.labels
    digests = {}

    with _stage("harmonize"):
        patches_pp = PatchPreprocessor(_patch_side(cohort), config.harmonize).fit(cohort, tr)
        series_pp = SeriesPreprocessor(config.harmonize).fit(cohort, tr)
        patches_tr, patches_te = patches_pp.transform(cohort, tr), patches_pp.transform(cohort, te)
        series_tr, series_te = series_pp.transform(cohort, tr), series_pp.transform(cohort, te)
        if patches_pp.harmonizer_ is not None:
            digests["combat-structural"] = params_digest(_combat_arrays(patches_pp.harmonizer_.combat_))
            digests["combat-functional-mean"] = params_digest(
                _combat_arrays(series_pp.harmonizer_.mean_model_.combat_))
            digests["combat-functional-scale"] = params_digest(
                _combat_arrays(series_pp.harmonizer_.scale_model_.combat_))

    with _stage("train-vit"):
        v = config.vit
        vit = ViTClassifier(v.d_model, v.depth, v.heads, v.mlp_ratio, v.learning_rate, v.weight_decay,
                            v.epochs, v.batch_size, random_state=fold_seed(config.seed, fold, "vit"))
        vit.fit(patches_tr, y[tr])
        digests["vit"] = params_digest(vit.params_)
        if checkpoint_dir:
            save_checkpoint(os.path.join(checkpoint_dir, f"fold{fold:02d}", "vit"), vit.params_,
                            {"stage": "vit", "fold": fold, **asdict(v)})

    with _stage("build-graphs"):
        emb_tr, emb_te = vit.transform(patches_tr), vit.transform(patches_te)
        gs_tr = [build_structural_graph(e, config.k) for e in emb_tr]
        gs_te = [build_structural_graph(e, config.k) for e in emb_te]
        gf_tr = [build_functional_graph(s, config.k) for s in series_tr]
        gf_te = [build_functional_graph(s, config.k) for s in series_te]

    predictions, confusion, fusion_loss = {}, {}, {}
    for variant in config.variants:
        with _stage(f"train-fusion:{variant}"):
            f = config.fusion[variant]
            model = GraphFusionClassifier(variant, f.learning_rate, f.weight_decay, f.dropout, f.heads,
                                          f.hidden_dim, f.batch_size, f.epochs,
                                          random_state=fold_seed(config.seed, fold, f"fusion-{variant}"))
            model.fit((gs_tr, gf_tr), y[tr])
            digests[f"fusion-{variant}"] = params_digest(model.params_)
            fusion_loss[variant] = model.loss_curve_
            if checkpoint_dir:
                save_checkpoint(os.path.join(checkpoint_dir, f"fold{fold:02d}", f"fusion-{variant}"),
                                model.params_, {"stage": "fusion", "variant": variant, "fold": fold, **asdict(f)})
        with _stage(f"evaluate:{variant}"):
            pred = model.predict((gs_te, gf_te))
            predictions[variant] = pred
            confusion[variant] = ConfusionMatrix.from_predictions(y[te], pred)

    return FoldResult(fold, train_ids, test_ids, predictions, confusion, digests, vit.loss_curve_, fusion_loss)


def _combat_arrays(model):
    return {"alpha": model.alpha_, "beta": model.beta_, "var": model.var_pooled_,
            "gamma": model.gamma_, "delta": model.delta_}


# -- orchestration -----------------------------------------------------------------------

def load_experiment_cohort(config):
    with _stage("cohort"):
        if config.manifest:
            return load_cohort(config.manifest)
        return simulate_cohort(GeneratorConfig.from_dict(config.cohort))


def build_report(variant, config, plan, results):
    folds = []
    for r in results:
        cm = r.confusion[variant]
        folds.append({"fold": r.fold, "n_train": len(r.train_ids), "n_test": len(r.test_ids),
                      "confusion": cm.to_dict(), "metrics": compute_metrics(cm),
                      "checkpoint_sha256": {k: v for k, v in sorted(r.digests.items())
                                            if not k.startswith("fusion-") or k == f"fusion-{variant}"}})
    agg = aggregate_folds([f["metrics"] for f in folds])
    best = folds[agg["best_fold"]]
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "variant": variant,
        "config": config.to_dict(),
        "seeds": {"global": config.seed, "folds": plan.seed,
                  "vit": [fold_seed(config.seed, r.fold, "vit") for r in results],
                  "fusion": [fold_seed(config.seed, r.fold, f"fusion-{variant}") for r in results]},
        "folds": folds,
        "mean": agg["mean"],
        "std": agg["std"],
        "undefined": agg["undefined"],
        "best_fold": {"fold": best["fold"], "metrics": best["metrics"], "confusion": best["confusion"]},
    }


def run_experiment(config, out_dir=None, cohort=None, progress=None):
    """Run every fold and variant; returns ``{variant: report}``.

    With ``out_dir`` the reports (``report-<variant>.json``), a text table
    (``report.txt``), wall-clock timings (``timings.json``) and parameter
    checkpoints are written there.
    """
    from .report import format_table, write_json

    started = time.perf_counter()
    if cohort is None:
        cohort = load_experiment_cohort(config)
    with _stage("folds"):
        plan = stratified_kfold([r.id for r in cohort.records], cohort.labels, config.folds, config.seed,
                                cohort.sites if config.stratify_sites else None)
    ckpt = os.path.join(out_dir, "checkpoints") if out_dir else None
    results, fold_seconds = [], []
    for fold in range(plan.k):
        t0 = time.perf_counter()
        results.append(train_fold(cohort, plan, fold, config, ckpt))
        fold_seconds.append(time.perf_counter() - t0)
        if progress:
            progress(fold, results[-1])
    reports = {v: build_report(v, config, plan, results) for v in config.variants}
    if out_dir:
        with _stage("report"):
            for v, rep in reports.items():
                write_json(os.path.join(out_dir, f"report-{v}.json"), rep)
            write_json(os.path.join(out_dir, "folds.json"), plan.to_dict())
            with open(os.path.join(out_dir, "report.txt"), "w") as fh:
                fh.write(format_table(reports))
            write_json(os.path.join(out_dir, "timings.json"),
                       {"fold_seconds": fold_seconds, "total_seconds": time.perf_counter() - started})
    return reports
