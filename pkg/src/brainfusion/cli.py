"""Command-line interface.

Every subcommand accepts the global flags ``--config``, ``--seed``, ``--out``
and ``--threads``. ``run`` executes the full cross-validated experiment; the
remaining subcommands expose each stage on a whole cohort so that artefacts
can be inspected or produced step by step.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np
from threadpoolctl import threadpool_limits

from .dataio import GeneratorConfig, extract_roi_patches, generate_cohort, insert_roi_patches, load_cohort, save_cohort
from .encoders import ViTClassifier
from .fusion import VARIANTS, GraphFusionClassifier
from .graphs import build_functional_graph, build_structural_graph, load_graph, save_graph
from .harmonize import FeatureHarmonizer, TimeSeriesHarmonizer
from .numerics.tensorfile import load_tensor, save_tensor
from .pipeline import (
    ConfusionMatrix,
    ExperimentConfig,
    FusionConfig,
    StageError,
    compare_reports,
    compute_metrics,
    format_table,
    read_report,
    run_experiment,
    write_json,
)
from .pipeline.experiment import PatchPreprocessor, _patch_side

log = logging.getLogger("brainfusion")


def _config(args):
    if args.config:
        with open(args.config) as fh:
            cfg = ExperimentConfig.from_dict(json.load(fh))
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _require_out(args):
    if not args.out:
        raise SystemExit(f"{args.command}: --out is required")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _seed(args, cfg):
    return cfg.seed if args.seed is None else args.seed


def _load_graphs(directory, cohort):
    return [load_graph(os.path.join(directory, f"{r.id}.json")) for r in cohort.records]


# -- subcommands -------------------------------------------------------------

def cmd_generate(args):
    cfg = _config(args)
    gen = dict(cfg.cohort)
    if args.seed is not None:
        gen["seed"] = args.seed
    path = generate_cohort(GeneratorConfig.from_dict(gen), _require_out(args))
    print(path)


def cmd_harmonize(args):
    """Fit harmonization on the whole cohort and write a harmonized copy."""
    cohort = load_cohort(args.manifest)
    out = _require_out(args)
    p = _patch_side(cohort)
    sites, cov = cohort.sites, cohort.covariates()
    flat = np.stack([extract_roi_patches(v, cohort.atlas, p) for v in cohort.volumes])
    shape = flat.shape
    structural = FeatureHarmonizer().fit(flat.reshape(len(cohort), -1), sites, cov)
    flat = structural.transform(flat.reshape(len(cohort), -1), sites, cov).reshape(shape)
    cohort.volumes = [insert_roi_patches(v, cohort.atlas, x).astype(np.float32)
                      for v, x in zip(cohort.volumes, flat)]
    cohort.timeseries = [s.astype(np.float32) for s in
                         TimeSeriesHarmonizer().fit_transform(cohort.timeseries, sites, cov)]
    path = save_cohort(cohort, out)
    structural.combat_.save(os.path.join(out, "combat-structural.json"))
    print(path)


def cmd_build_graphs(args):
    cohort = load_cohort(args.manifest)
    out = _require_out(args)
    for rec, ts in zip(cohort.records, cohort.timeseries):
        if args.modality == "functional":
            g = build_functional_graph(ts, args.k)
        else:
            if not args.embeddings:
                raise SystemExit("build-graphs: structural graphs need --embeddings <dir>")
            g = build_structural_graph(load_tensor(os.path.join(args.embeddings, f"{rec.id}.ngt")), args.k)
        save_graph(os.path.join(out, f"{rec.id}.json"), g)
    print(f"wrote {len(cohort)} {args.modality} graphs to {out}")


def cmd_train_vit(args):
    cfg = _config(args)
    cohort = load_cohort(args.manifest)
    out = _require_out(args)
    idx = np.arange(len(cohort))
    prep = PatchPreprocessor(_patch_side(cohort), harmonize=False).fit(cohort, idx)
    model = ViTClassifier(**asdict(cfg.vit), random_state=_seed(args, cfg))
    model.fit(prep.transform(cohort, idx), cohort.labels)
    model.save(os.path.join(out, "vit"))
    np.savez(os.path.join(out, "patch-scaler.npz"), mean=prep.scaler_.mean_, scale=prep.scaler_.scale_)
    print(f"final training loss {model.loss_curve_[-1]:.4f}")


def cmd_extract_embeddings(args):
    cohort = load_cohort(args.manifest)
    out = _require_out(args)
    model = ViTClassifier.load(os.path.join(args.checkpoint, "vit"))
    scaler = np.load(os.path.join(args.checkpoint, "patch-scaler.npz"))
    p = _patch_side(cohort)
    for rec, vol in zip(cohort.records, cohort.volumes):
        x = extract_roi_patches(vol, cohort.atlas, p).reshape(1, -1)
        x = ((x - scaler["mean"]) / scaler["scale"]).reshape(1, -1, p, p, p)
        save_tensor(os.path.join(out, f"{rec.id}.ngt"), model.transform(x)[0])
    print(f"wrote {len(cohort)} embeddings to {out}")


def cmd_train_fusion(args):
    cfg = _config(args)
    cohort = load_cohort(args.manifest)
    out = _require_out(args)
    f = cfg.fusion.get(args.variant) or FusionConfig.for_variant(args.variant)
    model = GraphFusionClassifier(args.variant, f.learning_rate, f.weight_decay, f.dropout, f.heads,
                                  f.hidden_dim, f.batch_size, f.epochs, random_state=_seed(args, cfg))
    graphs = (_load_graphs(args.structural_graphs, cohort), _load_graphs(args.functional_graphs, cohort))
    model.fit(graphs, cohort.labels)
    model.save(os.path.join(out, f"fusion-{args.variant}"))
    print(f"final training loss {model.loss_curve_[-1]:.4f}")


def cmd_evaluate(args):
    cohort = load_cohort(args.manifest)
    model = GraphFusionClassifier.load(args.checkpoint)
    graphs = (_load_graphs(args.structural_graphs, cohort), _load_graphs(args.functional_graphs, cohort))
    cm = ConfusionMatrix.from_predictions(cohort.labels, model.predict(graphs))
    result = {"variant": model.variant, "confusion": cm.to_dict(), "metrics": compute_metrics(cm)}
    if args.out:
        write_json(os.path.join(_require_out(args), "evaluation.json"), result)
    print(json.dumps(result, indent=1, sort_keys=True))


def cmd_ttest(args):
    res = compare_reports(read_report(args.a), read_report(args.b), args.metric)
    print(json.dumps({"metric": args.metric, **res}, indent=1, sort_keys=True))


def cmd_report(args):
    reports = {}
    for path in args.reports:
        rep = read_report(path)
        reports[rep["variant"]] = rep
    table = format_table(reports)
    if args.out:
        with open(os.path.join(_require_out(args), "report.txt"), "w") as fh:
            fh.write(table)
    sys.stdout.write(table)


def cmd_run(args):
    cfg = _config(args)

    def progress(fold, result):
        accs = {v: round((cm.tp + cm.tn) / cm.total, 4) for v, cm in result.confusion.items()}
        log.info("fold %d accuracy %s", fold, accs)

    reports = run_experiment(cfg, args.out, progress=progress)
    sys.stdout.write(format_table(reports))


# -- parser ------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="BLAS thread limit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="brainfusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    add("generate", cmd_generate, "simulate a planted-signal cohort")
    p = add("harmonize", cmd_harmonize, "harmonize a cohort across sites")
    p.add_argument("--manifest", required=True)
    p = add("build-graphs", cmd_build_graphs, "write one KNN graph per subject")
    p.add_argument("--manifest", required=True)
    p.add_argument("--modality", choices=("structural", "functional"), required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--embeddings", help="ROI embedding directory (structural only)")
    p = add("train-vit", cmd_train_vit, "train the patch ViT on a cohort")
    p.add_argument("--manifest", required=True)
    p = add("extract-embeddings", cmd_extract_embeddings, "write ViT ROI embeddings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True, help="train-vit output directory")
    for name, fn, help_ in (("train-fusion", cmd_train_fusion, "train a graph fusion classifier"),
                            ("evaluate", cmd_evaluate, "score a fusion checkpoint")):
        p = add(name, fn, help_)
        p.add_argument("--manifest", required=True)
        p.add_argument("--structural-graphs", required=True)
        p.add_argument("--functional-graphs", required=True)
        if name == "train-fusion":
            p.add_argument("--variant", choices=VARIANTS, default="dual")
        else:
            p.add_argument("--checkpoint", required=True, help="fusion checkpoint directory")
    p = add("ttest", cmd_ttest, "Welch t-test between two run reports")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--metric", default="accuracy")
    p = add("report", cmd_report, "tabulate run reports")
    p.add_argument("reports", nargs="+")
    add("run", cmd_run, "full cross-validated experiment")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except (StageError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
