"""RunReport serialisation and the aligned text table."""

import json

import numpy as np

from ..dataio.cohort import atomic_write_json
from .metrics import METRICS
from .stats import two_sample_ttest


def write_json(path, obj):
    atomic_write_json(path, obj)


def read_report(path):
    with open(path) as fh:
        rep = json.load(fh)
    if rep.get("schema_version") != 1:
        raise ValueError(f"{path}: unsupported report schema {rep.get('schema_version')!r}")
    return rep


def fold_values(report, metric="accuracy"):
    """Per-fold values of ``metric`` (undefined folds dropped)."""
    return np.array([f["metrics"][metric] for f in report["folds"] if f["metrics"][metric] is not None])


def compare_reports(a, b, metric="accuracy"):
    """Welch test of report ``a`` against report ``b`` over folds."""
    return two_sample_ttest(fold_values(a, metric), fold_values(b, metric))


def _cell(mean, std):
    if mean is None:
        return "n/a"
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def format_table(reports):
    """One row per variant: mean ± population std (percent) per metric."""
    header = ["variant", *METRICS]
    rows = [[name, *(_cell(r["mean"][m], r["std"][m]) for m in METRICS)] for name, r in reports.items()]
    widths = [max(len(str(row[i])) for row in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    notes = [f"{name}: {m} undefined in {c} fold(s)" for name, r in reports.items()
             for m, c in r["undefined"].items() if c]
    best = [f"{name}: best fold {r['best_fold']['fold']} accuracy "
            f"{100 * r['best_fold']['metrics']['accuracy']:.2f}" for name, r in reports.items()
            if r["best_fold"]["metrics"]["accuracy"] is not None]
    return "\n".join(lines + [""] + best + notes) + "\n"
