"""Acceptance suite: one PASS/FAIL line per criterion.

Run with pytest (the lines are repeated in the terminal summary) or directly
with ``python tests/test_acceptance.py``. The two end-to-end experiments
take several minutes each on one CPU.
"""

import dataclasses
import hashlib
import itertools
import os
import sys
import tempfile
import time

import numpy as np
import pytest

from brainfusion.dataio import GeneratorConfig, simulate_cohort
from brainfusion.encoders import (
    gat_backward,
    gat_forward,
    init_gat_params,
    init_vit_params,
    vit_block_backward,
    vit_block_forward,
    vit_encode,
)
from brainfusion.encoders.vit import block_params
from brainfusion.fusion import (
    cross_attention_backward,
    cross_attention_forward,
    dual_cross_attention_forward,
    fusion_forward,
    init_cross_attention_params,
    init_fusion_params,
    init_mlp_params,
    mlp_backward,
    mlp_forward,
)
from brainfusion.graphs import knn_graph, pearson_fcn
from brainfusion.harmonize import FeatureHarmonizer
from brainfusion.numerics import check_param_grads, cross_entropy_with_softmax, grad_check, softmax
from brainfusion.pipeline import (
    ConfusionMatrix,
    ExperimentConfig,
    compute_metrics,
    fold_values,
    oracle_baseline,
    run_experiment,
    stratified_kfold,
    train_fold,
    two_sample_ttest,
)

RESULTS = []

# ViT reduced from the production size so ten folds fit the runtime budget on one CPU
ACCEPT_VIT = {"d_model": 32, "depth": 2, "heads": 4, "epochs": 20}
PLANTED = {"cohort": {"n_subjects": 200, "n_rois": 16, "patch_side": 8, "T": 64,
                      "structural_effect": 0.5, "functional_effect": 0.4, "seed": 0},
           "folds": 10, "seed": 0, "vit": ACCEPT_VIT, "variants": ["concat", "dual"]}
SPLIT = {"cohort": {"n_subjects": 200, "split_signal": True, "structural_effect": 3.0,
                    "functional_effect": 0.4, "seed": 0},
         "folds": 10, "seed": 0, "vit": ACCEPT_VIT,
         "variants": ["concat", "dual", "structural", "functional"]}


def record(name, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    return passed


def _acc(cms):
    return float(np.mean([(c.tp + c.tn) / c.total for c in cms]))


def random_mask(rng, b, n, p=0.3):
    m = rng.random((b, n, n)) < p
    m |= m.transpose(0, 2, 1)
    m[:, np.arange(n), np.arange(n)] = True
    return m


# -- gradients -------------------------------------------------------------------------

def _grad_errors():
    rng = np.random.default_rng(0)
    n, d = 8, 16
    errs = {}

    p = init_vit_params(n - 1, 2, d_model=d, depth=1, heads=4, rng=1, dtype=np.float64)
    bp = block_params(p, 0)
    bp["ln1_g"] = bp["ln1_g"] + rng.normal(0, 0.1, d)
    z, w = rng.normal(size=(2, n, d)), rng.normal(size=(2, n, d))
    loss = lambda: float((vit_block_forward(z, bp, 4)[0] * w).sum())  # noqa: E731
    dz, g = vit_block_backward(w, vit_block_forward(z, bp, 4)[1])
    errs["vit block"] = max(max(check_param_grads(loss, bp, g).values()), grad_check(lambda _: loss(), z, dz))

    gp = init_gat_params(d, heads=4, d_head=4, rng=2, dtype=np.float64)
    x, adj, w = rng.normal(size=(2, n, d)), random_mask(rng, 2, n), rng.normal(size=(2, n, d))
    loss = lambda: float((gat_forward(x, adj, gp)[0] * w).sum())  # noqa: E731
    dx, g = gat_backward(w, gat_forward(x, adj, gp)[1])
    errs["gat layer"] = max(max(check_param_grads(loss, gp, g).values()), grad_check(lambda _: loss(), x, dx))

    hs, hf = rng.normal(size=(2, n, d)), rng.normal(size=(2, n, d))
    for name, (hq, hkv) in {"cross-attention s<-f": (hf, hs), "cross-attention f<-s": (hs, hf)}.items():
        cp = init_cross_attention_params(d, rng=3, dtype=np.float64)
        cp["ln_g"] = cp["ln_g"] + rng.normal(0, 0.1, d)
        w = rng.normal(size=(2, n, d))
        loss = lambda: float((cross_attention_forward(hq, hkv, cp, heads=4)[0] * w).sum())  # noqa: E731
        dq, dkv, g = cross_attention_backward(w, cross_attention_forward(hq, hkv, cp, heads=4)[1])
        errs[name] = max(max(check_param_grads(loss, cp, g).values()),
                         grad_check(lambda _: loss(), hq, dq), grad_check(lambda _: loss(), hkv, dkv))

    mp = init_mlp_params(d, hidden=8, rng=4, dtype=np.float64)
    zz, y = rng.normal(size=(5, d)), np.array([0, 1, 1, 0, 1])

    def loss():
        return cross_entropy_with_softmax(mlp_forward(zz, mp, 0.3, True, np.random.default_rng(0))[0], y)[0]

    logits, cache = mlp_forward(zz, mp, 0.3, True, np.random.default_rng(0))
    dzz, g = mlp_backward(cross_entropy_with_softmax(logits, y)[1], cache)
    errs["mlp + cross-entropy"] = max(max(check_param_grads(loss, mp, g).values()),
                                      grad_check(lambda _: loss(), zz, dzz))
    return errs


def test_gradient_correctness():
    t0 = time.perf_counter()
    errs = _grad_errors()
    secs = time.perf_counter() - t0
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert record("gradient check (float64, N=8, d=16)", worst < 1e-4 and secs < 60,
                  f"max rel err {worst:.1e} < 1e-4 [{detail}]; {secs:.1f} s < 60 s")


# -- oracles ---------------------------------------------------------------------------

def _brute_topk_union(values, k):
    edges = set()
    for i in range(len(values)):
        ranked = sorted((j for j in range(len(values)) if j != i), key=lambda j: (-values[i][j], j))
        edges.update((min(i, j), max(i, j)) for j in ranked[:k])
    return edges


def _direct_pearson(a, b):
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    den = (sum((x - ma) ** 2 for x in a) * sum((y - mb) ** 2 for y in b)) ** 0.5
    return num / den


def test_oracle_equivalence():
    rng = np.random.default_rng(1)
    knn_ok = 0
    for _ in range(100):
        n = int(rng.integers(3, 13))
        k = int(rng.integers(1, min(5, n - 1) + 1))
        s = np.round(rng.normal(size=(n, n)), 1)
        s = s + s.T
        knn_ok += knn_graph(s, k, np.zeros((n, 1))).edge_set() == _brute_topk_union(s, k)

    worst = 0.0
    for _ in range(20):
        ts = rng.normal(size=(int(rng.integers(10, 80)), 8)) + rng.normal(size=8) * 5
        r = pearson_fcn(ts).values
        for i, j in itertools.combinations(range(8), 2):
            worst = max(worst, abs(r[i, j] - _direct_pearson(ts[:, i].tolist(), ts[:, j].tolist())))

    metric_ok = 0
    for _ in range(1000):
        m = int(rng.integers(1, 40))
        yt, yp = rng.integers(0, 2, m), rng.integers(0, 2, m)
        got = compute_metrics(ConfusionMatrix.from_predictions(yt, yp))
        tp, tn = sum(1 for a, b in zip(yt, yp) if a == b == 1), sum(1 for a, b in zip(yt, yp) if a == b == 0)
        fp, fn = sum(1 for a, b in zip(yt, yp) if a == 0 and b == 1), sum(1 for a, b in zip(yt, yp) if a == 1 and b == 0)
        want = {"accuracy": (tp + tn) / m,
                "sensitivity": tp / (tp + fn) if tp + fn else None,
                "specificity": tn / (tn + fp) if tn + fp else None,
                "precision": tp / (tp + fp) if tp + fp else None,
                "f1": 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else None}
        metric_ok += got == want
    assert record("oracle equivalence", knn_ok == 100 and worst < 1e-10 and metric_ok == 1000,
                  f"knn {knn_ok}/100 exact; pearson max dev {worst:.1e} < 1e-10; metrics {metric_ok}/1000 exact")


# -- normalisation and equivariance ------------------------------------------------------

def test_attention_normalisation():
    rng = np.random.default_rng(2)
    worst = {}
    for trial in range(5):
        vp = init_vit_params(16, 8, d_model=32, depth=2, heads=4, rng=trial)
        _, (_, caches) = vit_encode(rng.normal(0, 3, size=(4, 16, 8, 8, 8)).astype(np.float32), vp, 4)
        worst["vit"] = max(worst.get("vit", 0), max(np.abs(c["att"]["attn"].sum(-1) - 1).max() for c in caches))
        gp = init_gat_params(16, rng=trial)
        _, gc = gat_forward(rng.normal(0, 3, size=(4, 16, 16)).astype(np.float32), random_mask(rng, 4, 16), gp)
        worst["gat"] = max(worst.get("gat", 0), np.abs(gc["alpha"].sum(-1) - 1).max())
        xp = {f"{d}.{k}": v for d in ("sf", "fs") for k, v in init_cross_attention_params(64, rng=rng).items()}
        hs, hf = (rng.normal(0, 3, size=(4, 16, 64)).astype(np.float32) for _ in range(2))
        _, xc = dual_cross_attention_forward(hs, hf, xp, heads=8)
        for d in ("sf", "fs"):
            worst[d] = max(worst.get(d, 0), np.abs(xc[d]["att"]["attn"].sum(-1) - 1).max())
    top = max(worst.values())
    assert record("attention rows sum to 1", top < 1e-6,
                  f"max |row sum - 1| {top:.1e} < 1e-6 over ViT, GAT, s<-f and f<-s")


def test_permutation_equivariance():
    rng = np.random.default_rng(3)
    n = 16
    gp = init_gat_params(16, rng=3, dtype=np.float64)
    x, adj = rng.normal(size=(n, 16)), random_mask(rng, 1, n)[0]
    out = gat_forward(x, adj, gp)[0]
    gat_dev = 0.0
    for _ in range(50):
        perm = rng.permutation(n)
        gat_dev = max(gat_dev, np.abs(gat_forward(x[perm], adj[np.ix_(perm, perm)], gp)[0] - out[perm]).max())

    xs, ms = rng.normal(size=(1, n, 8)), random_mask(rng, 1, n)
    xf, mf = rng.normal(size=(1, n, n)), random_mask(rng, 1, n)
    fuse_dev = 0.0
    for variant in ("concat", "dual"):
        p = init_fusion_params(variant, 8, n, rng=4, dtype=np.float64)
        base = softmax(fusion_forward(p, variant, xs, ms, xf, mf)[0])
        for _ in range(50):
            perm = rng.permutation(n)
            ix = np.ix_(perm, perm)
            out = fusion_forward(p, variant, xs[:, perm], ms[:, ix[0], ix[1]], xf[:, perm], mf[:, ix[0], ix[1]])[0]
            fuse_dev = max(fuse_dev, np.abs(softmax(out) - base).max())
    assert record("permutation equivariance (N=16, 50 perms)", gat_dev < 1e-6 and fuse_dev < 1e-6,
                  f"GAT max dev {gat_dev:.1e}, fused output max dev {fuse_dev:.1e} < 1e-6")


# -- harmonization ----------------------------------------------------------------------

def _site_gap(x, sites):
    means = [x[sites == s].mean(axis=0) for s in np.unique(sites)]
    return np.mean([np.abs(a - b).mean() for a, b in itertools.combinations(means, 2)])


def test_harmonization_efficacy():
    t0 = time.perf_counter()
    cfg = GeneratorConfig(n_subjects=200, n_sites=4, site_gamma=(0.0, 1.5, -1.0, 2.0),
                          site_delta=(1.0, 1.5, 0.7, 1.2), seed=0)
    cohort = simulate_cohort(cfg)
    x = np.array([[v[tuple(slice(l, h) for l, h in zip(lo, hi))].mean() for lo, hi in cohort.atlas.boxes]
                  for v in cohort.volumes])
    y, sites = cohort.labels, cohort.sites
    z = FeatureHarmonizer().fit_transform(x, sites, cohort.covariates())
    reduction = 1 - _site_gap(z, sites) / _site_gap(x, sites)
    roi = list(cfg.structural_rois)
    before = (x[y == 1][:, roi].mean(0) - x[y == 0][:, roi].mean(0)).mean()
    after = (z[y == 1][:, roi].mean(0) - z[y == 0][:, roi].mean(0)).mean()
    kept = after / before
    secs = time.perf_counter() - t0
    assert record("harmonization efficacy", reduction >= 0.9 and kept >= 0.85 and secs < 30,
                  f"site gap reduced {100 * reduction:.1f}% >= 90%; class effect kept {100 * kept:.1f}% >= 85% "
                  f"(planted {cfg.structural_effect}, raw {before:.3f}, harmonized {after:.3f}); {secs:.1f} s < 30 s")


# -- end-to-end experiments ---------------------------------------------------------------

@pytest.fixture(scope="module")
def planted_run():
    cfg = ExperimentConfig.from_dict(PLANTED)
    t0 = time.perf_counter()
    reports = run_experiment(cfg)
    return reports, time.perf_counter() - t0


def test_planted_signal_recovery(planted_run):
    reports, secs = planted_run
    cfg = ExperimentConfig.from_dict(PLANTED)
    cohort = simulate_cohort(GeneratorConfig.from_dict(cfg.cohort))
    plan = stratified_kfold([r.id for r in cohort.records], cohort.labels, cfg.folds, cfg.seed)
    lr = _acc(oracle_baseline(cohort, plan))
    dual, concat = reports["dual"]["mean"]["accuracy"], reports["concat"]["mean"]["accuracy"]
    ok = dual >= 0.90 and concat >= 0.85 and lr >= 0.92 and secs < 600
    assert record("planted-signal recovery (10-fold)", ok,
                  f"dual {dual:.3f} >= 0.90; concat {concat:.3f} >= 0.85; oracle LR {lr:.3f} >= 0.92; "
                  f"{secs:.0f} s < 600 s (threads: {os.cpu_count()} available)")


def test_split_signal_trend():
    reports = run_experiment(ExperimentConfig.from_dict(SPLIT))
    acc = {v: fold_values(r) for v, r in reports.items()}
    means = {v: a.mean() for v, a in acc.items()}
    parts, ok = [], True
    for m in ("concat", "dual"):
        for u in ("structural", "functional"):
            p = two_sample_ttest(acc[m], acc[u])["p"]
            ok &= bool(means[m] > means[u] and p < 0.05)
            parts.append(f"{m}>{u} p={p:.1e}")
    ordered = bool(means["dual"] >= means["concat"])
    ok &= ordered
    summary = ", ".join(f"{v} {means[v]:.3f}" for v in SPLIT["variants"])
    assert record("split-signal trend", ok,
                  f"{summary}; {'; '.join(parts)}; dual >= concat: {'yes' if ordered else 'no'}")


def test_determinism():
    small = {**PLANTED, "cohort": {**PLANTED["cohort"], "n_subjects": 60}, "folds": 3,
             "variants": ["concat", "dual"]}
    cfg = ExperimentConfig.from_dict(small)
    with tempfile.TemporaryDirectory() as tmp:
        run_experiment(cfg, os.path.join(tmp, "a"))
        run_experiment(cfg, os.path.join(tmp, "b"))
        names = sorted(f for f in os.listdir(os.path.join(tmp, "a")) if f.startswith("report-"))
        same = [open(os.path.join(tmp, "a", f), "rb").read() == open(os.path.join(tmp, "b", f), "rb").read()
                for f in names]
    assert record("determinism", len(names) == 2 and all(same),
                  f"{sum(same)}/{len(names)} RunReport JSON files byte-identical across two runs")


def _tree_hashes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            path = os.path.join(dirpath, f)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


def test_leakage_audit():
    cfg = ExperimentConfig.from_dict(PLANTED)
    cohort = simulate_cohort(GeneratorConfig.from_dict(cfg.cohort))
    plan = stratified_kfold([r.id for r in cohort.records], cohort.labels, cfg.folds, cfg.seed)
    fold = 0
    poisoned = cohort.subset([r.id for r in cohort.records])
    rng = np.random.default_rng(7)
    for i in poisoned.index_of(plan.test[fold]):
        poisoned.volumes[i] = rng.normal(0, 100, poisoned.volumes[i].shape).astype(np.float32)
        poisoned.timeseries[i] = rng.normal(0, 100, poisoned.timeseries[i].shape).astype(np.float32)
        rec = poisoned.records[i]
        poisoned.records[i] = dataclasses.replace(rec, age=rec.age + 30, label=1 - rec.label)
    with tempfile.TemporaryDirectory() as tmp:
        clean = train_fold(cohort, plan, fold, cfg, os.path.join(tmp, "clean"))
        dirty = train_fold(poisoned, plan, fold, cfg, os.path.join(tmp, "dirty"))
        a, b = _tree_hashes(os.path.join(tmp, "clean")), _tree_hashes(os.path.join(tmp, "dirty"))
    changed = [k for k in clean.digests if clean.digests[k] != dirty.digests[k]]
    ok = not changed and a == b and len(a) > 0
    assert record("leakage audit", ok,
                  f"{len(clean.digests) - len(changed)}/{len(clean.digests)} training-stage parameter sets and "
                  f"{sum(a[k] == b.get(k) for k in a)}/{len(a)} checkpoint files hash-identical after "
                  f"poisoning every test subject")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
