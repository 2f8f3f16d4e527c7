import numpy as np
import pytest

from brainfusion.fusion import (
    VARIANTS,
    GraphFusionClassifier,
    concat_fuse,
    cross_attention_backward,
    cross_attention_block,
    cross_attention_forward,
    dual_cross_attention_backward,
    dual_cross_attention_forward,
    dual_cross_attention_fuse,
    fusion_backward,
    fusion_forward,
    global_average_pool,
    init_cross_attention_params,
    init_fusion_params,
    init_mlp_params,
    mlp_backward,
    mlp_classify,
    mlp_forward,
)
from brainfusion.graphs import build_functional_graph, build_structural_graph
from brainfusion.numerics import (
    check_param_grads,
    cross_entropy_with_softmax,
    grad_check,
    layer_norm_forward,
    softmax,
)


def random_mask(rng, b, n, p=0.3):
    m = rng.random((b, n, n)) < p
    m |= m.transpose(0, 2, 1)
    m[:, np.arange(n), np.arange(n)] = True
    return m


def ln(x):
    return layer_norm_forward(x, np.ones(x.shape[-1]), np.zeros(x.shape[-1]))[0]


# -- pooling / concat -----------------------------------------------------------------

def test_gap():
    v = np.arange(4.0)
    np.testing.assert_array_equal(global_average_pool(np.tile(v, (5, 1))), v)
    np.testing.assert_array_equal(global_average_pool(np.array([np.zeros(3), np.full(3, 2.0)])), np.ones(3))
    h = np.random.default_rng(0).normal(size=(6, 3))
    np.testing.assert_allclose(global_average_pool(h[::-1]), global_average_pool(h), atol=1e-15)
    with pytest.raises(ValueError):
        global_average_pool(np.zeros((0, 3)))


def test_concat_order_and_width():
    gs, gf = np.full(64, 1.0), np.full(64, 2.0)
    z = concat_fuse(gs, gf)
    assert z.shape == (128,)
    np.testing.assert_array_equal(z[:64], 1.0)
    np.testing.assert_array_equal(concat_fuse(gs, np.zeros(64))[64:], 0.0)
    with pytest.raises(ValueError):
        concat_fuse(np.zeros(64), np.zeros(32))


# -- cross-attention -----------------------------------------------------------------

def test_cross_attention_single_node():
    rng = np.random.default_rng(1)
    p = init_cross_attention_params(16, rng=1, dtype=np.float64)
    hq, hkv = rng.normal(size=(1, 16)), rng.normal(size=(1, 16))
    out, cache = cross_attention_forward(hq, hkv, p, heads=8)
    np.testing.assert_array_equal(cache["att"]["attn"], 1.0)
    np.testing.assert_allclose(out, ln(hq + (hkv @ p["wv"]) @ p["wo"] + p["bo"]), atol=1e-12)


def test_cross_attention_degenerate_keys():
    rng = np.random.default_rng(2)
    p = init_cross_attention_params(16, rng=2, dtype=np.float64)
    hq = rng.normal(size=(5, 16))
    hkv = np.tile(rng.normal(size=16), (5, 1))
    out = cross_attention_block(hq, hkv, p, heads=4)
    attended = (hkv[0] @ p["wv"]) @ p["wo"] + p["bo"]
    np.testing.assert_allclose(out, ln(hq + attended), atol=1e-12)


def test_cross_attention_hand_trace():
    # N=2, width 2, one head, identity-like projections
    p = {"wq": np.eye(2), "wk": np.eye(2), "wv": np.array([[1.0, 0.0], [0.0, 2.0]]),
         "wo": np.eye(2), "bo": np.zeros(2), "ln_g": np.ones(2), "ln_b": np.zeros(2)}
    hq = np.array([[1.0, 0.0], [0.0, 1.0]])
    hkv = np.array([[2.0, 0.0], [0.0, 1.0]])
    out = cross_attention_block(hq, hkv, p, heads=1)
    scores = hq @ hkv.T / np.sqrt(2)  # [[2, 0], [0, 1]] / sqrt 2
    a = softmax(scores, axis=-1)
    v = hkv @ p["wv"]  # [[2, 0], [0, 2]]
    s = hq + a @ v
    # 2-wide layer norm maps [u, w] to +-1 (up to eps) by sign of u - w
    mu = s.mean(1, keepdims=True)
    expected = (s - mu) / np.sqrt(s.var(1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out, expected, atol=1e-12)
    np.testing.assert_allclose(a[0], [np.exp(np.sqrt(2)) / (np.exp(np.sqrt(2)) + 1), 1 / (np.exp(np.sqrt(2)) + 1)])


def test_cross_attention_node_mismatch():
    p = init_cross_attention_params(16, rng=0)
    with pytest.raises(ValueError, match="node counts"):
        cross_attention_forward(np.zeros((3, 16)), np.zeros((4, 16)), p, heads=8)


@pytest.mark.parametrize("direction", ["sf", "fs"])
def test_cross_attention_grad_check_toy(direction):
    rng = np.random.default_rng(3)
    p = init_cross_attention_params(16, rng=3, dtype=np.float64)
    p["ln_g"] = p["ln_g"] + rng.normal(0, 0.1, 16)
    hs, hf = rng.normal(size=(2, 8, 16)), rng.normal(size=(2, 8, 16))
    hq, hkv = (hf, hs) if direction == "sf" else (hs, hf)
    w = rng.normal(size=(2, 8, 16))

    def loss():
        return float((cross_attention_forward(hq, hkv, p, heads=4)[0] * w).sum())

    _, cache = cross_attention_forward(hq, hkv, p, heads=4)
    dq, dkv, grads = cross_attention_backward(w, cache)
    assert max(check_param_grads(loss, p, grads).values()) < 1e-4
    assert grad_check(lambda _: loss(), hq, dq) < 1e-4
    assert grad_check(lambda _: loss(), hkv, dkv) < 1e-4


def dual_params(width, rng, dtype=np.float64):
    out = {}
    for d in ("sf", "fs"):
        out.update({f"{d}.{k}": v for k, v in init_cross_attention_params(width, rng, dtype).items()})
    return out


def test_dual_zero_projections_reduce_to_layer_norm():
    rng = np.random.default_rng(4)
    p = dual_params(64, rng)
    for k in p:
        if k.split(".")[1] in ("wq", "wk", "wv", "wo", "bo"):
            p[k] = np.zeros_like(p[k])
    hs, hf = rng.normal(size=(16, 64)), rng.normal(size=(16, 64))
    z = dual_cross_attention_fuse(hs, hf, p)
    assert z.shape == (128,)
    np.testing.assert_allclose(z, concat_fuse(ln(hs).mean(0), ln(hf).mean(0)), atol=1e-12)


def test_dual_attention_rows_normalised():
    rng = np.random.default_rng(5)
    p = dual_params(64, rng, np.float32)
    _, cache = dual_cross_attention_forward(rng.normal(size=(3, 16, 64)) * 4, rng.normal(size=(3, 16, 64)) * 4, p)
    for d in ("sf", "fs"):
        assert np.max(np.abs(cache[d]["att"]["attn"].sum(-1) - 1)) < 1e-6


def test_dual_modal_swap_contract():
    rng = np.random.default_rng(6)
    p = dual_params(64, rng)
    swapped = {("fs." + k[3:] if k.startswith("sf.") else "sf." + k[3:]): v for k, v in p.items()}
    hs, hf = rng.normal(size=(10, 64)), rng.normal(size=(10, 64))
    z = dual_cross_attention_fuse(hs, hf, p)
    zs = dual_cross_attention_fuse(hf, hs, swapped)
    np.testing.assert_allclose(np.concatenate([zs[64:], zs[:64]]), z, atol=1e-12)


def test_dual_permutation_invariance():
    rng = np.random.default_rng(7)
    p = dual_params(64, rng)
    hs, hf = rng.normal(size=(16, 64)), rng.normal(size=(16, 64))
    z = dual_cross_attention_fuse(hs, hf, p)
    for _ in range(50):
        perm = rng.permutation(16)
        assert np.max(np.abs(dual_cross_attention_fuse(hs[perm], hf[perm], p) - z)) < 1e-6


# -- MLP -----------------------------------------------------------------------------------

def test_mlp_zero_weights_uniform():
    p = {k: np.zeros_like(v) for k, v in init_mlp_params(128, rng=0).items()}
    np.testing.assert_allclose(mlp_classify(np.ones(128), p), [0.5, 0.5])


def test_mlp_hand_example():
    p = {"w1": np.array([[1.0, -1.0], [2.0, 0.0]]), "b1": np.array([0.0, 0.5]),
         "w2": np.array([[1.0, 0.0], [0.0, 1.0]]), "b2": np.array([0.0, -1.0])}
    z = np.array([1.0, 1.0])
    # hidden = ReLU([3, -0.5]) = [3, 0]; logits = [3, -1]
    expected = np.exp([3.0, -1.0]) / np.exp([3.0, -1.0]).sum()
    np.testing.assert_allclose(mlp_classify(z, p), expected, atol=1e-12)


def test_mlp_eval_deterministic_and_width_check():
    p = init_mlp_params(128, rng=1)
    z = np.random.default_rng(1).normal(size=(4, 128)).astype(np.float32)
    a = mlp_classify(z, p, dropout=0.5, training=False)
    np.testing.assert_array_equal(a, mlp_classify(z, p, dropout=0.5, training=False))
    with pytest.raises(ValueError):
        mlp_classify(np.zeros(64), p)


def test_mlp_dropout_grad_check():
    rng = np.random.default_rng(8)
    p = init_mlp_params(12, hidden=6, rng=8, dtype=np.float64)
    z = rng.normal(size=(5, 12))
    y = np.array([0, 1, 1, 0, 1])

    def loss():
        logits, _ = mlp_forward(z, p, 0.3, True, np.random.default_rng(0))
        return cross_entropy_with_softmax(logits, y)[0]

    logits, cache = mlp_forward(z, p, 0.3, True, np.random.default_rng(0))
    _, dlogits = cross_entropy_with_softmax(logits, y)
    dz, grads = mlp_backward(dlogits, cache)
    assert max(check_param_grads(loss, p, grads).values()) < 1e-4
    assert grad_check(lambda _: loss(), z, dz) < 1e-4


# -- full fusion network ---------------------------------------------------------------------

def test_dual_then_mlp_cross_entropy_grad_check():
    rng = np.random.default_rng(9)
    p = dual_params(16, rng)
    p.update({f"mlp.{k}": v for k, v in init_mlp_params(32, hidden=8, rng=rng, dtype=np.float64).items()})
    hs, hf = rng.normal(size=(3, 8, 16)), rng.normal(size=(3, 8, 16))
    y = np.array([0, 1, 1])
    xa = {k: v for k, v in p.items() if not k.startswith("mlp.")}
    mlp = {k[4:]: v for k, v in p.items() if k.startswith("mlp.")}

    def loss():
        z, _ = dual_cross_attention_forward(hs, hf, xa, heads=4)
        return cross_entropy_with_softmax(mlp_forward(z, mlp)[0], y)[0]

    z, c_xa = dual_cross_attention_forward(hs, hf, xa, heads=4)
    logits, c_mlp = mlp_forward(z, mlp)
    _, dl = cross_entropy_with_softmax(logits, y)
    dz, g_mlp = mlp_backward(dl, c_mlp)
    dhs, dhf, g_xa = dual_cross_attention_backward(dz, c_xa)
    errs = check_param_grads(loss, xa, g_xa)
    errs.update(check_param_grads(loss, mlp, g_mlp))
    assert max(errs.values()) < 1e-4
    assert grad_check(lambda _: loss(), hs, dhs) < 1e-4
    assert grad_check(lambda _: loss(), hf, dhf) < 1e-4


@pytest.mark.parametrize("variant", VARIANTS)
def test_fusion_network_grad_check(variant):
    rng = np.random.default_rng(10)
    b, n = 3, 5
    xs, ms = rng.normal(size=(b, n, 6)), random_mask(rng, b, n)
    xf, mf = rng.normal(size=(b, n, n)), random_mask(rng, b, n)
    y = np.array([0, 1, 1])
    p = init_fusion_params(variant, 6, n, hidden=8, rng=1, dtype=np.float64)
    if variant == "dual":
        # keep the check fast: verify only the graph-attention and MLP parameters
        # here; the cross-attention blocks have their own check above
        names = [k for k in p if not k.startswith("xa.")] + ["xa.sf.wq", "xa.fs.ln_g"]
    else:
        names = sorted(p)

    def loss():
        return cross_entropy_with_softmax(fusion_forward(p, variant, xs, ms, xf, mf, 8)[0], y)[0]

    logits, cache = fusion_forward(p, variant, xs, ms, xf, mf, 8)
    _, dl = cross_entropy_with_softmax(logits, y)
    grads = fusion_backward(dl, cache)
    assert set(grads) == set(p)
    assert max(check_param_grads(loss, p, grads, names=names).values()) < 1e-4


def test_fusion_output_permutation_invariant():
    rng = np.random.default_rng(11)
    n = 16
    xs, ms = rng.normal(size=(1, n, 8)), random_mask(rng, 1, n)
    xf, mf = rng.normal(size=(1, n, n)), random_mask(rng, 1, n)
    for variant in ("concat", "dual"):
        p = init_fusion_params(variant, 8, n, rng=2, dtype=np.float64)
        probs = softmax(fusion_forward(p, variant, xs, ms, xf, mf)[0])
        for _ in range(50):
            perm = rng.permutation(n)
            ix = np.ix_(perm, perm)
            # relabel nodes: rows of both feature matrices and both masks move together
            out = fusion_forward(p, variant, xs[:, perm], ms[:, ix[0], ix[1]], xf[:, perm], mf[:, ix[0], ix[1]])[0]
            assert np.max(np.abs(softmax(out) - probs)) < 1e-6


def test_unknown_variant():
    with pytest.raises(ValueError, match="variant"):
        init_fusion_params("gated", 4, 4)
    with pytest.raises(ValueError, match="variant"):
        GraphFusionClassifier("gated").resolved_hyperparameters()


def test_variant_defaults():
    assert GraphFusionClassifier("concat").resolved_hyperparameters() == dict(
        learning_rate=1e-2, weight_decay=1e-4, dropout=0.5)
    assert GraphFusionClassifier("dual").resolved_hyperparameters() == dict(
        learning_rate=5e-4, weight_decay=3e-5, dropout=0.3)
    assert GraphFusionClassifier("dual").heads == 8
    assert GraphFusionClassifier("dual", dropout=0.1).resolved_hyperparameters()["dropout"] == 0.1


def toy_graph_dataset(n_subjects=40, n=8, seed=0):
    rng = np.random.default_rng(seed)
    y = np.tile([0, 1], n_subjects // 2)
    gs, gf = [], []
    for label in y:
        emb = rng.normal(size=(n, 12))
        emb[:2] += 1.5 * label
        ts = rng.normal(size=(40, n))
        ts[:, 1] += (0.9 * label) * ts[:, 0]
        gs.append(build_structural_graph(emb, k=3))
        gf.append(build_functional_graph(ts, k=3))
    return (gs, gf), y


@pytest.mark.parametrize("variant", VARIANTS)
def test_classifier_fits_toy_data(variant):
    X, y = toy_graph_dataset()
    clf = GraphFusionClassifier(variant, epochs=30, learning_rate=3e-3, random_state=0).fit(X, y)
    assert clf.loss_curve_[-1] < clf.loss_curve_[0]
    assert clf.score(X, y) >= 0.75
    proba = clf.predict_proba(X)
    assert np.max(np.abs(proba.sum(1) - 1)) < 1e-6


def test_classifier_deterministic():
    X, y = toy_graph_dataset(20)
    a = GraphFusionClassifier("dual", epochs=3, random_state=5).fit(X, y)
    b = GraphFusionClassifier("dual", epochs=3, random_state=5).fit(X, y)
    for k in a.params_:
        np.testing.assert_array_equal(a.params_[k], b.params_[k])
