"""Fusion of structural and functional node embeddings.

Both modalities are encoded by their own graph-attention layer. Two
strategies then produce a subject vector for a shared two-layer MLP:

``concat``
    ``[GAP(H_s) || GAP(H_f)]``
``dual``
    bidirectional cross-attention; each modality queries the other::

        H_f' = LN(H_f + MHA(q=H_f, kv=H_s))
        H_s' = LN(H_s + MHA(q=H_s, kv=H_f))

    followed by ``[GAP(H_s') || GAP(H_f')]``

The unimodal ablations ``structural`` and ``functional`` feed a single
``GAP`` vector to the MLP. Structural segments always come first.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .encoders.checkpoint import load_checkpoint, save_checkpoint
from .encoders.gat import GAT_HEAD_DIM, GAT_HEADS, gat_backward, gat_forward, graph_mask, init_gat_params
from .encoders.init import glorot_uniform
from .numerics import (
    Adam,
    cross_entropy_with_softmax,
    dropout_backward,
    dropout_forward,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
    linear_forward,
    mha_backward,
    mha_forward,
    relu,
    relu_backward,
    softmax,
)

VARIANTS = ("concat", "dual", "structural", "functional")

# optimiser and regulariser defaults per fusion strategy
VARIANT_DEFAULTS = {
    "concat": dict(learning_rate=1e-2, weight_decay=1e-4, dropout=0.5),
    "dual": dict(learning_rate=5e-4, weight_decay=3e-5, dropout=0.3),
}
VARIANT_DEFAULTS["structural"] = VARIANT_DEFAULTS["functional"] = VARIANT_DEFAULTS["concat"]


def _sub(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _prefixed(grads, prefix):
    return {prefix + k: v for k, v in grads.items()}


# -- pooling and concatenation ---------------------------------------------------

def global_average_pool(h):
    """Mean over the node axis (second to last)."""
    h = np.asarray(h)
    if h.ndim < 2 or h.shape[-2] == 0:
        raise ValueError("global_average_pool needs at least one node")
    return h.mean(axis=-2)


def concat_fuse(gs, gf):
    gs, gf = np.asarray(gs), np.asarray(gf)
    if gs.shape != gf.shape:
        raise ValueError(f"graph embeddings differ in shape: {gs.shape} vs {gf.shape}")
    return np.concatenate([gs, gf], axis=-1)


# -- cross-attention -----------------------------------------------------------------

def init_cross_attention_params(width=GAT_HEADS * GAT_HEAD_DIM, rng=None, dtype=np.float32):
    rng = np.random.default_rng(rng)
    p = {w: glorot_uniform(rng, width, width) for w in ("wq", "wk", "wv", "wo")}
    p.update(bo=np.zeros(width), ln_g=np.ones(width), ln_b=np.zeros(width))
    return {k: v.astype(dtype) for k, v in p.items()}


def cross_attention_forward(h_query, h_kv, params, heads=8):
    """``LN(h_query + MHA(h_query, h_kv))`` on (B, N, d) inputs."""
    h_query, h_kv = np.asarray(h_query), np.asarray(h_kv)
    if h_query.shape[-2] != h_kv.shape[-2]:
        raise ValueError(f"node counts differ between modalities: {h_query.shape[-2]} vs {h_kv.shape[-2]}")
    single = h_query.ndim == 2
    if single:
        h_query, h_kv = h_query[None], h_kv[None]
    att, c_att = mha_forward(h_query, h_kv, params["wq"], params["wk"], params["wv"],
                             params["wo"], params["bo"], heads)
    out, c_ln = layer_norm_forward(h_query + att, params["ln_g"], params["ln_b"])
    cache = dict(att=c_att, ln=c_ln, single=single)
    return (out[0] if single else out), cache


def cross_attention_backward(dout, cache):
    """Returns ``(d_query, d_kv, grads)``."""
    if cache["single"]:
        dout = dout[None]
    grads = {}
    dsum, grads["ln_g"], grads["ln_b"] = layer_norm_backward(dout, cache["ln"])
    dq, dkv, ga = mha_backward(dsum, cache["att"])
    grads.update(ga)
    dq = dq + dsum
    if cache["single"]:
        dq, dkv = dq[0], dkv[0]
    return dq, dkv, grads


def cross_attention_block(query_src, kv_src, params, heads=8):
    return cross_attention_forward(query_src, kv_src, params, heads)[0]


def dual_cross_attention_forward(hs, hf, params, heads=8):
    """``params`` holds ``sf.*`` (functional queries structural) and ``fs.*``."""
    hf_new, c_sf = cross_attention_forward(hf, hs, _sub(params, "sf."), heads)
    hs_new, c_fs = cross_attention_forward(hs, hf, _sub(params, "fs."), heads)
    fused = concat_fuse(global_average_pool(hs_new), global_average_pool(hf_new))
    return fused, dict(sf=c_sf, fs=c_fs, n=hs.shape[-2], width=hs.shape[-1])


def dual_cross_attention_backward(dfused, cache):
    """Returns ``(d_hs, d_hf, grads)``."""
    n, w = cache["n"], cache["width"]
    dgs, dgf = dfused[..., :w], dfused[..., w:]
    dhs_new = np.repeat(dgs[..., None, :] / n, n, axis=-2)
    dhf_new = np.repeat(dgf[..., None, :] / n, n, axis=-2)
    dhf, dhs_kv, g_sf = cross_attention_backward(dhf_new, cache["sf"])
    dhs, dhf_kv, g_fs = cross_attention_backward(dhs_new, cache["fs"])
    grads = {**_prefixed(g_sf, "sf."), **_prefixed(g_fs, "fs.")}
    return dhs + dhs_kv, dhf + dhf_kv, grads


def dual_cross_attention_fuse(hs, hf, params, heads=8):
    return dual_cross_attention_forward(hs, hf, params, heads)[0]


# -- classifier head -------------------------------------------------------------------

def init_mlp_params(d_in, hidden=64, n_classes=2, rng=None, dtype=np.float32):
    rng = np.random.default_rng(rng)
    p = dict(w1=glorot_uniform(rng, d_in, hidden), b1=np.zeros(hidden),
             w2=glorot_uniform(rng, hidden, n_classes), b2=np.zeros(n_classes))
    return {k: v.astype(dtype) for k, v in p.items()}


def mlp_forward(z, params, dropout=0.0, training=False, rng=None):
    """Logits of ``W2 Dropout(ReLU(W1 z + b1)) + b2``."""
    if z.shape[-1] != params["w1"].shape[0]:
        raise ValueError(f"MLP expects width {params['w1'].shape[0]}, got {z.shape[-1]}")
    pre = linear_forward(z, params["w1"], params["b1"])
    h, mask = dropout_forward(relu(pre), dropout, training, rng)
    logits = linear_forward(h, params["w2"], params["b2"])
    return logits, dict(z=z, pre=pre, h=h, mask=mask, params=params)


def mlp_backward(dlogits, cache):
    p = cache["params"]
    grads = {}
    dh, grads["w2"], grads["b2"] = linear_backward(dlogits, cache["h"], p["w2"])
    dpre = relu_backward(dropout_backward(dh, cache["mask"]), cache["pre"])
    dz, grads["w1"], grads["b1"] = linear_backward(dpre, cache["z"], p["w1"])
    return dz, grads


def mlp_classify(z, params, dropout=0.0, training=False, rng=None):
    """Class probabilities."""
    return softmax(mlp_forward(z, params, dropout, training, rng)[0], axis=-1)


# -- full fusion network -------------------------------------------------------------

def init_fusion_params(variant, d_struct, d_func, hidden=64, n_classes=2, heads=8, rng=None,
                       dtype=np.float32):
    """Parameters for one variant; ``heads`` must divide the GAT output width."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown fusion variant {variant!r}; choose from {VARIANTS}")
    rng = np.random.default_rng(rng)
    width = GAT_HEADS * GAT_HEAD_DIM
    if width % heads:
        raise ValueError(f"{heads} heads do not divide width {width}")
    p = {}
    if variant != "functional":
        p.update(_prefixed(init_gat_params(d_struct, rng=rng, dtype=dtype), "gat_s."))
    if variant != "structural":
        p.update(_prefixed(init_gat_params(d_func, rng=rng, dtype=dtype), "gat_f."))
    if variant == "dual":
        p.update(_prefixed(init_cross_attention_params(width, rng, dtype), "xa.sf."))
        p.update(_prefixed(init_cross_attention_params(width, rng, dtype), "xa.fs."))
    d_in = width if variant in ("structural", "functional") else 2 * width
    p.update(_prefixed(init_mlp_params(d_in, hidden, n_classes, rng, dtype), "mlp."))
    return p


def fusion_forward(params, variant, xs, ms, xf, mf, heads=8, dropout=0.0, training=False, rng=None):
    """Logits for a batch. ``xs``/``xf`` are (B, N, d) node features, ``ms``/``mf`` masks."""
    cache = {"variant": variant}
    if variant != "functional":
        hs, cache["gat_s"] = gat_forward(xs, ms, _sub(params, "gat_s."))
    if variant != "structural":
        hf, cache["gat_f"] = gat_forward(xf, mf, _sub(params, "gat_f."))
    if variant == "concat":
        z = concat_fuse(global_average_pool(hs), global_average_pool(hf))
        cache["n"] = hs.shape[-2]
    elif variant == "dual":
        z, cache["xa"] = dual_cross_attention_forward(hs, hf, _sub(params, "xa."), heads)
    else:
        h = hs if variant == "structural" else hf
        z = global_average_pool(h)
        cache["n"] = h.shape[-2]
    logits, cache["mlp"] = mlp_forward(z, _sub(params, "mlp."), dropout, training, rng)
    cache["z"] = z
    return logits, cache


def fusion_backward(dlogits, cache):
    variant = cache["variant"]
    dz, g = mlp_backward(dlogits, cache["mlp"])
    grads = _prefixed(g, "mlp.")

    def unpool(dg):
        n = cache["n"]
        return np.repeat(dg[..., None, :] / n, n, axis=-2)

    dhs = dhf = None
    if variant == "concat":
        w = dz.shape[-1] // 2
        dhs, dhf = unpool(dz[..., :w]), unpool(dz[..., w:])
    elif variant == "dual":
        dhs, dhf, g = dual_cross_attention_backward(dz, cache["xa"])
        grads.update(_prefixed(g, "xa."))
    elif variant == "structural":
        dhs = unpool(dz)
    else:
        dhf = unpool(dz)
    if dhs is not None:
        grads.update(_prefixed(gat_backward(dhs, cache["gat_s"])[1], "gat_s."))
    if dhf is not None:
        grads.update(_prefixed(gat_backward(dhf, cache["gat_f"])[1], "gat_f."))
    return grads


def feature_scale(x):
    """Per-feature-column mean and std pooled over subjects and nodes (std 0 -> 1)."""
    flat = x.reshape(-1, x.shape[-1]).astype(np.float64)
    sd = flat.std(axis=0)
    return flat.mean(axis=0).astype(x.dtype), np.where(sd > 0, sd, 1.0).astype(x.dtype)


def stack_graphs(graphs, dtype=np.float32):
    """Stack same-size graphs into (B, N, d) features and (B, N, N) masks."""
    x = np.stack([g.node_features for g in graphs]).astype(dtype)
    m = np.stack([graph_mask(g) for g in graphs])
    return x, m


class GraphFusionClassifier(ClassifierMixin, BaseEstimator):
    """GAT encoders + fusion + MLP, trained with Adam on cross-entropy.

    ``fit``/``predict`` take ``X = (structural_graphs, functional_graphs)``,
    two equally long lists of :class:`~brainfusion.graphs.BrainGraph` over
    the same atlas. Node features of each modality are standardised per
    feature column with statistics from the training graphs, so both
    encoders start from comparable scales.

    Parameters
    ----------
    variant : {"concat", "dual", "structural", "functional"}
    learning_rate, weight_decay, dropout : float or None
        ``None`` picks the variant default from :data:`VARIANT_DEFAULTS`.
    heads : int
        Cross-attention heads (dual variant only).
    hidden_dim, batch_size, epochs : int
    random_state : int
    """

    def __init__(self, variant="dual", learning_rate=None, weight_decay=None, dropout=None, heads=8,
                 hidden_dim=64, batch_size=16, epochs=100, random_state=0):
        self.variant = variant
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.heads = heads
        self.hidden_dim = hidden_dim
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def resolved_hyperparameters(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown fusion variant {self.variant!r}; choose from {VARIANTS}")
        out = dict(VARIANT_DEFAULTS[self.variant])
        for key in out:
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out

    def _arrays(self, X):
        gs, gf = X
        if len(gs) != len(gf):
            raise ValueError("structural and functional graph lists differ in length")
        return (*stack_graphs(gs), *stack_graphs(gf))

    def _scaled(self, X):
        xs, ms, xf, mf = self._arrays(X)
        (mu_s, sd_s), (mu_f, sd_f) = self.scale_
        return (xs - mu_s) / sd_s, ms, (xf - mu_f) / sd_f, mf

    def fit(self, X, y):
        hyper = self.resolved_hyperparameters()
        xs, _, xf, _ = self._arrays(X)
        self.scale_ = (feature_scale(xs), feature_scale(xf))
        xs, ms, xf, mf = self._scaled(X)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        seeds = np.random.SeedSequence(self.random_state).spawn(2)
        init_rng, rng = np.random.default_rng(seeds[0]), np.random.default_rng(seeds[1])
        self.params_ = init_fusion_params(self.variant, xs.shape[-1], xf.shape[-1], self.hidden_dim,
                                          max(2, len(self.classes_)), self.heads, init_rng)
        opt = Adam(lr=hyper["learning_rate"], weight_decay=hyper["weight_decay"])
        n = len(y_idx)
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                logits, cache = fusion_forward(self.params_, self.variant, xs[idx], ms[idx], xf[idx], mf[idx],
                                               self.heads, hyper["dropout"], True, rng)
                loss, dlogits = cross_entropy_with_softmax(logits, y_idx[idx])
                if not np.isfinite(loss):
                    raise FloatingPointError(f"non-finite fusion loss at epoch {epoch}")
                opt.step(self.params_, fusion_backward(dlogits, cache))
                total += loss * len(idx)
            self.loss_curve_.append(total / n)
        return self

    def decision_logits(self, X):
        check_is_fitted(self, "params_")
        xs, ms, xf, mf = self._scaled(X)
        return fusion_forward(self.params_, self.variant, xs, ms, xf, mf, self.heads)[0]

    def predict_proba(self, X):
        return softmax(self.decision_logits(X), axis=-1)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_logits(X), axis=1)]

    def save(self, directory):
        check_is_fitted(self, "params_")
        arrays = dict(self.params_)
        (arrays["scale.s_mean"], arrays["scale.s_std"]), (arrays["scale.f_mean"], arrays["scale.f_std"]) = self.scale_
        meta = {"estimator": "GraphFusionClassifier", "variant": self.variant,
                "hyperparameters": self.get_params(), "classes": self.classes_.tolist()}
        return save_checkpoint(directory, arrays, meta)

    @classmethod
    def load(cls, directory):
        arrays, meta = load_checkpoint(directory)
        if meta.get("estimator") != "GraphFusionClassifier":
            raise ValueError(f"{directory} does not hold a GraphFusionClassifier checkpoint")
        model = cls(**meta["hyperparameters"])
        model.scale_ = ((arrays.pop("scale.s_mean"), arrays.pop("scale.s_std")),
                        (arrays.pop("scale.f_mean"), arrays.pop("scale.f_std")))
        model.params_ = arrays
        model.classes_ = np.array(meta["classes"])
        model.loss_curve_ = []
        return model
