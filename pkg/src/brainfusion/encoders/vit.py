"""3-D Vision Transformer over ROI patch sets.

Each ROI contributes one cubic patch; patches are flattened, linearly
projected to width ``d``, prefixed with a learnable class token and offset
by a learned positional table. Pre-norm encoder blocks follow::

    Z' = MHSA(LN(Z)) + Z
    Z  = MLP(LN(Z')) + Z'

The classifier reads the concatenation of every final token
``[CLS, ROI_1, ..., ROI_N]`` of length ``(N + 1) * d``.

Parameters live in a flat ``dict`` of arrays. Linear maps are stored as
``(in, out)`` so that ``x @ w`` applies them.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ..numerics import (
    Adam,
    check_finite,
    cross_entropy_with_softmax,
    gelu,
    gelu_backward,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
    linear_forward,
    mha_backward,
    mha_forward,
    softmax,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .init import glorot_uniform

BLOCK_KEYS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


def init_vit_params(n_rois, patch_side, d_model=128, depth=6, heads=8, n_classes=2,
                    mlp_ratio=4, rng=None, dtype=np.float32):
    """Glorot-uniform linear maps, zero biases, N(0, 1/d) class and position tables."""
    if d_model % heads:
        raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
    rng = np.random.default_rng(rng)
    d, d_mlp, vox = d_model, mlp_ratio * d_model, patch_side**3
    p = {
        "patch_w": glorot_uniform(rng, vox, d),
        "patch_b": np.zeros(d),
        "cls": rng.standard_normal(d) / np.sqrt(d),
        "pos": rng.standard_normal((n_rois + 1, d)) / np.sqrt(d),
    }
    for layer in range(depth):
        b = f"b{layer}."
        p[b + "ln1_g"], p[b + "ln1_b"] = np.ones(d), np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            p[b + w] = glorot_uniform(rng, d, d)
        p[b + "bo"] = np.zeros(d)
        p[b + "ln2_g"], p[b + "ln2_b"] = np.ones(d), np.zeros(d)
        p[b + "w1"], p[b + "b1"] = glorot_uniform(rng, d, d_mlp), np.zeros(d_mlp)
        p[b + "w2"], p[b + "b2"] = glorot_uniform(rng, d_mlp, d), np.zeros(d)
    p["head_w"] = glorot_uniform(rng, (n_rois + 1) * d, n_classes)
    p["head_b"] = np.zeros(n_classes)
    return {k: v.astype(dtype) for k, v in p.items()}


def vit_depth(params):
    return sum(1 for k in params if k.endswith(".ln1_g"))


def block_params(params, layer):
    return {k: params[f"b{layer}.{k}"] for k in BLOCK_KEYS}


# -- patch embedding -----------------------------------------------------------

def vit_embed_patches(patches, params):
    """Token sequence ``Z_0`` of shape (B, N + 1, d) for (B, N, p, p, p) patches.

    An unbatched (N, p, p, p) input gives (N + 1, d).
    """
    patches = np.asarray(patches)
    single = patches.ndim == 4
    if single:
        patches = patches[None]
    if patches.ndim != 5:
        raise ValueError(f"expected (B, N, p, p, p) patches, got shape {patches.shape}")
    b, n = patches.shape[:2]
    flat = patches.reshape(b, n, -1)
    if flat.shape[-1] != params["patch_w"].shape[0]:
        raise ValueError(f"patch has {flat.shape[-1]} voxels, projection expects {params['patch_w'].shape[0]}")
    if n + 1 != params["pos"].shape[0]:
        raise ValueError(f"{n} patches but positional table has {params['pos'].shape[0]} rows")
    tokens = linear_forward(flat.astype(params["patch_w"].dtype, copy=False), params["patch_w"], params["patch_b"])
    cls = np.broadcast_to(params["cls"], (b, 1, tokens.shape[-1]))
    z = np.concatenate([cls, tokens], axis=1) + params["pos"]
    return (z[0] if single else z), flat


def _embed_backward(dz, flat, params):
    grads = {"pos": dz.sum(axis=0), "cls": dz[:, 0].sum(axis=0)}
    _, grads["patch_w"], grads["patch_b"] = linear_backward(dz[:, 1:], flat, params["patch_w"])
    return grads


# -- encoder block -------------------------------------------------------------

def vit_block_forward(z, bp, heads):
    """One pre-norm encoder block on (B, T, d) tokens. Returns ``(out, cache)``."""
    a, c_ln1 = layer_norm_forward(z, bp["ln1_g"], bp["ln1_b"])
    att, c_att = mha_forward(a, a, bp["wq"], bp["wk"], bp["wv"], bp["wo"], bp["bo"], heads)
    z1 = z + att
    m, c_ln2 = layer_norm_forward(z1, bp["ln2_g"], bp["ln2_b"])
    h = linear_forward(m, bp["w1"], bp["b1"])
    g = gelu(h)
    out = z1 + linear_forward(g, bp["w2"], bp["b2"])
    return out, dict(ln1=c_ln1, att=c_att, ln2=c_ln2, m=m, h=h, g=g, w1=bp["w1"], w2=bp["w2"])


def vit_block_backward(dout, cache):
    """Returns ``(dz, grads)`` with grads keyed as in :data:`BLOCK_KEYS`."""
    c = cache
    grads = {}
    dg, grads["w2"], grads["b2"] = linear_backward(dout, c["g"], c["w2"])
    dm, grads["w1"], grads["b1"] = linear_backward(gelu_backward(dg, c["h"]), c["m"], c["w1"])
    dz1_ln, grads["ln2_g"], grads["ln2_b"] = layer_norm_backward(dm, c["ln2"])
    dz1 = dout + dz1_ln
    dxq, dxkv, ga = mha_backward(dz1, c["att"])
    grads.update(ga)
    dz_ln, grads["ln1_g"], grads["ln1_b"] = layer_norm_backward(dxq + dxkv, c["ln1"])
    return dz1 + dz_ln, grads


# -- full network ----------------------------------------------------------------

def vit_encode(patches, params, heads):
    """Final token states ``Z_L`` (B, N + 1, d) plus the caches for backward."""
    z, flat = vit_embed_patches(np.asarray(patches)[None] if np.ndim(patches) == 4 else patches, params)
    caches = []
    for layer in range(vit_depth(params)):
        z, c = vit_block_forward(z, block_params(params, layer), heads)
        caches.append(c)
    return z, (flat, caches)


def vit_final_representation(z_final):
    """Concatenate ``[CLS, ROI_1, ..., ROI_N]``; (B, N+1, d) -> (B, (N+1)*d)."""
    z_final = np.asarray(z_final)
    return z_final.reshape(*z_final.shape[:-2], -1)


def vit_classify(rep, head_w, head_b):
    """Softmax class probabilities from the flattened representation."""
    return softmax(linear_forward(rep, head_w, head_b), axis=-1)


def vit_roi_embeddings(patches, params, heads):
    """ROI token embeddings (B, N, d) in atlas order; the class token is dropped."""
    single = np.ndim(patches) == 4
    z, _ = vit_encode(patches, params, heads)
    out = z[:, 1:]
    return out[0] if single else out


def vit_loss_and_grads(patches, labels, params, heads):
    """Mean cross-entropy of the classifier and gradients for every parameter."""
    z, (flat, caches) = vit_encode(patches, params, heads)
    rep = vit_final_representation(z)
    logits = linear_forward(rep, params["head_w"], params["head_b"])
    loss, dlogits = cross_entropy_with_softmax(logits, labels)
    grads = {}
    drep, grads["head_w"], grads["head_b"] = linear_backward(dlogits, rep, params["head_w"])
    dz = drep.reshape(z.shape)
    for layer in reversed(range(len(caches))):
        dz, g = vit_block_backward(dz, caches[layer])
        grads.update({f"b{layer}.{k}": v for k, v in g.items()})
    grads.update(_embed_backward(dz, flat, params))
    return loss, grads


class ViTClassifier(ClassifierMixin, BaseEstimator):
    """Patch-set ViT trained on the subject label; also serves ROI embeddings.

    Parameters
    ----------
    d_model, depth, heads : int
        Token width, number of encoder blocks and attention heads.
    mlp_ratio : int
        Hidden width of the block MLP as a multiple of ``d_model``.
    learning_rate, weight_decay : float
        Adam step size and coupled L2 penalty.
    epochs, batch_size : int
    random_state : int
        Seeds parameter init and minibatch order.

    Attributes
    ----------
    params_ : dict of ndarray
    classes_ : ndarray
    loss_curve_ : list of float
        Mean training loss per epoch.
    """

    def __init__(self, d_model=128, depth=6, heads=8, mlp_ratio=4, learning_rate=1e-3,
                 weight_decay=1e-4, epochs=50, batch_size=16, random_state=0):
        self.d_model = d_model
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, patches, y):
        patches = check_finite(np.asarray(patches, dtype=np.float32), "patches")
        if patches.ndim != 5 or len(set(patches.shape[2:])) != 1:
            raise ValueError("expected (subjects, N, p, p, p) cubic patches")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        rng = np.random.default_rng(self.random_state)
        n, n_rois, p = patches.shape[0], patches.shape[1], patches.shape[2]
        self.params_ = init_vit_params(n_rois, p, self.d_model, self.depth, self.heads,
                                       max(2, len(self.classes_)), self.mlp_ratio, rng)
        opt = Adam(lr=self.learning_rate, weight_decay=self.weight_decay)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                loss, grads = vit_loss_and_grads(patches[idx], y_idx[idx], self.params_, self.heads)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"non-finite ViT loss at epoch {len(self.loss_curve_)}")
                opt.step(self.params_, grads)
                total += loss * len(idx)
            self.loss_curve_.append(total / n)
        return self

    def _batched(self, patches, fn):
        check_is_fitted(self, "params_")
        patches = np.asarray(patches, dtype=np.float32)
        return np.concatenate([fn(patches[i:i + 64]) for i in range(0, len(patches), 64)])

    def predict_proba(self, patches):
        def probs(chunk):
            z, _ = vit_encode(chunk, self.params_, self.heads)
            return vit_classify(vit_final_representation(z), self.params_["head_w"], self.params_["head_b"])
        return self._batched(patches, probs)

    def predict(self, patches):
        return self.classes_[np.argmax(self.predict_proba(patches), axis=1)]

    def transform(self, patches):
        """ROI embeddings, shape (subjects, N, d_model)."""
        return self._batched(patches, lambda chunk: vit_roi_embeddings(chunk, self.params_, self.heads))

    def save(self, directory):
        check_is_fitted(self, "params_")
        meta = {"estimator": "ViTClassifier", "hyperparameters": self.get_params(),
                "classes": self.classes_.tolist()}
        return save_checkpoint(directory, self.params_, meta)

    @classmethod
    def load(cls, directory):
        params, meta = load_checkpoint(directory)
        if meta.get("estimator") != "ViTClassifier":
            raise ValueError(f"{directory} does not hold a ViTClassifier checkpoint")
        model = cls(**meta["hyperparameters"])
        model.params_ = params
        model.classes_ = np.array(meta["classes"])
        model.loss_curve_ = []
        return model
