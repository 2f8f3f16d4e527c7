"""Single-layer multi-head graph attention.

For head ``k`` with projection ``W_k`` and attention vector
``a_k = [a_src ; a_dst]``::

    e_ij   = LeakyReLU(a_src . W_k z_i + a_dst . W_k z_j)     j in N(i) + {i}
    alpha  = softmax_j(e_ij)
    h_i^k  = ELU(sum_j alpha_ij W_k z_j)

Heads are concatenated. Attention is computed densely with non-neighbours
masked out, which is cheap at atlas sizes (N in the tens to hundreds).
"""

import numpy as np

from ..numerics import (
    LEAKY_SLOPE,
    elu,
    elu_backward,
    leaky_relu,
    leaky_relu_backward,
    linear_backward,
    linear_forward,
    softmax,
    softmax_backward,
)
from .init import glorot_uniform

GAT_HEADS = 4
GAT_HEAD_DIM = 16


def init_gat_params(d_in, heads=GAT_HEADS, d_head=GAT_HEAD_DIM, rng=None, dtype=np.float32):
    rng = np.random.default_rng(rng)
    width = heads * d_head
    p = {
        "w": glorot_uniform(rng, d_in, width),
        # each head's attention vector has fan (2 * d_head -> 1)
        "a_src": glorot_uniform(rng, 2 * d_head, 1, shape=(heads, d_head)),
        "a_dst": glorot_uniform(rng, 2 * d_head, 1, shape=(heads, d_head)),
    }
    return {k: v.astype(dtype) for k, v in p.items()}


def graph_mask(graph):
    """Boolean (N, N) neighbourhood mask with self-loops."""
    return graph.adjacency(self_loops=True)


def gat_forward(x, mask, params):
    """Forward pass on (B, N, d_in) features with a (B, N, N) boolean mask.

    Unbatched (N, d_in) / (N, N) inputs are accepted. Returns
    ``(out, cache)`` with ``out`` of width ``heads * d_head`` and
    ``cache["alpha"]`` of shape (B, heads, N, N).
    """
    x = np.asarray(x)
    mask = np.asarray(mask, dtype=bool)
    single = x.ndim == 2
    if single:
        x, mask = x[None], mask[None]
    if x.shape[-1] != params["w"].shape[0]:
        raise ValueError(f"node features have width {x.shape[-1]}, GAT expects {params['w'].shape[0]}")
    b, n, _ = x.shape
    if mask.shape != (b, n, n):
        raise ValueError(f"mask shape {mask.shape} does not match {n} nodes")
    if not mask[:, np.arange(n), np.arange(n)].all():
        raise ValueError("mask must include self-loops")
    heads, d_head = params["a_src"].shape
    wh = linear_forward(x, params["w"]).reshape(b, n, heads, d_head).transpose(0, 2, 1, 3)
    s_src = np.einsum("bhnd,hd->bhn", wh, params["a_src"])
    s_dst = np.einsum("bhnd,hd->bhn", wh, params["a_dst"])
    raw = s_src[..., :, None] + s_dst[..., None, :]
    e = np.where(mask[:, None], leaky_relu(raw, LEAKY_SLOPE), -np.inf)
    alpha = softmax(e, axis=-1)
    pre = (alpha @ wh).transpose(0, 2, 1, 3).reshape(b, n, heads * d_head)
    out = elu(pre)
    cache = dict(x=x, mask=mask, wh=wh, raw=raw, alpha=alpha, pre=pre, params=params, single=single)
    return (out[0] if single else out), cache


def gat_backward(dout, cache):
    """Returns ``(dx, grads)`` with grads keyed ``w``, ``a_src``, ``a_dst``."""
    c = cache
    p = c["params"]
    if c["single"]:
        dout = dout[None]
    b, heads, n, d_head = c["wh"].shape
    dpre = elu_backward(dout, c["pre"]).reshape(b, n, heads, d_head).transpose(0, 2, 1, 3)
    alpha, wh = c["alpha"], c["wh"]
    dalpha = dpre @ wh.transpose(0, 1, 3, 2)
    dwh = alpha.transpose(0, 1, 3, 2) @ dpre
    de = softmax_backward(dalpha, alpha, axis=-1)
    draw = leaky_relu_backward(de, c["raw"], LEAKY_SLOPE) * c["mask"][:, None]
    ds_src = draw.sum(axis=-1)
    ds_dst = draw.sum(axis=-2)
    dwh += ds_src[..., None] * p["a_src"][None, :, None, :] + ds_dst[..., None] * p["a_dst"][None, :, None, :]
    grads = {
        "a_src": np.einsum("bhn,bhnd->hd", ds_src, wh),
        "a_dst": np.einsum("bhn,bhnd->hd", ds_dst, wh),
    }
    dwh_flat = dwh.transpose(0, 2, 1, 3).reshape(b, n, heads * d_head)
    dx, grads["w"], _ = linear_backward(dwh_flat, c["x"], p["w"], with_bias=False)
    return (dx[0] if c["single"] else dx), grads


def gat_layer(graph, params):
    """Node embeddings (N, heads * d_head) for one :class:`BrainGraph`."""
    out, _ = gat_forward(graph.node_features.astype(params["w"].dtype, copy=False), graph_mask(graph), params)
    return out
