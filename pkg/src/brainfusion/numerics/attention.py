"""Multi-head scaled dot-product attention with a manual backward pass.

Shared by the ViT self-attention blocks (query source == key/value source)
and the fusion cross-attention blocks.
"""

import numpy as np

from .ops import linear_backward, linear_forward, softmax, softmax_backward


def _split_heads(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dk)


def mha_forward(xq, xkv, wq, wk, wv, wo, bo, heads):
    """Attention of ``xq`` rows over ``xkv`` rows.

    Shapes: ``xq`` (B, Nq, d_q), ``xkv`` (B, Nk, d_kv); ``wq/wk/wv`` map to
    ``heads * d_head`` columns; ``wo`` projects the concatenated heads.
    Returns ``(out, cache)``; ``cache["attn"]`` holds the (B, h, Nq, Nk)
    attention weights.
    """
    width = wq.shape[1]
    if width % heads or wk.shape[1] != width or wv.shape[1] != width:
        raise ValueError("projection widths must match and divide evenly into heads")
    if xq.shape[0] != xkv.shape[0]:
        raise ValueError("query and key/value batches differ")
    q = _split_heads(linear_forward(xq, wq), heads)
    k = _split_heads(linear_forward(xkv, wk), heads)
    v = _split_heads(linear_forward(xkv, wv), heads)
    scale = 1.0 / np.sqrt(width // heads)
    attn = softmax((q @ k.transpose(0, 1, 3, 2)) * scale, axis=-1)
    ctx = _merge_heads(attn @ v)
    out = linear_forward(ctx, wo, bo)
    cache = dict(xq=xq, xkv=xkv, q=q, k=k, v=v, attn=attn, ctx=ctx,
                 wq=wq, wk=wk, wv=wv, wo=wo, scale=scale, heads=heads)
    return out, cache


def mha_backward(dout, cache):
    """Returns ``(dxq, dxkv, grads)`` with grads keyed wq, wk, wv, wo, bo."""
    c = cache
    heads = c["heads"]
    dctx, dwo, dbo = linear_backward(dout, c["ctx"], c["wo"])
    dctx = _split_heads(dctx, heads)
    attn = c["attn"]
    dattn = dctx @ c["v"].transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    dscores = softmax_backward(dattn, attn) * c["scale"]
    dq = dscores @ c["k"]
    dk = dscores.transpose(0, 1, 3, 2) @ c["q"]
    dxq, dwq, _ = linear_backward(_merge_heads(dq), c["xq"], c["wq"], with_bias=False)
    dxk, dwk, _ = linear_backward(_merge_heads(dk), c["xkv"], c["wk"], with_bias=False)
    dxv, dwv, _ = linear_backward(_merge_heads(dv), c["xkv"], c["wv"], with_bias=False)
    grads = dict(wq=dwq, wk=dwk, wv=dwv, wo=dwo, bo=dbo)
    return dxq, dxk + dxv, grads
