"""Dense kernels with hand-written backward passes.

Every differentiable primitive comes as a ``*_forward``/``*_backward`` pair
(or a single function when the backward is trivial to recompute). Arrays are
plain :class:`numpy.ndarray`; the last axis is the feature axis.
"""

import numpy as np

LEAKY_SLOPE = 0.2


def check_finite(x, name="array"):
    """Raise ``ValueError`` if ``x`` holds NaN or Inf."""
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


# -- matrix products ---------------------------------------------------------

def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(dout, a, b):
    """Gradients of ``a @ b`` for 2-D operands."""
    return dout @ b.T, a.T @ dout


def linear_forward(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    out = x @ w
    if b is not None:
        out = out + b
    return out


def linear_backward(dout, x, w, with_bias=True):
    d_in, d_out = w.shape
    dw = x.reshape(-1, d_in).T @ dout.reshape(-1, d_out)
    dx = dout @ w.T
    db = dout.reshape(-1, d_out).sum(axis=0) if with_bias else None
    return dx, dw, db


# -- normalisation -----------------------------------------------------------

def softmax(x, axis=-1):
    """Numerically stable softmax (max-subtracted)."""
    x = np.asarray(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(dout, y, axis=-1):
    """Backward through softmax given its output ``y``."""
    return y * (dout - np.sum(dout * y, axis=axis, keepdims=True))


def layer_norm_forward(x, gain, bias, eps=1e-5):
    """Layer normalisation over the last axis (population variance).

    Returns ``(out, cache)``.
    """
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs a normalisation extent of at least 2")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def layer_norm_backward(dout, cache):
    xhat, inv_std, gain = cache
    d = xhat.shape[-1]
    dxhat = dout * gain
    dx = (inv_std / d) * (
        d * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    dgain = (dout * xhat).reshape(-1, d).sum(axis=0)
    dbias = dout.reshape(-1, d).sum(axis=0)
    return dx, dgain, dbias


# -- activations -------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


def leaky_relu(x, slope=LEAKY_SLOPE):
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(dout, x, slope=LEAKY_SLOPE):
    return dout * np.where(x > 0, 1.0, slope).astype(dout.dtype, copy=False)


def elu(x, alpha=1.0):
    return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0)))


def elu_backward(dout, x, alpha=1.0):
    return dout * np.where(x > 0, 1.0, alpha * np.exp(np.minimum(x, 0))).astype(dout.dtype, copy=False)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """Tanh approximation of GELU."""
    inner = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_backward(dout, x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner)


# -- regularisation ----------------------------------------------------------

def dropout_forward(x, rate, training, rng):
    """Inverted dropout. Returns ``(out, mask)``; ``mask`` is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


# -- loss --------------------------------------------------------------------

def cross_entropy_with_softmax(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``.

    Returns ``(loss, dlogits)`` where ``dlogits = (softmax - onehot) / batch``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("expected (batch, classes) logits and (batch,) labels")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    labels = labels.astype(np.intp)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - shifted[rows, labels]))
    probs = np.exp(shifted - lse[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs / n
