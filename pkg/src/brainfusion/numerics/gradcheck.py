"""Central finite-difference gradient checking."""

import numpy as np


def numerical_gradient(f, x, perturbation=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (``x`` is restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + perturbation
        fp = f(x)
        flat[i] = orig - perturbation
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * perturbation)
    return grad


def relative_error(g_fd, g_an):
    """max |g_fd - g_an| / max(1, |g_fd|, |g_an|) over coordinates."""
    g_fd = np.asarray(g_fd, dtype=np.float64)
    g_an = np.asarray(g_an, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(g_fd), np.abs(g_an)))
    if g_fd.size == 0:
        return 0.0
    return float(np.max(np.abs(g_fd - g_an) / denom))


def grad_check(f, point, analytic_grad, perturbation=1e-5):
    """Compare ``analytic_grad`` against central differences of ``f`` at ``point``.

    ``point`` must be float64; it is perturbed in place and restored.
    Returns the maximum relative error.
    """
    if point.dtype != np.float64:
        raise TypeError("grad_check requires float64 inputs")
    if not np.all(np.isfinite(analytic_grad)):
        raise FloatingPointError("analytic gradient is non-finite")
    return relative_error(numerical_gradient(f, point, perturbation), analytic_grad)


def check_param_grads(loss_fn, params, grads, perturbation=1e-5, names=None):
    """Grad-check every parameter in a dict; returns ``{name: rel_error}``.

    ``loss_fn()`` must read the (mutated in place) ``params`` each call.
    """
    out = {}
    for name in names or sorted(params):
        out[name] = grad_check(lambda _: loss_fn(), params[name], grads[name], perturbation)
    return out
