"""Adam with coupled L2 weight decay."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def like(cls, param, **hyper):
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param, grad, state):
    """Apply one Adam update to ``param`` in place and return it.

    Weight decay is the coupled form: ``weight_decay * param`` is added to the
    gradient before the moment updates.
    """
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    g = grad + state.weight_decay * param if state.weight_decay else grad
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * g
    state.v *= b2
    state.v += (1 - b2) * (g * g)
    m_hat = state.m / (1 - b1**state.t)
    v_hat = state.v / (1 - b2**state.t)
    param -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)
    return param


@dataclass
class Adam:
    """Adam over a dict of named parameter arrays."""

    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def step(self, params, grads):
        for name in sorted(params):
            if name not in grads:
                continue
            state = self.states.get(name)
            if state is None:
                state = AdamState.like(
                    params[name], lr=self.lr, weight_decay=self.weight_decay,
                    beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                )
                self.states[name] = state
            adam_step(params[name], grads[name], state)
        return params
