import numpy as np


def glorot_uniform(rng, fan_in, fan_out, shape=None):
    """Uniform on +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))
