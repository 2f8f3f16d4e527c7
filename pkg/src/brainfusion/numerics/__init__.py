from .attention import mha_backward, mha_forward
from .gradcheck import check_param_grads, grad_check, numerical_gradient, relative_error
from .ops import (
    LEAKY_SLOPE,
    check_finite,
    cross_entropy_with_softmax,
    dropout_backward,
    dropout_forward,
    elu,
    elu_backward,
    gelu,
    gelu_backward,
    layer_norm_backward,
    layer_norm_forward,
    leaky_relu,
    leaky_relu_backward,
    linear_backward,
    linear_forward,
    matmul,
    matmul_backward,
    relu,
    relu_backward,
    softmax,
    softmax_backward,
)
from .optim import Adam, AdamState, adam_step
from .tensorfile import TensorFileError, load_tensor, save_tensor

__all__ = [
    "Adam", "AdamState", "LEAKY_SLOPE", "TensorFileError", "adam_step", "check_finite",
    "check_param_grads", "cross_entropy_with_softmax", "dropout_backward", "dropout_forward",
    "elu", "elu_backward", "gelu", "gelu_backward", "grad_check", "layer_norm_backward",
    "layer_norm_forward", "leaky_relu", "leaky_relu_backward", "linear_backward",
    "linear_forward", "load_tensor", "matmul", "matmul_backward", "mha_backward",
    "mha_forward", "numerical_gradient", "relative_error", "relu", "relu_backward",
    "save_tensor", "softmax", "softmax_backward",
]
