from .autodiff import (ContractError, Node, as_node, backward, break_adjoint,
                       constant, grad_check, parameter)
from .fft import UnsupportedSizeError, fft2, ifft2, is_pow2
from .ops import DimensionError
from . import fnt, ops

__all__ = [
    "ContractError", "DimensionError", "Node", "UnsupportedSizeError",
    "as_node", "backward", "break_adjoint", "constant", "fft2", "fnt",
    "grad_check", "ifft2", "is_pow2", "ops", "parameter",
]
