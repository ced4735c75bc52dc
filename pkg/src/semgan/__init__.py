from .autodiff import Tensor, backward, grad_check, no_grad  # noqa: F401

__version__ = "0.1.0"
