"""Adam optimizer with bias correction.

Defaults follow the training protocol used throughout this project:
learning rate 1e-4, beta1 0.9, beta2 0.999, epsilon 1e-8. Updates are
computed in the parameter dtype and are deterministic given identical
inputs.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["adam_step", "Adam"]


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Apply one bias-corrected Adam update in place.

    ``param``, ``m`` and ``v`` are mutated; ``t`` is the 1-based step
    index used for bias correction.
    """
    if t < 1:
        raise ValueError(f"adam_step: step index must be >= 1, got {t}")
    if grad.shape != param.shape or m.shape != param.shape or v.shape != param.shape:
        raise ValueError(
            f"adam_step: shape mismatch param {param.shape}, grad {grad.shape}, "
            f"m {m.shape}, v {v.shape}"
        )
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a list of parameter tensors, reading grads from ``.grad``."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr < 0:
            raise ValueError(f"Adam: learning rate must be non-negative, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """Update every parameter from its current gradient."""
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise RuntimeError("Adam.step: parameter has no gradient; run backward first")
            adam_step(p.data, p.grad, m, v, self.t, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
