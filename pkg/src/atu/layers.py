"""Parameter initialisation and functional layers shared by the networks."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, mean, reshape, relu, sqrt


# Fan-in uniform scaling with bound 1/sqrt(fan_in). Larger gains (e.g. the
# ReLU-preserving sqrt(2)) make the untrained regression net steep enough that
# the adversarial task loss runs away before the meta-model has learnt anything.
DEFAULT_GAIN = 3.0**-0.5


def init_dense(
    rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = DEFAULT_GAIN
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform weights in ``+-gain * sqrt(3 / fan_in)``, zero bias."""
    bound = gain * np.sqrt(3.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return w, np.zeros(fan_out)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` where ``w``/``b`` may carry a leading per-task axis.

    For per-task weights ``w`` is ``(B, in, out)`` and ``b`` is ``(B, out)``;
    ``x`` is then ``(B, n, in)``.
    """
    bias = reshape(b, b.shape[:-1] + (1, b.shape[-1])) if b.ndim > 1 else b
    return x @ w + bias


def mlp(x: Tensor, layers: list[tuple[Tensor, Tensor]], final_relu: bool = False) -> Tensor:
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = dense(h, w, b)
        if i < last or final_relu:
            h = relu(h)
    return h


def batch_norm(x: Tensor, axis=0, eps: float = 1e-5) -> Tensor:
    """Normalise with batch statistics (no affine part)."""
    mu = mean(x, axis=axis, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=axis, keepdims=True)
    return centered / sqrt(var + eps)
