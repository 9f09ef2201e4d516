"""Batch, instance, and adaptive instance normalization.

Batch norm summarizes mini-batch (global) statistics per channel; instance
statistics are per-sample per-channel moments over spatial positions; adaptive
instance normalization re-statistics a map to externally supplied per-channel
scale and shift. Variance stays population (biased), and every square root
carries a small epsilon floor so degenerate (constant) maps keep defined
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor

VAR_EPS = 1e-5


class DegenerateBatchError(ValueError):
    """Training-mode batch statistics requested for a batch of size 1."""


@dataclass
class StyleParams:
    """Per-channel affine parameters; shape [C] or per-sample [N, C]."""

    gamma: Tensor
    beta: Tensor

    def channels(self) -> int:
        return self.gamma.shape[-1]


@dataclass
class BatchNormState:
    """Learned scale/shift plus running statistics for one batch-norm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = VAR_EPS

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
        )


def _per_channel(vec: Tensor, like: Tensor) -> Tensor:
    """Reshape a [C] or [N, C] vector so it broadcasts over H and W."""
    c = like.shape[1]
    if vec.shape[-1] != c:
        raise ShapeMismatchError(
            f"per-channel parameter of width {vec.shape[-1]} against {c} channels"
        )
    if vec.data.ndim == 1:
        return ad.reshape(vec, (1, c, 1, 1))
    if vec.data.ndim == 2:
        return ad.reshape(vec, (vec.shape[0], c, 1, 1))
    raise ShapeMismatchError(f"per-channel parameter must be 1-D or 2-D, got {vec.shape}")


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize an NCHW map by mini-batch statistics (training) or running ones.

    Training mode updates the running statistics in place with
    ``running = momentum * running + (1 - momentum) * batch``; inference mode
    is a pure per-channel affine map.
    """
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"batch_norm: need NCHW input, got {x.shape}")
    if training:
        if x.shape[0] < 2:
            raise DegenerateBatchError(
                "batch_norm: training mode needs batch size >= 2, got 1"
            )
        mean = ad.tmean(x, axis=(0, 2, 3), keepdims=True)
        centered = ad.sub(x, mean)
        var = ad.tmean(ad.mul_elem(centered, centered), axis=(0, 2, 3), keepdims=True)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mean.data.reshape(-1)
        state.running_var = m * state.running_var + (1 - m) * var.data.reshape(-1)
        xhat = ad.div(centered, ad.sqrt(ad.add(var, state.eps)))
    else:
        mean = Tensor(state.running_mean.reshape(1, -1, 1, 1))
        std = Tensor(np.sqrt(state.running_var + state.eps).reshape(1, -1, 1, 1))
        xhat = ad.div(ad.sub(x, mean), std)
    return ad.add(ad.mul_elem(xhat, _per_channel(state.gamma, x)),
                  _per_channel(state.beta, x))


def instance_stats(x: Tensor, eps: float = VAR_EPS) -> tuple[Tensor, Tensor]:
    """Per-sample per-channel spatial mean and epsilon-floored std, each [N, C]."""
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"instance_stats: need NCHW input, got {x.shape}")
    n, c = x.shape[0], x.shape[1]
    mu = ad.tmean(x, axis=(2, 3), keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.tmean(ad.mul_elem(centered, centered), axis=(2, 3), keepdims=True)
    sigma = ad.sqrt(ad.add(var, eps))
    return ad.reshape(mu, (n, c)), ad.reshape(sigma, (n, c))


def adain(x: Tensor, params: StyleParams, eps: float = VAR_EPS) -> Tensor:
    """gamma * (x - mu(x)) / sigma(x) + beta with per-sample instance statistics."""
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"adain: need NCHW input, got {x.shape}")
    if params.channels() != x.shape[1]:
        raise ShapeMismatchError(
            f"adain: params carry {params.channels()} channels, input has {x.shape[1]}"
        )
    n, c = x.shape[0], x.shape[1]
    mu, sigma = instance_stats(x, eps=eps)
    mu4 = ad.reshape(mu, (n, c, 1, 1))
    sigma4 = ad.reshape(sigma, (n, c, 1, 1))
    xhat = ad.div(ad.sub(x, mu4), sigma4)
    return ad.add(ad.mul_elem(xhat, _per_channel(params.gamma, x)),
                  _per_channel(params.beta, x))
