"""Style assembly layers and the self/shuffle assembly constructions.

A style assembly layer injects style into a content map through two
conv+AdaIN stages with a residual connection:

    gamma, beta = MLP(GAP(style))
    z           = ReLU(AdaIN(K1 * content, gamma, beta))
    out         = AdaIN(K2 * z, gamma, beta) + content

Assembling a batch against a permuted style batch yields shuffle-assembly
features; the identity permutation yields self-assembly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor
from .normalization import StyleParams, adain


@dataclass
class SalParams:
    """One style assembly layer: two channel-preserving 3x3 kernels plus the
    two-affine-layer MLP that maps a pooled style vector to gamma and beta."""

    k1: Tensor
    k2: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        c = self.k1.shape[0]
        if self.k1.shape[:2] != (c, c) or self.k2.shape[:2] != (c, c):
            raise ShapeMismatchError(
                f"SAL kernels must preserve channels, got {self.k1.shape} / {self.k2.shape}"
            )
        if self.w2.shape[1] != 2 * c:
            raise ShapeMismatchError(
                f"SAL mlp must emit 2*{c} values (gamma||beta), got {self.w2.shape[1]}"
            )

    @property
    def channels(self) -> int:
        return self.k1.shape[0]

    @property
    def style_width(self) -> int:
        return self.w1.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"k1": self.k1, "k2": self.k2, "w1": self.w1, "b1": self.b1,
                "w2": self.w2, "b2": self.b2}

    @classmethod
    def create(cls, channels: int, style_width: int, hidden: int,
               rng: np.random.Generator) -> "SalParams":
        def he_uniform(shape, fan_in):
            bound = np.sqrt(6.0 / fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        return cls(
            k1=he_uniform((channels, channels, 3, 3), channels * 9),
            k2=he_uniform((channels, channels, 3, 3), channels * 9),
            w1=he_uniform((style_width, hidden), style_width),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=he_uniform((hidden, 2 * channels), hidden),
            b2=Tensor(np.zeros(2 * channels), requires_grad=True),
        )


@dataclass
class ShufflePermutation:
    """A permutation of batch indices plus the seed that produced it."""

    indices: np.ndarray
    seed: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.intp)
        n = self.indices.size
        if not np.array_equal(np.sort(self.indices), np.arange(n)):
            raise ValueError(f"indices {self.indices.tolist()} are not a permutation")

    def __len__(self) -> int:
        return self.indices.size

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.indices, np.arange(len(self))))


def identity_permutation(n: int) -> ShufflePermutation:
    return ShufflePermutation(np.arange(n), seed=0)


def sample_permutation(n: int, rng_seed: int) -> ShufflePermutation:
    """Uniform permutation of {0..n-1} via Fisher-Yates, deterministic per seed."""
    if n < 1:
        raise ValueError(f"sample_permutation: n must be >= 1, got {n}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(rng_seed))))
    idx = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        idx[i], idx[j] = idx[j], idx[i]
    return ShufflePermutation(idx, seed=int(rng_seed))


def _pooled_style(style: Tensor) -> Tensor:
    if style.data.ndim == 4:
        return ad.global_avg_pool(style)
    if style.data.ndim == 2:
        return style
    raise ShapeMismatchError(f"style features must be [N,C,H,W] or [N,D], got {style.shape}")


def style_to_params(style: Tensor, sal: SalParams) -> StyleParams:
    """GAP the style features (when spatial) and run the SAL mlp; the output
    splits in half into gamma then beta."""
    pooled = _pooled_style(style)
    if pooled.shape[1] != sal.style_width:
        raise ShapeMismatchError(
            f"style width {pooled.shape[1]} does not match mlp input {sal.style_width}"
        )
    hidden = ad.relu(ad.add(ad.matmul(pooled, sal.w1), sal.b1))
    out = ad.add(ad.matmul(hidden, sal.w2), sal.b2)
    c = sal.channels
    return StyleParams(gamma=ad.slice_cols(out, 0, c), beta=ad.slice_cols(out, c, 2 * c))


def sal_forward(content: Tensor, style: Tensor, sal: SalParams) -> Tensor:
    """Residual style injection; output shape equals the content shape."""
    if content.data.ndim != 4:
        raise ShapeMismatchError(f"sal_forward: content must be NCHW, got {content.shape}")
    if content.shape[0] != _pooled_style(style).shape[0]:
        raise ShapeMismatchError(
            f"sal_forward: content batch {content.shape[0]} vs style batch "
            f"{_pooled_style(style).shape[0]}"
        )
    if content.shape[1] != sal.channels:
        raise ShapeMismatchError(
            f"sal_forward: content has {content.shape[1]} channels, SAL expects {sal.channels}"
        )
    params = style_to_params(style, sal)
    z = ad.relu(adain(ad.conv2d(content, sal.k1, stride=1, padding=1), params))
    return ad.add(adain(ad.conv2d(z, sal.k2, stride=1, padding=1), params), content)


def assemble(content: Tensor, style: Tensor, perm: ShufflePermutation,
             stack: list[SalParams]) -> Tensor:
    """Reorder the style batch by perm and apply the SAL stack in sequence.

    Every layer re-derives gamma/beta from the same permuted style features.
    The identity permutation produces the self-assembly used for
    classification; any other permutation produces shuffle-assembly.
    """
    n = content.shape[0]
    if len(perm) != n:
        raise ShapeMismatchError(f"permutation of length {len(perm)} for batch of {n}")
    shuffled = ad.take_rows(style, perm.indices)
    out = content
    for sal in stack:
        out = sal_forward(out, shuffled, sal)
    return out
