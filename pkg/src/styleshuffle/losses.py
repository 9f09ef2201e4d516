"""The four training losses and their weighted combination.

The adversarial term is plain cross-entropy over domain logits (the min-max
is realized by the gradient reversal inside the forward pass, not here). The
contrastive term compares self-assembly anchors, frozen by stop-gradient,
against shuffle-assembly features with a sign set by liveness-label
agreement. Classification is MSE for depth maps and cross-entropy for binary
logits. Everything combines as cls + lambda1*adv + lambda2*contra.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor
from .assembly import ShufflePermutation

NORM_EPS = 1e-12

CONTRASTIVE_VARIANTS = ("shuffle", "hard_sup", "scl")


class DivergenceError(FloatingPointError):
    """A loss term became non-finite; carries the offending breakdown."""

    def __init__(self, message: str, breakdown: "LossBreakdown | None" = None):
        super().__init__(message)
        self.breakdown = breakdown


@dataclass
class LossWeights:
    lambda1: float = 1.0    # adversarial weight
    lambda2: float = 1.0    # contrastive weight
    contrastive_variant: str = "shuffle"   # shuffle | hard_sup | scl (ablations)
    contrastive_reduce: str = "sum"        # sum (literal) | mean

    def __post_init__(self):
        if not (np.isfinite(self.lambda1) and np.isfinite(self.lambda2)):
            raise ValueError("loss weights must be finite")
        if self.contrastive_variant not in CONTRASTIVE_VARIANTS:
            raise ValueError(
                f"contrastive_variant must be one of {CONTRASTIVE_VARIANTS}, "
                f"got {self.contrastive_variant!r}"
            )
        if self.contrastive_reduce not in ("sum", "mean"):
            raise ValueError("contrastive_reduce must be 'sum' or 'mean'")


@dataclass
class LossBreakdown:
    l_cls: float
    l_adv: float
    l_contra: float
    l_overall: float

    CSV_HEADER = "step,l_cls,l_adv,l_contra,l_overall"

    def csv_row(self, step: int) -> str:
        return f"{step},{self.l_cls!r},{self.l_adv!r},{self.l_contra!r},{self.l_overall!r}"


def adversarial_loss(domain_logits: Tensor, domain_labels) -> Tensor:
    """Mean cross-entropy of domain labels against [N, M] logits."""
    labels = np.asarray(domain_labels, dtype=np.intp)
    m = domain_logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ValueError(
            f"domain label out of range [0,{m}): {labels.min()}..{labels.max()}"
        )
    return ad.softmax_cross_entropy(domain_logits, labels)


def classification_loss(pred: Tensor, target, variant: str) -> Tensor:
    """Depth variant: MSE over all elements. Binary variant: mean cross-entropy."""
    if variant == "depth_head":
        target = np.asarray(target, dtype=np.float64)
        if pred.shape != target.shape:
            raise ShapeMismatchError(
                f"depth prediction {pred.shape} vs target {target.shape}"
            )
        diff = ad.sub(pred, Tensor(target))
        return ad.tmean(ad.mul_elem(diff, diff))
    if variant == "binary_head":
        labels = np.asarray(target, dtype=np.intp)
        if labels.size and (labels.min() < 0 or labels.max() > 1):
            raise ValueError(f"liveness label out of range: {labels.min()}..{labels.max()}")
        return ad.softmax_cross_entropy(pred, labels)
    raise ValueError(f"unknown classification variant {variant!r}")


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Rowwise negative cosine similarity of [N, D] features, in [-1, 1].

    Computed as half the squared distance of the l2-normalized rows minus
    one, which is identical to -cos(a, b) and returns exactly -1.0 when the
    two inputs are bitwise equal.
    """
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeMismatchError(f"cosine_sim: need matching [N,D] inputs, "
                                 f"got {a.shape} and {b.shape}")
    an = _l2_normalize(a)
    bn = _l2_normalize(b)
    d = ad.sub(an, bn)
    return ad.add(ad.scalar_mul(ad.tsum(ad.mul_elem(d, d), axis=1), 0.5), -1.0)


def _l2_normalize(x: Tensor) -> Tensor:
    norm = ad.sqrt(ad.add(ad.tsum(ad.mul_elem(x, x), axis=1, keepdims=True), NORM_EPS))
    return ad.div(x, norm)


def label_agreement(live_labels, perm: ShufflePermutation) -> np.ndarray:
    """+1 where sample i and its shuffle partner share a liveness label, else -1."""
    labels = np.asarray(live_labels)
    if labels.shape[0] != len(perm):
        raise ShapeMismatchError(
            f"{labels.shape[0]} labels vs permutation of {len(perm)}"
        )
    return np.where(labels == labels[perm.indices], 1.0, -1.0)


def contrastive_loss(self_asm: Tensor, shuffle_asm: Tensor, live_labels,
                     perm: ShufflePermutation, reduce: str = "sum") -> Tensor:
    """Sum over the batch of agreement(i, i*) * Sim(stopgrad(a_i), b_i).

    ``self_asm`` and ``shuffle_asm`` are the pooled [N, D] assembly features.
    The anchor side is severed from the graph, so gradients reach only the
    shuffle features (and their ancestors).
    """
    if self_asm.shape != shuffle_asm.shape:
        raise ShapeMismatchError(
            f"assembly features disagree: {self_asm.shape} vs {shuffle_asm.shape}"
        )
    eq = label_agreement(live_labels, perm)
    sims = cosine_sim(ad.stop_gradient(self_asm), shuffle_asm)
    total = ad.tsum(ad.mul_elem(sims, Tensor(eq)))
    if reduce == "mean":
        return ad.scalar_mul(total, 1.0 / len(perm))
    if reduce != "sum":
        raise ValueError(f"unknown reduce {reduce!r}")
    return total


def overall_loss(l_cls: Tensor, l_adv: Tensor, l_contra: Tensor,
                 weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum per the training objective, plus a float breakdown for logs."""
    parts = {"l_cls": l_cls.item(), "l_adv": l_adv.item(), "l_contra": l_contra.item()}
    for name, value in parts.items():
        if not np.isfinite(value):
            raise DivergenceError(
                f"loss term {name} is non-finite ({value})",
                LossBreakdown(parts["l_cls"], parts["l_adv"], parts["l_contra"],
                              float("nan")),
            )
    total = ad.add(l_cls, ad.add(ad.scalar_mul(l_adv, weights.lambda1),
                                 ad.scalar_mul(l_contra, weights.lambda2)))
    breakdown = LossBreakdown(parts["l_cls"], parts["l_adv"], parts["l_contra"],
                              total.item())
    return total, breakdown
