"""The optimization loop: per-iteration shuffle, forward, three losses, one
combined backward, and the parameter update.

Two optimizer regimes are supported: Adam (lr 1e-4, decay 5e-5 in the
published cross-dataset experiments) and SGD with momentum 0.9 and decay
5e-4 whose lr starts at 0.01 and decays by 0.2 every two epochs until the
30th. Updates are lr-scaled, so lr=0 changes nothing regardless of decay.
All randomness derives from (seed, stream, counter) so fixed-seed runs and
checkpoint resumes are bitwise reproducible.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .assembly import sample_permutation
from .data import Batch, Sample, collate, domain_index_map, epoch_batches
from .losses import (DivergenceError, LossBreakdown, LossWeights,
                     adversarial_loss, classification_loss, contrastive_loss,
                     overall_loss)
from .metrics import DEFAULT_FPR_TARGETS, MetricReport, ScoredSample, single_side_report
from .model import (ModelConfig, StyleAssemblyNet, load_checkpoint,
                    save_checkpoint)

PERM_STREAM = 23


@dataclass
class LrSchedule:
    kind: str = "constant"          # constant | step
    gamma: float = 0.2
    every_epochs: int = 2
    until_epoch: int = 30

    def __post_init__(self):
        if self.kind not in ("constant", "step"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "step" and not 0.0 < self.gamma < 1.0:
            raise ValueError(f"schedule gamma must be in (0,1), got {self.gamma}")
        if self.every_epochs < 1:
            raise ValueError("every_epochs must be >= 1")


def step_lr(schedule: LrSchedule, base_lr: float, epoch: int) -> float:
    """lr = base * gamma^floor(epoch/every) while epoch < until, frozen after."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if schedule.kind == "constant":
        return base_lr
    capped = min(epoch, schedule.until_epoch)
    return base_lr * schedule.gamma ** (capped // schedule.every_epochs)


@dataclass
class OptimizerConfig:
    kind: str = "adam"              # adam | sgd_momentum
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: LrSchedule = field(default_factory=LrSchedule)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


def adam_regime() -> OptimizerConfig:
    """The published Adam settings for cross-dataset runs."""
    return OptimizerConfig(kind="adam", lr=1e-4, weight_decay=5e-5)


def sgd_regime() -> OptimizerConfig:
    """The published SGD settings for the large-scale protocol runs."""
    return OptimizerConfig(kind="sgd_momentum", lr=0.01, weight_decay=5e-4,
                           momentum=0.9,
                           schedule=LrSchedule(kind="step", gamma=0.2,
                                               every_epochs=2, until_epoch=30))


class Optimizer:
    """Adam or SGD-with-momentum over a named parameter dict."""

    def __init__(self, cfg: OptimizerConfig, params: dict[str, ad.Tensor]):
        self.cfg = cfg
        self.params = params
        self.steps = 0
        self.moments: dict[str, np.ndarray] = {}
        for name, t in params.items():
            if cfg.kind == "adam":
                self.moments[f"{name}.m"] = np.zeros_like(t.data)
                self.moments[f"{name}.v"] = np.zeros_like(t.data)
            else:
                self.moments[f"{name}.vel"] = np.zeros_like(t.data)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.steps += 1
        for name, t in self.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if cfg.kind == "adam":
                m = self.moments[f"{name}.m"]
                v = self.moments[f"{name}.v"]
                m *= cfg.beta1
                m += (1 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1 - cfg.beta2) * g * g
                mhat = m / (1 - cfg.beta1 ** self.steps)
                vhat = v / (1 - cfg.beta2 ** self.steps)
                t.data = t.data - lr * mhat / (np.sqrt(vhat) + cfg.eps)
                if cfg.weight_decay:
                    t.data = t.data - lr * cfg.weight_decay * t.data
            else:
                vel = self.moments[f"{name}.vel"]
                update = g
                if cfg.weight_decay:
                    update = g + cfg.weight_decay * t.data
                vel *= cfg.momentum
                vel += update
                t.data = t.data - lr * vel


@dataclass
class TrainState:
    net: StyleAssemblyNet
    optimizer: Optimizer
    opt_cfg: OptimizerConfig
    weights: LossWeights
    seed: int
    epoch: int = 0
    step: int = 0
    history: list[LossBreakdown] = field(default_factory=list)


def init_train_state(cfg: ModelConfig, opt_cfg: OptimizerConfig,
                     weights: LossWeights, seed: int) -> TrainState:
    net = StyleAssemblyNet(cfg, seed=seed)
    return TrainState(net=net, optimizer=Optimizer(opt_cfg, net.params),
                      opt_cfg=opt_cfg, weights=weights, seed=seed)


def compute_losses(net: StyleAssemblyNet, batch: Batch, weights: LossWeights,
                   perm, training: bool):
    """Forward plus the three loss terms; returns (outputs, total, breakdown)."""
    outputs = net.forward(batch.images, perm, training=training)
    if net.cfg.variant == "depth_head":
        l_cls = classification_loss(outputs.class_pred, batch.depth_targets,
                                    "depth_head")
    else:
        l_cls = classification_loss(outputs.class_pred, batch.live_labels,
                                    "binary_head")
    l_adv = adversarial_loss(outputs.domain_logits, batch.domain_labels)

    self_vec = ad.global_avg_pool(outputs.self_assembly)
    shuf_vec = ad.global_avg_pool(outputs.shuffle_assembly)
    variant = weights.contrastive_variant
    if variant == "hard_sup":
        # ablation: supervise shuffle-assembly features with ground truth
        if net.cfg.variant == "binary_head":
            logits = ad.add(ad.matmul(shuf_vec, net.params["cls.w"]),
                            net.params["cls.b"])
            l_contra = classification_loss(logits, batch.live_labels, "binary_head")
        else:
            raise ValueError("hard_sup ablation requires the binary head")
    elif variant == "scl":
        # ablation: contrast self-assembly features against each other directly
        anchor_partner = ad.take_rows(self_vec, perm.indices)
        l_contra = contrastive_loss(self_vec, anchor_partner, batch.live_labels,
                                    perm, reduce=weights.contrastive_reduce)
    else:
        l_contra = contrastive_loss(self_vec, shuf_vec, batch.live_labels, perm,
                                    reduce=weights.contrastive_reduce)
    total, breakdown = overall_loss(l_cls, l_adv, l_contra, weights)
    return outputs, total, breakdown


def train_step(state: TrainState, batch: Batch) -> LossBreakdown:
    """One optimization step; raises DivergenceError on a non-finite loss."""
    n = batch.images.shape[0]
    perm_seed = int(np.random.SeedSequence(
        [state.seed, PERM_STREAM, state.step]).generate_state(1)[0])
    perm = sample_permutation(n, perm_seed)
    try:
        _, total, breakdown = compute_losses(state.net, batch, state.weights,
                                             perm, training=True)
    except DivergenceError as exc:
        raise DivergenceError(
            f"training diverged at step {state.step}: {exc}", exc.breakdown
        ) from exc
    state.optimizer.zero_grad()
    total.backward()
    lr = step_lr(state.opt_cfg.schedule, state.opt_cfg.lr, state.epoch)
    state.optimizer.step(lr)
    state.step += 1
    state.history.append(breakdown)
    return breakdown


def domain_accuracy(net: StyleAssemblyNet, samples: list[Sample],
                    batch_size: int = 64) -> float:
    """Eval-mode discriminator accuracy on content features."""
    domain_map = domain_index_map(samples)
    correct = 0
    from .assembly import identity_permutation
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = collate(chunk, domain_map, with_depth=False)
        outputs = net.forward(batch.images, identity_permutation(len(chunk)),
                              training=False)
        pred = outputs.domain_logits.data.argmax(axis=1)
        correct += int((pred == batch.domain_labels).sum())
    return correct / len(samples)


def score_samples(net: StyleAssemblyNet, samples: list[Sample],
                  batch_size: int = 64) -> list[ScoredSample]:
    """Eval-mode liveness scores; dataset id is the sample's domain label."""
    from .assembly import identity_permutation
    dummy_map = {d: 0 for d in {s.domain_label for s in samples}}
    scored = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = collate(chunk, dummy_map, with_depth=False)
        outputs = net.forward(batch.images, identity_permutation(len(chunk)),
                              training=False)
        for s, value in zip(chunk, net.score(outputs)):
            scored.append(ScoredSample(score=float(value), live_label=s.live_label,
                                       dataset_id=s.domain_label))
    return scored


@dataclass
class EpochRecord:
    epoch: int
    domain_acc: float
    report: MetricReport

    @staticmethod
    def csv_header(fpr_targets) -> str:
        cols = ["epoch", "domain_acc", "auc", "hter"]
        for t in fpr_targets:
            cols.append(f"tpr_mean@{t:g}")
            cols.append(f"tpr_std@{t:g}")
        return ",".join(cols)

    def csv_row(self, fpr_targets) -> str:
        cells = [str(self.epoch), repr(self.domain_acc), repr(self.report.auc),
                 repr(self.report.hter)]
        for t in fpr_targets:
            mean, std = self.report.tpr_at_fpr[t]
            cells.append(repr(mean))
            cells.append(repr(std))
        return ",".join(cells)


@dataclass
class FitResult:
    state: TrainState
    epoch_records: list[EpochRecord]


def fit(state: TrainState, train_samples: list[Sample],
        test_samples: list[Sample], epochs: int, batch_size: int,
        fpr_targets=DEFAULT_FPR_TARGETS, out_dir: Path | None = None,
        log_every: int = 1) -> FitResult:
    """Run whole epochs of train_step over domain-balanced shuffled batches.

    Each epoch ends with an eval-mode pass: discriminator accuracy on the
    training set plus the metric report on the held-out samples. When
    ``out_dir`` is set, loss rows and epoch metrics stream to CSV files
    (flushed per epoch) and the final checkpoint lands in ``checkpoint/``.
    """
    with_depth = state.net.cfg.variant == "depth_head"
    records: list[EpochRecord] = []
    loss_fh = metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        loss_path = out_dir / "losses.csv"
        metrics_path = out_dir / "metrics.csv"
        fresh = state.step == 0
        loss_fh = open(loss_path, "w" if fresh else "a")
        metrics_fh = open(metrics_path, "w" if fresh else "a")
        if fresh:
            loss_fh.write(LossBreakdown.CSV_HEADER + "\n")
            metrics_fh.write(EpochRecord.csv_header(fpr_targets) + "\n")
    try:
        for _ in range(epochs):
            for batch in epoch_batches(train_samples, batch_size, state.seed,
                                       state.epoch, with_depth):
                breakdown = train_step(state, batch)
                if loss_fh and state.step % log_every == 0:
                    loss_fh.write(breakdown.csv_row(state.step) + "\n")
            state.epoch += 1
            acc = domain_accuracy(state.net, train_samples)
            report = single_side_report(score_samples(state.net, test_samples),
                                        fpr_targets)
            record = EpochRecord(epoch=state.epoch, domain_acc=acc, report=report)
            records.append(record)
            if metrics_fh:
                metrics_fh.write(record.csv_row(fpr_targets) + "\n")
                metrics_fh.flush()
                loss_fh.flush()
        if out_dir is not None:
            save_train_state(out_dir / "checkpoint", state)
    finally:
        if loss_fh:
            loss_fh.close()
        if metrics_fh:
            metrics_fh.close()
    return FitResult(state=state, epoch_records=records)


# ---------------------------------------------------------------------------
# state serialization (checkpoint + optimizer moments + counters)
# ---------------------------------------------------------------------------

def save_train_state(directory, state: TrainState) -> None:
    meta = {
        "epoch": str(state.epoch),
        "step": str(state.step),
        "seed": str(state.seed),
        "opt_steps": str(state.optimizer.steps),
        "opt_kind": state.opt_cfg.kind,
        "opt_lr": repr(state.opt_cfg.lr),
        "opt_weight_decay": repr(state.opt_cfg.weight_decay),
        "opt_momentum": repr(state.opt_cfg.momentum),
        "opt_beta1": repr(state.opt_cfg.beta1),
        "opt_beta2": repr(state.opt_cfg.beta2),
        "opt_eps": repr(state.opt_cfg.eps),
        "sched_kind": state.opt_cfg.schedule.kind,
        "sched_gamma": repr(state.opt_cfg.schedule.gamma),
        "sched_every": str(state.opt_cfg.schedule.every_epochs),
        "sched_until": str(state.opt_cfg.schedule.until_epoch),
        "lambda1": repr(state.weights.lambda1),
        "lambda2": repr(state.weights.lambda2),
        "contrastive_variant": state.weights.contrastive_variant,
        "contrastive_reduce": state.weights.contrastive_reduce,
    }
    extras = {f"opt.{k}": v for k, v in state.optimizer.moments.items()}
    save_checkpoint(directory, state.net, extras=extras, meta=meta)


def load_train_state(directory) -> TrainState:
    net, meta, extras = load_checkpoint(directory)
    opt_cfg = OptimizerConfig(
        kind=meta["opt_kind"], lr=float(meta["opt_lr"]),
        weight_decay=float(meta["opt_weight_decay"]),
        momentum=float(meta["opt_momentum"]), beta1=float(meta["opt_beta1"]),
        beta2=float(meta["opt_beta2"]), eps=float(meta["opt_eps"]),
        schedule=LrSchedule(kind=meta["sched_kind"], gamma=float(meta["sched_gamma"]),
                            every_epochs=int(meta["sched_every"]),
                            until_epoch=int(meta["sched_until"])),
    )
    weights = LossWeights(lambda1=float(meta["lambda1"]), lambda2=float(meta["lambda2"]),
                          contrastive_variant=meta["contrastive_variant"],
                          contrastive_reduce=meta["contrastive_reduce"])
    optimizer = Optimizer(opt_cfg, net.params)
    optimizer.steps = int(meta["opt_steps"])
    for key, arr in extras.items():
        if key.startswith("opt."):
            optimizer.moments[key[4:]] = arr
    return TrainState(net=net, optimizer=optimizer, opt_cfg=opt_cfg, weights=weights,
                      seed=int(meta["seed"]), epoch=int(meta["epoch"]),
                      step=int(meta["step"]))
