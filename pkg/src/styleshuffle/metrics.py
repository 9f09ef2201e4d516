"""Evaluation metrics: HTER, AUC, TPR at fixed FPR, and the pooled-negative
multi-dataset report.

Scores are liveness scores: higher means more live. HTER is measured at the
fixed threshold 0.5 (a sample is called live when score >= 0.5). AUC is the
exact Mann-Whitney statistic with ties counted one half. TPR@FPR treats
spoof detection as the positive direction: a sample is flagged when its
score is at or below a threshold, the threshold is the largest value whose
false positive rate on the live pool stays within the target, and ties break
toward higher TPR. The multi-dataset report pools every dataset's live
samples as one shared negative set and evaluates each dataset's spoof
samples against it, reporting mean and population std across datasets.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_FPR_TARGETS = (0.10, 0.01, 0.001)


class MetricError(ValueError):
    """Metric undefined for the given inputs (e.g. a single-class score set)."""


@dataclass
class ScoredSample:
    score: float
    live_label: int
    dataset_id: int = 0

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise MetricError(f"non-finite score {self.score}")


@dataclass
class MetricReport:
    hter: float
    auc: float
    tpr_at_fpr: dict[float, tuple[float, float]]          # target -> (mean, std)
    per_dataset: dict[int, dict[float, float]]            # dataset -> target -> tpr
    warnings: list[str] = field(default_factory=list)

    def table(self) -> str:
        lines = ["overall  hter={:.4f}  auc={:.4f}".format(self.hter, self.auc)]
        for target in sorted(self.tpr_at_fpr, reverse=True):
            mean, std = self.tpr_at_fpr[target]
            lines.append(
                f"tpr@fpr={target:g}  mean={mean:.4f}  std={std:.4f}"
            )
        for ds in sorted(self.per_dataset):
            cells = "  ".join(
                f"{t:g}:{self.per_dataset[ds][t]:.4f}"
                for t in sorted(self.per_dataset[ds], reverse=True)
            )
            lines.append(f"dataset {ds}  {cells}")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines)

    def csv(self) -> str:
        lines = ["section,key,target,value"]
        lines.append(f"overall,hter,,{self.hter!r}")
        lines.append(f"overall,auc,,{self.auc!r}")
        for target in sorted(self.tpr_at_fpr, reverse=True):
            mean, std = self.tpr_at_fpr[target]
            lines.append(f"tpr,mean,{target!r},{mean!r}")
            lines.append(f"tpr,std,{target!r},{std!r}")
        for ds in sorted(self.per_dataset):
            for target in sorted(self.per_dataset[ds], reverse=True):
                lines.append(f"dataset,{ds},{target!r},{self.per_dataset[ds][target]!r}")
        for w in self.warnings:
            lines.append(f"warning,{w},,")
        return "\n".join(lines) + "\n"


def _split(scores, live_labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    live = np.asarray(live_labels)
    if scores.shape != live.shape:
        raise MetricError(f"{scores.shape} scores vs {live.shape} labels")
    live_scores = scores[live == 1]
    spoof_scores = scores[live == 0]
    if live_scores.size == 0 or spoof_scores.size == 0:
        raise MetricError("metric needs both live and spoof samples")
    return live_scores, spoof_scores


def hter(scores, live_labels, threshold: float = 0.5) -> float:
    """(FAR + FRR) / 2 at a fixed threshold; score >= threshold is called live."""
    live_scores, spoof_scores = _split(scores, live_labels)
    far = float(np.mean(spoof_scores >= threshold))   # spoof accepted as live
    frr = float(np.mean(live_scores < threshold))     # live rejected
    return (far + frr) / 2.0


def auc(scores, live_labels) -> float:
    """Exact Mann-Whitney AUC of live-over-spoof ranking; ties count 0.5."""
    live_scores, spoof_scores = _split(scores, live_labels)
    merged = np.concatenate([live_scores, spoof_scores])
    order = np.argsort(merged, kind="mergesort")
    ranks = np.empty(merged.size, dtype=np.float64)
    sorted_vals = merged[order]
    i = 0
    while i < merged.size:
        j = i
        while j + 1 < merged.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0    # average rank, 1-based
        i = j + 1
    n_live = live_scores.size
    n_spoof = spoof_scores.size
    rank_sum = ranks[:n_live].sum()
    u = rank_sum - n_live * (n_live + 1) / 2.0
    return u / (n_live * n_spoof)


def tpr_at_fpr(scores, live_labels, fpr_target: float) -> float:
    """Spoof-detection TPR at the largest threshold keeping live FPR <= target.

    Detection direction: a sample is flagged as spoof when score <= t. The
    live pool is the negative class.
    """
    if not 0.0 <= fpr_target <= 1.0:
        raise MetricError(f"fpr target must be in [0,1], got {fpr_target}")
    live_scores, spoof_scores = _split(scores, live_labels)
    n_neg = live_scores.size
    if fpr_target > 0 and n_neg < 1.0 / fpr_target:
        warnings.warn(
            f"only {n_neg} negatives for fpr target {fpr_target:g}; "
            f"the constraint quantizes to zero false positives",
            stacklevel=2,
        )
    neg_sorted = np.sort(live_scores)
    # largest admissible false-positive count: max k with k/n_neg <= target
    k = int(np.searchsorted(np.arange(1, n_neg + 1) / n_neg, fpr_target, side="right"))
    if k >= n_neg:
        return 1.0
    cut = neg_sorted[k]   # the (k+1)-th smallest negative; threshold sits just below
    return float(np.mean(spoof_scores < cut))


def single_side_report(scored: list[ScoredSample],
                       fpr_targets=DEFAULT_FPR_TARGETS) -> MetricReport:
    """Pooled-negative evaluation across datasets.

    Negatives are the union of live samples over all datasets; each dataset
    contributes its own spoof samples as positives. Datasets without spoof
    samples are skipped with a warning line.
    """
    if not scored:
        raise MetricError("no scored samples")
    fpr_targets = tuple(float(t) for t in fpr_targets)
    all_scores = np.array([s.score for s in scored])
    all_live = np.array([s.live_label for s in scored])
    live_pool = all_scores[all_live == 1]
    if live_pool.size == 0:
        raise MetricError("no live samples to pool as negatives")

    report_warnings: list[str] = []
    per_dataset: dict[int, dict[float, float]] = {}
    dataset_ids = sorted({s.dataset_id for s in scored})
    for ds in dataset_ids:
        spoof = np.array([s.score for s in scored
                          if s.dataset_id == ds and s.live_label == 0])
        if spoof.size == 0:
            report_warnings.append(f"dataset {ds} has no spoof samples; skipped")
            continue
        merged = np.concatenate([live_pool, spoof])
        labels = np.concatenate([np.ones(live_pool.size, dtype=int),
                                 np.zeros(spoof.size, dtype=int)])
        per_dataset[ds] = {}
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            for target in fpr_targets:
                per_dataset[ds][target] = tpr_at_fpr(merged, labels, target)
        for c in caught:
            report_warnings.append(f"dataset {ds}: {c.message}")
    if not per_dataset:
        raise MetricError("every dataset lacked spoof samples")

    tpr_summary: dict[float, tuple[float, float]] = {}
    for target in fpr_targets:
        values = np.array([per_dataset[ds][target] for ds in per_dataset])
        tpr_summary[target] = (float(values.mean()), float(values.std()))

    return MetricReport(
        hter=hter(all_scores, all_live),
        auc=auc(all_scores, all_live),
        tpr_at_fpr=tpr_summary,
        per_dataset=per_dataset,
        warnings=report_warnings,
    )


def read_score_dump(path) -> list[ScoredSample]:
    """Parse `<score>\\t<live>\\t<dataset>` lines."""
    from pathlib import Path
    lines = Path(path).read_text().splitlines()
    out = []
    for ln, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise MetricError(f"{path}:{ln}: expected 3 tab-separated fields")
        try:
            out.append(ScoredSample(score=float(parts[0]), live_label=int(parts[1]),
                                    dataset_id=int(parts[2])))
        except ValueError as exc:
            raise MetricError(f"{path}:{ln}: {exc}") from None
    return out
