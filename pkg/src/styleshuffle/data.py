"""Synthetic multi-domain liveness data plus manifest-driven loading.

Each sample is a smooth random blob image. Domain identity is injected as a
global intensity transform (brightness offset and contrast gain around the
mid gray) plus a broad low-frequency stripe texture whose orientation and
period depend on the domain, so the domain cue lives in global statistics.
The liveness cue is local: spoof samples carry a small patch of
pixel-alternating high-frequency texture whose amplitude clears the noise
floor by design. Everything is pure per (seed, domain, class, index), so
datasets are bitwise reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import sstn

DEPTH_SIDE = 32


class ManifestError(ValueError):
    """Malformed dataset manifest."""


@dataclass
class Sample:
    image: np.ndarray            # [C, H, W], values in [0, 1]
    live_label: int              # 1 = living, 0 = spoof
    domain_label: int
    depth_target: np.ndarray | None = None   # [1, 32, 32] when depth supervision is on


@dataclass
class SynthSpec:
    num_domains: int = 3
    side: int = 32
    channels: int = 1
    brightness_step: float = 0.08     # domain d is offset by d * step
    contrast_step: float = 0.08       # domain gain = 1 + step * (d - (M-1)/2)
    domain_texture_amp: float = 0.05
    domain_texture_period: float = 11.0   # low-frequency stripes, period in pixels
    spoof_amp: float = 0.18           # high-frequency patch amplitude (spoof only)
    spoof_patch: int = 14             # patch side in pixels
    noise_sigma: float = 0.01
    blob_amp: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.num_domains < 1:
            raise ValueError("num_domains must be >= 1")
        if self.spoof_amp <= 3.0 * self.noise_sigma:
            raise ValueError(
                f"liveness cue amplitude {self.spoof_amp} must exceed 3x noise "
                f"sigma ({3.0 * self.noise_sigma}) for the task to be learnable"
            )
        if not 0 < self.spoof_patch <= self.side:
            raise ValueError("spoof_patch must fit inside the image")

    def domain_offset(self, domain: int) -> float:
        return domain * self.brightness_step

    def domain_gain(self, domain: int) -> float:
        return 1.0 + self.contrast_step * (domain - (self.num_domains - 1) / 2.0)

    def domain_angle(self, domain: int) -> float:
        return math.pi * domain / self.num_domains


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


def _blob_field(rng: np.random.Generator, side: int) -> np.ndarray:
    """Smooth content: a few random gaussian bumps squashed to a fixed band."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    fld = np.zeros((side, side))
    for _ in range(3):
        cx, cy = rng.uniform(0.2 * side, 0.8 * side, size=2)
        width = rng.uniform(0.15 * side, 0.35 * side)
        amp = rng.uniform(-1.0, 1.0)
        fld += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width ** 2))
    return np.tanh(fld)   # in (-1, 1)


def _spoof_patch(rng: np.random.Generator, side: int, patch: int) -> np.ndarray:
    """Pixel-alternating (maximum frequency) texture on a random local patch."""
    top = int(rng.integers(0, side - patch + 1))
    left = int(rng.integers(0, side - patch + 1))
    yy, xx = np.mgrid[0:patch, 0:patch]
    sign = ((-1.0) ** (yy + xx))
    out = np.zeros((side, side))
    out[top:top + patch, left:left + patch] = sign
    return out


def make_sample(spec: SynthSpec, domain: int, live: int, index: int) -> Sample:
    """Generate one sample; pure in (spec.seed, domain, live, index)."""
    rng = _rng(spec.seed, domain, live, index)
    side = spec.side
    content = _blob_field(rng, side)                       # shared content statistics
    img = 0.45 + spec.blob_amp * content                   # mid-gray band

    # domain style: invertible global intensity map plus broad stripes
    img = spec.domain_gain(domain) * (img - 0.45) + 0.45 + spec.domain_offset(domain)
    angle = spec.domain_angle(domain)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    phase = 2 * math.pi * (xx * math.cos(angle) + yy * math.sin(angle)) \
        / spec.domain_texture_period
    img = img + spec.domain_texture_amp * np.sin(phase)

    if not live:
        img = img + spec.spoof_amp * _spoof_patch(rng, side, spec.spoof_patch)
    img = img + spec.noise_sigma * rng.standard_normal((side, side))
    img = np.clip(img, 0.0, 1.0)

    image = np.broadcast_to(img, (spec.channels, side, side)).copy()
    return Sample(image=image, live_label=int(live), domain_label=int(domain),
                  depth_target=default_depth_target(live))


_DEPTH_BUMP: np.ndarray | None = None


def default_depth_target(live: int) -> np.ndarray:
    """Fixed centered radial bump for live samples; zeros for spoof."""
    global _DEPTH_BUMP
    if _DEPTH_BUMP is None:
        yy, xx = np.mgrid[0:DEPTH_SIDE, 0:DEPTH_SIDE].astype(np.float64)
        c = (DEPTH_SIDE - 1) / 2.0
        r2 = (xx - c) ** 2 + (yy - c) ** 2
        bump = np.exp(-r2 / (2 * (0.35 * DEPTH_SIDE) ** 2))
        bump = (bump - bump.min()) / (bump.max() - bump.min())
        _DEPTH_BUMP = bump.reshape(1, DEPTH_SIDE, DEPTH_SIDE)
    if live:
        return _DEPTH_BUMP.copy()
    return np.zeros((1, DEPTH_SIDE, DEPTH_SIDE))


def synth_dataset(spec: SynthSpec, n_per_domain_per_class: int) -> list[Sample]:
    """Balanced dataset: exactly n samples per (domain, class) pair."""
    samples: list[Sample] = []
    for domain in range(spec.num_domains):
        for live in (1, 0):
            for index in range(n_per_domain_per_class):
                samples.append(make_sample(spec, domain, live, index))
    return samples


# ---------------------------------------------------------------------------
# manifest i/o
# ---------------------------------------------------------------------------

def write_dataset(directory, samples: list[Sample],
                  manifest_name: str = "manifest.tsv") -> Path:
    """Write SSTN image files plus a `<file>\\t<live>\\t<domain>` manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        fname = f"sample{i:05d}.sstn"
        sstn.write_tensor(directory / fname, s.image)
        lines.append(f"{fname}\t{s.live_label}\t{s.domain_label}")
    path = directory / manifest_name
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def load_manifest(path, expect_shape: tuple[int, ...] | None = None) -> list[Sample]:
    """Load a manifest written by write_dataset (or by hand).

    Lines are `<sstn-file>\\t<live:0|1>\\t<domain:int>`; files resolve
    relative to the manifest. Depth targets are regenerated from the live
    label with the standard convention (zeros for spoof).
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    samples: list[Sample] = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{path}:{ln}: expected 3 tab-separated fields")
        fname, live_s, domain_s = parts
        try:
            live = int(live_s)
            domain = int(domain_s)
        except ValueError:
            raise ManifestError(f"{path}:{ln}: non-integer label fields") from None
        if live not in (0, 1):
            raise ManifestError(f"{path}:{ln}: live label must be 0 or 1, got {live}")
        if domain < 0:
            raise ManifestError(f"{path}:{ln}: negative domain label {domain}")
        file = path.parent / fname
        if not file.is_file():
            raise ManifestError(f"{path}:{ln}: missing tensor file {fname}")
        image = sstn.read_tensor(file)
        if image.ndim != 3:
            raise ManifestError(f"{path}:{ln}: image tensor must be rank 3, got {image.ndim}")
        if expect_shape is not None and image.shape != tuple(expect_shape):
            raise ManifestError(
                f"{path}:{ln}: image shape {image.shape} does not match "
                f"expected {tuple(expect_shape)}"
            )
        samples.append(Sample(image=image, live_label=live, domain_label=domain,
                              depth_target=default_depth_target(live)))
    return samples


# ---------------------------------------------------------------------------
# splits and batches
# ---------------------------------------------------------------------------

def make_splits(samples: list[Sample], protocol: str,
                holdout_domain: int | None = None, seed: int = 0,
                train_frac: float = 0.8) -> tuple[list[Sample], list[Sample]]:
    """`intra`: stratified random split. `loo`: hold one domain out entirely."""
    if protocol == "loo":
        domains = {s.domain_label for s in samples}
        if holdout_domain not in domains:
            raise ValueError(
                f"holdout domain {holdout_domain} not present (have {sorted(domains)})"
            )
        train = [s for s in samples if s.domain_label != holdout_domain]
        test = [s for s in samples if s.domain_label == holdout_domain]
        return train, test
    if protocol == "intra":
        rng = _rng(seed, 7)
        strata: dict[tuple[int, int], list[int]] = {}
        for i, s in enumerate(samples):
            strata.setdefault((s.domain_label, s.live_label), []).append(i)
        train_idx: list[int] = []
        test_idx: list[int] = []
        for key in sorted(strata):
            idx = np.array(strata[key])
            rng.shuffle(idx)
            cut = round(train_frac * len(idx))
            train_idx.extend(idx[:cut].tolist())
            test_idx.extend(idx[cut:].tolist())
        return [samples[i] for i in sorted(train_idx)], [samples[i] for i in sorted(test_idx)]
    raise ValueError(f"unknown protocol {protocol!r} (expected 'intra' or 'loo')")


@dataclass
class Batch:
    images: np.ndarray            # [N, C, H, W]
    live_labels: np.ndarray       # int [N]
    domain_labels: np.ndarray     # int [N], remapped to a contiguous range
    depth_targets: np.ndarray | None = None   # [N, 1, 32, 32] for depth supervision


def domain_index_map(samples: list[Sample]) -> dict[int, int]:
    """Original domain label -> contiguous discriminator index."""
    return {d: i for i, d in enumerate(sorted({s.domain_label for s in samples}))}


def collate(samples: list[Sample], domain_map: dict[int, int],
            with_depth: bool) -> Batch:
    images = np.stack([s.image for s in samples])
    live = np.array([s.live_label for s in samples], dtype=np.intp)
    domains = np.array([domain_map[s.domain_label] for s in samples], dtype=np.intp)
    depth = None
    if with_depth:
        depth = np.stack([
            s.depth_target if s.depth_target is not None
            else default_depth_target(s.live_label)
            for s in samples
        ])
    return Batch(images=images, live_labels=live, domain_labels=domains,
                 depth_targets=depth)


def epoch_batches(samples: list[Sample], batch_size: int, seed: int, epoch: int,
                  with_depth: bool) -> list[Batch]:
    """Deterministic per-epoch batches drawn uniformly across source domains.

    Every batch takes batch_size/M samples from each domain's shuffled
    stream; trailing leftovers are skipped that epoch (they return after the
    next reshuffle).
    """
    domain_map = domain_index_map(samples)
    m = len(domain_map)
    if batch_size % m:
        raise ValueError(f"batch size {batch_size} not divisible by {m} domains")
    per_domain = batch_size // m
    rng = _rng(seed, 11, epoch)
    streams: list[list[Sample]] = []
    for d in sorted(domain_map):
        pool = [s for s in samples if s.domain_label == d]
        order = rng.permutation(len(pool))
        streams.append([pool[i] for i in order])
    steps = min(len(st) // per_domain for st in streams)
    batches = []
    for b in range(steps):
        chunk: list[Sample] = []
        for st in streams:
            chunk.extend(st[b * per_domain:(b + 1) * per_domain])
        batches.append(collate(chunk, domain_map, with_depth))
    return batches
