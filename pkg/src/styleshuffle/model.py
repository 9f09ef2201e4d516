"""The full network: shared generator, BN content path, IN-statistic style
path, SAL stack, domain discriminator behind gradient reversal, and the
classification head.

Two head variants exist: ``depth_head`` predicts a 32x32 depth map scored by
its spatial mean, ``binary_head`` predicts live/spoof logits scored by the
sigmoid of the living-logit margin. A tiny 32x32 config drives all tests;
the larger named configs reproduce the two published structures at reduced
width only.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import sstn
from .autodiff import Tensor
from .assembly import (SalParams, ShufflePermutation, assemble,
                       identity_permutation)
from .normalization import BatchNormState, batch_norm

VARIANTS = ("binary_head", "depth_head")
DEPTH_SIDE = 32


class ConfigError(ValueError):
    """Invalid or inconsistent model configuration."""


class CheckpointError(IOError):
    """Missing, truncated, or otherwise corrupt checkpoint."""


class ConfigMismatchError(CheckpointError):
    """Checkpoint was produced under an incompatible configuration."""


@dataclass
class ModelConfig:
    variant: str = "binary_head"
    input_channels: int = 1
    input_size: int = 32
    gen_widths: tuple[int, ...] = (8, 12, 16)
    gen_pools: tuple[int, ...] = (1, 2, 2)       # 1 keeps, 2 halves (2x2 mean pool)
    pyramid_taps: tuple[int, ...] = (0, 1, 2)
    content_width: int = 16
    style_width: int = 36
    sal_depth: int = 2
    sal_hidden: int = 32
    disc_hidden: int = 16
    num_domains: int = 3
    lambda_grl: float = 1.0

    def __post_init__(self):
        self.gen_widths = tuple(int(w) for w in self.gen_widths)
        self.gen_pools = tuple(int(p) for p in self.gen_pools)
        self.pyramid_taps = tuple(int(t) for t in self.pyramid_taps)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if len(self.gen_widths) != len(self.gen_pools):
            raise ConfigError("gen_widths and gen_pools must have equal length")
        if any(p not in (1, 2) for p in self.gen_pools):
            raise ConfigError("gen_pools entries must be 1 (keep) or 2 (halve)")
        stages = len(self.gen_widths)
        if not self.pyramid_taps:
            raise ConfigError("at least one pyramid tap is required")
        if list(self.pyramid_taps) != sorted(set(self.pyramid_taps)):
            raise ConfigError(f"pyramid taps {self.pyramid_taps} must be strictly increasing")
        if self.pyramid_taps[0] < 0 or self.pyramid_taps[-1] >= stages:
            raise ConfigError(
                f"pyramid taps {self.pyramid_taps} out of range for {stages} stages"
            )
        if self.num_domains < 2:
            raise ConfigError(f"num_domains must be >= 2, got {self.num_domains}")
        if self.sal_depth < 1:
            raise ConfigError("sal_depth must be >= 1")
        side = self.content_side()
        if side < 1:
            raise ConfigError("pooling reduces the input below 1x1")
        if self.variant == "depth_head" and DEPTH_SIDE % side != 0:
            raise ConfigError(
                f"depth head needs content side dividing {DEPTH_SIDE}, got {side}"
            )

    def content_side(self) -> int:
        side = self.input_size
        for p in self.gen_pools:
            if p == 2:
                if side % 2:
                    raise ConfigError(f"cannot halve odd feature side {side}")
                side //= 2
        return side

    def pooled_style_width(self) -> int:
        return sum(self.gen_widths[t] for t in self.pyramid_taps)

    def summary(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                out[f.name] = ",".join(str(x) for x in v)
            else:
                out[f.name] = str(v)
        return out

    @classmethod
    def from_summary(cls, items: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in items:
                raise ConfigError(f"checkpoint config is missing field {f.name!r}")
            raw = items[f.name]
            if f.name in ("gen_widths", "gen_pools", "pyramid_taps"):
                kwargs[f.name] = tuple(int(x) for x in raw.split(",") if x)
            elif f.name == "variant":
                kwargs[f.name] = raw
            elif f.name == "lambda_grl":
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


def tiny_config(num_domains: int = 3, variant: str = "binary_head") -> ModelConfig:
    """The 32x32 desk-scale config every test runs on."""
    return ModelConfig(variant=variant, num_domains=num_domains)


def depth_map_config(num_domains: int = 3) -> ModelConfig:
    """Depth-supervised structure at reduced width (DepthNet-style embedding)."""
    return ModelConfig(
        variant="depth_head",
        input_channels=3,
        input_size=256,
        gen_widths=(16, 24, 32, 48, 64),
        gen_pools=(2, 2, 2, 2, 1),
        pyramid_taps=(0, 2, 4),
        content_width=64,
        style_width=112,
        sal_hidden=128,
        disc_hidden=64,
        num_domains=num_domains,
    )


def binary_config(num_domains: int = 3) -> ModelConfig:
    """Binary-supervised structure at reduced width (residual-style embedding)."""
    return ModelConfig(
        variant="binary_head",
        input_channels=3,
        input_size=256,
        gen_widths=(16, 32, 64, 128),
        gen_pools=(2, 2, 2, 2),
        pyramid_taps=(0, 1, 2, 3),
        content_width=128,
        style_width=240,
        sal_hidden=256,
        disc_hidden=128,
        num_domains=num_domains,
    )


@dataclass
class ForwardOutputs:
    """Every product of one forward pass."""

    content: Tensor            # [N, C, h, w] content features
    style: Tensor              # [N, D] pooled style vector batch
    self_assembly: Tensor      # [N, C, h, w]
    shuffle_assembly: Tensor   # [N, C, h, w]
    domain_logits: Tensor      # [N, M]
    class_pred: Tensor         # [N, 2] logits or [N, 1, 32, 32] depth map


class StyleAssemblyNet:
    """Owns the parameter tensors and batch-norm states for one model."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.bn_states: dict[str, BatchNormState] = {}
        self.sals: list[SalParams] = []
        self._build(np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 101]))))

    def _he(self, rng, shape, fan_in) -> Tensor:
        bound = np.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def _add_bn(self, name: str, channels: int) -> BatchNormState:
        state = BatchNormState.create(channels)
        self.params[f"{name}.gamma"] = state.gamma
        self.params[f"{name}.beta"] = state.beta
        self.bn_states[name] = state
        return state

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        prev = cfg.input_channels
        for i, width in enumerate(cfg.gen_widths):
            self.params[f"gen{i}.conv.w"] = self._he(rng, (width, prev, 3, 3), prev * 9)
            self._add_bn(f"gen{i}.bn", width)
            prev = width
        self.params["content.conv.w"] = self._he(
            rng, (cfg.content_width, prev, 3, 3), prev * 9)
        self._add_bn("content.bn", cfg.content_width)
        pooled = cfg.pooled_style_width()
        self.params["style.proj.w"] = self._he(rng, (pooled, cfg.style_width), pooled)
        self.params["style.proj.b"] = Tensor(np.zeros(cfg.style_width), requires_grad=True)
        for j in range(cfg.sal_depth):
            sal = SalParams.create(cfg.content_width, cfg.style_width, cfg.sal_hidden, rng)
            for key, t in sal.tensors().items():
                self.params[f"sal{j}.{key}"] = t
            self.sals.append(sal)
        self.params["disc.w1"] = self._he(rng, (cfg.content_width, cfg.disc_hidden),
                                          cfg.content_width)
        self.params["disc.b1"] = Tensor(np.zeros(cfg.disc_hidden), requires_grad=True)
        self.params["disc.w2"] = self._he(rng, (cfg.disc_hidden, cfg.num_domains),
                                          cfg.disc_hidden)
        self.params["disc.b2"] = Tensor(np.zeros(cfg.num_domains), requires_grad=True)
        if cfg.variant == "binary_head":
            self.params["cls.w"] = self._he(rng, (cfg.content_width, 2), cfg.content_width)
            self.params["cls.b"] = Tensor(np.zeros(2), requires_grad=True)
        else:
            self.params["depth.conv.w"] = self._he(
                rng, (1, cfg.content_width, 3, 3), cfg.content_width * 9)
            self.params["depth.conv.b"] = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)

    def param_groups(self) -> dict[str, list[str]]:
        """Parameter names grouped by subsystem (used by gradient-isolation tests)."""
        groups: dict[str, list[str]] = {"generator": [], "content": [], "style": [],
                                        "sal": [], "disc": [], "head": []}
        for name in self.params:
            if name.startswith("gen"):
                groups["generator"].append(name)
            elif name.startswith("content"):
                groups["content"].append(name)
            elif name.startswith("style"):
                groups["style"].append(name)
            elif name.startswith("sal"):
                groups["sal"].append(name)
            elif name.startswith("disc"):
                groups["disc"].append(name)
            else:
                groups["head"].append(name)
        return groups

    def forward(self, images: np.ndarray, perm: ShufflePermutation,
                training: bool, grl_identity: bool = False) -> ForwardOutputs:
        """Run the whole network on a batch of [N, C, S, S] images.

        ``grl_identity`` swaps the gradient reversal for a plain identity; the
        contract tests use it to compare the two gradient paths.
        """
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1] != cfg.input_channels \
                or images.shape[2] != cfg.input_size or images.shape[3] != cfg.input_size:
            raise ConfigError(
                f"input batch {images.shape} does not match config "
                f"[N,{cfg.input_channels},{cfg.input_size},{cfg.input_size}]"
            )
        if len(perm) != images.shape[0]:
            raise ConfigError(
                f"permutation length {len(perm)} vs batch size {images.shape[0]}"
            )

        h = Tensor(images)
        taps: list[Tensor] = []
        for i in range(len(cfg.gen_widths)):
            h = ad.conv2d(h, self.params[f"gen{i}.conv.w"], stride=1, padding=1)
            h = ad.relu(_bn(h, self.bn_states[f"gen{i}.bn"], training))
            if cfg.gen_pools[i] == 2:
                h = ad.avg_pool2(h)
            if i in cfg.pyramid_taps:
                taps.append(h)

        content = ad.relu(_bn(ad.conv2d(h, self.params["content.conv.w"], 1, 1),
                              self.bn_states["content.bn"], training))

        pooled = ad.concat([ad.global_avg_pool(t) for t in taps], axis=1)
        style = ad.add(ad.matmul(pooled, self.params["style.proj.w"]),
                       self.params["style.proj.b"])

        self_asm = assemble(content, style, identity_permutation(len(perm)), self.sals)
        shuf_asm = assemble(content, style, perm, self.sals)

        disc_in = content if grl_identity else ad.grad_reverse(content, cfg.lambda_grl)
        dh = ad.relu(ad.add(ad.matmul(ad.global_avg_pool(disc_in),
                                      self.params["disc.w1"]), self.params["disc.b1"]))
        domain_logits = ad.add(ad.matmul(dh, self.params["disc.w2"]), self.params["disc.b2"])

        if cfg.variant == "binary_head":
            class_pred = ad.add(ad.matmul(ad.global_avg_pool(self_asm),
                                          self.params["cls.w"]), self.params["cls.b"])
        else:
            factor = DEPTH_SIDE // cfg.content_side()
            up = ad.upsample_nearest(self_asm, factor) if factor > 1 else self_asm
            class_pred = ad.sigmoid(ad.add(
                ad.conv2d(up, self.params["depth.conv.w"], 1, 1),
                self.params["depth.conv.b"]))

        return ForwardOutputs(content=content, style=style, self_assembly=self_asm,
                              shuffle_assembly=shuf_asm, domain_logits=domain_logits,
                              class_pred=class_pred)

    def score(self, outputs: ForwardOutputs) -> np.ndarray:
        """Per-sample liveness score in [0, 1]; higher means more live."""
        return score(outputs, self.cfg)


def score(outputs: ForwardOutputs, cfg: ModelConfig) -> np.ndarray:
    pred = outputs.class_pred.data
    if cfg.variant == "depth_head":
        return pred.mean(axis=(1, 2, 3))
    margin = pred[:, 1] - pred[:, 0]
    out = np.empty_like(margin)
    pos = margin >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-margin[pos]))
    out[~pos] = np.exp(margin[~pos]) / (1.0 + np.exp(margin[~pos]))
    return out


def _bn(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    return batch_norm(x, state, training)


# ---------------------------------------------------------------------------
# checkpoints: a directory of SSTN files plus a text manifest
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"
MANIFEST_HEADER = "styleshuffle-checkpoint v1"


def save_checkpoint(directory, net: StyleAssemblyNet,
                    extras: dict[str, np.ndarray] | None = None,
                    meta: dict[str, str] | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for key, value in net.cfg.summary().items():
        lines.append(f"cfg\t{key}\t{value}")
    for key, value in (meta or {}).items():
        lines.append(f"meta\t{key}\t{value}")

    def dump(kind: str, name: str, arr: np.ndarray):
        fname = f"{name}.sstn"
        sstn.write_tensor(directory / fname, arr)
        lines.append(f"{kind}\t{name}\t{fname}")

    for name, t in net.params.items():
        dump("tensor", name, t.data)
    for name, state in net.bn_states.items():
        dump("stat", f"{name}.running_mean", state.running_mean)
        dump("stat", f"{name}.running_var", state.running_var)
    for name, arr in (extras or {}).items():
        dump("extra", name, arr)
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def load_checkpoint(directory, expect_cfg: ModelConfig | None = None
                    ) -> tuple[StyleAssemblyNet, dict[str, str], dict[str, np.ndarray]]:
    """Rebuild a net from a checkpoint directory.

    Returns (net, meta, extras). When ``expect_cfg`` is given, any differing
    config field is a ConfigMismatchError.
    """
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise CheckpointError(f"{directory}: missing {MANIFEST_NAME}")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise CheckpointError(f"{manifest}: unrecognized header")
    cfg_items: dict[str, str] = {}
    meta: dict[str, str] = {}
    entries: list[tuple[str, str, str]] = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CheckpointError(f"{manifest}:{ln}: malformed line {line!r}")
        kind, key, value = parts
        if kind == "cfg":
            cfg_items[key] = value
        elif kind == "meta":
            meta[key] = value
        elif kind in ("tensor", "stat", "extra"):
            entries.append((kind, key, value))
        else:
            raise CheckpointError(f"{manifest}:{ln}: unknown entry kind {kind!r}")

    cfg = ModelConfig.from_summary(cfg_items)
    if expect_cfg is not None:
        mismatched = [k for k, v in expect_cfg.summary().items()
                      if cfg_items.get(k) != v]
        if mismatched:
            raise ConfigMismatchError(
                f"{directory}: checkpoint config differs on {', '.join(mismatched)}"
            )

    net = StyleAssemblyNet(cfg, seed=0)
    extras: dict[str, np.ndarray] = {}
    seen: set[str] = set()
    for kind, name, fname in entries:
        try:
            arr = sstn.read_tensor(directory / fname)
        except (sstn.SstnError, FileNotFoundError) as exc:
            raise CheckpointError(f"{directory}: corrupt checkpoint entry {name}: {exc}") from exc
        if kind == "tensor":
            if name not in net.params:
                raise CheckpointError(f"{directory}: unexpected tensor {name!r}")
            if net.params[name].data.shape != arr.shape:
                raise ConfigMismatchError(
                    f"{directory}: tensor {name} has shape {arr.shape}, "
                    f"config implies {net.params[name].data.shape}"
                )
            net.params[name].data = arr
            seen.add(name)
        elif kind == "stat":
            base, _, field = name.rpartition(".")
            if base not in net.bn_states or field not in ("running_mean", "running_var"):
                raise CheckpointError(f"{directory}: unexpected stat {name!r}")
            setattr(net.bn_states[base], field, arr)
        else:
            extras[name] = arr
    missing = set(net.params) - seen
    if missing:
        raise CheckpointError(f"{directory}: checkpoint missing tensors {sorted(missing)}")
    return net, meta, extras
