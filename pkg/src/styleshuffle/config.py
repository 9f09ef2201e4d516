"""Run configuration: an INI-style text file with sections [model], [optim],
[loss], and [data], plus `--set section.key=value` command-line overrides.

Every key is validated against the schema below; unknown sections or keys
are hard errors. A run writes back its fully resolved configuration so the
exact settings are always recoverable.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .data import SynthSpec
from .losses import LossWeights
from .model import ModelConfig
from .training import LrSchedule, OptimizerConfig


class RunConfigError(ValueError):
    """Missing file, unknown key, or invalid value in a run configuration."""


def _parse_int(raw: str) -> int:
    return int(raw)


def _parse_float(raw: str) -> float:
    return float(raw)


def _parse_str(raw: str) -> str:
    return raw


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(x.strip()) for x in raw.split(",") if x.strip())


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "model": {
        "variant": (_parse_str, "binary_head"),
        "input_channels": (_parse_int, 1),
        "input_size": (_parse_int, 32),
        "gen_widths": (_parse_int_tuple, (8, 12, 16)),
        "gen_pools": (_parse_int_tuple, (1, 2, 2)),
        "pyramid_taps": (_parse_int_tuple, (0, 1, 2)),
        "content_width": (_parse_int, 16),
        "style_width": (_parse_int, 36),
        "sal_depth": (_parse_int, 2),
        "sal_hidden": (_parse_int, 32),
        "disc_hidden": (_parse_int, 16),
        "lambda_grl": (_parse_float, 1.0),
    },
    "optim": {
        "kind": (_parse_str, "adam"),
        "lr": (_parse_float, 1e-3),
        "weight_decay": (_parse_float, 0.0),
        "momentum": (_parse_float, 0.9),
        "beta1": (_parse_float, 0.9),
        "beta2": (_parse_float, 0.999),
        "eps": (_parse_float, 1e-8),
        "schedule": (_parse_str, "constant"),
        "gamma": (_parse_float, 0.2),
        "every_epochs": (_parse_int, 2),
        "until_epoch": (_parse_int, 30),
        "epochs": (_parse_int, 5),
        "batch_size": (_parse_int, 16),
    },
    "loss": {
        "lambda1": (_parse_float, 1.0),
        "lambda2": (_parse_float, 1.0),
        "contrastive_variant": (_parse_str, "shuffle"),
        "contrastive_reduce": (_parse_str, "sum"),
    },
    "data": {
        "num_domains": (_parse_int, 3),
        "n_per_domain_per_class": (_parse_int, 60),
        "brightness_step": (_parse_float, 0.08),
        "contrast_step": (_parse_float, 0.08),
        "domain_texture_amp": (_parse_float, 0.05),
        "domain_texture_period": (_parse_float, 11.0),
        "spoof_amp": (_parse_float, 0.18),
        "spoof_patch": (_parse_int, 14),
        "noise_sigma": (_parse_float, 0.01),
        "blob_amp": (_parse_float, 0.10),
        "data_seed": (_parse_int, 0),
        "protocol": (_parse_str, "loo"),
        "holdout_domain": (_parse_int, 2),
        "manifest": (_parse_str, ""),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]]

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def model_config(self, num_domains: int) -> ModelConfig:
        m = self.values["model"]
        return ModelConfig(
            variant=m["variant"], input_channels=m["input_channels"],
            input_size=m["input_size"], gen_widths=m["gen_widths"],
            gen_pools=m["gen_pools"], pyramid_taps=m["pyramid_taps"],
            content_width=m["content_width"], style_width=m["style_width"],
            sal_depth=m["sal_depth"], sal_hidden=m["sal_hidden"],
            disc_hidden=m["disc_hidden"], num_domains=num_domains,
            lambda_grl=m["lambda_grl"],
        )

    def optimizer_config(self) -> OptimizerConfig:
        o = self.values["optim"]
        return OptimizerConfig(
            kind=o["kind"], lr=o["lr"], weight_decay=o["weight_decay"],
            momentum=o["momentum"], beta1=o["beta1"], beta2=o["beta2"],
            eps=o["eps"],
            schedule=LrSchedule(kind=o["schedule"], gamma=o["gamma"],
                                every_epochs=o["every_epochs"],
                                until_epoch=o["until_epoch"]),
        )

    def loss_weights(self) -> LossWeights:
        l = self.values["loss"]
        return LossWeights(lambda1=l["lambda1"], lambda2=l["lambda2"],
                           contrastive_variant=l["contrastive_variant"],
                           contrastive_reduce=l["contrastive_reduce"])

    def synth_spec(self) -> SynthSpec:
        d = self.values["data"]
        m = self.values["model"]
        return SynthSpec(
            num_domains=d["num_domains"], side=m["input_size"],
            channels=m["input_channels"], brightness_step=d["brightness_step"],
            contrast_step=d["contrast_step"],
            domain_texture_amp=d["domain_texture_amp"],
            domain_texture_period=d["domain_texture_period"],
            spoof_amp=d["spoof_amp"], spoof_patch=d["spoof_patch"],
            noise_sigma=d["noise_sigma"], blob_amp=d["blob_amp"],
            seed=d["data_seed"],
        )

    def resolved_text(self) -> str:
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                value = self.values[section][key]
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def default_config() -> RunConfig:
    values = {section: {key: spec[1] for key, spec in keys.items()}
              for section, keys in SCHEMA.items()}
    return RunConfig(values=values)


def _validate_entry(section: str, key: str, raw: str):
    if section not in SCHEMA:
        raise RunConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise RunConfigError(f"unknown config key {section}.{key}")
    parser, _ = SCHEMA[section][key]
    try:
        return parser(raw)
    except ValueError:
        raise RunConfigError(
            f"invalid value for {section}.{key}: {raw!r}"
        ) from None


def load_config(path: str | Path | None,
                overrides: list[str] | None = None) -> RunConfig:
    """Parse a config file (when given) and apply --set overrides on top."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise RunConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise RunConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            if section not in SCHEMA:
                raise RunConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                cfg.values[section][key] = _validate_entry(section, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise RunConfigError(
                f"override must look like section.key=value, got {item!r}"
            )
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        cfg.values[section.strip()][key.strip()] = _validate_entry(
            section.strip(), key.strip(), raw.strip())
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: RunConfig) -> None:
    d = cfg.values["data"]
    if d["protocol"] not in ("intra", "loo"):
        raise RunConfigError(f"data.protocol must be intra or loo, got {d['protocol']!r}")
    if d["protocol"] == "loo" and not 0 <= d["holdout_domain"] < d["num_domains"]:
        raise RunConfigError(
            f"data.holdout_domain {d['holdout_domain']} out of range for "
            f"{d['num_domains']} domains"
        )
    o = cfg.values["optim"]
    if o["epochs"] < 0:
        raise RunConfigError("optim.epochs must be >= 0")
    if o["batch_size"] < 2:
        raise RunConfigError("optim.batch_size must be >= 2")
