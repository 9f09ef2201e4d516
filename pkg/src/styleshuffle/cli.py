"""Command-line entry points: synth-data, train, eval, gradcheck, report.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
divergence during training, 4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import datetime
import sys
from pathlib import Path

from . import gradcheck as gradcheck_mod
from .config import RunConfig, RunConfigError, load_config
from .data import (ManifestError, load_manifest, make_splits, synth_dataset,
                   write_dataset)
from .losses import DivergenceError
from .metrics import (DEFAULT_FPR_TARGETS, MetricError, ScoredSample,
                      read_score_dump, single_side_report)
from .model import CheckpointError, ConfigError, load_checkpoint
from .sstn import SstnError
from .training import (fit, init_train_state, score_samples)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_GRADCHECK = 4


def _write_run_meta(out_dir: Path, args_desc: str) -> None:
    # the timestamp is the only non-deterministic output of a run and is
    # confined to this single line
    lines = [
        f"timestamp = {datetime.datetime.now().isoformat()}",
        f"command = {args_desc}",
    ]
    (out_dir / "run_meta.txt").write_text("\n".join(lines) + "\n")


def _prepare_data(cfg: RunConfig, seed: int):
    d = cfg["data"]
    if d["manifest"]:
        samples = load_manifest(d["manifest"])
    else:
        samples = synth_dataset(cfg.synth_spec(), d["n_per_domain_per_class"])
    if d["protocol"] == "loo":
        train, test = make_splits(samples, "loo", holdout_domain=d["holdout_domain"])
    else:
        train, test = make_splits(samples, "intra", seed=seed)
    if not train or not test:
        raise RunConfigError("empty train or test split")
    return train, test


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config, args.set or [])
        train, test = _prepare_data(cfg, args.seed)
        train_domains = sorted({s.domain_label for s in train})
        model_cfg = cfg.model_config(num_domains=len(train_domains))
        state = init_train_state(model_cfg, cfg.optimizer_config(),
                                 cfg.loss_weights(), args.seed)
    except (RunConfigError, ConfigError, ManifestError, SstnError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.ini").write_text(cfg.resolved_text())
    _write_run_meta(out_dir, f"train seed={args.seed}")
    try:
        result = fit(state, train, test, epochs=cfg["optim"]["epochs"],
                     batch_size=cfg["optim"]["batch_size"], out_dir=out_dir)
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        if exc.breakdown is not None:
            print(f"last breakdown: {exc.breakdown}", file=sys.stderr)
        return EXIT_DIVERGED
    final = result.epoch_records[-1] if result.epoch_records else None
    if final is not None:
        print(final.report.table())
        print(f"domain discriminator accuracy: {final.domain_acc:.4f}")
    print(f"wrote {out_dir}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    try:
        cfg = load_config(args.config, args.set or [])
        spec = cfg.synth_spec()
        if args.seed is not None:
            spec.seed = args.seed
        samples = synth_dataset(spec, cfg["data"]["n_per_domain_per_class"])
    except (RunConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out)
    manifest = write_dataset(out_dir, samples)
    _write_run_meta(out_dir, f"synth-data seed={spec.seed}")
    print(f"wrote {len(samples)} samples to {manifest}")
    return EXIT_OK


def _parse_fpr_targets(raw: str | None):
    if not raw:
        return DEFAULT_FPR_TARGETS
    try:
        targets = tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise MetricError(f"bad fpr target list: {raw!r}") from None
    if not targets:
        raise MetricError("empty fpr target list")
    return targets


def _emit_report(report, out: str | None) -> None:
    print(report.table())
    csv_text = report.csv()
    if out:
        Path(out).write_text(csv_text)
    else:
        print(csv_text, end="")


def cmd_eval(args) -> int:
    try:
        fpr_targets = _parse_fpr_targets(args.fpr)
        net, _, _ = load_checkpoint(args.checkpoint)
        samples = load_manifest(args.manifest,
                                expect_shape=(net.cfg.input_channels,
                                              net.cfg.input_size, net.cfg.input_size))
        if not samples:
            print("error: no samples in manifest", file=sys.stderr)
            return EXIT_CONFIG
        scored = score_samples(net, samples)
        report = single_side_report(scored, fpr_targets)
    except (CheckpointError, ManifestError, SstnError, MetricError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _emit_report(report, args.out)
    if args.scores_out:
        lines = [f"{s.score!r}\t{s.live_label}\t{s.dataset_id}" for s in scored]
        Path(args.scores_out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        scored = read_score_dump(args.scores)
        if not scored:
            print("error: no samples", file=sys.stderr)
            return EXIT_CONFIG
        report = single_side_report(scored, _parse_fpr_targets(args.fpr))
    except (MetricError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _emit_report(report, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_all(seed=args.seed,
                                    seeds_per_check=args.seeds_per_check,
                                    corrupt=args.corrupt)
    failed = [r for r in results if not r.ok]
    for r in results:
        status = "ok  " if r.ok else "FAIL"
        print(f"{status} {r.name:24s} worst rel err {r.worst_rel_err:.3e}")
    print(f"checked {len(results)} operations, tolerance {gradcheck_mod.TOLERANCE:g}")
    if failed:
        print("gradient check failed for: "
              + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="styleshuffle",
        description="Train and evaluate the shuffled-style-assembly liveness model",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", default=None, help="INI config path")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                         help="override a config value")
    p_train.set_defaults(func=cmd_train)

    p_synth = sub.add_parser("synth-data", help="emit a synthetic dataset directory")
    p_synth.add_argument("--config", default=None)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=None,
                         help="override data.data_seed")
    p_synth.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p_synth.set_defaults(func=cmd_synth_data)

    p_eval = sub.add_parser("eval", help="score a manifest with a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--fpr", default=None,
                        help="comma-separated FPR targets (default 0.1,0.01,0.001)")
    p_eval.add_argument("--out", default=None, help="write the CSV report here")
    p_eval.add_argument("--scores-out", default=None,
                        help="dump per-sample scores as score<TAB>live<TAB>dataset")
    p_eval.set_defaults(func=cmd_eval)

    p_report = sub.add_parser("report", help="metrics from a score dump file")
    p_report.add_argument("--scores", required=True)
    p_report.add_argument("--fpr", default=None)
    p_report.add_argument("--out", default=None)
    p_report.set_defaults(func=cmd_report)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--seeds-per-check", type=int,
                        default=gradcheck_mod.DEFAULT_SEEDS)
    p_grad.add_argument("--corrupt", default=None,
                        help="testing hook: tamper with the named op's analytic "
                             "gradient to prove the detector fires")
    p_grad.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
