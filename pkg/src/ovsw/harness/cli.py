"""Command-line entry point: ``ovsw <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure (including a failed
invariance check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import bitpack
from ..checkpoint import load_model, read_checkpoint
from .config import TrainConfig, load_config
from .data import load_dataset
from .experiments import INVARIANCE_GAMMAS, check_invariance, compare_optimizers, gamma_ablation
from .train import evaluate, prepare_data, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config (see ovsw.harness.config for the schema)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. optimizer.ags_lambda=0.04 (repeatable)")
    p.add_argument("--data", help="dataset directory (default: $OVSW_DATA/<dataset>)")
    p.add_argument("--out", help="output directory (overrides output_dir)")


def _resolve_config(args) -> TrainConfig:
    extra = list(args.overrides)
    if args.data:
        extra.append(f"data_path={json.dumps(args.data)}")
    if args.out:
        extra.append(f"output_dir={json.dumps(args.out)}")
    return load_config(args.config, extra)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ovsw", description="Binary network training with OvSW, flip tracking and "
                                                "bit-packed inference.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print results")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("train", help="train a model")
    _config_args(p)
    p.add_argument("--resume", help="continue from a checkpoint of the same config")

    p = sub.add_parser("eval", help="test accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: $OVSW_DATA/<dataset>)")
    p.add_argument("--full", action="store_true", help="ignore the run's test_subset and use the whole test set")

    p = sub.add_parser("export", help="write a bit-packed inference model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", help="classify images with an exported model")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--index", type=int, nargs="+", help="test-set image indices")
    src.add_argument("--npy", help=".npy file with one CHW image or an NCHW batch, already normalized")
    p.add_argument("--dataset", choices=["mnist", "cifar10"], help="default: inferred from input channels")
    p.add_argument("--data", help="dataset directory (default: $OVSW_DATA/<dataset>)")

    p = sub.add_parser("check-invariance", help="weight-scale invariance of logits and gradients")
    p.add_argument("--model", default="minires")
    p.add_argument("--gammas", default=",".join(f"{g:g}" for g in INVARIANCE_GAMMAS))
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="also write the JSON report here")

    p = sub.add_parser("ablate-gamma", help="vanilla SGD runs over init scales")
    _config_args(p)
    p.add_argument("--gammas", default="1,1000", help="comma-separated scale_gamma values")

    p = sub.add_parser("compare-optimizers", help="vanilla vs LARS vs OvSW at equal budget")
    _config_args(p)
    return parser


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_train(args) -> int:
    res = train(_resolve_config(args), resume_from=args.resume)
    _print({"final": res.final, "steps": res.steps, "checkpoint": str(res.checkpoint)})
    return EXIT_OK


def cmd_eval(args) -> int:
    header, _ = read_checkpoint(args.checkpoint)
    cfg = dict(header["meta"].get("config", {}))
    if args.data:
        cfg["data_path"] = args.data
    if args.full:
        cfg["test_subset"] = 1.0
    _, test = prepare_data(TrainConfig.from_dict(cfg))
    _print({"accuracy": evaluate(args.checkpoint, test), "samples": len(test)})
    return EXIT_OK


def cmd_export(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    packed = bitpack.pack_model(model)
    Path(args.out).write_bytes(bitpack.export(packed))
    _print(bitpack.report_sizes(model, packed))
    return EXIT_OK


def cmd_infer(args) -> int:
    packed = bitpack.import_(Path(args.model).read_bytes())
    if args.npy:
        x = np.load(args.npy).astype(np.float32)
        if x.ndim == 3:
            x = x[None]
    else:
        name = args.dataset or ("mnist" if packed.spec.in_channels == 1 else "cifar10")
        _, test = load_dataset(name, args.data)
        bad = [i for i in args.index if not 0 <= i < len(test)]
        if bad:
            raise IndexError(f"image indices {bad} outside the {len(test)}-image test set")
        x = test.images[args.index]
    for c in bitpack.packed_predict(packed, x).argmax(axis=1):
        print(int(c))
    return EXIT_OK


def cmd_check_invariance(args) -> int:
    report = check_invariance(args.model, _floats(args.gammas), args.batch_size, args.seed)
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    _print(report)
    return EXIT_OK if report["pass"] else EXIT_RUNTIME


def cmd_ablate_gamma(args) -> int:
    results = gamma_ablation(_resolve_config(args), _floats(args.gammas))
    _print({f"{g:g}": {"final": r.final, "flips": r.flips} for g, r in results.items()})
    return EXIT_OK


def cmd_compare_optimizers(args) -> int:
    _print(compare_optimizers(_resolve_config(args)))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "export": cmd_export, "infer": cmd_infer,
            "check-invariance": cmd_check_invariance, "ablate-gamma": cmd_ablate_gamma,
            "compare-optimizers": cmd_compare_optimizers}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"ovsw: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"ovsw {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
