"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error. Failures print one JSON
line on stderr: ``{"error": "usage" | "runtime", "message": ...}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, chanstats
from .cipher import Scheme, WatermarkKey
from .wmcodec import LatentShape

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", type=Path, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.add_argument("--out", type=Path, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="osimark", description="Latent-sign watermark lab.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("keygen", help="create a watermark key file")
    _common(p, "key file to write (default: the config's key path)")
    p.add_argument("--scheme", default="chacha20", help="chacha20 or xorpad")

    p = sub.add_parser("embed", help="embed watermarks and generate images")
    _common(p, "output directory (default: the config's data_dir)")
    p.add_argument("--watermark", help="fixed watermark as hex (default: per-image random)")

    p = sub.add_parser("evaluate", help="distort, extract and score embedded images")
    _common(p, "report directory")
    p.add_argument("--data", type=Path, help="embedding directory (default: the config's data_dir)")
    p.add_argument("--workers", type=int, help="parallel workers")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("train", help="train the one-step extractor")
    _common(p, "checkpoint to write")
    p.add_argument("--data", type=Path, required=True, help="triplet dataset file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--strategy", choices=["default", "detach", "decouple"])
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("synth-data", help="synthesise a triplet training set")
    _common(p, "dataset file to write")
    p.add_argument("--n", type=int, help="number of triplets (default: config n_train)")

    p = sub.add_parser("capacity", help="BSC capacity and payload rate from a bit accuracy")
    _common(p, "also write the JSON result here")
    p.add_argument("--acc", type=float, required=True)
    p.add_argument("--fhw", type=int)
    p.add_argument("--shape", help="latent shape CxHxW (default 4x64x64)")
    p.add_argument("--figure", type=Path, help="render the user-count figure to this file")

    p = sub.add_parser("threshold", help="detection threshold for a target FPR")
    _common(p, "also write the JSON result here")
    p.add_argument("--k", type=int, help="watermark length (default: from config)")
    p.add_argument("--fpr", type=float, help="target false-positive rate (default: config or 1e-6)")
    return parser


def _load_config(args, required=True) -> bench.ExperimentConfig | None:
    if args.config is None:
        if required:
            raise UsageError("--config is required for this command")
        return None
    if not args.config.exists():
        raise UsageError(f"config file not found: {args.config}")
    try:
        exp = bench.ExperimentConfig.load(args.config)
    except (ValueError, TypeError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from None
    if args.seed is not None:
        exp.base_seed = args.seed
    return exp


def _emit(payload: dict, out: Path | None) -> None:
    text = json.dumps(payload)
    print(text)
    if out is not None:
        out.write_text(text + "\n")


def cmd_keygen(args) -> int:
    exp = _load_config(args, required=False)
    out = args.out or (exp.path(exp.key) if exp else None)
    if out is None:
        raise UsageError("keygen needs --out or a --config naming the key path")
    seed = args.seed if args.seed is not None else (exp.base_seed if exp else 0)
    try:
        scheme = Scheme.parse(args.scheme)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    key = WatermarkKey.from_seed(seed, scheme)
    key.save(out)
    print(f"wrote {scheme.name} key to {out}")
    return EXIT_OK


def cmd_embed(args) -> int:
    exp = _load_config(args)
    emb = bench.run_embed(exp, args.out, args.watermark)
    out = exp.path(args.out or exp.data_dir)
    print(f"embedded {len(emb.seeds)} images, k={exp.shape.k} bits each -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    exp = _load_config(args)
    if args.workers:
        exp.workers = args.workers
    result = bench.run_evaluate(exp, args.out, args.data, figures=not args.no_figures)
    for row in result.rows:
        if row["fpr"] == exp.fpr_targets[0]:
            print(f"{row['method']:>14s} {row['distortion']:>9s} acc={row['acc']:.4f} "
                  f"tpr={row['tpr']:.4f} payload={100 * row['payload_rate']:.2f}%")
    return EXIT_OK


def cmd_train(args) -> int:
    exp = _load_config(args)
    if args.out is None:
        raise UsageError("train needs --out for the checkpoint")
    if args.epochs is not None:
        exp.train.epochs = args.epochs
    if args.strategy:
        exp.train.strategy = bench.osinet.Strategy(args.strategy)
    if not args.data.exists():
        raise bench.HarnessError(f"dataset not found: {args.data}")
    result, hist = bench.run_train(exp, args.data, args.out, seed=args.seed)
    if result.history and not args.no_figures:
        from . import plots
        plots.plot_loss_history(result.history, Path(args.out).with_suffix(".loss.png"))
    final = result.history[-1].total if result.history else float("nan")
    print(f"trained {len(result.history)} epochs, final loss {final:.5f}; checkpoint {args.out}, history {hist}")
    return EXIT_OK


def cmd_synth(args) -> int:
    exp = _load_config(args)
    if args.out is None:
        raise UsageError("synth-data needs --out")
    ds = bench.run_synth(exp, args.out, args.n, args.seed)
    print(f"wrote {len(ds)} triplets to {args.out}")
    return EXIT_OK


def cmd_capacity(args) -> int:
    exp = _load_config(args, required=False)
    f_hw = args.fhw if args.fhw is not None else (exp.f_hw if exp else 1)
    try:
        if args.shape:
            shape = LatentShape.parse(args.shape, f_hw)
        elif exp:
            shape = exp.shape.with_factor(f_hw)
        else:
            shape = LatentShape(4, 64, 64, f_hw)
        rates = chanstats.bsc_rates(args.acc, shape)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"acc={args.acc:.4f} p={rates.crossover_p:.4f} capacity={rates.capacity:.4f} "
          f"payload={100 * rates.payload_rate:.2f}% log2_users={rates.log2_users:.1f}")
    payload = {"acc": args.acc, "f_hw": f_hw, "shape": list(shape.dims), **rates.to_dict()}
    _emit(payload, args.out)
    if args.figure:
        from . import plots
        plots.plot_user_count({"acc": args.acc}, shape, args.figure)
    return EXIT_OK


def cmd_threshold(args) -> int:
    exp = _load_config(args, required=False)
    k = args.k if args.k is not None else (exp.shape.k if exp else None)
    if k is None:
        raise UsageError("threshold needs --k or a --config")
    fpr = args.fpr if args.fpr is not None else (exp.fpr_targets[0] if exp else 1e-6)
    try:
        tau, t = chanstats.threshold_for_fpr(k, fpr)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"k={k} fpr={fpr:g} tau={tau:.4f} (detect when more than {t} of {k} bits match)")
    _emit({"k": k, "fpr": fpr, "tau": tau, "t_count": t,
           "attained_fpr": chanstats.null_tail(k, t)}, args.out)
    return EXIT_OK


COMMANDS = {
    "keygen": cmd_keygen,
    "embed": cmd_embed,
    "evaluate": cmd_evaluate,
    "train": cmd_train,
    "synth-data": cmd_synth,
    "capacity": cmd_capacity,
    "threshold": cmd_threshold,
}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except (bench.HarnessError, OSError, ValueError, FloatingPointError) as exc:
        return _fail("runtime", exc, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
