"""Command-line entry point: ``egoforecast <command> [flags] [key=value ...]``.

Commands run in the order gen-data, train-ego, train-joint, eval; ``sample``
and ``plot`` render single scenes. Every command writes its effective
configuration next to its outputs and refreshes ``MANIFEST.sha256``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline as pl

COMMANDS = ("gen-data", "train-ego", "train-joint", "eval", "sample", "plot")

_EPILOG = f"""\
key=value overrides address the config file, e.g. train.hidden=32 data.train=200
eval.group_by='"ego_kind"'. Precedence: flags > overrides > --config > defaults.
The output root defaults to ${pl.OUT_ENV} or ./{pl.DEFAULT_OUT}.
"""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="egoforecast",
        description="Uncertainty-aware ego-motion and future object localization on synthetic driving scenes.",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "gen-data": "generate the train/val/test scene files",
        "train-ego": "train the ego-motion stream for every selected variant that needs one",
        "train-joint": "train both streams jointly for the selected box-table variants",
        "eval": "run the benchmark and write reports/report.{txt,tsv}",
        "sample": "dump one test scene's sampled forecast as JSON",
        "plot": "render a dumped forecast as an SVG figure",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name], epilog=_EPILOG,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--out", type=Path, help="output root directory")
        p.add_argument("--seed", type=int, help="seed for data, initialization, shuffling and sampling")
        p.add_argument("--variants", help="comma-separated variant tags, 'reference' or 'all'")
        p.add_argument("--k", type=int, help="samples per stochastic variant (best-of-k)")
        p.add_argument("--n-dropout", dest="n_dropout", type=int, help="MC-dropout passes per forecast")
        p.add_argument("--epochs", type=int, help="epochs for both training phases")
        if name in ("train-ego", "train-joint"):
            p.add_argument("--jobs", type=int, default=1, help="train variants in parallel processes")
        if name in ("sample", "plot"):
            p.add_argument("--scene", required=True, help="test scene id, e.g. test-0003")
            p.add_argument("--variant", required=True, help="variant tag")
        p.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = args.out or pl.default_output_root()
    try:
        cfg = pl.resolve_config(
            args.config, args.overrides,
            {"seed": args.seed, "variants": args.variants, "k": args.k,
             "n_dropout": args.n_dropout, "epochs": args.epochs},
        )
        out.mkdir(parents=True, exist_ok=True)
        pl.write_effective_config(out, args.command, cfg)
        _run(args, out, cfg)
        pl.write_manifest(out)
    except (KeyError, ValueError, FileNotFoundError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {_message(exc)}", file=sys.stderr)
        return 1
    return 0


def _message(exc: BaseException) -> str:
    text = str(exc)
    if isinstance(exc, KeyError) and len(exc.args) == 1 and text == repr(exc.args[0]):
        text = str(exc.args[0])
    return " ".join(text.split())


def _run(args, out: Path, cfg: dict) -> None:
    cmd = args.command
    if cmd == "gen-data":
        for split, path in pl.gen_data(out, cfg).items():
            print(f"{split}: {path}")
    elif cmd == "train-ego":
        for tag in pl.run_train_ego(out, cfg, args.jobs):
            print(f"trained ego stream: {pl.ckpt_path(out, 'ego', tag)}")
    elif cmd == "train-joint":
        for tag in pl.run_train_joint(out, cfg, args.jobs):
            print(f"trained joint model: {pl.ckpt_path(out, 'joint', tag)}")
    elif cmd == "eval":
        report = pl.run_eval(out, cfg)
        print(report.to_text(), end="")
    elif cmd == "sample":
        print(pl.run_sample(out, cfg, args.scene, args.variant))
    elif cmd == "plot":
        print(pl.run_plot(out, args.scene, args.variant))


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
