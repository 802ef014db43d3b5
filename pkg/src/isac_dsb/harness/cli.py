"""Command line entry point: ``isac-dsb {gen-dataset,train,eval,verify}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

THREADS_ENV = "ISAC_DSB_THREADS"


def _configure_threads() -> None:
    n = os.environ.get(THREADS_ENV)
    if n:
        import torch

        torch.set_num_threads(int(n))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="nested JSON config (defaults used when omitted)")
    common.add_argument("--seed", type=int, default=0, help="experiment seed (u64)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output root")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config leaf by dotted path, e.g. dsb.epochs=2")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="isac-dsb", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-dataset", parents=[common], help="synthesize targets and channels")
    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("--stage", choices=["ae", "fm", "dsb"], required=True)
    t.add_argument("--final-noise", action="store_true", help="noise on the last backward step as well")
    e = sub.add_parser("eval", parents=[common], help="evaluation sweep to CSV")
    e.add_argument("--scenario", choices=["sense", "reconstruct"], required=True)
    e.add_argument("--sweep", choices=["snr", "location"], required=True)
    sub.add_parser("verify", parents=[common], help="run the quick oracle suite")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    _configure_threads()

    from .config import ConfigError, load_config
    from .pipeline import StageError, cmd_eval, cmd_gen_dataset, cmd_train
    from .tensorio import atomic_write_bytes
    from .verify import run_verify

    try:
        overrides = list(args.overrides)
        if getattr(args, "final_noise", False):
            overrides.append("dsb.final_noise=true")
        cfg = load_config(args.config, dotted=overrides)
        say = (lambda *a: print(*a, file=sys.stderr)) if args.verbose else None
        if args.command == "gen-dataset":
            d = cmd_gen_dataset(cfg, args.seed, args.out, progress=(lambda i, n, t: say(f"{i}/{n} {t:.0f}s")) if say else None)
            print(d)
        elif args.command == "train":
            print(cmd_train(cfg, args.seed, args.out, args.stage, progress=(lambda *a: say(*a)) if say else None))
        elif args.command == "eval":
            print(cmd_eval(cfg, args.seed, args.out, args.scenario, args.sweep, progress=say))
        elif args.command == "verify":
            text = run_verify(args.seed)
            path = args.out / f"verify-seed{args.seed}.csv"
            atomic_write_bytes(path, text.encode())
            sys.stdout.write(text)
            if any(line.endswith(",0") for line in text.splitlines()[1:]):
                return 1
    except (ConfigError, StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
