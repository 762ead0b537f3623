"""Command line entry point.

Subcommands: ``anneal``, ``check``, ``gibbs-toy`` and ``dump``. Every output is
UTF-8 JSON or JSONL. Exit status is 2 for bad configuration, 1 for a failing
check suite and 0 otherwise.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys

import numpy as np

from combinfer.errors import ConfigError

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _seed(value):
    if value is not None:
        return value
    env = os.environ.get("COMBINFER_SEED")
    if env is None:
        # Not reproducible; the drawn seed is still reported in the output.
        return int(np.random.SeedSequence().entropy % (2**32))
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"COMBINFER_SEED must be an integer, got {env!r}") from None


@contextlib.contextmanager
def _open_out(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            yield fh


def _anneal_config(args):
    from combinfer.annealing import AnnealConfig

    config = AnnealConfig(
        variant=args.variant,
        K=args.K,
        budget=args.budget,
        iters=args.iters,
        lr=args.lr,
        seed=_seed(args.seed),
        eval_batches=args.eval_batches,
        eval_size=args.eval_size,
        objective=args.objective,
        threads=args.threads,
    )
    config.validate()
    return config


def cmd_anneal(args) -> int:
    from combinfer.annealing import train

    config = _anneal_config(args)
    with contextlib.ExitStack() as stack:
        sink = stack.enter_context(_open_out(args.out))
        trace_sink = None
        if args.dump_trace:
            trace_path = None if args.out in (None, "-") else args.out + ".trace.json"
            trace_sink = stack.enter_context(_open_out(trace_path))
        summary = train(config, sink, trace_sink)
    if args.out not in (None, "-"):
        print(json.dumps(summary))
    return EXIT_OK


def cmd_dump(args) -> int:
    from combinfer.annealing import Annealer

    annealer = Annealer(_anneal_config(args))
    with _open_out(args.out) as fh:
        fh.write(json.dumps(annealer.dump()) + "\n")
    return EXIT_OK


def cmd_check(args) -> int:
    from combinfer.checks import SUITES

    names = list(SUITES) if args.suite == "all" else [args.suite]
    ok = True
    with _open_out(args.out) as fh:
        for name in names:
            result = SUITES[name]()
            ok &= result.passed
            status = "PASS" if result.passed else "FAIL"
            fh.write(json.dumps({"suite": name, "status": status, **result.detail}) + "\n")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_gibbs(args) -> int:
    from combinfer.gibbs import GibbsConfig, train_toy

    if args.sweeps < 1 or args.iters < 0 or args.samples < 2 or args.batch < 1:
        raise ConfigError("sweeps >= 1, iters >= 0, samples >= 2 and batch >= 1 are required")
    config = GibbsConfig(
        sweeps=args.sweeps, samples=args.samples, batch=args.batch, iters=args.iters, lr=args.lr, seed=_seed(args.seed)
    )
    with _open_out(args.out) as fh:
        summary = train_toy(config, sink=fh)
    if args.out not in (None, "-"):
        print(json.dumps(summary))
    return EXIT_OK


def _sampler_flags(p, iters=True):
    from combinfer.annealing import OBJECTIVES, VARIANTS

    p.add_argument("--variant", choices=VARIANTS, default="nvir-star")
    p.add_argument("--objective", choices=OBJECTIVES, default="nvi")
    p.add_argument("--K", type=int, default=8)
    p.add_argument("--budget", type=int, default=288)
    if iters:
        p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--eval-batches", type=int, default=20)
    p.add_argument("--eval-size", type=int, default=500)
    p.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    from combinfer.checks import SUITES

    parser = argparse.ArgumentParser(prog="combinfer")
    sub = parser.add_subparsers(dest="command", required=True)

    anneal = sub.add_parser("anneal", help="train an annealed sampler and write JSONL metrics")
    _sampler_flags(anneal)
    anneal.add_argument("--dump-trace", action="store_true", help="also write a final trace to OUT.trace.json")
    anneal.set_defaults(handler=cmd_anneal)

    check = sub.add_parser("check", help="run enumeration-based verification suites")
    check.add_argument("--suite", choices=["all", *SUITES], default="all")
    check.add_argument("--out", default=None)
    check.set_defaults(handler=cmd_check)

    gibbs = sub.add_parser("gibbs-toy", help="train the population Gibbs sampler on the toy mixture")
    gibbs.add_argument("--sweeps", type=int, default=2)
    gibbs.add_argument("--samples", type=int, default=20)
    gibbs.add_argument("--batch", type=int, default=10)
    gibbs.add_argument("--iters", type=int, default=300)
    gibbs.add_argument("--lr", type=float, default=5e-2)
    gibbs.add_argument("--seed", type=int, default=None)
    gibbs.add_argument("--out", default=None)
    gibbs.set_defaults(handler=cmd_gibbs)

    dump = sub.add_parser("dump", help="serialize one run of an untrained annealed sampler")
    _sampler_flags(dump, iters=False)
    dump.set_defaults(handler=cmd_dump, iters=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"combinfer: {exc}", file=sys.stderr)
        return EXIT_CONFIG
