"""Command line entry point.

    latentstack train --config cfg.yaml [--seed S] [--out DIR] [--layers K]
    latentstack stack --config cfg.yaml --from CKPT [--seed S] [--out DIR]
    latentstack evaluate --checkpoint CKPT [--rollouts N] [--seed S] [--out DIR]
    latentstack oracle-check [--seed S]
    latentstack report --run RUN_DIR [--rollouts N]

Exit codes: 0 success, 1 config error, 2 training divergence, 3 I/O error,
4 oracle check failed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .checkpoint import CheckpointError
from .config import ConfigError, EnvConfig, load_config
from .experiment import (EXIT_CONFIG, EXIT_IO, EXIT_OK, evaluate, render_report, run,
                         write_evaluation)

EXIT_CHECK_FAILED = 4


def _parser():
    p = argparse.ArgumentParser(prog="latentstack", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train every layer of a config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--layers", type=int, help="train only the first K layers")

    s = sub.add_parser("stack", help="add layers on top of a saved layer or stack")
    s.add_argument("--config", required=True)
    s.add_argument("--from", dest="resume", required=True, help="layer or stack checkpoint")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--layers", type=int, help="total number of layers after stacking")

    e = sub.add_parser("evaluate", help="roll out a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="take the environment from this config")
    e.add_argument("--env", help="environment name (overrides the checkpoint's)")
    e.add_argument("--rollouts", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--reward", help="reward channel to report")
    e.add_argument("--out", help="directory for the CSV and figure dump")

    o = sub.add_parser("oracle-check", help="cross-check learners against exact oracles")
    o.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("report", help="render figures for a run directory")
    r.add_argument("--run", required=True)
    r.add_argument("--rollouts", type=int, default=10)
    r.add_argument("--seed", type=int, default=0)
    return p


def _evaluate(args):
    env = None
    if args.config:
        env = load_config(args.config).env.build()
    elif args.env:
        env = EnvConfig(args.env).build()
    res = evaluate(args.checkpoint, env=env, n_rollouts=args.rollouts, seed=args.seed,
                   reward=args.reward, record=args.out is not None)
    print(f"reward_channel,{res['reward_channel']}")
    print(f"mean_return,{res['mean_return']!r}")
    print(f"std_return,{res['std_return']!r}")
    print(f"success_rate,{res['success_rate']!r}")
    if args.out:
        write_evaluation(res, args.out)
        print(f"wrote {os.path.join(args.out, 'evaluation.csv')}")
    return EXIT_OK


def _oracle_check(args):
    from .checks import run_checks
    results = run_checks(seed=args.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_CHECK_FAILED


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command in ("train", "stack"):
            res = run(args.config, seed=args.seed, out=args.out, n_layers=args.layers,
                      resume=getattr(args, "resume", None))
            if res.run_dir:
                print(res.run_dir)
            if res.error:
                print(f"error: {res.error}", file=sys.stderr)
            return res.status
        if args.command == "evaluate":
            return _evaluate(args)
        if args.command == "oracle-check":
            return _oracle_check(args)
        if args.command == "report":
            for path in render_report(args.run, n_rollouts=args.rollouts, seed=args.seed):
                print(path)
            return EXIT_OK
    except (ConfigError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
