"""``ncl`` command line: consensus | optimize | sweep | reproduce | validate."""

from __future__ import annotations

import argparse
import logging
import sys

from ..optimizers import ConfigError, DivergenceError
from ..transforms import DomainError
from .experiments import ExperimentConfig, load_config, run_experiment, t_epsilon_report
from .io import OutputError
from .validate import run_validation

SCENARIO_FOR = {"consensus": ("pure_consensus",), "optimize": ("optimize",), "sweep": ("sweep",),
                "reproduce": ("reproduce_fig3", "reproduce_fig4")}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ncl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("consensus", "optimize", "sweep", "reproduce", "validate"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="experiment JSON")
        s.add_argument("--seed", type=int, help="run this seed only")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--resume", action="store_true", help="reuse matching records already in --out")
        if name == "reproduce":
            s.add_argument("--figure", choices=("fig3", "fig4"), default="fig3")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _validate() -> int:
    bad = 0
    for name, ok, detail in run_validation():
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        bad += not ok
    return 1 if bad else 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "validate":
        return _validate()
    try:
        if args.config:
            cfg = load_config(args.config)
        elif args.command == "reproduce":
            cfg = ExperimentConfig(scenario=f"reproduce_{args.figure}", seeds=list(range(10)))
        else:
            raise ConfigError(f"{args.command} needs --config")
        if cfg.scenario not in SCENARIO_FOR[args.command]:
            raise ConfigError(f"config scenario {cfg.scenario!r} does not match command {args.command!r}")
        if args.seed is not None:
            cfg.seeds = [args.seed]
        out = args.out or cfg.out
        res = run_experiment(cfg, out, resume=args.resume)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (OutputError, DomainError, DivergenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if cfg.scenario == "pure_consensus":
        for r in t_epsilon_report(cfg, res):
            print(f"{r['scheme']:>12}  eps={r['eps']:g}  median T={r['median']:g}  censored={r['censored']}")
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
