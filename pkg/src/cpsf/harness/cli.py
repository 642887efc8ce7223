"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from ..exceptions import CPSFError
from . import pipeline
from .config import load_config

log = logging.getLogger("cpsf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_globals(p, defaults=True):
    # globals are accepted before or after the subcommand
    sup = argparse.SUPPRESS
    p.add_argument("--config", metavar="PATH", default=None if defaults else sup, help="TOML experiment config")
    p.add_argument("--seed", metavar="U64", type=_u64, default=0 if defaults else sup, help="master seed")
    p.add_argument("--out", metavar="DIR", default="artifacts" if defaults else sup, help="artifact directory")
    p.add_argument("-v", "--verbose", action="store_true", default=False if defaults else sup)


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64), got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cpsf", description="Conformal predictive safety filter experiments")
    _add_globals(parser)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        _add_globals(p, defaults=False)
        return p

    cmd("gen-data", "generate agents-only datasets (JSONL)")
    cmd("train-predictor", "train the trajectory predictor")
    cmd("calibrate", "conformal radii and calibration coverage CSV")
    cmd("fit-gaussian", "Gaussian-quantile radii baseline")
    p = cmd("train-filter", "train safety filters")
    p.add_argument("--policy", action="append", help="nominal policy (repeatable; default from config)")
    p.add_argument("--radii", choices=("conformal", "gaussian"), default="conformal")
    p = cmd("run", "roll out one closed-loop episode")
    p.add_argument("--controller", default="cpsf-aggressive")
    p.add_argument("--episode", type=int, default=0, help="index in the evaluation seed stream")
    p = cmd("evaluate", "paired-seed evaluation; metrics CSV and report JSON")
    p.add_argument("--controller", action="append", help="controller name (repeatable; default from config)")
    p.add_argument("--episodes", type=int, default=None)
    p = cmd("coverage-report", "per-step coverage CSV and SVG on the test split")
    p.add_argument("--radii", choices=("conformal", "gaussian"), default="conformal")
    cmd("shift-diagnostic", "error histograms by minimum inter-agent distance")
    p = cmd("predict", "predict from one episode JSONL line")
    p.add_argument("--input", default="-", help="file holding one JSONL episode line, '-' for stdin")
    p.add_argument("--t", type=int, default=None, help="cut index (default: last step)")
    return parser


def _dispatch(args) -> None:
    cfg = load_config(args.config)
    out, seed = args.out, args.seed
    c = args.command
    if c == "gen-data":
        m = pipeline.gen_data(cfg, seed, out)
        print(json.dumps(m["sizes"], sort_keys=True))
    elif c == "train-predictor":
        pipeline.train_predictor(cfg, seed, out)
    elif c == "calibrate":
        r = pipeline.run_calibration(cfg, out)
        print(json.dumps(r.to_dict(), sort_keys=True))
    elif c == "fit-gaussian":
        r = pipeline.run_fit_gaussian(cfg, out)
        print(json.dumps(r.to_dict(), sort_keys=True))
    elif c == "train-filter":
        for policy in args.policy or cfg.filter.policies:
            est = pipeline.train_filter(cfg, seed, out, policy, args.radii)
            log.info("filter %s/%s: final penalty %g, val violation rate %.4f", policy, args.radii,
                     est.final_penalty_, est.val_violation_rate_)
    elif c == "run":
        from .config import STREAM_EVAL
        from ..agents import episode_seed

        rec, m = pipeline.run_episode(cfg, out, args.controller, episode_seed(seed, args.episode, STREAM_EVAL))
        print(rec.to_json())
        log.info("collided=%s failed=%s time_to_goal=%.2f", m.collided, m.failed, m.time_to_goal)
    elif c == "evaluate":
        report = pipeline.run_evaluation(cfg, seed, out, args.controller, args.episodes)
        print(json.dumps(report.controllers, sort_keys=True, indent=1))
    elif c == "coverage-report":
        pipeline.run_coverage_report(cfg, out, args.radii)
    elif c == "shift-diagnostic":
        res = pipeline.run_shift_diagnostic(cfg, out)
        print(json.dumps({"first_three_similar": res["first_three_similar"]}))
    elif c == "predict":
        text = sys.stdin.read() if args.input == "-" else open(args.input).read()
        line = next((ln for ln in text.splitlines() if ln.strip()), "")
        print(json.dumps(pipeline.predict_from_line(out, line, args.t)))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except (CPSFError, ValueError, OSError, KeyError) as exc:
        print(f"cpsf {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
