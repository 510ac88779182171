"""Command-line entry point: ``ella {run,sweep,baseline,verify,gen-config}``."""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, build_run_config, default_config_text, load_settings
from .verify import run_suite

ENV_OUTPUT_DIR = "ELLA_OUTPUT_DIR"


def _build_parser():
    parser = argparse.ArgumentParser(prog="ella", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--output", help=f"output directory (default: ${ENV_OUTPUT_DIR}, then output.dir)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)")
        p.add_argument("--seed", type=int, help="override ella.seed")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
        return p

    experiment("run", "train a task stream and write metrics")
    sweep = experiment("sweep", "run one sequence per lambda value")
    sweep.add_argument("--lambdas", help="comma-separated lambda values (default: output.sweep_lambdas)")
    sweep.add_argument("--workers", type=int, default=1)
    experiment("baseline", "train every task individually from the frozen base")

    verify = sub.add_parser("verify", help="Monte-Carlo check of the shrinkage solution and bounds")
    verify.add_argument("--trials", type=int, default=10000)
    verify.add_argument("--coords", type=int, default=100000)
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--output", help="where to dump counterexamples on failure")

    gen = sub.add_parser("gen-config", help="write a commented default configuration")
    gen.add_argument("--output", help="file to write (default: stdout)")
    gen.add_argument("--force", action="store_true")
    return parser


def _output_dir(args, settings):
    if args.output:
        out = Path(args.output)
    elif os.environ.get(ENV_OUTPUT_DIR):
        out = Path(os.environ[ENV_OUTPUT_DIR])
    else:
        out = Path(str(settings["output"]["dir"]))
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    settings = load_settings(args.config, args.overrides)
    if args.seed is not None:
        settings["ella"]["seed"] = args.seed
    return settings, build_run_config(settings)


def _cmd_run(args):
    settings, config = _load(args)
    out = _output_dir(args, settings)
    result = harness.run_sequence(config, with_baseline=bool(settings["output"]["with_baseline"]))
    harness.write_run(out, result)
    m = result.metrics
    print(" ".join(f"{k}={'n/a' if v is None else format(v, '.4f')}" for k, v in m.items()))
    print(f"wrote {out}")
    return 0


def _cmd_sweep(args):
    settings, config = _load(args)
    if args.lambdas:
        lambdas = [float(v) for v in args.lambdas.split(",")]
    else:
        lambdas = [float(v) for v in settings["output"]["sweep_lambdas"]]
    out = _output_dir(args, settings)
    rows = harness.lambda_sweep(config, lambdas, workers=args.workers)
    harness.write_sweep(out / "sweep.csv", rows)
    for r in rows:
        print(f"lambda={r['lambda']:g} OA={r['OA']:.4f} BWT={r['BWT'] if r['BWT'] is None else format(r['BWT'], '.4f')}")
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def _cmd_baseline(args):
    settings, config = _load(args)
    out = _output_dir(args, settings)
    accs = [harness.single_task_baseline(config, t) for t in range(config.n_tasks)]
    with open(out / "baseline.csv", "w", encoding="utf-8") as fh:
        fh.write("task,accuracy\n")
        for t, a in enumerate(accs):
            fh.write(f"{t + 1},{a:.17g}\n")
    for t, a in enumerate(accs):
        print(f"task {t + 1}: {a:.4f}")
    return 0


def _cmd_verify(args):
    results = run_suite(trials=args.trials, seed=args.seed, coords=args.coords)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        dump = {r.name: r.counterexamples for r in failed}
        if args.output:
            path = Path(args.output)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(dump, indent=2, default=float))
            print(f"counterexamples written to {path}")
        else:
            print(json.dumps(dump, default=float)[:4000], file=sys.stderr)
        return 1
    print("all checks passed")
    return 0


def _cmd_gen_config(args):
    text = default_config_text()
    if args.output:
        path = Path(args.output)
        if path.exists() and not args.force:
            raise FileExistsError(f"{path} exists (use --force)")
        path.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "baseline": _cmd_baseline,
    "verify": _cmd_verify,
    "gen-config": _cmd_gen_config,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, FileExistsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except harness.RunAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
