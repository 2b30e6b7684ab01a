"""Command line entry point: ``freedom {run,verify,compare,render}``.

Exit status 0 means every threshold was met, 1 a threshold failure and 2 a
configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import ConfigurationError, load_config
from .harness import SUMMARY_COLUMNS, COMPARE_COLUMNS, file_meta, run_experiment
from .oracle import OracleSampler, grid_posterior
from .render import ImageSpec, RenderError, render_density, write_pgm
from .tasks import TASKS, get_task
from .traceio import read_samples, write_table

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _print_table(rows, columns, out):
    print(",".join(columns), file=out)
    for r in rows:
        print(",".join(f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]) for c in columns), file=out)


def _load(args):
    if not args.config:
        raise ConfigurationError("--config", "required for this verb")
    return load_config(args.config).with_overrides(seed=args.seed, out_dir=args.out)


def cmd_run(args, out) -> int:
    cfg = _load(args)
    arts = run_experiment(cfg, workers=args.workers)
    print(f"# config_hash={arts.config_hash}", file=out)
    _print_table(arts.summary, SUMMARY_COLUMNS, out)
    for key, ok in arts.verdicts.items():
        print(f"[{'PASS' if ok else 'FAIL'}] {key}", file=out)
    return EXIT_OK if arts.passed else EXIT_FAIL


def cmd_compare(args, out) -> int:
    cfg = _load(args)
    if len(cfg.arms) < 2:
        raise ConfigurationError("arms", "compare needs at least two arms")
    arts = run_experiment(cfg, workers=args.workers)
    print(f"# config_hash={arts.config_hash}", file=out)
    _print_table(arts.comparison, COMPARE_COLUMNS, out)
    return EXIT_OK if arts.passed else EXIT_FAIL


def cmd_verify(args, out) -> int:
    if args.task is not None:
        try:
            tasks = [get_task(args.task)]
        except KeyError as exc:
            raise ConfigurationError("--task", exc.args[0]) from None
    else:
        tasks = list(TASKS.values())
    seed = 0 if args.seed is None else args.seed
    rows, ok = [], True
    for task in tasks:
        res = task.evaluate(seed)
        print(res.line(), file=out)
        ok = ok and res.passed
        rows.append({"task": task.name, "oracle": task.oracle, "seed": seed, "passed": res.passed})
    if args.out:
        write_table(rows, ["task", "oracle", "seed", "passed"], Path(args.out) / "verify.csv")
    return EXIT_OK if ok else EXIT_FAIL


def _image_spec(args) -> ImageSpec:
    b = args.bounds
    try:
        return ImageSpec(((b[0], b[1]), (b[2], b[3])), args.size, args.size, args.mapping)
    except RenderError as exc:
        raise ConfigurationError("--bounds/--size/--mapping", str(exc)) from None


def cmd_render(args, out) -> int:
    spec = _image_spec(args)
    if not args.out:
        raise ConfigurationError("--out", "required for render")
    dest = Path(args.out)
    written = []
    if args.input:
        x, meta = read_samples(args.input)
        path = dest if dest.suffix == ".pgm" else dest / (Path(args.input).stem + ".pgm")
        written.append(write_pgm(render_density(x, spec), path, comment=f"source={args.input}"))
    elif args.task:
        try:
            task = get_task(args.task)
        except KeyError as exc:
            raise ConfigurationError("--task", exc.args[0]) from None
        if task.model.dim != 2:
            raise ConfigurationError("--task", "render needs a 2-D task")
        grid = grid_posterior(OracleSampler(task.model, task.stack, 1.0, "grid"), spec.bounds, 200)
        path = dest if dest.suffix == ".pgm" else dest / f"{task.name}-oracle.pgm"
        written.append(write_pgm(render_density(grid, spec), path, comment=f"task={task.name} lambda=1"))
    else:
        cfg = _load(args)
        if cfg.model.dim != 2:
            raise ConfigurationError("model", "render needs a 2-D model")
        arts = run_experiment(cfg, workers=args.workers)
        for r in arts.runs:
            meta = file_meta(cfg, r.arm, r.seed, cfg.arm_configs()[r.arm])
            comment = "\n".join(f"{k}={v}" for k, v in sorted(meta.items()))
            written.append(write_pgm(render_density(r.samples, spec),
                                     arts.out_dir / "images" / r.arm / f"seed-{r.seed}.pgm", comment=comment))
    for p in written:
        print(p, file=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freedom", description="Energy-guided diffusion sampling experiments.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="experiment JSON")
        p.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--task", help="registered benchmark task")
        p.add_argument("--workers", type=int, default=1, help="processes for running seeds")
        return p

    common(sub.add_parser("run", help="sample every arm and seed and write artifacts"))
    common(sub.add_parser("compare", help="paired comparison of two or more arms"))
    common(sub.add_parser("verify", help="run task oracle suites (all tasks unless --task)"))
    r = common(sub.add_parser("render", help="write PGM density images"))
    r.add_argument("--input", help="samples CSV to render")
    r.add_argument("--size", type=int, default=128)
    r.add_argument("--bounds", type=float, nargs=4, default=(-6.0, 6.0, -6.0, 6.0),
                   metavar=("XLO", "XHI", "YLO", "YHI"))
    r.add_argument("--mapping", choices=("linear", "log"), default="linear")
    return parser


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "verify": cmd_verify, "render": cmd_render}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.seed is not None and not (0 <= args.seed < 2**64):
        print("error: --seed: expected a 64-bit unsigned integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.workers < 1:
        print("error: --workers: expected a positive integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.verb](args, out)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
