"""Command-line entry point: ``gentune <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from gentune.case_model import CaseError, PowerFlowError
from gentune.config import ConfigError, load_case, load_config
from gentune.pipeline import (
    Manifest,
    StageError,
    design_from_csv,
    input_digests,
    parse_bounds,
    read_params,
    rsm_factor_letters,
    run_pipeline,
    run_stage,
    stage_anova,
    stage_optimize,
    stage_rsm,
    stage_screen,
    stage_validate,
    write_json,
    write_text,
)
from gentune.rsm import ModelSpecError, RankDeficientError
from gentune.simulator import SimulationError, run_simulation

log = logging.getLogger("gentune")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)  # noqa: E731
    p.add_argument("--config", default=d(None), help="pipeline config (.toml or .json)")
    p.add_argument("--out-dir", default=d(None), help="output directory")
    p.add_argument("--seed", type=_u64, default=d(None), help="base seed override")
    p.add_argument("--threads", type=_positive, default=d(None), help="worker threads")
    p.add_argument("--verbose", "-v", action="count", default=d(0))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gentune", parents=[_global_flags(True)],
                     description="Stochastic-load controller tuning by DOE, ANOVA and RSM.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = [_global_flags(False)]

    p = sub.add_parser("simulate", parents=g, help="simulate one run and write its trace")
    p.add_argument("--case", help="bundled case name or case JSON path")
    p.add_argument("--params", help="JSON parameter file or NAME=VALUE,... list")
    p.add_argument("--out", help="trace CSV path (sidecar JSON written next to it)")

    sub.add_parser("screen", parents=g, help="2^k screening experiment")

    p = sub.add_parser("anova", parents=g, help="ANOVA with assumption checks on screening files")
    p.add_argument("--responses", required=True, help="screening responses CSV")
    p.add_argument("--design", help="design CSV (default: next to the responses)")
    p.add_argument("--selected", help="comma-separated effects, e.g. D,E,F,DE "
                                      "(default: flagged by screening)")
    p.add_argument("--transform", default="auto", help="none | auto | <lambda>")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--center", choices=("mean", "median"), default="mean")

    p = sub.add_parser("rsm", parents=g, help="3^k experiment and response-surface fit")
    p.add_argument("--model", help="model string, e.g. '1,x1,x2,x2^2,x1^2*x2'")
    p.add_argument("--factors", help="comma-separated factor letters (default from config)")
    p.add_argument("--out", dest="out_alias", help="alias for --out-dir")

    p = sub.add_parser("optimize", parents=g, help="minimize a fitted surface over a box")
    p.add_argument("--model-file", required=True)
    p.add_argument("--bounds", help="NAME=LO:HI,... (default: bounds stored in the model)")
    p.add_argument("--normal", help="JSON file of normal parameter values to merge")

    p = sub.add_parser("validate", parents=g, help="compare two parameter sets by t test")
    p.add_argument("--case", help="bundled case name or case JSON path")
    p.add_argument("--params-a", help="JSON parameter file for set A (default: normal values)")
    p.add_argument("--params-b", required=True, help="JSON parameter file for set B")
    p.add_argument("--n", type=int, default=None, help="replicates per set (default 20)")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--paired-seeds", action="store_true",
                   help="reuse set A's seeds for set B")

    sub.add_parser("pipeline", parents=g, help="screen, anova, rsm, optimize, validate")
    return parser


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "case", None):
        load_case(args.case)  # fail early on a bad path
        cfg = replace(cfg, case=args.case, base_dir=".")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out_dir(args, cfg=None) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    if cfg is not None and args.config:
        return Path(cfg.out_dir) if Path(cfg.out_dir).is_absolute() else \
            Path(cfg.base_dir) / cfg.out_dir
    return Path(cfg.out_dir if cfg is not None else "gentune-out")


def _threads(args, cfg) -> int:
    return args.threads if args.threads is not None else cfg.threads


def _echo(text: str) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()


def _parse_params(text: str | None) -> dict[str, float]:
    if not text:
        return {}
    if Path(text).is_file() or text.endswith(".json"):
        return read_params(Path(text))
    out = {}
    for part in text.split(","):
        try:
            k, v = part.split("=")
            out[k.strip()] = float(v)
        except ValueError:
            raise ConfigError(f"bad parameter entry {part!r}; expected NAME=VALUE") from None
    return out


def cmd_simulate(args) -> int:
    cfg = _config(args)
    case = load_case(cfg.case, cfg.base_dir)
    params = dict(cfg.normal)
    params.update(_parse_params(args.params))
    sim = replace(cfg.simulation, seed=cfg.seed)
    out = Path(args.out) if args.out else _out_dir(args, cfg) / "trace.csv"
    trace = run_simulation(case, params, sim)
    write_text(out, trace.to_csv())
    write_json(out.with_suffix(".json"), trace.sidecar(sim))
    _echo(f"wrote {out} ({len(trace.time)} rows)\n")
    return EXIT_OK


def _single_stage(args, cfg, name, inputs, fn) -> int:
    root = _out_dir(args, cfg)
    root.mkdir(parents=True, exist_ok=True)
    manifest = Manifest.load(root)
    manifest.config_digest = cfg.digest() if cfg is not None else manifest.config_digest
    run_stage(manifest, name, inputs, fn, cfg.digest() if cfg is not None else "", True, _echo)
    return EXIT_OK


def cmd_screen(args) -> int:
    cfg = _config(args)
    root = _out_dir(args, cfg)
    return _single_stage(args, cfg, "screen", [],
                         lambda: stage_screen(cfg, root, _threads(args, cfg)))


def cmd_anova(args) -> int:
    if args.selected is not None and not args.selected.strip():
        raise ConfigError("--selected must name at least one effect")
    responses = Path(args.responses).resolve()
    design = Path(args.design).resolve() if args.design else responses.parent / "design.csv"
    for p in (responses, design):
        if not p.is_file():
            raise ConfigError(f"file not found: {p}")
    design_from_csv(design)
    root = Path(args.out_dir or "gentune-out")
    root.mkdir(parents=True, exist_ok=True)
    manifest = Manifest.load(root)
    fn = lambda: stage_anova(root, design, responses, args.selected,  # noqa: E731
                             args.transform, args.alpha, args.center)
    settings = json.dumps([args.selected, args.transform, args.alpha, args.center])
    run_stage(manifest, "anova", [design, responses], fn, settings, True, _echo)
    return EXIT_OK


def cmd_rsm(args) -> int:
    cfg = _config(args)
    if args.out_alias and not args.out_dir:
        args.out_dir = args.out_alias
    root = _out_dir(args, cfg)
    if args.factors:
        letters = [s.strip() for s in args.factors.split(",") if s.strip()]
    else:
        letters = rsm_factor_letters(cfg, root)
    return _single_stage(args, cfg, "rsm", [],
                         lambda: stage_rsm(cfg, root, letters, args.model, _threads(args, cfg)))


def cmd_optimize(args) -> int:
    model = Path(args.model_file).resolve()
    if not model.is_file():
        raise ConfigError(f"model file not found: {model}")
    bounds = parse_bounds(args.bounds) if args.bounds else None
    normal = read_params(Path(args.normal)) if args.normal else None
    root = Path(args.out_dir or "gentune-out")
    root.mkdir(parents=True, exist_ok=True)
    manifest = Manifest.load(root)
    fn = lambda: stage_optimize(root, model, bounds, normal)  # noqa: E731
    run_stage(manifest, "optimize", [model], fn, json.dumps([args.bounds, args.normal]), True,
              _echo)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _config(args)
    pa = read_params(Path(args.params_a)) if args.params_a else dict(cfg.normal)
    pb = read_params(Path(args.params_b))
    root = _out_dir(args, cfg)
    inputs = [Path(p).resolve() for p in (args.params_a, args.params_b) if p]
    return _single_stage(args, cfg, "validate", inputs, lambda: stage_validate(
        cfg, root, {**cfg.normal, **pa}, {**cfg.normal, **pb}, args.n, args.alpha,
        args.paired_seeds, _threads(args, cfg)))


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    root = _out_dir(args, cfg)
    run_pipeline(cfg, root, _threads(args, cfg), _echo)
    _echo(f"pipeline complete; manifest at {root / 'manifest.json'}\n")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "screen": cmd_screen, "anova": cmd_anova, "rsm": cmd_rsm,
            "optimize": cmd_optimize, "validate": cmd_validate, "pipeline": cmd_pipeline}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"gentune: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        print(f"gentune: {exc}", file=sys.stderr)
        return exc.exit_code
    except SimulationError as exc:
        print(f"gentune: numerical failure: {exc} (step {exc.step}, residual {exc.residual:.3g}, "
              f"iterations {exc.iterations})", file=sys.stderr)
        return EXIT_NUMERIC
    except PowerFlowError as exc:
        print(f"gentune: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CaseError, ModelSpecError, RankDeficientError, KeyError,
            ValueError, FileNotFoundError) as exc:
        print(f"gentune: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
