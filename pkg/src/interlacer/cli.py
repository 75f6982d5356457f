"""``interlacer`` command line: gen, train, eval, bench, plan, render.

Exit status is 0 on success, 2 for invalid configuration or inputs and 3
for I/O failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import commands
from .config import (BenchConfig, EvalConfig, GenConfig, PlanConfig, RenderConfig, TrainConfig, from_dict,
                     load_config)
from .errors import ValidationError

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 2, 3

CONFIGS = {
    "gen": GenConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "bench": BenchConfig,
    "plan": PlanConfig,
    "render": RenderConfig,
}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on its own, which matches the invalid-input code
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="interlacer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in CONFIGS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON file; a top-level key named after the command "
                                                   "selects that section")
        p.add_argument("--seed", type=int, help="overrides the config seed (unsigned 64-bit)")
        p.add_argument("--out", type=Path, default=Path(f"{name}_out"), help="output directory")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from a checkpoint in --out")
    return parser


def resolve_config(command: str, path: Path | None, seed: int | None):
    cls = CONFIGS[command]
    cfg = load_config(cls, path, command) if path is not None else from_dict(cls, {}, command)
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise ValidationError(f"--seed must be an unsigned 64-bit integer, got {seed}")
        cfg.seed = seed
    return cfg


def _print(obj):
    print(json.dumps(obj, default=str), flush=True)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args.command, args.config, args.seed)
    out = args.out
    if args.command == "gen":
        manifest = commands.cmd_gen(cfg, out)
        _print({"out": str(out), "counts": manifest["counts"]})
    elif args.command == "train":
        result = commands.cmd_train(cfg, out, resume=args.resume, log=_print)
        _print({"checkpoint": result["checkpoint"], "steps": result["steps"]})
    elif args.command == "eval":
        result = commands.cmd_eval(cfg, out)
        _print({k: v for k, v in result.items() if k != "per_snippet_particle_mse"})
    elif args.command == "bench":
        report = commands.run_bench(cfg, out, log=lambda r: _print({
            "arch": r.arch, "n": r.n, "median_seconds": r.median_seconds, "peak_bytes": r.peak_bytes,
            "status": r.status, "reason": r.reason}))
        summary = {a: {"time_slope": report.time_slope(a), "memory_r2": report.memory_r2(a)} for a in cfg.archs}
        _print(summary)
    elif args.command == "plan":
        for row in commands.cmd_plan(cfg, out):
            _print(row)
    elif args.command == "render":
        paths = commands.cmd_render(cfg, out)
        _print({"images": len(paths), "out": str(out)})
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except ValidationError as e:  # includes configuration errors
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
